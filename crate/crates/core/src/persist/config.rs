//! TOML run configuration.
//!
//! One file holds every setting of a run, grouped in sections:
//!
//! ```toml
//! version = 1
//! seed = 7
//! out_dir = "runs/toy"
//! strict_paper_grid = false
//!
//! [data]           # dataset directory, TSV schema, synthetic generator
//! [model]          # teacher and student architecture
//! [teacher_train]  # epochs, batch_size, lr, eval_batch_size, epoch_eval
//! [student_train]
//! [distill]        # temperature, kl_teacher_first, fsp_divisor, layer_map_rule
//! [ksm]            # actor-critic and episode settings
//! [baseline]
//! [sweep]
//! ```
//!
//! Every key is optional; omitted keys take their defaults and unknown keys
//! are rejected. `key.path=value` overrides are applied to the parsed file
//! before it is interpreted.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{SyntheticSpec, TsvSchema};
use crate::engine::{SweepGrid, TrainConfig};
use crate::ksm::KsmConfig;
use crate::losses::{DistillConfig, Weights};
use crate::models::EncoderConfig;

use super::{io_err, PersistError, Result};

pub const CONFIG_VERSION: u32 = 1;

/// Student learning rates searched in the reference setup.
pub const REFERENCE_STUDENT_LRS: [f64; 3] = [2e-5, 3e-5, 5e-5];
const REFERENCE_LAMBDA: [f64; 3] = [0.1, 0.2, 0.3];
const REFERENCE_PHASE_SIZE: [usize; 4] = [32, 64, 96, 128];
const REFERENCE_ALPHA: [f64; 2] = [0.1, 0.2];
const REFERENCE_GAMMA: f64 = 0.98;
const REFERENCE_KSM_LR: f64 = 2e-4;
const REFERENCE_FEATURE_SIZE: usize = 8;
const REFERENCE_KSM_HIDDEN: usize = 256;

/// Where the splits live. `make-data` writes `train.tsv`, `dev.tsv` and
/// `test.tsv` into `dir` from the synthetic generator; every other command
/// reads them back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dir: PathBuf,
    /// Seed of the synthetic generator, independent of the training seed.
    pub seed: u64,
    pub schema: TsvSchema,
    /// Defaults to the synthetic generator's class count.
    pub num_classes: Option<usize>,
    pub synthetic: SyntheticSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: PathBuf::from("data"),
            seed: 0,
            schema: TsvSchema::default(),
            num_classes: None,
            synthetic: SyntheticSpec::default(),
        }
    }
}

impl DataConfig {
    pub fn num_classes(&self) -> usize {
        self.num_classes.unwrap_or(self.synthetic.num_classes)
    }

    pub fn split_path(&self, split: &str) -> PathBuf {
        self.dir.join(format!("{split}.tsv"))
    }
}

/// Shared architecture of teacher and student; they differ only in depth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub teacher_layers: usize,
    pub student_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub intermediate_size: usize,
    /// Tokens per example including the leading CLS.
    pub max_seq_len: usize,
    pub dropout: f64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            teacher_layers: 4,
            student_layers: 2,
            hidden_size: 64,
            num_heads: 4,
            intermediate_size: 128,
            max_seq_len: 16,
            dropout: 0.1,
            init_std: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn teacher(&self, vocab_size: usize, num_classes: usize) -> EncoderConfig {
        EncoderConfig {
            num_layers: self.teacher_layers,
            hidden_size: self.hidden_size,
            num_heads: self.num_heads,
            intermediate_size: self.intermediate_size,
            vocab_size,
            max_seq_len: self.max_seq_len,
            num_classes,
            dropout: self.dropout,
            init_std: self.init_std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub trials: usize,
    /// Weights of `baseline fixed`, in finetune, response, feature, relation order.
    pub fixed_weights: Weights,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            trials: 50,
            fixed_weights: [1.0; 4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub grid: SweepGrid,
    /// Worker threads; each grid point writes to its own directory.
    pub threads: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            grid: SweepGrid::default(),
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Restrict KSM and student settings to the reference search space.
    pub strict_paper_grid: bool,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub teacher_train: TrainConfig,
    pub student_train: TrainConfig,
    pub distill: DistillConfig,
    pub ksm: KsmConfig,
    pub baseline: BaselineConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            strict_paper_grid: false,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            teacher_train: TrainConfig::default(),
            student_train: TrainConfig::default(),
            distill: DistillConfig::default(),
            ksm: KsmConfig::default(),
            baseline: BaselineConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

/// Parses `raw` as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies one `a.b.c=value` override, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment.split_once('=').ok_or_else(|| {
        PersistError::Config(format!(
            "override `{assignment}` is not of the form key=value"
        ))
    })?;
    let keys: Vec<&str> = path.trim().split('.').map(str::trim).collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(PersistError::Config(format!(
            "override `{assignment}` has an empty key"
        )));
    }
    let (last, parents) = keys.split_last().expect("split yields at least one key");
    let mut cur = table;
    for k in parents {
        let entry = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
        cur = entry.as_table_mut().ok_or_else(|| {
            PersistError::Config(format!("override `{path}`: `{k}` is not a section"))
        })?;
    }
    cur.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Parses a configuration document and applies `overrides` in order.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| PersistError::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| PersistError::Config(e.to_string()))?;
        if cfg.version != CONFIG_VERSION {
            return Err(PersistError::Version {
                found: cfg.version,
                expected: CONFIG_VERSION,
            });
        }
        Ok(cfg)
    }

    /// Reads `path`, or starts from the defaults when no file is given.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| io_err(p, e))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run configuration serializes to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: &dyn std::fmt::Display| PersistError::Config(e.to_string());
        self.data.synthetic.validate().map_err(|e| cfg(&e))?;
        if self.data.num_classes() < 2 {
            return Err(PersistError::Config("need at least two classes".into()));
        }
        let m = &self.model;
        if m.student_layers == 0 || m.student_layers > m.teacher_layers {
            return Err(PersistError::Config(format!(
                "student depth {} must lie in 1..={}",
                m.student_layers, m.teacher_layers
            )));
        }
        m.teacher(1, self.data.num_classes())
            .validate()
            .map_err(|e| cfg(&e))?;
        self.teacher_train.validate().map_err(|e| cfg(&e))?;
        self.student_train.validate().map_err(|e| cfg(&e))?;
        self.distill.validate().map_err(|e| cfg(&e))?;
        self.ksm.validate().map_err(|e| cfg(&e))?;
        self.sweep.grid.points(&self.ksm).map_err(|e| cfg(&e))?;
        if self.baseline.trials == 0 {
            return Err(PersistError::Config(
                "baseline.trials must be positive".into(),
            ));
        }
        if self.strict_paper_grid {
            self.check_reference_grid()?;
        }
        Ok(())
    }

    /// Every KSM setting, sweep axis included, and the student learning rate
    /// must come from the reference candidate sets.
    fn check_reference_grid(&self) -> Result<()> {
        fn within<V: PartialEq + std::fmt::Debug>(name: &str, v: &V, allowed: &[V]) -> Result<()> {
            if allowed.contains(v) {
                Ok(())
            } else {
                Err(PersistError::Config(format!(
                    "strict_paper_grid: {name} = {v:?} is not one of {allowed:?}"
                )))
            }
        }
        let k = &self.ksm;
        within("ksm.lambda", &k.lambda, &REFERENCE_LAMBDA)?;
        within("ksm.phase_size", &k.phase_size, &REFERENCE_PHASE_SIZE)?;
        within("ksm.alpha", &k.alpha, &REFERENCE_ALPHA)?;
        within("ksm.gamma", &k.gamma, &[REFERENCE_GAMMA])?;
        within("ksm.actor_lr", &k.actor_lr, &[REFERENCE_KSM_LR])?;
        within("ksm.critic_lr", &k.critic_lr, &[REFERENCE_KSM_LR])?;
        within(
            "ksm.feature_size",
            &k.feature_size,
            &[REFERENCE_FEATURE_SIZE],
        )?;
        within("ksm.hidden_size", &k.hidden_size, &[REFERENCE_KSM_HIDDEN])?;
        within(
            "student_train.lr",
            &self.student_train.lr,
            &REFERENCE_STUDENT_LRS,
        )?;
        let g = &self.sweep.grid;
        for v in g.lambda.iter().flatten() {
            within("sweep.grid.lambda", v, &REFERENCE_LAMBDA)?;
        }
        for v in g.phase_size.iter().flatten() {
            within("sweep.grid.phase_size", v, &REFERENCE_PHASE_SIZE)?;
        }
        for v in g.alpha.iter().flatten() {
            within("sweep.grid.alpha", v, &REFERENCE_ALPHA)?;
        }
        for v in g.actor_lr.iter().chain(&g.critic_lr).flatten() {
            within("sweep.grid learning rate", v, &[REFERENCE_KSM_LR])?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = RunConfig::from_toml_str("", &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn defaults_follow_the_reference_ksm_settings() {
        let k = RunConfig::default().ksm;
        assert_eq!((k.gamma, k.actor_lr, k.critic_lr), (0.98, 2e-4, 2e-4));
        assert_eq!((k.feature_size, k.hidden_size), (8, 256));
    }

    #[test]
    fn echo_round_trips() {
        let mut cfg = RunConfig {
            seed: 42,
            ..RunConfig::default()
        };
        cfg.ksm.reward_subset_size = Some(100);
        cfg.sweep.grid.lambda = Some(vec![0.1, 0.3]);
        let back = RunConfig::from_toml_str(&cfg.to_toml(), &[]).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_apply_in_order() {
        let text = "seed = 3\n[ksm]\nlambda = 0.2\n";
        let cfg = RunConfig::from_toml_str(
            text,
            &[
                "ksm.lambda=0.1".into(),
                "seed=9".into(),
                "out_dir=runs/x".into(),
                "ksm.reward_metric=\"accuracy\"".into(),
                "baseline.fixed_weights=[1.0, 1.0, 0.0, 0.0]".into(),
                "seed=10".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.ksm.lambda, 0.1);
        assert_eq!(cfg.seed, 10);
        assert_eq!(cfg.out_dir, PathBuf::from("runs/x"));
        assert_eq!(cfg.ksm.reward_metric, crate::ksm::RewardMetric::Accuracy);
        assert_eq!(cfg.baseline.fixed_weights, [1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn bad_documents_are_config_errors() {
        for (text, o) in [
            ("[ksm]\nlamda = 0.1\n", None),
            ("seed = \"x\"\n", None),
            ("", Some("ksm.lambda")),
            ("", Some("seed.x=1")),
            ("", Some("=3")),
        ] {
            let overrides: Vec<String> = o.into_iter().map(String::from).collect();
            assert!(
                matches!(
                    RunConfig::from_toml_str(text, &overrides),
                    Err(PersistError::Config(_))
                ),
                "{text:?} {overrides:?}"
            );
        }
        assert!(matches!(
            RunConfig::from_toml_str("version = 2\n", &[]),
            Err(PersistError::Version { found: 2, .. })
        ));
    }

    #[test]
    fn validation_catches_bad_values() {
        for o in [
            "ksm.lambda=1.5",
            "model.student_layers=5",
            "model.num_heads=5",
            "student_train.lr=0",
            "baseline.trials=0",
            "sweep.grid.alpha=[]",
        ] {
            let cfg = RunConfig::from_toml_str("", &[o.into()]).unwrap();
            assert!(
                matches!(cfg.validate(), Err(PersistError::Config(_))),
                "{o}"
            );
        }
    }

    #[test]
    fn strict_grid_limits_values() {
        let strict = |extra: &[&str]| {
            let mut o: Vec<String> = vec![
                "strict_paper_grid=true".into(),
                "student_train.lr=3e-5".into(),
            ];
            o.extend(extra.iter().map(|s| s.to_string()));
            RunConfig::from_toml_str("", &o).unwrap().validate()
        };
        strict(&[]).unwrap();
        strict(&[
            "ksm.lambda=0.1",
            "ksm.phase_size=128",
            "sweep.grid.alpha=[0.1, 0.2]",
        ])
        .unwrap();
        for bad in [
            "ksm.lambda=0.25",
            "ksm.phase_size=16",
            "ksm.gamma=0.9",
            "student_train.lr=1e-3",
            "sweep.grid.phase_size=[32, 50]",
        ] {
            assert!(
                matches!(strict(&[bad]), Err(PersistError::Config(_))),
                "{bad}"
            );
        }
        let lax = RunConfig::from_toml_str("", &["ksm.lambda=0.25".into()]).unwrap();
        lax.validate().unwrap();
    }
}
