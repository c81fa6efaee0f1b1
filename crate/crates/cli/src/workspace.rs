use std::fs;
use std::path::{Path, PathBuf};

use actkd::data::{load_tsv, DatasetSplits, EncodedSplit};
use actkd::engine::{StudentSetup, TeacherCache};
use actkd::models::{skip_layer_map, Encoder, LayerMap};
use actkd::persist::{load_encoder, RunConfig, RunManifest};
use anyhow::{Context, Result};

use crate::{ConfigArgs, ConfigError};

/// Reads the configuration, applies flag overrides and validates it.
pub fn ensure_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut overrides = args.overrides.clone();
    if let Some(seed) = args.seed {
        overrides.push(format!("seed={seed}"));
    }
    let mut cfg = RunConfig::load(args.config.as_deref(), &overrides)?;
    if let Some(dir) = &args.out_dir {
        cfg.out_dir = dir.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Creates `<out_dir>/<name>` and echoes the effective configuration into it.
pub(crate) fn run_dir(cfg: &RunConfig, name: &str) -> Result<PathBuf> {
    let dir = cfg.out_dir.join(name);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let echo = dir.join("config.toml");
    fs::write(&echo, cfg.to_toml()).with_context(|| format!("writing {}", echo.display()))?;
    Ok(dir)
}

/// Configuration plus the encoded dataset it points at.
pub struct Workspace {
    pub cfg: RunConfig,
    pub splits: DatasetSplits,
    pub train: EncodedSplit,
    pub dev: EncodedSplit,
    pub test: Option<EncodedSplit>,
    inputs: Vec<(String, PathBuf)>,
}

impl Workspace {
    /// Loads `train.tsv`, `dev.tsv` and, when present, `test.tsv`.
    pub fn load(cfg: RunConfig) -> Result<Self> {
        let d = &cfg.data;
        let read = |split: &str| -> Result<_> {
            let path = d.split_path(split);
            let rows = load_tsv(&path, &d.schema)
                .with_context(|| format!("loading {split} split (run `make-data` first?)"))?;
            Ok((rows, path))
        };
        let (train, train_path) = read("train")?;
        let (dev, dev_path) = read("dev")?;
        let mut inputs = vec![
            ("train".to_string(), train_path),
            ("dev".to_string(), dev_path),
        ];
        let test = if d.split_path("test").exists() {
            let (rows, path) = read("test")?;
            inputs.push(("test".into(), path));
            rows
        } else {
            Vec::new()
        };
        let splits = DatasetSplits::new(train, dev, test, d.num_classes())?;
        let (train, dev, test) = splits.encode(cfg.model.max_seq_len);
        let test = (!test.is_empty()).then_some(test);
        Ok(Workspace {
            cfg,
            splits,
            train,
            dev,
            test,
            inputs,
        })
    }

    pub fn split(&self, which: crate::Split) -> Result<&EncodedSplit> {
        match which {
            crate::Split::Train => Ok(&self.train),
            crate::Split::Dev => Ok(&self.dev),
            crate::Split::Test => self
                .test
                .as_ref()
                .ok_or_else(|| ConfigError("no test split in the data directory".into()).into()),
        }
    }

    pub fn teacher_config(&self) -> actkd::models::EncoderConfig {
        self.cfg
            .model
            .teacher(self.splits.vocab.len(), self.splits.num_classes)
    }

    /// A manifest with the dataset files already hashed.
    pub fn manifest(&self, command: &str, run_id: &str) -> Result<RunManifest> {
        let mut m = RunManifest::new(command, run_id, &self.cfg);
        for (role, path) in &self.inputs {
            m.add_input(role, path)?;
        }
        Ok(m)
    }
}

/// Everything shared by commands that distill from a trained teacher.
pub(crate) struct Distillation {
    pub ws: Workspace,
    pub teacher_path: PathBuf,
    pub student_init: Encoder<f64>,
    pub cache: TeacherCache<f64>,
    pub map: LayerMap,
}

impl Distillation {
    pub fn prepare(cfg: RunConfig, teacher: Option<PathBuf>) -> Result<Self> {
        let ws = Workspace::load(cfg)?;
        let teacher_path =
            teacher.unwrap_or_else(|| ws.cfg.out_dir.join("teacher").join("teacher.ckpt"));
        let teacher: Encoder<f64> = load_encoder(&teacher_path).with_context(|| {
            format!(
                "loading teacher {} (run `train-teacher` first?)",
                teacher_path.display()
            )
        })?;
        check_teacher(&ws, teacher.config())?;
        let m = &ws.cfg.model;
        let student_init = Encoder::from_teacher_bottom(&teacher, m.student_layers)?;
        let map = skip_layer_map(
            m.student_layers,
            m.teacher_layers,
            ws.cfg.distill.layer_map_rule,
        )?;
        let cache = TeacherCache::build(&teacher, &ws.train, ws.cfg.student_train.eval_batch_size)?;
        Ok(Distillation {
            ws,
            teacher_path,
            student_init,
            cache,
            map,
        })
    }

    pub fn setup(&self) -> StudentSetup<'_, f64> {
        StudentSetup {
            teacher: &self.cache,
            student_init: &self.student_init,
            train: &self.ws.train,
            dev: &self.ws.dev,
            test: self.ws.test.as_ref(),
            map: self.map.clone(),
            distill: self.ws.cfg.distill.clone(),
            schedule: self.ws.cfg.student_train.clone(),
            seed: self.ws.cfg.seed,
        }
    }

    pub fn manifest(&self, command: &str, run_id: &str) -> Result<RunManifest> {
        let mut m = self.ws.manifest(command, run_id)?;
        m.add_input("teacher", &self.teacher_path)?;
        Ok(m)
    }
}

fn check_teacher(ws: &Workspace, got: &actkd::models::EncoderConfig) -> Result<()> {
    let want = ws.teacher_config();
    if got.vocab_size != want.vocab_size || got.num_classes != want.num_classes {
        return Err(ConfigError(format!(
            "teacher was trained on a vocabulary of {} and {} classes; the data has {} and {}",
            got.vocab_size, got.num_classes, want.vocab_size, want.num_classes
        ))
        .into());
    }
    if got.num_layers != want.num_layers || got.hidden_size != want.hidden_size {
        return Err(ConfigError(format!(
            "teacher has {} layers of width {}, the configuration asks for {} of width {}",
            got.num_layers, got.hidden_size, want.num_layers, want.hidden_size
        ))
        .into());
    }
    Ok(())
}

pub(crate) fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}
