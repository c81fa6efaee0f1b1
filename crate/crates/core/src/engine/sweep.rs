use serde::{Deserialize, Serialize};

use crate::ksm::{ActionMode, KsmConfig, RewardMetric};
use crate::scalar::Scalar;

use super::{distill, train_ksm, EngineError, EventSink, ExperimentRun, Result, StudentSetup};

/// Candidate values per KSM hyperparameter. An absent axis keeps the base
/// value; a present but empty axis is an error.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub lambda: Option<Vec<f64>>,
    pub phase_size: Option<Vec<usize>>,
    pub alpha: Option<Vec<f64>>,
    pub reward_metric: Option<Vec<RewardMetric>>,
    pub action_mode: Option<Vec<ActionMode>>,
    pub actor_lr: Option<Vec<f64>>,
    pub critic_lr: Option<Vec<f64>>,
}

fn axis<V: Clone>(name: &str, values: &Option<Vec<V>>, base: V) -> Result<Vec<V>> {
    match values {
        None => Ok(vec![base]),
        Some(v) if v.is_empty() => {
            Err(EngineError::Config(format!("sweep axis `{name}` is empty")))
        }
        Some(v) => Ok(v.clone()),
    }
}

impl SweepGrid {
    /// Cartesian product over all axes, each point validated.
    pub fn points(&self, base: &KsmConfig) -> Result<Vec<KsmConfig>> {
        let mut out = vec![base.clone()];
        macro_rules! expand {
            ($field:ident) => {
                let values = axis(stringify!($field), &self.$field, base.$field.clone())?;
                out = out
                    .iter()
                    .flat_map(|c| {
                        values.iter().map(move |v| KsmConfig {
                            $field: v.clone(),
                            ..c.clone()
                        })
                    })
                    .collect();
            };
        }
        expand!(lambda);
        expand!(phase_size);
        expand!(alpha);
        expand!(reward_metric);
        expand!(action_mode);
        expand!(actor_lr);
        expand!(critic_lr);
        for c in &out {
            c.validate()?;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub index: usize,
    pub ksm: KsmConfig,
    pub best_episode: usize,
    pub run: ExperimentRun,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub points: Vec<SweepPoint>,
    /// Point indices by descending dev accuracy.
    pub ranking: Vec<usize>,
}

impl SweepReport {
    pub fn best(&self) -> &SweepPoint {
        &self.points[self.ranking[0]]
    }
}

/// Opens the metrics sink of grid point `i`.
pub type SinkFactory<'a> = dyn Fn(usize) -> Result<Box<dyn EventSink + Send>> + Sync + 'a;

fn run_point<T: Scalar>(
    setup: &StudentSetup<'_, T>,
    index: usize,
    ksm: &KsmConfig,
    sinks: &SinkFactory<'_>,
) -> Result<SweepPoint> {
    let mut sink = sinks(index)?;
    let trained = train_ksm(setup, ksm, &mut sink)?;
    let mut out = distill(setup, &trained.nets, ksm, ksm.action_mode, &mut sink)?;
    out.run.run_id = format!("sweep-{index}");
    Ok(SweepPoint {
        index,
        ksm: ksm.clone(),
        best_episode: trained.best_episode,
        run: out.run,
    })
}

/// Trains a KSM and distills a student for every grid point, optionally on
/// several threads. Points share nothing mutable; each has its own sink.
pub fn sweep<T: Scalar>(
    setup: &StudentSetup<'_, T>,
    points: &[KsmConfig],
    threads: usize,
    sinks: &SinkFactory<'_>,
) -> Result<SweepReport> {
    if points.is_empty() {
        return Err(EngineError::Config("sweep grid has no points".into()));
    }
    let threads = threads.clamp(1, points.len());
    let mut results: Vec<Option<Result<SweepPoint>>> = (0..points.len()).map(|_| None).collect();
    if threads == 1 {
        for (i, p) in points.iter().enumerate() {
            results[i] = Some(run_point(setup, i, p, sinks));
        }
    } else {
        let done = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..threads)
                .map(|w| {
                    scope.spawn(move || {
                        (w..points.len())
                            .step_by(threads)
                            .map(|i| (i, run_point(setup, i, &points[i], sinks)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("sweep worker panicked"))
                .collect::<Vec<_>>()
        });
        for (i, r) in done {
            results[i] = Some(r);
        }
    }
    let points = results
        .into_iter()
        .map(|r| r.expect("every point ran"))
        .collect::<Result<Vec<_>>>()?;
    let mut ranking: Vec<usize> = (0..points.len()).collect();
    ranking.sort_by(|&a, &b| {
        points[b]
            .run
            .dev
            .accuracy
            .total_cmp(&points[a].run.dev.accuracy)
            .then(a.cmp(&b))
    });
    Ok(SweepReport { points, ranking })
}
