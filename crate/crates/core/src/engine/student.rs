use serde::{Deserialize, Serialize};

use crate::data::TokenBatch;
use crate::ksm::{ActionMode, KsmConfig, KsmNetworks};
use crate::losses::{combine_soft, harden, DistillConfig, KnowledgeLosses, Weights};
use crate::models::{evaluate, Encoder, LayerMap};
use crate::scalar::Scalar;
use crate::tensor::{Adam, AdamConfig, Graph, Optimizer, Rng};

use super::{
    EngineError, Event, EventSink, ExperimentRun, Result, Strategy, StudentSetup, TeacherCache,
};

/// Position of a training step, both 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepInfo {
    pub step: usize,
    pub epoch: usize,
}

/// Knowledge weights for one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Choice {
    /// Policy output before any thresholding.
    pub action: Option<Weights>,
    /// Weights applied to the four losses.
    pub weights: Weights,
}

/// Chooses the knowledge weights of each student step.
pub trait Policy<T: Scalar> {
    /// `student_cls` and `teacher_cls` are the last-layer CLS rows of the
    /// current batch, `[B × H]` flattened.
    fn choose(&mut self, info: StepInfo, student_cls: &[T], teacher_cls: &[T]) -> Result<Choice>;

    fn strategy(&self) -> Strategy;
}

/// The same weights at every step.
#[derive(Debug, Clone, Copy)]
pub struct FixedPolicy(pub Weights);

impl<T: Scalar> Policy<T> for FixedPolicy {
    fn choose(&mut self, _: StepInfo, _: &[T], _: &[T]) -> Result<Choice> {
        Ok(Choice {
            action: None,
            weights: self.0,
        })
    }

    fn strategy(&self) -> Strategy {
        Strategy::Fixed
    }
}

/// Over which steps random knowledge is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RandomScope {
    /// Every step.
    All,
    /// Steps of the first epoch; unit weights afterwards.
    One,
}

/// Uniform random knowledge. Soft draws each weight from `U[0, 1]`; hard
/// draws one of the 15 non-empty gate vectors.
#[derive(Debug, Clone)]
pub struct RandomPolicy {
    pub scope: RandomScope,
    pub mode: ActionMode,
    pub rng: Rng,
}

impl RandomPolicy {
    fn draw(&mut self) -> Weights {
        match self.mode {
            ActionMode::Soft => std::array::from_fn(|_| self.rng.uniform()),
            ActionMode::Hard => {
                let bits = 1 + self.rng.below(15);
                std::array::from_fn(|m| ((bits >> m) & 1) as f64)
            }
        }
    }
}

impl<T: Scalar> Policy<T> for RandomPolicy {
    fn choose(&mut self, info: StepInfo, _: &[T], _: &[T]) -> Result<Choice> {
        if self.scope == RandomScope::One && info.epoch > 1 {
            return Ok(Choice {
                action: None,
                weights: [1.0; 4],
            });
        }
        let a = self.draw();
        Ok(Choice {
            action: Some(a),
            weights: a,
        })
    }

    fn strategy(&self) -> Strategy {
        match self.scope {
            RandomScope::All => Strategy::RandomAll,
            RandomScope::One => Strategy::RandomOne,
        }
    }
}

/// A trained, frozen actor.
#[derive(Debug, Clone, Copy)]
pub struct KsmPolicy<'a, T: Scalar> {
    pub nets: &'a KsmNetworks<T>,
    pub mode: ActionMode,
    pub lambda: f64,
}

impl<T: Scalar> Policy<T> for KsmPolicy<'_, T> {
    fn choose(&mut self, _: StepInfo, student_cls: &[T], teacher_cls: &[T]) -> Result<Choice> {
        let a = self.nets.select(student_cls, teacher_cls)?.values;
        Ok(Choice {
            action: Some(a),
            weights: applied(a, self.mode, self.lambda),
        })
    }

    fn strategy(&self) -> Strategy {
        match self.mode {
            ActionMode::Soft => Strategy::KsmSoft,
            ActionMode::Hard => Strategy::KsmHard,
        }
    }
}

pub(crate) fn applied(a: Weights, mode: ActionMode, lambda: f64) -> Weights {
    match mode {
        ActionMode::Soft => a,
        ActionMode::Hard => harden(&a, lambda),
    }
}

pub(crate) struct StepRecord<T> {
    pub choice: Choice,
    pub losses: Weights,
    pub total: f64,
    pub student_cls: Vec<T>,
    pub teacher_cls: Vec<T>,
}

/// Shared per-run state of a student being trained.
pub(crate) struct StudentTrainer<'s, 'a, T: Scalar> {
    pub setup: &'s StudentSetup<'a, T>,
    pub student: Encoder<T>,
    opt: Adam<T>,
    dropout: Rng,
}

impl<'s, 'a, T: Scalar> StudentTrainer<'s, 'a, T> {
    pub fn new(setup: &'s StudentSetup<'a, T>) -> Self {
        StudentTrainer {
            setup,
            student: setup.student_init.clone(),
            opt: Adam::new(AdamConfig::with_lr(setup.schedule.lr)),
            dropout: Rng::new(setup.seed).fork("student_dropout"),
        }
    }

    /// Batches of epoch `epoch` (1-based), full batches only.
    pub fn epoch_batches(&self, epoch: usize) -> impl Iterator<Item = TokenBatch> + 's {
        let s = self.setup;
        s.train
            .batches(s.schedule.batch_size, s.seed, epoch - 1, true)
    }

    /// Forward, weight choice, backward and optimizer update for one batch.
    pub fn step(
        &mut self,
        batch: &TokenBatch,
        step: usize,
        choose: impl FnOnce(&[T], &[T]) -> Result<Choice>,
    ) -> Result<StepRecord<T>> {
        student_step(
            &mut self.student,
            &mut self.opt,
            batch,
            self.setup.teacher,
            &self.setup.map,
            &self.setup.distill,
            &mut self.dropout,
            step,
            choose,
        )
    }
}

#[allow(clippy::too_many_arguments)]
fn student_step<T: Scalar>(
    student: &mut Encoder<T>,
    opt: &mut Adam<T>,
    batch: &TokenBatch,
    teacher: &TeacherCache<T>,
    map: &LayerMap,
    cfg: &DistillConfig,
    dropout: &mut Rng,
    step: usize,
    choose: impl FnOnce(&[T], &[T]) -> Result<Choice>,
) -> Result<StepRecord<T>> {
    let g = Graph::new();
    let out = student.forward(&g, batch, Some(dropout), true)?;
    let (t_logits, t_cls) = teacher.tensors(&g, &batch.indices)?;
    let student_cls = out.last_cls().value();
    let teacher_cls = t_cls.last().expect("teacher has layers").value();
    let choice = choose(&student_cls, &teacher_cls)?;
    let losses = KnowledgeLosses::compute(
        out.logits,
        &out.cls,
        t_logits,
        &t_cls,
        &batch.labels,
        map,
        cfg,
    )?;
    let total = combine_soft(&losses.as_array(), &choice.weights)?;
    let total_value = total.item().as_f64();
    if !total_value.is_finite() {
        return Err(EngineError::Diverged {
            step,
            detail: format!(
                "weighted loss is {total_value} with weights {:?}",
                choice.weights
            ),
        });
    }
    g.backward(total)?.accumulate_into(student.params_mut());
    opt.step(&mut student.params_mut())?;
    Ok(StepRecord {
        choice,
        losses: losses.values(),
        total: total_value,
        student_cls,
        teacher_cls,
    })
}

/// Student and the record of how it was trained.
#[derive(Debug, Clone)]
pub struct StudentRun<T: Scalar> {
    pub student: Encoder<T>,
    pub run: ExperimentRun,
}

/// Trains a fresh copy of the initial student for the configured epochs,
/// taking the knowledge weights of every step from `policy`.
pub fn run_student<T: Scalar>(
    setup: &StudentSetup<'_, T>,
    policy: &mut dyn Policy<T>,
    run_id: &str,
    sink: &mut dyn EventSink,
) -> Result<StudentRun<T>> {
    setup.validate()?;
    let mut trainer = StudentTrainer::new(setup);
    let mut trajectory = Vec::new();
    let mut step = 0;
    for epoch in 1..=setup.schedule.epochs {
        let mut loss_sum = 0.0;
        let mut count = 0;
        for batch in trainer.epoch_batches(epoch) {
            step += 1;
            let info = StepInfo { step, epoch };
            let rec = trainer.step(&batch, step, |s, t| policy.choose(info, s, t))?;
            loss_sum += rec.total;
            count += 1;
            sink.emit(Event::Step {
                run: run_id.into(),
                episode: None,
                epoch,
                step,
                phase: None,
                action: rec.choice.action,
                weights: rec.choice.weights,
                losses: rec.losses,
                total: rec.total,
                exploration: None,
            })?;
        }
        let dev = if setup.schedule.epoch_eval {
            let m = evaluate(&trainer.student, setup.dev, setup.schedule.eval_batch_size)?;
            trajectory.push(m);
            Some(m)
        } else {
            None
        };
        sink.emit(Event::Epoch {
            run: run_id.into(),
            episode: None,
            epoch,
            step,
            train_loss: loss_sum / count.max(1) as f64,
            dev,
        })?;
        sink.flush()?;
    }
    let dev = match trajectory.last() {
        Some(m) => *m,
        None => evaluate(&trainer.student, setup.dev, setup.schedule.eval_batch_size)?,
    };
    let test = setup
        .test
        .map(|t| evaluate(&trainer.student, t, setup.schedule.eval_batch_size))
        .transpose()?;
    sink.emit(Event::RunEnd {
        run: run_id.into(),
        steps: step,
        dev,
        test,
    })?;
    sink.flush()?;
    let strategy = policy.strategy();
    Ok(StudentRun {
        student: trainer.student,
        run: ExperimentRun {
            run_id: run_id.into(),
            seed: setup.seed,
            strategy,
            weights: None,
            trajectory,
            steps: step,
            dev,
            test,
        },
    })
}

/// Constant knowledge weights, e.g. `(1, 1, 0, 0)` for finetuning plus
/// response knowledge.
pub fn run_fixed<T: Scalar>(
    setup: &StudentSetup<'_, T>,
    weights: Weights,
    sink: &mut dyn EventSink,
) -> Result<StudentRun<T>> {
    if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) || weights.iter().all(|&w| w == 0.0) {
        return Err(EngineError::Config(format!(
            "fixed weights {weights:?} must be non-negative and not all zero"
        )));
    }
    let id = format!("fixed-{}", weights.map(|w| w.to_string()).join("-"));
    let mut out = run_student(setup, &mut FixedPolicy(weights), &id, sink)?;
    out.run.weights = Some(weights);
    Ok(out)
}

/// All trials of a random-knowledge baseline, with the best and worst by dev
/// accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomReport {
    pub runs: Vec<ExperimentRun>,
    pub best: usize,
    pub worst: usize,
}

impl RandomReport {
    /// Best minus worst dev accuracy.
    pub fn gap(&self) -> f64 {
        self.runs[self.best].dev.accuracy - self.runs[self.worst].dev.accuracy
    }

    pub fn mean_accuracy(&self) -> f64 {
        self.runs.iter().map(|r| r.dev.accuracy).sum::<f64>() / self.runs.len() as f64
    }
}

/// `trials` random-knowledge runs. Trials share the initial student, data
/// order and dropout; only the knowledge draws differ.
pub fn run_random<T: Scalar>(
    setup: &StudentSetup<'_, T>,
    scope: RandomScope,
    mode: ActionMode,
    trials: usize,
    sink: &mut dyn EventSink,
) -> Result<RandomReport> {
    if trials == 0 {
        return Err(EngineError::Config("at least one trial is required".into()));
    }
    let name = match scope {
        RandomScope::All => "random-all",
        RandomScope::One => "random-one",
    };
    let mut runs = Vec::with_capacity(trials);
    for trial in 0..trials {
        let mut policy = RandomPolicy {
            scope,
            mode,
            rng: Rng::new(setup.seed).fork_index("knowledge_draws", trial as u64),
        };
        let out = run_student(setup, &mut policy, &format!("{name}-{trial}"), sink)?;
        log::info!(
            "{name} trial {trial}: dev accuracy {:.4}",
            out.run.dev.accuracy
        );
        runs.push(out.run);
    }
    let by_acc = |a: &&ExperimentRun, b: &&ExperimentRun| a.dev.accuracy.total_cmp(&b.dev.accuracy);
    let best = runs
        .iter()
        .enumerate()
        .max_by(|a, b| by_acc(&a.1, &b.1))
        .map(|p| p.0)
        .unwrap_or(0);
    let worst = runs
        .iter()
        .enumerate()
        .min_by(|a, b| by_acc(&a.1, &b.1))
        .map(|p| p.0)
        .unwrap_or(0);
    Ok(RandomReport { runs, best, worst })
}

/// Stage two: trains the student with knowledge chosen by a frozen KSM.
pub fn distill<T: Scalar>(
    setup: &StudentSetup<'_, T>,
    nets: &KsmNetworks<T>,
    trained_with: &KsmConfig,
    mode: ActionMode,
    sink: &mut dyn EventSink,
) -> Result<StudentRun<T>> {
    if mode != trained_with.action_mode {
        log::warn!(
            "distilling with {mode:?} actions from a KSM trained with {:?} actions",
            trained_with.action_mode
        );
    }
    let mut policy = KsmPolicy {
        nets,
        mode,
        lambda: trained_with.lambda,
    };
    let id = match mode {
        ActionMode::Soft => "distill-soft",
        ActionMode::Hard => "distill-hard",
    };
    run_student(setup, &mut policy, id, sink)
}
