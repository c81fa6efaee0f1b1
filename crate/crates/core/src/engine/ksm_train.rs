use serde::{Deserialize, Serialize};

use crate::ksm::{
    exploration_reward_hard, exploration_reward_soft, ActionMode, KsmConfig, KsmLearner,
    KsmNetworks, KsmShape, PhaseTarget, Transition, UpdateReport,
};
use crate::losses::Weights;
use crate::models::{evaluate, Encoder, Metrics};
use crate::scalar::Scalar;
use crate::tensor::Rng;

use super::student::{applied, StudentTrainer};
use super::{Choice, Event, EventSink, PhaseSchedule, Result, StudentSetup};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub episode: usize,
    pub steps: usize,
    /// Dev evaluations made to compute rewards during this episode.
    pub reward_evals: usize,
    pub ksm_updates: usize,
    /// Dev metrics of the student at the end of the episode.
    pub dev: Metrics,
    pub mean_action: Weights,
}

#[derive(Debug, Clone)]
pub struct KsmTrainReport<T: Scalar> {
    /// Networks as they were at the end of the best episode.
    pub nets: KsmNetworks<T>,
    pub best_episode: usize,
    pub episodes: Vec<EpisodeSummary>,
    /// Reward-split metrics of the initial student. Every episode starts from
    /// the same student, so this is evaluated once and reused.
    pub initial: Metrics,
}

/// Trains a KSM over up to `cfg.episodes` episodes of distillation from the
/// same initial student.
///
/// Rewards come from the dev split (or its first `reward_subset_size`
/// examples) once per phase, or after every step when `phase_rewards` is off.
/// A finished phase is learned at the start of the next step, once the value
/// of the state that follows it can be estimated; the last phase of an
/// episode is learned with a terminal value of zero. The KSM of the episode
/// with the best final dev accuracy is returned; training stops early after
/// `patience` episodes without an improvement of at least `min_delta`.
pub fn train_ksm<T: Scalar>(
    setup: &StudentSetup<'_, T>,
    cfg: &KsmConfig,
    sink: &mut dyn EventSink,
) -> Result<KsmTrainReport<T>> {
    setup.validate()?;
    cfg.validate()?;
    let eval_bs = setup.schedule.eval_batch_size;
    let reward_split = match cfg.reward_subset_size {
        Some(n) => setup.dev.head(n),
        None => setup.dev.clone(),
    };
    let eval = |m: &Encoder<T>| evaluate(m, &reward_split, eval_bs);
    let metric = cfg.reward_metric;
    let shape = KsmShape {
        cls_size: setup.student_init.config().hidden_size,
        batch_size: setup.schedule.batch_size,
        feature_size: cfg.feature_size,
        hidden_size: cfg.hidden_size,
    };
    let nets = KsmNetworks::new(shape, &mut Rng::new(setup.seed).fork("ksm_init"))?;
    let mut learner = KsmLearner::new(nets, cfg.clone())?;
    let schedule = PhaseSchedule::new(setup.total_steps(), cfg.phase_size)?;
    let initial = eval(setup.student_init)?;

    let mut episodes = Vec::new();
    let mut best: Option<(usize, f64, KsmNetworks<T>)> = None;
    let mut stale = 0;
    for episode in 1..=cfg.episodes {
        let run = format!("ksm-episode-{episode}");
        let mut trainer = StudentTrainer::new(setup);
        let mut buffer: Vec<Transition<T>> = Vec::with_capacity(cfg.phase_size);
        let mut pending: Option<(Vec<Transition<T>>, PhaseTarget, usize)> = None;
        let mut previous: Vec<Weights> = Vec::new();
        let mut last_value = metric.pick(&initial);
        let mut phase_start_value = last_value;
        let mut last_dev = initial;
        let mut reward_evals = 0;
        let mut updates = 0;
        let mut action_sum = [0.0; 4];
        let mut step = 0;

        let mut emit_update = |sink: &mut dyn EventSink, phase: usize, rep: UpdateReport| {
            updates += 1;
            sink.emit(Event::KsmUpdate {
                run: run.clone(),
                episode,
                phase,
                critic_loss: rep.critic.loss,
                value_loss: rep.critic.value_loss,
                exploration_loss: rep.critic.exploration_loss,
                actor_value: rep.actor_value,
            })
        };

        for epoch in 1..=setup.schedule.epochs {
            for batch in trainer.epoch_batches(epoch) {
                step += 1;
                let phase = schedule.phase_of(step);
                let mut finished = None;
                let mut picked = None;
                let rec = trainer.step(&batch, step, |s, t| {
                    if let Some((done, target, j)) = pending.take() {
                        let boot = Transition {
                            student_cls: s.to_vec(),
                            teacher_cls: t.to_vec(),
                            action: learner.nets.select(s, t)?,
                            exploration: 0.0,
                            immediate: None,
                        };
                        finished = Some((j, learner.learn_phase(&done, Some(&boot), target)?));
                    }
                    let action = learner.nets.select(s, t)?;
                    let exploration = match cfg.action_mode {
                        ActionMode::Soft => {
                            exploration_reward_soft(&action.values, &previous, cfg.alpha)?
                        }
                        ActionMode::Hard => exploration_reward_hard(
                            &action.values,
                            &previous,
                            cfg.alpha,
                            cfg.lambda,
                        ),
                    };
                    picked = Some((action, exploration));
                    Ok(Choice {
                        action: Some(action.values),
                        weights: applied(action.values, cfg.action_mode, cfg.lambda),
                    })
                })?;
                if let Some((j, rep)) = finished {
                    emit_update(sink, j, rep)?;
                }
                let (action, exploration) = picked.expect("policy was consulted");
                action_sum
                    .iter_mut()
                    .zip(&action.values)
                    .for_each(|(s, a)| *s += a);
                sink.emit(Event::Step {
                    run: run.clone(),
                    episode: Some(episode),
                    epoch,
                    step,
                    phase: Some(phase),
                    action: Some(action.values),
                    weights: rec.choice.weights,
                    losses: rec.losses,
                    total: rec.total,
                    exploration: Some(exploration),
                })?;
                let mut transition = Transition {
                    student_cls: rec.student_cls,
                    teacher_cls: rec.teacher_cls,
                    action,
                    exploration,
                    immediate: None,
                };
                if !cfg.phase_rewards {
                    last_dev = eval(&trainer.student)?;
                    reward_evals += 1;
                    let v = metric.pick(&last_dev);
                    transition.immediate = Some(metric.improvement(last_value, v));
                    last_value = v;
                }
                buffer.push(transition);

                if schedule.is_phase_end(step) {
                    let (reward, target) = if cfg.phase_rewards {
                        last_dev = eval(&trainer.student)?;
                        reward_evals += 1;
                        let v = metric.pick(&last_dev);
                        let r = metric.improvement(phase_start_value, v);
                        phase_start_value = v;
                        (r, PhaseTarget::Phase(r))
                    } else {
                        let r = buffer.iter().filter_map(|t| t.immediate).sum();
                        (r, PhaseTarget::Immediate)
                    };
                    sink.emit(Event::Reward {
                        run: run.clone(),
                        episode,
                        phase,
                        step,
                        metric,
                        reward,
                        dev: last_dev,
                    })?;
                    previous = buffer.iter().map(|t| t.action.values).collect();
                    let done = std::mem::take(&mut buffer);
                    if step == schedule.total_steps() {
                        let rep = learner.learn_phase(&done, None, target)?;
                        emit_update(sink, phase, rep)?;
                    } else {
                        pending = Some((done, target, phase));
                    }
                    sink.flush()?;
                }
            }
        }

        let dev = if cfg.reward_subset_size.is_none() {
            last_dev
        } else {
            evaluate(&trainer.student, setup.dev, eval_bs)?
        };
        let improved = best
            .as_ref()
            .is_none_or(|b| dev.accuracy > b.1 + cfg.min_delta);
        if improved {
            best = Some((episode, dev.accuracy, learner.nets.clone()));
            stale = 0;
        } else {
            stale += 1;
        }
        let summary = EpisodeSummary {
            episode,
            steps: step,
            reward_evals,
            ksm_updates: updates,
            dev,
            mean_action: action_sum.map(|s| s / step.max(1) as f64),
        };
        log::info!(
            "KSM episode {episode}: dev acc {:.4}, {} reward evaluations, mean action {:.3?}",
            dev.accuracy,
            reward_evals,
            summary.mean_action
        );
        sink.emit(Event::Episode {
            run,
            episode,
            steps: step,
            reward_evals,
            dev,
            mean_action: summary.mean_action,
            best: improved,
        })?;
        sink.flush()?;
        episodes.push(summary);
        if stale >= cfg.patience.max(1) {
            log::info!("KSM training stopped after {episode} episodes without improvement");
            break;
        }
    }
    let (best_episode, _, nets) = best.expect("at least one episode ran");
    Ok(KsmTrainReport {
        nets,
        best_episode,
        episodes,
        initial,
    })
}
