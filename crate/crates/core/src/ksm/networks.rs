use serde::{Deserialize, Serialize};

use crate::losses::{harden, Weights};
use crate::models::ModelOutput;
use crate::scalar::Scalar;
use crate::tensor::{Adam, AdamConfig, Graph, Optimizer, Param, Rng, Tensor};

use super::mlp::{Head, Mlp};
use super::rewards::discounts;
use super::{KsmConfig, KsmError, Result};

/// Number of knowledge types the actor weighs.
pub const NUM_KNOWLEDGE: usize = 4;

/// Layer widths that fix the input sizes of the actor and critic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KsmShape {
    /// Width of the encoders' CLS embeddings.
    pub cls_size: usize,
    pub batch_size: usize,
    pub feature_size: usize,
    pub hidden_size: usize,
}

impl KsmShape {
    pub fn state_size(&self) -> usize {
        self.batch_size * 2 * self.feature_size
    }
}

/// Per-knowledge weights in `(0, 1)` chosen for one training step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub values: Weights,
}

impl Action {
    pub fn gates(&self, lambda: f64) -> Weights {
        harden(&self.values, lambda)
    }
}

/// Two feature networks, the actor and the critic.
#[derive(Debug, Clone)]
pub struct KsmNetworks<T: Scalar> {
    pub shape: KsmShape,
    pub feature_student: Mlp<T>,
    pub feature_teacher: Mlp<T>,
    pub actor: Mlp<T>,
    pub critic: Mlp<T>,
}

impl<T: Scalar> KsmNetworks<T> {
    pub fn new(shape: KsmShape, rng: &mut Rng) -> Result<Self> {
        let (h, f, w, s) = (
            shape.cls_size,
            shape.feature_size,
            shape.hidden_size,
            shape.state_size(),
        );
        Ok(KsmNetworks {
            shape,
            feature_student: Mlp::new("feature_student", &[h, h, f], Head::Linear, rng)?,
            feature_teacher: Mlp::new("feature_teacher", &[h, h, f], Head::Linear, rng)?,
            actor: Mlp::new("actor", &[s, w, w, NUM_KNOWLEDGE], Head::Sigmoid, rng)?,
            critic: Mlp::new("critic", &[s + NUM_KNOWLEDGE, w, w, 1], Head::Linear, rng)?,
        })
    }

    /// Stacked states for `n` steps from `[n·B × H]` student and teacher CLS
    /// rows, as `[n × B·2·F]`. Each sample contributes its student features
    /// followed by its teacher features.
    pub fn states<'g>(
        &self,
        g: &'g Graph<T>,
        student_cls: Tensor<'g, T>,
        teacher_cls: Tensor<'g, T>,
        train_student_net: bool,
        train_teacher_net: bool,
    ) -> Result<Tensor<'g, T>> {
        let (ss, ts) = (student_cls.shape(), teacher_cls.shape());
        let b = self.shape.batch_size;
        if ss != ts || ss.len() != 2 || ss[0] % b != 0 || ss[0] == 0 {
            return Err(KsmError::State(format!(
                "CLS rows {ss:?} and {ts:?} do not form whole batches of {b}"
            )));
        }
        let vs = self
            .feature_student
            .forward(g, student_cls, train_student_net)?;
        let vt = self
            .feature_teacher
            .forward(g, teacher_cls, train_teacher_net)?;
        let both = g.concat(&[vs, vt], 1)?;
        Ok(both.reshape(vec![ss[0] / b, self.shape.state_size()])?)
    }

    /// State of one step from the last-layer CLS embeddings of both models,
    /// with every network frozen.
    pub fn build_state<'g>(
        &self,
        g: &'g Graph<T>,
        student: &ModelOutput<'g, T>,
        teacher: &ModelOutput<'g, T>,
    ) -> Result<Tensor<'g, T>> {
        self.states(
            g,
            student.last_cls().detach(),
            teacher.last_cls().detach(),
            false,
            false,
        )
    }

    /// `sigmoid(μ(s))`, `[n × 4]`.
    pub fn act<'g>(
        &self,
        g: &'g Graph<T>,
        states: Tensor<'g, T>,
        trainable: bool,
    ) -> Result<Tensor<'g, T>> {
        self.actor.forward(g, states, trainable)
    }

    /// `Q(s, a)`, `[n × 1]`.
    pub fn q_value<'g>(
        &self,
        g: &'g Graph<T>,
        states: Tensor<'g, T>,
        actions: Tensor<'g, T>,
        trainable: bool,
    ) -> Result<Tensor<'g, T>> {
        self.critic
            .forward(g, g.concat(&[states, actions], 1)?, trainable)
    }

    /// Action for one step from flat `[B × H]` CLS values.
    pub fn select(&self, student_cls: &[T], teacher_cls: &[T]) -> Result<Action> {
        let g = Graph::new();
        let (s, t) = self.cls_constants(&g, &[student_cls], &[teacher_cls])?;
        let a = self
            .act(&g, self.states(&g, s, t, false, false)?, false)?
            .value();
        Ok(Action {
            values: std::array::from_fn(|m| a[m].as_f64()),
        })
    }

    fn cls_constants<'g>(
        &self,
        g: &'g Graph<T>,
        student: &[&[T]],
        teacher: &[&[T]],
    ) -> Result<(Tensor<'g, T>, Tensor<'g, T>)> {
        let h = self.shape.cls_size;
        let rows = student.len() * self.shape.batch_size;
        let stack = |parts: &[&[T]]| -> Result<Tensor<'g, T>> {
            let data: Vec<T> = parts.concat();
            if data.len() != rows * h {
                return Err(KsmError::State(format!(
                    "expected {rows} CLS rows of width {h}, got {} values",
                    data.len()
                )));
            }
            Ok(g.constant(vec![rows, h], data)?)
        };
        Ok((stack(student)?, stack(teacher)?))
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        [
            &self.feature_student,
            &self.feature_teacher,
            &self.actor,
            &self.critic,
        ]
        .into_iter()
        .flat_map(|m| m.params())
        .collect()
    }

    /// Same order as [`params`](Self::params).
    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.feature_student.params_mut();
        v.extend(self.feature_teacher.params_mut());
        v.extend(self.actor.params_mut());
        v.extend(self.critic.params_mut());
        v
    }

    /// Actor and student feature network, updated together.
    pub fn actor_group(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.actor.params_mut();
        v.extend(self.feature_student.params_mut());
        v
    }

    /// Critic and teacher feature network, updated together.
    pub fn critic_group(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.critic.params_mut();
        v.extend(self.feature_teacher.params_mut());
        v
    }

    pub fn bit_eq(&self, other: &KsmNetworks<T>) -> bool {
        self.shape == other.shape
            && self
                .params()
                .iter()
                .zip(other.params())
                .all(|(a, b)| a.bit_eq(b))
    }
}

/// An action-value function the actor can ascend.
pub trait Critic<T: Scalar> {
    /// `[n × 1]` values for `[n × ·]` states and actions, with the critic's
    /// own parameters held fixed.
    fn q<'g>(
        &self,
        g: &'g Graph<T>,
        states: Tensor<'g, T>,
        actions: Tensor<'g, T>,
    ) -> Result<Tensor<'g, T>>;
}

impl<T: Scalar> Critic<T> for KsmNetworks<T> {
    fn q<'g>(
        &self,
        g: &'g Graph<T>,
        states: Tensor<'g, T>,
        actions: Tensor<'g, T>,
    ) -> Result<Tensor<'g, T>> {
        self.q_value(g, states, actions, false)
    }
}

/// One deterministic policy-gradient step on `actor` against a fixed
/// `critic`, averaged over the `[n × d]` states. Returns the mean value
/// before the step.
pub fn actor_step<T: Scalar>(
    actor: &mut Mlp<T>,
    opt: &mut impl Optimizer<T>,
    critic: &impl Critic<T>,
    states: &[T],
    state_size: usize,
) -> Result<f64> {
    if states.is_empty() || !states.len().is_multiple_of(state_size) {
        return Err(KsmError::Input(format!(
            "{} state values do not form rows of {state_size}",
            states.len()
        )));
    }
    let g = Graph::new();
    let s = g.constant(vec![states.len() / state_size, state_size], states.to_vec())?;
    let a = actor.forward(&g, s, true)?;
    let value = critic.q(&g, s, a)?.mean();
    let grads = g.backward(value.neg())?;
    grads.accumulate_into(actor.params_mut());
    opt.step(&mut actor.params_mut())?;
    Ok(value.item().as_f64())
}

/// Everything remembered about one training step until its phase is learned.
#[derive(Debug, Clone)]
pub struct Transition<T> {
    /// Last-layer student CLS rows, `[B × H]` flattened.
    pub student_cls: Vec<T>,
    pub teacher_cls: Vec<T>,
    pub action: Action,
    pub exploration: f64,
    /// Per-step reward, present only when rewards are computed every step.
    pub immediate: Option<f64>,
}

/// Diagnostics of one critic update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticReport {
    pub loss: f64,
    /// Phase or TD term, before the exploration term is added.
    pub value_loss: f64,
    pub exploration_loss: f64,
    pub estimated: Vec<f64>,
}

/// Outcome of learning from one phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateReport {
    pub critic: CriticReport,
    /// Mean `Q(s, μ(s))` before the actor step.
    pub actor_value: f64,
}

/// Source of the reward the critic fits for one phase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PhaseTarget {
    /// One reward for the whole phase, matched by the sum of estimated rewards.
    Phase(f64),
    /// Each transition carries its own reward, fitted by TD regression.
    Immediate,
}

/// Networks plus their optimizers.
#[derive(Debug, Clone)]
pub struct KsmLearner<T: Scalar> {
    pub nets: KsmNetworks<T>,
    pub cfg: KsmConfig,
    actor_opt: Adam<T>,
    critic_opt: Adam<T>,
}

impl<T: Scalar> KsmLearner<T> {
    pub fn new(nets: KsmNetworks<T>, cfg: KsmConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(KsmLearner {
            nets,
            actor_opt: Adam::new(AdamConfig::with_lr(cfg.actor_lr)),
            critic_opt: Adam::new(AdamConfig::with_lr(cfg.critic_lr)),
            cfg,
        })
    }

    /// Critic update followed by an actor update against the new critic.
    ///
    /// `bootstrap` is the step after the phase; `None` marks the end of the
    /// episode, whose value is zero.
    pub fn learn_phase(
        &mut self,
        phase: &[Transition<T>],
        bootstrap: Option<&Transition<T>>,
        target: PhaseTarget,
    ) -> Result<UpdateReport> {
        let critic = self.critic_update(phase, bootstrap, target)?;
        let actor_value = self.actor_update(phase)?;
        Ok(UpdateReport {
            critic,
            actor_value,
        })
    }

    fn stacked_states<'g>(
        &self,
        g: &'g Graph<T>,
        steps: &[&Transition<T>],
        train_student_net: bool,
        train_teacher_net: bool,
    ) -> Result<Tensor<'g, T>> {
        let s: Vec<&[T]> = steps.iter().map(|t| t.student_cls.as_slice()).collect();
        let c: Vec<&[T]> = steps.iter().map(|t| t.teacher_cls.as_slice()).collect();
        let (s, c) = self.nets.cls_constants(g, &s, &c)?;
        self.nets
            .states(g, s, c, train_student_net, train_teacher_net)
    }

    fn actions<'g>(g: &'g Graph<T>, steps: &[&Transition<T>]) -> Result<Tensor<'g, T>> {
        let data = steps
            .iter()
            .flat_map(|t| t.action.values.map(T::lit))
            .collect();
        Ok(g.constant(vec![steps.len(), NUM_KNOWLEDGE], data)?)
    }

    /// Fits the critic and the teacher feature network to one phase.
    pub fn critic_update(
        &mut self,
        phase: &[Transition<T>],
        bootstrap: Option<&Transition<T>>,
        target: PhaseTarget,
    ) -> Result<CriticReport> {
        if phase.is_empty() {
            return Err(KsmError::Input("phase has no steps".into()));
        }
        let k = phase.len();
        let q_boot = match bootstrap {
            Some(b) => {
                let g = Graph::new();
                let s = self.stacked_states(&g, &[b], false, false)?;
                self.nets
                    .q_value(&g, s, Self::actions(&g, &[b])?, false)?
                    .item()
            }
            None => T::zero(),
        };

        let g = Graph::new();
        let steps: Vec<&Transition<T>> = phase.iter().collect();
        let s = self.stacked_states(&g, &steps, false, true)?;
        let q = self.nets.q_value(&g, s, Self::actions(&g, &steps)?, true)?;
        let boot = g.constant(vec![1, 1], vec![q_boot])?;
        let q_next = if k > 1 {
            g.concat(&[q.slice(0, 1, k - 1)?, boot], 0)?
        } else {
            boot
        };
        let disc = discounts(self.cfg.gamma, k);
        let inv_disc = g.constant(vec![k, 1], disc.iter().map(|d| T::lit(1.0 / d)).collect())?;
        let estimated = q.sub(q_next)?.mul(inv_disc)?;

        let value_loss = match target {
            PhaseTarget::Phase(r) => estimated.sum().add_scalar(T::lit(-r)).square(),
            PhaseTarget::Immediate => {
                let mut y = Vec::with_capacity(k);
                for (t, d) in phase.iter().zip(&disc) {
                    let r = t.immediate.ok_or_else(|| {
                        KsmError::Input("immediate reward missing from a transition".into())
                    })?;
                    y.push(T::lit(d * r));
                }
                let y = g.constant(vec![k, 1], y)?.add(q_next.detach())?;
                q.sub(y)?.square().mean()
            }
        };
        let r_e = g.constant(
            vec![k, 1],
            phase.iter().map(|t| T::lit(t.exploration)).collect(),
        )?;
        let exploration_loss = estimated.sub(r_e)?.square().mean();
        let loss = value_loss.add(exploration_loss.scale(T::lit(self.cfg.exploration_weight)))?;

        let grads = g.backward(loss)?;
        let mut group = self.nets.critic_group();
        grads.accumulate_into(group.iter_mut().map(|p| &mut **p));
        self.critic_opt.step(&mut group)?;
        Ok(CriticReport {
            loss: loss.item().as_f64(),
            value_loss: value_loss.item().as_f64(),
            exploration_loss: exploration_loss.item().as_f64(),
            estimated: estimated.value().iter().map(|v| v.as_f64()).collect(),
        })
    }

    /// Moves the actor and the student feature network up the critic's value
    /// over the phase's states. Returns the mean value before the step.
    pub fn actor_update(&mut self, phase: &[Transition<T>]) -> Result<f64> {
        if phase.is_empty() {
            return Err(KsmError::Input("phase has no steps".into()));
        }
        let g = Graph::new();
        let steps: Vec<&Transition<T>> = phase.iter().collect();
        let s = self.stacked_states(&g, &steps, true, false)?;
        let a = self.nets.act(&g, s, true)?;
        let value = self.nets.q_value(&g, s, a, false)?.mean();
        let grads = g.backward(value.neg())?;
        let mut group = self.nets.actor_group();
        grads.accumulate_into(group.iter_mut().map(|p| &mut **p));
        self.actor_opt.step(&mut group)?;
        Ok(value.item().as_f64())
    }
}
