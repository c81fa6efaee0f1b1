use super::*;
use crate::tensor::gradcheck::{check, rel_error};
use crate::tensor::{Adam, AdamConfig, Graph, Rng, Sgd, Tensor};

fn tiny_shape() -> KsmShape {
    KsmShape {
        cls_size: 3,
        batch_size: 2,
        feature_size: 8,
        hidden_size: 5,
    }
}

fn random_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

fn zero_mlp(m: &mut Mlp<f64>) {
    m.params_mut()
        .into_iter()
        .for_each(|p| p.data.iter_mut().for_each(|v| *v = 0.0));
}

fn mlp_oracle(m: &Mlp<f64>, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for (i, l) in m.layers.iter().enumerate() {
        let (n_in, n_out) = (l.w.shape()[0], l.w.shape()[1]);
        let mut out = l.b.data.clone();
        for (j, o) in out.iter_mut().enumerate() {
            *o += (0..n_in)
                .map(|k| h[k] * l.w.data[k * n_out + j])
                .sum::<f64>();
        }
        if i + 1 < m.layers.len() {
            out.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        h = out;
    }
    if m.head == Head::Sigmoid {
        h.iter_mut().for_each(|v| *v = 1.0 / (1.0 + (-*v).exp()));
    }
    h
}

fn state_values(nets: &KsmNetworks<f64>, s: &[f64], t: &[f64]) -> Vec<f64> {
    let g = Graph::new();
    let rows = s.len() / nets.shape.cls_size;
    let h = nets.shape.cls_size;
    let st = nets
        .states(
            &g,
            g.constant(vec![rows, h], s.to_vec()).unwrap(),
            g.constant(vec![rows, h], t.to_vec()).unwrap(),
            false,
            false,
        )
        .unwrap();
    st.value()
}

#[test]
fn zero_feature_nets_give_zero_state() {
    let mut nets = KsmNetworks::<f64>::new(tiny_shape(), &mut Rng::new(0)).unwrap();
    zero_mlp(&mut nets.feature_student);
    zero_mlp(&mut nets.feature_teacher);
    let mut rng = Rng::new(1);
    let s = state_values(&nets, &random_vec(&mut rng, 6), &random_vec(&mut rng, 6));
    assert_eq!(s.len(), 32);
    assert!(s.iter().all(|&v| v == 0.0));
}

#[test]
fn state_matches_composed_oracle() {
    let mut rng = Rng::new(2);
    let nets = KsmNetworks::<f64>::new(tiny_shape(), &mut rng).unwrap();
    let (s, t) = (random_vec(&mut rng, 6), random_vec(&mut rng, 6));
    let got = state_values(&nets, &s, &t);
    let mut want = Vec::new();
    for i in 0..2 {
        want.extend(mlp_oracle(&nets.feature_student, &s[i * 3..i * 3 + 3]));
        want.extend(mlp_oracle(&nets.feature_teacher, &t[i * 3..i * 3 + 3]));
    }
    for (a, b) in got.iter().zip(&want) {
        assert!((a - b).abs() < 1e-13);
    }
}

#[test]
fn partial_batch_is_a_state_error() {
    let nets = KsmNetworks::<f64>::new(tiny_shape(), &mut Rng::new(0)).unwrap();
    assert!(matches!(
        nets.select(&[0.0; 3], &[0.0; 3]),
        Err(KsmError::State(_))
    ));
    let g = Graph::new();
    let r = nets.states(&g, g.zeros(vec![3, 3]), g.zeros(vec![3, 3]), false, false);
    assert!(matches!(r, Err(KsmError::State(_))));
}

#[test]
fn actor_outputs() {
    let mut rng = Rng::new(4);
    let mut nets = KsmNetworks::<f64>::new(tiny_shape(), &mut rng).unwrap();
    for _ in 0..20 {
        let a = nets
            .select(&random_vec(&mut rng, 6), &random_vec(&mut rng, 6))
            .unwrap();
        assert!(a.values.iter().all(|&v| v > 0.0 && v < 1.0));
    }
    let (s, t) = (random_vec(&mut rng, 6), random_vec(&mut rng, 6));
    let state = state_values(&nets, &s, &t);
    let a = nets.select(&s, &t).unwrap();
    let want = mlp_oracle(&nets.actor, &state);
    for (x, y) in a.values.iter().zip(&want) {
        assert!((x - y).abs() < 1e-13);
    }
    zero_mlp(&mut nets.actor);
    assert_eq!(nets.select(&s, &t).unwrap().values, [0.5; 4]);
}

fn q_of(nets: &KsmNetworks<f64>, state: &[f64], action: &[f64]) -> f64 {
    let g = Graph::new();
    let s = g.constant(vec![1, state.len()], state.to_vec()).unwrap();
    let a = g.constant(vec![1, 4], action.to_vec()).unwrap();
    nets.q_value(&g, s, a, false).unwrap().item()
}

#[test]
fn critic_values() {
    let mut rng = Rng::new(5);
    let mut nets = KsmNetworks::<f64>::new(tiny_shape(), &mut rng).unwrap();
    let state = random_vec(&mut rng, 32);
    let action = [0.1, 0.7, 0.4, 0.9];
    let mut input = state.clone();
    input.extend(action);
    assert!((q_of(&nets, &state, &action) - mlp_oracle(&nets.critic, &input)[0]).abs() < 1e-13);
    zero_mlp(&mut nets.critic);
    assert_eq!(q_of(&nets, &state, &action), 0.0);
}

#[test]
fn critic_gradient_wrt_action() {
    let mut rng = Rng::new(6);
    let nets = KsmNetworks::<f64>::new(tiny_shape(), &mut rng).unwrap();
    let state = random_vec(&mut rng, 32);
    let action = vec![0.2, 0.6, 0.35, 0.8];
    let r = check(&[(vec![1, 4], action)], 1e-5, |g, x| {
        let s = g.constant(vec![1, 32], state.clone())?;
        Ok(nets
            .critic
            .forward(g, g.concat(&[s, x[0]], 1)?, false)
            .unwrap()
            .sum())
    })
    .unwrap();
    assert!(r.passes(1e-4), "{r:?}");
}

/// `Q(s, a) = −Σ (a_m − 0.8)²`, independent of the state.
struct Toy;

impl Critic<f64> for Toy {
    fn q<'g>(
        &self,
        _g: &'g Graph<f64>,
        _s: Tensor<'g, f64>,
        a: Tensor<'g, f64>,
    ) -> Result<Tensor<'g, f64>> {
        Ok(a.add_scalar(-0.8)
            .square()
            .sum_last()?
            .reshape(vec![a.shape()[0], 1])?
            .neg())
    }
}

#[test]
fn actor_climbs_toy_critic() {
    let mut rng = Rng::new(7);
    let mut actor = Mlp::<f64>::new("actor", &[3, 16, 16, 1], Head::Sigmoid, &mut rng).unwrap();
    let states = random_vec(&mut rng, 12);
    let mut opt = Adam::new(AdamConfig::with_lr(1e-3));
    let mut reached = None;
    for step in 1..=5000 {
        actor_step(&mut actor, &mut opt, &Toy, &states, 3).unwrap();
        let g = Graph::new();
        let out = actor
            .forward(&g, g.constant(vec![4, 3], states.clone()).unwrap(), false)
            .unwrap();
        if out.value().iter().all(|a| (a - 0.8).abs() < 1e-2) {
            reached = Some(step);
            break;
        }
    }
    assert!(reached.is_some());
}

#[test]
fn flat_critic_leaves_actor_unchanged() {
    let mut rng = Rng::new(8);
    let mut nets = KsmNetworks::<f64>::new(tiny_shape(), &mut rng).unwrap();
    zero_mlp(&mut nets.critic);
    nets.critic.layers[2].b.data[0] = 1.5;
    let before = nets.actor.clone();
    let states = random_vec(&mut rng, 64);
    let critic = nets.clone();
    actor_step(&mut nets.actor, &mut Sgd::new(0.1), &critic, &states, 32).unwrap();
    assert!(nets.actor.bit_eq(&before));
}

fn policy_value(actor: &Mlp<f64>, critic: &KsmNetworks<f64>, states: &[f64], d: usize) -> f64 {
    let g = Graph::new();
    let s = g
        .constant(vec![states.len() / d, d], states.to_vec())
        .unwrap();
    let a = actor.forward(&g, s, false).unwrap();
    critic.q(&g, s, a).unwrap().mean().item()
}

#[test]
fn policy_gradient_matches_finite_differences() {
    let mut rng = Rng::new(9);
    let nets = KsmNetworks::<f64>::new(tiny_shape(), &mut rng).unwrap();
    let states = random_vec(&mut rng, 96);
    let g = Graph::new();
    let s = g.constant(vec![3, 32], states.clone()).unwrap();
    let a = nets.actor.forward(&g, s, true).unwrap();
    let grads = g.backward(nets.q(&g, s, a).unwrap().mean()).unwrap();
    for (li, layer) in nets.actor.layers.iter().enumerate() {
        let analytic = grads.param(layer.w.id()).unwrap();
        for j in (0..layer.w.numel()).step_by(7) {
            let mut actor = nets.actor.clone();
            actor.layers[li].w.data[j] += 1e-5;
            let up = policy_value(&actor, &nets, &states, 32);
            actor.layers[li].w.data[j] -= 2e-5;
            let down = policy_value(&actor, &nets, &states, 32);
            let numeric = (up - down) / 2e-5;
            assert!(
                rel_error(analytic[j], numeric) < 1e-3,
                "layer {li} weight {j}"
            );
        }
    }
}

#[test]
fn small_actor_step_ascends() {
    let mut rng = Rng::new(10);
    let mut nets = KsmNetworks::<f64>::new(tiny_shape(), &mut rng).unwrap();
    let states = random_vec(&mut rng, 160);
    let critic = nets.clone();
    let before = policy_value(&nets.actor, &critic, &states, 32);
    actor_step(&mut nets.actor, &mut Sgd::new(1e-4), &critic, &states, 32).unwrap();
    assert!(policy_value(&nets.actor, &critic, &states, 32) > before);
}

fn transitions(rng: &mut Rng, n: usize, shape: &KsmShape) -> Vec<Transition<f64>> {
    let rows = shape.batch_size * shape.cls_size;
    (0..n)
        .map(|_| Transition {
            student_cls: random_vec(rng, rows),
            teacher_cls: random_vec(rng, rows),
            action: Action {
                values: std::array::from_fn(|_| rng.uniform()),
            },
            exploration: 0.1 * rng.uniform(),
            immediate: Some(rng.normal()),
        })
        .collect()
}

fn learner(seed: u64, cfg: KsmConfig) -> KsmLearner<f64> {
    let nets = KsmNetworks::new(tiny_shape(), &mut Rng::new(seed)).unwrap();
    KsmLearner::new(nets, cfg).unwrap()
}

#[test]
fn critic_update_reports_phase_algebra() {
    let mut rng = Rng::new(11);
    let mut l = learner(11, KsmConfig::default());
    let phase = transitions(&mut rng, 4, &tiny_shape());
    let boot = transitions(&mut rng, 1, &tiny_shape());
    // Values before the update, recomputed independently.
    let q: Vec<f64> = phase
        .iter()
        .chain(&boot)
        .map(|t| {
            let s = state_values(&l.nets, &t.student_cls, &t.teacher_cls);
            q_of(&l.nets, &s, &t.action.values)
        })
        .collect();
    let r_hat: Vec<f64> = (0..4)
        .map(|t| estimated_reward(q[t], q[t + 1], t as i64 + 1, 0.98).unwrap())
        .collect();
    let rep = l
        .critic_update(&phase, Some(&boot[0]), PhaseTarget::Phase(0.05))
        .unwrap();
    for (a, b) in rep.estimated.iter().zip(&r_hat) {
        assert!((a - b).abs() < 1e-10);
    }
    assert!((rep.value_loss - phase_loss(&r_hat, 0.05).unwrap()).abs() < 1e-10);
    let expl: Vec<f64> = phase.iter().map(|t| t.exploration).collect();
    assert!((rep.exploration_loss - critic_step_loss(&r_hat, &expl).unwrap()).abs() < 1e-10);
}

#[test]
fn td_regression_matches_formula() {
    let mut rng = Rng::new(12);
    let mut l = learner(12, KsmConfig::default());
    let phase = transitions(&mut rng, 3, &tiny_shape());
    let q: Vec<f64> = phase
        .iter()
        .map(|t| {
            let s = state_values(&l.nets, &t.student_cls, &t.teacher_cls);
            q_of(&l.nets, &s, &t.action.values)
        })
        .collect();
    let targets: Vec<f64> = (0..3)
        .map(|t| {
            let next = if t + 1 < 3 { q[t + 1] } else { 0.0 };
            td_target(phase[t].immediate.unwrap(), t as i64 + 1, next, 0.98).unwrap()
        })
        .collect();
    let rep = l
        .critic_update(&phase, None, PhaseTarget::Immediate)
        .unwrap();
    assert!((rep.value_loss - critic_step_loss(&q, &targets).unwrap()).abs() < 1e-10);
}

#[test]
fn td_loss_falls_monotonically_with_fixed_target() {
    // A terminal one-step phase has the fixed target γ·r.
    let mut rng = Rng::new(13);
    let cfg = KsmConfig {
        exploration_weight: 0.0,
        critic_lr: 1e-4,
        ..KsmConfig::default()
    };
    let mut l = learner(13, cfg);
    let mut phase = transitions(&mut rng, 1, &tiny_shape());
    phase[0].immediate = Some(4.0);
    let mut last = f64::INFINITY;
    for _ in 0..100 {
        let rep = l
            .critic_update(&phase, None, PhaseTarget::Immediate)
            .unwrap();
        assert!(rep.value_loss < last, "{} !< {last}", rep.value_loss);
        last = rep.value_loss;
    }
}

#[test]
fn updates_touch_only_their_own_networks() {
    let mut rng = Rng::new(14);
    let mut l = learner(14, KsmConfig::default());
    let phase = transitions(&mut rng, 3, &tiny_shape());
    let before = l.nets.clone();
    l.critic_update(&phase, None, PhaseTarget::Phase(0.1))
        .unwrap();
    assert!(l.nets.actor.bit_eq(&before.actor));
    assert!(l.nets.feature_student.bit_eq(&before.feature_student));
    assert!(!l.nets.critic.bit_eq(&before.critic));
    assert!(!l.nets.feature_teacher.bit_eq(&before.feature_teacher));

    let mid = l.nets.clone();
    l.actor_update(&phase).unwrap();
    assert!(l.nets.critic.bit_eq(&mid.critic));
    assert!(l.nets.feature_teacher.bit_eq(&mid.feature_teacher));
    assert!(!l.nets.actor.bit_eq(&mid.actor));
    assert!(!l.nets.feature_student.bit_eq(&mid.feature_student));
}

#[test]
fn empty_phase_and_missing_reward_are_errors() {
    let mut rng = Rng::new(15);
    let mut l = learner(15, KsmConfig::default());
    assert!(matches!(
        l.critic_update(&[], None, PhaseTarget::Phase(0.0)),
        Err(KsmError::Input(_))
    ));
    let mut phase = transitions(&mut rng, 2, &tiny_shape());
    phase[1].immediate = None;
    assert!(l
        .critic_update(&phase, None, PhaseTarget::Immediate)
        .is_err());
}

#[test]
fn config_validation() {
    assert!(KsmConfig::default().validate().is_ok());
    for cfg in [
        KsmConfig {
            lambda: 1.5,
            ..Default::default()
        },
        KsmConfig {
            phase_size: 0,
            ..Default::default()
        },
        KsmConfig {
            gamma: 0.0,
            ..Default::default()
        },
        KsmConfig {
            actor_lr: 0.0,
            ..Default::default()
        },
        KsmConfig {
            alpha: -0.1,
            ..Default::default()
        },
        KsmConfig {
            gamma: 0.5,
            phase_size: 128,
            ..Default::default()
        },
    ] {
        assert!(
            matches!(cfg.validate(), Err(KsmError::Config(_))),
            "{cfg:?}"
        );
    }
}

#[test]
fn reward_metric_signs() {
    assert!((RewardMetric::Loss.improvement(0.70, 0.65) - 0.05).abs() < 1e-15);
    assert!((RewardMetric::Accuracy.improvement(0.80, 0.85) - 0.05).abs() < 1e-15);
    assert!(RewardMetric::F1.improvement(0.9, 0.8) < 0.0);
}
