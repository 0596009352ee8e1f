//! Loss construction and the MATD3 critic/actor updates.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::TrainError;
use crate::diffcore::{gumbel_noise, relaxed_softmax, AdamState, Tape, Tensor, Var};
use crate::env::NUM_ACTIONS;
use crate::nets::{Binder, Critic, NetworkBundle, ObsBatch, ParameterRegistry, WeightCopy};
use crate::replay::Transition;
use crate::roster::AgentId;

/// A sampled minibatch laid out for the networks: row `s * agents + i` is
/// agent `i` in sample `s`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub ids: Vec<AgentId>,
    pub obs: ObsBatch,
    pub next_obs: ObsBatch,
    /// `[rows, action_dim]` one-hot behaviour actions.
    pub actions: Tensor,
    /// `[rows, 1]`
    pub rewards: Tensor,
    /// `[rows, 1]`, 1.0 on terminal steps.
    pub done: Tensor,
}

impl Batch {
    pub fn from_transitions(transitions: &[&Transition]) -> Result<Self, TrainError> {
        let first = transitions
            .first()
            .ok_or_else(|| TrainError::Batch("empty batch".into()))?;
        let (n, landmarks) = (first.agents(), first.landmarks);
        let b = transitions.len();
        let mut obs = Vec::with_capacity(b * first.obs.len());
        let mut next = Vec::with_capacity(b * first.obs.len());
        let mut actions = Vec::with_capacity(b * n * NUM_ACTIONS);
        let mut rewards = Vec::with_capacity(b * n);
        let mut done = Vec::with_capacity(b * n);
        for t in transitions {
            if t.tag != first.tag || t.landmarks != landmarks {
                return Err(TrainError::Batch(format!("mixed rosters {} and {}", first.tag, t.tag)));
            }
            obs.extend_from_slice(&t.obs);
            next.extend_from_slice(&t.next_obs);
            actions.extend_from_slice(&t.actions);
            rewards.extend_from_slice(&t.rewards);
            done.extend(std::iter::repeat_n(if t.done { 1.0 } else { 0.0 }, n));
        }
        Ok(Self {
            ids: first.tag.0.clone(),
            obs: ObsBatch::new(b, n, landmarks, obs)?,
            next_obs: ObsBatch::new(b, n, landmarks, next)?,
            actions: Tensor::new(vec![b * n, NUM_ACTIONS], actions)?,
            rewards: Tensor::new(vec![b * n, 1], rewards)?,
            done: Tensor::new(vec![b * n, 1], done)?,
        })
    }

    pub fn samples(&self) -> usize {
        self.obs.samples()
    }

    pub fn rows(&self) -> usize {
        self.obs.groups()
    }
}

/// Clipped double-Q target for one agent and sample.
pub fn clipped_double_q(reward: f64, done: bool, gamma: f64, q1: f64, q2: f64) -> f64 {
    if done {
        reward
    } else {
        reward + gamma * q1.min(q2)
    }
}

/// Clipped Gaussian logit noise for target-policy smoothing.
pub fn smoothing_noise(shape: &[usize], sigma: f64, clip: f64, rng: &mut impl Rng) -> Tensor {
    let len = shape.iter().product();
    let data = if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).expect("positive sigma");
        (0..len).map(|_| normal.sample(rng).clamp(-clip, clip)).collect()
    } else {
        vec![0.0; len]
    };
    Tensor::new(shape.to_vec(), data).expect("finite noise")
}

/// Target-policy actions on the next observations: softmax of the target
/// logits plus (already clipped) noise, at `temperature`.
pub fn target_actions(bundle: &NetworkBundle, batch: &Batch, temperature: f64, noise: &Tensor) -> Result<Tensor, TrainError> {
    let mut tape = Tape::new();
    let mut binder = bundle.binder(WeightCopy::Target, None);
    let logits = bundle.policy_forward(&mut tape, &mut binder, &batch.ids, &batch.next_obs)?;
    let noise = tape.constant(noise.clone());
    let noisy = tape.add(logits, noise)?;
    let scaled = tape.scale(noisy, 1.0 / temperature)?;
    let out = tape.softmax(scaled)?;
    Ok(tape.value(out).clone())
}

/// Target values from both target critics and the clipped double-Q target.
pub struct TdTargets {
    pub q1: Tensor,
    pub q2: Tensor,
    pub y: Tensor,
}

pub fn td_targets(bundle: &NetworkBundle, batch: &Batch, gamma: f64, next_actions: &Tensor) -> Result<TdTargets, TrainError> {
    let mut q = Vec::with_capacity(2);
    for critic in Critic::BOTH {
        let mut tape = Tape::new();
        let mut binder = bundle.binder(WeightCopy::Target, None);
        let a = tape.constant(next_actions.clone());
        let out = bundle.value_forward(&mut tape, &mut binder, critic, &batch.ids, &batch.next_obs, a, None)?;
        q.push(tape.value(out).clone());
    }
    let q2 = q.pop().expect("two critics");
    let q1 = q.pop().expect("two critics");
    let y: Vec<f64> = (0..batch.rows())
        .map(|r| {
            clipped_double_q(
                batch.rewards.data()[r],
                batch.done.data()[r] != 0.0,
                gamma,
                q1.data()[r],
                q2.data()[r],
            )
        })
        .collect();
    let y = Tensor::new(vec![batch.rows(), 1], y)?;
    Ok(TdTargets { q1, q2, y })
}

/// Sum over agents of the batch-mean squared TD error, for one critic.
pub fn critic_loss(
    tape: &mut Tape,
    binder: &mut Binder,
    bundle: &NetworkBundle,
    critic: Critic,
    batch: &Batch,
    y: &Tensor,
) -> Result<Var, TrainError> {
    let actions = tape.constant(batch.actions.clone());
    let q = bundle.value_forward(tape, binder, critic, &batch.ids, &batch.obs, actions, None)?;
    let target = tape.constant(y.clone());
    let err = tape.squared_error(q, target)?;
    let total = tape.sum(err)?;
    Ok(tape.scale(total, 1.0 / batch.samples() as f64)?)
}

/// Policy loss `-mean_b Q1_i` summed over agents (or for one agent index),
/// where agent `i`'s own action is replaced by its relaxed policy sample.
///
/// `policy` binds the trainable policy-side parameters; `critic` should be a
/// frozen binder so no gradient reaches the critic.
#[allow(clippy::too_many_arguments)]
pub fn actor_loss(
    tape: &mut Tape,
    policy: &mut Binder,
    critic: &mut Binder,
    bundle: &NetworkBundle,
    batch: &Batch,
    gumbel: &Tensor,
    temperature: f64,
    logit_penalty: f64,
    agent: Option<usize>,
) -> Result<Var, TrainError> {
    let logits = bundle.policy_forward(tape, policy, &batch.ids, &batch.obs)?;
    let sample = relaxed_softmax(tape, logits, gumbel, temperature)?;
    let actions = tape.constant(batch.actions.clone());
    let q = bundle.value_forward(tape, critic, Critic::First, &batch.ids, &batch.obs, actions, Some(sample))?;
    let q = match agent {
        Some(i) => {
            let n = batch.ids.len();
            let rows: Vec<usize> = (0..batch.samples()).map(|s| s * n + i).collect();
            tape.gather_rows(q, &rows)?
        }
        None => q,
    };
    let total = tape.sum(q)?;
    let loss = tape.scale(total, -1.0 / batch.samples() as f64)?;
    if logit_penalty == 0.0 {
        return Ok(loss);
    }
    // Keeps logits bounded so Gumbel-Softmax exploration does not collapse.
    let own = match agent {
        Some(i) => {
            let n = batch.ids.len();
            let rows: Vec<usize> = (0..batch.samples()).map(|s| s * n + i).collect();
            tape.gather_rows(logits, &rows)?
        }
        None => logits,
    };
    let sq = tape.mul(own, own)?;
    let sq = tape.sum(sq)?;
    let penalty = tape.scale(sq, logit_penalty / (batch.samples() * bundle.config().action_dim) as f64)?;
    Ok(tape.add(loss, penalty)?)
}

/// Applies one Adam step to every parameter with a gradient.
pub(crate) fn apply_gradients(
    opt: &mut AdamState,
    params: &mut ParameterRegistry,
    grads: &BTreeMap<String, Tensor>,
) -> Result<(), TrainError> {
    let mut updates = Vec::with_capacity(grads.len());
    for (name, entry) in params.iter_mut() {
        if let Some(g) = grads.get(name) {
            updates.push((name.as_str(), &mut entry.online, g));
        }
    }
    opt.step(&mut updates)?;
    Ok(())
}

pub(crate) struct UpdateContext<'a> {
    pub gamma: f64,
    pub temperature: f64,
    pub target_noise: f64,
    pub target_noise_clip: f64,
    pub logit_penalty: f64,
    pub trainable: &'a BTreeSet<String>,
}

/// One critic round: both critics, every live agent. Returns the two losses.
pub(crate) fn critic_update(
    bundle: &mut NetworkBundle,
    opt: &mut AdamState,
    batch: &Batch,
    ctx: &UpdateContext,
    rng: &mut impl Rng,
) -> Result<[f64; 2], TrainError> {
    let noise = smoothing_noise(&[batch.rows(), NUM_ACTIONS], ctx.target_noise, ctx.target_noise_clip, rng);
    let next = target_actions(bundle, batch, ctx.temperature, &noise)?;
    let targets = td_targets(bundle, batch, ctx.gamma, &next)?;
    let (losses, grads) = {
        let mut tape = Tape::new();
        let mut binder = bundle.binder(WeightCopy::Online, Some(ctx.trainable));
        let l1 = critic_loss(&mut tape, &mut binder, bundle, Critic::First, batch, &targets.y)?;
        let l2 = critic_loss(&mut tape, &mut binder, bundle, Critic::Second, batch, &targets.y)?;
        let total = tape.add(l1, l2)?;
        let losses = [tape.value(l1).data()[0], tape.value(l2).data()[0]];
        let grads = tape.backward(total)?;
        (losses, binder.gradients(&tape, &grads))
    };
    if losses.iter().any(|l| !l.is_finite()) {
        return Err(TrainError::NonFinite(format!("critic losses {losses:?}")));
    }
    apply_gradients(opt, bundle.params_mut(), &grads)?;
    Ok(losses)
}

/// One policy round followed by the Polyak update of the trainable targets.
pub(crate) fn actor_update(
    bundle: &mut NetworkBundle,
    opt: &mut AdamState,
    batch: &Batch,
    ctx: &UpdateContext,
    tau: f64,
    rng: &mut impl Rng,
) -> Result<f64, TrainError> {
    let gumbel = gumbel_noise(&[batch.rows(), NUM_ACTIONS], rng);
    let (loss, grads) = {
        let mut tape = Tape::new();
        let mut policy = bundle.binder(WeightCopy::Online, Some(ctx.trainable));
        let mut critic = Binder::frozen(bundle.params(), WeightCopy::Online);
        let loss = actor_loss(&mut tape, &mut policy, &mut critic, bundle, batch, &gumbel, ctx.temperature, ctx.logit_penalty, None)?;
        let value = tape.value(loss).data()[0];
        let grads = tape.backward(loss)?;
        (value, policy.gradients(&tape, &grads))
    };
    if !loss.is_finite() {
        return Err(TrainError::NonFinite(format!("actor loss {loss}")));
    }
    apply_gradients(opt, bundle.params_mut(), &grads)?;
    bundle.polyak_update(tau, Some(ctx.trainable))?;
    Ok(loss)
}
