use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::env::{features, DiscreteAction, Env, EnvConfig, Observation, Task, NUM_ACTIONS};
use crate::nets::{NetworkBundle, ObsBatch};
use crate::rng::RngStream;
use crate::roster::{AgentId, AgentKind, Roster, RosterTag};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub roster: RosterTag,
    pub episodes: usize,
    /// Team return per episode (see [`team_reward`]).
    pub rewards: Vec<f64>,
    pub touches: Vec<usize>,
    pub mean_reward: f64,
    pub per_agent_reward: f64,
    pub mean_touches: f64,
}

/// The reported episode reward: the shared return in Finding Home and the
/// predators' shared return in Predator-Prey.
pub fn team_reward(task: Task, kinds: &[AgentKind], returns: &[f64]) -> f64 {
    let team: Vec<f64> = kinds
        .iter()
        .zip(returns)
        .filter(|(k, _)| task != Task::PredatorPrey || **k == AgentKind::Predator)
        .map(|(_, r)| *r)
        .collect();
    if team.is_empty() {
        0.0
    } else {
        team.iter().sum::<f64>() / team.len() as f64
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn obs_batch(observations: &[Observation]) -> Result<ObsBatch, TrainError> {
    let n = observations.len();
    let landmarks = observations.first().map_or(0, |o| o.landmarks.len());
    Ok(ObsBatch::new(1, n, landmarks, features(observations))?)
}

/// Greedy actions for every live agent. `policy_of(kind)` picks the bundle
/// that drives agents of that kind (mixed checkpoints).
pub fn greedy_actions<'a>(
    ids: &[AgentId],
    kinds: &[AgentKind],
    observations: &[Observation],
    policy_of: &dyn Fn(AgentKind) -> &'a NetworkBundle,
) -> Result<Vec<DiscreteAction>, TrainError> {
    let obs = obs_batch(observations)?;
    let mut cache: BTreeMap<*const NetworkBundle, Vec<f64>> = BTreeMap::new();
    let mut out = Vec::with_capacity(ids.len());
    for (i, kind) in kinds.iter().enumerate() {
        let bundle = policy_of(*kind);
        let key = bundle as *const NetworkBundle;
        if !cache.contains_key(&key) {
            let logits = bundle.policy_logits(ids, &obs)?;
            cache.insert(key, logits.into_data());
        }
        let logits = &cache[&key][i * NUM_ACTIONS..(i + 1) * NUM_ACTIONS];
        out.push(DiscreteAction::new(argmax(logits))?);
    }
    Ok(out)
}

/// Greedy rollouts with no learning. Episode starts come from `seed` alone,
/// so two policies evaluated with the same seed face identical layouts.
pub fn evaluate<'a>(
    task: Task,
    env_config: &EnvConfig,
    roster: &Roster,
    episodes: usize,
    seed: u64,
    policy_of: &dyn Fn(AgentKind) -> &'a NetworkBundle,
) -> Result<EvalReport, TrainError> {
    let mut env = Env::new(task, env_config.clone(), roster.clone())?;
    let mut rng = RngStream::new(seed, "eval");
    let ids = roster.live_ids();
    let kinds: Vec<AgentKind> = roster.live().map(|e| e.kind).collect();
    let mut rewards = Vec::with_capacity(episodes);
    let mut touches = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut obs = env.reset(&mut rng)?;
        let mut returns = vec![0.0; ids.len()];
        let mut touch = 0;
        loop {
            let actions = greedy_actions(&ids, &kinds, &obs, policy_of)?;
            let out = env.step(&actions)?;
            for (r, x) in returns.iter_mut().zip(&out.rewards) {
                *r += x;
            }
            touch += out.touches;
            obs = out.observations;
            if out.done {
                break;
            }
        }
        rewards.push(team_reward(task, &kinds, &returns));
        touches.push(touch);
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let mean_reward = mean(&rewards);
    let touch_f: Vec<f64> = touches.iter().map(|&t| t as f64).collect();
    Ok(EvalReport {
        roster: roster.tag(),
        episodes,
        per_agent_reward: mean_reward / ids.len() as f64,
        mean_reward,
        mean_touches: mean(&touch_f),
        rewards,
        touches,
    })
}

/// Same protocol with uniformly random actions: the baseline for
/// gap-normalised thresholds.
pub fn evaluate_random(task: Task, env_config: &EnvConfig, roster: &Roster, episodes: usize, seed: u64) -> Result<EvalReport, TrainError> {
    use rand::Rng;
    let mut env = Env::new(task, env_config.clone(), roster.clone())?;
    let mut rng = RngStream::new(seed, "eval");
    let mut act_rng = RngStream::new(seed, "eval/random-actions");
    let kinds: Vec<AgentKind> = roster.live().map(|e| e.kind).collect();
    let n = kinds.len();
    let mut rewards = Vec::with_capacity(episodes);
    let mut touches = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        env.reset(&mut rng)?;
        let mut returns = vec![0.0; n];
        let mut touch = 0;
        loop {
            let actions: Vec<DiscreteAction> = (0..n)
                .map(|_| DiscreteAction::new(act_rng.random_range(0..NUM_ACTIONS)))
                .collect::<Result<_, _>>()?;
            let out = env.step(&actions)?;
            for (r, x) in returns.iter_mut().zip(&out.rewards) {
                *r += x;
            }
            touch += out.touches;
            if out.done {
                break;
            }
        }
        rewards.push(team_reward(task, &kinds, &returns));
        touches.push(touch);
    }
    let mean_reward = if episodes == 0 { 0.0 } else { rewards.iter().sum::<f64>() / episodes as f64 };
    let mean_touches = if episodes == 0 {
        0.0
    } else {
        touches.iter().sum::<usize>() as f64 / episodes as f64
    };
    Ok(EvalReport {
        roster: roster.tag(),
        episodes,
        per_agent_reward: mean_reward / n as f64,
        mean_reward,
        mean_touches,
        rewards,
        touches,
    })
}
