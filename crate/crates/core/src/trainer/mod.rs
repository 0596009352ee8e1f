//! MATD3 training with a mutable roster: regular training, few-shot
//! adaptation of joining agents, drops and greedy evaluation.

mod eval;
mod metrics;
mod update;

pub use eval::{argmax, evaluate, evaluate_random, greedy_actions, team_reward, EvalReport};
pub use metrics::{episodes_to_threshold, gap_threshold, window_mean, write_csv, EpisodeRecord, EvalPoint, Metrics, CSV_HEADER};
pub use update::{actor_loss, clipped_double_q, critic_loss, smoothing_noise, target_actions, td_targets, Batch, TdTargets};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{gumbel_noise, AdamConfig, AdamState, DiffError, Moments, Tensor};
use crate::env::{DiscreteAction, Env, EnvConfig, EnvError, Task, NUM_ACTIONS};
use crate::nets::checkpoint::{bundle_from_parts, bundle_parts, BundleMeta, Checkpoint, CheckpointError};
use crate::nets::{NetConfig, NetError, NetworkBundle, Phase};
use crate::replay::{Buffer, ReplayError, Transition};
use crate::rng::{RngState, RngStream};
use crate::roster::{AgentId, AgentKind, Roster, RosterError};
use update::UpdateContext;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Roster(#[from] RosterError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("batch: {0}")]
    Batch(String),
    #[error("non-finite loss ({0}); aborting")]
    NonFinite(String),
    #[error("{0}")]
    Usage(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub gamma: f64,
    pub tau: f64,
    pub batch_size: usize,
    /// Critic update rounds per `window_steps` environment steps.
    pub critic_rounds_per_window: usize,
    pub window_steps: usize,
    /// Critic rounds per policy/target round.
    pub policy_delay: usize,
    pub critic_lr: f64,
    pub actor_lr: f64,
    pub temperature: f64,
    pub target_noise: f64,
    pub target_noise_clip: f64,
    /// Treat the episode time limit as a truncation and keep bootstrapping
    /// through it (every `done` in these tasks is a time limit).
    pub bootstrap_timeouts: bool,
    /// Weight of the mean squared policy logit added to the actor loss.
    pub logit_penalty: f64,
    pub replay_capacity: usize,
    /// Few-shot episodes before "few-shot + fine-tune" resumes regular training.
    pub fine_tune_after: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            tau: 7e-5,
            batch_size: 1024,
            critic_rounds_per_window: 4,
            window_steps: 100,
            policy_delay: 2,
            critic_lr: 1e-3,
            actor_lr: 1e-3,
            temperature: 1.0,
            target_noise: 0.2,
            target_noise_clip: 0.5,
            bootstrap_timeouts: false,
            logit_penalty: 1e-3,
            replay_capacity: Buffer::DEFAULT_CAPACITY,
            fine_tune_after: 1000,
        }
    }
}

impl TrainConfig {
    /// Settings that learn within a few thousand episodes on one CPU core.
    pub fn desk() -> Self {
        Self {
            tau: 0.05,
            batch_size: 128,
            critic_lr: 3e-3,
            actor_lr: 3e-3,
            bootstrap_timeouts: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must be in (0, 1]");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must be in (0, 1]");
        }
        if self.batch_size == 0
            || self.critic_rounds_per_window == 0
            || self.window_steps == 0
            || self.policy_delay == 0
            || self.replay_capacity == 0
        {
            return bad("batch_size, critic_rounds_per_window, window_steps, policy_delay and replay_capacity must be positive");
        }
        if self.window_steps % self.critic_rounds_per_window != 0 {
            return bad("window_steps must be a multiple of critic_rounds_per_window");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if !(self.critic_lr >= 0.0 && self.actor_lr >= 0.0) {
            return bad("learning rates must be non-negative");
        }
        if !(self.target_noise >= 0.0 && self.target_noise_clip >= 0.0 && self.logit_penalty >= 0.0) {
            return bad("target noise parameters and logit_penalty must be non-negative");
        }
        Ok(())
    }

    /// Environment steps between critic rounds.
    pub fn update_every(&self) -> usize {
        self.window_steps / self.critic_rounds_per_window
    }
}

/// How a run reacts to joining agents.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JoinMode {
    /// Train only the joiners' selectors and embeddings.
    FewShot,
    /// Few-shot for `fine_tune_after` episodes, then regular training.
    FewShotFineTune,
    /// Discard everything and start a fresh model on the new roster.
    FromScratch,
}

const STREAMS: [&str; 5] = ["init", "env", "explore", "replay", "noise"];

#[derive(Clone, Debug)]
struct Streams {
    init: RngStream,
    env: RngStream,
    explore: RngStream,
    replay: RngStream,
    noise: RngStream,
}

impl Streams {
    fn new(seed: u64) -> Self {
        Self {
            init: RngStream::new(seed, "init"),
            env: RngStream::new(seed, "env"),
            explore: RngStream::new(seed, "explore"),
            replay: RngStream::new(seed, "replay"),
            noise: RngStream::new(seed, "noise"),
        }
    }

    fn states(&self) -> BTreeMap<String, RngState> {
        [&self.init, &self.env, &self.explore, &self.replay, &self.noise]
            .iter()
            .zip(STREAMS)
            .map(|(s, n)| (n.to_string(), s.state()))
            .collect()
    }

    fn from_states(states: &BTreeMap<String, RngState>) -> Result<Self, TrainError> {
        let get = |n: &str| {
            states
                .get(n)
                .map(RngStream::from_state)
                .ok_or_else(|| TrainError::Checkpoint(CheckpointError::Malformed(format!("missing rng stream {n}"))))
        };
        Ok(Self {
            init: get("init")?,
            env: get("env")?,
            explore: get("explore")?,
            replay: get("replay")?,
            noise: get("noise")?,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
struct Counters {
    episode: usize,
    total_steps: usize,
    since_update: usize,
    critic_rounds: usize,
    actor_rounds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RunMeta {
    bundle: BundleMeta,
    task: Task,
    env: EnvConfig,
    train: TrainConfig,
    seed: u64,
    phase: Phase,
    fine_tune_in: Option<usize>,
    counters: Counters,
    rng: BTreeMap<String, RngState>,
    adam: BTreeMap<String, AdamConfig>,
    adam_steps: BTreeMap<String, u64>,
}

/// A training run: environment, networks, optimizers, replay and counters.
#[derive(Clone, Debug)]
pub struct Trainer {
    config: TrainConfig,
    task: Task,
    env: Env,
    bundle: NetworkBundle,
    critic_opt: AdamState,
    actor_opt: AdamState,
    buffer: Buffer,
    phase: Phase,
    fine_tune_in: Option<usize>,
    seed: u64,
    rngs: Streams,
    counters: Counters,
    metrics: Metrics,
}

impl Trainer {
    pub fn new(
        config: TrainConfig,
        task: Task,
        env_config: EnvConfig,
        net_config: NetConfig,
        roster: Roster,
        seed: u64,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        let net_config = NetConfig {
            landmarks: env_config.landmarks(task),
            ..net_config
        };
        let env = Env::new(task, env_config, roster.clone())?;
        let mut rngs = Streams::new(seed);
        let bundle = NetworkBundle::new(net_config, &roster, &mut rngs.init)?;
        Ok(Self {
            critic_opt: AdamState::new(AdamConfig::with_lr(config.critic_lr)),
            actor_opt: AdamState::new(AdamConfig::with_lr(config.actor_lr)),
            buffer: Buffer::new(config.replay_capacity)?,
            config,
            task,
            env,
            bundle,
            phase: Phase::Regular,
            fine_tune_in: None,
            seed,
            rngs,
            counters: Counters::default(),
            metrics: Metrics::default(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn env(&self) -> &Env {
        &self.env
    }

    pub fn env_config(&self) -> &EnvConfig {
        self.env.config()
    }

    pub fn bundle(&self) -> &NetworkBundle {
        &self.bundle
    }

    pub fn roster(&self) -> &Roster {
        self.env.roster()
    }

    pub fn phase(&self) -> &Phase {
        &self.phase
    }

    pub fn buffer(&self) -> &Buffer {
        &self.buffer
    }

    pub fn metrics(&self) -> &Metrics {
        &self.metrics
    }

    pub fn metrics_mut(&mut self) -> &mut Metrics {
        &mut self.metrics
    }

    pub fn episodes_run(&self) -> usize {
        self.counters.episode
    }

    pub fn total_steps(&self) -> usize {
        self.counters.total_steps
    }

    pub fn critic_rounds(&self) -> usize {
        self.counters.critic_rounds
    }

    pub fn actor_rounds(&self) -> usize {
        self.counters.actor_rounds
    }

    fn phase_name(&self) -> &'static str {
        match self.phase {
            Phase::Regular => "regular",
            Phase::FewShot(_) => "few_shot",
        }
    }

    /// Behaviour actions: a Gumbel-Softmax sample per agent, executed as its argmax.
    ///
    /// Also returns the relaxed samples, which is what replay stores.
    #[allow(clippy::type_complexity)]
    fn explore_actions(
        &mut self,
        ids: &[AgentId],
        obs: &[crate::env::Observation],
    ) -> Result<(Vec<DiscreteAction>, Vec<[f64; NUM_ACTIONS]>), TrainError> {
        let batch = eval::obs_batch(obs)?;
        let logits = self.bundle.policy_logits(ids, &batch)?;
        let noise = gumbel_noise(&[ids.len(), NUM_ACTIONS], &mut self.rngs.explore);
        let mut out = Vec::with_capacity(ids.len());
        let mut soft = Vec::with_capacity(ids.len());
        for i in 0..ids.len() {
            let row: Vec<f64> = (0..NUM_ACTIONS)
                .map(|a| (logits.data()[i * NUM_ACTIONS + a] + noise.data()[i * NUM_ACTIONS + a]) / self.config.temperature)
                .collect();
            out.push(DiscreteAction::new(argmax(&row))?);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut p = [0.0; NUM_ACTIONS];
            for (p, x) in p.iter_mut().zip(&row) {
                *p = (x - m).exp();
            }
            let z: f64 = p.iter().sum();
            p.iter_mut().for_each(|v| *v /= z);
            soft.push(p);
        }
        Ok((out, soft))
    }

    /// One critic round, plus a policy/target round every `policy_delay`
    /// critic rounds. Skipped (returns `None`) while the current roster's
    /// replay segment is smaller than a batch.
    fn update_round(&mut self) -> Result<Option<([f64; 2], Option<f64>)>, TrainError> {
        let tag = self.env.roster().tag();
        let mut batch = match self.buffer.sample(self.config.batch_size, &tag, &mut self.rngs.replay)? {
            Some(ts) => Batch::from_transitions(&ts)?,
            None => return Ok(None),
        };
        if self.config.bootstrap_timeouts {
            batch.done = Tensor::zeros(batch.done.shape());
        }
        let trainable = self.bundle.trainable_set(&self.phase)?;
        let ctx = UpdateContext {
            gamma: self.config.gamma,
            temperature: self.config.temperature,
            target_noise: self.config.target_noise,
            target_noise_clip: self.config.target_noise_clip,
            logit_penalty: self.config.logit_penalty,
            trainable: &trainable,
        };
        let critic = update::critic_update(&mut self.bundle, &mut self.critic_opt, &batch, &ctx, &mut self.rngs.noise)?;
        self.counters.critic_rounds += 1;
        let mut actor = None;
        if self.counters.critic_rounds % self.config.policy_delay == 0 {
            actor = Some(update::actor_update(
                &mut self.bundle,
                &mut self.actor_opt,
                &batch,
                &ctx,
                self.config.tau,
                &mut self.rngs.noise,
            )?);
            self.counters.actor_rounds += 1;
        }
        Ok(Some((critic, actor)))
    }

    /// Runs one exploring training episode with updates at the configured cadence.
    pub fn run_episode(&mut self) -> Result<EpisodeRecord, TrainError> {
        let ids = self.env.roster().live_ids();
        let kinds: Vec<AgentKind> = self.env.roster().live().map(|e| e.kind).collect();
        let tag = self.env.roster().tag();
        let phase = self.phase_name().to_string();
        let mut obs = self.env.reset(&mut self.rngs.env)?;
        let mut returns = vec![0.0; ids.len()];
        let mut touches = 0;
        let (mut critic_losses, mut actor_losses) = (Vec::new(), Vec::new());
        loop {
            let (actions, soft) = self.explore_actions(&ids, &obs)?;
            let out = self.env.step(&actions)?;
            for (r, x) in returns.iter_mut().zip(&out.rewards) {
                *r += x;
            }
            touches += out.touches;
            self.buffer
                .push(Transition::new(tag.clone(), &obs, &soft, &out.rewards, &out.observations, out.done)?)?;
            self.counters.total_steps += 1;
            self.counters.since_update += 1;
            if self.counters.since_update == self.config.update_every() {
                self.counters.since_update = 0;
                if let Some((c, a)) = self.update_round()? {
                    critic_losses.push(c[0] + c[1]);
                    actor_losses.extend(a);
                }
            }
            obs = out.observations;
            if out.done {
                break;
            }
        }
        let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        let record = EpisodeRecord {
            episode: self.counters.episode,
            seed: self.seed,
            roster: tag,
            phase,
            rewards: ids.iter().copied().zip(returns.iter().copied()).collect(),
            mean_reward: team_reward(self.task, &kinds, &returns),
            touches,
            critic_loss: mean(&critic_losses),
            actor_loss: mean(&actor_losses),
        };
        self.counters.episode += 1;
        if let Some(left) = self.fine_tune_in.as_mut() {
            *left = left.saturating_sub(1);
            if *left == 0 {
                self.phase = Phase::Regular;
                self.fine_tune_in = None;
            }
        }
        self.metrics.episodes.push(record.clone());
        self.metrics.critic_rounds = self.counters.critic_rounds;
        self.metrics.actor_rounds = self.counters.actor_rounds;
        Ok(record)
    }

    pub fn train(&mut self, episodes: usize) -> Result<(), TrainError> {
        let start = std::time::Instant::now();
        for _ in 0..episodes {
            self.run_episode()?;
        }
        self.metrics.wall_clock += start.elapsed().as_secs_f64();
        Ok(())
    }

    /// Trains for `episodes`, evaluating greedily before the first episode and
    /// after every `every` episodes. Returns the evaluation points of this
    /// call; their `episode` field counts every episode of the run.
    pub fn train_with_evals(
        &mut self,
        episodes: usize,
        every: usize,
        eval_episodes: usize,
        eval_seed: u64,
        stop_at: Option<f64>,
    ) -> Result<Vec<EvalPoint>, TrainError> {
        if every == 0 {
            return Err(TrainError::Usage("evaluation interval must be positive".into()));
        }
        let mut points = Vec::new();
        let mut done = 0;
        loop {
            let report = self.evaluate(eval_episodes, eval_seed)?;
            let point = EvalPoint {
                episode: self.counters.episode,
                roster: report.roster.clone(),
                mean_reward: report.mean_reward,
                per_agent_reward: report.per_agent_reward,
                mean_touches: report.mean_touches,
            };
            let reached = stop_at.is_some_and(|t| point.per_agent_reward >= t);
            self.metrics.evals.push(point.clone());
            points.push(point);
            if done >= episodes || reached {
                return Ok(points);
            }
            let chunk = every.min(episodes - done);
            self.train(chunk)?;
            done += chunk;
        }
    }

    /// Greedy evaluation of the current bundle on the current roster.
    pub fn evaluate(&self, episodes: usize, seed: u64) -> Result<EvalReport, TrainError> {
        evaluate(self.task, self.env.config(), self.env.roster(), episodes, seed, &|_| &self.bundle)
    }

    /// Adds `joiners` between episodes. Returns the number of new trainable
    /// scalars (for the from-scratch mode: every parameter of the new model).
    pub fn join(&mut self, joiners: &[(AgentId, AgentKind)], mode: JoinMode) -> Result<usize, TrainError> {
        if joiners.is_empty() {
            return Err(TrainError::Usage("no joining agents".into()));
        }
        if let Some(&(id, _)) = joiners.iter().find(|(id, _)| self.env.roster().is_live(*id)) {
            return Err(RosterError::Duplicate(id).into());
        }
        self.env.roster_change(joiners, &[])?;
        match mode {
            JoinMode::FromScratch => {
                let mut fresh = Roster::new();
                for e in self.env.roster().live() {
                    fresh.add(e.id, e.kind)?;
                }
                self.bundle = NetworkBundle::new(self.bundle.config().clone(), &fresh, &mut self.rngs.init)?;
                self.critic_opt = AdamState::new(AdamConfig::with_lr(self.config.critic_lr));
                self.actor_opt = AdamState::new(AdamConfig::with_lr(self.config.actor_lr));
                self.buffer = Buffer::new(self.config.replay_capacity)?;
                self.phase = Phase::Regular;
                self.fine_tune_in = None;
                let all: BTreeSet<String> = self.bundle.params().names().cloned().collect();
                Ok(self.bundle.params().scalar_count(&all))
            }
            JoinMode::FewShot | JoinMode::FewShotFineTune => {
                let mut added = 0;
                let mut ids: BTreeSet<AgentId> = match &self.phase {
                    Phase::FewShot(ids) => ids.clone(),
                    Phase::Regular => BTreeSet::new(),
                };
                for &(id, kind) in joiners {
                    added += self.bundle.add_agent(id, kind, None, &mut self.rngs.init)?;
                    ids.insert(id);
                }
                self.phase = Phase::FewShot(ids);
                self.fine_tune_in = (mode == JoinMode::FewShotFineTune).then_some(self.config.fine_tune_after.max(1));
                Ok(added)
            }
        }
    }

    /// Few-shot phase: join, then train only the joiners for `shots` episodes.
    pub fn few_shot_adapt(&mut self, joiners: &[(AgentId, AgentKind)], shots: usize) -> Result<(), TrainError> {
        self.join(joiners, JoinMode::FewShot)?;
        self.train(shots)
    }

    /// Returns to regular training of every live agent.
    pub fn resume_regular(&mut self) {
        self.phase = Phase::Regular;
        self.fine_tune_in = None;
    }

    /// Drops agents between episodes; nothing is reinitialised.
    pub fn handle_drop(&mut self, ids: &[AgentId]) -> Result<(), TrainError> {
        self.env.roster_change(&[], ids)?;
        for &id in ids {
            self.bundle.remove_agent(id)?;
        }
        if let Phase::FewShot(set) = &mut self.phase {
            for id in ids {
                set.remove(id);
            }
            if set.is_empty() {
                self.phase = Phase::Regular;
                self.fine_tune_in = None;
            }
        }
        Ok(())
    }

    /// Snapshot of networks, optimizer moments, RNG streams and counters.
    /// The replay buffer is not included.
    pub fn checkpoint(&self) -> Result<Checkpoint, TrainError> {
        let (bundle, mut tensors) = bundle_parts(&self.bundle);
        let mut adam_steps = BTreeMap::new();
        let mut adam = BTreeMap::new();
        for (label, opt) in [("critic", &self.critic_opt), ("actor", &self.actor_opt)] {
            adam.insert(label.to_string(), opt.config);
            for (name, m) in opt.entries() {
                tensors.push((format!("adam/{label}/m/{name}"), m.m.clone()));
                tensors.push((format!("adam/{label}/v/{name}"), m.v.clone()));
                adam_steps.insert(format!("{label}/{name}"), m.t);
            }
        }
        let meta = RunMeta {
            bundle,
            task: self.task,
            env: self.env.config().clone(),
            train: self.config.clone(),
            seed: self.seed,
            phase: self.phase.clone(),
            fine_tune_in: self.fine_tune_in,
            counters: self.counters.clone(),
            rng: self.rngs.states(),
            adam,
            adam_steps,
        };
        Ok(Checkpoint {
            meta: serde_json::to_string(&meta).map_err(CheckpointError::from)?,
            tensors,
        })
    }

    /// Rebuilds a run from [`Trainer::checkpoint`] output, with an empty replay buffer.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, TrainError> {
        let meta: RunMeta = serde_json::from_str(&ck.meta).map_err(CheckpointError::from)?;
        meta.train.validate()?;
        let tensors = ck.tensor_map();
        let bundle = bundle_from_parts(&meta.bundle, &tensors)?;
        let mut opts = Vec::new();
        for label in ["critic", "actor"] {
            let config = *meta
                .adam
                .get(label)
                .ok_or_else(|| CheckpointError::Malformed(format!("missing {label} optimizer")))?;
            let mut opt = AdamState::new(config);
            let prefix = format!("{label}/");
            for (key, &t) in meta.adam_steps.range(prefix.clone()..) {
                let Some(name) = key.strip_prefix(&prefix) else { break };
                let fetch = |part: &str| -> Result<Tensor, TrainError> {
                    tensors
                        .get(format!("adam/{label}/{part}/{name}").as_str())
                        .map(|t| (*t).clone())
                        .ok_or_else(|| CheckpointError::Malformed(format!("missing adam/{label}/{part}/{name}")).into())
                };
                opt.insert(name.to_string(), Moments { m: fetch("m")?, v: fetch("v")?, t });
            }
            opts.push(opt);
        }
        let actor_opt = opts.pop().expect("two optimizers");
        let critic_opt = opts.pop().expect("two optimizers");
        let live: Vec<(AgentId, AgentKind)> = meta.bundle.roster.live().map(|e| (e.id, e.kind)).collect();
        let mut env_roster = Roster::new();
        for (id, kind) in live {
            env_roster.add(id, kind)?;
        }
        Ok(Self {
            env: Env::new(meta.task, meta.env.clone(), env_roster)?,
            buffer: Buffer::new(meta.train.replay_capacity)?,
            config: meta.train,
            task: meta.task,
            bundle,
            critic_opt,
            actor_opt,
            phase: meta.phase,
            fine_tune_in: meta.fine_tune_in,
            seed: meta.seed,
            rngs: Streams::from_states(&meta.rng)?,
            counters: meta.counters,
            metrics: Metrics::default(),
        })
    }

    /// Network bundle stored in a run checkpoint (for evaluation).
    pub fn bundle_from_checkpoint(ck: &Checkpoint) -> Result<(Task, EnvConfig, NetworkBundle), TrainError> {
        let meta: RunMeta = serde_json::from_str(&ck.meta).map_err(CheckpointError::from)?;
        let bundle = bundle_from_parts(&meta.bundle, &ck.tensor_map())?;
        Ok((meta.task, meta.env, bundle))
    }
}

#[cfg(test)]
mod tests;
