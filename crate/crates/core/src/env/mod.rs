//! Particle world with the Finding Home and Predator-Prey tasks.
//!
//! Agents are point masses driven by five discrete actions. Collisions only
//! affect rewards; there are no contact forces.

mod rewards;
mod trajectory;

pub use rewards::{reward_finding_home, reward_predator_prey, PredatorPreyReward};
pub use trajectory::{TrajectoryRecord, TrajectoryWriter};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::roster::{AgentId, AgentKind, Roster, RosterError};

pub const NUM_ACTIONS: usize = 5;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("roster is empty")]
    EmptyRoster,
    #[error("expected {expected} actions (one per live agent), got {got}")]
    ActionCount { expected: usize, got: usize },
    #[error("action index {0} out of range")]
    BadAction(usize),
    #[error("{0}")]
    Roster(#[from] RosterError),
    #[error("{task:?} does not support agent kind {kind}")]
    KindNotAllowed { task: Task, kind: AgentKind },
    #[error("{0}")]
    InvalidRoster(String),
    #[error("step called before reset")]
    NotReset,
    #[error("invalid environment config: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    FindingHome,
    PredatorPrey,
}

impl Task {
    pub fn allows(self, kind: AgentKind) -> bool {
        match self {
            Task::FindingHome => matches!(kind, AgentKind::Green | AgentKind::Red),
            Task::PredatorPrey => matches!(kind, AgentKind::Predator | AgentKind::Prey),
        }
    }
}

/// Discrete move: 0 left, 1 right, 2 up, 3 down, 4 stay.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DiscreteAction(usize);

impl DiscreteAction {
    pub const LEFT: Self = Self(0);
    pub const RIGHT: Self = Self(1);
    pub const UP: Self = Self(2);
    pub const DOWN: Self = Self(3);
    pub const STAY: Self = Self(4);

    pub fn new(index: usize) -> Result<Self, EnvError> {
        if index < NUM_ACTIONS {
            Ok(Self(index))
        } else {
            Err(EnvError::BadAction(index))
        }
    }

    pub fn index(self) -> usize {
        self.0
    }

    fn direction(self) -> [f64; 2] {
        match self.0 {
            0 => [-1.0, 0.0],
            1 => [1.0, 0.0],
            2 => [0.0, 1.0],
            3 => [0.0, -1.0],
            _ => [0.0, 0.0],
        }
    }

    pub fn one_hot(self) -> [f64; NUM_ACTIONS] {
        let mut v = [0.0; NUM_ACTIONS];
        v[self.0] = 1.0;
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhysicsConfig {
    pub dt: f64,
    /// Fraction of velocity kept each step.
    pub damping: f64,
    pub agent_radius: f64,
    pub predator_radius: f64,
    pub prey_radius: f64,
    pub landmark_radius: f64,
    pub force_gain: f64,
    pub prey_force_gain: f64,
    /// Half-width of the square arena.
    pub arena: f64,
}

impl Default for PhysicsConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            damping: 0.75,
            agent_radius: 0.05,
            predator_radius: 0.075,
            prey_radius: 0.04,
            landmark_radius: 0.1,
            force_gain: 1.0,
            prey_force_gain: 1.3,
            arena: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub physics: PhysicsConfig,
    pub episode_length: usize,
    /// Finding Home penalty per colliding agent pair per step.
    pub collision_penalty: f64,
    /// Predator-Prey reward per predator-prey contact per step.
    pub touch_reward: f64,
    /// Obstacle landmarks in Predator-Prey.
    pub obstacles: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            physics: PhysicsConfig::default(),
            episode_length: 25,
            collision_penalty: 1.0,
            touch_reward: 10.0,
            obstacles: 2,
        }
    }
}

impl EnvConfig {
    /// Halved arena, so short runs see homes and neighbours often.
    pub fn desk() -> Self {
        let mut cfg = Self::default();
        cfg.physics.arena = 0.5;
        cfg
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let p = &self.physics;
        if !(p.dt > 0.0) || !(0.0..=1.0).contains(&p.damping) || !(p.arena > 0.0) {
            return Err(EnvError::Config("dt and arena must be positive, damping in [0, 1]".into()));
        }
        if self.episode_length == 0 {
            return Err(EnvError::Config("episode_length must be positive".into()));
        }
        Ok(())
    }

    /// Landmark count for `task`: one home per color, or the obstacles.
    pub fn landmarks(&self, task: Task) -> usize {
        match task {
            Task::FindingHome => 2,
            Task::PredatorPrey => self.obstacles,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub id: AgentId,
    pub kind: AgentKind,
    pub pos: [f64; 2],
    pub vel: [f64; 2],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LandmarkKind {
    Home(AgentKind),
    Obstacle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub kind: LandmarkKind,
    pub pos: [f64; 2],
}

/// Positions and velocities of every entity plus task metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub task: Task,
    /// Live agents in ascending ID order.
    pub agents: Vec<AgentState>,
    pub landmarks: Vec<Landmark>,
    pub step: usize,
}

impl WorldState {
    pub fn home_of(&self, kind: AgentKind) -> Option<[f64; 2]> {
        self.landmarks
            .iter()
            .find(|l| l.kind == LandmarkKind::Home(kind))
            .map(|l| l.pos)
    }
}

/// One agent's view: a component per live agent (ascending ID) and the
/// relative position of every landmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// `[dx, dy, vx, vy]` of agent `j` relative to the observer; the
    /// observer's own entry carries its absolute position.
    pub components: Vec<[f64; 4]>,
    pub landmarks: Vec<[f64; 2]>,
}

impl Observation {
    /// Appends this view as network tokens: agent components, then each
    /// landmark as `[dx, dy, 0, 0]`.
    pub fn write_features(&self, out: &mut Vec<f64>) {
        for c in &self.components {
            out.extend_from_slice(c);
        }
        for l in &self.landmarks {
            out.extend_from_slice(&[l[0], l[1], 0.0, 0.0]);
        }
    }
}

/// Flattens every agent's view in observer order.
pub fn features(observations: &[Observation]) -> Vec<f64> {
    let mut out = Vec::new();
    for o in observations {
        o.write_features(&mut out);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub observations: Vec<Observation>,
    pub rewards: Vec<f64>,
    pub done: bool,
    /// Predator-prey contacts this step (always 0 in Finding Home).
    pub touches: usize,
}

pub(crate) fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

pub fn observe(state: &WorldState) -> Vec<Observation> {
    state
        .agents
        .iter()
        .map(|me| Observation {
            components: state
                .agents
                .iter()
                .map(|other| {
                    if other.id == me.id {
                        [me.pos[0], me.pos[1], me.vel[0], me.vel[1]]
                    } else {
                        [
                            other.pos[0] - me.pos[0],
                            other.pos[1] - me.pos[1],
                            other.vel[0],
                            other.vel[1],
                        ]
                    }
                })
                .collect(),
            landmarks: state
                .landmarks
                .iter()
                .map(|l| [l.pos[0] - me.pos[0], l.pos[1] - me.pos[1]])
                .collect(),
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Env {
    task: Task,
    config: EnvConfig,
    roster: Roster,
    state: Option<WorldState>,
}

impl Env {
    pub fn new(task: Task, config: EnvConfig, roster: Roster) -> Result<Self, EnvError> {
        config.validate()?;
        check_roster(task, &roster)?;
        Ok(Self {
            task,
            config,
            roster,
            state: None,
        })
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn roster(&self) -> &Roster {
        &self.roster
    }

    pub fn state(&self) -> Option<&WorldState> {
        self.state.as_ref()
    }

    pub fn landmarks(&self) -> usize {
        self.config.landmarks(self.task)
    }

    /// Random placement of every live agent and landmark, at rest.
    pub fn reset(&mut self, rng: &mut impl Rng) -> Result<Vec<Observation>, EnvError> {
        check_roster(self.task, &self.roster)?;
        let a = self.config.physics.arena;
        let mut place = || [rng.random_range(-a..a), rng.random_range(-a..a)];
        let agents = self
            .roster
            .live()
            .map(|e| AgentState {
                id: e.id,
                kind: e.kind,
                pos: place(),
                vel: [0.0, 0.0],
            })
            .collect();
        let kinds: Vec<LandmarkKind> = match self.task {
            Task::FindingHome => vec![LandmarkKind::Home(AgentKind::Green), LandmarkKind::Home(AgentKind::Red)],
            Task::PredatorPrey => vec![LandmarkKind::Obstacle; self.config.obstacles],
        };
        let landmarks = kinds.into_iter().map(|kind| Landmark { kind, pos: place() }).collect();
        let state = WorldState {
            task: self.task,
            agents,
            landmarks,
            step: 0,
        };
        let obs = observe(&state);
        self.state = Some(state);
        Ok(obs)
    }

    /// Starts an episode from a given state (tests and replays).
    pub fn reset_to(&mut self, state: WorldState) -> Result<Vec<Observation>, EnvError> {
        let ids: Vec<AgentId> = state.agents.iter().map(|a| a.id).collect();
        if ids != self.roster.live_ids() {
            return Err(EnvError::InvalidRoster("state agents do not match the live roster".into()));
        }
        let obs = observe(&state);
        self.state = Some(state);
        Ok(obs)
    }

    pub fn step(&mut self, actions: &[DiscreteAction]) -> Result<StepOutcome, EnvError> {
        let config = &self.config;
        let state = self.state.as_mut().ok_or(EnvError::NotReset)?;
        if actions.len() != state.agents.len() {
            return Err(EnvError::ActionCount {
                expected: state.agents.len(),
                got: actions.len(),
            });
        }
        let p = &config.physics;
        for (agent, action) in state.agents.iter_mut().zip(actions) {
            let gain = if agent.kind == AgentKind::Prey {
                p.prey_force_gain
            } else {
                p.force_gain
            };
            let dir = action.direction();
            for k in 0..2 {
                agent.vel[k] = p.damping * agent.vel[k] + dir[k] * gain * p.dt;
                agent.pos[k] = (agent.pos[k] + agent.vel[k] * p.dt).clamp(-p.arena, p.arena);
            }
        }
        state.step += 1;
        let (rewards, touches) = match self.task {
            Task::FindingHome => {
                let r = reward_finding_home(state, config);
                (vec![r; state.agents.len()], 0)
            }
            Task::PredatorPrey => {
                let r = reward_predator_prey(state, config);
                let per_agent = state
                    .agents
                    .iter()
                    .map(|a| if a.kind == AgentKind::Prey { r.prey } else { r.predator })
                    .collect();
                (per_agent, r.touches)
            }
        };
        Ok(StepOutcome {
            observations: observe(state),
            rewards,
            done: state.step >= config.episode_length,
            touches,
        })
    }

    /// Applies joins and drops between episodes; the next reset uses the new roster.
    pub fn roster_change(&mut self, add: &[(AgentId, AgentKind)], remove: &[AgentId]) -> Result<(), EnvError> {
        let mut next = self.roster.clone();
        for &(id, kind) in add {
            if !self.task.allows(kind) {
                return Err(EnvError::KindNotAllowed { task: self.task, kind });
            }
            next.add(id, kind)?;
        }
        for &id in remove {
            next.remove(id)?;
        }
        check_roster(self.task, &next)?;
        self.roster = next;
        self.state = None;
        Ok(())
    }
}

fn check_roster(task: Task, roster: &Roster) -> Result<(), EnvError> {
    if roster.live_count() == 0 {
        return Err(EnvError::EmptyRoster);
    }
    if let Some(e) = roster.live().find(|e| !task.allows(e.kind)) {
        return Err(EnvError::KindNotAllowed { task, kind: e.kind });
    }
    if task == Task::PredatorPrey && roster.count_live(AgentKind::Prey) != 1 {
        return Err(EnvError::InvalidRoster("predator-prey needs exactly one prey".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests;
