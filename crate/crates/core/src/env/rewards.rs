use super::{dist, EnvConfig, WorldState};
use crate::roster::AgentKind;

/// Shared Finding Home reward: minus the summed distance of every agent to
/// its color's home, minus a penalty per colliding agent pair.
pub fn reward_finding_home(state: &WorldState, config: &EnvConfig) -> f64 {
    let p = &config.physics;
    let mut distance = 0.0;
    for a in &state.agents {
        if let Some(home) = state.home_of(a.kind) {
            distance += dist(a.pos, home);
        }
    }
    let mut collisions = 0usize;
    for (i, a) in state.agents.iter().enumerate() {
        for b in &state.agents[i + 1..] {
            if dist(a.pos, b.pos) < 2.0 * p.agent_radius {
                collisions += 1;
            }
        }
    }
    -distance - config.collision_penalty * collisions as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PredatorPreyReward {
    /// Shared by every predator.
    pub predator: f64,
    pub prey: f64,
    pub touches: usize,
}

/// Zero-sum Predator-Prey rewards; `prey` is the exact negation of `predator`.
pub fn reward_predator_prey(state: &WorldState, config: &EnvConfig) -> PredatorPreyReward {
    let p = &config.physics;
    let mut distance = 0.0;
    let mut touches = 0usize;
    for prey in state.agents.iter().filter(|a| a.kind == AgentKind::Prey) {
        for pred in state.agents.iter().filter(|a| a.kind == AgentKind::Predator) {
            let d = dist(pred.pos, prey.pos);
            distance += d;
            if d < p.predator_radius + p.prey_radius {
                touches += 1;
            }
        }
    }
    let predator = config.touch_reward * touches as f64 - distance;
    PredatorPreyReward {
        predator,
        prey: -predator,
        touches,
    }
}
