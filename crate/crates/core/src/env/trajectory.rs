use std::io::Write;

use serde::{Deserialize, Serialize};

use super::WorldState;
use crate::roster::AgentId;

/// One line of a trajectory dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub episode: usize,
    pub step: usize,
    pub ids: Vec<AgentId>,
    pub positions: Vec<[f64; 2]>,
    pub landmarks: Vec<[f64; 2]>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
}

impl TrajectoryRecord {
    pub fn from_state(episode: usize, state: &WorldState, actions: Vec<usize>, rewards: Vec<f64>) -> Self {
        Self {
            episode,
            step: state.step,
            ids: state.agents.iter().map(|a| a.id).collect(),
            positions: state.agents.iter().map(|a| a.pos).collect(),
            landmarks: state.landmarks.iter().map(|l| l.pos).collect(),
            actions,
            rewards,
        }
    }
}

/// Newline-delimited JSON writer.
pub struct TrajectoryWriter<W: Write> {
    out: W,
}

impl<W: Write> TrajectoryWriter<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn write(&mut self, record: &TrajectoryRecord) -> std::io::Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}
