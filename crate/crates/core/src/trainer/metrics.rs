use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::roster::{AgentId, RosterTag};

/// One training episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub seed: u64,
    pub roster: RosterTag,
    pub phase: String,
    /// Episode return per live agent, ascending ID.
    pub rewards: Vec<(AgentId, f64)>,
    pub mean_reward: f64,
    pub touches: usize,
    /// Mean losses over the update rounds that ran during this episode.
    pub critic_loss: Option<f64>,
    pub actor_loss: Option<f64>,
}

/// Greedy evaluation checkpoints taken during a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    /// Training episodes completed when evaluated.
    pub episode: usize,
    pub roster: RosterTag,
    pub mean_reward: f64,
    /// Mean reward divided by the live agent count.
    pub per_agent_reward: f64,
    pub mean_touches: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub episodes: Vec<EpisodeRecord>,
    pub evals: Vec<EvalPoint>,
    pub critic_rounds: usize,
    pub actor_rounds: usize,
    /// Wall-clock seconds; kept in memory only so written files stay
    /// byte-reproducible.
    #[serde(skip)]
    pub wall_clock: f64,
}

pub const CSV_HEADER: [&str; 10] = [
    "episode",
    "roster",
    "seed",
    "phase",
    "agent_rewards",
    "mean_reward",
    "touches",
    "critic_loss",
    "actor_loss",
    "agents",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl EpisodeRecord {
    pub fn csv_row(&self) -> Vec<String> {
        let rewards: Vec<String> = self.rewards.iter().map(|(id, r)| format!("{id}:{r}")).collect();
        vec![
            self.episode.to_string(),
            self.roster.to_string(),
            self.seed.to_string(),
            self.phase.clone(),
            rewards.join(";"),
            self.mean_reward.to_string(),
            self.touches.to_string(),
            opt(self.critic_loss),
            opt(self.actor_loss),
            self.rewards.len().to_string(),
        ]
    }
}

/// Writes records as CSV (header included).
pub fn write_csv<W: Write>(out: W, records: &[EpisodeRecord]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in records {
        w.write_record(r.csv_row())?;
    }
    w.flush()?;
    Ok(())
}

/// Mean of `values` over a trailing or leading window.
pub fn window_mean(values: &[f64], range: std::ops::Range<usize>) -> Option<f64> {
    let slice = values.get(range)?;
    if slice.is_empty() {
        None
    } else {
        Some(slice.iter().sum::<f64>() / slice.len() as f64)
    }
}

/// First evaluation episode whose per-agent reward reaches `threshold`.
pub fn episodes_to_threshold(evals: &[EvalPoint], threshold: f64) -> Option<usize> {
    evals.iter().find(|e| e.per_agent_reward >= threshold).map(|e| e.episode)
}

/// Threshold that closes `fraction` of the gap between a baseline (e.g. a
/// random policy) and a plateau. Works for negative rewards, where "90% of
/// the plateau" read literally would be a worse-than-plateau level.
pub fn gap_threshold(baseline: f64, plateau: f64, fraction: f64) -> f64 {
    baseline + fraction * (plateau - baseline)
}
