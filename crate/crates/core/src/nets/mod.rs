//! Attention feature extractors, ensemble heads and the parameter partition
//! behind few-shot adaptation.

mod bundle;
pub mod checkpoint;
mod layers;
mod params;

pub use bundle::{AgentBundle, Critic, Head, NetworkBundle, Phase};
pub use params::{polyak, Binder, ParamEntry, ParamGroup, ParameterRegistry, WeightCopy};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{DiffError, Tensor};
use crate::roster::{AgentId, RosterError};

/// Width of one observation component: relative position (2) and velocity (2).
pub const OBS_DIM: usize = 4;

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Roster(#[from] RosterError),
    #[error("agent {0} has no parameters in this bundle")]
    UnknownAgent(AgentId),
    #[error("observation batch: {0}")]
    Observation(String),
    #[error("invalid network config: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    /// Number of candidate blocks per ensemble head (`K`).
    pub blocks: usize,
    pub embed_dim: usize,
    pub token_hidden: usize,
    pub token_dim: usize,
    pub heads: usize,
    pub value_feature_dim: usize,
    pub policy_feature_dim: usize,
    pub block_hidden: usize,
    pub action_dim: usize,
    /// Reserved landmark embedding rows.
    pub landmarks: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            blocks: 2,
            embed_dim: 8,
            token_hidden: 32,
            token_dim: 16,
            heads: 2,
            value_feature_dim: 64,
            policy_feature_dim: 128,
            block_hidden: 64,
            action_dim: 5,
            landmarks: 2,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        let positive = [
            ("blocks", self.blocks),
            ("embed_dim", self.embed_dim),
            ("token_hidden", self.token_hidden),
            ("token_dim", self.token_dim),
            ("heads", self.heads),
            ("value_feature_dim", self.value_feature_dim),
            ("policy_feature_dim", self.policy_feature_dim),
            ("block_hidden", self.block_hidden),
            ("action_dim", self.action_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(NetError::Config(format!("{name} must be positive")));
        }
        for (name, dim) in [
            ("value_feature_dim", self.value_feature_dim),
            ("policy_feature_dim", self.policy_feature_dim),
        ] {
            if dim % self.heads != 0 {
                return Err(NetError::Config(format!("{name} must be divisible by heads")));
            }
        }
        Ok(())
    }
}

/// Per-observer observation components for a batch of samples.
///
/// Row `((s * agents + i) * tokens + t)` of `features` holds observer `i`'s
/// view of token `t` in sample `s`: agent tokens first (ascending ID), then
/// landmarks with a zero velocity slot.
#[derive(Clone, Debug, PartialEq)]
pub struct ObsBatch {
    samples: usize,
    agents: usize,
    landmarks: usize,
    features: Tensor,
}

impl ObsBatch {
    pub fn new(samples: usize, agents: usize, landmarks: usize, data: Vec<f64>) -> Result<Self, NetError> {
        if samples == 0 || agents == 0 {
            return Err(NetError::Observation("empty batch".into()));
        }
        let rows = samples * agents * (agents + landmarks);
        if data.len() != rows * OBS_DIM {
            return Err(NetError::Observation(format!(
                "expected {} values for {samples} samples x {agents} agents x {} tokens, got {}",
                rows * OBS_DIM,
                agents + landmarks,
                data.len()
            )));
        }
        Ok(Self {
            samples,
            agents,
            landmarks,
            features: Tensor::new(vec![rows, OBS_DIM], data)?,
        })
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn agents(&self) -> usize {
        self.agents
    }

    pub fn landmarks(&self) -> usize {
        self.landmarks
    }

    pub fn tokens(&self) -> usize {
        self.agents + self.landmarks
    }

    pub fn groups(&self) -> usize {
        self.samples * self.agents
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    /// Reorders agent tokens inside every observer's view: token `t` takes the
    /// data previously at `perm[t]`. Landmark tokens are untouched.
    pub fn permute_agent_tokens(&self, perm: &[usize]) -> Result<Self, NetError> {
        check_permutation(perm, self.agents)?;
        let t = self.tokens();
        let src = self.features.data();
        let mut out = src.to_vec();
        for g in 0..self.groups() {
            for (dst_tok, &src_tok) in perm.iter().enumerate() {
                let d = (g * t + dst_tok) * OBS_DIM;
                let s = (g * t + src_tok) * OBS_DIM;
                out[d..d + OBS_DIM].copy_from_slice(&src[s..s + OBS_DIM]);
            }
        }
        Self::new(self.samples, self.agents, self.landmarks, out)
    }
}

pub(crate) fn check_permutation(perm: &[usize], n: usize) -> Result<(), NetError> {
    let mut seen = vec![false; n];
    if perm.len() != n {
        return Err(NetError::Observation(format!("permutation of length {} for {n} agents", perm.len())));
    }
    for &p in perm {
        if p >= n || seen[p] {
            return Err(NetError::Observation(format!("{perm:?} is not a permutation")));
        }
        seen[p] = true;
    }
    Ok(())
}
