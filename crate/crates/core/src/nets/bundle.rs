use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{self, TokenLayout};
use super::params::{Binder, ParamGroup, ParameterRegistry, WeightCopy};
use super::{check_permutation, NetConfig, NetError, ObsBatch, OBS_DIM};
use crate::diffcore::{Tape, Tensor, Var};
use crate::roster::{AgentId, AgentKind, Roster, RosterError};

/// One of the two independent critics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Critic {
    First,
    Second,
}

impl Critic {
    pub const BOTH: [Critic; 2] = [Critic::First, Critic::Second];

    pub fn prefix(self) -> &'static str {
        match self {
            Critic::First => "critic1",
            Critic::Second => "critic2",
        }
    }
}

/// A network with an ensemble head and per-agent selectors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Head {
    Policy,
    Value(Critic),
}

impl Head {
    pub fn prefix(self) -> &'static str {
        match self {
            Head::Policy => "policy",
            Head::Value(c) => c.prefix(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Regular,
    FewShot(BTreeSet<AgentId>),
}

/// Snapshot of one agent's private parameters and roster metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentBundle {
    pub id: AgentId,
    pub kind: AgentKind,
    pub live: bool,
    pub embedding: Tensor,
    pub policy_selector: Tensor,
    pub critic_selectors: [Tensor; 2],
    pub target_embedding: Tensor,
}

pub fn embed_name(id: AgentId) -> String {
    format!("embed/agent/{id}")
}

pub fn landmark_name(l: usize) -> String {
    format!("embed/landmark/{l}")
}

pub fn selector_name(head: Head, id: AgentId) -> String {
    format!("{}/selector/{id}", head.prefix())
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Policy, twin critics, agent embeddings and selectors, with target copies.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkBundle {
    config: NetConfig,
    params: ParameterRegistry,
    roster: Roster,
}

const HEADS: [Head; 3] = [Head::Policy, Head::Value(Critic::First), Head::Value(Critic::Second)];

impl NetworkBundle {
    /// Fresh shared weights plus private parameters for every agent in `roster`.
    pub fn new(config: NetConfig, roster: &Roster, rng: &mut impl Rng) -> Result<Self, NetError> {
        config.validate()?;
        let mut params = ParameterRegistry::new();
        layers::init_network(
            &mut params,
            &config,
            "policy",
            OBS_DIM,
            config.policy_feature_dim,
            config.action_dim,
            rng,
        );
        for critic in Critic::BOTH {
            layers::init_network(
                &mut params,
                &config,
                critic.prefix(),
                OBS_DIM + config.action_dim,
                config.value_feature_dim,
                1,
                rng,
            );
        }
        for l in 0..config.landmarks {
            params.insert(
                landmark_name(l),
                layers::normal(&[config.embed_dim], rng),
                ParamGroup::Shared,
            );
        }
        let mut bundle = Self {
            config,
            params,
            roster: Roster::new(),
        };
        for entry in roster.all() {
            bundle.add_agent(entry.id, entry.kind, None, rng)?;
            if !entry.live {
                bundle.remove_agent(entry.id)?;
            }
        }
        Ok(bundle)
    }

    /// Reassembles a bundle from stored parts (checkpoint loading).
    pub fn from_parts(config: NetConfig, params: ParameterRegistry, roster: Roster) -> Result<Self, NetError> {
        config.validate()?;
        for e in roster.all() {
            for name in Self::private_names(e.id) {
                if !params.contains(&name) {
                    return Err(NetError::UnknownAgent(e.id));
                }
            }
        }
        Ok(Self { config, params, roster })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterRegistry {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterRegistry {
        &mut self.params
    }

    pub fn roster(&self) -> &Roster {
        &self.roster
    }

    pub fn live_ids(&self) -> Vec<AgentId> {
        self.roster.live_ids()
    }

    fn private_names(id: AgentId) -> Vec<String> {
        let mut names = vec![embed_name(id)];
        names.extend(HEADS.iter().map(|h| selector_name(*h, id)));
        names
    }

    /// Registers a joining agent and returns how many new trainable scalars
    /// were allocated. A previously dropped ID is revived with its retained
    /// parameters (and allocates nothing).
    pub fn add_agent(
        &mut self,
        id: AgentId,
        kind: AgentKind,
        type_hint: Option<AgentId>,
        rng: &mut impl Rng,
    ) -> Result<usize, NetError> {
        if self.roster.is_live(id) {
            return Err(RosterError::Duplicate(id).into());
        }
        if let Some(h) = type_hint {
            if !self.params.contains(&embed_name(h)) {
                return Err(NetError::UnknownAgent(h));
            }
        }
        let revived = self.roster.contains(id);
        self.roster.add(id, kind)?;
        if revived {
            return Ok(0);
        }
        let group = ParamGroup::Agent(id);
        let embedding = layers::normal(&[self.config.embed_dim], rng);
        let mut added = embedding.len();
        self.params.insert(embed_name(id), embedding, group);
        for head in HEADS {
            let selector = match type_hint {
                Some(h) => self
                    .params
                    .get(&selector_name(head, h))
                    .expect("hint agent has selectors")
                    .online
                    .clone(),
                None => Tensor::zeros(&[self.config.blocks]),
            };
            added += selector.len();
            self.params.insert(selector_name(head, id), selector, group);
        }
        Ok(added)
    }

    /// Marks `id` as dropped; its parameters are kept, frozen.
    pub fn remove_agent(&mut self, id: AgentId) -> Result<(), NetError> {
        Ok(self.roster.remove(id)?)
    }

    /// Parameter names an optimizer may change in `phase`.
    pub fn trainable_set(&self, phase: &Phase) -> Result<BTreeSet<String>, NetError> {
        match phase {
            Phase::Regular => Ok(self
                .params
                .iter()
                .filter(|(_, e)| match e.group {
                    ParamGroup::Shared => true,
                    ParamGroup::Agent(id) => self.roster.is_live(id),
                })
                .map(|(n, _)| n.clone())
                .collect()),
            Phase::FewShot(ids) => {
                let mut out = BTreeSet::new();
                for &id in ids {
                    if !self.roster.is_live(id) {
                        return Err(RosterError::Unknown(id).into());
                    }
                    out.extend(self.params.names_in_group(ParamGroup::Agent(id)));
                }
                Ok(out)
            }
        }
    }

    pub fn binder<'a>(&'a self, copy: WeightCopy, trainable: Option<&'a BTreeSet<String>>) -> Binder<'a> {
        Binder::new(&self.params, copy, trainable)
    }

    pub fn polyak_update(&mut self, tau: f64, only: Option<&BTreeSet<String>>) -> Result<(), NetError> {
        Ok(self.params.polyak_update(tau, only)?)
    }

    pub fn agent_bundle(&self, id: AgentId) -> Option<AgentBundle> {
        let kind = self.roster.kind(id)?;
        let get = |n: String| self.params.get(&n).map(|e| e.online.clone());
        Some(AgentBundle {
            id,
            kind,
            live: self.roster.is_live(id),
            embedding: get(embed_name(id))?,
            policy_selector: get(selector_name(Head::Policy, id))?,
            critic_selectors: [
                get(selector_name(Head::Value(Critic::First), id))?,
                get(selector_name(Head::Value(Critic::Second), id))?,
            ],
            target_embedding: self.params.get(&embed_name(id))?.target.clone(),
        })
    }

    /// Softmaxed selector of `id` for `head` (the block mixing weights).
    pub fn mixing_weights(&self, head: Head, id: AgentId) -> Result<Vec<f64>, NetError> {
        let e = self
            .params
            .get(&selector_name(head, id))
            .ok_or(NetError::UnknownAgent(id))?;
        Ok(softmax(e.online.data()))
    }

    fn check_ids(&self, ids: &[AgentId], obs: &ObsBatch) -> Result<(), NetError> {
        if ids.len() != obs.agents() {
            return Err(NetError::Observation(format!(
                "{} agent ids for a batch of {} agents",
                ids.len(),
                obs.agents()
            )));
        }
        if obs.landmarks() > self.config.landmarks {
            return Err(NetError::Observation(format!(
                "{} landmarks but only {} landmark embeddings",
                obs.landmarks(),
                self.config.landmarks
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&id| !self.params.contains(&embed_name(id))) {
            return Err(NetError::UnknownAgent(bad));
        }
        Ok(())
    }

    fn embed_table(&self, tape: &mut Tape, binder: &mut Binder, ids: &[AgentId], landmarks: usize) -> Result<Var, NetError> {
        let mut rows = Vec::with_capacity(ids.len() + landmarks);
        for &id in ids {
            rows.push(binder.get(tape, &embed_name(id))?);
        }
        for l in 0..landmarks {
            rows.push(binder.get(tape, &landmark_name(l))?);
        }
        Ok(tape.concat_rows(&rows)?)
    }

    /// `[groups, K]` mixing weights, one row per observer group.
    fn group_weights(&self, tape: &mut Tape, binder: &mut Binder, head: Head, ids: &[AgentId], samples: usize) -> Result<Var, NetError> {
        let mut rows = Vec::with_capacity(ids.len());
        for &id in ids {
            rows.push(binder.get(tape, &selector_name(head, id))?);
        }
        let table = tape.concat_rows(&rows)?;
        let weights = tape.softmax(table)?;
        let index: Vec<usize> = (0..samples).flat_map(|_| 0..ids.len()).collect();
        Ok(tape.gather_rows(weights, &index)?)
    }

    fn layout(obs: &ObsBatch) -> (Vec<usize>, Vec<usize>) {
        let (n, t) = (obs.agents(), obs.tokens());
        let embed_rows = (0..obs.groups()).flat_map(|_| 0..t).collect();
        let self_rows = (0..obs.groups()).map(|g| g * t + g % n).collect();
        (embed_rows, self_rows)
    }

    /// Policy logits `[samples * agents, action_dim]`, one row per observer.
    pub fn policy_forward(&self, tape: &mut Tape, binder: &mut Binder, ids: &[AgentId], obs: &ObsBatch) -> Result<Var, NetError> {
        self.check_ids(ids, obs)?;
        let (embed_rows, self_rows) = Self::layout(obs);
        let layout = TokenLayout {
            groups: obs.groups(),
            tokens: obs.tokens(),
            embed_rows: &embed_rows,
            self_rows: &self_rows,
        };
        let inputs = tape.constant(obs.features().clone());
        let table = self.embed_table(tape, binder, ids, obs.landmarks())?;
        let z = layers::extract(
            tape,
            binder,
            &self.config,
            "policy",
            self.config.policy_feature_dim,
            inputs,
            table,
            &layout,
        )?;
        let weights = self.group_weights(tape, binder, Head::Policy, ids, obs.samples())?;
        layers::ensemble(tape, binder, &self.config, "policy", z, weights)
    }

    /// Action values `[samples * agents, 1]`.
    ///
    /// `actions` is `[samples * agents, action_dim]`. When `substitute` is
    /// given (same shape), observer `i` sees its own action replaced by the
    /// substitute row while every other agent's action stays as in `actions`.
    pub fn value_forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        critic: Critic,
        ids: &[AgentId],
        obs: &ObsBatch,
        actions: Var,
        substitute: Option<Var>,
    ) -> Result<Var, NetError> {
        self.check_ids(ids, obs)?;
        let d = self.config.action_dim;
        let expected = [obs.groups(), d];
        if tape.shape(actions) != expected || substitute.is_some_and(|s| tape.shape(s) != expected) {
            return Err(NetError::Observation(format!(
                "actions must be {expected:?}, got {:?}",
                tape.shape(actions)
            )));
        }
        let (n, t, g) = (obs.agents(), obs.tokens(), obs.groups());
        let zero = tape.constant(Tensor::zeros(&[1, d]));
        let mut table = vec![actions];
        table.extend(substitute);
        table.push(zero);
        let zero_row = g * table.len().saturating_sub(1);
        let table = tape.concat_rows(&table)?;
        let mut index = Vec::with_capacity(g * t);
        for group in 0..g {
            let (s, i) = (group / n, group % n);
            for tok in 0..t {
                index.push(if tok >= n {
                    zero_row
                } else if substitute.is_some() && tok == i {
                    g + s * n + tok
                } else {
                    s * n + tok
                });
            }
        }
        let acts = tape.gather_rows(table, &index)?;
        let observed = tape.constant(obs.features().clone());
        let inputs = tape.concat_cols(&[observed, acts])?;

        let (embed_rows, self_rows) = Self::layout(obs);
        let layout = TokenLayout {
            groups: g,
            tokens: t,
            embed_rows: &embed_rows,
            self_rows: &self_rows,
        };
        let prefix = critic.prefix();
        let embed = self.embed_table(tape, binder, ids, obs.landmarks())?;
        let z = layers::extract(
            tape,
            binder,
            &self.config,
            prefix,
            self.config.value_feature_dim,
            inputs,
            embed,
            &layout,
        )?;
        let weights = self.group_weights(tape, binder, Head::Value(critic), ids, obs.samples())?;
        layers::ensemble(tape, binder, &self.config, prefix, z, weights)
    }

    /// Online policy logits as a plain tensor.
    pub fn policy_logits(&self, ids: &[AgentId], obs: &ObsBatch) -> Result<Tensor, NetError> {
        let mut tape = Tape::new();
        let mut binder = self.binder(WeightCopy::Online, None);
        let out = self.policy_forward(&mut tape, &mut binder, ids, obs)?;
        Ok(tape.value(out).clone())
    }

    /// Online action values as a plain tensor.
    pub fn q_values(&self, critic: Critic, ids: &[AgentId], obs: &ObsBatch, actions: &Tensor) -> Result<Tensor, NetError> {
        let mut tape = Tape::new();
        let mut binder = self.binder(WeightCopy::Online, None);
        let a = tape.constant(actions.clone());
        let out = self.value_forward(&mut tape, &mut binder, critic, ids, obs, a, None)?;
        Ok(tape.value(out).clone())
    }

    /// Output of candidate block `k` of `head` for every observer group,
    /// computed independently of the selectors.
    pub fn block_outputs(
        &self,
        head: Head,
        ids: &[AgentId],
        obs: &ObsBatch,
        actions: Option<&Tensor>,
    ) -> Result<Vec<Tensor>, NetError> {
        let mut tape = Tape::new();
        let mut binder = self.binder(WeightCopy::Online, None);
        self.check_ids(ids, obs)?;
        let (embed_rows, self_rows) = Self::layout(obs);
        let layout = TokenLayout {
            groups: obs.groups(),
            tokens: obs.tokens(),
            embed_rows: &embed_rows,
            self_rows: &self_rows,
        };
        let (inputs, feature_dim) = match head {
            Head::Policy => (tape.constant(obs.features().clone()), self.config.policy_feature_dim),
            Head::Value(_) => {
                let actions = actions.ok_or_else(|| NetError::Observation("value head needs actions".into()))?;
                let d = self.config.action_dim;
                let (n, t) = (obs.agents(), obs.tokens());
                let mut data = Vec::with_capacity(obs.groups() * t * (OBS_DIM + d));
                for g in 0..obs.groups() {
                    let s = g / n;
                    for tok in 0..t {
                        data.extend_from_slice(obs.features().row(g * t + tok));
                        if tok < n {
                            data.extend_from_slice(actions.row(s * n + tok));
                        } else {
                            data.extend(std::iter::repeat_n(0.0, d));
                        }
                    }
                }
                let x = Tensor::new(vec![obs.groups() * t, OBS_DIM + d], data)?;
                (tape.constant(x), self.config.value_feature_dim)
            }
        };
        let embed = self.embed_table(&mut tape, &mut binder, ids, obs.landmarks())?;
        let z = layers::extract(
            &mut tape,
            &mut binder,
            &self.config,
            head.prefix(),
            feature_dim,
            inputs,
            embed,
            &layout,
        )?;
        (0..self.config.blocks)
            .map(|k| {
                let out = layers::block(&mut tape, &mut binder, head.prefix(), k, z)?;
                Ok(tape.value(out).clone())
            })
            .collect()
    }

    /// Value of observer `observer`'s q before and after permuting the other
    /// agents' observation components and actions. `perm` must fix `observer`.
    /// `obs` holds a single sample; `actions` is `[agents, action_dim]`.
    pub fn permutation_probe(
        &self,
        critic: Critic,
        ids: &[AgentId],
        obs: &ObsBatch,
        actions: &Tensor,
        observer: usize,
        perm: &[usize],
    ) -> Result<(f64, f64), NetError> {
        check_permutation(perm, obs.agents())?;
        if obs.samples() != 1 {
            return Err(NetError::Observation("permutation probe takes one sample".into()));
        }
        if perm.get(observer) != Some(&observer) {
            return Err(NetError::Observation(format!("permutation must fix agent index {observer}")));
        }
        let before = self.q_values(critic, ids, obs, actions)?.data()[observer];
        let permuted_obs = obs.permute_agent_tokens(perm)?;
        let d = actions.cols();
        let mut data = Vec::with_capacity(actions.len());
        for &src in perm {
            data.extend_from_slice(actions.row(src));
        }
        let permuted_actions = Tensor::new(actions.shape().to_vec(), data)?;
        let after = self.q_values(critic, ids, &permuted_obs, &permuted_actions)?.data()[observer];
        debug_assert_eq!(d, self.config.action_dim);
        Ok((before, after))
    }

    /// Copy of the bundle with every agent embedding row (online and target)
    /// set to `value`.
    pub fn with_tied_embeddings(&self, value: &Tensor) -> Result<Self, NetError> {
        let mut out = self.clone();
        for entry in self.roster.all() {
            let e = out
                .params
                .get_mut(&embed_name(entry.id))
                .ok_or(NetError::UnknownAgent(entry.id))?;
            if e.online.shape() != value.shape() {
                return Err(NetError::Config("embedding shape mismatch".into()));
            }
            e.online = value.clone();
            e.target = value.clone();
        }
        Ok(out)
    }

    /// Digest of every shared parameter's online values.
    pub fn shared_checksum(&self) -> u64 {
        self.params.checksum(|_, e| e.group == ParamGroup::Shared)
    }
}
