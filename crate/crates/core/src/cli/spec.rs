//! Experiment spec files (TOML) and their diagnostics.

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::env::{Env, EnvConfig, Task};
use crate::nets::NetConfig;
use crate::roster::{AgentId, AgentKind, Roster};
use crate::trainer::{JoinMode, TrainConfig};

pub const SCHEMA_VERSION: u32 = 1;

/// A spec problem, with the 1-based line it refers to when known.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Diagnostic {
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

/// Base settings that `[train]` overrides are layered on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Paper settings.
    #[default]
    Paper,
    /// Reduced settings for a single CPU core.
    Desk,
}

/// Roster change applied before the given episode runs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RosterEvent {
    pub episode: usize,
    /// Kinds of joining agents; they get fresh IDs in order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub join: Vec<AgentKind>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub drop: Vec<AgentId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    /// Training episodes between greedy evaluations.
    pub every: usize,
    pub episodes: usize,
    pub seed: u64,
    /// Fraction of the gap between a random policy and the previous plateau
    /// that counts as "reached" after a roster change.
    pub threshold: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            every: 100,
            episodes: 10,
            seed: 1_000_003,
            threshold: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub schema_version: u32,
    pub task: Task,
    /// Initial roster; agents get IDs 0.. in order.
    pub roster: Vec<AgentKind>,
    pub episodes: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_mode")]
    pub mode: JoinMode,
    #[serde(default)]
    pub preset: Preset,
    #[serde(default)]
    pub out: PathBuf,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub events: Vec<RosterEvent>,
    #[serde(default)]
    pub eval: EvalSettings,
    /// Field overrides on top of the preset's training config.
    #[serde(default, skip_serializing_if = "toml::Table::is_empty")]
    pub train: toml::Table,
    #[serde(default, skip_serializing_if = "toml::Table::is_empty")]
    pub env: toml::Table,
    #[serde(default, skip_serializing_if = "toml::Table::is_empty")]
    pub net: toml::Table,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_mode() -> JoinMode {
    JoinMode::FewShot
}

/// Recursively overlays `over` on `base`.
fn merge(base: &mut toml::Table, over: &toml::Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

fn overlay<T: Serialize + for<'de> Deserialize<'de>>(base: &T, over: &toml::Table, section: &str) -> Result<T, String> {
    let mut table = toml::Table::try_from(base).map_err(|e| format!("[{section}]: {e}"))?;
    merge(&mut table, over);
    table.try_into().map_err(|e: toml::de::Error| format!("[{section}]: {}", e.message()))
}

impl ExperimentSpec {
    /// Parses and validates, reporting the offending line where possible.
    pub fn parse(text: &str) -> Result<Self, Diagnostic> {
        let spec: Self = toml::from_str(text).map_err(|e| Diagnostic {
            line: e.span().map(|s| line_of_offset(text, s.start)),
            message: e.message().to_string(),
        })?;
        spec.validate().map_err(|(anchor, message)| Diagnostic {
            line: anchor.locate(text),
            message,
        })?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    pub fn train_config(&self) -> Result<TrainConfig, String> {
        let base = match self.preset {
            Preset::Paper => TrainConfig::default(),
            Preset::Desk => TrainConfig::desk(),
        };
        let cfg = overlay(&base, &self.train, "train")?;
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    pub fn env_config(&self) -> Result<EnvConfig, String> {
        let base = match self.preset {
            Preset::Paper => EnvConfig::default(),
            Preset::Desk => EnvConfig::desk(),
        };
        let cfg = overlay(&base, &self.env, "env")?;
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    pub fn net_config(&self) -> Result<NetConfig, String> {
        let cfg = overlay(&NetConfig::default(), &self.net, "net")?;
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    pub fn initial_roster(&self) -> Roster {
        Roster::from_kinds(&self.roster)
    }

    /// Joiners of `event` given the roster just before it.
    pub fn joiners(roster: &Roster, event: &RosterEvent) -> Vec<(AgentId, AgentKind)> {
        let first = roster.next_id();
        event.join.iter().enumerate().map(|(i, k)| (first + i as AgentId, *k)).collect()
    }

    fn validate(&self) -> Result<(), (Anchor, String)> {
        let top = |key: &'static str, m: String| Err((Anchor::Key(key), m));
        if self.schema_version != SCHEMA_VERSION {
            return top(
                "schema_version",
                format!("unsupported schema_version {} (expected {SCHEMA_VERSION})", self.schema_version),
            );
        }
        if self.roster.is_empty() {
            return top("roster", "initial roster is empty".into());
        }
        if self.seeds.is_empty() {
            return top("seeds", "at least one seed is required".into());
        }
        if self.eval.every == 0 {
            return Err((Anchor::Key("every"), "eval.every must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.eval.threshold) {
            return Err((Anchor::Key("threshold"), "eval.threshold must be in [0, 1]".into()));
        }
        if let Err(m) = self.train_config() {
            return Err((Anchor::Table("train"), m));
        }
        let env = match self.env_config() {
            Ok(e) => e,
            Err(m) => return Err((Anchor::Table("env"), m)),
        };
        if let Err(m) = self.net_config() {
            return Err((Anchor::Table("net"), m));
        }
        let mut roster = self.initial_roster();
        if let Err(e) = Env::new(self.task, env.clone(), roster.clone()) {
            return top("roster", e.to_string());
        }
        let mut last = None;
        for (i, ev) in self.events.iter().enumerate() {
            let at = |m: String| Err((Anchor::Event(i), m));
            if last.is_some_and(|l| ev.episode <= l) {
                return at(format!("event episodes must be strictly increasing ({} follows {})", ev.episode, last.unwrap()));
            }
            if ev.episode > self.episodes {
                return at(format!("event at episode {} is past the run length {}", ev.episode, self.episodes));
            }
            if ev.join.is_empty() && ev.drop.is_empty() {
                return at("event neither joins nor drops agents".into());
            }
            last = Some(ev.episode);
            for (id, kind) in Self::joiners(&roster, ev) {
                roster.add(id, kind).map_err(|e| (Anchor::Event(i), e.to_string()))?;
            }
            for &id in &ev.drop {
                roster.remove(id).map_err(|e| (Anchor::Event(i), e.to_string()))?;
            }
            let live: Vec<AgentKind> = roster.live().map(|e| e.kind).collect();
            if let Err(e) = Env::new(self.task, env.clone(), Roster::from_kinds(&live)) {
                return at(e.to_string());
            }
        }
        Ok(())
    }
}

/// Where a semantic error points in the source.
enum Anchor {
    Key(&'static str),
    Table(&'static str),
    Event(usize),
}

impl Anchor {
    fn locate(&self, text: &str) -> Option<usize> {
        let lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_start()));
        match self {
            Anchor::Key(k) => lines
                .filter(|(_, l)| l.strip_prefix(k).is_some_and(|r| r.trim_start().starts_with('=')))
                .map(|(n, _)| n)
                .next(),
            Anchor::Table(t) => lines
                .filter(|(_, l)| l.starts_with(&format!("[{t}]")) || l.starts_with(&format!("[{t}.")))
                .map(|(n, _)| n)
                .next(),
            Anchor::Event(i) => lines
                .filter(|(_, l)| l.starts_with("[[events]]"))
                .map(|(n, _)| n)
                .nth(*i),
        }
    }
}

fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}
