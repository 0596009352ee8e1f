//! Agent identities and the live roster.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type AgentId = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Green,
    Red,
    Predator,
    Prey,
}

impl AgentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AgentKind::Green => "green",
            AgentKind::Red => "red",
            AgentKind::Predator => "predator",
            AgentKind::Prey => "prey",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "green" => Some(AgentKind::Green),
            "red" => Some(AgentKind::Red),
            "predator" => Some(AgentKind::Predator),
            "prey" => Some(AgentKind::Prey),
            _ => None,
        }
    }
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RosterEntry {
    pub id: AgentId,
    pub kind: AgentKind,
    pub live: bool,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RosterError {
    #[error("agent {0} is already live")]
    Duplicate(AgentId),
    #[error("unknown or dropped agent {0}")]
    Unknown(AgentId),
    #[error("roster would become empty")]
    Empty,
    #[error("agent {id} was registered as {registered}, not {requested}")]
    KindChanged {
        id: AgentId,
        registered: AgentKind,
        requested: AgentKind,
    },
}

/// Sorted list of live agent IDs; identifies a replay segment.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RosterTag(pub Vec<AgentId>);

impl fmt::Display for RosterTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ids: Vec<String> = self.0.iter().map(|i| i.to_string()).collect();
        f.write_str(&ids.join("|"))
    }
}

/// Every agent ever registered, with a live flag. Dropped agents stay listed.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roster {
    entries: BTreeMap<AgentId, RosterEntry>,
}

impl Roster {
    pub fn new() -> Self {
        Self::default()
    }

    /// Roster with consecutive IDs starting at 0, in the order given.
    pub fn from_kinds(kinds: &[AgentKind]) -> Self {
        let mut roster = Self::new();
        for (i, &kind) in kinds.iter().enumerate() {
            roster
                .add(i as AgentId, kind)
                .expect("fresh consecutive ids never collide");
        }
        roster
    }

    /// Registers `id` or revives it if it was dropped.
    pub fn add(&mut self, id: AgentId, kind: AgentKind) -> Result<(), RosterError> {
        match self.entries.get_mut(&id) {
            Some(e) if e.live => Err(RosterError::Duplicate(id)),
            Some(e) if e.kind != kind => Err(RosterError::KindChanged {
                id,
                registered: e.kind,
                requested: kind,
            }),
            Some(e) => {
                e.live = true;
                Ok(())
            }
            None => {
                self.entries.insert(id, RosterEntry { id, kind, live: true });
                Ok(())
            }
        }
    }

    pub fn remove(&mut self, id: AgentId) -> Result<(), RosterError> {
        match self.entries.get_mut(&id) {
            Some(e) if e.live => {
                e.live = false;
                Ok(())
            }
            _ => Err(RosterError::Unknown(id)),
        }
    }

    pub fn is_live(&self, id: AgentId) -> bool {
        self.entries.get(&id).is_some_and(|e| e.live)
    }

    pub fn contains(&self, id: AgentId) -> bool {
        self.entries.contains_key(&id)
    }

    pub fn kind(&self, id: AgentId) -> Option<AgentKind> {
        self.entries.get(&id).map(|e| e.kind)
    }

    /// Live IDs in ascending order; this is the observation ordering.
    pub fn live_ids(&self) -> Vec<AgentId> {
        self.entries.values().filter(|e| e.live).map(|e| e.id).collect()
    }

    pub fn live(&self) -> impl Iterator<Item = &RosterEntry> {
        self.entries.values().filter(|e| e.live)
    }

    pub fn all(&self) -> impl Iterator<Item = &RosterEntry> {
        self.entries.values()
    }

    pub fn live_count(&self) -> usize {
        self.live().count()
    }

    pub fn tag(&self) -> RosterTag {
        RosterTag(self.live_ids())
    }

    /// Smallest ID never used by this roster.
    pub fn next_id(&self) -> AgentId {
        self.entries.keys().next_back().map_or(0, |&m| m + 1)
    }

    pub fn count_live(&self, kind: AgentKind) -> usize {
        self.live().filter(|e| e.kind == kind).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_then_remove_round_trips_live_set() {
        let mut r = Roster::from_kinds(&[AgentKind::Green, AgentKind::Red]);
        let before = r.tag();
        r.add(2, AgentKind::Green).unwrap();
        r.remove(2).unwrap();
        assert_eq!(r.tag(), before);
    }

    #[test]
    fn duplicate_and_unknown_are_errors() {
        let mut r = Roster::from_kinds(&[AgentKind::Green]);
        assert_eq!(r.add(0, AgentKind::Green), Err(RosterError::Duplicate(0)));
        assert_eq!(r.remove(5), Err(RosterError::Unknown(5)));
        r.remove(0).unwrap();
        assert_eq!(r.remove(0), Err(RosterError::Unknown(0)));
    }

    #[test]
    fn live_ids_are_sorted() {
        let mut r = Roster::new();
        r.add(7, AgentKind::Red).unwrap();
        r.add(2, AgentKind::Green).unwrap();
        r.add(4, AgentKind::Green).unwrap();
        assert_eq!(r.live_ids(), vec![2, 4, 7]);
        assert_eq!(r.next_id(), 8);
    }
}
