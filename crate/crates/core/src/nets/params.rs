use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::diffcore::{DiffError, Gradients, Tape, Tensor, Var};
use crate::roster::AgentId;

/// Ownership of a parameter: shared by every agent, or private to one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Shared,
    Agent(AgentId),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub online: Tensor,
    pub target: Tensor,
    pub group: ParamGroup,
}

/// Named parameter store holding online and target copies side by side.
///
/// Every parameter belongs to exactly one [`ParamGroup`], which is what the
/// few-shot phase uses to decide what may change.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterRegistry {
    entries: BTreeMap<String, ParamEntry>,
}

/// Which copy of the weights a forward pass reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightCopy {
    Online,
    Target,
}

impl ParameterRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a parameter whose target copy starts equal to the online copy.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, group: ParamGroup) {
        self.entries.insert(
            name.into(),
            ParamEntry {
                target: value.clone(),
                online: value,
                group,
            },
        );
    }

    pub fn insert_entry(&mut self, name: impl Into<String>, entry: ParamEntry) {
        self.entries.insert(name.into(), entry);
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ParamEntry)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count<'a>(&self, names: impl IntoIterator<Item = &'a String>) -> usize {
        names
            .into_iter()
            .filter_map(|n| self.entries.get(n))
            .map(|e| e.online.len())
            .sum()
    }

    pub fn names_in_group(&self, group: ParamGroup) -> BTreeSet<String> {
        self.entries
            .iter()
            .filter(|(_, e)| e.group == group)
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// Order-sensitive digest of the online values of parameters matching `keep`.
    pub fn checksum(&self, keep: impl Fn(&str, &ParamEntry) -> bool) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (name, e) in self.entries.iter().filter(|(n, e)| keep(n, e)) {
            for b in name.bytes() {
                h = (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3);
            }
            for v in e.online.data() {
                h = (h ^ v.to_bits()).wrapping_mul(0x100_0000_01b3);
            }
        }
        h
    }

    /// `target <- (1 - tau) * target + tau * online` for the selected names
    /// (all names when `only` is `None`).
    pub fn polyak_update(&mut self, tau: f64, only: Option<&BTreeSet<String>>) -> Result<(), DiffError> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(DiffError::InvalidArgument(format!("tau must be in [0, 1], got {tau}")));
        }
        for (name, e) in self.entries.iter_mut() {
            if only.is_some_and(|set| !set.contains(name)) {
                continue;
            }
            polyak(&mut e.target, &e.online, tau)?;
        }
        Ok(())
    }
}

/// Single-tensor Polyak averaging. `tau == 1` copies and `tau == 0` is a no-op,
/// both bit-exact.
pub fn polyak(target: &mut Tensor, online: &Tensor, tau: f64) -> Result<(), DiffError> {
    if target.shape() != online.shape() {
        return Err(DiffError::ShapeMismatch {
            op: "polyak_update",
            shapes: vec![target.shape().to_vec(), online.shape().to_vec()],
        });
    }
    if tau == 0.0 {
        return Ok(());
    }
    if tau == 1.0 {
        target.data_mut().copy_from_slice(online.data());
        return Ok(());
    }
    for (t, o) in target.data_mut().iter_mut().zip(online.data()) {
        *t = (1.0 - tau) * *t + tau * o;
    }
    Ok(())
}

/// Lazily places registry parameters on a tape.
///
/// Parameters listed in `trainable` become differentiable leaves (online copy
/// only); everything else enters as a constant.
pub struct Binder<'a> {
    registry: &'a ParameterRegistry,
    copy: WeightCopy,
    trainable: Option<&'a BTreeSet<String>>,
    bound: HashMap<String, Var>,
    overrides: HashMap<String, Tensor>,
}

impl<'a> Binder<'a> {
    pub fn new(registry: &'a ParameterRegistry, copy: WeightCopy, trainable: Option<&'a BTreeSet<String>>) -> Self {
        Self {
            registry,
            copy,
            trainable: if copy == WeightCopy::Online { trainable } else { None },
            bound: HashMap::new(),
            overrides: HashMap::new(),
        }
    }

    /// Constant-only binder over the given copy.
    pub fn frozen(registry: &'a ParameterRegistry, copy: WeightCopy) -> Self {
        Self::new(registry, copy, None)
    }

    /// Uses `value` in place of the stored parameter `name` (always constant).
    pub fn with_override(mut self, name: impl Into<String>, value: Tensor) -> Self {
        self.overrides.insert(name.into(), value);
        self
    }

    /// Uses an existing tape variable for `name` (e.g. a gradient-check leaf).
    pub fn with_var(mut self, name: impl Into<String>, var: Var) -> Self {
        self.bound.insert(name.into(), var);
        self
    }

    pub fn get(&mut self, tape: &mut Tape, name: &str) -> Result<Var, DiffError> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let var = if let Some(t) = self.overrides.get(name) {
            tape.constant(t.clone())
        } else {
            let entry = self
                .registry
                .get(name)
                .ok_or_else(|| DiffError::InvalidArgument(format!("unknown parameter {name}")))?;
            let value = match self.copy {
                WeightCopy::Online => entry.online.clone(),
                WeightCopy::Target => entry.target.clone(),
            };
            if self.trainable.is_some_and(|t| t.contains(name)) {
                tape.leaf(value)
            } else {
                tape.constant(value)
            }
        };
        self.bound.insert(name.to_string(), var);
        Ok(var)
    }

    /// Differentiable leaves bound so far, by name.
    pub fn leaves(&self, tape: &Tape) -> BTreeMap<String, Var> {
        self.bound
            .iter()
            .filter(|(_, v)| tape.requires_grad(**v))
            .map(|(n, v)| (n.clone(), *v))
            .collect()
    }

    /// Gradients for every bound leaf.
    pub fn gradients(&self, tape: &Tape, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.leaves(tape)
            .into_iter()
            .map(|(n, v)| (n, grads.wrt(v)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reg() -> ParameterRegistry {
        let mut r = ParameterRegistry::new();
        r.insert("a", Tensor::vector(&[1.0, 2.0]).unwrap(), ParamGroup::Shared);
        r.insert("b", Tensor::vector(&[0.5]).unwrap(), ParamGroup::Agent(3));
        r
    }

    #[test]
    fn polyak_extremes_are_exact() {
        let mut r = reg();
        r.get_mut("a").unwrap().online = Tensor::vector(&[-0.0, 9.0]).unwrap();
        let before = r.get("a").unwrap().target.clone();
        r.polyak_update(0.0, None).unwrap();
        assert_eq!(r.get("a").unwrap().target, before);
        r.polyak_update(1.0, None).unwrap();
        let e = r.get("a").unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&e.target), bits(&e.online));
    }

    #[test]
    fn polyak_small_tau_from_zero() {
        let mut target = Tensor::zeros(&[1]);
        let online = Tensor::full(&[1], 1.0);
        polyak(&mut target, &online, 7e-5).unwrap();
        assert_eq!(target.data()[0], 7e-5);
    }

    #[test]
    fn polyak_shape_mismatch_errors() {
        let mut target = Tensor::zeros(&[2]);
        assert!(polyak(&mut target, &Tensor::zeros(&[3]), 0.5).is_err());
    }

    #[test]
    fn binder_marks_only_trainable_as_leaves() {
        let r = reg();
        let set: BTreeSet<String> = ["b".to_string()].into();
        let mut tape = Tape::new();
        let mut binder = Binder::new(&r, WeightCopy::Online, Some(&set));
        let a = binder.get(&mut tape, "a").unwrap();
        let b = binder.get(&mut tape, "b").unwrap();
        assert!(!tape.requires_grad(a));
        assert!(tape.requires_grad(b));
        assert_eq!(binder.leaves(&tape).len(), 1);
    }

    #[test]
    fn target_binder_is_never_trainable() {
        let r = reg();
        let set: BTreeSet<String> = ["a".to_string(), "b".to_string()].into();
        let mut tape = Tape::new();
        let mut binder = Binder::new(&r, WeightCopy::Target, Some(&set));
        let a = binder.get(&mut tape, "a").unwrap();
        assert!(!tape.requires_grad(a));
    }
}
