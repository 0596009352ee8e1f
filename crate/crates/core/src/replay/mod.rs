//! Ring-buffer experience replay with one segment per roster.
//!
//! Segments are keyed by the roster tag so a sampled batch always has a single
//! agent count. Old-roster segments are kept until evicted, but are only
//! sampled when that roster is live again.

use std::collections::{BTreeMap, VecDeque};

use rand::Rng;
use thiserror::Error;

use crate::env::{features, Observation, NUM_ACTIONS};
use crate::roster::RosterTag;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("inconsistent transition: {0}")]
    Inconsistent(String),
    #[error("capacity must be positive")]
    ZeroCapacity,
    #[error("batch size must be positive")]
    ZeroBatch,
}

/// One environment step for every live agent, flattened in ascending-ID order.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub tag: RosterTag,
    pub landmarks: usize,
    /// Network tokens of every observer (see [`features`]).
    pub obs: Vec<f64>,
    /// Behaviour action vectors, `NUM_ACTIONS` per agent: the relaxed
    /// (Gumbel-Softmax) sample whose argmax was executed, or a one-hot.
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub next_obs: Vec<f64>,
    pub done: bool,
}

impl Transition {
    pub fn new(
        tag: RosterTag,
        obs: &[Observation],
        actions: &[[f64; NUM_ACTIONS]],
        rewards: &[f64],
        next_obs: &[Observation],
        done: bool,
    ) -> Result<Self, ReplayError> {
        let n = tag.0.len();
        let landmarks = obs.first().map_or(0, |o| o.landmarks.len());
        let bad = |what: &str| ReplayError::Inconsistent(format!("{what} for roster {tag}"));
        if n == 0 {
            return Err(bad("empty tag"));
        }
        if obs.len() != n || next_obs.len() != n {
            return Err(bad("observation count differs"));
        }
        if actions.len() != n || rewards.len() != n {
            return Err(bad("action or reward count differs"));
        }
        if obs
            .iter()
            .chain(next_obs)
            .any(|o| o.components.len() != n || o.landmarks.len() != landmarks)
        {
            return Err(bad("observation component count differs"));
        }
        if rewards.iter().any(|r| !r.is_finite()) {
            return Err(bad("non-finite reward"));
        }
        if actions
            .iter()
            .any(|a| a.iter().any(|p| !(0.0..=1.0).contains(p)) || (a.iter().sum::<f64>() - 1.0).abs() > 1e-9)
        {
            return Err(bad("action vector is not a distribution"));
        }
        Ok(Self {
            landmarks,
            obs: features(obs),
            actions: actions.iter().flatten().copied().collect(),
            rewards: rewards.to_vec(),
            next_obs: features(next_obs),
            done,
            tag,
        })
    }

    pub fn agents(&self) -> usize {
        self.tag.0.len()
    }

    fn check(&self) -> Result<(), ReplayError> {
        let n = self.agents();
        let obs_len = n * (n + self.landmarks) * 4;
        if n == 0
            || self.obs.len() != obs_len
            || self.next_obs.len() != obs_len
            || self.actions.len() != n * NUM_ACTIONS
            || self.rewards.len() != n
        {
            return Err(ReplayError::Inconsistent(format!("field sizes do not match roster {}", self.tag)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Buffer {
    capacity: usize,
    storage: VecDeque<Transition>,
    /// Sequence number of `storage[0]`.
    head: u64,
    segments: BTreeMap<RosterTag, VecDeque<u64>>,
}

impl Buffer {
    pub const DEFAULT_CAPACITY: usize = 1_000_000;

    pub fn new(capacity: usize) -> Result<Self, ReplayError> {
        if capacity == 0 {
            return Err(ReplayError::ZeroCapacity);
        }
        Ok(Self {
            capacity,
            storage: VecDeque::new(),
            head: 0,
            segments: BTreeMap::new(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.is_empty()
    }

    pub fn segment_len(&self, tag: &RosterTag) -> usize {
        self.segments.get(tag).map_or(0, VecDeque::len)
    }

    pub fn tags(&self) -> impl Iterator<Item = &RosterTag> {
        self.segments.keys()
    }

    pub fn push(&mut self, t: Transition) -> Result<(), ReplayError> {
        t.check()?;
        if self.storage.len() == self.capacity {
            let old = self.storage.pop_front().expect("full buffer is non-empty");
            let seg = self.segments.get_mut(&old.tag).expect("stored tag is indexed");
            let seq = seg.pop_front();
            debug_assert_eq!(seq, Some(self.head));
            if seg.is_empty() {
                self.segments.remove(&old.tag);
            }
            self.head += 1;
        }
        let seq = self.head + self.storage.len() as u64;
        self.segments.entry(t.tag.clone()).or_default().push_back(seq);
        self.storage.push_back(t);
        Ok(())
    }

    /// Uniform sample with replacement from the `tag` segment, or `None` while
    /// that segment holds fewer than `batch` transitions.
    pub fn sample(&self, batch: usize, tag: &RosterTag, rng: &mut impl Rng) -> Result<Option<Vec<&Transition>>, ReplayError> {
        if batch == 0 {
            return Err(ReplayError::ZeroBatch);
        }
        let Some(seg) = self.segments.get(tag) else {
            return Ok(None);
        };
        if seg.len() < batch {
            return Ok(None);
        }
        Ok(Some(
            (0..batch)
                .map(|_| {
                    let seq = seg[rng.random_range(0..seg.len())];
                    &self.storage[(seq - self.head) as usize]
                })
                .collect(),
        ))
    }

    /// Checks that the segment index covers exactly the stored transitions.
    pub fn index_is_consistent(&self) -> bool {
        let indexed: usize = self.segments.values().map(VecDeque::len).sum();
        indexed == self.storage.len()
            && self.segments.iter().all(|(tag, seqs)| {
                !seqs.is_empty()
                    && seqs.iter().all(|&s| {
                        s >= self.head
                            && self
                                .storage
                                .get((s - self.head) as usize)
                                .is_some_and(|t| &t.tag == tag)
                    })
            })
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::env::DiscreteAction;

    const STAY: [f64; NUM_ACTIONS] = [0.0, 0.0, 0.0, 0.0, 1.0];

    fn obs(n: usize, value: f64) -> Vec<Observation> {
        vec![
            Observation {
                components: vec![[value; 4]; n],
                landmarks: vec![[value; 2]; 2],
            };
            n
        ]
    }

    fn transition(ids: &[u32], marker: f64) -> Transition {
        let n = ids.len();
        Transition::new(
            RosterTag(ids.to_vec()),
            &obs(n, marker),
            &vec![DiscreteAction::STAY.one_hot(); n],
            &vec![marker; n],
            &obs(n, marker),
            false,
        )
        .unwrap()
    }

    #[test]
    fn fifo_eviction() {
        let mut b = Buffer::new(3).unwrap();
        for k in 0..4 {
            b.push(transition(&[0, 1], k as f64)).unwrap();
        }
        assert_eq!(b.len(), 3);
        let markers: Vec<f64> = b.storage.iter().map(|t| t.rewards[0]).collect();
        assert_eq!(markers, vec![1.0, 2.0, 3.0]);
        assert!(b.index_is_consistent());
    }

    #[test]
    fn single_element_sample() {
        let mut b = Buffer::new(10).unwrap();
        let t = transition(&[0], 7.0);
        b.push(t.clone()).unwrap();
        let got = b.sample(1, &t.tag, &mut ChaCha8Rng::seed_from_u64(0)).unwrap().unwrap();
        assert_eq!(got, vec![&t]);
    }

    #[test]
    fn segments_per_tag() {
        let mut b = Buffer::new(10).unwrap();
        b.push(transition(&[0, 1], 0.0)).unwrap();
        b.push(transition(&[0, 1, 2], 0.0)).unwrap();
        b.push(transition(&[0, 1], 1.0)).unwrap();
        assert_eq!(b.tags().count(), 2);
    }

    #[test]
    fn sample_stays_in_segment_and_is_deterministic() {
        let mut b = Buffer::new(5000).unwrap();
        for k in 0..2000 {
            b.push(transition(&[0, 1], k as f64)).unwrap();
            b.push(transition(&[0, 1, 2], k as f64)).unwrap();
        }
        let tag = RosterTag(vec![0, 1]);
        let s1 = b.sample(1024, &tag, &mut ChaCha8Rng::seed_from_u64(5)).unwrap().unwrap();
        assert_eq!(s1.len(), 1024);
        assert!(s1.iter().all(|t| t.tag == tag));
        let s2 = b.sample(1024, &tag, &mut ChaCha8Rng::seed_from_u64(5)).unwrap().unwrap();
        assert_eq!(s1, s2);
        let small = RosterTag(vec![4]);
        assert!(b.sample(1024, &small, &mut ChaCha8Rng::seed_from_u64(5)).unwrap().is_none());
        let mut c = Buffer::new(10).unwrap();
        c.push(transition(&[0], 0.0)).unwrap();
        assert!(c.sample(2, &RosterTag(vec![0]), &mut ChaCha8Rng::seed_from_u64(0)).unwrap().is_none());
    }

    #[test]
    fn inconsistent_transitions_are_rejected() {
        let tag = RosterTag(vec![0, 1]);
        assert!(Transition::new(tag.clone(), &obs(1, 0.0), &[STAY; 2], &[0.0; 2], &obs(2, 0.0), false).is_err());
        assert!(Transition::new(tag.clone(), &obs(2, 0.0), &[STAY; 1], &[0.0; 2], &obs(2, 0.0), false).is_err());
        assert!(Transition::new(tag.clone(), &obs(2, 0.0), &[[0.5; NUM_ACTIONS]; 2], &[0.0; 2], &obs(2, 0.0), false).is_err());
        let mut t = transition(&[0, 1], 0.0);
        t.rewards.pop();
        assert!(Buffer::new(2).unwrap().push(t).is_err());
    }

    proptest! {
        #[test]
        fn index_survives_random_pushes(capacity in 1usize..12, tags in prop::collection::vec(0usize..4, 0..60)) {
            let rosters: [&[u32]; 4] = [&[0], &[0, 1], &[1, 2], &[0, 1, 2]];
            let mut b = Buffer::new(capacity).unwrap();
            for (k, &i) in tags.iter().enumerate() {
                b.push(transition(rosters[i], k as f64)).unwrap();
                prop_assert!(b.len() <= capacity);
                prop_assert!(b.index_is_consistent());
            }
            prop_assert_eq!(b.len(), tags.len().min(capacity));
        }
    }
}
