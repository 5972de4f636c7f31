//! Episode-grouped experience replay.
//!
//! Episodes enter whole and leave whole. When a push overflows the
//! capacity (counted in transitions), unsuccessful episodes are evicted
//! oldest first; only when none are left do successful ones go, also
//! oldest first.

use std::collections::{BTreeMap, VecDeque};

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::env::Action;
use crate::error::{Error, Result};
use crate::qnet::HistoryWindow;
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: HistoryWindow,
    pub action: Action,
    pub reward: f64,
    pub next_state: HistoryWindow,
    pub terminal: bool,
    pub episode_id: u64,
}

/// What is needed to regenerate an episode: the reset seed and the
/// actions taken. The environment is deterministic given both.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeRecipe {
    pub reset_seed: u64,
    pub actions: Vec<Action>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub id: u64,
    pub transitions: Vec<Transition>,
    /// Whether the episode found a source.
    pub success: bool,
    pub recipe: Option<EpisodeRecipe>,
}

impl EpisodeRecord {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.transitions.iter().map(|t| t.reward).sum()
    }
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    episodes: VecDeque<EpisodeRecord>,
    transitions: usize,
}

/// Summary used by `replay-inspect`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayStats {
    pub capacity: usize,
    pub episodes: usize,
    pub transitions: usize,
    pub successful_episodes: usize,
    pub success_ratio: f64,
    /// Transition count per distinct reward value.
    pub reward_histogram: BTreeMap<String, usize>,
    pub mean_episode_length: f64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay capacity must be at least 1".into()));
        }
        Ok(Self {
            capacity,
            episodes: VecDeque::new(),
            transitions: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.transitions
    }

    pub fn is_empty(&self) -> bool {
        self.transitions == 0
    }

    pub fn episodes(&self) -> impl Iterator<Item = &EpisodeRecord> {
        self.episodes.iter()
    }

    pub fn episode_count(&self) -> usize {
        self.episodes.len()
    }

    /// Appends an episode, then evicts until within capacity. Returns the
    /// ids of evicted episodes in eviction order.
    pub fn push_episode(&mut self, episode: EpisodeRecord) -> Result<Vec<u64>> {
        if episode.is_empty() {
            return Err(Error::Replay(format!("episode {} has no transitions", episode.id)));
        }
        if episode.len() > self.capacity {
            return Err(Error::Replay(format!(
                "episode {} holds {} transitions, more than the capacity {}",
                episode.id,
                episode.len(),
                self.capacity
            )));
        }
        self.transitions += episode.len();
        self.episodes.push_back(episode);
        let mut evicted = Vec::new();
        while self.transitions > self.capacity {
            let victim = self.episodes.iter().position(|e| !e.success).unwrap_or(0);
            let gone = self.episodes.remove(victim).expect("index in range");
            self.transitions -= gone.len();
            evicted.push(gone.id);
        }
        Ok(evicted)
    }

    /// Transition by flat index in insertion order.
    pub fn get(&self, mut i: usize) -> Option<&Transition> {
        for e in &self.episodes {
            if i < e.len() {
                return Some(&e.transitions[i]);
            }
            i -= e.len();
        }
        None
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.episodes.iter().flat_map(|e| e.transitions.iter())
    }

    /// Flat indices of `n` distinct transitions drawn uniformly (all of
    /// them, shuffled, when fewer than `n` are held).
    pub fn sample_indices(&self, n: usize, seed_value: u64) -> Result<Vec<usize>> {
        if self.is_empty() {
            return Err(Error::Replay("cannot sample from an empty buffer".into()));
        }
        let mut rng = seed::rng(seed_value);
        Ok(index::sample(&mut rng, self.transitions, n.min(self.transitions)).into_vec())
    }

    pub fn sample_without_replacement(&self, n: usize, seed_value: u64) -> Result<Vec<&Transition>> {
        let mut idx = self.sample_indices(n, seed_value)?;
        let mut starts = Vec::with_capacity(self.episodes.len());
        let mut acc = 0;
        for e in &self.episodes {
            starts.push(acc);
            acc += e.len();
        }
        let mut out = Vec::with_capacity(idx.len());
        for i in idx.drain(..) {
            let ep = starts.partition_point(|s| *s <= i) - 1;
            out.push(&self.episodes[ep].transitions[i - starts[ep]]);
        }
        Ok(out)
    }

    pub fn stats(&self) -> ReplayStats {
        let successful = self.episodes.iter().filter(|e| e.success).count();
        let mut reward_histogram = BTreeMap::new();
        for t in self.iter() {
            *reward_histogram.entry(format!("{:+.4}", t.reward)).or_insert(0) += 1;
        }
        let n = self.episodes.len();
        ReplayStats {
            capacity: self.capacity,
            episodes: n,
            transitions: self.transitions,
            successful_episodes: successful,
            success_ratio: if n == 0 { 0.0 } else { successful as f64 / n as f64 },
            reward_histogram,
            mean_episode_length: if n == 0 {
                0.0
            } else {
                self.transitions as f64 / n as f64
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::features::FeatureMap;

    fn episode(id: u64, len: usize, success: bool) -> EpisodeRecord {
        let fm = Arc::new(FeatureMap::zeros(1, 1, 1));
        let w = HistoryWindow::start(fm, 0);
        EpisodeRecord {
            id,
            transitions: (0..len)
                .map(|k| Transition {
                    state: w.clone(),
                    action: Action::PosX,
                    reward: k as f64,
                    next_state: w.clone(),
                    terminal: k + 1 == len,
                    episode_id: id,
                })
                .collect(),
            success,
            recipe: None,
        }
    }

    fn ids(b: &ReplayBuffer) -> Vec<u64> {
        b.episodes().map(|e| e.id).collect()
    }

    #[test]
    fn failures_go_first() {
        let mut b = ReplayBuffer::new(10).unwrap();
        b.push_episode(episode(0, 6, true)).unwrap();
        b.push_episode(episode(1, 5, false)).unwrap();
        assert_eq!(ids(&b), vec![0]);
        let mut b = ReplayBuffer::new(11).unwrap();
        b.push_episode(episode(0, 6, true)).unwrap();
        b.push_episode(episode(1, 5, false)).unwrap();
        assert_eq!(b.push_episode(episode(2, 4, true)).unwrap(), vec![1]);
        assert_eq!(ids(&b), vec![0, 2]);
        assert_eq!(b.len(), 10);
    }

    #[test]
    fn fifo_when_all_succeeded() {
        let mut b = ReplayBuffer::new(10).unwrap();
        for id in 0..3 {
            b.push_episode(episode(id, 4, true)).unwrap();
        }
        assert_eq!(ids(&b), vec![1, 2]);
    }

    #[test]
    fn failed_push_can_evict_itself() {
        let mut b = ReplayBuffer::new(10).unwrap();
        b.push_episode(episode(0, 8, true)).unwrap();
        assert_eq!(b.push_episode(episode(1, 3, false)).unwrap(), vec![1]);
        assert_eq!(ids(&b), vec![0]);
    }

    #[test]
    fn oversized_and_empty_episodes_rejected() {
        let mut b = ReplayBuffer::new(5).unwrap();
        assert!(matches!(b.push_episode(episode(0, 6, true)), Err(Error::Replay(_))));
        assert!(b.push_episode(episode(1, 0, true)).is_err());
        assert!(b.is_empty());
        assert!(b.sample_without_replacement(4, 0).is_err());
    }

    #[test]
    fn sampling_distinct_and_capped() {
        let mut b = ReplayBuffer::new(200).unwrap();
        for id in 0..10 {
            b.push_episode(episode(id, 10, id % 2 == 0)).unwrap();
        }
        let idx = b.sample_indices(64, 5).unwrap();
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 64);
        let mut all = b.sample_indices(500, 5).unwrap();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        let picked = b.sample_without_replacement(64, 5).unwrap();
        for (i, t) in idx.iter().zip(&picked) {
            assert!(std::ptr::eq(b.get(*i).unwrap(), *t));
        }
    }

    #[test]
    fn stats_summarise_contents() {
        let mut b = ReplayBuffer::new(100).unwrap();
        b.push_episode(episode(0, 2, true)).unwrap();
        b.push_episode(episode(1, 3, false)).unwrap();
        let s = b.stats();
        assert_eq!((s.episodes, s.transitions, s.successful_episodes), (2, 5, 1));
        assert_eq!(s.success_ratio, 0.5);
        assert_eq!(s.reward_histogram["+0.0000"], 2);
        assert_eq!(s.reward_histogram["+2.0000"], 1);
    }
}
