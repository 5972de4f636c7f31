use std::sync::Arc;

use crate::env::Action;
use crate::features::FeatureMap;

/// A past state and the action the agent took from it.
#[derive(Debug, Clone, PartialEq)]
pub struct PastEntry {
    pub state: Arc<FeatureMap>,
    pub action: Action,
}

/// The current state plus a fixed number of past slots, most recent last.
/// Empty slots (before the episode began) are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryWindow {
    pub current: Arc<FeatureMap>,
    pub slots: Vec<Option<PastEntry>>,
}

impl HistoryWindow {
    /// Window at the start of an episode: every past slot empty.
    pub fn start(current: Arc<FeatureMap>, history_len: usize) -> Self {
        Self {
            current,
            slots: vec![None; history_len],
        }
    }

    pub fn history_len(&self) -> usize {
        self.slots.len()
    }

    /// Validity of each past slot.
    pub fn mask(&self) -> Vec<bool> {
        self.slots.iter().map(Option::is_some).collect()
    }

    pub fn valid_past(&self) -> impl Iterator<Item = &PastEntry> {
        self.slots.iter().flatten()
    }

    /// Window after taking `action` from the current state and landing in
    /// `next`. The oldest slot falls off.
    pub fn advance(&self, action: Action, next: Arc<FeatureMap>) -> Self {
        let mut slots = self.slots.clone();
        if !slots.is_empty() {
            slots.remove(0);
            slots.push(Some(PastEntry {
                state: Arc::clone(&self.current),
                action,
            }));
        }
        Self { current: next, slots }
    }
}
