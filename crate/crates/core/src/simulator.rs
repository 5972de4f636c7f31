//! Environment plus feature front end: what an agent perceives.

use std::sync::Arc;

use crate::env::{apply_action, AgentPose, Env, EnvState, Mode, SourceSpec, StepEvent, StepResult};
use crate::error::{Error, Result};
use crate::features::{FeatureConfig, FeatureMap, LogMel};
use crate::qnet::{ActionValues, EmbeddingCache, HistoryWindow, NetArchitecture, ParamStore, Variant};
use crate::replay::{EpisodeRecipe, EpisodeRecord, Transition};

#[derive(Debug, Clone)]
pub struct Simulator {
    env: Env,
    logmel: LogMel,
}

impl Simulator {
    pub fn new(env: Env, features: FeatureConfig) -> Result<Self> {
        if features.f_s != env.config().f_s {
            return Err(Error::Config(format!(
                "features f_s {} differs from environment f_s {}",
                features.f_s,
                env.config().f_s
            )));
        }
        Ok(Self {
            env,
            logmel: LogMel::new(features)?,
        })
    }

    pub fn env(&self) -> &Env {
        &self.env
    }

    pub fn logmel(&self) -> &LogMel {
        &self.logmel
    }

    pub fn observe(&self, state: &EnvState) -> Result<Arc<FeatureMap>> {
        Ok(Arc::new(self.logmel.extract(&self.env.observe(state)?)?))
    }

    pub fn observe_at(&self, agent: &AgentPose, sources: &[&SourceSpec]) -> Result<Arc<FeatureMap>> {
        Ok(Arc::new(self.logmel.extract(&self.env.observe_at(agent, sources)?)?))
    }

    pub fn reset(&self, mode: Mode, seed: u64) -> Result<(EnvState, Arc<FeatureMap>)> {
        let state = crate::env::initial_state(self.env.config(), mode, seed)?;
        let fm = self.observe(&state)?;
        Ok((state, fm))
    }

    pub fn step(&self, state: &mut EnvState, action: crate::env::Action) -> Result<(StepResult, Arc<FeatureMap>)> {
        let r = apply_action(self.env.config(), state, action)?;
        let fm = self.observe(state)?;
        Ok((r, fm))
    }

    /// Regenerates a training episode from its recipe.
    pub fn replay_recipe(&self, id: u64, recipe: &EpisodeRecipe, history_len: usize) -> Result<EpisodeRecord> {
        let (mut state, fm) = self.reset(Mode::Train, recipe.reset_seed)?;
        let mut window = HistoryWindow::start(fm, history_len);
        let mut transitions = Vec::with_capacity(recipe.actions.len());
        let mut success = false;
        for (k, &action) in recipe.actions.iter().enumerate() {
            let (r, next) = self.step(&mut state, action)?;
            if r.terminal != (k + 1 == recipe.actions.len()) {
                return Err(Error::Checkpoint(format!(
                    "episode {id} does not replay: terminal flag at step {k} disagrees"
                )));
            }
            success |= matches!(r.event, StepEvent::FoundNewSource(_));
            let next_window = window.advance(action, next);
            transitions.push(Transition {
                state: window,
                action,
                reward: r.reward,
                next_state: next_window.clone(),
                terminal: r.terminal,
                episode_id: id,
            });
            window = next_window;
        }
        Ok(EpisodeRecord {
            id,
            transitions,
            success,
            recipe: Some(recipe.clone()),
        })
    }
}

/// Anything that scores actions for an agent. `Memo` carries per-episode
/// scratch state (for instance cached embeddings).
pub trait QFunction: Sync {
    type Memo: Default;

    fn n_actions(&self) -> usize;

    /// Past slots the function reads; zero means it looks only at the
    /// current observation.
    fn history_len(&self) -> usize;

    fn q_values(&self, memo: &mut Self::Memo, window: &HistoryWindow, state: &EnvState) -> Result<ActionValues>;
}

/// A Q-network with fixed parameters.
#[derive(Debug, Clone, Copy)]
pub struct NetPolicy<'a> {
    pub arch: &'a NetArchitecture,
    pub params: &'a ParamStore<f32>,
}

impl QFunction for NetPolicy<'_> {
    type Memo = EmbeddingCache;

    fn n_actions(&self) -> usize {
        self.arch.n_actions
    }

    fn history_len(&self) -> usize {
        match self.arch.variant {
            Variant::Memoryless => 0,
            Variant::Stateful => self.arch.history_len,
        }
    }

    fn q_values(&self, memo: &mut EmbeddingCache, window: &HistoryWindow, _: &EnvState) -> Result<ActionValues> {
        memo.q_values(self.arch, self.params, window)
    }
}
