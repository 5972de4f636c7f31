//! Deep Q-learning loop: epsilon-greedy rollouts with frozen networks,
//! then a fixed number of replay minibatch updates per epoch.

mod checkpoint;

use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::{Checkpoint, CheckpointMeta, ReplaySnapshot, FORMAT_VERSION, MAGIC};

use crate::acoustics::AcousticParams;
use crate::env::{Action, EnvConfig, Mode, StepEvent};
use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::qnet::{
    adam_step, hard_update, init_params, loss_and_grads, ActionValues, AdamConfig, HistoryWindow, NetArchitecture,
    OptState, ParamStore, SnapshotQueue,
};
use crate::replay::{EpisodeRecipe, EpisodeRecord, ReplayBuffer, Transition};
use crate::seed::{self, purpose};
use crate::simulator::{NetPolicy, QFunction, Simulator};

/// How the scheduled epsilon is read when acting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EpsilonMeaning {
    /// Probability of the greedy action; grows over training.
    Greedy,
    /// Probability of a uniformly random action.
    Explore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub gamma: f64,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch: usize,
    pub updates_per_epoch: usize,
    pub target_update_period: usize,
    pub target_delay: usize,
    pub epsilon0: f64,
    pub epsilon_cap: f64,
    pub anneal: f64,
    pub epsilon_meaning: EpsilonMeaning,
    pub replay_capacity: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            episodes_per_epoch: 64,
            gamma: 0.9,
            lr: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch: 64,
            updates_per_epoch: 150,
            target_update_period: 15,
            target_delay: 15,
            epsilon0: 0.6,
            epsilon_cap: 0.95,
            anneal: 0.95,
            epsilon_meaning: EpsilonMeaning::Greedy,
            replay_capacity: 4000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("episodes_per_epoch", self.episodes_per_epoch),
            ("batch", self.batch),
            ("updates_per_epoch", self.updates_per_epoch),
            ("target_update_period", self.target_update_period),
            ("replay_capacity", self.replay_capacity),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("train.{name} must be at least 1")));
        }
        for (name, v) in [("epsilon0", self.epsilon0), ("epsilon_cap", self.epsilon_cap)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Config(format!("train.{name} must lie in (0, 1], got {v}")));
            }
        }
        if !(self.anneal > 0.0 && self.anneal <= 1.0) {
            return Err(Error::Config(format!(
                "train.anneal must lie in (0, 1], got {}",
                self.anneal
            )));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!(
                "train.gamma must lie in [0, 1], got {}",
                self.gamma
            )));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::Config(format!("train.lr must be non-negative, got {}", self.lr)));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    /// Scheduled epsilon at epoch `k`: the closed form of
    /// `e' = 1 - (1 - e) * anneal` from `epsilon0`, capped.
    pub fn epsilon_at(&self, k: usize) -> f64 {
        epsilon_at(k, self.epsilon0, self.epsilon_cap, self.anneal)
    }
}

pub fn epsilon_at(k: usize, epsilon0: f64, cap: f64, anneal: f64) -> f64 {
    let k = i32::try_from(k).unwrap_or(i32::MAX);
    cap.min(1.0 - (1.0 - epsilon0) * anneal.powi(k))
}

/// Epsilon-greedy choice. Ties in the greedy branch go to the lowest
/// index.
pub fn select_action<R: Rng>(values: &ActionValues, epsilon: f64, meaning: EpsilonMeaning, rng: &mut R) -> usize {
    let greedy = match meaning {
        EpsilonMeaning::Greedy => epsilon,
        EpsilonMeaning::Explore => 1.0 - epsilon,
    };
    if rng.gen::<f64>() < greedy {
        values.argmax()
    } else {
        rng.gen_range(0..values.0.len())
    }
}

/// Plays one training episode with epsilon-greedy actions.
pub fn rollout_episode<Q: QFunction>(
    sim: &Simulator,
    q: &Q,
    epsilon: f64,
    meaning: EpsilonMeaning,
    episode_seed: u64,
    episode_id: u64,
) -> Result<EpisodeRecord> {
    let actions = sim.env().config().actions();
    if q.n_actions() != actions.len() {
        return Err(Error::Config(format!(
            "policy scores {} actions, environment offers {}",
            q.n_actions(),
            actions.len()
        )));
    }
    let reset_seed = seed::derive(episode_seed, &[0]);
    let mut rng = seed::derived_rng(episode_seed, &[1]);
    let (mut state, fm) = sim.reset(Mode::Train, reset_seed)?;
    let mut window = HistoryWindow::start(fm, q.history_len());
    let mut memo = Q::Memo::default();
    let mut transitions = Vec::new();
    let mut taken = Vec::new();
    let mut success = false;
    loop {
        let values = q.q_values(&mut memo, &window, &state)?;
        let action = actions[select_action(&values, epsilon, meaning, &mut rng)];
        let (r, next) = sim.step(&mut state, action)?;
        success |= matches!(r.event, StepEvent::FoundNewSource(_));
        let next_window = window.advance(action, next);
        transitions.push(Transition {
            state: window,
            action,
            reward: r.reward,
            next_state: next_window.clone(),
            terminal: r.terminal,
            episode_id,
        });
        taken.push(action);
        window = next_window;
        if r.terminal {
            break;
        }
    }
    Ok(EpisodeRecord {
        id: episode_id,
        transitions,
        success,
        recipe: Some(EpisodeRecipe {
            reset_seed,
            actions: taken,
        }),
    })
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub epoch: usize,
    pub mean_episode_reward: f64,
    pub success_fraction: f64,
    pub mean_loss: f64,
    pub epsilon: f64,
    pub wall_time_s: f64,
}

/// Everything that evolves during training.
#[derive(Debug, Clone)]
pub struct TrainerState {
    /// Completed epochs.
    pub epoch: usize,
    /// Completed update iterations over all epochs.
    pub global_iter: u64,
    pub next_episode_id: u64,
    pub online: ParamStore<f32>,
    pub target: ParamStore<f32>,
    pub opt: OptState<f32>,
    pub snapshots: SnapshotQueue<f32>,
    pub replay: ReplayBuffer,
}

pub struct Trainer {
    sim: Simulator,
    arch: NetArchitecture,
    config: TrainConfig,
    config_hash: String,
    pool: Option<rayon::ThreadPool>,
    state: TrainerState,
}

/// Hash identifying everything that shapes a training trajectory except
/// its length.
pub fn config_hash(
    env: &EnvConfig,
    acoustics: &AcousticParams,
    features: &FeatureConfig,
    arch: &NetArchitecture,
    train: &TrainConfig,
) -> String {
    let train = TrainConfig {
        epochs: 0,
        ..train.clone()
    };
    let doc = serde_json::json!({
        "env": env,
        "acoustics": acoustics,
        "features": features,
        "arch": arch,
        "train": train,
    });
    let digest = Sha256::digest(doc.to_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

impl Trainer {
    pub fn new(sim: Simulator, arch: NetArchitecture, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        arch.validate()?;
        let env_cfg = sim.env().config();
        if arch.n_actions != env_cfg.n_actions() {
            return Err(Error::Config(format!(
                "arch.n_actions {} differs from the environment's {} actions",
                arch.n_actions,
                env_cfg.n_actions()
            )));
        }
        if arch.input_channels != env_cfg.mics.len() {
            return Err(Error::Config(format!(
                "arch.input_channels {} differs from the {} microphones",
                arch.input_channels,
                env_cfg.mics.len()
            )));
        }
        let online = init_params::<f32>(&arch, config.seed)?;
        let mut snapshots = SnapshotQueue::for_delay(config.target_delay);
        snapshots.push(online.clone());
        let state = TrainerState {
            epoch: 0,
            global_iter: 0,
            next_episode_id: 0,
            target: online.clone(),
            opt: OptState::new(&online, config.adam()),
            online,
            snapshots,
            replay: ReplayBuffer::new(config.replay_capacity)?,
        };
        let config_hash = config_hash(env_cfg, sim.env().acoustics(), sim.logmel().config(), &arch, &config);
        Ok(Self {
            sim,
            arch,
            config,
            config_hash,
            pool: None,
            state,
        })
    }

    /// Rebuilds a trainer from a checkpoint; the replay buffer is
    /// regenerated from the stored episode recipes.
    pub fn resume(sim: Simulator, arch: NetArchitecture, config: TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(sim, arch, config)?;
        if ckpt.meta.config_hash != t.config_hash {
            return Err(Error::Checkpoint(format!(
                "checkpoint was written under configuration {}, current is {}",
                ckpt.meta.config_hash, t.config_hash
            )));
        }
        let h = t.arch.window_len();
        let mut replay = ReplayBuffer::new(ckpt.replay.capacity)?;
        for (id, recipe) in &ckpt.replay.episodes {
            let ep = t.sim.replay_recipe(*id, recipe, h)?;
            replay.push_episode(ep)?;
        }
        for p in [&ckpt.online, &ckpt.target] {
            p.check_arch(&t.arch)?;
        }
        let mut opt = OptState::new(&ckpt.online, t.config.adam());
        opt.m = ckpt.opt_m.clone();
        opt.v = ckpt.opt_v.clone();
        opt.step = ckpt.meta.opt_step;
        let mut snapshots = SnapshotQueue::for_delay(t.config.target_delay);
        for s in &ckpt.snapshots {
            snapshots.push(s.clone());
        }
        t.state = TrainerState {
            epoch: ckpt.meta.epoch,
            global_iter: ckpt.meta.global_iter,
            next_episode_id: ckpt.meta.next_episode_id,
            online: ckpt.online.clone(),
            target: ckpt.target.clone(),
            opt,
            snapshots,
            replay,
        };
        Ok(t)
    }

    /// Runs rollouts on `threads` worker threads; results do not depend
    /// on the count.
    pub fn with_threads(mut self, threads: usize) -> Result<Self> {
        self.pool = if threads > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build()
                    .map_err(|e| Error::Config(format!("thread pool: {e}")))?,
            )
        } else {
            None
        };
        Ok(self)
    }

    pub fn state(&self) -> &TrainerState {
        &self.state
    }

    pub fn arch(&self) -> &NetArchitecture {
        &self.arch
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn simulator(&self) -> &Simulator {
        &self.sim
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    /// Epsilon used for the next epoch's rollouts.
    pub fn epsilon(&self) -> f64 {
        self.config.epsilon_at(self.state.epoch)
    }

    fn rollouts(&self, epsilon: f64) -> Result<Vec<EpisodeRecord>> {
        let n = self.config.episodes_per_epoch;
        let epoch = self.state.epoch as u64;
        let first_id = self.state.next_episode_id;
        let policy = NetPolicy {
            arch: &self.arch,
            params: &self.state.online,
        };
        let one = |i: usize| {
            let s = seed::derive(self.config.seed, &[purpose::ROLLOUT, epoch, i as u64]);
            rollout_episode(
                &self.sim,
                &policy,
                epsilon,
                self.config.epsilon_meaning,
                s,
                first_id + i as u64,
            )
        };
        match &self.pool {
            Some(pool) => pool.install(|| (0..n).into_par_iter().map(one).collect()),
            None => (0..n).map(one).collect(),
        }
    }

    /// One epoch: rollouts with frozen networks, then the update phase.
    pub fn run_epoch(&mut self) -> Result<TrainLogRecord> {
        let started = Instant::now();
        let epsilon = self.epsilon();
        let episodes = self.rollouts(epsilon)?;
        let n = episodes.len() as f64;
        let mean_reward = episodes.iter().map(EpisodeRecord::total_reward).sum::<f64>() / n;
        let success = episodes.iter().filter(|e| e.success).count() as f64 / n;
        self.state.next_episode_id += episodes.len() as u64;
        for ep in episodes {
            self.state.replay.push_episode(ep)?;
        }
        let mut loss_sum = 0.0;
        for _ in 0..self.config.updates_per_epoch {
            loss_sum += self.update_step()?;
        }
        self.state.epoch += 1;
        Ok(TrainLogRecord {
            epoch: self.state.epoch,
            mean_episode_reward: mean_reward,
            success_fraction: success,
            mean_loss: loss_sum / self.config.updates_per_epoch as f64,
            epsilon,
            wall_time_s: started.elapsed().as_secs_f64(),
        })
    }

    fn update_step(&mut self) -> Result<f64> {
        let st = &mut self.state;
        st.global_iter += 1;
        let sample_seed = seed::derive(self.config.seed, &[purpose::SAMPLE, st.global_iter]);
        let batch = st.replay.sample_without_replacement(self.config.batch, sample_seed)?;
        let (loss, grads) = loss_and_grads(&self.arch, &st.online, &st.target, &batch, self.config.gamma)?;
        adam_step(&mut st.online, &grads, &mut st.opt)?;
        st.snapshots.push(st.online.clone());
        if st.global_iter % self.config.target_update_period as u64 == 0 {
            hard_update(&mut st.target, &st.snapshots, self.config.target_delay)?;
        }
        Ok(loss)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let st = &self.state;
        Checkpoint {
            meta: CheckpointMeta {
                config_hash: self.config_hash.clone(),
                arch: self.arch.clone(),
                seed: self.config.seed,
                epoch: st.epoch,
                epsilon: self.epsilon(),
                global_iter: st.global_iter,
                next_episode_id: st.next_episode_id,
                opt_step: st.opt.step,
            },
            online: st.online.clone(),
            target: st.target.clone(),
            opt_m: st.opt.m.clone(),
            opt_v: st.opt.v.clone(),
            snapshots: st.snapshots.iter().cloned().collect(),
            replay: ReplaySnapshot {
                capacity: st.replay.capacity(),
                episodes: st
                    .replay
                    .episodes()
                    .map(|e| (e.id, e.recipe.clone().expect("training episodes carry recipes")))
                    .collect(),
            },
        }
    }

    /// Trains until `config.epochs` epochs are complete, calling `on_epoch`
    /// after each one.
    pub fn train_with<F>(&mut self, mut on_epoch: F) -> Result<Vec<TrainLogRecord>>
    where
        F: FnMut(&Self, &TrainLogRecord) -> Result<()>,
    {
        let mut log = Vec::new();
        while self.state.epoch < self.config.epochs {
            let rec = self.run_epoch()?;
            on_epoch(self, &rec)?;
            log.push(rec);
        }
        Ok(log)
    }

    /// Trains to completion, writing `epoch_NNNN.ckpt` files to `dir` when
    /// given.
    pub fn train(&mut self, dir: Option<&Path>) -> Result<(Checkpoint, Vec<TrainLogRecord>)> {
        let log = self.train_with(|t, rec| {
            if let Some(dir) = dir {
                t.checkpoint().save(&dir.join(format!("epoch_{:04}.ckpt", rec.epoch)))?;
            }
            Ok(())
        })?;
        Ok((self.checkpoint(), log))
    }
}

impl Action {
    pub(crate) fn to_byte(self) -> u8 {
        self.index() as u8
    }

    pub(crate) fn from_byte(b: u8) -> Result<Self> {
        Action::from_index(b as usize).ok_or_else(|| Error::Checkpoint(format!("bad action byte {b}")))
    }
}
