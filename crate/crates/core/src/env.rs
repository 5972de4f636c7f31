//! Shoebox room, embodied listener, sound sources and the novelty reward.
//!
//! The agent moves on a plane at fixed height in an axis-aligned room. Each
//! step it is rewarded `r_plus` the first time it comes within `reach_radius`
//! of a source it has not found before, `r_oob` when the move would leave the
//! room (the agent then stays put), and `r_minus` otherwise.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acoustics::{render_observation, AcousticParams, SignalBank, Waveform};
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::seed;

/// Axis-aligned room with its corner at the origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoomSpec {
    /// Extent along x, y, z in meters.
    pub dims: [f64; 3],
    /// Energy absorption per wall, ordered x=0, x=Lx, y=0, y=Ly, z=0, z=Lz.
    pub wall_absorption: [f64; 6],
}

impl Default for RoomSpec {
    fn default() -> Self {
        Self {
            dims: [10.0, 10.0, 5.0],
            wall_absorption: [0.3; 6],
        }
    }
}

impl RoomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(Error::Config(format!(
                "room dims must be positive, got {:?}",
                self.dims
            )));
        }
        if self.wall_absorption.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::Config(format!(
                "wall absorption must lie in [0, 1], got {:?}",
                self.wall_absorption
            )));
        }
        Ok(())
    }

    /// Closed containment test: points on a wall are inside.
    pub fn contains(&self, p: Vec3) -> bool {
        let [lx, ly, lz] = self.dims;
        (0.0..=lx).contains(&p.x) && (0.0..=ly).contains(&p.y) && (0.0..=lz).contains(&p.z)
    }

    pub fn strictly_contains(&self, p: Vec3) -> bool {
        let [lx, ly, lz] = self.dims;
        p.x > 0.0 && p.x < lx && p.y > 0.0 && p.y < ly && p.z > 0.0 && p.z < lz
    }
}

/// One of the four planar room quadrants, `y` pointing up.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Quadrant {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

impl Quadrant {
    pub const TRAIN: [Quadrant; 3] = [Quadrant::TopLeft, Quadrant::TopRight, Quadrant::BottomLeft];
    pub const EVAL: Quadrant = Quadrant::BottomRight;

    /// Half-open `[x0, x1) x [y0, y1)` extent of the quadrant.
    pub fn bounds(self, room: &RoomSpec) -> ([f64; 2], [f64; 2]) {
        let hx = room.dims[0] / 2.0;
        let hy = room.dims[1] / 2.0;
        let (xs, ys) = match self {
            Quadrant::TopLeft => ([0.0, hx], [hy, room.dims[1]]),
            Quadrant::TopRight => ([hx, room.dims[0]], [hy, room.dims[1]]),
            Quadrant::BottomLeft => ([0.0, hx], [0.0, hy]),
            Quadrant::BottomRight => ([hx, room.dims[0]], [0.0, hy]),
        };
        (xs, ys)
    }
}

impl fmt::Display for Quadrant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Quadrant::TopLeft => "TL",
            Quadrant::TopRight => "TR",
            Quadrant::BottomLeft => "BL",
            Quadrant::BottomRight => "BR",
        })
    }
}

/// Quadrant containing `(x, y)`. Points on a split line belong to the
/// right-hand and bottom halves.
pub fn quadrant_of(x: f64, y: f64, room: &RoomSpec) -> Result<Quadrant> {
    let [lx, ly, _] = room.dims;
    if !(0.0..=lx).contains(&x) || !(0.0..=ly).contains(&y) {
        return Err(Error::Domain(format!(
            "point ({x}, {y}) lies outside the {lx} x {ly} room"
        )));
    }
    let right = x >= lx / 2.0;
    let bottom = y <= ly / 2.0;
    Ok(match (right, bottom) {
        (false, false) => Quadrant::TopLeft,
        (true, false) => Quadrant::TopRight,
        (false, true) => Quadrant::BottomLeft,
        (true, true) => Quadrant::BottomRight,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub id: u32,
    pub position: Vec3,
    pub signal_id: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentPose {
    pub centre: Vec3,
}

/// Microphone positions relative to the agent's centre of mass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MicArraySpec {
    pub offsets: Vec<Vec3>,
}

impl Default for MicArraySpec {
    fn default() -> Self {
        Self {
            offsets: vec![Vec3::new(0.25, 0.25, 0.0), Vec3::new(-0.25, -0.25, 0.0)],
        }
    }
}

impl MicArraySpec {
    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn positions(&self, agent: &AgentPose) -> Vec<Vec3> {
        self.offsets.iter().map(|&o| agent.centre + o).collect()
    }
}

/// Unit moves along the room axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Action {
    PosX,
    NegX,
    PosY,
    NegY,
    PosZ,
    NegZ,
}

impl Action {
    pub const PLANAR: [Action; 4] = [Action::PosX, Action::NegX, Action::PosY, Action::NegY];
    pub const ALL: [Action; 6] = [
        Action::PosX,
        Action::NegX,
        Action::PosY,
        Action::NegY,
        Action::PosZ,
        Action::NegZ,
    ];

    /// Unit direction of the move.
    pub fn direction(self) -> Vec3 {
        match self {
            Action::PosX => Vec3::new(1.0, 0.0, 0.0),
            Action::NegX => Vec3::new(-1.0, 0.0, 0.0),
            Action::PosY => Vec3::new(0.0, 1.0, 0.0),
            Action::NegY => Vec3::new(0.0, -1.0, 0.0),
            Action::PosZ => Vec3::new(0.0, 0.0, 1.0),
            Action::NegZ => Vec3::new(0.0, 0.0, -1.0),
        }
    }

    /// Position in [`Action::ALL`]; doubles as the Q-network output index.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Action::ALL.get(i).copied()
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Action::PosX => "+x",
            Action::NegX => "-x",
            Action::PosY => "+y",
            Action::NegY => "-y",
            Action::PosZ => "+z",
            Action::NegZ => "-z",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub room: RoomSpec,
    pub mics: MicArraySpec,
    pub step_size: f64,
    /// Touching tolerance: a source within this Euclidean distance is found.
    pub reach_radius: f64,
    pub r_plus: f64,
    pub r_minus: f64,
    pub r_oob: f64,
    pub horizon: usize,
    /// Delay between action and reward assessment, in action periods.
    pub reward_delay: usize,
    /// Audio rendered per action period; the action rate is its inverse.
    pub clip_seconds: f64,
    pub f_s: f64,
    pub agent_height: f64,
    pub source_height: f64,
    pub n_sources: usize,
    /// Enables the +z / -z moves.
    pub allow_vertical: bool,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            room: RoomSpec::default(),
            mics: MicArraySpec::default(),
            step_size: 0.5,
            reach_radius: 0.6,
            r_plus: 1.0,
            r_minus: -0.1,
            r_oob: -1.0,
            horizon: 50,
            reward_delay: 1,
            clip_seconds: 0.5,
            f_s: 16_000.0,
            agent_height: 2.5,
            source_height: 2.6,
            n_sources: 1,
            allow_vertical: false,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        self.room.validate()?;
        let [lx, ly, lz] = self.room.dims;
        let cfg = |msg: String| Err(Error::Config(msg));
        if !(self.reach_radius > 0.0) || self.reach_radius >= lx.min(ly) {
            return cfg(format!(
                "reach_radius must be positive and below the room extent, got {}",
                self.reach_radius
            ));
        }
        if !(self.step_size > 0.0) {
            return cfg(format!("step_size must be positive, got {}", self.step_size));
        }
        if self.horizon == 0 {
            return cfg("horizon must be at least 1".into());
        }
        if !(self.r_plus > 0.0 && 0.0 > self.r_minus && self.r_minus >= self.r_oob) {
            return cfg(format!(
                "rewards must satisfy r_plus > 0 > r_minus >= r_oob, got {} / {} / {}",
                self.r_plus, self.r_minus, self.r_oob
            ));
        }
        if self.reward_delay != 1 {
            return cfg(format!(
                "only a reward delay of one action period is supported, got {}",
                self.reward_delay
            ));
        }
        if !(self.clip_seconds > 0.0) || !(self.f_s > 0.0) {
            return cfg("clip_seconds and f_s must be positive".into());
        }
        if self.mics.is_empty() {
            return cfg("at least one microphone is required".into());
        }
        for (name, h) in [
            ("agent_height", self.agent_height),
            ("source_height", self.source_height),
        ] {
            if !(h > 0.0 && h < lz) {
                return cfg(format!("{name} {h} outside (0, {lz})"));
            }
        }
        if self.n_sources == 0 {
            return cfg("n_sources must be at least 1".into());
        }
        Ok(())
    }

    pub fn actions(&self) -> &'static [Action] {
        if self.allow_vertical {
            &Action::ALL
        } else {
            &Action::PLANAR
        }
    }

    pub fn n_actions(&self) -> usize {
        self.actions().len()
    }

    /// Samples per rendered clip.
    pub fn clip_samples(&self) -> usize {
        (self.clip_seconds * self.f_s).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub agent: AgentPose,
    pub sources: Vec<SourceSpec>,
    pub found: BTreeSet<u32>,
    pub step_index: usize,
    pub rng: ChaCha8Rng,
}

impl EnvState {
    pub fn active_sources(&self) -> impl Iterator<Item = &SourceSpec> {
        self.sources.iter().filter(|s| !self.found.contains(&s.id))
    }

    pub fn all_found(&self) -> bool {
        self.found.len() == self.sources.len()
    }

    /// Nearest unfound source and its distance to the agent centre.
    pub fn nearest_unfound(&self) -> Option<(&SourceSpec, f64)> {
        self.active_sources()
            .map(|s| (s, s.position.distance(self.agent.centre)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepEvent {
    FoundNewSource(u32),
    OutOfBounds,
    None,
}

/// Reward bookkeeping of a step, without the rendered observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepResult {
    pub reward: f64,
    pub terminal: bool,
    pub event: StepEvent,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub observation: Waveform,
    pub reward: f64,
    pub terminal: bool,
    pub event: StepEvent,
}

fn sample_in(rng: &mut ChaCha8Rng, q: Quadrant, room: &RoomSpec, z: f64) -> Vec3 {
    let ([x0, x1], [y0, y1]) = q.bounds(room);
    loop {
        let p = Vec3::new(rng.gen_range(x0..x1), rng.gen_range(y0..y1), z);
        if room.strictly_contains(p) {
            return p;
        }
    }
}

fn sample_train(rng: &mut ChaCha8Rng, room: &RoomSpec, z: f64) -> Vec3 {
    let q = Quadrant::TRAIN[rng.gen_range(0..Quadrant::TRAIN.len())];
    sample_in(rng, q, room, z)
}

/// Draws the initial state of an episode without rendering audio.
///
/// Sources land in the training quadrants (`Mode::Train`) or the held-out
/// bottom-right quadrant (`Mode::Eval`); the agent always starts in the
/// training quadrants, re-drawn until it is out of reach of every source.
pub fn initial_state(config: &EnvConfig, mode: Mode, seed: u64) -> Result<EnvState> {
    config.validate()?;
    let room = &config.room;
    let mut rng = seed::rng(seed);
    let sources = (0..config.n_sources)
        .map(|j| {
            let position = match mode {
                Mode::Train => sample_train(&mut rng, room, config.source_height),
                Mode::Eval => sample_in(&mut rng, Quadrant::EVAL, room, config.source_height),
            };
            SourceSpec {
                id: j as u32,
                position,
                signal_id: j as u32,
            }
        })
        .collect::<Vec<_>>();
    let centre = loop {
        let c = sample_train(&mut rng, room, config.agent_height);
        if sources.iter().all(|s| s.position.distance(c) > config.reach_radius) {
            break c;
        }
    };
    Ok(EnvState {
        agent: AgentPose { centre },
        sources,
        found: BTreeSet::new(),
        step_index: 0,
        rng,
    })
}

/// Applies one move and the reward rule to `state`.
pub fn apply_action(config: &EnvConfig, state: &mut EnvState, action: Action) -> Result<StepResult> {
    if state.all_found() || state.step_index >= config.horizon {
        return Err(Error::Usage("cannot step a terminal episode".into()));
    }
    if !config.actions().contains(&action) {
        return Err(Error::Usage(format!("action {action} is disabled")));
    }
    let candidate = state.agent.centre + action.direction() * config.step_size;
    let (reward, event) = if !config.room.contains(candidate) {
        (config.r_oob, StepEvent::OutOfBounds)
    } else {
        state.agent.centre = candidate;
        let newly_found = state
            .active_sources()
            .filter(|s| s.position.distance(candidate) <= config.reach_radius)
            .map(|s| s.id)
            .min();
        match newly_found {
            Some(id) => {
                state.found.insert(id);
                (config.r_plus, StepEvent::FoundNewSource(id))
            }
            None => (config.r_minus, StepEvent::None),
        }
    };
    state.step_index += 1;
    Ok(StepResult {
        reward,
        event,
        terminal: state.all_found() || state.step_index >= config.horizon,
    })
}

/// Every enabled in-bounds move that strictly reduces the distance to the
/// nearest unfound source. May be empty.
pub fn oracle_action_set(config: &EnvConfig, state: &EnvState) -> Result<Vec<Action>> {
    let (source, current) = state
        .nearest_unfound()
        .ok_or_else(|| Error::Usage("all sources already found".into()))?;
    let target = source.position;
    Ok(config
        .actions()
        .iter()
        .copied()
        .filter(|a| {
            let p = state.agent.centre + a.direction() * config.step_size;
            config.room.contains(p) && p.distance(target) < current
        })
        .collect())
}

/// Environment bound to an acoustic renderer and a signal bank.
#[derive(Debug, Clone)]
pub struct Env {
    config: EnvConfig,
    acoustics: AcousticParams,
    signals: Arc<SignalBank>,
}

impl Env {
    pub fn new(config: EnvConfig, acoustics: AcousticParams, signals: Arc<SignalBank>) -> Result<Self> {
        config.validate()?;
        acoustics.validate()?;
        if (config.f_s - acoustics.f_s).abs() > 0.0 {
            return Err(Error::Config(format!(
                "environment f_s {} differs from acoustics f_s {}",
                config.f_s, acoustics.f_s
            )));
        }
        Ok(Self {
            config,
            acoustics,
            signals,
        })
    }

    /// Builds an environment with the default pseudo-noise signal bank.
    pub fn with_default_signals(config: EnvConfig, acoustics: AcousticParams) -> Result<Self> {
        let bank = SignalBank::pseudo_noise(config.n_sources, config.clip_samples(), config.f_s);
        Self::new(config, acoustics, Arc::new(bank))
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn acoustics(&self) -> &AcousticParams {
        &self.acoustics
    }

    pub fn signals(&self) -> &SignalBank {
        &self.signals
    }

    pub fn reset(&self, mode: Mode, seed: u64) -> Result<(EnvState, Waveform)> {
        let state = initial_state(&self.config, mode, seed)?;
        let obs = self.observe(&state)?;
        Ok((state, obs))
    }

    pub fn step(&self, state: &mut EnvState, action: Action) -> Result<StepOutcome> {
        let t = apply_action(&self.config, state, action)?;
        Ok(StepOutcome {
            observation: self.observe(state)?,
            reward: t.reward,
            terminal: t.terminal,
            event: t.event,
        })
    }

    /// Renders what the microphones hear at the current pose. Found
    /// sources are silent.
    pub fn observe(&self, state: &EnvState) -> Result<Waveform> {
        let active: Vec<&SourceSpec> = state.active_sources().collect();
        self.observe_at(&state.agent, &active)
    }

    pub fn observe_at(&self, agent: &AgentPose, sources: &[&SourceSpec]) -> Result<Waveform> {
        render_observation(
            &self.config.room,
            sources,
            agent,
            &self.config.mics,
            &self.signals,
            &self.acoustics,
            self.config.clip_seconds,
        )
    }

    pub fn oracle_action_set(&self, state: &EnvState) -> Result<Vec<Action>> {
        oracle_action_set(&self.config, state)
    }
}
