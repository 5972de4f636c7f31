//! Evaluation metrics and policy-field export.
//!
//! Every trial places the source in the held-out quadrant and the agent in
//! the training quadrants. Accuracy scores the greedy action taken from the
//! initial observation; reachability and reward come from one greedy
//! rollout of the same trial.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{
    apply_action, initial_state, oracle_action_set, Action, AgentPose, EnvConfig, EnvState, Mode, SourceSpec, StepEvent,
};
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::qnet::HistoryWindow;
use crate::seed::{self, purpose};
use crate::simulator::{QFunction, Simulator};

/// Sign convention of the distance-shaping term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SoftSign {
    /// `scale * (d_prev - d_next)`: getting closer is rewarded.
    Prose,
    /// `scale * (d_next - d_prev)`.
    Printed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_trials: usize,
    pub max_steps: usize,
    pub soft_reward_scale: f64,
    pub soft_sign: SoftSign,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_trials: 1000,
            max_steps: 50,
            soft_reward_scale: 0.1,
            soft_sign: SoftSign::Prose,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trials == 0 {
            return Err(Error::Config("eval.n_trials must be at least 1".into()));
        }
        Ok(())
    }

    pub fn soft_reward(&self, d_prev: f64, d_next: f64) -> f64 {
        match self.soft_sign {
            SoftSign::Prose => self.soft_reward_scale * (d_prev - d_next),
            SoftSign::Printed => self.soft_reward_scale * (d_next - d_prev),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub start: Vec3,
    pub source: Vec3,
    pub greedy_action: Action,
    pub oracle_actions: Vec<Action>,
    pub correct: bool,
    pub reached: bool,
    pub steps: usize,
    pub oob_events: usize,
    pub total_reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_trials: usize,
    pub max_steps: usize,
    pub accuracy: f64,
    pub reachability: f64,
    pub avg_total_reward: f64,
    pub trials: Vec<TrialRecord>,
}

impl MetricsReport {
    /// The three headline numbers as indented text.
    pub fn summary(&self) -> String {
        format!(
            "trials        {}\nmax_steps     {}\naccuracy      {:.4}\nreachability  {:.4}\navg_reward    {:.4}\n",
            self.n_trials, self.max_steps, self.accuracy, self.reachability, self.avg_total_reward
        )
    }
}

fn eval_env_config(sim: &Simulator, max_steps: usize) -> EnvConfig {
    EnvConfig {
        horizon: max_steps.max(1),
        ..sim.env().config().clone()
    }
}

fn pose_key(state: &EnvState) -> ([u64; 3], BTreeSet<u32>) {
    (state.agent.centre.bits(), state.found.clone())
}

/// Greedy rollout shared by trials and the policy-field trajectory.
struct Rollout {
    first_action: Action,
    positions: Vec<Vec3>,
    actions: Vec<Action>,
    reached: bool,
    oob_events: usize,
    total_reward: f64,
}

fn greedy_rollout<Q: QFunction>(sim: &Simulator, q: &Q, cfg: &EvalConfig, mut state: EnvState) -> Result<Rollout> {
    let env_cfg = eval_env_config(sim, cfg.max_steps);
    let actions = env_cfg.actions();
    let h = q.history_len();
    let mut memo = Q::Memo::default();
    // Greedy memoryless policies act on the pose alone, so decisions can
    // be reused whenever a pose repeats.
    let mut decided: HashMap<([u64; 3], BTreeSet<u32>), Action> = HashMap::new();
    let mut window = HistoryWindow::start(sim.observe(&state)?, h);
    let mut fresh = true;
    let mut choose = |state: &EnvState, window: &mut HistoryWindow, fresh: &mut bool| -> Result<Action> {
        let key = (h == 0).then(|| pose_key(state));
        if let Some(a) = key.as_ref().and_then(|k| decided.get(k)) {
            return Ok(*a);
        }
        if !*fresh {
            window.current = sim.observe(state)?;
            *fresh = true;
        }
        let a = actions[q.q_values(&mut memo, window, state)?.argmax()];
        if let Some(k) = key {
            decided.insert(k, a);
        }
        Ok(a)
    };
    let first_action = choose(&state, &mut window, &mut fresh)?;
    let mut out = Rollout {
        first_action,
        positions: vec![state.agent.centre],
        actions: Vec::new(),
        reached: false,
        oob_events: 0,
        total_reward: 0.0,
    };
    let mut next = Some(first_action);
    for _ in 0..cfg.max_steps {
        let action = match next.take() {
            Some(a) => a,
            None => choose(&state, &mut window, &mut fresh)?,
        };
        let (target, d_prev) = state
            .nearest_unfound()
            .map(|(s, d)| (s.position, d))
            .ok_or_else(|| Error::Usage("rollout past the last source".into()))?;
        let r = apply_action(&env_cfg, &mut state, action)?;
        let d_next = target.distance(state.agent.centre);
        out.total_reward += cfg.soft_reward(d_prev, d_next);
        match r.event {
            StepEvent::FoundNewSource(_) => out.total_reward += env_cfg.r_plus,
            StepEvent::OutOfBounds => {
                out.total_reward += env_cfg.r_oob;
                out.oob_events += 1;
            }
            StepEvent::None => {}
        }
        out.positions.push(state.agent.centre);
        out.actions.push(action);
        if r.terminal {
            break;
        }
        if h > 0 {
            window = window.advance(action, sim.observe(&state)?);
        } else {
            fresh = false;
        }
    }
    out.reached = state.all_found() && out.oob_events == 0;
    Ok(out)
}

fn run_trial<Q: QFunction>(sim: &Simulator, q: &Q, cfg: &EvalConfig, trial: usize) -> Result<TrialRecord> {
    let env_cfg = eval_env_config(sim, cfg.max_steps);
    let state = initial_state(
        &env_cfg,
        Mode::Eval,
        seed::derive(cfg.seed, &[purpose::EVAL, trial as u64]),
    )?;
    let oracle = oracle_action_set(&env_cfg, &state)?;
    let start = state.agent.centre;
    let source = state.sources[0].position;
    let roll = greedy_rollout(sim, q, cfg, state)?;
    Ok(TrialRecord {
        trial,
        start,
        source,
        greedy_action: roll.first_action,
        correct: oracle.contains(&roll.first_action),
        oracle_actions: oracle,
        reached: roll.reached,
        steps: roll.actions.len(),
        oob_events: roll.oob_events,
        total_reward: roll.total_reward,
    })
}

/// Runs all trials (on `threads` workers when > 1) and aggregates.
pub fn evaluate<Q: QFunction>(sim: &Simulator, q: &Q, cfg: &EvalConfig, threads: usize) -> Result<MetricsReport> {
    cfg.validate()?;
    if q.n_actions() != sim.env().config().n_actions() {
        return Err(Error::Config(format!(
            "policy scores {} actions, environment offers {}",
            q.n_actions(),
            sim.env().config().n_actions()
        )));
    }
    let one = |t: usize| run_trial(sim, q, cfg, t);
    let trials: Vec<TrialRecord> = if threads > 1 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(|| (0..cfg.n_trials).into_par_iter().map(one).collect::<Result<_>>())?
    } else {
        (0..cfg.n_trials).map(one).collect::<Result<_>>()?
    };
    let n = trials.len() as f64;
    let frac = |f: fn(&TrialRecord) -> bool| trials.iter().filter(|t| f(t)).count() as f64 / n;
    Ok(MetricsReport {
        n_trials: trials.len(),
        max_steps: cfg.max_steps,
        accuracy: frac(|t| t.correct),
        reachability: frac(|t| t.reached),
        avg_total_reward: trials.iter().map(|t| t.total_reward).sum::<f64>() / n,
        trials,
    })
}

pub fn accuracy<Q: QFunction>(sim: &Simulator, q: &Q, cfg: &EvalConfig) -> Result<f64> {
    Ok(evaluate(sim, q, cfg, 1)?.accuracy)
}

pub fn reachability<Q: QFunction>(sim: &Simulator, q: &Q, cfg: &EvalConfig) -> Result<f64> {
    Ok(evaluate(sim, q, cfg, 1)?.reachability)
}

pub fn avg_total_reward<Q: QFunction>(sim: &Simulator, q: &Q, cfg: &EvalConfig) -> Result<f64> {
    Ok(evaluate(sim, q, cfg, 1)?.avg_total_reward)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldCell {
    pub x: f64,
    pub y: f64,
    pub action: Action,
    pub dx: f64,
    pub dy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub source: Vec3,
    pub positions: Vec<Vec3>,
    pub actions: Vec<Action>,
    pub reached: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyField {
    pub grid_step: f64,
    pub nx: usize,
    pub ny: usize,
    pub source: Vec3,
    pub cells: Vec<FieldCell>,
    pub trajectory: Trajectory,
}

impl PolicyField {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y,action,dx,dy\n");
        for c in &self.cells {
            let _ = writeln!(out, "{},{},{},{},{}", c.x, c.y, c.action, c.dx, c.dy);
        }
        out
    }
}

/// Greedy action at every cell centre of a `grid_step` lattice over the
/// floor plan, plus one greedy trajectory from `start`.
pub fn policy_field<Q: QFunction>(
    sim: &Simulator,
    q: &Q,
    grid_step: f64,
    source: Vec3,
    start: Vec3,
    max_steps: usize,
) -> Result<PolicyField> {
    let env_cfg = sim.env().config();
    if !(grid_step > 0.0) {
        return Err(Error::Domain(format!("grid_step must be positive, got {grid_step}")));
    }
    if !env_cfg.room.strictly_contains(source) || !env_cfg.room.contains(start) {
        return Err(Error::Domain("source and start must lie inside the room".into()));
    }
    let [lx, ly, _] = env_cfg.room.dims;
    let cells_along = |l: f64| (l / grid_step + 1e-9).floor() as usize;
    let (nx, ny) = (cells_along(lx), cells_along(ly));
    if nx == 0 || ny == 0 {
        return Err(Error::Domain(format!("grid_step {grid_step} exceeds the room")));
    }
    let spec = SourceSpec {
        id: 0,
        position: source,
        signal_id: 0,
    };
    let state_at = |centre: Vec3| EnvState {
        agent: AgentPose { centre },
        sources: vec![spec.clone()],
        found: BTreeSet::new(),
        step_index: 0,
        rng: seed::rng(0),
    };
    let actions = env_cfg.actions();
    let mut cells = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let centre = Vec3::new(
                (i as f64 + 0.5) * grid_step,
                (j as f64 + 0.5) * grid_step,
                env_cfg.agent_height,
            );
            let state = state_at(centre);
            let window = HistoryWindow::start(sim.observe(&state)?, q.history_len());
            let action = actions[q.q_values(&mut Q::Memo::default(), &window, &state)?.argmax()];
            let d = action.direction() * env_cfg.step_size;
            cells.push(FieldCell {
                x: centre.x,
                y: centre.y,
                action,
                dx: d.x,
                dy: d.y,
            });
        }
    }
    let cfg = EvalConfig {
        max_steps,
        ..EvalConfig::default()
    };
    let mut trajectory = Trajectory {
        source,
        positions: vec![start],
        actions: Vec::new(),
        reached: false,
    };
    if max_steps > 0 && source.distance(start) > env_cfg.reach_radius {
        let roll = greedy_rollout(sim, q, &cfg, state_at(start))?;
        trajectory.positions = roll.positions;
        trajectory.actions = roll.actions;
        trajectory.reached = roll.reached;
    }
    Ok(PolicyField {
        grid_step,
        nx,
        ny,
        source,
        cells,
        trajectory,
    })
}
