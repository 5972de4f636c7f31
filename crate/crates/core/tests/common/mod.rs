//! Test-side oracles shared by the integration tests and the acceptance
//! harness. Each one is written from the rule it checks, not from the
//! library code it is compared against.

#![allow(dead_code)]

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::sync::Arc;

use echolocate::acoustics::{enumerate_image_sources, render_rir, AcousticParams};
use echolocate::env::{apply_action, Action, AgentPose, EnvConfig, EnvState, RoomSpec, SourceSpec, StepEvent};
use echolocate::features::FeatureMap;
use echolocate::geometry::Vec3;
use echolocate::qnet::{init_params, loss_and_grads, HistoryWindow, InputNorm, NetArchitecture, ParamStore, Variant};
use echolocate::replay::{EpisodeRecord, ReplayBuffer, Transition};
use echolocate::seed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---- networks -------------------------------------------------------------

pub fn tiny(variant: Variant) -> NetArchitecture {
    NetArchitecture {
        variant,
        input_norm: InputNorm::Standardize,
        input_channels: 2,
        conv_channels: vec![3, 4],
        embed_dim: 6,
        n_actions: 4,
        history_len: 3,
        attn_heads: 2,
        action_embed_dim: 2,
    }
}

pub fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Arc<FeatureMap> {
    let data = (0..c * h * w).map(|_| rng.gen_range(-10.0f32..0.0)).collect();
    Arc::new(FeatureMap::new(c, h, w, data).unwrap())
}

/// Random weights with non-zero biases so every code path carries signal.
pub fn random_params(arch: &NetArchitecture, seed: u64) -> ParamStore<f64> {
    let mut p = init_params::<f64>(arch, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
    for t in p.tensors_mut() {
        if t.name.ends_with(".bias") {
            for v in &mut t.data {
                *v = rng.gen_range(-0.3..0.3);
            }
        }
    }
    p
}

pub fn window(rng: &mut ChaCha8Rng, arch: &NetArchitecture, past: usize) -> HistoryWindow {
    let mut w = HistoryWindow::start(random_map(rng, 2, 8, 12), arch.window_len());
    for _ in 0..past {
        let a = Action::from_index(rng.gen_range(0..arch.n_actions)).unwrap();
        w = w.advance(a, random_map(rng, 2, 8, 12));
    }
    w
}

pub fn transition(rng: &mut ChaCha8Rng, arch: &NetArchitecture, terminal: bool) -> Transition {
    let past = rng.gen_range(0..=arch.window_len());
    let state = window(rng, arch, past);
    let action = Action::from_index(rng.gen_range(0..arch.n_actions)).unwrap();
    let next_state = state.advance(action, random_map(rng, 2, 8, 12));
    Transition {
        state,
        action,
        reward: rng.gen_range(-1.0..1.0),
        next_state,
        terminal,
        episode_id: 0,
    }
}

/// Largest relative error between analytic gradients and central finite
/// differences with step `h`, over every parameter of a tiny network and a
/// batch of two transitions (one terminal).
pub fn max_gradient_error(variant: Variant, h: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let arch = tiny(variant);
    let params = random_params(&arch, 21);
    let target = random_params(&arch, 22);
    let batch = [transition(&mut rng, &arch, false), transition(&mut rng, &arch, true)];
    let refs: Vec<&Transition> = batch.iter().collect();
    let (_, grads) = loss_and_grads(&arch, &params, &target, &refs, 0.9).unwrap();
    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for ti in 0..params.tensors().len() {
        for k in 0..params.tensors()[ti].data.len() {
            let orig = params.tensors()[ti].data[k];
            probe.tensors_mut()[ti].data[k] = orig + h;
            let (up, _) = loss_and_grads(&arch, &probe, &target, &refs, 0.9).unwrap();
            probe.tensors_mut()[ti].data[k] = orig - h;
            let (down, _) = loss_and_grads(&arch, &probe, &target, &refs, 0.9).unwrap();
            probe.tensors_mut()[ti].data[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.tensors()[ti].data[k];
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}

// ---- acoustics ------------------------------------------------------------

fn random_inside(rng: &mut ChaCha8Rng, room: &RoomSpec, margin: f64) -> Vec3 {
    let [lx, ly, lz] = room.dims;
    Vec3::new(
        rng.gen_range(margin..lx - margin),
        rng.gen_range(margin..ly - margin),
        rng.gen_range(margin..lz - margin),
    )
}

fn random_room(rng: &mut ChaCha8Rng) -> RoomSpec {
    RoomSpec {
        dims: [
            rng.gen_range(3.0..15.0),
            rng.gen_range(3.0..15.0),
            rng.gen_range(2.5..6.0),
        ],
        wall_absorption: [0.0; 6].map(|_| rng.gen_range(0.05..0.95)),
    }
}

/// Energy centroid `sum(t h^2) / sum(h^2)` of a tap cluster, in samples.
pub fn energy_centroid(rir: &echolocate::acoustics::ImpulseResponse) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, h) in rir.taps.iter().enumerate() {
        let t = i as f64 - rir.lead as f64;
        num += t * h * h;
        den += h * h;
    }
    num / den
}

/// Worst distance, in samples, between the energy centroid of the direct
/// path cluster and `round(d f_s / c)` over `n` random geometries.
pub fn delay_law_worst(n: usize, seed_value: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed_value);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let room = random_room(&mut rng);
        let src = random_inside(&mut rng, &room, 0.1);
        let mic = loop {
            let m = random_inside(&mut rng, &room, 0.1);
            if m.distance(src) > 0.3 {
                break m;
            }
        };
        let params = AcousticParams {
            max_order: rng.gen_range(0..4),
            ..AcousticParams::default()
        };
        let images = enumerate_image_sources(&room, src, params.max_order).unwrap();
        let direct: Vec<_> = images.iter().filter(|i| i.order == 0).copied().collect();
        assert_eq!(direct.len(), 1);
        assert_eq!(direct[0].position, src);
        let rir = render_rir(&direct, mic, &params).unwrap();
        let expected = (src.distance(mic) * params.f_s / params.c).round();
        worst = worst.max((energy_centroid(&rir) - expected).abs());
    }
    worst
}

fn sinc(t: f64) -> f64 {
    if t.abs() < 1e-12 {
        1.0
    } else {
        (PI * t).sin() / (PI * t)
    }
}

/// Height of the band-limited pulse the taps sample: the maximum of their
/// sinc reconstruction, searched on a 1/100-sample grid around `centre`.
pub fn reconstructed_peak(rir: &echolocate::acoustics::ImpulseResponse, centre: f64) -> f64 {
    let mut best: f64 = 0.0;
    for k in -200..=200 {
        let t = centre + k as f64 / 100.0;
        let v: f64 = rir
            .taps
            .iter()
            .enumerate()
            .map(|(i, h)| h * sinc(t - (i as f64 - rir.lead as f64)))
            .sum();
        best = best.max(v.abs());
    }
    best
}

/// Worst relative deviation from 2 of the anechoic peak ratio between a
/// microphone at distance d and one at 2d, over `n` random geometries.
pub fn amplitude_law_worst(n: usize, seed_value: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed_value);
    let room = RoomSpec {
        dims: [30.0, 30.0, 12.0],
        wall_absorption: [0.3; 6],
    };
    let params = AcousticParams::default();
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let src = Vec3::new(
            rng.gen_range(10.0..20.0),
            rng.gen_range(10.0..20.0),
            rng.gen_range(4.0..8.0),
        );
        let d = rng.gen_range(0.5..3.0);
        let theta = rng.gen_range(0.0..2.0 * PI);
        let phi = rng.gen_range(-0.5..0.5f64);
        let u = Vec3::new(theta.cos() * phi.cos(), theta.sin() * phi.cos(), phi.sin());
        let images = enumerate_image_sources(&room, src, 0).unwrap();
        let near = render_rir(&images, src + u * d, &params).unwrap();
        let far = render_rir(&images, src + u * (2.0 * d), &params).unwrap();
        let samples = |dist: f64| dist * params.f_s / params.c;
        let ratio = reconstructed_peak(&near, samples(d)) / reconstructed_peak(&far, samples(2.0 * d));
        worst = worst.max((ratio / 2.0 - 1.0).abs());
    }
    worst
}

// ---- reward rule ----------------------------------------------------------

/// The reward rule written out from its statement: leaving the room costs
/// `r_oob` and the agent stays; entering the reach of a not-yet-found
/// source pays `r_plus` once; anything else costs `r_minus`.
pub fn reference_reward(cfg: &EnvConfig, agent: Vec3, sources: &[Vec3], found: &[bool], action: Action) -> (f64, Vec3) {
    let step = match action {
        Action::PosX => [cfg.step_size, 0.0, 0.0],
        Action::NegX => [-cfg.step_size, 0.0, 0.0],
        Action::PosY => [0.0, cfg.step_size, 0.0],
        Action::NegY => [0.0, -cfg.step_size, 0.0],
        Action::PosZ => [0.0, 0.0, cfg.step_size],
        Action::NegZ => [0.0, 0.0, -cfg.step_size],
    };
    let next = [agent.x + step[0], agent.y + step[1], agent.z + step[2]];
    let inside = (0..3).all(|k| next[k] >= 0.0 && next[k] <= cfg.room.dims[k]);
    if !inside {
        return (cfg.r_oob, agent);
    }
    let next = Vec3::new(next[0], next[1], next[2]);
    let hit = sources.iter().zip(found).any(|(s, f)| {
        let d2 = (s.x - next.x).powi(2) + (s.y - next.y).powi(2) + (s.z - next.z).powi(2);
        !f && d2.sqrt() <= cfg.reach_radius
    });
    (if hit { cfg.r_plus } else { cfg.r_minus }, next)
}

fn state_with(agent: Vec3, sources: &[Vec3], found: &[bool]) -> EnvState {
    EnvState {
        agent: AgentPose { centre: agent },
        sources: sources
            .iter()
            .enumerate()
            .map(|(i, &p)| SourceSpec {
                id: i as u32,
                position: p,
                signal_id: i as u32,
            })
            .collect(),
        found: found
            .iter()
            .enumerate()
            .filter(|(_, f)| **f)
            .map(|(i, _)| i as u32)
            .collect::<BTreeSet<_>>(),
        step_index: 0,
        rng: seed::rng(0),
    }
}

/// Steps every planar action from every point of a 0.5 m grid, with the
/// source unfound and with it already found next to an unfound second
/// source, and compares reward and pose with [`reference_reward`].
/// Returns (checks, mismatches).
pub fn reward_grid_check() -> (usize, Vec<String>) {
    let cfg = EnvConfig::default();
    let source = Vec3::new(7.3, 2.2, cfg.source_height);
    let far = Vec3::new(1.1, 8.7, cfg.source_height);
    let scenarios: [(&[Vec3], &[bool]); 2] = [(&[source], &[false]), (&[source, far], &[true, false])];
    let mut checks = 0;
    let mut bad = Vec::new();
    let [lx, ly, _] = cfg.room.dims;
    for (sources, found) in scenarios {
        for i in 0..=((lx / 0.5) as usize) {
            for j in 0..=((ly / 0.5) as usize) {
                let agent = Vec3::new(i as f64 * 0.5, j as f64 * 0.5, cfg.agent_height);
                for &action in &Action::PLANAR {
                    let mut state = state_with(agent, sources, found);
                    let got = apply_action(&cfg, &mut state, action).unwrap();
                    let (want, pose) = reference_reward(&cfg, agent, sources, found, action);
                    checks += 1;
                    let event_ok = match got.event {
                        StepEvent::OutOfBounds => want == cfg.r_oob,
                        StepEvent::FoundNewSource(_) => want == cfg.r_plus,
                        StepEvent::None => want == cfg.r_minus,
                    };
                    if got.reward != want || state.agent.centre != pose || !event_ok {
                        bad.push(format!(
                            "agent {agent:?} {action}: got {} at {:?}, want {want} at {pose:?}",
                            got.reward, state.agent.centre
                        ));
                    }
                }
            }
        }
    }
    (checks, bad)
}

// ---- replay ---------------------------------------------------------------

pub fn synthetic_episode(id: u64, len: usize, success: bool) -> EpisodeRecord {
    let fm = Arc::new(FeatureMap::zeros(1, 1, 1));
    let w = HistoryWindow::start(fm, 0);
    EpisodeRecord {
        id,
        transitions: (0..len)
            .map(|k| Transition {
                state: w.clone(),
                action: Action::PLANAR[(id as usize + k) % 4],
                reward: id as f64 * 1000.0 + k as f64,
                next_state: w.clone(),
                terminal: k + 1 == len,
                episode_id: id,
            })
            .collect(),
        success,
        recipe: None,
    }
}

/// Byte serialisation of buffer contents: per transition its episode id,
/// action, reward bits and terminal flag, plus each episode's success flag.
pub fn contents_bytes<'a>(episodes: impl Iterator<Item = &'a EpisodeRecord>) -> Vec<u8> {
    let mut out = Vec::new();
    for e in episodes {
        out.extend_from_slice(&e.id.to_le_bytes());
        out.push(u8::from(e.success));
        for t in &e.transitions {
            out.extend_from_slice(&t.episode_id.to_le_bytes());
            out.push(t.action.index() as u8);
            out.extend_from_slice(&t.reward.to_bits().to_le_bytes());
            out.push(u8::from(t.terminal));
        }
    }
    out
}

/// Brute-force model of the two-phase eviction rule: after appending, drop
/// unsuccessful episodes oldest first while over capacity, then
/// successful ones oldest first.
pub fn brute_force_replay(capacity: usize, pushes: &[(u64, usize, bool)]) -> Vec<EpisodeRecord> {
    let mut held: Vec<EpisodeRecord> = Vec::new();
    for &(id, len, success) in pushes {
        held.push(synthetic_episode(id, len, success));
        for phase_success in [false, true] {
            let mut k = 0;
            while k < held.len() {
                let total: usize = held.iter().map(|e| e.transitions.len()).sum();
                if total <= capacity {
                    break;
                }
                if held[k].success == phase_success {
                    held.remove(k);
                } else {
                    k += 1;
                }
            }
        }
    }
    held
}

/// Runs `sequences` random push sequences through [`ReplayBuffer`] and the
/// brute-force model; returns the number whose final contents differ.
pub fn replay_eviction_mismatches(sequences: usize, seed_value: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed_value);
    let mut mismatches = 0;
    for _ in 0..sequences {
        let capacity = rng.gen_range(1..60);
        let n = rng.gen_range(1..40);
        let pushes: Vec<(u64, usize, bool)> = (0..n)
            .map(|i| (i as u64, rng.gen_range(1..=capacity), rng.gen_bool(0.4)))
            .collect();
        let mut buf = ReplayBuffer::new(capacity).unwrap();
        for &(id, len, success) in &pushes {
            buf.push_episode(synthetic_episode(id, len, success)).unwrap();
        }
        let want = brute_force_replay(capacity, &pushes);
        if contents_bytes(buf.episodes()) != contents_bytes(want.iter()) {
            mismatches += 1;
        }
    }
    mismatches
}

// ---- small end-to-end configuration ---------------------------------------

/// A run small enough for unit-speed training: 0.1 s clips, 16 mel bands,
/// a two-block encoder and a handful of episodes per epoch.
pub fn tiny_manifest(variant: Variant) -> echolocate::manifest::RunManifest {
    let mut m = echolocate::manifest::RunManifest::default();
    m.env.clip_seconds = 0.1;
    m.env.horizon = 10;
    m.features.n_mels = 16;
    m.arch = NetArchitecture {
        variant,
        conv_channels: vec![4, 4],
        embed_dim: 8,
        history_len: 2,
        attn_heads: 2,
        action_embed_dim: 2,
        ..NetArchitecture::default()
    };
    m.train.epochs = 4;
    m.train.episodes_per_epoch = 4;
    m.train.updates_per_epoch = 20;
    m.train.batch = 8;
    m.train.target_update_period = 5;
    m.train.target_delay = 3;
    m.train.replay_capacity = 100;
    m.train.lr = 1e-3;
    m.eval.n_trials = 20;
    m.eval.max_steps = 10;
    m.validate().unwrap();
    m
}

// ---- stub policies --------------------------------------------------------

/// Scores the distance-reducing moves 1 and the rest 0, so its argmax is
/// the first oracle action whenever one exists.
pub struct OracleStub(pub EnvConfig);

impl echolocate::simulator::QFunction for OracleStub {
    type Memo = ();

    fn n_actions(&self) -> usize {
        self.0.n_actions()
    }

    fn history_len(&self) -> usize {
        0
    }

    fn q_values(
        &self,
        _: &mut (),
        _: &HistoryWindow,
        state: &EnvState,
    ) -> echolocate::Result<echolocate::qnet::ActionValues> {
        let set = echolocate::env::oracle_action_set(&self.0, state)?;
        Ok(echolocate::qnet::ActionValues(
            self.0
                .actions()
                .iter()
                .map(|a| if set.contains(a) { 1.0 } else { 0.0 })
                .collect(),
        ))
    }
}

/// Uniformly random scores keyed on the agent and source positions, so
/// every placement gets an independent uniform action.
pub struct RandomStub(pub usize);

impl echolocate::simulator::QFunction for RandomStub {
    type Memo = ();

    fn n_actions(&self) -> usize {
        self.0
    }

    fn history_len(&self) -> usize {
        0
    }

    fn q_values(
        &self,
        _: &mut (),
        _: &HistoryWindow,
        state: &EnvState,
    ) -> echolocate::Result<echolocate::qnet::ActionValues> {
        let mut labels: Vec<u64> = state.agent.centre.bits().to_vec();
        labels.extend(state.sources[0].position.bits());
        labels.push(state.step_index as u64);
        let mut rng = seed::derived_rng(0x5eed, &labels);
        Ok(echolocate::qnet::ActionValues(
            (0..self.0).map(|_| rng.gen::<f64>()).collect(),
        ))
    }
}
