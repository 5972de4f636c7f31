mod common;

use std::sync::Arc;

use echolocate::env::Action;
use echolocate::features::FeatureMap;
use echolocate::qnet::{
    adam_step, forward_memoryless, forward_memoryless_batch, forward_stateful, forward_stateful_traced, hard_update,
    init_params, loss_and_grads, q_values, soft_update, td_target, AdamConfig, EmbeddingCache, HistoryWindow,
    InputNorm, NetArchitecture, OptState, ParamStore, PastEntry, SnapshotQueue, Variant,
};
use echolocate::replay::Transition;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{max_gradient_error, random_map, random_params, tiny, transition, window};

// Test-side oracle: plain nested loops, no im2col, no batching.
mod oracle {
    use super::*;

    fn conv_relu(x: &[f64], cin: usize, h: usize, w: usize, wt: &[f64], b: &[f64], cout: usize) -> Vec<f64> {
        let mut y = vec![0.0; cout * h * w];
        for o in 0..cout {
            for r in 0..h {
                for c in 0..w {
                    let mut s = b[o];
                    for i in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (rr, cc) = (r as isize + ky as isize - 1, c as isize + kx as isize - 1);
                                if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                                    continue;
                                }
                                s += wt[((o * cin + i) * 3 + ky) * 3 + kx] * x[(i * h + rr as usize) * w + cc as usize];
                            }
                        }
                    }
                    y[(o * h + r) * w + c] = s.max(0.0);
                }
            }
        }
        y
    }

    fn pool(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
        let (oh, ow) = (h / 2, w / 2);
        let mut y = vec![0.0; c * oh * ow];
        for k in 0..c {
            for r in 0..oh {
                for q in 0..ow {
                    let at = |a: usize, b: usize| x[(k * h + a) * w + b];
                    y[(k * oh + r) * ow + q] =
                        (at(2 * r, 2 * q) + at(2 * r, 2 * q + 1) + at(2 * r + 1, 2 * q) + at(2 * r + 1, 2 * q + 1))
                            / 4.0;
                }
            }
        }
        y
    }

    pub fn linear(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        b.iter()
            .enumerate()
            .map(|(o, bo)| bo + x.iter().enumerate().map(|(i, xi)| w[o * x.len() + i] * xi).sum::<f64>())
            .collect()
    }

    pub fn embed(arch: &NetArchitecture, p: &ParamStore<f64>, fm: &FeatureMap) -> Vec<f64> {
        let [mut c, mut h, mut w] = fm.shape();
        let mut x: Vec<f64> = fm.data().iter().map(|v| f64::from(*v)).collect();
        if arch.input_norm == InputNorm::Standardize {
            let n = x.len() as f64;
            let mean = x.iter().sum::<f64>() / n;
            let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            for v in &mut x {
                *v = (*v - mean) / (sd + 1e-6);
            }
        }
        for (i, &cout) in arch.conv_channels.iter().enumerate() {
            let y = conv_relu(
                &x,
                c,
                h,
                w,
                p.get(&format!("conv{i}.weight")).unwrap(),
                p.get(&format!("conv{i}.bias")).unwrap(),
                cout,
            );
            x = pool(&y, cout, h, w);
            c = cout;
            h /= 2;
            w /= 2;
        }
        let gap: Vec<f64> = (0..c)
            .map(|k| x[k * h * w..(k + 1) * h * w].iter().sum::<f64>() / (h * w) as f64)
            .collect();
        linear(&gap, p.get("embed.weight").unwrap(), p.get("embed.bias").unwrap())
            .into_iter()
            .map(|v| v.max(0.0))
            .collect()
    }

    pub fn q(arch: &NetArchitecture, p: &ParamStore<f64>, win: &HistoryWindow) -> Vec<f64> {
        let head = |x: &[f64]| linear(x, p.get("head.weight").unwrap(), p.get("head.bias").unwrap());
        if arch.variant == Variant::Memoryless {
            return head(&embed(arch, p, &win.current));
        }
        let table = p.get("action_embed.weight").unwrap();
        let a = arch.action_embed_dim;
        let mut tokens: Vec<Vec<f64>> = Vec::new();
        let mut push = |fm: &FeatureMap, action: usize| {
            let mut t = embed(arch, p, fm);
            t.extend_from_slice(&table[action * a..(action + 1) * a]);
            tokens.push(t);
        };
        for e in win.valid_past() {
            push(&e.state, e.action.index());
        }
        push(&win.current, arch.n_actions);
        let proj = |n: &str, x: &[f64]| {
            linear(
                x,
                p.get(&format!("attn.{n}.weight")).unwrap(),
                p.get(&format!("attn.{n}.bias")).unwrap(),
            )
        };
        let q: Vec<_> = tokens.iter().map(|t| proj("query", t)).collect();
        let k: Vec<_> = tokens.iter().map(|t| proj("key", t)).collect();
        let v: Vec<_> = tokens.iter().map(|t| proj("value", t)).collect();
        let (e, heads) = (arch.embed_dim, arch.attn_heads);
        let dh = e / heads;
        let n = tokens.len();
        let mut pooled = vec![0.0; e];
        for i in 0..n {
            let mut ctx = vec![0.0; e];
            for hd in 0..heads {
                let r = hd * dh..(hd + 1) * dh;
                let s: Vec<f64> = (0..n)
                    .map(|j| r.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let z: f64 = s.iter().map(|x| x.exp()).sum();
                for j in 0..n {
                    for c in r.clone() {
                        ctx[c] += s[j].exp() / z * v[j][c];
                    }
                }
            }
            let o = proj("out", &ctx);
            for c in 0..e {
                pooled[c] += o[c] / n as f64;
            }
        }
        head(&pooled)
    }
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{x} vs {y}");
    }
}

#[test]
fn forward_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for variant in [Variant::Memoryless, Variant::Stateful] {
        let arch = tiny(variant);
        let p = random_params(&arch, 3);
        for past in 0..=arch.window_len() {
            let w = window(&mut rng, &arch, past);
            let got = q_values(&arch, &p, &w).unwrap();
            assert_close(got.values(), &oracle::q(&arch, &p, &w), 1e-10);
        }
    }
}

#[test]
fn zero_input_zero_bias_gives_zero_output() {
    let arch = NetArchitecture::default();
    let p = init_params::<f32>(&arch, 9).unwrap();
    let q = forward_memoryless(&arch, &p, &FeatureMap::zeros(2, 64, 30)).unwrap();
    assert_eq!(q.values(), &[0.0; 4]);
}

#[test]
fn outputs_finite_on_feature_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let arch = NetArchitecture::default();
    let p = init_params::<f32>(&arch, 2).unwrap();
    let fm = random_map(&mut rng, 2, 64, 30);
    assert!(forward_memoryless(&arch, &p, &fm)
        .unwrap()
        .values()
        .iter()
        .all(|v| v.is_finite()));
}

#[test]
fn batch_of_one_matches_batch_of_eight() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let arch = NetArchitecture::default();
    let p = init_params::<f32>(&arch, 6).unwrap();
    let maps: Vec<_> = (0..8).map(|_| random_map(&mut rng, 2, 64, 30)).collect();
    let refs: Vec<&FeatureMap> = maps.iter().map(|m| m.as_ref()).collect();
    let batch = forward_memoryless_batch(&arch, &p, &refs).unwrap();
    for (m, row) in maps.iter().zip(&batch) {
        let single = forward_memoryless(&arch, &p, m).unwrap();
        assert_close(single.values(), row.values(), 1e-6);
    }
}

#[test]
fn shape_mismatch_is_reported() {
    let arch = NetArchitecture::default();
    let p = init_params::<f32>(&arch, 6).unwrap();
    assert!(forward_memoryless(&arch, &p, &FeatureMap::zeros(1, 64, 30)).is_err());
    assert!(forward_memoryless(&arch, &p, &FeatureMap::zeros(2, 4, 30)).is_err());
    let stateful = NetArchitecture::stateful();
    let ps = init_params::<f32>(&stateful, 6).unwrap();
    let short = HistoryWindow::start(Arc::new(FeatureMap::zeros(2, 64, 30)), 3);
    assert!(forward_stateful(&stateful, &ps, &short).is_err());
    assert!(forward_stateful(&arch, &p, &short).is_err());
}

#[test]
fn padding_position_is_irrelevant() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let arch = tiny(Variant::Stateful);
    let p = random_params(&arch, 1);
    let cur = random_map(&mut rng, 2, 8, 12);
    let past = PastEntry {
        state: random_map(&mut rng, 2, 8, 12),
        action: Action::NegY,
    };
    let a = HistoryWindow {
        current: Arc::clone(&cur),
        slots: vec![None, None, Some(past.clone())],
    };
    let b = HistoryWindow {
        current: Arc::clone(&cur),
        slots: vec![Some(past), None, None],
    };
    assert_eq!(
        forward_stateful(&arch, &p, &a).unwrap(),
        forward_stateful(&arch, &p, &b).unwrap()
    );

    // An empty history depends on the current state only.
    let empty = HistoryWindow::start(Arc::clone(&cur), 3);
    let again = HistoryWindow::start(Arc::new((*cur).clone()), 3);
    assert_eq!(
        forward_stateful(&arch, &p, &empty).unwrap(),
        forward_stateful(&arch, &p, &again).unwrap()
    );
}

#[test]
fn zero_history_is_attention_of_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let arch = NetArchitecture {
        history_len: 0,
        ..tiny(Variant::Stateful)
    };
    let p = random_params(&arch, 2);
    let w = window(&mut rng, &arch, 0);
    // A single token attends only to itself: out(value(token)) feeds the head.
    let mut token = oracle::embed(&arch, &p, &w.current);
    let table = p.get("action_embed.weight").unwrap();
    token.extend_from_slice(&table[arch.n_actions * 2..]);
    let v = oracle::linear(
        &token,
        p.get("attn.value.weight").unwrap(),
        p.get("attn.value.bias").unwrap(),
    );
    let o = oracle::linear(&v, p.get("attn.out.weight").unwrap(), p.get("attn.out.bias").unwrap());
    let want = oracle::linear(&o, p.get("head.weight").unwrap(), p.get("head.bias").unwrap());
    let (got, att) = forward_stateful_traced(&arch, &p, &w).unwrap();
    assert_close(got.values(), &want, 1e-10);
    assert!(att.iter().all(|h| h == &vec![vec![1.0]]));
}

#[test]
fn attention_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let arch = NetArchitecture::stateful();
    let p = init_params::<f32>(&arch, 4).unwrap();
    let mut w = HistoryWindow::start(random_map(&mut rng, 2, 64, 30), 7);
    for step in 0..9 {
        w = w.advance(Action::from_index(step % 4).unwrap(), random_map(&mut rng, 2, 64, 30));
        let (_, att) = forward_stateful_traced(&arch, &p, &w).unwrap();
        assert_eq!(att.len(), 8);
        let tokens = (step + 2).min(8);
        for head in &att {
            assert_eq!(head.len(), tokens);
            for row in head {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn embedding_cache_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let arch = NetArchitecture::stateful();
    let p = init_params::<f32>(&arch, 5).unwrap();
    let mut cache = EmbeddingCache::new();
    let mut w = HistoryWindow::start(random_map(&mut rng, 2, 64, 30), 7);
    for step in 0..10 {
        assert_eq!(cache.q_values(&arch, &p, &w).unwrap(), q_values(&arch, &p, &w).unwrap());
        w = w.advance(Action::from_index(step % 4).unwrap(), random_map(&mut rng, 2, 64, 30));
    }
}

#[test]
fn argmax_invariant_to_shared_head_bias_shift() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for variant in [Variant::Memoryless, Variant::Stateful] {
        let arch = tiny(variant);
        let mut p = random_params(&arch, 3);
        let w = window(&mut rng, &arch, arch.window_len());
        let before = q_values(&arch, &p, &w).unwrap();
        for b in p.get_mut("head.bias").unwrap() {
            *b += 3.25;
        }
        let after = q_values(&arch, &p, &w).unwrap();
        assert_eq!(before.argmax(), after.argmax());
    }
}

#[test]
fn td_target_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let arch = tiny(Variant::Memoryless);
    let mut target = random_params(&arch, 4);
    // Zero head weights make every next-state value equal the head bias.
    for w in target.get_mut("head.weight").unwrap() {
        *w = 0.0;
    }
    target
        .get_mut("head.bias")
        .unwrap()
        .copy_from_slice(&[0.5, 2.0, -1.0, 1.0]);
    let mut t = transition(&mut rng, &arch, false);
    t.reward = -0.1;
    assert!((td_target(&arch, &target, &t, 0.9).unwrap() - 1.7).abs() < 1e-12);
    assert_eq!(td_target(&arch, &target, &t, 0.0).unwrap(), -0.1);
    t.terminal = true;
    t.reward = 1.0;
    assert_eq!(td_target(&arch, &target, &t, 0.9).unwrap(), 1.0);
}

#[test]
fn memoryless_gradients_match_finite_differences() {
    let worst = max_gradient_error(Variant::Memoryless, 1e-5);
    assert!(worst < 1e-4, "max relative error {worst}");
}

#[test]
fn stateful_gradients_match_finite_differences() {
    let worst = max_gradient_error(Variant::Stateful, 1e-5);
    assert!(worst < 1e-4, "max relative error {worst}");
}

#[test]
fn duplicated_batch_leaves_loss_and_grads_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for variant in [Variant::Memoryless, Variant::Stateful] {
        let arch = tiny(variant);
        let params = random_params(&arch, 1);
        let target = random_params(&arch, 2);
        let batch: Vec<_> = (0..3).map(|i| transition(&mut rng, &arch, i == 1)).collect();
        let once: Vec<&Transition> = batch.iter().collect();
        let twice: Vec<&Transition> = batch.iter().chain(batch.iter()).collect();
        let (l1, g1) = loss_and_grads(&arch, &params, &target, &once, 0.9).unwrap();
        let (l2, g2) = loss_and_grads(&arch, &params, &target, &twice, 0.9).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        let a: Vec<f64> = g1.iter_values().copied().collect();
        let b: Vec<f64> = g2.iter_values().copied().collect();
        assert_close(&a, &b, 1e-12);
    }
}

#[test]
fn exact_prediction_gives_zero_loss_and_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let arch = tiny(Variant::Memoryless);
    let params = random_params(&arch, 1);
    let mut t = transition(&mut rng, &arch, true);
    t.reward = q_values(&arch, &params, &t.state).unwrap().values()[t.action.index()];
    let (loss, grads) = loss_and_grads(&arch, &params, &params, &[&t], 0.9).unwrap();
    assert_eq!(loss, 0.0);
    assert!(grads.iter_values().all(|g| *g == 0.0));
    assert!(loss_and_grads(&arch, &params, &params, &[], 0.9).is_err());
}

#[test]
fn adam_zero_grads_decay_moments_only() {
    let arch = tiny(Variant::Memoryless);
    let mut p = random_params(&arch, 1);
    let before = p.clone();
    let zeros = p.zeros_like();
    let mut opt = OptState::new(&p, AdamConfig::default());
    adam_step(&mut p, &zeros, &mut opt).unwrap();
    assert_eq!(p, before);
    assert_eq!(opt.step, 1);

    opt.m.iter_values_mut().for_each(|v| *v = 1.0);
    opt.v.iter_values_mut().for_each(|v| *v = 1.0);
    adam_step(&mut p, &zeros, &mut opt).unwrap();
    assert!(opt.m.iter_values().all(|v| (*v - 0.9).abs() < 1e-15));
    assert!(opt.v.iter_values().all(|v| (*v - 0.999).abs() < 1e-15));
}

#[test]
fn adam_first_step_moves_by_lr_against_gradient() {
    let arch = tiny(Variant::Memoryless);
    let mut p = random_params(&arch, 1);
    let before = p.clone();
    let mut g = p.zeros_like();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    g.iter_values_mut().for_each(|v| *v = rng.gen_range(-2.0..2.0));
    let mut opt = OptState::new(&p, AdamConfig::default());
    adam_step(&mut p, &g, &mut opt).unwrap();
    // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
    for ((after, orig), gv) in p.iter_values().zip(before.iter_values()).zip(g.iter_values()) {
        let want = orig - 1e-4 * gv / (gv.abs() + 1e-8);
        assert!((after - want).abs() < 1e-15);
    }
    let mut q = before.clone();
    let mut opt2 = OptState::new(&q, AdamConfig::default());
    adam_step(&mut q, &g, &mut opt2).unwrap();
    assert_eq!(p, q);
    let other = init_params::<f64>(&tiny(Variant::Stateful), 1).unwrap();
    assert!(adam_step(&mut q, &other, &mut opt2).is_err());
}

#[test]
fn hard_update_indexing() {
    let arch = tiny(Variant::Memoryless);
    let snaps: Vec<ParamStore<f64>> = (0..20).map(|s| random_params(&arch, s)).collect();
    let mut queue = SnapshotQueue::new(20);
    for s in &snaps {
        queue.push(s.clone());
    }
    let mut target = random_params(&arch, 99);
    hard_update(&mut target, &queue, 15).unwrap();
    assert_eq!(target, snaps[4]);
    hard_update(&mut target, &queue, 0).unwrap();
    assert_eq!(target, snaps[19]);
    hard_update(&mut target, &queue, 0).unwrap();
    assert_eq!(target, snaps[19]);
    hard_update(&mut target, &queue, 40).unwrap();
    assert_eq!(target, snaps[0]);

    let mut bounded = SnapshotQueue::for_delay(15);
    for s in &snaps {
        bounded.push(s.clone());
    }
    assert_eq!(bounded.len(), 16);
    hard_update(&mut target, &bounded, 15).unwrap();
    assert_eq!(target, snaps[4]);
    assert!(hard_update(&mut target, &SnapshotQueue::new(3), 0).is_err());
}

#[test]
fn zero_delay_target_removes_lag() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let arch = tiny(Variant::Memoryless);
    let online = random_params(&arch, 5);
    let mut queue = SnapshotQueue::for_delay(0);
    queue.push(online.clone());
    let mut target = random_params(&arch, 6);
    hard_update(&mut target, &queue, 0).unwrap();
    let mut t = transition(&mut rng, &arch, false);
    t.next_state = t.state.clone();
    t.reward = 0.0;
    // With identical nets and s' = s, the target is gamma * max Q(s).
    let q = q_values(&arch, &online, &t.state).unwrap();
    assert_eq!(td_target(&arch, &target, &t, 0.9).unwrap(), 0.9 * q.max());
}

#[test]
fn soft_update_is_an_ema() {
    let arch = tiny(Variant::Memoryless);
    let online = random_params(&arch, 1);
    let start = random_params(&arch, 2);
    let dist = |a: &ParamStore<f64>| {
        a.iter_values()
            .zip(online.iter_values())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };
    let mut t = start.clone();
    soft_update(&mut t, &online, 0.0).unwrap();
    assert_eq!(t, start);
    soft_update(&mut t, &online, 1.0).unwrap();
    assert_eq!(t, online);
    let mut t = start.clone();
    let d0 = dist(&t);
    for n in 1..=10 {
        soft_update(&mut t, &online, 0.3).unwrap();
        let want = 0.7f64.powi(n) * d0;
        assert!((dist(&t) - want).abs() < 1e-12 * d0.max(1.0));
    }
    assert!(soft_update(&mut t, &online, 1.5).is_err());
    assert!(soft_update(&mut t, &online, -0.1).is_err());
}
