//! Acceptance gate: one test per criterion, each printing a single
//! pass/fail line (run with `--nocapture` to see them on success).

use dhal::dist::{
    beta_logprob_scaled, beta_sample_scaled, beta_variance_scaled, onehot_st, BetaActionParams,
};
use dhal::graph::Graph;
use dhal::nn::{conv1d_forward, init_conv, init_mlp, mlp_forward, Conv1dSpec, ConvLayer, MlpSpec};
use dhal::params::ParamStore;
use dhal::ppo::{combine_advantages, compute_group_gae, normalize_advantages};
use dhal::rng::RngStream;
use dhal::special::digamma;
use dhal::tensor::Tensor;

fn report(id: u32, name: &str, ok: bool, detail: &str) {
    println!("criterion {id} ({name}): {} [{detail}]", if ok { "pass" } else { "FAIL" });
    assert!(ok, "criterion {id} ({name}) failed: {detail}");
}

/// Default study dataset: the 2-mode SLDS at 200 episodes x 100 steps.
fn study_dataset() -> Vec<dhal::envs::dataset::Transition> {
    use dhal::envs::slds::{slds_generate, InputPolicy, SldsSpec};
    slds_generate(&SldsSpec::default_two_mode(), 200, 100, InputPolicy::Noise, 0.1, 7).unwrap()
}

/// Study architecture for the SLDS criteria: linear experts (no activations
/// in the encoder path, linear decoder), so one expert is one linear map of
/// the window and a single branch cannot emulate the mode gate.
fn study_config(k: usize, selector_hidden: Vec<usize>, w_entropy: f32) -> dhal::dha::DhaConfig {
    dhal::dha::DhaConfig {
        window: 12,
        latent_dim: 4,
        selector_hidden,
        encoder_channels: [4, 4],
        decoder_hidden: vec![],
        w_entropy,
        linear_heads: true,
        ..dhal::dha::DhaConfig::defaults(k, 4, 1, 0)
    }
}

const STUDY_SEEDS: [u64; 3] = [11, 12, 13];

#[test]
fn criterion_1_mode_count_ablation() {
    use dhal::dha::{build_windows, eval_prediction_mse, train_dha, DhaModel};
    let t0 = std::time::Instant::now();
    let data = study_dataset();
    let mut means = [0.0f64; 3];
    for &seed in &STUDY_SEEDS {
        for k in 1..=3usize {
            let mut model = DhaModel::init(study_config(k, vec![64, 32], 0.03), seed).unwrap();
            let samples = build_windows(&data, &model.cfg).unwrap();
            train_dha(&mut model, &samples, 300, 256, 2e-3, seed).unwrap();
            let mse = eval_prediction_mse(&model, &samples).unwrap().overall_mse;
            means[k - 1] += mse / STUDY_SEEDS.len() as f64;
        }
    }
    let elapsed = t0.elapsed().as_secs_f64();
    let r12 = means[0] / means[1];
    let r32 = means[2] / means[1];
    let ok = r12 >= 1.2 && r32 <= 1.05 && elapsed < 900.0;
    report(
        1,
        "mode-count ablation",
        ok,
        &format!(
            "mse K1 {:.4} K2 {:.4} K3 {:.4}, K1/K2 {r12:.2} (need >= 1.2), K3/K2 {r32:.2} (need <= 1.05), {elapsed:.0}s",
            means[0], means[1], means[2]
        ),
    );
}

#[test]
fn criterion_2_mode_identification() {
    use dhal::dha::{build_windows, train_dha, DhaModel};
    use dhal::eval::eval_mode_accuracy;
    let data = study_dataset();
    let mut mean_acc = 0.0f64;
    let mut per_seed = Vec::new();
    for &seed in &STUDY_SEEDS {
        // Linear selector and a strong decisiveness push concentrate the
        // K = 3 model onto the true two modes.
        let mut model = DhaModel::init(study_config(3, vec![], 0.1), seed).unwrap();
        let samples = build_windows(&data, &model.cfg).unwrap();
        train_dha(&mut model, &samples, 300, 256, 2e-3, seed).unwrap();
        let acc = eval_mode_accuracy(&model, &data).unwrap().clean.matched_accuracy;
        per_seed.push(acc);
        mean_acc += acc / STUDY_SEEDS.len() as f64;
    }
    let ok = mean_acc >= 0.90;
    report(
        2,
        "mode identification",
        ok,
        &format!(
            "clean matched accuracy {:.3}/{:.3}/{:.3}, mean {mean_acc:.3} (need >= 0.90)",
            per_seed[0], per_seed[1], per_seed[2]
        ),
    );
}

/// Tanh-sinh quadrature of f over (-h, h). The double-exponential variable
/// change concentrates nodes at the endpoints, so integrable boundary
/// singularities (u^(a-1), ln u) converge to near machine precision. The
/// t range keeps tanh strictly below 1 in f64.
fn tanh_sinh(f: impl Fn(f64) -> f64, h: f64) -> f64 {
    let step = 0.004f64;
    let tmax = 3.08f64;
    let half_pi = std::f64::consts::FRAC_PI_2;
    let mut acc = 0.0f64;
    let mut t = -tmax;
    while t <= tmax {
        let s = half_pi * t.sinh();
        let x = s.tanh();
        let w = half_pi * t.cosh() / (s.cosh() * s.cosh());
        acc += w * f(x * h);
        t += step;
    }
    acc * step * h
}

#[test]
fn criterion_3_beta_policy_numerics() {
    let shapes = [1.0, 1.5, 2.0, 5.0, 9.0];
    let bounds = [0.5, 1.0, 2.0];
    let mut worst_norm = 0.0f64;
    let mut worst_score = 0.0f64;
    let mut var_ok = true;
    for &a in &shapes {
        for &b in &shapes {
            for &h in &bounds {
                let p = BetaActionParams::new(vec![a], vec![b], vec![h]).unwrap();
                let density = |x: f64| beta_logprob_scaled(&p, &[x]).unwrap().exp();
                let norm = tanh_sinh(&density, h);
                worst_norm = worst_norm.max((norm - 1.0).abs());

                // E[d/da log p] = 0 and E[d/db log p] = 0 (score property).
                let psi = digamma(a + b);
                let score_a = tanh_sinh(
                    |x| {
                        let u = (x + h) / (2.0 * h);
                        density(x) * (u.ln() - digamma(a) + psi)
                    },
                    h,
                );
                let score_b = tanh_sinh(
                    |x| {
                        let u = (x + h) / (2.0 * h);
                        density(x) * ((1.0 - u).ln() - digamma(b) + psi)
                    },
                    h,
                );
                worst_score = worst_score.max(score_a.abs()).max(score_b.abs());

                let v = beta_variance_scaled(&p)[0];
                var_ok &= v <= h * h / 3.0 + 1e-9;
            }
        }
    }

    // (d) support: 10^6 draws from the flattest admissible density.
    let p = BetaActionParams::new(vec![1.0], vec![1.0], vec![1.0]).unwrap();
    let mut rng = RngStream::new(77);
    let mut outside = 0usize;
    for _ in 0..1_000_000 {
        if beta_sample_scaled(&p, &mut rng)[0].abs() > 1.0 {
            outside += 1;
        }
    }

    let ok = worst_norm < 1e-3 && worst_score < 1e-3 && var_ok && outside == 0;
    report(
        3,
        "beta policy numerics",
        ok,
        &format!(
            "norm err {worst_norm:.2e}, score err {worst_score:.2e}, var bound {}, outside {outside}",
            if var_ok { "holds" } else { "violated" }
        ),
    );
}

#[test]
fn criterion_4_multi_critic_algebra() {
    // Per-group normalization: batch mean 0, population std 1.
    let mut rng = RngStream::new(41);
    let mut adv: Vec<f32> = (0..256).map(|_| (3.0 * rng.normal() - 1.0) as f32).collect();
    normalize_advantages(&mut adv).unwrap();
    let n = adv.len() as f64;
    let mean = adv.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = adv.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let norm_ok = mean.abs() < 1e-6 && (var.sqrt() - 1.0).abs() < 1e-6;

    // Scale invariance: rescaling one group's rewards leaves the combined
    // advantages unchanged (per-group normalization absorbs the scale).
    let t = 40usize;
    let weights = [0.35f32, 0.4, 0.25];
    let rewards: Vec<Vec<f32>> =
        (0..3).map(|_| (0..t).map(|_| rng.normal() as f32).collect()).collect();
    let dones: Vec<bool> = (0..t).map(|i| i % 13 == 12).collect();
    let values = vec![0.0f32; t];
    let combined = |scale: [f32; 3]| -> Vec<f32> {
        let groups: Vec<Vec<f32>> = (0..3)
            .map(|gi| {
                let r: Vec<f32> = rewards[gi].iter().map(|&v| v * scale[gi]).collect();
                let (mut a, _) = compute_group_gae(&r, &values, &dones, 0.0, 0.99, 0.9);
                normalize_advantages(&mut a).unwrap();
                a
            })
            .collect();
        combine_advantages(&groups, &weights).unwrap()
    };
    let base = combined([1.0, 1.0, 1.0]);
    let mut scale_err = 0.0f32;
    for gi in 0..3 {
        let mut s = [1.0f32; 3];
        s[gi] = 3.7;
        for (x, y) in combined(s).iter().zip(&base) {
            scale_err = scale_err.max((x - y).abs());
        }
    }

    // Hand-computed two-step oracle: A1 = delta1 = 1, A0 = gamma lam A1 = 0.891.
    let (a, tg) = compute_group_gae(&[0.0, 1.0], &[0.0, 0.0], &[false, true], 0.0, 0.99, 0.9);
    let oracle_ok = a[1] == 1.0 && a[0] == 0.99f32 * 0.9 && (a[0] - 0.891).abs() < 1e-6
        && tg == vec![a[0], 1.0];

    let ok = norm_ok && scale_err < 1e-5 && oracle_ok;
    report(
        4,
        "multi-critic algebra",
        ok,
        &format!(
            "norm mean {mean:.1e} std-1 {:.1e}, rescale delta {scale_err:.1e}, gae A0 {}",
            var.sqrt() - 1.0,
            a[0]
        ),
    );
}

#[test]
fn criterion_5_straight_through_isolation() {
    use dhal::dha::{DhaConfig, DhaModel};
    use dhal::envs::cart::CartParams;
    use dhal::ppo::{PolicyKind, PpoConfig, Trainer};

    // (a) The PPO objective must leave the selector untouched: exact zero
    // gradient and bit-identical parameters after an update.
    let cfg = PpoConfig {
        num_envs: 4,
        horizon: 6,
        minibatches: 2,
        actor_hidden: vec![16],
        critic_hidden: vec![16],
        dha_batch: 8,
        policy: PolicyKind::Beta,
        ..PpoConfig::default()
    };
    let dcfg = DhaConfig {
        selector_hidden: vec![16],
        encoder_channels: [4, 4],
        latent_dim: 4,
        decoder_hidden: vec![16],
        ..DhaConfig::defaults(3, 9, 1, 1)
    };
    let dha = DhaModel::init(dcfg, 5).unwrap();
    let mut t = Trainer::new(cfg, CartParams::default(), dha, 5).unwrap();
    let sel_names: Vec<String> =
        t.dha.store.names().filter(|n| n.starts_with("sel/")).cloned().collect();
    assert!(!sel_names.is_empty());
    let before: Vec<Vec<f32>> =
        sel_names.iter().map(|n| t.dha.store.get(n).unwrap().data.clone()).collect();
    let buf = t.collect_rollouts().unwrap();
    let (combined, targets) = t.advantages(&buf).unwrap();
    let idx: Vec<usize> = (0..buf.len()).collect();
    t.ppo_update(&buf, &combined, &targets, &idx).unwrap();
    let sel_grad: f32 = sel_names
        .iter()
        .map(|n| t.dha.store.grad(n).unwrap().data.iter().map(|v| v.abs()).sum::<f32>())
        .sum();
    let sel_ok = sel_grad == 0.0
        && sel_names
            .iter()
            .zip(&before)
            .all(|(n, b)| &t.dha.store.get(n).unwrap().data == b);

    // (b) Straight-through pass-through path: the backward gradient through
    // the one-hot equals the finite-difference gradient of the softmax
    // surrogate sum(p . c).
    let logits0 = vec![0.3f32, -0.6, 1.1, 0.2];
    let c = Tensor::new(vec![1, 4], vec![0.7, -1.3, 0.4, 2.1]).unwrap();
    let mut store = ParamStore::new();
    store.insert("logits", Tensor::new(vec![1, 4], logits0.clone()).unwrap()).unwrap();
    let mut g = Graph::new();
    let l = g.param(&store, "logits").unwrap();
    let p = g.row_softmax(l);
    let st = onehot_st(&mut g, p, &[2]).unwrap();
    let cc = g.constant(c.clone());
    let prod = g.mul(st, cc).unwrap();
    let loss = g.sum(prod);
    g.backward(loss, &mut store).unwrap();
    let analytic = store.grad("logits").unwrap().data.clone();
    let surrogate = |vals: &[f32]| -> f64 {
        let mut g = Graph::new();
        let l = g.constant(Tensor::new(vec![1, 4], vals.to_vec()).unwrap());
        let p = g.row_softmax(l);
        let cc = g.constant(c.clone());
        let prod = g.mul(p, cc).unwrap();
        let s = g.sum(prod);
        g.value(s)[0] as f64
    };
    let eps = 1e-2f32;
    let mut fd = Vec::new();
    for i in 0..4 {
        let mut hi = logits0.clone();
        let mut lo = logits0.clone();
        hi[i] += eps;
        lo[i] -= eps;
        fd.push(((surrogate(&hi) - surrogate(&lo)) / (2.0 * eps as f64)) as f32);
    }
    let st_rel = rel_vec_err(&analytic, &fd);

    // (c) Encoder gradient linearity: grad(L1 + L2) = grad L1 + grad L2.
    let spec = Conv1dSpec {
        layers: vec![
            ConvLayer { in_channels: 2, out_channels: 3, kernel: 3, stride: 2 },
            ConvLayer { in_channels: 3, out_channels: 2, kernel: 2, stride: 1 },
        ],
    };
    let mut store = ParamStore::new();
    let mut rng = RngStream::new(9);
    init_conv(&mut store, "enc", &spec, &mut rng).unwrap();
    let x = Tensor {
        shape: vec![2, 2, 9],
        data: (0..36).map(|_| rng.uniform_range(-1.0, 1.0) as f32).collect(),
    };
    let run = |store: &mut ParamStore, which: [bool; 2]| {
        let mut g = Graph::new();
        let xin = g.constant(x.clone());
        let h = conv1d_forward(&mut g, store, "enc", &spec, xin).unwrap();
        let l1 = g.mean(h);
        let sq = g.mul(h, h).unwrap();
        let l2 = g.mean(sq);
        let loss = match which {
            [true, false] => l1,
            [false, true] => l2,
            _ => g.add(l1, l2).unwrap(),
        };
        g.backward(loss, store).unwrap();
    };
    store.zero_grad();
    run(&mut store, [true, true]);
    let joint: Vec<f32> =
        store.names().cloned().collect::<Vec<_>>().iter().flat_map(|n| store.grad(n).unwrap().data.clone()).collect();
    store.zero_grad();
    run(&mut store, [true, false]);
    run(&mut store, [false, true]); // accumulates onto L1's gradients
    let summed: Vec<f32> =
        store.names().cloned().collect::<Vec<_>>().iter().flat_map(|n| store.grad(n).unwrap().data.clone()).collect();
    let lin_err =
        joint.iter().zip(&summed).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);

    let ok = sel_ok && st_rel < 1e-3 && lin_err < 1e-5;
    report(
        5,
        "straight-through and gradient isolation",
        ok,
        &format!("selector grad {sel_grad}, st fd rel {st_rel:.2e}, linearity {lin_err:.2e}"),
    );
}

/// Relative error between gradient vectors via L2 norms.
fn rel_vec_err(a: &[f32], b: &[f32]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    d / na.max(nb).max(1e-12)
}

#[test]
fn criterion_6_autodiff_finite_differences() {
    let mut worst = 0.0f64;
    for case in 0..100u64 {
        let rel = fd_case(case);
        worst = worst.max(rel);
    }
    let ok = worst < 1e-3;
    report(6, "autodiff vs finite differences", ok, &format!("100 cases, worst rel {worst:.2e}"));
}

/// One randomized layer-gradient check. Returns the worst per-parameter
/// relative error (L2) between backward and central finite differences.
fn fd_case(case: u64) -> f64 {
    let mut rng = RngStream::new(5000 + case);
    let kind = case % 6;
    let mut store = ParamStore::new();

    // Random shapes, kept small so f32 FD noise stays well below tolerance.
    let b = 1 + rng.below(3);
    if kind == 4 {
        let cin = 1 + rng.below(2);
        let cout = 1 + rng.below(2);
        let k = 2 + rng.below(2);
        let l = k + 3 + rng.below(3);
        let stride = 1 + rng.below(2);
        let spec = Conv1dSpec {
            layers: vec![ConvLayer { in_channels: cin, out_channels: cout, kernel: k, stride }],
        };
        init_conv(&mut store, "enc", &spec, &mut rng).unwrap();
        let x = Tensor {
            shape: vec![b, cin, l],
            data: (0..b * cin * l).map(|_| rng.uniform_range(-1.0, 1.0) as f32).collect(),
        };
        let t = spec.output_len(l);
        let c = Tensor {
            shape: vec![b, cout, t],
            data: (0..b * cout * t).map(|_| rng.uniform_range(-1.0, 1.0) as f32).collect(),
        };
        let forward = move |g: &mut Graph, store: &ParamStore| {
            let xin = g.constant(x.clone());
            let h = conv1d_forward(g, store, "enc", &spec, xin).unwrap();
            let h = g.elu(h);
            let cc = g.constant(c.clone());
            let prod = g.mul(h, cc).unwrap();
            g.sum(prod)
        };
        return fd_compare(&mut store, forward);
    }

    let n = 2 + rng.below(4);
    let m = 2 + rng.below(4);
    let spec = if kind == 5 {
        MlpSpec::new(vec![n, n + m, m])
    } else {
        MlpSpec::new(vec![n, m])
    };
    init_mlp(&mut store, "net", &spec, &mut rng, false).unwrap();
    let x = Tensor {
        shape: vec![b, n],
        data: (0..b * n).map(|_| rng.uniform_range(-1.0, 1.0) as f32).collect(),
    };
    let c = Tensor {
        shape: vec![b, m],
        data: (0..b * m).map(|_| rng.uniform_range(-1.0, 1.0) as f32).collect(),
    };
    let forward = move |g: &mut Graph, store: &ParamStore| {
        let xin = g.constant(x.clone());
        let y = mlp_forward(g, store, "net", &spec, xin).unwrap();
        let y = match kind {
            0 => g.tanh(y),
            1 => g.elu(y),
            2 => g.sigmoid(y),
            3 => g.softplus(y),
            _ => g.row_softmax(y),
        };
        let cc = g.constant(c.clone());
        let prod = g.mul(y, cc).unwrap();
        g.sum(prod)
    };
    fd_compare(&mut store, forward)
}

fn fd_compare(store: &mut ParamStore, forward: impl Fn(&mut Graph, &ParamStore) -> dhal::graph::Var) -> f64 {
    let mut g = Graph::new();
    let loss = forward(&mut g, store);
    store.zero_grad();
    g.backward(loss, store).unwrap();
    let names: Vec<String> = store.names().cloned().collect();
    let eval = |store: &ParamStore| -> f64 {
        let mut g = Graph::new();
        let l = forward(&mut g, store);
        g.value(l)[0] as f64
    };
    let eps = 1e-2f32;
    let mut worst = 0.0f64;
    for name in &names {
        let analytic = store.grad(name).unwrap().data.clone();
        let len = analytic.len();
        let mut fd = Vec::with_capacity(len);
        for i in 0..len {
            let orig = store.get(name).unwrap().data[i];
            store.get_mut(name).unwrap().data[i] = orig + eps;
            let hi = eval(store);
            store.get_mut(name).unwrap().data[i] = orig - eps;
            let lo = eval(store);
            store.get_mut(name).unwrap().data[i] = orig;
            fd.push(((hi - lo) / (2.0 * eps as f64)) as f32);
        }
        worst = worst.max(rel_vec_err(&analytic, &fd));
    }
    worst
}

#[test]
fn criterion_7_rl_progress() {
    use dhal::dha::{DhaConfig, DhaModel};
    use dhal::envs::cart::CartParams;
    use dhal::ppo::{PolicyKind, PpoConfig, Trainer};

    let t0 = std::time::Instant::now();
    let mut mean_first = 0.0f64;
    let mut mean_tail = 0.0f64;
    let mut beta_clip = 0.0f64;
    for seed in [1u64, 2, 3] {
        let dha = DhaModel::init(DhaConfig::desk(3, 9, 1, 1), seed).unwrap();
        let mut t = Trainer::new(PpoConfig::default(), CartParams::default(), dha, seed).unwrap();
        for i in 0..300 {
            let m = t.train_iteration().unwrap();
            if i == 0 {
                mean_first += m.return_total / 3.0;
            }
            // Converged return: mean over the last 10 iterations.
            if i >= 290 {
                mean_tail += m.return_total / 30.0;
            }
            beta_clip = beta_clip.max(m.clip_rate);
        }
    }

    // Gaussian preset control: raw samples do land outside the bounds.
    let dha = DhaModel::init(DhaConfig::desk(3, 9, 1, 1), 1).unwrap();
    let cfg = PpoConfig { policy: PolicyKind::Gaussian, ..PpoConfig::default() };
    let mut t = Trainer::new(cfg, CartParams::default(), dha, 1).unwrap();
    let mut gauss_clip = 0.0f64;
    for _ in 0..5 {
        gauss_clip = gauss_clip.max(t.train_iteration().unwrap().clip_rate);
    }

    let elapsed = t0.elapsed().as_secs_f64();
    let ratio = mean_tail / mean_first;
    let ok = ratio >= 3.0 && beta_clip == 0.0 && gauss_clip > 0.0 && elapsed < 1800.0;
    report(
        7,
        "rl progress on cart",
        ok,
        &format!(
            "return {mean_first:.4} -> {mean_tail:.4} (x{ratio:.1}, need >= 3), beta clip {beta_clip}, gaussian clip {gauss_clip:.3}, {elapsed:.0}s"
        ),
    );
}

#[test]
fn criterion_8_determinism_and_formats() {
    use std::process::Command;
    let bin = env!("CARGO_BIN_EXE_dhal");
    let dir = tempfile::tempdir().unwrap();
    let path = |s: &str| dir.path().join(s);
    let run = |args: &[&str]| {
        Command::new(bin)
            .args(args)
            .env("DHAL_SEED", "0")
            .output()
            .expect("dhal binary runs")
    };
    let p = |pb: &std::path::PathBuf| pb.to_str().unwrap().to_string();

    // Identical seeds: bit-identical dataset files.
    let (d1, d2) = (path("a.bin"), path("b.bin"));
    for out in [&d1, &d2] {
        let o = run(&[
            "gen-data", "--env", "slds2", "--episodes", "10", "--steps", "40", "--seed", "5",
            "--out", &p(out),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let data_ok = std::fs::read(&d1).unwrap() == std::fs::read(&d2).unwrap();

    // Identical seeds: bit-identical checkpoints and training metrics.
    let (c1, c2) = (path("m1.ckpt"), path("m2.ckpt"));
    let (v1, v2) = (path("m1.csv"), path("m2.csv"));
    let mut outs = Vec::new();
    for (ck, cv) in [(&c1, &v1), (&c2, &v2)] {
        let o = run(&[
            "train-dha", "--data", &p(&d1), "--modes", "2", "--epochs", "2", "--desk",
            "--seed", "3", "--out", &p(ck), "--curve", &p(cv),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        outs.push(o.stdout);
    }
    let ckpt_ok = std::fs::read(&c1).unwrap() == std::fs::read(&c2).unwrap()
        && std::fs::read(&v1).unwrap() == std::fs::read(&v2).unwrap()
        && outs[0] == outs[1];

    // RL metrics determinism on a miniature config.
    let cfg = path("rl.toml");
    std::fs::write(
        &cfg,
        "[env]\nname = \"cart\"\n\n[ppo]\nnum_envs = 8\nhorizon = 8\nminibatches = 2\nactor_hidden = [16]\ncritic_hidden = [16]\ndha_batch = 16\n",
    )
    .unwrap();
    let (r1, r2) = (path("rl1"), path("rl2"));
    for out in [&r1, &r2] {
        let o = run(&[
            "--config", &p(&cfg), "train-rl", "--iters", "2", "--seed", "11", "--out-dir", &p(out),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let rl_ok = std::fs::read(r1.join("metrics.jsonl")).unwrap()
        == std::fs::read(r2.join("metrics.jsonl")).unwrap()
        && std::fs::read(r1.join("final.ckpt")).unwrap()
            == std::fs::read(r2.join("final.ckpt")).unwrap();

    // Corrupt dataset body: rejected with the data exit code.
    let bad_data = path("bad.bin");
    let mut bytes = std::fs::read(&d1).unwrap();
    let last = bytes.len() - 3;
    bytes[last] ^= 0x40;
    std::fs::write(&bad_data, bytes).unwrap();
    let o = run(&["train-dha", "--data", &p(&bad_data), "--epochs", "1", "--out", &p(&path("x.ckpt"))]);
    let bad_data_ok = o.status.code() == Some(3);

    // Corrupt checkpoint payload: rejected with the data exit code.
    let bad_ckpt = path("bad.ckpt");
    let mut bytes = std::fs::read(&c1).unwrap();
    let last = bytes.len() - 2;
    bytes[last] ^= 0x01;
    std::fs::write(&bad_ckpt, bytes).unwrap();
    std::fs::copy(path("m1.ckpt.meta.json"), path("bad.ckpt.meta.json")).unwrap();
    let o = run(&["eval-dha", "--ckpt", &p(&bad_ckpt), "--data", &p(&d1)]);
    let bad_ckpt_ok = o.status.code() == Some(3);

    // Unknown env: usage/config exit code.
    let o = run(&["gen-data", "--env", "moon", "--out", &p(&path("z.bin"))]);
    let usage_ok = o.status.code() == Some(2);

    let ok = data_ok && ckpt_ok && rl_ok && bad_data_ok && bad_ckpt_ok && usage_ok;
    report(
        8,
        "determinism and formats",
        ok,
        &format!(
            "data {data_ok}, ckpt+metrics {ckpt_ok}, rl {rl_ok}, corrupt data {bad_data_ok}, corrupt ckpt {bad_ckpt_ok}, usage {usage_ok}"
        ),
    );
}
