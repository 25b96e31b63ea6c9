//! Multi-critic PPO with a bounded Beta action policy.
//!
//! Per-group value functions and GAE, per-group advantage normalization, a
//! weighted advantage combination, the clipped surrogate with an entropy
//! bonus, and an adaptive learning rate against a KL target. The actor
//! consumes [z, o, a_prev, phase indicators]; PPO gradients reach the actor,
//! critics, and encoders, never the mode selector.

use crate::dha::{dha_loss, dha_forward, DhaModel, HistoryWindow, WindowSample};
use crate::dist::{softplus_with_offset, BetaActionParams, beta_sample_scaled};
use crate::envs::cart::{CartEnv, CartParams};
use crate::error::{DhalError, Result};
use crate::graph::{Graph, Var};
use crate::nn::{init_mlp, mlp_forward, AdamState, MlpSpec};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

pub const GROUP_NAMES: [&str; 3] = ["glide", "push", "regularization"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Beta,
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticMode {
    /// One critic per reward group, weighted advantage combination.
    Multi,
    /// One critic over the weight-scaled reward sum.
    SingleTransfer,
    /// One critic over the raw reward sum.
    SingleRaw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub gamma: f32,
    pub lam: f32,
    pub clip: f32,
    pub target_kl: f32,
    pub minibatches: usize,
    pub horizon: usize,
    pub num_envs: usize,
    pub entropy_coef: f32,
    pub lr: f32,
    pub lr_min: f32,
    pub lr_max: f32,
    /// Advantage weights (glide, push, regularization).
    pub weights: [f32; 3],
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub policy: PolicyKind,
    pub critic_mode: CriticMode,
    /// Symmetric action bound h per action dimension.
    pub action_bound: f64,
    /// Samples per DHA update drawn from the rollout buffer.
    pub dha_batch: usize,
    pub dha_lr: f32,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            gamma: 0.99,
            lam: 0.9,
            clip: 0.2,
            target_kl: 0.01,
            minibatches: 4,
            horizon: 24,
            num_envs: 64,
            entropy_coef: 0.01,
            lr: 1e-3,
            lr_min: 1e-6,
            lr_max: 1e-2,
            weights: [0.35, 0.4, 0.25],
            actor_hidden: vec![128, 64],
            critic_hidden: vec![128, 64],
            policy: PolicyKind::Beta,
            critic_mode: CriticMode::Multi,
            action_bound: 1.0,
            dha_batch: 256,
            dha_lr: 1e-3,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.lam) {
            return Err(DhalError::Config("gamma and lambda must lie in (0, 1]".into()));
        }
        if self.clip <= 0.0 {
            return Err(DhalError::Config("clip must be positive".into()));
        }
        if (self.weights.iter().sum::<f32>() - 1.0).abs() > 1e-6 {
            return Err(DhalError::Config("advantage weights must sum to 1".into()));
        }
        if self.horizon == 0 || self.num_envs == 0 || self.minibatches == 0 {
            return Err(DhalError::Config("horizon, envs, minibatches must be >= 1".into()));
        }
        Ok(())
    }

    pub fn n_groups(&self) -> usize {
        match self.critic_mode {
            CriticMode::Multi => 3,
            _ => 1,
        }
    }

    /// Per-group combination weights after the critic-mode reduction.
    pub fn group_weights(&self) -> Vec<f32> {
        match self.critic_mode {
            CriticMode::Multi => self.weights.to_vec(),
            _ => vec![1.0],
        }
    }

    /// Maps the env's reward triple into this critic configuration's groups.
    pub fn group_rewards(&self, r: &[f32; 3]) -> Vec<f32> {
        match self.critic_mode {
            CriticMode::Multi => r.to_vec(),
            CriticMode::SingleTransfer => {
                vec![r.iter().zip(&self.weights).map(|(x, w)| x * w).sum()]
            }
            CriticMode::SingleRaw => vec![r.iter().sum()],
        }
    }
}

/// delta_t = r_t + gamma (1 - d_t) V_{t+1} - V_t;
/// A_t = delta_t + gamma (1 - d_t) lam A_{t+1}, swept backward.
/// Returns (advantages, value targets A + V).
pub fn compute_group_gae(
    rewards: &[f32],
    values: &[f32],
    dones: &[bool],
    bootstrap: f32,
    gamma: f32,
    lam: f32,
) -> (Vec<f32>, Vec<f32>) {
    let t = rewards.len();
    let mut adv = vec![0.0f32; t];
    let mut next_a = 0.0f32;
    for i in (0..t).rev() {
        let not_done = if dones[i] { 0.0 } else { 1.0 };
        let v_next = if i + 1 < t { values[i + 1] } else { bootstrap };
        let delta = rewards[i] + gamma * not_done * v_next - values[i];
        next_a = delta + gamma * not_done * lam * next_a;
        adv[i] = next_a;
    }
    let targets = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, targets)
}

/// In-place standardization over the whole batch (population std, eps 1e-8).
pub fn normalize_advantages(a: &mut [f32]) -> Result<()> {
    if a.len() < 2 {
        return Err(DhalError::Contract("advantage normalization needs >= 2 samples".into()));
    }
    let n = a.len() as f64;
    let mean = a.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = a.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt() + 1e-8;
    for v in a.iter_mut() {
        *v = ((*v as f64 - mean) / denom) as f32;
    }
    Ok(())
}

/// Elementwise weighted sum of normalized per-group advantages.
pub fn combine_advantages(groups: &[Vec<f32>], weights: &[f32]) -> Result<Vec<f32>> {
    if groups.len() != weights.len() {
        return Err(DhalError::Config("one weight per advantage group required".into()));
    }
    if (weights.iter().sum::<f32>() - 1.0).abs() > 1e-6 {
        return Err(DhalError::Config("advantage weights must sum to 1".into()));
    }
    let n = groups.first().map(|g| g.len()).unwrap_or(0);
    let mut out = vec![0.0f32; n];
    for (g, &w) in groups.iter().zip(weights) {
        if g.len() != n {
            return Err(DhalError::shape(&[n], &[g.len()], "advantage group length"));
        }
        for (o, &v) in out.iter_mut().zip(g) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// KL > 2 target: lr / 1.5; KL < target / 2: lr * 1.5; clamped to [min, max].
pub fn adaptive_lr_update(kl: f64, target: f64, lr: f64, lo: f64, hi: f64) -> f64 {
    let next = if kl > 2.0 * target {
        lr / 1.5
    } else if kl < target / 2.0 {
        lr * 1.5
    } else {
        lr
    };
    next.clamp(lo, hi)
}

/// One collected transition batch, time-major ([t * num_envs + e]).
pub struct RolloutBuffer {
    pub windows: Vec<Vec<f32>>,
    /// Mode selected (argmax) at collection; PPO re-derives z from it.
    pub modes: Vec<usize>,
    /// Constant tail of the actor input: [o, a_prev, indicators].
    pub actor_rest: Vec<Vec<f32>>,
    /// Raw policy samples (pre-clip for the Gaussian baseline).
    pub actions: Vec<Vec<f64>>,
    pub logprobs: Vec<f64>,
    pub rewards: Vec<Vec<f32>>,
    pub values: Vec<Vec<f32>>,
    pub dones: Vec<bool>,
    pub next_obs: Vec<Vec<f32>>,
    pub contacts: Vec<Vec<f32>>,
    pub bootstrap: Vec<Vec<f32>>,
    /// Actions that left the support and were clipped (Gaussian only).
    pub clip_events: usize,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.logprobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logprobs.is_empty()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct IterMetrics {
    pub iter: usize,
    pub return_total: f64,
    pub return_glide: f64,
    pub return_push: f64,
    pub return_reg: f64,
    pub kl: f64,
    pub clip_frac: f64,
    /// Fraction of sampled actions outside [-h, h] (0 by support for Beta).
    pub clip_rate: f64,
    pub entropy: f64,
    pub lr: f64,
    pub dha_mse: f64,
    pub dha_bce: f64,
    pub mode_hist: Vec<usize>,
}

/// Owns the DHA model (selector + VAEs), the actor, the critics, the vector
/// of environments, and both optimizers.
pub struct Trainer {
    pub cfg: PpoConfig,
    pub dha: DhaModel,
    envs: Vec<CartEnv>,
    windows: Vec<HistoryWindow>,
    last_obs: Vec<Vec<f32>>,
    prev_act: Vec<Vec<f32>>,
    adam_ppo: AdamState,
    adam_dha: AdamState,
    rng: RngStream,
    iter: usize,
    lr: f64,
}

impl Trainer {
    pub fn new(cfg: PpoConfig, cart: CartParams, dha: DhaModel, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let obs_dim = dha.cfg.obs_dim;
        let act_dim = dha.cfg.act_dim;
        let mut dha = dha;
        let root = RngStream::new(seed);
        let in_dim = dha.cfg.latent_dim + obs_dim + act_dim + 2;
        init_mlp(
            &mut dha.store,
            "actor",
            &actor_spec(&cfg, in_dim, act_dim),
            &mut root.split(100),
            true,
        )?;
        for gi in 0..cfg.n_groups() {
            init_mlp(
                &mut dha.store,
                &format!("crit{gi}"),
                &critic_spec(&cfg, in_dim),
                &mut root.split(200 + gi as u64),
                true,
            )?;
        }
        let mut envs = Vec::with_capacity(cfg.num_envs);
        let mut windows = Vec::with_capacity(cfg.num_envs);
        let mut last_obs = Vec::with_capacity(cfg.num_envs);
        for e in 0..cfg.num_envs {
            let mut env = CartEnv::new(cart, root.split(300 + e as u64).next_u64());
            let obs = env.reset();
            let mut hw = HistoryWindow::new(obs_dim, act_dim, dha.cfg.window);
            hw.push(&vec![0.0; act_dim], &obs);
            envs.push(env);
            windows.push(hw);
            last_obs.push(obs);
        }
        let lr = cfg.lr as f64;
        Ok(Trainer {
            adam_ppo: AdamState::new(cfg.lr),
            adam_dha: AdamState::new(cfg.dha_lr),
            prev_act: vec![vec![0.0; act_dim]; cfg.num_envs],
            rng: root.split(1),
            iter: 0,
            lr,
            cfg,
            dha,
            envs,
            windows,
            last_obs,
        })
    }

    pub fn iter_count(&self) -> usize {
        self.iter
    }

    fn indicators(&self, e: usize) -> [f32; 2] {
        [self.envs[e].clock.lpf_glide as f32, self.envs[e].clock.lpf_push as f32]
    }

    /// Deterministic DHA latents for the current windows, batched over envs.
    fn latents(&self) -> Result<(Vec<Vec<f32>>, Vec<usize>)> {
        let cfg = &self.dha.cfg;
        let cw = cfg.channels() * cfg.window;
        let mut data = Vec::with_capacity(self.cfg.num_envs * cw);
        for w in &self.windows {
            data.extend_from_slice(&w.flat());
        }
        let mut g = Graph::new();
        let mut rng = RngStream::new(0);
        let f = dha_forward(
            &mut g,
            &self.dha,
            Tensor { shape: vec![self.cfg.num_envs, cw], data },
            true,
            &mut rng,
        )?;
        let z = g.value(f.z_mean);
        let nz = cfg.latent_dim;
        let latents = (0..self.cfg.num_envs).map(|e| z[e * nz..(e + 1) * nz].to_vec()).collect();
        Ok((latents, f.picked))
    }

    fn actor_input(&self, e: usize, z: &[f32]) -> (Vec<f32>, Vec<f32>) {
        let ind = self.indicators(e);
        let mut rest = self.last_obs[e].clone();
        rest.extend_from_slice(&self.prev_act[e]);
        rest.extend_from_slice(&ind);
        let mut full = z.to_vec();
        full.extend_from_slice(&rest);
        (full, rest)
    }

    pub fn collect_rollouts(&mut self) -> Result<RolloutBuffer> {
        let t_len = self.cfg.horizon;
        let n_env = self.cfg.num_envs;
        let act_dim = self.dha.cfg.act_dim;
        let h = self.cfg.action_bound;
        let n_groups = self.cfg.n_groups();
        let cap = t_len * n_env;
        let mut buf = RolloutBuffer {
            windows: Vec::with_capacity(cap),
            modes: Vec::with_capacity(cap),
            actor_rest: Vec::with_capacity(cap),
            actions: Vec::with_capacity(cap),
            logprobs: Vec::with_capacity(cap),
            rewards: Vec::with_capacity(cap),
            values: Vec::with_capacity(cap),
            dones: Vec::with_capacity(cap),
            next_obs: Vec::with_capacity(cap),
            contacts: Vec::with_capacity(cap),
            bootstrap: Vec::new(),
            clip_events: 0,
        };
        let mut sample_rng = self.rng.split(10_000 + self.iter as u64);
        for _t in 0..t_len {
            let (latents, modes) = self.latents()?;
            let mut inputs = Vec::with_capacity(n_env);
            for e in 0..n_env {
                let (full, rest) = self.actor_input(e, &latents[e]);
                buf.windows.push(self.windows[e].flat());
                buf.modes.push(modes[e]);
                buf.actor_rest.push(rest);
                inputs.push(full);
            }
            let (raw, vals) = self.policy_values(&inputs)?;
            for e in 0..n_env {
                let out = &raw[e * 2 * act_dim..(e + 1) * 2 * act_dim];
                let (action, logprob, clipped) = sample_action(&self.cfg, out, h, &mut sample_rng)?;
                buf.clip_events += usize::from(clipped);
                let applied: Vec<f64> = action.iter().map(|&a| a.clamp(-h, h)).collect();
                let step = self.envs[e].step(applied[0])?;
                buf.actions.push(action);
                buf.logprobs.push(logprob);
                buf.rewards.push(self.cfg.group_rewards(&step.rewards));
                buf.values.push(vals[e].clone());
                buf.dones.push(step.done);
                buf.next_obs.push(step.next_obs.clone());
                buf.contacts
                    .push(step.contacts.iter().map(|&c| f32::from(u8::from(c))).collect());
                let act_f32: Vec<f32> = applied.iter().map(|&a| a as f32).collect();
                if step.done {
                    let obs = self.envs[e].reset();
                    self.windows[e].reset();
                    self.windows[e].push(&vec![0.0; act_dim], &obs);
                    self.last_obs[e] = obs;
                    self.prev_act[e] = vec![0.0; act_dim];
                } else {
                    self.windows[e].push(&act_f32, &step.next_obs);
                    self.last_obs[e] = step.next_obs;
                    self.prev_act[e] = act_f32;
                }
            }
        }
        let (latents, _) = self.latents()?;
        let inputs: Vec<Vec<f32>> =
            (0..n_env).map(|e| self.actor_input(e, &latents[e]).0).collect();
        let (_, vals) = self.policy_values(&inputs)?;
        buf.bootstrap = vals;
        debug_assert_eq!(buf.len(), cap);
        debug_assert!(buf.values.iter().all(|v| v.len() == n_groups));
        Ok(buf)
    }

    /// Batched actor raw outputs and critic values (host values only).
    fn policy_values(&self, inputs: &[Vec<f32>]) -> Result<(Vec<f32>, Vec<Vec<f32>>)> {
        let b = inputs.len();
        let in_dim = inputs[0].len();
        let act_dim = self.dha.cfg.act_dim;
        let data: Vec<f32> = inputs.iter().flatten().copied().collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor { shape: vec![b, in_dim], data });
        let raw = mlp_forward(
            &mut g,
            &self.dha.store,
            "actor",
            &actor_spec(&self.cfg, in_dim, act_dim),
            x,
        )?;
        let raw_v = g.value(raw).to_vec();
        let mut values = vec![Vec::with_capacity(self.cfg.n_groups()); b];
        for gi in 0..self.cfg.n_groups() {
            let v = mlp_forward(
                &mut g,
                &self.dha.store,
                &format!("crit{gi}"),
                &critic_spec(&self.cfg, in_dim),
                x,
            )?;
            for (e, val) in g.value(v).iter().enumerate() {
                values[e].push(*val);
            }
        }
        Ok((raw_v, values))
    }

    /// Advantage pipeline over a finished buffer: per-group GAE, per-group
    /// normalization, weighted combination. Returns (combined, per-group
    /// targets).
    pub fn advantages(&self, buf: &RolloutBuffer) -> Result<(Vec<f32>, Vec<Vec<f32>>)> {
        let n_env = self.cfg.num_envs;
        let t_len = self.cfg.horizon;
        let n_groups = self.cfg.n_groups();
        let mut normed = Vec::with_capacity(n_groups);
        let mut targets = vec![vec![0.0f32; buf.len()]; n_groups];
        for gi in 0..n_groups {
            let mut adv_all = vec![0.0f32; buf.len()];
            for e in 0..n_env {
                let rewards: Vec<f32> = (0..t_len).map(|t| buf.rewards[t * n_env + e][gi]).collect();
                let values: Vec<f32> = (0..t_len).map(|t| buf.values[t * n_env + e][gi]).collect();
                let dones: Vec<bool> = (0..t_len).map(|t| buf.dones[t * n_env + e]).collect();
                let (adv, tgt) = compute_group_gae(
                    &rewards,
                    &values,
                    &dones,
                    buf.bootstrap[e][gi],
                    self.cfg.gamma,
                    self.cfg.lam,
                );
                for t in 0..t_len {
                    adv_all[t * n_env + e] = adv[t];
                    targets[gi][t * n_env + e] = tgt[t];
                }
            }
            normalize_advantages(&mut adv_all)?;
            normed.push(adv_all);
        }
        let combined = combine_advantages(&normed, &self.cfg.group_weights())?;
        Ok((combined, targets))
    }

    /// One full iteration: collect, advantage pipeline, minibatch updates,
    /// DHA update, adaptive LR.
    pub fn train_iteration(&mut self) -> Result<IterMetrics> {
        let buf = self.collect_rollouts()?;
        let (combined, targets) = self.advantages(&buf)?;

        let n = buf.len();
        let mut order: Vec<usize> = (0..n).collect();
        self.rng.split(20_000 + self.iter as u64).shuffle(&mut order);
        let chunk = n.div_ceil(self.cfg.minibatches);
        let (mut kl_sum, mut clip_sum, mut ent_sum) = (0.0f64, 0.0f64, 0.0f64);
        let mut updates = 0usize;
        for mb in order.chunks(chunk) {
            let stats = self.ppo_update(&buf, &combined, &targets, mb)?;
            kl_sum += stats.0;
            clip_sum += stats.1;
            ent_sum += stats.2;
            updates += 1;
        }
        let kl = kl_sum / updates as f64;

        let (dha_mse, dha_bce, mode_hist) = self.dha_update(&buf)?;

        self.lr = adaptive_lr_update(
            kl,
            self.cfg.target_kl as f64,
            self.lr,
            self.cfg.lr_min as f64,
            self.cfg.lr_max as f64,
        );
        self.adam_ppo.lr = self.lr as f32;

        let mut group_means = [0.0f64; 3];
        for r in &buf.rewards {
            match self.cfg.critic_mode {
                CriticMode::Multi => {
                    for (gm, &v) in group_means.iter_mut().zip(r.iter()) {
                        *gm += v as f64;
                    }
                }
                _ => group_means[0] += r[0] as f64,
            }
        }
        for gm in &mut group_means {
            *gm /= n as f64;
        }
        let metrics = IterMetrics {
            iter: self.iter,
            return_total: group_means.iter().sum(),
            return_glide: group_means[0],
            return_push: group_means[1],
            return_reg: group_means[2],
            kl,
            clip_frac: clip_sum / updates as f64,
            clip_rate: buf.clip_events as f64 / n as f64,
            entropy: ent_sum / updates as f64,
            lr: self.lr,
            dha_mse,
            dha_bce,
            mode_hist,
        };
        self.iter += 1;
        Ok(metrics)
    }

    /// One minibatch gradient step. Returns (kl, clip fraction, entropy).
    /// Public so gradient-isolation properties can be checked on this update
    /// alone, without the interleaved DHA step.
    pub fn ppo_update(
        &mut self,
        buf: &RolloutBuffer,
        combined: &[f32],
        targets: &[Vec<f32>],
        idx: &[usize],
    ) -> Result<(f64, f64, f64)> {
        let cfg = &self.cfg;
        let dcfg = &self.dha.cfg;
        let b = idx.len();
        let act_dim = dcfg.act_dim;
        let nz = dcfg.latent_dim;
        let cw = dcfg.channels() * dcfg.window;
        let in_rest = dcfg.obs_dim + act_dim + 2;

        self.dha.store.zero_grad();
        let mut g = Graph::new();

        // Latents from the stored mode's encoder mean; constant one-hot mask,
        // so the selector is never on this tape.
        let win_data: Vec<f32> =
            idx.iter().flat_map(|&i| buf.windows[i].iter().copied()).collect();
        let win = g.constant(Tensor { shape: vec![b, cw], data: win_data });
        let conv_in = g.reshape(win, vec![b, dcfg.channels(), dcfg.window])?;
        let conv = dcfg.conv_spec();
        let head_spec = MlpSpec::new(vec![
            conv.output_channels() * conv.output_len(dcfg.window),
            2 * nz,
        ]);
        let mut z_acc: Option<Var> = None;
        for m in 0..dcfg.k {
            let mask: Vec<f32> =
                idx.iter().map(|&i| if buf.modes[i] == m { 1.0 } else { 0.0 }).collect();
            if mask.iter().all(|&v| v == 0.0) {
                continue;
            }
            let h = crate::nn::conv1d_forward(&mut g, &self.dha.store, &format!("enc{m}"), &conv, conv_in)?;
            let hs = g.shape(h).to_vec();
            let hf = g.reshape(h, vec![b, hs[1] * hs[2]])?;
            let hf = if dcfg.linear_heads { hf } else { g.elu(hf) };
            let stats = mlp_forward(&mut g, &self.dha.store, &format!("enc{m}/head"), &head_spec, hf)?;
            let mean = g.slice_cols(stats, 0, nz)?;
            let mv = g.constant(Tensor { shape: vec![b], data: mask });
            let masked = g.scale_rows(mean, mv)?;
            z_acc = Some(match z_acc {
                Some(acc) => g.add(acc, masked)?,
                None => masked,
            });
        }
        let z = z_acc.expect("nonempty minibatch");

        let rest_data: Vec<f32> =
            idx.iter().flat_map(|&i| buf.actor_rest[i].iter().copied()).collect();
        let rest = g.constant(Tensor { shape: vec![b, in_rest], data: rest_data });
        let input = g.concat_cols(&[z, rest])?;

        let raw = mlp_forward(
            &mut g,
            &self.dha.store,
            "actor",
            &actor_spec(cfg, nz + in_rest, act_dim),
            input,
        )?;
        let actions: Vec<Vec<f64>> = idx.iter().map(|&i| buf.actions[i].clone()).collect();
        let (new_lp, ent_rows) = policy_logprob_entropy(&mut g, cfg, raw, &actions, act_dim)?;

        let old_data: Vec<f32> = idx.iter().map(|&i| buf.logprobs[i] as f32).collect();
        let old = g.constant(Tensor { shape: vec![b], data: old_data });
        let adv_data: Vec<f32> = idx.iter().map(|&i| combined[i]).collect();
        let adv = g.constant(Tensor { shape: vec![b], data: adv_data });

        let diff = g.sub(new_lp, old)?;
        let ratio = g.exp(diff);
        if g.value(ratio).iter().any(|v| !v.is_finite()) {
            return Err(DhalError::Numerical {
                component: "surrogate".into(),
                detail: "non-finite policy ratio".into(),
            });
        }
        let s1 = g.mul(ratio, adv)?;
        let clipped = g.clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip);
        let s2 = g.mul(clipped, adv)?;
        let m = g.min(s1, s2)?;
        let surrogate = g.mean(m);

        let mut value_loss: Option<Var> = None;
        for gi in 0..cfg.n_groups() {
            let v = mlp_forward(
                &mut g,
                &self.dha.store,
                &format!("crit{gi}"),
                &critic_spec(cfg, nz + in_rest),
                input,
            )?;
            let t_data: Vec<f32> = idx.iter().map(|&i| targets[gi][i]).collect();
            let t = g.constant(Tensor { shape: vec![b, 1], data: t_data });
            let d = g.sub(v, t)?;
            let sq = g.mul(d, d)?;
            let l = g.mean(sq);
            value_loss = Some(match value_loss {
                Some(acc) => g.add(acc, l)?,
                None => l,
            });
        }
        let value_loss = value_loss.expect("at least one critic");

        let ent_mean = g.mean(ent_rows);
        let ent_term = g.scale(ent_mean, cfg.entropy_coef);
        let loss = g.sub(value_loss, surrogate)?;
        let loss = g.sub(loss, ent_term)?;
        if !g.value(loss)[0].is_finite() {
            return Err(DhalError::Numerical {
                component: "total_ppo_loss".into(),
                detail: "non-finite loss".into(),
            });
        }
        g.backward(loss, &mut self.dha.store)?;
        self.adam_ppo.step(&mut self.dha.store, &["actor", "crit", "enc"])?;

        let rv = g.value(ratio);
        let clip_frac =
            rv.iter().filter(|&&r| (r - 1.0).abs() > cfg.clip).count() as f64 / b as f64;
        let kl = g
            .value(new_lp)
            .iter()
            .zip(idx)
            .map(|(&nl, &i)| buf.logprobs[i] - nl as f64)
            .sum::<f64>()
            / b as f64;
        Ok((kl, clip_frac, g.value(ent_mean)[0] as f64))
    }

    /// One DHA update on a buffer subsample (selector + VAE gradients only).
    fn dha_update(&mut self, buf: &RolloutBuffer) -> Result<(f64, f64, Vec<usize>)> {
        let mut idx: Vec<usize> = (0..buf.len()).collect();
        self.rng.split(30_000 + self.iter as u64).shuffle(&mut idx);
        idx.truncate(self.cfg.dha_batch.min(buf.len()));
        let samples: Vec<WindowSample> = idx
            .iter()
            .map(|&i| WindowSample {
                window: buf.windows[i].clone(),
                target_obs: buf.next_obs[i].clone(),
                target_contact: buf.contacts[i].clone(),
                true_mode: None,
                switch_adjacent: false,
            })
            .collect();
        let refs: Vec<&WindowSample> = samples.iter().collect();
        self.dha.store.zero_grad();
        let mut g = Graph::new();
        let mut rng = self.rng.split(40_000 + self.iter as u64);
        let (loss, m) = dha_loss(&mut g, &self.dha, &refs, &mut rng)?;
        g.backward(loss, &mut self.dha.store)?;
        self.adam_dha.step(&mut self.dha.store, &["sel", "enc", "dec"])?;

        let mut hist = vec![0usize; self.dha.cfg.k];
        for &mode in &buf.modes {
            hist[mode] += 1;
        }
        Ok((m.mse, m.bce, hist))
    }
}

fn actor_spec(cfg: &PpoConfig, in_dim: usize, act_dim: usize) -> MlpSpec {
    let mut widths = vec![in_dim];
    widths.extend(&cfg.actor_hidden);
    widths.push(2 * act_dim);
    MlpSpec::new(widths)
}

fn critic_spec(cfg: &PpoConfig, in_dim: usize) -> MlpSpec {
    let mut widths = vec![in_dim];
    widths.extend(&cfg.critic_hidden);
    widths.push(1);
    MlpSpec::new(widths)
}

/// Draws one action from the raw actor outputs. Returns (raw action,
/// behavior log-prob, clipped flag).
fn sample_action(
    cfg: &PpoConfig,
    raw: &[f32],
    h: f64,
    rng: &mut RngStream,
) -> Result<(Vec<f64>, f64, bool)> {
    let act_dim = raw.len() / 2;
    match cfg.policy {
        PolicyKind::Beta => {
            let alpha: Vec<f64> = raw[..act_dim].iter().map(|&x| softplus_with_offset(x as f64)).collect();
            let beta: Vec<f64> = raw[act_dim..].iter().map(|&x| softplus_with_offset(x as f64)).collect();
            let params = BetaActionParams::new(alpha, beta, vec![h; act_dim])?;
            let action = beta_sample_scaled(&params, rng);
            let lp = crate::dist::beta_logprob_scaled(&params, &action)?;
            Ok((action, lp, false))
        }
        PolicyKind::Gaussian => {
            let mean: Vec<f64> = raw[..act_dim].iter().map(|&x| x as f64).collect();
            let std: Vec<f64> = raw[act_dim..]
                .iter()
                .map(|&x| (x as f64).clamp(-4.0, 1.0).exp())
                .collect();
            let action: Vec<f64> =
                mean.iter().zip(&std).map(|(&m, &s)| m + s * rng.normal()).collect();
            let lp = crate::dist::gaussian_logprob(&mean, &std, &action);
            let clipped = action.iter().any(|&a| a.abs() > h);
            Ok((action, lp, clipped))
        }
    }
}

/// Differentiable log-prob and entropy rows for the stored actions, [B].
fn policy_logprob_entropy(
    g: &mut Graph,
    cfg: &PpoConfig,
    raw: Var,
    actions: &[Vec<f64>],
    act_dim: usize,
) -> Result<(Var, Var)> {
    let b = actions.len();
    let h = cfg.action_bound;
    match cfg.policy {
        PolicyKind::Beta => {
            let a_raw = g.slice_cols(raw, 0, act_dim)?;
            let b_raw = g.slice_cols(raw, act_dim, act_dim)?;
            let sp_a = g.softplus(a_raw);
            let alpha = g.add_scalar(sp_a, 1.0 + 1e-6);
            let sp_b = g.softplus(b_raw);
            let beta = g.add_scalar(sp_b, 1.0 + 1e-6);
            let mut lnu = Vec::with_capacity(b * act_dim);
            let mut ln1u = Vec::with_capacity(b * act_dim);
            for act in actions {
                for &a in act {
                    if a.abs() >= h {
                        return Err(DhalError::Contract(format!(
                            "stored action {a} outside the Beta support bound {h}"
                        )));
                    }
                    let u = ((a + h) / (2.0 * h)).clamp(1e-6, 1.0 - 1e-6);
                    lnu.push(u.ln() as f32);
                    ln1u.push((1.0 - u).ln() as f32);
                }
            }
            let lnu = g.constant(Tensor { shape: vec![b, act_dim], data: lnu });
            let ln1u = g.constant(Tensor { shape: vec![b, act_dim], data: ln1u });

            let am1 = g.add_scalar(alpha, -1.0);
            let bm1 = g.add_scalar(beta, -1.0);
            let s = g.add(alpha, beta)?;
            let lg_a = g.lgamma(alpha);
            let lg_b = g.lgamma(beta);
            let lg_s = g.lgamma(s);
            let lbeta = g.add(lg_a, lg_b)?;
            let lbeta = g.sub(lbeta, lg_s)?;

            let t1 = g.mul(am1, lnu)?;
            let t2 = g.mul(bm1, ln1u)?;
            let lp = g.add(t1, t2)?;
            let lp = g.sub(lp, lbeta)?;
            let lp = g.add_scalar(lp, -(2.0 * h).ln() as f32);
            let lp_rows = g.sum_cols(lp);

            // H = ln B - (a-1) psi(a) - (b-1) psi(b) + (a+b-2) psi(a+b) + ln 2h.
            let ps_a = g.digamma(alpha);
            let ps_b = g.digamma(beta);
            let ps_s = g.digamma(s);
            let sm2 = g.add_scalar(s, -2.0);
            let e1 = g.mul(am1, ps_a)?;
            let e2 = g.mul(bm1, ps_b)?;
            let e3 = g.mul(sm2, ps_s)?;
            let ent = g.sub(lbeta, e1)?;
            let ent = g.sub(ent, e2)?;
            let ent = g.add(ent, e3)?;
            let ent = g.add_scalar(ent, (2.0 * h).ln() as f32);
            let ent_rows = g.sum_cols(ent);
            Ok((lp_rows, ent_rows))
        }
        PolicyKind::Gaussian => {
            let mean = g.slice_cols(raw, 0, act_dim)?;
            let logstd_raw = g.slice_cols(raw, act_dim, act_dim)?;
            let logstd = g.clamp(logstd_raw, -4.0, 1.0);
            let std = g.exp(logstd);
            let a_data: Vec<f32> =
                actions.iter().flat_map(|a| a.iter().map(|&v| v as f32)).collect();
            let a = g.constant(Tensor { shape: vec![b, act_dim], data: a_data });
            let d = g.sub(a, mean)?;
            let zc = g.div(d, std)?;
            let z2 = g.mul(zc, zc)?;
            let half = g.scale(z2, -0.5);
            let lp = g.sub(half, logstd)?;
            let ln2pi = (2.0 * std::f64::consts::PI).ln() as f32;
            let lp = g.add_scalar(lp, -0.5 * ln2pi);
            let lp_rows = g.sum_cols(lp);
            let ent = g.add_scalar(logstd, 0.5 * (1.0 + ln2pi));
            let ent_rows = g.sum_cols(ent);
            Ok((lp_rows, ent_rows))
        }
    }
}
