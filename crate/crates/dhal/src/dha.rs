//! Mode learner: a selector network over history windows plus K per-mode
//! VAE encoder/decoder pairs predicting the next observation and contact.
//!
//! The selector picks one mode per step; only the selected encoder/decoder
//! contributes forward value, and the selector trains through the
//! straight-through path of the one-hot choice plus an entropy term.

use crate::dist::{
    argmax, categorical_sample_st, gaussian_kl_unit, gaussian_reparameterize, onehot_st,
};
use crate::envs::dataset::Transition;
use crate::error::{DhalError, Result};
use crate::graph::{Graph, Var};
use crate::nn::{conv1d_forward, init_conv, init_mlp, mlp_forward, AdamState, Conv1dSpec, ConvLayer, MlpSpec};
use crate::params::ParamStore;
use crate::rng::RngStream;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DhaConfig {
    /// Maximum number of modes K.
    pub k: usize,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub contact_dim: usize,
    /// History window length in steps.
    pub window: usize,
    pub latent_dim: usize,
    pub beta_kl: f32,
    pub w_entropy: f32,
    pub selector_hidden: Vec<usize>,
    /// Output channels of the two encoder conv layers (kernel 6 stride 2,
    /// then kernel 4 stride 2).
    pub encoder_channels: [usize; 2],
    pub decoder_hidden: Vec<usize>,
    /// Drop the ELU between the conv features and the latent head, so the
    /// latent is affine in the conv features and, with `decoder_hidden: []`,
    /// the prediction is too. The single in-stack ELU stays: experts keep
    /// enough feature asymmetry to specialize, but a lone expert can no
    /// longer emulate the mode gate in its read-out, which keeps the K=1 vs
    /// K>=2 comparison about mode structure instead of optimization luck.
    #[serde(default)]
    pub linear_heads: bool,
}

impl DhaConfig {
    /// Full-size defaults.
    pub fn defaults(k: usize, obs_dim: usize, act_dim: usize, contact_dim: usize) -> Self {
        DhaConfig {
            k,
            obs_dim,
            act_dim,
            contact_dim,
            window: 20,
            latent_dim: 20,
            beta_kl: 1e-2,
            w_entropy: 0.01,
            selector_hidden: vec![256, 64, 32],
            encoder_channels: [30, 20],
            decoder_hidden: vec![256, 128, 64],
            linear_heads: false,
        }
    }

    /// Small preset for CPU-budget experiments; same structure, fewer units.
    pub fn desk(k: usize, obs_dim: usize, act_dim: usize, contact_dim: usize) -> Self {
        DhaConfig {
            selector_hidden: vec![64, 32],
            encoder_channels: [8, 8],
            latent_dim: 8,
            decoder_hidden: vec![64, 32],
            ..Self::defaults(k, obs_dim, act_dim, contact_dim)
        }
    }

    /// Window channels: one per obs dim, one per action dim, one mask.
    pub fn channels(&self) -> usize {
        self.obs_dim + self.act_dim + 1
    }

    pub fn conv_spec(&self) -> Conv1dSpec {
        Conv1dSpec {
            layers: vec![
                ConvLayer {
                    in_channels: self.channels(),
                    out_channels: self.encoder_channels[0],
                    kernel: 6,
                    stride: 2,
                },
                ConvLayer {
                    in_channels: self.encoder_channels[0],
                    out_channels: self.encoder_channels[1],
                    kernel: 4,
                    stride: 2,
                },
            ],
        }
    }

    fn selector_spec(&self) -> MlpSpec {
        let mut widths = vec![self.channels() * self.window];
        widths.extend(&self.selector_hidden);
        widths.push(self.k);
        MlpSpec::new(widths)
    }

    fn head_spec(&self) -> MlpSpec {
        let conv = self.conv_spec();
        let flat = conv.output_channels() * conv.output_len(self.window);
        MlpSpec::new(vec![flat, 2 * self.latent_dim])
    }

    fn decoder_spec(&self) -> MlpSpec {
        let mut widths = vec![self.latent_dim];
        widths.extend(&self.decoder_hidden);
        widths.push(self.obs_dim + self.contact_dim);
        MlpSpec::new(widths)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(DhalError::Config("K must be >= 1".into()));
        }
        if self.obs_dim == 0 || self.window == 0 || self.latent_dim == 0 {
            return Err(DhalError::Config("obs dim, window, and latent dim must be positive".into()));
        }
        self.conv_spec().validate(self.window)?;
        self.selector_spec().validate()?;
        self.head_spec().validate()?;
        self.decoder_spec().validate()
    }
}

/// Rolling state-action history ending at the current step: observations
/// o_{t-w+1..t} paired with the actions that led to them, zero-padded at
/// episode starts with a validity-mask channel.
#[derive(Debug, Clone)]
pub struct HistoryWindow {
    obs_dim: usize,
    act_dim: usize,
    window: usize,
    obs: Vec<Vec<f32>>,
    acts: Vec<Vec<f32>>,
}

impl HistoryWindow {
    pub fn new(obs_dim: usize, act_dim: usize, window: usize) -> Self {
        HistoryWindow { obs_dim, act_dim, window, obs: Vec::new(), acts: Vec::new() }
    }

    pub fn reset(&mut self) {
        self.obs.clear();
        self.acts.clear();
    }

    /// Appends one step: the observation and the action taken just before it
    /// (zeros at an episode start).
    pub fn push(&mut self, prev_action: &[f32], obs: &[f32]) {
        debug_assert_eq!(obs.len(), self.obs_dim);
        debug_assert_eq!(prev_action.len(), self.act_dim);
        self.obs.push(obs.to_vec());
        self.acts.push(prev_action.to_vec());
        if self.obs.len() > self.window {
            self.obs.remove(0);
            self.acts.remove(0);
        }
    }

    /// Channel-major [C, W] layout: obs channels, action channels, then the
    /// mask channel; valid slots occupy the tail of each row.
    pub fn flat(&self) -> Vec<f32> {
        let w = self.window;
        let c = self.obs_dim + self.act_dim + 1;
        let mut out = vec![0.0f32; c * w];
        let n = self.obs.len();
        let pad = w - n;
        for (j, (o, a)) in self.obs.iter().zip(&self.acts).enumerate() {
            let slot = pad + j;
            for (ci, &v) in o.iter().enumerate() {
                out[ci * w + slot] = v;
            }
            for (ci, &v) in a.iter().enumerate() {
                out[(self.obs_dim + ci) * w + slot] = v;
            }
            out[(c - 1) * w + slot] = 1.0;
        }
        out
    }
}

/// One supervised sample: a window, the next-step targets, and bookkeeping
/// used by the evaluation split.
#[derive(Debug, Clone)]
pub struct WindowSample {
    pub window: Vec<f32>,
    pub target_obs: Vec<f32>,
    pub target_contact: Vec<f32>,
    pub true_mode: Option<usize>,
    /// A labeled mode switch occurred within `SWITCH_ADJACENT_RADIUS` steps,
    /// where mode labels are ambiguous for any history-based model.
    pub switch_adjacent: bool,
}

/// Steps this close to a labeled mode switch count as switch-adjacent:
/// identification right at a transition depends on evidence that is still
/// arriving, so accuracy is reported separately there.
pub const SWITCH_ADJACENT_RADIUS: usize = 3;

/// Converts transition records into window samples, episode by episode.
pub fn build_windows(transitions: &[Transition], cfg: &DhaConfig) -> Result<Vec<WindowSample>> {
    let mut out = Vec::with_capacity(transitions.len());
    let mut hw = HistoryWindow::new(cfg.obs_dim, cfg.act_dim, cfg.window);
    let mut episode = vec![0usize; transitions.len()];
    let mut ep = 0usize;
    let zero_act = vec![0.0f32; cfg.act_dim];
    let mut prev_action = zero_act.clone();
    for (i, t) in transitions.iter().enumerate() {
        if t.obs.len() != cfg.obs_dim || t.action.len() != cfg.act_dim {
            return Err(DhalError::shape(
                &[cfg.obs_dim, cfg.act_dim],
                &[t.obs.len(), t.action.len()],
                "transition vs dha config",
            ));
        }
        if t.contacts.len() != cfg.contact_dim {
            return Err(DhalError::shape(
                &[cfg.contact_dim],
                &[t.contacts.len()],
                "contact dim vs dha config",
            ));
        }
        hw.push(&prev_action, &t.obs);
        episode[i] = ep;
        out.push(WindowSample {
            window: hw.flat(),
            target_obs: t.next_obs.clone(),
            target_contact: t.contacts.iter().map(|&c| f32::from(u8::from(c))).collect(),
            true_mode: t.true_mode,
            switch_adjacent: false,
        });
        prev_action = t.action.clone();
        if t.done {
            hw.reset();
            ep += 1;
            prev_action = zero_act.clone();
        }
    }
    let flags: Vec<bool> = (0..out.len())
        .map(|i| {
            let differs = |j: usize| {
                episode[j] == episode[i]
                    && out[j].true_mode.is_some()
                    && out[j].true_mode != out[i].true_mode
            };
            let lo = i.saturating_sub(SWITCH_ADJACENT_RADIUS);
            let hi = (i + SWITCH_ADJACENT_RADIUS + 1).min(out.len());
            out[i].true_mode.is_some() && (lo..hi).any(differs)
        })
        .collect();
    for (s, f) in out.iter_mut().zip(flags) {
        s.switch_adjacent = f;
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ModeBelief {
    pub p: Vec<f32>,
    pub onehot: Vec<f32>,
    pub index: usize,
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub next_obs: Vec<f32>,
    pub contact_probs: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct DhaModel {
    pub cfg: DhaConfig,
    pub store: ParamStore,
}

impl DhaModel {
    pub fn init(cfg: DhaConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let root = RngStream::new(seed);
        // Zeroed final selector layer: uniform initial mode probabilities.
        init_mlp(&mut store, "sel", &cfg.selector_spec(), &mut root.split(0), true)?;
        for i in 0..cfg.k {
            let mut rng = root.split(1 + i as u64);
            init_conv(&mut store, &format!("enc{i}"), &cfg.conv_spec(), &mut rng)?;
            init_mlp(&mut store, &format!("enc{i}/head"), &cfg.head_spec(), &mut rng, false)?;
            init_mlp(&mut store, &format!("dec{i}"), &cfg.decoder_spec(), &mut rng, false)?;
        }
        Ok(DhaModel { cfg, store })
    }

    pub fn from_store(cfg: DhaConfig, store: ParamStore) -> Result<Self> {
        cfg.validate()?;
        store.get("sel/l0/w")?;
        Ok(DhaModel { cfg, store })
    }
}

/// Tape handles from one batched forward pass.
pub struct DhaForward {
    /// One-hot selection with straight-through gradient, [B, K].
    pub st: Var,
    /// Mode probabilities, [B, K].
    pub p: Var,
    pub picked: Vec<usize>,
    /// Combined latent, [B, n_z].
    pub z: Var,
    /// Selected-mode latent mean, [B, n_z] (the deployment latent).
    pub z_mean: Var,
    pub pred_obs: Var,
    /// Empty-width slice when the env has no contacts.
    pub contact_logits: Var,
    /// Selected-encoder KL per row, [B, 1].
    pub kl_rows: Var,
}

fn batch_tensor(batch: &[&WindowSample], cfg: &DhaConfig) -> Tensor {
    let cw = cfg.channels() * cfg.window;
    let mut data = Vec::with_capacity(batch.len() * cw);
    for s in batch {
        debug_assert_eq!(s.window.len(), cw);
        data.extend_from_slice(&s.window);
    }
    Tensor { shape: vec![batch.len(), cw], data }
}

/// Batched selector + masked encode/decode. `deterministic` uses argmax mode
/// selection and the Gaussian mean latent.
pub fn dha_forward(
    g: &mut Graph,
    model: &DhaModel,
    windows: Tensor,
    deterministic: bool,
    rng: &mut RngStream,
) -> Result<DhaForward> {
    let cfg = &model.cfg;
    let b = windows.shape[0];
    let flat = g.constant(windows);
    let logits = mlp_forward(g, &model.store, "sel", &cfg.selector_spec(), flat)?;
    let (st, p, picked) = if deterministic {
        let p = g.row_softmax(logits);
        let pv = g.value(p);
        let picked: Vec<usize> = (0..b).map(|r| argmax(&pv[r * cfg.k..(r + 1) * cfg.k])).collect();
        let st = onehot_st(g, p, &picked)?;
        (st, p, picked)
    } else {
        categorical_sample_st(g, logits, rng)?
    };

    let conv_in = g.reshape(flat, vec![b, cfg.channels(), cfg.window])?;
    let conv = cfg.conv_spec();
    let head = cfg.head_spec();
    let nz = cfg.latent_dim;
    let mut z_acc: Option<Var> = None;
    let mut z_mean_acc: Option<Var> = None;
    let mut kl_acc: Option<Var> = None;
    for i in 0..cfg.k {
        let h = conv1d_forward(g, &model.store, &format!("enc{i}"), &conv, conv_in)?;
        let hshape = g.shape(h).to_vec();
        let hf = g.reshape(h, vec![b, hshape[1] * hshape[2]])?;
        let hf = if cfg.linear_heads { hf } else { g.elu(hf) };
        let stats = mlp_forward(g, &model.store, &format!("enc{i}/head"), &head, hf)?;
        let mean = g.slice_cols(stats, 0, nz)?;
        let logvar = g.slice_cols(stats, nz, nz)?;
        let zi = if deterministic {
            mean
        } else {
            gaussian_reparameterize(g, mean, logvar, rng)?
        };
        let di = g.slice_cols(st, i, 1)?;
        let masked_z = g.scale_rows(zi, di)?;
        let masked_mean = g.scale_rows(mean, di)?;
        let kl = gaussian_kl_unit(g, mean, logvar)?;
        let kl = g.reshape(kl, vec![b, 1])?;
        let masked_kl = g.scale_rows(kl, di)?;
        z_acc = Some(match z_acc {
            Some(acc) => g.add(acc, masked_z)?,
            None => masked_z,
        });
        z_mean_acc = Some(match z_mean_acc {
            Some(acc) => g.add(acc, masked_mean)?,
            None => masked_mean,
        });
        kl_acc = Some(match kl_acc {
            Some(acc) => g.add(acc, masked_kl)?,
            None => masked_kl,
        });
    }
    let z = z_acc.expect("K >= 1");
    let z_mean = z_mean_acc.expect("K >= 1");
    let kl_rows = kl_acc.expect("K >= 1");

    let dec = cfg.decoder_spec();
    let mut out_acc: Option<Var> = None;
    for i in 0..cfg.k {
        let oi = mlp_forward(g, &model.store, &format!("dec{i}"), &dec, z)?;
        let di = g.slice_cols(st, i, 1)?;
        let masked = g.scale_rows(oi, di)?;
        out_acc = Some(match out_acc {
            Some(acc) => g.add(acc, masked)?,
            None => masked,
        });
    }
    let out = out_acc.expect("K >= 1");
    let pred_obs = g.slice_cols(out, 0, cfg.obs_dim)?;
    let contact_logits = g.slice_cols(out, cfg.obs_dim, cfg.contact_dim)?;
    Ok(DhaForward { st, p, picked, z, z_mean, pred_obs, contact_logits, kl_rows })
}

/// Selector probabilities for one window.
pub fn mode_probabilities(model: &DhaModel, window: &[f32]) -> Result<Vec<f32>> {
    let cfg = &model.cfg;
    let mut g = Graph::new();
    let t = Tensor::new(vec![1, cfg.channels() * cfg.window], window.to_vec())?;
    let x = g.constant(t);
    let logits = mlp_forward(&mut g, &model.store, "sel", &cfg.selector_spec(), x)?;
    let p = g.row_softmax(logits);
    Ok(g.value(p).to_vec())
}

/// Full chain for one window: selector -> mode -> encoder -> decoder.
pub fn predict_next(
    model: &DhaModel,
    window: &[f32],
    rng: &mut RngStream,
    deterministic: bool,
) -> Result<(ModeBelief, Prediction, Vec<f32>)> {
    let cfg = &model.cfg;
    let mut g = Graph::new();
    let t = Tensor::new(vec![1, cfg.channels() * cfg.window], window.to_vec())?;
    let f = dha_forward(&mut g, model, t, deterministic, rng)?;
    let p = g.value(f.p).to_vec();
    let index = f.picked[0];
    let mut onehot = vec![0.0f32; cfg.k];
    onehot[index] = 1.0;
    let contact_probs = g
        .value(f.contact_logits)
        .iter()
        .map(|&l| 1.0 / (1.0 + (-l).exp()))
        .collect();
    let z = if deterministic { g.value(f.z_mean) } else { g.value(f.z) }.to_vec();
    Ok((
        ModeBelief { p, onehot, index },
        Prediction { next_obs: g.value(f.pred_obs).to_vec(), contact_probs },
        z,
    ))
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct DhaLossMetrics {
    pub total: f64,
    pub mse: f64,
    pub bce: f64,
    pub kl: f64,
    pub entropy: f64,
}

/// L = mean[MSE + BCE + beta_kl * KL] + w_H * mean H(p).
pub fn dha_loss(
    g: &mut Graph,
    model: &DhaModel,
    batch: &[&WindowSample],
    rng: &mut RngStream,
) -> Result<(Var, DhaLossMetrics)> {
    if batch.is_empty() {
        return Err(DhalError::Contract("empty dha batch".into()));
    }
    let cfg = &model.cfg;
    let b = batch.len();
    let f = dha_forward(g, model, batch_tensor(batch, cfg), false, rng)?;

    let mut tobs = Vec::with_capacity(b * cfg.obs_dim);
    let mut tcon = Vec::with_capacity(b * cfg.contact_dim);
    for s in batch {
        tobs.extend_from_slice(&s.target_obs);
        for &c in &s.target_contact {
            if c != 0.0 && c != 1.0 {
                return Err(DhalError::Data(format!("contact target {c} outside {{0,1}}")));
            }
            tcon.push(c);
        }
    }
    let target = g.constant(Tensor::new(vec![b, cfg.obs_dim], tobs)?);
    let diff = g.sub(f.pred_obs, target)?;
    let sq = g.mul(diff, diff)?;
    let mse = g.mean(sq);

    let bce = if cfg.contact_dim > 0 {
        let chat = g.sigmoid(f.contact_logits);
        let chat = g.clamp(chat, 1e-6, 1.0 - 1e-6);
        let lp = g.ln(chat);
        let neg = g.neg(chat);
        let one_minus = g.add_scalar(neg, 1.0);
        let lq = g.ln(one_minus);
        let c = g.constant(Tensor::new(vec![b, cfg.contact_dim], tcon.clone())?);
        let cm = g.constant(Tensor::new(
            vec![b, cfg.contact_dim],
            tcon.iter().map(|&v| 1.0 - v).collect(),
        )?);
        let t1 = g.mul(c, lp)?;
        let t2 = g.mul(cm, lq)?;
        let s = g.add(t1, t2)?;
        let m = g.mean(s);
        g.neg(m)
    } else {
        g.scalar(0.0)
    };

    let kl = g.mean(f.kl_rows);
    let lp = g.clamp(f.p, 1e-12, 1.0);
    let lp = g.ln(lp);
    let pl = g.mul(f.p, lp)?;
    let hrow = g.sum_cols(pl);
    let hrow = g.neg(hrow);
    let ent = g.mean(hrow);

    let kl_w = g.scale(kl, cfg.beta_kl);
    let ent_w = g.scale(ent, cfg.w_entropy);
    let t = g.add(mse, bce)?;
    let t = g.add(t, kl_w)?;
    let total = g.add(t, ent_w)?;

    let metrics = DhaLossMetrics {
        total: g.value(total)[0] as f64,
        mse: g.value(mse)[0] as f64,
        bce: g.value(bce)[0] as f64,
        kl: g.value(kl)[0] as f64,
        entropy: g.value(ent)[0] as f64,
    };
    if !metrics.total.is_finite() {
        return Err(DhalError::Numerical {
            component: "dha_loss".into(),
            detail: format!("non-finite loss: {metrics:?}"),
        });
    }
    Ok((total, metrics))
}

/// Mini-batch Adam over the full sample set. Returns the per-epoch mean loss.
pub fn train_dha(
    model: &mut DhaModel,
    samples: &[WindowSample],
    epochs: usize,
    batch_size: usize,
    lr: f32,
    seed: u64,
) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(DhalError::Data("empty training set".into()));
    }
    let mut adam = AdamState::new(lr);
    let root = RngStream::new(seed);
    let mut curve = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        root.split(epoch as u64).shuffle(&mut order);
        let mut sample_rng = root.split(1_000_000 + epoch as u64);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(batch_size.max(1)) {
            let batch: Vec<&WindowSample> = chunk.iter().map(|&i| &samples[i]).collect();
            model.store.zero_grad();
            let mut g = Graph::new();
            let (loss, m) = dha_loss(&mut g, model, &batch, &mut sample_rng)?;
            g.backward(loss, &mut model.store)?;
            adam.step(&mut model.store, &[])?;
            total += m.total;
            batches += 1;
        }
        curve.push(total / batches as f64);
    }
    Ok(curve)
}

#[derive(Debug, Clone, Serialize)]
pub struct ModeRow {
    pub mode: usize,
    pub count: usize,
    pub mse: f64,
    pub bce: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PredEvalReport {
    pub overall_mse: f64,
    pub overall_bce: f64,
    pub per_mode: Vec<ModeRow>,
    pub mode_histogram: Vec<usize>,
}

/// Deterministic-path evaluation with a per-predicted-mode breakdown.
pub fn eval_prediction_mse(model: &DhaModel, samples: &[WindowSample]) -> Result<PredEvalReport> {
    if samples.is_empty() {
        return Err(DhalError::Data("empty evaluation set".into()));
    }
    let cfg = &model.cfg;
    let mut rng = RngStream::new(0);
    let mut sums = vec![(0usize, 0.0f64, 0.0f64); cfg.k];
    for chunk in samples.chunks(512) {
        let batch: Vec<&WindowSample> = chunk.iter().collect();
        let mut g = Graph::new();
        let f = dha_forward(&mut g, model, batch_tensor(&batch, cfg), true, &mut rng)?;
        let preds = g.value(f.pred_obs);
        let logits = g.value(f.contact_logits);
        for (r, s) in batch.iter().enumerate() {
            let mode = f.picked[r];
            let mut se = 0.0f64;
            for (d, &t) in s.target_obs.iter().enumerate() {
                let e = (preds[r * cfg.obs_dim + d] - t) as f64;
                se += e * e;
            }
            se /= cfg.obs_dim as f64;
            let mut bce = 0.0f64;
            for (d, &t) in s.target_contact.iter().enumerate() {
                let l = logits[r * cfg.contact_dim + d];
                let p = (1.0 / (1.0 + (-l as f64).exp())).clamp(1e-6, 1.0 - 1e-6);
                bce -= t as f64 * p.ln() + (1.0 - t as f64) * (1.0 - p).ln();
            }
            if cfg.contact_dim > 0 {
                bce /= cfg.contact_dim as f64;
            }
            sums[mode].0 += 1;
            sums[mode].1 += se;
            sums[mode].2 += bce;
        }
    }
    let n: usize = sums.iter().map(|s| s.0).sum();
    let overall_mse = sums.iter().map(|s| s.1).sum::<f64>() / n as f64;
    let overall_bce = sums.iter().map(|s| s.2).sum::<f64>() / n as f64;
    let per_mode = sums
        .iter()
        .enumerate()
        .filter(|(_, s)| s.0 > 0)
        .map(|(i, s)| ModeRow { mode: i, count: s.0, mse: s.1 / s.0 as f64, bce: s.2 / s.0 as f64 })
        .collect();
    Ok(PredEvalReport {
        overall_mse,
        overall_bce,
        per_mode,
        mode_histogram: sums.iter().map(|s| s.0).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(k: usize) -> DhaConfig {
        DhaConfig {
            selector_hidden: vec![16],
            encoder_channels: [4, 4],
            latent_dim: 4,
            decoder_hidden: vec![16],
            ..DhaConfig::defaults(k, 2, 1, 0)
        }
    }

    fn sample(cfg: &DhaConfig, fill: f32) -> WindowSample {
        WindowSample {
            window: vec![fill; cfg.channels() * cfg.window],
            target_obs: vec![0.1, -0.2],
            target_contact: vec![],
            true_mode: Some(0),
            switch_adjacent: false,
        }
    }

    #[test]
    fn fresh_selector_is_uniform() {
        let model = DhaModel::init(cfg(3), 0).unwrap();
        let w = sample(&model.cfg, 0.5).window;
        let p = mode_probabilities(&model, &w).unwrap();
        for pi in &p {
            assert!((pi - 1.0 / 3.0).abs() < 1e-6, "{p:?}");
        }
        assert!((p.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn single_mode_probability_is_one() {
        let model = DhaModel::init(cfg(1), 0).unwrap();
        let w = sample(&model.cfg, -1.3).window;
        assert_eq!(mode_probabilities(&model, &w).unwrap(), vec![1.0]);
    }

    #[test]
    fn unselected_encoder_gets_exact_zero_gradient() {
        let mut model = DhaModel::init(cfg(2), 1).unwrap();
        let s = sample(&model.cfg, 0.7);
        // Deterministic selection is argmax; force it to mode 0 by biasing
        // the selector output layer.
        let bias = model.store.get_mut("sel/l1/b").unwrap();
        bias.data[0] = 5.0;
        let mut g = Graph::new();
        let mut rng = RngStream::new(0);
        let f = dha_forward(&mut g, &model, batch_tensor(&[&s], &model.cfg), true, &mut rng).unwrap();
        assert_eq!(f.picked, vec![0]);
        let loss = g.mean(f.pred_obs);
        g.backward(loss, &mut model.store).unwrap();
        for name in ["enc1/c0/w", "enc1/head/l0/w", "dec1/l0/w"] {
            let grad = &model.store.grad(name).unwrap().data;
            assert!(grad.iter().all(|&v| v == 0.0), "{name} has nonzero gradient");
        }
        let g0: f32 = model.store.grad("enc0/c0/w").unwrap().data.iter().map(|v| v.abs()).sum();
        assert!(g0 > 0.0, "selected encoder received no gradient");
    }

    #[test]
    fn deterministic_path_is_repeatable() {
        let model = DhaModel::init(cfg(3), 5).unwrap();
        let w = sample(&model.cfg, 0.2).window;
        let mut r1 = RngStream::new(1);
        let mut r2 = RngStream::new(99);
        let (b1, p1, z1) = predict_next(&model, &w, &mut r1, true).unwrap();
        let (b2, p2, z2) = predict_next(&model, &w, &mut r2, true).unwrap();
        assert_eq!(b1.index, b2.index);
        assert_eq!(p1.next_obs, p2.next_obs);
        assert_eq!(z1, z2);
    }

    #[test]
    fn zero_window_outputs_finite() {
        let model = DhaModel::init(cfg(2), 7).unwrap();
        let w = vec![0.0; model.cfg.channels() * model.cfg.window];
        let mut rng = RngStream::new(3);
        let (_, pred, z) = predict_next(&model, &w, &mut rng, false).unwrap();
        assert!(pred.next_obs.iter().all(|v| v.is_finite()));
        assert!(z.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn uniform_probability_entropy_term() {
        let model = DhaModel::init(cfg(3), 2).unwrap();
        let s = sample(&model.cfg, 0.4);
        let mut g = Graph::new();
        let mut rng = RngStream::new(0);
        let (_, m) = dha_loss(&mut g, &model, &[&s], &mut rng).unwrap();
        assert!((m.entropy - 3f64.ln()).abs() < 1e-5, "entropy {}", m.entropy);
    }

    #[test]
    fn single_mode_entropy_is_zero() {
        let model = DhaModel::init(cfg(1), 2).unwrap();
        let s = sample(&model.cfg, 0.4);
        let mut g = Graph::new();
        let mut rng = RngStream::new(0);
        let (_, m) = dha_loss(&mut g, &model, &[&s], &mut rng).unwrap();
        assert_eq!(m.entropy, 0.0);
    }

    #[test]
    fn contact_targets_validated() {
        let c = DhaConfig { contact_dim: 1, ..cfg(2) };
        let model = DhaModel::init(c, 0).unwrap();
        let mut s = sample(&model.cfg, 0.0);
        s.target_contact = vec![0.5];
        let mut g = Graph::new();
        let mut rng = RngStream::new(0);
        assert!(matches!(
            dha_loss(&mut g, &model, &[&s], &mut rng),
            Err(DhalError::Data(_))
        ));
    }

    #[test]
    fn training_is_deterministic_and_zero_epochs_noop() {
        let samples: Vec<WindowSample> = (0..8)
            .map(|i| {
                let c = cfg(2);
                WindowSample {
                    window: (0..c.channels() * c.window)
                        .map(|j| ((i * 31 + j) % 7) as f32 * 0.1)
                        .collect(),
                    target_obs: vec![i as f32 * 0.1, -0.3],
                    target_contact: vec![],
                    true_mode: None,
                    switch_adjacent: false,
                }
            })
            .collect();
        let run = || {
            let mut model = DhaModel::init(cfg(2), 11).unwrap();
            let curve = train_dha(&mut model, &samples, 3, 4, 1e-3, 42).unwrap();
            (model, curve)
        };
        let (m1, c1) = run();
        let (_, c2) = run();
        assert_eq!(c1, c2);

        let before = DhaModel::init(cfg(2), 11).unwrap();
        let mut after = DhaModel::init(cfg(2), 11).unwrap();
        let curve = train_dha(&mut after, &samples, 0, 4, 1e-3, 42).unwrap();
        assert!(curve.is_empty());
        for (name, t) in before.store.iter() {
            assert_eq!(t.data, after.store.get(name).unwrap().data);
        }
        drop(m1);
    }

    #[test]
    fn window_builder_pads_and_masks() {
        let c = cfg(2);
        let transitions = vec![
            Transition {
                obs: vec![1.0, 2.0],
                action: vec![0.5],
                next_obs: vec![1.1, 2.1],
                contacts: vec![],
                done: false,
                true_mode: Some(0),
            },
            Transition {
                obs: vec![1.1, 2.1],
                action: vec![-0.5],
                next_obs: vec![1.2, 2.2],
                contacts: vec![],
                done: true,
                true_mode: Some(1),
            },
        ];
        let samples = build_windows(&transitions, &c).unwrap();
        assert_eq!(samples.len(), 2);
        let w = c.window;
        let first = &samples[0].window;
        // Only the last slot is valid; mask channel is the final row.
        let mask_row = &first[(c.channels() - 1) * w..c.channels() * w];
        assert_eq!(mask_row.iter().sum::<f32>(), 1.0);
        assert_eq!(mask_row[w - 1], 1.0);
        assert_eq!(first[w - 1], 1.0);
        assert_eq!(first[2 * w - 1], 2.0);
        // The mode flips between the two steps, so both sit next to a
        // switch.
        assert!(samples[0].switch_adjacent);
        assert!(samples[1].switch_adjacent);
        let second = &samples[1].window;
        // Action channel holds the action leading into each obs.
        assert_eq!(second[2 * w + w - 1], 0.5);
        assert_eq!(second[2 * w + w - 2], 0.0);
    }

    #[test]
    fn constant_decoder_mse_equals_target_variance() {
        // Zero decoder weights and biases predict 0; MSE must equal the
        // mean square of targets.
        let mut model = DhaModel::init(cfg(1), 3).unwrap();
        for i in 0..model.cfg.decoder_spec().layers() {
            for part in ["w", "b"] {
                let t = model.store.get_mut(&format!("dec0/l{i}/{part}")).unwrap();
                t.data.fill(0.0);
            }
        }
        let samples: Vec<WindowSample> = (0..10)
            .map(|i| WindowSample {
                target_obs: vec![i as f32 * 0.1, 1.0],
                ..sample(&model.cfg, i as f32 * 0.05)
            })
            .collect();
        let report = eval_prediction_mse(&model, &samples).unwrap();
        let expect: f64 = samples
            .iter()
            .map(|s| s.target_obs.iter().map(|&t| (t as f64).powi(2)).sum::<f64>() / 2.0)
            .sum::<f64>()
            / samples.len() as f64;
        assert!((report.overall_mse - expect).abs() < 1e-6);
        assert_eq!(report.mode_histogram, vec![10]);
    }
}
