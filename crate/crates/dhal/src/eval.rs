//! Evaluation and export: permutation-matched mode accuracy against labeled
//! data, prediction reports with switch-step breakdowns, and CSV export of
//! metrics logs and actor hidden activations.
//!
//! Unsupervised mode indices are arbitrary, so accuracy is maximized over
//! all relabelings; K <= 4 everywhere, so the search is exhaustive.

use crate::dha::{
    build_windows, dha_forward, eval_prediction_mse, DhaModel, PredEvalReport, WindowSample,
};
use crate::envs::dataset::Transition;
use crate::error::{DhalError, Result};
use crate::graph::Graph;
use crate::nn::MlpSpec;
use crate::rng::RngStream;
use crate::tensor::Tensor;
use serde::Serialize;
use std::io::Write;
use std::path::Path;

/// Accuracy numbers over one subset of steps.
#[derive(Debug, Clone, Serialize)]
pub struct AccuracySection {
    /// Square confusion matrix, rows = predicted label, cols = true label,
    /// padded with zeros to max(K_pred, K_true).
    pub confusion: Vec<Vec<usize>>,
    /// Best relabeling: permutation[p] is the true label assigned to
    /// predicted label p.
    pub permutation: Vec<usize>,
    pub matched_accuracy: f64,
    /// Recall per true label under the best relabeling.
    pub per_mode_recall: Vec<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ModeAccuracyReport {
    pub k: usize,
    /// Steps whose window lies fully inside one true mode.
    pub clean: AccuracySection,
    /// Steps with a labeled mode switch inside the window.
    pub switch_adjacent: AccuracySection,
    pub usage_histogram: Vec<usize>,
}

/// All permutations of 0..n (n <= 4 in every supported config).
fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 1 {
        return vec![vec![0]];
    }
    let mut out = Vec::new();
    for sub in permutations(n - 1) {
        for at in 0..n {
            let mut p = sub.clone();
            p.insert(at, n - 1);
            out.push(p);
        }
    }
    out
}

/// Exhaustive search for the relabeling maximizing the matched count.
/// Returns (permutation, matched count).
pub fn best_permutation(confusion: &[Vec<usize>]) -> (Vec<usize>, usize) {
    let n = confusion.len();
    let mut best = (Vec::new(), 0usize);
    let mut first = true;
    for perm in permutations(n) {
        let hits: usize = (0..n).map(|p| confusion[p][perm[p]]).sum();
        if first || hits > best.1 {
            best = (perm, hits);
            first = false;
        }
    }
    best
}

fn section(confusion: Vec<Vec<usize>>) -> AccuracySection {
    let n = confusion.len();
    let total: usize = confusion.iter().flatten().sum();
    let (perm, hits) = best_permutation(&confusion);
    let mut recall = vec![0.0f64; n];
    for t in 0..n {
        let col: usize = (0..n).map(|p| confusion[p][t]).sum();
        if col > 0 {
            let p = perm.iter().position(|&x| x == t).expect("permutation is total");
            recall[t] = confusion[p][t] as f64 / col as f64;
        }
    }
    AccuracySection {
        confusion,
        permutation: perm,
        matched_accuracy: if total > 0 { hits as f64 / total as f64 } else { 0.0 },
        per_mode_recall: recall,
        count: total,
    }
}

fn sample_tensor(batch: &[&WindowSample], cw: usize) -> Tensor {
    let mut data = Vec::with_capacity(batch.len() * cw);
    for s in batch {
        data.extend_from_slice(&s.window);
    }
    Tensor { shape: vec![batch.len(), cw], data }
}

/// Deterministic predicted mode per sample, batched.
pub fn predicted_modes(model: &DhaModel, samples: &[WindowSample]) -> Result<Vec<usize>> {
    let cw = model.cfg.channels() * model.cfg.window;
    let mut rng = RngStream::new(0);
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(512) {
        let batch: Vec<&WindowSample> = chunk.iter().collect();
        let mut g = Graph::new();
        let f = dha_forward(&mut g, model, sample_tensor(&batch, cw), true, &mut rng)?;
        out.extend(f.picked);
    }
    Ok(out)
}

/// Confusion-matrix accuracy of the deterministic selector against the
/// generator's labels, split into clean and switch-adjacent steps.
pub fn eval_mode_accuracy(
    model: &DhaModel,
    transitions: &[Transition],
) -> Result<ModeAccuracyReport> {
    let samples = build_windows(transitions, &model.cfg)?;
    if samples.is_empty() {
        return Err(DhalError::Data("empty evaluation set".into()));
    }
    let k_true = samples
        .iter()
        .map(|s| s.true_mode.map(|m| m + 1))
        .collect::<Option<Vec<usize>>>()
        .ok_or_else(|| DhalError::Data("mode accuracy needs a labeled dataset".into()))?
        .into_iter()
        .max()
        .unwrap_or(0);
    let n = model.cfg.k.max(k_true);
    let picked = predicted_modes(model, &samples)?;

    let mut clean = vec![vec![0usize; n]; n];
    let mut switchy = vec![vec![0usize; n]; n];
    let mut usage = vec![0usize; model.cfg.k];
    for (s, &p) in samples.iter().zip(&picked) {
        let t = s.true_mode.expect("labels checked above");
        usage[p] += 1;
        if s.switch_adjacent {
            switchy[p][t] += 1;
        } else {
            clean[p][t] += 1;
        }
    }
    Ok(ModeAccuracyReport {
        k: n,
        clean: section(clean),
        switch_adjacent: section(switchy),
        usage_histogram: usage,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct PredictionReport {
    pub overall: PredEvalReport,
    /// MSE over switch-adjacent steps only (None when no labels).
    pub switch_mse: Option<f64>,
    pub switch_count: usize,
    pub per_dim_mse: Vec<f64>,
}

/// Prediction quality with a per-dimension breakdown and, on labeled data,
/// switch-step MSE reported separately. `overall` equals
/// `eval_prediction_mse` on the same samples.
pub fn eval_prediction(model: &DhaModel, samples: &[WindowSample]) -> Result<PredictionReport> {
    let overall = eval_prediction_mse(model, samples)?;
    let cfg = &model.cfg;
    let cw = cfg.channels() * cfg.window;
    let mut rng = RngStream::new(0);
    let mut per_dim = vec![0.0f64; cfg.obs_dim];
    let mut switch_se = 0.0f64;
    let mut switch_count = 0usize;
    let labeled = samples.iter().all(|s| s.true_mode.is_some());
    for chunk in samples.chunks(512) {
        let batch: Vec<&WindowSample> = chunk.iter().collect();
        let mut g = Graph::new();
        let f = dha_forward(&mut g, model, sample_tensor(&batch, cw), true, &mut rng)?;
        let preds = g.value(f.pred_obs);
        for (r, s) in batch.iter().enumerate() {
            let mut se = 0.0f64;
            for (d, &t) in s.target_obs.iter().enumerate() {
                let e = (preds[r * cfg.obs_dim + d] - t) as f64;
                per_dim[d] += e * e;
                se += e * e;
            }
            if s.switch_adjacent {
                switch_se += se / cfg.obs_dim as f64;
                switch_count += 1;
            }
        }
    }
    for d in &mut per_dim {
        *d /= samples.len() as f64;
    }
    Ok(PredictionReport {
        overall,
        switch_mse: if labeled && switch_count > 0 {
            Some(switch_se / switch_count as f64)
        } else {
            None
        },
        switch_count,
        per_dim_mse: per_dim,
    })
}

/// Per-step predicted vs actual next-observation traces as CSV:
/// step, predicted mode (1-based), then actual_i / predicted_i per dim.
pub fn write_trace_csv(model: &DhaModel, samples: &[WindowSample], path: &Path) -> Result<()> {
    let cfg = &model.cfg;
    let cw = cfg.channels() * cfg.window;
    let mut rng = RngStream::new(0);
    let mut out = String::new();
    out.push_str("step,mode");
    for d in 0..cfg.obs_dim {
        out.push_str(&format!(",actual_{d},predicted_{d}"));
    }
    out.push('\n');
    let mut step = 0usize;
    for chunk in samples.chunks(512) {
        let batch: Vec<&WindowSample> = chunk.iter().collect();
        let mut g = Graph::new();
        let f = dha_forward(&mut g, model, sample_tensor(&batch, cw), true, &mut rng)?;
        let preds = g.value(f.pred_obs);
        for (r, s) in batch.iter().enumerate() {
            out.push_str(&format!("{step},{}", f.picked[r] + 1));
            for (d, &t) in s.target_obs.iter().enumerate() {
                out.push_str(&format!(",{t},{}", preds[r * cfg.obs_dim + d]));
            }
            out.push('\n');
            step += 1;
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Fixed column order matching `ppo::IterMetrics`, mode histogram flattened.
const METRIC_COLUMNS: [&str; 12] = [
    "iter",
    "return_total",
    "return_glide",
    "return_push",
    "return_reg",
    "kl",
    "clip_frac",
    "clip_rate",
    "entropy",
    "lr",
    "dha_mse",
    "dha_bce",
];

/// JSON-lines metrics log to columnar CSV. Returns the data row count.
pub fn export_metrics_csv(metrics: &Path, out: &Path) -> Result<usize> {
    let text = std::fs::read_to_string(metrics)?;
    let mut rows: Vec<serde_json::Map<String, serde_json::Value>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| {
            DhalError::Data(format!("metrics line {}: invalid JSON: {e}", i + 1))
        })?;
        match v {
            serde_json::Value::Object(m) => rows.push(m),
            _ => {
                return Err(DhalError::Data(format!(
                    "metrics line {}: expected a JSON object",
                    i + 1
                )))
            }
        }
    }
    let hist_len = rows
        .first()
        .and_then(|r| r.get("mode_hist"))
        .and_then(|v| v.as_array())
        .map(|a| a.len())
        .unwrap_or(0);
    let mut csv = METRIC_COLUMNS.join(",");
    for m in 0..hist_len {
        csv.push_str(&format!(",mode_hist_{m}"));
    }
    csv.push('\n');
    for (i, row) in rows.iter().enumerate() {
        let mut fields = Vec::new();
        for col in METRIC_COLUMNS {
            let v = row.get(col).ok_or_else(|| {
                DhalError::Data(format!("metrics line {}: missing field {col:?}", i + 1))
            })?;
            fields.push(v.to_string());
        }
        let hist = row.get("mode_hist").and_then(|v| v.as_array());
        for m in 0..hist_len {
            let v = hist.and_then(|a| a.get(m)).ok_or_else(|| {
                DhalError::Data(format!("metrics line {}: short mode_hist", i + 1))
            })?;
            fields.push(v.to_string());
        }
        csv.push_str(&fields.join(","));
        csv.push('\n');
    }
    let mut f = std::fs::File::create(out)?;
    f.write_all(csv.as_bytes())?;
    Ok(rows.len())
}

/// Last-hidden-layer actor activations per evaluated step, keyed by the
/// predicted mode (1-based), for external embedding. The actor input is
/// [z, o, a_prev, indicators]; indicators are read from the observation when
/// it carries them (cart layout), else zero.
pub fn export_actor_activations(
    model: &DhaModel,
    actor_hidden: &[usize],
    transitions: &[Transition],
    out: &Path,
) -> Result<()> {
    let cfg = &model.cfg;
    if model.store.get("actor/l0/w").is_err() {
        return Err(DhalError::Data(
            "checkpoint has no actor parameters; activations need an RL checkpoint".into(),
        ));
    }
    let samples = build_windows(transitions, cfg)?;
    if samples.is_empty() {
        return Err(DhalError::Data("empty dataset".into()));
    }
    let picked = predicted_modes(model, &samples)?;
    let cw = cfg.channels() * cfg.window;
    let nz = cfg.latent_dim;
    let in_dim = nz + cfg.obs_dim + cfg.act_dim + 2;
    let mut widths = vec![in_dim];
    widths.extend(actor_hidden);
    let torso = MlpSpec::new(widths);
    let h_dim = *torso.widths.last().expect("nonempty torso");

    let mut csv = String::from("step,mode");
    for d in 0..h_dim {
        csv.push_str(&format!(",h{d}"));
    }
    csv.push('\n');

    let mut rng = RngStream::new(0);
    let mut prev_action = vec![0.0f32; cfg.act_dim];
    for (i, (s, t)) in samples.iter().zip(transitions).enumerate() {
        let mut g = Graph::new();
        let f = dha_forward(
            &mut g,
            model,
            Tensor { shape: vec![1, cw], data: s.window.clone() },
            true,
            &mut rng,
        )?;
        let mut rest = t.obs.clone();
        rest.extend_from_slice(&prev_action);
        if cfg.obs_dim >= 8 {
            rest.extend_from_slice(&t.obs[6..8]);
        } else {
            rest.extend_from_slice(&[0.0, 0.0]);
        }
        let rest = g.constant(Tensor { shape: vec![1, cfg.obs_dim + cfg.act_dim + 2], data: rest });
        let input = g.concat_cols(&[f.z_mean, rest])?;
        let h = crate::nn::mlp_forward(&mut g, &model.store, "actor", &torso, input)?;
        let h = g.elu(h);
        csv.push_str(&format!("{i},{}", picked[i] + 1));
        for &v in g.value(h) {
            csv.push_str(&format!(",{v}"));
        }
        csv.push('\n');
        prev_action = if t.done { vec![0.0; cfg.act_dim] } else { t.action.clone() };
    }
    std::fs::write(out, csv)?;
    Ok(())
}
