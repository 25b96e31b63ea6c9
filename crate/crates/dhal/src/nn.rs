//! Layer specs, initialization, forward helpers, and the Adam optimizer.

use crate::error::{DhalError, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::rng::RngStream;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HiddenAct {
    Elu,
    Relu,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputAct {
    None,
    SoftplusOffset,
    Sigmoid,
}

/// Dense stack. `widths[0]` is the input size, the last entry the output size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub hidden: HiddenAct,
    pub output: OutputAct,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>) -> Self {
        MlpSpec { widths, hidden: HiddenAct::Elu, output: OutputAct::None }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(DhalError::Config("MLP needs an input and an output width".into()));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(DhalError::Config("MLP widths must be positive".into()));
        }
        Ok(())
    }

    pub fn layers(&self) -> usize {
        self.widths.len() - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// 1-D convolution stack over a fixed-length time window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv1dSpec {
    pub layers: Vec<ConvLayer>,
}

impl Conv1dSpec {
    pub fn validate(&self, input_len: usize) -> Result<()> {
        if self.layers.is_empty() {
            return Err(DhalError::Config("conv spec needs at least one layer".into()));
        }
        let mut len = input_len;
        for (i, l) in self.layers.iter().enumerate() {
            if l.in_channels == 0 || l.out_channels == 0 || l.kernel == 0 || l.stride == 0 {
                return Err(DhalError::Config(format!("conv layer {i} has a zero dimension")));
            }
            if len < l.kernel {
                return Err(DhalError::shape(&[l.kernel], &[len], "conv layer input too short"));
            }
            len = (len - l.kernel) / l.stride + 1;
        }
        Ok(())
    }

    /// Temporal length after the full stack: repeated floor((L - k) / s) + 1.
    pub fn output_len(&self, input_len: usize) -> usize {
        let mut len = input_len;
        for l in &self.layers {
            len = (len - l.kernel) / l.stride + 1;
        }
        len
    }

    pub fn output_channels(&self) -> usize {
        self.layers.last().map(|l| l.out_channels).unwrap_or(0)
    }
}

fn init_uniform(rng: &mut RngStream, shape: Vec<usize>, limit: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform_range(-limit, limit) as f32).collect();
    Tensor { shape, data }
}

/// Registers MLP parameters under `{prefix}/l{i}/{w,b}`. With `zero_last` the
/// final layer starts at exactly zero (uniform logits / zero outputs).
pub fn init_mlp(
    store: &mut ParamStore,
    prefix: &str,
    spec: &MlpSpec,
    rng: &mut RngStream,
    zero_last: bool,
) -> Result<()> {
    spec.validate()?;
    for i in 0..spec.layers() {
        let (fan_in, fan_out) = (spec.widths[i], spec.widths[i + 1]);
        let w = if zero_last && i == spec.layers() - 1 {
            Tensor::zeros(vec![fan_in, fan_out])
        } else {
            init_uniform(rng, vec![fan_in, fan_out], (6.0 / fan_in as f64).sqrt())
        };
        store.insert(&format!("{prefix}/l{i}/w"), w)?;
        store.insert(&format!("{prefix}/l{i}/b"), Tensor::zeros(vec![fan_out]))?;
    }
    Ok(())
}

/// MLP forward on the tape. Input rows map independently.
pub fn mlp_forward(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    spec: &MlpSpec,
    input: Var,
) -> Result<Var> {
    let in_dim = *g.shape(input).last().unwrap_or(&0);
    if in_dim != spec.widths[0] {
        return Err(DhalError::shape(&[spec.widths[0]], &[in_dim], "mlp input width"));
    }
    let mut h = input;
    for i in 0..spec.layers() {
        let w = g.param(store, &format!("{prefix}/l{i}/w"))?;
        let b = g.param(store, &format!("{prefix}/l{i}/b"))?;
        h = g.linear(h, w, b)?;
        if i + 1 < spec.layers() {
            h = match spec.hidden {
                HiddenAct::Elu => g.elu(h),
                HiddenAct::Relu => g.relu(h),
                HiddenAct::Tanh => g.tanh(h),
            };
        }
    }
    Ok(match spec.output {
        OutputAct::None => h,
        OutputAct::Sigmoid => g.sigmoid(h),
        OutputAct::SoftplusOffset => {
            let sp = g.softplus(h);
            g.add_scalar(sp, 1.0 + 1e-6)
        }
    })
}

/// Registers conv-stack parameters under `{prefix}/c{i}/{w,b}`.
pub fn init_conv(
    store: &mut ParamStore,
    prefix: &str,
    spec: &Conv1dSpec,
    rng: &mut RngStream,
) -> Result<()> {
    for (i, l) in spec.layers.iter().enumerate() {
        let fan_in = l.in_channels * l.kernel;
        let w = init_uniform(
            rng,
            vec![l.out_channels, l.in_channels, l.kernel],
            (6.0 / fan_in as f64).sqrt(),
        );
        store.insert(&format!("{prefix}/c{i}/w"), w)?;
        store.insert(&format!("{prefix}/c{i}/b"), Tensor::zeros(vec![l.out_channels]))?;
    }
    Ok(())
}

/// Conv stack forward with ELU between layers. Input [B, C, L] (or [C, L],
/// treated as batch 1).
pub fn conv1d_forward(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    spec: &Conv1dSpec,
    input: Var,
) -> Result<Var> {
    let mut h = if g.shape(input).len() == 2 {
        let s = g.shape(input).to_vec();
        g.reshape(input, vec![1, s[0], s[1]])?
    } else {
        input
    };
    for i in 0..spec.layers.len() {
        let w = g.param(store, &format!("{prefix}/c{i}/w"))?;
        let b = g.param(store, &format!("{prefix}/c{i}/b"))?;
        h = g.conv1d(h, w, b, spec.layers[i].stride)?;
        if i + 1 < spec.layers.len() {
            h = g.elu(h);
        }
    }
    Ok(h)
}

/// Adam with bias correction. Moments are allocated lazily per parameter name.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u64,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl AdamState {
    pub fn new(lr: f32) -> Self {
        AdamState { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter whose name starts with one of the
    /// given prefixes (all parameters when empty). Gradients are left intact;
    /// the caller zeroes them.
    pub fn step(&mut self, store: &mut ParamStore, prefixes: &[&str]) -> Result<()> {
        self.step += 1;
        let names: Vec<String> = store
            .names()
            .filter(|n| prefixes.is_empty() || prefixes.iter().any(|p| n.starts_with(p)))
            .cloned()
            .collect();
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for name in names {
            let grad = store.grad(&name)?.data.clone();
            let param = store.get_mut(&name)?;
            if grad.len() != param.data.len() {
                return Err(DhalError::Contract(format!("gradient shape mismatch for {name}")));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
            for i in 0..grad.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                param.data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_linear_layer_passes_input_through() {
        let mut store = ParamStore::new();
        store
            .insert(
                "id/l0/w",
                Tensor::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap(),
            )
            .unwrap();
        store.insert("id/l0/b", Tensor::zeros(vec![3])).unwrap();
        let spec = MlpSpec::new(vec![3, 3]);
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = mlp_forward(&mut g, &store, "id", &spec, x).unwrap();
        assert_eq!(g.value(y), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn zero_weights_emit_bias() {
        let mut store = ParamStore::new();
        store.insert("z/l0/w", Tensor::zeros(vec![3, 1])).unwrap();
        store.insert("z/l0/b", Tensor::from_vec(vec![0.5])).unwrap();
        let spec = MlpSpec::new(vec![3, 1]);
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 3], vec![1.0, -7.0, 2.0, 0.0, 3.0, 9.0]).unwrap());
        let y = mlp_forward(&mut g, &store, "z", &spec, x).unwrap();
        assert_eq!(g.value(y), &[0.5, 0.5]);
    }

    #[test]
    fn mlp_input_width_mismatch_reports_both_shapes() {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(0);
        let spec = MlpSpec::new(vec![4, 2]);
        init_mlp(&mut store, "m", &spec, &mut rng, false).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![1, 3]));
        let err = mlp_forward(&mut g, &store, "m", &spec, x).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('4') && msg.contains('3'), "{msg}");
    }

    #[test]
    fn conv_identity_kernel() {
        let mut store = ParamStore::new();
        store.insert("c/c0/w", Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap()).unwrap();
        store.insert("c/c0/b", Tensor::zeros(vec![1])).unwrap();
        let spec = Conv1dSpec {
            layers: vec![ConvLayer { in_channels: 1, out_channels: 1, kernel: 1, stride: 1 }],
        };
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 3], vec![4.0, 5.0, 6.0]).unwrap());
        let y = conv1d_forward(&mut g, &store, "c", &spec, x).unwrap();
        assert_eq!(g.value(y), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn conv_hand_cross_correlation() {
        // kernel [1,1], stride 2 over [1,2,3,4] -> [3, 7]
        let mut store = ParamStore::new();
        store.insert("c/c0/w", Tensor::new(vec![1, 1, 2], vec![1.0, 1.0]).unwrap()).unwrap();
        store.insert("c/c0/b", Tensor::zeros(vec![1])).unwrap();
        let spec = Conv1dSpec {
            layers: vec![ConvLayer { in_channels: 1, out_channels: 1, kernel: 2, stride: 2 }],
        };
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = conv1d_forward(&mut g, &store, "c", &spec, x).unwrap();
        assert_eq!(g.value(y), &[3.0, 7.0]);
    }

    #[test]
    fn conv_window_length() {
        let spec = Conv1dSpec {
            layers: vec![ConvLayer { in_channels: 1, out_channels: 1, kernel: 6, stride: 2 }],
        };
        assert_eq!(spec.output_len(20), 8);
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::from_vec(vec![1.0, -2.0])).unwrap();
        let mut adam = AdamState::new(0.1);
        adam.step(&mut store, &[]).unwrap();
        assert_eq!(store.get("w").unwrap().data, vec![1.0, -2.0]);
    }

    #[test]
    fn adam_first_step_matches_closed_form() {
        // With constant gradient g=1 the bias-corrected moment ratio is 1 at
        // step 1, so the parameter moves by ~lr.
        let mut store = ParamStore::new();
        store.insert("w", Tensor::from_vec(vec![0.0])).unwrap();
        store.accumulate_grad("w", &[1.0]).unwrap();
        let mut adam = AdamState::new(0.1);
        adam.step(&mut store, &[]).unwrap();
        let w = store.get("w").unwrap().data[0];
        assert!((w + 0.1).abs() < 1e-6, "w={w}");
    }

    #[test]
    fn adam_deterministic_across_runs() {
        let run = || {
            let mut store = ParamStore::new();
            let mut rng = RngStream::new(9);
            let spec = MlpSpec::new(vec![2, 4, 1]);
            init_mlp(&mut store, "m", &spec, &mut rng, false).unwrap();
            let mut adam = AdamState::new(1e-3);
            for step in 0..100 {
                store.zero_grad();
                let mut g = Graph::new();
                let x = g
                    .constant(Tensor::new(vec![1, 2], vec![step as f32 * 0.01, -0.3]).unwrap());
                let y = mlp_forward(&mut g, &store, "m", &spec, x).unwrap();
                let loss = {
                    let sq = g.mul(y, y).unwrap();
                    g.mean(sq)
                };
                g.backward(loss, &mut store).unwrap();
                adam.step(&mut store, &[]).unwrap();
            }
            store
        };
        let a = run();
        let b = run();
        for (name, t) in a.iter() {
            assert_eq!(t.data, b.get(name).unwrap().data, "{name}");
        }
    }
}
