//! Switching linear dynamical systems with verifiable ground-truth modes.

use crate::envs::dataset::Transition;
use crate::error::{DhalError, Result};
use crate::rng::RngStream;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum SwitchRule {
    /// Mode from a sign partition of the state space (x0, then x1 for K > 2).
    Region,
    /// Row-stochastic transition matrix over modes.
    Markov { rows: Vec<Vec<f64>> },
    /// Fixed dwell time per mode, cycling 0..K.
    Dwell { steps: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SldsSpec {
    pub k_true: usize,
    pub state_dim: usize,
    pub input_dim: usize,
    /// Row-major n x n state matrices, one per mode.
    pub a: Vec<Vec<f64>>,
    /// Row-major n x m input matrices, one per mode.
    pub b: Vec<Vec<f64>>,
    pub noise_std: f64,
    pub rule: SwitchRule,
}

impl SldsSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k_true == 0 || self.state_dim == 0 {
            return Err(DhalError::Config("SLDS needs at least one mode and state dim".into()));
        }
        if self.a.len() != self.k_true || self.b.len() != self.k_true {
            return Err(DhalError::Config("one A and B matrix required per mode".into()));
        }
        let n = self.state_dim;
        for (i, a) in self.a.iter().enumerate() {
            if a.len() != n * n {
                return Err(DhalError::shape(&[n, n], &[a.len()], "SLDS A matrix"));
            }
            if self.b[i].len() != n * self.input_dim {
                return Err(DhalError::shape(&[n, self.input_dim], &[self.b[i].len()], "SLDS B matrix"));
            }
        }
        if self.noise_std < 0.0 {
            return Err(DhalError::Config("noise std must be non-negative".into()));
        }
        // Dynamics per mode must be unique.
        for i in 0..self.k_true {
            for j in i + 1..self.k_true {
                let max_diff = self.a[i]
                    .iter()
                    .zip(&self.a[j])
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0f64, f64::max);
                if max_diff <= 1e-3 {
                    return Err(DhalError::Config(format!("modes {i} and {j} are not distinct")));
                }
            }
        }
        if let SwitchRule::Markov { rows } = &self.rule {
            if rows.len() != self.k_true {
                return Err(DhalError::Config("markov matrix row count != modes".into()));
            }
            for r in rows {
                if (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return Err(DhalError::Config("markov rows must sum to 1".into()));
                }
            }
        }
        Ok(())
    }

    /// Default 2-mode region-switched system: rotation whose speed depends
    /// on the half-plane of x0 (fast on the right, slow on the left), with
    /// mild damping. Trajectories cross the boundary cleanly instead of
    /// sliding along it, each mode is a plain linear map, and the combined
    /// vector field jumps at the boundary.
    ///
    /// Process noise is deliberately large (0.1). Over a noiseless stretch of
    /// constant mode the product of the two characteristic polynomials gives
    /// one higher-order autoregression that is exact for both modes, so a
    /// single history-based predictor could match the mode-aware one and the
    /// K=1 vs K=2 comparison would collapse. That recursion filters the
    /// innovations through the other mode's polynomial and amplifies their
    /// variance several-fold, while the true one-step model pays exactly one
    /// noise term, so under real noise knowing the mode is worth a constant
    /// MSE factor.
    pub fn default_two_mode() -> Self {
        let block = |t1: f64, t2: f64| {
            let d = 0.995;
            let (c1, s1) = (d * t1.cos(), d * t1.sin());
            let (c2, s2) = (d * t2.cos(), d * t2.sin());
            vec![
                c1, -s1, 0.0, 0.0, //
                s1, c1, 0.0, 0.0, //
                0.0, 0.0, c2, -s2, //
                0.0, 0.0, s2, c2,
            ]
        };
        SldsSpec {
            k_true: 2,
            state_dim: 4,
            input_dim: 1,
            a: vec![block(0.5, 0.4), block(0.15, 2.4)],
            b: vec![vec![0.0, 1.0, 0.0, 1.0], vec![0.0, 1.0, 0.0, 1.0]],
            noise_std: 0.1,
            rule: SwitchRule::Region,
        }
    }
}

fn region_mode(x: &[f64], k: usize) -> usize {
    if k <= 1 {
        return 0;
    }
    let mut idx = usize::from(x[0] < 0.0);
    if k > 2 && x.len() > 1 {
        idx += 2 * usize::from(x[1] < 0.0);
    }
    idx.min(k - 1)
}

/// Simulator instance holding the switching-rule memory.
#[derive(Debug, Clone)]
pub struct SldsSim {
    pub spec: SldsSpec,
    mode: usize,
    dwell_count: usize,
}

impl SldsSim {
    pub fn new(spec: SldsSpec) -> Result<Self> {
        spec.validate()?;
        Ok(SldsSim { spec, mode: 0, dwell_count: 0 })
    }

    pub fn reset(&mut self) {
        self.mode = 0;
        self.dwell_count = 0;
    }

    /// x' = A_i x + B_i u + noise; the active mode i is returned for
    /// evaluation only.
    pub fn step(&mut self, x: &[f64], u: &[f64], rng: &mut RngStream) -> Result<(Vec<f64>, usize)> {
        let n = self.spec.state_dim;
        let m = self.spec.input_dim;
        if x.len() != n || u.len() != m {
            return Err(DhalError::shape(&[n, m], &[x.len(), u.len()], "slds step dimensions"));
        }
        let mode = match &self.spec.rule {
            SwitchRule::Region => region_mode(x, self.spec.k_true),
            SwitchRule::Markov { rows } => {
                let probs: Vec<f32> = rows[self.mode].iter().map(|&p| p as f32).collect();
                rng.categorical(&probs)
            }
            SwitchRule::Dwell { steps } => {
                if self.dwell_count >= *steps {
                    self.mode = (self.mode + 1) % self.spec.k_true;
                    self.dwell_count = 0;
                }
                self.mode
            }
        };
        self.mode = mode;
        self.dwell_count += 1;
        let a = &self.spec.a[mode];
        let b = &self.spec.b[mode];
        let mut next = vec![0.0f64; n];
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += a[i * n + j] * x[j];
            }
            for j in 0..m {
                acc += b[i * m + j] * u[j];
            }
            if self.spec.noise_std > 0.0 {
                acc += self.spec.noise_std * rng.normal();
            }
            next[i] = acc;
        }
        Ok((next, mode))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputPolicy {
    Zero,
    /// Seeded white noise, unit std scaled by the given factor.
    Noise,
}

/// Generates a labeled transition set, episode-major, deterministic in seed.
pub fn slds_generate(
    spec: &SldsSpec,
    episodes: usize,
    steps: usize,
    input_policy: InputPolicy,
    noise_scale: f64,
    seed: u64,
) -> Result<Vec<Transition>> {
    if episodes == 0 || steps == 0 {
        return Err(DhalError::Config("episodes and steps must be >= 1".into()));
    }
    let mut sim = SldsSim::new(spec.clone())?;
    let root = RngStream::new(seed);
    let mut out = Vec::with_capacity(episodes * steps);
    for ep in 0..episodes {
        let mut rng = root.split(ep as u64);
        sim.reset();
        let mut x: Vec<f64> =
            (0..spec.state_dim).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        for t in 0..steps {
            let u: Vec<f64> = match input_policy {
                InputPolicy::Zero => vec![0.0; spec.input_dim],
                InputPolicy::Noise => {
                    (0..spec.input_dim).map(|_| noise_scale * rng.normal()).collect()
                }
            };
            let (next, mode) = sim.step(&x, &u, &mut rng)?;
            out.push(Transition {
                obs: x.iter().map(|&v| v as f32).collect(),
                action: u.iter().map(|&v| v as f32).collect(),
                next_obs: next.iter().map(|&v| v as f32).collect(),
                contacts: vec![],
                done: t + 1 == steps,
                true_mode: Some(mode),
            });
            x = next;
        }
    }
    Ok(out)
}
