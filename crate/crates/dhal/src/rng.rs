//! Counter-based deterministic random streams.
//!
//! Every source of randomness in the crate funnels through [`RngStream`], a
//! splittable counter-based generator built on the splitmix64 finalizer. The
//! integer output sequence depends only on (seed, counter), so identical seeds
//! reproduce identical streams across runs and platforms, and `split` derives
//! independent child streams for parallel components.

/// Splittable counter-based random stream.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    counter: u64,
    /// Cached second output of the last Box-Muller pair.
    gauss_spare: Option<f64>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream { seed, counter: 0, gauss_spare: None }
    }

    /// Derives an independent child stream. Children with distinct tags are
    /// statistically independent of each other and of the parent.
    pub fn split(&self, tag: u64) -> Self {
        RngStream::new(splitmix64(self.seed ^ splitmix64(tag.wrapping_mul(0xa076_1d64_78bd_642f))))
    }

    pub fn next_u64(&mut self) -> u64 {
        let out = splitmix64(self.seed.wrapping_add(splitmix64(self.counter)));
        self.counter = self.counter.wrapping_add(1);
        out
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Uniform in [lo, hi).
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        if let Some(v) = self.gauss_spare.take() {
            return v;
        }
        // u1 in (0, 1] so the log is finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.gauss_spare = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Gamma(shape, 1) via Marsaglia-Tsang. Valid for shape >= 1, which covers
    /// every admissible Beta parameterization here (alpha, beta >= 1).
    pub fn gamma(&mut self, shape: f64) -> f64 {
        debug_assert!(shape >= 1.0);
        let d = shape - 1.0 / 3.0;
        let c = 1.0 / (9.0 * d).sqrt();
        loop {
            let x = self.normal();
            let v = 1.0 + c * x;
            if v <= 0.0 {
                continue;
            }
            let v3 = v * v * v;
            let u = self.uniform();
            if u < 1.0 - 0.0331 * x * x * x * x {
                return d * v3;
            }
            if u > 0.0 && u.ln() < 0.5 * x * x + d * (1.0 - v3 + v3.ln()) {
                return d * v3;
            }
        }
    }

    /// Beta(alpha, beta) on [0, 1] as a gamma ratio.
    pub fn beta(&mut self, alpha: f64, beta: f64) -> f64 {
        let x = self.gamma(alpha);
        let y = self.gamma(beta);
        x / (x + y)
    }

    /// Categorical sample from a probability vector (assumed to sum to 1).
    pub fn categorical(&mut self, probs: &[f32]) -> usize {
        let u = self.uniform() as f32;
        let mut acc = 0.0f32;
        for (i, &p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        probs.len() - 1
    }

    /// Fisher-Yates shuffle of an index slice.
    pub fn shuffle(&mut self, xs: &mut [usize]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}
