//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a single-use tape: forward ops append nodes, `backward`
//! sweeps the tape once and accumulates parameter gradients into the
//! [`ParamStore`]. Values are stored in f32; reductions and matrix inner
//! products accumulate in f64.

use crate::error::{DhalError, Result};
use crate::params::ParamStore;
use crate::special;
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Input { name: Option<String> },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Min(usize, usize),
    Neg(usize),
    Scale(usize, f32),
    AddScalar(usize, f32),
    Exp(usize),
    Ln(usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Elu(usize),
    Softplus(usize),
    Clamp(usize, f32, f32),
    Lgamma(usize),
    Digamma(usize),
    Linear { x: usize, w: usize, b: usize },
    Conv1d { x: usize, w: usize, b: usize, stride: usize },
    RowSoftmax(usize),
    Detach(usize),
    ConcatCols(Vec<usize>),
    SliceCols { x: usize, start: usize, len: usize },
    ScaleRows { x: usize, s: usize },
    Reshape(usize),
    Sum(usize),
    Mean(usize),
    SumCols(usize),
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f32>,
    op: Op,
}

/// Splits a shape into (rows, cols) treating the last dimension as columns.
fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    let rows = shape.iter().rev().skip(1).product::<usize>().max(1);
    (rows, cols)
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f32>, op: Op) -> Var {
        self.nodes.push(Node { shape, value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor { shape: self.nodes[v.0].shape.clone(), data: self.nodes[v.0].value.clone() }
    }

    /// Constant input (no gradient recorded beyond it).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.shape, t.data, Op::Input { name: None })
    }

    pub fn scalar(&mut self, v: f32) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Parameter leaf bound to a named entry of the store.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let t = store.get(name)?.clone();
        Ok(self.push(t.shape, t.data, Op::Input { name: Some(name.to_string()) }))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32, op: Op) -> Result<Var> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(DhalError::shape(
                &self.nodes[a.0].shape.clone(),
                &self.nodes[b.0].shape.clone(),
                "elementwise op",
            ));
        }
        let value: Vec<f32> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(self.push(self.nodes[a.0].shape.clone(), value, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x / y, Op::Div(a.0, b.0))
    }

    pub fn min(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, f32::min, Op::Min(a.0, b.0))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f32) -> f32, op: Op) -> Var {
        let value: Vec<f32> = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        self.push(self.nodes[a.0].shape.clone(), value, op)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a.0))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        self.unary(a, |x| c * x, Op::Scale(a.0, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a.0, c))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f32::exp, Op::Exp(a.0))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f32::ln, Op::Ln(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f32::tanh, Op::Tanh(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a.0))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { x.exp() - 1.0 }, Op::Elu(a.0))
    }

    /// Numerically stable log(1 + e^x).
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, stable_softplus, Op::Softplus(a.0))
    }

    pub fn clamp(&mut self, a: Var, lo: f32, hi: f32) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a.0, lo, hi))
    }

    pub fn lgamma(&mut self, a: Var) -> Var {
        self.unary(a, |x| special::lgamma(x as f64) as f32, Op::Lgamma(a.0))
    }

    pub fn digamma(&mut self, a: Var) -> Var {
        self.unary(a, |x| special::digamma(x as f64) as f32, Op::Digamma(a.0))
    }

    /// y = x W + b for x [B, n], W [n, m], b [m].
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (bs, n) = rows_cols(&self.nodes[x.0].shape);
        let ws = &self.nodes[w.0].shape;
        if ws.len() != 2 || ws[0] != n {
            return Err(DhalError::shape(&[n, 0], ws, "linear weight"));
        }
        let m = ws[1];
        if self.nodes[b.0].value.len() != m {
            return Err(DhalError::shape(&[m], &self.nodes[b.0].shape.clone(), "linear bias"));
        }
        let mut out = vec![0.0f32; bs * m];
        {
            let xv = &self.nodes[x.0].value;
            let wv = &self.nodes[w.0].value;
            let bv = &self.nodes[b.0].value;
            let mut acc = vec![0.0f64; m];
            for bi in 0..bs {
                for (a, &bias) in acc.iter_mut().zip(bv) {
                    *a = bias as f64;
                }
                for i in 0..n {
                    let xv_i = xv[bi * n + i] as f64;
                    if xv_i == 0.0 {
                        continue;
                    }
                    let wrow = &wv[i * m..(i + 1) * m];
                    for (a, &wio) in acc.iter_mut().zip(wrow) {
                        *a += xv_i * wio as f64;
                    }
                }
                for (o, &a) in out[bi * m..(bi + 1) * m].iter_mut().zip(&acc) {
                    *o = a as f32;
                }
            }
        }
        Ok(self.push(vec![bs, m], out, Op::Linear { x: x.0, w: w.0, b: b.0 }))
    }

    /// Valid (no padding) cross-correlation. x [B, Cin, L], w [Cout, Cin, k], b [Cout].
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let xs = self.nodes[x.0].shape.clone();
        let ws = self.nodes[w.0].shape.clone();
        if xs.len() != 3 || ws.len() != 3 {
            return Err(DhalError::shape(&xs, &ws, "conv1d expects 3-d input and weight"));
        }
        let (bs, cin, l) = (xs[0], xs[1], xs[2]);
        let (cout, wcin, k) = (ws[0], ws[1], ws[2]);
        if wcin != cin {
            return Err(DhalError::shape(&[cin], &[wcin], "conv1d channel mismatch"));
        }
        if l < k {
            return Err(DhalError::shape(&[k], &[l], "conv1d time length shorter than kernel"));
        }
        let t = (l - k) / stride + 1;
        let mut out = vec![0.0f32; bs * cout * t];
        {
            let xv = &self.nodes[x.0].value;
            let wv = &self.nodes[w.0].value;
            let bv = &self.nodes[b.0].value;
            for bi in 0..bs {
                for oc in 0..cout {
                    for ti in 0..t {
                        let mut acc = bv[oc] as f64;
                        for ic in 0..cin {
                            let xoff = bi * cin * l + ic * l + ti * stride;
                            let woff = oc * cin * k + ic * k;
                            for j in 0..k {
                                acc += xv[xoff + j] as f64 * wv[woff + j] as f64;
                            }
                        }
                        out[bi * cout * t + oc * t + ti] = acc as f32;
                    }
                }
            }
        }
        Ok(self.push(vec![bs, cout, t], out, Op::Conv1d { x: x.0, w: w.0, b: b.0, stride }))
    }

    /// Softmax over the last dimension, per row.
    pub fn row_softmax(&mut self, x: Var) -> Var {
        let (rows, cols) = rows_cols(&self.nodes[x.0].shape);
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0f32; xv.len()];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f64;
            for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                let e = ((v - mx) as f64).exp();
                *o = e as f32;
                sum += e;
            }
            let inv = (1.0 / sum) as f32;
            for o in &mut out[r * cols..(r + 1) * cols] {
                *o *= inv;
            }
        }
        self.push(self.nodes[x.0].shape.clone(), out, Op::RowSoftmax(x.0))
    }

    /// Forward identity, gradient barrier.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.clone();
        self.push(self.nodes[x.0].shape.clone(), v, Op::Detach(x.0))
    }

    /// Concatenates along the last dimension; all inputs share leading dims.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(DhalError::Contract("concat of zero tensors".into()));
        }
        let (rows, _) = rows_cols(&self.nodes[parts[0].0].shape);
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = rows_cols(&self.nodes[p.0].shape);
            if r != rows {
                return Err(DhalError::shape(
                    &self.nodes[parts[0].0].shape.clone(),
                    &self.nodes[p.0].shape.clone(),
                    "concat rows",
                ));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0f32; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = &self.nodes[p.0].value;
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(&pv[r * w..(r + 1) * w]);
            }
            off += w;
        }
        Ok(self.push(vec![rows, total], out, Op::ConcatCols(parts.iter().map(|p| p.0).collect())))
    }

    /// Column slice [start, start+len) of a row-major 2-d view.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = rows_cols(&self.nodes[x.0].shape);
        if start + len > cols {
            return Err(DhalError::shape(&[cols], &[start + len], "column slice out of range"));
        }
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0f32; rows * len];
        for r in 0..rows {
            out[r * len..(r + 1) * len]
                .copy_from_slice(&xv[r * cols + start..r * cols + start + len]);
        }
        Ok(self.push(vec![rows, len], out, Op::SliceCols { x: x.0, start, len }))
    }

    /// Scales each row of x [B, D] by the matching entry of s [B] (or [B, 1]).
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (rows, cols) = rows_cols(&self.nodes[x.0].shape);
        if self.nodes[s.0].value.len() != rows {
            return Err(DhalError::shape(&[rows], &self.nodes[s.0].shape.clone(), "row scales"));
        }
        let xv = &self.nodes[x.0].value;
        let sv = &self.nodes[s.0].value;
        let mut out = vec![0.0f32; xv.len()];
        for r in 0..rows {
            let sc = sv[r];
            for c in 0..cols {
                out[r * cols + c] = xv[r * cols + c] * sc;
            }
        }
        Ok(self.push(self.nodes[x.0].shape.clone(), out, Op::ScaleRows { x: x.0, s: s.0 }))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.nodes[x.0].value.len() {
            return Err(DhalError::shape(&self.nodes[x.0].shape.clone(), &shape, "reshape"));
        }
        let v = self.nodes[x.0].value.clone();
        Ok(self.push(shape, v, Op::Reshape(x.0)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.nodes[x.0].value.iter().map(|&v| v as f64).sum();
        self.push(vec![1], vec![s as f32], Op::Sum(x.0))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.len().max(1);
        let s: f64 = self.nodes[x.0].value.iter().map(|&v| v as f64).sum();
        self.push(vec![1], vec![(s / n as f64) as f32], Op::Mean(x.0))
    }

    /// Sums over the last dimension: [B, D] -> [B].
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let (rows, cols) = rows_cols(&self.nodes[x.0].shape);
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0f32; rows];
        for r in 0..rows {
            let s: f64 = xv[r * cols..(r + 1) * cols].iter().map(|&v| v as f64).sum();
            out[r] = s as f32;
        }
        self.push(vec![rows], out, Op::SumCols(x.0))
    }

    /// Reverse sweep from a scalar loss. Parameter gradients accumulate into
    /// the store; repeated calls without `zero_grad` keep accumulating.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(DhalError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            macro_rules! acc {
                ($idx:expr, $gen:expr) => {{
                    let idx: usize = $idx;
                    let slot = grads[idx]
                        .get_or_insert_with(|| vec![0.0; self.nodes[idx].value.len()]);
                    let f = $gen;
                    for j in 0..slot.len() {
                        slot[j] += f(j);
                    }
                }};
            }
            match &node.op {
                Op::Input { name } => {
                    if let Some(name) = name {
                        store.accumulate_grad(name, &g)?;
                    }
                }
                Op::Add(a, b) => {
                    acc!(*a, |j: usize| g[j]);
                    acc!(*b, |j: usize| g[j]);
                }
                Op::Sub(a, b) => {
                    acc!(*a, |j: usize| g[j]);
                    acc!(*b, |j: usize| -g[j]);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    acc!(*a, |j: usize| g[j] * bv[j]);
                    acc!(*b, |j: usize| g[j] * av[j]);
                }
                Op::Div(a, b) => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    acc!(*a, |j: usize| g[j] / bv[j]);
                    acc!(*b, |j: usize| -g[j] * av[j] / (bv[j] * bv[j]));
                }
                Op::Min(a, b) => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    acc!(*a, |j: usize| if av[j] <= bv[j] { g[j] } else { 0.0 });
                    acc!(*b, |j: usize| if av[j] > bv[j] { g[j] } else { 0.0 });
                }
                Op::Neg(a) => acc!(*a, |j: usize| -g[j]),
                Op::Scale(a, c) => {
                    let c = *c;
                    acc!(*a, |j: usize| c * g[j]);
                }
                Op::AddScalar(a, _) => acc!(*a, |j: usize| g[j]),
                Op::Exp(a) => {
                    let yv = &node.value;
                    acc!(*a, |j: usize| g[j] * yv[j]);
                }
                Op::Ln(a) => {
                    let av = &self.nodes[*a].value;
                    acc!(*a, |j: usize| g[j] / av[j]);
                }
                Op::Sigmoid(a) => {
                    let yv = &node.value;
                    acc!(*a, |j: usize| g[j] * yv[j] * (1.0 - yv[j]));
                }
                Op::Tanh(a) => {
                    let yv = &node.value;
                    acc!(*a, |j: usize| g[j] * (1.0 - yv[j] * yv[j]));
                }
                Op::Relu(a) => {
                    let av = &self.nodes[*a].value;
                    acc!(*a, |j: usize| if av[j] > 0.0 { g[j] } else { 0.0 });
                }
                Op::Elu(a) => {
                    let av = &self.nodes[*a].value;
                    let yv = &node.value;
                    acc!(*a, |j: usize| if av[j] > 0.0 { g[j] } else { g[j] * (yv[j] + 1.0) });
                }
                Op::Softplus(a) => {
                    let av = &self.nodes[*a].value;
                    acc!(*a, |j: usize| g[j] / (1.0 + (-av[j]).exp()));
                }
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    let av = &self.nodes[*a].value;
                    acc!(*a, |j: usize| if av[j] >= lo && av[j] <= hi { g[j] } else { 0.0 });
                }
                Op::Lgamma(a) => {
                    let av = &self.nodes[*a].value;
                    acc!(*a, |j: usize| g[j] * special::digamma(av[j] as f64) as f32);
                }
                Op::Digamma(a) => {
                    let av = &self.nodes[*a].value;
                    acc!(*a, |j: usize| g[j] * special::trigamma(av[j] as f64) as f32);
                }
                Op::Linear { x, w, b } => {
                    let (bs, n) = rows_cols(&self.nodes[*x].shape);
                    let m = self.nodes[*w].shape[1];
                    let xv = &self.nodes[*x].value;
                    let wv = &self.nodes[*w].value;
                    {
                        let slot =
                            grads[*x].get_or_insert_with(|| vec![0.0; self.nodes[*x].value.len()]);
                        for bi in 0..bs {
                            for ii in 0..n {
                                let mut acc = 0.0f64;
                                let wrow = &wv[ii * m..(ii + 1) * m];
                                let grow = &g[bi * m..(bi + 1) * m];
                                for (gw, gg) in wrow.iter().zip(grow) {
                                    acc += *gw as f64 * *gg as f64;
                                }
                                slot[bi * n + ii] += acc as f32;
                            }
                        }
                    }
                    {
                        let mut dw = vec![0.0f64; n * m];
                        for bi in 0..bs {
                            let grow = &g[bi * m..(bi + 1) * m];
                            for ii in 0..n {
                                let xbi = xv[bi * n + ii] as f64;
                                if xbi == 0.0 {
                                    continue;
                                }
                                let drow = &mut dw[ii * m..(ii + 1) * m];
                                for (d, &gg) in drow.iter_mut().zip(grow) {
                                    *d += xbi * gg as f64;
                                }
                            }
                        }
                        let slot = grads[*w].get_or_insert_with(|| vec![0.0; n * m]);
                        for (s, d) in slot.iter_mut().zip(&dw) {
                            *s += *d as f32;
                        }
                    }
                    {
                        let slot = grads[*b].get_or_insert_with(|| vec![0.0; m]);
                        for bi in 0..bs {
                            for (s, &gg) in slot.iter_mut().zip(&g[bi * m..(bi + 1) * m]) {
                                *s += gg;
                            }
                        }
                    }
                }
                Op::Conv1d { x, w, b, stride } => {
                    let xs = &self.nodes[*x].shape;
                    let ws = &self.nodes[*w].shape;
                    let (bs, cin, l) = (xs[0], xs[1], xs[2]);
                    let (cout, _, k) = (ws[0], ws[1], ws[2]);
                    let t = (l - k) / stride + 1;
                    let xv = &self.nodes[*x].value;
                    let wv = &self.nodes[*w].value;
                    {
                        let slot = grads[*x].get_or_insert_with(|| vec![0.0; xv.len()]);
                        for bi in 0..bs {
                            for oc in 0..cout {
                                for ti in 0..t {
                                    let gg = g[bi * cout * t + oc * t + ti];
                                    if gg == 0.0 {
                                        continue;
                                    }
                                    for ic in 0..cin {
                                        let xoff = bi * cin * l + ic * l + ti * stride;
                                        let woff = oc * cin * k + ic * k;
                                        for j in 0..k {
                                            slot[xoff + j] += gg * wv[woff + j];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    {
                        let slot = grads[*w].get_or_insert_with(|| vec![0.0; wv.len()]);
                        for bi in 0..bs {
                            for oc in 0..cout {
                                for ti in 0..t {
                                    let gg = g[bi * cout * t + oc * t + ti];
                                    if gg == 0.0 {
                                        continue;
                                    }
                                    for ic in 0..cin {
                                        let xoff = bi * cin * l + ic * l + ti * stride;
                                        let woff = oc * cin * k + ic * k;
                                        for j in 0..k {
                                            slot[woff + j] += gg * xv[xoff + j];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    {
                        let slot = grads[*b].get_or_insert_with(|| vec![0.0; cout]);
                        for bi in 0..bs {
                            for oc in 0..cout {
                                for ti in 0..t {
                                    slot[oc] += g[bi * cout * t + oc * t + ti];
                                }
                            }
                        }
                    }
                }
                Op::RowSoftmax(a) => {
                    let (rows, cols) = rows_cols(&node.shape);
                    let pv = &node.value;
                    let slot = grads[*a].get_or_insert_with(|| vec![0.0; pv.len()]);
                    for r in 0..rows {
                        let mut dot = 0.0f64;
                        for c in 0..cols {
                            dot += g[r * cols + c] as f64 * pv[r * cols + c] as f64;
                        }
                        for c in 0..cols {
                            let idx = r * cols + c;
                            slot[idx] += pv[idx] * (g[idx] - dot as f32);
                        }
                    }
                }
                Op::Detach(_) => {}
                Op::ConcatCols(parts) => {
                    let total = *node.shape.last().unwrap();
                    let rows = node.value.len() / total;
                    let mut off = 0;
                    for &p in parts {
                        let (_, w) = rows_cols(&self.nodes[p].shape);
                        let slot =
                            grads[p].get_or_insert_with(|| vec![0.0; self.nodes[p].value.len()]);
                        for r in 0..rows {
                            for c in 0..w {
                                slot[r * w + c] += g[r * total + off + c];
                            }
                        }
                        off += w;
                    }
                }
                Op::SliceCols { x, start, len } => {
                    let (rows, cols) = rows_cols(&self.nodes[*x].shape);
                    let slot =
                        grads[*x].get_or_insert_with(|| vec![0.0; self.nodes[*x].value.len()]);
                    for r in 0..rows {
                        for c in 0..*len {
                            slot[r * cols + start + c] += g[r * len + c];
                        }
                    }
                }
                Op::ScaleRows { x, s } => {
                    let (rows, cols) = rows_cols(&self.nodes[*x].shape);
                    let xv = &self.nodes[*x].value;
                    let sv = &self.nodes[*s].value;
                    {
                        let slot = grads[*x].get_or_insert_with(|| vec![0.0; xv.len()]);
                        for r in 0..rows {
                            for c in 0..cols {
                                slot[r * cols + c] += g[r * cols + c] * sv[r];
                            }
                        }
                    }
                    {
                        let slot = grads[*s].get_or_insert_with(|| vec![0.0; rows]);
                        for r in 0..rows {
                            let mut acc = 0.0f64;
                            for c in 0..cols {
                                acc += g[r * cols + c] as f64 * xv[r * cols + c] as f64;
                            }
                            slot[r] += acc as f32;
                        }
                    }
                }
                Op::Reshape(a) => acc!(*a, |j: usize| g[j]),
                Op::Sum(a) => {
                    let g0 = g[0];
                    acc!(*a, |_j: usize| g0);
                }
                Op::Mean(a) => {
                    let gn = g[0] / self.nodes[*a].value.len().max(1) as f32;
                    acc!(*a, |_j: usize| gn);
                }
                Op::SumCols(a) => {
                    let (_, cols) = rows_cols(&self.nodes[*a].shape);
                    acc!(*a, |j: usize| g[j / cols]);
                }
            }
        }
        Ok(())
    }
}

/// log(1 + e^x) with the linear branch for large x.
pub fn stable_softplus(x: f32) -> f32 {
    if x > 20.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, t: Tensor) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(name, t).unwrap();
        s
    }

    #[test]
    fn linear_grad_of_weighted_sum_is_input() {
        // loss = sum(w .* x), x constant -> grad w = x
        let mut store = store_with("w", Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let mut g = Graph::new();
        let w = g.param(&store, "w").unwrap();
        let x = g.constant(Tensor::from_vec(vec![4.0, -5.0, 6.0]));
        let p = g.mul(w, x).unwrap();
        let loss = g.sum(p);
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad("w").unwrap().data, vec![4.0, -5.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut store = store_with("w", Tensor::from_vec(vec![1.0, 2.0]));
        let mut g = Graph::new();
        let w = g.param(&store, "w").unwrap();
        assert!(g.backward(w, &mut store).is_err());
    }

    #[test]
    fn detached_loss_leaves_gradients_zero() {
        let mut store = store_with("w", Tensor::from_vec(vec![1.0, 2.0]));
        let mut g = Graph::new();
        let w = g.param(&store, "w").unwrap();
        let d = g.detach(w);
        let loss = g.sum(d);
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad("w").unwrap().data, vec![0.0, 0.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut store = store_with("w", Tensor::from_vec(vec![1.0]));
        let mut g = Graph::new();
        let w = g.param(&store, "w").unwrap();
        let loss = g.sum(w);
        g.backward(loss, &mut store).unwrap();
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad("w").unwrap().data, vec![2.0]);
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![1, 3], vec![0.1, -0.4, 2.0]).unwrap());
        let b = g.add_scalar(a, 13.7);
        let pa = g.row_softmax(a);
        let pb = g.row_softmax(b);
        for (x, y) in g.value(pa).iter().zip(g.value(pb)) {
            assert!((x - y).abs() < 1e-7);
        }
    }

    #[test]
    fn conv1d_output_length_closed_form() {
        for (l, k, s) in [(20usize, 6usize, 2usize), (8, 4, 2), (10, 3, 1), (7, 7, 3)] {
            let mut g = Graph::new();
            let x = g.constant(Tensor::zeros(vec![1, 1, l]));
            let w = g.constant(Tensor::zeros(vec![1, 1, k]));
            let b = g.constant(Tensor::zeros(vec![1]));
            let y = g.conv1d(x, w, b, s).unwrap();
            assert_eq!(g.shape(y)[2], (l - k) / s + 1, "l={l} k={k} s={s}");
        }
    }

    #[test]
    fn conv1d_short_input_rejected() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![1, 1, 3]));
        let w = g.constant(Tensor::zeros(vec![1, 1, 6]));
        let b = g.constant(Tensor::zeros(vec![1]));
        assert!(g.conv1d(x, w, b, 2).is_err());
    }

    #[test]
    fn min_routes_gradient_to_smaller_branch() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::from_vec(vec![1.0, 5.0])).unwrap();
        store.insert("b", Tensor::from_vec(vec![3.0, 2.0])).unwrap();
        let mut g = Graph::new();
        let a = g.param(&store, "a").unwrap();
        let b = g.param(&store, "b").unwrap();
        let m = g.min(a, b).unwrap();
        let loss = g.sum(m);
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad("a").unwrap().data, vec![1.0, 0.0]);
        assert_eq!(store.grad("b").unwrap().data, vec![0.0, 1.0]);
    }
}
