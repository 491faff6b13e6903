//! Small stride-1 convolutional building blocks with hand-written backward
//! passes, plus SGD/Adam.
//!
//! Tensors are flat `f64` slices in HWC order. Conv weights are laid out as
//! `[ky][kx][cin][cout]` so the innermost loop runs over output channels.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::Rng;

/// Flat list of parameter buffers, in the owning network's canonical order.
pub type Grads = Vec<Vec<f64>>;

pub trait Parameterized {
    fn params(&self) -> Vec<&Vec<f64>>;
    fn params_mut(&mut self) -> Vec<&mut Vec<f64>>;

    fn zero_grads(&self) -> Grads {
        self.params().iter().map(|p| vec![0.0; p.len()]).collect()
    }
}

pub fn add_grads(acc: &mut Grads, g: &Grads) {
    for (a, b) in acc.iter_mut().zip(g) {
        for (x, y) in a.iter_mut().zip(b) {
            *x += y;
        }
    }
}

pub fn scale_grads(g: &mut Grads, s: f64) {
    for v in g.iter_mut().flatten() {
        *v *= s;
    }
}

fn uniform_fan_in(rng: &mut Rng, n: usize, fan_in: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

/// 3x3 convolution, stride 1, zero padding 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3x3 {
    pub cin: usize,
    pub cout: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv3x3 {
    pub fn init(cin: usize, cout: usize, rng: &mut Rng) -> Self {
        Conv3x3 {
            cin,
            cout,
            weight: uniform_fan_in(rng, 9 * cin * cout, 9 * cin),
            bias: vec![0.0; cout],
        }
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![3, 3, self.cin, self.cout]
    }

    pub fn forward(&self, x: &[f64], h: usize, w: usize) -> Vec<f64> {
        let (cin, cout) = (self.cin, self.cout);
        debug_assert_eq!(x.len(), h * w * cin);
        let mut out = Vec::with_capacity(h * w * cout);
        for _ in 0..h * w {
            out.extend_from_slice(&self.bias);
        }
        for i in 0..h {
            for j in 0..w {
                let o = (i * w + j) * cout;
                let out_px = &mut out[o..o + cout];
                for ky in 0..3 {
                    let Some(ii) = (i + ky).checked_sub(1).filter(|&ii| ii < h) else {
                        continue;
                    };
                    for kx in 0..3 {
                        let Some(jj) = (j + kx).checked_sub(1).filter(|&jj| jj < w) else {
                            continue;
                        };
                        let xin = &x[(ii * w + jj) * cin..(ii * w + jj + 1) * cin];
                        let wk = &self.weight[(ky * 3 + kx) * cin * cout..];
                        for (ci, &xv) in xin.iter().enumerate() {
                            if xv == 0.0 {
                                continue;
                            }
                            let row = &wk[ci * cout..(ci + 1) * cout];
                            for (acc, &wv) in out_px.iter_mut().zip(row) {
                                *acc += xv * wv;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates weight/bias gradients into `gw`/`gb` and returns `dL/dx`.
    pub fn backward(
        &self,
        x: &[f64],
        h: usize,
        w: usize,
        dout: &[f64],
        gw: &mut [f64],
        gb: &mut [f64],
    ) -> Vec<f64> {
        let (cin, cout) = (self.cin, self.cout);
        let mut dx = vec![0.0; h * w * cin];
        for i in 0..h {
            for j in 0..w {
                let o = (i * w + j) * cout;
                let d = &dout[o..o + cout];
                for (b, &dv) in gb.iter_mut().zip(d) {
                    *b += dv;
                }
                for ky in 0..3 {
                    let Some(ii) = (i + ky).checked_sub(1).filter(|&ii| ii < h) else {
                        continue;
                    };
                    for kx in 0..3 {
                        let Some(jj) = (j + kx).checked_sub(1).filter(|&jj| jj < w) else {
                            continue;
                        };
                        let base = (ii * w + jj) * cin;
                        let koff = (ky * 3 + kx) * cin * cout;
                        for ci in 0..cin {
                            let xv = x[base + ci];
                            let row = koff + ci * cout;
                            let wrow = &self.weight[row..row + cout];
                            let grow = &mut gw[row..row + cout];
                            let mut acc = 0.0;
                            for co in 0..cout {
                                acc += wrow[co] * d[co];
                                grow[co] += xv * d[co];
                            }
                            dx[base + ci] += acc;
                        }
                    }
                }
            }
        }
        dx
    }
}

/// Intermediate values kept for the backward pass of a [`ConvStack`].
#[derive(Debug, Clone)]
pub struct StackCache {
    /// Input to each layer (post-ReLU output of the previous one).
    inputs: Vec<Vec<f64>>,
    h: usize,
    w: usize,
}

/// Convolutions separated by ReLU; optionally ReLU after the last one too.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvStack {
    pub layers: Vec<Conv3x3>,
    pub relu_last: bool,
}

impl ConvStack {
    pub fn init(channels: &[usize], relu_last: bool, rng: &mut Rng) -> Self {
        let layers = channels
            .windows(2)
            .map(|p| Conv3x3::init(p[0], p[1], rng))
            .collect();
        ConvStack { layers, relu_last }
    }

    pub fn in_channels(&self) -> usize {
        self.layers[0].cin
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map(|l| l.cout).unwrap_or(0)
    }

    fn relu_after(&self, layer: usize) -> bool {
        layer + 1 < self.layers.len() || self.relu_last
    }

    pub fn forward(&self, x: &[f64], h: usize, w: usize) -> Vec<f64> {
        self.forward_cached(x, h, w).0
    }

    pub fn forward_cached(&self, x: &[f64], h: usize, w: usize) -> (Vec<f64>, StackCache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut cur = x.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut out = layer.forward(&cur, h, w);
            if self.relu_after(l) {
                for v in &mut out {
                    *v = v.max(0.0);
                }
            }
            inputs.push(cur);
            cur = out;
        }
        (cur, StackCache { inputs, h, w })
    }

    /// `grads` holds `[w0, b0, w1, b1, ...]`. `out` is the stack's forward
    /// output (needed for the final ReLU mask).
    pub fn backward(
        &self,
        cache: &StackCache,
        out: &[f64],
        dout: &[f64],
        grads: &mut [Vec<f64>],
    ) -> Vec<f64> {
        let (h, w) = (cache.h, cache.w);
        let mut d = dout.to_vec();
        for l in (0..self.layers.len()).rev() {
            if self.relu_after(l) {
                let post: &[f64] = if l + 1 < self.layers.len() {
                    &cache.inputs[l + 1]
                } else {
                    out
                };
                for (dv, &p) in d.iter_mut().zip(post) {
                    if p <= 0.0 {
                        *dv = 0.0;
                    }
                }
            }
            let (gw, rest) = grads[2 * l..].split_at_mut(1);
            d = self.layers[l].backward(&cache.inputs[l], h, w, &d, &mut gw[0], &mut rest[0]);
        }
        d
    }
}

impl Parameterized for ConvStack {
    fn params(&self) -> Vec<&Vec<f64>> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

/// Dense layer, weight laid out `[in][out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub fin: usize,
    pub fout: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn init(fin: usize, fout: usize, rng: &mut Rng) -> Self {
        Linear {
            fin,
            fout,
            weight: uniform_fan_in(rng, fin * fout, fin),
            bias: vec![0.0; fout],
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.bias.clone();
        for (i, &xv) in x.iter().enumerate() {
            let row = &self.weight[i * self.fout..(i + 1) * self.fout];
            for (o, &wv) in out.iter_mut().zip(row) {
                *o += xv * wv;
            }
        }
        out
    }

    pub fn backward(&self, x: &[f64], dout: &[f64], gw: &mut [f64], gb: &mut [f64]) -> Vec<f64> {
        for (b, &d) in gb.iter_mut().zip(dout) {
            *b += d;
        }
        let mut dx = vec![0.0; self.fin];
        for i in 0..self.fin {
            let row = i * self.fout;
            let mut acc = 0.0;
            for o in 0..self.fout {
                gw[row + o] += x[i] * dout[o];
                acc += self.weight[row + o] * dout[o];
            }
            dx[i] = acc;
        }
        dx
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// First-order optimizer with per-buffer state.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    m: Grads,
    v: Grads,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer {
            kind,
            lr,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Vec<f64>>, grads: &Grads) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!(
                "optimizer got {} parameter buffers and {} gradients",
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.into_iter().zip(grads) {
                    for (pv, gv) in p.iter_mut().zip(g) {
                        *pv -= self.lr * gv;
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.m.is_empty() {
                    self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
                    self.v = self.m.clone();
                }
                let t = self.step as i32;
                let c1 = 1.0 - ADAM_BETA1.powi(t);
                let c2 = 1.0 - ADAM_BETA2.powi(t);
                for (((p, g), m), v) in params
                    .into_iter()
                    .zip(grads)
                    .zip(&mut self.m)
                    .zip(&mut self.v)
                {
                    for i in 0..p.len() {
                        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                        let mh = m[i] / c1;
                        let vh = v[i] / c2;
                        p[i] -= self.lr * mh / (vh.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn naive_conv(layer: &Conv3x3, x: &[f64], h: usize, w: usize) -> Vec<f64> {
        let mut out = vec![0.0; h * w * layer.cout];
        for i in 0..h as isize {
            for j in 0..w as isize {
                for co in 0..layer.cout {
                    let mut acc = layer.bias[co];
                    for ky in 0..3isize {
                        for kx in 0..3isize {
                            let (ii, jj) = (i + ky - 1, j + kx - 1);
                            if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                                continue;
                            }
                            for ci in 0..layer.cin {
                                let widx =
                                    ((ky * 3 + kx) as usize * layer.cin + ci) * layer.cout + co;
                                acc += layer.weight[widx]
                                    * x[(ii as usize * w + jj as usize) * layer.cin + ci];
                            }
                        }
                    }
                    out[(i as usize * w + j as usize) * layer.cout + co] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_summation() {
        let mut rng = seed::rng(4);
        let layer = Conv3x3 {
            bias: vec![0.1, -0.2, 0.3],
            ..Conv3x3::init(2, 3, &mut rng)
        };
        let x: Vec<f64> = (0..5 * 4 * 2)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let a = layer.forward(&x, 5, 4);
        let b = naive_conv(&layer, &x, 5, 4);
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn stack_backward_matches_finite_differences() {
        let mut rng = seed::rng(9);
        let mut stack = ConvStack::init(&[2, 3, 2], true, &mut rng);
        for l in &mut stack.layers {
            for b in &mut l.bias {
                *b = rng.random_range(-0.1..0.1);
            }
        }
        let (h, w) = (3, 3);
        let x: Vec<f64> = (0..h * w * 2)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let probe: Vec<f64> = (0..h * w * 2)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let loss = |s: &ConvStack, x: &[f64]| -> f64 {
            s.forward(x, h, w)
                .iter()
                .zip(&probe)
                .map(|(a, b)| a * b)
                .sum()
        };
        let (out, cache) = stack.forward_cached(&x, h, w);
        let mut grads = stack.zero_grads();
        let dx = stack.backward(&cache, &out, &probe, &mut grads);

        let eps = 1e-6;
        for (pi, g) in grads.iter().enumerate() {
            for (idx, &gv) in g.iter().enumerate() {
                let mut plus = stack.clone();
                plus.params_mut()[pi][idx] += eps;
                let mut minus = stack.clone();
                minus.params_mut()[pi][idx] -= eps;
                let fd = (loss(&plus, &x) - loss(&minus, &x)) / (2.0 * eps);
                assert!(
                    (fd - gv).abs() <= 1e-6 + 1e-4 * fd.abs(),
                    "param {pi}[{idx}]"
                );
            }
        }
        for idx in 0..x.len() {
            let mut xp = x.clone();
            xp[idx] += eps;
            let mut xm = x.clone();
            xm[idx] -= eps;
            let fd = (loss(&stack, &xp) - loss(&stack, &xm)) / (2.0 * eps);
            assert!((fd - dx[idx]).abs() <= 1e-6 + 1e-4 * fd.abs());
        }
    }

    #[test]
    fn linear_backward() {
        let mut rng = seed::rng(1);
        let lin = Linear::init(3, 2, &mut rng);
        let x = [0.5, -1.0, 2.0];
        let d = [1.0, -2.0];
        let mut gw = vec![0.0; 6];
        let mut gb = vec![0.0; 2];
        let dx = lin.backward(&x, &d, &mut gw, &mut gb);
        assert_eq!(gb, vec![1.0, -2.0]);
        assert_eq!(gw, vec![0.5, -1.0, -1.0, 2.0, 2.0, -4.0]);
        for (i, v) in dx.iter().enumerate() {
            let expect = lin.weight[i * 2] * 1.0 + lin.weight[i * 2 + 1] * -2.0;
            assert!((v - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn sgd_step() {
        let mut p = vec![1.0, 2.0];
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.5);
        opt.step(vec![&mut p], &vec![vec![1.0, -2.0]]).unwrap();
        assert_eq!(p, vec![0.5, 3.0]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![1.0, 2.0];
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.1);
        opt.step(vec![&mut p], &vec![vec![3.0, -0.5]]).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] - 2.1).abs() < 1e-6);
    }
}
