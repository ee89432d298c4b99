//! Two-hidden-layer ReLU network on a 2-vector input, with batch
//! normalization on the input, before each activation and on the output.
//!
//! Parameters of one head live in a flat slice; [`Layout`] gives offsets.
//! Samples are stored row-major (`i * width + j`).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const INPUT_DIM: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetShape {
    pub n1: usize,
    pub n2: usize,
    /// When false every normalization site is the identity (test hook).
    pub batch_norm: bool,
}

impl Default for NetShape {
    fn default() -> Self {
        NetShape { n1: 15, n2: 15, batch_norm: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Layout {
    pub bn0_g: usize,
    pub bn0_b: usize,
    pub a0: usize,
    pub b0: usize,
    pub bn1_g: usize,
    pub bn1_b: usize,
    pub a1: usize,
    pub b1: usize,
    pub bn2_g: usize,
    pub bn2_b: usize,
    pub a2: usize,
    pub bn3_g: usize,
    pub bn3_b: usize,
    pub len: usize,
}

impl NetShape {
    pub fn layout(&self) -> Layout {
        let (n1, n2) = (self.n1, self.n2);
        let mut o = 0;
        let mut take = |n: usize| {
            let s = o;
            o += n;
            s
        };
        let bn0_g = take(INPUT_DIM);
        let bn0_b = take(INPUT_DIM);
        let a0 = take(n1 * INPUT_DIM);
        let b0 = take(n1);
        let bn1_g = take(n1);
        let bn1_b = take(n1);
        let a1 = take(n2 * n1);
        let b1 = take(n2);
        let bn2_g = take(n2);
        let bn2_b = take(n2);
        let a2 = take(n2);
        let bn3_g = take(1);
        let bn3_b = take(1);
        Layout { bn0_g, bn0_b, a0, b0, bn1_g, bn1_b, a1, b1, bn2_g, bn2_b, a2, bn3_g, bn3_b, len: o }
    }

    pub fn n_params(&self) -> usize {
        self.layout().len
    }

    /// Widths of the four normalization sites.
    pub fn bn_widths(&self) -> [usize; 4] {
        [INPUT_DIM, self.n1, self.n2, 1]
    }

    /// Length of a running-statistics vector: means then variances per site.
    pub fn n_running(&self) -> usize {
        2 * self.bn_widths().iter().sum::<usize>()
    }

    fn running_offsets(&self) -> [usize; 4] {
        let w = self.bn_widths();
        let mut off = [0; 4];
        let mut o = 0;
        for s in 0..4 {
            off[s] = o;
            o += 2 * w[s];
        }
        off
    }

    /// Uniform weights with half-width `1/sqrt(fan_in)`, zero biases,
    /// unit scale and zero shift at every normalization site.
    pub fn init_params<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let l = self.layout();
        let mut p = vec![0.0; l.len];
        for g in [l.bn0_g..l.bn0_g + INPUT_DIM, l.bn1_g..l.bn1_g + self.n1, l.bn2_g..l.bn2_g + self.n2, l.bn3_g..l.bn3_g + 1] {
            p[g].fill(1.0);
        }
        let mut fill = |start: usize, n: usize, fan_in: usize| {
            let h = 1.0 / (fan_in as f64).sqrt();
            for v in &mut p[start..start + n] {
                *v = rng.gen_range(-h..h);
            }
        };
        fill(l.a0, self.n1 * INPUT_DIM, INPUT_DIM);
        fill(l.a1, self.n2 * self.n1, self.n1);
        fill(l.a2, self.n2, self.n2);
        p
    }

    /// Running statistics at zero mean and unit variance.
    pub fn init_running(&self) -> Vec<f64> {
        let mut r = vec![0.0; self.n_running()];
        let off = self.running_offsets();
        for (s, w) in self.bn_widths().iter().enumerate() {
            r[off[s] + w..off[s] + 2 * w].fill(1.0);
        }
        r
    }

    /// Parameters of a head whose output is the constant `value` in both
    /// modes: all weights zero, output scale zero, output shift `value`.
    pub fn constant_params(&self, value: f64) -> Vec<f64> {
        let l = self.layout();
        let mut p = vec![0.0; l.len];
        p[l.bn3_b] = value;
        if !self.batch_norm {
            // Without normalization the output is A2 a2 alone; bias the
            // first hidden unit so that it carries the constant.
            p[l.b0] = 1.0;
            p[l.a1] = 1.0;
            p[l.b1] = 0.0;
            p[l.a2] = value;
        }
        p
    }
}

/// Training uses batch statistics; inference uses running averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, Default)]
struct BnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

/// Activations kept from a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct HeadCache {
    n: usize,
    bn: [BnCache; 4],
    h0: Vec<f64>,
    a1: Vec<f64>,
    a2: Vec<f64>,
    /// Batch means and variances in the running-statistics layout.
    pub batch_stats: Vec<f64>,
}

fn bn_forward_train(x: &[f64], n: usize, w: usize, g: &[f64], b: &[f64], eps: f64, stats: &mut [f64]) -> (Vec<f64>, BnCache) {
    let mut out = vec![0.0; n * w];
    let mut xhat = vec![0.0; n * w];
    let mut inv_std = vec![0.0; w];
    let nf = n as f64;
    for j in 0..w {
        let mut m = 0.0;
        for i in 0..n {
            m += x[i * w + j];
        }
        m /= nf;
        let mut v = 0.0;
        for i in 0..n {
            let d = x[i * w + j] - m;
            v += d * d;
        }
        v /= nf;
        let is = 1.0 / (v + eps).sqrt();
        inv_std[j] = is;
        for i in 0..n {
            let xh = (x[i * w + j] - m) * is;
            xhat[i * w + j] = xh;
            out[i * w + j] = g[j] * xh + b[j];
        }
        stats[j] = m;
        stats[w + j] = v;
    }
    (out, BnCache { xhat, inv_std })
}

fn bn_forward_infer(x: &[f64], n: usize, w: usize, g: &[f64], b: &[f64], eps: f64, run: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; n * w];
    for j in 0..w {
        let scale = g[j] / (run[w + j] + eps).sqrt();
        let m = run[j];
        for i in 0..n {
            out[i * w + j] = scale * (x[i * w + j] - m) + b[j];
        }
    }
    out
}

/// Returns d loss / d input and accumulates scale and shift gradients.
fn bn_backward(dy: &[f64], n: usize, w: usize, g: &[f64], c: &BnCache, dg: &mut [f64], db: &mut [f64]) -> Vec<f64> {
    let mut dx = vec![0.0; n * w];
    let nf = n as f64;
    for j in 0..w {
        let mut sum_dy = 0.0;
        let mut sum_dy_xh = 0.0;
        for i in 0..n {
            let d = dy[i * w + j];
            sum_dy += d;
            sum_dy_xh += d * c.xhat[i * w + j];
        }
        dg[j] += sum_dy_xh;
        db[j] += sum_dy;
        let k = g[j] * c.inv_std[j] / nf;
        for i in 0..n {
            dx[i * w + j] = k * (nf * dy[i * w + j] - sum_dy - c.xhat[i * w + j] * sum_dy_xh);
        }
    }
    dx
}

/// `out[i, r] = bias[r] + sum_c a[r, c] x[i, c]` for `a` of shape `rows x cols`.
fn affine(x: &[f64], n: usize, cols: usize, a: &[f64], bias: Option<&[f64]>, rows: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * rows];
    for i in 0..n {
        let xi = &x[i * cols..(i + 1) * cols];
        for r in 0..rows {
            let ar = &a[r * cols..(r + 1) * cols];
            let mut s = bias.map_or(0.0, |b| b[r]);
            for c in 0..cols {
                s += ar[c] * xi[c];
            }
            out[i * rows + r] = s;
        }
    }
    out
}

/// Accumulates `da += dyᵀ x`, `dbias += sum dy`, and returns `dx = dy a`.
fn affine_backward(
    dy: &[f64],
    x: &[f64],
    n: usize,
    cols: usize,
    a: &[f64],
    rows: usize,
    da: &mut [f64],
    mut dbias: Option<&mut [f64]>,
) -> Vec<f64> {
    let mut dx = vec![0.0; n * cols];
    for i in 0..n {
        let xi = &x[i * cols..(i + 1) * cols];
        let dxi = &mut dx[i * cols..(i + 1) * cols];
        for r in 0..rows {
            let d = dy[i * rows + r];
            if d == 0.0 {
                continue;
            }
            if let Some(db) = dbias.as_deref_mut() {
                db[r] += d;
            }
            let ar = &a[r * cols..(r + 1) * cols];
            let dar = &mut da[r * cols..(r + 1) * cols];
            for c in 0..cols {
                dar[c] += d * xi[c];
                dxi[c] += d * ar[c];
            }
        }
    }
    dx
}

fn relu(v: &mut [f64]) {
    for x in v {
        if *x <= 0.0 {
            *x = 0.0;
        }
    }
}

/// Forward pass on `input` (`n x 2`). In training mode the returned cache
/// holds everything the backward pass needs plus the batch statistics.
pub fn forward(
    shape: &NetShape,
    params: &[f64],
    running: &[f64],
    input: &[f64],
    mode: Mode,
    eps: f64,
) -> Result<(Vec<f64>, Option<HeadCache>)> {
    let n = input.len() / INPUT_DIM;
    let l = shape.layout();
    let (n1, n2) = (shape.n1, shape.n2);
    let w = shape.bn_widths();
    let roff = shape.running_offsets();
    let train = mode == Mode::Train && shape.batch_norm;
    if train && n < 2 {
        return Err(Error::BatchNorm);
    }
    let mut stats = vec![0.0; shape.n_running()];
    let mut caches: [BnCache; 4] = Default::default();

    let mut norm = |site: usize, x: Vec<f64>, g: usize, b: usize| -> Vec<f64> {
        if !shape.batch_norm {
            return x;
        }
        let gs = &params[g..g + w[site]];
        let bs = &params[b..b + w[site]];
        if train {
            let (out, c) = bn_forward_train(&x, n, w[site], gs, bs, eps, &mut stats[roff[site]..roff[site] + 2 * w[site]]);
            caches[site] = c;
            out
        } else {
            bn_forward_infer(&x, n, w[site], gs, bs, eps, &running[roff[site]..roff[site] + 2 * w[site]])
        }
    };

    let h0 = norm(0, input.to_vec(), l.bn0_g, l.bn0_b);
    let z1 = affine(&h0, n, INPUT_DIM, &params[l.a0..l.a0 + n1 * INPUT_DIM], Some(&params[l.b0..l.b0 + n1]), n1);
    let mut a1 = norm(1, z1, l.bn1_g, l.bn1_b);
    relu(&mut a1);
    let z2 = affine(&a1, n, n1, &params[l.a1..l.a1 + n2 * n1], Some(&params[l.b1..l.b1 + n2]), n2);
    let mut a2 = norm(2, z2, l.bn2_g, l.bn2_b);
    relu(&mut a2);
    let z3 = affine(&a2, n, n2, &params[l.a2..l.a2 + n2], None, 1);
    let out = norm(3, z3, l.bn3_g, l.bn3_b);

    let cache = (mode == Mode::Train).then(|| HeadCache { n, bn: caches, h0, a1, a2, batch_stats: stats });
    Ok((out, cache))
}

/// Reverse pass. Accumulates parameter gradients into `grad` and returns
/// the gradient with respect to the input (`n x 2`).
pub fn backward(shape: &NetShape, params: &[f64], cache: &HeadCache, dout: &[f64], grad: &mut [f64]) -> Vec<f64> {
    let n = cache.n;
    let l = shape.layout();
    let (n1, n2) = (shape.n1, shape.n2);
    let w = shape.bn_widths();
    let bn = shape.batch_norm;

    let unnorm = |site: usize, dy: Vec<f64>, g: usize, b: usize, grad: &mut [f64]| -> Vec<f64> {
        if !bn {
            return dy;
        }
        let (dg, rest) = grad.split_at_mut(b);
        bn_backward(&dy, n, w[site], &params[g..g + w[site]], &cache.bn[site], &mut dg[g..g + w[site]], &mut rest[..w[site]])
    };

    let dz3 = unnorm(3, dout.to_vec(), l.bn3_g, l.bn3_b, grad);
    let mut da2 = affine_backward(&dz3, &cache.a2, n, n2, &params[l.a2..l.a2 + n2], 1, &mut grad[l.a2..l.a2 + n2], None);
    for (d, a) in da2.iter_mut().zip(&cache.a2) {
        if *a <= 0.0 {
            *d = 0.0;
        }
    }
    let dz2 = unnorm(2, da2, l.bn2_g, l.bn2_b, grad);
    let (ga1, gb1) = grad[l.a1..l.b1 + n2].split_at_mut(n2 * n1);
    let mut da1 = affine_backward(&dz2, &cache.a1, n, n1, &params[l.a1..l.a1 + n2 * n1], n2, ga1, Some(gb1));
    for (d, a) in da1.iter_mut().zip(&cache.a1) {
        if *a <= 0.0 {
            *d = 0.0;
        }
    }
    let dz1 = unnorm(1, da1, l.bn1_g, l.bn1_b, grad);
    let (ga0, gb0) = grad[l.a0..l.b0 + n1].split_at_mut(n1 * INPUT_DIM);
    let dh0 = affine_backward(&dz1, &cache.h0, n, INPUT_DIM, &params[l.a0..l.a0 + n1 * INPUT_DIM], n1, ga0, Some(gb0));
    unnorm(0, dh0, l.bn0_g, l.bn0_b, grad)
}

/// Exponential running average `r <- m r + (1 - m) batch`.
pub fn update_running(running: &mut [f64], batch: &[f64], momentum: f64) {
    for (r, b) in running.iter_mut().zip(batch) {
        *r = momentum * *r + (1.0 - momentum) * b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn layout_counts() {
        let s = NetShape::default();
        assert_eq!(s.n_params(), 4 + 30 + 15 + 30 + 225 + 15 + 30 + 15 + 2);
        assert_eq!(s.n_running(), 2 * (2 + 15 + 15 + 1));
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let s = NetShape::default();
        let l = s.layout();
        let mut p = vec![0.0; l.len];
        for g in [l.bn0_g, l.bn1_g, l.bn2_g, l.bn3_g] {
            p[g] = 1.0;
        }
        let x = [0.3, -1.0, 2.0, 0.5, -0.7, 0.1];
        for mode in [Mode::Train, Mode::Infer] {
            let (out, _) = forward(&s, &p, &s.init_running(), &x, mode, 1e-3).unwrap();
            assert!(out.iter().all(|v| *v == 0.0), "{out:?}");
        }
    }

    #[test]
    fn hand_forward_without_normalization() {
        // n1 = n2 = 2 with identity-padded weights: output = relu(relu(x) + b1) summed.
        let s = NetShape { n1: 2, n2: 2, batch_norm: false };
        let l = s.layout();
        let mut p = vec![0.0; l.len];
        p[l.a0] = 1.0;
        p[l.a0 + 3] = 1.0;
        p[l.a1] = 1.0;
        p[l.a1 + 3] = 1.0;
        p[l.b1] = 0.5;
        p[l.b1 + 1] = 0.5;
        p[l.a2] = 2.0;
        p[l.a2 + 1] = -1.0;
        let (out, _) = forward(&s, &p, &s.init_running(), &[1.0, -1.0], Mode::Infer, 1e-3).unwrap();
        // relu(1) + 0.5 = 1.5; relu(-1) + 0.5 = 0.5; 2 * 1.5 - 0.5 = 2.5.
        assert_eq!(out, vec![2.5]);
    }

    #[test]
    fn training_normalization_standardizes() {
        let s = NetShape::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = s.init_params(&mut rng);
        let n = 64;
        let x: Vec<f64> = (0..2 * n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let (out, _) = forward(&s, &p, &s.init_running(), &x, Mode::Train, 1e-12).unwrap();
        let m = out.iter().sum::<f64>() / n as f64;
        let v = out.iter().map(|o| (o - m).powi(2)).sum::<f64>() / n as f64;
        assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-6, "{m} {v}");
        assert!(matches!(forward(&s, &p, &s.init_running(), &x[..2], Mode::Train, 1e-3), Err(Error::BatchNorm)));
    }

    #[test]
    fn constant_head_is_constant() {
        for bn in [true, false] {
            let s = NetShape { batch_norm: bn, ..NetShape::default() };
            let p = s.constant_params(-0.7);
            let x = [0.3, -1.0, 2.0, 0.5];
            for mode in [Mode::Train, Mode::Infer] {
                let (out, _) = forward(&s, &p, &s.init_running(), &x, mode, 1e-3).unwrap();
                assert!(out.iter().all(|v| (*v + 0.7).abs() < 1e-15), "{bn} {mode:?} {out:?}");
            }
        }
    }

    fn loss_of(s: &NetShape, p: &[f64], x: &[f64], wts: &[f64]) -> f64 {
        let (out, _) = forward(s, p, &s.init_running(), x, Mode::Train, 1e-3).unwrap();
        out.iter().zip(wts).map(|(o, w)| w * o).sum()
    }

    #[test]
    fn backward_matches_finite_differences() {
        let s = NetShape { n1: 5, n2: 4, batch_norm: true };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut p = s.init_params(&mut rng);
        for v in p.iter_mut() {
            *v += rng.gen_range(-0.2..0.2);
        }
        let n = 9;
        let x: Vec<f64> = (0..2 * n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let wts: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (_, cache) = forward(&s, &p, &s.init_running(), &x, Mode::Train, 1e-3).unwrap();
        let mut grad = vec![0.0; p.len()];
        let dx = backward(&s, &p, cache.as_ref().unwrap(), &wts, &mut grad);
        let h = 1e-6;
        for k in 0..p.len() {
            let mut pp = p.clone();
            pp[k] += h;
            let up = loss_of(&s, &pp, &x, &wts);
            pp[k] -= 2.0 * h;
            let dn = loss_of(&s, &pp, &x, &wts);
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - grad[k]).abs() <= 1e-6 * (1.0 + fd.abs()), "param {k}: {fd} vs {}", grad[k]);
        }
        for k in 0..x.len() {
            let mut xx = x.clone();
            xx[k] += h;
            let up = loss_of(&s, &p, &xx, &wts);
            xx[k] -= 2.0 * h;
            let dn = loss_of(&s, &p, &xx, &wts);
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - dx[k]).abs() <= 1e-6 * (1.0 + fd.abs()), "input {k}: {fd} vs {}", dx[k]);
        }
    }
}
