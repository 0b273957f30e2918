//! Token mixers: single-head softmax self-attention (quadratic in sequence
//! length) and the gated outer-product recurrence of Mamba-2 (linear in
//! sequence length, constant state).
//!
//! Each mixer has two routes. The graph route records onto a [`Graph`] for
//! training; the value route computes outputs directly and is what the
//! benchmark times. The recurrence additionally has a brute-force unrolled
//! reference, [`mamba2_unrolled_oracle`].

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{kernels, Graph, Tensor, Var};

/// Standard deviation of the normal initializer for projection matrices.
pub const INIT_STD: f64 = 0.02;

pub(crate) fn normal_tensor(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("valid std");
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T = Tensor> {
    pub w_q: T,
    pub w_k: T,
    pub w_v: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mamba2Params<T = Tensor> {
    pub w_q: T,
    pub w_k: T,
    pub w_v: T,
    /// `d×1` projection producing the per-token gate input δ_t.
    pub w_delta: T,
    /// Unconstrained scalar decay rate.
    pub alpha: T,
}

impl AttentionParams {
    pub fn init(d: usize, rng: &mut impl Rng) -> Self {
        AttentionParams {
            w_q: normal_tensor(rng, &[d, d], INIT_STD),
            w_k: normal_tensor(rng, &[d, d], INIT_STD),
            w_v: normal_tensor(rng, &[d, d], INIT_STD),
        }
    }

    pub fn dim(&self) -> usize {
        self.w_q.shape()[0]
    }
}

impl Mamba2Params {
    pub fn init(d: usize, rng: &mut impl Rng) -> Self {
        Mamba2Params {
            w_q: normal_tensor(rng, &[d, d], INIT_STD),
            w_k: normal_tensor(rng, &[d, d], INIT_STD),
            w_v: normal_tensor(rng, &[d, d], INIT_STD),
            w_delta: normal_tensor(rng, &[d, 1], INIT_STD),
            alpha: Tensor::scalar(1.0),
        }
    }

    pub fn dim(&self) -> usize {
        self.w_q.shape()[0]
    }
}

impl<T> AttentionParams<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> AttentionParams<U> {
        AttentionParams {
            w_q: f(&format!("{prefix}.w_q"), &self.w_q),
            w_k: f(&format!("{prefix}.w_k"), &self.w_k),
            w_v: f(&format!("{prefix}.w_v"), &self.w_v),
        }
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        f(&format!("{prefix}.w_q"), &mut self.w_q);
        f(&format!("{prefix}.w_k"), &mut self.w_k);
        f(&format!("{prefix}.w_v"), &mut self.w_v);
    }
}

impl<T> Mamba2Params<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> Mamba2Params<U> {
        Mamba2Params {
            w_q: f(&format!("{prefix}.w_q"), &self.w_q),
            w_k: f(&format!("{prefix}.w_k"), &self.w_k),
            w_v: f(&format!("{prefix}.w_v"), &self.w_v),
            w_delta: f(&format!("{prefix}.w_delta"), &self.w_delta),
            alpha: f(&format!("{prefix}.alpha"), &self.alpha),
        }
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        f(&format!("{prefix}.w_q"), &mut self.w_q);
        f(&format!("{prefix}.w_k"), &mut self.w_k);
        f(&format!("{prefix}.w_v"), &mut self.w_v);
        f(&format!("{prefix}.w_delta"), &mut self.w_delta);
        f(&format!("{prefix}.alpha"), &mut self.alpha);
    }
}

fn check_dim(op: &'static str, x: &[usize], w: &[usize]) -> Result<()> {
    if x.len() != 2 || w.len() != 2 || x[1] != w[0] {
        return Err(Error::Shape {
            op,
            lhs: x.to_vec(),
            rhs: w.to_vec(),
        });
    }
    if x[0] == 0 {
        return Err(Error::InvalidArgument(format!("{op}: empty sequence")));
    }
    Ok(())
}

/// `softmax(q kᵀ / √d) v` on the graph, with `q, k, v = x W_Q, x W_K, x W_V`.
pub fn attention(g: &mut Graph, x: Var, p: &AttentionParams<Var>) -> Result<Var> {
    check_dim("attention", g.shape(x), g.shape(p.w_q))?;
    let d = g.shape(p.w_q)[1];
    let q = g.matmul(x, p.w_q)?;
    let k = g.matmul(x, p.w_k)?;
    let v = g.matmul(x, p.w_v)?;
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scaled = g.scale(scores, 1.0 / (d as f64).sqrt())?;
    let weights = g.softmax_rows(scaled)?;
    g.matmul(weights, v)
}

/// The `L×L` row-stochastic attention matrix.
pub fn attention_weights(x: &Tensor, p: &AttentionParams) -> Result<Tensor> {
    check_dim("attention", x.shape(), p.w_q.shape())?;
    let (l, d) = x.dims2()?;
    let q = kernels::matmul(x.data(), p.w_q.data(), l, d, d);
    let k = kernels::matmul(x.data(), p.w_k.data(), l, d, d);
    let mut scores = kernels::matmul_bt(&q, &k, l, d, l);
    let scale = 1.0 / (d as f64).sqrt();
    for row in scores.chunks_mut(l) {
        row.iter_mut().for_each(|s| *s *= scale);
        kernels::softmax_in_place(row);
    }
    Ok(Tensor::from_parts(vec![l, l], scores))
}

/// Value route of [`attention`]. Materializes the full `L×L` score matrix.
pub fn attention_forward(x: &Tensor, p: &AttentionParams) -> Result<Tensor> {
    check_dim("attention", x.shape(), p.w_q.shape())?;
    let (l, d) = x.dims2()?;
    let q = Tensor::from_parts(vec![l, d], kernels::matmul(x.data(), p.w_q.data(), l, d, d));
    let k = Tensor::from_parts(vec![l, d], kernels::matmul(x.data(), p.w_k.data(), l, d, d));
    let v = Tensor::from_parts(vec![l, d], kernels::matmul(x.data(), p.w_v.data(), l, d, d));
    let mut scores = Tensor::from_parts(
        vec![l, l],
        kernels::matmul_bt(q.data(), k.data(), l, d, l),
    );
    let scale = 1.0 / (d as f64).sqrt();
    for row in scores.data_mut().chunks_mut(l) {
        row.iter_mut().for_each(|s| *s *= scale);
        kernels::softmax_in_place(row);
    }
    Ok(Tensor::from_parts(
        vec![l, d],
        kernels::matmul(scores.data(), v.data(), l, l, d),
    ))
}

/// Mamba-2 mixer on the graph: projections followed by the gated scan.
pub fn mamba2(g: &mut Graph, x: Var, p: &Mamba2Params<Var>) -> Result<Var> {
    check_dim("mamba2_scan", g.shape(x), g.shape(p.w_q))?;
    let q = g.matmul(x, p.w_q)?;
    let k = g.matmul(x, p.w_k)?;
    let v = g.matmul(x, p.w_v)?;
    let delta = g.matmul(x, p.w_delta)?;
    g.gated_scan(q, k, v, delta, p.alpha)
}

fn check_mamba2_shapes(x: &Tensor, p: &Mamba2Params) -> Result<(usize, usize)> {
    check_dim("mamba2_scan", x.shape(), p.w_q.shape())?;
    let (l, d) = x.dims2()?;
    if p.w_delta.shape() != [d, 1] {
        return Err(Error::Shape {
            op: "mamba2_scan",
            lhs: x.shape().to_vec(),
            rhs: p.w_delta.shape().to_vec(),
        });
    }
    Ok((l, d))
}

/// Value route of the recurrence, left to right.
///
/// Projections are computed one token at a time so the working set is the
/// `d×d` state plus a handful of length-`d` buffers, independent of `L`.
pub fn mamba2_scan(x: &Tensor, p: &Mamba2Params) -> Result<Tensor> {
    let (l, d) = check_mamba2_shapes(x, p)?;
    let alpha = p.alpha.item();
    let mut out = Tensor::zeros(&[l, d]);
    let mut state = Tensor::zeros(&[d, d]);
    let mut q = Tensor::zeros(&[d]);
    let mut k = Tensor::zeros(&[d]);
    let mut v = Tensor::zeros(&[d]);
    let s = state.data_mut();
    for t in 0..l {
        let xt = x.row(t);
        kernels::vecmat_into(xt, p.w_q.data(), d, q.data_mut());
        kernels::vecmat_into(xt, p.w_k.data(), d, k.data_mut());
        kernels::vecmat_into(xt, p.w_v.data(), d, v.data_mut());
        let delta = kernels::dot(xt, p.w_delta.data());
        let decay = (-kernels::softplus(delta) * alpha).exp();
        let (qd, kd, vd) = (q.data(), k.data(), v.data());
        let yt = &mut out.data_mut()[t * d..(t + 1) * d];
        for i in 0..d {
            let row = &mut s[i * d..(i + 1) * d];
            let vi = vd[i];
            for j in 0..d {
                row[j] = decay * row[j] + vi * kd[j];
            }
            yt[i] = kernels::dot(row, qd);
        }
    }
    Ok(out)
}

/// Reference for the recurrence by explicit expansion:
/// `y_t = Σ_{i≤t} (Π_{j=i+1..t} g_j) (k_i·q_t) v_i`.
///
/// Quadratic in `L` and cubic in loop depth; for tests and gradient checks only.
pub fn mamba2_unrolled_oracle(x: &Tensor, p: &Mamba2Params) -> Result<Tensor> {
    let (l, d) = check_mamba2_shapes(x, p)?;
    let proj = |w: &Tensor, t: usize, c: usize| -> f64 {
        let cols = w.shape()[1];
        (0..d).map(|r| x.at(t, r) * w.data()[r * cols + c]).sum()
    };
    let alpha = p.alpha.item();
    let gates: Vec<f64> = (0..l)
        .map(|t| {
            let delta = proj(&p.w_delta, t, 0);
            let sp = delta.max(0.0) + (-delta.abs()).exp().ln_1p();
            (-sp * alpha).exp()
        })
        .collect();
    let mut out = vec![0.0; l * d];
    for t in 0..l {
        let qt: Vec<f64> = (0..d).map(|c| proj(&p.w_q, t, c)).collect();
        for i in 0..=t {
            let decay: f64 = gates[i + 1..=t].iter().product();
            let score: f64 = (0..d).map(|c| proj(&p.w_k, i, c) * qt[c]).sum();
            for c in 0..d {
                out[t * d + c] += decay * score * proj(&p.w_v, i, c);
            }
        }
    }
    Tensor::new(vec![l, d], out)
}
