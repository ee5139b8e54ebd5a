//! Semantic reordering: a two-layer GELU router scores each instance against
//! `n_clusters` semantic clusters, every instance gets a hard label, and the
//! sequence is stably sorted by label. The permutation is exactly invertible
//! because it only moves rows.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{argmax, softmax_in_place, Mat};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterParams {
    /// `hidden × d`
    pub w1: Mat,
    /// `n_clusters × hidden`
    pub w2: Mat,
}

impl RouterParams {
    pub fn new(w1: Mat, w2: Mat) -> Result<Self> {
        if w1.rows == 0 || w2.cols != w1.rows {
            return Err(Error::Shape(format!(
                "router W1 {:?} and W2 {:?} do not chain",
                w1.shape(),
                w2.shape()
            )));
        }
        if w2.rows == 0 {
            return Err(Error::Shape("router needs at least one cluster".into()));
        }
        Ok(RouterParams { w1, w2 })
    }

    pub fn n_clusters(&self) -> usize {
        self.w2.rows
    }
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU, `x · Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * INV_SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Intermediate values of the router kept for the backward pass.
#[derive(Clone, Debug)]
pub struct RouterCache {
    pub pre: Mat,
    pub hidden: Mat,
    pub z: Mat,
}

/// Row `i` of the result is `W2 · GELU(W1 · x_i)`.
pub fn router_forward(params: &RouterParams, x: &Mat) -> Result<Mat> {
    router_forward_cached(params, x).map(|c| c.z)
}

pub fn router_forward_cached(params: &RouterParams, x: &Mat) -> Result<RouterCache> {
    if x.cols != params.w1.cols {
        return Err(Error::Shape(format!(
            "router expects width {}, got {}",
            params.w1.cols, x.cols
        )));
    }
    let pre = x.matmul_t(&params.w1);
    let mut hidden = pre.clone();
    hidden.data.iter_mut().for_each(|v| *v = gelu(*v));
    let z = hidden.matmul_t(&params.w2);
    Ok(RouterCache { pre, hidden, z })
}

/// Gradients of the router weights and its input given `dZ`.
pub fn router_backward(params: &RouterParams, x: &Mat, cache: &RouterCache, dz: &Mat) -> (RouterParams, Mat) {
    let mut dw2 = Mat::zeros(params.w2.rows, params.w2.cols);
    dw2.add_at_b(dz, &cache.hidden);
    let mut dpre = dz.matmul(&params.w2);
    for (g, &a) in dpre.data.iter_mut().zip(&cache.pre.data) {
        *g *= gelu_grad(a);
    }
    let mut dw1 = Mat::zeros(params.w1.rows, params.w1.cols);
    dw1.add_at_b(&dpre, x);
    let dx = dpre.matmul(&params.w1);
    (RouterParams { w1: dw1, w2: dw2 }, dx)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignMode {
    Hard,
    Gumbel { tau: f64, seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// `L × n_clusters` row-stochastic.
    pub p: Mat,
    /// Hard label per instance.
    pub c: Vec<usize>,
}

/// Standard Gumbel samples, `-ln(-ln U)`.
pub fn gumbel_noise(rows: usize, cols: usize, seed: u64) -> Mat {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Mat::zeros(rows, cols);
    for v in g.data.iter_mut() {
        let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
        *v = -(-u.ln()).ln();
    }
    g
}

pub fn assign(z: &Mat, mode: AssignMode) -> Result<Assignment> {
    if let Some(i) = z.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    let mut p = z.clone();
    if let AssignMode::Gumbel { tau, seed } = mode {
        if !(tau > 0.0) {
            return Err(Error::InvalidConfig(format!("gumbel tau must be > 0, got {tau}")));
        }
        let g = gumbel_noise(z.rows, z.cols, seed);
        for (v, n) in p.data.iter_mut().zip(&g.data) {
            *v = (*v + n) / tau;
        }
    }
    // argmax is taken before the softmax so the hard label sees the same
    // perturbed logits as P without rounding ties introduced by exp.
    let c = (0..p.rows).map(|i| argmax(p.row(i))).collect();
    for i in 0..p.rows {
        softmax_in_place(p.row_mut(i));
    }
    Ok(Assignment { p, c })
}

/// `dZ` from `dP` through the row softmax (and the `1/τ` scale in Gumbel
/// mode; the noise is a constant shift).
pub fn assign_backward(a: &Assignment, mode: AssignMode, dp: &Mat) -> Mat {
    let scale = match mode {
        AssignMode::Hard => 1.0,
        AssignMode::Gumbel { tau, .. } => 1.0 / tau,
    };
    let mut dz = Mat::zeros(dp.rows, dp.cols);
    for i in 0..dp.rows {
        let p = a.p.row(i);
        let g = dp.row(i);
        let inner: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        for (k, out) in dz.row_mut(i).iter_mut().enumerate() {
            *out = scale * p[k] * (g[k] - inner);
        }
    }
    dz
}

/// Auxiliary router objective: mean per-instance entropy of `P` (pushes
/// assignments to be sharp) plus `KL(mean P ‖ uniform)` (keeps clusters in
/// use). Returns the value and `dL/dP`.
pub fn router_aux_loss(p: &Mat) -> (f64, Mat) {
    const FLOOR: f64 = 1e-12;
    let (l, k) = p.shape();
    let inv_l = 1.0 / l as f64;
    let mut mean = vec![0.0; k];
    let mut entropy = 0.0;
    let mut dp = Mat::zeros(l, k);
    for i in 0..l {
        for (j, &v) in p.row(i).iter().enumerate() {
            let v = v.max(FLOOR);
            entropy -= v * v.ln();
            dp.data[i * k + j] = -(v.ln() + 1.0) * inv_l;
            mean[j] += p.get(i, j) * inv_l;
        }
    }
    entropy *= inv_l;
    let mut kl = 0.0;
    let mut dmean = vec![0.0; k];
    for (j, &m) in mean.iter().enumerate() {
        let m = m.max(FLOOR);
        kl += m * (m * k as f64).ln();
        dmean[j] = (m * k as f64).ln() + 1.0;
    }
    for i in 0..l {
        for j in 0..k {
            dp.data[i * k + j] += dmean[j] * inv_l;
        }
    }
    (entropy + kl, dp)
}

/// A bijection on `0..L` and its inverse, with `pi_inv[pi[j]] == j`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Permutation {
    pi: Vec<usize>,
    pi_inv: Vec<usize>,
}

impl Permutation {
    pub fn identity(n: usize) -> Self {
        Permutation {
            pi: (0..n).collect(),
            pi_inv: (0..n).collect(),
        }
    }

    pub fn from_vec(pi: Vec<usize>) -> Result<Self> {
        let n = pi.len();
        let mut pi_inv = vec![usize::MAX; n];
        for (j, &p) in pi.iter().enumerate() {
            if p >= n {
                return Err(Error::NotBijective(format!("index {p} out of range 0..{n}")));
            }
            if pi_inv[p] != usize::MAX {
                return Err(Error::NotBijective(format!("index {p} appears twice")));
            }
            pi_inv[p] = j;
        }
        Ok(Permutation { pi, pi_inv })
    }

    pub fn pi(&self) -> &[usize] {
        &self.pi
    }

    pub fn pi_inv(&self) -> &[usize] {
        &self.pi_inv
    }

    pub fn len(&self) -> usize {
        self.pi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pi.is_empty()
    }

    pub fn inverse(&self) -> Permutation {
        Permutation {
            pi: self.pi_inv.clone(),
            pi_inv: self.pi.clone(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.pi.iter().enumerate().all(|(i, &p)| i == p)
    }
}

/// Stable ascending argsort of the labels.
pub fn build_permutation(c: &[usize]) -> Permutation {
    let mut pi: Vec<usize> = (0..c.len()).collect();
    pi.sort_by_key(|&i| c[i]);
    let mut pi_inv = vec![0; c.len()];
    for (j, &p) in pi.iter().enumerate() {
        pi_inv[p] = j;
    }
    Permutation { pi, pi_inv }
}

/// Row `j` of the result is row `pi[j]` of `x`.
pub fn apply_permutation(x: &Mat, pi: &[usize]) -> Result<Mat> {
    if pi.len() != x.rows {
        return Err(Error::Shape(format!(
            "permutation of length {} for {} rows",
            pi.len(),
            x.rows
        )));
    }
    Permutation::from_vec(pi.to_vec())?;
    Ok(gather_rows(x, pi))
}

/// Row `i` of the result is row `pi_inv[i]` of `y`; undoes [`apply_permutation`].
pub fn restore_order(y: &Mat, perm: &Permutation) -> Result<Mat> {
    if perm.len() != y.rows {
        return Err(Error::Shape(format!(
            "permutation of length {} for {} rows",
            perm.len(),
            y.rows
        )));
    }
    Ok(gather_rows(y, perm.pi_inv()))
}

pub(crate) fn gather_rows(x: &Mat, idx: &[usize]) -> Mat {
    let mut out = Mat::zeros(idx.len(), x.cols);
    for (j, &i) in idx.iter().enumerate() {
        out.row_mut(j).copy_from_slice(x.row(i));
    }
    out
}

pub fn cluster_sizes(c: &[usize], n_clusters: usize) -> Vec<usize> {
    let mut sizes = vec![0; n_clusters];
    for &l in c {
        sizes[l] += 1;
    }
    sizes
}
