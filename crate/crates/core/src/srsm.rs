//! Query-conditioned state-space block.
//!
//! One block over a sequence `X` of `N` rows:
//!
//! * score rows with a linear projection, take the top `K` as queries and
//!   gate them by `sigmoid(score)`;
//! * pool the queries and map them to a per-channel step `Δ` (softplus, so it
//!   stays positive) and a shared input vector `B′`;
//! * discretize the diagonal continuous system `ḣ = A0 h + B′ u` by
//!   zero-order hold;
//! * scan the `N − K` context rows causally along four traversal orders and
//!   average the outputs;
//! * add the scan output to the context rows (queries get no update) and
//!   layer-normalize.
//!
//! Every channel keeps its own `n_state` state vector; `A0` and `B′` are
//! shared across channels, `Cout` and `Dskip` are per channel.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, sigmoid, softplus, Mat};
use crate::reorder::{gather_rows, Permutation};

/// Added to `softplus(raw)` so the step never reaches zero.
pub const DELTA_FLOOR: f64 = 1e-4;
/// Below this `|Δ·A0|` the ZOH gain uses its Taylor series.
pub const SERIES_THRESHOLD: f64 = 1e-6;
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectorParams {
    pub w_score: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsmParams {
    /// Diagonal of the base transition; strictly negative. Not trained.
    pub a0: Vec<f64>,
    /// `d × n_state`
    pub cout: Mat,
    pub dskip: Vec<f64>,
    /// `d × d`
    pub w_delta: Mat,
    pub b_delta: Vec<f64>,
    /// `n_state × d`
    pub w_b: Mat,
    pub b_b: Vec<f64>,
}

impl SsmParams {
    pub fn d(&self) -> usize {
        self.dskip.len()
    }

    pub fn n_state(&self) -> usize {
        self.a0.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockParams {
    pub selector: SelectorParams,
    pub ssm: SsmParams,
    pub ln_gamma: Vec<f64>,
    pub ln_beta: Vec<f64>,
}

fn uniform_mat(rows: usize, cols: usize, bound: f64, rng: &mut impl Rng) -> Mat {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Mat { rows, cols, data }
}

fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl BlockParams {
    pub fn init(d: usize, n_state: usize, rng: &mut impl Rng) -> Self {
        let bd = 1.0 / (d as f64).sqrt();
        let bn = 1.0 / (n_state as f64).sqrt();
        let b_delta = (0..d)
            .map(|_| {
                let log_dt = rng.random_range((1e-3f64).ln()..=(1e-1f64).ln());
                inverse_softplus(log_dt.exp())
            })
            .collect();
        BlockParams {
            selector: SelectorParams {
                w_score: uniform_mat(1, d, bd, rng).data,
            },
            ssm: SsmParams {
                a0: (0..n_state).map(|s| -((s + 1) as f64)).collect(),
                cout: uniform_mat(d, n_state, bn, rng),
                dskip: vec![1.0; d],
                w_delta: uniform_mat(d, d, 0.1 * bd, rng),
                b_delta,
                w_b: uniform_mat(n_state, d, bd, rng),
                b_b: vec![1.0; n_state],
            },
            ln_gamma: vec![1.0; d],
            ln_beta: vec![0.0; d],
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |v: &Vec<f64>| vec![0.0; v.len()];
        let zm = |m: &Mat| Mat::zeros(m.rows, m.cols);
        BlockParams {
            selector: SelectorParams {
                w_score: z(&self.selector.w_score),
            },
            ssm: SsmParams {
                a0: z(&self.ssm.a0),
                cout: zm(&self.ssm.cout),
                dskip: z(&self.ssm.dskip),
                w_delta: zm(&self.ssm.w_delta),
                b_delta: z(&self.ssm.b_delta),
                w_b: zm(&self.ssm.w_b),
                b_b: z(&self.ssm.b_b),
            },
            ln_gamma: z(&self.ln_gamma),
            ln_beta: z(&self.ln_beta),
        }
    }

    /// `(name, rows, cols, values)` in declaration order.
    pub fn tensors(&self) -> Vec<(&'static str, usize, usize, &[f64])> {
        let s = &self.ssm;
        let d = s.d();
        let n = s.n_state();
        vec![
            ("w_score", d, 1, &self.selector.w_score[..]),
            ("a0", n, 1, &s.a0[..]),
            ("cout", d, n, &s.cout.data[..]),
            ("dskip", d, 1, &s.dskip[..]),
            ("w_delta", d, d, &s.w_delta.data[..]),
            ("b_delta", d, 1, &s.b_delta[..]),
            ("w_b", n, d, &s.w_b.data[..]),
            ("b_b", n, 1, &s.b_b[..]),
            ("ln_gamma", d, 1, &self.ln_gamma[..]),
            ("ln_beta", d, 1, &self.ln_beta[..]),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let s = &mut self.ssm;
        vec![
            &mut self.selector.w_score[..],
            &mut s.a0[..],
            &mut s.cout.data[..],
            &mut s.dskip[..],
            &mut s.w_delta.data[..],
            &mut s.b_delta[..],
            &mut s.w_b.data[..],
            &mut s.b_b[..],
            &mut self.ln_gamma[..],
            &mut self.ln_beta[..],
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    SemanticForward,
    SemanticBackward,
    SpatialForward,
    SpatialBackward,
}

pub const DEFAULT_DIRECTIONS: [Direction; 4] = [
    Direction::SemanticForward,
    Direction::SemanticBackward,
    Direction::SpatialForward,
    Direction::SpatialBackward,
];

/// Four traversal orders over the context rows. Each entry lists context
/// positions in the order they are visited.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DirectionSet {
    pub orders: [Vec<usize>; 4],
}

impl DirectionSet {
    /// `coords` are the grid cells of the context rows, in sequence order.
    pub fn new(directions: &[Direction; 4], coords: &[(u32, u32)]) -> Self {
        let m = coords.len();
        let semantic: Vec<usize> = (0..m).collect();
        let mut spatial = semantic.clone();
        spatial.sort_by_key(|&i| coords[i]);
        let orders = directions.map(|dir| match dir {
            Direction::SemanticForward => semantic.clone(),
            Direction::SemanticBackward => semantic.iter().rev().copied().collect(),
            Direction::SpatialForward => spatial.clone(),
            Direction::SpatialBackward => spatial.iter().rev().copied().collect(),
        });
        DirectionSet { orders }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockConfig {
    pub k: usize,
    pub directions: [Direction; 4],
    /// When false the block reduces to `LN(x + Dskip ⊙ x)`: no queries, no
    /// conditioning, no scan.
    pub scan_enabled: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuerySplit {
    /// Query positions, ascending.
    pub query_idx: Vec<usize>,
    /// Remaining positions, ascending (input order).
    pub context_idx: Vec<usize>,
    /// `K × d`, gated query rows.
    pub q: Mat,
    /// `(N − K) × d`
    pub cseq: Mat,
    pub gates: Vec<f64>,
    /// Scores of all `N` rows.
    pub scores: Vec<f64>,
}

/// Top-`K` rows by `x · w_score`; ties go to the lower index.
pub fn select_queries(x: &Mat, sel: &SelectorParams, k: usize) -> Result<QuerySplit> {
    let n = x.rows;
    if sel.w_score.len() != x.cols {
        return Err(Error::Shape(format!(
            "selector width {} vs input width {}",
            sel.w_score.len(),
            x.cols
        )));
    }
    if k == 0 {
        return Err(Error::InvalidConfig("K must be at least 1".into()));
    }
    if k >= n {
        return Err(Error::QuerySetExhaustsContext { k, n });
    }
    let scores: Vec<f64> = (0..n).map(|i| dot(x.row(i), &sel.w_score)).collect();
    let mut ranked: Vec<usize> = (0..n).collect();
    // Numeric order, so -0.0 and 0.0 tie; scores are finite here.
    ranked.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    let mut is_query = vec![false; n];
    for &i in &ranked[..k] {
        is_query[i] = true;
    }
    let query_idx: Vec<usize> = (0..n).filter(|&i| is_query[i]).collect();
    let context_idx: Vec<usize> = (0..n).filter(|&i| !is_query[i]).collect();
    let gates: Vec<f64> = query_idx.iter().map(|&i| sigmoid(scores[i])).collect();
    let mut q = gather_rows(x, &query_idx);
    for (j, &g) in gates.iter().enumerate() {
        q.row_mut(j).iter_mut().for_each(|v| *v *= g);
    }
    let cseq = gather_rows(x, &context_idx);
    Ok(QuerySplit {
        query_idx,
        context_idx,
        q,
        cseq,
        gates,
        scores,
    })
}

/// Pooled query statistic and the maps derived from it.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditioning {
    pub qbar: Vec<f64>,
    pub raw_delta: Vec<f64>,
    pub delta: Vec<f64>,
    pub bprime: Vec<f64>,
}

pub fn condition(split: &QuerySplit, p: &SsmParams) -> Conditioning {
    let qbar = split.q.col_mean();
    let mut raw_delta = p.w_delta.mul_vec(&qbar);
    raw_delta.iter_mut().zip(&p.b_delta).for_each(|(r, b)| *r += b);
    let delta = raw_delta.iter().map(|&r| softplus(r) + DELTA_FLOOR).collect();
    let mut bprime = p.w_b.mul_vec(&qbar);
    bprime.iter_mut().zip(&p.b_b).for_each(|(v, b)| *v += b);
    Conditioning {
        qbar,
        raw_delta,
        delta,
        bprime,
    }
}

/// `(Δ, B′)` from the query set.
pub fn derive_step_params(split: &QuerySplit, p: &SsmParams) -> (Vec<f64>, Vec<f64>) {
    let c = condition(split, p);
    (c.delta, c.bprime)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteStep {
    /// `d × n_state`, `exp(Δ_c · A0_s)`.
    pub ad: Mat,
    /// `d × n_state`, ZOH input gain times `B′_s`.
    pub bd: Mat,
    /// `d × n_state`, ZOH input gain alone, `(exp(Δ A0) − 1) / A0`.
    pub gain: Mat,
}

/// `(e^z − 1) / z`, by series near zero.
pub fn phi(z: f64) -> f64 {
    if z.abs() < SERIES_THRESHOLD {
        1.0 + z / 2.0 + z * z / 6.0
    } else {
        z.exp_m1() / z
    }
}

/// Derivative of [`phi`].
pub fn phi_prime(z: f64) -> f64 {
    if z.abs() < 1e-3 {
        0.5 + z / 3.0 + z * z / 8.0 + z * z * z / 30.0
    } else {
        (z * z.exp() - z.exp_m1()) / (z * z)
    }
}

/// Zero-order hold of `ḣ = A0 h + B′ u` over a step of length `Δ_c`, per
/// channel `c` and state `s`:
///
/// `Ad = exp(Δ A0)`, `Bd = (Δ A0)⁻¹ (exp(Δ A0) − 1) · Δ B′`.
pub fn discretize_zoh(a0: &[f64], delta: &[f64], bprime: &[f64]) -> Result<DiscreteStep> {
    if a0.len() != bprime.len() {
        return Err(Error::Shape(format!(
            "A0 has {} states but B' has {}",
            a0.len(),
            bprime.len()
        )));
    }
    if let Some(v) = delta.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
        return Err(Error::InvalidConfig(format!("step Δ must be positive, got {v}")));
    }
    if let Some(v) = a0.iter().find(|v| !(**v < 0.0)) {
        return Err(Error::InvalidConfig(format!("A0 entries must be negative, got {v}")));
    }
    let d = delta.len();
    let n = a0.len();
    let mut ad = Mat::zeros(d, n);
    let mut bd = Mat::zeros(d, n);
    let mut gain = Mat::zeros(d, n);
    for c in 0..d {
        for s in 0..n {
            let z = delta[c] * a0[s];
            let g = delta[c] * phi(z);
            ad.set(c, s, z.exp());
            gain.set(c, s, g);
            bd.set(c, s, g * bprime[s]);
        }
    }
    Ok(DiscreteStep { ad, bd, gain })
}

fn check_scan_shapes(step: &DiscreteStep, p: &SsmParams, inputs: &Mat) -> Result<()> {
    let (d, n) = step.ad.shape();
    if inputs.cols != d || p.d() != d || p.n_state() != n || p.cout.shape() != (d, n) {
        return Err(Error::Shape(format!(
            "scan with step {d}x{n}, Cout {:?}, inputs width {}",
            p.cout.shape(),
            inputs.cols
        )));
    }
    Ok(())
}

/// One causal pass visiting rows of `inputs` in `order`. Outputs go back to
/// the input row positions. With `keep_states` also returns the visited
/// states (`order.len() × d × n_state`, in visit order); otherwise the
/// second value is empty.
fn scan_with_states(
    step: &DiscreteStep,
    p: &SsmParams,
    inputs: &Mat,
    order: &[usize],
    keep_states: bool,
) -> (Mat, Vec<f64>) {
    let (d, n) = step.ad.shape();
    let mut out = Mat::zeros(inputs.rows, d);
    let mut states = if keep_states { vec![0.0; order.len() * d * n] } else { Vec::new() };
    let mut h = vec![0.0; d * n];
    for (t, &k) in order.iter().enumerate() {
        let u = inputs.row(k);
        let y = out.row_mut(k);
        for c in 0..d {
            let base = c * n;
            let mut acc = p.dskip[c] * u[c];
            for s in 0..n {
                let i = base + s;
                h[i] = step.ad.data[i] * h[i] + step.bd.data[i] * u[c];
                acc += p.cout.data[i] * h[i];
            }
            y[c] = acc;
        }
        if keep_states {
            states[t * d * n..(t + 1) * d * n].copy_from_slice(&h);
        }
    }
    (out, states)
}

/// `h_k = Ad ⊙ h_{k−1} + Bd · u_k`, `y_k = Cout · h_k + Dskip ⊙ u_k`, with
/// `h_0 = 0`, visiting rows in `order`.
pub fn scan_causal(step: &DiscreteStep, p: &SsmParams, inputs: &Mat, order: &[usize]) -> Result<Mat> {
    check_scan_shapes(step, p, inputs)?;
    if order.len() != inputs.rows {
        return Err(Error::Shape(format!(
            "order of length {} for {} rows",
            order.len(),
            inputs.rows
        )));
    }
    Permutation::from_vec(order.to_vec())?;
    Ok(scan_with_states(step, p, inputs, order, false).0)
}

/// Mean of the four direction scans, aligned to input order. Directions are
/// summed in a fixed order so the result does not depend on scheduling.
pub fn multi_direction_fuse(
    step: &DiscreteStep,
    p: &SsmParams,
    cseq: &Mat,
    directions: &DirectionSet,
) -> Result<Mat> {
    check_scan_shapes(step, p, cseq)?;
    Ok(fuse_with_states(step, p, cseq, directions, false).0)
}

fn fuse_with_states(
    step: &DiscreteStep,
    p: &SsmParams,
    cseq: &Mat,
    directions: &DirectionSet,
    keep_states: bool,
) -> (Mat, Vec<Vec<f64>>) {
    let runs: Vec<(Mat, Vec<f64>)> = directions
        .orders
        .iter()
        .map(|o| scan_with_states(step, p, cseq, o, keep_states))
        .collect();
    let mut fused = Mat::zeros(cseq.rows, cseq.cols);
    for (i, v) in fused.data.iter_mut().enumerate() {
        *v = (runs[0].0.data[i] + runs[1].0.data[i] + runs[2].0.data[i] + runs[3].0.data[i]) / 4.0;
    }
    (fused, runs.into_iter().map(|r| r.1).collect())
}

/// Row-wise layer norm with affine parameters; returns `(out, xhat, rstd)`.
fn layer_norm(pre: &Mat, gamma: &[f64], beta: &[f64]) -> (Mat, Mat, Vec<f64>) {
    let (n, d) = pre.shape();
    let mut out = Mat::zeros(n, d);
    let mut xhat = Mat::zeros(n, d);
    let mut rstd = Vec::with_capacity(n);
    for i in 0..n {
        let r = pre.row(i);
        let mu = r.iter().sum::<f64>() / d as f64;
        let var = r.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd.push(rs);
        for j in 0..d {
            let xh = (r[j] - mu) * rs;
            xhat.set(i, j, xh);
            out.set(i, j, gamma[j] * xh + beta[j]);
        }
    }
    (out, xhat, rstd)
}

/// Everything the backward pass needs from one block evaluation.
#[derive(Clone, Debug)]
pub struct BlockCache {
    pub input: Mat,
    pub split: Option<QuerySplit>,
    pub conditioning: Option<Conditioning>,
    pub step: Option<DiscreteStep>,
    pub directions: Option<DirectionSet>,
    states: Vec<Vec<f64>>,
    xhat: Mat,
    rstd: Vec<f64>,
    pub output: Mat,
}

impl BlockCache {
    /// Positions whose update came from the scan (all rows when the scan is
    /// disabled).
    pub fn context_idx(&self) -> Vec<usize> {
        match &self.split {
            Some(s) => s.context_idx.clone(),
            None => (0..self.input.rows).collect(),
        }
    }
}

/// Forward pass keeping everything `srsm_block_backward` needs.
pub fn srsm_block_forward(
    x: &Mat,
    coords: &[(u32, u32)],
    params: &BlockParams,
    cfg: &BlockConfig,
) -> Result<BlockCache> {
    block_forward(x, coords, params, cfg, true)
}

/// Without `keep_states` the cache cannot be used for a backward pass.
pub(crate) fn block_forward(
    x: &Mat,
    coords: &[(u32, u32)],
    params: &BlockParams,
    cfg: &BlockConfig,
    keep_states: bool,
) -> Result<BlockCache> {
    let d = params.ssm.d();
    if x.cols != d || coords.len() != x.rows {
        return Err(Error::Shape(format!(
            "block of width {d} got {}x{} input with {} coordinates",
            x.rows,
            x.cols,
            coords.len()
        )));
    }
    let mut pre = x.clone();
    let (split, conditioning, step, directions, states) = if cfg.scan_enabled {
        let split = select_queries(x, &params.selector, cfg.k)?;
        let cond = condition(&split, &params.ssm);
        let step = discretize_zoh(&params.ssm.a0, &cond.delta, &cond.bprime)?;
        let ctx_coords: Vec<(u32, u32)> = split.context_idx.iter().map(|&i| coords[i]).collect();
        let dirs = DirectionSet::new(&cfg.directions, &ctx_coords);
        let (fused, states) = fuse_with_states(&step, &params.ssm, &split.cseq, &dirs, keep_states);
        for (k, &pos) in split.context_idx.iter().enumerate() {
            pre.row_mut(pos)
                .iter_mut()
                .zip(fused.row(k))
                .for_each(|(a, b)| *a += b);
        }
        (Some(split), Some(cond), Some(step), Some(dirs), states)
    } else {
        for i in 0..x.rows {
            for (c, v) in pre.row_mut(i).iter_mut().enumerate() {
                *v += params.ssm.dskip[c] * x.get(i, c);
            }
        }
        (None, None, None, None, Vec::new())
    };
    let (output, xhat, rstd) = layer_norm(&pre, &params.ln_gamma, &params.ln_beta);
    Ok(BlockCache {
        input: x.clone(),
        split,
        conditioning,
        step,
        directions,
        states,
        xhat,
        rstd,
        output,
    })
}

/// Forward pass of one block; output has the input's shape.
pub fn srsm_block(x: &Mat, coords: &[(u32, u32)], params: &BlockParams, cfg: &BlockConfig) -> Result<Mat> {
    block_forward(x, coords, params, cfg, false).map(|c| c.output)
}

/// Backward pass of one block. `dq_extra` is an optional upstream gradient on
/// the gated query rows (the model pools them in the last block). Returns
/// the parameter gradients and `dL/dx`.
pub fn srsm_block_backward(
    params: &BlockParams,
    cache: &BlockCache,
    dout: &Mat,
    dq_extra: Option<&Mat>,
) -> (BlockParams, Mat) {
    let mut grads = params.zeros_like();
    let (n_rows, d) = dout.shape();
    let x = &cache.input;

    // layer norm
    let mut dpre = Mat::zeros(n_rows, d);
    for i in 0..n_rows {
        let go = dout.row(i);
        let xh = cache.xhat.row(i);
        let mut dxhat = vec![0.0; d];
        for j in 0..d {
            grads.ln_gamma[j] += go[j] * xh[j];
            grads.ln_beta[j] += go[j];
            dxhat[j] = go[j] * params.ln_gamma[j];
        }
        let m1 = dxhat.iter().sum::<f64>() / d as f64;
        let m2 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let rs = cache.rstd[i];
        for j in 0..d {
            dpre.set(i, j, rs * (dxhat[j] - m1 - xh[j] * m2));
        }
    }

    // residual
    let mut dx = dpre.clone();

    let (Some(split), Some(cond), Some(step), Some(dirs)) =
        (&cache.split, &cache.conditioning, &cache.step, &cache.directions)
    else {
        for i in 0..n_rows {
            for c in 0..d {
                let g = dpre.get(i, c);
                grads.ssm.dskip[c] += g * x.get(i, c);
                dx.data[i * d + c] += params.ssm.dskip[c] * g;
            }
        }
        return (grads, dx);
    };

    let ssm = &params.ssm;
    let n = ssm.n_state();
    let m = split.cseq.rows;
    let mut dad = vec![0.0; d * n];
    let mut dbd = vec![0.0; d * n];
    let mut du = Mat::zeros(m, d);

    for (dir, order) in dirs.orders.iter().enumerate() {
        let states = &cache.states[dir];
        let mut carry = vec![0.0; d * n];
        for t in (0..order.len()).rev() {
            let k = order[t];
            let u = split.cseq.row(k);
            let dy = dpre.row(split.context_idx[k]);
            let h_t = &states[t * d * n..(t + 1) * d * n];
            for c in 0..d {
                let gy = dy[c] / 4.0;
                grads.ssm.dskip[c] += gy * u[c];
                let mut du_c = ssm.dskip[c] * gy;
                for s in 0..n {
                    let i = c * n + s;
                    let gh = carry[i] + ssm.cout.data[i] * gy;
                    grads.ssm.cout.data[i] += gy * h_t[i];
                    let h_prev = if t > 0 { states[(t - 1) * d * n + i] } else { 0.0 };
                    dad[i] += gh * h_prev;
                    dbd[i] += gh * u[c];
                    du_c += step.bd.data[i] * gh;
                    carry[i] = step.ad.data[i] * gh;
                }
                du.data[k * d + c] += du_c;
            }
        }
    }

    // discretization: Ad = exp(Δ A0), Bd = gain(Δ, A0) · B′ with
    // ∂gain/∂Δ = exp(Δ A0) and ∂gain/∂A0 = Δ² φ′(Δ A0).
    let mut ddelta = vec![0.0; d];
    let mut dbprime = vec![0.0; n];
    for c in 0..d {
        for s in 0..n {
            let i = c * n + s;
            let dl = cond.delta[c];
            let a = ssm.a0[s];
            let z = dl * a;
            let dz = dad[i] * step.ad.data[i];
            let dgain = dbd[i] * cond.bprime[s];
            dbprime[s] += dbd[i] * step.gain.data[i];
            ddelta[c] += dz * a + dgain * step.ad.data[i];
            grads.ssm.a0[s] += dz * dl + dgain * dl * dl * phi_prime(z);
        }
    }

    // conditioning
    let draw: Vec<f64> = ddelta
        .iter()
        .zip(&cond.raw_delta)
        .map(|(g, &r)| g * sigmoid(r))
        .collect();
    grads.ssm.w_delta.add_outer(&draw, &cond.qbar);
    grads.ssm.b_delta.iter_mut().zip(&draw).for_each(|(a, b)| *a += b);
    grads.ssm.w_b.add_outer(&dbprime, &cond.qbar);
    grads.ssm.b_b.iter_mut().zip(&dbprime).for_each(|(a, b)| *a += b);
    let mut dqbar = ssm.w_delta.t_mul_vec(&draw);
    dqbar
        .iter_mut()
        .zip(ssm.w_b.t_mul_vec(&dbprime))
        .for_each(|(a, b)| *a += b);

    // query pooling and gating
    let k_q = split.q.rows;
    let mut dscore = vec![0.0; n_rows];
    for (j, &pos) in split.query_idx.iter().enumerate() {
        let mut dq: Vec<f64> = dqbar.iter().map(|v| v / k_q as f64).collect();
        if let Some(extra) = dq_extra {
            dq.iter_mut().zip(extra.row(j)).for_each(|(a, b)| *a += b);
        }
        let g = split.gates[j];
        let xr = x.row(pos);
        let dg = dot(&dq, xr);
        dscore[pos] += dg * g * (1.0 - g);
        for c in 0..d {
            dx.data[pos * d + c] += g * dq[c];
        }
    }

    // scores
    for (i, &ds) in dscore.iter().enumerate() {
        if ds != 0.0 {
            let xr = x.row(i);
            for c in 0..d {
                grads.selector.w_score[c] += ds * xr[c];
                dx.data[i * d + c] += ds * params.selector.w_score[c];
            }
        }
    }

    // context inputs
    for (k, &pos) in split.context_idx.iter().enumerate() {
        for c in 0..d {
            dx.data[pos * d + c] += du.get(k, c);
        }
    }

    (grads, dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_params(cout: f64, dskip: f64) -> SsmParams {
        SsmParams {
            a0: vec![-1.0],
            cout: Mat::from_vec(1, 1, vec![cout]).unwrap(),
            dskip: vec![dskip],
            w_delta: Mat::zeros(1, 1),
            b_delta: vec![0.0],
            w_b: Mat::zeros(1, 1),
            b_b: vec![0.0],
        }
    }

    fn scalar_step(ad: f64, bd: f64) -> DiscreteStep {
        DiscreteStep {
            ad: Mat::from_vec(1, 1, vec![ad]).unwrap(),
            bd: Mat::from_vec(1, 1, vec![bd]).unwrap(),
            gain: Mat::from_vec(1, 1, vec![1.0]).unwrap(),
        }
    }

    #[test]
    fn selector_examples() {
        // scores (0.1, 0.9, 0.5) with w = 1 on a width-1 input
        let x = Mat::from_rows(&[vec![0.1], vec![0.9], vec![0.5]]).unwrap();
        let sel = SelectorParams { w_score: vec![1.0] };
        let s = select_queries(&x, &sel, 2).unwrap();
        assert_eq!(s.query_idx, vec![1, 2]);
        assert_eq!(s.context_idx, vec![0]);

        let x = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let zero = SelectorParams { w_score: vec![0.0, 0.0] };
        let s = select_queries(&x, &zero, 1).unwrap();
        assert_eq!(s.query_idx, vec![0]);
        let s = select_queries(&x, &zero, 2).unwrap();
        assert_eq!(s.gates, vec![0.5, 0.5]);
        assert_eq!(s.q.data, vec![0.5, 1.0, 1.5, 2.0]);
        assert_eq!(s.cseq.data, vec![5.0, 6.0]);

        let err = select_queries(&x, &zero, 3).unwrap_err();
        assert!(err.to_string().contains("query set exhausts context"));
    }

    #[test]
    fn zero_query_gives_softplus_zero_step() {
        let x = Mat::zeros(3, 2);
        let split = select_queries(&x, &SelectorParams { w_score: vec![0.3, 0.1] }, 1).unwrap();
        let p = SsmParams {
            a0: vec![-1.0, -2.0],
            cout: Mat::zeros(2, 2),
            dskip: vec![0.0; 2],
            w_delta: Mat::identity(2),
            b_delta: vec![0.0; 2],
            w_b: Mat::zeros(2, 2),
            b_b: vec![1.0, 2.0],
        };
        let (delta, bprime) = derive_step_params(&split, &p);
        for v in delta {
            assert!((v - (std::f64::consts::LN_2 + 1e-4)).abs() < 1e-15);
        }
        assert_eq!(bprime, vec![1.0, 2.0]);
    }

    #[test]
    fn bprime_ignores_query_scale_when_w_b_is_zero() {
        let x = Mat::from_rows(&[vec![1.0, -2.0], vec![0.5, 0.5], vec![3.0, 1.0]]).unwrap();
        let p = SsmParams {
            a0: vec![-1.0, -2.0],
            cout: Mat::zeros(2, 2),
            dskip: vec![0.0; 2],
            w_delta: Mat::identity(2),
            b_delta: vec![0.0; 2],
            w_b: Mat::zeros(2, 2),
            b_b: vec![1.0, 2.0],
        };
        let sel = SelectorParams { w_score: vec![1.0, 0.0] };
        let a = derive_step_params(&select_queries(&x, &sel, 1).unwrap(), &p).1;
        let mut x7 = x.clone();
        x7.data.iter_mut().for_each(|v| *v *= 7.0);
        let b = derive_step_params(&select_queries(&x7, &sel, 1).unwrap(), &p).1;
        assert_eq!(a, b);
    }

    #[test]
    fn zoh_closed_form_at_half_decay() {
        let ln2 = std::f64::consts::LN_2;
        let step = discretize_zoh(&[-1.0], &[ln2], &[1.0]).unwrap();
        assert!((step.ad.get(0, 0) - 0.5).abs() < 1e-15);
        // (exp(ΔA0) − 1)/(ΔA0) = 0.5/ln 2 = 0.72134752...
        assert!((phi(-ln2) - 0.721_347_520_444_481_7).abs() < 1e-14);
        // times Δ: (0.5 − 1)/(−1) = 0.5
        assert!((step.bd.get(0, 0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zoh_small_step_limit() {
        let dt = 1e-9;
        let step = discretize_zoh(&[-1.0], &[dt], &[3.0]).unwrap();
        let ratio = step.bd.get(0, 0) / (dt * 3.0);
        assert!((1.0 - 1e-8..=1.0).contains(&ratio), "{ratio}");
        assert!((step.ad.get(0, 0) - 1.0).abs() < 1e-8);
    }

    #[test]
    fn zoh_rejects_nonpositive_step() {
        assert!(discretize_zoh(&[-2.0], &[0.0], &[1.0]).is_err());
        assert!(discretize_zoh(&[-2.0], &[-1.0], &[1.0]).is_err());
        assert!(discretize_zoh(&[0.0], &[1.0], &[1.0]).is_err());
        assert!(discretize_zoh(&[-2.0], &[DELTA_FLOOR], &[1.0]).is_ok());
    }

    #[test]
    fn phi_branches_agree_near_threshold() {
        for z in [-2e-6, -1e-6 * 0.999, 5e-7, 1.5e-6] {
            let series = 1.0 + z / 2.0 + z * z / 6.0;
            assert!((phi(z) - series).abs() < 1e-12);
        }
        for z in [-0.999e-3f64, -1.001e-3, 0.5e-3] {
            let exact = (z * z.exp() - z.exp_m1()) / (z * z);
            assert!((phi_prime(z) - exact).abs() < 1e-9);
        }
    }

    #[test]
    fn scan_unrolls_by_hand() {
        let p = scalar_params(1.0, 0.0);
        let u = Mat::from_rows(&[vec![1.0], vec![1.0], vec![1.0]]).unwrap();
        let y = scan_causal(&scalar_step(0.5, 1.0), &p, &u, &[0, 1, 2]).unwrap();
        assert_eq!(y.data, vec![1.0, 1.5, 1.75]);
        // reversed order: outputs still land at input rows
        let y = scan_causal(&scalar_step(0.5, 1.0), &p, &u, &[2, 1, 0]).unwrap();
        assert_eq!(y.data, vec![1.75, 1.5, 1.0]);
    }

    #[test]
    fn pure_skip_scan_is_identity() {
        let p = scalar_params(1.0, 1.0);
        let u = Mat::from_rows(&[vec![0.3], vec![-2.0], vec![5.0]]).unwrap();
        let y = scan_causal(&scalar_step(0.9, 0.0), &p, &u, &[1, 0, 2]).unwrap();
        assert_eq!(y, u);
    }

    #[test]
    fn single_row_scan_is_order_free() {
        let p = scalar_params(0.7, 0.2);
        let u = Mat::from_rows(&[vec![2.0]]).unwrap();
        let step = scalar_step(0.5, 0.3);
        let dirs = DirectionSet::new(&DEFAULT_DIRECTIONS, &[(3, 4)]);
        let single = scan_causal(&step, &p, &u, &[0]).unwrap();
        let fused = multi_direction_fuse(&step, &p, &u, &dirs).unwrap();
        assert_eq!(single, fused);
    }

    #[test]
    fn skip_only_fusion_returns_context() {
        let p = SsmParams {
            a0: vec![-1.0, -2.0],
            cout: Mat::zeros(2, 2),
            dskip: vec![1.0, 1.0],
            w_delta: Mat::zeros(2, 2),
            b_delta: vec![0.0; 2],
            w_b: Mat::zeros(2, 2),
            b_b: vec![1.0; 2],
        };
        let step = discretize_zoh(&p.a0, &[0.3, 0.4], &[1.0, 1.0]).unwrap();
        let c = Mat::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5], vec![4.0, 4.0]]).unwrap();
        let dirs = DirectionSet::new(&DEFAULT_DIRECTIONS, &[(0, 0), (5, 1), (2, 2)]);
        assert_eq!(multi_direction_fuse(&step, &p, &c, &dirs).unwrap(), c);
    }

    #[test]
    fn palindromic_input_gives_symmetric_fusion() {
        let p = SsmParams {
            a0: vec![-1.0, -3.0],
            cout: Mat::from_rows(&[vec![0.4, -0.2]]).unwrap(),
            dskip: vec![0.1],
            w_delta: Mat::zeros(1, 1),
            b_delta: vec![0.0],
            w_b: Mat::zeros(2, 1),
            b_b: vec![1.0, 0.5],
        };
        let step = discretize_zoh(&p.a0, &[0.4], &p.b_b).unwrap();
        let u = Mat::from_rows(&[vec![1.0], vec![-2.0], vec![3.0], vec![-2.0], vec![1.0]]).unwrap();
        // one grid row, so spatial order equals sequence order
        let coords: Vec<(u32, u32)> = (0..5).map(|c| (0, c)).collect();
        let fwd = scan_causal(&step, &p, &u, &[0, 1, 2, 3, 4]).unwrap();
        let bwd = scan_causal(&step, &p, &u, &[4, 3, 2, 1, 0]).unwrap();
        for i in 0..5 {
            assert!((fwd.get(i, 0) - bwd.get(4 - i, 0)).abs() < 1e-15);
        }
        let fused = multi_direction_fuse(&step, &p, &u, &DirectionSet::new(&DEFAULT_DIRECTIONS, &coords)).unwrap();
        for i in 0..5 {
            assert!((fused.get(i, 0) - fused.get(4 - i, 0)).abs() < 1e-15);
        }
    }

    #[test]
    fn spatial_orders_are_row_major() {
        let coords = [(1, 0), (0, 2), (0, 1), (1, 1)];
        let dirs = DirectionSet::new(&DEFAULT_DIRECTIONS, &coords);
        assert_eq!(dirs.orders[0], vec![0, 1, 2, 3]);
        assert_eq!(dirs.orders[1], vec![3, 2, 1, 0]);
        assert_eq!(dirs.orders[2], vec![2, 1, 0, 3]);
        assert_eq!(dirs.orders[3], vec![3, 0, 1, 2]);
    }

    fn random_block(d: usize, n: usize, seed: u64) -> BlockParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        BlockParams::init(d, n, &mut rng)
    }

    #[test]
    fn zero_update_block_is_layer_norm() {
        let mut params = random_block(3, 2, 1);
        params.ssm.cout = Mat::zeros(3, 2);
        params.ssm.dskip = vec![0.0; 3];
        let x = Mat::from_rows(&[vec![1.0, 2.0, 4.0], vec![0.0, -1.0, 1.0], vec![3.0, 3.0, 0.5]]).unwrap();
        let coords = [(0, 0), (0, 1), (1, 0)];
        let cfg = BlockConfig {
            k: 1,
            directions: DEFAULT_DIRECTIONS,
            scan_enabled: true,
        };
        let out = srsm_block(&x, &coords, &params, &cfg).unwrap();
        let (ln, _, _) = layer_norm(&x, &params.ln_gamma, &params.ln_beta);
        assert!(out.max_abs_diff(&ln) < 1e-12);
    }

    #[test]
    fn block_shapes() {
        let params = random_block(3, 2, 2);
        let cfg = BlockConfig {
            k: 1,
            directions: DEFAULT_DIRECTIONS,
            scan_enabled: true,
        };
        let x = Mat::from_rows(&[vec![1.0, 0.0, 2.0], vec![0.5, -1.0, 1.0]]).unwrap();
        let coords = [(0, 0), (1, 1)];
        let y = srsm_block(&x, &coords, &params, &cfg).unwrap();
        assert_eq!(y.shape(), (2, 3));
        let y2 = srsm_block(&y, &coords, &params, &cfg).unwrap();
        assert_eq!(y2.shape(), (2, 3));
    }
}
