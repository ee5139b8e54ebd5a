//! The full bag classifier: projection, semantic reordering, a stack of scan
//! blocks, order restoration, pooling and a linear head.
//!
//! Gradients are written by hand, layer by layer; see [`SemaMilModel::loss_and_grad`].

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bagdata::{stable_hash, Bag};
use crate::error::{Error, Result};
use crate::linalg::{softmax_in_place, Mat};
use crate::reorder::{
    apply_permutation, assign, assign_backward, build_permutation, restore_order, router_aux_loss,
    router_backward, router_forward_cached, AssignMode, Assignment, Permutation, RouterCache,
    RouterParams,
};
use crate::srsm::{
    block_forward, srsm_block_backward, BlockCache, BlockConfig, BlockParams, Direction,
    DEFAULT_DIRECTIONS,
};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SEMM";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignConfig {
    Hard,
    /// Gumbel-perturbed assignment; the noise seed is derived from the bag id.
    Gumbel { tau: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_in: usize,
    pub d: usize,
    pub hidden: usize,
    pub n_clusters: usize,
    pub k: usize,
    pub n_state: usize,
    pub n_layers: usize,
    pub n_classes: usize,
    pub assign_mode: AssignConfig,
    pub directions: [Direction; 4],
    /// Semantic reordering; off means the identity permutation.
    pub sr_enabled: bool,
    /// Query-conditioned scan; off means each block is a pure skip path.
    pub srsm_enabled: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_in: 32,
            d: 16,
            hidden: 32,
            n_clusters: 8,
            k: 8,
            n_state: 4,
            n_layers: 2,
            n_classes: 2,
            assign_mode: AssignConfig::Hard,
            directions: DEFAULT_DIRECTIONS,
            sr_enabled: true,
            srsm_enabled: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_in", self.d_in),
            ("d", self.d),
            ("hidden", self.hidden),
            ("k", self.k),
            ("n_state", self.n_state),
            ("n_classes", self.n_classes),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("model.{name} must be positive")));
        }
        if self.n_clusters == 0 {
            return Err(Error::InvalidConfig("model.n_clusters must be positive".into()));
        }
        if let AssignConfig::Gumbel { tau } = self.assign_mode {
            if !(tau > 0.0) {
                return Err(Error::InvalidConfig(format!("gumbel tau must be > 0, got {tau}")));
            }
        }
        Ok(())
    }

    fn block_config(&self) -> BlockConfig {
        BlockConfig {
            k: self.k,
            directions: self.directions,
            scan_enabled: self.srsm_enabled,
        }
    }
}

/// Per-layer record of what the block did.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerTrace {
    /// Query positions in the reordered sequence (empty with the scan off).
    pub query_idx: Vec<usize>,
    pub delta: Option<Vec<f64>>,
    pub bprime: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Trace {
    /// Hard cluster label per instance (empty with reordering off).
    pub labels: Vec<usize>,
    pub pi: Vec<usize>,
    pub layers: Vec<LayerTrace>,
}

/// Borrowed view of one parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamTensor<'a> {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: &'a [f64],
    pub trainable: bool,
}

/// What the training harness needs from a bag classifier.
pub trait MilModel: Clone + Send + Sync {
    fn n_classes(&self) -> usize;

    fn logits(&self, bag: &Bag) -> Result<Vec<f64>>;

    /// Training loss (cross-entropy plus any auxiliary terms weighted by
    /// `lambda_router`).
    fn loss(&self, bag: &Bag, lambda_router: f64) -> Result<f64>;

    /// Loss and its gradient, one flat vector per tensor in [`MilModel::tensors`] order.
    fn loss_and_grad(&self, bag: &Bag, lambda_router: f64) -> Result<(f64, Vec<Vec<f64>>)>;

    fn tensors(&self) -> Vec<ParamTensor<'_>>;

    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;
}

/// `−log softmax(logits)[label]` with the max shift.
pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let top = crate::linalg::argmax(logits);
    let m = logits[top];
    let rest: f64 = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != top)
        .map(|(_, v)| (v - m).exp())
        .sum();
    (m - logits[label]) + rest.ln_1p()
}

/// `(loss, dloss/dlogits)`.
pub fn cross_entropy_grad(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let mut p = logits.to_vec();
    softmax_in_place(&mut p);
    p[label] -= 1.0;
    (cross_entropy(logits, label), p)
}

pub(crate) fn bag_matrix(bag: &Bag, d_in: usize) -> Result<Mat> {
    if bag.dim != d_in {
        return Err(Error::Shape(format!(
            "bag {} has embedding width {} but the model expects d_in = {}",
            bag.bag_id, bag.dim, d_in
        )));
    }
    Ok(Mat {
        rows: bag.len(),
        cols: bag.dim,
        data: bag.x.iter().map(|&v| v as f64).collect(),
    })
}

pub(crate) fn uniform(rows: usize, cols: usize, fan_in: usize, rng: &mut impl Rng) -> Mat {
    let b = 1.0 / (fan_in as f64).sqrt();
    Mat {
        rows,
        cols,
        data: (0..rows * cols).map(|_| rng.random_range(-b..=b)).collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SemaMilModel {
    pub config: ModelConfig,
    /// `d × d_in`
    pub w_proj: Mat,
    pub router: RouterParams,
    pub blocks: Vec<BlockParams>,
    /// `d × 2d`, merges the context mean and the query mean.
    pub w_pool: Mat,
    /// `n_classes × d`
    pub w_head: Mat,
    pub b_head: Vec<f64>,
}

struct ForwardCache {
    x: Mat,
    router: Option<(RouterCache, Assignment, AssignMode)>,
    perm: Permutation,
    x0: Mat,
    blocks: Vec<BlockCache>,
    ctx_idx: Vec<usize>,
    n_query: usize,
    pooled: Vec<f64>,
    v: Vec<f64>,
    logits: Vec<f64>,
}

impl SemaMilModel {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w_proj = uniform(c.d, c.d_in, c.d_in, &mut rng);
        let router = RouterParams::new(
            uniform(c.hidden, c.d, c.d, &mut rng),
            uniform(c.n_clusters, c.hidden, c.hidden, &mut rng),
        )?;
        let blocks = (0..c.n_layers)
            .map(|_| BlockParams::init(c.d, c.n_state, &mut rng))
            .collect();
        let w_pool = uniform(c.d, 2 * c.d, 2 * c.d, &mut rng);
        let w_head = uniform(c.n_classes, c.d, c.d, &mut rng);
        Ok(SemaMilModel {
            config: c.clone(),
            w_proj,
            router,
            blocks,
            w_pool,
            w_head,
            b_head: vec![0.0; c.n_classes],
        })
    }

    pub fn zeros_like(&self) -> Self {
        let zm = |m: &Mat| Mat::zeros(m.rows, m.cols);
        SemaMilModel {
            config: self.config.clone(),
            w_proj: zm(&self.w_proj),
            router: RouterParams {
                w1: zm(&self.router.w1),
                w2: zm(&self.router.w2),
            },
            blocks: self.blocks.iter().map(BlockParams::zeros_like).collect(),
            w_pool: zm(&self.w_pool),
            w_head: zm(&self.w_head),
            b_head: vec![0.0; self.b_head.len()],
        }
    }

    fn assign_mode(&self, bag: &Bag) -> AssignMode {
        match self.config.assign_mode {
            AssignConfig::Hard => AssignMode::Hard,
            AssignConfig::Gumbel { tau } => AssignMode::Gumbel {
                tau,
                seed: stable_hash(&bag.bag_id),
            },
        }
    }

    /// Hard labels and the resulting permutation, without running the blocks.
    pub fn reorder(&self, bag: &Bag) -> Result<(Vec<usize>, Permutation)> {
        let x = bag_matrix(bag, self.config.d_in)?;
        let xd = x.matmul_t(&self.w_proj);
        let rc = router_forward_cached(&self.router, &xd)?;
        let a = assign(&rc.z, self.assign_mode(bag))?;
        let perm = build_permutation(&a.c);
        Ok((a.c, perm))
    }

    /// `for_grad` keeps the scan states needed by the backward pass.
    fn forward_cached(&self, bag: &Bag, for_grad: bool) -> Result<ForwardCache> {
        let cfg = &self.config;
        let x = bag_matrix(bag, cfg.d_in)?;
        if cfg.srsm_enabled && cfg.n_layers > 0 && bag.len() <= cfg.k {
            return Err(Error::QuerySetExhaustsContext {
                k: cfg.k,
                n: bag.len(),
            });
        }
        let xd = x.matmul_t(&self.w_proj);

        let (router, perm) = if cfg.sr_enabled {
            let rc = router_forward_cached(&self.router, &xd)?;
            let mode = self.assign_mode(bag);
            let a = assign(&rc.z, mode)?;
            let perm = build_permutation(&a.c);
            (Some((rc, a, mode)), perm)
        } else {
            (None, Permutation::identity(bag.len()))
        };
        let x0 = apply_permutation(&xd, perm.pi())?;
        let coords: Vec<(u32, u32)> = perm.pi().iter().map(|&i| bag.coords[i]).collect();

        let block_cfg = cfg.block_config();
        let mut blocks: Vec<BlockCache> = Vec::with_capacity(self.blocks.len());
        for params in &self.blocks {
            let input = blocks.last().map_or(&x0, |c| &c.output);
            let cache = block_forward(input, &coords, params, &block_cfg, for_grad)?;
            blocks.push(cache);
        }

        let last = blocks.last().map_or(&x0, |c| &c.output);
        let ctx_idx = blocks
            .last()
            .map_or_else(|| (0..x0.rows).collect(), |c| c.context_idx());
        let d = cfg.d;
        let mut pooled = vec![0.0; 2 * d];
        for &i in &ctx_idx {
            for (p, v) in pooled[..d].iter_mut().zip(last.row(i)) {
                *p += v;
            }
        }
        pooled[..d].iter_mut().for_each(|p| *p /= ctx_idx.len() as f64);
        let n_query = match blocks.last().and_then(|c| c.split.as_ref()) {
            Some(split) => {
                pooled[d..].copy_from_slice(&split.q.col_mean());
                split.q.rows
            }
            None => 0,
        };
        let v = self.w_pool.mul_vec(&pooled);
        let mut logits = self.w_head.mul_vec(&v);
        logits.iter_mut().zip(&self.b_head).for_each(|(l, b)| *l += b);

        Ok(ForwardCache {
            x,
            router,
            perm,
            x0,
            blocks,
            ctx_idx,
            n_query,
            pooled,
            v,
            logits,
        })
    }

    /// Class logits plus a record of labels, permutation and per-layer queries.
    pub fn forward(&self, bag: &Bag) -> Result<(Vec<f64>, Trace)> {
        let fc = self.forward_cached(bag, false)?;
        let trace = Trace {
            labels: fc.router.as_ref().map_or_else(Vec::new, |r| r.1.c.clone()),
            pi: fc.perm.pi().to_vec(),
            layers: fc
                .blocks
                .iter()
                .map(|b| LayerTrace {
                    query_idx: b.split.as_ref().map_or_else(Vec::new, |s| s.query_idx.clone()),
                    delta: b.conditioning.as_ref().map(|c| c.delta.clone()),
                    bprime: b.conditioning.as_ref().map(|c| c.bprime.clone()),
                })
                .collect(),
        };
        Ok((fc.logits, trace))
    }

    /// Final sequence representation in the bag's original instance order.
    pub fn restored_outputs(&self, bag: &Bag) -> Result<Mat> {
        let fc = self.forward_cached(bag, false)?;
        let last = fc.blocks.last().map_or(&fc.x0, |c| &c.output);
        restore_order(last, &fc.perm)
    }

    /// Smallest gap behind any discrete choice in the forward pass: top-1 vs
    /// top-2 router logit per row, and the K-th vs (K+1)-th selector score per
    /// block. Perturbations smaller than this leave the choices unchanged.
    pub fn decision_margin(&self, bag: &Bag) -> Result<f64> {
        let fc = self.forward_cached(bag, false)?;
        let mut margin = f64::INFINITY;
        if let Some((rc, _, _)) = &fc.router {
            for i in (0..rc.z.rows).filter(|_| rc.z.cols > 1) {
                let mut row = rc.z.row(i).to_vec();
                row.sort_by(|a, b| b.total_cmp(a));
                margin = margin.min(row[0] - row[1]);
            }
        }
        for b in &fc.blocks {
            if let Some(split) = &b.split {
                let mut s = split.scores.clone();
                s.sort_by(|a, b| b.total_cmp(a));
                let k = split.query_idx.len();
                margin = margin.min(s[k - 1] - s[k]);
            }
        }
        Ok(margin)
    }

    fn aux_loss(&self, fc: &ForwardCache, lambda: f64) -> f64 {
        match &fc.router {
            Some((_, a, _)) if lambda > 0.0 => lambda * router_aux_loss(&a.p).0,
            _ => 0.0,
        }
    }

    /// Total loss and gradients with the same layout as `self`.
    pub fn loss_and_grad_model(&self, bag: &Bag, lambda_router: f64) -> Result<(f64, SemaMilModel)> {
        let fc = self.forward_cached(bag, true)?;
        let cfg = &self.config;
        let d = cfg.d;
        let mut g = self.zeros_like();

        let (ce, dlogits) = cross_entropy_grad(&fc.logits, bag.label);
        let loss = ce + self.aux_loss(&fc, lambda_router);

        g.w_head.add_outer(&dlogits, &fc.v);
        g.b_head.copy_from_slice(&dlogits);
        let dv = self.w_head.t_mul_vec(&dlogits);
        g.w_pool.add_outer(&dv, &fc.pooled);
        let dpooled = self.w_pool.t_mul_vec(&dv);

        let mut dlast = Mat::zeros(fc.x0.rows, d);
        let inv_m = 1.0 / fc.ctx_idx.len() as f64;
        for &i in &fc.ctx_idx {
            for (o, v) in dlast.row_mut(i).iter_mut().zip(&dpooled[..d]) {
                *o += v * inv_m;
            }
        }
        let dq = (fc.n_query > 0).then(|| {
            let mut m = Mat::zeros(fc.n_query, d);
            for j in 0..fc.n_query {
                for (o, v) in m.row_mut(j).iter_mut().zip(&dpooled[d..]) {
                    *o = v / fc.n_query as f64;
                }
            }
            m
        });

        let mut dx = dlast;
        let n_blocks = self.blocks.len();
        for li in (0..n_blocks).rev() {
            let extra = if li == n_blocks - 1 { dq.as_ref() } else { None };
            let (gb, dxi) = srsm_block_backward(&self.blocks[li], &fc.blocks[li], &dx, extra);
            g.blocks[li] = gb;
            dx = dxi;
        }

        // Undo the row moves: dXd[pi[j]] = dX0[j].
        let mut dxd = restore_order(&dx, &fc.perm)?;

        if let Some((rc, a, mode)) = &fc.router {
            if lambda_router > 0.0 {
                let (_, mut dp) = router_aux_loss(&a.p);
                dp.data.iter_mut().for_each(|v| *v *= lambda_router);
                let dz = assign_backward(a, *mode, &dp);
                let xd = fc.x.matmul_t(&self.w_proj);
                let (gr, dxd_r) = router_backward(&self.router, &xd, rc, &dz);
                g.router = gr;
                dxd.data.iter_mut().zip(&dxd_r.data).for_each(|(a, b)| *a += b);
            }
        }
        g.w_proj.add_at_b(&dxd, &fc.x);
        Ok((loss, g))
    }

    fn named_tensors(&self) -> Vec<(String, usize, usize, &[f64])> {
        let mut out: Vec<(String, usize, usize, &[f64])> = vec![
            ("w_proj".into(), self.w_proj.rows, self.w_proj.cols, &self.w_proj.data[..]),
            ("router.w1".into(), self.router.w1.rows, self.router.w1.cols, &self.router.w1.data[..]),
            ("router.w2".into(), self.router.w2.rows, self.router.w2.cols, &self.router.w2.data[..]),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, r, c, data) in b.tensors() {
                out.push((format!("blocks.{i}.{name}"), r, c, data));
            }
        }
        out.push(("w_pool".into(), self.w_pool.rows, self.w_pool.cols, &self.w_pool.data[..]));
        out.push(("w_head".into(), self.w_head.rows, self.w_head.cols, &self.w_head.data[..]));
        out.push(("b_head".into(), self.b_head.len(), 1, &self.b_head[..]));
        out
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let bytes = self.encode_checkpoint()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn encode_checkpoint(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(&CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let json = serde_json::to_vec(&self.config)?;
        buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&json);
        for (_, r, c, data) in self.named_tensors() {
            buf.extend_from_slice(&(r as u32).to_le_bytes());
            buf.extend_from_slice(&(c as u32).to_le_bytes());
            for v in data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(buf)
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode_checkpoint(&bytes)
    }

    pub fn decode_checkpoint(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, off: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                expected: CHECKPOINT_MAGIC,
                found: magic,
            });
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                expected: CHECKPOINT_VERSION,
                found: version,
            });
        }
        let len = r.u32()? as usize;
        let config: ModelConfig = serde_json::from_slice(r.take(len)?)?;
        let mut model = SemaMilModel::init(&config, 0)?;
        let shapes: Vec<(String, usize, usize)> = model
            .named_tensors()
            .into_iter()
            .map(|(n, r, c, _)| (n, r, c))
            .collect();
        for ((name, rows, cols), dst) in shapes.into_iter().zip(model.tensors_mut()) {
            let (fr, fc) = (r.u32()? as usize, r.u32()? as usize);
            if (fr, fc) != (rows, cols) {
                return Err(Error::Shape(format!(
                    "checkpoint tensor {name} is {fr}x{fc} but the config implies {rows}x{cols}"
                )));
            }
            for v in dst.iter_mut() {
                *v = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
                if !v.is_finite() {
                    return Err(Error::NonFinite(r.off));
                }
            }
        }
        Ok(model)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    off: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.off + n > self.bytes.len() {
            return Err(Error::Truncated {
                needed: self.off + n,
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.off..self.off + n];
        self.off += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

impl MilModel for SemaMilModel {
    fn n_classes(&self) -> usize {
        self.config.n_classes
    }

    fn logits(&self, bag: &Bag) -> Result<Vec<f64>> {
        self.forward_cached(bag, false).map(|fc| fc.logits)
    }

    fn loss(&self, bag: &Bag, lambda_router: f64) -> Result<f64> {
        let fc = self.forward_cached(bag, false)?;
        Ok(cross_entropy(&fc.logits, bag.label) + self.aux_loss(&fc, lambda_router))
    }

    fn loss_and_grad(&self, bag: &Bag, lambda_router: f64) -> Result<(f64, Vec<Vec<f64>>)> {
        let (loss, g) = self.loss_and_grad_model(bag, lambda_router)?;
        let flat = g.named_tensors().into_iter().map(|t| t.3.to_vec()).collect();
        Ok((loss, flat))
    }

    fn tensors(&self) -> Vec<ParamTensor<'_>> {
        self.named_tensors()
            .into_iter()
            .map(|(name, rows, cols, data)| ParamTensor {
                trainable: !name.ends_with(".a0"),
                name,
                rows,
                cols,
                data,
            })
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            &mut self.w_proj.data[..],
            &mut self.router.w1.data[..],
            &mut self.router.w2.data[..],
        ];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.push(&mut self.w_pool.data[..]);
        out.push(&mut self.w_head.data[..]);
        out.push(&mut self.b_head[..]);
        out
    }
}

// ---------------------------------------------------------------------------
// Parameter and FLOP accounting

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub projection: u64,
    pub router: u64,
    pub per_block: u64,
    pub blocks: u64,
    pub pooling: u64,
    pub head: u64,
}

impl ParamCount {
    pub fn total(&self) -> u64 {
        self.projection + self.router + self.blocks + self.pooling + self.head
    }
}

/// Stored scalars per field of [`SemaMilModel`] (the fixed `A0` included).
pub fn count_params(c: &ModelConfig) -> ParamCount {
    let (d_in, d, h, nc, n, ncls) = (
        c.d_in as u64,
        c.d as u64,
        c.hidden as u64,
        c.n_clusters as u64,
        c.n_state as u64,
        c.n_classes as u64,
    );
    // w_score, A0, Cout, Dskip, W_Δ, b_Δ, W_B, b_B, LN gain and bias
    let per_block = d + n + d * n + d + d * d + d + n * d + n + 2 * d;
    ParamCount {
        projection: d * d_in,
        router: h * d + nc * h,
        per_block,
        blocks: c.n_layers as u64 * per_block,
        pooling: d * 2 * d,
        head: ncls * d + ncls,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct FlopCount {
    pub projection: u64,
    pub router: u64,
    pub per_block: u64,
    pub blocks: u64,
    pub pooling: u64,
    pub head: u64,
}

impl FlopCount {
    pub fn total(&self) -> u64 {
        self.projection + self.router + self.blocks + self.pooling + self.head
    }
}

/// Forward-pass FLOPs for a bag of `l` instances, counting a multiply-add
/// as 2 and `exp` as 2. With `N = L`, `M = L − K`, per-channel state `n`:
///
/// | stage | FLOPs |
/// |---|---|
/// | projection | `2·L·D_in·d` |
/// | router (reordering on) | `2·L·(d·hidden + hidden·n_clusters)` |
/// | selector scores | `2·N·d` |
/// | query gating + mean | `2·K·d` |
/// | conditioning (`W_Δ q̄`, `W_B q̄`) | `2·(d·d + d·n)` |
/// | discretization | `6·d·n` |
/// | four scans | `4·M·d·(5n + 2)` |
/// | direction mean | `4·M·d` |
/// | residual | `N·d` |
/// | layer norm | `8·N·d` |
/// | block with scan off (skip, residual, norm) | `N·d + N·d + 8·N·d` |
/// | pooling means | `L·d` |
/// | pooling merge | `2·d·2d` |
/// | head | `2·d·n_classes + n_classes` |
///
/// Softmax, GELU, argsort and top-K selection are not counted.
pub fn count_flops(c: &ModelConfig, l: usize) -> FlopCount {
    let (d_in, d, h, nc, n, ncls) = (
        c.d_in as u64,
        c.d as u64,
        c.hidden as u64,
        c.n_clusters as u64,
        c.n_state as u64,
        c.n_classes as u64,
    );
    let l = l as u64;
    let k = (c.k as u64).min(l);
    let m = l - k;
    let per_block = if c.srsm_enabled {
        2 * l * d + 2 * k * d + 2 * (d * d + d * n) + 6 * d * n + 4 * m * d * (5 * n + 2) + 4 * m * d + l * d + 8 * l * d
    } else {
        l * d + l * d + 8 * l * d
    };
    FlopCount {
        projection: 2 * l * d_in * d,
        router: if c.sr_enabled { 2 * l * (d * h + h * nc) } else { 0 },
        per_block,
        blocks: c.n_layers as u64 * per_block,
        pooling: l * d + 2 * d * 2 * d,
        head: 2 * d * ncls + ncls,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            d_in: 3,
            d: 2,
            hidden: 2,
            n_clusters: 2,
            k: 1,
            n_state: 1,
            n_layers: 1,
            n_classes: 2,
            ..ModelConfig::default()
        }
    }

    fn bag(l: usize, d: usize, seed: u64) -> Bag {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = (0..l * d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let coords = (0..l).map(|i| ((i / 7) as u32, (i % 7) as u32)).collect();
        Bag::new("t", 1, d, coords, x).unwrap()
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let mut m = SemaMilModel::init(&ModelConfig::default(), 3).unwrap();
        m.w_head = Mat::zeros(2, 16);
        let (logits, _) = m.forward(&bag(20, 32, 1)).unwrap();
        assert_eq!(logits, vec![0.0, 0.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let m = SemaMilModel::init(&ModelConfig::default(), 3).unwrap();
        let b = bag(30, 32, 2);
        assert_eq!(m.forward(&b).unwrap(), m.forward(&b).unwrap());
    }

    #[test]
    fn short_bag_is_rejected() {
        let m = SemaMilModel::init(&ModelConfig::default(), 3).unwrap();
        let err = m.forward(&bag(8, 32, 2)).unwrap_err();
        assert!(matches!(err, Error::QuerySetExhaustsContext { k: 8, n: 8 }));
    }

    #[test]
    fn wrong_width_names_both_shapes() {
        let m = SemaMilModel::init(&ModelConfig::default(), 3).unwrap();
        let err = m.forward(&bag(20, 5, 2)).unwrap_err().to_string();
        assert!(err.contains('5') && err.contains("32"), "{err}");
    }

    #[test]
    fn router_only_param_count() {
        let c = ModelConfig {
            d: 2,
            hidden: 2,
            n_clusters: 2,
            ..ModelConfig::default()
        };
        assert_eq!(count_params(&c).router, 8);
    }

    #[test]
    fn unit_config_without_blocks() {
        let c = ModelConfig {
            d_in: 1,
            d: 1,
            hidden: 1,
            n_clusters: 1,
            k: 1,
            n_state: 1,
            n_layers: 0,
            n_classes: 1,
            ..ModelConfig::default()
        };
        let p = count_params(&c);
        // W_proj 1 + W_pool 2 + head 1 + 1; the router adds W1 1 + W2 1 on top.
        assert_eq!(p.projection + p.pooling + p.head, 5);
        assert_eq!(p.router, 2);
        assert_eq!(p.total(), 7);
    }

    #[test]
    fn params_grow_linearly_with_depth() {
        let c = ModelConfig::default();
        let c2 = ModelConfig {
            n_layers: 2 * c.n_layers,
            ..c.clone()
        };
        let (a, b) = (count_params(&c), count_params(&c2));
        assert_eq!(b.total() - a.total(), c.n_layers as u64 * a.per_block);
    }

    #[test]
    fn param_count_matches_stored_scalars() {
        for c in [ModelConfig::default(), tiny_config()] {
            let m = SemaMilModel::init(&c, 0).unwrap();
            let stored: usize = m.tensors().iter().map(|t| t.data.len()).sum();
            assert_eq!(stored as u64, count_params(&c).total());
        }
    }

    #[test]
    fn flops_hand_count_tiny() {
        let c = ModelConfig {
            d_in: 2,
            ..tiny_config()
        };
        // L = 3, K = 1, M = 2, d = 2, n = 1, D_in = 2, hidden = 2, clusters = 2, classes = 2
        let hand = 24 // projection 2·3·2·2
            + 48 // router 2·3·(2·2 + 2·2)
            + 12 // scores 2·3·2
            + 4 // gating + mean 2·1·2
            + 12 // conditioning 2·(4 + 2)
            + 12 // discretization 6·2·1
            + 112 // scans 4·2·2·(5 + 2)
            + 16 // direction mean 4·2·2
            + 6 // residual 3·2
            + 48 // layer norm 8·3·2
            + 6 // pooling means 3·2
            + 16 // pooling merge 2·2·4
            + 10; // head 2·2·2 + 2
        assert_eq!(count_flops(&c, 3).total(), hand);
    }

    #[test]
    fn flops_without_blocks() {
        let c = ModelConfig {
            n_layers: 0,
            ..ModelConfig::default()
        };
        let f = count_flops(&c, 100);
        assert_eq!(f.blocks, 0);
        assert_eq!(f.total(), f.projection + f.router + f.pooling + f.head);
    }

    #[test]
    fn flops_scale_linearly() {
        let c = ModelConfig::default();
        for l in [256, 512, 1024, 2048] {
            let a = count_flops(&c, l).total() as f64;
            let b = count_flops(&c, 2 * l).total() as f64;
            assert!(b < 2.2 * a);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = SemaMilModel::init(&ModelConfig::default(), 11).unwrap();
        let bytes = m.encode_checkpoint().unwrap();
        assert_eq!(SemaMilModel::decode_checkpoint(&bytes).unwrap(), m);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            SemaMilModel::decode_checkpoint(&bad),
            Err(Error::BadMagic { .. })
        ));
        assert!(matches!(
            SemaMilModel::decode_checkpoint(&bytes[..bytes.len() - 3]),
            Err(Error::Truncated { .. })
        ));
    }

    #[test]
    fn cross_entropy_examples() {
        assert!((cross_entropy(&[0.0, 0.0], 0) - std::f64::consts::LN_2).abs() < 1e-15);
        // log(1 + e^-20)
        let expect = (-20.0f64).exp().ln_1p();
        assert!((cross_entropy(&[10.0, -10.0], 0) - expect).abs() < 1e-20);
        assert!((expect - 2.061e-9).abs() < 1e-12);
        assert!(cross_entropy(&[-3.0, 5.0, 1.0], 0) >= 0.0);
    }
}
