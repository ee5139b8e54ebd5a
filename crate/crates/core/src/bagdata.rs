//! Bags, the `SEMB` embedding file, the JSON manifest, the synthetic
//! generator and Monte Carlo splits.
//!
//! `SEMB` layout (little-endian):
//!
//! ```text
//! offset  size      field
//! 0       4         magic "SEMB"
//! 4       4         version (u32) = 1
//! 8       4         L (u32)
//! 12      4         D (u32)
//! 16      4·L·D     embeddings, f32, row-major
//! ...     8·L       coordinates, (row u32, col u32) per instance
//! ```
//!
//! Bag id and label live in the manifest, not in the bag file.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BAG_MAGIC: [u8; 4] = *b"SEMB";
pub const BAG_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// Concentration of the per-bag Dirichlet over background clusters. Values
/// below one make each bag dominated by a few background clusters, so the
/// bag mean drifts far more between bags than the planted signal moves it.
const BACKGROUND_CONCENTRATION: f64 = 0.5;

/// Std of the per-bag offset shared by all of a bag's instances, in units of
/// `noise_sigma`. Mimics stain or scanner drift: it moves the bag mean along
/// every direction, but leaves within-bag rankings untouched.
pub const BAG_SHIFT_SCALE: f64 = 2.0;

/// Budget of center draws shared by all clusters.
const MAX_CENTER_DRAWS: usize = 1000;

#[derive(Clone, Debug, PartialEq)]
pub struct Bag {
    pub bag_id: String,
    pub label: usize,
    /// Embedding width.
    pub dim: usize,
    /// Grid cell `(row, col)` of each instance.
    pub coords: Vec<(u32, u32)>,
    /// `len() × dim` embeddings, row-major.
    pub x: Vec<f32>,
}

impl Bag {
    pub fn new(
        bag_id: impl Into<String>,
        label: usize,
        dim: usize,
        coords: Vec<(u32, u32)>,
        x: Vec<f32>,
    ) -> Result<Self> {
        let bag = Bag {
            bag_id: bag_id.into(),
            label,
            dim,
            coords,
            x,
        };
        bag.validate()?;
        Ok(bag)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    pub fn validate(&self) -> Result<()> {
        if self.coords.is_empty() {
            return Err(Error::Shape("bag has no instances".into()));
        }
        if self.dim == 0 {
            return Err(Error::Shape("embedding width is zero".into()));
        }
        if self.x.len() != self.coords.len() * self.dim {
            return Err(Error::Shape(format!(
                "{} embedding values for {} instances of width {}",
                self.x.len(),
                self.coords.len(),
                self.dim
            )));
        }
        if let Some(i) = self.x.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        let mut seen = HashSet::with_capacity(self.coords.len());
        for c in &self.coords {
            if !seen.insert(*c) {
                return Err(Error::Shape(format!("duplicate coordinate {c:?}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub n_classes: usize,
    pub bags: Vec<Bag>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 {
            return Err(Error::InvalidConfig("n_classes must be positive".into()));
        }
        let mut present = vec![false; self.n_classes];
        for b in &self.bags {
            if b.label >= self.n_classes {
                return Err(Error::InvalidConfig(format!(
                    "bag {} has label {} but n_classes = {}",
                    b.bag_id, b.label, self.n_classes
                )));
            }
            present[b.label] = true;
        }
        if let Some(c) = present.iter().position(|p| !p) {
            return Err(Error::InvalidConfig(format!("class {c} has no bags")));
        }
        Ok(())
    }

    pub fn dim(&self) -> Option<usize> {
        self.bags.first().map(|b| b.dim)
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.n_classes];
        for b in &self.bags {
            h[b.label] += 1;
        }
        h
    }
}

// ---------------------------------------------------------------------------
// SEMB files

pub fn encode_bag(bag: &Bag) -> Result<Vec<u8>> {
    bag.validate()?;
    let l = bag.len();
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * bag.x.len() + 8 * l);
    buf.extend_from_slice(&BAG_MAGIC);
    buf.extend_from_slice(&BAG_VERSION.to_le_bytes());
    buf.extend_from_slice(&(l as u32).to_le_bytes());
    buf.extend_from_slice(&(bag.dim as u32).to_le_bytes());
    for v in &bag.x {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &(r, c) in &bag.coords {
        buf.extend_from_slice(&r.to_le_bytes());
        buf.extend_from_slice(&c.to_le_bytes());
    }
    Ok(buf)
}

/// Decode a `SEMB` payload into `(dim, coords, x)`.
pub fn decode_bag_payload(bytes: &[u8]) -> Result<(usize, Vec<(u32, u32)>, Vec<f32>)> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            needed: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != BAG_MAGIC {
        return Err(Error::BadMagic {
            expected: BAG_MAGIC,
            found: magic,
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            needed: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != BAG_VERSION {
        return Err(Error::VersionMismatch {
            expected: BAG_VERSION,
            found: version,
        });
    }
    let l = u32_at(8) as usize;
    let d = u32_at(12) as usize;
    let needed = HEADER_LEN + 4 * l * d + 8 * l;
    if bytes.len() < needed {
        return Err(Error::Truncated {
            needed,
            found: bytes.len(),
        });
    }
    let mut x = Vec::with_capacity(l * d);
    let mut off = HEADER_LEN;
    for i in 0..l * d {
        let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::NonFinite(i));
        }
        x.push(v);
        off += 4;
    }
    let mut coords = Vec::with_capacity(l);
    for _ in 0..l {
        coords.push((u32_at(off), u32_at(off + 4)));
        off += 8;
    }
    Ok((d, coords, x))
}

pub fn save_bag(bag: &Bag, path: &Path) -> Result<()> {
    let buf = encode_bag(bag)?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Read a bag file. The file carries no id or label, so both are supplied by
/// the caller (normally from the manifest).
pub fn load_bag(path: &Path, bag_id: &str, label: usize) -> Result<Bag> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (dim, coords, x) = decode_bag_payload(&bytes)?;
    Bag::new(bag_id, label, dim, coords, x)
}

// ---------------------------------------------------------------------------
// Manifest

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub bag_id: String,
    pub path: String,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub n_classes: usize,
    pub bags: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Write `manifest.json` plus one `<bag_id>.semb` per bag into `dir`.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(ds.bags.len());
    for bag in &ds.bags {
        let file = format!("{}.semb", bag.bag_id);
        save_bag(bag, &dir.join(&file))?;
        entries.push(ManifestEntry {
            bag_id: bag.bag_id.clone(),
            path: file,
            label: bag.label,
        });
    }
    let manifest = Manifest {
        name: ds.name.clone(),
        n_classes: ds.n_classes,
        bags: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Load a dataset from a manifest file, or from a directory holding
/// `manifest.json`. Bag paths are resolved relative to the manifest.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let manifest_path = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let bags = manifest
        .bags
        .iter()
        .map(|e| load_bag(&base.join(&e.path), &e.bag_id, e.label))
        .collect::<Result<Vec<_>>>()?;
    let ds = Dataset {
        name: manifest.name,
        n_classes: manifest.n_classes,
        bags,
    };
    ds.validate()?;
    Ok(ds)
}

// ---------------------------------------------------------------------------
// Synthetic generator

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_bags: usize,
    pub n_classes: usize,
    pub l_min: usize,
    pub l_max: usize,
    pub dim: usize,
    pub n_clusters_true: usize,
    pub signal_cluster_fraction: f64,
    pub noise_sigma: f64,
    pub grid_side: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_bags: 400,
            n_classes: 2,
            l_min: 64,
            l_max: 128,
            dim: 32,
            n_clusters_true: 12,
            signal_cluster_fraction: 0.05,
            noise_sigma: 0.5,
            grid_side: 16,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_bags == 0
            || self.n_classes == 0
            || self.l_min == 0
            || self.dim == 0
            || self.n_clusters_true == 0
            || self.grid_side == 0
        {
            return bad("all counts and sizes must be positive".into());
        }
        if self.l_min > self.l_max {
            return bad(format!("l_min {} > l_max {}", self.l_min, self.l_max));
        }
        if self.l_max > self.grid_side * self.grid_side {
            return bad(format!(
                "l_max {} does not fit on a {}x{} grid",
                self.l_max, self.grid_side, self.grid_side
            ));
        }
        if self.n_clusters_true < self.n_classes {
            return bad(format!(
                "n_clusters_true {} < n_classes {}",
                self.n_clusters_true, self.n_classes
            ));
        }
        if self.n_bags < self.n_classes {
            return bad("fewer bags than classes".into());
        }
        if !(self.signal_cluster_fraction > 0.0 && self.signal_cluster_fraction < 1.0) {
            return bad("signal_cluster_fraction must lie in (0, 1)".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be a nonnegative real".into());
        }
        Ok(())
    }
}

/// Ground truth behind a generated dataset, for oracle checks.
#[derive(Clone, Debug)]
pub struct SynthTruth {
    /// Cluster centers; index `c < n_classes` is the signal cluster of class `c`.
    pub centers: Vec<Vec<f64>>,
    /// Per bag, the cluster each instance was drawn from.
    pub instance_clusters: Vec<Vec<usize>>,
}

/// 64-bit FNV-1a; stable across platforms and releases.
pub fn stable_hash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn bag_id_for(index: usize) -> String {
    format!("bag_{index:05}")
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    generate_synthetic_with_truth(cfg).map(|(ds, _)| ds)
}

pub fn generate_synthetic_with_truth(cfg: &SynthConfig) -> Result<(Dataset, SynthTruth)> {
    cfg.validate()?;
    let centers = draw_centers(cfg)?;
    let mut bags = Vec::with_capacity(cfg.n_bags);
    let mut instance_clusters = Vec::with_capacity(cfg.n_bags);
    for b in 0..cfg.n_bags {
        let (bag, clusters) = generate_bag(cfg, &centers, b);
        bags.push(bag);
        instance_clusters.push(clusters);
    }
    let ds = Dataset {
        name: format!("synthetic-seed{}", cfg.seed),
        n_classes: cfg.n_classes,
        bags,
    };
    ds.validate()?;
    Ok((
        ds,
        SynthTruth {
            centers,
            instance_clusters,
        },
    ))
}

fn draw_centers(cfg: &SynthConfig) -> Result<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let min_dist = 4.0 * cfg.noise_sigma;
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(cfg.n_clusters_true);
    let mut draws = 0;
    while centers.len() < cfg.n_clusters_true {
        if draws == MAX_CENTER_DRAWS {
            return Err(Error::ClustersInseparable(draws));
        }
        draws += 1;
        let c: Vec<f64> = (0..cfg.dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let separated = centers.iter().all(|o| {
            let d2: f64 = o.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum();
            d2.sqrt() >= min_dist && d2 > 0.0
        });
        if separated {
            centers.push(c);
        }
    }
    Ok(centers)
}

fn generate_bag(cfg: &SynthConfig, centers: &[Vec<f64>], index: usize) -> (Bag, Vec<usize>) {
    let bag_id = bag_id_for(index);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ stable_hash(&bag_id));
    let label = index % cfg.n_classes;
    let l = rng.random_range(cfg.l_min..=cfg.l_max);
    let n_signal = ((cfg.signal_cluster_fraction * l as f64).round() as usize).min(l);

    let background: Vec<usize> = (cfg.n_classes..cfg.n_clusters_true).collect();
    let weights: Vec<f64> = {
        let gamma = Gamma::new(BACKGROUND_CONCENTRATION, 1.0).unwrap();
        let raw: Vec<f64> = background.iter().map(|_| gamma.sample(&mut rng)).collect();
        let s: f64 = raw.iter().sum();
        if s > 0.0 {
            raw.iter().map(|w| w / s).collect()
        } else {
            vec![1.0 / background.len().max(1) as f64; background.len()]
        }
    };

    let mut clusters = vec![label; n_signal];
    for _ in n_signal..l {
        clusters.push(pick_background(&mut rng, &background, &weights));
    }
    // Storage order is random so the signal is not a prefix.
    for i in (1..l).rev() {
        let j = rng.random_range(0..=i);
        clusters.swap(i, j);
    }

    let shift: Vec<f64> = (0..cfg.dim)
        .map(|_| BAG_SHIFT_SCALE * cfg.noise_sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();

    let mut x = Vec::with_capacity(l * cfg.dim);
    for &c in &clusters {
        // usize::MAX marks an instance drawn around the origin (no background
        // clusters configured).
        for j in 0..cfg.dim {
            let mu = if c == usize::MAX { 0.0 } else { centers[c][j] };
            let noise = if cfg.noise_sigma > 0.0 {
                cfg.noise_sigma * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            x.push((mu + shift[j] + noise) as f32);
        }
    }

    let side = cfg.grid_side;
    let coords = sample(&mut rng, side * side, l)
        .into_iter()
        .map(|cell| ((cell / side) as u32, (cell % side) as u32))
        .collect();

    let bag = Bag {
        bag_id,
        label,
        dim: cfg.dim,
        coords,
        x,
    };
    (bag, clusters)
}

fn pick_background(rng: &mut ChaCha8Rng, background: &[usize], weights: &[f64]) -> usize {
    if background.is_empty() {
        return usize::MAX;
    }
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (&c, &w) in background.iter().zip(weights) {
        acc += w;
        if u < acc {
            return c;
        }
    }
    *background.last().unwrap()
}

// ---------------------------------------------------------------------------
// Monte Carlo splits

pub const SPLIT_RATIOS: (f64, f64, f64) = (0.765, 0.135, 0.10);

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Independent random re-splits; bag references are indices into
/// `Dataset::bags`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub fold_seeds: Vec<u64>,
    pub ratios: (f64, f64, f64),
    pub folds: Vec<Fold>,
}

/// `(train, val, test)` sizes for `n` bags: train and test are rounded, val
/// takes the remainder.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = (SPLIT_RATIOS.0 * n as f64).round() as usize;
    let test = (SPLIT_RATIOS.2 * n as f64).round() as usize;
    (train, n - train - test, test)
}

pub fn split_monte_carlo(n_bags: usize, n_folds: usize, seed: u64) -> Result<SplitPlan> {
    if n_bags < 10 {
        return Err(Error::InvalidConfig(format!(
            "{n_bags} bags is too few for a nonempty test split (need at least 10)"
        )));
    }
    if n_folds == 0 {
        return Err(Error::InvalidConfig("n_folds must be positive".into()));
    }
    let (n_train, n_val, _) = split_sizes(n_bags);
    let mut fold_seeds = Vec::with_capacity(n_folds);
    let mut folds = Vec::with_capacity(n_folds);
    for f in 0..n_folds {
        let fold_seed = seed.wrapping_add(f as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(fold_seed);
        let mut ids: Vec<usize> = (0..n_bags).collect();
        for i in (1..n_bags).rev() {
            let j = rng.random_range(0..=i);
            ids.swap(i, j);
        }
        let test = ids.split_off(n_train + n_val);
        let val = ids.split_off(n_train);
        fold_seeds.push(fold_seed);
        folds.push(Fold {
            train: ids,
            val,
            test,
        });
    }
    Ok(SplitPlan {
        fold_seeds,
        ratios: SPLIT_RATIOS,
        folds,
    })
}
