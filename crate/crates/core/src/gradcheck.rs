//! Analytic gradients against central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::bagdata::Bag;
use crate::error::{Error, Result};
use crate::model::{MilModel, ModelConfig, SemaMilModel};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-3;
/// Denominator floor for the relative error, so entries whose true gradient
/// is numerically zero are judged on absolute error.
pub const REL_FLOOR: f64 = 1e-6;
/// Required gap behind every discrete choice, well above any change a single
/// `eps` perturbation can cause.
pub const MIN_DECISION_MARGIN: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TensorReport {
    pub name: String,
    pub len: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradReport {
    pub eps: f64,
    pub tol: f64,
    pub tensors: Vec<TensorReport>,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.max_rel_err < self.tol)
    }
}

/// Deliberate error injected into the analytic gradient of one tensor, used
/// to confirm the check can fail.
#[derive(Clone, Debug, PartialEq)]
pub struct Fault {
    pub tensor: String,
    pub scale: f64,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compare `loss_and_grad` with central differences for every entry of every
/// parameter tensor, trainable or not.
pub fn check_gradients<M: MilModel>(
    model: &M,
    bag: &Bag,
    lambda_router: f64,
    eps: f64,
    tol: f64,
    fault: Option<&Fault>,
) -> Result<GradReport> {
    let (_, mut grads) = model.loss_and_grad(bag, lambda_router)?;
    let names: Vec<String> = model.tensors().iter().map(|t| t.name.clone()).collect();
    if let Some(f) = fault {
        let ti = names
            .iter()
            .position(|n| *n == f.tensor)
            .ok_or_else(|| Error::InvalidConfig(format!("no tensor named {}", f.tensor)))?;
        grads[ti].iter_mut().for_each(|g| *g *= f.scale);
    }

    let mut probe = model.clone();
    let mut tensors = Vec::with_capacity(names.len());
    for (ti, name) in names.into_iter().enumerate() {
        let len = grads[ti].len();
        let mut max_abs_err: f64 = 0.0;
        let mut max_rel_err: f64 = 0.0;
        for j in 0..len {
            let orig = probe.tensors_mut()[ti][j];
            probe.tensors_mut()[ti][j] = orig + eps;
            let lp = probe.loss(bag, lambda_router)?;
            probe.tensors_mut()[ti][j] = orig - eps;
            let lm = probe.loss(bag, lambda_router)?;
            probe.tensors_mut()[ti][j] = orig;
            let numeric = (lp - lm) / (2.0 * eps);
            max_abs_err = max_abs_err.max((grads[ti][j] - numeric).abs());
            max_rel_err = max_rel_err.max(rel_err(grads[ti][j], numeric));
        }
        tensors.push(TensorReport {
            name,
            len,
            max_abs_err,
            max_rel_err,
        });
    }
    Ok(GradReport { eps, tol, tensors })
}

/// The toy configuration: two blocks so the inter-block path is covered,
/// both classes, every scan direction.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_in: 3,
        d: 4,
        hidden: 4,
        n_clusters: 3,
        k: 2,
        n_state: 3,
        n_layers: 2,
        n_classes: 2,
        ..ModelConfig::default()
    }
}

pub const TINY_BAG_LEN: usize = 8;

fn tiny_bag(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Bag> {
    let mut cells: Vec<(u32, u32)> = (0..3).flat_map(|r| (0..3).map(move |c| (r, c))).collect();
    for i in (1..cells.len()).rev() {
        let j = rng.random_range(0..=i);
        cells.swap(i, j);
    }
    cells.truncate(TINY_BAG_LEN);
    let x = (0..TINY_BAG_LEN * cfg.d_in)
        .map(|_| rng.sample::<f64, _>(StandardNormal) as f32)
        .collect();
    Bag::new("gradcheck", rng.random_range(0..cfg.n_classes), cfg.d_in, cells, x)
}

/// A model and bag whose routing and query choices are separated by at
/// least [`MIN_DECISION_MARGIN`]. Tries successive derived seeds.
pub fn tiny_problem(cfg: &ModelConfig, seed: u64) -> Result<(SemaMilModel, Bag)> {
    for attempt in 0..1000u64 {
        let s = seed.wrapping_add(attempt);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let mut model = SemaMilModel::init(cfg, s)?;
        // Nonzero head bias and non-unit LN affine so those paths carry signal.
        for b in model.b_head.iter_mut() {
            *b = rng.random_range(-0.5..0.5);
        }
        for block in &mut model.blocks {
            block.ln_gamma.iter_mut().for_each(|g| *g = rng.random_range(0.5..1.5));
            block.ln_beta.iter_mut().for_each(|b| *b = rng.random_range(-0.2..0.2));
        }
        let bag = tiny_bag(cfg, &mut rng)?;
        if model.decision_margin(&bag)? >= MIN_DECISION_MARGIN {
            return Ok((model, bag));
        }
    }
    Err(Error::InvalidConfig(
        "no gradcheck problem with well-separated decisions found".into(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_err_uses_floor() {
        assert_eq!(rel_err(1.0, 1.0), 0.0);
        assert!((rel_err(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((rel_err(1e-9, 0.0) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn tiny_problem_is_deterministic() {
        let cfg = tiny_config();
        let (m1, b1) = tiny_problem(&cfg, 3).unwrap();
        let (m2, b2) = tiny_problem(&cfg, 3).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(b1, b2);
        assert!(m1.decision_margin(&b1).unwrap() >= MIN_DECISION_MARGIN);
    }
}
