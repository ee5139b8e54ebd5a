//! Mean- and max-pooling bag classifiers used as reference points.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bagdata::Bag;
use crate::error::Result;
use crate::linalg::Mat;
use crate::model::{bag_matrix, cross_entropy, cross_entropy_grad, uniform, MilModel, ParamTensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Mean,
    Max,
}

/// `logits = W_head · pool_i(W_proj x_i) + b_head`.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolingBaseline {
    pub kind: PoolKind,
    pub w_proj: Mat,
    pub w_head: Mat,
    pub b_head: Vec<f64>,
}

impl PoolingBaseline {
    pub fn init(kind: PoolKind, d_in: usize, d: usize, n_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PoolingBaseline {
            kind,
            w_proj: uniform(d, d_in, d_in, &mut rng),
            w_head: uniform(n_classes, d, d, &mut rng),
            b_head: vec![0.0; n_classes],
        }
    }

    /// Pooled vector and, for max pooling, the winning row per channel.
    fn pool(&self, xd: &Mat) -> (Vec<f64>, Vec<usize>) {
        match self.kind {
            PoolKind::Mean => (xd.col_mean(), Vec::new()),
            PoolKind::Max => {
                let mut best = vec![0usize; xd.cols];
                for i in 1..xd.rows {
                    for (c, b) in best.iter_mut().enumerate() {
                        if xd.get(i, c) > xd.get(*b, c) {
                            *b = i;
                        }
                    }
                }
                let v = best.iter().enumerate().map(|(c, &i)| xd.get(i, c)).collect();
                (v, best)
            }
        }
    }

    fn forward(&self, bag: &Bag) -> Result<(Mat, Vec<f64>, Vec<usize>, Vec<f64>)> {
        let x = bag_matrix(bag, self.w_proj.cols)?;
        let xd = x.matmul_t(&self.w_proj);
        let (v, arg) = self.pool(&xd);
        let mut logits = self.w_head.mul_vec(&v);
        logits.iter_mut().zip(&self.b_head).for_each(|(l, b)| *l += b);
        Ok((x, v, arg, logits))
    }
}

impl MilModel for PoolingBaseline {
    fn n_classes(&self) -> usize {
        self.b_head.len()
    }

    fn logits(&self, bag: &Bag) -> Result<Vec<f64>> {
        Ok(self.forward(bag)?.3)
    }

    fn loss(&self, bag: &Bag, _lambda_router: f64) -> Result<f64> {
        Ok(cross_entropy(&self.forward(bag)?.3, bag.label))
    }

    fn loss_and_grad(&self, bag: &Bag, _lambda_router: f64) -> Result<(f64, Vec<Vec<f64>>)> {
        let (x, v, arg, logits) = self.forward(bag)?;
        let (loss, dlogits) = cross_entropy_grad(&logits, bag.label);
        let mut dw_head = Mat::zeros(self.w_head.rows, self.w_head.cols);
        dw_head.add_outer(&dlogits, &v);
        let dv = self.w_head.t_mul_vec(&dlogits);
        let mut dxd = Mat::zeros(x.rows, self.w_proj.rows);
        match self.kind {
            PoolKind::Mean => {
                let inv = 1.0 / x.rows as f64;
                for i in 0..x.rows {
                    for (o, g) in dxd.row_mut(i).iter_mut().zip(&dv) {
                        *o = g * inv;
                    }
                }
            }
            PoolKind::Max => {
                for (c, &i) in arg.iter().enumerate() {
                    dxd.set(i, c, dv[c]);
                }
            }
        }
        let mut dw_proj = Mat::zeros(self.w_proj.rows, self.w_proj.cols);
        dw_proj.add_at_b(&dxd, &x);
        Ok((loss, vec![dw_proj.data, dw_head.data, dlogits]))
    }

    fn tensors(&self) -> Vec<ParamTensor<'_>> {
        fn t<'a>(name: &str, m: &'a Mat) -> ParamTensor<'a> {
            ParamTensor {
                name: name.to_string(),
                rows: m.rows,
                cols: m.cols,
                data: &m.data[..],
                trainable: true,
            }
        }
        let mut out = vec![t("w_proj", &self.w_proj), t("w_head", &self.w_head)];
        out.push(ParamTensor {
            name: "b_head".into(),
            rows: self.b_head.len(),
            cols: 1,
            data: &self.b_head[..],
            trainable: true,
        });
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.w_proj.data[..], &mut self.w_head.data[..], &mut self.b_head[..]]
    }
}
