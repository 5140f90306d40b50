//! Two-class per-pixel softmax cross-entropy.

use super::{Graph, Op, Tensor};
use crate::error::{McdError, Result};
use crate::scalar::Scalar;

impl<S: Scalar> Graph<S> {
    /// logits: [N,2,H,W]; labels: row-major [N,H,W] with values in {0,1}.
    /// Returns the mean per-pixel cross-entropy as a scalar.
    pub fn cross_entropy_2class(&mut self, logits: Tensor, labels: &[u8]) -> Result<Tensor> {
        let shape = self.nodes[logits.0].shape.clone();
        if shape.len() != 4 || shape[1] != 2 {
            return Err(McdError::Invalid(format!(
                "cross_entropy_2class expects logits [N,2,H,W], got {shape:?}"
            )));
        }
        let (n, h, w) = (shape[0], shape[2], shape[3]);
        if labels.len() != n * h * w {
            return Err(McdError::ShapeMismatch {
                context: "cross_entropy_2class labels".into(),
                expected: vec![n, h, w],
                got: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
            return Err(McdError::NonBinaryLabel {
                context: "cross_entropy_2class".into(),
                value: bad as f64,
            });
        }
        let xd = &self.nodes[logits.0].data;
        let plane = h * w;
        let mut total = S::zero();
        for ni in 0..n {
            let c0 = &xd[(ni * 2) * plane..(ni * 2 + 1) * plane];
            let c1 = &xd[(ni * 2 + 1) * plane..(ni * 2 + 2) * plane];
            let lab = &labels[ni * plane..(ni + 1) * plane];
            for p in 0..plane {
                // -log softmax(target) = log(1 + exp(other - target))
                let (target, other) = if lab[p] == 0 { (c0[p], c1[p]) } else { (c1[p], c0[p]) };
                let z = other - target;
                let loss = z.max(S::zero()) + (S::one() + (-z.abs()).exp()).ln();
                total = total + loss;
            }
        }
        let count = S::from_f64((n * plane) as f64);
        let rg = self.nodes[logits.0].requires_grad;
        Ok(self.push(
            vec![total / count],
            vec![1],
            rg,
            Op::CrossEntropy2 {
                logits: logits.0,
                labels: labels.to_vec(),
            },
        ))
    }

    pub(super) fn backward_cross_entropy2(&mut self, i: usize, logits: usize, labels: &[u8]) {
        let g = self.nodes[i].grad.as_ref().expect("grad present")[0];
        let shape = self.nodes[logits].shape.clone();
        let (n, h, w) = (shape[0], shape[2], shape[3]);
        let plane = h * w;
        let xd = &self.nodes[logits].data;
        let inv_count = S::from_f64(1.0 / (n * plane) as f64);
        let mut dx = vec![S::zero(); xd.len()];
        for ni in 0..n {
            let base0 = (ni * 2) * plane;
            let base1 = (ni * 2 + 1) * plane;
            let lab = &labels[ni * plane..(ni + 1) * plane];
            for p in 0..plane {
                let l0 = xd[base0 + p];
                let l1 = xd[base1 + p];
                let m = l0.max(l1);
                let e0 = (l0 - m).exp();
                let e1 = (l1 - m).exp();
                let denom = e0 + e1;
                let s0 = e0 / denom;
                let s1 = e1 / denom;
                let (t0, t1) = if lab[p] == 0 {
                    (S::one(), S::zero())
                } else {
                    (S::zero(), S::one())
                };
                dx[base0 + p] = g * (s0 - t0) * inv_count;
                dx[base1 + p] = g * (s1 - t1) * inv_count;
            }
        }
        self.add_to_grad(logits, &dx);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_cost_ln2() {
        let mut g: Graph<f64> = Graph::new();
        let logits = g.leaf(vec![0.0; 8], &[1, 2, 2, 2], false).unwrap();
        let loss = g.cross_entropy_2class(logits, &[0, 1, 0, 1]).unwrap();
        assert!((g.item(loss) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn saturated_correct_prediction_near_zero_loss() {
        let mut g: Graph<f64> = Graph::new();
        let logits = g
            .leaf(vec![20.0, -20.0], &[1, 2, 1, 1], false)
            .unwrap();
        let loss = g.cross_entropy_2class(logits, &[0]).unwrap();
        assert!(g.item(loss) < 1e-8);
    }

    #[test]
    fn rejects_out_of_range_labels() {
        let mut g: Graph<f64> = Graph::new();
        let logits = g.leaf(vec![0.0; 2], &[1, 2, 1, 1], false).unwrap();
        assert!(g.cross_entropy_2class(logits, &[2]).is_err());
    }
}
