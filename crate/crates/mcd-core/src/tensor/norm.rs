//! Layer normalization over the last axis.

use super::{Graph, Op, Tensor};
use crate::error::{McdError, Result};
use crate::scalar::Scalar;

impl<S: Scalar> Graph<S> {
    /// x: [..., d], gamma/beta: [d]. Normalizes each trailing vector to zero
    /// mean and unit variance (biased, 1/d) before the affine map.
    pub fn layernorm(&mut self, x: Tensor, gamma: Tensor, beta: Tensor, eps: f64) -> Result<Tensor> {
        let shape = self.nodes[x.0].shape.clone();
        let d = *shape.last().ok_or_else(|| McdError::Invalid(
            "layernorm on rank-0 tensor".into(),
        ))?;
        for (t, name) in [(gamma, "gamma"), (beta, "beta")] {
            if self.nodes[t.0].shape.as_slice() != [d] {
                return Err(McdError::ShapeMismatch {
                    context: format!("layernorm {name}"),
                    expected: vec![d],
                    got: self.nodes[t.0].shape.clone(),
                });
            }
        }
        let xd = &self.nodes[x.0].data;
        let gd = &self.nodes[gamma.0].data;
        let bd = &self.nodes[beta.0].data;
        let rows = xd.len() / d;
        let inv_d = S::from_f64(1.0 / d as f64);
        let eps_s = S::from_f64(eps);
        let mut data = vec![S::zero(); xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().fold(S::zero(), |a, &v| a + v) * inv_d;
            let var = row
                .iter()
                .fold(S::zero(), |a, &v| a + (v - mean) * (v - mean))
                * inv_d;
            let inv_std = S::one() / (var + eps_s).sqrt();
            for j in 0..d {
                data[r * d + j] = (row[j] - mean) * inv_std * gd[j] + bd[j];
            }
        }
        let rg = self.any_requires_grad(&[x.0, gamma.0, beta.0]);
        Ok(self.push(
            data,
            shape,
            rg,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                eps,
            },
        ))
    }

    pub(super) fn backward_layernorm(&mut self, i: usize, x: usize, gamma: usize, beta: usize, eps: f64) {
        let grad = self.nodes[i].grad.clone().expect("grad present");
        let xd = &self.nodes[x].data;
        let gd = &self.nodes[gamma].data;
        let d = *self.nodes[x].shape.last().unwrap();
        let rows = xd.len() / d;
        let inv_d = S::from_f64(1.0 / d as f64);
        let eps_s = S::from_f64(eps);

        let mut dx = vec![S::zero(); xd.len()];
        let mut dgamma = vec![S::zero(); d];
        let mut dbeta = vec![S::zero(); d];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let g_row = &grad[r * d..(r + 1) * d];
            let mean = row.iter().fold(S::zero(), |a, &v| a + v) * inv_d;
            let var = row
                .iter()
                .fold(S::zero(), |a, &v| a + (v - mean) * (v - mean))
                * inv_d;
            let inv_std = S::one() / (var + eps_s).sqrt();

            let mut sum_dxhat = S::zero();
            let mut sum_dxhat_xhat = S::zero();
            for j in 0..d {
                let xhat = (row[j] - mean) * inv_std;
                let dxhat = g_row[j] * gd[j];
                dgamma[j] = dgamma[j] + g_row[j] * xhat;
                dbeta[j] = dbeta[j] + g_row[j];
                sum_dxhat = sum_dxhat + dxhat;
                sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
            }
            let d_s = S::from_f64(d as f64);
            for j in 0..d {
                let xhat = (row[j] - mean) * inv_std;
                let dxhat = g_row[j] * gd[j];
                dx[r * d + j] =
                    inv_std * inv_d * (d_s * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
            }
        }
        self.add_to_grad(x, &dx);
        self.add_to_grad(gamma, &dgamma);
        self.add_to_grad(beta, &dbeta);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gb(g: &mut Graph<f64>, d: usize) -> (Tensor, Tensor) {
        let gamma = g.leaf(vec![1.0; d], &[d], false).unwrap();
        let beta = g.leaf(vec![0.0; d], &[d], false).unwrap();
        (gamma, beta)
    }

    #[test]
    fn constant_vector_collapses_to_beta() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(vec![5.0; 4], &[1, 4], false).unwrap();
        let (gamma, beta) = gb(&mut g, 4);
        let y = g.layernorm(x, gamma, beta, 1e-5).unwrap();
        for &v in g.data(y) {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn already_normalized_passes_through() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(vec![1.0, -1.0], &[1, 2], false).unwrap();
        let (gamma, beta) = gb(&mut g, 2);
        let y = g.layernorm(x, gamma, beta, 1e-12).unwrap();
        let out = g.data(y);
        assert!((out[0] - 1.0).abs() < 1e-5);
        assert!((out[1] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn rows_have_zero_mean_unit_variance() {
        let mut g: Graph<f64> = Graph::new();
        let x = g
            .leaf(vec![0.3, -1.2, 2.5, 0.0, 1.0, -0.4, 0.2, 3.0, -2.0, 0.5], &[2, 5], false)
            .unwrap();
        let (gamma, beta) = gb(&mut g, 5);
        let y = g.layernorm(x, gamma, beta, 1e-9).unwrap();
        for row in g.data(y).chunks(5) {
            let mean: f64 = row.iter().sum::<f64>() / 5.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 5.0;
            assert!(mean.abs() < 1e-6, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "var {var}");
        }
    }
}
