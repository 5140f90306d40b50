//! Affine map over the last axis: y = x · W + b.

use rayon::prelude::*;

use super::{Graph, Op, Tensor};
use crate::error::{McdError, Result};
use crate::scalar::Scalar;

/// Plain row-major matmul a[m,k] · b[k,n], parallel over output rows.
/// Each row is written by exactly one worker, so the result is independent
/// of thread count.
pub(crate) fn matmul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    });
    out
}

/// a^T where a is [m,n] row-major.
pub(crate) fn transpose2d<S: Scalar>(a: &[S], m: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

impl<S: Scalar> Graph<S> {
    /// x: [..., d_in], w: [d_in, d_out], bias: [d_out]. Leading axes are
    /// flattened into a token dimension for the product.
    pub fn linear(&mut self, x: Tensor, w: Tensor, bias: Option<Tensor>) -> Result<Tensor> {
        let x_shape = self.nodes[x.0].shape.clone();
        let w_shape = self.nodes[w.0].shape.clone();
        if w_shape.len() != 2 || x_shape.is_empty() {
            return Err(McdError::Invalid(format!(
                "linear expects x [..., d_in] and w [d_in, d_out], got {x_shape:?} and {w_shape:?}"
            )));
        }
        let d_in = *x_shape.last().unwrap();
        if w_shape[0] != d_in {
            return Err(McdError::ShapeMismatch {
                context: "linear inner dimension".into(),
                expected: vec![d_in],
                got: vec![w_shape[0]],
            });
        }
        let d_out = w_shape[1];
        if let Some(b) = bias {
            let b_shape = &self.nodes[b.0].shape;
            if b_shape.as_slice() != [d_out] {
                return Err(McdError::ShapeMismatch {
                    context: "linear bias".into(),
                    expected: vec![d_out],
                    got: b_shape.clone(),
                });
            }
        }
        let tokens = self.nodes[x.0].data.len() / d_in;
        let mut data = matmul(&self.nodes[x.0].data, &self.nodes[w.0].data, tokens, d_in, d_out);
        if let Some(b) = bias {
            let b_data = &self.nodes[b.0].data;
            for row in data.chunks_mut(d_out) {
                for (o, &bv) in row.iter_mut().zip(b_data) {
                    *o = *o + bv;
                }
            }
        }
        let mut out_shape = x_shape;
        *out_shape.last_mut().unwrap() = d_out;
        let mut ids = vec![x.0, w.0];
        if let Some(b) = bias {
            ids.push(b.0);
        }
        let rg = self.any_requires_grad(&ids);
        Ok(self.push(
            data,
            out_shape,
            rg,
            Op::Linear {
                x: x.0,
                w: w.0,
                bias: bias.map(|b| b.0),
            },
        ))
    }

    pub(super) fn backward_linear(&mut self, i: usize, x: usize, w: usize, bias: Option<usize>) {
        let grad = self.nodes[i].grad.clone().expect("grad present");
        let d_out = *self.nodes[i].shape.last().unwrap();
        let d_in = *self.nodes[x].shape.last().unwrap();
        let tokens = grad.len() / d_out;

        if self.nodes[x].requires_grad {
            // dx = g · W^T
            let wt = transpose2d(&self.nodes[w].data, d_in, d_out);
            let dx = matmul(&grad, &wt, tokens, d_out, d_in);
            self.add_to_grad(x, &dx);
        }
        if self.nodes[w].requires_grad {
            // dW = x^T · g
            let xt = transpose2d(&self.nodes[x].data, tokens, d_in);
            let dw = matmul(&xt, &grad, d_in, tokens, d_out);
            self.add_to_grad(w, &dw);
        }
        if let Some(b) = bias {
            if self.nodes[b].requires_grad {
                let mut db = vec![S::zero(); d_out];
                for row in grad.chunks(d_out) {
                    for (d, &g) in db.iter_mut().zip(row) {
                        *d = *d + g;
                    }
                }
                self.add_to_grad(b, &db);
            }
        }
    }
}
