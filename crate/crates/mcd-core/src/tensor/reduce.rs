//! Reductions: mean/max over one axis (keeping it as extent 1) and full sum.

use super::index::check_axis;
use super::{Graph, Op, Tensor};
use crate::error::Result;
use crate::scalar::Scalar;

impl<S: Scalar> Graph<S> {
    /// Mean over `axis`, keeping the axis with extent 1.
    pub fn reduce_mean(&mut self, x: Tensor, axis: usize) -> Result<Tensor> {
        let shape = self.nodes[x.0].shape.clone();
        check_axis(axis, shape.len())?;
        let n = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = &self.nodes[x.0].data;
        let inv = S::from_f64(1.0 / n as f64);
        let mut data = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                for k in 0..inner {
                    data[o * inner + k] = data[o * inner + k] + src[base + k];
                }
            }
        }
        for v in data.iter_mut() {
            *v = *v * inv;
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(data, out_shape, rg, Op::ReduceMean { x: x.0, axis }))
    }

    /// Max over `axis`, keeping the axis with extent 1. Ties route the
    /// gradient to the first occurrence in scan order.
    pub fn reduce_max(&mut self, x: Tensor, axis: usize) -> Result<Tensor> {
        let shape = self.nodes[x.0].shape.clone();
        check_axis(axis, shape.len())?;
        let n = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = &self.nodes[x.0].data;
        let mut data = vec![S::zero(); outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for k in 0..inner {
                let mut best = src[(o * n) * inner + k];
                let mut best_idx = (o * n) * inner + k;
                for j in 1..n {
                    let idx = (o * n + j) * inner + k;
                    if src[idx] > best {
                        best = src[idx];
                        best_idx = idx;
                    }
                }
                data[o * inner + k] = best;
                argmax[o * inner + k] = best_idx;
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(
            data,
            out_shape,
            rg,
            Op::ReduceMax {
                x: x.0,
                axis,
                argmax,
            },
        ))
    }

    pub fn sum_all(&mut self, x: Tensor) -> Tensor {
        let total = self.nodes[x.0]
            .data
            .iter()
            .fold(S::zero(), |acc, &v| acc + v);
        let rg = self.nodes[x.0].requires_grad;
        self.push(vec![total], vec![1], rg, Op::SumAll { x: x.0 })
    }

    pub fn mean_all(&mut self, x: Tensor) -> Tensor {
        let n = self.nodes[x.0].data.len();
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n as f64)
    }

    pub(super) fn backward_reduce_mean(&mut self, i: usize, x: usize, axis: usize) {
        let grad = self.nodes[i].grad.clone().expect("grad present");
        let in_shape = self.nodes[x].shape.clone();
        let n = in_shape[axis];
        let outer: usize = in_shape[..axis].iter().product();
        let inner: usize = in_shape[axis + 1..].iter().product();
        let inv = S::from_f64(1.0 / n as f64);
        let mut dx = vec![S::zero(); self.nodes[x].data.len()];
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                for k in 0..inner {
                    dx[base + k] = grad[o * inner + k] * inv;
                }
            }
        }
        self.add_to_grad(x, &dx);
    }

    pub(super) fn backward_reduce_max(&mut self, i: usize, x: usize, _axis: usize, argmax: &[usize]) {
        let grad = self.nodes[i].grad.clone().expect("grad present");
        let mut dx = vec![S::zero(); self.nodes[x].data.len()];
        for (g, &src) in grad.iter().zip(argmax) {
            dx[src] = dx[src] + *g;
        }
        self.add_to_grad(x, &dx);
    }

    pub(super) fn backward_sum_all(&mut self, i: usize, x: usize) {
        let g = self.nodes[i].grad.as_ref().expect("grad present")[0];
        let dx = vec![g; self.nodes[x].data.len()];
        self.add_to_grad(x, &dx);
    }
}
