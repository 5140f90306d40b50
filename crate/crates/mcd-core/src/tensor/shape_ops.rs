//! Pure data-movement ops; backward is the inverse movement.

use super::index::{check_axis, numel, strides};
use super::{Graph, Op, Tensor};
use crate::error::{McdError, Result};
use crate::scalar::Scalar;

fn permute_buffer<S: Scalar>(data: &[S], shape: &[usize], perm: &[usize]) -> (Vec<S>, Vec<usize>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let out_strides = strides(&out_shape);
    let mut out = vec![S::zero(); data.len()];
    // Iterate input coordinates; write to permuted position.
    let rank = shape.len();
    let mut coords = vec![0usize; rank];
    for &v in data.iter() {
        let mut dst = 0;
        for (o, &p) in perm.iter().enumerate() {
            dst += coords[p] * out_strides[o];
        }
        out[dst] = v;
        // advance odometer
        for ax in (0..rank).rev() {
            coords[ax] += 1;
            if coords[ax] < shape[ax] {
                break;
            }
            coords[ax] = 0;
        }
    }
    let _ = in_strides;
    (out, out_shape)
}

fn flip_buffer<S: Scalar>(data: &[S], shape: &[usize], axis: usize) -> Vec<S> {
    let st = strides(shape);
    let n = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = st[axis];
    let mut out = vec![S::zero(); data.len()];
    for o in 0..outer {
        let base = o * n * inner;
        for j in 0..n {
            let src = base + j * inner;
            let dst = base + (n - 1 - j) * inner;
            out[dst..dst + inner].copy_from_slice(&data[src..src + inner]);
        }
    }
    out
}

impl<S: Scalar> Graph<S> {
    pub fn reshape(&mut self, x: Tensor, new_shape: &[usize]) -> Result<Tensor> {
        if numel(new_shape) != self.nodes[x.0].data.len() {
            return Err(McdError::ShapeMismatch {
                context: "reshape element count".into(),
                expected: self.nodes[x.0].shape.clone(),
                got: new_shape.to_vec(),
            });
        }
        let data = self.nodes[x.0].data.clone();
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(data, new_shape.to_vec(), rg, Op::Reshape { x: x.0 }))
    }

    pub fn permute(&mut self, x: Tensor, perm: &[usize]) -> Result<Tensor> {
        let shape = self.nodes[x.0].shape.clone();
        if perm.len() != shape.len() {
            return Err(McdError::Invalid(format!(
                "permute {perm:?} does not match rank {}",
                shape.len()
            )));
        }
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            check_axis(p, shape.len())?;
            if seen[p] {
                return Err(McdError::Invalid(format!("permute {perm:?} repeats axis {p}")));
            }
            seen[p] = true;
        }
        let (data, out_shape) = permute_buffer(&self.nodes[x.0].data, &shape, perm);
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(
            data,
            out_shape,
            rg,
            Op::Permute {
                x: x.0,
                perm: perm.to_vec(),
            },
        ))
    }

    pub fn flip(&mut self, x: Tensor, axis: usize) -> Result<Tensor> {
        let shape = self.nodes[x.0].shape.clone();
        check_axis(axis, shape.len())?;
        let data = flip_buffer(&self.nodes[x.0].data, &shape, axis);
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(data, shape, rg, Op::Flip { x: x.0, axis }))
    }

    pub fn concat(&mut self, inputs: &[Tensor], axis: usize) -> Result<Tensor> {
        if inputs.is_empty() {
            return Err(McdError::Invalid("concat of zero tensors".into()));
        }
        let first_shape = self.nodes[inputs[0].0].shape.clone();
        check_axis(axis, first_shape.len())?;
        let mut axis_total = 0;
        for t in inputs {
            let s = &self.nodes[t.0].shape;
            if s.len() != first_shape.len()
                || s.iter()
                    .zip(&first_shape)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(McdError::ShapeMismatch {
                    context: format!("concat along axis {axis}"),
                    expected: first_shape.clone(),
                    got: s.clone(),
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first_shape.clone();
        out_shape[axis] = axis_total;

        let outer: usize = first_shape[..axis].iter().product();
        let inner: usize = first_shape[axis + 1..].iter().product();
        let mut data = vec![S::zero(); numel(&out_shape)];
        let mut offset = 0;
        for t in inputs {
            let n = self.nodes[t.0].shape[axis];
            let src = &self.nodes[t.0].data;
            for o in 0..outer {
                let dst_base = (o * axis_total + offset) * inner;
                let src_base = o * n * inner;
                data[dst_base..dst_base + n * inner]
                    .copy_from_slice(&src[src_base..src_base + n * inner]);
            }
            offset += n;
        }
        let ids: Vec<usize> = inputs.iter().map(|t| t.0).collect();
        let rg = self.any_requires_grad(&ids);
        Ok(self.push(data, out_shape, rg, Op::Concat { inputs: ids, axis }))
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let shape = self.nodes[x.0].shape.clone();
        check_axis(axis, shape.len())?;
        if start + len > shape[axis] {
            return Err(McdError::InvalidGeometry {
                context: "narrow".into(),
                detail: format!(
                    "slice {start}..{} exceeds extent {} on axis {axis}",
                    start + len,
                    shape[axis]
                ),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let n = shape[axis];
        let mut out_shape = shape;
        out_shape[axis] = len;
        let src = &self.nodes[x.0].data;
        let mut data = vec![S::zero(); outer * len * inner];
        for o in 0..outer {
            let src_base = (o * n + start) * inner;
            let dst_base = o * len * inner;
            data[dst_base..dst_base + len * inner]
                .copy_from_slice(&src[src_base..src_base + len * inner]);
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(
            data,
            out_shape,
            rg,
            Op::Narrow {
                x: x.0,
                axis,
                start,
            },
        ))
    }

    /// Split into two simultaneous halves along `axis` at index `at`.
    pub fn split_at(&mut self, x: Tensor, axis: usize, at: usize) -> Result<(Tensor, Tensor)> {
        let extent = self.nodes[x.0].shape[axis];
        let head = self.narrow(x, axis, 0, at)?;
        let tail = self.narrow(x, axis, at, extent - at)?;
        Ok((head, tail))
    }

    /// [B,H,W,C] -> [B,H*W,C] in row-major pixel order.
    pub fn spatial_flatten(&mut self, x: Tensor) -> Result<Tensor> {
        let s = self.nodes[x.0].shape.clone();
        if s.len() != 4 {
            return Err(McdError::Invalid(format!(
                "spatial_flatten expects [B,H,W,C], got {s:?}"
            )));
        }
        self.reshape(x, &[s[0], s[1] * s[2], s[3]])
    }

    pub(super) fn backward_reshape(&mut self, i: usize, x: usize) {
        let grad = self.nodes[i].grad.clone().expect("grad present");
        self.add_to_grad(x, &grad);
    }

    pub(super) fn backward_permute(&mut self, i: usize, x: usize, perm: &[usize]) {
        let grad = self.nodes[i].grad.clone().expect("grad present");
        let mut inverse = vec![0usize; perm.len()];
        for (o, &p) in perm.iter().enumerate() {
            inverse[p] = o;
        }
        let (dx, _) = permute_buffer(&grad, &self.nodes[i].shape, &inverse);
        self.add_to_grad(x, &dx);
    }

    pub(super) fn backward_flip(&mut self, i: usize, x: usize, axis: usize) {
        let grad = self.nodes[i].grad.clone().expect("grad present");
        let dx = flip_buffer(&grad, &self.nodes[i].shape, axis);
        self.add_to_grad(x, &dx);
    }

    pub(super) fn backward_concat(&mut self, i: usize, inputs: &[usize], axis: usize) {
        let grad = self.nodes[i].grad.clone().expect("grad present");
        let out_shape = self.nodes[i].shape.clone();
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let axis_total = out_shape[axis];
        let mut offset = 0;
        for &inp in inputs {
            let n = self.nodes[inp].shape[axis];
            if self.nodes[inp].requires_grad {
                let mut dx = vec![S::zero(); self.nodes[inp].data.len()];
                for o in 0..outer {
                    let src_base = (o * axis_total + offset) * inner;
                    let dst_base = o * n * inner;
                    dx[dst_base..dst_base + n * inner]
                        .copy_from_slice(&grad[src_base..src_base + n * inner]);
                }
                self.add_to_grad(inp, &dx);
            }
            offset += n;
        }
    }

    pub(super) fn backward_narrow(&mut self, i: usize, x: usize, axis: usize, start: usize) {
        let grad = self.nodes[i].grad.clone().expect("grad present");
        let in_shape = self.nodes[x].shape.clone();
        let len = self.nodes[i].shape[axis];
        let outer: usize = in_shape[..axis].iter().product();
        let inner: usize = in_shape[axis + 1..].iter().product();
        let n = in_shape[axis];
        let mut dx = vec![S::zero(); self.nodes[x].data.len()];
        for o in 0..outer {
            let dst_base = (o * n + start) * inner;
            let src_base = o * len * inner;
            dx[dst_base..dst_base + len * inner]
                .copy_from_slice(&grad[src_base..src_base + len * inner]);
        }
        self.add_to_grad(x, &dx);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_then_split_is_identity() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.leaf(vec![1.0], &[1], false).unwrap();
        let b = g.leaf(vec![2.0], &[1], false).unwrap();
        let c = g.concat(&[a, b], 0).unwrap();
        let (x, y) = g.split_at(c, 0, 1).unwrap();
        assert_eq!(g.data(x), &[1.0]);
        assert_eq!(g.data(y), &[2.0]);
    }

    #[test]
    fn flip_twice_is_identity() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.leaf((0..6).map(f64::from).collect(), &[2, 3], false).unwrap();
        let f = g.flip(a, 1).unwrap();
        let ff = g.flip(f, 1).unwrap();
        assert_eq!(g.data(ff), g.data(a));
        assert_eq!(g.data(f), &[2.0, 1.0, 0.0, 5.0, 4.0, 3.0]);
    }

    #[test]
    fn spatial_flatten_row_major() {
        let mut g: Graph<f64> = Graph::new();
        let a = g
            .leaf(vec![0.0, 1.0, 2.0, 3.0], &[1, 2, 2, 1], false)
            .unwrap();
        let f = g.spatial_flatten(a).unwrap();
        assert_eq!(g.shape(f), &[1, 4, 1]);
        assert_eq!(g.data(f), &[0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn permute_roundtrip_gradient() {
        let mut g: Graph<f64> = Graph::new();
        let a = g
            .leaf((0..24).map(f64::from).collect(), &[2, 3, 4], true)
            .unwrap();
        let p = g.permute(a, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(p), &[4, 2, 3]);
        let s = g.sum_all(p);
        g.backward(s).unwrap();
        assert!(g.grad(a).unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn ragged_concat_errors() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.leaf(vec![0.0; 6], &[2, 3], false).unwrap();
        let b = g.leaf(vec![0.0; 8], &[2, 4], false).unwrap();
        assert!(g.concat(&[a, b], 0).is_err());
        assert!(g.concat(&[a, b], 1).is_ok());
    }

    #[test]
    fn narrow_out_of_range_errors() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.leaf(vec![0.0; 4], &[4], false).unwrap();
        assert!(g.narrow(a, 0, 2, 3).is_err());
        assert!(g.narrow(a, 1, 0, 1).is_err());
    }
}
