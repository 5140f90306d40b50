//! Elementwise unary and binary ops with numpy-style broadcasting.

use super::index::{broadcast_shape, broadcast_strides, reduce_grad_to_shape, BroadcastIter};
use super::{BinaryKind, Graph, Op, Tensor, UnaryKind};
use crate::error::Result;
use crate::scalar::Scalar;

fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

/// Numerically safe softplus: ln(1+e^x) = max(x,0) + ln(1+e^-|x|).
fn softplus<S: Scalar>(x: S) -> S {
    x.max(S::zero()) + (S::one() + (-x.abs()).exp()).ln()
}

fn unary_apply<S: Scalar>(kind: UnaryKind, x: S) -> S {
    match kind {
        UnaryKind::Exp => x.exp(),
        UnaryKind::Ln => x.ln(),
        UnaryKind::Neg => -x,
        UnaryKind::Sigmoid => sigmoid(x),
        UnaryKind::Silu => x * sigmoid(x),
        UnaryKind::Softplus => softplus(x),
        UnaryKind::Relu => x.max(S::zero()),
    }
}

/// d out / d x given input x and output y.
fn unary_derivative<S: Scalar>(kind: UnaryKind, x: S, y: S) -> S {
    match kind {
        UnaryKind::Exp => y,
        UnaryKind::Ln => S::one() / x,
        UnaryKind::Neg => -S::one(),
        UnaryKind::Sigmoid => y * (S::one() - y),
        UnaryKind::Silu => {
            let s = sigmoid(x);
            s * (S::one() + x * (S::one() - s))
        }
        UnaryKind::Softplus => sigmoid(x),
        UnaryKind::Relu => {
            if x > S::zero() {
                S::one()
            } else {
                S::zero()
            }
        }
    }
}

fn binary_apply<S: Scalar>(kind: BinaryKind, a: S, b: S) -> S {
    match kind {
        BinaryKind::Add => a + b,
        BinaryKind::Sub => a - b,
        BinaryKind::Mul => a * b,
        BinaryKind::Div => a / b,
    }
}

impl<S: Scalar> Graph<S> {
    pub fn unary(&mut self, kind: UnaryKind, x: Tensor) -> Tensor {
        let data: Vec<S> = self.nodes[x.0]
            .data
            .iter()
            .map(|&v| unary_apply(kind, v))
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.nodes[x.0].requires_grad;
        self.push(data, shape, rg, Op::Unary { kind, x: x.0 })
    }

    pub fn exp(&mut self, x: Tensor) -> Tensor {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn ln(&mut self, x: Tensor) -> Tensor {
        self.unary(UnaryKind::Ln, x)
    }

    pub fn neg(&mut self, x: Tensor) -> Tensor {
        self.unary(UnaryKind::Neg, x)
    }

    pub fn sigmoid(&mut self, x: Tensor) -> Tensor {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn silu(&mut self, x: Tensor) -> Tensor {
        self.unary(UnaryKind::Silu, x)
    }

    pub fn softplus(&mut self, x: Tensor) -> Tensor {
        self.unary(UnaryKind::Softplus, x)
    }

    pub fn relu(&mut self, x: Tensor) -> Tensor {
        self.unary(UnaryKind::Relu, x)
    }

    /// Multiply by a compile-time constant (no gradient for the constant).
    pub fn scale(&mut self, x: Tensor, c: f64) -> Tensor {
        let c = S::from_f64(c);
        let data: Vec<S> = self.nodes[x.0].data.iter().map(|&v| v * c).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.nodes[x.0].requires_grad;
        self.push(data, shape, rg, Op::Scale { x: x.0, c })
    }

    pub fn binary(&mut self, kind: BinaryKind, a: Tensor, b: Tensor) -> Result<Tensor> {
        let a_shape = self.nodes[a.0].shape.clone();
        let b_shape = self.nodes[b.0].shape.clone();
        let out_shape = broadcast_shape(&a_shape, &b_shape, &format!("{kind:?}"))?;
        let a_iter = BroadcastIter::new(&out_shape, broadcast_strides(&a_shape, &out_shape));
        let b_iter = BroadcastIter::new(&out_shape, broadcast_strides(&b_shape, &out_shape));
        let a_data = &self.nodes[a.0].data;
        let b_data = &self.nodes[b.0].data;
        let data: Vec<S> = a_iter
            .zip(b_iter)
            .map(|(ia, ib)| binary_apply(kind, a_data[ia], b_data[ib]))
            .collect();
        let rg = self.any_requires_grad(&[a.0, b.0]);
        Ok(self.push(data, out_shape, rg, Op::Binary { kind, a: a.0, b: b.0 }))
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub(super) fn backward_unary(&mut self, i: usize, kind: UnaryKind, x: usize) {
        let grad = self.nodes[i].grad.clone().expect("grad present");
        let dx: Vec<S> = grad
            .iter()
            .zip(self.nodes[x].data.iter())
            .zip(self.nodes[i].data.iter())
            .map(|((&g, &xv), &yv)| g * unary_derivative(kind, xv, yv))
            .collect();
        self.add_to_grad(x, &dx);
    }

    pub(super) fn backward_scale(&mut self, i: usize, x: usize, c: S) {
        let grad = self.nodes[i].grad.clone().expect("grad present");
        let dx: Vec<S> = grad.iter().map(|&g| g * c).collect();
        self.add_to_grad(x, &dx);
    }

    pub(super) fn backward_binary(&mut self, i: usize, kind: BinaryKind, a: usize, b: usize) {
        let grad = self.nodes[i].grad.clone().expect("grad present");
        let out_shape = self.nodes[i].shape.clone();
        let a_shape = self.nodes[a].shape.clone();
        let b_shape = self.nodes[b].shape.clone();

        let a_idx: Vec<usize> =
            BroadcastIter::new(&out_shape, broadcast_strides(&a_shape, &out_shape)).collect();
        let b_idx: Vec<usize> =
            BroadcastIter::new(&out_shape, broadcast_strides(&b_shape, &out_shape)).collect();
        let a_data = &self.nodes[a].data;
        let b_data = &self.nodes[b].data;

        let mut da_full = vec![S::zero(); grad.len()];
        let mut db_full = vec![S::zero(); grad.len()];
        for (o, &g) in grad.iter().enumerate() {
            let av = a_data[a_idx[o]];
            let bv = b_data[b_idx[o]];
            match kind {
                BinaryKind::Add => {
                    da_full[o] = g;
                    db_full[o] = g;
                }
                BinaryKind::Sub => {
                    da_full[o] = g;
                    db_full[o] = -g;
                }
                BinaryKind::Mul => {
                    da_full[o] = g * bv;
                    db_full[o] = g * av;
                }
                BinaryKind::Div => {
                    da_full[o] = g / bv;
                    db_full[o] = -g * av / (bv * bv);
                }
            }
        }
        if self.nodes[a].requires_grad {
            let da = reduce_grad_to_shape(&da_full, &out_shape, &a_shape);
            self.add_to_grad(a, &da);
        }
        if self.nodes[b].requires_grad {
            let db = reduce_grad_to_shape(&db_full, &out_shape, &b_shape);
            self.add_to_grad(b, &db);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_at_zero_is_ln2() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(vec![0.0], &[1], false).unwrap();
        let y = g.softplus(x);
        assert!((g.item(y) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn silu_at_zero_is_zero() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(vec![0.0], &[1], false).unwrap();
        let y = g.silu(x);
        assert_eq!(g.item(y), 0.0);
    }

    #[test]
    fn add_forward_and_backward() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.leaf(vec![1.0, 2.0], &[2], true).unwrap();
        let b = g.leaf(vec![3.0, 4.0], &[2], true).unwrap();
        let y = g.add(a, b).unwrap();
        assert_eq!(g.data(y), &[4.0, 6.0]);
        let s = g.sum_all(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1.0, 1.0]);
        assert_eq!(g.grad(b).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.leaf(vec![0.0; 6], &[2, 3], false).unwrap();
        let b = g.leaf(vec![0.0; 12], &[4, 3], false).unwrap();
        let err = g.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 3]"), "{msg}");
    }

    #[test]
    fn broadcast_mul_matches_tiling() {
        // [2,1] * [3] -> [2,3], equal to explicit tiling
        let mut g: Graph<f64> = Graph::new();
        let a = g.leaf(vec![2.0, 3.0], &[2, 1], true).unwrap();
        let b = g.leaf(vec![10.0, 20.0, 30.0], &[3], true).unwrap();
        let y = g.mul(a, b).unwrap();
        assert_eq!(g.shape(y), &[2, 3]);
        assert_eq!(g.data(y), &[20.0, 40.0, 60.0, 30.0, 60.0, 90.0]);
        let s = g.sum_all(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[60.0, 60.0]);
        assert_eq!(g.grad(b).unwrap(), &[5.0, 5.0, 5.0]);
    }

    #[test]
    fn softplus_is_stable_for_large_inputs() {
        let mut g: Graph<f32> = Graph::new();
        let x = g.leaf(vec![100.0, -100.0], &[2], false).unwrap();
        let y = g.softplus(x);
        let out = g.data(y);
        assert!((out[0] - 100.0).abs() < 1e-4);
        assert!(out[1].abs() < 1e-4);
        assert!(out.iter().all(|v| v.is_finite()));
    }
}
