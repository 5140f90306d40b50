//! Shape and index arithmetic for contiguous row-major buffers.

use crate::error::{McdError, Result};

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub fn check_axis(axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        return Err(McdError::AxisOutOfRange { axis, rank });
    }
    Ok(())
}

/// Broadcast shape with trailing alignment, or an error naming both shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize], context: &str) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da != db && da != 1 && db != 1 {
            return Err(McdError::BroadcastError {
                context: context.to_string(),
                a: a.to_vec(),
                b: b.to_vec(),
            });
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

/// Strides of `shape` viewed under `out_shape` broadcasting: broadcast axes
/// get stride 0 so the same flat buffer serves the expanded view.
pub fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let offset = out_shape.len() - shape.len();
    let mut s = vec![0; out_shape.len()];
    for i in 0..shape.len() {
        s[offset + i] = if shape[i] == 1 { 0 } else { own[i] };
    }
    s
}

/// Walks flat indices of `out_shape` yielding the corresponding flat index
/// into a broadcast operand, without materializing coordinates per step.
pub struct BroadcastIter {
    coords: Vec<usize>,
    shape: Vec<usize>,
    strides: Vec<usize>,
    flat: usize,
    done: bool,
}

impl BroadcastIter {
    pub fn new(out_shape: &[usize], operand_strides: Vec<usize>) -> Self {
        BroadcastIter {
            coords: vec![0; out_shape.len()],
            shape: out_shape.to_vec(),
            strides: operand_strides,
            flat: 0,
            done: numel(out_shape) == 0,
        }
    }
}

impl Iterator for BroadcastIter {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        if self.done {
            return None;
        }
        let current = self.flat;
        // Advance odometer from the last axis.
        let mut axis = self.shape.len();
        loop {
            if axis == 0 {
                self.done = true;
                break;
            }
            axis -= 1;
            self.coords[axis] += 1;
            self.flat += self.strides[axis];
            if self.coords[axis] < self.shape[axis] {
                break;
            }
            self.flat -= self.strides[axis] * self.shape[axis];
            self.coords[axis] = 0;
        }
        Some(current)
    }
}

/// Sums `grad` (shaped `grad_shape`) down to `target_shape`, undoing broadcast.
pub fn reduce_grad_to_shape<S: crate::scalar::Scalar>(
    grad: &[S],
    grad_shape: &[usize],
    target_shape: &[usize],
) -> Vec<S> {
    if grad_shape == target_shape {
        return grad.to_vec();
    }
    let mut out = vec![S::zero(); numel(target_shape)];
    let t_strides = broadcast_strides(target_shape, grad_shape);
    for (g, t_idx) in grad.iter().zip(BroadcastIter::new(grad_shape, t_strides)) {
        out[t_idx] = out[t_idx] + *g;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strides_row_major() {
        assert_eq!(strides(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(strides(&[5]), vec![1]);
        assert_eq!(strides(&[]), Vec::<usize>::new());
    }

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1], "t").unwrap(), vec![2, 3, 4]);
        assert_eq!(broadcast_shape(&[4], &[2, 4], "t").unwrap(), vec![2, 4]);
        assert!(broadcast_shape(&[2, 3], &[4, 3], "t").is_err());
    }

    #[test]
    fn broadcast_iter_matches_manual() {
        // [2,3] operand broadcast over [2,2,3]
        let out_shape = [2usize, 2, 3];
        let op_shape = [2usize, 3];
        let st = broadcast_strides(&op_shape, &out_shape);
        let idx: Vec<usize> = BroadcastIter::new(&out_shape, st).collect();
        assert_eq!(idx, vec![0, 1, 2, 3, 4, 5, 0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn reduce_grad_sums_broadcast_axes() {
        // grad over [2,2], target [2] (trailing aligned)
        let grad = [1.0f64, 2.0, 3.0, 4.0];
        let r = reduce_grad_to_shape(&grad, &[2, 2], &[2]);
        assert_eq!(r, vec![4.0, 6.0]);
        let r2 = reduce_grad_to_shape(&grad, &[2, 2], &[1]);
        assert_eq!(r2, vec![10.0]);
    }
}
