//! Spatial upsampling on channels-last maps [B,H,W,C].

use super::{Graph, Op, Tensor, UpsampleMode};
use crate::error::{McdError, Result};
use crate::scalar::Scalar;

/// Source position and interpolation weights for one output coordinate
/// (half-pixel convention, edges clamped).
fn bilinear_taps(out_idx: usize, factor: usize, extent: usize) -> (usize, usize, f64) {
    let src = (out_idx as f64 + 0.5) / factor as f64 - 0.5;
    let clamped = src.max(0.0).min((extent - 1) as f64);
    let lo = clamped.floor() as usize;
    let hi = (lo + 1).min(extent - 1);
    let w_hi = clamped - lo as f64;
    (lo, hi, w_hi)
}

impl<S: Scalar> Graph<S> {
    /// Upsample [B,H,W,C] by an integer factor.
    pub fn upsample2d(&mut self, x: Tensor, factor: usize, mode: UpsampleMode) -> Result<Tensor> {
        let shape = self.nodes[x.0].shape.clone();
        if shape.len() != 4 {
            return Err(McdError::Invalid(format!(
                "upsample2d expects [B,H,W,C], got {shape:?}"
            )));
        }
        if factor == 0 {
            return Err(McdError::InvalidGeometry {
                context: "upsample2d".into(),
                detail: "factor must be >= 1".into(),
            });
        }
        let (b, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
        let (oh, ow) = (h * factor, w * factor);
        let xd = &self.nodes[x.0].data;
        let mut data = vec![S::zero(); b * oh * ow * c];
        match mode {
            UpsampleMode::Nearest => {
                for bi in 0..b {
                    for oy in 0..oh {
                        let iy = oy / factor;
                        for ox in 0..ow {
                            let ix = ox / factor;
                            let src = ((bi * h + iy) * w + ix) * c;
                            let dst = ((bi * oh + oy) * ow + ox) * c;
                            data[dst..dst + c].copy_from_slice(&xd[src..src + c]);
                        }
                    }
                }
            }
            UpsampleMode::Bilinear => {
                for bi in 0..b {
                    for oy in 0..oh {
                        let (y0, y1, wy) = bilinear_taps(oy, factor, h);
                        let wy = S::from_f64(wy);
                        for ox in 0..ow {
                            let (x0, x1, wx) = bilinear_taps(ox, factor, w);
                            let wx = S::from_f64(wx);
                            let i00 = ((bi * h + y0) * w + x0) * c;
                            let i01 = ((bi * h + y0) * w + x1) * c;
                            let i10 = ((bi * h + y1) * w + x0) * c;
                            let i11 = ((bi * h + y1) * w + x1) * c;
                            let dst = ((bi * oh + oy) * ow + ox) * c;
                            for ch in 0..c {
                                let top = xd[i00 + ch] * (S::one() - wx) + xd[i01 + ch] * wx;
                                let bot = xd[i10 + ch] * (S::one() - wx) + xd[i11 + ch] * wx;
                                data[dst + ch] = top * (S::one() - wy) + bot * wy;
                            }
                        }
                    }
                }
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(
            data,
            vec![b, oh, ow, c],
            rg,
            Op::Upsample2d {
                x: x.0,
                factor,
                mode,
            },
        ))
    }

    pub(super) fn backward_upsample2d(&mut self, i: usize, x: usize, factor: usize, mode: UpsampleMode) {
        let grad = self.nodes[i].grad.clone().expect("grad present");
        let os = self.nodes[i].shape.clone();
        let xs = self.nodes[x].shape.clone();
        let (b, oh, ow, c) = (os[0], os[1], os[2], os[3]);
        let (h, w) = (xs[1], xs[2]);
        let mut dx = vec![S::zero(); self.nodes[x].data.len()];
        match mode {
            UpsampleMode::Nearest => {
                for bi in 0..b {
                    for oy in 0..oh {
                        let iy = oy / factor;
                        for ox in 0..ow {
                            let ix = ox / factor;
                            let src = ((bi * h + iy) * w + ix) * c;
                            let dst = ((bi * oh + oy) * ow + ox) * c;
                            for ch in 0..c {
                                dx[src + ch] = dx[src + ch] + grad[dst + ch];
                            }
                        }
                    }
                }
            }
            UpsampleMode::Bilinear => {
                for bi in 0..b {
                    for oy in 0..oh {
                        let (y0, y1, wy) = bilinear_taps(oy, factor, h);
                        let wy = S::from_f64(wy);
                        for ox in 0..ow {
                            let (x0, x1, wx) = bilinear_taps(ox, factor, w);
                            let wx = S::from_f64(wx);
                            let i00 = ((bi * h + y0) * w + x0) * c;
                            let i01 = ((bi * h + y0) * w + x1) * c;
                            let i10 = ((bi * h + y1) * w + x0) * c;
                            let i11 = ((bi * h + y1) * w + x1) * c;
                            let dst = ((bi * oh + oy) * ow + ox) * c;
                            for ch in 0..c {
                                let g = grad[dst + ch];
                                dx[i00 + ch] = dx[i00 + ch] + g * (S::one() - wx) * (S::one() - wy);
                                dx[i01 + ch] = dx[i01 + ch] + g * wx * (S::one() - wy);
                                dx[i10 + ch] = dx[i10 + ch] + g * (S::one() - wx) * wy;
                                dx[i11 + ch] = dx[i11 + ch] + g * wx * wy;
                            }
                        }
                    }
                }
            }
        }
        self.add_to_grad(x, &dx);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_2x_of_single_pixel() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(vec![1.0], &[1, 1, 1, 1], false).unwrap();
        let y = g.upsample2d(x, 2, UpsampleMode::Nearest).unwrap();
        assert_eq!(g.shape(y), &[1, 2, 2, 1]);
        assert_eq!(g.data(y), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn bilinear_preserves_constant_maps() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(vec![3.0; 4], &[1, 2, 2, 1], false).unwrap();
        let y = g.upsample2d(x, 2, UpsampleMode::Bilinear).unwrap();
        for &v in g.data(y) {
            assert!((v - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_gradient_conserves_mass() {
        // sum of output = linear functional of input; grad of sum wrt each
        // input is the total interpolation weight, which sums to factor^2.
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(vec![0.0, 1.0, 2.0, 3.0], &[1, 2, 2, 1], true).unwrap();
        let y = g.upsample2d(x, 2, UpsampleMode::Bilinear).unwrap();
        let s = g.sum_all(y);
        g.backward(s).unwrap();
        let total: f64 = g.grad(x).unwrap().iter().sum();
        assert!((total - 16.0).abs() < 1e-9);
    }
}
