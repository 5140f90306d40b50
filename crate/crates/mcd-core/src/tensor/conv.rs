//! 2D convolution (cross-correlation) with stride, zero padding and groups.
//! groups == channels gives the depthwise case used inside the blocks.

use rayon::prelude::*;

use super::{Graph, Op, Tensor};
use crate::error::{McdError, Result};
use crate::scalar::Scalar;

pub(crate) fn conv_out_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Option<usize> {
    let padded = input + 2 * padding;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

impl<S: Scalar> Graph<S> {
    /// x: [N,C_in,H,W], kernel: [C_out, C_in/groups, kh, kw], bias: [C_out].
    pub fn conv2d(
        &mut self,
        x: Tensor,
        kernel: Tensor,
        bias: Option<Tensor>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Tensor> {
        let xs = self.nodes[x.0].shape.clone();
        let ks = self.nodes[kernel.0].shape.clone();
        if xs.len() != 4 || ks.len() != 4 {
            return Err(McdError::Invalid(format!(
                "conv2d expects x [N,C,H,W] and kernel [Co,Ci/g,kh,kw], got {xs:?} and {ks:?}"
            )));
        }
        let (n, c_in, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (c_out, kc, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
            return Err(McdError::InvalidGeometry {
                context: "conv2d".into(),
                detail: format!("channels {c_in}->{c_out} not divisible by groups {groups}"),
            });
        }
        if kc != c_in / groups {
            return Err(McdError::ShapeMismatch {
                context: "conv2d kernel channels".into(),
                expected: vec![c_in / groups],
                got: vec![kc],
            });
        }
        let h_out = conv_out_extent(h, kh, stride, padding).ok_or_else(|| McdError::InvalidGeometry {
            context: "conv2d".into(),
            detail: format!("input {h}x{w}, kernel {kh}x{kw}, stride {stride}, padding {padding}"),
        })?;
        let w_out =
            conv_out_extent(w, kw, stride, padding).ok_or_else(|| McdError::InvalidGeometry {
                context: "conv2d".into(),
                detail: format!("input {h}x{w}, kernel {kh}x{kw}, stride {stride}, padding {padding}"),
            })?;
        if let Some(b) = bias {
            if self.nodes[b.0].shape.as_slice() != [c_out] {
                return Err(McdError::ShapeMismatch {
                    context: "conv2d bias".into(),
                    expected: vec![c_out],
                    got: self.nodes[b.0].shape.clone(),
                });
            }
        }

        let xd = &self.nodes[x.0].data;
        let kd = &self.nodes[kernel.0].data;
        let bd = bias.map(|b| self.nodes[b.0].data.clone());
        let cg_in = c_in / groups;
        let cg_out = c_out / groups;

        let mut data = vec![S::zero(); n * c_out * h_out * w_out];
        // One (image, out-channel) plane per task; writes are disjoint.
        data.par_chunks_mut(h_out * w_out)
            .enumerate()
            .for_each(|(plane, out_plane)| {
                let ni = plane / c_out;
                let co = plane % c_out;
                let gg = co / cg_out;
                let base_bias = bd.as_ref().map(|b| b[co]).unwrap_or_else(S::zero);
                for oy in 0..h_out {
                    for ox in 0..w_out {
                        let mut acc = base_bias;
                        for ci in 0..cg_in {
                            let c = gg * cg_in + ci;
                            let x_plane = &xd[(ni * c_in + c) * h * w..(ni * c_in + c + 1) * h * w];
                            let k_plane =
                                &kd[(co * cg_in + ci) * kh * kw..(co * cg_in + ci + 1) * kh * kw];
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    acc = acc
                                        + x_plane[iy as usize * w + ix as usize]
                                            * k_plane[ky * kw + kx];
                                }
                            }
                        }
                        out_plane[oy * w_out + ox] = acc;
                    }
                }
            });

        let mut ids = vec![x.0, kernel.0];
        if let Some(b) = bias {
            ids.push(b.0);
        }
        let rg = self.any_requires_grad(&ids);
        Ok(self.push(
            data,
            vec![n, c_out, h_out, w_out],
            rg,
            Op::Conv2d {
                x: x.0,
                k: kernel.0,
                bias: bias.map(|b| b.0),
                stride,
                padding,
                groups,
            },
        ))
    }

    #[allow(clippy::too_many_arguments)]
    pub(super) fn backward_conv2d(
        &mut self,
        i: usize,
        x: usize,
        k: usize,
        bias: Option<usize>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) {
        let grad = self.nodes[i].grad.clone().expect("grad present");
        let os = self.nodes[i].shape.clone();
        let xs = self.nodes[x].shape.clone();
        let ks = self.nodes[k].shape.clone();
        let (n, c_out, h_out, w_out) = (os[0], os[1], os[2], os[3]);
        let (c_in, h, w) = (xs[1], xs[2], xs[3]);
        let (kh, kw) = (ks[2], ks[3]);
        let cg_in = c_in / groups;
        let cg_out = c_out / groups;
        let xd = &self.nodes[x].data;
        let kd = &self.nodes[k].data;

        let need_dx = self.nodes[x].requires_grad;
        let need_dk = self.nodes[k].requires_grad;
        let mut dx = if need_dx { vec![S::zero(); xd.len()] } else { Vec::new() };
        let mut dk = if need_dk { vec![S::zero(); kd.len()] } else { Vec::new() };

        for ni in 0..n {
            for co in 0..c_out {
                let gg = co / cg_out;
                let g_plane = &grad[(ni * c_out + co) * h_out * w_out..];
                for oy in 0..h_out {
                    for ox in 0..w_out {
                        let g = g_plane[oy * w_out + ox];
                        if g == S::zero() {
                            continue;
                        }
                        for ci in 0..cg_in {
                            let c = gg * cg_in + ci;
                            let x_base = (ni * c_in + c) * h * w;
                            let k_base = (co * cg_in + ci) * kh * kw;
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let xi = x_base + iy as usize * w + ix as usize;
                                    let kidx = k_base + ky * kw + kx;
                                    if need_dx {
                                        dx[xi] = dx[xi] + g * kd[kidx];
                                    }
                                    if need_dk {
                                        dk[kidx] = dk[kidx] + g * xd[xi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        if need_dx {
            self.add_to_grad(x, &dx);
        }
        if need_dk {
            self.add_to_grad(k, &dk);
        }
        if let Some(b) = bias {
            if self.nodes[b].requires_grad {
                let mut db = vec![S::zero(); c_out];
                for ni in 0..n {
                    for co in 0..c_out {
                        let plane = &grad[(ni * c_out + co) * h_out * w_out..][..h_out * w_out];
                        let s = plane.iter().fold(S::zero(), |acc, &v| acc + v);
                        db[co] = db[co] + s;
                    }
                }
                self.add_to_grad(b, &db);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ones_kernel_sums_window() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(vec![1.0; 9], &[1, 1, 3, 3], false).unwrap();
        let k = g.leaf(vec![1.0; 9], &[1, 1, 3, 3], false).unwrap();
        let y = g.conv2d(x, k, None, 1, 0, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1, 1]);
        assert_eq!(g.data(y), &[9.0]);
    }

    #[test]
    fn identity_1x1_kernel() {
        let mut g: Graph<f64> = Graph::new();
        let x = g
            .leaf((0..16).map(f64::from).collect(), &[1, 1, 4, 4], false)
            .unwrap();
        let k = g.leaf(vec![1.0], &[1, 1, 1, 1], false).unwrap();
        let y = g.conv2d(x, k, None, 1, 0, 1).unwrap();
        assert_eq!(g.data(y), g.data(x));
    }

    #[test]
    fn invalid_geometry_errors() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(vec![0.0; 4], &[1, 1, 2, 2], false).unwrap();
        let k = g.leaf(vec![0.0; 25], &[1, 1, 5, 5], false).unwrap();
        assert!(g.conv2d(x, k, None, 1, 0, 1).is_err());
    }

    #[test]
    fn depthwise_keeps_channels_separate() {
        let mut g: Graph<f64> = Graph::new();
        // 2 channels: ch0 = ones, ch1 = twos; 1x1 depthwise kernel [3, 5]
        let x = g
            .leaf(vec![1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0], &[1, 2, 2, 2], false)
            .unwrap();
        let k = g.leaf(vec![3.0, 5.0], &[2, 1, 1, 1], false).unwrap();
        let y = g.conv2d(x, k, None, 1, 0, 2).unwrap();
        assert_eq!(g.data(y), &[3.0, 3.0, 3.0, 3.0, 10.0, 10.0, 10.0, 10.0]);
    }

    #[test]
    fn stride_and_padding_geometry() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(vec![0.0; 64 * 3], &[1, 3, 8, 8], false).unwrap();
        let k = g.leaf(vec![0.0; 3 * 9 * 4], &[4, 3, 3, 3], false).unwrap();
        let y = g.conv2d(x, k, None, 2, 1, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 4, 4, 4]);
    }
}
