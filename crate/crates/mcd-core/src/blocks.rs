//! Network building blocks: stem, patch-merge downsampling, the visual
//! state space block and its channel-attentive variant.

use rand_chacha::ChaCha20Rng;

use crate::error::{McdError, Result};
use crate::params::{uniform_fan_in, zeros, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::ssm::{register_ss2d, ss2d, DiscretizationMode, Ss2dParams};
use crate::tensor::{Graph, Tensor};

pub const LAYERNORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub struct LinearParams {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

pub fn register_linear<S: Scalar>(
    store: &mut ParamStore<S>,
    rng: &mut ChaCha20Rng,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    bias: bool,
) -> LinearParams {
    LinearParams {
        w: store.register(
            format!("{prefix}.weight"),
            uniform_fan_in(rng, d_in, d_in * d_out),
            &[d_in, d_out],
            true,
        ),
        b: bias.then(|| {
            store.register(format!("{prefix}.bias"), zeros(d_out), &[d_out], false)
        }),
    }
}

pub fn linear_fwd<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    x: Tensor,
    p: &LinearParams,
) -> Result<Tensor> {
    let w = g.param(store, p.w);
    let b = p.b.map(|b| g.param(store, b));
    g.linear(x, w, b)
}

#[derive(Debug, Clone, Copy)]
pub struct NormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub fn register_norm<S: Scalar>(
    store: &mut ParamStore<S>,
    prefix: &str,
    d: usize,
) -> NormParams {
    NormParams {
        gamma: store.register(format!("{prefix}.gamma"), crate::params::ones(d), &[d], false),
        beta: store.register(format!("{prefix}.beta"), zeros(d), &[d], false),
    }
}

pub fn norm_fwd<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    x: Tensor,
    p: &NormParams,
) -> Result<Tensor> {
    let gamma = g.param(store, p.gamma);
    let beta = g.param(store, p.beta);
    g.layernorm(x, gamma, beta, LAYERNORM_EPS)
}

#[derive(Debug, Clone, Copy)]
pub struct ConvParams {
    pub k: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

#[allow(clippy::too_many_arguments)]
pub fn register_conv<S: Scalar>(
    store: &mut ParamStore<S>,
    rng: &mut ChaCha20Rng,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    ksize: usize,
    stride: usize,
    padding: usize,
    groups: usize,
) -> ConvParams {
    let fan_in = (c_in / groups) * ksize * ksize;
    ConvParams {
        k: store.register(
            format!("{prefix}.kernel"),
            uniform_fan_in(rng, fan_in, c_out * (c_in / groups) * ksize * ksize),
            &[c_out, c_in / groups, ksize, ksize],
            true,
        ),
        b: Some(store.register(format!("{prefix}.bias"), zeros(c_out), &[c_out], false)),
        stride,
        padding,
        groups,
    }
}

pub fn conv_fwd<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    x: Tensor,
    p: &ConvParams,
) -> Result<Tensor> {
    let k = g.param(store, p.k);
    let b = p.b.map(|b| g.param(store, b));
    g.conv2d(x, k, b, p.stride, p.padding, p.groups)
}

/// Depthwise 3x3 on a channels-last map, via NCHW round trip.
fn dwconv_nhwc<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    x: Tensor,
    p: &ConvParams,
) -> Result<Tensor> {
    let nchw = g.permute(x, &[0, 3, 1, 2])?;
    let out = conv_fwd(g, store, nchw, p)?;
    g.permute(out, &[0, 2, 3, 1])
}

/// Two stride-2 convolutions: [B,3,H,W] -> [B,H/4,W/4,C1].
pub struct Stem {
    conv1: ConvParams,
    conv2: ConvParams,
    pub c_out: usize,
}

impl Stem {
    pub fn register<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha20Rng,
        prefix: &str,
        c_out: usize,
    ) -> Self {
        let mid = (c_out / 2).max(1);
        Stem {
            conv1: register_conv(store, rng, &format!("{prefix}.conv1"), 3, mid, 3, 2, 1, 1),
            conv2: register_conv(store, rng, &format!("{prefix}.conv2"), mid, c_out, 3, 2, 1, 1),
            c_out,
        }
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        img: Tensor,
    ) -> Result<Tensor> {
        let shape = g.shape(img).to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(McdError::Invalid(format!(
                "stem expects [B,3,H,W], got {shape:?}"
            )));
        }
        if shape[2] % 4 != 0 || shape[3] % 4 != 0 {
            return Err(McdError::InvalidGeometry {
                context: "stem".into(),
                detail: format!("spatial size {}x{} not divisible by 4", shape[2], shape[3]),
            });
        }
        let h = conv_fwd(g, store, img, &self.conv1)?;
        let h = g.silu(h);
        let h = conv_fwd(g, store, h, &self.conv2)?;
        let h = g.silu(h);
        g.permute(h, &[0, 2, 3, 1])
    }
}

/// 2x2 patch merge: concatenate each 2x2 block's pixels (4C channels),
/// then layernorm and a linear down to 2C.
pub struct Downsample {
    norm: NormParams,
    lin: LinearParams,
    pub c_in: usize,
}

impl Downsample {
    pub fn register<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha20Rng,
        prefix: &str,
        c_in: usize,
    ) -> Self {
        Downsample {
            norm: register_norm(store, &format!("{prefix}.norm"), 4 * c_in),
            lin: register_linear(store, rng, &format!("{prefix}.reduce"), 4 * c_in, 2 * c_in, false),
            c_in,
        }
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        x: Tensor,
    ) -> Result<Tensor> {
        let merged = patch_merge(g, x)?;
        let n = norm_fwd(g, store, merged, &self.norm)?;
        linear_fwd(g, store, n, &self.lin)
    }
}

/// [B,H,W,C] -> [B,H/2,W/2,4C]; the four pixels of each block are stacked
/// in (dy, dx) = (0,0),(0,1),(1,0),(1,1) order.
pub fn patch_merge<S: Scalar>(g: &mut Graph<S>, x: Tensor) -> Result<Tensor> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 {
        return Err(McdError::Invalid(format!(
            "patch_merge expects [B,H,W,C], got {s:?}"
        )));
    }
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(McdError::InvalidGeometry {
            context: "patch_merge".into(),
            detail: format!("spatial size {h}x{w} not divisible by 2"),
        });
    }
    let v = g.reshape(x, &[b, h / 2, 2, w / 2, 2, c])?;
    let p = g.permute(v, &[0, 1, 3, 2, 4, 5])?;
    g.reshape(p, &[b, h / 2, w / 2, 4 * c])
}

/// Visual state space block.
///
/// norm -> in/gate projections (C -> E·C each); the in branch goes through a
/// depthwise 3x3 + SiLU, the four-direction scan and a layernorm; the gate
/// branch through SiLU. Their product projects back to C and adds the
/// residual.
pub struct VssBlock {
    norm_in: NormParams,
    proj_in: LinearParams,
    proj_gate: LinearParams,
    dwconv: ConvParams,
    ss2d: Ss2dParams,
    norm_post: NormParams,
    proj_out: LinearParams,
    pub d_model: usize,
    pub d_inner: usize,
}

impl VssBlock {
    pub fn register<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha20Rng,
        prefix: &str,
        d_model: usize,
        expand: usize,
        state: usize,
    ) -> Self {
        let d_inner = d_model * expand;
        VssBlock {
            norm_in: register_norm(store, &format!("{prefix}.norm_in"), d_model),
            proj_in: register_linear(store, rng, &format!("{prefix}.proj_in"), d_model, d_inner, true),
            proj_gate: register_linear(store, rng, &format!("{prefix}.proj_gate"), d_model, d_inner, true),
            dwconv: register_conv(store, rng, &format!("{prefix}.dwconv"), d_inner, d_inner, 3, 1, 1, d_inner),
            ss2d: register_ss2d(store, rng, &format!("{prefix}.ss2d"), d_inner, state),
            norm_post: register_norm(store, &format!("{prefix}.norm_post"), d_inner),
            proj_out: register_linear(store, rng, &format!("{prefix}.proj_out"), d_inner, d_model, true),
            d_model,
            d_inner,
        }
    }

    /// The non-residual branch; [`Self::forward`] adds it to the input.
    pub fn forward_inner<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        x: Tensor,
    ) -> Result<Tensor> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[3] != self.d_model {
            return Err(McdError::ShapeMismatch {
                context: "vss block input channels".into(),
                expected: vec![self.d_model],
                got: shape,
            });
        }
        let h = norm_fwd(g, store, x, &self.norm_in)?;
        let a = linear_fwd(g, store, h, &self.proj_in)?;
        let a = dwconv_nhwc(g, store, a, &self.dwconv)?;
        let a = g.silu(a);
        let a = ss2d(g, store, a, &self.ss2d, DiscretizationMode::Taylor)?;
        let a = norm_fwd(g, store, a, &self.norm_post)?;
        let gate = linear_fwd(g, store, h, &self.proj_gate)?;
        let gate = g.silu(gate);
        let gated = g.mul(a, gate)?;
        linear_fwd(g, store, gated, &self.proj_out)
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        x: Tensor,
    ) -> Result<Tensor> {
        let inner = self.forward_inner(g, store, x)?;
        g.add(x, inner)
    }

    pub fn zero_proj_out<S: Scalar>(&self, store: &mut ParamStore<S>) {
        store.entry_mut(self.proj_out.w).data.fill(S::zero());
        if let Some(b) = self.proj_out.b {
            store.entry_mut(b).data.fill(S::zero());
        }
    }
}

/// VSS block with CBAM-style channel attention: spatial average- and
/// max-pooled channel statistics drive a shared bottleneck MLP whose sigmoid
/// rescales the block output before the residual add.
pub struct CavssBlock {
    pub vss: VssBlock,
    att_down: LinearParams,
    att_up: LinearParams,
}

pub const ATTENTION_REDUCTION: usize = 4;

impl CavssBlock {
    pub fn register<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha20Rng,
        prefix: &str,
        d_model: usize,
        expand: usize,
        state: usize,
    ) -> Self {
        let bottleneck = (d_model / ATTENTION_REDUCTION).max(1);
        CavssBlock {
            vss: VssBlock::register(store, rng, &format!("{prefix}.vss"), d_model, expand, state),
            att_down: register_linear(store, rng, &format!("{prefix}.att_down"), d_model, bottleneck, true),
            att_up: register_linear(store, rng, &format!("{prefix}.att_up"), bottleneck, d_model, true),
        }
    }

    /// Channel weights in (0,1), shape [B,1,1,C], from a [B,H,W,C] map.
    pub fn attention<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        u: Tensor,
    ) -> Result<Tensor> {
        let s = g.shape(u).to_vec();
        let (b, c) = (s[0], s[3]);
        let seq = g.spatial_flatten(u)?; // [B,L,C]
        let avg = g.reduce_mean(seq, 1)?; // [B,1,C]
        let mx = g.reduce_max(seq, 1)?;
        let mut scores = Vec::new();
        for pooled in [avg, mx] {
            let d = linear_fwd(g, store, pooled, &self.att_down)?;
            let d = g.relu(d);
            scores.push(linear_fwd(g, store, d, &self.att_up)?);
        }
        let summed = g.add(scores[0], scores[1])?;
        let att = g.sigmoid(summed);
        g.reshape(att, &[b, 1, 1, c])
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        x: Tensor,
    ) -> Result<Tensor> {
        let u = self.vss.forward_inner(g, store, x)?;
        let att = self.attention(g, store, u)?;
        let scaled = g.mul(u, att)?;
        g.add(x, scaled)
    }
}
