//! Per-scale fusion of the two feature branches.
//!
//! The joint selective scan concatenates the branch sequences token-wise in
//! both orders (pre;post and post;pre), scans each joint sequence once, then
//! re-aligns the second scan's halves so position i always refers to the
//! same (branch, token) pair before summing. Branch refinement weights
//! (linear, depthwise conv, norm) are shared between pre and post paths.
//!
//! The `Difference` variant replaces the scan fusion with an elementwise
//! subtraction into the same style of linear tail; it exists as an ablation.

use rand_chacha::ChaCha20Rng;

use crate::blocks::{
    conv_fwd, linear_fwd, norm_fwd, register_conv, register_linear, register_norm, ConvParams,
    LinearParams, NormParams,
};
use crate::error::{McdError, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::ssm::{register_ssm, selective_scan, DiscretizationMode, SsmParams};
use crate::tensor::{Graph, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DmVariant {
    /// Bidirectional token concatenation through the joint scan.
    #[default]
    Concatenation,
    /// Elementwise pre - post, ablation baseline.
    Difference,
}

impl DmVariant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "concatenation" | "concat" => Ok(DmVariant::Concatenation),
            "difference" | "diff" => Ok(DmVariant::Difference),
            other => Err(McdError::Config(format!("unknown dm variant '{other}'"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            DmVariant::Concatenation => "concatenation",
            DmVariant::Difference => "difference",
        }
    }
}

/// Joint selective scan over both branch sequences.
///
/// pre/post: [B,L,D]. Returns [B,2L,D]: the first L positions belong to the
/// pre branch, the last L to the post branch.
pub fn jss<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    pre: Tensor,
    post: Tensor,
    params: &SsmParams,
    mode: DiscretizationMode,
) -> Result<Tensor> {
    if g.shape(pre) != g.shape(post) {
        return Err(McdError::ShapeMismatch {
            context: "jss".into(),
            expected: g.shape(pre).to_vec(),
            got: g.shape(post).to_vec(),
        });
    }
    let l = g.shape(pre)[1];
    let ab = g.concat(&[pre, post], 1)?;
    let ba = g.concat(&[post, pre], 1)?;
    let y_ab = selective_scan(g, store, ab, params, mode)?;
    let y_ba = selective_scan(g, store, ba, params, mode)?;
    // y_ba's first half is the post branch; swap halves back into alignment.
    let (ba_post, ba_pre) = g.split_at(y_ba, 1, l)?;
    let y_ba_aligned = g.concat(&[ba_pre, ba_post], 1)?;
    g.add(y_ab, y_ba_aligned)
}

pub struct DifferenceModule {
    lin_in: LinearParams,
    dwconv: ConvParams,
    pub scan: SsmParams,
    norm: NormParams,
    lin_out: LinearParams,
    lin_diff: Option<LinearParams>,
    pub variant: DmVariant,
    pub channels: usize,
}

impl DifferenceModule {
    pub fn register<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha20Rng,
        prefix: &str,
        channels: usize,
        state: usize,
        variant: DmVariant,
    ) -> Self {
        DifferenceModule {
            lin_in: register_linear(store, rng, &format!("{prefix}.lin_in"), channels, channels, true),
            dwconv: register_conv(store, rng, &format!("{prefix}.dwconv"), channels, channels, 3, 1, 1, channels),
            scan: register_ssm(store, rng, &format!("{prefix}.jss"), channels, state),
            norm: register_norm(store, &format!("{prefix}.norm"), channels),
            lin_out: register_linear(store, rng, &format!("{prefix}.lin_out"), 2 * channels, channels, true),
            lin_diff: (variant == DmVariant::Difference).then(|| {
                register_linear(store, rng, &format!("{prefix}.lin_diff"), channels, channels, true)
            }),
            variant,
            channels,
        }
    }

    /// pre/post: [B,H,W,C] -> fused [B,H,W,C].
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        pre: Tensor,
        post: Tensor,
    ) -> Result<Tensor> {
        let shape = g.shape(pre).to_vec();
        if shape != g.shape(post) {
            return Err(McdError::ShapeMismatch {
                context: "difference module".into(),
                expected: shape,
                got: g.shape(post).to_vec(),
            });
        }
        if shape.len() != 4 || shape[3] != self.channels {
            return Err(McdError::ShapeMismatch {
                context: "difference module channels".into(),
                expected: vec![self.channels],
                got: shape,
            });
        }
        match self.variant {
            DmVariant::Difference => {
                let d = g.sub(pre, post)?;
                linear_fwd(g, store, d, self.lin_diff.as_ref().expect("difference tail"))
            }
            DmVariant::Concatenation => self.forward_concat(g, store, pre, post),
        }
    }

    fn forward_concat<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        pre: Tensor,
        post: Tensor,
    ) -> Result<Tensor> {
        let shape = g.shape(pre).to_vec();
        let (b, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);

        // shared branch refinement; the linear output is the residual source
        let refine = |g: &mut Graph<S>, x: Tensor| -> Result<(Tensor, Tensor)> {
            let lin = linear_fwd(g, store, x, &self.lin_in)?;
            let nchw = g.permute(lin, &[0, 3, 1, 2])?;
            let conv = conv_fwd(g, store, nchw, &self.dwconv)?;
            let conv = g.permute(conv, &[0, 2, 3, 1])?;
            let seq = g.reshape(conv, &[b, h * w, c])?;
            let res = g.reshape(lin, &[b, h * w, c])?;
            Ok((seq, res))
        };
        let (p_seq, p_res) = refine(g, pre)?;
        let (q_seq, q_res) = refine(g, post)?;

        let joint = jss(g, store, p_seq, q_seq, &self.scan, DiscretizationMode::Taylor)?;
        let (y_pre, y_post) = g.split_at(joint, 1, h * w)?;

        let y_pre = norm_fwd(g, store, y_pre, &self.norm)?;
        let y_post = norm_fwd(g, store, y_post, &self.norm)?;
        let y_pre = g.add(y_pre, p_res)?;
        let y_post = g.add(y_post, q_res)?;

        let cat = g.concat(&[y_pre, y_post], 2)?; // [B,L,2C]
        let out = linear_fwd(g, store, cat, &self.lin_out)?;
        g.reshape(out, &[b, h, w, c])
    }
}
