//! Selective state space machinery.
//!
//! The continuous system `h' = A h + B x, y = C h + D x` is discretized by
//! zero-order hold: `Ā = exp(ΔA)`, and either the exact input matrix
//! `B̄ = (ΔA)⁻¹(exp(ΔA) − 1) · ΔB` or its first-order Taylor form `B̄ = ΔB`.
//! A is diagonal per channel and strictly negative, parameterized as
//! `A = −exp(A_log)` with the S4D-real initialization `A_log = ln(1..N)`.
//! Selectivity makes B, C and Δ functions of the current token:
//! `B_t = W_B x_t`, `C_t = W_C x_t`, `Δ_t = softplus(W_Δ x_t + bias)` with a
//! low-rank W_Δ.
//!
//! [`ss2d`] applies the 1-D scan along four flattenings of a feature map
//! (row-major and column-major, each forward and reversed) and merges the
//! four outputs by summation, the cross-scan used by visual state space
//! backbones.

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::error::{McdError, Result};
use crate::params::{uniform_fan_in, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor};

/// Token traversal orders over an H x W map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanDirection {
    RowMajorForward,
    RowMajorReverse,
    ColMajorForward,
    ColMajorReverse,
}

impl ScanDirection {
    pub const ALL: [ScanDirection; 4] = [
        ScanDirection::RowMajorForward,
        ScanDirection::RowMajorReverse,
        ScanDirection::ColMajorForward,
        ScanDirection::ColMajorReverse,
    ];

    /// The visiting order as indices into the row-major flattening.
    /// Forward/reverse pairs are exact reversals of each other.
    pub fn order(self, h: usize, w: usize) -> Vec<usize> {
        let row_major: Vec<usize> = (0..h * w).collect();
        let col_major: Vec<usize> = (0..w)
            .flat_map(|x| (0..h).map(move |y| y * w + x))
            .collect();
        match self {
            ScanDirection::RowMajorForward => row_major,
            ScanDirection::RowMajorReverse => row_major.into_iter().rev().collect(),
            ScanDirection::ColMajorForward => col_major,
            ScanDirection::ColMajorReverse => col_major.into_iter().rev().collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiscretizationMode {
    Exact,
    Taylor,
}

/// Per-token discrete step factors produced by [`discretize_zoh`].
pub struct DiscreteStep {
    /// exp(Δ A), elementwise over [B,L,D,N]; in (0,1) for Δ > 0, A < 0.
    pub a_bar: Tensor,
    /// Input factor [B,L,D,N]; multiplied by the token inside the scan.
    pub b_bar: Tensor,
}

/// Input-dependent projections for one scan unit.
#[derive(Debug, Clone, Copy)]
pub struct SsmProjections {
    pub w_b: ParamId,
    pub w_c: ParamId,
    pub w_delta_down: ParamId,
    pub w_delta_up: ParamId,
    pub delta_bias: ParamId,
}

/// One-directional selective scan parameters (used by the difference
/// module's joint scan and as a building block of [`Ss2dParams`]).
#[derive(Debug, Clone, Copy)]
pub struct SsmParams {
    pub a_log: ParamId,
    pub skip_d: ParamId,
    pub proj: SsmProjections,
    pub d_inner: usize,
    pub state: usize,
}

/// Four-direction scan parameters: independent projections per direction,
/// one shared A_log and skip term.
#[derive(Debug, Clone)]
pub struct Ss2dParams {
    pub a_log: ParamId,
    pub skip_d: ParamId,
    pub dirs: [SsmProjections; 4],
    pub d_inner: usize,
    pub state: usize,
}

pub fn delta_rank(d_inner: usize) -> usize {
    (d_inner / 16).max(1)
}

/// S4D-real: A_log[d, n] = ln(n+1), so A = -exp(A_log) = -(n+1).
fn a_log_init<S: Scalar>(d_inner: usize, state: usize) -> Vec<S> {
    let mut data = Vec::with_capacity(d_inner * state);
    for _ in 0..d_inner {
        for n in 0..state {
            data.push(S::from_f64(((n + 1) as f64).ln()));
        }
    }
    data
}

/// Bias such that softplus(bias) lands log-uniformly in [0.001, 0.1].
fn delta_bias_init<S: Scalar>(rng: &mut ChaCha20Rng, d_inner: usize) -> Vec<S> {
    let (lo, hi) = (0.001f64.ln(), 0.1f64.ln());
    (0..d_inner)
        .map(|_| {
            let dt = rng.gen_range(lo..hi).exp();
            // inverse softplus, stable for small dt
            S::from_f64(dt.exp_m1().ln())
        })
        .collect()
}

pub fn register_projections<S: Scalar>(
    store: &mut ParamStore<S>,
    rng: &mut ChaCha20Rng,
    prefix: &str,
    d_inner: usize,
    state: usize,
) -> SsmProjections {
    let rank = delta_rank(d_inner);
    SsmProjections {
        w_b: store.register(
            format!("{prefix}.w_b"),
            uniform_fan_in(rng, d_inner, d_inner * state),
            &[d_inner, state],
            true,
        ),
        w_c: store.register(
            format!("{prefix}.w_c"),
            uniform_fan_in(rng, d_inner, d_inner * state),
            &[d_inner, state],
            true,
        ),
        w_delta_down: store.register(
            format!("{prefix}.w_delta_down"),
            uniform_fan_in(rng, d_inner, d_inner * rank),
            &[d_inner, rank],
            true,
        ),
        w_delta_up: store.register(
            format!("{prefix}.w_delta_up"),
            uniform_fan_in(rng, rank, rank * d_inner),
            &[rank, d_inner],
            true,
        ),
        delta_bias: store.register(
            format!("{prefix}.delta_bias"),
            delta_bias_init(rng, d_inner),
            &[d_inner],
            false,
        ),
    }
}

pub fn register_ssm<S: Scalar>(
    store: &mut ParamStore<S>,
    rng: &mut ChaCha20Rng,
    prefix: &str,
    d_inner: usize,
    state: usize,
) -> SsmParams {
    SsmParams {
        a_log: store.register(
            format!("{prefix}.a_log"),
            a_log_init(d_inner, state),
            &[d_inner, state],
            false,
        ),
        skip_d: store.register(
            format!("{prefix}.d"),
            crate::params::ones(d_inner),
            &[d_inner],
            false,
        ),
        proj: register_projections(store, rng, prefix, d_inner, state),
        d_inner,
        state,
    }
}

pub fn register_ss2d<S: Scalar>(
    store: &mut ParamStore<S>,
    rng: &mut ChaCha20Rng,
    prefix: &str,
    d_inner: usize,
    state: usize,
) -> Ss2dParams {
    let a_log = store.register(
        format!("{prefix}.a_log"),
        a_log_init(d_inner, state),
        &[d_inner, state],
        false,
    );
    let skip_d = store.register(
        format!("{prefix}.d"),
        crate::params::ones(d_inner),
        &[d_inner],
        false,
    );
    let dirs = [0, 1, 2, 3].map(|i| {
        register_projections(store, rng, &format!("{prefix}.dir{i}"), d_inner, state)
    });
    Ss2dParams {
        a_log,
        skip_d,
        dirs,
        d_inner,
        state,
    }
}

/// Stage A = -exp(A_log): strictly negative diagonal per channel.
pub fn stage_a<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    a_log: ParamId,
) -> Result<Tensor> {
    let a_log_t = g.param(store, a_log);
    let e = g.exp(a_log_t);
    Ok(g.neg(e))
}

/// Per-token parameters from the sequence itself.
/// x: [B,L,D] -> (Δ [B,L,D], B [B,L,N], C [B,L,N]).
pub fn input_dependent_params<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    x: Tensor,
    proj: &SsmProjections,
) -> Result<(Tensor, Tensor, Tensor)> {
    let w_b = g.param(store, proj.w_b);
    let w_c = g.param(store, proj.w_c);
    let b_seq = g.linear(x, w_b, None)?;
    let c_seq = g.linear(x, w_c, None)?;

    let w_down = g.param(store, proj.w_delta_down);
    let w_up = g.param(store, proj.w_delta_up);
    let bias = g.param(store, proj.delta_bias);
    let low = g.linear(x, w_down, None)?;
    let pre = g.linear(low, w_up, None)?;
    let shifted = g.add(pre, bias)?;
    let delta = g.softplus(shifted);
    Ok((delta, b_seq, c_seq))
}

/// Zero-order hold factors for a diagonal A.
///
/// a: [D,N] strictly negative; b_seq: [B,L,N]; delta: [B,L,D].
pub fn discretize_zoh<S: Scalar>(
    g: &mut Graph<S>,
    a: Tensor,
    b_seq: Tensor,
    delta: Tensor,
    mode: DiscretizationMode,
) -> Result<DiscreteStep> {
    let dshape = g.shape(delta).to_vec();
    if dshape.len() != 3 {
        return Err(McdError::Invalid(format!(
            "discretize_zoh expects delta [B,L,D], got {dshape:?}"
        )));
    }
    let (b, l, d) = (dshape[0], dshape[1], dshape[2]);
    if mode == DiscretizationMode::Exact {
        if let Some(&bad) = g.data(delta).iter().find(|v| **v <= S::zero()) {
            return Err(McdError::Invalid(format!(
                "exact discretization requires Δ > 0, found {bad}"
            )));
        }
    }
    let delta4 = g.reshape(delta, &[b, l, d, 1])?;
    let da = g.mul(delta4, a)?; // [B,L,D,N]
    let a_bar = g.exp(da);

    let bshape = g.shape(b_seq).to_vec();
    let n = *bshape.last().unwrap();
    let b4 = g.reshape(b_seq, &[b, l, 1, n])?;
    let b_bar = match mode {
        DiscretizationMode::Taylor => g.mul(delta4, b4)?,
        DiscretizationMode::Exact => {
            // (exp(ΔA) - 1) / A · B, elementwise over the diagonal
            let one = g.scalar(1.0);
            let em1 = g.sub(a_bar, one)?;
            let ratio = g.div(em1, a)?;
            g.mul(ratio, b4)?
        }
    };
    Ok(DiscreteStep { a_bar, b_bar })
}

/// Full selective scan over a token sequence: projections, discretization,
/// recurrence and the D ⊙ x skip. x: [B,L,D] -> y: [B,L,D].
pub fn selective_scan<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    x: Tensor,
    params: &SsmParams,
    mode: DiscretizationMode,
) -> Result<Tensor> {
    let y = scan_with_projections(g, store, x, params.a_log, &params.proj, mode)?;
    let d_skip = g.param(store, params.skip_d);
    let skip = g.mul(x, d_skip)?;
    g.add(y, skip)
}

fn scan_with_projections<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    x: Tensor,
    a_log: ParamId,
    proj: &SsmProjections,
    mode: DiscretizationMode,
) -> Result<Tensor> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(McdError::Invalid(format!(
            "selective scan expects x [B,L,D], got {shape:?}"
        )));
    }
    let (b, l, d) = (shape[0], shape[1], shape[2]);
    let (delta, b_seq, c_seq) = input_dependent_params(g, store, x, proj)?;
    let a = stage_a(g, store, a_log)?;
    let step = discretize_zoh(g, a, b_seq, delta, mode)?;
    let x4 = g.reshape(x, &[b, l, d, 1])?;
    let bx = g.mul(step.b_bar, x4)?;
    g.selective_scan_core(step.a_bar, bx, c_seq)
}

/// Four-direction 2-D scan. fmap: [B,H,W,D] -> [B,H,W,D]; the four
/// directional outputs are summed in [`ScanDirection::ALL`] order.
pub fn ss2d<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    fmap: Tensor,
    params: &Ss2dParams,
    mode: DiscretizationMode,
) -> Result<Tensor> {
    let shape = g.shape(fmap).to_vec();
    if shape.len() != 4 {
        return Err(McdError::Invalid(format!(
            "ss2d expects [B,H,W,D], got {shape:?}"
        )));
    }
    let (b, h, w, d) = (shape[0], shape[1], shape[2], shape[3]);
    let l = h * w;

    let row_seq = g.reshape(fmap, &[b, l, d])?;
    let col_map = g.permute(fmap, &[0, 2, 1, 3])?;
    let col_seq = g.reshape(col_map, &[b, l, d])?;

    let mut merged: Option<Tensor> = None;
    for (i, dir) in ScanDirection::ALL.iter().enumerate() {
        let seq = match dir {
            ScanDirection::RowMajorForward => row_seq,
            ScanDirection::RowMajorReverse => g.flip(row_seq, 1)?,
            ScanDirection::ColMajorForward => col_seq,
            ScanDirection::ColMajorReverse => g.flip(col_seq, 1)?,
        };
        let y = scan_with_projections(g, store, seq, params.a_log, &params.dirs[i], mode)?;
        let y_map = match dir {
            ScanDirection::RowMajorForward => g.reshape(y, &[b, h, w, d])?,
            ScanDirection::RowMajorReverse => {
                let back = g.flip(y, 1)?;
                g.reshape(back, &[b, h, w, d])?
            }
            ScanDirection::ColMajorForward => {
                let m = g.reshape(y, &[b, w, h, d])?;
                g.permute(m, &[0, 2, 1, 3])?
            }
            ScanDirection::ColMajorReverse => {
                let back = g.flip(y, 1)?;
                let m = g.reshape(back, &[b, w, h, d])?;
                g.permute(m, &[0, 2, 1, 3])?
            }
        };
        merged = Some(match merged {
            None => y_map,
            Some(acc) => g.add(acc, y_map)?,
        });
    }
    let merged = merged.expect("four directions");
    let d_skip = g.param(store, params.skip_d);
    let skip = g.mul(fmap, d_skip)?;
    let skip4 = g.scale(skip, 4.0);
    g.add(merged, skip4)
}
