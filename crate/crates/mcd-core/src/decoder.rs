//! UNet-style decoder over the four fused feature maps.
//!
//! Deepest level first: channel-attentive blocks, x2 bilinear upsampling,
//! 1x1 channel reduction and skip-adds walk the ladder back to stride 4,
//! where a linear classifier produces the two change logits; a final x4
//! bilinear resize returns to input resolution.

use rand_chacha::ChaCha20Rng;

use crate::blocks::{linear_fwd, register_linear, CavssBlock, LinearParams};
use crate::error::{McdError, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, UpsampleMode};

pub struct MaskDecoder {
    /// Per level, deepest (8·C1) to shallowest (C1).
    levels: Vec<Vec<CavssBlock>>,
    /// Channel reductions 8C1->4C1, 4C1->2C1, 2C1->C1.
    reduces: Vec<LinearParams>,
    classifier: LinearParams,
    pub c1: usize,
}

impl MaskDecoder {
    pub fn register<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha20Rng,
        prefix: &str,
        c1: usize,
        cavss_depth: usize,
        expand: usize,
        state: usize,
    ) -> Self {
        let mut levels = Vec::new();
        let mut reduces = Vec::new();
        for li in 0..4 {
            let width = c1 << (3 - li);
            let blocks = (0..cavss_depth.max(1))
                .map(|b| {
                    CavssBlock::register(
                        store,
                        rng,
                        &format!("{prefix}.level{li}.cavss{b}"),
                        width,
                        expand,
                        state,
                    )
                })
                .collect();
            levels.push(blocks);
            if li < 3 {
                reduces.push(register_linear(
                    store,
                    rng,
                    &format!("{prefix}.level{li}.reduce"),
                    width,
                    width / 2,
                    false,
                ));
            }
        }
        MaskDecoder {
            levels,
            reduces,
            classifier: register_linear(store, rng, &format!("{prefix}.classifier"), c1, 2, true),
            c1,
        }
    }

    /// dm_feats: shallow to deep, [B,H/4,W/4,C1] .. [B,H/32,W/32,8C1].
    /// Returns logits [B,2,H,W].
    pub fn decode<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        dm_feats: &[Tensor; 4],
    ) -> Result<Tensor> {
        for (i, f) in dm_feats.iter().enumerate() {
            let s = g.shape(*f);
            let want_c = self.c1 << i;
            if s.len() != 4 || s[3] != want_c {
                return Err(McdError::ShapeMismatch {
                    context: format!("decoder input level {i}"),
                    expected: vec![want_c],
                    got: s.to_vec(),
                });
            }
        }
        let mut x = dm_feats[3];
        for li in 0..4 {
            for block in &self.levels[li] {
                x = block.forward(g, store, x)?;
            }
            if li < 3 {
                let up = g.upsample2d(x, 2, UpsampleMode::Bilinear)?;
                let red = linear_fwd(g, store, up, &self.reduces[li])?;
                let skip = dm_feats[2 - li];
                if g.shape(red) != g.shape(skip) {
                    return Err(McdError::ShapeMismatch {
                        context: format!("decoder skip add at level {li}"),
                        expected: g.shape(skip).to_vec(),
                        got: g.shape(red).to_vec(),
                    });
                }
                x = g.add(red, skip)?;
            }
        }
        let logits4 = linear_fwd(g, store, x, &self.classifier)?; // [B,H/4,W/4,2]
        let logits = g.upsample2d(logits4, 4, UpsampleMode::Bilinear)?;
        g.permute(logits, &[0, 3, 1, 2])
    }
}

/// Argmax over the class axis of [B,2,H,W] logits; exact ties resolve to
/// "no change" (class 0). Returns row-major [B,H,W] bytes.
pub fn predict_mask<S: Scalar>(g: &Graph<S>, logits: Tensor) -> Result<Vec<u8>> {
    let s = g.shape(logits);
    if s.len() != 4 || s[1] != 2 {
        return Err(McdError::Invalid(format!(
            "predict_mask expects [B,2,H,W], got {s:?}"
        )));
    }
    let (b, h, w) = (s[0], s[2], s[3]);
    let plane = h * w;
    let data = g.data(logits);
    let mut mask = vec![0u8; b * plane];
    for bi in 0..b {
        let c0 = &data[(bi * 2) * plane..(bi * 2 + 1) * plane];
        let c1 = &data[(bi * 2 + 1) * plane..(bi * 2 + 2) * plane];
        let out = &mut mask[bi * plane..(bi + 1) * plane];
        for p in 0..plane {
            out[p] = u8::from(c1[p] > c0[p]);
        }
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check, Elements};
    use rand::SeedableRng;

    fn rng() -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(23)
    }

    fn dm_feats<S: Scalar>(
        g: &mut Graph<S>,
        c1: usize,
        h4: usize,
        w4: usize,
        fill: impl Fn(usize) -> f64,
    ) -> [Tensor; 4] {
        let mut feats = Vec::new();
        for i in 0..4 {
            let (h, w, c) = (h4 >> i, w4 >> i, c1 << i);
            let data: Vec<S> = (0..h * w * c).map(|j| S::from_f64(fill(j))).collect();
            feats.push(g.leaf(data, &[1, h, w, c], false).unwrap());
        }
        [feats[0], feats[1], feats[2], feats[3]]
    }

    #[test]
    fn decode_shape_ladder_desk() {
        let mut store: ParamStore<f32> = ParamStore::new();
        let mut r = rng();
        let dec = MaskDecoder::register(&mut store, &mut r, "dec", 16, 1, 2, 8);
        let mut g: Graph<f32> = Graph::new();
        let feats = dm_feats(&mut g, 16, 16, 16, |j| (j as f64 * 0.01).sin());
        let logits = dec.decode(&mut g, &store, &feats).unwrap();
        assert_eq!(g.shape(logits), &[1, 2, 64, 64]);
    }

    #[test]
    fn zero_features_give_constant_bias_logits() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut r = rng();
        let dec = MaskDecoder::register(&mut store, &mut r, "dec", 4, 1, 2, 2);
        if let Some(b) = dec.classifier.b {
            store.set_data(b, vec![0.7, -0.3]).unwrap();
        }
        let mut g: Graph<f64> = Graph::new();
        let feats = dm_feats(&mut g, 4, 8, 8, |_| 0.0);
        let logits = dec.decode(&mut g, &store, &feats).unwrap();
        let data = g.data(logits);
        let plane = 32 * 32;
        for p in 0..plane {
            assert!((data[p] - 0.7).abs() < 1e-9);
            assert!((data[plane + p] + 0.3).abs() < 1e-9);
        }
    }

    #[test]
    fn graceful_with_zeroed_shallow_skips() {
        let mut store: ParamStore<f32> = ParamStore::new();
        let mut r = rng();
        let dec = MaskDecoder::register(&mut store, &mut r, "dec", 4, 1, 2, 2);
        let mut g: Graph<f32> = Graph::new();
        let mut feats = dm_feats(&mut g, 4, 8, 8, |j| (j as f64 * 0.37).cos());
        for f in feats.iter_mut().take(3) {
            let zero_shape = g.shape(*f).to_vec();
            *f = g.zeros(&zero_shape);
        }
        let logits = dec.decode(&mut g, &store, &feats).unwrap();
        assert_eq!(g.shape(logits), &[1, 2, 32, 32]);
    }

    #[test]
    fn ladder_mismatch_errors() {
        let mut store: ParamStore<f32> = ParamStore::new();
        let mut r = rng();
        let dec = MaskDecoder::register(&mut store, &mut r, "dec", 4, 1, 2, 2);
        let mut g: Graph<f32> = Graph::new();
        let mut feats = dm_feats(&mut g, 4, 8, 8, |_| 0.1);
        feats[1] = g.zeros(&[1, 4, 4, 9]);
        assert!(dec.decode(&mut g, &store, &feats).is_err());
    }

    #[test]
    fn predict_mask_rules() {
        let mut g: Graph<f32> = Graph::new();
        // three pixels: (1,0) -> 0, (0,1) -> 1, (c,c) -> 0
        let logits = g
            .leaf(vec![1.0, 0.0, 0.5, 0.0, 1.0, 0.5], &[1, 2, 1, 3], false)
            .unwrap();
        let mask = predict_mask(&g, logits).unwrap();
        assert_eq!(mask, vec![0, 1, 0]);
    }

    #[test]
    fn predict_mask_invariant_to_common_shift() {
        let mut g: Graph<f32> = Graph::new();
        let base = vec![0.2, -0.4, 1.0, 0.9, 0.3, -1.0, 1.4, 0.8];
        let shifted: Vec<f32> = base.iter().map(|v| v + 5.25).collect();
        let l1 = g.leaf(base, &[1, 2, 2, 2], false).unwrap();
        let l2 = g.leaf(shifted, &[1, 2, 2, 2], false).unwrap();
        assert_eq!(predict_mask(&g, l1).unwrap(), predict_mask(&g, l2).unwrap());
    }

    #[test]
    fn decoder_gradients_match_finite_differences() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut r = rng();
        let dec = MaskDecoder::register(&mut store, &mut r, "dec", 2, 1, 2, 2);
        // stride-4 base 8x8 (a 32x32 input), halving down to 1x1
        for i in 0..4 {
            let (hw, c) = (8 >> i, 2usize << i);
            let count = hw * hw * c;
            let data: Vec<f64> = (0..count).map(|j| ((j * 7 % 5) as f64 - 2.0) * 0.2).collect();
            store.register(format!("feat{i}"), data, &[count], true);
        }
        let report = check("mask-decoder", &mut store, Elements::Sample(4), 1e-5, crate::gradcheck::FLOOR_COMPOSITE, |g, s| {
            let mut feats = Vec::new();
            for i in 0..4 {
                let hw = 8 >> i;
                let flat = g.param(s, s.lookup(&format!("feat{i}")).unwrap());
                feats.push(g.reshape(flat, &[1, hw, hw, 2 << i])?);
            }
            let logits = dec.decode(g, s, &[feats[0], feats[1], feats[2], feats[3]])?;
            Ok(g.sum_all(logits))
        })
        .unwrap();
        assert!(report.passes(1e-3), "max rel err {:e} at {:?}", report.max_rel_err, report.worst);
    }
}
