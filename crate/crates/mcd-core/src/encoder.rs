//! Weight-shared two-branch image encoder.
//!
//! stem -> stage1 -> downsample -> stage2 -> downsample -> stage3 ->
//! downsample -> stage4, capturing each stage output. Channels double and
//! spatial extents halve per stage, giving features at strides 4/8/16/32
//! with widths C1/2C1/4C1/8C1. Both images run through the same parameter
//! set; gradient contributions from the two branches sum into it.

use rand_chacha::ChaCha20Rng;

use crate::blocks::{Downsample, Stem, VssBlock};
use crate::error::{McdError, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    /// Base channels at stride 4.
    pub c1: usize,
    pub depths: [usize; 4],
    /// SSM state size N.
    pub state: usize,
    /// Inner expansion factor E of each block.
    pub expand: usize,
}

impl EncoderConfig {
    /// Small setup that trains on a CPU in minutes.
    pub fn desk() -> Self {
        EncoderConfig {
            c1: 16,
            depths: [1, 1, 2, 1],
            state: 8,
            expand: 2,
        }
    }

    /// Mirrors the VMamba-Small layout; used for parameter accounting only.
    pub fn reference() -> Self {
        EncoderConfig {
            c1: 96,
            depths: [2, 2, 27, 2],
            state: 16,
            expand: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.c1 < 2 || self.c1 % 2 != 0 {
            return Err(McdError::Config(format!(
                "encoder c1 must be even and >= 2, got {}",
                self.c1
            )));
        }
        if self.depths.iter().any(|&d| d == 0) {
            return Err(McdError::Config(format!(
                "encoder depths must be >= 1, got {:?}",
                self.depths
            )));
        }
        if self.state == 0 || self.expand == 0 {
            return Err(McdError::Config("encoder state and expand must be >= 1".into()));
        }
        Ok(())
    }

    /// Channel width of stage `i` (0-based).
    pub fn stage_channels(&self, i: usize) -> usize {
        self.c1 << i
    }
}

/// The four per-stage maps for one image, shallow to deep.
pub struct MultiScaleFeatures {
    pub levels: [Tensor; 4],
}

pub struct SiameseEncoder {
    stem: Stem,
    stages: Vec<Vec<VssBlock>>,
    downsamples: Vec<Downsample>,
    pub config: EncoderConfig,
}

impl SiameseEncoder {
    pub fn register<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha20Rng,
        prefix: &str,
        config: &EncoderConfig,
    ) -> Result<Self> {
        config.validate()?;
        let stem = Stem::register(store, rng, &format!("{prefix}.stem"), config.c1);
        let mut stages = Vec::new();
        let mut downsamples = Vec::new();
        for stage in 0..4 {
            let channels = config.stage_channels(stage);
            let blocks = (0..config.depths[stage])
                .map(|b| {
                    VssBlock::register(
                        store,
                        rng,
                        &format!("{prefix}.stage{}.block{b}", stage + 1),
                        channels,
                        config.expand,
                        config.state,
                    )
                })
                .collect();
            stages.push(blocks);
            if stage < 3 {
                downsamples.push(Downsample::register(
                    store,
                    rng,
                    &format!("{prefix}.down{}", stage + 1),
                    channels,
                ));
            }
        }
        Ok(SiameseEncoder {
            stem,
            stages,
            downsamples,
            config: config.clone(),
        })
    }

    /// img: [B,3,H,W] with H, W divisible by 32.
    pub fn encode<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        img: Tensor,
    ) -> Result<MultiScaleFeatures> {
        let shape = g.shape(img).to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(McdError::Invalid(format!(
                "encode expects [B,3,H,W], got {shape:?}"
            )));
        }
        if shape[2] % 32 != 0 || shape[3] % 32 != 0 {
            return Err(McdError::InvalidGeometry {
                context: "encode".into(),
                detail: format!("spatial size {}x{} not divisible by 32", shape[2], shape[3]),
            });
        }
        let mut x = self.stem.forward(g, store, img)?;
        let mut levels = Vec::with_capacity(4);
        for stage in 0..4 {
            if stage > 0 {
                x = self.downsamples[stage - 1].forward(g, store, x)?;
            }
            for block in &self.stages[stage] {
                x = block.forward(g, store, x)?;
            }
            levels.push(x);
        }
        Ok(MultiScaleFeatures {
            levels: [levels[0], levels[1], levels[2], levels[3]],
        })
    }

    /// Run both images through the shared weights.
    pub fn encode_pair<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        pre: Tensor,
        post: Tensor,
    ) -> Result<(MultiScaleFeatures, MultiScaleFeatures)> {
        if g.shape(pre) != g.shape(post) {
            return Err(McdError::ShapeMismatch {
                context: "encode_pair".into(),
                expected: g.shape(pre).to_vec(),
                got: g.shape(post).to_vec(),
            });
        }
        let a = self.encode(g, store, pre)?;
        let b = self.encode(g, store, post)?;
        Ok((a, b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny_config() -> EncoderConfig {
        EncoderConfig {
            c1: 4,
            depths: [1, 1, 1, 1],
            state: 2,
            expand: 2,
        }
    }

    fn build(config: &EncoderConfig) -> (ParamStore<f32>, SiameseEncoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let enc = SiameseEncoder::register(&mut store, &mut rng, "enc", config).unwrap();
        (store, enc)
    }

    fn image(g: &mut Graph<f32>, seed: u64, hw: usize) -> Tensor {
        let data: Vec<f32> = (0..3 * hw * hw)
            .map(|i| (((i as u64).wrapping_mul(seed * 2 + 1) % 255) as f32) / 255.0)
            .collect();
        g.leaf(data, &[1, 3, hw, hw], false).unwrap()
    }

    #[test]
    fn shape_ladder_desk_64() {
        let config = EncoderConfig::desk();
        let (store, enc) = build(&config);
        let mut g: Graph<f32> = Graph::new();
        let img = image(&mut g, 1, 64);
        let feats = enc.encode(&mut g, &store, img).unwrap();
        assert_eq!(g.shape(feats.levels[0]), &[1, 16, 16, 16]);
        assert_eq!(g.shape(feats.levels[1]), &[1, 8, 8, 32]);
        assert_eq!(g.shape(feats.levels[2]), &[1, 4, 4, 64]);
        assert_eq!(g.shape(feats.levels[3]), &[1, 2, 2, 128]);
    }

    #[test]
    fn rejects_non_multiple_of_32() {
        let (store, enc) = build(&tiny_config());
        let mut g: Graph<f32> = Graph::new();
        let img = g.leaf(vec![0.0; 3 * 16 * 16], &[1, 3, 16, 16], false).unwrap();
        assert!(enc.encode(&mut g, &store, img).is_err());
    }

    #[test]
    fn same_input_gives_bitwise_identical_pyramids() {
        let (store, enc) = build(&tiny_config());
        let mut g: Graph<f32> = Graph::new();
        let img = image(&mut g, 5, 32);
        let (fa, fb) = enc.encode_pair(&mut g, &store, img, img).unwrap();
        for (a, b) in fa.levels.iter().zip(&fb.levels) {
            assert_eq!(g.data(*a), g.data(*b));
        }
    }

    #[test]
    fn different_images_give_different_features() {
        let (store, enc) = build(&tiny_config());
        let mut g: Graph<f32> = Graph::new();
        let img_a = image(&mut g, 5, 32);
        let img_b = image(&mut g, 11, 32);
        let (fa, fb) = enc.encode_pair(&mut g, &store, img_a, img_b).unwrap();
        let differs = g
            .data(fa.levels[0])
            .iter()
            .zip(g.data(fb.levels[0]))
            .any(|(x, y)| x != y);
        assert!(differs);
    }

    #[test]
    fn swapping_pair_swaps_outputs() {
        let (store, enc) = build(&tiny_config());
        let mut g: Graph<f32> = Graph::new();
        let img_a = image(&mut g, 5, 32);
        let img_b = image(&mut g, 11, 32);
        let (fa, fb) = enc.encode_pair(&mut g, &store, img_a, img_b).unwrap();
        let (fb2, fa2) = enc.encode_pair(&mut g, &store, img_b, img_a).unwrap();
        for i in 0..4 {
            assert_eq!(g.data(fa.levels[i]), g.data(fa2.levels[i]));
            assert_eq!(g.data(fb.levels[i]), g.data(fb2.levels[i]));
        }
    }

    #[test]
    fn pair_gradient_is_sum_of_branch_gradients() {
        let config = EncoderConfig {
            c1: 2,
            depths: [1, 1, 1, 1],
            state: 2,
            expand: 2,
        };
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let enc = SiameseEncoder::register(&mut store, &mut rng, "enc", &config).unwrap();

        let data_a: Vec<f64> = (0..3 * 32 * 32).map(|i| ((i % 17) as f64) / 17.0).collect();
        let data_b: Vec<f64> = (0..3 * 32 * 32).map(|i| ((i % 23) as f64) / 23.0).collect();

        // joint loss over both branches
        let mut g: Graph<f64> = Graph::new();
        let a = g.leaf(data_a.clone(), &[1, 3, 32, 32], false).unwrap();
        let b = g.leaf(data_b.clone(), &[1, 3, 32, 32], false).unwrap();
        let (fa, fb) = enc.encode_pair(&mut g, &store, a, b).unwrap();
        let sa = g.sum_all(fa.levels[3]);
        let sb = g.sum_all(fb.levels[3]);
        let total = g.add(sa, sb).unwrap();
        g.backward(total).unwrap();
        let joint = store.collect_grads(&g);

        // per-branch losses, summed after the fact
        let grad_one = |data: &Vec<f64>| {
            let mut g: Graph<f64> = Graph::new();
            let x = g.leaf(data.clone(), &[1, 3, 32, 32], false).unwrap();
            let f = enc.encode(&mut g, &store, x).unwrap();
            let s = g.sum_all(f.levels[3]);
            g.backward(s).unwrap();
            store.collect_grads(&g)
        };
        let ga = grad_one(&data_a);
        let gb = grad_one(&data_b);

        for ((j, x), y) in joint.iter().zip(&ga).zip(&gb) {
            match (j, x, y) {
                (Some(j), Some(x), Some(y)) => {
                    for ((jv, xv), yv) in j.iter().zip(x).zip(y) {
                        assert!((jv - (xv + yv)).abs() < 1e-9, "{jv} vs {} ", xv + yv);
                    }
                }
                _ => panic!("every parameter participates in both graphs"),
            }
        }
    }
}
