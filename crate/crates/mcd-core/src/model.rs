//! Full change-detection model: Siamese encoder, one difference module per
//! scale, mask decoder. Also a plain convolutional baseline used by the
//! receptive-field analysis.

use rand_chacha::ChaCha20Rng;

use crate::blocks::{conv_fwd, register_conv, ConvParams};
use crate::decoder::MaskDecoder;
use crate::diff::{DifferenceModule, DmVariant};
use crate::encoder::{EncoderConfig, SiameseEncoder};
use crate::error::{McdError, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub dm_variant: DmVariant,
    pub decoder_cavss_depth: usize,
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            encoder: EncoderConfig::desk(),
            dm_variant: DmVariant::Concatenation,
            decoder_cavss_depth: 1,
        }
    }

    pub fn reference() -> Self {
        ModelConfig {
            encoder: EncoderConfig::reference(),
            dm_variant: DmVariant::Concatenation,
            decoder_cavss_depth: 2,
        }
    }

    /// Number of 3x3 convolution applications on one image's path, used to
    /// depth-match the convolutional baseline.
    pub fn conv_layer_count(&self) -> usize {
        2 + self.encoder.depths.iter().sum::<usize>() + 4 + 4 * self.decoder_cavss_depth
    }
}

/// Anything that maps an image pair to change logits [B,2,H,W]. The
/// receptive-field tooling is generic over this.
pub trait ChangeModel<S: Scalar> {
    fn logits(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        img_a: Tensor,
        img_b: Tensor,
    ) -> Result<Tensor>;
}

pub struct McdModel {
    pub encoder: SiameseEncoder,
    pub dms: Vec<DifferenceModule>,
    pub decoder: MaskDecoder,
    pub config: ModelConfig,
}

impl McdModel {
    pub fn build<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha20Rng,
        config: &ModelConfig,
    ) -> Result<Self> {
        if config.decoder_cavss_depth == 0 {
            return Err(McdError::Config("decoder_cavss_depth must be >= 1".into()));
        }
        let encoder = SiameseEncoder::register(store, rng, "encoder", &config.encoder)?;
        let dms = (0..4)
            .map(|i| {
                DifferenceModule::register(
                    store,
                    rng,
                    &format!("dm{i}"),
                    config.encoder.stage_channels(i),
                    config.encoder.state,
                    config.dm_variant,
                )
            })
            .collect();
        let decoder = MaskDecoder::register(
            store,
            rng,
            "decoder",
            config.encoder.c1,
            config.decoder_cavss_depth,
            config.encoder.expand,
            config.encoder.state,
        );
        Ok(McdModel {
            encoder,
            dms,
            decoder,
            config: config.clone(),
        })
    }

    /// Cross-entropy training loss for a labeled pair batch.
    pub fn loss<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        img_a: Tensor,
        img_b: Tensor,
        labels: &[u8],
    ) -> Result<Tensor> {
        let logits = self.logits(g, store, img_a, img_b)?;
        g.cross_entropy_2class(logits, labels)
    }
}

impl<S: Scalar> ChangeModel<S> for McdModel {
    fn logits(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        img_a: Tensor,
        img_b: Tensor,
    ) -> Result<Tensor> {
        let (fa, fb) = self.encoder.encode_pair(g, store, img_a, img_b)?;
        let mut fused = Vec::with_capacity(4);
        for i in 0..4 {
            fused.push(self.dms[i].forward(g, store, fa.levels[i], fb.levels[i])?);
        }
        self.decoder
            .decode(g, store, &[fused[0], fused[1], fused[2], fused[3]])
    }
}

/// Stack of stride-1 3x3 convolutions over the channel-concatenated pair,
/// then a 1x1 classifier. Its receptive field grows by 2 pixels per layer,
/// which makes it the reference point for receptive-field comparisons.
pub struct ConvBaseline {
    convs: Vec<ConvParams>,
    classifier: ConvParams,
    pub depth: usize,
}

impl ConvBaseline {
    pub fn build<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha20Rng,
        prefix: &str,
        depth: usize,
        width: usize,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(McdError::Config("conv baseline depth must be >= 1".into()));
        }
        let mut convs = Vec::new();
        let mut c_in = 6;
        for i in 0..depth {
            convs.push(register_conv(
                store,
                rng,
                &format!("{prefix}.conv{i}"),
                c_in,
                width,
                3,
                1,
                1,
                1,
            ));
            c_in = width;
        }
        let classifier = register_conv(store, rng, &format!("{prefix}.classifier"), c_in, 2, 1, 1, 0, 1);
        Ok(ConvBaseline {
            convs,
            classifier,
            depth,
        })
    }
}

impl<S: Scalar> ChangeModel<S> for ConvBaseline {
    fn logits(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        img_a: Tensor,
        img_b: Tensor,
    ) -> Result<Tensor> {
        let mut x = g.concat(&[img_a, img_b], 1)?;
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv_fwd(g, store, x, conv)?;
            if i + 1 < self.convs.len() {
                x = g.silu(x);
            }
        }
        conv_fwd(g, store, x, &self.classifier)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::predict_mask;
    use crate::gradcheck::{check, Elements, FLOOR_COMPOSITE};
    use rand::SeedableRng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                c1: 4,
                depths: [1, 1, 1, 1],
                state: 2,
                expand: 2,
            },
            dm_variant: DmVariant::Concatenation,
            decoder_cavss_depth: 1,
        }
    }

    fn pair_data(hw: usize) -> (Vec<f32>, Vec<f32>) {
        let a: Vec<f32> = (0..3 * hw * hw).map(|i| ((i % 37) as f32) / 37.0).collect();
        let b: Vec<f32> = (0..3 * hw * hw).map(|i| ((i % 29) as f32) / 29.0).collect();
        (a, b)
    }

    #[test]
    fn end_to_end_logit_shape() {
        let mut store: ParamStore<f32> = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let model = McdModel::build(&mut store, &mut rng, &tiny_config()).unwrap();
        let mut g: Graph<f32> = Graph::new();
        let (da, db) = pair_data(64);
        let a = g.leaf(da, &[1, 3, 64, 64], false).unwrap();
        let b = g.leaf(db, &[1, 3, 64, 64], false).unwrap();
        let logits = model.logits(&mut g, &store, a, b).unwrap();
        assert_eq!(g.shape(logits), &[1, 2, 64, 64]);
        let mask = predict_mask(&g, logits).unwrap();
        assert_eq!(mask.len(), 64 * 64);
    }

    #[test]
    fn loss_is_finite_and_positive() {
        let mut store: ParamStore<f32> = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let model = McdModel::build(&mut store, &mut rng, &tiny_config()).unwrap();
        let mut g: Graph<f32> = Graph::new();
        let (da, db) = pair_data(32);
        let a = g.leaf(da, &[1, 3, 32, 32], false).unwrap();
        let b = g.leaf(db, &[1, 3, 32, 32], false).unwrap();
        let labels = vec![0u8; 32 * 32];
        let loss = model.loss(&mut g, &store, a, b, &labels).unwrap();
        let v = g.item(loss);
        assert!(v.is_finite() && v > 0.0);
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences_sampled() {
        // smallest full model; sampled elements keep this under test budget
        let config = ModelConfig {
            encoder: EncoderConfig {
                c1: 2,
                depths: [1, 1, 1, 1],
                state: 2,
                expand: 2,
            },
            dm_variant: DmVariant::Concatenation,
            decoder_cavss_depth: 1,
        };
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let model = McdModel::build(&mut store, &mut rng, &config).unwrap();
        let labels: Vec<u8> = (0..32 * 32).map(|i| (i % 5 == 0) as u8).collect();
        let da: Vec<f64> = (0..3 * 32 * 32).map(|i| ((i % 37) as f64) / 37.0).collect();
        let db: Vec<f64> = (0..3 * 32 * 32).map(|i| ((i % 29) as f64) / 29.0).collect();
        let report = check("mcd-e2e", &mut store, Elements::Sample(2), 1e-5, FLOOR_COMPOSITE, |g, s| {
            let a = g.leaf(da.clone(), &[1, 3, 32, 32], false)?;
            let b = g.leaf(db.clone(), &[1, 3, 32, 32], false)?;
            model.loss(g, s, a, b, &labels)
        })
        .unwrap();
        assert!(
            report.passes(1e-3),
            "max rel err {:e} at {:?}",
            report.max_rel_err,
            report.worst
        );
    }

    #[test]
    fn conv_baseline_shapes() {
        let mut store: ParamStore<f32> = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let base = ConvBaseline::build(&mut store, &mut rng, "base", 3, 8).unwrap();
        let mut g: Graph<f32> = Graph::new();
        let (da, db) = pair_data(32);
        let a = g.leaf(da, &[1, 3, 32, 32], false).unwrap();
        let b = g.leaf(db, &[1, 3, 32, 32], false).unwrap();
        let logits = base.logits(&mut g, &store, a, b).unwrap();
        assert_eq!(g.shape(logits), &[1, 2, 32, 32]);
    }
}
