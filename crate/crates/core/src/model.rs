//! The complete network: shared backbone → temporal fusion → aggregate and
//! coarse head → three change guide modules → top-down decoder.

use std::path::PathBuf;

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{load_pretrained, Backbone, BackboneConfig, FeaturePyramid, LEVEL_CHANNELS};
use crate::cgm::{ChangeGuideModule, COMPRESSION};
use crate::decoder::{Decoder, DecoderState};
use crate::error::{Error, Result};
use crate::fusion::{make_guide, AggregateOutput, Aggregator, ChangeMap, FusedPyramid, TemporalFusion};
use crate::nn::{Builder, ParamStore};

/// Pyramid levels refined by a change guide module.
pub const CGM_LEVELS: [usize; 3] = [3, 4, 5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Every channel count is divided by this; 1 is the published width.
    pub width_divisor: usize,
    pub backbone: BackboneConfig,
    pub pretrained_weights: Option<PathBuf>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width_divisor: 1,
            backbone: BackboneConfig::default(),
            pretrained_weights: None,
        }
    }
}

impl ModelConfig {
    /// Randomly initialized model at `1/width_divisor` of the published width.
    pub fn scratch(width_divisor: usize) -> Self {
        Self {
            width_divisor,
            backbone: BackboneConfig {
                pretrained: false,
                frozen: false,
            },
            pretrained_weights: None,
        }
    }

    pub fn level_channels(&self) -> [usize; 5] {
        LEVEL_CHANNELS.map(|c| c / self.width_divisor)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.width_divisor;
        if d == 0 || 64 % d != 0 {
            return Err(Error::Config(format!("width divisor {d} must divide 64")));
        }
        for k in CGM_LEVELS {
            let c = self.level_channels()[k - 1];
            if !c.is_multiple_of(COMPRESSION) {
                return Err(Error::Config(format!(
                    "width divisor {d} leaves {c} channels at level {k}, not a multiple of {COMPRESSION}"
                )));
            }
        }
        if self.backbone.pretrained && d != 1 {
            return Err(Error::Config("pretrained backbone requires width divisor 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub coarse: ChangeMap,
    pub final_map: ChangeMap,
}

/// Every intermediate of one forward pass, for inspection and shape checks.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub pyramid_a: FeaturePyramid,
    pub pyramid_b: FeaturePyramid,
    pub fused: FusedPyramid,
    pub aggregate: AggregateOutput,
    pub guides: [Tensor; 3],
    pub cgm: [Tensor; 3],
    pub decoder: DecoderState,
}

impl ForwardTrace {
    pub fn output(&self) -> ModelOutput {
        ModelOutput {
            coarse: self.aggregate.coarse.clone(),
            final_map: self.decoder.final_logits.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct HcgmNet {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub temporal: TemporalFusion,
    pub aggregator: Aggregator,
    pub cgms: [ChangeGuideModule; 3],
    pub decoder: Decoder,
}

impl HcgmNet {
    /// Build the network and its parameter registry. Randomly initialized
    /// parts are drawn from `seed`; a pretrained backbone is then loaded
    /// from `config.pretrained_weights` and fails loudly if unavailable.
    pub fn build(config: &ModelConfig, seed: u64, dtype: DType) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let channels = config.level_channels();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = {
            let mut b = Builder::new(&mut store, &mut rng, dtype);
            let backbone = Backbone::new(&mut b, config.width_divisor)?;
            let (temporal, aggregator) = b.scope("fusion", |b| {
                Ok((
                    TemporalFusion::new(b, channels)?,
                    Aggregator::new(b, channels, LEVEL_CHANNELS[4] / config.width_divisor)?,
                ))
            })?;
            let cgms = CGM_LEVELS
                .iter()
                .map(|&k| b.scope(&format!("cgm{k}"), |b| ChangeGuideModule::new(b, channels[k - 1])))
                .collect::<Result<Vec<_>>>()?;
            let decoder = b.scope("decoder", |b| Decoder::new(b, channels))?;
            Self {
                config: config.clone(),
                backbone,
                temporal,
                aggregator,
                cgms: cgms.try_into().expect("three modules"),
                decoder,
            }
        };
        if config.backbone.pretrained {
            load_pretrained(&store, config.pretrained_weights.as_deref())?;
        }
        if config.backbone.frozen {
            store.freeze("backbone.");
        }
        Ok((net, store))
    }

    pub fn forward_traced(&self, image_a: &Tensor, image_b: &Tensor, train: bool) -> Result<ForwardTrace> {
        if image_a.dims() != image_b.dims() {
            return Err(Error::shape(format!(
                "temporal images differ: {:?} vs {:?}",
                image_a.dims(),
                image_b.dims()
            )));
        }
        let pyramid_a = self.backbone.extract(image_a, train)?;
        let pyramid_b = self.backbone.extract(image_b, train)?;
        let fused = self.temporal.fuse(&pyramid_a, &pyramid_b, train)?;
        let aggregate = self.aggregator.forward(&fused, train)?;
        let mut guides = Vec::with_capacity(3);
        let mut refined = Vec::with_capacity(3);
        for (cgm, &k) in self.cgms.iter().zip(CGM_LEVELS.iter()) {
            let guide = make_guide(&aggregate.coarse_stride2, 1 << (k - 1))?;
            refined.push(cgm.forward(fused.level(k), &guide, train)?);
            guides.push(guide);
        }
        let decoder = self
            .decoder
            .decode(&refined[0], &refined[1], &refined[2], fused.level(2), train)?;
        Ok(ForwardTrace {
            pyramid_a,
            pyramid_b,
            fused,
            aggregate,
            guides: guides.try_into().expect("three guides"),
            cgm: refined.try_into().expect("three outputs"),
            decoder,
        })
    }

    pub fn forward(&self, image_a: &Tensor, image_b: &Tensor, train: bool) -> Result<ModelOutput> {
        Ok(self.forward_traced(image_a, image_b, train)?.output())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn rejects_widths_that_break_attention() {
        assert!(ModelConfig::scratch(64).validate().is_err());
        assert!(ModelConfig::scratch(3).validate().is_err());
        assert!(ModelConfig::scratch(32).validate().is_ok());
        let mut c = ModelConfig::scratch(8);
        c.backbone.pretrained = true;
        assert!(c.validate().is_err());
    }

    #[test]
    fn pretrained_without_weights_fails() {
        let err = HcgmNet::build(&ModelConfig::default(), 0, DType::F32).unwrap_err();
        assert!(matches!(err, Error::PretrainedUnavailable(_)));
    }

    #[test]
    fn registry_prefixes() {
        let (_, store) = HcgmNet::build(&ModelConfig::scratch(16), 0, DType::F32).unwrap();
        let names: Vec<&String> = store.names().collect();
        for prefix in [
            "backbone.block1.",
            "fusion.level2.",
            "fusion.level5.",
            "fusion.aggregate.",
            "fusion.coarse_head.",
            "cgm3.",
            "cgm4.",
            "cgm5.",
            "decoder.",
        ] {
            assert!(names.iter().any(|n| n.starts_with(prefix)), "{prefix}");
        }
    }

    #[test]
    fn frozen_backbone_has_no_trainable_entries() {
        let mut c = ModelConfig::scratch(16);
        c.backbone.frozen = true;
        let (_, store) = HcgmNet::build(&c, 0, DType::F32).unwrap();
        assert_eq!(store.count_trainable("backbone."), 0);
        assert!(store.count_trainable("cgm3.") > 0);
    }

    #[test]
    fn small_forward_shapes_and_batch() {
        let (net, _) = HcgmNet::build(&ModelConfig::scratch(16), 1, DType::F32).unwrap();
        let x = Tensor::zeros((3, 3, 32, 48), DType::F32, &Device::Cpu).unwrap();
        let out = net.forward(&x, &x, false).unwrap();
        assert_eq!(out.coarse.logits.dims(), &[3, 1, 32, 48]);
        assert_eq!(out.final_map.logits.dims(), &[3, 1, 32, 48]);
    }
}
