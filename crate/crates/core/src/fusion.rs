//! Temporal fusion of two pyramids, multi-scale aggregation and the coarse
//! change head whose stride-2 logits guide the attention modules.

use candle_core::Tensor;

use crate::backbone::FeaturePyramid;
use crate::error::{Error, Result};
use crate::nn::{resize_bilinear, sigmoid, Builder, Conv2d, ConvBlock, Init};

/// Single-channel change logits (B, 1, h, w) at `stride` relative to the input.
#[derive(Debug, Clone)]
pub struct ChangeMap {
    pub logits: Tensor,
    pub stride: usize,
}

impl ChangeMap {
    pub fn probabilities(&self) -> Result<Tensor> {
        sigmoid(&self.logits)
    }
}

/// Temporal-fused levels 2..=5 at strides 2, 4, 8, 16.
#[derive(Debug, Clone)]
pub struct FusedPyramid {
    pub levels: [Tensor; 4],
}

impl FusedPyramid {
    /// Fused level by pyramid index (2..=5).
    pub fn level(&self, k: usize) -> &Tensor {
        &self.levels[k - 2]
    }
}

/// Per-level concat → conv(3×3)-BN-ReLU back to the level's width.
#[derive(Debug, Clone)]
pub struct TemporalFusion {
    blocks: Vec<ConvBlock>,
}

impl TemporalFusion {
    pub fn new(b: &mut Builder, level_channels: [usize; 5]) -> Result<Self> {
        let blocks = (2..=5)
            .map(|k| {
                let c = level_channels[k - 1];
                b.scope(&format!("level{k}"), |b| ConvBlock::new(b, 2 * c, c, 3))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { blocks })
    }

    pub fn fuse(&self, a: &FeaturePyramid, b: &FeaturePyramid, train: bool) -> Result<FusedPyramid> {
        let mut out = Vec::with_capacity(4);
        for (i, block) in self.blocks.iter().enumerate() {
            let k = i + 2;
            let (fa, fb) = (a.level(k), b.level(k));
            if fa.dims() != fb.dims() {
                return Err(Error::shape(format!(
                    "pyramid level {k} differs between dates: {:?} vs {:?}",
                    fa.dims(),
                    fb.dims()
                )));
            }
            let cat = Tensor::cat(&[fa, fb], 1)?;
            out.push(block.forward_t(&cat, train)?);
        }
        Ok(FusedPyramid {
            levels: out.try_into().expect("four fused levels"),
        })
    }
}

#[derive(Debug, Clone)]
pub struct AggregateOutput {
    /// (B, C_agg, H/2, W/2)
    pub feature: Tensor,
    /// Coarse logits at stride 2, kept as the guide source.
    pub coarse_stride2: Tensor,
    /// Coarse logits upsampled to stride 1 for supervision.
    pub coarse: ChangeMap,
}

/// Upsample fused levels 3..=5 to level 2, concatenate, refine, and predict.
#[derive(Debug, Clone)]
pub struct Aggregator {
    pub block: ConvBlock,
    pub head: Conv2d,
}

impl Aggregator {
    pub fn new(b: &mut Builder, level_channels: [usize; 5], out_channels: usize) -> Result<Self> {
        let concat: usize = level_channels[1..].iter().sum();
        let block = b.scope("aggregate", |b| ConvBlock::new(b, concat, out_channels, 3))?;
        let head = b.scope("coarse_head", |b| {
            Conv2d::new(b, out_channels, 1, 1, Init::UniformFanIn)
        })?;
        Ok(Self { block, head })
    }

    pub fn forward(&self, fused: &FusedPyramid, train: bool) -> Result<AggregateOutput> {
        let (_, _, h2, w2) = fused.level(2).dims4()?;
        let mut parts = vec![fused.level(2).clone()];
        for k in 3..=5 {
            parts.push(resize_bilinear(fused.level(k), h2, w2)?);
        }
        let cat = Tensor::cat(&parts, 1)?;
        let feature = self.block.forward_t(&cat, train)?;
        let coarse_stride2 = self.head.forward(&feature)?;
        let logits = resize_bilinear(&coarse_stride2, 2 * h2, 2 * w2)?;
        Ok(AggregateOutput {
            feature,
            coarse_stride2,
            coarse: ChangeMap { logits, stride: 1 },
        })
    }
}

/// Sigmoid of the stride-2 coarse logits, bilinearly resampled to the
/// resolution of pyramid stride `target_stride` (4, 8 or 16).
pub fn make_guide(coarse_stride2: &Tensor, target_stride: usize) -> Result<Tensor> {
    if !matches!(target_stride, 4 | 8 | 16) {
        return Err(Error::Config(format!(
            "guide stride must be 4, 8 or 16, got {target_stride}"
        )));
    }
    let (_, c, h2, w2) = coarse_stride2.dims4()?;
    if c != 1 {
        return Err(Error::shape(format!("guide source must have 1 channel, got {c}")));
    }
    let factor = target_stride / 2;
    let prob = sigmoid(coarse_stride2)?;
    resize_bilinear(&prob, h2 / factor, w2 / factor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn sigmoid(v: f64) -> f64 {
        1.0 / (1.0 + (-v).exp())
    }

    #[test]
    fn zero_logits_give_half_guides() {
        let z = Tensor::zeros((2, 1, 32, 32), DType::F64, &Device::Cpu).unwrap();
        for s in [4, 8, 16] {
            let g = make_guide(&z, s).unwrap();
            assert_eq!(g.dims(), &[2, 1, 64 / s, 64 / s]);
            let v = g.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            assert!(v.iter().all(|x| (x - 0.5).abs() < 1e-15));
        }
    }

    #[test]
    fn large_logits_give_unit_guides() {
        let z = Tensor::full(30.0f64, (1, 1, 16, 16), &Device::Cpu).unwrap();
        let g = make_guide(&z, 8)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        assert!(g.iter().all(|x| *x > 1.0 - 1e-12 && *x <= 1.0));
    }

    #[test]
    fn checkerboard_halving_averages_sigmoids() {
        // 4×4 stride-2 map → stride 4 guide (2×2): each output is the mean of a 2×2 cell.
        let vals: Vec<f64> = (0..16)
            .map(|i| if (i / 4 + i % 4) % 2 == 0 { 3.0 } else { -1.0 })
            .collect();
        let z = Tensor::from_vec(vals.clone(), (1, 1, 4, 4), &Device::Cpu).unwrap();
        let g = make_guide(&z, 4)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        let expected = (sigmoid(3.0) + sigmoid(-1.0)) / 2.0;
        assert_eq!(g.len(), 4);
        for v in g {
            assert!((v - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_unsupported_stride() {
        let z = Tensor::zeros((1, 1, 8, 8), DType::F64, &Device::Cpu).unwrap();
        assert!(make_guide(&z, 2).is_err());
        assert!(make_guide(&z, 32).is_err());
    }

    #[test]
    fn change_map_probabilities_are_sigmoid() {
        let z = Tensor::from_vec(vec![-2.0f64, 0.0, 5.0], (1, 1, 1, 3), &Device::Cpu).unwrap();
        let m = ChangeMap { logits: z, stride: 1 };
        let p = m
            .probabilities()
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        for (a, x) in p.iter().zip([-2.0, 0.0, 5.0]) {
            assert!((a - sigmoid(x)).abs() < 1e-15);
        }
    }
}
