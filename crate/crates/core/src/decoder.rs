//! Top-down merge of the three attention outputs into the final prediction.

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};
use crate::fusion::ChangeMap;
use crate::metrics::BinaryMap;
use crate::nn::{resize_bilinear, Builder, Conv2d, ConvBlock, Init};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct DecoderState {
    pub d5: Tensor,
    pub d4: Tensor,
    pub d3: Tensor,
    pub head: Tensor,
    pub final_logits: ChangeMap,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub d4: ConvBlock,
    pub d3: ConvBlock,
    pub head: ConvBlock,
    pub final_head: Conv2d,
}

fn up2(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    resize_bilinear(x, 2 * h, 2 * w)
}

impl Decoder {
    /// `level_channels` is the backbone schedule; decoder widths follow it
    /// (512, 512, 256, 128 at full width).
    pub fn new(b: &mut Builder, level_channels: [usize; 5]) -> Result<Self> {
        let [_, c2, c3, c4, c5] = level_channels;
        Ok(Self {
            d4: b.scope("d4", |b| ConvBlock::new(b, c4 + c5, c4, 3))?,
            d3: b.scope("d3", |b| ConvBlock::new(b, c3 + c4, c3, 3))?,
            head: b.scope("head", |b| ConvBlock::new(b, c2 + c3, c2, 3))?,
            final_head: b.scope("final_head", |b| Conv2d::new(b, c2, 1, 1, Init::UniformFanIn))?,
        })
    }

    pub fn decode(
        &self,
        cgm3: &Tensor,
        cgm4: &Tensor,
        cgm5: &Tensor,
        fused2: &Tensor,
        train: bool,
    ) -> Result<DecoderState> {
        let check = |skip: &Tensor, deeper: &Tensor, what: &str| -> Result<()> {
            let (bs, _, hs, ws) = skip.dims4()?;
            let (bd, _, hd, wd) = deeper.dims4()?;
            if bs != bd || hs != 2 * hd || ws != 2 * wd {
                return Err(Error::shape(format!(
                    "{what}: skip {:?} is not twice the size of {:?}",
                    skip.dims(),
                    deeper.dims()
                )));
            }
            Ok(())
        };
        let d5 = cgm5.clone();
        check(cgm4, &d5, "d4")?;
        let d4 = self.d4.forward_t(&Tensor::cat(&[cgm4, &up2(&d5)?], 1)?, train)?;
        check(cgm3, &d4, "d3")?;
        let d3 = self.d3.forward_t(&Tensor::cat(&[cgm3, &up2(&d4)?], 1)?, train)?;
        check(fused2, &d3, "head")?;
        let head = self.head.forward_t(&Tensor::cat(&[fused2, &up2(&d3)?], 1)?, train)?;
        let logits = up2(&self.final_head.forward(&head)?)?;
        Ok(DecoderState {
            d5,
            d4,
            d3,
            head,
            final_logits: ChangeMap { logits, stride: 1 },
        })
    }
}

/// Threshold probabilities: a pixel is changed iff sigmoid(logit) > threshold.
/// Returns one map per batch element.
pub fn predict_binary(map: &ChangeMap, threshold: f64) -> Result<Vec<BinaryMap>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("threshold must lie in (0, 1), got {threshold}")));
    }
    let (b, c, h, w) = map.logits.dims4()?;
    if c != 1 {
        return Err(Error::shape(format!("change map must have 1 channel, got {c}")));
    }
    let logits = map.logits.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Ok(logits
        .chunks(h * w)
        .take(b)
        .map(|chunk| BinaryMap {
            height: h,
            width: w,
            data: chunk
                .iter()
                .map(|&z| u8::from(1.0 / (1.0 + (-z).exp()) > threshold))
                .collect(),
        })
        .collect())
}
