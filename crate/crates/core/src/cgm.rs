//! Change guide module: a feature map is fused with a change-probability
//! guide, passed through channel-compressed spatial self-attention, and
//! added back to the input.
//!
//! ```text
//! X' = ReLU(BN(conv3x3([X ; g])))
//! Q, K, V = W_q X', W_k X', W_v X'        (C → C/8, 1×1)
//! A = softmax(Q Kᵀ / sqrt(C/8)) V
//! Y = X + W_o A                             (C/8 → C, 1×1)
//! ```
//!
//! `W_o` starts at zero so a freshly built module is the identity.

use candle_core::{Tensor, D};

use crate::error::{Error, Result};
use crate::nn::{softmax_last_dim, Builder, Conv2d, ConvBlock, Init};

/// Channel compression applied to queries, keys and values.
pub const COMPRESSION: usize = 8;

#[derive(Debug, Clone)]
pub struct AttentionProjections {
    pub q: Conv2d,
    pub k: Conv2d,
    pub v: Conv2d,
    pub o: Conv2d,
    channels: usize,
    d_head: usize,
}

impl AttentionProjections {
    pub fn new(b: &mut Builder, channels: usize) -> Result<Self> {
        if channels == 0 || !channels.is_multiple_of(COMPRESSION) {
            return Err(Error::Config(format!(
                "attention channels must be a positive multiple of {COMPRESSION}, got {channels}"
            )));
        }
        let d_head = channels / COMPRESSION;
        Ok(Self {
            q: b.scope("q", |b| Conv2d::new(b, channels, d_head, 1, Init::UniformFanIn))?,
            k: b.scope("k", |b| Conv2d::new(b, channels, d_head, 1, Init::UniformFanIn))?,
            v: b.scope("v", |b| Conv2d::new(b, channels, d_head, 1, Init::UniformFanIn))?,
            o: b.scope("o", |b| Conv2d::new(b, d_head, channels, 1, Init::Zeros))?,
            channels,
            d_head,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn d_head(&self) -> usize {
        self.d_head
    }

    /// Weight count (biases excluded) of the Q, K and V projections.
    pub fn qkv_weight_count(&self) -> usize {
        [&self.q, &self.k, &self.v].iter().map(|c| c.weight.elem_count()).sum()
    }

    /// Self-attention over the h·w spatial tokens. Returns the output
    /// (B, C, h, w) and the attention weights (B, N, N).
    pub fn forward_with_weights(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (bsz, c, h, w) = x.dims4()?;
        if c != self.channels {
            return Err(Error::shape(format!(
                "attention expects {} channels, got {c}",
                self.channels
            )));
        }
        let n = h * w;
        let tokens =
            |t: Tensor| -> Result<Tensor> { Ok(t.reshape((bsz, self.d_head, n))?.transpose(1, 2)?.contiguous()?) };
        let q = tokens(self.q.forward(x)?)?;
        let k = tokens(self.k.forward(x)?)?;
        let v = tokens(self.v.forward(x)?)?;
        let scale = 1.0 / (self.d_head as f64).sqrt();
        let scores = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
        let weights = softmax_last_dim(&scores)?;
        let attended = weights.matmul(&v)?;
        let attended = attended
            .transpose(1, 2)?
            .contiguous()?
            .reshape((bsz, self.d_head, h, w))?;
        Ok((self.o.forward(&attended)?, weights))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_weights(x)?.0)
    }
}

#[derive(Debug, Clone)]
pub struct ChangeGuideModule {
    pub fuse: ConvBlock,
    pub attention: AttentionProjections,
}

impl ChangeGuideModule {
    pub fn new(b: &mut Builder, channels: usize) -> Result<Self> {
        let attention = AttentionProjections::new(b, channels)?;
        let fuse = b.scope("fuse", |b| ConvBlock::new(b, channels + 1, channels, 3))?;
        Ok(Self { fuse, attention })
    }

    pub fn channels(&self) -> usize {
        self.attention.channels()
    }

    /// Concatenate the guide as an extra channel and convolve back to C.
    pub fn guide_fuse(&self, x: &Tensor, guide: &Tensor, train: bool) -> Result<Tensor> {
        let (bx, _, hx, wx) = x.dims4()?;
        let (bg, cg, hg, wg) = guide.dims4()?;
        if (bx, hx, wx) != (bg, hg, wg) || cg != 1 {
            return Err(Error::shape(format!(
                "guide {:?} does not match features {:?}",
                guide.dims(),
                x.dims()
            )));
        }
        let cat = Tensor::cat(&[x, guide], 1)?;
        self.fuse.forward_t(&cat, train)
    }

    pub fn forward(&self, x: &Tensor, guide: &Tensor, train: bool) -> Result<Tensor> {
        let fused = self.guide_fuse(x, guide, train)?;
        Ok((x + self.attention.forward(&fused)?)?)
    }
}

/// Maximum deviation of any attention row sum from one.
pub fn row_sum_error(weights: &Tensor) -> Result<f64> {
    let sums = weights.sum(D::Minus1)?.to_dtype(candle_core::DType::F64)?;
    let dev = sums.affine(1.0, -1.0)?.abs()?.flatten_all()?.max(0)?;
    Ok(dev.to_scalar::<f64>()?)
}
