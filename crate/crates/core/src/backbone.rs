//! Siamese VGG-16-BN trunk sliced into five hierarchical blocks.
//!
//! The trunk follows the standard 43-entry VGG-16-BN feature list
//! (13 × conv/bn/relu plus the four interior max-pools). Block `k` covers
//! the index range in [`BLOCK_RANGES`]; every block ends on a ReLU and every
//! block after the first starts with its max-pool. Parameters are registered
//! as `backbone.block<k>.conv<i>.*` / `backbone.block<k>.bn<i>.*` where `i`
//! is the index in the feature list, so torchvision weights map one-to-one.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{max_pool2x2, BatchNorm2d, Builder, Conv2d, Init, ParamStore};

/// Output channels of the 13 convolutions, `0` marking a max-pool.
const VGG16_CFG: [usize; 17] = [
    64, 64, 0, 128, 128, 0, 256, 256, 256, 0, 512, 512, 512, 0, 512, 512, 512,
];

/// Inclusive layer-index ranges of the five blocks.
pub const BLOCK_RANGES: [(usize, usize); 5] = [(0, 5), (6, 12), (13, 22), (23, 32), (33, 42)];

/// Channel count and stride of each pyramid level at full width.
pub const LEVEL_CHANNELS: [usize; 5] = [64, 128, 256, 512, 512];
pub const LEVEL_STRIDES: [usize; 5] = [1, 2, 4, 8, 16];

/// Required divisibility of input height and width.
pub const INPUT_MULTIPLE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv { in_channels: usize, out_channels: usize },
    BatchNorm { channels: usize },
    Relu,
    MaxPool,
}

/// The 43-entry feature list (final pool excluded) with every channel count
/// divided by `width_divisor`.
pub fn vgg16_bn_layers(width_divisor: usize) -> Vec<LayerSpec> {
    let mut layers = Vec::with_capacity(43);
    let mut c_in = 3;
    for &c in VGG16_CFG.iter() {
        if c == 0 {
            layers.push(LayerSpec::MaxPool);
        } else {
            let c = c / width_divisor;
            layers.push(LayerSpec::Conv {
                in_channels: c_in,
                out_channels: c,
            });
            layers.push(LayerSpec::BatchNorm { channels: c });
            layers.push(LayerSpec::Relu);
            c_in = c;
        }
    }
    layers
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub pretrained: bool,
    pub frozen: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            pretrained: true,
            frozen: false,
        }
    }
}

/// The five per-level feature maps, each (B, C, H/s, W/s).
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: [Tensor; 5],
}

impl FeaturePyramid {
    /// Level by 1-based index.
    pub fn level(&self, k: usize) -> &Tensor {
        &self.levels[k - 1]
    }
}

#[derive(Debug, Clone)]
enum Layer {
    Conv(Conv2d),
    BatchNorm(BatchNorm2d),
    Relu,
    MaxPool,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    blocks: Vec<Vec<Layer>>,
    channels: [usize; 5],
}

impl Backbone {
    /// Register the trunk under `backbone.*` with fresh (Kaiming) weights.
    /// Pretrained weights are applied afterwards with [`load_pretrained`].
    pub fn new(b: &mut Builder, width_divisor: usize) -> Result<Self> {
        if width_divisor == 0 || 64 % width_divisor != 0 {
            return Err(Error::Config(format!("width divisor {width_divisor} must divide 64")));
        }
        let specs = vgg16_bn_layers(width_divisor);
        debug_assert_eq!(specs.len(), 43);
        let blocks = b.scope("backbone", |b| {
            BLOCK_RANGES
                .iter()
                .enumerate()
                .map(|(k, &(start, end))| {
                    b.scope(&format!("block{}", k + 1), |b| {
                        (start..=end)
                            .map(|i| {
                                Ok(match specs[i] {
                                    LayerSpec::Conv {
                                        in_channels,
                                        out_channels,
                                    } => Layer::Conv(b.scope(&format!("conv{i}"), |b| {
                                        Conv2d::new(b, in_channels, out_channels, 3, Init::KaimingFanOut)
                                    })?),
                                    LayerSpec::BatchNorm { channels } => {
                                        Layer::BatchNorm(b.scope(&format!("bn{i}"), |b| BatchNorm2d::new(b, channels))?)
                                    }
                                    LayerSpec::Relu => Layer::Relu,
                                    LayerSpec::MaxPool => Layer::MaxPool,
                                })
                            })
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect::<Result<Vec<_>>>()
        })?;
        Ok(Self {
            blocks,
            channels: LEVEL_CHANNELS.map(|c| c / width_divisor),
        })
    }

    pub fn channels(&self) -> [usize; 5] {
        self.channels
    }

    /// Run both blocks-in-sequence and collect the five block outputs.
    pub fn extract(&self, image: &Tensor, train: bool) -> Result<FeaturePyramid> {
        let (_, c, h, w) = image.dims4()?;
        if c != 3 {
            return Err(Error::shape(format!("backbone expects 3 input channels, got {c}")));
        }
        if h % INPUT_MULTIPLE != 0 || w % INPUT_MULTIPLE != 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!(
                "input size {h}×{w} must be a positive multiple of {INPUT_MULTIPLE} in both dimensions"
            )));
        }
        let mut x = image.clone();
        let mut levels = Vec::with_capacity(5);
        for block in &self.blocks {
            for layer in block {
                x = match layer {
                    Layer::Conv(conv) => conv.forward(&x)?,
                    Layer::BatchNorm(bn) => bn.forward_t(&x, train)?,
                    Layer::Relu => x.relu()?,
                    Layer::MaxPool => max_pool2x2(&x)?,
                };
            }
            levels.push(x.clone());
        }
        let levels: [Tensor; 5] = levels.try_into().expect("five blocks");
        Ok(FeaturePyramid { levels })
    }
}

/// Canonical registry name for a torchvision `features.<i>.<leaf>` entry.
fn registry_name(index: usize, leaf: &str) -> Option<String> {
    let block = BLOCK_RANGES.iter().position(|&(s, e)| (s..=e).contains(&index))? + 1;
    let kind = match vgg16_bn_layers(1)[index] {
        LayerSpec::Conv { .. } => "conv",
        LayerSpec::BatchNorm { .. } => "bn",
        _ => return None,
    };
    Some(format!("backbone.block{block}.{kind}{index}.{leaf}"))
}

/// Copy published VGG-16-BN classification weights (a safetensors file with
/// torchvision `features.<i>.*` keys) into the backbone entries of `store`.
/// Missing files or missing tensors are errors; nothing falls back to random.
pub fn load_pretrained(store: &ParamStore, path: Option<&Path>) -> Result<()> {
    let path: PathBuf = path
        .ok_or_else(|| Error::PretrainedUnavailable("no weights file configured".into()))?
        .to_path_buf();
    if !path.is_file() {
        return Err(Error::PretrainedUnavailable(format!(
            "{} does not exist",
            path.display()
        )));
    }
    let raw = candle_core::safetensors::load(&path, &Device::Cpu)
        .map_err(|e| Error::PretrainedUnavailable(format!("{}: {e}", path.display())))?;
    let mut mapped = BTreeMap::new();
    for (key, tensor) in raw {
        let Some(rest) = key.strip_prefix("features.") else {
            continue;
        };
        let Some((idx, leaf)) = rest.split_once('.') else {
            continue;
        };
        if leaf == "num_batches_tracked" {
            continue;
        }
        let Ok(idx) = idx.parse::<usize>() else { continue };
        if let Some(name) = registry_name(idx, leaf) {
            mapped.insert(name, tensor);
        }
    }
    let mut problems = Vec::new();
    for (name, p) in store.iter().filter(|(n, _)| n.starts_with("backbone.")) {
        match mapped.get(name) {
            None => problems.push(format!("missing `{name}`")),
            Some(t) if t.dims() != p.var.dims() => problems.push(format!(
                "shape of `{name}`: expected {:?}, found {:?}",
                p.var.dims(),
                t.dims()
            )),
            Some(t) => p.var.set(&t.to_dtype(p.var.dtype())?)?,
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::PretrainedUnavailable(problems.join("; ")))
    }
}
