//! ResNet-18-style extractor with five stages of basic blocks, producing
//! features at 1/8, 1/16 and 1/32 of the input resolution.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{EdmError, Result};
use crate::nn::{BatchNorm2d, Conv2d, Session};
use crate::params::ParamStore;
use crate::tensor::Element;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Widths of the stages at scales 1/2, 1/4, 1/8, 1/16, 1/32.
    pub channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub stem_kernel: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            channels: vec![32, 64, 128, 256, 256],
            blocks_per_stage: 2,
            stem_kernel: 7,
        }
    }
}

/// Multi-level features of a batch of images.
#[derive(Debug, Clone, Copy)]
pub struct FeaturePyramid {
    /// 1/8 scale, `channels[2]` wide.
    pub f8: Var,
    /// 1/16 scale, `channels[3]` wide.
    pub f16: Var,
    /// 1/32 scale, `channels[4]` wide.
    pub f32: Var,
}

#[derive(Debug, Clone)]
struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    down: Option<(Conv2d, BatchNorm2d)>,
}

impl BasicBlock {
    fn new<T: Element>(store: &mut ParamStore<T>, name: &str, c_in: usize, c_out: usize, stride: usize, rng: &mut impl Rng) -> Result<Self> {
        let down = if stride != 1 || c_in != c_out {
            Some((
                Conv2d::new(store, &format!("{name}.down.conv"), c_in, c_out, 1, stride, 0, 1, false, rng)?,
                BatchNorm2d::new(store, &format!("{name}.down.bn"), c_out, 1.0)?,
            ))
        } else {
            None
        };
        Ok(BasicBlock {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), c_in, c_out, 3, stride, 1, 1, false, rng)?,
            bn1: BatchNorm2d::new(store, &format!("{name}.bn1"), c_out, 1.0)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), c_out, c_out, 3, 1, 1, 1, false, rng)?,
            // zero gamma: the block starts as its shortcut
            bn2: BatchNorm2d::new(store, &format!("{name}.bn2"), c_out, 0.0)?,
            down,
        })
    }

    fn forward<T: Element>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let y = self.conv1.forward(s, x)?;
        let y = self.bn1.forward(s, y)?;
        let y = s.graph.relu(y)?;
        let y = self.conv2.forward(s, y)?;
        let y = self.bn2.forward(s, y)?;
        let shortcut = match &self.down {
            Some((conv, bn)) => {
                let d = conv.forward(s, x)?;
                bn.forward(s, d)?
            }
            None => x,
        };
        let sum = s.graph.add(y, shortcut)?;
        s.graph.relu(sum)
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    stem: Conv2d,
    stem_bn: BatchNorm2d,
    stages: Vec<Vec<BasicBlock>>,
    config: BackboneConfig,
}

const STAGE_STRIDES: [usize; 5] = [1, 2, 2, 2, 2];

impl Backbone {
    /// Registers all backbone parameters under `prefix`.
    pub fn new<T: Element>(store: &mut ParamStore<T>, prefix: &str, config: &BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        if config.channels.len() != 5 {
            return Err(EdmError::Config(format!(
                "backbone channel plan needs 5 entries, got {:?}",
                config.channels
            )));
        }
        if config.blocks_per_stage == 0 {
            return Err(EdmError::Config("blocks_per_stage must be at least 1".into()));
        }
        let k = config.stem_kernel;
        let stem = Conv2d::new(store, &format!("{prefix}.stem.conv"), 1, config.channels[0], k, 2, k / 2, 1, false, rng)?;
        let stem_bn = BatchNorm2d::new(store, &format!("{prefix}.stem.bn"), config.channels[0], 1.0)?;
        let mut stages = Vec::new();
        let mut c_in = config.channels[0];
        for (si, (&c_out, &stride)) in config.channels.iter().zip(&STAGE_STRIDES).enumerate() {
            let mut blocks = Vec::new();
            for bi in 0..config.blocks_per_stage {
                let name = format!("{prefix}.stage{}.block{}", si + 1, bi + 1);
                let st = if bi == 0 { stride } else { 1 };
                blocks.push(BasicBlock::new(store, &name, c_in, c_out, st, rng)?);
                c_in = c_out;
            }
            stages.push(blocks);
        }
        Ok(Backbone {
            stem,
            stem_bn,
            stages,
            config: config.clone(),
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Runs the extractor on `images` (`N×1×H×W`, values in `[0, 1]`).
    pub fn extract<T: Element>(&self, s: &mut Session<T>, images: Var) -> Result<FeaturePyramid> {
        let shape = s.graph.shape(images).to_vec();
        if shape.len() != 4 || shape[1] != 1 {
            return Err(EdmError::shape("backbone", format!("expected N×1×H×W, got {shape:?}")));
        }
        if !shape[2].is_multiple_of(32) || !shape[3].is_multiple_of(32) || shape[2] == 0 || shape[3] == 0 {
            return Err(EdmError::NotPadded {
                height: shape[2],
                width: shape[3],
            });
        }
        let x = self.stem.forward(s, images)?;
        let x = self.stem_bn.forward(s, x)?;
        let mut x = s.graph.relu(x)?;
        let mut outs = Vec::with_capacity(5);
        for stage in &self.stages {
            for block in stage {
                x = block.forward(s, x)?;
            }
            outs.push(x);
        }
        Ok(FeaturePyramid {
            f8: outs[2],
            f16: outs[3],
            f32: outs[4],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn named_parameter_shapes() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Backbone::new(&mut store, "backbone", &BackboneConfig::default(), &mut rng).unwrap();
        let w = store.find("backbone.stage5.block2.conv2.weight").unwrap();
        assert_eq!(w.shape(), &[256, 256, 3, 3]);
        let n = store.num_parameters();
        assert!(n > 1_000_000 && n < 10_000_000, "{n}");
    }

    #[test]
    fn rejects_unpadded_input() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = BackboneConfig {
            channels: vec![4, 4, 8, 8, 8],
            ..Default::default()
        };
        let bb = Backbone::new(&mut store, "b", &cfg, &mut rng).unwrap();
        let mut s = Session::eval(&mut store);
        let x = s.graph.constant(Tensor::zeros(&[1, 1, 40, 64]));
        let err = bb.extract(&mut s, x).unwrap_err();
        assert!(err.to_string().contains("multiples of 32"));
    }

    #[test]
    fn bad_channel_plan() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = BackboneConfig {
            channels: vec![4, 4, 8, 8],
            ..Default::default()
        };
        assert!(Backbone::new(&mut store, "b", &cfg, &mut rng).is_err());
    }
}
