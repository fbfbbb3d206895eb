//! Residual Siamese backbone producing a four-level feature pyramid.
//!
//! A two-convolution stem downsamples by 4, followed by four stages of
//! basic residual blocks. Each stage output passes through a 1×1
//! reduction convolution and group normalisation.

use crate::config::NetworkConfig;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, GroupNorm, Init};
use crate::tensor::{Graph, Scalar, Var};

/// Four feature maps, finest first.
pub type FeaturePyramid = [Var; 4];

#[derive(Debug, Clone)]
pub struct BasicBlock {
    pub conv1: Conv2d,
    pub norm1: GroupNorm,
    pub conv2: Conv2d,
    pub norm2: GroupNorm,
    pub shortcut: Option<(Conv2d, GroupNorm)>,
}

impl BasicBlock {
    fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, c_in: usize, c_out: usize, stride: usize) -> Result<Self> {
        let shortcut = if stride != 1 || c_in != c_out {
            Some((
                Conv2d::new(init, &format!("{name}.down"), (c_in, c_out), 1, stride, false)?,
                GroupNorm::new(init, &format!("{name}.down_norm"), c_out)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1: Conv2d::new(init, &format!("{name}.conv1"), (c_in, c_out), 3, stride, false)?,
            norm1: GroupNorm::new(init, &format!("{name}.norm1"), c_out)?,
            conv2: Conv2d::new(init, &format!("{name}.conv2"), (c_out, c_out), 3, 1, false)?,
            norm2: GroupNorm::new(init, &format!("{name}.norm2"), c_out)?,
            shortcut,
        })
    }

    /// `relu(shortcut(x) + branch(x))`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(g, x)?;
        let h = self.norm1.forward(g, h)?;
        let h = g.relu(h);
        let h = self.conv2.forward(g, h)?;
        let branch = self.norm2.forward(g, h)?;
        let skip = match &self.shortcut {
            Some((conv, norm)) => {
                let s = conv.forward(g, x)?;
                norm.forward(g, s)?
            }
            None => x,
        };
        let sum = g.add(skip, branch)?;
        Ok(g.relu(sum))
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub stem: [(Conv2d, GroupNorm); 2],
    pub stages: Vec<Vec<BasicBlock>>,
    pub reduce: Vec<(Conv2d, GroupNorm)>,
    widths: [usize; 4],
    downsample: usize,
}

impl Backbone {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, cfg: &NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let widths = cfg.widths();
        let stem = [
            (
                Conv2d::new(init, "backbone.stem.conv1", (3, widths[0]), 3, 2, false)?,
                GroupNorm::new(init, "backbone.stem.norm1", widths[0])?,
            ),
            (
                Conv2d::new(init, "backbone.stem.conv2", (widths[0], widths[0]), 3, 2, false)?,
                GroupNorm::new(init, "backbone.stem.norm2", widths[0])?,
            ),
        ];
        let mut stages = Vec::new();
        let mut c_in = widths[0];
        for (s, (&depth, &stride)) in cfg.stage_depths.iter().zip(&cfg.stage_strides).enumerate() {
            let mut blocks = Vec::new();
            for b in 0..depth {
                let name = format!("backbone.stage{}.block{b}", s + 1);
                let st = if b == 0 { stride } else { 1 };
                blocks.push(BasicBlock::new(init, &name, c_in, widths[s], st)?);
                c_in = widths[s];
            }
            stages.push(blocks);
        }
        let reduce = (0..4)
            .map(|n| {
                Ok((
                    Conv2d::new(init, &format!("backbone.reduce{}", n + 1), (widths[n], widths[n]), 1, 1, true)?,
                    GroupNorm::new(init, &format!("backbone.reduce{}.norm", n + 1), widths[n])?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            stem,
            stages,
            reduce,
            widths,
            downsample: cfg.downsample(),
        })
    }

    pub fn widths(&self) -> [usize; 4] {
        self.widths
    }

    pub fn downsample(&self) -> usize {
        self.downsample
    }

    /// Rejects inputs the stride schedule cannot divide evenly.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        match shape {
            &[3, h, w] if h % self.downsample == 0 && w % self.downsample == 0 && h > 0 && w > 0 => Ok(()),
            &[3, h, w] => Err(Error::Config(format!(
                "input size {h}×{w} is not divisible by the backbone stride {}",
                self.downsample
            ))),
            s => Err(Error::Config(format!("expected a 3×H×W image, got shape {s:?}"))),
        }
    }

    /// Feature pyramid of one `3×H×W` image.
    pub fn extract<T: Scalar>(&self, g: &mut Graph<'_, T>, image: Var) -> Result<FeaturePyramid> {
        self.check_input(g.shape(image))?;
        let mut h = image;
        for (conv, norm) in &self.stem {
            h = conv.forward(g, h)?;
            h = norm.forward(g, h)?;
            h = g.relu(h);
        }
        let mut levels = [h; 4];
        for (n, blocks) in self.stages.iter().enumerate() {
            for block in blocks {
                h = block.forward(g, h)?;
            }
            let (conv, norm) = &self.reduce[n];
            let r = conv.forward(g, h)?;
            levels[n] = norm.forward(g, r)?;
        }
        Ok(levels)
    }
}
