//! Mask feature representation and the dynamic-kernel mask head.

use rand::Rng;

use crate::autograd::Var;
use crate::config::{MfrScale, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{Conv, ConvBlock, GroupNorm, Mlp};
use crate::params::{Bindings, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Normalized coordinate ramps `[2, h, w]`: channel 0 is x, channel 1 is y,
/// each running linearly from -1 to 1. An axis of length 1 is all zeros.
pub fn coord_channels(h: usize, w: usize) -> Tensor {
    let ramp = |i: usize, n: usize| if n > 1 { -1.0 + 2.0 * i as f64 / (n - 1) as f64 } else { 0.0 };
    let mut t = Tensor::zeros(&[2, h, w]);
    let d = t.data_mut();
    for y in 0..h {
        for x in 0..w {
            d[y * w + x] = ramp(x, w);
            d[h * w + y * w + x] = ramp(y, h);
        }
    }
    t
}

fn coords_or_zeros(h: usize, w: usize, enabled: bool) -> Tensor {
    if enabled {
        coord_channels(h, w)
    } else {
        Tensor::zeros(&[2, h, w])
    }
}

/// One pyramid level's path to the output scale.
#[derive(Clone, Debug)]
struct MfrPath {
    level: usize,
    blocks: Vec<ConvBlock>,
    upsample: bool,
}

/// Fuses `P2..P5` into a single map at the configured output scale and
/// appends coordinate channels.
///
/// Level `i` reaches output level `o` through `i - o` stages of
/// conv/norm/ReLU/2x-upsampling, or a single conv block when `i == o`.
/// The fused sum passes through a 1x1 conv and a group norm, which keeps the
/// mask logits in a range where the sigmoid still passes gradient.
/// Levels finer than the output are not used. The coarsest level also
/// receives coordinate channels at its input.
#[derive(Clone, Debug)]
pub struct Mfr {
    paths: Vec<MfrPath>,
    out: Conv,
    norm: GroupNorm,
    pub scale: MfrScale,
    pub positions: bool,
    width: usize,
}

/// Pyramid level of the coarsest MFR input (`P5`).
const COARSEST: usize = 5;

impl Mfr {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.width;
        let o = cfg.mfr_scale.level();
        let paths = (o.max(2)..=COARSEST)
            .map(|i| {
                let c_in = |s: usize| if i == COARSEST && s == 0 { d + 2 } else { d };
                let stages = (i - o).max(1);
                let blocks =
                    (0..stages).map(|s| ConvBlock::new(store, &format!("mfr.p{i}.{s}"), c_in(s), d, 1, rng)).collect();
                MfrPath { level: i, blocks, upsample: i > o }
            })
            .collect();
        Mfr {
            paths,
            out: Conv::new(store, "mfr.out", d, d, 1, 1, rng),
            norm: GroupNorm::new(store, "mfr.norm", d),
            scale: cfg.mfr_scale,
            positions: cfg.mfr_positions,
            width: d,
        }
    }

    /// `levels` is `[P2, P3, P4, P5]`; returns `[D + 2, H/s, W/s]`.
    pub fn forward<'g>(&self, p: &Bindings<'g>, levels: &[Var<'g>]) -> Result<Var<'g>> {
        if levels.len() != 4 {
            return Err(Error::shape("mfr", format!("expected P2..P5, got {} levels", levels.len())));
        }
        let mut fused: Option<Var<'g>> = None;
        for path in &self.paths {
            let mut x = levels[path.level - 2];
            if path.level == COARSEST {
                let s = x.shape();
                x = Var::concat(&[x, p.constant(coords_or_zeros(s[1], s[2], self.positions))])?;
            }
            for block in &path.blocks {
                x = block.forward(p, x)?;
                if path.upsample {
                    x = x.upsample2x()?;
                }
            }
            fused = Some(match fused {
                Some(f) => f.add(x)?,
                None => x,
            });
        }
        let fused = self.norm.forward(p, self.out.forward(p, fused.expect("at least one path"))?)?;
        let s = fused.shape();
        Var::concat(&[fused, p.constant(coords_or_zeros(s[1], s[2], self.positions))])
    }

    pub fn channels(&self) -> usize {
        self.width + 2
    }
}

/// Per-query head outputs for one image.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput<'g> {
    /// Class probabilities `[N, classes + 1]`; the last column is "no object".
    pub class_probs: Var<'g>,
    /// Mask logits `[N, h*w]` at MFR resolution.
    pub mask_logits: Var<'g>,
    /// Mask probabilities `[N, h*w]` at MFR resolution.
    pub masks: Var<'g>,
    /// `(h, w)` of the MFR.
    pub size: (usize, usize),
}

impl<'g> HeadOutput<'g> {
    /// Mask probabilities resized by `factor`, `[N, h*factor, w*factor]`.
    ///
    /// The logits are interpolated and then squashed, so a boundary can fall
    /// anywhere between MFR pixel centers instead of being smeared over a
    /// whole cell.
    pub fn upsampled_masks(&self, factor: usize) -> Result<Var<'g>> {
        let n = self.mask_logits.shape()[0];
        let m = self.mask_logits.reshape(&[n, self.size.0, self.size.1])?;
        if factor == 1 {
            Ok(m.sigmoid())
        } else {
            Ok(m.upsample(factor)?.sigmoid())
        }
    }
}

#[derive(Clone, Debug)]
pub struct MaskHead {
    pub cls: Mlp,
    pub kernel: Mlp,
    pub mask_bias: ParamId,
    pub kernel_positions: bool,
    width: usize,
}

impl MaskHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.width;
        MaskHead {
            cls: Mlp::new(store, "head.cls", d, d, cfg.num_classes + 1, rng),
            kernel: Mlp::new(store, "head.kernel", d, d, d, rng),
            mask_bias: store.add("head.mask_bias", Tensor::zeros(&[1, 1])),
            kernel_positions: cfg.kernel_positions,
            width: d,
        }
    }

    /// Position-aware kernels `[N, D + 2]`: the raw kernel followed by the
    /// reference point rescaled to `[-1, 1]` (or zeros when disabled).
    pub fn kernels<'g>(&self, p: &Bindings<'g>, objects: Var<'g>, refs: Var<'g>) -> Result<Var<'g>> {
        let raw = self.kernel.forward(p, objects)?;
        let pos = if self.kernel_positions {
            refs.scale(2.0).add_scalar(-1.0)
        } else {
            p.constant(Tensor::zeros(&refs.shape()))
        };
        Var::concat_cols(&[raw, pos])
    }

    /// Mask logits `[N, h*w]` of `kernels` convolved (1x1) with `mfr`, plus the shared bias.
    pub fn mask_logits<'g>(&self, p: &Bindings<'g>, kernels: Var<'g>, mfr: Var<'g>) -> Result<Var<'g>> {
        let (ks, fs) = (kernels.shape(), mfr.shape());
        if fs.len() != 3 || ks.len() != 2 || ks[1] != fs[0] {
            return Err(Error::shape("mask_head", format!("kernels {ks:?} against MFR {fs:?}")));
        }
        let n = ks[0];
        let hw = fs[1] * fs[2];
        let bias = p.constant(Tensor::ones(&[n, 1])).matmul(p.get(self.mask_bias))?;
        let kernels = Var::concat_cols(&[kernels, bias])?;
        let features = Var::concat(&[mfr.reshape(&[fs[0], hw])?, p.constant(Tensor::ones(&[1, hw]))])?;
        kernels.matmul(features)
    }

    pub fn forward<'g>(
        &self,
        p: &Bindings<'g>,
        objects: Var<'g>,
        refs: Var<'g>,
        mfr: Var<'g>,
    ) -> Result<HeadOutput<'g>> {
        let os = objects.shape();
        if os.len() != 2 || os[1] != self.width {
            return Err(Error::shape("mask_head", format!("objects {os:?}, width {}", self.width)));
        }
        let class_probs = self.cls.forward(p, objects)?.softmax();
        let logits = self.mask_logits(p, self.kernels(p, objects, refs)?, mfr)?;
        let s = mfr.shape();
        Ok(HeadOutput { class_probs, mask_logits: logits, masks: logits.sigmoid(), size: (s[1], s[2]) })
    }
}
