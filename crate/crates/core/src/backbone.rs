//! Convolutional backbone and the five-level neck pyramid.
//!
//! The backbone is a stride-2 stem followed by four stride-2
//! conv/group-norm/ReLU stages, yielding `C2..C5` at strides 4..32 with
//! widths `base * 2^(i-2)`. The neck projects each `C_i` to the common width
//! with a 1x1 conv and group norm, and derives `P6` from `C5` with a strided
//! 3x3 conv.

use rand::Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{Conv, ConvBlock, GroupNorm};
use crate::params::{Bindings, ParamStore};

/// Input side lengths must be multiples of this.
pub const SIZE_MULTIPLE: usize = 32;

#[derive(Clone, Debug)]
pub struct Backbone {
    stem: ConvBlock,
    stages: Vec<ConvBlock>,
    pub widths: [usize; 4],
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, base_width: usize, rng: &mut R) -> Self {
        let widths = [base_width, base_width * 2, base_width * 4, base_width * 8];
        let stem = ConvBlock::new(store, "backbone.stem", 3, base_width, 2, rng);
        let mut c_in = base_width;
        let stages = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let block = ConvBlock::new(store, &format!("backbone.stage{}", i + 2), c_in, w, 2, rng);
                c_in = w;
                block
            })
            .collect();
        Backbone { stem, stages, widths }
    }

    /// Returns `[C2, C3, C4, C5]` for a `[3,H,W]` image.
    pub fn forward<'g>(&self, p: &Bindings<'g>, image: Var<'g>) -> Result<Vec<Var<'g>>> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::shape("backbone", format!("image {s:?}, expected [3,H,W]")));
        }
        if s[1] == 0 || s[2] == 0 || s[1] % SIZE_MULTIPLE != 0 || s[2] % SIZE_MULTIPLE != 0 {
            return Err(Error::InvalidArgument(format!(
                "image size {}x{} is not a positive multiple of {SIZE_MULTIPLE}",
                s[1], s[2]
            )));
        }
        let mut x = self.stem.forward(p, image)?;
        let mut out = Vec::with_capacity(4);
        for stage in &self.stages {
            x = stage.forward(p, x)?;
            out.push(x);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct Neck {
    laterals: Vec<(Conv, GroupNorm)>,
    extra: (Conv, GroupNorm),
    pub width: usize,
}

impl Neck {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, in_widths: [usize; 4], width: usize, rng: &mut R) -> Self {
        let laterals = in_widths
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let name = format!("neck.lateral{}", i + 2);
                (
                    Conv::new(store, &format!("{name}.conv"), c, width, 1, 1, rng),
                    GroupNorm::new(store, &format!("{name}.norm"), width),
                )
            })
            .collect();
        let extra = (
            Conv::new(store, "neck.p6.conv", in_widths[3], width, 3, 2, rng),
            GroupNorm::new(store, "neck.p6.norm", width),
        );
        Neck { laterals, extra, width }
    }

    /// Maps `[C2..C5]` to `[P2..P6]`, all of the common width.
    pub fn forward<'g>(&self, p: &Bindings<'g>, features: &[Var<'g>]) -> Result<Vec<Var<'g>>> {
        if features.len() != 4 {
            return Err(Error::shape("neck", format!("expected 4 backbone levels, got {}", features.len())));
        }
        let mut out = Vec::with_capacity(5);
        for ((conv, norm), &c) in self.laterals.iter().zip(features) {
            out.push(norm.forward(p, conv.forward(p, c)?)?);
        }
        let (conv, norm) = &self.extra;
        out.push(norm.forward(p, conv.forward(p, features[3])?)?);
        Ok(out)
    }
}
