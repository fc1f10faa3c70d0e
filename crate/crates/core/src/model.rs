//! The full segmentation model: backbone, neck, transformer, MFR and mask head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::backbone::{Backbone, Neck};
use crate::config::ModelConfig;
use crate::data::BinaryMask;
use crate::error::{Error, Result};
use crate::mask::{HeadOutput, MaskHead, Mfr};
use crate::params::{Bindings, ParamStore};
use crate::tensor::Tensor;
use crate::transformer::DeformableTransformer;

/// Probability above which an upsampled mask pixel is foreground.
pub const MASK_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    backbone: Backbone,
    neck: Neck,
    pub transformer: DeformableTransformer,
    mfr: Mfr,
    pub head: MaskHead,
}

/// Everything the forward pass produces for one image.
#[derive(Clone, Copy, Debug)]
pub struct ModelOutput<'g> {
    pub head: HeadOutput<'g>,
    /// Object features `[N, D]`.
    pub objects: Var<'g>,
    /// Reference points `[N, 2]`.
    pub refs: Var<'g>,
    /// Combined MFR `[D + 2, h, w]`.
    pub mfr: Var<'g>,
}

/// One instance reported by [`Model::predict`].
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub class_id: usize,
    pub confidence: f64,
    pub mask: BinaryMask,
    /// Index of the query that produced the instance.
    pub query: usize,
}

impl Model {
    /// Builds the model and its freshly initialized parameters from `seed`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<(Model, ParamStore)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, config.base_width, &mut rng);
        let neck = Neck::new(&mut store, backbone.widths, config.width, &mut rng);
        let transformer = DeformableTransformer::new(&mut store, config, &mut rng);
        let mfr = Mfr::new(&mut store, config, &mut rng);
        let head = MaskHead::new(&mut store, config, &mut rng);
        let model = Model { config: config.clone(), backbone, neck, transformer, mfr, head };
        Ok((model, store))
    }

    pub fn forward<'g>(&self, p: &Bindings<'g>, image: Var<'g>) -> Result<ModelOutput<'g>> {
        let s = image.shape();
        let size = self.config.image_size;
        if s != [3, size, size] {
            return Err(Error::shape("model", format!("image {s:?}, configured for [3,{size},{size}]")));
        }
        let c = self.backbone.forward(p, image)?;
        let pyramid = self.neck.forward(p, &c)?;
        let decoded = self.transformer.forward(p, &pyramid[1..])?;
        let mfr = self.mfr.forward(p, &pyramid[..4])?;
        let head = self.head.forward(p, decoded.objects, decoded.refs, mfr)?;
        Ok(ModelOutput { head, objects: decoded.objects, refs: decoded.refs, mfr })
    }

    /// Factor from MFR to input resolution.
    pub fn mask_stride(&self) -> usize {
        self.config.mfr_scale.stride()
    }

    /// Per-query class probabilities and full-resolution mask probabilities
    /// for an image `[3, H, W]`, without gradient tracking.
    pub fn infer(&self, store: &ParamStore, image: &Tensor) -> Result<(Tensor, Tensor)> {
        let g = Graph::new();
        let p = Bindings::new(&g, store, false);
        let out = self.forward(&p, g.constant(image.clone()))?;
        let masks = out.head.upsampled_masks(self.mask_stride())?;
        g.check()?;
        Ok(((*out.head.class_probs.value()).clone(), (*masks.value()).clone()))
    }

    /// Instances whose best non-background probability exceeds `threshold`,
    /// in query order. No suppression of overlapping instances is applied.
    pub fn predict(&self, store: &ParamStore, image: &Tensor, threshold: f64) -> Result<Vec<Prediction>> {
        let (probs, masks) = self.infer(store, image)?;
        decode_predictions(&probs, &masks, threshold)
    }
}

/// Turns class probabilities `[N, C+1]` and mask probabilities `[N, H, W]`
/// into thresholded predictions.
pub fn decode_predictions(probs: &Tensor, masks: &Tensor, threshold: f64) -> Result<Vec<Prediction>> {
    if probs.rank() != 2 || masks.rank() != 3 || probs.dim(0) != masks.dim(0) || probs.dim(1) < 2 {
        return Err(Error::shape("predict", format!("probs {:?}, masks {:?}", probs.shape(), masks.shape())));
    }
    let (n, k) = (probs.dim(0), probs.dim(1));
    let (h, w) = (masks.dim(1), masks.dim(2));
    let mut out = Vec::new();
    for q in 0..n {
        let row = &probs.data()[q * k..(q + 1) * k - 1];
        let (class_id, confidence) =
            row.iter().enumerate().fold((0, f64::NEG_INFINITY), |best, (c, &v)| if v > best.1 { (c, v) } else { best });
        if confidence > threshold {
            let plane = Tensor::new(&[h, w], masks.data()[q * h * w..(q + 1) * h * w].to_vec())?;
            out.push(Prediction {
                class_id,
                confidence,
                mask: BinaryMask::threshold(&plane, MASK_THRESHOLD)?,
                query: q,
            });
        }
    }
    Ok(out)
}
