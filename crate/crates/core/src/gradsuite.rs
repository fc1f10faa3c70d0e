//! The standard gradient-check suite: every differentiable operation, every
//! model component, and the whole image-to-loss pipeline at small sizes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{DeformSampling, Graph, Var};
use crate::backbone::{Backbone, Neck};
use crate::config::{LossConfig, MfrScale, ModelConfig};
use crate::data::synth::{generate_scene, SceneConfig};
use crate::data::BinaryMask;
use crate::error::Result;
use crate::gradcheck::{check_function, check_inputs, check_parameters, project, GradCheckOptions, GradCheckReport};
use crate::mask::{MaskHead, Mfr};
use crate::matching::{hungarian, match_cost, set_loss_with_assignment, GroundTruthInstance};
use crate::model::Model;
use crate::params::{Bindings, ParamStore};
use crate::tensor::Tensor;
use crate::transformer::{flatten_pyramid, DecoderLayer, EncoderLayer, LevelTable, MsDeformAttn};

/// Model size used by the component and pipeline checks.
pub fn check_config() -> ModelConfig {
    ModelConfig { image_size: 32, ..ModelConfig::tiny() }
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Entries bounded away from zero, so kinks at the origin stay out of reach
/// of the finite-difference step.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.5);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Normalized sample locations that keep clear of pixel-center grid lines,
/// where bilinear interpolation is not differentiable.
fn sample_points(n: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::zeros(&[n, 2]);
    for i in 0..n {
        for (j, size) in [(0, w), (1, h)] {
            // Cell index from -1 (partly outside) to size; fractional part in [0.1, 0.9].
            let cell = rng.random_range(-1..=size as i64) as f64;
            let frac = rng.random_range(0.1..0.9);
            t.data_mut()[2 * i + j] = (cell + 0.5 + frac) / size as f64;
        }
    }
    t
}

/// Adds noise to every parameter so zero-initialized paths also carry gradient.
pub fn jitter(store: &mut ParamStore, std: f64, rng: &mut ChaCha8Rng) {
    for v in store.values_mut() {
        let noise = Tensor::randn(v.shape(), std, rng);
        for (a, b) in v.data_mut().iter_mut().zip(noise.data()) {
            *a += b;
        }
    }
}

/// Finite-difference checks of every autograd operation.
pub fn operation_checks(opts: &GradCheckOptions) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let r = &mut rng;
    let mut out = Vec::new();
    let mut push = |name: &str, inputs: Vec<Tensor>, f: &dyn for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>| {
        out.push(check_function(name, &inputs, f, opts)?);
        Ok::<_, crate::Error>(())
    };

    push("relu", vec![away_from_zero(&[4, 5], r)], &|_, v| Ok(v[0].relu()))?;
    push("sigmoid", vec![randn(&[4, 5], r)], &|_, v| Ok(v[0].sigmoid()))?;
    push("exp", vec![randn(&[4, 5], r)], &|_, v| Ok(v[0].exp()))?;
    push("sqrt", vec![Tensor::uniform(&[4, 5], 0.2, 2.0, r)], &|_, v| Ok(v[0].sqrt()))?;
    let mut logs = Tensor::uniform(&[4, 5], 0.05, 2.0, r);
    logs.data_mut()[3] = 1e-6;
    push("ln_clamped", vec![logs], &|_, v| Ok(v[0].ln_clamped(1e-3)))?;
    push("scale", vec![randn(&[3, 4], r)], &|_, v| Ok(v[0].scale(-2.5)))?;
    push("add_scalar", vec![randn(&[3, 4], r)], &|_, v| Ok(v[0].add_scalar(0.7)))?;
    push("add", vec![randn(&[3, 4], r), randn(&[3, 4], r)], &|_, v| v[0].add(v[1]))?;
    push("sub", vec![randn(&[3, 4], r), randn(&[3, 4], r)], &|_, v| v[0].sub(v[1]))?;
    push("mul", vec![randn(&[3, 4], r), randn(&[3, 4], r)], &|_, v| v[0].mul(v[1]))?;
    push("div", vec![randn(&[3, 4], r), away_from_zero(&[3, 4], r)], &|_, v| v[0].div(v[1]))?;
    push("add_row", vec![randn(&[3, 2, 4], r), randn(&[4], r)], &|_, v| v[0].add_row(v[1]))?;
    push("mul_row", vec![randn(&[3, 2, 4], r), randn(&[4], r)], &|_, v| v[0].mul_row(v[1]))?;
    push("matmul", vec![randn(&[3, 5], r), randn(&[5, 4], r)], &|_, v| v[0].matmul(v[1]))?;
    push("transpose", vec![randn(&[3, 5], r)], &|_, v| v[0].transpose())?;
    push("reshape", vec![randn(&[3, 4], r)], &|_, v| v[0].reshape(&[2, 6]))?;
    push("softmax", vec![randn(&[3, 5], r)], &|_, v| Ok(v[0].softmax()))?;
    push("sum", vec![randn(&[3, 4], r)], &|_, v| Ok(v[0].sum().mul(v[0].sum())?.sum()))?;
    push("mean", vec![randn(&[3, 4], r)], &|_, v| Ok(v[0].mean().exp()))?;
    push("sum_last", vec![randn(&[3, 2, 4], r)], &|_, v| Ok(v[0].sum_last()))?;
    push("concat", vec![randn(&[2, 3], r), randn(&[1, 3], r)], &|_, v| Var::concat(&[v[0], v[1]]))?;
    push("concat_cols", vec![randn(&[2, 3], r), randn(&[2, 1], r)], &|_, v| Var::concat_cols(&[v[0], v[1]]))?;
    push("slice_cols", vec![randn(&[3, 5], r)], &|_, v| v[0].slice_cols(1, 4))?;
    push("gather_rows", vec![randn(&[4, 3], r)], &|_, v| v[0].gather_rows(&[2, 0, 2, 3]))?;
    push("pick", vec![randn(&[3, 4], r)], &|_, v| v[0].pick(&[1, 3, 1]))?;
    push("conv2d", vec![randn(&[2, 5, 6], r), randn(&[3, 2, 3, 3], r), randn(&[3], r)], &|_, v| {
        v[0].conv2d(v[1], Some(v[2]), 1, 1)
    })?;
    push("conv2d_stride2", vec![randn(&[2, 6, 5], r), randn(&[3, 2, 3, 3], r)], &|_, v| v[0].conv2d(v[1], None, 2, 1))?;
    push("conv2d_1x1", vec![randn(&[3, 4, 4], r), randn(&[2, 3, 1, 1], r), randn(&[2], r)], &|_, v| {
        v[0].conv2d(v[1], Some(v[2]), 1, 0)
    })?;
    push("group_norm", vec![randn(&[4, 3, 3], r), randn(&[4], r), randn(&[4], r)], &|_, v| {
        v[0].group_norm(2, v[1], v[2], 1e-5)
    })?;
    push("layer_norm", vec![randn(&[3, 6], r), randn(&[6], r), randn(&[6], r)], &|_, v| {
        v[0].layer_norm(v[1], v[2], 1e-5)
    })?;
    push("upsample2x", vec![randn(&[2, 3, 4], r)], &|_, v| v[0].upsample2x())?;
    push("upsample3x", vec![randn(&[1, 3, 2], r)], &|_, v| v[0].upsample(3))?;
    push("bilinear_sample", vec![randn(&[2, 4, 5], r), sample_points(7, 4, 5, r)], &|_, v| v[0].bilinear_sample(v[1]))?;

    let layout = DeformSampling { levels: vec![(3, 4), (2, 2)], heads: 2, points: 2 };
    let (q, samples) = (3, layout.samples_per_query());
    let mut locations = Tensor::zeros(&[q, 2 * samples]);
    for i in 0..q {
        for s in 0..samples {
            let (h, w) = layout.levels[(s / layout.points) % layout.levels.len()];
            let pt = sample_points(1, h, w, r);
            locations.data_mut()[i * 2 * samples + 2 * s..][..2].copy_from_slice(pt.data());
        }
    }
    push(
        "deform_sample",
        vec![randn(&[layout.tokens(), 4], r), locations, Tensor::uniform(&[q, samples], 0.0, 1.0, r)],
        &|_, v| v[0].deform_sample(v[1], v[2], &layout),
    )?;
    push("attention", vec![randn(&[3, 4], r), randn(&[5, 4], r), randn(&[5, 2], r)], &|_, v| {
        v[0].attention(v[1], v[2])
    })?;
    Ok(out)
}

/// Random `[C,H,W]` pyramid levels with the given shapes.
fn pyramid(channels: usize, shapes: &[(usize, usize)], rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    shapes.iter().map(|&(h, w)| randn(&[channels, h, w], rng)).collect()
}

/// All entries of `vars`, concatenated into one vector.
fn flatten_all<'g>(vars: &[Var<'g>]) -> Result<Var<'g>> {
    let parts: Vec<Var<'g>> = vars.iter().map(|v| v.reshape(&[v.shape().iter().product()])).collect::<Result<_>>()?;
    Var::concat(&parts)
}

fn constants<'g>(p: &Bindings<'g>, ts: &[Tensor]) -> Vec<Var<'g>> {
    ts.iter().map(|t| p.constant(t.clone())).collect()
}

/// Checks of each model component with respect to its parameters and, where
/// it has feature inputs, those inputs.
pub fn module_checks(opts: &GradCheckOptions) -> Result<Vec<GradCheckReport>> {
    let cfg = check_config();
    let d = cfg.width;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut out = Vec::new();

    // Backbone and neck on a 32px image.
    let mut store = ParamStore::new();
    let backbone = Backbone::new(&mut store, cfg.base_width, &mut rng);
    let neck = Neck::new(&mut store, backbone.widths, d, &mut rng);
    jitter(&mut store, 0.05, &mut rng);
    let image = Tensor::uniform(&[3, 32, 32], 0.0, 1.0, &mut rng);
    out.push(check_parameters(
        "backbone+neck params",
        &store,
        |p| {
            let levels = neck.forward(p, &backbone.forward(p, p.constant(image.clone()))?)?;
            let flat = flatten_all(&levels)?;
            project(flat, 7)
        },
        opts,
    )?);

    // Multi-scale deformable attention.
    let shapes = vec![(4, 4), (2, 2), (1, 1), (1, 1)];
    let table = LevelTable::new(shapes.clone());
    let tokens = table.tokens();
    let mut store = ParamStore::new();
    let msda = MsDeformAttn::new(&mut store, "msda", d, cfg.heads, shapes.len(), cfg.points, &mut rng);
    jitter(&mut store, 0.2, &mut rng);
    let query = randn(&[3, d], &mut rng);
    let refs = Tensor::uniform(&[3, 2], 0.15, 0.85, &mut rng);
    let memory = randn(&[tokens, d], &mut rng);
    out.push(check_parameters(
        "ms_deform_attn params",
        &store,
        |p| {
            let y = msda.forward(
                p,
                p.constant(query.clone()),
                p.constant(refs.clone()),
                p.constant(memory.clone()),
                &table,
            )?;
            project(y, 7)
        },
        opts,
    )?);
    out.push(check_inputs(
        "ms_deform_attn inputs",
        &store,
        &[query.clone(), refs.clone(), memory.clone()],
        |p, v| msda.forward(p, v[0], v[1], v[2], &table),
        opts,
    )?);

    // Encoder and decoder layers.
    let mut store = ParamStore::new();
    let enc = EncoderLayer::new(&mut store, "enc", &cfg, shapes.len(), &mut rng);
    let dec = DecoderLayer::new(&mut store, "dec", &cfg, shapes.len(), &mut rng);
    jitter(&mut store, 0.2, &mut rng);
    let centers = table.token_centers();
    let tgt = randn(&[cfg.num_queries, d], &mut rng);
    let pos = randn(&[cfg.num_queries, d], &mut rng);
    let qrefs = Tensor::uniform(&[cfg.num_queries, 2], 0.15, 0.85, &mut rng);
    out.push(check_inputs(
        "encoder layer inputs",
        &store,
        &[memory.clone()],
        |p, v| enc.forward(p, v[0], p.constant(centers.clone()), &table),
        opts,
    )?);
    out.push(check_inputs(
        "decoder layer inputs",
        &store,
        &[tgt.clone(), pos.clone(), qrefs.clone(), memory.clone()],
        |p, v| dec.forward(p, v[0], v[1], v[2], v[3], &table),
        opts,
    )?);
    out.push(check_parameters(
        "encoder+decoder layer params",
        &store,
        |p| {
            let mem = enc.forward(p, p.constant(memory.clone()), p.constant(centers.clone()), &table)?;
            let y = dec.forward(
                p,
                p.constant(tgt.clone()),
                p.constant(pos.clone()),
                p.constant(qrefs.clone()),
                mem,
                &table,
            )?;
            project(y, 7)
        },
        opts,
    )?);

    // Positional-encoding flattening of a pyramid.
    let levels = pyramid(d, &shapes, &mut rng);
    let encodings: Vec<Tensor> = shapes.iter().map(|&(h, w)| randn(&[h * w, d], &mut rng)).collect();
    let mut inputs = levels.clone();
    inputs.extend(encodings.iter().cloned());
    out.push(check_function(
        "flatten_pyramid",
        &inputs,
        |_, v| {
            let (mem, _) = flatten_pyramid(&v[..4], &v[4..])?;
            Ok(mem)
        },
        opts,
    )?);

    // Mask feature representation at every scale, then the mask head.
    for scale in MfrScale::ALL {
        let cfg = ModelConfig { mfr_scale: scale, ..check_config() };
        let mut store = ParamStore::new();
        let mfr = Mfr::new(&mut store, &cfg, &mut rng);
        jitter(&mut store, 0.05, &mut rng);
        let levels = pyramid(d, &[(16, 16), (8, 8), (4, 4), (2, 2)], &mut rng);
        out.push(check_parameters(
            &format!("mfr {scale} params"),
            &store,
            |p| {
                let y = mfr.forward(p, &constants(p, &levels))?;
                project(y, 7)
            },
            opts,
        )?);
        out.push(check_inputs(&format!("mfr {scale} inputs"), &store, &levels, |p, v| mfr.forward(p, v), opts)?);
    }

    let mut store = ParamStore::new();
    let head = MaskHead::new(&mut store, &cfg, &mut rng);
    jitter(&mut store, 0.2, &mut rng);
    let objects = randn(&[cfg.num_queries, d], &mut rng);
    let mfr_map = randn(&[d + 2, 8, 8], &mut rng);
    out.push(check_parameters(
        "mask head params",
        &store,
        |p| {
            let h =
                head.forward(p, p.constant(objects.clone()), p.constant(qrefs.clone()), p.constant(mfr_map.clone()))?;
            let y = flatten_all(&[h.class_probs, h.masks])?;
            project(y, 7)
        },
        opts,
    )?);
    out.push(check_inputs(
        "mask head inputs",
        &store,
        &[objects.clone(), qrefs.clone(), mfr_map.clone()],
        |p, v| {
            let h = head.forward(p, v[0], v[1], v[2])?;
            flatten_all(&[h.class_probs, h.masks])
        },
        opts,
    )?);

    // Set loss with the matching held fixed.
    let (n, size) = (4, 8);
    let gts = vec![
        GroundTruthInstance { class_id: 1, mask: BinaryMask::from_fn(size, size, |x, y| x < 4 && y < 5) },
        GroundTruthInstance { class_id: 0, mask: BinaryMask::from_fn(size, size, |x, y| x + y > 9) },
    ];
    let logits = randn(&[n, cfg.num_classes + 1], &mut rng);
    let mask_logits = randn(&[n, size, size], &mut rng);
    let loss_cfg = LossConfig::default();
    let assignment = {
        let g = Graph::new();
        let probs = g.constant(logits.clone()).softmax();
        let masks = g.constant(mask_logits.clone()).sigmoid();
        hungarian(&match_cost(&probs.value(), &masks.value(), &gts, &loss_cfg)?)?
    };
    out.push(check_function(
        "set loss (fixed matching)",
        &[logits, mask_logits],
        |_, v| Ok(set_loss_with_assignment(v[0].softmax(), v[1].sigmoid(), &gts, &assignment, &loss_cfg)?.total),
        opts,
    )?);
    Ok(out)
}

/// The whole model, image to set loss, checked against every parameter and
/// every image pixel. The matching is computed once at the unperturbed point
/// and then held fixed.
pub fn pipeline_checks(opts: &GradCheckOptions) -> Result<Vec<GradCheckReport>> {
    let cfg = check_config();
    let (model, mut store) = Model::new(&cfg, 3)?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    jitter(&mut store, 0.02, &mut rng);
    let scene = (0..)
        .map(|s| generate_scene(s, &SceneConfig { size: cfg.image_size, twins: false }))
        .find(|s| (2..=cfg.num_queries).contains(&s.instances.len()))
        .expect("some scene fits the query budget");
    let image = scene.image();
    let gts: Vec<GroundTruthInstance> =
        scene.instances.iter().map(|i| GroundTruthInstance { class_id: i.class_id, mask: i.mask.clone() }).collect();
    let loss_cfg = LossConfig::default();
    let assignment = {
        let g = Graph::new();
        let p = Bindings::new(&g, &store, false);
        let (probs, masks) = model_outputs(&model, &p, g.constant(image.clone()))?;
        hungarian(&match_cost(&probs.value(), &masks.value(), &gts, &loss_cfg)?)?
    };
    Ok(vec![
        check_parameters(
            "pipeline params",
            &store,
            |p| {
                let (probs, masks) = model_outputs(&model, p, p.constant(image.clone()))?;
                Ok(set_loss_with_assignment(probs, masks, &gts, &assignment, &loss_cfg)?.total)
            },
            opts,
        )?,
        check_inputs(
            "pipeline image",
            &store,
            &[image.clone()],
            |p, v| {
                let (probs, masks) = model_outputs(&model, p, v[0])?;
                Ok(set_loss_with_assignment(probs, masks, &gts, &assignment, &loss_cfg)?.total)
            },
            opts,
        )?,
    ])
}

/// Class probabilities and full-resolution mask probabilities.
fn model_outputs<'g>(model: &Model, p: &Bindings<'g>, image: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
    let out = model.forward(p, image)?;
    Ok((out.head.class_probs, out.head.upsampled_masks(model.mask_stride())?))
}

/// Runs the full suite.
pub fn run(opts: &GradCheckOptions) -> Result<Vec<GradCheckReport>> {
    let mut all = operation_checks(opts)?;
    all.extend(module_checks(opts)?);
    all.extend(pipeline_checks(opts)?);
    Ok(all)
}
