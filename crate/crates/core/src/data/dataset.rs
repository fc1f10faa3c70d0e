//! On-disk dataset layout and image file formats.
//!
//! A dataset directory holds, per split `S`:
//!
//! ```text
//! S.json          annotations (see [`SplitFile`])
//! S/000000.pgm    8-bit binary grayscale images, one per scene
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::rle;
use super::synth::{self, Scene, SceneConfig, CLASS_NAMES};
use crate::error::{Error, Result};
use crate::matching::GroundTruthInstance;
use crate::tensor::Tensor;

pub const TRAIN: &str = "train";
pub const VAL: &str = "val";

/// Stream offset separating the validation scenes from the training scenes.
const VAL_STREAM: u64 = 1 << 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFile {
    pub split: String,
    pub classes: Vec<String>,
    pub images: Vec<ImageRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: usize,
    /// Image path relative to the dataset directory.
    pub file: String,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub annotations: Vec<AnnotationRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub class_id: usize,
    /// Column-major run-length encoding, see [`rle`].
    pub rle: String,
    pub area: usize,
    pub z_order: usize,
}

/// One loaded image with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: usize,
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor,
    pub instances: Vec<GroundTruthInstance>,
}

impl Sample {
    pub fn from_scene(id: usize, scene: &Scene) -> Self {
        Sample {
            id,
            image: scene.image(),
            instances: scene
                .instances
                .iter()
                .map(|i| GroundTruthInstance { class_id: i.class_id, mask: i.mask.clone() })
                .collect(),
        }
    }
}

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|e| Error::io(path, e))
}

fn encode_pnm(magic: &str, width: usize, height: usize, data: &[u8]) -> Vec<u8> {
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(data);
    out
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::InvalidArgument(format!("{} pixels for {width}x{height}", pixels.len())));
    }
    io(path, fs::write(path, encode_pnm("P5", width, height, pixels)))
}

/// Writes interleaved RGB bytes as a binary PPM.
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != 3 * width * height {
        return Err(Error::InvalidArgument(format!("{} bytes for {width}x{height} RGB", rgb.len())));
    }
    io(path, fs::write(path, encode_pnm("P6", width, height, rgb)))
}

/// Parses a binary PGM (`P5`, maxval at most 255) into `(width, height, pixels)`.
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |m: &str| Error::Dataset(format!("PGM: {m}"));
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not text"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary graymap"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit images are supported"));
    }
    // Exactly one whitespace byte separates the header from the data.
    pos += 1;
    let data = bytes.get(pos..).ok_or_else(|| bad("missing data"))?;
    if data.len() != width * height {
        return Err(bad("data length does not match the header"));
    }
    Ok((width, height, data.to_vec()))
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    parse_pgm(&io(path, fs::read(path))?)
}

fn image_file(split: &str, id: usize) -> String {
    format!("{split}/{id:06}.pgm")
}

/// Generates `count` scenes for `split` from `seed`; parallel and deterministic.
pub fn generate_scenes(split: &str, count: usize, seed: u64, cfg: &SceneConfig) -> Vec<Scene> {
    let offset = if split == VAL { VAL_STREAM } else { 0 };
    (0..count).into_par_iter().map(|i| synth::generate_scene(synth::scene_seed(seed, offset + i as u64), cfg)).collect()
}

/// Writes the scenes of one split into `dir`.
pub fn write_split(dir: &Path, split: &str, scenes: &[Scene]) -> Result<()> {
    let image_dir = dir.join(split);
    io(&image_dir, fs::create_dir_all(&image_dir))?;
    let images = scenes
        .par_iter()
        .enumerate()
        .map(|(id, scene)| {
            let file = image_file(split, id);
            write_pgm(&dir.join(&file), scene.size, scene.size, &scene.pixels)?;
            Ok(ImageRecord {
                id,
                file,
                width: scene.size,
                height: scene.size,
                seed: scene.seed,
                annotations: scene
                    .instances
                    .iter()
                    .map(|inst| AnnotationRecord {
                        class_id: inst.class_id,
                        rle: rle::encode(&inst.mask),
                        area: inst.mask.area(),
                        z_order: inst.z_order,
                    })
                    .collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let file =
        SplitFile { split: split.to_owned(), classes: CLASS_NAMES.iter().map(|s| s.to_string()).collect(), images };
    let path = annotations_path(dir, split);
    let mut text = serde_json::to_string_pretty(&file)?;
    text.push('\n');
    io(&path, fs::write(&path, text))
}

pub fn annotations_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.json"))
}

/// Generates and writes both splits.
pub fn generate_dataset(dir: &Path, train: usize, val: usize, seed: u64, cfg: &SceneConfig) -> Result<()> {
    if train == 0 || val == 0 {
        return Err(Error::InvalidArgument("each split needs at least one scene".into()));
    }
    io(dir, fs::create_dir_all(dir))?;
    for (split, count) in [(TRAIN, train), (VAL, val)] {
        write_split(dir, split, &generate_scenes(split, count, seed, cfg))?;
    }
    Ok(())
}

pub fn read_split_file(dir: &Path, split: &str) -> Result<SplitFile> {
    let path = annotations_path(dir, split);
    let text = io(&path, fs::read_to_string(&path))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads one split, decoding every image and mask.
pub fn load_split(dir: &Path, split: &str) -> Result<Vec<Sample>> {
    let file = read_split_file(dir, split)?;
    file.images
        .par_iter()
        .map(|rec| {
            let (w, h, pixels) = read_pgm(&dir.join(&rec.file))?;
            if (w, h) != (rec.width, rec.height) {
                return Err(Error::Dataset(format!("{}: size {w}x{h} disagrees with annotations", rec.file)));
            }
            let instances = rec
                .annotations
                .iter()
                .map(|a| {
                    let mask = rle::decode(&a.rle, h, w)?;
                    if mask.area() != a.area {
                        return Err(Error::Dataset(format!("{}: area {} disagrees with mask", rec.file, a.area)));
                    }
                    if a.class_id >= file.classes.len() {
                        return Err(Error::Dataset(format!("{}: class {} out of range", rec.file, a.class_id)));
                    }
                    Ok(GroundTruthInstance { class_id: a.class_id, mask })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Sample { id: rec.id, image: synth::image_from_gray(&pixels, h, w), instances })
        })
        .collect()
}
