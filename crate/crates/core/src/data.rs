//! Datasets on disk, mask color coding, splitting, batching, and the
//! synthetic spike/lesion generator.
//!
//! Layout: `root/images/<id>.png` (8-bit RGB photo) and
//! `root/masks/<id>.png` (8-bit RGB annotation: black background, green
//! healthy tissue, red diseased tissue).

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::IndexMask;
use crate::tensor::Tensor;

pub const BACKGROUND: u8 = 0;
pub const HEALTHY: u8 = 1;
pub const DISEASED: u8 = 2;
pub const NUM_CLASSES: u8 = 3;

/// Annotation palette, indexed by class.
pub const PALETTE: [[u8; 3]; 3] = [[0, 0, 0], [0, 255, 0], [255, 0, 0]];

/// Image/mask pair. `image` is `[3, H, W]` with values in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image: Tensor<f32>,
    pub mask: IndexMask,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Tensor<f32>, mask: IndexMask) -> Result<Self> {
        let id = id.into();
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 || (s[1], s[2]) != (mask.height, mask.width) {
            return Err(Error::Data(format!(
                "sample {id}: image {s:?} does not match {}x{} mask",
                mask.height, mask.width
            )));
        }
        if let Some(&c) = mask.data.iter().find(|&&c| c >= NUM_CLASSES) {
            return Err(Error::Data(format!("sample {id}: mask class {c} out of range")));
        }
        Ok(Sample { id, image, mask })
    }
}

/// Class of one annotation pixel: healthy when green is the strict
/// maximum channel and at least 128, diseased likewise for red, otherwise
/// background.
pub fn pixel_class([r, g, b]: [u8; 3]) -> u8 {
    if g > r && g > b && g >= 128 {
        HEALTHY
    } else if r > g && r > b && r >= 128 {
        DISEASED
    } else {
        BACKGROUND
    }
}

pub fn decode_color_mask(rgb: &RgbImage) -> IndexMask {
    let (w, h) = rgb.dimensions();
    let data = rgb.pixels().map(|p| pixel_class(p.0)).collect();
    IndexMask::new(h as usize, w as usize, data).expect("dimensions from image")
}

pub fn encode_color_mask(mask: &IndexMask) -> RgbImage {
    RgbImage::from_fn(mask.width as u32, mask.height as u32, |x, y| {
        Rgb(PALETTE[mask.get(y as usize, x as usize) as usize % PALETTE.len()])
    })
}

/// `[3, H, W]` tensor in `[0, 1]` from an 8-bit RGB image.
pub fn image_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = f32::from(p.0[c]) / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data).expect("consistent shape")
}

/// Inverse of [`image_to_tensor`], rounding to the nearest level.
pub fn tensor_to_image(t: &Tensor<f32>) -> Result<RgbImage> {
    let s = t.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape("tensor_to_image", format!("expected [3,H,W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let d = t.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |c: usize| {
            let v = d[c * h * w + y as usize * w + x as usize];
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        };
        Rgb([at(0), at(1), at(2)])
    }))
}

fn read_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(img.to_rgb8())
}

pub fn write_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

fn png_ids(dir: &Path) -> Result<BTreeSet<String>> {
    if !dir.exists() {
        return Ok(BTreeSet::new());
    }
    let mut ids = BTreeSet::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.insert(stem.to_string());
            }
        }
    }
    Ok(ids)
}

/// Loads every image/mask pair under `root`, ordered by id.
pub fn load_dataset(root: &Path) -> Result<Vec<Sample>> {
    let (img_dir, mask_dir) = (root.join("images"), root.join("masks"));
    let images = png_ids(&img_dir)?;
    let masks = png_ids(&mask_dir)?;
    if let Some(id) = images.difference(&masks).next() {
        return Err(Error::Data(format!("image {id} has no mask in {}", mask_dir.display())));
    }
    if let Some(id) = masks.difference(&images).next() {
        return Err(Error::Data(format!("mask {id} has no image in {}", img_dir.display())));
    }
    images
        .into_iter()
        .map(|id| {
            let img = read_rgb(&img_dir.join(format!("{id}.png")))?;
            let mask = decode_color_mask(&read_rgb(&mask_dir.join(format!("{id}.png")))?);
            if img.dimensions() != (mask.width as u32, mask.height as u32) {
                return Err(Error::Data(format!(
                    "{id}: image is {:?} but mask is {}x{}",
                    img.dimensions(),
                    mask.width,
                    mask.height
                )));
            }
            Sample::new(id, image_to_tensor(&img), mask)
        })
        .collect()
}

/// Train/validation/test partition by id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetSplit {
    pub fn get(&self, name: &str) -> Option<&[String]> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("split serializes");
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Sizes of the 70/15/15 cut for `n` samples: `⌊0.7n⌋` train,
/// `⌊0.15n⌋` validation, the remainder test.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * 70 / 100;
    let val = n * 15 / 100;
    (train, val, n - train - val)
}

/// Shuffles ids (sorted first) with `seed`, then cuts 70/15/15.
pub fn split_ids(ids: &[String], seed: u64) -> Result<DatasetSplit> {
    if ids.len() < 3 {
        return Err(Error::Data(format!(
            "need at least 3 samples to split, got {}",
            ids.len()
        )));
    }
    let mut ids = ids.to_vec();
    ids.sort();
    ids.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let (tr, va, _) = split_sizes(ids.len());
    let test = ids.split_off(tr + va);
    let val = ids.split_off(tr);
    Ok(DatasetSplit { train: ids, val, test })
}

pub fn split_dataset(samples: &[Sample], seed: u64) -> Result<DatasetSplit> {
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    split_ids(&ids, seed)
}

/// Samples whose ids are listed, in list order.
pub fn select<'a>(samples: &'a [Sample], ids: &[String]) -> Result<Vec<&'a Sample>> {
    ids.iter()
        .map(|id| {
            samples
                .iter()
                .find(|s| &s.id == id)
                .ok_or_else(|| Error::Data(format!("split references unknown id {id}")))
        })
        .collect()
}

/// A stacked batch: images `[B, 3, H, W]` and masks `B × [H, W]`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<String>,
    pub images: Tensor<f32>,
    pub masks: Vec<IndexMask>,
}

/// Stacks samples (all of the same size) into one batch.
pub fn stack(samples: &[&Sample]) -> Result<Batch> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Data("cannot stack an empty batch".into()))?;
    let shape = first.image.shape().to_vec();
    let mut data = Vec::with_capacity(samples.len() * first.image.numel());
    for s in samples {
        if s.image.shape() != shape.as_slice() {
            return Err(Error::Data(format!(
                "sample {} is {:?}, batch is {shape:?}",
                s.id,
                s.image.shape()
            )));
        }
        data.extend_from_slice(s.image.data());
    }
    Ok(Batch {
        ids: samples.iter().map(|s| s.id.clone()).collect(),
        images: Tensor::new(&[samples.len(), shape[0], shape[1], shape[2]], data)?,
        masks: samples.iter().map(|s| s.mask.clone()).collect(),
    })
}

/// Per-epoch sample order, a deterministic function of `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Shuffled batches for one epoch; the last batch may be partial. No
/// augmentation is applied.
pub fn batches(samples: &[&Sample], batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let order = epoch_order(samples.len(), seed, epoch);
    order
        .chunks(batch_size)
        .map(|idx| stack(&idx.iter().map(|&i| samples[i]).collect::<Vec<_>>()))
        .collect()
}

// ------------------------------------------------------------------ synthetic data

/// Generator output before encoding to PNG.
#[derive(Debug, Clone)]
pub struct SynthSample {
    pub id: String,
    pub image: RgbImage,
    pub mask: IndexMask,
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

fn jitter(rng: &mut ChaCha8Rng, base: f64, spread: f64) -> u8 {
    (base + rng.random_range(-spread..=spread)).clamp(0.0, 255.0).round() as u8
}

/// One synthetic field photo with an exact mask: textured soil, 1–4
/// bright elongated spikes (healthy), and 0–3 reddish lesions clipped to
/// the spikes (diseased).
pub fn synth_sample(rng: &mut ChaCha8Rng, id: String, size: usize) -> SynthSample {
    let s = size as f64;

    // Low-frequency soil texture from a few random plane waves.
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.05..0.3),
                rng.random_range(0.05..0.3),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(5.0..15.0),
            )
        })
        .collect();
    let soil = [
        rng.random_range(50.0..80.0),
        rng.random_range(40.0..60.0),
        rng.random_range(25.0..40.0),
    ];

    let n_spikes = rng.random_range(1..=4);
    let spikes: Vec<Ellipse> = (0..n_spikes)
        .map(|_| {
            let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
            Ellipse {
                cx: rng.random_range(0.2 * s..0.8 * s),
                cy: rng.random_range(0.2 * s..0.8 * s),
                a: rng.random_range(0.2 * s..0.38 * s),
                b: rng.random_range(0.07 * s..0.11 * s),
                cos: theta.cos(),
                sin: theta.sin(),
            }
        })
        .collect();
    let n_lesions = rng.random_range(0..=3);
    let lesions: Vec<Ellipse> = (0..n_lesions)
        .map(|_| {
            let host = &spikes[rng.random_range(0..spikes.len())];
            // Centre somewhere along the host's major axis.
            let t = rng.random_range(-0.7..0.7) * host.a;
            let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
            Ellipse {
                cx: host.cx + t * host.cos,
                cy: host.cy + t * host.sin,
                a: rng.random_range(0.12 * s..0.2 * s),
                b: rng.random_range(0.1 * s..0.16 * s),
                cos: theta.cos(),
                sin: theta.sin(),
            }
        })
        .collect();
    let spike_tone = [
        rng.random_range(170.0..210.0),
        rng.random_range(175.0..215.0),
        rng.random_range(70.0..110.0),
    ];
    let lesion_tone = [
        rng.random_range(185.0..225.0),
        rng.random_range(60.0..100.0),
        rng.random_range(60.0..95.0),
    ];

    let mut mask = IndexMask::filled(size, size, BACKGROUND);
    let mut image = RgbImage::new(size as u32, size as u32);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let in_spike = spikes.iter().any(|e| e.contains(px, py));
            let in_lesion = in_spike && lesions.iter().any(|e| e.contains(px, py));
            let class = match (in_spike, in_lesion) {
                (_, true) => DISEASED,
                (true, false) => HEALTHY,
                _ => BACKGROUND,
            };
            mask.data[y * size + x] = class;
            let pixel = match class {
                BACKGROUND => {
                    let tex: f64 = waves
                        .iter()
                        .map(|&(fx, fy, ph, amp)| amp * (fx * px + fy * py + ph).sin())
                        .sum();
                    [
                        jitter(rng, soil[0] + tex, 8.0),
                        jitter(rng, soil[1] + tex, 8.0),
                        jitter(rng, soil[2] + 0.5 * tex, 6.0),
                    ]
                }
                HEALTHY => [
                    jitter(rng, spike_tone[0], 12.0),
                    jitter(rng, spike_tone[1], 12.0),
                    jitter(rng, spike_tone[2], 10.0),
                ],
                _ => [
                    jitter(rng, lesion_tone[0], 12.0),
                    jitter(rng, lesion_tone[1], 10.0),
                    jitter(rng, lesion_tone[2], 10.0),
                ],
            };
            image.put_pixel(x as u32, y as u32, Rgb(pixel));
        }
    }
    SynthSample { id, image, mask }
}

/// Generates `n` samples in memory, deterministic in `seed`.
pub fn synth_samples(n: usize, size: usize, seed: u64) -> Result<Vec<SynthSample>> {
    if size == 0 || size % 32 != 0 {
        return Err(Error::Config(format!(
            "synthetic image size must be a positive multiple of 32, got {size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|i| synth_sample(&mut rng, format!("synth_{i:05}"), size))
        .collect())
}

/// Writes `n` image/mask pairs under `out_dir` in the dataset layout and
/// returns them.
pub fn synth_generate(n: usize, size: usize, seed: u64, out_dir: &Path) -> Result<Vec<SynthSample>> {
    let samples = synth_samples(n, size, seed)?;
    let (img_dir, mask_dir) = (out_dir.join("images"), out_dir.join("masks"));
    for d in [&img_dir, &mask_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d.as_path(), e))?;
    }
    for s in &samples {
        write_png(&s.image, &img_dir.join(format!("{}.png", s.id)))?;
        write_png(&encode_color_mask(&s.mask), &mask_dir.join(format!("{}.png", s.id)))?;
    }
    Ok(samples)
}

impl SynthSample {
    pub fn to_sample(&self) -> Sample {
        Sample::new(self.id.clone(), image_to_tensor(&self.image), self.mask.clone())
            .expect("generator produces consistent samples")
    }
}

/// Default location of the split manifest inside a training output dir.
pub fn split_manifest_path(dir: &Path) -> PathBuf {
    dir.join("split.json")
}
