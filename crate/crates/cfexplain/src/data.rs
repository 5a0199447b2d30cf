//! Synthetic benchmark with per-sample ground-truth feature masks, plus
//! dataset persistence.
//!
//! Class 0 is a smoothed Gaussian random field; class 1 adds 1-4 bright
//! Gaussian blobs whose 2-sigma disks form the feature mask. Pixels are
//! quantized to f32 at generation time, so the raw little-endian f32 sidecar
//! written by [`save_dataset`] round-trips the in-memory f64 images bitwise.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ckpt::{atomic_write, hex_sha256};
use crate::diffae::ImageSlice;
use crate::error::{Error, Result};
use crate::imgops::gaussian_blur_default;

pub const MANIFEST_VERSION: u32 = 1;

/// Background field: white noise blurred at this sigma, then rescaled to
/// zero mean and this standard deviation.
const BACKGROUND_BLUR_SIGMA: f64 = 2.0;
const BACKGROUND_STD: f64 = 0.25;
/// Feature-mask budget from the type invariant: strictly below 30% of pixels.
const MAX_MASK_FRACTION: f64 = 0.30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One discriminative feature: a Gaussian bump. The mask records its
/// 2-sigma disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub ci: f64,
    pub cj: f64,
    pub sigma: f64,
    pub amp: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub id: String,
    pub label: usize,
    pub split: Split,
    pub slices: Vec<ImageSlice>,
    /// Union of the blobs' 2-sigma disks; empty iff label = 0.
    pub feature_mask: Array2<bool>,
    pub blobs: Vec<Blob>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub image_size: usize,
    pub k: usize,
    pub seed: u64,
    pub samples: Vec<SyntheticSample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&SyntheticSample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    /// All individual slices of a split, flattened; the diffusion
    /// autoencoder trains on these.
    pub fn split_slices(&self, split: Split) -> Vec<ImageSlice> {
        self.split(split)
            .into_iter()
            .flat_map(|s| s.slices.iter().cloned())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n: usize,
    pub image_size: usize,
    /// Slices per sample (stacked as channels by the teacher).
    pub k: usize,
    pub class1_fraction: f64,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl DataConfig {
    pub fn desk() -> Self {
        DataConfig {
            n: 6000,
            image_size: 32,
            k: 1,
            class1_fraction: 0.5,
            train_fraction: 0.7,
            val_fraction: 0.15,
            seed: 0,
        }
    }

    /// Mirrors the reference cohort shape: 731 cases with 27 positives
    /// (heavy imbalance), K=4 slices at 256x256.
    pub fn paper() -> Self {
        DataConfig {
            n: 731,
            image_size: 256,
            k: 4,
            class1_fraction: 27.0 / 731.0,
            train_fraction: 0.7,
            val_fraction: 0.15,
            seed: 0,
        }
    }

    /// The imbalance preset at desk scale: desk image geometry with the
    /// reference positive-class ratio.
    pub fn desk_imbalanced() -> Self {
        DataConfig {
            class1_fraction: 27.0 / 731.0,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 4 {
            return Err(Error::Config("dataset size must be at least 4".into()));
        }
        if self.image_size < 16 {
            return Err(Error::Config("image size must be at least 16".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("k (slices per sample) must be positive".into()));
        }
        if !(self.class1_fraction > 0.0 && self.class1_fraction < 1.0) {
            return Err(Error::Config("class1_fraction must lie in (0, 1)".into()));
        }
        let (tr, va) = (self.train_fraction, self.val_fraction);
        if !(tr > 0.0 && va > 0.0 && tr + va < 1.0) {
            return Err(Error::Config(
                "split fractions must be positive with train + val < 1".into(),
            ));
        }
        Ok(())
    }
}

/// Deterministic synthetic benchmark: same config (including seed) twice
/// gives bit-identical datasets.
pub fn generate_synthetic_dataset(config: &DataConfig) -> Result<Dataset> {
    config.validate()?;
    let s = config.image_size;
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);

    let n1 = ((config.n as f64 * config.class1_fraction).round() as usize)
        .clamp(1, config.n - 1);
    let mut labels = vec![0usize; config.n - n1];
    labels.extend(std::iter::repeat(1).take(n1));
    labels.shuffle(&mut rng);

    let splits = assign_splits(&labels, config, &mut rng);

    let mut samples = Vec::with_capacity(config.n);
    for (idx, (&label, &split)) in labels.iter().zip(&splits).enumerate() {
        let (blobs, mask) = if label == 1 {
            draw_blobs(s, &mut rng)
        } else {
            (Vec::new(), Array2::from_elem((s, s), false))
        };
        let bump = blob_field(s, &blobs);
        let mut slices = Vec::with_capacity(config.k);
        for _ in 0..config.k {
            let bg = background_field(s, &mut rng);
            let pixels =
                Array2::from_shape_fn((s, s), |ij| {
                    // quantize to f32 so the raw sidecar is lossless
                    (bg[ij] + bump[ij]).clamp(-1.0, 1.0) as f32 as f64
                });
            slices.push(ImageSlice::ingest(pixels)?);
        }
        samples.push(SyntheticSample {
            id: format!("s{idx:05}"),
            label,
            split,
            slices,
            feature_mask: mask,
            blobs,
        });
    }
    Ok(Dataset { image_size: s, k: config.k, seed: config.seed, samples })
}

/// Stratified split assignment: within each class, a shuffled permutation is
/// cut at the configured fractions, so both classes appear in every split
/// whenever counts allow.
fn assign_splits(labels: &[usize], config: &DataConfig, rng: &mut ChaCha20Rng) -> Vec<Split> {
    let mut splits = vec![Split::Train; labels.len()];
    for class in [0usize, 1] {
        let mut idxs: Vec<usize> =
            (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idxs.shuffle(rng);
        let n = idxs.len();
        let n_train = ((n as f64 * config.train_fraction).round() as usize).min(n);
        let n_val = ((n as f64 * config.val_fraction).round() as usize).min(n - n_train);
        for (pos, &i) in idxs.iter().enumerate() {
            splits[i] = if pos < n_train {
                Split::Train
            } else if pos < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    splits
}

fn background_field(s: usize, rng: &mut ChaCha20Rng) -> Array2<f64> {
    let white = Array2::from_shape_fn((s, s), |_| rng.sample::<f64, _>(StandardNormal));
    let smooth = gaussian_blur_default(&white, BACKGROUND_BLUR_SIGMA);
    let mean = smooth.sum() / smooth.len() as f64;
    let var = smooth.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
        / smooth.len() as f64;
    let std = var.sqrt().max(1e-9);
    smooth.mapv(|v| (v - mean) / std * BACKGROUND_STD)
}

/// 1-4 bright blobs with 2-sigma disks kept >= 2 px inside the border;
/// placement stops early rather than letting the mask reach 30% of pixels.
fn draw_blobs(s: usize, rng: &mut ChaCha20Rng) -> (Vec<Blob>, Array2<bool>) {
    let scale = (s as f64 / 32.0).max(0.5);
    let mut mask = Array2::from_elem((s, s), false);
    let mut blobs = Vec::new();
    let n_blobs = rng.gen_range(1..=4usize);
    let budget = (MAX_MASK_FRACTION * (s * s) as f64).floor() as usize;
    for _ in 0..n_blobs {
        let sigma = (rng.gen_range(1.5..2.5) * scale).max(1.0);
        let amp = rng.gen_range(0.6..1.0);
        let margin = (2.0 * sigma).ceil() + 2.0;
        let hi = s as f64 - 1.0 - margin;
        if hi <= margin {
            break;
        }
        let ci = rng.gen_range(margin..=hi);
        let cj = rng.gen_range(margin..=hi);
        let blob = Blob { ci, cj, sigma, amp };
        let mut candidate = mask.clone();
        stamp_disk(&mut candidate, &blob);
        if candidate.iter().filter(|v| **v).count() >= budget && !blobs.is_empty() {
            break;
        }
        mask = candidate;
        blobs.push(blob);
    }
    (blobs, mask)
}

fn stamp_disk(mask: &mut Array2<bool>, blob: &Blob) {
    let r2 = (2.0 * blob.sigma) * (2.0 * blob.sigma);
    for ((i, j), v) in mask.indexed_iter_mut() {
        let di = i as f64 - blob.ci;
        let dj = j as f64 - blob.cj;
        if di * di + dj * dj <= r2 {
            *v = true;
        }
    }
}

fn blob_field(s: usize, blobs: &[Blob]) -> Array2<f64> {
    let mut field = Array2::<f64>::zeros((s, s));
    for b in blobs {
        let denom = 2.0 * b.sigma * b.sigma;
        for ((i, j), v) in field.indexed_iter_mut() {
            let di = i as f64 - b.ci;
            let dj = j as f64 - b.cj;
            *v += b.amp * (-(di * di + dj * dj) / denom).exp();
        }
    }
    field
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    image_size: usize,
    k: usize,
    seed: u64,
    samples: Vec<ManifestSample>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestSample {
    id: String,
    label: usize,
    split: Split,
    blobs: Vec<Blob>,
    /// Viewable 16-bit grayscale PNGs, one per slice.
    slice_pngs: Vec<String>,
    /// Authoritative raw f32 little-endian row-major pixel files.
    slice_raws: Vec<String>,
    mask_png: String,
    /// Relative path -> hex SHA-256, covering every file above.
    digests: BTreeMap<String, String>,
}

/// Write the dataset directory: manifest.json, images/*.png + *.f32,
/// masks/*.png. Every file's digest lands in the manifest; the manifest is
/// written last so an interrupted save is never loadable.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let mut entries = Vec::with_capacity(dataset.samples.len());
    for sample in &dataset.samples {
        let mut digests = BTreeMap::new();
        let mut slice_pngs = Vec::new();
        let mut slice_raws = Vec::new();
        for (k, slice) in sample.slices.iter().enumerate() {
            let png_rel = format!("images/{}_{k}.png", sample.id);
            let raw_rel = format!("images/{}_{k}.f32", sample.id);
            let png_bytes = encode_gray16_png(slice.pixels())?;
            let raw_bytes = encode_raw_f32(slice.pixels());
            digests.insert(png_rel.clone(), hex_sha256(&png_bytes));
            digests.insert(raw_rel.clone(), hex_sha256(&raw_bytes));
            atomic_write(&dir.join(&png_rel), &png_bytes)?;
            atomic_write(&dir.join(&raw_rel), &raw_bytes)?;
            slice_pngs.push(png_rel);
            slice_raws.push(raw_rel);
        }
        let mask_rel = format!("masks/{}.png", sample.id);
        let mask_bytes = encode_mask_png(&sample.feature_mask)?;
        digests.insert(mask_rel.clone(), hex_sha256(&mask_bytes));
        atomic_write(&dir.join(&mask_rel), &mask_bytes)?;
        entries.push(ManifestSample {
            id: sample.id.clone(),
            label: sample.label,
            split: sample.split,
            blobs: sample.blobs.clone(),
            slice_pngs,
            slice_raws,
            mask_png: mask_rel,
            digests,
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        image_size: dataset.image_size,
        k: dataset.k,
        seed: dataset.seed,
        samples: entries,
    };
    atomic_write(
        &dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )
}

/// Load a dataset directory, verifying every file digest and the typed
/// invariants (unique ids, labels in {0,1}, mask/label consistency).
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let manifest_bytes = fs::read(&manifest_path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact(format!("dataset manifest not found: {}", manifest_path.display()))
        } else {
            Error::Io(e)
        }
    })?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| Error::Manifest(format!("{}: {e}", manifest_path.display())))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Manifest(format!(
            "unsupported manifest version {} (supported: {MANIFEST_VERSION})",
            manifest.version
        )));
    }
    let mut seen = BTreeSet::new();
    for entry in &manifest.samples {
        if !seen.insert(entry.id.as_str()) {
            return Err(Error::Manifest(format!(
                "duplicate sample id '{}' (splits must be disjoint)",
                entry.id
            )));
        }
    }

    let s = manifest.image_size;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        let corrupt = |reason: String| Error::CorruptSample { id: entry.id.clone(), reason };
        if entry.label > 1 {
            return Err(corrupt(format!("label {} not in {{0, 1}}", entry.label)));
        }
        if entry.slice_raws.len() != manifest.k || entry.slice_pngs.len() != manifest.k {
            return Err(corrupt("slice file count differs from manifest k".into()));
        }
        for (rel, expected) in &entry.digests {
            let bytes = fs::read(dir.join(rel))
                .map_err(|e| corrupt(format!("cannot read {rel}: {e}")))?;
            let got = hex_sha256(&bytes);
            if got != *expected {
                return Err(corrupt(format!("digest mismatch for {rel}")));
            }
        }
        let mut slices = Vec::with_capacity(manifest.k);
        for rel in &entry.slice_raws {
            if !entry.digests.contains_key(rel) {
                return Err(corrupt(format!("no digest recorded for {rel}")));
            }
            let bytes = fs::read(dir.join(rel))
                .map_err(|e| corrupt(format!("cannot read {rel}: {e}")))?;
            let pixels = decode_raw_f32(&bytes, s)
                .map_err(|e| corrupt(format!("{rel}: {e}")))?;
            slices.push(
                ImageSlice::ingest(pixels).map_err(|e| corrupt(format!("{rel}: {e}")))?,
            );
        }
        let mask_bytes = fs::read(dir.join(&entry.mask_png))
            .map_err(|e| corrupt(format!("cannot read {}: {e}", entry.mask_png)))?;
        let mask = decode_mask_png(&mask_bytes, s)
            .map_err(|e| corrupt(format!("{}: {e}", entry.mask_png)))?;

        let mask_count = mask.iter().filter(|v| **v).count();
        if (entry.label == 1) != (mask_count > 0) {
            return Err(corrupt("mask must be nonempty iff label = 1".into()));
        }
        if (mask_count as f64) >= MAX_MASK_FRACTION * (s * s) as f64 {
            return Err(corrupt("feature mask covers 30% of pixels or more".into()));
        }
        samples.push(SyntheticSample {
            id: entry.id.clone(),
            label: entry.label,
            split: entry.split,
            slices,
            feature_mask: mask,
            blobs: entry.blobs.clone(),
        });
    }
    Ok(Dataset { image_size: s, k: manifest.k, seed: manifest.seed, samples })
}

fn encode_raw_f32(pixels: &Array2<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(pixels.len() * 4);
    for v in pixels.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

fn decode_raw_f32(bytes: &[u8], s: usize) -> Result<Array2<f64>> {
    if bytes.len() != s * s * 4 {
        return Err(Error::Manifest(format!(
            "raw pixel file has {} bytes, expected {}",
            bytes.len(),
            s * s * 4
        )));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(Array2::from_shape_vec((s, s), data).expect("length checked above"))
}

/// 16-bit grayscale PNG; [-1, 1] maps linearly onto the u16 range.
pub fn encode_gray16_png(pixels: &Array2<f64>) -> Result<Vec<u8>> {
    let (h, w) = pixels.dim();
    let mut data = Vec::with_capacity(h * w * 2);
    for v in pixels.iter() {
        let unit = ((v + 1.0) * 0.5).clamp(0.0, 1.0);
        let q = (unit * 65535.0).round() as u16;
        data.extend_from_slice(&q.to_be_bytes());
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Sixteen);
        let mut writer = enc.write_header()?;
        writer.write_image_data(&data)?;
    }
    Ok(out)
}

/// 1-bit grayscale PNG, MSB-first packed rows.
fn encode_mask_png(mask: &Array2<bool>) -> Result<Vec<u8>> {
    let (h, w) = mask.dim();
    let row_bytes = (w + 7) / 8;
    let mut data = vec![0u8; h * row_bytes];
    for ((i, j), v) in mask.indexed_iter() {
        if *v {
            data[i * row_bytes + j / 8] |= 1 << (7 - (j % 8));
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::One);
        let mut writer = enc.write_header()?;
        writer.write_image_data(&data)?;
    }
    Ok(out)
}

fn decode_mask_png(bytes: &[u8], s: usize) -> Result<Array2<bool>> {
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info()?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf)?;
    if info.width as usize != s
        || info.height as usize != s
        || info.bit_depth != png::BitDepth::One
        || info.color_type != png::ColorType::Grayscale
    {
        return Err(Error::Manifest(format!(
            "mask PNG must be {s}x{s} 1-bit grayscale, got {}x{} {:?} {:?}",
            info.width, info.height, info.bit_depth, info.color_type
        )));
    }
    let row_bytes = (s + 7) / 8;
    let mut mask = Array2::from_elem((s, s), false);
    for i in 0..s {
        for j in 0..s {
            let byte = buf[i * row_bytes + j / 8];
            mask[(i, j)] = (byte >> (7 - (j % 8))) & 1 == 1;
        }
    }
    Ok(mask)
}
