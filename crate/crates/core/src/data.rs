//! Synthetic two-modality phantom data: generation, preprocessing,
//! augmentation, and the on-disk dataset format.
//!
//! Each sample pairs a PET-like slice (blurry high-uptake blobs plus
//! false-positive hot spots), a CT-like slice (sharp low-contrast ellipses
//! plus anatomy-like distractors) and a binary tumor mask. The PET channel
//! localizes tumors, the CT channel bounds them; neither channel alone
//! determines the mask.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::seeding::mix_seed;
use crate::tensor::Tensor;

pub const DATASET_VERSION: u32 = 1;

/// SUV values are clamped to this range, then scaled to [0, 1].
pub const SUV_CLAMP: (f32, f32) = (0.0, 15.0);
/// HU values are windowed to this range, then mapped affinely to [0, 1].
pub const HU_WINDOW: (f32, f32) = (-160.0, 240.0);

// ── Core types ───────────────────────────────────────────────────────────

/// Row-major 2D float image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn zeros(h: usize, w: usize) -> Self {
        Image {
            h,
            w,
            data: vec![0.0; h * w],
        }
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::dim(format!(
                "image {}x{} wants {} values, got {}",
                h,
                w,
                h * w,
                data.len()
            )));
        }
        Ok(Image { h, w, data })
    }

    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.w + c]
    }
}

/// Row-major 2D binary mask; construction enforces 0/1 values.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn zeros(h: usize, w: usize) -> Self {
        Mask {
            h,
            w,
            data: vec![0; h * w],
        }
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::dim(format!(
                "mask {}x{} wants {} values, got {}",
                h,
                w,
                h * w,
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::arg("mask values must be exactly 0 or 1".to_string()));
        }
        Ok(Mask { h, w, data })
    }

    pub fn at(&self, r: usize, c: usize) -> u8 {
        self.data[r * self.w + c]
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.data.iter().filter(|&&v| v == 1).count() as f64 / self.data.len() as f64
    }
}

/// One paired PET slice, CT slice and tumor mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub pet: Image,
    pub ct: Image,
    pub mask: Mask,
    pub patient_id: u32,
}

impl Sample {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.pet.h, self.pet.w);
        if (self.ct.h, self.ct.w) != (h, w) || (self.mask.h, self.mask.w) != (h, w) {
            return Err(Error::dim(format!(
                "sample channels disagree: pet {}x{}, ct {}x{}, mask {}x{}",
                h, w, self.ct.h, self.ct.w, self.mask.h, self.mask.w
            )));
        }
        if self.pet.data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::data(
                "pet values must be finite and non-negative".to_string(),
            ));
        }
        if self.ct.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::data("ct values must be finite".to_string()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: u64,
    pub h: usize,
    pub w: usize,
    pub n_samples: usize,
    pub patient_ids: Vec<u32>,
    pub version: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Distinct patient ids, ascending.
    pub fn patients(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.meta.patient_ids.clone();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

// ── Phantom generation ───────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    cos_t: f64,
    sin_t: f64,
}

impl Ellipse {
    /// Squared elliptical radius: 1.0 on the boundary.
    fn rho2(&self, y: f64, x: f64) -> f64 {
        let dy = y - self.cy;
        let dx = x - self.cx;
        let u = dx * self.cos_t + dy * self.sin_t;
        let v = -dx * self.sin_t + dy * self.cos_t;
        (u / self.a).powi(2) + (v / self.b).powi(2)
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        self.rho2(y, x) <= 1.0
    }
}

fn sample_ellipse(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Ellipse {
    let s_ref = ((h * w) as f64).sqrt();
    let min_dim = h.min(w) as f64;
    let axis =
        |rng: &mut ChaCha8Rng| (rng.random_range(0.09..0.16) * s_ref).clamp(4.0, 0.22 * min_dim);
    let a = axis(rng);
    let b = axis(rng);
    let theta = rng.random_range(0.0..std::f64::consts::PI);
    let margin = a.max(b) + 2.0;
    let cy = rng.random_range(margin..h as f64 - margin);
    let cx = rng.random_range(margin..w as f64 - margin);
    Ellipse {
        cy,
        cx,
        a,
        b,
        cos_t: theta.cos(),
        sin_t: theta.sin(),
    }
}

fn gauss32(rng: &mut ChaCha8Rng) -> f32 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    ((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()) as f32
}

/// Generate one phantom slice. PET is rendered at half resolution and
/// resampled up to the CT grid, mirroring how lower-resolution PET is
/// brought onto the CT grid in practice.
fn generate_sample(rng: &mut ChaCha8Rng, h: usize, w: usize, patient_id: u32) -> Sample {
    let n_tumors = rng.random_range(1..=3);
    let tumors: Vec<Ellipse> = (0..n_tumors).map(|_| sample_ellipse(rng, h, w)).collect();

    // Anatomy-like distractors: soft-tissue ellipses share the tumor contrast
    // distribution (PET must disambiguate), plus one dense and sometimes one
    // air-like structure.
    let mut distractors: Vec<(Ellipse, DistractorKind)> = Vec::new();
    let n_soft = rng.random_range(1..=2);
    for _ in 0..n_soft {
        distractors.push((
            place_avoiding(rng, h, w, &tumors),
            DistractorKind::SoftTissue,
        ));
    }
    distractors.push((place_avoiding(rng, h, w, &tumors), DistractorKind::Dense));
    if rng.random::<f64>() < 0.5 {
        distractors.push((place_avoiding(rng, h, w, &tumors), DistractorKind::Air));
    }

    // Mask: union of tumor ellipses, sampled at pixel centers.
    let mut mask = Mask::zeros(h, w);
    for r in 0..h {
        for c in 0..w {
            if tumors.iter().any(|e| e.contains(r as f64, c as f64)) {
                mask.data[r * w + c] = 1;
            }
        }
    }

    // False-positive PET hot spots, placed clear of every ellipse.
    let all_shapes: Vec<Ellipse> = tumors
        .iter()
        .copied()
        .chain(distractors.iter().map(|(e, _)| *e))
        .collect();
    let n_false = rng.random_range(0..=2);
    let mut false_spots = Vec::new();
    for _ in 0..n_false {
        for _try in 0..30 {
            let cy = rng.random_range(3.0..h as f64 - 3.0);
            let cx = rng.random_range(3.0..w as f64 - 3.0);
            if all_shapes.iter().all(|e| e.rho2(cy, cx) > 1.7) {
                let sigma = rng.random_range(0.03..0.06) * h.min(w) as f64;
                let amp = rng.random_range(3.0..8.0);
                false_spots.push((cy, cx, sigma, amp));
                break;
            }
        }
    }

    // PET at half resolution: background uptake, tumor uptake with Gaussian
    // falloff in elliptical radius, hot spots.
    let (h2, w2) = (h / 2, w / 2);
    let base: f32 = rng.random_range(0.2..0.6);
    let tumor_amps: Vec<f64> = tumors.iter().map(|_| rng.random_range(6.0..12.0)).collect();
    let mut pet2 = Image::zeros(h2, w2);
    for r2 in 0..h2 {
        // align-corners mapping onto the full-resolution grid
        let y = r2 as f64 * (h - 1) as f64 / (h2 - 1) as f64;
        for c2 in 0..w2 {
            let x = c2 as f64 * (w - 1) as f64 / (w2 - 1) as f64;
            let mut v = base + gauss32(rng).abs() * 0.15;
            for (e, &amp) in tumors.iter().zip(tumor_amps.iter()) {
                v += (amp * (-1.2 * e.rho2(y, x)).exp()) as f32;
            }
            for &(cy, cx, sigma, amp) in &false_spots {
                let d2 = (y - cy).powi(2) + (x - cx).powi(2);
                v += (amp * (-d2 / (2.0 * sigma * sigma)).exp()) as f32;
            }
            pet2.data[r2 * w2 + c2] = v.max(0.0);
        }
    }
    let pet = resample_pet_to_ct(&pet2, h, w).expect("phantom dims are >= 2");

    // CT: sloped soft-tissue background, sharp-filled shapes, pixel noise.
    let slope_x: f32 = rng.random_range(-30.0..30.0);
    let slope_y: f32 = rng.random_range(-30.0..30.0);
    let soft_deltas: Vec<f32> = distractors
        .iter()
        .map(|(_, kind)| match kind {
            DistractorKind::SoftTissue => rng.random_range(25.0..45.0),
            DistractorKind::Dense => rng.random_range(180.0..260.0),
            DistractorKind::Air => rng.random_range(-140.0..-80.0),
        })
        .collect();
    let tumor_deltas: Vec<f32> = tumors
        .iter()
        .map(|_| rng.random_range(25.0..45.0))
        .collect();
    let mut ct = Image::zeros(h, w);
    for r in 0..h {
        for c in 0..w {
            let bg = 30.0
                + slope_x * (c as f32 / w as f32 - 0.5)
                + slope_y * (r as f32 / h as f32 - 0.5);
            let mut v = bg;
            for ((e, kind), &delta) in distractors.iter().zip(soft_deltas.iter()) {
                if e.contains(r as f64, c as f64) {
                    v = match kind {
                        DistractorKind::SoftTissue => bg + delta,
                        DistractorKind::Dense | DistractorKind::Air => delta,
                    };
                }
            }
            for (e, &delta) in tumors.iter().zip(tumor_deltas.iter()) {
                if e.contains(r as f64, c as f64) {
                    v = bg + delta;
                }
            }
            ct.data[r * w + c] = v + gauss32(rng) * 6.0;
        }
    }

    Sample {
        pet,
        ct,
        mask,
        patient_id,
    }
}

#[derive(Clone, Copy, Debug)]
enum DistractorKind {
    SoftTissue,
    Dense,
    Air,
}

fn place_avoiding(rng: &mut ChaCha8Rng, h: usize, w: usize, avoid: &[Ellipse]) -> Ellipse {
    for _ in 0..20 {
        let e = sample_ellipse(rng, h, w);
        if avoid.iter().all(|t| !t.contains(e.cy, e.cx)) {
            return e;
        }
    }
    sample_ellipse(rng, h, w)
}

/// Deterministic phantom dataset: `n_patients * slices_per_patient` samples
/// of `h` x `w`. Identical arguments yield identical bytes on disk.
pub fn generate_phantom(
    seed: u64,
    n_patients: usize,
    slices_per_patient: usize,
    h: usize,
    w: usize,
) -> Result<Dataset> {
    if !h.is_multiple_of(16) || !w.is_multiple_of(16) || h == 0 || w == 0 {
        return Err(Error::dim(format!(
            "phantom dims must be positive multiples of 16, got {h}x{w}"
        )));
    }
    if n_patients < 1 {
        return Err(Error::arg("n_patients must be >= 1".to_string()));
    }
    if slices_per_patient < 1 {
        return Err(Error::arg("slices_per_patient must be >= 1".to_string()));
    }
    let mut samples = Vec::with_capacity(n_patients * slices_per_patient);
    let mut patient_ids = Vec::new();
    for p in 0..n_patients {
        for s in 0..slices_per_patient {
            let idx = (p * slices_per_patient + s) as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, idx));
            samples.push(generate_sample(&mut rng, h, w, p as u32));
            patient_ids.push(p as u32);
        }
    }
    Ok(Dataset {
        meta: DatasetMeta {
            seed,
            h,
            w,
            n_samples: samples.len(),
            patient_ids,
            version: DATASET_VERSION,
        },
        samples,
    })
}

// ── Preprocessing ────────────────────────────────────────────────────────

/// Clamp SUV-like values to [0, 15], then scale to [0, 1].
pub fn normalize_pet(pet: &Image) -> Result<Image> {
    if pet.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::data("pet contains non-finite values".to_string()));
    }
    let (lo, hi) = SUV_CLAMP;
    let data = pet
        .data
        .iter()
        .map(|&v| (v.clamp(lo, hi) - lo) / (hi - lo))
        .collect();
    Image::from_vec(pet.h, pet.w, data)
}

/// Window HU-like values to [-160, 240], then map affinely to [0, 1].
pub fn normalize_ct(ct: &Image) -> Result<Image> {
    if ct.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::data("ct contains non-finite values".to_string()));
    }
    let (lo, hi) = HU_WINDOW;
    let data = ct
        .data
        .iter()
        .map(|&v| (v.clamp(lo, hi) - lo) / (hi - lo))
        .collect();
    Image::from_vec(ct.h, ct.w, data)
}

/// Bilinear (align-corners) resample onto a target grid; identity when the
/// sizes already match. Delegates to the differentiable resize kernel.
pub fn resample_pet_to_ct(pet: &Image, target_h: usize, target_w: usize) -> Result<Image> {
    if (target_h, target_w) == (pet.h, pet.w) {
        return Ok(pet.clone());
    }
    if pet.h < 2 || pet.w < 2 || target_h < 2 || target_w < 2 {
        return Err(Error::dim(format!(
            "resample wants source and target dims >= 2, got {}x{} -> {}x{}",
            pet.h, pet.w, target_h, target_w
        )));
    }
    let mut g = Graph::<f32>::new();
    let x = g.leaf(Tensor::from_vec(&[1, 1, pet.h, pet.w], pet.data.clone())?);
    let y = g.bilinear_resize(x, target_h, target_w)?;
    Image::from_vec(target_h, target_w, g.value(y).data().to_vec())
}

// ── Augmentation ─────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub struct AugmentConfig {
    pub p_flip: f64,
    pub p_crop: f64,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            p_flip: 0.5,
            p_crop: 0.5,
            scale_min: 0.8,
            scale_max: 1.0,
        }
    }
}

/// Mirror all three channels left-right. Involutive.
pub fn hflip_sample(sample: &Sample) -> Sample {
    let (h, w) = (sample.pet.h, sample.pet.w);
    let flip_f = |src: &[f32]| {
        let mut out = vec![0.0f32; h * w];
        for r in 0..h {
            for c in 0..w {
                out[r * w + c] = src[r * w + (w - 1 - c)];
            }
        }
        out
    };
    let mut mask = vec![0u8; h * w];
    for r in 0..h {
        for c in 0..w {
            mask[r * w + c] = sample.mask.data[r * w + (w - 1 - c)];
        }
    }
    Sample {
        pet: Image {
            h,
            w,
            data: flip_f(&sample.pet.data),
        },
        ct: Image {
            h,
            w,
            data: flip_f(&sample.ct.data),
        },
        mask: Mask { h, w, data: mask },
        patient_id: sample.patient_id,
    }
}

/// Crop the window (top, left, ch, cw) from every channel and resize back to
/// the original size. The mask is re-binarized at 0.5 after the resize.
pub fn crop_resize_sample(
    sample: &Sample,
    top: usize,
    left: usize,
    ch: usize,
    cw: usize,
) -> Result<Sample> {
    let (h, w) = (sample.pet.h, sample.pet.w);
    if ch < 2 || cw < 2 || top + ch > h || left + cw > w {
        return Err(Error::dim(format!(
            "crop window ({top}, {left}, {ch}, {cw}) out of range for {h}x{w}"
        )));
    }
    let crop = |src: &[f32]| {
        let mut out = vec![0.0f32; ch * cw];
        for r in 0..ch {
            out[r * cw..(r + 1) * cw]
                .copy_from_slice(&src[(top + r) * w + left..(top + r) * w + left + cw]);
        }
        out
    };
    let resize = |data: Vec<f32>| -> Result<Image> {
        resample_pet_to_ct(&Image::from_vec(ch, cw, data)?, h, w)
    };
    let pet = resize(crop(&sample.pet.data))?;
    let ct = resize(crop(&sample.ct.data))?;
    let mask_f: Vec<f32> = sample.mask.data.iter().map(|&v| v as f32).collect();
    let mask_resized = resize(crop(&mask_f))?;
    let mask = Mask::from_vec(
        h,
        w,
        mask_resized
            .data
            .iter()
            .map(|&v| u8::from(v >= 0.5))
            .collect(),
    )?;
    Ok(Sample {
        pet,
        ct,
        mask,
        patient_id: sample.patient_id,
    })
}

/// Online augmentation: an independent coin per transform (flip, then crop
/// and resize back). The identical geometric transform hits pet, ct and mask.
pub fn augment(sample: &Sample, rng: &mut ChaCha8Rng, cfg: &AugmentConfig) -> Sample {
    let mut out = sample.clone();
    if rng.random::<f64>() < cfg.p_flip {
        out = hflip_sample(&out);
    }
    if rng.random::<f64>() < cfg.p_crop {
        let (h, w) = (out.pet.h, out.pet.w);
        let sy = rng.random_range(cfg.scale_min..=cfg.scale_max);
        let sx = rng.random_range(cfg.scale_min..=cfg.scale_max);
        let ch = ((h as f64 * sy).round() as usize).clamp(2, h);
        let cw = ((w as f64 * sx).round() as usize).clamp(2, w);
        let top = rng.random_range(0..=h - ch);
        let left = rng.random_range(0..=w - cw);
        out = crop_resize_sample(&out, top, left, ch, cw)
            .expect("crop window derived from valid dims");
    }
    out
}

// ── Dataset I/O ──────────────────────────────────────────────────────────
//
// Directory layout: `meta.json` plus, per sample i (zero-padded to 4
// digits), `pet_{i:04}.f32` and `ct_{i:04}.f32` (row-major float32,
// little-endian) and `mask_{i:04}.u8` (row-major bytes, 0/1).

fn f32s_to_le_bytes(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn le_bytes_to_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta_path = dir.join("meta.json");
    let meta = serde_json::to_string_pretty(&dataset.meta)
        .map_err(|e| Error::format(&meta_path, e.to_string()))?;
    fs::write(&meta_path, meta).map_err(|e| Error::io(&meta_path, e))?;
    for (i, sample) in dataset.samples.iter().enumerate() {
        let pet_path = dir.join(format!("pet_{i:04}.f32"));
        fs::write(&pet_path, f32s_to_le_bytes(&sample.pet.data))
            .map_err(|e| Error::io(&pet_path, e))?;
        let ct_path = dir.join(format!("ct_{i:04}.f32"));
        fs::write(&ct_path, f32s_to_le_bytes(&sample.ct.data))
            .map_err(|e| Error::io(&ct_path, e))?;
        let mask_path = dir.join(format!("mask_{i:04}.u8"));
        fs::write(&mask_path, &sample.mask.data).map_err(|e| Error::io(&mask_path, e))?;
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join("meta.json");
    let meta_text = fs::read_to_string(&meta_path)
        .map_err(|_| Error::format(&meta_path, "missing or unreadable meta file".to_string()))?;
    let meta: DatasetMeta =
        serde_json::from_str(&meta_text).map_err(|e| Error::format(&meta_path, e.to_string()))?;
    if meta.patient_ids.len() != meta.n_samples {
        return Err(Error::format(
            &meta_path,
            format!(
                "patient_ids has {} entries for {} samples",
                meta.patient_ids.len(),
                meta.n_samples
            ),
        ));
    }
    let want = meta.h * meta.w;
    let mut samples = Vec::with_capacity(meta.n_samples);
    for i in 0..meta.n_samples {
        let read_plane = |path: &Path| -> Result<Vec<f32>> {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            if bytes.len() != want * 4 {
                return Err(Error::format(
                    path,
                    format!("payload is {} bytes, expected {}", bytes.len(), want * 4),
                ));
            }
            Ok(le_bytes_to_f32s(&bytes))
        };
        let pet_path = dir.join(format!("pet_{i:04}.f32"));
        let ct_path = dir.join(format!("ct_{i:04}.f32"));
        let mask_path = dir.join(format!("mask_{i:04}.u8"));
        let pet = Image::from_vec(meta.h, meta.w, read_plane(&pet_path)?)?;
        let ct = Image::from_vec(meta.h, meta.w, read_plane(&ct_path)?)?;
        let mask_bytes = fs::read(&mask_path).map_err(|e| Error::io(&mask_path, e))?;
        if mask_bytes.len() != want {
            return Err(Error::format(
                &mask_path,
                format!("payload is {} bytes, expected {}", mask_bytes.len(), want),
            ));
        }
        let mask = Mask::from_vec(meta.h, meta.w, mask_bytes)
            .map_err(|_| Error::format(&mask_path, "mask bytes must be 0 or 1".to_string()))?;
        samples.push(Sample {
            pet,
            ct,
            mask,
            patient_id: meta.patient_ids[i],
        });
    }
    Ok(Dataset { meta, samples })
}

/// FNV-1a over payload files only (meta.json excluded), in index order.
pub fn payload_checksum(dir: &Path) -> Result<u64> {
    let meta_path = dir.join("meta.json");
    let meta_text = fs::read_to_string(&meta_path)
        .map_err(|_| Error::format(&meta_path, "missing or unreadable meta file".to_string()))?;
    let meta: DatasetMeta =
        serde_json::from_str(&meta_text).map_err(|e| Error::format(&meta_path, e.to_string()))?;
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    let mut feed = |bytes: &[u8]| {
        for &b in bytes {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    for i in 0..meta.n_samples {
        for name in [
            format!("pet_{i:04}.f32"),
            format!("ct_{i:04}.f32"),
            format!("mask_{i:04}.u8"),
        ] {
            let path = dir.join(&name);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            feed(&bytes);
        }
    }
    Ok(hash)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;
    use std::sync::atomic::{AtomicU64, Ordering};

    static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

    fn tmp_dir(tag: &str) -> PathBuf {
        let n = TMP_COUNTER.fetch_add(1, Ordering::SeqCst);
        let dir = std::env::temp_dir().join(format!(
            "hct_data_test_{}_{}_{}",
            tag,
            std::process::id(),
            n
        ));
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn normalize_pet_examples() {
        let img = Image::from_vec(1, 3, vec![0.0, 30.0, 7.5]).unwrap();
        let out = normalize_pet(&img).unwrap();
        assert_eq!(out.data, vec![0.0, 1.0, 0.5]);
        let bad = Image::from_vec(1, 1, vec![f32::NAN]).unwrap();
        assert!(matches!(normalize_pet(&bad), Err(Error::Data(_))));
    }

    #[test]
    fn normalize_ct_examples() {
        let img = Image::from_vec(1, 3, vec![-160.0, 240.0, 40.0]).unwrap();
        let out = normalize_ct(&img).unwrap();
        assert_eq!(out.data, vec![0.0, 1.0, 0.5]);
        assert!(normalize_ct(&Image::from_vec(1, 1, vec![f32::INFINITY]).unwrap()).is_err());
    }

    #[test]
    fn normalize_stays_in_unit_interval_for_extremes() {
        let img = Image::from_vec(1, 4, vec![-1e9, 1e9, 14.999, 0.001]).unwrap();
        for v in normalize_pet(&img).unwrap().data {
            assert!((0.0..=1.0).contains(&v));
        }
        for v in normalize_ct(&img).unwrap().data {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn resample_identity_and_constant() {
        let img = Image::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(resample_pet_to_ct(&img, 2, 2).unwrap(), img);
        let flat = Image::from_vec(3, 3, vec![5.0; 9]).unwrap();
        let up = resample_pet_to_ct(&flat, 12, 12).unwrap();
        assert!(up.data.iter().all(|&v| (v - 5.0).abs() < 1e-6));
        assert!(resample_pet_to_ct(&Image::zeros(1, 4), 8, 8).is_err());
    }

    #[test]
    fn resample_two_by_two_center() {
        let img = Image::from_vec(2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let out = resample_pet_to_ct(&img, 3, 3).unwrap();
        assert!((out.at(1, 1) - 1.5).abs() < 1e-6);
    }

    #[test]
    fn phantom_rejects_bad_arguments() {
        assert!(matches!(
            generate_phantom(1, 1, 1, 60, 64),
            Err(Error::Dim(_))
        ));
        assert!(matches!(
            generate_phantom(1, 0, 1, 64, 64),
            Err(Error::Arg(_))
        ));
    }

    #[test]
    fn phantom_is_deterministic() {
        let a = generate_phantom(7, 2, 3, 64, 64).unwrap();
        let b = generate_phantom(7, 2, 3, 64, 64).unwrap();
        assert_eq!(a, b);
        let c = generate_phantom(8, 2, 3, 64, 64).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn phantom_mask_fraction_and_pet_contrast_over_many_seeds() {
        // measured oracle: foreground fraction and inside/outside PET means
        let ds = generate_phantom(123, 50, 4, 64, 64).unwrap();
        assert_eq!(ds.samples.len(), 200);
        for sample in &ds.samples {
            let frac = sample.mask.foreground_fraction();
            assert!(
                (0.005..=0.25).contains(&frac),
                "foreground fraction {frac} out of range"
            );
            let (mut in_sum, mut in_n, mut out_sum, mut out_n) = (0.0f64, 0usize, 0.0f64, 0usize);
            for (p, m) in sample.pet.data.iter().zip(sample.mask.data.iter()) {
                if *m == 1 {
                    in_sum += *p as f64;
                    in_n += 1;
                } else {
                    out_sum += *p as f64;
                    out_n += 1;
                }
            }
            assert!(in_sum / in_n as f64 > out_sum / out_n as f64);
            sample.validate().unwrap();
        }
    }

    #[test]
    fn phantom_patient_ids_contiguous() {
        let ds = generate_phantom(9, 3, 2, 32, 32).unwrap();
        assert_eq!(ds.meta.patient_ids, vec![0, 0, 1, 1, 2, 2]);
        assert_eq!(ds.patients(), vec![0, 1, 2]);
    }

    #[test]
    fn hflip_is_involutive_and_keeps_alignment() {
        let ds = generate_phantom(3, 1, 1, 32, 32).unwrap();
        let s = &ds.samples[0];
        let once = hflip_sample(s);
        assert_ne!(&once, s);
        assert_eq!(&hflip_sample(&once), s);
        // pixel alignment: flipping moves mask and images together
        for r in 0..32 {
            for c in 0..32 {
                assert_eq!(once.mask.at(r, c), s.mask.at(r, 31 - c));
                assert_eq!(once.pet.at(r, c), s.pet.at(r, 31 - c));
            }
        }
    }

    #[test]
    fn augment_preserves_shape_and_mask_binarity() {
        use rand::SeedableRng;
        let ds = generate_phantom(5, 1, 2, 64, 64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let cfg = AugmentConfig::default();
        for _ in 0..20 {
            let out = augment(&ds.samples[0], &mut rng, &cfg);
            assert_eq!((out.pet.h, out.pet.w), (64, 64));
            assert_eq!((out.ct.h, out.ct.w), (64, 64));
            assert_eq!((out.mask.h, out.mask.w), (64, 64));
            assert!(out.mask.data.iter().all(|&v| v <= 1));
        }
    }

    #[test]
    fn flip_only_augment_keeps_image_equal_to_its_mask() {
        // an image that equals its mask stays equal under flip-only settings
        let ds = generate_phantom(6, 1, 1, 32, 32).unwrap();
        let mask = ds.samples[0].mask.clone();
        let as_img =
            Image::from_vec(32, 32, mask.data.iter().map(|&v| v as f32).collect()).unwrap();
        let s = Sample {
            pet: as_img.clone(),
            ct: as_img,
            mask,
            patient_id: 0,
        };
        let cfg = AugmentConfig {
            p_flip: 1.0,
            p_crop: 0.0,
            ..AugmentConfig::default()
        };
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = augment(&s, &mut rng, &cfg);
        for (p, m) in out.pet.data.iter().zip(out.mask.data.iter()) {
            assert_eq!(*p, *m as f32);
        }
    }

    #[test]
    fn dataset_roundtrip_is_lossless() {
        let dir = tmp_dir("roundtrip");
        let ds = generate_phantom(7, 1, 2, 32, 32).unwrap();
        write_dataset(&ds, &dir).unwrap();
        let back = read_dataset(&dir).unwrap();
        assert_eq!(ds, back);
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn dataset_write_is_byte_identical_across_runs() {
        let d1 = tmp_dir("det1");
        let d2 = tmp_dir("det2");
        write_dataset(&generate_phantom(7, 2, 3, 64, 64).unwrap(), &d1).unwrap();
        write_dataset(&generate_phantom(7, 2, 3, 64, 64).unwrap(), &d2).unwrap();
        assert_eq!(
            payload_checksum(&d1).unwrap(),
            payload_checksum(&d2).unwrap()
        );
        // file-level comparison as well
        for i in 0..6 {
            for name in [
                format!("pet_{i:04}.f32"),
                format!("ct_{i:04}.f32"),
                format!("mask_{i:04}.u8"),
            ] {
                assert_eq!(
                    fs::read(d1.join(&name)).unwrap(),
                    fs::read(d2.join(&name)).unwrap(),
                    "{name} differs"
                );
            }
        }
        fs::remove_dir_all(&d1).ok();
        fs::remove_dir_all(&d2).ok();
    }

    #[test]
    fn truncated_payload_is_a_format_error_naming_the_file() {
        let dir = tmp_dir("trunc");
        let ds = generate_phantom(7, 1, 1, 32, 32).unwrap();
        write_dataset(&ds, &dir).unwrap();
        let victim = dir.join("ct_0000.f32");
        let bytes = fs::read(&victim).unwrap();
        fs::write(&victim, &bytes[..bytes.len() - 4]).unwrap();
        match read_dataset(&dir) {
            Err(Error::Format { path, .. }) => assert_eq!(path, victim),
            other => panic!("expected format error, got {other:?}"),
        }
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn missing_meta_is_a_format_error() {
        let dir = tmp_dir("nometa");
        match read_dataset(&dir) {
            Err(Error::Format { path, .. }) => assert_eq!(path, dir.join("meta.json")),
            other => panic!("expected format error, got {other:?}"),
        }
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn written_floats_are_little_endian_row_major() {
        let dir = tmp_dir("bytes");
        let pet = Image::from_vec(2, 2, vec![1.0, 2.5, -3.0, 0.125]).unwrap();
        let ds = Dataset {
            meta: DatasetMeta {
                seed: 0,
                h: 2,
                w: 2,
                n_samples: 1,
                patient_ids: vec![0],
                version: DATASET_VERSION,
            },
            samples: vec![Sample {
                pet: pet.clone(),
                ct: pet,
                mask: Mask::zeros(2, 2),
                patient_id: 0,
            }],
        };
        write_dataset(&ds, &dir).unwrap();
        let bytes = fs::read(dir.join("pet_0000.f32")).unwrap();
        assert_eq!(bytes.len(), 16);
        let mut expect = Vec::new();
        for v in [1.0f32, 2.5, -3.0, 0.125] {
            expect.extend_from_slice(&v.to_le_bytes());
        }
        assert_eq!(bytes, expect);
        fs::remove_dir_all(&dir).ok();
    }
}
