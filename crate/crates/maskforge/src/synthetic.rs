//! Deterministic synthetic dataset: colored shapes on textured backgrounds
//! with deliberately corrupted coarse masks.
//!
//! The corruption (shift, grow/shrink, blob noise) leaves enough headroom
//! between the coarse masks and the ground truth that refinement has
//! something to recover, while colors stay separable enough for appearance
//! models to learn from pooled images. All colors are quantized to 8 bits so
//! a dataset written to disk reloads bit-for-bit.

use crate::imagecore::{
    write_binary_mask, write_image, write_label_mask, BinaryMask, DatasetManifest, ImageIoError,
    LabelMask, ManifestRecord, RgbImage,
};
use crate::refinery::{DatasetRecord, RefinementDataset, RefineryError};
use crate::seed::derive_seed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

/// Categories cycled through the generated records.
pub const SYNTHETIC_CATEGORIES: [u8; 3] = [3, 8, 12];

#[derive(Debug, Clone)]
pub struct SyntheticParams {
    pub images: usize,
    pub width: u32,
    pub height: u32,
    /// Per-channel Gaussian noise level.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            images: 30,
            width: 40,
            height: 40,
            noise: 0.14,
            seed: 0,
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller from two uniforms in (0, 1]
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

#[derive(Clone, Copy)]
enum ShapeKind {
    Rectangle,
    Ellipse,
    Diamond,
}

struct Shape {
    kind: ShapeKind,
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Shape {
    fn contains(&self, x: u32, y: u32) -> bool {
        let dx = (f64::from(x) - self.cx) / self.rx;
        let dy = (f64::from(y) - self.cy) / self.ry;
        match self.kind {
            ShapeKind::Rectangle => dx.abs() <= 1.0 && dy.abs() <= 1.0,
            ShapeKind::Ellipse => dx * dx + dy * dy <= 1.0,
            ShapeKind::Diamond => dx.abs() + dy.abs() <= 1.0,
        }
    }
}

fn category_style(category: u8) -> (ShapeKind, [f64; 3]) {
    match category {
        3 => (ShapeKind::Rectangle, [0.85, 0.20, 0.20]),
        8 => (ShapeKind::Ellipse, [0.20, 0.75, 0.25]),
        _ => (ShapeKind::Diamond, [0.80, 0.70, 0.15]),
    }
}

const BACKGROUND_COLOR: [f64; 3] = [0.25, 0.30, 0.55];

fn dilate(mask: &BinaryMask, radius: i64) -> BinaryMask {
    let (w, h) = (mask.width() as i64, mask.height() as i64);
    BinaryMask::from_fn(mask.width(), mask.height(), |x, y| {
        let (x, y) = (x as i64, y as i64);
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                let (nx, ny) = (x + dx, y + dy);
                if (0..w).contains(&nx)
                    && (0..h).contains(&ny)
                    && mask.is_foreground(nx as u32, ny as u32)
                {
                    return true;
                }
            }
        }
        false
    })
}

fn erode(mask: &BinaryMask, radius: i64) -> BinaryMask {
    let (w, h) = (mask.width() as i64, mask.height() as i64);
    BinaryMask::from_fn(mask.width(), mask.height(), |x, y| {
        let (x, y) = (x as i64, y as i64);
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                let (nx, ny) = (x + dx, y + dy);
                if !(0..w).contains(&nx)
                    || !(0..h).contains(&ny)
                    || !mask.is_foreground(nx as u32, ny as u32)
                {
                    return false;
                }
            }
        }
        true
    })
}

fn shift(mask: &BinaryMask, dx: i64, dy: i64) -> BinaryMask {
    let (w, h) = (mask.width() as i64, mask.height() as i64);
    BinaryMask::from_fn(mask.width(), mask.height(), |x, y| {
        let (sx, sy) = (x as i64 - dx, y as i64 - dy);
        (0..w).contains(&sx) && (0..h).contains(&sy) && mask.is_foreground(sx as u32, sy as u32)
    })
}

fn stamp_disc(values: &mut [u8], w: u32, h: u32, cx: i64, cy: i64, r: i64, value: u8) {
    for y in (cy - r).max(0)..=(cy + r).min(h as i64 - 1) {
        for x in (cx - r).max(0)..=(cx + r).min(w as i64 - 1) {
            if (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r {
                values[(y as u32 * w + x as u32) as usize] = value;
            }
        }
    }
}

/// Corrupts a clean mask: translate by a fraction of the shape radius, grow
/// or shrink, then stamp a few foreground blobs outside and holes inside.
fn corrupt_mask(truth: &BinaryMask, radius: f64, rng: &mut ChaCha8Rng) -> BinaryMask {
    let (w, h) = (truth.width(), truth.height());
    let magnitude = radius * rng.gen_range(0.25..0.65);
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let dx = (magnitude * angle.cos()).round() as i64;
    let dy = (magnitude * angle.sin()).round() as i64;
    let mut mask = shift(truth, dx, dy);
    match rng.gen_range(0..3) {
        0 => mask = dilate(&mask, rng.gen_range(1..=2)),
        1 => mask = erode(&mask, 1),
        _ => {}
    }
    let mut values = mask.values().to_vec();
    for _ in 0..rng.gen_range(2..=4) {
        let cx = rng.gen_range(0..w) as i64;
        let cy = rng.gen_range(0..h) as i64;
        stamp_disc(&mut values, w, h, cx, cy, rng.gen_range(1..=2), 1);
    }
    for _ in 0..rng.gen_range(1..=2) {
        let cx = rng.gen_range(0..w) as i64;
        let cy = rng.gen_range(0..h) as i64;
        stamp_disc(&mut values, w, h, cx, cy, rng.gen_range(1..=2), 0);
    }
    BinaryMask::new(w, h, values).expect("corruption preserves dimensions")
}

fn generate_record(index: usize, params: &SyntheticParams) -> DatasetRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(params.seed, index as u64));
    let (w, h) = (params.width, params.height);
    let category = SYNTHETIC_CATEGORIES[index % SYNTHETIC_CATEGORIES.len()];
    let (kind, base_fg) = category_style(category);

    let rx = f64::from(w) * rng.gen_range(0.15..0.24);
    let ry = f64::from(h) * rng.gen_range(0.15..0.24);
    let shape = Shape {
        kind,
        cx: f64::from(w) * rng.gen_range(0.35..0.65),
        cy: f64::from(h) * rng.gen_range(0.35..0.65),
        rx,
        ry,
    };

    let jitter = |rng: &mut ChaCha8Rng| -> [f64; 3] {
        [
            rng.gen_range(-0.06..0.06),
            rng.gen_range(-0.06..0.06),
            rng.gen_range(-0.06..0.06),
        ]
    };
    let fg_jit = jitter(&mut rng);
    let bg_jit = jitter(&mut rng);
    // low-frequency stripes give the background some texture
    let period = rng.gen_range(6.0..14.0);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let vertical = rng.gen_bool(0.5);

    let mut truth_values = vec![0u8; (w * h) as usize];
    let mut pixels = Vec::with_capacity((w * h) as usize);
    for y in 0..h {
        for x in 0..w {
            let inside = shape.contains(x, y);
            if inside {
                truth_values[(y * w + x) as usize] = 1;
            }
            let base = if inside { base_fg } else { BACKGROUND_COLOR };
            let jit = if inside { fg_jit } else { bg_jit };
            let t = if vertical { f64::from(y) } else { f64::from(x) };
            let stripe = 0.05 * (std::f64::consts::TAU * t / period + phase).sin();
            let mut color = [0.0f64; 3];
            for c in 0..3 {
                color[c] =
                    quantize(base[c] + jit[c] + stripe + params.noise * gaussian(&mut rng));
            }
            pixels.push(color);
        }
    }
    let image = RgbImage::new(w, h, pixels).expect("quantized colors stay in range");
    let truth = BinaryMask::new(w, h, truth_values).expect("grid covers every pixel");
    let coarse = corrupt_mask(&truth, rx.min(ry), &mut rng);
    let gt = LabelMask::new(
        w,
        h,
        truth
            .values()
            .iter()
            .map(|&v| if v != 0 { category } else { 0 })
            .collect(),
    )
    .expect("category is a valid label");

    DatasetRecord {
        id: format!("synth_{index:03}"),
        category,
        image,
        coarse,
        gt: Some(gt),
    }
}

pub fn generate_dataset(params: &SyntheticParams) -> Result<RefinementDataset, RefineryError> {
    let records = (0..params.images)
        .map(|i| generate_record(i, params))
        .collect();
    RefinementDataset::new(records)
}

/// Writes `images/`, `coarse/`, `gt/`, and a `manifest.json` with relative
/// paths; returns the manifest path.
pub fn write_dataset(
    dataset: &RefinementDataset,
    dir: &Path,
) -> Result<PathBuf, ImageIoError> {
    for sub in ["images", "coarse", "gt"] {
        let sub_dir = dir.join(sub);
        std::fs::create_dir_all(&sub_dir).map_err(|e| ImageIoError::Io {
            path: sub_dir,
            source: e,
        })?;
    }
    let mut records = Vec::with_capacity(dataset.records().len());
    for rec in dataset.records() {
        let image = PathBuf::from("images").join(format!("{}.png", rec.id));
        let coarse = PathBuf::from("coarse").join(format!("{}.png", rec.id));
        write_image(&rec.image, &dir.join(&image))?;
        write_binary_mask(&rec.coarse, &dir.join(&coarse))?;
        let gt = match &rec.gt {
            Some(mask) => {
                let path = PathBuf::from("gt").join(format!("{}.png", rec.id));
                write_label_mask(mask, &dir.join(&path))?;
                Some(path)
            }
            None => None,
        };
        records.push(ManifestRecord {
            image,
            category: rec.category,
            coarse_mask: Some(coarse),
            gt_mask: gt,
        });
    }
    let manifest_path = dir.join("manifest.json");
    DatasetManifest { records }.save(&manifest_path)?;
    Ok(manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalmetrics::binary_iou;
    use crate::refinery::CoarseSource;
    use tempfile::tempdir;

    #[test]
    fn generation_is_deterministic() {
        let params = SyntheticParams::default();
        let a = generate_dataset(&params).unwrap();
        let b = generate_dataset(&params).unwrap();
        for (ra, rb) in a.records().iter().zip(b.records()) {
            assert_eq!(ra.id, rb.id);
            assert_eq!(ra.image.pixels(), rb.image.pixels());
            assert_eq!(ra.coarse, rb.coarse);
            assert_eq!(ra.gt, rb.gt);
        }
    }

    #[test]
    fn coarse_masks_are_corrupted_but_overlapping() {
        let dataset = generate_dataset(&SyntheticParams::default()).unwrap();
        for rec in dataset.records() {
            let truth = rec.gt.as_ref().unwrap().binarize();
            let iou = binary_iou(&rec.coarse, &truth).unwrap();
            assert!(
                iou < 0.95,
                "{}: coarse mask too clean ({iou:.3})",
                rec.id
            );
            assert!(
                iou > 0.15,
                "{}: coarse mask barely overlaps ({iou:.3})",
                rec.id
            );
        }
    }

    #[test]
    fn shapes_sit_inside_the_coverage_band() {
        let dataset = generate_dataset(&SyntheticParams::default()).unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for rec in dataset.records() {
            seen.insert(rec.category);
            let f = rec.gt.as_ref().unwrap().object_fraction();
            assert!((0.02..0.75).contains(&f), "{}: fraction {f:.3}", rec.id);
        }
        assert!(seen.len() >= 3);
    }

    #[test]
    fn written_dataset_reloads_identically() {
        let params = SyntheticParams {
            images: 4,
            ..SyntheticParams::default()
        };
        let dataset = generate_dataset(&params).unwrap();
        let tmp = tempdir().unwrap();
        let manifest_path = write_dataset(&dataset, tmp.path()).unwrap();
        let manifest = DatasetManifest::load(&manifest_path).unwrap();
        let reloaded = RefinementDataset::load(&manifest, &CoarseSource::Manifest).unwrap();
        assert_eq!(dataset.records().len(), reloaded.records().len());
        for (a, b) in dataset.records().iter().zip(reloaded.records()) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.category, b.category);
            assert_eq!(a.image.pixels(), b.image.pixels());
            assert_eq!(a.coarse, b.coarse);
            assert_eq!(a.gt, b.gt);
        }
    }
}
