//! Pixel-classifier backends for the refinement loop.
//!
//! The loop only needs something that trains on (image, label mask) pairs and
//! predicts label masks. Three interchangeable backends live here: a native
//! appearance model (per-class color+position mixtures), an oracle that
//! replays stored ground truth for testing, and a directory-based exchange
//! for models trained by external tools. A saliency heuristic for producing
//! coarse masks from nothing rounds the module out.

use crate::gmm::{fit_gmm, Gmm, GmmDto};
use crate::imagecore::{BinaryMask, ImageIoError, LabelMask, RgbImage, IGNORE, NUM_CLASSES};
use crate::seed::derive_seed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Per-class training pixels are capped at this many feature vectors to
/// bound EM cost; the subsample is seeded.
pub const MAX_CLASS_SAMPLES: usize = 50_000;

const APPEARANCE_EM_MAX_ITER: usize = 20;
const APPEARANCE_EM_TOL: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum SegmentError {
    #[error("no labeled classes in the training examples")]
    NoClasses,
    #[error("backend has not been trained")]
    NotTrained,
    #[error("no prediction available for record {0}")]
    MissingPrediction(String),
    #[error("prediction for {id} is {gw}x{gh}, expected {ew}x{eh}")]
    DimensionMismatch {
        id: String,
        ew: u32,
        eh: u32,
        gw: u32,
        gh: u32,
    },
    #[error("saliency sigma must be positive, got {0}")]
    BadSigma(f64),
    #[error("fixed threshold must lie in [0, 1], got {0}")]
    BadThreshold(f64),
    #[error("exchange manifest {path}: {detail}")]
    BadExchangeManifest { path: PathBuf, detail: String },
    #[error(transparent)]
    ImageIo(#[from] ImageIoError),
    #[error(transparent)]
    Gmm(#[from] crate::gmm::GmmError),
}

/// One training pair handed to a backend.
#[derive(Debug, Clone, Copy)]
pub struct TrainExample<'a> {
    pub id: &'a str,
    pub image: &'a RgbImage,
    pub labels: &'a LabelMask,
}

/// A trainable pixel classifier.
///
/// `predict` output must match the input dimensions and contain only class
/// ids 0..=20 (never the ignore value); ignore pixels in training masks must
/// contribute nothing. The `id` lets replay-style backends look records up.
pub trait SegmenterBackend {
    fn train(&mut self, examples: &[TrainExample<'_>]) -> Result<(), SegmentError>;
    fn predict(&self, id: &str, image: &RgbImage) -> Result<LabelMask, SegmentError>;
}

fn feature(z: &[f64; 3], x: u32, y: u32, w: u32, h: u32) -> [f64; 5] {
    [
        z[0],
        z[1],
        z[2],
        f64::from(x) / f64::from(w),
        f64::from(y) / f64::from(h),
    ]
}

/// Per-class mixtures over (r, g, b, x/width, y/height) with priors from
/// training pixel counts.
#[derive(Debug, Clone, PartialEq)]
pub struct AppearanceModel {
    classes: Vec<u8>,
    priors: Vec<f64>,
    models: Vec<Gmm<5>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AppearanceModelDto {
    pub classes: Vec<u8>,
    pub priors: Vec<f64>,
    pub models: Vec<GmmDto>,
}

impl AppearanceModel {
    pub fn classes(&self) -> &[u8] {
        &self.classes
    }

    pub fn priors(&self) -> &[f64] {
        &self.priors
    }

    pub fn to_dto(&self) -> AppearanceModelDto {
        AppearanceModelDto {
            classes: self.classes.clone(),
            priors: self.priors.clone(),
            models: self.models.iter().map(|m| m.to_dto()).collect(),
        }
    }

    pub fn from_dto(dto: &AppearanceModelDto) -> Result<Self, SegmentError> {
        if dto.classes.is_empty()
            || dto.classes.len() != dto.priors.len()
            || dto.classes.len() != dto.models.len()
        {
            return Err(SegmentError::NoClasses);
        }
        let models = dto
            .models
            .iter()
            .map(Gmm::<5>::from_dto)
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            classes: dto.classes.clone(),
            priors: dto.priors.clone(),
            models,
        })
    }
}

/// Fits one mixture per observed class over color+position features.
///
/// Priors are proportional to the class pixel counts before subsampling.
/// A class with fewer than `k` pixels falls back to a single component.
pub fn train_appearance(
    examples: &[TrainExample<'_>],
    k: usize,
    seed: u64,
) -> Result<AppearanceModel, SegmentError> {
    let mut buckets: Vec<Vec<[f64; 5]>> = (0..NUM_CLASSES).map(|_| Vec::new()).collect();
    for ex in examples {
        let (w, h) = (ex.image.width(), ex.image.height());
        for y in 0..h {
            for x in 0..w {
                let label = ex.labels.label(x, y);
                if label == IGNORE {
                    continue;
                }
                let z = ex.image.pixel(x, y);
                buckets[label as usize].push(feature(&z, x, y, w, h));
            }
        }
    }
    let total: usize = buckets.iter().map(|b| b.len()).sum();
    if total == 0 {
        return Err(SegmentError::NoClasses);
    }

    let mut classes = Vec::new();
    let mut priors = Vec::new();
    let mut models = Vec::new();
    for (class, samples) in buckets.iter_mut().enumerate() {
        if samples.is_empty() {
            continue;
        }
        let count = samples.len();
        if count > MAX_CLASS_SAMPLES {
            // seeded partial Fisher-Yates, then truncate
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(seed, 2 * class as u64));
            for i in 0..MAX_CLASS_SAMPLES {
                let j = rng.gen_range(i..count);
                samples.swap(i, j);
            }
            samples.truncate(MAX_CLASS_SAMPLES);
        }
        let k_class = if count < k { 1 } else { k };
        let model = fit_gmm(
            samples,
            k_class,
            derive_seed(seed, 2 * class as u64 + 1),
            APPEARANCE_EM_MAX_ITER,
            APPEARANCE_EM_TOL,
        )?;
        classes.push(class as u8);
        priors.push(count as f64 / total as f64);
        models.push(model);
    }
    Ok(AppearanceModel {
        classes,
        priors,
        models,
    })
}

fn majority_filter_3x3(labels: &[u8], w: usize, h: usize) -> Vec<u8> {
    let mut out = vec![0u8; labels.len()];
    for y in 0..h {
        for x in 0..w {
            let mut counts = [0u8; NUM_CLASSES];
            for dy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for dx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    counts[labels[dy * w + dx] as usize] += 1;
                }
            }
            let mut best = 0usize;
            for (c, &n) in counts.iter().enumerate() {
                if n > counts[best] {
                    best = c;
                }
            }
            out[y * w + x] = best as u8;
        }
    }
    out
}

/// Labels every pixel with the class maximizing log prior + log density.
/// Ties go to the lower class id. The optional 3×3 majority filter runs once.
pub fn predict_appearance(
    model: &AppearanceModel,
    image: &RgbImage,
    majority_filter: bool,
) -> LabelMask {
    let (w, h) = (image.width(), image.height());
    let log_priors: Vec<f64> = model.priors.iter().map(|p| p.ln()).collect();
    let mut labels = Vec::with_capacity(image.pixel_count());
    for y in 0..h {
        for x in 0..w {
            let f = feature(&image.pixel(x, y), x, y, w, h);
            let mut best = 0usize;
            let mut best_score = f64::NEG_INFINITY;
            for (c, gmm) in model.models.iter().enumerate() {
                let score = log_priors[c] + gmm.log_density(&f);
                if score > best_score {
                    best_score = score;
                    best = c;
                }
            }
            labels.push(model.classes[best]);
        }
    }
    let labels = if majority_filter {
        majority_filter_3x3(&labels, w as usize, h as usize)
    } else {
        labels
    };
    LabelMask::new(w, h, labels).expect("predicted labels are valid class ids")
}

/// Native backend: appearance model retrained from scratch on every call.
/// Each training round draws a fresh seed stream so runs stay reproducible.
#[derive(Debug, Clone)]
pub struct AppearanceBackend {
    components: usize,
    majority_filter: bool,
    seed: u64,
    train_calls: u64,
    model: Option<AppearanceModel>,
}

impl AppearanceBackend {
    pub fn new(components: usize, seed: u64) -> Self {
        Self {
            components,
            majority_filter: true,
            seed,
            train_calls: 0,
            model: None,
        }
    }

    pub fn with_majority_filter(mut self, on: bool) -> Self {
        self.majority_filter = on;
        self
    }

    pub fn model(&self) -> Option<&AppearanceModel> {
        self.model.as_ref()
    }
}

impl SegmenterBackend for AppearanceBackend {
    fn train(&mut self, examples: &[TrainExample<'_>]) -> Result<(), SegmentError> {
        let round_seed = derive_seed(self.seed, self.train_calls);
        self.model = Some(train_appearance(examples, self.components, round_seed)?);
        self.train_calls += 1;
        Ok(())
    }

    fn predict(&self, _id: &str, image: &RgbImage) -> Result<LabelMask, SegmentError> {
        let model = self.model.as_ref().ok_or(SegmentError::NotTrained)?;
        Ok(predict_appearance(model, image, self.majority_filter))
    }
}

/// Test backend replaying stored ground truth by record id. Training is a
/// no-op; ignore pixels are emitted as background so predictions satisfy the
/// backend contract.
#[derive(Debug, Clone, Default)]
pub struct OracleBackend {
    truths: HashMap<String, LabelMask>,
}

impl OracleBackend {
    pub fn new(truths: HashMap<String, LabelMask>) -> Self {
        Self { truths }
    }

    pub fn insert(&mut self, id: impl Into<String>, mask: LabelMask) {
        self.truths.insert(id.into(), mask);
    }
}

impl SegmenterBackend for OracleBackend {
    fn train(&mut self, _examples: &[TrainExample<'_>]) -> Result<(), SegmentError> {
        Ok(())
    }

    fn predict(&self, id: &str, image: &RgbImage) -> Result<LabelMask, SegmentError> {
        let truth = self
            .truths
            .get(id)
            .ok_or_else(|| SegmentError::MissingPrediction(id.to_string()))?;
        if (truth.width(), truth.height()) != (image.width(), image.height()) {
            return Err(SegmentError::DimensionMismatch {
                id: id.to_string(),
                ew: image.width(),
                eh: image.height(),
                gw: truth.width(),
                gh: truth.height(),
            });
        }
        let labels = truth
            .labels()
            .iter()
            .map(|&l| if l == IGNORE { 0 } else { l })
            .collect();
        Ok(LabelMask::new(truth.width(), truth.height(), labels)
            .expect("stored mask dimensions are valid"))
    }
}

// ---------------------------------------------------------------------------
// Saliency-based coarse masks
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdMode {
    Otsu,
    Fixed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaliencyParams {
    /// Width of the center prior as a fraction of the image diagonal.
    pub center_prior_sigma: f64,
    pub threshold_mode: ThresholdMode,
    pub fixed_threshold: f64,
}

impl Default for SaliencyParams {
    fn default() -> Self {
        Self {
            center_prior_sigma: 0.33,
            threshold_mode: ThresholdMode::Otsu,
            fixed_threshold: 0.5,
        }
    }
}

impl SaliencyParams {
    pub fn validate(&self) -> Result<(), SegmentError> {
        if !(self.center_prior_sigma > 0.0) || !self.center_prior_sigma.is_finite() {
            return Err(SegmentError::BadSigma(self.center_prior_sigma));
        }
        if !(0.0..=1.0).contains(&self.fixed_threshold) {
            return Err(SegmentError::BadThreshold(self.fixed_threshold));
        }
        Ok(())
    }
}

/// Otsu's threshold over a 256-bin histogram of values in [0, 1]: the bin
/// boundary maximizing between-class variance. Values above it are kept.
fn otsu_threshold(values: &[f64]) -> f64 {
    let mut hist = [0u64; 256];
    for &v in values {
        let bin = ((v * 255.0).round() as usize).min(255);
        hist[bin] += 1;
    }
    let total: u64 = values.len() as u64;
    let total_sum: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &n)| i as f64 * n as f64)
        .sum();
    let mut best_var = -1.0;
    let mut best_t = 0usize;
    let mut w0 = 0u64;
    let mut sum0 = 0.0;
    for t in 0..256 {
        w0 += hist[t];
        if w0 == 0 {
            continue;
        }
        let w1 = total - w0;
        if w1 == 0 {
            break;
        }
        sum0 += t as f64 * hist[t] as f64;
        let m0 = sum0 / w0 as f64;
        let m1 = (total_sum - sum0) / w1 as f64;
        let var = w0 as f64 * w1 as f64 * (m0 - m1) * (m0 - m1);
        if var > best_var {
            best_var = var;
            best_t = t;
        }
    }
    best_t as f64 / 255.0
}

/// Coarse foreground guess: color contrast against the image border, damped
/// by a Gaussian prior around the image center, then thresholded.
pub fn coarse_saliency_mask(
    image: &RgbImage,
    params: &SaliencyParams,
) -> Result<BinaryMask, SegmentError> {
    params.validate()?;
    let (w, h) = (image.width(), image.height());

    // mean color of the one-pixel border frame
    let mut border_sum = [0.0f64; 3];
    let mut border_n = 0usize;
    for y in 0..h {
        for x in 0..w {
            if x == 0 || y == 0 || x == w - 1 || y == h - 1 {
                let z = image.pixel(x, y);
                for c in 0..3 {
                    border_sum[c] += z[c];
                }
                border_n += 1;
            }
        }
    }
    let border_mean = border_sum.map(|s| s / border_n as f64);

    let diagonal = f64::from(w).hypot(f64::from(h));
    let sigma = params.center_prior_sigma * diagonal;
    let cx = f64::from(w - 1) / 2.0;
    let cy = f64::from(h - 1) / 2.0;
    let mut saliency = Vec::with_capacity(image.pixel_count());
    for y in 0..h {
        for x in 0..w {
            let z = image.pixel(x, y);
            let contrast = (0..3)
                .map(|c| (z[c] - border_mean[c]) * (z[c] - border_mean[c]))
                .sum::<f64>()
                .sqrt();
            // Averaging the border leaves ~1 ulp of fuzz on colors that match
            // it exactly; clamp so uniform regions stay exactly non-salient
            // (normalization would otherwise blow the fuzz up to 1.0).
            let contrast = if contrast < 1e-12 { 0.0 } else { contrast };
            let d2 = (f64::from(x) - cx).powi(2) + (f64::from(y) - cy).powi(2);
            saliency.push(contrast * (-d2 / (2.0 * sigma * sigma)).exp());
        }
    }
    let max = saliency.iter().cloned().fold(0.0f64, f64::max);
    if max > 0.0 {
        for s in saliency.iter_mut() {
            *s /= max;
        }
    }
    let threshold = match params.threshold_mode {
        ThresholdMode::Fixed => params.fixed_threshold,
        ThresholdMode::Otsu => otsu_threshold(&saliency),
    };
    Ok(BinaryMask::new(
        w,
        h,
        saliency.iter().map(|&s| u8::from(s > threshold)).collect(),
    )
    .expect("saliency covers every pixel"))
}

// ---------------------------------------------------------------------------
// External exchange
// ---------------------------------------------------------------------------

/// One record exported for an external segmenter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExchangeRecord {
    pub id: String,
    pub image: PathBuf,
    pub category: u8,
    pub width: u32,
    pub height: u32,
    /// Path of the exported label mask, relative to the round directory.
    pub labels: PathBuf,
}

/// Training pair handed to `export_exchange_round`.
#[derive(Debug, Clone, Copy)]
pub struct ExchangeExport<'a> {
    pub id: &'a str,
    pub image_path: &'a Path,
    pub category: u8,
    pub labels: &'a LabelMask,
}

fn round_dir(base: &Path, round: usize) -> PathBuf {
    base.join(format!("round_{round}"))
}

/// Writes `round_<k>/train_manifest.json` and `round_<k>/labels/<id>.png`.
/// The external tool is expected to fill `round_<k>/predictions/<id>.png`.
pub fn export_exchange_round(
    base: &Path,
    round: usize,
    records: &[ExchangeExport<'_>],
) -> Result<PathBuf, SegmentError> {
    let dir = round_dir(base, round);
    let labels_dir = dir.join("labels");
    std::fs::create_dir_all(&labels_dir).map_err(|e| ImageIoError::Io {
        path: labels_dir.clone(),
        source: e,
    })?;
    let mut manifest = Vec::with_capacity(records.len());
    for r in records {
        let rel = PathBuf::from("labels").join(format!("{}.png", r.id));
        crate::imagecore::write_label_mask(r.labels, &dir.join(&rel))?;
        manifest.push(ExchangeRecord {
            id: r.id.to_string(),
            image: r.image_path.to_path_buf(),
            category: r.category,
            width: r.labels.width(),
            height: r.labels.height(),
            labels: rel,
        });
    }
    let manifest_path = dir.join("train_manifest.json");
    let file = File::create(&manifest_path).map_err(|e| ImageIoError::Io {
        path: manifest_path.clone(),
        source: e,
    })?;
    serde_json::to_writer_pretty(BufWriter::new(file), &manifest).map_err(|e| {
        SegmentError::BadExchangeManifest {
            path: manifest_path.clone(),
            detail: e.to_string(),
        }
    })?;
    Ok(dir)
}

/// Reads `round_<k>/predictions/<id>.png` for every manifest record,
/// validating presence, dimensions, and label range.
pub fn import_exchange_round(
    base: &Path,
    round: usize,
) -> Result<Vec<(String, LabelMask)>, SegmentError> {
    let dir = round_dir(base, round);
    let manifest_path = dir.join("train_manifest.json");
    let file = File::open(&manifest_path).map_err(|e| ImageIoError::Io {
        path: manifest_path.clone(),
        source: e,
    })?;
    let manifest: Vec<ExchangeRecord> = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| SegmentError::BadExchangeManifest {
            path: manifest_path.clone(),
            detail: e.to_string(),
        })?;
    let mut out = Vec::with_capacity(manifest.len());
    for record in manifest {
        let pred_path = dir.join("predictions").join(format!("{}.png", record.id));
        if !pred_path.is_file() {
            return Err(SegmentError::MissingPrediction(record.id));
        }
        let mask = crate::imagecore::read_label_mask(&pred_path)?;
        if (mask.width(), mask.height()) != (record.width, record.height) {
            return Err(SegmentError::DimensionMismatch {
                id: record.id,
                ew: record.width,
                eh: record.height,
                gw: mask.width(),
                gh: mask.height(),
            });
        }
        out.push((record.id, mask));
    }
    Ok(out)
}
