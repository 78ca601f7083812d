//! Recursive pseudo-label refinement.
//!
//! Masks start as enhanced coarse guesses and are replaced round by round:
//! train a segmenter on the current masks of active images, predict every
//! image, then post-process each prediction with three strategies in order:
//! foreign-category suppression, optional re-enhancement with the graph-cut
//! segmenter, and a coverage filter that deactivates implausible masks.
//! Deactivated images stay in the state, keep receiving predictions, and
//! re-enter training as soon as a later mask passes the filter.

use crate::evalmetrics::{ConfusionMatrix, EvalError, EvalReport};
use crate::grabcut::{run_grabcut, GrabCutError, GrabCutParams};
use crate::imagecore::{
    load_image, read_binary_mask, read_label_mask, stem_of, write_label_mask, BinaryMask,
    DatasetManifest, ImageIoError, LabelMask, RgbImage, BACKGROUND, IGNORE, NUM_CLASSES,
};
use crate::seed::derive_seed;
use crate::segment::{
    coarse_saliency_mask, SaliencyParams, SegmentError, SegmenterBackend, TrainExample,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RefineryError {
    #[error("rounds must be at least 1")]
    ZeroRounds,
    #[error("coverage thresholds must satisfy 0 <= low < high <= 1, got {low} and {high}")]
    BadCoverage { low: f64, high: f64 },
    #[error("category {0} out of range 1..=20")]
    BadCategory(u8),
    #[error("duplicate record id {0}")]
    DuplicateId(String),
    #[error("record {id}: {what} is {gw}x{gh}, expected {ew}x{eh}")]
    DimensionMismatch {
        id: String,
        what: &'static str,
        ew: u32,
        eh: u32,
        gw: u32,
        gh: u32,
    },
    #[error("record {0} has no coarse mask in the manifest")]
    MissingCoarseMask(String),
    #[error("round {0}: no active records left to train on")]
    NoActiveRecords(usize),
    #[error("state and dataset disagree at index {index}: {state_id} vs {dataset_id}")]
    StateDatasetMismatch {
        index: usize,
        state_id: String,
        dataset_id: String,
    },
    #[error("snapshot {path}: {detail}")]
    BadSnapshot { path: PathBuf, detail: String },
    #[error(transparent)]
    ImageIo(#[from] ImageIoError),
    #[error(transparent)]
    GrabCut(#[from] GrabCutError),
    #[error(transparent)]
    Segment(#[from] SegmentError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Semantic mode keeps each record's manifest category; binary mode collapses
/// every object to the generic foreground label 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RefinementMode {
    #[serde(rename = "semantic-21-class")]
    Semantic,
    #[serde(rename = "binary-foreground")]
    BinaryForeground,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefinementConfig {
    pub rounds: usize,
    pub low_coverage: f64,
    pub high_coverage: f64,
    pub apply_grabcut_between_rounds: bool,
    /// Graph-cut parameters for init and between-round enhancement. The
    /// `seed` field is ignored here: each record draws its own stream from
    /// `self.seed` so results stay independent of scheduling.
    pub grabcut: GrabCutParams,
    pub mode: RefinementMode,
    pub seed: u64,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        Self {
            rounds: 5,
            low_coverage: 0.01,
            high_coverage: 0.80,
            apply_grabcut_between_rounds: true,
            grabcut: GrabCutParams::default(),
            mode: RefinementMode::Semantic,
            seed: 0,
        }
    }
}

impl RefinementConfig {
    pub fn validate(&self) -> Result<(), RefineryError> {
        if self.rounds == 0 {
            return Err(RefineryError::ZeroRounds);
        }
        let (low, high) = (self.low_coverage, self.high_coverage);
        if !low.is_finite() || !high.is_finite() || !(0.0 <= low && low < high && high <= 1.0) {
            return Err(RefineryError::BadCoverage { low, high });
        }
        self.grabcut.validate()?;
        Ok(())
    }
}

fn effective_label(mode: RefinementMode, category: u8) -> u8 {
    match mode {
        RefinementMode::Semantic => category,
        RefinementMode::BinaryForeground => 1,
    }
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

/// Fully loaded input record: the image never changes; `coarse` seeds round
/// zero; `gt` is only consulted for evaluation.
#[derive(Debug, Clone)]
pub struct DatasetRecord {
    pub id: String,
    pub category: u8,
    pub image: RgbImage,
    pub coarse: BinaryMask,
    pub gt: Option<LabelMask>,
}

/// Where round-zero masks come from: the manifest's mask files, or the
/// saliency heuristic when nothing was annotated.
#[derive(Debug, Clone)]
pub enum CoarseSource {
    Manifest,
    Saliency(SaliencyParams),
}

#[derive(Debug, Clone)]
pub struct RefinementDataset {
    records: Vec<DatasetRecord>,
}

impl RefinementDataset {
    pub fn new(records: Vec<DatasetRecord>) -> Result<Self, RefineryError> {
        let mut seen = std::collections::HashSet::new();
        for rec in &records {
            if !(1..NUM_CLASSES as u8).contains(&rec.category) {
                return Err(RefineryError::BadCategory(rec.category));
            }
            if !seen.insert(rec.id.clone()) {
                return Err(RefineryError::DuplicateId(rec.id.clone()));
            }
            let (ew, eh) = (rec.image.width(), rec.image.height());
            if (rec.coarse.width(), rec.coarse.height()) != (ew, eh) {
                return Err(RefineryError::DimensionMismatch {
                    id: rec.id.clone(),
                    what: "coarse mask",
                    ew,
                    eh,
                    gw: rec.coarse.width(),
                    gh: rec.coarse.height(),
                });
            }
            if let Some(gt) = &rec.gt {
                if (gt.width(), gt.height()) != (ew, eh) {
                    return Err(RefineryError::DimensionMismatch {
                        id: rec.id.clone(),
                        what: "ground truth",
                        ew,
                        eh,
                        gw: gt.width(),
                        gh: gt.height(),
                    });
                }
            }
        }
        Ok(Self { records })
    }

    pub fn load(manifest: &DatasetManifest, source: &CoarseSource) -> Result<Self, RefineryError> {
        let mut records = Vec::with_capacity(manifest.records.len());
        for entry in &manifest.records {
            let image = load_image(&entry.image)?;
            let coarse = match source {
                CoarseSource::Manifest => match &entry.coarse_mask {
                    Some(path) => read_binary_mask(path)?,
                    None => {
                        return Err(RefineryError::MissingCoarseMask(stem_of(&entry.image)))
                    }
                },
                CoarseSource::Saliency(params) => coarse_saliency_mask(&image, params)?,
            };
            let gt = entry
                .gt_mask
                .as_ref()
                .map(|p| read_label_mask(p))
                .transpose()?;
            records.push(DatasetRecord {
                id: stem_of(&entry.image),
                category: entry.category,
                image,
                coarse,
                gt,
            });
        }
        Self::new(records)
    }

    pub fn records(&self) -> &[DatasetRecord] {
        &self.records
    }
}

// ---------------------------------------------------------------------------
// State
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub foreground_fraction: f64,
    pub active: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordState {
    pub id: String,
    pub category: u8,
    pub mask: LabelMask,
    pub active: bool,
    /// One entry at init plus one per completed round.
    pub history: Vec<HistoryEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinementState {
    pub records: Vec<RecordState>,
    pub round_index: usize,
}

// ---------------------------------------------------------------------------
// Per-mask operations
// ---------------------------------------------------------------------------

/// Assigns the image-level category to every foreground pixel.
pub fn assign_semantic_labels(
    mask: &BinaryMask,
    category: u8,
) -> Result<LabelMask, RefineryError> {
    if !(1..NUM_CLASSES as u8).contains(&category) {
        return Err(RefineryError::BadCategory(category));
    }
    let labels = mask
        .values()
        .iter()
        .map(|&v| if v != 0 { category } else { BACKGROUND })
        .collect();
    Ok(LabelMask::new(mask.width(), mask.height(), labels)
        .expect("category is a valid label"))
}

/// Keep the mask iff its object coverage lies inside [low, high]. The bounds
/// are strict ("less than 1%", "more than 80%"), so the endpoints stay.
pub fn coverage_filter(mask: &LabelMask, low: f64, high: f64) -> bool {
    debug_assert!(low < high);
    let f = mask.object_fraction();
    !(f < low || f > high)
}

/// Zeroes every labeled pixel that is not the record's own category.
/// Ignore pixels pass through untouched.
pub fn suppress_foreign(pred: &LabelMask, category: u8) -> LabelMask {
    debug_assert!((1..NUM_CLASSES as u8).contains(&category));
    let labels = pred
        .labels()
        .iter()
        .map(|&l| {
            if l == category || l == IGNORE {
                l
            } else {
                BACKGROUND
            }
        })
        .collect();
    LabelMask::new(pred.width(), pred.height(), labels).expect("labels unchanged or zeroed")
}

/// Graph-cut enhancement of a binary mask; all-foreground or all-background
/// inputs pass through unchanged since they pin no color models.
fn enhance_binary(
    image: &RgbImage,
    mask: &BinaryMask,
    params: &GrabCutParams,
) -> Result<BinaryMask, RefineryError> {
    let fg = mask.foreground_count();
    if fg == 0 || fg == image.pixel_count() {
        return Ok(mask.clone());
    }
    Ok(run_grabcut(image, mask, params)?)
}

/// Re-enhances an already-suppressed prediction: binarize, run the graph-cut
/// segmenter seeded from it, and restore the category label. Degenerate
/// masks come back unchanged.
pub fn reenhance(
    image: &RgbImage,
    pred: &LabelMask,
    category: u8,
    params: &GrabCutParams,
) -> Result<LabelMask, RefineryError> {
    let bin = pred.binarize();
    let fg = bin.foreground_count();
    if fg == 0 || fg == image.pixel_count() {
        return Ok(pred.clone());
    }
    let enhanced = run_grabcut(image, &bin, params)?;
    assign_semantic_labels(&enhanced, category)
}

// ---------------------------------------------------------------------------
// Round loop
// ---------------------------------------------------------------------------

fn record_stream(config_seed: u64, round: usize, index: usize) -> u64 {
    derive_seed(derive_seed(config_seed, round as u64), index as u64)
}

/// Builds round-zero state: enhance each coarse mask, label it with the
/// record's category, and judge it with the coverage filter.
pub fn init_state(
    dataset: &RefinementDataset,
    config: &RefinementConfig,
) -> Result<RefinementState, RefineryError> {
    config.validate()?;
    let records = dataset
        .records
        .par_iter()
        .enumerate()
        .map(|(i, rec)| {
            let mut params = config.grabcut.clone();
            params.seed = record_stream(config.seed, 0, i);
            let enhanced = enhance_binary(&rec.image, &rec.coarse, &params)?;
            let label = effective_label(config.mode, rec.category);
            let mask = assign_semantic_labels(&enhanced, label)?;
            let active = coverage_filter(&mask, config.low_coverage, config.high_coverage);
            Ok(RecordState {
                id: rec.id.clone(),
                category: rec.category,
                history: vec![HistoryEntry {
                    foreground_fraction: mask.object_fraction(),
                    active,
                }],
                mask,
                active,
            })
        })
        .collect::<Result<Vec<_>, RefineryError>>()?;
    Ok(RefinementState {
        records,
        round_index: 0,
    })
}

/// One training round: fit the backend on active records, predict everything
/// (inactive records included, so they can re-enter), then per record apply
/// suppression, optional re-enhancement, and the coverage filter.
pub fn run_round<B: SegmenterBackend + Sync>(
    state: &mut RefinementState,
    dataset: &RefinementDataset,
    backend: &mut B,
    config: &RefinementConfig,
) -> Result<(), RefineryError> {
    config.validate()?;
    if state.records.len() != dataset.records.len() {
        return Err(RefineryError::StateDatasetMismatch {
            index: state.records.len().min(dataset.records.len()),
            state_id: format!("{} records", state.records.len()),
            dataset_id: format!("{} records", dataset.records.len()),
        });
    }
    for (i, (rs, dr)) in state.records.iter().zip(&dataset.records).enumerate() {
        if rs.id != dr.id {
            return Err(RefineryError::StateDatasetMismatch {
                index: i,
                state_id: rs.id.clone(),
                dataset_id: dr.id.clone(),
            });
        }
    }

    let round = state.round_index + 1;
    let examples: Vec<TrainExample<'_>> = state
        .records
        .iter()
        .zip(&dataset.records)
        .filter(|(rs, _)| rs.active)
        .map(|(rs, dr)| TrainExample {
            id: &rs.id,
            image: &dr.image,
            labels: &rs.mask,
        })
        .collect();
    if examples.is_empty() {
        return Err(RefineryError::NoActiveRecords(round));
    }
    backend.train(&examples)?;

    let shared: &B = backend;
    let outcomes = (0..dataset.records.len())
        .into_par_iter()
        .map(|i| {
            let rec = &dataset.records[i];
            let pred = shared.predict(&rec.id, &rec.image)?;
            if (pred.width(), pred.height()) != (rec.image.width(), rec.image.height()) {
                return Err(RefineryError::DimensionMismatch {
                    id: rec.id.clone(),
                    what: "prediction",
                    ew: rec.image.width(),
                    eh: rec.image.height(),
                    gw: pred.width(),
                    gh: pred.height(),
                });
            }
            let label = effective_label(config.mode, rec.category);
            let suppressed = suppress_foreign(&pred, label);
            let mask = if config.apply_grabcut_between_rounds {
                let mut params = config.grabcut.clone();
                params.seed = record_stream(config.seed, round, i);
                reenhance(&rec.image, &suppressed, label, &params)?
            } else {
                suppressed
            };
            let active = coverage_filter(&mask, config.low_coverage, config.high_coverage);
            Ok((mask, active))
        })
        .collect::<Result<Vec<_>, RefineryError>>()?;

    for (rs, (mask, active)) in state.records.iter_mut().zip(outcomes) {
        rs.history.push(HistoryEntry {
            foreground_fraction: mask.object_fraction(),
            active,
        });
        rs.mask = mask;
        rs.active = active;
    }
    state.round_index = round;
    Ok(())
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordScore {
    pub id: String,
    pub foreground_iou: f64,
}

/// Per-round quality snapshot against ground truth. `mean_foreground_iou`
/// averages each record's binary IOU for its own category; `semantic` is the
/// dataset-level confusion report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundEval {
    pub round: usize,
    pub mean_foreground_iou: f64,
    pub per_record: Vec<RecordScore>,
    pub semantic: EvalReport,
}

fn record_foreground_iou(
    mask: &LabelMask,
    gt: &LabelMask,
    category: u8,
    mode: RefinementMode,
) -> f64 {
    let mut inter = 0u64;
    let mut union = 0u64;
    for (&p, &g) in mask.labels().iter().zip(gt.labels()) {
        if g == IGNORE {
            continue;
        }
        let pf = p != BACKGROUND && p != IGNORE;
        let gf = match mode {
            RefinementMode::Semantic => g == category,
            RefinementMode::BinaryForeground => g != BACKGROUND,
        };
        inter += u64::from(pf && gf);
        union += u64::from(pf || gf);
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Evaluates current masks against whatever ground truth the dataset has.
/// Returns `None` when no record carries usable ground truth.
pub fn evaluate_state(
    state: &RefinementState,
    dataset: &RefinementDataset,
    mode: RefinementMode,
) -> Result<Option<RoundEval>, RefineryError> {
    let mut confusion = ConfusionMatrix::new();
    let mut per_record = Vec::new();
    for (rs, dr) in state.records.iter().zip(&dataset.records) {
        let Some(gt) = &dr.gt else { continue };
        let gt_eval = match mode {
            RefinementMode::Semantic => gt.clone(),
            RefinementMode::BinaryForeground => {
                // collapse every object class to the generic foreground label
                let labels = gt
                    .labels()
                    .iter()
                    .map(|&l| match l {
                        BACKGROUND | IGNORE => l,
                        _ => 1,
                    })
                    .collect();
                LabelMask::new(gt.width(), gt.height(), labels).expect("labels narrowed")
            }
        };
        confusion.accumulate(&rs.mask, &gt_eval)?;
        per_record.push(RecordScore {
            id: rs.id.clone(),
            foreground_iou: record_foreground_iou(&rs.mask, gt, rs.category, mode),
        });
    }
    if per_record.is_empty() {
        return Ok(None);
    }
    let semantic = match EvalReport::from_confusion(&confusion) {
        Ok(r) => r,
        Err(EvalError::NoPixels) => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    let mean = per_record.iter().map(|r| r.foreground_iou).sum::<f64>()
        / per_record.len() as f64;
    Ok(Some(RoundEval {
        round: state.round_index,
        mean_foreground_iou: mean,
        per_record,
        semantic,
    }))
}

// ---------------------------------------------------------------------------
// Snapshots
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct StateDto {
    round_index: usize,
    records: Vec<RecordDto>,
}

#[derive(Serialize, Deserialize)]
struct RecordDto {
    id: String,
    category: u8,
    active: bool,
    history: Vec<HistoryEntry>,
}

/// Writes `masks/<id>.png` for every record plus `state.json`, and
/// `eval.json` when an evaluation is supplied.
pub fn write_snapshot(
    state: &RefinementState,
    dir: &Path,
    eval: Option<&RoundEval>,
) -> Result<(), RefineryError> {
    let masks_dir = dir.join("masks");
    std::fs::create_dir_all(&masks_dir).map_err(|e| ImageIoError::Io {
        path: masks_dir.clone(),
        source: e,
    })?;
    for rec in &state.records {
        write_label_mask(&rec.mask, &masks_dir.join(format!("{}.png", rec.id)))?;
    }
    let dto = StateDto {
        round_index: state.round_index,
        records: state
            .records
            .iter()
            .map(|r| RecordDto {
                id: r.id.clone(),
                category: r.category,
                active: r.active,
                history: r.history.clone(),
            })
            .collect(),
    };
    write_json(&dir.join("state.json"), &dto)?;
    if let Some(eval) = eval {
        write_json(&dir.join("eval.json"), eval)?;
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), RefineryError> {
    let file = File::create(path).map_err(|e| ImageIoError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut writer = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut writer, value).map_err(|e| RefineryError::BadSnapshot {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    use std::io::Write as _;
    writer.write_all(b"\n").map_err(|e| ImageIoError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

/// Rebuilds a `RefinementState` from a snapshot directory, so a run can be
/// resumed round by round.
pub fn load_snapshot(dir: &Path) -> Result<RefinementState, RefineryError> {
    let state_path = dir.join("state.json");
    let file = File::open(&state_path).map_err(|e| ImageIoError::Io {
        path: state_path.clone(),
        source: e,
    })?;
    let dto: StateDto =
        serde_json::from_reader(BufReader::new(file)).map_err(|e| RefineryError::BadSnapshot {
            path: state_path.clone(),
            detail: e.to_string(),
        })?;
    let mut records = Vec::with_capacity(dto.records.len());
    for r in dto.records {
        let mask = read_label_mask(&dir.join("masks").join(format!("{}.png", r.id)))?;
        records.push(RecordState {
            id: r.id,
            category: r.category,
            mask,
            active: r.active,
            history: r.history,
        });
    }
    Ok(RefinementState {
        records,
        round_index: dto.round_index,
    })
}

// ---------------------------------------------------------------------------
// Full loop
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct RefinementOutcome {
    pub state: RefinementState,
    /// One directory per completed round when an output directory was given.
    pub snapshot_dirs: Vec<PathBuf>,
    /// Index 0 evaluates the initial state, index k the state after round k.
    pub evals: Vec<Option<RoundEval>>,
}

/// Init plus `config.rounds` rounds; snapshots land in `out/round_<k>` for
/// k = 1..=rounds. The hook fires after init and after every round.
pub fn run_refinement_with<B, F>(
    dataset: &RefinementDataset,
    backend: &mut B,
    config: &RefinementConfig,
    out: Option<&Path>,
    mut on_round: F,
) -> Result<RefinementOutcome, RefineryError>
where
    B: SegmenterBackend + Sync,
    F: FnMut(&RefinementState, Option<&RoundEval>),
{
    config.validate()?;
    let mut state = init_state(dataset, config)?;
    let mut evals = Vec::with_capacity(config.rounds + 1);
    let init_eval = evaluate_state(&state, dataset, config.mode)?;
    on_round(&state, init_eval.as_ref());
    evals.push(init_eval);

    let mut snapshot_dirs = Vec::new();
    for _ in 0..config.rounds {
        run_round(&mut state, dataset, backend, config)?;
        let eval = evaluate_state(&state, dataset, config.mode)?;
        if let Some(base) = out {
            let dir = base.join(format!("round_{}", state.round_index));
            write_snapshot(&state, &dir, eval.as_ref())?;
            snapshot_dirs.push(dir);
        }
        on_round(&state, eval.as_ref());
        evals.push(eval);
    }
    Ok(RefinementOutcome {
        state,
        snapshot_dirs,
        evals,
    })
}

pub fn run_refinement<B: SegmenterBackend + Sync>(
    dataset: &RefinementDataset,
    backend: &mut B,
    config: &RefinementConfig,
    out: Option<&Path>,
) -> Result<RefinementOutcome, RefineryError> {
    run_refinement_with(dataset, backend, config, out, |_, _| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segment::AppearanceBackend;
    use std::collections::HashMap;
    use tempfile::tempdir;

    fn rect_mask(w: u32, h: u32, xs: std::ops::Range<u32>, ys: std::ops::Range<u32>) -> BinaryMask {
        BinaryMask::from_fn(w, h, |x, y| xs.contains(&x) && ys.contains(&y))
    }

    /// Image that is `fg_color` inside the rectangle and `bg_color` outside.
    fn shape_image(
        w: u32,
        h: u32,
        xs: std::ops::Range<u32>,
        ys: std::ops::Range<u32>,
        fg: [f64; 3],
        bg: [f64; 3],
    ) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| {
            if xs.contains(&x) && ys.contains(&y) {
                fg
            } else {
                bg
            }
        })
    }

    fn iou(a: &BinaryMask, b: &BinaryMask) -> f64 {
        crate::evalmetrics::binary_iou(a, b).unwrap()
    }

    #[test]
    fn assign_labels_examples() {
        let mask = BinaryMask::new(2, 2, vec![1, 0, 1, 1]).unwrap();
        let labeled = assign_semantic_labels(&mask, 7).unwrap();
        assert_eq!(labeled.labels(), &[7, 0, 7, 7]);
        assert_eq!(labeled.labels().iter().filter(|&&l| l == 7).count(), 3);

        let empty = BinaryMask::filled(3, 3, false);
        let labeled = assign_semantic_labels(&empty, 4).unwrap();
        assert!(labeled.labels().iter().all(|&l| l == 0));

        // binarize inverts the assignment
        assert_eq!(assign_semantic_labels(&mask, 12).unwrap().binarize(), mask);

        assert!(matches!(
            assign_semantic_labels(&mask, 0),
            Err(RefineryError::BadCategory(0))
        ));
        assert!(matches!(
            assign_semantic_labels(&mask, 21),
            Err(RefineryError::BadCategory(21))
        ));
    }

    fn mask_with_coverage(fg: usize) -> LabelMask {
        LabelMask::new(
            10,
            10,
            (0..100).map(|i| u8::from(i < fg) * 5).collect(),
        )
        .unwrap()
    }

    #[test]
    fn coverage_filter_uses_strict_bounds() {
        assert!(coverage_filter(&mask_with_coverage(25), 0.01, 0.80));
        // exactly at the thresholds stays in
        assert!(coverage_filter(&mask_with_coverage(1), 0.01, 0.80));
        assert!(coverage_filter(&mask_with_coverage(80), 0.01, 0.80));
        // strictly outside drops
        assert!(!coverage_filter(&mask_with_coverage(0), 0.01, 0.80));
        assert!(!coverage_filter(&mask_with_coverage(95), 0.01, 0.80));
        assert!(!coverage_filter(&mask_with_coverage(81), 0.01, 0.80));
    }

    #[test]
    fn suppress_foreign_zeroes_other_classes() {
        let pred = LabelMask::new(3, 3, vec![3, 3, 0, 7, 7, 7, IGNORE, 0, 3]).unwrap();
        let out = suppress_foreign(&pred, 7);
        assert_eq!(out.labels(), &[0, 0, 0, 7, 7, 7, IGNORE, 0, 0]);

        let own = LabelMask::new(2, 1, vec![7, 0]).unwrap();
        assert_eq!(suppress_foreign(&own, 7), own);

        let empty = LabelMask::filled(2, 2, 0);
        assert_eq!(suppress_foreign(&empty, 7), empty);
    }

    #[test]
    fn reenhance_passes_degenerate_masks_through() {
        let image = shape_image(6, 6, 2..4, 2..4, [0.9, 0.1, 0.1], [0.1, 0.1, 0.9]);
        let empty = LabelMask::new(6, 6, {
            let mut l = vec![0u8; 36];
            l[0] = IGNORE;
            l
        })
        .unwrap();
        let out = reenhance(&image, &empty, 7, &GrabCutParams::default()).unwrap();
        assert_eq!(out, empty);

        let full = LabelMask::filled(6, 6, 7);
        let out = reenhance(&image, &full, 7, &GrabCutParams::default()).unwrap();
        assert_eq!(out, full);
    }

    #[test]
    fn reenhance_improves_a_shifted_prediction() {
        let truth = rect_mask(16, 16, 4..12, 4..12);
        let image = shape_image(16, 16, 4..12, 4..12, [0.9, 0.1, 0.1], [0.1, 0.1, 0.9]);
        let shifted = rect_mask(16, 16, 6..14, 6..14);
        let pred = assign_semantic_labels(&shifted, 5).unwrap();

        let out = reenhance(&image, &pred, 5, &GrabCutParams::default()).unwrap();
        assert!(out.labels().iter().all(|&l| l == 0 || l == 5));
        let before = iou(&shifted, &truth);
        let after = iou(&out.binarize(), &truth);
        assert!(
            after >= before,
            "enhancement regressed: {before} -> {after}"
        );
    }

    /// Two separable records with ground truth equal to the true shape.
    fn tiny_dataset() -> RefinementDataset {
        let mut records = Vec::new();
        for (i, (cat, fg, bg)) in [
            (3u8, [0.9, 0.2, 0.1], [0.1, 0.3, 0.8]),
            (7u8, [0.2, 0.8, 0.2], [0.7, 0.2, 0.7]),
        ]
        .iter()
        .enumerate()
        {
            let xs = 2..6u32;
            let ys = 2..6u32;
            let image = shape_image(8, 8, xs.clone(), ys.clone(), *fg, *bg);
            let truth = rect_mask(8, 8, xs.clone(), ys.clone());
            let gt = assign_semantic_labels(&truth, *cat).unwrap();
            // coarse guess: shifted by one pixel
            let coarse = rect_mask(8, 8, 3..7, 3..7);
            records.push(DatasetRecord {
                id: format!("img_{i}"),
                category: *cat,
                image,
                coarse,
                gt: Some(gt),
            });
        }
        RefinementDataset::new(records).unwrap()
    }

    fn no_grabcut_config() -> RefinementConfig {
        RefinementConfig {
            apply_grabcut_between_rounds: false,
            ..RefinementConfig::default()
        }
    }

    #[test]
    fn init_keeps_every_record_and_deactivates_degenerate_ones() {
        let image = shape_image(8, 8, 2..6, 2..6, [0.9, 0.2, 0.1], [0.1, 0.3, 0.8]);
        let records = vec![
            DatasetRecord {
                id: "empty".into(),
                category: 3,
                image: image.clone(),
                coarse: BinaryMask::filled(8, 8, false),
                gt: None,
            },
            DatasetRecord {
                id: "ok".into(),
                category: 3,
                image,
                coarse: rect_mask(8, 8, 2..6, 2..6),
                gt: None,
            },
        ];
        let dataset = RefinementDataset::new(records).unwrap();
        let state = init_state(&dataset, &RefinementConfig::default()).unwrap();
        assert_eq!(state.records.len(), 2);
        assert_eq!(state.round_index, 0);
        assert!(!state.records[0].active);
        assert_eq!(state.records[0].history[0].foreground_fraction, 0.0);
        assert!(state.records[1].active);
        for rec in &state.records {
            assert_eq!(rec.history.len(), 1);
        }
    }

    #[test]
    fn binary_mode_uses_the_generic_foreground_label() {
        let dataset = tiny_dataset();
        let config = RefinementConfig {
            mode: RefinementMode::BinaryForeground,
            ..RefinementConfig::default()
        };
        let state = init_state(&dataset, &config).unwrap();
        for rec in &state.records {
            assert!(rec.mask.labels().iter().all(|&l| l == 0 || l == 1));
        }
    }

    #[test]
    fn oracle_round_restores_ground_truth() {
        let dataset = tiny_dataset();
        let mut oracle = crate::segment::OracleBackend::default();
        for rec in dataset.records() {
            oracle.insert(rec.id.clone(), rec.gt.clone().unwrap());
        }
        let config = no_grabcut_config();
        let mut state = init_state(&dataset, &config).unwrap();
        run_round(&mut state, &dataset, &mut oracle, &config).unwrap();
        assert_eq!(state.round_index, 1);
        for (rs, dr) in state.records.iter().zip(dataset.records()) {
            assert_eq!(&rs.mask, dr.gt.as_ref().unwrap());
        }
        let eval = evaluate_state(&state, &dataset, config.mode)
            .unwrap()
            .unwrap();
        assert_eq!(eval.mean_foreground_iou, 1.0);
        assert!(eval.per_record.iter().all(|r| r.foreground_iou == 1.0));
    }

    /// Backend whose predictions are scripted per training round.
    struct ScriptedBackend {
        rounds_trained: usize,
        script: Vec<HashMap<String, LabelMask>>,
        trained_ids: Vec<Vec<String>>,
    }

    impl SegmenterBackend for ScriptedBackend {
        fn train(&mut self, examples: &[TrainExample<'_>]) -> Result<(), SegmentError> {
            self.trained_ids
                .push(examples.iter().map(|e| e.id.to_string()).collect());
            self.rounds_trained += 1;
            Ok(())
        }

        fn predict(&self, id: &str, _image: &RgbImage) -> Result<LabelMask, SegmentError> {
            self.script[self.rounds_trained - 1]
                .get(id)
                .cloned()
                .ok_or_else(|| SegmentError::MissingPrediction(id.to_string()))
        }
    }

    #[test]
    fn dropped_records_are_still_predicted_and_can_reactivate() {
        let dataset = tiny_dataset();
        let gt0 = dataset.records()[0].gt.clone().unwrap();
        let gt1 = dataset.records()[1].gt.clone().unwrap();
        let empty = LabelMask::filled(8, 8, 0);

        // round 1 wipes img_1, round 2 brings it back
        let script = vec![
            HashMap::from([("img_0".into(), gt0.clone()), ("img_1".into(), empty)]),
            HashMap::from([("img_0".into(), gt0), ("img_1".into(), gt1.clone())]),
        ];
        let mut backend = ScriptedBackend {
            rounds_trained: 0,
            script,
            trained_ids: Vec::new(),
        };
        let config = no_grabcut_config();
        let mut state = init_state(&dataset, &config).unwrap();

        run_round(&mut state, &dataset, &mut backend, &config).unwrap();
        assert!(!state.records[1].active);
        assert_eq!(state.records[1].history.last().unwrap().foreground_fraction, 0.0);

        run_round(&mut state, &dataset, &mut backend, &config).unwrap();
        // trained without the dropped record, but it was predicted and re-entered
        assert_eq!(backend.trained_ids[1], vec!["img_0".to_string()]);
        assert!(state.records[1].active);
        assert_eq!(&state.records[1].mask, &gt1);

        let flags: Vec<bool> = state.records[1].history.iter().map(|h| h.active).collect();
        assert_eq!(flags, vec![true, false, true]);
    }

    #[test]
    fn zero_active_records_is_an_error() {
        let dataset = tiny_dataset();
        let config = no_grabcut_config();
        let mut state = init_state(&dataset, &config).unwrap();
        for rec in state.records.iter_mut() {
            rec.active = false;
        }
        let mut backend = AppearanceBackend::new(2, 0);
        match run_round(&mut state, &dataset, &mut backend, &config) {
            Err(RefineryError::NoActiveRecords(round)) => assert_eq!(round, 1),
            other => panic!("expected no-active error, got {other:?}"),
        }
    }

    #[test]
    fn histories_grow_by_one_per_round_and_labels_stay_closed() {
        let dataset = tiny_dataset();
        let config = RefinementConfig {
            rounds: 3,
            grabcut: GrabCutParams {
                components: 2,
                ..GrabCutParams::default()
            },
            ..RefinementConfig::default()
        };
        let mut backend = AppearanceBackend::new(2, 11);
        let outcome = run_refinement(&dataset, &mut backend, &config, None).unwrap();
        assert_eq!(outcome.state.round_index, 3);
        assert_eq!(outcome.evals.len(), 4);
        for (rs, dr) in outcome.state.records.iter().zip(dataset.records()) {
            assert_eq!(rs.history.len(), 4);
            assert!(rs
                .mask
                .labels()
                .iter()
                .all(|&l| l == 0 || l == dr.category));
        }
    }

    #[test]
    fn snapshots_follow_the_layout_and_round_trip() {
        let dataset = tiny_dataset();
        let tmp = tempdir().unwrap();
        let config = RefinementConfig {
            rounds: 1,
            ..no_grabcut_config()
        };
        let mut backend = AppearanceBackend::new(2, 3);
        let outcome =
            run_refinement(&dataset, &mut backend, &config, Some(tmp.path())).unwrap();
        assert_eq!(outcome.snapshot_dirs.len(), 1);
        let dir = &outcome.snapshot_dirs[0];
        assert!(dir.ends_with("round_1"));
        assert!(dir.join("masks").join("img_0.png").is_file());
        assert!(dir.join("masks").join("img_1.png").is_file());
        assert!(dir.join("state.json").is_file());
        assert!(dir.join("eval.json").is_file());

        let loaded = load_snapshot(dir).unwrap();
        assert_eq!(loaded, outcome.state);
    }

    #[test]
    fn no_ground_truth_means_no_eval() {
        let mut records = tiny_dataset().records().to_vec();
        for rec in records.iter_mut() {
            rec.gt = None;
        }
        let dataset = RefinementDataset::new(records).unwrap();
        let tmp = tempdir().unwrap();
        let config = RefinementConfig {
            rounds: 1,
            ..no_grabcut_config()
        };
        let mut backend = AppearanceBackend::new(2, 3);
        let outcome =
            run_refinement(&dataset, &mut backend, &config, Some(tmp.path())).unwrap();
        assert!(outcome.evals.iter().all(|e| e.is_none()));
        assert!(!outcome.snapshot_dirs[0].join("eval.json").exists());
    }

    #[test]
    fn refinement_is_deterministic() {
        let dataset = tiny_dataset();
        let config = RefinementConfig {
            rounds: 2,
            seed: 9,
            grabcut: GrabCutParams {
                components: 2,
                ..GrabCutParams::default()
            },
            ..RefinementConfig::default()
        };
        let run = || {
            let mut backend = AppearanceBackend::new(2, 9);
            run_refinement(&dataset, &mut backend, &config, None)
                .unwrap()
                .state
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn state_and_dataset_must_line_up() {
        let dataset = tiny_dataset();
        let config = no_grabcut_config();
        let mut state = init_state(&dataset, &config).unwrap();
        state.records.swap(0, 1);
        let mut backend = AppearanceBackend::new(2, 0);
        assert!(matches!(
            run_round(&mut state, &dataset, &mut backend, &config),
            Err(RefineryError::StateDatasetMismatch { index: 0, .. })
        ));
    }

    #[test]
    fn config_validation_catches_bad_fields() {
        let config = RefinementConfig {
            rounds: 0,
            ..Default::default()
        };
        assert!(matches!(config.validate(), Err(RefineryError::ZeroRounds)));

        let config = RefinementConfig {
            low_coverage: 0.9,
            ..Default::default()
        };
        assert!(matches!(
            config.validate(),
            Err(RefineryError::BadCoverage { .. })
        ));

        let config = RefinementConfig {
            high_coverage: 1.5,
            ..Default::default()
        };
        assert!(matches!(
            config.validate(),
            Err(RefineryError::BadCoverage { .. })
        ));
    }

    #[test]
    fn dataset_validation_catches_mismatches() {
        let image = shape_image(8, 8, 2..6, 2..6, [0.9, 0.2, 0.1], [0.1, 0.3, 0.8]);
        let rec = DatasetRecord {
            id: "a".into(),
            category: 3,
            image,
            coarse: BinaryMask::filled(8, 8, false),
            gt: None,
        };
        let mut bad_cat = rec.clone();
        bad_cat.category = 0;
        assert!(matches!(
            RefinementDataset::new(vec![bad_cat]),
            Err(RefineryError::BadCategory(0))
        ));

        let mut bad_coarse = rec.clone();
        bad_coarse.coarse = BinaryMask::filled(4, 4, false);
        assert!(matches!(
            RefinementDataset::new(vec![bad_coarse]),
            Err(RefineryError::DimensionMismatch { .. })
        ));

        assert!(matches!(
            RefinementDataset::new(vec![rec.clone(), rec]),
            Err(RefineryError::DuplicateId(_))
        ));
    }
}
