//! Subcommand bodies. Each one logs a `stage=<s> image=<id> ...` line per
//! image to standard error and keeps machine-readable results in files under
//! the requested output location; inputs are never modified.

use crate::config::{
    coarse_source, resolve_config, resolve_seed, validate_config, write_config, BackendConfig,
    ConfigOverrides, PipelineConfig,
};
use crate::exchange::ExchangeBackend;
use crate::{CliError, EnhanceArgs, EvalArgs, SaliencyArgs, SegmentArgs, SynthArgs};
use maskforge::evalmetrics::{ConfusionMatrix, EvalReport};
use maskforge::grabcut::{run_grabcut_traced, GrabCutError};
use maskforge::imagecore::{
    foreground_fraction, load_image, read_binary_mask, read_label_mask, stem_of,
    write_binary_mask, write_label_mask, DatasetManifest, LabelMask, RgbImage,
};
use maskforge::refinery::{
    evaluate_state, load_snapshot, run_refinement_with, run_round, write_snapshot,
    RefinementDataset, RefinementState, RefineryError, RoundEval,
};
use maskforge::segment::{
    coarse_saliency_mask, AppearanceBackend, OracleBackend, SegmenterBackend, TrainExample,
};
use maskforge::synthetic::{generate_dataset, write_dataset, SyntheticParams};
use rayon::prelude::*;
use serde::Serialize;
use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

// ---------------------------------------------------------------------------
// enhance and saliency: single-image tools
// ---------------------------------------------------------------------------

pub fn cmd_enhance(args: &EnhanceArgs) -> Result<(), CliError> {
    let seed = resolve_seed(args.seed, None, std::env::var("MASKFORGE_SEED").ok())
        .map_err(CliError::invalid)?;
    let params = args.grabcut.to_params(seed);
    params.validate().map_err(CliError::invalid)?;
    require_files(&[&args.image, &args.coarse])?;

    let image = load_image(&args.image).map_err(CliError::invalid)?;
    let coarse = read_binary_mask(&args.coarse).map_err(CliError::invalid)?;
    let (mask, energies) = run_grabcut_traced(&image, &coarse, &params).map_err(|e| match e {
        GrabCutError::DegenerateInit | GrabCutError::DimensionMismatch { .. } => {
            CliError::invalid(e)
        }
        other => CliError::runtime(other),
    })?;
    write_mask_creating_parent(&mask, &args.out)?;
    let energy = match energies.last() {
        Some(e) => format!(" energy={e:.4}"),
        None => String::new(),
    };
    eprintln!(
        "stage=enhance image={} foreground_in={:.4} foreground_out={:.4} iterations={}{energy}",
        stem_of(&args.image),
        foreground_fraction(&coarse),
        foreground_fraction(&mask),
        energies.len(),
    );
    Ok(())
}

pub fn cmd_saliency(args: &SaliencyArgs) -> Result<(), CliError> {
    let params = args.to_params();
    params.validate().map_err(CliError::invalid)?;
    require_files(&[&args.image])?;

    let image = load_image(&args.image).map_err(CliError::invalid)?;
    let mask = coarse_saliency_mask(&image, &params).map_err(CliError::runtime)?;
    write_mask_creating_parent(&mask, &args.out)?;
    eprintln!(
        "stage=saliency image={} foreground={:.4}",
        stem_of(&args.image),
        foreground_fraction(&mask),
    );
    Ok(())
}

fn require_files(paths: &[&Path]) -> Result<(), CliError> {
    let missing: Vec<String> = paths
        .iter()
        .filter(|p| !p.is_file())
        .map(|p| format!("{} does not exist", p.display()))
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(CliError::Validation(missing))
    }
}

fn write_mask_creating_parent(
    mask: &maskforge::imagecore::BinaryMask,
    path: &Path,
) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)
            .map_err(|e| CliError::runtime(format!("{}: {e}", parent.display())))?;
    }
    write_binary_mask(mask, path).map_err(CliError::runtime)
}

// ---------------------------------------------------------------------------
// pipeline and refine: the full loop
// ---------------------------------------------------------------------------

/// Any trainable backend the config can name, behind one dispatch point so
/// the run loop stays generic.
pub enum AnyBackend {
    Appearance(AppearanceBackend),
    Oracle(OracleBackend),
    Exchange(ExchangeBackend),
}

impl SegmenterBackend for AnyBackend {
    fn train(
        &mut self,
        examples: &[TrainExample<'_>],
    ) -> Result<(), maskforge::segment::SegmentError> {
        match self {
            AnyBackend::Appearance(b) => b.train(examples),
            AnyBackend::Oracle(b) => b.train(examples),
            AnyBackend::Exchange(b) => b.train(examples),
        }
    }

    fn predict(
        &self,
        id: &str,
        image: &RgbImage,
    ) -> Result<LabelMask, maskforge::segment::SegmentError> {
        match self {
            AnyBackend::Appearance(b) => b.predict(id, image),
            AnyBackend::Oracle(b) => b.predict(id, image),
            AnyBackend::Exchange(b) => b.predict(id, image),
        }
    }
}

fn build_backend(
    config: &PipelineConfig,
    dataset: &RefinementDataset,
    manifest: &DatasetManifest,
    start_round: usize,
) -> Result<AnyBackend, CliError> {
    let seed = config.refinement.seed;
    match &config.backend {
        BackendConfig::Appearance {
            components,
            majority_filter,
        } => Ok(AnyBackend::Appearance(
            AppearanceBackend::new(*components, seed).with_majority_filter(*majority_filter),
        )),
        BackendConfig::Oracle => {
            let mut truths = HashMap::new();
            let mut missing = Vec::new();
            for rec in dataset.records() {
                match &rec.gt {
                    Some(gt) => {
                        truths.insert(rec.id.clone(), gt.clone());
                    }
                    None => missing.push(rec.id.clone()),
                }
            }
            if missing.is_empty() {
                Ok(AnyBackend::Oracle(OracleBackend::new(truths)))
            } else {
                Err(CliError::invalid(format!(
                    "the oracle backend needs a ground-truth mask for every record; missing: {}",
                    missing.join(", ")
                )))
            }
        }
        BackendConfig::ExternalExchange { dir } => {
            let meta = manifest
                .records
                .iter()
                .map(|entry| (stem_of(&entry.image), (entry.image.clone(), entry.category)))
                .collect();
            Ok(AnyBackend::Exchange(ExchangeBackend::new(
                dir.clone(),
                start_round,
                meta,
            )))
        }
    }
}

#[derive(Serialize)]
struct SummaryRow {
    round: usize,
    active: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    mean_foreground_iou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mean_iou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pixel_accuracy: Option<f64>,
}

#[derive(Serialize)]
struct Summary {
    rounds: Vec<SummaryRow>,
}

fn summary_row(state: &RefinementState, eval: Option<&RoundEval>) -> SummaryRow {
    SummaryRow {
        round: state.round_index,
        active: state.records.iter().filter(|r| r.active).count(),
        mean_foreground_iou: eval.map(|e| e.mean_foreground_iou),
        mean_iou: eval.map(|e| e.semantic.mean_iou),
        pixel_accuracy: eval.map(|e| e.semantic.pixel_accuracy),
    }
}

fn log_round(state: &RefinementState, eval: Option<&RoundEval>) {
    let stage = if state.round_index == 0 {
        "init".to_string()
    } else {
        format!("round_{}", state.round_index)
    };
    let iou_by_id: HashMap<&str, f64> = eval
        .map(|e| {
            e.per_record
                .iter()
                .map(|r| (r.id.as_str(), r.foreground_iou))
                .collect()
        })
        .unwrap_or_default();
    for rec in &state.records {
        let fraction = rec.mask.object_fraction();
        match iou_by_id.get(rec.id.as_str()) {
            Some(iou) => eprintln!(
                "stage={stage} image={} foreground={fraction:.4} active={} iou={iou:.4}",
                rec.id, rec.active,
            ),
            None => eprintln!(
                "stage={stage} image={} foreground={fraction:.4} active={}",
                rec.id, rec.active,
            ),
        }
    }
}

fn log_coarse(dataset: &RefinementDataset, source: &str) {
    for rec in dataset.records() {
        eprintln!(
            "stage=coarse image={} foreground={:.4} source={source}",
            rec.id,
            foreground_fraction(&rec.coarse),
        );
    }
}

fn load_validated(
    ov: &ConfigOverrides,
    for_refine: bool,
) -> Result<(PipelineConfig, DatasetManifest, RefinementDataset), CliError> {
    let config = resolve_config(ov)?;
    let problems = validate_config(&config, for_refine);
    if !problems.is_empty() {
        return Err(CliError::Validation(problems));
    }
    let manifest = DatasetManifest::load(&config.manifest).map_err(CliError::invalid)?;
    let source = coarse_source(&config);
    let dataset = RefinementDataset::load(&manifest, &source).map_err(CliError::invalid)?;
    let source_name = match &config.coarse {
        crate::config::CoarseConfig::Manifest => "manifest",
        crate::config::CoarseConfig::Saliency(_) => "saliency",
    };
    log_coarse(&dataset, source_name);
    Ok((config, manifest, dataset))
}

fn prepare_output(config: &PipelineConfig) -> Result<(), CliError> {
    fs::create_dir_all(&config.output)
        .map_err(|e| CliError::runtime(format!("{}: {e}", config.output.display())))?;
    write_config(config, &config.output.join("config.json"))
}

fn write_summary(rows: Vec<SummaryRow>, out: &Path) -> Result<(), CliError> {
    crate::write_json(&out.join("summary.json"), &Summary { rounds: rows })
}

pub fn cmd_pipeline(ov: &ConfigOverrides) -> Result<(), CliError> {
    let (config, manifest, dataset) = load_validated(ov, false)?;
    prepare_output(&config)?;
    let mut backend = build_backend(&config, &dataset, &manifest, 0)?;

    let round_zero = config.output.join("round_0");
    let mut snapshot_err: Option<RefineryError> = None;
    let mut rows = Vec::with_capacity(config.refinement.rounds + 1);
    run_refinement_with(
        &dataset,
        &mut backend,
        &config.refinement,
        Some(&config.output),
        |state, eval| {
            if state.round_index == 0 {
                if let Err(e) = write_snapshot(state, &round_zero, eval) {
                    snapshot_err.get_or_insert(e);
                }
            }
            log_round(state, eval);
            rows.push(summary_row(state, eval));
        },
    )
    .map_err(CliError::runtime)?;
    if let Some(e) = snapshot_err {
        return Err(CliError::runtime(e));
    }
    write_summary(rows, &config.output)
}

pub fn cmd_refine(ov: &ConfigOverrides) -> Result<(), CliError> {
    let (config, manifest, dataset) = load_validated(ov, true)?;
    let state_dir = config.resume_state.clone().expect("validated above");
    let mut state = load_snapshot(&state_dir).map_err(CliError::invalid)?;
    prepare_output(&config)?;
    let mut backend = build_backend(&config, &dataset, &manifest, state.round_index)?;

    let mut rows = Vec::with_capacity(config.refinement.rounds + 1);
    let baseline = evaluate_state(&state, &dataset, config.refinement.mode)
        .map_err(CliError::runtime)?;
    log_round(&state, baseline.as_ref());
    rows.push(summary_row(&state, baseline.as_ref()));

    for _ in 0..config.refinement.rounds {
        run_round(&mut state, &dataset, &mut backend, &config.refinement).map_err(
            |e| match e {
                RefineryError::StateDatasetMismatch { .. } => CliError::invalid(e),
                other => CliError::runtime(other),
            },
        )?;
        let eval = evaluate_state(&state, &dataset, config.refinement.mode)
            .map_err(CliError::runtime)?;
        let dir = config.output.join(format!("round_{}", state.round_index));
        write_snapshot(&state, &dir, eval.as_ref()).map_err(CliError::runtime)?;
        log_round(&state, eval.as_ref());
        rows.push(summary_row(&state, eval.as_ref()));
    }
    write_summary(rows, &config.output)
}

// ---------------------------------------------------------------------------
// eval: score prediction masks against ground truth
// ---------------------------------------------------------------------------

fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>, CliError> {
    let entries = fs::read_dir(dir)
        .map_err(|e| CliError::invalid(format!("{}: {e}", dir.display())))?;
    let mut stems = BTreeMap::new();
    for entry in entries {
        let path = entry
            .map_err(|e| CliError::runtime(format!("{}: {e}", dir.display())))?
            .path();
        if path.extension().is_some_and(|ext| ext == "png") {
            stems.insert(stem_of(&path), path);
        }
    }
    Ok(stems)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    let pred = png_stems(&args.pred)?;
    let gt = png_stems(&args.gt)?;
    for stem in pred.keys().filter(|s| !gt.contains_key(*s)) {
        eprintln!("stage=eval image={stem} status=missing_ground_truth");
    }
    for stem in gt.keys().filter(|s| !pred.contains_key(*s)) {
        eprintln!("stage=eval image={stem} status=missing_prediction");
    }

    let mut confusion = ConfusionMatrix::new();
    let mut matched = 0usize;
    for (stem, pred_path) in &pred {
        let Some(gt_path) = gt.get(stem) else {
            continue;
        };
        let pred_mask = read_label_mask(pred_path).map_err(CliError::invalid)?;
        let gt_mask = read_label_mask(gt_path).map_err(CliError::invalid)?;
        confusion
            .accumulate(&pred_mask, &gt_mask)
            .map_err(|e| CliError::invalid(format!("{stem}: {e}")))?;
        eprintln!("stage=eval image={stem} status=ok");
        matched += 1;
    }
    if matched == 0 {
        return Err(CliError::invalid(format!(
            "no file stems in common between {} and {}",
            args.pred.display(),
            args.gt.display()
        )));
    }
    let report = EvalReport::from_confusion(&confusion).map_err(CliError::invalid)?;
    crate::write_json(&args.out, &report)
}

// ---------------------------------------------------------------------------
// segment: train a backend once and write its predictions
// ---------------------------------------------------------------------------

pub fn cmd_segment(args: &SegmentArgs) -> Result<(), CliError> {
    let seed = resolve_seed(args.seed, None, std::env::var("MASKFORGE_SEED").ok())
        .map_err(CliError::invalid)?;
    let manifest = DatasetManifest::load(&args.manifest).map_err(CliError::invalid)?;

    let mut problems = Vec::new();
    let mut label_paths = Vec::with_capacity(manifest.records.len());
    for entry in &manifest.records {
        let id = stem_of(&entry.image);
        let path = args.labels.join(format!("{id}.png"));
        if !path.is_file() {
            problems.push(format!("no label mask {} for {id}", path.display()));
        }
        label_paths.push((id, path));
    }
    if args.components == 0 {
        problems.push("--components must be at least 1".into());
    }
    if !problems.is_empty() {
        return Err(CliError::Validation(problems));
    }

    let mut images = Vec::with_capacity(manifest.records.len());
    let mut labels = Vec::with_capacity(manifest.records.len());
    for (entry, (id, label_path)) in manifest.records.iter().zip(&label_paths) {
        let image = load_image(&entry.image).map_err(CliError::invalid)?;
        let mask = read_label_mask(label_path).map_err(CliError::invalid)?;
        if (mask.width(), mask.height()) != (image.width(), image.height()) {
            return Err(CliError::invalid(format!(
                "{id}: label mask is {}x{}, image is {}x{}",
                mask.width(),
                mask.height(),
                image.width(),
                image.height()
            )));
        }
        images.push(image);
        labels.push(mask);
    }

    let examples: Vec<TrainExample<'_>> = label_paths
        .iter()
        .zip(&images)
        .zip(&labels)
        .map(|(((id, _), image), mask)| TrainExample {
            id,
            image,
            labels: mask,
        })
        .collect();
    for example in &examples {
        eprintln!(
            "stage=train image={} labeled={:.4}",
            example.id,
            example.labels.object_fraction(),
        );
    }
    let mut backend =
        AppearanceBackend::new(args.components, seed).with_majority_filter(args.majority_filter);
    backend.train(&examples).map_err(|e| match e {
        maskforge::segment::SegmentError::NoClasses => CliError::invalid(e),
        other => CliError::runtime(other),
    })?;

    if let Some(model_path) = &args.model_out {
        let model = backend.model().expect("trained above");
        crate::write_json(model_path, &model.to_dto())?;
    }

    let predictions: Result<Vec<LabelMask>, _> = examples
        .par_iter()
        .map(|example| backend.predict(example.id, example.image))
        .collect();
    let predictions = predictions.map_err(CliError::runtime)?;

    fs::create_dir_all(&args.out)
        .map_err(|e| CliError::runtime(format!("{}: {e}", args.out.display())))?;
    for (example, mask) in examples.iter().zip(&predictions) {
        write_label_mask(mask, &args.out.join(format!("{}.png", example.id)))
            .map_err(CliError::runtime)?;
        eprintln!(
            "stage=predict image={} foreground={:.4}",
            example.id,
            mask.object_fraction(),
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// synth: generate the bundled synthetic dataset
// ---------------------------------------------------------------------------

pub fn cmd_synth(args: &SynthArgs) -> Result<(), CliError> {
    let mut problems = Vec::new();
    if args.images == 0 {
        problems.push("--images must be at least 1".into());
    }
    if args.width < 8 || args.height < 8 {
        problems.push("--width and --height must be at least 8".into());
    }
    if !args.noise.is_finite() || args.noise < 0.0 {
        problems.push(format!(
            "--noise must be a non-negative number, got {}",
            args.noise
        ));
    }
    if !problems.is_empty() {
        return Err(CliError::Validation(problems));
    }

    let params = SyntheticParams {
        images: args.images,
        width: args.width,
        height: args.height,
        noise: args.noise,
        seed: args.seed,
    };
    let dataset = generate_dataset(&params).map_err(CliError::runtime)?;
    let manifest_path = write_dataset(&dataset, &args.out).map_err(CliError::runtime)?;
    for rec in dataset.records() {
        eprintln!(
            "stage=synth image={} category={} foreground={:.4}",
            rec.id,
            rec.category,
            rec.gt
                .as_ref()
                .map(|gt| gt.object_fraction())
                .unwrap_or(0.0),
        );
    }
    println!("{}", manifest_path.display());
    Ok(())
}
