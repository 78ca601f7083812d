//! Run configuration: a JSON file mirrored by one flag per field.
//!
//! Precedence is flag > config file > `MASKFORGE_SEED` (seed only) > default.
//! The resolved config is echoed into the output directory so a run can be
//! reproduced from it verbatim; relative paths are resolved from the working
//! directory, so reproduce from the same one.

use crate::CliError;
use maskforge::grabcut::{Connectivity, GrabCutParams};
use maskforge::refinery::{CoarseSource, RefinementConfig, RefinementMode};
use maskforge::segment::{SaliencyParams, ThresholdMode};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub manifest: PathBuf,
    pub output: PathBuf,
    /// Master seed for the whole run; also drives the embedded
    /// `refinement.seed` and the backend, which the echo keeps in sync.
    pub seed: Option<u64>,
    /// Snapshot directory to resume from; `refine` only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resume_state: Option<PathBuf>,
    pub coarse: CoarseConfig,
    pub backend: BackendConfig,
    pub refinement: RefinementConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            manifest: PathBuf::new(),
            output: PathBuf::new(),
            seed: None,
            resume_state: None,
            coarse: CoarseConfig::Manifest,
            backend: BackendConfig::default(),
            refinement: RefinementConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum CoarseConfig {
    Manifest,
    Saliency(SaliencyParams),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BackendConfig {
    Appearance {
        #[serde(default = "default_components")]
        components: usize,
        #[serde(default = "default_majority")]
        majority_filter: bool,
    },
    Oracle,
    ExternalExchange { dir: PathBuf },
}

fn default_components() -> usize {
    maskforge::gmm::DEFAULT_COMPONENTS
}

fn default_majority() -> bool {
    true
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Appearance {
            components: default_components(),
            majority_filter: default_majority(),
        }
    }
}

pub fn load_config(path: &Path) -> Result<PipelineConfig, CliError> {
    let file = File::open(path)
        .map_err(|e| CliError::invalid(format!("config {}: {e}", path.display())))?;
    serde_json::from_reader(BufReader::new(file))
        .map_err(|e| CliError::invalid(format!("config {}: {e}", path.display())))
}

pub fn write_config(config: &PipelineConfig, path: &Path) -> Result<(), CliError> {
    let file = File::create(path)
        .map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
    let mut writer = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut writer, config)
        .map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
    writer
        .write_all(b"\n")
        .and_then(|()| writer.flush())
        .map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

// clap mirrors of the library enums, so `--help` lists the accepted values

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum CoarseSourceArg {
    Manifest,
    Saliency,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ThresholdModeArg {
    Otsu,
    Fixed,
}

impl From<ThresholdModeArg> for ThresholdMode {
    fn from(arg: ThresholdModeArg) -> Self {
        match arg {
            ThresholdModeArg::Otsu => ThresholdMode::Otsu,
            ThresholdModeArg::Fixed => ThresholdMode::Fixed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ConnectivityArg {
    Four,
    Eight,
}

impl From<ConnectivityArg> for Connectivity {
    fn from(arg: ConnectivityArg) -> Self {
        match arg {
            ConnectivityArg::Four => Connectivity::Four,
            ConnectivityArg::Eight => Connectivity::Eight,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ModeArg {
    #[value(name = "semantic-21-class")]
    Semantic21Class,
    BinaryForeground,
}

impl From<ModeArg> for RefinementMode {
    fn from(arg: ModeArg) -> Self {
        match arg {
            ModeArg::Semantic21Class => RefinementMode::Semantic,
            ModeArg::BinaryForeground => RefinementMode::BinaryForeground,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum BackendKindArg {
    Appearance,
    Oracle,
    ExternalExchange,
}

/// One override flag per config field. All are optional; anything left unset
/// keeps the config-file value (or its default).
#[derive(Debug, Clone, Default, clap::Args)]
pub struct ConfigOverrides {
    /// JSON run config; flags below override individual fields
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Dataset manifest (JSON list of image/category/mask records)
    #[arg(long, value_name = "FILE")]
    pub manifest: Option<PathBuf>,
    /// Directory for snapshots, reports and the echoed config
    #[arg(long, value_name = "DIR")]
    pub output: Option<PathBuf>,
    /// Master seed (fallback: config file, then $MASKFORGE_SEED, then 0)
    #[arg(long)]
    pub seed: Option<u64>,
    /// Where initial coarse masks come from
    #[arg(long, value_enum)]
    pub coarse_source: Option<CoarseSourceArg>,
    /// Center prior width as a fraction of the image diagonal (saliency)
    #[arg(long)]
    pub center_prior_sigma: Option<f64>,
    /// How the saliency map is binarized
    #[arg(long, value_enum)]
    pub threshold_mode: Option<ThresholdModeArg>,
    /// Cut level for --threshold-mode fixed, in [0, 1]
    #[arg(long)]
    pub fixed_threshold: Option<f64>,
    /// Segmenter trained between rounds
    #[arg(long, value_enum)]
    pub backend: Option<BackendKindArg>,
    /// Mixture components per class (appearance backend)
    #[arg(long)]
    pub backend_components: Option<usize>,
    /// 3x3 majority vote over predicted labels (appearance backend)
    #[arg(long, value_name = "BOOL")]
    pub majority_filter: Option<bool>,
    /// Hand-off directory for the external-exchange backend
    #[arg(long, value_name = "DIR")]
    pub exchange_dir: Option<PathBuf>,
    /// Refinement rounds to run
    #[arg(long)]
    pub rounds: Option<usize>,
    /// Masks covering less than this fraction are dropped (strict <)
    #[arg(long)]
    pub low_coverage: Option<f64>,
    /// Masks covering more than this fraction are dropped (strict >)
    #[arg(long)]
    pub high_coverage: Option<f64>,
    /// Re-run the graph cut on each prediction between rounds
    #[arg(long, value_name = "BOOL")]
    pub grabcut_between_rounds: Option<bool>,
    /// Label space for pseudo-masks
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[command(flatten)]
    pub grabcut: GrabCutArgs,
    /// Snapshot directory to resume from (refine)
    #[arg(long, value_name = "DIR")]
    pub state: Option<PathBuf>,
}

/// Graph-cut flags shared by `enhance` and the run configs.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct GrabCutArgs {
    /// Smoothness weight of the graph-cut energy
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Mixture components per graph-cut color model
    #[arg(long)]
    pub grabcut_components: Option<usize>,
    /// Cap on graph-cut refit iterations
    #[arg(long)]
    pub grabcut_iterations: Option<usize>,
    /// Pixel neighborhood of the smoothness term
    #[arg(long, value_enum)]
    pub connectivity: Option<ConnectivityArg>,
    /// Stop when the energy improves by less than this
    #[arg(long)]
    pub convergence_tol: Option<f64>,
    /// Terminal capacity pinning definite pixels (default: derived)
    #[arg(long)]
    pub hard_constraint_weight: Option<f64>,
}

impl GrabCutArgs {
    pub fn apply(&self, params: &mut GrabCutParams) {
        if let Some(v) = self.gamma {
            params.gamma = v;
        }
        if let Some(v) = self.grabcut_components {
            params.components = v;
        }
        if let Some(v) = self.grabcut_iterations {
            params.max_iterations = v;
        }
        if let Some(v) = self.connectivity {
            params.connectivity = v.into();
        }
        if let Some(v) = self.convergence_tol {
            params.convergence_tol = v;
        }
        if let Some(v) = self.hard_constraint_weight {
            params.hard_constraint_weight = Some(v);
        }
    }

    pub fn to_params(&self, seed: u64) -> GrabCutParams {
        let mut params = GrabCutParams {
            seed,
            ..GrabCutParams::default()
        };
        self.apply(&mut params);
        params
    }
}

/// Loads the config file (when given) and lays the flags over it. Flag
/// combinations that contradict the selected coarse source or backend are
/// collected rather than silently dropped.
pub fn resolve_config(ov: &ConfigOverrides) -> Result<PipelineConfig, CliError> {
    let mut config = match &ov.config {
        Some(path) => load_config(path)?,
        None => PipelineConfig::default(),
    };
    let mut problems = Vec::new();

    if let Some(p) = &ov.manifest {
        config.manifest = p.clone();
    }
    if let Some(p) = &ov.output {
        config.output = p.clone();
    }
    if let Some(p) = &ov.state {
        config.resume_state = Some(p.clone());
    }

    match ov.coarse_source {
        Some(CoarseSourceArg::Manifest) => config.coarse = CoarseConfig::Manifest,
        Some(CoarseSourceArg::Saliency) if !matches!(config.coarse, CoarseConfig::Saliency(_)) => {
            config.coarse = CoarseConfig::Saliency(SaliencyParams::default());
        }
        _ => {}
    }
    let saliency_flags = [
        ("--center-prior-sigma", ov.center_prior_sigma.is_some()),
        ("--threshold-mode", ov.threshold_mode.is_some()),
        ("--fixed-threshold", ov.fixed_threshold.is_some()),
    ];
    match &mut config.coarse {
        CoarseConfig::Saliency(params) => {
            if let Some(v) = ov.center_prior_sigma {
                params.center_prior_sigma = v;
            }
            if let Some(v) = ov.threshold_mode {
                params.threshold_mode = v.into();
            }
            if let Some(v) = ov.fixed_threshold {
                params.fixed_threshold = v;
            }
        }
        CoarseConfig::Manifest => {
            for (flag, given) in saliency_flags {
                if given {
                    problems.push(format!(
                        "{flag} only applies when the coarse source is saliency"
                    ));
                }
            }
        }
    }

    match ov.backend {
        Some(BackendKindArg::Appearance)
            if !matches!(config.backend, BackendConfig::Appearance { .. }) =>
        {
            config.backend = BackendConfig::default();
        }
        Some(BackendKindArg::Oracle) => config.backend = BackendConfig::Oracle,
        Some(BackendKindArg::ExternalExchange)
            if !matches!(config.backend, BackendConfig::ExternalExchange { .. }) =>
        {
            config.backend = BackendConfig::ExternalExchange {
                dir: PathBuf::new(),
            };
        }
        _ => {}
    }
    match &mut config.backend {
        BackendConfig::Appearance {
            components,
            majority_filter,
        } => {
            if let Some(v) = ov.backend_components {
                *components = v;
            }
            if let Some(v) = ov.majority_filter {
                *majority_filter = v;
            }
            if ov.exchange_dir.is_some() {
                problems.push("--exchange-dir requires --backend external-exchange".into());
            }
        }
        BackendConfig::Oracle => {
            for (flag, given) in [
                ("--backend-components", ov.backend_components.is_some()),
                ("--majority-filter", ov.majority_filter.is_some()),
                ("--exchange-dir", ov.exchange_dir.is_some()),
            ] {
                if given {
                    problems.push(format!("{flag} does not apply to the oracle backend"));
                }
            }
        }
        BackendConfig::ExternalExchange { dir } => {
            if let Some(v) = &ov.exchange_dir {
                *dir = v.clone();
            }
            for (flag, given) in [
                ("--backend-components", ov.backend_components.is_some()),
                ("--majority-filter", ov.majority_filter.is_some()),
            ] {
                if given {
                    problems.push(format!(
                        "{flag} does not apply to the external-exchange backend"
                    ));
                }
            }
        }
    }

    let r = &mut config.refinement;
    if let Some(v) = ov.rounds {
        r.rounds = v;
    }
    if let Some(v) = ov.low_coverage {
        r.low_coverage = v;
    }
    if let Some(v) = ov.high_coverage {
        r.high_coverage = v;
    }
    if let Some(v) = ov.grabcut_between_rounds {
        r.apply_grabcut_between_rounds = v;
    }
    if let Some(v) = ov.mode {
        r.mode = v.into();
    }
    ov.grabcut.apply(&mut r.grabcut);

    match resolve_seed(ov.seed, config.seed, std::env::var("MASKFORGE_SEED").ok()) {
        Ok(seed) => {
            config.seed = Some(seed);
            config.refinement.seed = seed;
            config.refinement.grabcut.seed = seed;
        }
        Err(m) => problems.push(m),
    }

    if problems.is_empty() {
        Ok(config)
    } else {
        Err(CliError::Validation(problems))
    }
}

pub fn resolve_seed(
    flag: Option<u64>,
    config: Option<u64>,
    env: Option<String>,
) -> Result<u64, String> {
    if let Some(s) = flag.or(config) {
        return Ok(s);
    }
    match env {
        Some(raw) => raw
            .parse()
            .map_err(|_| format!("MASKFORGE_SEED must be an unsigned integer, got {raw:?}")),
        None => Ok(0),
    }
}

/// Everything statically checkable about a run, reported in one pass.
pub fn validate_config(config: &PipelineConfig, for_refine: bool) -> Vec<String> {
    let mut problems = Vec::new();
    if config.manifest.as_os_str().is_empty() {
        problems.push("a dataset manifest is required (--manifest or the config file)".into());
    } else if !config.manifest.is_file() {
        problems.push(format!(
            "manifest {} does not exist",
            config.manifest.display()
        ));
    }
    if config.output.as_os_str().is_empty() {
        problems.push("an output directory is required (--output or the config file)".into());
    }
    if let Err(e) = config.refinement.validate() {
        problems.push(e.to_string());
    }
    if let CoarseConfig::Saliency(params) = &config.coarse {
        if let Err(e) = params.validate() {
            problems.push(e.to_string());
        }
    }
    match &config.backend {
        BackendConfig::Appearance { components, .. } => {
            if *components == 0 {
                problems.push("the appearance backend needs at least 1 mixture component".into());
            }
        }
        BackendConfig::Oracle => {}
        BackendConfig::ExternalExchange { dir } => {
            if dir.as_os_str().is_empty() {
                problems.push(
                    "the external-exchange backend needs a hand-off directory (--exchange-dir)"
                        .into(),
                );
            }
        }
    }
    match &config.resume_state {
        Some(state) if !for_refine => {
            problems.push(format!(
                "resume_state {} only applies to the refine subcommand",
                state.display()
            ));
        }
        Some(state) if !state.join("state.json").is_file() => {
            problems.push(format!(
                "{} is not a snapshot directory (no state.json)",
                state.display()
            ));
        }
        Some(_) => {}
        None if for_refine => {
            problems.push("refine needs a snapshot to resume from (--state)".into());
        }
        None => {}
    }
    problems
}

pub fn coarse_source(config: &PipelineConfig) -> CoarseSource {
    match &config.coarse {
        CoarseConfig::Manifest => CoarseSource::Manifest,
        CoarseConfig::Saliency(params) => CoarseSource::Saliency(params.clone()),
    }
}
