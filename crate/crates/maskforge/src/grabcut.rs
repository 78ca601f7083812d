//! GrabCut mask enhancement.
//!
//! Alternates three steps until the energy settles: assign each pixel to a
//! component of its side's color mixture, refit both mixtures, then relabel
//! by a minimum cut over data terms (−log mixture density) plus a
//! contrast-weighted smoothness term. Source side of the cut is foreground.

use crate::gmm::{fit_from_assignments, fit_gmm, ColorGmm};
use crate::imagecore::{BinaryMask, RgbImage};
use crate::maxflow::{max_flow, FlowNetwork, Side};
use crate::seed::derive_seed;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// EM budget for the first-iteration mixture fits. Later iterations refit
/// from hard component assignments instead.
const INIT_EM_MAX_ITER: usize = 5;
const INIT_EM_TOL: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum GrabCutError {
    #[error("gamma must be non-negative, got {0}")]
    BadGamma(f64),
    #[error("max_iterations must be at least 1")]
    ZeroIterations,
    #[error("convergence_tol must be non-negative, got {0}")]
    BadTolerance(f64),
    #[error("components must be at least 1")]
    ZeroComponents,
    #[error("hard constraint weight must be positive and finite, got {0}")]
    BadHardConstraint(f64),
    #[error("labeling dimensions {lw}x{lh} do not match image {iw}x{ih}")]
    DimensionMismatch { lw: u32, lh: u32, iw: u32, ih: u32 },
    #[error("initial mask must contain both foreground and background pixels")]
    DegenerateInit,
    #[error(transparent)]
    Gmm(#[from] crate::gmm::GmmError),
    #[error(transparent)]
    Flow(#[from] crate::maxflow::MaxflowError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Connectivity {
    Four,
    Eight,
}

impl Connectivity {
    /// Forward neighbor offsets (dx, dy, distance); each unordered pair is
    /// visited exactly once when scanning pixels in row-major order.
    pub fn pair_offsets(self) -> &'static [(i32, i32, f64)] {
        const FOUR: [(i32, i32, f64); 2] = [(1, 0, 1.0), (0, 1, 1.0)];
        const EIGHT: [(i32, i32, f64); 4] = [
            (1, 0, 1.0),
            (0, 1, 1.0),
            (1, 1, std::f64::consts::SQRT_2),
            (-1, 1, std::f64::consts::SQRT_2),
        ];
        match self {
            Connectivity::Four => &FOUR,
            Connectivity::Eight => &EIGHT,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrabCutParams {
    pub gamma: f64,
    pub components: usize,
    pub max_iterations: usize,
    pub connectivity: Connectivity,
    pub convergence_tol: f64,
    pub seed: u64,
    /// Terminal capacity pinning definite pixels. `None` picks
    /// 9·gamma + the largest data term observed while building the network,
    /// which provably exceeds the cost of flipping any single pixel.
    pub hard_constraint_weight: Option<f64>,
}

impl Default for GrabCutParams {
    fn default() -> Self {
        Self {
            gamma: 50.0,
            components: crate::gmm::DEFAULT_COMPONENTS,
            max_iterations: 10,
            connectivity: Connectivity::Eight,
            convergence_tol: 1e-3,
            seed: 0,
            hard_constraint_weight: None,
        }
    }
}

impl GrabCutParams {
    pub fn validate(&self) -> Result<(), GrabCutError> {
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(GrabCutError::BadGamma(self.gamma));
        }
        if self.max_iterations == 0 {
            return Err(GrabCutError::ZeroIterations);
        }
        if !(self.convergence_tol >= 0.0) {
            return Err(GrabCutError::BadTolerance(self.convergence_tol));
        }
        if self.components == 0 {
            return Err(GrabCutError::ZeroComponents);
        }
        if let Some(w) = self.hard_constraint_weight {
            if !(w > 0.0) || !w.is_finite() {
                return Err(GrabCutError::BadHardConstraint(w));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PixelState {
    DefiniteBackground,
    ProbableBackground,
    ProbableForeground,
    DefiniteForeground,
}

impl PixelState {
    pub fn is_foreground(self) -> bool {
        matches!(
            self,
            PixelState::ProbableForeground | PixelState::DefiniteForeground
        )
    }

    pub fn is_definite(self) -> bool {
        matches!(
            self,
            PixelState::DefiniteBackground | PixelState::DefiniteForeground
        )
    }
}

/// Trimap: which pixels are free to be relabeled and which are pinned.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelLabeling {
    width: u32,
    height: u32,
    states: Vec<PixelState>,
}

impl PixelLabeling {
    pub fn new(width: u32, height: u32, states: Vec<PixelState>) -> Option<Self> {
        (states.len() == (width as usize) * (height as usize)).then_some(Self {
            width,
            height,
            states,
        })
    }

    /// All-probable trimap from a coarse mask: nothing is pinned, because
    /// coarse masks are too unreliable to clamp.
    pub fn from_mask(mask: &BinaryMask) -> Self {
        Self {
            width: mask.width(),
            height: mask.height(),
            states: mask
                .values()
                .iter()
                .map(|&v| {
                    if v != 0 {
                        PixelState::ProbableForeground
                    } else {
                        PixelState::ProbableBackground
                    }
                })
                .collect(),
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn states(&self) -> &[PixelState] {
        &self.states
    }

    pub fn set_state(&mut self, x: u32, y: u32, state: PixelState) {
        let w = self.width as usize;
        self.states[(y as usize) * w + (x as usize)] = state;
    }

    pub fn to_mask(&self) -> BinaryMask {
        BinaryMask::new(
            self.width,
            self.height,
            self.states
                .iter()
                .map(|s| u8::from(s.is_foreground()))
                .collect(),
        )
        .expect("labeling dimensions are valid")
    }
}

fn sq_color_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]) * (a[i] - b[i])).sum()
}

/// Contrast scale β = 1 / (2 · mean squared neighbor color difference).
/// A constant image has no contrast and gets β = 0.
pub fn compute_beta(image: &RgbImage, connectivity: Connectivity) -> f64 {
    let (w, h) = (image.width() as i32, image.height() as i32);
    let mut total = 0.0;
    let mut pairs = 0usize;
    for y in 0..h {
        for x in 0..w {
            let zp = image.pixel(x as u32, y as u32);
            for &(dx, dy, _) in connectivity.pair_offsets() {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || nx >= w || ny >= h {
                    continue;
                }
                total += sq_color_dist(&zp, &image.pixel(nx as u32, ny as u32));
                pairs += 1;
            }
        }
    }
    if pairs == 0 || total == 0.0 {
        return 0.0;
    }
    let mean = total / pairs as f64;
    1.0 / (2.0 * mean)
}

/// Flow network encoding a labeling energy, plus the constant separating cut
/// capacities from energies.
///
/// Raw data terms (−log density) can be negative when a mixture is sharply
/// peaked; both of a pixel's terminal links are then lifted by the same
/// amount so capacities stay non-negative. Every cut pays exactly one
/// terminal link per pixel, so each lift shifts all cuts equally:
/// `cut capacity = labeling energy + offset`, and minimizers are unchanged.
#[derive(Debug, Clone)]
pub struct EnergyNetwork {
    pub network: FlowNetwork,
    pub offset: f64,
    /// Hard-constraint weight actually used (parameter or auto-picked).
    pub hard_constraint_weight: f64,
}

fn check_dims(
    iw: u32,
    ih: u32,
    lw: u32,
    lh: u32,
) -> Result<(), GrabCutError> {
    if (iw, ih) != (lw, lh) {
        return Err(GrabCutError::DimensionMismatch { lw, lh, iw, ih });
    }
    Ok(())
}

/// Builds the s/t network whose minimum cut minimizes the labeling energy.
///
/// Source side means foreground. Probable pixels get data terms on both
/// terminals: the source link carries the background cost (paid if the pixel
/// ends up background) and the sink link the foreground cost. Definite pixels
/// get the hard-constraint weight on their own terminal and 0 on the other.
pub fn build_energy(
    image: &RgbImage,
    labeling: &PixelLabeling,
    fg: &ColorGmm,
    bg: &ColorGmm,
    params: &GrabCutParams,
) -> Result<EnergyNetwork, GrabCutError> {
    params.validate()?;
    check_dims(image.width(), image.height(), labeling.width, labeling.height)?;
    let n = image.pixel_count();
    let mut net = FlowNetwork::new(n);

    // t-links, lifted per pixel to keep capacities non-negative
    let mut caps = Vec::with_capacity(n);
    let mut offset = 0.0;
    let mut max_data_term = 0.0f64;
    for (i, z) in image.pixels().iter().enumerate() {
        match labeling.states[i] {
            PixelState::DefiniteForeground => caps.push(None),
            PixelState::DefiniteBackground => caps.push(None),
            _ => {
                let d_src = -bg.log_density(z);
                let d_snk = -fg.log_density(z);
                let lift = (-d_src).max(-d_snk).max(0.0);
                let (src, snk) = (d_src + lift, d_snk + lift);
                offset += lift;
                max_data_term = max_data_term.max(src).max(snk);
                caps.push(Some((src, snk)));
            }
        }
    }
    let hard = params
        .hard_constraint_weight
        .unwrap_or(9.0 * params.gamma + max_data_term);
    for (i, c) in caps.into_iter().enumerate() {
        let (src, snk) = match c {
            Some(pair) => pair,
            None => match labeling.states[i] {
                PixelState::DefiniteForeground => (hard, 0.0),
                _ => (0.0, hard),
            },
        };
        net.set_terminal(i as u32, src, snk)?;
    }

    // n-links: contrast-sensitive smoothness between neighbors
    let beta = compute_beta(image, params.connectivity);
    let (w, h) = (image.width() as i32, image.height() as i32);
    for y in 0..h {
        for x in 0..w {
            let p = (y * w + x) as u32;
            let zp = image.pixel(x as u32, y as u32);
            for &(dx, dy, dist) in params.connectivity.pair_offsets() {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || nx >= w || ny >= h {
                    continue;
                }
                let q = (ny * w + nx) as u32;
                let zq = image.pixel(nx as u32, ny as u32);
                let weight =
                    params.gamma * (-beta * sq_color_dist(&zp, &zq)).exp() / dist;
                net.add_edge(p, q, weight, weight)?;
            }
        }
    }
    Ok(EnergyNetwork {
        network: net,
        offset,
        hard_constraint_weight: hard,
    })
}

/// Labeling energy of a mask: per-pixel data terms under the mask's side
/// plus smoothness over neighbor pairs whose labels differ.
pub fn energy_of(
    image: &RgbImage,
    mask: &BinaryMask,
    fg: &ColorGmm,
    bg: &ColorGmm,
    params: &GrabCutParams,
) -> f64 {
    assert_eq!(
        (image.width(), image.height()),
        (mask.width(), mask.height()),
        "mask must match image dimensions"
    );
    let mut energy = 0.0;
    for (i, z) in image.pixels().iter().enumerate() {
        let model = if mask.values()[i] != 0 { fg } else { bg };
        energy += -model.log_density(z);
    }
    let beta = compute_beta(image, params.connectivity);
    let (w, h) = (image.width() as i32, image.height() as i32);
    for y in 0..h {
        for x in 0..w {
            let here = mask.is_foreground(x as u32, y as u32);
            let zp = image.pixel(x as u32, y as u32);
            for &(dx, dy, dist) in params.connectivity.pair_offsets() {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || nx >= w || ny >= h {
                    continue;
                }
                if mask.is_foreground(nx as u32, ny as u32) != here {
                    let zq = image.pixel(nx as u32, ny as u32);
                    energy +=
                        params.gamma * (-beta * sq_color_dist(&zp, &zq)).exp() / dist;
                }
            }
        }
    }
    energy
}

fn side_samples(image: &RgbImage, mask: &BinaryMask) -> (Vec<[f64; 3]>, Vec<[f64; 3]>) {
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for (z, &v) in image.pixels().iter().zip(mask.values()) {
        if v != 0 {
            fg.push(*z);
        } else {
            bg.push(*z);
        }
    }
    (fg, bg)
}

/// Runs GrabCut from an explicit trimap, returning the final mask and the
/// energy after each adopted iteration.
///
/// An iteration is adopted only if it does not raise the energy, so the
/// returned trace is non-increasing. If a relabeling would empty one side,
/// the previous mask is returned instead.
pub fn run_grabcut_with_labeling_traced(
    image: &RgbImage,
    labeling: &PixelLabeling,
    params: &GrabCutParams,
) -> Result<(BinaryMask, Vec<f64>), GrabCutError> {
    params.validate()?;
    check_dims(image.width(), image.height(), labeling.width, labeling.height)?;
    let mut mask = labeling.to_mask();
    let fg_count = mask.foreground_count();
    if fg_count == 0 || fg_count == mask.values().len() {
        return Err(GrabCutError::DegenerateInit);
    }

    let mut models: Option<(ColorGmm, ColorGmm)> = None;
    let mut energies: Vec<f64> = Vec::new();
    let mut prev_energy = f64::INFINITY;

    for _ in 0..params.max_iterations {
        let (fg_samples, bg_samples) = side_samples(image, &mask);
        let (fg_model, bg_model) = match &models {
            Some((f, b)) => {
                let fa: Vec<usize> = fg_samples.iter().map(|s| f.assign_component(s)).collect();
                let ba: Vec<usize> = bg_samples.iter().map(|s| b.assign_component(s)).collect();
                (
                    fit_from_assignments(&fg_samples, &fa, f.k())?,
                    fit_from_assignments(&bg_samples, &ba, b.k())?,
                )
            }
            None => (
                fit_gmm(
                    &fg_samples,
                    params.components.min(fg_samples.len()),
                    derive_seed(params.seed, 1),
                    INIT_EM_MAX_ITER,
                    INIT_EM_TOL,
                )?,
                fit_gmm(
                    &bg_samples,
                    params.components.min(bg_samples.len()),
                    derive_seed(params.seed, 2),
                    INIT_EM_MAX_ITER,
                    INIT_EM_TOL,
                )?,
            ),
        };

        let energy_net = build_energy(image, labeling, &fg_model, &bg_model, params)?;
        let cut = max_flow(&energy_net.network)?;
        let new_values: Vec<u8> = labeling
            .states
            .iter()
            .enumerate()
            .map(|(i, s)| match s {
                PixelState::DefiniteForeground => 1,
                PixelState::DefiniteBackground => 0,
                _ => u8::from(cut.side[i] == Side::Source),
            })
            .collect();
        let new_mask = BinaryMask::new(mask.width(), mask.height(), new_values)
            .expect("cut covers every pixel");

        let new_fg = new_mask.foreground_count();
        if new_fg == 0 || new_fg == new_mask.values().len() {
            return Ok((mask, energies));
        }
        let new_energy = energy_of(image, &new_mask, &fg_model, &bg_model, params);
        if new_energy > prev_energy + 1e-9 * prev_energy.abs().max(1.0) {
            return Ok((mask, energies));
        }
        mask = new_mask;
        models = Some((fg_model, bg_model));
        energies.push(new_energy);

        if prev_energy.is_finite() {
            let rel = (prev_energy - new_energy) / prev_energy.abs().max(f64::MIN_POSITIVE);
            prev_energy = new_energy;
            if rel < params.convergence_tol {
                break;
            }
        } else {
            prev_energy = new_energy;
        }
    }
    Ok((mask, energies))
}

pub fn run_grabcut_with_labeling(
    image: &RgbImage,
    labeling: &PixelLabeling,
    params: &GrabCutParams,
) -> Result<BinaryMask, GrabCutError> {
    run_grabcut_with_labeling_traced(image, labeling, params).map(|(m, _)| m)
}

/// Enhances a coarse mask: all pixels start probable, sided by the mask.
pub fn run_grabcut_traced(
    image: &RgbImage,
    init_mask: &BinaryMask,
    params: &GrabCutParams,
) -> Result<(BinaryMask, Vec<f64>), GrabCutError> {
    check_dims(
        image.width(),
        image.height(),
        init_mask.width(),
        init_mask.height(),
    )?;
    run_grabcut_with_labeling_traced(image, &PixelLabeling::from_mask(init_mask), params)
}

pub fn run_grabcut(
    image: &RgbImage,
    init_mask: &BinaryMask,
    params: &GrabCutParams,
) -> Result<BinaryMask, GrabCutError> {
    run_grabcut_traced(image, init_mask, params).map(|(m, _)| m)
}
