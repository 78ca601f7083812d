//! Full-covariance Gaussian mixture models fitted by EM.
//!
//! Dimension is a const parameter: GrabCut fits 3-D color mixtures, the
//! appearance segmenter fits 5-D color+position mixtures. Initialization is
//! k-means++ seeding plus a few k-means rounds, all driven by a caller seed so
//! fits are bit-reproducible.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Diagonal floor added to every covariance each M-step. Keeps mixtures
/// non-singular on flat color regions.
pub const COV_EPSILON: f64 = 1e-3;
/// Default component count for GrabCut color models.
pub const DEFAULT_COMPONENTS: usize = 5;

const KMEANS_ROUNDS: usize = 5;
const LOG_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Error)]
pub enum GmmError {
    #[error("component count must be at least 1")]
    ZeroComponents,
    #[error("{samples} samples cannot support {k} components")]
    TooFewSamples { samples: usize, k: usize },
    #[error("weights sum to {0}, expected 1")]
    BadWeightSum(f64),
    #[error("negative weight {0}")]
    NegativeWeight(f64),
    #[error("covariance of component {0} is not symmetric positive-definite")]
    BadCovariance(usize),
    #[error("model dimension {got} does not match expected {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("assignment index {index} out of range for {k} components")]
    BadAssignment { index: usize, k: usize },
    #[error("assignment list length {got} does not match sample count {expected}")]
    AssignmentLengthMismatch { got: usize, expected: usize },
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
fn cholesky<const D: usize>(a: &[[f64; D]; D]) -> Option<[[f64; D]; D]> {
    let mut l = [[0.0; D]; D];
    for i in 0..D {
        for j in 0..=i {
            let mut sum = a[i][j];
            for k in 0..j {
                sum -= l[i][k] * l[j][k];
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return None;
                }
                l[i][i] = sum.sqrt();
            } else {
                l[i][j] = sum / l[j][j];
            }
        }
    }
    Some(l)
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

/// One mixture component with a cached Cholesky factor of its covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct Component<const D: usize> {
    weight: f64,
    mean: [f64; D],
    cov: [[f64; D]; D],
    chol: [[f64; D]; D],
    // -D/2 * log(2pi) - 1/2 * logdet(cov)
    log_norm: f64,
}

impl<const D: usize> Component<D> {
    fn new(weight: f64, mean: [f64; D], cov: [[f64; D]; D], index: usize) -> Result<Self, GmmError> {
        for i in 0..D {
            for j in 0..i {
                if (cov[i][j] - cov[j][i]).abs() > 1e-9 {
                    return Err(GmmError::BadCovariance(index));
                }
            }
        }
        let chol = cholesky(&cov).ok_or(GmmError::BadCovariance(index))?;
        let logdet: f64 = (0..D).map(|i| chol[i][i].ln()).sum::<f64>() * 2.0;
        Ok(Self {
            weight,
            mean,
            cov,
            chol,
            log_norm: -0.5 * (D as f64) * LOG_2PI - 0.5 * logdet,
        })
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn mean(&self) -> &[f64; D] {
        &self.mean
    }

    pub fn covariance(&self) -> &[[f64; D]; D] {
        &self.cov
    }

    /// Log Gaussian density at `x`, ignoring the mixture weight.
    pub fn log_gaussian(&self, x: &[f64; D]) -> f64 {
        // forward-substitute L y = x - mean, then |y|^2 is the Mahalanobis term
        let mut y = [0.0; D];
        for i in 0..D {
            let mut s = x[i] - self.mean[i];
            for k in 0..i {
                s -= self.chol[i][k] * y[k];
            }
            y[i] = s / self.chol[i][i];
        }
        let maha: f64 = y.iter().map(|v| v * v).sum();
        self.log_norm - 0.5 * maha
    }
}

/// K-component Gaussian mixture over D-dimensional samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Gmm<const D: usize> {
    components: Vec<Component<D>>,
}

pub type ColorGmm = Gmm<3>;

impl<const D: usize> Gmm<D> {
    /// Builds a mixture from explicit parameters, validating the invariants:
    /// weights non-negative summing to 1, covariances symmetric PD.
    pub fn new(params: Vec<(f64, [f64; D], [[f64; D]; D])>) -> Result<Self, GmmError> {
        if params.is_empty() {
            return Err(GmmError::ZeroComponents);
        }
        let sum: f64 = params.iter().map(|(w, _, _)| w).sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(GmmError::BadWeightSum(sum));
        }
        if let Some((w, _, _)) = params.iter().find(|(w, _, _)| *w < 0.0) {
            return Err(GmmError::NegativeWeight(*w));
        }
        let components = params
            .into_iter()
            .enumerate()
            .map(|(i, (w, m, c))| Component::new(w, m, c, i))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { components })
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn components(&self) -> &[Component<D>] {
        &self.components
    }

    /// Log of the mixture density log Σ_k π_k N(x; μ_k, Σ_k).
    ///
    /// Finite for every finite sample: the covariance floor bounds each
    /// Gaussian away from degeneracy and at least one weight is positive.
    pub fn log_density(&self, x: &[f64; D]) -> f64 {
        let terms: Vec<f64> = self
            .components
            .iter()
            .filter(|c| c.weight > 0.0)
            .map(|c| c.weight.ln() + c.log_gaussian(x))
            .collect();
        log_sum_exp(&terms)
    }

    /// Index of the component with the highest weighted density at `x`.
    /// Ties break to the lowest index.
    pub fn assign_component(&self, x: &[f64; D]) -> usize {
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (k, c) in self.components.iter().enumerate() {
            let score = if c.weight > 0.0 {
                c.weight.ln() + c.log_gaussian(x)
            } else {
                f64::NEG_INFINITY
            };
            if score > best_score {
                best_score = score;
                best = k;
            }
        }
        best
    }

    /// Total log-likelihood of a sample set under this model.
    pub fn log_likelihood(&self, samples: &[[f64; D]]) -> f64 {
        samples.iter().map(|s| self.log_density(s)).sum()
    }

    pub fn to_dto(&self) -> GmmDto {
        GmmDto {
            weights: self.components.iter().map(|c| c.weight).collect(),
            means: self
                .components
                .iter()
                .map(|c| c.mean.to_vec())
                .collect(),
            covariances: self
                .components
                .iter()
                .map(|c| c.cov.iter().map(|row| row.to_vec()).collect())
                .collect(),
        }
    }

    pub fn from_dto(dto: &GmmDto) -> Result<Self, GmmError> {
        let k = dto.weights.len();
        if k == 0 {
            return Err(GmmError::ZeroComponents);
        }
        let mut params = Vec::with_capacity(k);
        for i in 0..k {
            let mean_v = dto
                .means
                .get(i)
                .ok_or(GmmError::DimensionMismatch { got: dto.means.len(), expected: k })?;
            if mean_v.len() != D {
                return Err(GmmError::DimensionMismatch {
                    got: mean_v.len(),
                    expected: D,
                });
            }
            let mut mean = [0.0; D];
            mean.copy_from_slice(mean_v);
            let cov_v = dto
                .covariances
                .get(i)
                .ok_or(GmmError::DimensionMismatch { got: dto.covariances.len(), expected: k })?;
            let mut cov = [[0.0; D]; D];
            for (r, row) in cov_v.iter().enumerate() {
                if r >= D || row.len() != D {
                    return Err(GmmError::DimensionMismatch {
                        got: row.len(),
                        expected: D,
                    });
                }
                cov[r].copy_from_slice(row);
            }
            if cov_v.len() != D {
                return Err(GmmError::DimensionMismatch {
                    got: cov_v.len(),
                    expected: D,
                });
            }
            params.push((dto.weights[i], mean, cov));
        }
        Self::new(params)
    }
}

/// Serialization form of a mixture; plain vectors so it survives JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GmmDto {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Vec<Vec<f64>>>,
}

fn sq_dist<const D: usize>(a: &[f64; D], b: &[f64; D]) -> f64 {
    (0..D).map(|i| (a[i] - b[i]) * (a[i] - b[i])).sum()
}

/// Mean and biased covariance (+ εI) of the rows of `samples` selected by `pick`.
fn moments<const D: usize>(
    samples: &[[f64; D]],
    weights: impl Fn(usize) -> f64,
) -> Option<(f64, [f64; D], [[f64; D]; D])> {
    let mut total = 0.0;
    let mut mean = [0.0; D];
    for (i, s) in samples.iter().enumerate() {
        let w = weights(i);
        total += w;
        for d in 0..D {
            mean[d] += w * s[d];
        }
    }
    if total <= 0.0 {
        return None;
    }
    for m in mean.iter_mut() {
        *m /= total;
    }
    let mut cov = [[0.0; D]; D];
    for (i, s) in samples.iter().enumerate() {
        let w = weights(i);
        if w == 0.0 {
            continue;
        }
        for r in 0..D {
            let dr = s[r] - mean[r];
            for c in 0..=r {
                cov[r][c] += w * dr * (s[c] - mean[c]);
            }
        }
    }
    for r in 0..D {
        for c in 0..=r {
            cov[r][c] /= total;
            cov[c][r] = cov[r][c];
        }
        cov[r][r] += COV_EPSILON;
    }
    Some((total, mean, cov))
}

/// k-means++ seeding followed by a fixed number of Lloyd rounds.
fn kmeans_centers<const D: usize>(
    samples: &[[f64; D]],
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<[f64; D]> {
    let n = samples.len();
    let mut centers: Vec<[f64; D]> = Vec::with_capacity(k);
    centers.push(samples[rng.gen_range(0..n)]);
    let mut dist: Vec<f64> = samples.iter().map(|s| sq_dist(s, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &d) in dist.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            // all remaining mass identical to a chosen center
            rng.gen_range(0..n)
        };
        centers.push(samples[next]);
        for (i, s) in samples.iter().enumerate() {
            dist[i] = dist[i].min(sq_dist(s, &centers[centers.len() - 1]));
        }
    }

    let mut assignment = vec![0usize; n];
    for _ in 0..KMEANS_ROUNDS {
        for (i, s) in samples.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, center) in centers.iter().enumerate() {
                let d = sq_dist(s, center);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            assignment[i] = best;
        }
        for (c, center) in centers.iter_mut().enumerate() {
            let mut count = 0usize;
            let mut acc = [0.0; D];
            for (i, s) in samples.iter().enumerate() {
                if assignment[i] == c {
                    count += 1;
                    for d in 0..D {
                        acc[d] += s[d];
                    }
                }
            }
            // empty cluster keeps its previous center
            if count > 0 {
                for d in 0..D {
                    center[d] = acc[d] / count as f64;
                }
            }
        }
    }
    centers
}

fn model_from_hard_assignment<const D: usize>(
    samples: &[[f64; D]],
    assignment: &[usize],
    centers: &[[f64; D]],
) -> Gmm<D> {
    let n = samples.len() as f64;
    let components = centers
        .iter()
        .enumerate()
        .map(|(c, center)| {
            match moments(samples, |i| if assignment[i] == c { 1.0 } else { 0.0 }) {
                Some((count, mean, cov)) => {
                    Component::new(count / n, mean, cov, c).expect("regularized covariance is PD")
                }
                None => {
                    // empty cluster: zero weight, unit-epsilon ball at the center
                    let mut cov = [[0.0; D]; D];
                    for (d, row) in cov.iter_mut().enumerate() {
                        row[d] = COV_EPSILON;
                    }
                    Component::new(0.0, *center, cov, c).expect("epsilon ball is PD")
                }
            }
        })
        .collect();
    Gmm { components }
}

/// One EM iteration. Returns the proposed model and the log-likelihood of the
/// data under the *current* model (a byproduct of the E-step).
fn em_step<const D: usize>(model: &Gmm<D>, samples: &[[f64; D]]) -> (Gmm<D>, f64) {
    let n = samples.len();
    let k = model.k();
    let mut resp = vec![0.0f64; n * k];
    let mut per_sample_ll = vec![0.0f64; n];
    let mut terms = vec![f64::NEG_INFINITY; k];
    for (i, s) in samples.iter().enumerate() {
        for (c, comp) in model.components.iter().enumerate() {
            terms[c] = if comp.weight > 0.0 {
                comp.weight.ln() + comp.log_gaussian(s)
            } else {
                f64::NEG_INFINITY
            };
        }
        let lse = log_sum_exp(&terms);
        per_sample_ll[i] = lse;
        for c in 0..k {
            resp[i * k + c] = (terms[c] - lse).exp();
        }
    }
    let ll: f64 = per_sample_ll.iter().sum();

    let mut empty = Vec::new();
    let mut components: Vec<Option<Component<D>>> = (0..k)
        .map(|c| {
            moments(samples, |i| resp[i * k + c]).map(|(mass, mean, cov)| {
                Component::new(mass / n as f64, mean, cov, c).expect("regularized covariance is PD")
            })
        })
        .collect();
    for (c, comp) in components.iter().enumerate() {
        if comp.is_none() {
            empty.push(c);
        }
    }
    if !empty.is_empty() {
        // revive dead components at the worst-explained samples
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| per_sample_ll[a].total_cmp(&per_sample_ll[b]).then(a.cmp(&b)));
        for (slot, &c) in empty.iter().enumerate() {
            let sample = samples[order[slot % n]];
            let mut cov = [[0.0; D]; D];
            for (d, row) in cov.iter_mut().enumerate() {
                row[d] = COV_EPSILON;
            }
            components[c] =
                Some(Component::new(1.0 / n as f64, sample, cov, c).expect("epsilon ball is PD"));
        }
    }
    let mut components: Vec<Component<D>> = components.into_iter().map(|c| c.unwrap()).collect();
    let total_w: f64 = components.iter().map(|c| c.weight).sum();
    for c in components.iter_mut() {
        c.weight /= total_w;
    }
    (Gmm { components }, ll)
}

fn validate_fit_inputs<const D: usize>(samples: &[[f64; D]], k: usize) -> Result<(), GmmError> {
    if k == 0 {
        return Err(GmmError::ZeroComponents);
    }
    if samples.len() < k {
        return Err(GmmError::TooFewSamples {
            samples: samples.len(),
            k,
        });
    }
    Ok(())
}

/// Fits a K-component mixture by EM and also returns the log-likelihood trace:
/// one entry for the seeded model, then one per EM iteration.
///
/// Each iteration's update is kept only if it does not lower the training
/// log-likelihood (the diagonal floor and component revival can push the raw
/// EM update downhill), so the trace is non-decreasing. Termination: relative
/// improvement < `tol`, or `max_iter` iterations; `tol = 0` always runs the
/// full `max_iter`.
pub fn fit_gmm_traced<const D: usize>(
    samples: &[[f64; D]],
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<(Gmm<D>, Vec<f64>), GmmError> {
    validate_fit_inputs(samples, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = kmeans_centers(samples, k, &mut rng);
    let mut assignment = vec![0usize; samples.len()];
    for (i, s) in samples.iter().enumerate() {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (c, center) in centers.iter().enumerate() {
            let d = sq_dist(s, center);
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        assignment[i] = best;
    }
    let mut model = model_from_hard_assignment(samples, &assignment, &centers);
    let mut ll = model.log_likelihood(samples);
    let mut trace = vec![ll];
    for _ in 0..max_iter {
        let (candidate, _) = em_step(&model, samples);
        let candidate_ll = candidate.log_likelihood(samples);
        if candidate_ll >= ll {
            model = candidate;
        }
        let new_ll = ll.max(candidate_ll);
        let improvement = new_ll - ll;
        let rel = if ll == 0.0 {
            improvement
        } else {
            improvement / ll.abs()
        };
        ll = new_ll;
        trace.push(ll);
        if rel < tol {
            break;
        }
    }
    Ok((model, trace))
}

/// Fits a K-component mixture by EM from a k-means++ seeded start.
pub fn fit_gmm<const D: usize>(
    samples: &[[f64; D]],
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<Gmm<D>, GmmError> {
    fit_gmm_traced(samples, k, seed, max_iter, tol).map(|(m, _)| m)
}

/// Single M-step from hard component assignments, as used inside GrabCut's
/// assign-then-refit loop. Components with no assigned samples keep zero
/// weight and never win `assign_component`, so `k` may exceed the sample
/// count here (a shrinking region keeps its component slots).
pub fn fit_from_assignments<const D: usize>(
    samples: &[[f64; D]],
    assignment: &[usize],
    k: usize,
) -> Result<Gmm<D>, GmmError> {
    if k == 0 {
        return Err(GmmError::ZeroComponents);
    }
    if samples.is_empty() {
        return Err(GmmError::TooFewSamples { samples: 0, k });
    }
    if assignment.len() != samples.len() {
        return Err(GmmError::AssignmentLengthMismatch {
            got: assignment.len(),
            expected: samples.len(),
        });
    }
    if let Some(&bad) = assignment.iter().find(|&&a| a >= k) {
        return Err(GmmError::BadAssignment { index: bad, k });
    }
    let centers = vec![[0.0; D]; k];
    Ok(model_from_hard_assignment(samples, assignment, &centers))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn identity<const D: usize>() -> [[f64; D]; D] {
        let mut m = [[0.0; D]; D];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        m
    }

    fn epsilon_ball<const D: usize>() -> [[f64; D]; D] {
        let mut m = [[0.0; D]; D];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = COV_EPSILON;
        }
        m
    }

    fn blob_samples(seed: u64, n: usize, center: [f64; 3], spread: f64) -> Vec<[f64; 3]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                [
                    center[0] + spread * (rng.gen::<f64>() - 0.5),
                    center[1] + spread * (rng.gen::<f64>() - 0.5),
                    center[2] + spread * (rng.gen::<f64>() - 0.5),
                ]
            })
            .collect()
    }

    #[test]
    fn k1_is_sample_mean_and_covariance() {
        let samples = blob_samples(7, 40, [0.4, 0.6, 0.2], 0.3);
        let model = fit_gmm(&samples, 1, 0, 10, 0.0).unwrap();
        let n = samples.len() as f64;

        let mut mean = [0.0; 3];
        for s in &samples {
            for d in 0..3 {
                mean[d] += s[d] / n;
            }
        }
        let mut cov = [[0.0; 3]; 3];
        for s in &samples {
            for r in 0..3 {
                for c in 0..3 {
                    cov[r][c] += (s[r] - mean[r]) * (s[c] - mean[c]) / n;
                }
            }
        }
        for (d, row) in cov.iter_mut().enumerate() {
            row[d] += COV_EPSILON;
        }

        let comp = &model.components()[0];
        assert!((comp.weight() - 1.0).abs() < 1e-12);
        for d in 0..3 {
            assert!((comp.mean()[d] - mean[d]).abs() < 1e-9);
        }
        for r in 0..3 {
            for c in 0..3 {
                assert!((comp.covariance()[r][c] - cov[r][c]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn two_point_clusters_are_recovered_exactly() {
        let mut samples = vec![[0.0, 0.0, 0.0]; 50];
        samples.extend(vec![[1.0, 1.0, 1.0]; 50]);
        let model = fit_gmm(&samples, 2, 3, 20, 0.0).unwrap();

        let mut comps: Vec<&Component<3>> = model.components().iter().collect();
        comps.sort_by(|a, b| a.mean()[0].total_cmp(&b.mean()[0]));
        for (comp, target) in comps.iter().zip([[0.0; 3], [1.0; 3]]) {
            assert!((comp.weight() - 0.5).abs() < 1e-9);
            for d in 0..3 {
                assert!((comp.mean()[d] - target[d]).abs() < 1e-9);
            }
            for r in 0..3 {
                for c in 0..3 {
                    let want = if r == c { COV_EPSILON } else { 0.0 };
                    assert!((comp.covariance()[r][c] - want).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn zero_tolerance_runs_exactly_max_iter() {
        let samples = blob_samples(11, 30, [0.5, 0.5, 0.5], 0.4);
        for max_iter in [1, 3, 8] {
            let (_, trace) = fit_gmm_traced(&samples, 2, 5, max_iter, 0.0).unwrap();
            assert_eq!(trace.len(), max_iter + 1);
        }
    }

    #[test]
    fn log_density_of_standard_normal_at_mean() {
        let model: Gmm<3> = Gmm::new(vec![(1.0, [0.0; 3], identity())]).unwrap();
        let expected = -1.5 * LOG_2PI;
        assert!((model.log_density(&[0.0; 3]) - expected).abs() < 1e-12);
    }

    #[test]
    fn density_invariant_under_component_permutation() {
        let a = (0.3, [0.1, 0.2, 0.3], epsilon_ball());
        let b = (0.7, [0.8, 0.7, 0.6], identity());
        let m1: Gmm<3> = Gmm::new(vec![a, b]).unwrap();
        let m2: Gmm<3> = Gmm::new(vec![b, a]).unwrap();
        for p in [[0.0; 3], [0.5, 0.4, 0.3], [1.0, 0.0, 1.0]] {
            assert!((m1.log_density(&p) - m2.log_density(&p)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_weight_component_is_inert() {
        let lead = (1.0, [0.2, 0.2, 0.2], identity());
        let dead = (0.0, [0.9, 0.9, 0.9], epsilon_ball());
        let two: Gmm<3> = Gmm::new(vec![lead, dead]).unwrap();
        let one: Gmm<3> = Gmm::new(vec![(1.0, lead.1, lead.2)]).unwrap();
        for p in [[0.15, 0.2, 0.25], [0.9, 0.9, 0.9]] {
            assert!((two.log_density(&p) - one.log_density(&p)).abs() < 1e-12);
        }
    }

    #[test]
    fn assignment_picks_dominant_component() {
        let model: Gmm<3> = Gmm::new(vec![
            (0.5, [0.0; 3], epsilon_ball()),
            (0.5, [1.0; 3], epsilon_ball()),
        ])
        .unwrap();
        assert_eq!(model.assign_component(&[0.0; 3]), 0);
        assert_eq!(model.assign_component(&[1.0; 3]), 1);
    }

    #[test]
    fn assignment_single_component_and_ties() {
        let single: Gmm<3> = Gmm::new(vec![(1.0, [0.5; 3], identity())]).unwrap();
        assert_eq!(single.assign_component(&[0.9, 0.1, 0.4]), 0);

        let twin = (0.5, [0.5; 3], identity());
        let tied: Gmm<3> = Gmm::new(vec![twin, twin]).unwrap();
        assert_eq!(tied.assign_component(&[0.3, 0.6, 0.2]), 0);
    }

    #[test]
    fn em_log_likelihood_is_monotone() {
        let mut samples = blob_samples(21, 60, [0.2, 0.3, 0.4], 0.2);
        samples.extend(blob_samples(22, 60, [0.8, 0.7, 0.6], 0.2));
        let (_, trace) = fit_gmm_traced(&samples, 3, 9, 25, 0.0).unwrap();
        for w in trace.windows(2) {
            assert!(
                w[1] >= w[0] - 1e-9 * w[0].abs(),
                "log-likelihood dropped: {} -> {}",
                w[0],
                w[1]
            );
        }
    }

    #[test]
    fn fits_are_bit_reproducible() {
        let samples = blob_samples(31, 80, [0.5, 0.4, 0.6], 0.5);
        let a = fit_gmm(&samples, 4, 123, 15, 0.0).unwrap();
        let b = fit_gmm(&samples, 4, 123, 15, 0.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn density_integrates_to_one() {
        let model: Gmm<3> = Gmm::new(vec![(1.0, [0.0; 3], identity())]).unwrap();
        let steps = 40usize;
        let h = 10.0 / steps as f64;
        let coord = |i: usize| -5.0 + (i as f64 + 0.5) * h;
        let mut total = 0.0;
        for ix in 0..steps {
            for iy in 0..steps {
                for iz in 0..steps {
                    total += model.log_density(&[coord(ix), coord(iy), coord(iz)]).exp();
                }
            }
        }
        total *= h * h * h;
        assert!((total - 1.0).abs() < 0.02, "integral = {total}");
    }

    #[test]
    fn fit_input_validation() {
        let samples = vec![[0.1; 3], [0.2; 3]];
        assert!(matches!(
            fit_gmm(&samples, 0, 0, 5, 0.0),
            Err(GmmError::ZeroComponents)
        ));
        assert!(matches!(
            fit_gmm(&samples, 3, 0, 5, 0.0),
            Err(GmmError::TooFewSamples { samples: 2, k: 3 })
        ));
    }

    #[test]
    fn dto_round_trip() {
        let mut samples = blob_samples(41, 50, [0.3, 0.3, 0.3], 0.3);
        samples.extend(blob_samples(42, 50, [0.7, 0.8, 0.9], 0.2));
        let model = fit_gmm(&samples, 2, 77, 10, 0.0).unwrap();
        let json = serde_json::to_string(&model.to_dto()).unwrap();
        let back = Gmm::<3>::from_dto(&serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(model, back);
    }

    #[test]
    fn hard_assignment_fit_matches_moments() {
        let samples = vec![[0.0, 0.0, 0.0], [0.2, 0.0, 0.0], [1.0, 1.0, 1.0]];
        let model = fit_from_assignments(&samples, &[0, 0, 1], 2).unwrap();
        let c0 = &model.components()[0];
        assert!((c0.weight() - 2.0 / 3.0).abs() < 1e-12);
        assert!((c0.mean()[0] - 0.1).abs() < 1e-12);
        // biased covariance of {0, 0.2} is 0.01
        assert!((c0.covariance()[0][0] - (0.01 + COV_EPSILON)).abs() < 1e-12);
        let c1 = &model.components()[1];
        assert!((c1.weight() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(*c1.mean(), [1.0, 1.0, 1.0]);
    }

    #[test]
    fn hard_assignment_fit_leaves_unused_component_inert() {
        let samples = vec![[0.1; 3], [0.15; 3], [0.2; 3]];
        let model = fit_from_assignments(&samples, &[0, 0, 0], 2).unwrap();
        assert_eq!(model.components()[1].weight(), 0.0);
        assert_eq!(model.assign_component(&[0.9; 3]), 0);
        assert!(model.log_density(&[0.12; 3]).is_finite());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn fitted_models_satisfy_invariants(
            seed in 0u64..1000,
            n in 6usize..40,
            k in 1usize..4,
        ) {
            let samples = blob_samples(seed, n, [0.5, 0.5, 0.5], 1.0);
            let model = fit_gmm(&samples, k.min(n), seed ^ 0xabcd, 8, 0.0).unwrap();

            let wsum: f64 = model.components().iter().map(|c| c.weight()).sum();
            prop_assert!((wsum - 1.0).abs() < 1e-9);
            for comp in model.components() {
                prop_assert!(comp.weight() >= 0.0);
                let cov = comp.covariance();
                for r in 0..3 {
                    for c in 0..3 {
                        prop_assert!((cov[r][c] - cov[c][r]).abs() < 1e-12);
                    }
                }
                prop_assert!(cholesky(cov).is_some());
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5555);
            for _ in 0..5 {
                let p = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
                prop_assert!(model.log_density(&p).is_finite());
                prop_assert!(model.assign_component(&p) < model.k());
            }
        }
    }
}
