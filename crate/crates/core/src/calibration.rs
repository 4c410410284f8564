//! Model-versus-incident comparison: matching, Gamma fits and the
//! travel-time scale factor.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{GraphError, NodeIndex, RoadGraph};
use crate::osm::IncidentRecord;
use crate::routing::{CombinedField, RoutingError};

const GAMMA_TOLERANCE: f64 = 1e-9;
const GAMMA_MAX_ITERATIONS: usize = 100;
pub const HISTOGRAM_BIN_MINUTES: f64 = 2.0;
pub const HISTOGRAM_MAX_MINUTES: f64 = 60.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibrationError {
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("sample {index} is {value}; samples must be positive and finite")]
    NonPositive { index: usize, value: f64 },
    #[error("samples have zero variance; the Gamma MLE diverges")]
    ZeroVariance,
    #[error("Gamma shape did not converge in {} iterations (last {:?})", trace.len(), trace.last())]
    NoConvergence { trace: Vec<f64> },
    #[error("real and model samples differ in length ({0} vs {1})")]
    Unpaired(usize, usize),
    #[error("scale factor must be positive and finite, got {0}")]
    InvalidFactor(f64),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedIncident {
    pub incident: IncidentRecord,
    pub node: NodeIndex,
    pub distance_m: f64,
    pub model_minutes: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub matched: Vec<MatchedIncident>,
    /// Farther than the cutoff from every node.
    pub dropped_far: usize,
    /// Matched to a node the baseline cannot reach.
    pub dropped_unreachable: usize,
}

impl MatchReport {
    pub fn input_count(&self) -> usize {
        self.matched.len() + self.dropped_far + self.dropped_unreachable
    }

    pub fn real_minutes(&self) -> Vec<f64> {
        self.matched.iter().map(|m| m.incident.response_minutes).collect()
    }

    pub fn model_minutes(&self) -> Vec<f64> {
        self.matched.iter().map(|m| m.model_minutes).collect()
    }
}

/// Attaches each incident to its nearest node within `cutoff_m` and reads
/// the model response time there.
pub fn match_incidents(
    incidents: &[IncidentRecord],
    g: &RoadGraph,
    field: &CombinedField,
    cutoff_m: f64,
) -> Result<MatchReport, CalibrationError> {
    let mut report = MatchReport {
        matched: Vec::new(),
        dropped_far: 0,
        dropped_unreachable: 0,
    };
    for inc in incidents {
        match g.nearest_node(inc.pos, cutoff_m)? {
            None => report.dropped_far += 1,
            Some((node, _)) if !field.is_reachable(node) => report.dropped_unreachable += 1,
            Some((node, distance_m)) => report.matched.push(MatchedIncident {
                incident: inc.clone(),
                node,
                distance_m,
                model_minutes: field.time(node) / 60.0,
            }),
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaFit {
    pub shape: f64,
    pub scale: f64,
    pub n: usize,
    pub iterations: usize,
}

impl GammaFit {
    pub fn mean(&self) -> f64 {
        self.shape * self.scale
    }
}

/// Digamma function for x > 0: recurrence up to x ≥ 10, then the
/// asymptotic series.
pub(crate) fn digamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 10.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv2 = 1.0 / (x * x);
    acc + x.ln()
        - 0.5 / x
        - inv2
            * (1.0 / 12.0 - inv2 * (1.0 / 120.0 - inv2 * (1.0 / 252.0 - inv2 * (1.0 / 240.0 - inv2 * (1.0 / 132.0)))))
}

pub(crate) fn trigamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 10.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    acc + inv
        + inv2 / 2.0
        + inv
            * inv2
            * (1.0 / 6.0 - inv2 * (1.0 / 30.0 - inv2 * (1.0 / 42.0 - inv2 * (1.0 / 30.0 - inv2 * (5.0 / 66.0)))))
}

fn check_samples(samples: &[f64], needed: usize) -> Result<(), CalibrationError> {
    if samples.len() < needed {
        return Err(CalibrationError::TooFewSamples {
            needed,
            got: samples.len(),
        });
    }
    match samples.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
        Some(index) => Err(CalibrationError::NonPositive {
            index,
            value: samples[index],
        }),
        None => Ok(()),
    }
}

/// Like `check_samples` but zero is allowed; the mean must still be positive.
fn check_non_negative(samples: &[f64]) -> Result<(), CalibrationError> {
    if samples.is_empty() {
        return Err(CalibrationError::TooFewSamples { needed: 1, got: 0 });
    }
    if let Some(index) = samples.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(CalibrationError::NonPositive {
            index,
            value: samples[index],
        });
    }
    if mean(samples) <= 0.0 {
        return Err(CalibrationError::ZeroVariance);
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Maximum-likelihood Gamma fit. The shape solves
/// `ln k - ψ(k) = ln(mean) - mean(ln x)` by Newton iteration.
pub fn fit_gamma(samples: &[f64]) -> Result<GammaFit, CalibrationError> {
    check_samples(samples, 2)?;
    let m = mean(samples);
    let s = m.ln() - samples.iter().map(|x| x.ln()).sum::<f64>() / samples.len() as f64;
    if samples.iter().all(|&x| x == samples[0]) || s <= 0.0 {
        return Err(CalibrationError::ZeroVariance);
    }
    // closed-form starting point (Minka)
    let mut k = (3.0 - s + ((s - 3.0).powi(2) + 24.0 * s).sqrt()) / (12.0 * s);
    let mut trace = Vec::new();
    for it in 1..=GAMMA_MAX_ITERATIONS {
        let f = k.ln() - digamma(k) - s;
        let df = 1.0 / k - trigamma(k);
        let mut next = k - f / df;
        if !(next.is_finite() && next > 0.0) {
            next = k / 2.0;
        }
        trace.push(next);
        let converged = ((next - k) / k).abs() < GAMMA_TOLERANCE;
        k = next;
        if converged {
            return Ok(GammaFit {
                shape: k,
                scale: m / k,
                n: samples.len(),
                iterations: it,
            });
        }
    }
    Err(CalibrationError::NoConvergence { trace })
}

/// Ratio of sample means, `mean(real) / mean(model)`. Zero samples are
/// allowed (an incident at a full-time station's own node) as long as
/// both means are positive.
pub fn estimate_scale_factor(real: &[f64], model: &[f64]) -> Result<f64, CalibrationError> {
    if real.len() != model.len() {
        return Err(CalibrationError::Unpaired(real.len(), model.len()));
    }
    check_non_negative(real)?;
    check_non_negative(model)?;
    Ok(mean(real) / mean(model))
}

/// Two-sample Kolmogorov–Smirnov statistic between `a` and `factor·b`.
/// Both inputs must be sorted ascending.
fn ks_statistic(a: &[f64], b: &[f64], factor: f64) -> f64 {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j] * factor);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] * factor <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Factor minimizing the KS distance between `real` and `factor·model`:
/// a coarse log-spaced grid around the mean ratio, then two refinements.
/// Ties keep the smallest factor.
pub fn ks_minimizing_factor(real: &[f64], model: &[f64], around: f64) -> (f64, f64) {
    let mut a = real.to_vec();
    let mut b = model.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut lo, mut hi) = ((around / 4.0).ln(), (around * 4.0).ln());
    let mut best = (around, ks_statistic(&a, &b, around));
    for _ in 0..3 {
        let steps = 400;
        for i in 0..=steps {
            let f = (lo + (hi - lo) * i as f64 / steps as f64).exp();
            let d = ks_statistic(&a, &b, f);
            if d < best.1 || (d == best.1 && f < best.0) {
                best = (f, d);
            }
        }
        let width = (hi - lo) / steps as f64 * 2.0;
        lo = best.0.ln() - width;
        hi = best.0.ln() + width;
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleReport {
    pub n: usize,
    pub mean_real_minutes: f64,
    pub mean_model_minutes: f64,
    /// The factor used: ratio of sample means.
    pub factor: f64,
    pub factor_gamma_means: f64,
    pub factor_ks: f64,
    pub ks_at_factor: f64,
    pub ks_at_ks_factor: f64,
    pub ks_unscaled: f64,
    /// Gamma fits use the strictly positive samples only; these count the
    /// zeros left out.
    pub gamma_excluded_real: usize,
    pub gamma_excluded_model: usize,
    pub real_fit: GammaFit,
    pub model_fit: GammaFit,
    pub scaled_model_fit: GammaFit,
}

pub fn scale_report(real: &[f64], model: &[f64]) -> Result<ScaleReport, CalibrationError> {
    let factor = estimate_scale_factor(real, model)?;
    let positive = |v: &[f64]| v.iter().copied().filter(|x| *x > 0.0).collect::<Vec<_>>();
    let (real_pos, model_pos) = (positive(real), positive(model));
    let real_fit = fit_gamma(&real_pos)?;
    let model_fit = fit_gamma(&model_pos)?;
    let scaled: Vec<f64> = model_pos.iter().map(|m| m * factor).collect();
    let scaled_model_fit = fit_gamma(&scaled)?;
    let (factor_ks, ks_at_ks_factor) = ks_minimizing_factor(real, model, factor);
    let mut a = real.to_vec();
    let mut b = model.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    Ok(ScaleReport {
        n: real.len(),
        mean_real_minutes: mean(real),
        mean_model_minutes: mean(model),
        factor,
        factor_gamma_means: real_fit.mean() / model_fit.mean(),
        factor_ks,
        ks_at_factor: ks_statistic(&a, &b, factor),
        ks_at_ks_factor,
        ks_unscaled: ks_statistic(&a, &b, 1.0),
        gamma_excluded_real: real.len() - real_pos.len(),
        gamma_excluded_model: model.len() - model_pos.len(),
        real_fit,
        model_fit,
        scaled_model_fit,
    })
}

/// Multiplies the travel-time part of a combined field by `factor`; delays
/// are scaled too only when `scale_delays` is set.
pub fn apply_scale(field: &CombinedField, factor: f64, scale_delays: bool) -> Result<CombinedField, CalibrationError> {
    if !(factor.is_finite() && factor > 0.0) {
        return Err(CalibrationError::InvalidFactor(factor));
    }
    field
        .rescaled(factor, if scale_delays { factor } else { 1.0 })
        .map_err(|e| match e {
            RoutingError::InvalidFactor(f) => CalibrationError::InvalidFactor(f),
            other => unreachable!("rescaling a valid field: {other}"),
        })
}

/// Counts in fixed 2-minute bins over [0, 60) plus everything at or above 60.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Histogram {
    pub counts: Vec<usize>,
    pub overflow: usize,
}

impl Histogram {
    pub fn bin_edges(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        (0..self.counts.len()).map(|i| (i as f64 * HISTOGRAM_BIN_MINUTES, (i + 1) as f64 * HISTOGRAM_BIN_MINUTES))
    }
}

pub fn histogram(minutes: &[f64]) -> Histogram {
    let bins = (HISTOGRAM_MAX_MINUTES / HISTOGRAM_BIN_MINUTES) as usize;
    let mut h = Histogram {
        counts: vec![0; bins],
        overflow: 0,
    };
    for &m in minutes {
        let i = (m / HISTOGRAM_BIN_MINUTES).floor();
        if i >= 0.0 && (i as usize) < bins {
            h.counts[i as usize] += 1;
        } else if m >= HISTOGRAM_MAX_MINUTES {
            h.overflow += 1;
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::LonLat;
    use crate::graph::Edge;
    use crate::routing::{combine_fields, dijkstra_one_to_all, Weight};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Gamma};
    use std::sync::Arc;

    #[test]
    fn digamma_matches_reference() {
        for x in [0.05, 0.3, 1.0, 1.5, 2.0, 7.3, 12.0, 150.0] {
            let want = statrs::function::gamma::digamma(x);
            assert!((digamma(x) - want).abs() < 1e-12 * want.abs().max(1.0), "ψ({x})");
        }
        // ψ(1) = -γ
        assert!((digamma(1.0) + 0.577_215_664_901_532_9).abs() < 1e-13);
    }

    #[test]
    fn trigamma_matches_numeric_derivative() {
        for x in [0.2, 1.0, 3.5, 20.0] {
            let h = 1e-5 * x;
            let numeric =
                (statrs::function::gamma::digamma(x + h) - statrs::function::gamma::digamma(x - h)) / (2.0 * h);
            assert!((trigamma(x) - numeric).abs() < 1e-6 * numeric, "ψ'({x})");
        }
        // ψ'(1) = π²/6
        assert!((trigamma(1.0) - std::f64::consts::PI.powi(2) / 6.0).abs() < 1e-13);
    }

    #[test]
    fn gamma_mle_recovers_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let dist = Gamma::new(2.0, 3.0).unwrap();
        let samples: Vec<f64> = (0..10_000).map(|_| dist.sample(&mut rng)).collect();
        let fit = fit_gamma(&samples).unwrap();
        assert!((1.9..=2.1).contains(&fit.shape), "{fit:?}");
        assert!((2.85..=3.15).contains(&fit.scale), "{fit:?}");
        assert!(fit.iterations <= GAMMA_MAX_ITERATIONS);
    }

    #[test]
    fn gamma_fit_errors() {
        assert_eq!(fit_gamma(&[4.0; 10]), Err(CalibrationError::ZeroVariance));
        assert!(matches!(fit_gamma(&[1.0]), Err(CalibrationError::TooFewSamples { .. })));
        assert!(matches!(
            fit_gamma(&[1.0, 0.0, 2.0]),
            Err(CalibrationError::NonPositive { index: 1, .. })
        ));
        assert!(matches!(
            fit_gamma(&[1.0, -3.0]),
            Err(CalibrationError::NonPositive { .. })
        ));
    }

    #[test]
    fn scale_factor_construction() {
        let model: Vec<f64> = (1..=50).map(|i| i as f64 * 0.7).collect();
        let real: Vec<f64> = model.iter().map(|m| m * 2.8).collect();
        assert!((estimate_scale_factor(&real, &model).unwrap() - 2.8).abs() < 1e-9);
        assert_eq!(estimate_scale_factor(&model, &model).unwrap(), 1.0);
        assert!(estimate_scale_factor(&[], &[]).is_err());
        assert!(estimate_scale_factor(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn report_brackets_factor() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let dist = Gamma::new(3.0, 2.0).unwrap();
        let model: Vec<f64> = (0..700).map(|_| dist.sample(&mut rng)).collect();
        let real: Vec<f64> = model.iter().map(|m| m * 2.8).collect();
        let r = scale_report(&real, &model).unwrap();
        assert!((r.factor - 2.8).abs() < 1e-9);
        assert!((r.factor_gamma_means - 2.8).abs() < 1e-9);
        assert!((r.factor_ks - 2.8).abs() < 0.01, "{}", r.factor_ks);
        assert!(r.ks_at_factor < 0.01);
        assert!(r.ks_unscaled > 0.5);
        assert!((r.scaled_model_fit.shape - r.model_fit.shape).abs() < 1e-6);
    }

    #[test]
    fn histogram_bins() {
        let h = histogram(&[0.0, 1.99, 2.0, 59.9, 60.0, 75.0]);
        assert_eq!(h.counts.len(), 30);
        assert_eq!(h.counts[0], 2);
        assert_eq!(h.counts[1], 1);
        assert_eq!(h.counts[29], 1);
        assert_eq!(h.overflow, 2);
        assert_eq!(h.bin_edges().nth(1), Some((2.0, 4.0)));
    }

    fn line_setup() -> (RoadGraph, CombinedField) {
        let nodes: Vec<_> = (0..4)
            .map(|i| (i, LonLat::new(6.0 + i as f64 * 0.01, 62.0).unwrap()))
            .collect();
        let g = RoadGraph::new(
            nodes,
            vec![
                Edge::new(NodeIndex(0), NodeIndex(1), 120.0, 3.6),
                Edge::new(NodeIndex(1), NodeIndex(2), 120.0, 3.6),
            ],
        )
        .unwrap();
        let f = Arc::new(dijkstra_one_to_all(&g, NodeIndex(0), Weight::Time));
        let c = combine_fields(&[f], &[0.0], &[true]).unwrap();
        (g, c)
    }

    #[test]
    fn matching_cutoff() {
        let (g, field) = line_setup();
        let at = |lon: f64, lat: f64| IncidentRecord {
            pos: LonLat::new(lon, lat).unwrap(),
            response_minutes: 10.0,
        };
        let incidents = [
            at(g.nodes()[1].pos.lon, 62.0),
            at(6.02, 62.0 + 150.0 / 111_132.87),
            at(6.03, 62.0),
        ];
        let r = match_incidents(&incidents, &g, &field, 100.0).unwrap();
        assert_eq!(r.matched.len(), 1);
        assert_eq!(r.matched[0].distance_m, 0.0);
        assert_eq!(r.matched[0].model_minutes, 2.0);
        assert_eq!(r.dropped_far, 1);
        assert_eq!(r.dropped_unreachable, 1);
        assert_eq!(r.input_count(), 3);
    }

    #[test]
    fn apply_scale_behaviour() {
        let (_, field) = line_setup();
        assert_eq!(apply_scale(&field, 1.0, false).unwrap(), field);
        let scaled = apply_scale(&field, 2.8, false).unwrap();
        assert_eq!(scaled.best_time()[2], 240.0 * 2.8);
        assert!(apply_scale(&field, 0.0, false).is_err());
        assert!(apply_scale(&field, -2.0, false).is_err());
    }

    #[test]
    fn zero_model_times_are_left_out_of_fits_only() {
        let real = [4.0, 6.0, 9.0, 12.0, 7.5];
        let model = [0.0, 3.0, 5.0, 8.0, 4.0];
        let r = scale_report(&real, &model).unwrap();
        assert_eq!(r.factor, 38.5 / 20.0);
        assert_eq!((r.gamma_excluded_real, r.gamma_excluded_model), (0, 1));
        assert_eq!(r.model_fit.n, 4);
        assert!(estimate_scale_factor(&real, &[0.0; 5]).is_err());
        assert!(estimate_scale_factor(&real, &[1.0, -1.0, 1.0, 1.0, 1.0]).is_err());
    }

    proptest! {
        #[test]
        fn fit_is_scale_equivariant(
            xs in prop::collection::vec(0.1f64..50.0, 5..60),
            c in 0.2f64..20.0,
        ) {
            prop_assume!(xs.iter().any(|x| (x - xs[0]).abs() > 1e-3));
            let a = fit_gamma(&xs).unwrap();
            let scaled: Vec<f64> = xs.iter().map(|x| x * c).collect();
            let b = fit_gamma(&scaled).unwrap();
            prop_assert!((a.shape - b.shape).abs() <= 1e-6 * a.shape);
            prop_assert!((a.scale * c - b.scale).abs() <= 1e-6 * b.scale);
        }

        #[test]
        fn factor_is_mean_ratio(pairs in prop::collection::vec((0.1f64..100.0, 0.1f64..100.0), 1..100)) {
            let real: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let model: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let want = (real.iter().sum::<f64>() / real.len() as f64) / (model.iter().sum::<f64>() / model.len() as f64);
            prop_assert_eq!(estimate_scale_factor(&real, &model).unwrap(), want);
        }
    }
}
