//! Deviation diagnostics between observed (or adapted) content features and
//! the ideal features a synthetic generator planted.
//!
//! Per item: deviation angle `theta = arccos(cos(observed, ideal))`, the
//! signed effective projection onto the ideal direction, and the error
//! `D = 1 - cos(theta)` in [0, 2]. The aggregate `delta` is the mean of `D`
//! over items with nonzero rows on both sides.

use serde::Serialize;

use crate::attribution::cosine_similarity;
use crate::dataio::FeatureMatrix;
use crate::numkit::DenseVector;
use crate::recmodel::{item_forward, ModelState};
use crate::{Error, Result};

/// Angle in radians between the two vectors, in `[0, pi]`.
pub fn deviation_angle(ideal: &DenseVector, observed: &DenseVector) -> Result<f64> {
    let c = cosine_similarity(observed, ideal)?;
    Ok(c.clamp(-1.0, 1.0).acos())
}

/// Signed length of `observed` along the ideal direction, plus that
/// projection as a vector.
pub fn effective_component(
    observed: &DenseVector,
    ideal: &DenseVector,
) -> Result<(f64, DenseVector)> {
    let c = cosine_similarity(observed, ideal)?;
    let scalar = observed.norm() * c;
    let mut unit = ideal.clone();
    unit.scale(scalar / ideal.norm());
    Ok((scalar, unit))
}

/// `D = 1 - cos(observed, ideal)`, in `[0, 2]`.
pub fn feature_error(observed: &DenseVector, ideal: &DenseVector) -> Result<f64> {
    Ok(1.0 - cosine_similarity(observed, ideal)?)
}

/// Mean of [`feature_error`] over items; zero rows on either side are
/// skipped and counted. Returns `(delta, skipped)`.
pub fn expected_deviation(observed: &FeatureMatrix, ideal: &FeatureMatrix) -> Result<(f64, usize)> {
    if observed.n_items() != ideal.n_items() || observed.dim() != ideal.dim() {
        return Err(Error::dim(
            "expected_deviation",
            format!(
                "observed {}x{} vs ideal {}x{}",
                observed.n_items(),
                observed.dim(),
                ideal.n_items(),
                ideal.dim()
            ),
        ));
    }
    let mut sum = 0.0;
    let mut included = 0usize;
    let mut skipped = 0usize;
    for i in 0..observed.n_items() as u32 {
        let o = observed.row_vector(i);
        let d = ideal.row_vector(i);
        if o.norm() == 0.0 || d.norm() == 0.0 {
            skipped += 1;
            continue;
        }
        sum += feature_error(&o, &d)?;
        included += 1;
    }
    if included == 0 {
        return Err(Error::NoComparableItems);
    }
    Ok((sum / included as f64, skipped))
}

/// Heuristic label for a deviation, based on where the cosine falls.
/// This is a reading aid, not a sharp classifier: redirected features tend
/// to flip or lose the sign of the alignment, truncated ones keep a positive
/// but weakened alignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DeviationKind {
    /// cos(theta) < 0: pointing away from the ideal.
    Drift,
    /// 0 <= cos(theta) < threshold: aligned but weak.
    Omission,
    /// cos(theta) >= threshold.
    Aligned,
}

pub fn classify_deviation(cosine: f64, omission_threshold: f64) -> DeviationKind {
    if cosine < 0.0 {
        DeviationKind::Drift
    } else if cosine < omission_threshold {
        DeviationKind::Omission
    } else {
        DeviationKind::Aligned
    }
}

/// Per-item deviation diagnostics plus aggregates.
#[derive(Debug, Clone, Serialize)]
pub struct DeviationReport {
    /// Mean of D over included items.
    pub delta: f64,
    pub mean_theta: f64,
    pub items_included: usize,
    pub items_skipped: usize,
    /// Histogram of D over [0, 2].
    pub histogram: Histogram,
    pub per_item: Vec<ItemDeviation>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ItemDeviation {
    pub item: u32,
    pub theta: f64,
    pub error: f64,
    pub effective_scalar: f64,
    pub kind: DeviationKind,
}

#[derive(Debug, Clone, Serialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    fn build(values: impl Iterator<Item = f64>, lo: f64, hi: f64, bins: usize) -> Self {
        let mut counts = vec![0usize; bins];
        let width = (hi - lo) / bins as f64;
        for v in values {
            let idx = (((v - lo) / width) as usize).min(bins - 1);
            counts[idx] += 1;
        }
        Self { lo, hi, counts }
    }
}

const OMISSION_THRESHOLD: f64 = 0.5;

/// Compare a feature matrix against the ideal one, item by item.
pub fn deviation_report(
    observed: &FeatureMatrix,
    ideal: &FeatureMatrix,
) -> Result<DeviationReport> {
    let (delta, skipped) = expected_deviation(observed, ideal)?;
    let mut per_item = Vec::new();
    let mut theta_sum = 0.0;
    for i in 0..observed.n_items() as u32 {
        let o = observed.row_vector(i);
        let d = ideal.row_vector(i);
        if o.norm() == 0.0 || d.norm() == 0.0 {
            continue;
        }
        let theta = deviation_angle(&d, &o)?;
        let error = feature_error(&o, &d)?;
        let (scalar, _) = effective_component(&o, &d)?;
        theta_sum += theta;
        per_item.push(ItemDeviation {
            item: i,
            theta,
            error,
            effective_scalar: scalar,
            kind: classify_deviation(1.0 - error, OMISSION_THRESHOLD),
        });
    }
    let included = per_item.len();
    Ok(DeviationReport {
        delta,
        mean_theta: theta_sum / included as f64,
        items_included: included,
        items_skipped: skipped,
        histogram: Histogram::build(per_item.iter().map(|d| d.error), 0.0, 2.0, 20),
        per_item,
    })
}

/// Raw-vs-ideal and adapted-vs-ideal reports for a trained model. Adapted
/// rows are eval-mode adapter outputs for the named modality, compared in
/// the same feature space (the synthetic generator keeps `d_m` equal).
#[derive(Debug, Clone, Serialize)]
pub struct AdapterDeviationReport {
    pub raw: DeviationReport,
    pub adapted: DeviationReport,
    /// `raw.delta - adapted.delta`; positive means the adapter moved
    /// features toward the ideal.
    pub delta_improvement: f64,
}

pub fn adapter_deviation_report(
    state: &ModelState,
    raw: &FeatureMatrix,
    ideal: &FeatureMatrix,
) -> Result<AdapterDeviationReport> {
    let adapted = adapted_features(state, raw)?;
    let raw_report = deviation_report(raw, ideal)?;
    let adapted_report = deviation_report(&adapted, ideal)?;
    let delta_improvement = raw_report.delta - adapted_report.delta;
    Ok(AdapterDeviationReport {
        raw: raw_report,
        adapted: adapted_report,
        delta_improvement,
    })
}

/// Run every item's raw feature through the model's eval-mode adapter.
pub fn adapted_features(state: &ModelState, raw: &FeatureMatrix) -> Result<FeatureMatrix> {
    if state.branches.len() != 1 {
        return Err(Error::InvalidArgument(format!(
            "adapted-feature diagnostics need exactly one modality branch, model has {}",
            state.branches.len()
        )));
    }
    if raw.n_items() != state.n_items() {
        return Err(Error::dim(
            "adapted_features",
            format!("{} feature rows for {} items", raw.n_items(), state.n_items()),
        ));
    }
    let mut out = crate::numkit::DenseMatrix::zeros(raw.n_items(), raw.dim());
    for i in 0..raw.n_items() as u32 {
        let fwd = item_forward(state, &[raw], i, None)?;
        out.row_mut(i as usize)
            .copy_from_slice(fwd.branches[0].adapted.as_slice());
    }
    FeatureMatrix::new(raw.modality(), out)
}

/// Plain-text rendering of the two-report comparison.
pub fn render_comparison(report: &AdapterDeviationReport) -> String {
    let mut out = String::new();
    out.push_str("                delta        mean_theta   items\n");
    out.push_str(&format!(
        "raw vs ideal    {:<12.6} {:<12.6} {}\n",
        report.raw.delta, report.raw.mean_theta, report.raw.items_included
    ));
    out.push_str(&format!(
        "adapted         {:<12.6} {:<12.6} {}\n",
        report.adapted.delta, report.adapted.mean_theta, report.adapted.items_included
    ));
    out.push_str(&format!("delta improvement: {:+.6}\n", report.delta_improvement));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::DenseMatrix;

    fn v(parts: &[f64]) -> DenseVector {
        DenseVector::from_vec(parts.to_vec())
    }

    #[test]
    fn angle_fixed_cases() {
        let x = v(&[0.3, -0.7, 1.1]);
        assert_eq!(deviation_angle(&x, &x).unwrap(), 0.0);

        let mut neg = x.clone();
        neg.scale(-1.0);
        assert!((deviation_angle(&x, &neg).unwrap() - std::f64::consts::PI).abs() < 1e-12);

        let a = v(&[1.0, 0.0]);
        let b = v(&[1.0, 1.0]);
        assert!((deviation_angle(&a, &b).unwrap() - std::f64::consts::FRAC_PI_4).abs() < 1e-12);

        assert!(deviation_angle(&a, &v(&[0.0, 0.0])).is_err());
    }

    #[test]
    fn effective_component_cases() {
        let ideal = v(&[1.0, 0.0]);
        let (s, p) = effective_component(&v(&[0.0, 5.0]), &ideal).unwrap();
        assert!(s.abs() < 1e-15);
        assert!(p.as_slice().iter().all(|&x| x.abs() < 1e-15));

        let (s, _) = effective_component(&v(&[2.0, 0.0]), &ideal).unwrap();
        assert!((s - 2.0).abs() < 1e-12);

        let (s, p) = effective_component(&v(&[3.0, 4.0]), &ideal).unwrap();
        assert!((s - 3.0).abs() < 1e-12);
        assert!((p[0] - 3.0).abs() < 1e-12 && p[1].abs() < 1e-15);
    }

    #[test]
    fn error_fixed_cases() {
        let x = v(&[0.5, 0.5]);
        assert!(feature_error(&x, &x).unwrap().abs() < 1e-15);
        let mut neg = x.clone();
        neg.scale(-2.0);
        assert!((feature_error(&neg, &x).unwrap() - 2.0).abs() < 1e-12);
        let orth = v(&[0.5, -0.5]);
        assert!((feature_error(&orth, &x).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn error_equals_one_minus_cos_theta() {
        let mut rng = crate::numkit::SeededRng::new(31);
        for _ in 0..200 {
            let a = v(&[
                rng.uniform(-1.0, 1.0),
                rng.uniform(-1.0, 1.0),
                rng.uniform(-1.0, 1.0),
            ]);
            let b = v(&[
                rng.uniform(-1.0, 1.0),
                rng.uniform(-1.0, 1.0),
                rng.uniform(-1.0, 1.0),
            ]);
            let d = feature_error(&a, &b).unwrap();
            let theta = deviation_angle(&b, &a).unwrap();
            assert!((d - (1.0 - theta.cos())).abs() < 1e-12);
        }
    }

    #[test]
    fn delta_mean_and_skipping() {
        let ideal = FeatureMatrix::new(
            "visual",
            DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap(),
        )
        .unwrap();
        // Row 0 identical (D=0), row 1 orthogonal (D=1), row 2 zero (skipped).
        let observed = FeatureMatrix::new(
            "visual",
            DenseMatrix::from_rows(&[vec![2.0, 0.0], vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap(),
        )
        .unwrap();
        let (delta, skipped) = expected_deviation(&observed, &ideal).unwrap();
        assert!((delta - 0.5).abs() < 1e-12);
        assert_eq!(skipped, 1);
    }

    #[test]
    fn delta_zero_for_identical_matrices() {
        let m = FeatureMatrix::new(
            "visual",
            DenseMatrix::from_rows(&[vec![0.4, 0.6], vec![-1.0, 2.0]]).unwrap(),
        )
        .unwrap();
        let (delta, _) = expected_deviation(&m, &m).unwrap();
        assert_eq!(delta, 0.0);
    }

    #[test]
    fn delta_strictly_improves_when_a_row_is_fixed() {
        let ideal = FeatureMatrix::new(
            "visual",
            DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
        )
        .unwrap();
        let observed = FeatureMatrix::new(
            "visual",
            DenseMatrix::from_rows(&[vec![0.0, 1.0], vec![0.0, 1.0]]).unwrap(),
        )
        .unwrap();
        let (before, _) = expected_deviation(&observed, &ideal).unwrap();
        let mut fixed = observed.clone();
        fixed.matrix_mut().row_mut(0).copy_from_slice(&[1.0, 0.0]);
        let (after, _) = expected_deviation(&fixed, &ideal).unwrap();
        assert!(after < before);
    }

    #[test]
    fn delta_invariant_under_item_permutation() {
        let ideal = FeatureMatrix::new(
            "visual",
            DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap(),
        )
        .unwrap();
        let observed = FeatureMatrix::new(
            "visual",
            DenseMatrix::from_rows(&[vec![1.0, 0.2], vec![0.4, 1.0], vec![-1.0, 1.0]]).unwrap(),
        )
        .unwrap();
        let (a, _) = expected_deviation(&observed, &ideal).unwrap();

        let perm = [2usize, 0, 1];
        let permute = |m: &FeatureMatrix| {
            let rows: Vec<Vec<f64>> = perm.iter().map(|&i| m.row(i as u32).to_vec()).collect();
            FeatureMatrix::new("visual", DenseMatrix::from_rows(&rows).unwrap()).unwrap()
        };
        let (b, _) = expected_deviation(&permute(&observed), &permute(&ideal)).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn diagnostics_invariant_under_positive_rescaling() {
        let a = v(&[0.4, -0.8, 0.3]);
        let b = v(&[1.0, 0.5, -0.1]);
        let mut a2 = a.clone();
        a2.scale(13.0);
        let mut b2 = b.clone();
        b2.scale(0.01);
        assert!(
            (feature_error(&a, &b).unwrap() - feature_error(&a2, &b2).unwrap()).abs() < 1e-12
        );
        assert!(
            (deviation_angle(&b, &a).unwrap() - deviation_angle(&b2, &a2).unwrap()).abs()
                < 1e-12
        );
    }

    #[test]
    fn classifier_thresholds() {
        assert_eq!(classify_deviation(-0.2, 0.5), DeviationKind::Drift);
        assert_eq!(classify_deviation(0.2, 0.5), DeviationKind::Omission);
        assert_eq!(classify_deviation(0.9, 0.5), DeviationKind::Aligned);
    }
}
