//! Clinical comparator: linear regression of volume from manual 2D
//! measurements, re-fit per training fold. Single mode regresses on length
//! alone (the single-view analogue); triple mode uses length, width,
//! thickness and their product (the dual-view analogue).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SliceVolError};
use crate::phantom::{CaseRecord, ManualMeasurements};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasurementMode {
    Single,
    Triple,
}

impl MeasurementMode {
    fn features(&self, m: &ManualMeasurements) -> Vec<f64> {
        match self {
            Self::Single => vec![m.length_mm],
            // the product term carries the ellipsoid-like volume scaling
            Self::Triple => vec![
                m.length_mm,
                m.max_width_mm,
                m.thickness_at_hilum_mm,
                m.length_mm * m.max_width_mm * m.thickness_at_hilum_mm,
            ],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeasurementRegression {
    pub mode: MeasurementMode,
    pub coefficients: Vec<f64>,
    pub intercept: f64,
}

/// Ordinary least squares of volume_mL on the mode's feature map.
pub fn fit_measurement_regression(records: &[CaseRecord], mode: MeasurementMode) -> Result<MeasurementRegression> {
    if records.len() < 2 {
        return Err(SliceVolError::InsufficientData(format!(
            "measurement regression needs >= 2 cases, got {}",
            records.len()
        )));
    }
    let rows: Vec<Vec<f64>> = records.iter().map(|r| mode.features(&r.measurements)).collect();
    let d = rows[0].len();
    let n = rows.len();
    // design matrix with a leading intercept column
    let x = DMatrix::from_fn(n, d + 1, |i, j| if j == 0 { 1.0 } else { rows[i][j - 1] });
    let y = DVector::from_fn(n, |i, _| records[i].volume_ml);
    let gram = x.transpose() * &x;
    let coef = gram
        .cholesky()
        .map(|c| c.solve(&(x.transpose() * y)))
        .ok_or_else(|| SliceVolError::SingularFit("degenerate measurement design matrix".into()))?;
    Ok(MeasurementRegression {
        mode,
        coefficients: coef.iter().skip(1).copied().collect(),
        intercept: coef[0],
    })
}

/// Affine prediction over the feature map, clamped at 0 mL; the boolean flags
/// a clamped (negative raw) prediction.
pub fn predict_measurement_regression(
    model: &MeasurementRegression,
    measurements: &ManualMeasurements,
) -> Result<(f64, bool)> {
    let feats = model.mode.features(measurements);
    if feats.len() != model.coefficients.len() {
        return Err(SliceVolError::DimMismatch { expected: model.coefficients.len(), got: feats.len() });
    }
    let raw =
        model.intercept + feats.iter().zip(&model.coefficients).map(|(&f, &c)| f * c).sum::<f64>();
    Ok((raw.max(0.0), raw < 0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn case(id: &str, vol: f64, l: f64, w: f64, th: f64) -> CaseRecord {
        CaseRecord::new(
            id,
            vol,
            ManualMeasurements { length_mm: l, max_width_mm: w, thickness_at_hilum_mm: th },
        )
    }

    fn ellipsoid_family(n: usize, seed: u64) -> Vec<CaseRecord> {
        // For an axis-aligned ellipsoid, volume = pi/6 * L * W * Th exactly,
        // so the triple mode's product feature is sufficient for a near-exact
        // fit.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let l = rng.gen_range(60.0..160.0);
                let w = rng.gen_range(40.0..100.0);
                let th = rng.gen_range(25.0..70.0);
                let vol = std::f64::consts::PI / 6.0 * l * w * th / 1000.0; // mm^3 -> mL
                case(&format!("e{i}"), vol, l, w, th)
            })
            .collect()
    }

    #[test]
    fn triple_mode_is_near_exact_on_ellipsoids() {
        let train = ellipsoid_family(40, 1);
        let test = ellipsoid_family(20, 2);
        let model = fit_measurement_regression(&train, MeasurementMode::Triple).unwrap();
        let truths: Vec<f64> = test.iter().map(|r| r.volume_ml).collect();
        let preds: Vec<f64> = test
            .iter()
            .map(|r| predict_measurement_regression(&model, &r.measurements).unwrap().0)
            .collect();
        let (mrva, _) = crate::eval::mrva(&truths, &preds).unwrap();
        assert!(mrva >= 95.0, "triple-mode MRVA {mrva} below 95");
    }

    #[test]
    fn single_mode_ignores_width_and_thickness() {
        let train = ellipsoid_family(30, 3);
        let model = fit_measurement_regression(&train, MeasurementMode::Single).unwrap();
        assert_eq!(model.coefficients.len(), 1);
        let a = ManualMeasurements { length_mm: 100.0, max_width_mm: 50.0, thickness_at_hilum_mm: 30.0 };
        let b = ManualMeasurements { length_mm: 100.0, max_width_mm: 90.0, thickness_at_hilum_mm: 65.0 };
        assert_eq!(
            predict_measurement_regression(&model, &a).unwrap(),
            predict_measurement_regression(&model, &b).unwrap()
        );
    }

    #[test]
    fn exact_linear_system_reproduces_training_volumes() {
        // volumes constructed as an exact affine function of L
        let records: Vec<CaseRecord> =
            (0..10).map(|i| case(&format!("c{i}"), 3.0 * (80.0 + 5.0 * i as f64) - 40.0, 80.0 + 5.0 * i as f64, 50.0, 30.0)).collect();
        let model = fit_measurement_regression(&records, MeasurementMode::Single).unwrap();
        for r in &records {
            let (pred, clamped) = predict_measurement_regression(&model, &r.measurements).unwrap();
            assert!(!clamped);
            assert!((pred - r.volume_ml).abs() / r.volume_ml < 1e-6);
        }
    }

    #[test]
    fn identical_measurements_are_singular() {
        let records: Vec<CaseRecord> = (0..5).map(|i| case(&format!("c{i}"), 100.0 + i as f64, 90.0, 50.0, 30.0)).collect();
        assert!(matches!(
            fit_measurement_regression(&records, MeasurementMode::Single),
            Err(SliceVolError::SingularFit(_))
        ));
        assert!(fit_measurement_regression(&records[..1], MeasurementMode::Single).is_err());
    }

    #[test]
    fn triple_training_residual_never_exceeds_single() {
        // nested feature sets under OLS
        let records = ellipsoid_family(25, 9);
        let rss = |mode: MeasurementMode| -> f64 {
            let model = fit_measurement_regression(&records, mode).unwrap();
            records
                .iter()
                .map(|r| {
                    let (p, _) = predict_measurement_regression(&model, &r.measurements).unwrap();
                    (p - r.volume_ml) * (p - r.volume_ml)
                })
                .sum()
        };
        assert!(rss(MeasurementMode::Triple) <= rss(MeasurementMode::Single) + 1e-9);
    }

    #[test]
    fn negative_and_zero_feature_predictions_clamp() {
        let records: Vec<CaseRecord> =
            (0..6).map(|i| case(&format!("c{i}"), 10.0 + 100.0 * i as f64, 50.0 + 10.0 * i as f64, 40.0, 30.0)).collect();
        let model = fit_measurement_regression(&records, MeasurementMode::Single).unwrap();
        // zero measurements drive the affine map to the (negative) intercept
        let zero = ManualMeasurements { length_mm: 0.0, max_width_mm: 0.0, thickness_at_hilum_mm: 0.0 };
        let (pred, clamped) = predict_measurement_regression(&model, &zero).unwrap();
        assert_eq!(pred, if model.intercept < 0.0 { 0.0 } else { model.intercept });
        assert_eq!(clamped, model.intercept < 0.0);
        let _ = pred;
    }

    #[test]
    fn fit_invariant_under_training_order() {
        let mut records = ellipsoid_family(20, 4);
        let a = fit_measurement_regression(&records, MeasurementMode::Triple).unwrap();
        records.reverse();
        let b = fit_measurement_regression(&records, MeasurementMode::Triple).unwrap();
        for (x, y) in a.coefficients.iter().zip(&b.coefficients) {
            assert!((x - y).abs() < 1e-8);
        }
        assert!((a.intercept - b.intercept).abs() < 1e-6);
    }
}
