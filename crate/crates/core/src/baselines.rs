//! Statistical forecasting baselines and model ablations for the comparison
//! table.
//!
//! The moving-average baseline forecasts the trailing mean of recent values;
//! the autoregressive baseline fits `y_t ~ c + sum_i phi_i * y_(t-i)` by
//! ordinary least squares with an SVD pseudo-inverse fallback for
//! rank-deficient designs. Both forecast one step ahead per (patient, day),
//! matching the model's prediction target.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cohort::{CohortTable, PatientId};
use crate::error::{Error, Result};
use crate::model::{AttentionKind, ModelConfig};
use crate::train::TrainConfig;

/// One patient's target values, strictly time-ordered without gaps.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesView {
    pub patient: PatientId,
    pub first_day: u32,
    pub values: Vec<f64>,
}

impl SeriesView {
    pub fn from_table(table: &CohortTable, patient: &PatientId) -> Result<SeriesView> {
        let series = table.target_series(patient);
        if series.is_empty() {
            return Err(Error::Validation {
                row: None,
                message: format!("patient {patient} has no records"),
            });
        }
        Ok(SeriesView {
            patient: patient.clone(),
            first_day: series[0].0,
            values: series.into_iter().map(|(_, v)| v).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Values strictly before day `day`.
    pub fn history_before(&self, day: u32) -> &[f64] {
        if day <= self.first_day {
            return &[];
        }
        let n = ((day - self.first_day) as usize).min(self.values.len());
        &self.values[..n]
    }
}

/// Trailing mean of the last `min(w, len)` values.
pub fn ma_forecast(series: &[f64], window: usize) -> Result<f64> {
    if series.is_empty() {
        return Err(Error::Validation {
            row: None,
            message: "ma_forecast: empty series".into(),
        });
    }
    if window == 0 {
        return Err(Error::Config("ma_forecast: window must be >= 1".into()));
    }
    let w = window.min(series.len());
    let tail = &series[series.len() - w..];
    Ok(tail.iter().sum::<f64>() / w as f64)
}

/// Autoregressive coefficients `(c, phi_1..phi_p)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArFit {
    pub intercept: f64,
    pub phi: Vec<f64>,
}

impl ArFit {
    /// One-step forecast from the end of `series`.
    pub fn forecast(&self, series: &[f64]) -> f64 {
        let mut y = self.intercept;
        for (i, phi) in self.phi.iter().enumerate() {
            y += phi * series[series.len() - 1 - i];
        }
        y
    }
}

/// Least-squares fit of `y_t ~ c + sum phi_i y_(t-i)`; the normal equations
/// are solved through an SVD pseudo-inverse so rank-deficient designs (for
/// example constant series) still yield a consistent solution.
pub fn ar_fit(series: &[f64], order: usize) -> Result<ArFit> {
    if order == 0 {
        return Err(Error::Config("ar_fit: order must be >= 1".into()));
    }
    if series.len() < order + 2 {
        return Err(Error::Validation {
            row: None,
            message: format!(
                "ar_fit: series length {} is below order + 2 = {}",
                series.len(),
                order + 2
            ),
        });
    }
    let n_rows = series.len() - order;
    let n_cols = order + 1;
    let mut design = DMatrix::zeros(n_rows, n_cols);
    let mut target = DVector::zeros(n_rows);
    for r in 0..n_rows {
        let t = r + order;
        design[(r, 0)] = 1.0;
        for i in 0..order {
            design[(r, 1 + i)] = series[t - 1 - i];
        }
        target[r] = series[t];
    }
    let svd = design.svd(true, true);
    let coef = svd
        .solve(&target, 1e-12)
        .map_err(|e| Error::Numeric {
            context: format!("ar_fit SVD solve failed: {e}"),
        })?;
    Ok(ArFit {
        intercept: coef[0],
        phi: coef.iter().skip(1).copied().collect(),
    })
}

/// One-step AR forecast from a history, refit each call; short histories fall
/// back to the plain mean so the baseline scores the same pairs as the model.
pub fn ar_forecast(history: &[f64], order: usize) -> Result<f64> {
    if history.is_empty() {
        return Err(Error::Validation {
            row: None,
            message: "ar_forecast: empty history".into(),
        });
    }
    if history.len() >= order + 2 {
        let fit = ar_fit(history, order)?;
        Ok(fit.forecast(history))
    } else {
        ma_forecast(history, history.len())
    }
}

/// Which ablation to derive from a base configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationKind {
    /// Empirical risk minimization: identical model, lambda = 0.
    Erm,
    /// Single-branch attention without the variant machinery.
    Entangled,
}

impl std::str::FromStr for AblationKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "erm" => Ok(AblationKind::Erm),
            "entangled" => Ok(AblationKind::Entangled),
            other => Err(Error::Config(format!(
                "unknown ablation kind '{other}' (expected erm or entangled)"
            ))),
        }
    }
}

/// Applies an ablation's deltas to base configurations.
pub fn ablation_config(
    kind: AblationKind,
    base_model: &ModelConfig,
    base_train: &TrainConfig,
) -> (ModelConfig, TrainConfig) {
    match kind {
        AblationKind::Erm => (
            base_model.clone(),
            TrainConfig {
                lambda: 0.0,
                ..base_train.clone()
            },
        ),
        AblationKind::Entangled => (
            ModelConfig {
                attention: AttentionKind::Entangled,
                ..base_model.clone()
            },
            TrainConfig {
                lambda: 0.0,
                ..base_train.clone()
            },
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ParamSet;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ma_hand_cases() {
        assert_eq!(ma_forecast(&[1.0, 2.0, 3.0], 2).unwrap(), 2.5);
        assert_eq!(ma_forecast(&[5.0, 5.0, 5.0], 7).unwrap(), 5.0);
        assert_eq!(ma_forecast(&[1.0, 2.0, 9.0], 1).unwrap(), 9.0);
        assert!(ma_forecast(&[], 3).is_err());
    }

    #[test]
    fn ar_recovers_noiseless_phi_half() {
        let mut series = vec![8.0];
        for _ in 0..20 {
            series.push(0.5 * series.last().unwrap());
        }
        let fit = ar_fit(&series, 1).unwrap();
        assert!((fit.phi[0] - 0.5).abs() < 1e-9, "phi = {}", fit.phi[0]);
        assert!(fit.intercept.abs() < 1e-9, "c = {}", fit.intercept);
    }

    #[test]
    fn constant_series_forecasts_the_constant() {
        let series = vec![4.0; 12];
        let fit = ar_fit(&series, 3).unwrap();
        let pred = fit.forecast(&series);
        assert!((pred - 4.0).abs() < 1e-9, "pred = {pred}");
    }

    #[test]
    fn boundary_length_is_accepted() {
        // length = p + 2 is the documented minimum.
        let series = vec![1.0, 2.0, 1.5, 2.5, 1.8];
        assert!(ar_fit(&series, 3).is_ok());
        assert!(ar_fit(&series[..4], 3).is_err());
    }

    #[test]
    fn forecasts_are_translation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let series: Vec<f64> = (0..30).map(|_| rng.random_range(-1.0..1.0)).collect();
        let shift = 17.5;
        let shifted: Vec<f64> = series.iter().map(|v| v + shift).collect();
        let ma_a = ma_forecast(&series, 3).unwrap();
        let ma_b = ma_forecast(&shifted, 3).unwrap();
        assert!((ma_b - ma_a - shift).abs() < 1e-9);
        let ar_a = ar_forecast(&series, 3).unwrap();
        let ar_b = ar_forecast(&shifted, 3).unwrap();
        assert!((ar_b - ar_a - shift).abs() < 1e-7, "{ar_b} vs {ar_a}");
    }

    #[test]
    fn short_history_falls_back_to_mean() {
        assert_eq!(ar_forecast(&[2.0, 4.0], 3).unwrap(), 3.0);
    }

    #[test]
    fn erm_delta_only_zeroes_lambda() {
        let model = ModelConfig::default();
        let train = TrainConfig::default();
        let (m, t) = ablation_config(AblationKind::Erm, &model, &train);
        assert_eq!(m, model);
        assert_eq!(t.lambda, 0.0);
        assert_eq!(t.lr, train.lr);
    }

    #[test]
    fn entangled_delta_removes_variant_branch() {
        let model = ModelConfig::default();
        let train = TrainConfig::default();
        let (m, t) = ablation_config(AblationKind::Entangled, &model, &train);
        assert_eq!(m.attention, AttentionKind::Entangled);
        assert_eq!(t.lambda, 0.0);
        let schema = crate::cohort::FeatureSchema::anic_like();
        let params = ParamSet::init(&m, &schema).unwrap();
        assert_eq!(params.variant_branch_scalars(), 0);
    }

    #[test]
    fn unknown_ablation_kind_is_an_error() {
        assert!("dropout".parse::<AblationKind>().is_err());
        assert_eq!("erm".parse::<AblationKind>().unwrap(), AblationKind::Erm);
    }

    #[test]
    fn series_view_history_slicing() {
        use crate::cohort::{CategoricalFeature, CohortRecord, ContinuousFeature, FeatureSchema};
        let schema = FeatureSchema::new(
            vec![ContinuousFeature {
                name: "y".into(),
                unit: String::new(),
            }],
            vec![CategoricalFeature {
                name: "g".into(),
                cardinality: 2,
            }],
            "y",
        )
        .unwrap();
        let records = (1..=4)
            .map(|d| CohortRecord {
                patient: "p".into(),
                day: d,
                env: None,
                continuous: vec![d as f64],
                categorical: vec![0],
                target: d as f64,
            })
            .collect();
        let table = CohortTable::new(schema, records).unwrap();
        let view = SeriesView::from_table(&table, &"p".into()).unwrap();
        assert_eq!(view.values, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(view.history_before(3), &[1.0, 2.0]);
        assert_eq!(view.history_before(1), &[] as &[f64]);
    }
}
