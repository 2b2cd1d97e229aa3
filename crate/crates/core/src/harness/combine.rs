//! Log-linear combination of predicted per-metric scores into one ranking value.

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::evaluator::{Metric, MetricVersion, LABEL_TARGETS};

/// Lower clamp applied to every predicted score before taking logs.
pub const SCORE_FLOOR: f64 = 1e-7;

/// Width of a predicted score row: the imitation column, then [`LABEL_TARGETS`].
pub const SCORE_COLUMNS: usize = 1 + LABEL_TARGETS.len();

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceCoefficients {
    pub version: MetricVersion,
    pub imi: f64,
    /// Weights on log-scores of multiplicative metrics.
    pub penalties: Vec<(Metric, f64)>,
    /// Weights inside the log of the weighted sum.
    pub averages: Vec<(Metric, f64)>,
    pub lambda_avg: f64,
}

impl InferenceCoefficients {
    pub fn v1() -> Self {
        Self {
            version: MetricVersion::V1,
            imi: 0.05,
            penalties: vec![(Metric::Nc, 0.5), (Metric::Dac, 0.5)],
            averages: vec![(Metric::Ep, 5.0), (Metric::Ttc, 5.0), (Metric::C, 2.0)],
            lambda_avg: 8.0,
        }
    }

    pub fn v2() -> Self {
        Self {
            version: MetricVersion::V2,
            imi: 0.02,
            penalties: vec![(Metric::Nc, 0.5), (Metric::Dac, 0.5), (Metric::Ddc, 0.3), (Metric::Tlc, 0.1)],
            averages: vec![(Metric::Ep, 5.0), (Metric::Ttc, 5.0), (Metric::Lk, 2.0), (Metric::Hc, 1.0)],
            lambda_avg: 6.0,
        }
    }

    pub fn for_version(version: MetricVersion) -> Self {
        match version {
            MetricVersion::V1 => Self::v1(),
            MetricVersion::V2 => Self::v2(),
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let all = std::iter::once(self.imi)
            .chain(std::iter::once(self.lambda_avg))
            .chain(self.penalties.iter().chain(&self.averages).map(|&(_, w)| w));
        for w in all {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(HarnessError::InvalidConfig("inference weights must be finite and non-negative".into()));
            }
        }
        for &(m, _) in self.penalties.iter().chain(&self.averages) {
            if score_column(m).is_none() {
                return Err(HarnessError::InvalidConfig(format!("no predicted score for {}", m.name())));
            }
        }
        Ok(())
    }
}

/// Column of `metric` in a predicted score row.
pub fn score_column(metric: Metric) -> Option<usize> {
    LABEL_TARGETS.iter().position(|&m| m == metric).map(|i| i + 1)
}

/// `imi ln s_imi + sum_m w_m ln s_m + lambda_avg ln(sum_n w_n s_n)`.
pub fn combine_score(row: &[f64], coeffs: &InferenceCoefficients) -> Result<f64, HarnessError> {
    if row.len() != SCORE_COLUMNS {
        return Err(HarnessError::Domain(format!("score row of width {}", row.len())));
    }
    if row.iter().any(|v| v.is_nan()) {
        return Err(HarnessError::Domain("score row contains NaN".into()));
    }
    let s = |c: usize| row[c].max(SCORE_FLOOR);
    let col = |m: Metric| score_column(m).ok_or_else(|| HarnessError::Domain(format!("no score for {}", m.name())));
    let mut total = coeffs.imi * s(0).ln();
    for &(m, w) in &coeffs.penalties {
        total += w * s(col(m)?).ln();
    }
    let mut avg = 0.0;
    for &(m, w) in &coeffs.averages {
        avg += w * s(col(m)?);
    }
    if avg.is_nan() || avg <= 0.0 {
        return Err(HarnessError::Domain("weighted average of scores is not positive".into()));
    }
    total += coeffs.lambda_avg * avg.ln();
    if total.is_finite() {
        Ok(total)
    } else {
        Err(HarnessError::Domain("combined score is not finite".into()))
    }
}

/// Combined score of every row of a `n x SCORE_COLUMNS` probability table.
pub fn combine_rows(probs: &crate::diffcore::Array2, coeffs: &InferenceCoefficients) -> Result<Vec<f64>, HarnessError> {
    (0..probs.rows()).map(|r| combine_score(probs.row(r), coeffs)).collect()
}
