use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::data::ManifestRow;

/// Human evaluation dimensions for generation and editing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    Fidelity,
    Texture,
    Composition,
    Scene,
    Lighting,
    Subject,
    Effectiveness,
    Consistency,
    Aesthetics,
}

/// Scores on the 1/2/3 scale for one dimension.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSheet")]
pub struct HumanScoreSheet {
    pub sheet_id: String,
    pub dimension: Dimension,
    scores: Vec<u8>,
}

#[derive(Deserialize)]
struct RawSheet {
    sheet_id: String,
    dimension: Dimension,
    scores: Vec<i64>,
}

impl TryFrom<RawSheet> for HumanScoreSheet {
    type Error = EvalError;

    fn try_from(r: RawSheet) -> Result<Self, Self::Error> {
        HumanScoreSheet::new(r.sheet_id, r.dimension, &r.scores)
    }
}

impl HumanScoreSheet {
    pub fn new(
        sheet_id: impl Into<String>,
        dimension: Dimension,
        scores: &[i64],
    ) -> Result<Self, EvalError> {
        let scores = scores
            .iter()
            .map(|&s| match s {
                1..=3 => Ok(s as u8),
                other => Err(EvalError::InvalidScore(other)),
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(HumanScoreSheet {
            sheet_id: sheet_id.into(),
            dimension,
            scores,
        })
    }

    pub fn scores(&self) -> &[u8] {
        &self.scores
    }
}

impl ManifestRow for HumanScoreSheet {
    fn sort_key(&self) -> String {
        self.sheet_id.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionSummary {
    pub dimension: Dimension,
    /// Mean rounded to three decimals.
    pub mean: f64,
    pub count: usize,
}

/// Per-dimension means over all sheets, in dimension order. Dimensions with
/// no scores are omitted.
pub fn aggregate_scores(sheets: &[HumanScoreSheet]) -> Vec<DimensionSummary> {
    let mut acc: std::collections::BTreeMap<Dimension, (u64, usize)> = Default::default();
    for sheet in sheets {
        let e = acc.entry(sheet.dimension).or_default();
        e.0 += sheet.scores.iter().map(|&s| u64::from(s)).sum::<u64>();
        e.1 += sheet.scores.len();
    }
    acc.into_iter()
        .filter(|(_, (_, count))| *count > 0)
        .map(|(dimension, (sum, count))| DimensionSummary {
            dimension,
            mean: (sum as f64 / count as f64 * 1000.0).round() / 1000.0,
            count,
        })
        .collect()
}
