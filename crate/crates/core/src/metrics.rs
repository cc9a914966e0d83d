//! Evaluation metrics (SRC, MAE) and the per-feature rank correlation report.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::RunManifest;
use crate::mftm::{format_block_list, BlockTag, ColumnKind, FeatureMatrix};

pub use crate::folds::run_ablation;

/// Spearman correlation together with a flag raised when either input has
/// constant ranks, in which case `value` is 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Src {
    pub value: f64,
    pub degenerate: bool,
}

/// Fractional ranks, 1-based; tied values share the mean of their positions.
pub fn fractional_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start+1 ..= end
        let rank = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

fn check_pair(a: &[f64], b: &[f64], min_len: usize) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "vectors differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < min_len {
        return Err(Error::InsufficientData(format!(
            "need at least {min_len} values, got {}",
            a.len()
        )));
    }
    Ok(())
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let dx = a - mx;
        let dy = b - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    // The n-1 denominators of the sample covariance and variances cancel.
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's rho: Pearson correlation of the fractional rank vectors.
pub fn spearman_src(labels: &[f64], predictions: &[f64]) -> Result<Src> {
    check_pair(labels, predictions, 2)?;
    if labels.iter().chain(predictions).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("spearman_src input".into()));
    }
    let rl = fractional_ranks(labels);
    let rp = fractional_ranks(predictions);
    Ok(match pearson(&rl, &rp) {
        Some(value) => Src {
            value,
            degenerate: false,
        },
        None => Src {
            value: 0.0,
            degenerate: true,
        },
    })
}

/// Mean absolute error.
pub fn mae(labels: &[f64], predictions: &[f64]) -> Result<f64> {
    check_pair(labels, predictions, 1)?;
    let total: f64 = labels
        .iter()
        .zip(predictions)
        .map(|(s, p)| (p - s).abs())
        .sum();
    Ok(total / labels.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub feature: String,
    pub block: BlockTag,
    pub abs_src: f64,
    pub external: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    /// Sorted by `abs_src` descending, ties by feature name.
    pub rows: Vec<CorrelationRow>,
    pub external_avg: f64,
    pub other_avg: f64,
}

impl CorrelationReport {
    pub fn rank_of(&self, feature: &str) -> Option<usize> {
        self.rows.iter().position(|r| r.feature == feature)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("feature,abs_src\n");
        for r in &self.rows {
            s.push_str(&format!("{},{}\n", r.feature, r.abs_src));
        }
        s
    }
}

impl fmt::Display for CorrelationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self
            .rows
            .iter()
            .map(|r| r.feature.len())
            .chain(["average of external features".len()])
            .max()
            .unwrap_or(0);
        writeln!(f, "{:<width$}  |SRC|", "feature")?;
        for r in &self.rows {
            let mark = if r.external { " *" } else { "" };
            writeln!(f, "{:<width$}  {:.4}{mark}", r.feature, r.abs_src)?;
        }
        writeln!(
            f,
            "{:<width$}  {:.4}",
            "average of external features", self.external_avg
        )?;
        write!(
            f,
            "{:<width$}  {:.4}",
            "average of other features", self.other_avg
        )
    }
}

/// Ranks every raw numeric column of `matrix` by |SRC| against `labels`.
///
/// One-hot, indicator and embedding-projection columns are skipped. Columns
/// belonging to `external_tags` blocks form the external group; every other
/// numeric column forms the comparison group.
pub fn feature_correlation_report(
    matrix: &FeatureMatrix,
    labels: &[f64],
    external_tags: &[BlockTag],
) -> Result<CorrelationReport> {
    if labels.len() != matrix.n_rows() {
        return Err(Error::Shape(format!(
            "{} labels for {} rows",
            labels.len(),
            matrix.n_rows()
        )));
    }
    let mut rows = Vec::new();
    for (tag, start, width) in matrix.schema.iter() {
        for c in start..start + width {
            if !matches!(
                matrix.column_kinds[c],
                ColumnKind::Numeric | ColumnKind::Count
            ) {
                continue;
            }
            let column = matrix.column(c);
            let src = spearman_src(&column, labels)?;
            rows.push(CorrelationRow {
                feature: matrix.column_names[c].clone(),
                block: tag,
                abs_src: src.value.abs(),
                external: external_tags.contains(&tag),
            });
        }
    }
    if rows.is_empty() {
        return Err(Error::InsufficientData(
            "no numeric columns in scope for the correlation report".into(),
        ));
    }
    rows.sort_by(|a, b| {
        b.abs_src
            .total_cmp(&a.abs_src)
            .then_with(|| a.feature.cmp(&b.feature))
    });
    let avg = |external: bool| {
        let members: Vec<f64> = rows
            .iter()
            .filter(|r| r.external == external)
            .map(|r| r.abs_src)
            .collect();
        if members.is_empty() {
            0.0
        } else {
            members.iter().sum::<f64>() / members.len() as f64
        }
    };
    let external_avg = avg(true);
    let other_avg = avg(false);
    Ok(CorrelationReport {
        rows,
        external_avg,
        other_avg,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationModel {
    Gbdt,
    Mlp,
    Ensemble,
}

impl AblationModel {
    pub fn as_str(self) -> &'static str {
        match self {
            AblationModel::Gbdt => "gbdt",
            AblationModel::Mlp => "mlp",
            AblationModel::Ensemble => "ensemble",
        }
    }
}

impl std::str::FromStr for AblationModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gbdt" => Ok(AblationModel::Gbdt),
            "mlp" => Ok(AblationModel::Mlp),
            "ensemble" => Ok(AblationModel::Ensemble),
            other => Err(Error::Config(format!("unknown ablation model `{other}`"))),
        }
    }
}

/// One cell of the ablation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub blocks: Vec<BlockTag>,
    pub model: AblationModel,
    pub src: f64,
    pub mae: f64,
    pub manifest: RunManifest,
}

/// `blocks,model,src,mae`, block sets joined with `+`.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("blocks,model,src,mae\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{}\n",
            format_block_list(&r.blocks),
            r.model.as_str(),
            r.src,
            r.mae
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn src_monotone_and_reversed() {
        assert_eq!(
            spearman_src(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0])
                .unwrap()
                .value,
            1.0
        );
        assert_eq!(
            spearman_src(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0])
                .unwrap()
                .value,
            -1.0
        );
    }

    #[test]
    fn src_with_ties() {
        assert_eq!(
            fractional_ranks(&[1.0, 2.0, 2.0, 4.0]),
            vec![1.0, 2.5, 2.5, 4.0]
        );
        // ranks (1,2.5,2.5,4) vs (1,3,2,4): cov 4.5/3, var 4.5/3 and 5/3 -> 4.5 / sqrt(4.5*5)
        let expected = 4.5 / (4.5f64 * 5.0).sqrt();
        let got = spearman_src(&[1.0, 2.0, 2.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((got.value - expected).abs() < 1e-15);
        assert!((got.value - 0.9487).abs() < 1e-4);
    }

    #[test]
    fn src_degenerate_and_errors() {
        let s = spearman_src(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(
            s,
            Src {
                value: 0.0,
                degenerate: true
            }
        );
        assert!(matches!(
            spearman_src(&[1.0], &[1.0]),
            Err(Error::InsufficientData(_))
        ));
        assert!(matches!(
            spearman_src(&[1.0, 2.0], &[1.0]),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            spearman_src(&[1.0, f64::NAN], &[1.0, 2.0]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn mae_cases() {
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mae(&[0.0, 0.0], &[1.0, 3.0]).unwrap(), 2.0);
        assert_eq!(mae(&[1.0, 2.0, 4.0], &[1.5, 2.0, 3.0]).unwrap(), 0.5);
        assert!(mae(&[1.0], &[]).is_err());
        assert!(mae(&[], &[]).is_err());
    }
}
