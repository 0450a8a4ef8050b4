use std::fmt::Write as _;

use super::cv::CvReport;
use super::stats::{paired_test, PairedMethod, PairedTestResult};
use crate::error::{Error, Result};

pub const BASELINE_LABEL: &str = "- ; -";
pub const ALPHA: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Marker {
    Reference,
    Improved,
    Declined,
    NotSignificant,
    /// The paired test was undefined, e.g. identical score vectors.
    Undefined,
}

impl Marker {
    pub fn symbol(self) -> &'static str {
        match self {
            Marker::Reference => "ref",
            Marker::Improved => "+",
            Marker::Declined => "-",
            Marker::NotSignificant => "",
            Marker::Undefined => "n/a",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub mean: f64,
    pub std: f64,
    pub delta: f64,
    pub t_test: Option<PairedTestResult>,
    pub wilcoxon: Option<PairedTestResult>,
    pub marker: Marker,
}

/// Comparison of cross-validation reports against the baseline row, with
/// significance from the paired t test at two-sided `ALPHA`.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub baseline: String,
    pub rows: Vec<AblationRow>,
}

fn test_or_none(a: &[f64], b: &[f64], m: PairedMethod) -> Result<Option<PairedTestResult>> {
    match paired_test(a, b, m) {
        Ok(r) => Ok(Some(r)),
        Err(Error::DegenerateTest(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

pub fn ablation_table(reports: &[CvReport], baseline: &str) -> Result<AblationTable> {
    let base = reports
        .iter()
        .find(|r| r.label == baseline)
        .ok_or_else(|| Error::Config(format!("no report for baseline `{baseline}`")))?;
    let base_scores = base.flat();
    let mut rows = Vec::with_capacity(reports.len());
    for r in reports {
        let scores = r.flat();
        if scores.len() != base_scores.len() {
            return Err(Error::Argument(format!(
                "`{}` has {} scores, baseline has {}",
                r.label,
                scores.len(),
                base_scores.len()
            )));
        }
        let (t_test, wilcoxon, marker) = if r.label == baseline {
            (None, None, Marker::Reference)
        } else {
            let t = test_or_none(&scores, &base_scores, PairedMethod::PairedT)?;
            let w = test_or_none(&scores, &base_scores, PairedMethod::WilcoxonSignedRank)?;
            let marker = match t {
                None => Marker::Undefined,
                Some(t) if t.p_value < ALPHA && t.statistic > 0.0 => Marker::Improved,
                Some(t) if t.p_value < ALPHA => Marker::Declined,
                Some(_) => Marker::NotSignificant,
            };
            (t, w, marker)
        };
        rows.push(AblationRow {
            label: r.label.clone(),
            mean: r.mean,
            std: r.std,
            delta: r.mean - base.mean,
            t_test,
            wilcoxon,
            marker,
        });
    }
    Ok(AblationTable {
        baseline: baseline.to_string(),
        rows,
    })
}

fn p_cell(r: &Option<PairedTestResult>) -> String {
    r.map_or_else(|| "n/a".to_string(), |r| format!("{:.4}", r.p_value))
}

impl AblationTable {
    pub fn to_markdown(&self) -> String {
        let mut s = String::from(
            "| Deformable Conv3D ; VoxRes | ROC/AUC mean (std) | Δ vs baseline | paired t p | Wilcoxon p | sig |\n\
             |---|---|---|---|---|---|\n",
        );
        for row in &self.rows {
            let (t, w) = if row.marker == Marker::Reference {
                ("-".to_string(), "-".to_string())
            } else {
                (p_cell(&row.t_test), p_cell(&row.wilcoxon))
            };
            writeln!(
                s,
                "| {} | {:.3} ({:.3}) | {:+.3} | {t} | {w} | {} |",
                row.label,
                row.mean,
                row.std,
                row.delta,
                row.marker.symbol()
            )
            .unwrap();
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("config,mean,std,delta,t_statistic,t_p,wilcoxon_statistic,wilcoxon_p,marker\n");
        let num = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.17}"));
        for row in &self.rows {
            writeln!(
                s,
                "\"{}\",{:.17},{:.17},{:.17},{},{},{},{},{}",
                row.label,
                row.mean,
                row.std,
                row.delta,
                num(row.t_test.map(|t| t.statistic)),
                num(row.t_test.map(|t| t.p_value)),
                num(row.wilcoxon.map(|t| t.statistic)),
                num(row.wilcoxon.map(|t| t.p_value)),
                row.marker.symbol()
            )
            .unwrap();
        }
        s
    }
}
