use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};

/// Above this many non-zero differences the Wilcoxon p value uses the normal
/// approximation.
pub const WILCOXON_EXACT_MAX: usize = 25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairedMethod {
    PairedT,
    WilcoxonSignedRank,
}

impl std::fmt::Display for PairedMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PairedMethod::PairedT => "paired_t",
            PairedMethod::WilcoxonSignedRank => "wilcoxon_signed_rank",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedTestResult {
    /// The t statistic, or the signed-rank sum `W+ − W−`.
    pub statistic: f64,
    /// Two-sided.
    pub p_value: f64,
    pub n_pairs: usize,
    pub method: PairedMethod,
}

pub fn paired_test(a: &[f64], b: &[f64], method: PairedMethod) -> Result<PairedTestResult> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Argument(format!(
            "paired test needs two equal-length samples of at least 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NumericInput("paired test on non-finite scores".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if d.iter().all(|&v| v == 0.0) {
        return Err(Error::DegenerateTest("all paired differences are zero".into()));
    }
    match method {
        PairedMethod::PairedT => paired_t(&d),
        PairedMethod::WilcoxonSignedRank => wilcoxon(&d),
    }
}

fn paired_t(d: &[f64]) -> Result<PairedTestResult> {
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    // Constant differences can pick up a rounding-level spread.
    if sd <= 1e-12 * mean.abs() {
        return Err(Error::DegenerateTest(
            "paired differences have zero standard deviation".into(),
        ));
    }
    let t = mean / (sd / n.sqrt());
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).map_err(|e| Error::Argument(e.to_string()))?;
    Ok(PairedTestResult {
        statistic: t,
        p_value: (2.0 * dist.sf(t.abs())).clamp(0.0, 1.0),
        n_pairs: d.len(),
        method: PairedMethod::PairedT,
    })
}

/// Doubled midranks of `|d|` (integers), in input order.
fn doubled_ranks(abs: &[f64]) -> Vec<u64> {
    let mut order: Vec<usize> = (0..abs.len()).collect();
    order.sort_by(|&x, &y| abs[x].total_cmp(&abs[y]));
    let mut ranks = vec![0u64; abs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && abs[order[j + 1]] == abs[order[i]] {
            j += 1;
        }
        for &k in &order[i..=j] {
            ranks[k] = (i + j + 2) as u64;
        }
        i = j + 1;
    }
    ranks
}

fn wilcoxon(d: &[f64]) -> Result<PairedTestResult> {
    let nz: Vec<f64> = d.iter().copied().filter(|&v| v != 0.0).collect();
    let n = nz.len();
    let ranks = doubled_ranks(&nz.iter().map(|v| v.abs()).collect::<Vec<_>>());
    let total: u64 = ranks.iter().sum();
    let pos: u64 = nz.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    // In doubled-rank units `2·pos − total` is twice `W+ − W−`.
    let stat2 = 2 * pos as i64 - total as i64;
    let p_value = if n <= WILCOXON_EXACT_MAX {
        // counts[s] = number of sign patterns whose positive ranks sum to s.
        let mut counts = vec![0f64; total as usize + 1];
        counts[0] = 1.0;
        for &r in &ranks {
            for s in (r as usize..=total as usize).rev() {
                counts[s] += counts[s - r as usize];
            }
        }
        let obs = stat2.unsigned_abs();
        let extreme: f64 = counts
            .iter()
            .enumerate()
            .filter(|(s, _)| (2 * *s as i64 - total as i64).unsigned_abs() >= obs)
            .map(|(_, c)| c)
            .sum();
        extreme / 2f64.powi(n as i32)
    } else {
        let var2: f64 = ranks.iter().map(|&r| (r as f64).powi(2)).sum();
        let z = stat2 as f64 / var2.sqrt();
        let normal = Normal::standard();
        2.0 * normal.sf(z.abs())
    };
    Ok(PairedTestResult {
        statistic: stat2 as f64 / 2.0,
        p_value: p_value.clamp(0.0, 1.0),
        n_pairs: d.len(),
        method: PairedMethod::WilcoxonSignedRank,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_and_constant_differences_are_degenerate() {
        let a = [0.8, 0.7, 0.9];
        for m in [PairedMethod::PairedT, PairedMethod::WilcoxonSignedRank] {
            assert!(matches!(paired_test(&a, &a, m), Err(Error::DegenerateTest(_))));
        }
        let b = [1.0, 2.0, 3.0, 4.0];
        let c = [0.0, 1.0, 2.0, 3.0];
        assert!(matches!(paired_test(&b, &c, PairedMethod::PairedT), Err(Error::DegenerateTest(_))));
    }

    #[test]
    fn wilcoxon_exact_small_case() {
        // All five differences positive with distinct ranks: one extreme
        // pattern on each side of 32.
        let a = [1.1, 2.2, 3.3, 4.4, 5.5];
        let b = [1.0, 2.0, 3.0, 4.0, 5.0];
        let r = paired_test(&a, &b, PairedMethod::WilcoxonSignedRank).unwrap();
        assert_eq!(r.statistic, 15.0);
        assert!((r.p_value - 2.0 / 32.0).abs() < 1e-15);
    }

    #[test]
    fn antisymmetric_statistic() {
        let a = [0.80, 0.82, 0.78, 0.85, 0.81, 0.7];
        let b = [0.74, 0.75, 0.79, 0.79, 0.76, 0.72];
        for m in [PairedMethod::PairedT, PairedMethod::WilcoxonSignedRank] {
            let x = paired_test(&a, &b, m).unwrap();
            let y = paired_test(&b, &a, m).unwrap();
            assert_eq!(x.statistic, -y.statistic);
            assert_eq!(x.p_value, y.p_value);
        }
    }
}
