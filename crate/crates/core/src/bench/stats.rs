//! Summary statistics over raw samples.

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    /// Midpoint of the two central values for even `n`.
    pub median: f64,
    /// Population standard deviation.
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

pub fn summarize(samples: &[f64]) -> Option<Summary> {
    if samples.is_empty() {
        return None;
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mean = sorted.iter().sum::<f64>() / n as f64;
    let var = sorted.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    let median = if n % 2 == 1 { sorted[n / 2] } else { (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0 };
    Some(Summary { n, mean, median, std: var.sqrt(), min: sorted[0], max: sorted[n - 1] })
}

/// Empirical CDF points `(value, quantile)`, one per sample.
pub fn ecdf(samples: &[f64]) -> Vec<(f64, f64)> {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    sorted.into_iter().enumerate().map(|(i, v)| (v, (i + 1) as f64 / n)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_reference_values() {
        // Reference: Python `statistics` mean/median/pstdev on the same data.
        let s = summarize(&[408.0, 1067.0, 194.0, 198.0, 2735.0, 622.57, 428.28, 410.31]).unwrap();
        assert!((s.mean - 757.895).abs() < 1e-9);
        assert!((s.median - 419.29499999999996).abs() < 1e-12);
        assert!((s.std - 791.0555299092473).abs() < 1e-9);
        assert_eq!((s.min, s.max), (194.0, 2735.0));

        let s = summarize(&[3.0, 1.0, 2.0]).unwrap();
        assert_eq!((s.mean, s.median), (2.0, 2.0));
        assert!((s.std - 0.816496580927726).abs() < 1e-12);
    }

    #[test]
    fn empty_has_no_summary() {
        assert!(summarize(&[]).is_none());
    }

    #[test]
    fn ecdf_ends_at_one() {
        let e = ecdf(&[5.0, 1.0, 3.0, 3.0]);
        assert_eq!(e.first(), Some(&(1.0, 0.25)));
        assert_eq!(e.last(), Some(&(5.0, 1.0)));
    }
}
