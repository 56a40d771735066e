//! Summary statistics over seeds.

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample standard deviation (n − 1 denominator); zero for fewer than two values.
pub fn std_dev(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let m = mean(x);
    (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() - 1) as f64).sqrt()
}

/// Two-sided confidence interval for the mean from the t distribution.
pub fn confidence_interval(x: &[f64], level: f64) -> Result<(f64, f64)> {
    if x.len() < 2 {
        return Err(Error::InvalidInput(
            "a confidence interval needs at least two values".into(),
        ));
    }
    let t = StudentsT::new(0.0, 1.0, (x.len() - 1) as f64)
        .map_err(|e| Error::InvalidInput(e.to_string()))?
        .inverse_cdf(0.5 + level / 2.0);
    let m = mean(x);
    let half = t * std_dev(x) / (x.len() as f64).sqrt();
    Ok((m - half, m + half))
}

/// Welch's unequal-variance t statistic and its degrees of freedom.
pub fn welch_t(a: &[f64], b: &[f64]) -> (f64, f64) {
    let (va, vb) = (
        std_dev(a).powi(2) / a.len() as f64,
        std_dev(b).powi(2) / b.len() as f64,
    );
    let t = (mean(a) - mean(b)) / (va + vb).sqrt();
    let df = (va + vb).powi(2) / (va * va / (a.len() - 1) as f64 + vb * vb / (b.len() - 1) as f64);
    (t, df)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interval_matches_table_value() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let (lo, hi) = confidence_interval(&x, 0.95).unwrap();
        // t_{0.975, 4} = 2.776445, s = √2.5.
        let half = 2.776_445_105 * 2.5f64.sqrt() / 5f64.sqrt();
        assert!((lo - (3.0 - half)).abs() < 1e-6 && (hi - (3.0 + half)).abs() < 1e-6);
        assert!(confidence_interval(&[1.0], 0.95).is_err());
    }

    #[test]
    fn welch_symmetric_case() {
        let (t, df) = welch_t(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]);
        assert!((t + 3.0f64.sqrt() * 3.0 / 2.0f64.sqrt()).abs() < 1e-12);
        assert!((df - 4.0).abs() < 1e-12);
    }
}
