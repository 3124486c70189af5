use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation.
    pub sd: f64,
    /// Half-width of the two-sided 95% Student-t interval.
    pub half_width: f64,
}

pub fn aggregate_runs(values: &[f64]) -> Result<RunSummary> {
    let n = values.len();
    if n < 2 {
        return Err(Error::Config(format!("confidence intervals need at least 2 runs, got {n}")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Runtime("non-finite run score".into()));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .map_err(|e| Error::Runtime(format!("student t: {e}")))?
        .inverse_cdf(0.975);
    Ok(RunSummary {
        n,
        mean,
        sd,
        half_width: t * sd / (n as f64).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_through_five() {
        let s = aggregate_runs(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(s.mean, 3.0);
        // t(0.975, 4) = 2.7764451; sd = sqrt(2.5).
        let expected = 2.776_445_105_2 * 2.5f64.sqrt() / 5f64.sqrt();
        assert!((s.half_width - expected).abs() < 1e-8, "{}", s.half_width);
        assert!((s.half_width - 1.963).abs() < 1e-3);
    }

    #[test]
    fn identical_runs_have_zero_width() {
        assert_eq!(aggregate_runs(&[0.7; 5]).unwrap().half_width, 0.0);
    }

    #[test]
    fn order_does_not_matter() {
        let a = aggregate_runs(&[0.1, 0.5, 0.3]).unwrap();
        let b = aggregate_runs(&[0.5, 0.3, 0.1]).unwrap();
        assert!((a.mean - b.mean).abs() < 1e-15 && (a.half_width - b.half_width).abs() < 1e-15);
    }

    #[test]
    fn single_run_is_rejected() {
        assert!(aggregate_runs(&[1.0]).is_err());
    }
}
