//! Accuracy metrics for volatility paths and parameter estimates.

use crate::error::{Error, Result};

fn check_pair(estimate: &[f64], truth: &[f64]) -> Result<()> {
    if estimate.len() != truth.len() {
        return Err(Error::LengthMismatch { left: estimate.len(), right: truth.len() });
    }
    if estimate.is_empty() {
        return Err(Error::DegenerateSample("empty metric input".into()));
    }
    Ok(())
}

/// Square root of the mean squared error: `sqrt(mean((e_t - h_t)^2))`.
pub fn srmse(estimate: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(estimate, truth)?;
    let n = estimate.len() as f64;
    Ok((estimate
        .iter()
        .zip(truth)
        .map(|(e, t)| (e - t) * (e - t))
        .sum::<f64>()
        / n)
        .sqrt())
}

/// Mean absolute error: `mean(|e_t - h_t|)`.
pub fn mae(estimate: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(estimate, truth)?;
    let n = estimate.len() as f64;
    Ok(estimate.iter().zip(truth).map(|(e, t)| (e - t).abs()).sum::<f64>() / n)
}

/// Mean absolute percentage error: `mean(|e_t - h_t| / h_t)`. Every truth
/// value must exceed `1e-12`.
pub fn mape(estimate: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(estimate, truth)?;
    if let Some((i, t)) = truth.iter().enumerate().find(|(_, t)| **t <= 1e-12) {
        return Err(Error::InvalidParam(format!("truth[{i}] = {t} must be > 1e-12 for mape")));
    }
    let n = estimate.len() as f64;
    Ok(estimate.iter().zip(truth).map(|(e, t)| (e - t).abs() / t).sum::<f64>() / n)
}

/// Mean squared deviation of scalar estimates from a scalar truth.
pub fn param_mse(estimates: &[f64], truth: f64) -> Result<f64> {
    if estimates.is_empty() {
        return Err(Error::DegenerateSample("empty estimate set".into()));
    }
    let n = estimates.len() as f64;
    Ok(estimates.iter().map(|e| (e - truth) * (e - truth)).sum::<f64>() / n)
}

/// All three volatility-path metrics at once.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct VolMetrics {
    pub srmse: f64,
    pub mae: f64,
    pub mape: f64,
}

pub fn vol_metrics(estimate: &[f64], truth: &[f64]) -> Result<VolMetrics> {
    Ok(VolMetrics {
        srmse: srmse(estimate, truth)?,
        mae: mae(estimate, truth)?,
        mape: mape(estimate, truth)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn hand_values() {
        let e = [1.0, 2.0, 3.0];
        let t = [1.5, 2.0, 2.0];
        // squared errors 0.25, 0, 1 -> mean 1.25/3
        assert!((srmse(&e, &t).unwrap() - (1.25f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!((mae(&e, &t).unwrap() - 0.5).abs() < 1e-15);
        let expected_mape = (0.5 / 1.5 + 0.0 + 0.5) / 3.0;
        assert!((mape(&e, &t).unwrap() - expected_mape).abs() < 1e-15);
    }

    #[test]
    fn zero_on_exact_match() {
        let x = [0.3, 1.7, 2.4];
        let m = vol_metrics(&x, &x).unwrap();
        assert_eq!((m.srmse, m.mae, m.mape), (0.0, 0.0, 0.0));
    }

    #[test]
    fn srmse_dominates_mae() {
        // RMS >= mean of absolute values, for any inputs.
        let mut rng = crate::seed::rng_from_seed(21);
        for _ in 0..50 {
            let n = rng.random_range(1..40);
            let e: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let t: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..5.0)).collect();
            assert!(srmse(&e, &t).unwrap() + 1e-15 >= mae(&e, &t).unwrap());
        }
    }

    #[test]
    fn mape_scale_invariant() {
        let e = [1.0, 2.5, 0.7, 4.0];
        let t = [1.2, 2.0, 0.9, 3.5];
        let base = mape(&e, &t).unwrap();
        for c in [0.01, 3.0, 1e6] {
            let es: Vec<f64> = e.iter().map(|v| v * c).collect();
            let ts: Vec<f64> = t.iter().map(|v| v * c).collect();
            assert!((mape(&es, &ts).unwrap() - base).abs() < 1e-12);
        }
    }

    #[test]
    fn permutation_invariant() {
        let e = [1.0, 2.0, 3.0, 4.0];
        let t = [0.5, 2.5, 2.0, 5.0];
        let ep = [4.0, 1.0, 3.0, 2.0];
        let tp = [5.0, 0.5, 2.0, 2.5];
        assert_eq!(srmse(&e, &t).unwrap(), srmse(&ep, &tp).unwrap());
        assert_eq!(mae(&e, &t).unwrap(), mae(&ep, &tp).unwrap());
        assert_eq!(mape(&e, &t).unwrap(), mape(&ep, &tp).unwrap());
    }

    #[test]
    fn error_cases() {
        assert!(srmse(&[1.0], &[1.0, 2.0]).is_err());
        assert!(srmse(&[], &[]).is_err());
        assert!(mape(&[1.0], &[0.0]).is_err());
        assert!(mape(&[1.0], &[1e-13]).is_err());
        assert!(param_mse(&[], 0.0).is_err());
    }

    #[test]
    fn param_mse_hand_value() {
        // estimates 1, 3 vs truth 2 -> mean of (1, 1) = 1
        assert_eq!(param_mse(&[1.0, 3.0], 2.0).unwrap(), 1.0);
        assert_eq!(param_mse(&[2.0, 2.0, 2.0], 2.0).unwrap(), 0.0);
    }
}
