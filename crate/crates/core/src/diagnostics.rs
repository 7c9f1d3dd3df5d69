//! Convergence diagnostics and prediction-quality metrics.

use serde::Serialize;

use crate::error::{MstmError, Result};
use crate::model::quantile_sorted;
use crate::sampler::gibbs::PosteriorDraws;

/// Batch size used for Monte Carlo standard errors.
pub const DEFAULT_BATCH_SIZE: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Mprd {
    /// Median absolute percent relative difference.
    pub value: f64,
    /// Cells skipped because the truth was zero.
    pub excluded: usize,
}

/// Median over cells of `|(Ẑ − Z)/Z|·100`; cells with `Z = 0` are skipped.
pub fn mprd(predictions: &[f64], truth: &[f64]) -> Result<Mprd> {
    if predictions.len() != truth.len() {
        return Err(MstmError::Dimension("predictions and truth differ in length".into()));
    }
    let mut rel: Vec<f64> = predictions
        .iter()
        .zip(truth)
        .filter(|(_, z)| **z != 0.0)
        .map(|(p, z)| ((p - z) / z).abs() * 100.0)
        .collect();
    let excluded = truth.len() - rel.len();
    if excluded > 0 {
        log::warn!("{excluded} cell(s) with zero truth excluded from MPRD");
    }
    rel.sort_by(f64::total_cmp);
    Ok(Mprd {
        value: median_sorted(&rel),
        excluded,
    })
}

/// Mean of `(Ẑ − Z)²` divided by the perturbation variance.
pub fn stspe(predictions: &[f64], truth: &[f64], perturbation_variance: f64) -> Result<f64> {
    if predictions.len() != truth.len() {
        return Err(MstmError::Dimension("predictions and truth differ in length".into()));
    }
    if !(perturbation_variance > 0.0) {
        return Err(MstmError::Invalid(format!(
            "perturbation variance {perturbation_variance} is not positive"
        )));
    }
    if predictions.is_empty() {
        return Ok(f64::NAN);
    }
    let sse: f64 = predictions.iter().zip(truth).map(|(p, z)| (p - z).powi(2)).sum();
    Ok(sse / predictions.len() as f64 / perturbation_variance)
}

pub fn median_sorted(sorted: &[f64]) -> f64 {
    quantile_sorted(sorted, 0.5)
}

/// Median and interquartile range (type-7 quantiles).
pub fn median_iqr(values: &[f64]) -> (f64, f64) {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    v.sort_by(f64::total_cmp);
    (
        quantile_sorted(&v, 0.5),
        quantile_sorted(&v, 0.75) - quantile_sorted(&v, 0.25),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GelmanRubin {
    pub rhat: f64,
    /// Set when the within-chain variance is zero.
    pub degenerate: bool,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = if x.len() > 1 {
        x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var)
}

/// Potential scale reduction factor from between- and within-chain variances.
pub fn gelman_rubin(chains: &[&[f64]]) -> Result<GelmanRubin> {
    let m = chains.len();
    if m < 2 {
        return Err(MstmError::Invalid("Gelman–Rubin needs at least two chains".into()));
    }
    let n = chains[0].len();
    if n < 10 || chains.iter().any(|c| c.len() != n) {
        return Err(MstmError::Invalid("chains must share a length of at least 10".into()));
    }
    let stats: Vec<(f64, f64)> = chains.iter().map(|c| mean_var(c)).collect();
    let means: Vec<f64> = stats.iter().map(|s| s.0).collect();
    let w = stats.iter().map(|s| s.1).sum::<f64>() / m as f64;
    let b = n as f64 * mean_var(&means).1;
    if !(w > 0.0) {
        let rhat = if b > 0.0 { f64::INFINITY } else { 1.0 };
        return Ok(GelmanRubin { rhat, degenerate: true });
    }
    let nf = n as f64;
    let var_plus = (nf - 1.0) / nf * w + b / nf;
    Ok(GelmanRubin {
        rhat: (var_plus / w).sqrt(),
        degenerate: false,
    })
}

/// Monte Carlo standard error of the mean from non-overlapping batch means.
/// A trailing partial batch is dropped.
pub fn batch_means_se(series: &[f64], batch_size: usize) -> Result<f64> {
    batch_means_se_pooled(&[series], batch_size)
}

/// Batch-means standard error of the pooled mean of several chains; batches
/// never straddle two chains.
pub fn batch_means_se_pooled(chains: &[&[f64]], batch_size: usize) -> Result<f64> {
    if batch_size == 0 {
        return Err(MstmError::Invalid("batch size must be positive".into()));
    }
    let mut batch_means = Vec::new();
    for c in chains {
        if c.len() < 2 * batch_size {
            return Err(MstmError::Invalid(format!(
                "series of length {} is shorter than two batches of {batch_size}",
                c.len()
            )));
        }
        batch_means.extend(
            c.chunks_exact(batch_size)
                .map(|b| b.iter().sum::<f64>() / batch_size as f64),
        );
    }
    let (_, var) = mean_var(&batch_means);
    Ok((var / batch_means.len() as f64).sqrt())
}

/// Convergence summary for one scalar parameter across chains.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParameterDiagnostics {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    /// `None` with fewer than two chains.
    pub rhat: Option<f64>,
    pub rhat_degenerate: bool,
    pub mc_se: Option<f64>,
}

/// R̂ and batch-means standard errors for every scalar parameter.
pub fn summarize(draws: &[PosteriorDraws], batch_size: usize) -> Result<Vec<ParameterDiagnostics>> {
    let Some(first) = draws.first() else {
        return Err(MstmError::Invalid("no chains to summarize".into()));
    };
    let per_chain: Vec<Vec<(String, Vec<f64>)>> = draws.iter().map(|d| d.scalar_series()).collect();
    let mut out = Vec::new();
    for (k, (name, _)) in first.scalar_series().iter().enumerate() {
        let series: Vec<&[f64]> = per_chain.iter().map(|c| c[k].1.as_slice()).collect();
        let pooled: Vec<f64> = series.iter().flat_map(|s| s.iter().copied()).collect();
        let (mean, var) = mean_var(&pooled);
        let gr = if series.len() >= 2 { gelman_rubin(&series).ok() } else { None };
        out.push(ParameterDiagnostics {
            name: name.clone(),
            mean,
            sd: var.sqrt(),
            rhat: gr.map(|g| g.rhat),
            rhat_degenerate: gr.is_some_and(|g| g.degenerate),
            mc_se: batch_means_se_pooled(&series, batch_size).ok(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn mprd_examples() {
        let z = [1.0, -2.0, 4.0, 0.5];
        assert_eq!(mprd(&z, &z).unwrap().value, 0.0);
        let scaled: Vec<f64> = z.iter().map(|v| v * 1.1).collect();
        assert!((mprd(&scaled, &z).unwrap().value - 10.0).abs() < 1e-12);
        let m = mprd(&[1.0, 2.0, 3.0], &[0.0, 2.0, 2.0]).unwrap();
        assert_eq!(m.excluded, 1);
        assert!((m.value - 25.0).abs() < 1e-12);
    }

    #[test]
    fn stspe_examples() {
        let z = [1.0, 2.0, 3.0];
        assert_eq!(stspe(&z, &z, 0.24).unwrap(), 0.0);
        let s = 0.24f64.sqrt();
        let off = [1.0 + s, 2.0 - s, 3.0 + s];
        assert!((stspe(&off, &z, 0.24).unwrap() - 1.0).abs() < 1e-12);
        assert!(stspe(&z, &z, 0.0).is_err());
    }

    #[test]
    fn metrics_are_permutation_invariant_and_stspe_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z: Vec<f64> = (0..101).map(|_| rng.random_range(1.0..5.0)).collect();
        let e: Vec<f64> = (0..101).map(|_| rng.random_range(-0.5..0.5)).collect();
        let p: Vec<f64> = z.iter().zip(&e).map(|(a, b)| a + b).collect();
        let mut idx: Vec<usize> = (0..101).collect();
        idx.reverse();
        idx.swap(3, 50);
        let zp: Vec<f64> = idx.iter().map(|&i| z[i]).collect();
        let pp: Vec<f64> = idx.iter().map(|&i| p[i]).collect();
        assert_eq!(mprd(&p, &z).unwrap(), mprd(&pp, &zp).unwrap());
        assert!((stspe(&p, &z, 1.0).unwrap() - stspe(&pp, &zp, 1.0).unwrap()).abs() < 1e-14);
        let p3: Vec<f64> = z.iter().zip(&e).map(|(a, b)| a + 3.0 * b).collect();
        assert!((stspe(&p3, &z, 1.0).unwrap() - 9.0 * stspe(&p, &z, 1.0).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn gelman_rubin_cases() {
        let c: Vec<f64> = (0..20).map(|i| (i as f64).sin()).collect();
        let g = gelman_rubin(&[&c, &c, &c]).unwrap();
        assert!(!g.degenerate);
        assert!(g.rhat <= 1.0 + 1e-12);

        let a: Vec<f64> = (0..50).map(|i| 0.001 * (i % 3) as f64).collect();
        let b: Vec<f64> = a.iter().map(|v| v + 10.0).collect();
        assert!(gelman_rubin(&[&a, &b]).unwrap().rhat > 10.0);

        let flat = vec![2.0; 30];
        let g = gelman_rubin(&[&flat, &flat]).unwrap();
        assert_eq!(g, GelmanRubin { rhat: 1.0, degenerate: true });
        assert!(gelman_rubin(&[&flat]).is_err());
        assert!(gelman_rubin(&[&flat[..5], &flat[..5]]).is_err());
    }

    #[test]
    fn gelman_rubin_same_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let chains: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..5000).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let refs: Vec<&[f64]> = chains.iter().map(|c| c.as_slice()).collect();
        assert!(gelman_rubin(&refs).unwrap().rhat < 1.1);
    }

    #[test]
    fn batch_means_cases() {
        assert_eq!(batch_means_se(&[3.0; 200], 50).unwrap(), 0.0);
        assert!(batch_means_se(&[1.0; 99], 50).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let iid: Vec<f64> = (0..10_000).map(|_| rng.sample(StandardNormal)).collect();
        let se = batch_means_se(&iid, DEFAULT_BATCH_SIZE).unwrap();
        assert!((se - 0.01).abs() < 0.003, "{se}");

        let mut ar = Vec::with_capacity(10_000);
        let mut x = 0.0;
        for _ in 0..10_000 {
            x = 0.9 * x + rng.sample::<f64, _>(StandardNormal);
            ar.push(x);
        }
        let (_, var) = mean_var(&ar);
        let naive = (var / ar.len() as f64).sqrt();
        assert!(batch_means_se(&ar, DEFAULT_BATCH_SIZE).unwrap() > naive);
    }

    #[test]
    fn median_and_iqr() {
        let (m, iqr) = median_iqr(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(m, 3.0);
        assert_eq!(iqr, 2.0);
    }
}
