use mstm::graph::{AdjacencyGraph, MultivariateSupport};
use mstm::model::{bind, fit, quantile_sorted, ModelConfig, ObservationTable, Structure, VarianceSpec};
use mstm::sampler::conditionals::{sample_sigma_k, sigma_k_conditional, InverseGamma, ShapeInverses};
use mstm::sampler::gibbs::McmcConfig;
use mstm::study::{simulate, GenerativeConfig};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gaussian(rows: usize, cols: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn random_pd(n: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let b = gaussian(n, n, rng);
    &b * b.transpose() / n as f64 + DMatrix::identity(n, n) * 0.3
}

#[test]
fn sigma_k_long_run_matches_the_inverse_gamma_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (r, t_len, sigma_k2) = (4, 8, 2.0f64);
    let k1 = random_pd(r, &mut rng);
    let w: Vec<DMatrix<f64>> = (1..t_len).map(|_| random_pd(r, &mut rng)).collect();
    let m: Vec<DMatrix<f64>> = (1..t_len).map(|_| gaussian(r, r, &mut rng).qr().q()).collect();

    let draw = |cov: &DMatrix<f64>, rng: &mut ChaCha8Rng| {
        cov.clone().cholesky().unwrap().l() * gaussian(r, 1, rng).column(0) * sigma_k2.sqrt()
    };
    let mut eta: Vec<DVector<f64>> = vec![draw(&k1, &mut rng)];
    for t in 1..t_len {
        let next = &m[t - 1] * &eta[t - 1] + draw(&w[t - 1], &mut rng);
        eta.push(next);
    }

    let shapes = ShapeInverses::new(&k1, &w).unwrap();
    let prior = InverseGamma::default();
    let ig = sigma_k_conditional(&eta, &shapes, &m, &prior).unwrap();
    assert_eq!(ig.shape, prior.shape + (t_len * r) as f64 / 2.0);
    let analytic = ig.rate / (ig.shape - 1.0);
    let n = 50_000;
    let mean = (0..n)
        .map(|_| sample_sigma_k(&eta, &shapes, &m, &prior, &mut rng).unwrap())
        .sum::<f64>()
        / n as f64;
    assert!((mean / analytic - 1.0).abs() < 0.05, "{mean} vs {analytic}");
}

/// Log density of IG(2, 1) up to a constant.
fn log_prior(x: f64) -> f64 {
    -3.0 * x.ln() - 1.0 / x
}

/// Posterior means of (δ¹, δ², σ_ξ²) by grid integration, treating the mean
/// surface as known: residual `e_i ~ N(0, σ_ξ² + ṽ_i δ^(g_i))`.
fn grid_posterior(groups: [&[(f64, f64)]; 2]) -> (f64, f64, f64) {
    let n = 240;
    let xi_grid: Vec<f64> = (1..=n).map(|k| 0.6 * k as f64 / n as f64).collect();
    let d_grid: Vec<f64> = (1..=n).map(|k| 0.2 + 3.3 * k as f64 / n as f64).collect();
    // log p(e_g | s, d) + log p(d), one table per group
    let table = |obs: &[(f64, f64)]| -> Vec<Vec<f64>> {
        xi_grid
            .iter()
            .map(|&s| {
                d_grid
                    .iter()
                    .map(|&d| {
                        log_prior(d)
                            + obs
                                .iter()
                                .map(|&(e, v)| {
                                    let var = s + d * v;
                                    -0.5 * var.ln() - 0.5 * e * e / var
                                })
                                .sum::<f64>()
                    })
                    .collect()
            })
            .collect()
    };
    let tables = [table(groups[0]), table(groups[1])];
    let top = tables
        .iter()
        .map(|t| t.iter().flatten().fold(f64::NEG_INFINITY, |a, &b| a.max(b)))
        .collect::<Vec<_>>();
    let (mut z, mut m1, mut m2, mut ms) = (0.0, 0.0, 0.0, 0.0);
    for (i, &s) in xi_grid.iter().enumerate() {
        let sums = |t: &Vec<Vec<f64>>, top: f64| {
            t[i].iter().zip(&d_grid).fold((0.0, 0.0), |(w, wd), (&l, &d)| {
                let e = (l - top).exp();
                (w + e, wd + e * d)
            })
        };
        let (w1, wd1) = sums(&tables[0], top[0]);
        let (w2, wd2) = sums(&tables[1], top[1]);
        let ps = log_prior(s).exp();
        z += ps * w1 * w2;
        m1 += ps * wd1 * w2;
        m2 += ps * w1 * wd2;
        ms += ps * w1 * w2 * s;
    }
    (m1 / z, m2 / z, ms / z)
}

/// Data with base variances that differ across cells; the first variable's
/// noise is inflated by `delta`.
fn reweighted_data(seed: u64, delta: f64) -> (Structure, ObservationTable, [Vec<(f64, f64)>; 2]) {
    let g = AdjacencyGraph::lattice(10, 25);
    let support = MultivariateSupport::complete(2, 250, 1);
    let mut cfg = ModelConfig::with_rank(10);
    cfg.covariates.variable_indicators = true;
    cfg.variance = VarianceSpec::Reweighted {
        groups: vec![1, 2],
        delta_method: false,
    };
    let st = Structure::build(&g, &support, &cfg, None).unwrap();
    let gen = GenerativeConfig {
        beta: vec![1.0, -0.5],
        sigma_k2: None,
        signal_variance: Some(0.5),
        sigma_xi2: 0.1,
        measurement_variance: 0.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (truth, latent) = simulate(&st, &gen, &mut rng).unwrap();
    let mut data = ObservationTable { rows: Vec::new() };
    let mut residuals = [Vec::new(), Vec::new()];
    for row in &truth.rows {
        let k = st.bases[0].cells.binary_search(&row.cell).unwrap();
        let base = rng.random_range(0.02..1.0);
        let scale = if row.cell.variable == 0 { delta } else { 1.0 };
        let mut row = *row;
        row.value += (base * scale).sqrt() * rng.sample::<f64, _>(StandardNormal);
        row.variance = Some(base);
        let mean = latent.mu[0][k] + latent.signal[0][k];
        residuals[row.cell.variable].push((row.value - mean, base));
        data.rows.push(row);
    }
    (st, data, residuals)
}

#[test]
fn reweighting_factor_matches_the_exact_posterior() {
    let delta = 1.5;
    for seed in [31, 32] {
        let (st, data, residuals) = reweighted_data(seed, delta);
        assert_eq!(data.rows.len(), 500);
        let (d1, d2, sxi) = grid_posterior([&residuals[0], &residuals[1]]);

        let model = bind(st, &data).unwrap();
        let mcmc = McmcConfig {
            iterations: 10_000,
            burn_in: 1_000,
            chains: 1,
            seed,
            store_states: false,
        };
        let draws = fit(&model, &mcmc).unwrap();
        let d = &draws[0];
        let mut first: Vec<f64> = (0..d.n_draws()).map(|k| d.delta_at(k)[0]).collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let second: Vec<f64> = (0..d.n_draws()).map(|k| d.delta_at(k)[1]).collect();
        // The oracle fixes the mean surface at the truth, the sampler does not.
        assert!((mean(&first) / d1 - 1.0).abs() < 0.05, "δ(1): {} vs {d1}", mean(&first));
        assert!((mean(&second) / d2 - 1.0).abs() < 0.05, "δ(2): {} vs {d2}", mean(&second));
        assert!((mean(&d.sigma_xi2) / sxi - 1.0).abs() < 0.1, "σ_ξ²: {} vs {sxi}", mean(&d.sigma_xi2));
        first.sort_by(f64::total_cmp);
        let lo = quantile_sorted(&first, 0.025);
        let hi = quantile_sorted(&first, 0.975);
        assert!(lo <= delta && delta <= hi, "[{lo}, {hi}]");
    }
}
