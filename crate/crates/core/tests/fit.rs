use mstm::diagnostics::batch_means_se_pooled;
use mstm::graph::{AdjacencyGraph, Cell, MultivariateSupport};
use mstm::model::{bind, contrast, fit, predict, ModelConfig, Observation, ObservationTable, Structure, VarianceSpec};
use mstm::sampler::gibbs::{McmcConfig, PosteriorDraws};
use mstm::study::{simulate, GenerativeConfig};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn mcmc(iterations: usize, burn_in: usize, chains: usize, seed: u64) -> McmcConfig {
    McmcConfig {
        iterations,
        burn_in,
        chains,
        seed,
        store_states: true,
    }
}

fn two_variable_structure(rows: usize, cols: usize, n_times: usize, rank: usize) -> Structure {
    let g = AdjacencyGraph::lattice(rows, cols);
    let support = MultivariateSupport::complete(2, rows * cols, n_times);
    let mut cfg = ModelConfig::with_rank(rank);
    cfg.covariates.variable_indicators = true;
    Structure::build(&g, &support, &cfg, None).unwrap()
}

fn beta_series(draws: &[PosteriorDraws], j: usize) -> Vec<Vec<f64>> {
    draws
        .iter()
        .map(|d| d.beta.chunks(d.n_covariates).map(|b| b[j]).collect())
        .collect()
}

/// Variable 2 minus variable 1 at one cell, which is the indicator coefficient.
fn gap_weights() -> Vec<((usize, Cell), f64)> {
    vec![((0, Cell::new(1, 0)), 1.0), ((0, Cell::new(0, 0)), -1.0)]
}

#[test]
fn posterior_means_track_the_data() {
    let g = AdjacencyGraph::lattice(2, 3);
    let support = MultivariateSupport::complete(1, 6, 3);
    let st = Structure::build(&g, &support, &ModelConfig::with_rank(2), None).unwrap();
    let gen = GenerativeConfig {
        beta: vec![1.0],
        sigma_k2: None,
        signal_variance: Some(1.0),
        sigma_xi2: 0.3,
        measurement_variance: 0.2,
    };
    let (mut inside, mut total) = (0, 0);
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (table, _) = simulate(&st, &gen, &mut rng).unwrap();
        let model = bind(st.clone(), &table).unwrap();
        let draws = fit(&model, &mcmc(3000, 500, 2, seed)).unwrap();
        let pred = predict(&model, &draws).unwrap();
        for row in &table.rows {
            let p = pred.get(row.time, row.cell).unwrap();
            total += 1;
            if (p.mean - row.value).abs() <= 2.0 * p.root_mspe() {
                inside += 1;
            }
        }
    }
    assert_eq!(total, 90);
    assert!(inside as f64 >= 0.95 * total as f64, "{inside} of {total}");
}

#[test]
fn two_group_contrast_covers_the_gap() {
    let st = two_variable_structure(3, 3, 2, 3);
    let gen = GenerativeConfig {
        beta: vec![2.0, 0.5],
        sigma_k2: None,
        signal_variance: Some(0.5),
        sigma_xi2: 0.2,
        measurement_variance: 0.1,
    };
    let mut covered = 0;
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let (table, _) = simulate(&st, &gen, &mut rng).unwrap();
        let model = bind(st.clone(), &table).unwrap();
        let draws = fit(&model, &mcmc(1500, 300, 1, seed)).unwrap();
        let c = contrast(&model, &draws, &gap_weights()).unwrap();
        if c.lower <= 0.5 && 0.5 <= c.upper {
            covered += 1;
        }
    }
    assert!(covered >= 90, "{covered} of 100 intervals cover the gap");
}

#[test]
fn contrast_ignores_data_in_the_basis_span() {
    let mut st = two_variable_structure(4, 4, 3, 5);
    st.config.variance = VarianceSpec::Constant { value: 0.1 };
    let gen = GenerativeConfig {
        beta: vec![2.0, 0.5],
        sigma_k2: None,
        signal_variance: Some(0.5),
        sigma_xi2: 0.2,
        measurement_variance: 0.1,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (table, _) = simulate(&st, &gen, &mut rng).unwrap();
    let shifts: Vec<DVector<f64>> = st
        .bases
        .iter()
        .map(|b| &b.s * DVector::from_fn(b.rank(), |_, _| rng.sample::<f64, _>(StandardNormal)))
        .collect();
    let shifted = ObservationTable {
        rows: table
            .rows
            .iter()
            .map(|r| {
                let k = st.bases[r.time].cells.binary_search(&r.cell).unwrap();
                Observation {
                    value: r.value + shifts[r.time][k],
                    ..*r
                }
            })
            .collect(),
    };

    let cfg = mcmc(4000, 500, 3, 5);
    let mut summaries = Vec::new();
    for data in [&table, &shifted] {
        let model = bind(st.clone(), data).unwrap();
        let draws = fit(&model, &cfg).unwrap();
        let series = beta_series(&draws, 1);
        let refs: Vec<&[f64]> = series.iter().map(Vec::as_slice).collect();
        let se = batch_means_se_pooled(&refs, 50).unwrap();
        summaries.push((contrast(&model, &draws, &gap_weights()).unwrap(), se));
    }
    let ((a, se_a), (b, se_b)) = (summaries[0], summaries[1]);
    let combined = (se_a * se_a + se_b * se_b).sqrt();
    assert!((a.mean - b.mean).abs() <= 4.0 * combined, "{} vs {} (MC SE {combined:.3e})", a.mean, b.mean);
    assert!((a.variance.sqrt() / b.variance.sqrt() - 1.0).abs() < 0.15);
}
