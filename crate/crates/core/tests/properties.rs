use ndarray::{Array1, Array2};
use proptest::prelude::*;

use panel_dml::data::{cross_fold_demean, difference, fold_successor};
use panel_dml::estimator::{z_critical, Diagnostics, InfluenceSummary};
use panel_dml::features::{
    build_dictionary, fit_standardization, BasisTerm, Dictionary, Role, TermGenerator, VarSelector,
    VariableSpec,
};
use panel_dml::simulation::mc_metrics;
use panel_dml::solver::{penalty_grid, solve_path};
use panel_dml::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-3.0..3.0f64, rows * cols)
        .prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn report(point: f64, influence: Vec<f64>) -> EstimateReport {
    let n = influence.len();
    let psi = influence.iter().map(|v| v * v).sum::<f64>() / n as f64;
    EstimateReport::from_summary(
        Estimand::Effect { t: 2, s: 0 },
        "x",
        InfluenceSummary {
            point,
            psi,
            influence: Array1::from(influence),
        },
        0.95,
        Diagnostics::default(),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn folds_partition_units_evenly(n in 4usize..400, k in 4usize..9, seed: u64) {
        prop_assume!(n >= k);
        let p = split_folds(n, k, seed).unwrap();
        let mut seen = vec![0u8; n];
        for f in 0..k {
            for &u in p.fold(f) {
                seen[u] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
        let sizes = p.fold_sizes();
        prop_assert!(sizes.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(sizes[0] - sizes[k - 1] <= 1);
        prop_assert_eq!(p.fold_sizes(), split_folds(n, k, seed).unwrap().fold_sizes());
        prop_assert_eq!(p.assignment(), split_folds(n, k, seed).unwrap().assignment());
    }

    #[test]
    fn successor_is_a_single_cycle(set in prop::collection::btree_set(0usize..50, 1..12)) {
        let set: Vec<usize> = set.into_iter().collect();
        let mut at = set[0];
        let mut visited = Vec::new();
        for _ in 0..set.len() {
            visited.push(at);
            at = fold_successor(at, &set).unwrap();
        }
        prop_assert_eq!(at, set[0]);
        visited.sort_unstable();
        prop_assert_eq!(visited, set);
    }

    #[test]
    fn differencing_and_demeaning_remove_both_fixed_effects(
        noise in matrix(40, 6),
        unit in prop::collection::vec(-50.0..50.0f64, 40),
        time in prop::collection::vec(-50.0..50.0f64, 6),
        t in 2usize..=6,
        s in 0usize..2,
        seed: u64,
    ) {
        prop_assume!(t >= s + 2);
        let with_effects = Array2::from_shape_fn((40, 6), |(i, p)| noise[[i, p]] + unit[i] + time[p]);
        let partition = split_folds(40, 5, seed).unwrap();
        let raw = difference(with_effects.view(), t, s).unwrap();
        let clean = difference(noise.view(), t, s).unwrap();
        for k in 0..5 {
            let kp = partition.partner(k);
            let a = cross_fold_demean(raw.view(), &partition, k, kp).unwrap();
            let b = cross_fold_demean(clean.view(), &partition, k, kp).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn standardized_terms_are_centred_and_scaled(sample in matrix(30, 2)) {
        let layout = [VariableSpec::treatment(0), VariableSpec::new(Role::Covariate, 0, 0)];
        let gens = [
            TermGenerator::Intercept,
            TermGenerator::FullPoly {
                vars: vec![VarSelector::new(Role::Treatment, 0), VarSelector::new(Role::Covariate, 0)],
                max_degree: 2,
            },
        ];
        let dict = fit_standardization(build_dictionary(&gens, &layout).unwrap(), sample.view()).unwrap();
        let vals = dict.eval_rows(sample.view()).unwrap();
        for (j, term) in dict.terms().iter().enumerate() {
            let col = vals.column(j);
            if term.is_intercept() {
                prop_assert!(col.iter().all(|&v| v == 1.0));
            } else if !dict.standardization()[j].degenerate {
                let mean = col.mean().unwrap();
                let sd = (col.mapv(|v| (v - mean).powi(2)).mean().unwrap()).sqrt();
                prop_assert!(mean.abs() < 1e-9);
                prop_assert!((sd - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn analytic_derivatives_match_central_differences(
        powers in prop::collection::vec((0u32..4, 0u32..4, 0u32..3), 1..8),
        x in prop::collection::vec(-2.0..2.0f64, 3),
    ) {
        let layout = [
            VariableSpec::treatment(0),
            VariableSpec::treatment(1),
            VariableSpec::new(Role::Covariate, 0, 0),
        ];
        let terms: Vec<BasisTerm> = powers
            .iter()
            .map(|&(a, b, c)| {
                let f: Vec<(VariableSpec, u32)> = [(layout[0], a), (layout[1], b), (layout[2], c)]
                    .into_iter()
                    .filter(|(_, p)| *p > 0)
                    .collect();
                if f.is_empty() { BasisTerm::intercept() } else { BasisTerm::monomial(f) }
            })
            .collect();
        let dict = Dictionary::from_terms(terms, &layout).unwrap();
        let n = dict.len();
        let dict = dict.with_standardization(vec![panel_dml::features::TermScale::IDENTITY; n]).unwrap();
        let raw = Array1::from(x);
        let analytic = dict.eval_derivative(raw.view(), &layout[0]).unwrap();
        // fourth-order central difference; exact for cubics up to rounding
        let h = 0.5;
        let at = |d: f64| {
            let mut r = raw.clone();
            r[0] += d;
            dict.eval(r.view()).unwrap()
        };
        let fd = ((at(h) - at(-h)) * 8.0 - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
        for j in 0..n {
            prop_assert!((fd[j] - analytic[j]).abs() < 1e-9 * (1.0 + analytic[j].abs()));
        }
    }

    #[test]
    fn larger_penalties_shrink_and_fit_worse(g in matrix(12, 5), m in prop::collection::vec(-2.0..2.0f64, 12)) {
        let sys = MomentSystem::new(g, Array1::from(m));
        let r_max = panel_dml::solver::QuadraticForm::quadratic(&sys).max_penalty();
        prop_assume!(r_max > 1e-6);
        let path = solve_path(&sys, &penalty_grid(r_max, 12, 1e-3), &SolverOptions::default()).unwrap();
        prop_assert!(path[0].rho.iter().all(|&v| v == 0.0));
        for w in path.windows(2) {
            // path runs from large to small penalties
            prop_assert!(w[1].l1_norm() >= w[0].l1_norm() - 1e-9);
            let (a, b) = (sys.criterion(w[0].rho.view()), sys.criterion(w[1].rho.view()));
            prop_assert!(b <= a + 1e-9 * (1.0 + a));
        }
    }

    #[test]
    fn interval_is_symmetric_with_normal_width(point in -10.0..10.0f64, infl in prop::collection::vec(-5.0..5.0f64, 2..60)) {
        let r = report(point, infl.clone());
        let n = infl.len() as f64;
        let psi = infl.iter().map(|v| v * v).sum::<f64>() / n;
        prop_assume!(psi >= 1e-14);
        prop_assert!((r.std_error - (psi / n).sqrt()).abs() < 1e-12);
        let half = z_critical(0.95) * r.std_error;
        prop_assert!((r.ci.1 - point - half).abs() < 1e-12);
        prop_assert!((point - r.ci.0 - half).abs() < 1e-12);
        prop_assert!(r.covers(point));
        prop_assert!(!r.covers(r.ci.1 + 1e-9 + 1e-12 * r.ci.1.abs()));
    }

    #[test]
    fn one_hot_aggregation_returns_the_component(
        a in prop::collection::vec(-5.0..5.0f64, 20),
        b in prop::collection::vec(-5.0..5.0f64, 20),
        pa in -5.0..5.0f64,
        pb in -5.0..5.0f64,
    ) {
        let reports = [report(pa, a), report(pb, b)];
        for (j, w) in [[1.0, 0.0], [0.0, 1.0]].iter().enumerate() {
            let agg = aggregate(&reports, w, 0.95).unwrap();
            prop_assert_eq!(agg.point, reports[j].point);
            prop_assert!((agg.std_error - reports[j].std_error).abs() <= 1e-12 * (1.0 + reports[j].std_error));
        }
    }

    #[test]
    fn mse_splits_into_bias_and_variance(
        est in prop::collection::vec(0.0..6.0f64, 2..80),
        truth in 0.0..6.0f64,
    ) {
        let r = est.len();
        let sds = vec![0.1; r];
        let covered: Vec<bool> = est.iter().map(|e| (e - truth).abs() < 0.5).collect();
        let m = mc_metrics(&est, &sds, &covered, truth).unwrap();
        let expect = m.bias.powi(2) + m.std_dev.powi(2) * (r as f64 - 1.0) / r as f64;
        prop_assert!((m.mse - expect).abs() < 1e-9 * (1.0 + m.mse));
        prop_assert!((0.0..=1.0).contains(&m.coverage));
        prop_assert!((m.est_sd_mean - 0.1).abs() < 1e-12);
        prop_assert!((m.coverage * r as f64 - covered.iter().filter(|&&c| c).count() as f64).abs() < 1e-9);
    }
}
