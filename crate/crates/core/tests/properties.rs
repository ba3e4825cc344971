use proptest::prelude::*;

use u5mr_core::aggregate::{
    national_aggregate, strata_aggregate, summarize, u5mr_from_hazards, Level, DEFAULT_QUANTILES,
};
use u5mr_core::data::{
    aggregate_cells, expand_birth_history, AgeBandSchema, BirthRecord, ExpandedRow, Month,
};
use u5mr_core::direct::direct_u5mr;
use u5mr_core::interaction::{kronecker_precision, DEFAULT_MAX_DIM};
use u5mr_core::linalg::{numerical_rank, RANK_TOLERANCE};
use u5mr_core::model::betabinomial_loglik;
use u5mr_core::spatial::{icar_precision, scale_icar, AdjacencyGraph};
use u5mr_core::temporal::{period_cells, rw2_precision, AxisKind, TemporalAxis};
use u5mr_core::validate::{interval_score, score_cv, CvPrediction};

fn record_strategy() -> impl Strategy<Value = BirthRecord> {
    (
        1990i32..2010,
        0i32..200,
        proptest::option::of(0i32..80),
        0usize..4,
        any::<bool>(),
        1u32..100,
    )
        .prop_map(|(year, offset, death, cluster, urban, w)| {
            let birth = Month::new(year, 1).plus(offset % 12);
            let interview = birth.plus(1 + offset);
            let death = death.map(|d| birth.plus(d)).filter(|d| *d < interview);
            BirthRecord {
                child_id: format!("c{year}-{offset}"),
                birth_month: birth,
                death_month: death,
                interview_month: interview,
                cluster_id: format!("k{cluster}"),
                region_id: "r".into(),
                is_urban: urban,
                weight: w as f64,
            }
        })
}

fn graph_strategy() -> impl Strategy<Value = AdjacencyGraph> {
    (2usize..12)
        .prop_flat_map(|n| {
            (
                Just(n),
                proptest::collection::vec(any::<bool>(), n * (n - 1) / 2),
            )
        })
        .prop_map(|(n, bits)| {
            let mut edges = Vec::new();
            let mut k = 0;
            for i in 0..n {
                for j in i + 1..n {
                    if bits[k] && (j - i) % 3 != 0 {
                        edges.push((i, j));
                    }
                    k += 1;
                }
            }
            AdjacencyGraph::from_edges((0..n).map(|i| format!("g{i}")).collect(), &edges).unwrap()
        })
}

fn axis_strategy() -> impl Strategy<Value = TemporalAxis> {
    proptest::collection::vec(0.1f64..5.0, 3..10).prop_map(|gaps| {
        let mut v = vec![0.0];
        for g in gaps {
            v.push(v.last().unwrap() + g);
        }
        TemporalAxis::new(AxisKind::Age, v).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn exposure_matches_survival_time(rec in record_strategy()) {
        let schema = AgeBandSchema::default();
        let rows = expand_birth_history(&rec, &schema).unwrap();
        let exposure: u32 = rows.iter().map(|r| r.months).sum();
        let censor = rec.interview_month.0 - rec.birth_month.0;
        let expected = match rec.death_age() {
            Some(a) => (a + 1).min(censor).min(60),
            None => censor.min(60),
        };
        prop_assert_eq!(exposure as i32, expected);
        let deaths = rows.iter().filter(|r| r.died).count();
        prop_assert_eq!(deaths, rec.death_age().is_some_and(|a| a < 60) as usize);
    }

    #[test]
    fn cell_aggregation_is_permutation_invariant(recs in proptest::collection::vec(record_strategy(), 1..20), seed in any::<u64>()) {
        let schema = AgeBandSchema::default();
        let rows: Vec<ExpandedRow> = recs.iter().flat_map(|r| expand_birth_history(r, &schema).unwrap()).collect();
        let mut shuffled = rows.clone();
        let n = shuffled.len();
        let mut s = seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (s >> 33) as usize % (i + 1));
        }
        let a = aggregate_cells(&rows);
        prop_assert_eq!(&a, &aggregate_cells(&shuffled));
        let deaths: u64 = a.iter().map(|c| c.deaths).sum();
        let expected = recs.iter().filter(|r| r.death_age().is_some_and(|d| d < 60)).count() as u64;
        prop_assert_eq!(deaths, expected);
    }

    #[test]
    fn icar_rows_sum_to_zero_and_scaling_is_idempotent(g in graph_strategy()) {
        let q = icar_precision(&g);
        for comp in g.component_members() {
            let mut ind = vec![0.0; g.len()];
            for &i in &comp { ind[i] = 1.0; }
            prop_assert!(q.matrix.mul_vec(&ind).iter().all(|v| v.abs() < 1e-12));
        }
        prop_assert_eq!(q.numerical_deficiency(), q.rank_deficiency);
        let once = scale_icar(&q).unwrap();
        let twice = scale_icar(&once).unwrap();
        prop_assert!((once.matrix.to_dense() - twice.matrix.to_dense()).amax() < 1e-9);
    }

    #[test]
    fn rw2_annihilates_affine_sequences(axis in axis_strategy(), a in -5.0f64..5.0, b in -5.0f64..5.0) {
        let q = rw2_precision(&axis).unwrap();
        let x: Vec<f64> = axis.values.iter().map(|t| a + b * t).collect();
        let scale = x.iter().fold(1.0f64, |m, v| m.max(v.abs())).powi(2) * q.matrix.to_dense().amax();
        prop_assert!(q.matrix.quad_form(&x).abs() < 1e-12 * scale);
        prop_assert_eq!(q.numerical_deficiency(), 2);
    }

    #[test]
    fn prediction_cohorts_straddle_birth_year(period in 1990i32..2030) {
        let schema = AgeBandSchema::default();
        for c in period_cells(period, &schema) {
            let (lo, hi) = schema.bounds(c.age_band);
            let years = (lo / 12) as i32..=((hi - 1) / 12) as i32;
            let age_years = period - c.cohort;
            prop_assert!(*years.start() <= age_years && age_years <= *years.end() + 1);
        }
    }

    #[test]
    fn kronecker_rank_is_product(p in 3usize..8, g in graph_strategy()) {
        let qp = rw2_precision(&TemporalAxis::years(AxisKind::Period, 0, p as i32 - 1).unwrap()).unwrap();
        let qs = icar_precision(&g);
        let block = kronecker_precision(&qp, &qs, DEFAULT_MAX_DIM).unwrap();
        let rank = numerical_rank(&block.precision.to_dense(), RANK_TOLERANCE);
        prop_assert_eq!(rank, (p - 2) * (g.len() - g.n_components()));
        prop_assert_eq!(block.nullity, p * g.len() - rank);
    }

    #[test]
    fn betabinomial_hessian_is_negative_near_the_data(n in 1u64..200, frac in 0.0f64..=1.0, offset in -0.5f64..0.5, d in 1e-6f64..0.9) {
        let y = ((n as f64) * frac).floor() as u64;
        let eta = ((y as f64 + 0.5) / ((n - y) as f64 + 0.5)).ln() + offset;
        let (_, _, h) = betabinomial_loglik(y, n, eta, d).unwrap();
        prop_assert!(h < 0.0);
    }

    #[test]
    fn binomial_limit_hessian_is_negative(n in 1u64..200, frac in 0.0f64..=1.0, eta in -8.0f64..3.0) {
        let y = ((n as f64) * frac).floor() as u64;
        let (_, _, h) = betabinomial_loglik(y, n, eta, 1e-9).unwrap();
        prop_assert!(h < 0.0);
    }

    #[test]
    fn betabinomial_derivatives_match_differences(n in 1u64..300, frac in 0.0f64..=1.0, eta in -8.0f64..3.0, d in 1e-6f64..0.9) {
        let y = ((n as f64) * frac).floor() as u64;
        let f = |e: f64| betabinomial_loglik(y, n, e, d).unwrap();
        let (_, g, h) = f(eta);
        let step = 1e-4;
        let (fp, fm) = (f(eta + step), f(eta - step));
        let g_fd = (fp.0 - fm.0) / (2.0 * step);
        let h_fd = (fp.1 - fm.1) / (2.0 * step);
        prop_assert!((g - g_fd).abs() < 1e-5 * (1.0 + g.abs()), "gradient {} vs {}", g, g_fd);
        prop_assert!((h - h_fd).abs() < 1e-5 * (1.0 + h.abs()), "curvature {} vs {}", h, h_fd);
    }

    #[test]
    fn u5mr_is_monotone(h in proptest::array::uniform6(1e-6f64..0.5), band in 0usize..6, bump in 1e-4f64..0.4) {
        let schema = AgeBandSchema::default();
        let mut raised = h;
        raised[band] = (h[band] + bump).min(0.999);
        prop_assert!(u5mr_from_hazards(&raised, &schema) > u5mr_from_hazards(&h, &schema));
    }

    #[test]
    fn strata_mix_is_bounded(pairs in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..50), q in 0.0f64..=1.0) {
        let (rural, urban): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let mixed = strata_aggregate(&rural, &urban, q).unwrap();
        for ((m, r), u) in mixed.iter().zip(&rural).zip(&urban) {
            prop_assert!(*m >= r.min(*u) - 1e-15 && *m <= r.max(*u) + 1e-15);
        }
    }

    #[test]
    fn aggregation_commutes_with_summary(draws in proptest::collection::vec(proptest::collection::vec(0.0f64..0.3, 20), 2..5)) {
        let w = vec![1.0 / draws.len() as f64; draws.len()];
        let national = national_aggregate(&draws, &w).unwrap();
        // Same draw matrix aggregated column by column.
        let by_draw: Vec<f64> = (0..20).map(|m| draws.iter().zip(&w).map(|(d, wi)| d[m] * wi).sum()).collect();
        let a = summarize(&national, DEFAULT_QUANTILES, Level::National, None, 2010).unwrap();
        let b = summarize(&by_draw, DEFAULT_QUANTILES, Level::National, None, 2010).unwrap();
        prop_assert!((a.median - b.median).abs() < 1e-12 && (a.lower - b.lower).abs() < 1e-12 && (a.upper - b.upper).abs() < 1e-12);
    }

    #[test]
    fn direct_point_estimate_ignores_weight_scale(recs in proptest::collection::vec(record_strategy(), 5..40), scale in 0.01f64..100.0) {
        let schema = AgeBandSchema::default();
        let rows: Vec<ExpandedRow> = recs.iter().flat_map(|r| expand_birth_history(r, &schema).unwrap()).collect();
        let scaled: Vec<ExpandedRow> = rows.iter().cloned().map(|mut r| { r.weight *= scale; r }).collect();
        let period = rows[0].period;
        let a = direct_u5mr(&rows, "r", period, &schema).unwrap();
        let b = direct_u5mr(&scaled, "r", period, &schema).unwrap();
        match (a.logit_u5mr, b.logit_u5mr) {
            (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-9),
            (x, y) => prop_assert_eq!(x, y),
        }
        if let Some(v) = a.variance {
            prop_assert!(v >= 0.0);
        }
    }

    #[test]
    fn narrowest_covering_interval_minimises_score(y in -5.0f64..5.0, l in 0.01f64..2.0, u in 0.01f64..2.0, alpha in 0.01f64..0.99) {
        let best = interval_score(y, y, y, alpha);
        prop_assert_eq!(best, 0.0);
        prop_assert!(interval_score(y - l, y + u, y, alpha) >= best);
        prop_assert!(interval_score(y - l, y + u, y, alpha) > interval_score(y - l / 2.0, y + u / 2.0, y, alpha));
    }

    #[test]
    fn scores_nest_and_ignore_order(preds in proptest::collection::vec((proptest::collection::vec(-4.0f64..-1.0, 30), -4.0f64..-1.0), 1..8)) {
        let mut ps: Vec<CvPrediction> = preds
            .into_iter()
            .enumerate()
            .map(|(i, (noisy, direct))| CvPrediction { region: format!("r{i}"), period: 2013, draws: noisy.clone(), noisy, direct, variance: 0.1 })
            .collect();
        let a = score_cv(&ps).unwrap();
        prop_assert!(a.coverage_05 >= a.coverage_50);
        ps.reverse();
        let b = score_cv(&ps).unwrap();
        prop_assert!((a.mae - b.mae).abs() < 1e-12 && (a.mse - b.mse).abs() < 1e-12);
        prop_assert!((a.is_05 - b.is_05).abs() < 1e-12 && a.coverage_50 == b.coverage_50);
    }
}
