use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::aggregate::{strata_aggregate, stratum_u5mr_draws, CohortRule, StratumProportions};
use crate::direct::DirectEstimate;
use crate::error::{Error, Result};
use crate::inference::{optimize_hyper, sample_latent};
use crate::model::LatentModel;
use crate::special::{logit, quantile_sorted, sorted_copy};

/// Held-out prediction for one region-period.
#[derive(Debug, Clone, PartialEq)]
pub struct CvPrediction {
    pub region: String,
    pub period: i32,
    /// Posterior draws of the logit U5MR.
    pub draws: Vec<f64>,
    /// `draws` plus Normal(0, variance) sampling noise.
    pub noisy: Vec<f64>,
    pub direct: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvOptions {
    pub draws: usize,
    pub seed: u64,
    pub rule: CohortRule,
    /// Re-optimise the hyperparameters for every refit instead of reusing
    /// the full-data estimate.
    pub refit_hyper: bool,
}

impl Default for CvOptions {
    fn default() -> Self {
        Self {
            draws: 1000,
            seed: 1,
            rule: CohortRule::Dominant,
            refit_hyper: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvRun {
    pub predictions: Vec<CvPrediction>,
    /// Regions skipped, with the reason.
    pub skipped: Vec<(String, String)>,
}

/// Leave-one-region-out: for each region with a defined direct estimate in
/// `holdout`, drops that region's `holdout` cells, refits the latent field
/// at `theta` (warm-started at `start`) and predicts the held-out
/// region-period.
pub fn loro_cv(
    model: &LatentModel,
    theta: &[f64],
    start: Option<&[f64]>,
    direct: &[DirectEstimate],
    proportions: &StratumProportions,
    holdout: i32,
    options: &CvOptions,
) -> Result<CvRun> {
    let by_rp = model.rows_by_region_period();
    if !by_rp.keys().any(|k| k.1 == holdout) {
        return Err(Error::InvalidParameter(format!(
            "holdout period {holdout} not in the data"
        )));
    }
    let direct: BTreeMap<&str, &DirectEstimate> = direct
        .iter()
        .filter(|e| e.period == holdout)
        .map(|e| (e.region.as_str(), e))
        .collect();
    let regions = model.graph.ids();
    let results: Vec<(String, Result<Option<CvPrediction>>)> = (0..regions.len())
        .into_par_iter()
        .map(|r| {
            let id = regions[r].clone();
            let out = (|| {
                let Some(est) = direct.get(id.as_str()).filter(|e| e.is_defined()) else {
                    return Ok(None);
                };
                let held: HashSet<usize> = by_rp
                    .get(&(r, holdout))
                    .into_iter()
                    .flatten()
                    .copied()
                    .collect();
                let lgm = model.lgm.filter_observations(|o| !held.contains(&o.row));
                let approx = if options.refit_hyper {
                    optimize_hyper(&lgm, theta, 200)?.approx
                } else {
                    lgm.find_mode(theta, start)?
                };
                let seed = options.seed.wrapping_add(r as u64);
                let draws = sample_latent(&lgm, &approx, options.draws, seed)?;
                let rural = stratum_u5mr_draws(model, &draws, holdout, r, false, options.rule)?;
                let urban = stratum_u5mr_draws(model, &draws, holdout, r, true, options.rule)?;
                let u = strata_aggregate(&rural, &urban, proportions.q(holdout, &id)?)?;
                let logit_draws: Vec<f64> = u.iter().map(|&v| logit(v)).collect();
                let variance = est.variance.unwrap();
                let noisy = add_noise(&logit_draws, variance, seed);
                Ok(Some(CvPrediction {
                    region: id.clone(),
                    period: holdout,
                    draws: logit_draws,
                    noisy,
                    direct: est.logit_u5mr.unwrap(),
                    variance,
                }))
            })();
            (id, out)
        })
        .collect();
    let mut run = CvRun {
        predictions: Vec::new(),
        skipped: Vec::new(),
    };
    for (id, res) in results {
        match res {
            Ok(Some(p)) => run.predictions.push(p),
            Ok(None) => run.skipped.push((id, "direct estimate undefined".into())),
            Err(e) => run.skipped.push((id, e.to_string())),
        }
    }
    Ok(run)
}

/// Adds Normal(0, variance) noise drawwise from a seeded stream.
pub fn add_noise(draws: &[f64], variance: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    let sd = variance.max(0.0).sqrt();
    draws
        .iter()
        .map(|&d| {
            let z: f64 = rng.sample(StandardNormal);
            d + sd * z
        })
        .collect()
}

/// `(u - l) + (2/alpha)(l - y)[y < l] + (2/alpha)(y - u)[y > u]`.
pub fn interval_score(lower: f64, upper: f64, y: f64, alpha: f64) -> f64 {
    let mut s = upper - lower;
    if y < lower {
        s += 2.0 / alpha * (lower - y);
    }
    if y > upper {
        s += 2.0 / alpha * (y - upper);
    }
    s
}

/// Table-1-shaped metrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CvScores {
    pub mae: f64,
    pub mse: f64,
    pub is_50: f64,
    pub coverage_50: f64,
    pub is_05: f64,
    pub coverage_05: f64,
    pub regions: usize,
}

/// Mean interval score and coverage of the empirical `(1 - alpha)` intervals
/// of the noisy draws.
fn interval_metrics(predictions: &[CvPrediction], alpha: f64) -> (f64, f64) {
    let mut score = 0.0;
    let mut covered = 0usize;
    for p in predictions {
        let s = sorted_copy(&p.noisy);
        let (l, u) = (
            quantile_sorted(&s, alpha / 2.0),
            quantile_sorted(&s, 1.0 - alpha / 2.0),
        );
        score += interval_score(l, u, p.direct, alpha);
        if (l..=u).contains(&p.direct) {
            covered += 1;
        }
    }
    let n = predictions.len() as f64;
    (score / n, covered as f64 / n)
}

pub fn score_cv(predictions: &[CvPrediction]) -> Result<CvScores> {
    if predictions.is_empty() {
        return Err(Error::InvalidParameter("no predictions to score".into()));
    }
    let (mut abs, mut sq, mut count) = (0.0, 0.0, 0usize);
    for p in predictions {
        for &v in &p.noisy {
            abs += (v - p.direct).abs();
            sq += (v - p.direct).powi(2);
        }
        count += p.noisy.len();
    }
    let (is_50, coverage_50) = interval_metrics(predictions, 0.5);
    let (is_05, coverage_05) = interval_metrics(predictions, 0.05);
    Ok(CvScores {
        mae: abs / count as f64,
        mse: sq / count as f64,
        is_50,
        coverage_50,
        is_05,
        coverage_05,
        regions: predictions.len(),
    })
}

pub const SCORE_COLUMNS: [&str; 7] = [
    "model",
    "MAE",
    "MSE",
    "IS@0.50",
    "coverage@0.50",
    "IS@0.05",
    "coverage@0.05",
];

pub fn write_scores_csv(path: &Path, rows: &[(String, CvScores)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SCORE_COLUMNS)?;
    for (name, s) in rows {
        w.write_record([
            name.clone(),
            format!("{:.6}", s.mae),
            format!("{:.6}", s.mse),
            format!("{:.6}", s.is_50),
            format!("{:.4}", s.coverage_50),
            format!("{:.6}", s.is_05),
            format!("{:.4}", s.coverage_05),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Long format: one line per (region, draw).
pub fn write_predictions_csv(path: &Path, predictions: &[CvPrediction]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "region",
        "period",
        "draw",
        "logit_u5mr",
        "noisy",
        "direct",
        "variance",
    ])?;
    for p in predictions {
        for (m, (d, n)) in p.draws.iter().zip(&p.noisy).enumerate() {
            w.write_record([
                p.region.clone(),
                p.period.to_string(),
                m.to_string(),
                format!("{d:.10}"),
                format!("{n:.10}"),
                format!("{:.10}", p.direct),
                format!("{:.10}", p.variance),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_predictions_csv(path: &Path) -> Result<Vec<CvPrediction>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut out: Vec<CvPrediction> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let bad = || Error::Parse {
            path: path.into(),
            line: i + 2,
            reason: "invalid prediction row".into(),
        };
        let num = |k: usize| -> Result<f64> {
            rec.get(k).unwrap_or("").trim().parse().map_err(|_| bad())
        };
        let region = rec.get(0).ok_or_else(bad)?.to_string();
        let period: i32 = rec.get(1).unwrap_or("").trim().parse().map_err(|_| bad())?;
        let (d, n, direct, variance) = (num(3)?, num(4)?, num(5)?, num(6)?);
        match out.last_mut() {
            Some(p) if p.region == region && p.period == period => {
                p.draws.push(d);
                p.noisy.push(n);
            }
            _ => out.push(CvPrediction {
                region,
                period,
                draws: vec![d],
                noisy: vec![n],
                direct,
                variance,
            }),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interval_score_examples() {
        assert_eq!(interval_score(-3.0, -2.0, -2.5, 0.05), 1.0);
        assert!((interval_score(-3.0, -2.0, -1.9, 0.05) - 5.0).abs() < 1e-12);
        assert!((interval_score(-3.0, -2.0, -3.2, 0.05) - 9.0).abs() < 1e-12);
    }

    fn prediction(noisy: Vec<f64>, direct: f64) -> CvPrediction {
        CvPrediction {
            region: "a".into(),
            period: 2013,
            draws: noisy.clone(),
            noisy,
            direct,
            variance: 0.0,
        }
    }

    #[test]
    fn perfect_predictions_score_zero() {
        let s = score_cv(&[prediction(vec![-3.0; 100], -3.0)]).unwrap();
        assert_eq!(
            (s.mae, s.mse, s.coverage_05, s.coverage_50),
            (0.0, 0.0, 1.0, 1.0)
        );
        assert!(score_cv(&[]).is_err());
    }

    #[test]
    fn zero_variance_noise_is_identity() {
        let d = vec![0.1, -0.4, 2.0];
        assert_eq!(add_noise(&d, 0.0, 3), d);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        let mut a = prediction(vec![-3.0, -2.5], -2.8);
        a.variance = 0.02;
        let mut b = a.clone();
        b.region = "b".into();
        write_predictions_csv(&path, &[a.clone(), b.clone()]).unwrap();
        assert_eq!(load_predictions_csv(&path).unwrap(), vec![a, b]);
    }
}
