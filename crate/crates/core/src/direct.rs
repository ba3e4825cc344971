use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;

use crate::aggregate::u5mr_from_hazards;
use crate::data::{AgeBandSchema, ExpandedRow};
use crate::error::{Error, Result};
use crate::inference::{
    optimize_hyper, sample_latent, BlockPrior, HyperParameter, HyperPrior, LatentBlock, Likelihood,
    ModelBuilder,
};
use crate::model::{pc_prior_precision, PcPriorSpec};
use crate::special::{expit, logit, quantile_sorted, sorted_copy};
use crate::temporal::{curvature_constraints, rw2_precision, AxisKind, TemporalAxis};

const BANDS: usize = AgeBandSchema::BANDS;

/// Design-weighted logit U5MR for one region-period. `logit_u5mr` is `None`
/// when no deaths were observed (or a band has no exposure); `variance` is
/// `None` additionally when fewer than two clusters contribute.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectEstimate {
    pub region: String,
    pub period: i32,
    pub logit_u5mr: Option<f64>,
    pub variance: Option<f64>,
    pub n_clusters: usize,
}

impl DirectEstimate {
    pub fn is_defined(&self) -> bool {
        self.logit_u5mr.is_some() && self.variance.is_some()
    }

    pub fn u5mr(&self) -> Option<f64> {
        self.logit_u5mr.map(expit)
    }
}

/// Weighted deaths and person-months per band for one cluster.
#[derive(Debug, Clone, Copy, Default)]
struct Totals {
    deaths: [f64; BANDS],
    exposure: [f64; BANDS],
}

impl Totals {
    fn add(&mut self, other: &Totals, scale: f64) {
        for b in 0..BANDS {
            self.deaths[b] += scale * other.deaths[b];
            self.exposure[b] += scale * other.exposure[b];
        }
    }

    fn u5mr(&self, schema: &AgeBandSchema) -> Option<f64> {
        if self.exposure.iter().any(|&e| e <= 0.0) {
            return None;
        }
        let h: [f64; BANDS] = std::array::from_fn(|b| self.deaths[b] / self.exposure[b]);
        Some(u5mr_from_hazards(&h, schema))
    }
}

/// Estimates for one region-period from its expanded rows; rows from other
/// region-periods are ignored.
pub fn direct_u5mr(
    rows: &[ExpandedRow],
    region: &str,
    period: i32,
    schema: &AgeBandSchema,
) -> Result<DirectEstimate> {
    let selected: Vec<&ExpandedRow> = rows
        .iter()
        .filter(|r| r.region_id == region && r.period == period)
        .collect();
    estimate(&selected, region, period, schema)
}

/// Estimates for every region-period present in `rows`, sorted by region then
/// period.
pub fn direct_estimates(
    rows: &[ExpandedRow],
    schema: &AgeBandSchema,
) -> Result<Vec<DirectEstimate>> {
    let mut groups: BTreeMap<(&str, i32), Vec<&ExpandedRow>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.region_id.as_str(), r.period))
            .or_default()
            .push(r);
    }
    let groups: Vec<_> = groups.into_iter().collect();
    groups
        .par_iter()
        .map(|((region, period), rs)| estimate(rs, region, *period, schema))
        .collect()
}

fn estimate(
    rows: &[&ExpandedRow],
    region: &str,
    period: i32,
    schema: &AgeBandSchema,
) -> Result<DirectEstimate> {
    // stratum -> cluster -> totals
    let mut strata: BTreeMap<bool, BTreeMap<&str, Totals>> = BTreeMap::new();
    for r in rows {
        if r.months == 0 {
            continue;
        }
        let t = strata
            .entry(r.is_urban)
            .or_default()
            .entry(r.cluster_id.as_str())
            .or_default();
        t.exposure[r.age_band] += r.weight * r.months as f64;
        if r.died {
            t.deaths[r.age_band] += r.weight;
        }
    }
    let n_clusters: usize = strata.values().map(|s| s.len()).sum();
    if n_clusters == 0 {
        return Err(Error::Undefined(format!(
            "no exposure for region {region} in {period}"
        )));
    }
    let mut total = Totals::default();
    for s in strata.values() {
        for c in s.values() {
            total.add(c, 1.0);
        }
    }
    let undefined = DirectEstimate {
        region: region.to_string(),
        period,
        logit_u5mr: None,
        variance: None,
        n_clusters,
    };
    let u = match total.u5mr(schema) {
        Some(u) if total.deaths.iter().sum::<f64>() > 0.0 => u,
        _ => return Ok(undefined),
    };
    let logit_u = logit(u);
    if n_clusters < 2 {
        return Ok(DirectEstimate {
            logit_u5mr: Some(logit_u),
            ..undefined
        });
    }

    // Delete-one-cluster replicates within each stratum.
    let mut replicates: Vec<(f64, Vec<Option<f64>>)> = Vec::new();
    for s in strata.values() {
        let n_h = s.len();
        if n_h < 2 {
            continue;
        }
        let mut stratum_total = Totals::default();
        for c in s.values() {
            stratum_total.add(c, 1.0);
        }
        let factor = n_h as f64 / (n_h - 1) as f64;
        let reps = s
            .values()
            .map(|c| {
                let mut t = total;
                t.add(&stratum_total, factor - 1.0);
                t.add(c, -factor);
                t.u5mr(schema)
            })
            .collect();
        replicates.push(((n_h - 1) as f64 / n_h as f64, reps));
    }
    if replicates
        .iter()
        .any(|(_, r)| r.iter().any(Option::is_none))
    {
        return Ok(DirectEstimate {
            logit_u5mr: Some(logit_u),
            ..undefined
        });
    }
    let jackknife = |f: &dyn Fn(f64) -> f64| -> f64 {
        replicates
            .iter()
            .map(|(scale, reps)| {
                let vals: Vec<f64> = reps.iter().map(|r| f(r.unwrap())).collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                scale * vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
            })
            .sum()
    };
    let degenerate = replicates.iter().flat_map(|(_, r)| r).any(|r| {
        let r = r.unwrap();
        r <= 0.0 || r >= 1.0
    });
    let variance = if degenerate {
        jackknife(&|r| r) / (u * (1.0 - u)).powi(2)
    } else {
        jackknife(&logit)
    };
    Ok(DirectEstimate {
        logit_u5mr: Some(logit_u),
        variance: Some(variance),
        ..undefined
    })
}

pub fn write_direct_csv(path: &Path, estimates: &[DirectEstimate]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "region",
        "period",
        "logit_u5mr",
        "variance",
        "n_clusters",
        "defined",
    ])?;
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.10}")).unwrap_or_default();
    for e in estimates {
        w.write_record([
            e.region.clone(),
            e.period.to_string(),
            fmt(e.logit_u5mr),
            fmt(e.variance),
            e.n_clusters.to_string(),
            e.is_defined().to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_direct_csv(path: &Path) -> Result<Vec<DirectEstimate>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| Error::Parse {
            path: path.into(),
            line: i + 2,
            reason: format!("invalid {what}"),
        };
        let opt = |k: usize, what: &str| -> Result<Option<f64>> {
            match rec.get(k).unwrap_or("").trim() {
                "" => Ok(None),
                s => s.parse().map(Some).map_err(|_| bad(what)),
            }
        };
        out.push(DirectEstimate {
            region: rec.get(0).ok_or_else(|| bad("region"))?.to_string(),
            period: rec
                .get(1)
                .unwrap_or("")
                .trim()
                .parse()
                .map_err(|_| bad("period"))?,
            logit_u5mr: opt(2, "logit_u5mr")?,
            variance: opt(3, "variance")?,
            n_clusters: rec
                .get(4)
                .unwrap_or("")
                .trim()
                .parse()
                .map_err(|_| bad("n_clusters"))?,
        });
    }
    Ok(out)
}

/// Smoothed logit U5MR for one period.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedPoint {
    pub period: i32,
    pub observed: bool,
    pub median: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FayHerriotOptions {
    pub horizon: u32,
    pub draws: usize,
    pub seed: u64,
    pub pc_trend: PcPriorSpec,
    pub pc_noise: PcPriorSpec,
}

impl Default for FayHerriotOptions {
    fn default() -> Self {
        let spec = PcPriorSpec { u: 1.0, p: 0.01 };
        Self {
            horizon: 0,
            draws: 1000,
            seed: 1,
            pc_trend: spec,
            pc_noise: spec,
        }
    }
}

/// Area-level smoother on the logit scale: known sampling variances, latent
/// intercept + slope + RW2 trend + iid noise, empirical-Bayes hyperparameters.
/// Periods without a defined estimate and the `horizon` years after the last
/// one are predicted.
pub fn fay_herriot_smooth(
    series: &[DirectEstimate],
    options: &FayHerriotOptions,
) -> Result<Vec<SmoothedPoint>> {
    let defined: BTreeMap<i32, (f64, f64)> = series
        .iter()
        .filter(|e| e.is_defined())
        .map(|e| (e.period, (e.logit_u5mr.unwrap(), e.variance.unwrap())))
        .collect();
    if defined.len() < 3 {
        return Err(Error::Undefined(format!(
            "{} defined periods, need at least 3",
            defined.len()
        )));
    }
    let first = *defined.keys().next().unwrap();
    let last = series.iter().map(|e| e.period).max().unwrap() + options.horizon as i32;
    let axis = TemporalAxis::years(AxisKind::Period, first, last)?;
    let n = axis.len();
    let q = rw2_precision(&axis)?;
    let tau = |name: &str, spec: PcPriorSpec| HyperParameter {
        name: name.into(),
        prior: HyperPrior::PcPrecision(pc_prior_precision(spec)),
        lower: -15.0,
        upper: 20.0,
        initial: 2.0,
    };
    let mut b = ModelBuilder::new(Likelihood::Gaussian);
    let t_trend = b.hyper(tau("tau_trend", options.pc_trend));
    let t_noise = b.hyper(tau("tau_noise", options.pc_noise));
    let fixed = b.block(LatentBlock {
        name: "fixed".into(),
        size: 2,
        prior: BlockPrior::Fixed { precision: 1e-3 },
        constraints: vec![],
        regularizer: vec![],
    });
    let cons = curvature_constraints(&axis);
    let trend = b.block(LatentBlock {
        name: "trend".into(),
        size: n,
        prior: BlockPrior::Scaled {
            log_pdet: q.log_pdet(),
            structure: q.matrix.clone(),
            tau: t_trend,
        },
        regularizer: cons.clone(),
        constraints: cons,
    });
    let noise = b.block(LatentBlock {
        name: "noise".into(),
        size: n,
        prior: BlockPrior::Scaled {
            structure: crate::linalg::SymSparse::identity(n),
            log_pdet: 0.0,
            tau: t_noise,
        },
        constraints: vec![],
        regularizer: vec![],
    });
    let slope = axis.slope_values();
    let rows: Vec<usize> = (0..n)
        .map(|t| {
            b.row(vec![
                (fixed, 1.0),
                (fixed + 1, slope[t]),
                (trend + t, 1.0),
                (noise + t, 1.0),
            ])
        })
        .collect();
    for (&p, &(y, v)) in &defined {
        b.observe(rows[(p - first) as usize], y, 1.0 / v.max(1e-12));
    }
    let model = b.build()?;
    let opt = optimize_hyper(&model, &model.initial_theta(), 200)?;
    let draws = sample_latent(&model, &opt.approx, options.draws, options.seed)?;
    Ok((0..n)
        .map(|t| {
            let sorted = sorted_copy(&draws.combination(&model.rows()[rows[t]]));
            let period = first + t as i32;
            SmoothedPoint {
                period,
                observed: defined.contains_key(&period),
                median: quantile_sorted(&sorted, 0.5),
                lower: quantile_sorted(&sorted, 0.025),
                upper: quantile_sorted(&sorted, 0.975),
            }
        })
        .collect())
}
