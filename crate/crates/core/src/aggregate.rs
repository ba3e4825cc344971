use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rayon::prelude::*;

use crate::data::AgeBandSchema;
use crate::error::{Error, Result};
use crate::inference::PosteriorDraws;
use crate::model::{LatentModel, RowKey};
use crate::special::{expit, quantile_sorted, sorted_copy};
use crate::temporal::{dominant_cohort, period_cells};

/// `1 - prod (1 - h_i)^{z_i}` with `z` the band widths, in log space.
pub fn u5mr_from_hazards(h: &[f64; AgeBandSchema::BANDS], schema: &AgeBandSchema) -> f64 {
    let log_survival: f64 = h
        .iter()
        .zip(schema.widths())
        .map(|(&hi, z)| z as f64 * (-hi.clamp(0.0, 1.0)).ln_1p())
        .sum();
    -log_survival.exp_m1()
}

/// Drawwise `rural * q + urban * (1 - q)`.
pub fn strata_aggregate(rural: &[f64], urban: &[f64], q: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::InvalidParameter(format!(
            "rural proportion {q} outside [0, 1]"
        )));
    }
    if rural.len() != urban.len() {
        return Err(Error::Dimension(format!(
            "{} rural draws vs {} urban draws",
            rural.len(),
            urban.len()
        )));
    }
    Ok(rural
        .iter()
        .zip(urban)
        .map(|(r, u)| r * q + u * (1.0 - q))
        .collect())
}

/// Drawwise weighted sum across regions.
pub fn national_aggregate(region_draws: &[Vec<f64>], w: &[f64]) -> Result<Vec<f64>> {
    if region_draws.len() != w.len() || region_draws.is_empty() {
        return Err(Error::Dimension(format!(
            "{} regions vs {} weights",
            region_draws.len(),
            w.len()
        )));
    }
    let total: f64 = w.iter().sum();
    if (total - 1.0).abs() > 1e-6 || w.iter().any(|&x| x < 0.0) {
        return Err(Error::InvalidParameter(format!(
            "national weights sum to {total}"
        )));
    }
    let n = region_draws[0].len();
    if region_draws.iter().any(|d| d.len() != n) {
        return Err(Error::Dimension("regions have unequal draw counts".into()));
    }
    Ok((0..n)
        .map(|m| region_draws.iter().zip(w).map(|(d, wi)| d[m] * wi).sum())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Level {
    Rural,
    Urban,
    Region,
    National,
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Level::Rural => "rural",
            Level::Urban => "urban",
            Level::Region => "region",
            Level::National => "national",
        })
    }
}

impl std::str::FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rural" => Ok(Level::Rural),
            "urban" => Ok(Level::Urban),
            "region" => Ok(Level::Region),
            "national" => Ok(Level::National),
            _ => Err(Error::InvalidParameter(format!("unknown level {s:?}"))),
        }
    }
}

/// Posterior summary of a U5MR, per 1000 live births.
#[derive(Debug, Clone, PartialEq)]
pub struct U5MRSummary {
    pub level: Level,
    pub region: Option<String>,
    pub period: i32,
    pub median: f64,
    pub lower: f64,
    pub upper: f64,
    pub draws: usize,
}

pub const DEFAULT_QUANTILES: [f64; 3] = [0.025, 0.5, 0.975];

/// Empirical `(lower, median, upper)` quantiles of U5MR draws, per 1000.
pub fn summarize(
    draws: &[f64],
    quantiles: [f64; 3],
    level: Level,
    region: Option<String>,
    period: i32,
) -> Result<U5MRSummary> {
    if draws.is_empty() {
        return Err(Error::InvalidParameter("no draws to summarize".into()));
    }
    if !(quantiles[0] <= quantiles[1] && quantiles[1] <= quantiles[2]) {
        return Err(Error::InvalidParameter(format!(
            "quantiles {quantiles:?} not ascending"
        )));
    }
    let sorted = sorted_copy(draws);
    let q = |p| (1000.0 * quantile_sorted(&sorted, p)).clamp(0.0, 1000.0);
    Ok(U5MRSummary {
        level,
        region,
        period,
        lower: q(quantiles[0]),
        median: q(quantiles[1]),
        upper: q(quantiles[2]),
        draws: draws.len(),
    })
}

pub fn write_summaries_csv(path: &Path, rows: &[U5MRSummary]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["level", "region", "period", "median", "lower", "upper", "N"])?;
    for r in rows {
        w.write_record([
            r.level.to_string(),
            r.region.clone().unwrap_or_default(),
            r.period.to_string(),
            format!("{:.6}", r.median),
            format!("{:.6}", r.lower),
            format!("{:.6}", r.upper),
            r.draws.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_summaries_csv(path: &Path) -> Result<Vec<U5MRSummary>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| Error::Parse {
            path: path.into(),
            line: i + 2,
            reason: format!("invalid {what}"),
        };
        let field = |k: usize| rec.get(k).unwrap_or("").trim();
        let num = |k: usize, what: &str| -> Result<f64> { field(k).parse().map_err(|_| bad(what)) };
        out.push(U5MRSummary {
            level: field(0).parse().map_err(|_| bad("level"))?,
            region: Some(field(1).to_string()).filter(|r| !r.is_empty()),
            period: field(2).parse().map_err(|_| bad("period"))?,
            median: num(3, "median")?,
            lower: num(4, "lower")?,
            upper: num(5, "upper")?,
            draws: field(6).parse().map_err(|_| bad("N"))?,
        });
    }
    Ok(out)
}

/// Rural share `q` and national weight `w` per (period, region).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StratumProportions {
    entries: BTreeMap<(i32, String), (f64, f64)>,
}

pub const PROPORTION_COLUMNS: [&str; 4] = ["period", "region_id", "q_rural", "w_national"];

impl StratumProportions {
    pub fn new(entries: impl IntoIterator<Item = (i32, String, f64, f64)>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (period, region, q, w) in entries {
            if !(0.0..=1.0).contains(&q) || !(0.0..=1.0).contains(&w) {
                return Err(Error::InvalidParameter(format!(
                    "proportions ({q}, {w}) for {region} in {period} outside [0, 1]"
                )));
            }
            if map.insert((period, region.clone()), (q, w)).is_some() {
                return Err(Error::InvalidParameter(format!(
                    "duplicate proportions for {region} in {period}"
                )));
            }
        }
        let out = Self { entries: map };
        for p in out.periods() {
            let total: f64 = out
                .entries
                .range((p, String::new())..)
                .take_while(|e| e.0 .0 == p)
                .map(|e| e.1 .1)
                .sum();
            if (total - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidParameter(format!(
                    "national weights for {p} sum to {total}"
                )));
            }
        }
        Ok(out)
    }

    /// Same `q` everywhere and equal national weights.
    pub fn uniform(
        regions: &[String],
        periods: impl IntoIterator<Item = i32>,
        q: f64,
    ) -> Result<Self> {
        let w = 1.0 / regions.len() as f64;
        let periods: Vec<i32> = periods.into_iter().collect();
        Self::new(
            periods
                .iter()
                .flat_map(|&p| regions.iter().map(move |r| (p, r.clone(), q, w))),
        )
    }

    pub fn periods(&self) -> BTreeSet<i32> {
        self.entries.keys().map(|k| k.0).collect()
    }

    fn get(&self, period: i32, region: &str) -> Result<(f64, f64)> {
        self.entries
            .get(&(period, region.to_string()))
            .copied()
            .ok_or_else(|| {
                Error::InvalidParameter(format!("no proportions for region {region} in {period}"))
            })
    }

    pub fn q(&self, period: i32, region: &str) -> Result<f64> {
        self.get(period, region).map(|e| e.0)
    }

    pub fn w(&self, period: i32, region: &str) -> Result<f64> {
        self.get(period, region).map(|e| e.1)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut reader = csv::Reader::from_path(path)?;
        let headers = reader.headers()?.clone();
        let idx: Vec<usize> = PROPORTION_COLUMNS
            .iter()
            .map(|c| {
                headers
                    .iter()
                    .position(|h| h.trim() == *c)
                    .ok_or_else(|| Error::Parse {
                        path: path.into(),
                        line: 1,
                        reason: format!("missing column {c}"),
                    })
            })
            .collect::<Result<_>>()?;
        let mut entries = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec?;
            let field = |k: usize| rec.get(idx[k]).unwrap_or("").trim();
            let bad = |what: &str| Error::Parse {
                path: path.into(),
                line: i + 2,
                reason: format!("invalid {what}"),
            };
            let period: i32 = field(0).parse().map_err(|_| bad("period"))?;
            let q: f64 = field(2).parse().map_err(|_| bad("q_rural"))?;
            let w: f64 = field(3).parse().map_err(|_| bad("w_national"))?;
            entries.push((period, field(1).to_string(), q, w));
        }
        Self::new(entries)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(PROPORTION_COLUMNS)?;
        for ((p, r), (q, wn)) in &self.entries {
            w.write_record([
                p.to_string(),
                r.clone(),
                format!("{q:.10}"),
                format!("{wn:.10}"),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// How a (band, period) pair spanning two cohorts is collapsed to one
/// linear predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CohortRule {
    #[default]
    Dominant,
    MonthWeighted,
}

/// Linear-predictor draws for one (band, period, region, stratum).
pub fn band_eta_draws(
    model: &LatentModel,
    draws: &PosteriorDraws,
    band: usize,
    period: i32,
    region: usize,
    urban: bool,
    rule: CohortRule,
) -> Result<Vec<f64>> {
    let key = |cohort| RowKey {
        age_band: band,
        period,
        cohort,
        region,
        urban,
    };
    match rule {
        CohortRule::Dominant => {
            let row = model.predictor_row(&key(dominant_cohort(band, period, &model.schema)))?;
            Ok(draws.combination(&row))
        }
        CohortRule::MonthWeighted => {
            let cohorts = model.layout.cohorts();
            let cells: Vec<_> = period_cells(period, &model.schema)
                .into_iter()
                .filter(|c| c.age_band == band && cohorts.contains(&c.cohort))
                .collect();
            let total: f64 = cells.iter().map(|c| c.months as f64).sum();
            if cells.is_empty() {
                return Err(Error::InvalidAxis(format!(
                    "no modelled cohort for band {band} in {period}"
                )));
            }
            let mut row: Vec<(usize, f64)> = Vec::new();
            for c in &cells {
                let share = c.months as f64 / total;
                row.extend(
                    model
                        .predictor_row(&key(c.cohort))?
                        .into_iter()
                        .map(|(j, v)| (j, v * share)),
                );
            }
            Ok(draws.combination(&row))
        }
    }
}

/// Stratum U5MR draws from the hazards `expit(eta)` of the six bands.
pub fn stratum_u5mr_draws(
    model: &LatentModel,
    draws: &PosteriorDraws,
    period: i32,
    region: usize,
    urban: bool,
    rule: CohortRule,
) -> Result<Vec<f64>> {
    let etas: Vec<Vec<f64>> = (0..AgeBandSchema::BANDS)
        .map(|b| band_eta_draws(model, draws, b, period, region, urban, rule))
        .collect::<Result<_>>()?;
    Ok((0..draws.len())
        .map(|m| {
            let h: [f64; AgeBandSchema::BANDS] = std::array::from_fn(|b| expit(etas[b][m]));
            u5mr_from_hazards(&h, &model.schema)
        })
        .collect())
}

/// U5MR draws at every level for a set of periods.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorU5mr {
    pub regions: Vec<String>,
    pub periods: Vec<i32>,
    /// Keyed by (region index, period, urban).
    pub stratum: BTreeMap<(usize, i32, bool), Vec<f64>>,
    pub region: BTreeMap<(usize, i32), Vec<f64>>,
    pub national: BTreeMap<i32, Vec<f64>>,
}

pub fn aggregate_posterior(
    model: &LatentModel,
    draws: &PosteriorDraws,
    proportions: &StratumProportions,
    periods: &[i32],
    rule: CohortRule,
) -> Result<PosteriorU5mr> {
    let regions = model.graph.ids().to_vec();
    let jobs: Vec<(usize, i32)> = periods
        .iter()
        .flat_map(|&p| (0..regions.len()).map(move |r| (r, p)))
        .collect();
    let per_region: Vec<((usize, i32), Vec<f64>, Vec<f64>, Vec<f64>)> = jobs
        .par_iter()
        .map(|&(r, p)| {
            let rural = stratum_u5mr_draws(model, draws, p, r, false, rule)?;
            let urban = stratum_u5mr_draws(model, draws, p, r, true, rule)?;
            let combined = strata_aggregate(&rural, &urban, proportions.q(p, &regions[r])?)?;
            Ok(((r, p), rural, urban, combined))
        })
        .collect::<Result<_>>()?;
    let mut out = PosteriorU5mr {
        regions: regions.clone(),
        periods: periods.to_vec(),
        stratum: BTreeMap::new(),
        region: BTreeMap::new(),
        national: BTreeMap::new(),
    };
    for ((r, p), rural, urban, combined) in per_region {
        out.stratum.insert((r, p, false), rural);
        out.stratum.insert((r, p, true), urban);
        out.region.insert((r, p), combined);
    }
    for &p in periods {
        let d: Vec<Vec<f64>> = (0..regions.len())
            .map(|r| out.region[&(r, p)].clone())
            .collect();
        let w: Vec<f64> = regions
            .iter()
            .map(|id| proportions.w(p, id))
            .collect::<Result<_>>()?;
        out.national.insert(p, national_aggregate(&d, &w)?);
    }
    Ok(out)
}

impl PosteriorU5mr {
    /// Summaries ordered by level, then region, then period.
    pub fn summaries(&self, quantiles: [f64; 3]) -> Result<Vec<U5MRSummary>> {
        let mut out = Vec::new();
        for (&(r, p, urban), d) in &self.stratum {
            let level = if urban { Level::Urban } else { Level::Rural };
            out.push(summarize(
                d,
                quantiles,
                level,
                Some(self.regions[r].clone()),
                p,
            )?);
        }
        for (&(r, p), d) in &self.region {
            out.push(summarize(
                d,
                quantiles,
                Level::Region,
                Some(self.regions[r].clone()),
                p,
            )?);
        }
        for (&p, d) in &self.national {
            out.push(summarize(d, quantiles, Level::National, None, p)?);
        }
        out.sort_by(|a, b| (a.level, &a.region, a.period).cmp(&(b.level, &b.region, b.period)));
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hazard_limits() {
        let s = AgeBandSchema::default();
        assert_eq!(u5mr_from_hazards(&[0.0; 6], &s), 0.0);
        assert_eq!(u5mr_from_hazards(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0], &s), 1.0);
    }

    #[test]
    fn hazard_example() {
        let s = AgeBandSchema::default();
        let h = [0.03, 0.005, 0.002, 0.001, 0.001, 0.001];
        let z = [1, 11, 12, 12, 12, 12];
        let surv: f64 = h.iter().zip(z).map(|(x, k)| (1.0f64 - x).powi(k)).product();
        assert!((u5mr_from_hazards(&h, &s) - (1.0 - surv)).abs() < 1e-14);
        assert!((u5mr_from_hazards(&h, &s) - 0.13553).abs() < 1e-5);
    }

    #[test]
    fn strata_examples() {
        let r = vec![0.1, 0.2];
        let u = vec![0.05, 0.03];
        assert_eq!(strata_aggregate(&r, &u, 1.0).unwrap(), r);
        assert_eq!(strata_aggregate(&r, &u, 0.0).unwrap(), u);
        assert!((strata_aggregate(&[0.10], &[0.05], 0.6).unwrap()[0] - 0.08).abs() < 1e-15);
        assert!(strata_aggregate(&r, &u, 1.2).is_err());
    }

    #[test]
    fn national_examples() {
        let avg = national_aggregate(&[vec![0.04], vec![0.06]], &[0.5, 0.5]).unwrap();
        assert!((avg[0] - 0.05).abs() < 1e-15);
        assert_eq!(
            national_aggregate(&[vec![0.04, 0.1], vec![0.06, 0.2]], &[1.0, 0.0]).unwrap(),
            vec![0.04, 0.1]
        );
        let same = national_aggregate(
            &[vec![0.07; 3], vec![0.07; 3], vec![0.07; 3]],
            &[0.2, 0.3, 0.5],
        )
        .unwrap();
        assert!(same.iter().all(|v| (v - 0.07).abs() < 1e-15));
        assert!(national_aggregate(&[vec![0.04], vec![0.06]], &[0.5, 0.6]).is_err());
    }

    #[test]
    fn summary_examples() {
        let s = summarize(&[0.05; 10], DEFAULT_QUANTILES, Level::National, None, 2010).unwrap();
        assert!(s.median == s.lower && s.lower == s.upper);
        let draws: Vec<f64> = (1..=1000).map(|i| i as f64 / 1000.0).collect();
        let s = summarize(&draws, DEFAULT_QUANTILES, Level::National, None, 2010).unwrap();
        assert!((s.median - 500.5).abs() < 1e-9);
        let s = summarize(&draws, [0.25, 0.5, 0.75], Level::National, None, 2010).unwrap();
        assert!((s.lower - 250.75).abs() < 1e-9 && (s.upper - 750.25).abs() < 1e-9);
        assert!(summarize(&[], DEFAULT_QUANTILES, Level::National, None, 2010).is_err());
    }

    #[test]
    fn summaries_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        let rows = vec![
            U5MRSummary {
                level: Level::Urban,
                region: Some("R01".into()),
                period: 2010,
                median: 41.5,
                lower: 30.25,
                upper: 55.0,
                draws: 10,
            },
            U5MRSummary {
                level: Level::National,
                region: None,
                period: 2011,
                median: 50.0,
                lower: 45.0,
                upper: 56.125,
                draws: 10,
            },
        ];
        write_summaries_csv(&path, &rows).unwrap();
        assert_eq!(load_summaries_csv(&path).unwrap(), rows);
    }

    #[test]
    fn proportions_validate_weights() {
        let ok = StratumProportions::new([
            (2010, "a".to_string(), 0.5, 0.4),
            (2010, "b".to_string(), 1.0, 0.6),
        ])
        .unwrap();
        assert_eq!(ok.q(2010, "b").unwrap(), 1.0);
        assert!(ok.q(2011, "a").is_err());
        assert!(StratumProportions::new([(2010, "a".to_string(), 0.5, 0.4)]).is_err());
        assert!(StratumProportions::new([(2010, "a".to_string(), 1.5, 1.0)]).is_err());
    }

    #[test]
    fn proportions_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        let regions = vec!["x".to_string(), "y".to_string(), "z".to_string()];
        let p = StratumProportions::uniform(&regions, 2006..=2008, 0.7).unwrap();
        p.write_csv(&path).unwrap();
        let back = StratumProportions::load(&path).unwrap();
        assert_eq!(back.periods(), p.periods());
        assert!((back.w(2007, "y").unwrap() - 1.0 / 3.0).abs() < 1e-9);
    }
}
