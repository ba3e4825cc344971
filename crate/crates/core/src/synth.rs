//! Synthetic populations with a known APC hazard surface and a stratified
//! two-stage cluster survey drawn from them.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;

use crate::aggregate::{u5mr_from_hazards, StratumProportions};
use crate::data::{AgeBandSchema, BirthRecord, Month};
use crate::error::{Error, Result};
use crate::spatial::{bym2_block, icar_precision, scale_icar, AdjacencyGraph, Polygon};
use crate::special::{expit, logit};
use crate::temporal::dominant_cohort;

/// Known parameters of the logit hazard
/// `logit(h) = logit(base_b) + urban + slope (p - ref) + nu_p + eta_c + S_r + delta_{p,r} + f_ea`.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthParameters {
    /// Monthly hazard per band for a rural child in the reference period with
    /// all other effects zero.
    pub band_hazards: [f64; AgeBandSchema::BANDS],
    pub urban_effect: f64,
    pub period_slope: f64,
    pub reference_period: i32,
    pub period_amplitude: f64,
    pub cohort_amplitude: f64,
    pub spatial_tau: f64,
    pub spatial_phi: f64,
    pub interaction_sd: f64,
    /// Standard deviation of the enumeration-area frailty on the logit scale.
    pub frailty_sd: f64,
}

impl Default for TruthParameters {
    fn default() -> Self {
        Self {
            band_hazards: [0.022, 0.0025, 0.0008, 0.0004, 0.00025, 0.0002],
            urban_effect: -0.15,
            period_slope: -0.04,
            reference_period: 2010,
            period_amplitude: 0.05,
            cohort_amplitude: 0.04,
            spatial_tau: 8.0,
            spatial_phi: 0.7,
            interaction_sd: 0.1,
            frailty_sd: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PopulationConfig {
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Regions taken row-major from the grid.
    pub regions: usize,
    /// Regions without a rural stratum.
    pub urban_only_regions: usize,
    pub cell_km: f64,
    pub rural_eas: usize,
    pub urban_eas: usize,
    /// Inclusive range of households per enumeration area.
    pub households: (u32, u32),
    /// Range of the per-region birth rate (births per household-year).
    pub birth_rate: (f64, f64),
    pub first_birth_year: i32,
    pub survey_year: i32,
    /// Inclusive range of interview months within the survey year.
    pub interview_months: (u32, u32),
    /// Periods covered by the truth table and the proportions.
    pub periods: (i32, i32),
    pub truth: TruthParameters,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        Self {
            grid_rows: 7,
            grid_cols: 7,
            regions: 47,
            urban_only_regions: 2,
            cell_km: 100.0,
            rural_eas: 60,
            urban_eas: 30,
            households: (60, 240),
            birth_rate: (0.10, 0.22),
            first_birth_year: 2001,
            survey_year: 2014,
            interview_months: (2, 6),
            periods: (2006, 2018),
            truth: TruthParameters::default(),
        }
    }
}

impl PopulationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.regions < 3 || self.regions > self.grid_rows * self.grid_cols {
            return bad(format!(
                "{} regions do not fit a {}x{} grid",
                self.regions, self.grid_rows, self.grid_cols
            ));
        }
        if self.urban_only_regions >= self.regions {
            return bad("at least one region needs a rural stratum".into());
        }
        if self.rural_eas == 0 || self.urban_eas == 0 {
            return bad("every stratum needs at least one enumeration area".into());
        }
        if self.households.0 == 0 || self.households.0 > self.households.1 {
            return bad(format!("invalid household range {:?}", self.households));
        }
        if !(self.birth_rate.0 >= 0.0 && self.birth_rate.0 <= self.birth_rate.1) {
            return bad(format!("invalid birth-rate range {:?}", self.birth_rate));
        }
        let (m0, m1) = self.interview_months;
        if !(1..=12).contains(&m0) || !(m0..=12).contains(&m1) {
            return bad(format!(
                "invalid interview months {:?}",
                self.interview_months
            ));
        }
        if self.first_birth_year >= self.survey_year || self.periods.0 > self.periods.1 {
            return bad("empty birth window or period range".into());
        }
        let t = &self.truth;
        if t.band_hazards.iter().any(|h| !(0.0..=1.0).contains(h)) {
            return bad(format!("band hazards {:?} outside [0, 1]", t.band_hazards));
        }
        if !(t.spatial_tau > 0.0)
            || !(0.0..=1.0).contains(&t.spatial_phi)
            || t.interaction_sd < 0.0
            || t.frailty_sd < 0.0
        {
            return bad("invalid spatial, interaction or frailty parameters".into());
        }
        Ok(())
    }

    /// `key = value` lines overriding the defaults; `#` starts a comment.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut c = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |reason: String| Error::Parse {
                path: path.into(),
                line: lineno + 1,
                reason,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad("expected key = value".into()))?;
            let value = value.trim();
            let num = |v: &str| {
                v.parse::<f64>()
                    .map_err(|_| bad(format!("invalid number {v:?}")))
            };
            let int = |v: &str| {
                v.parse::<i64>()
                    .map_err(|_| bad(format!("invalid integer {v:?}")))
            };
            let pair = |v: &str| -> Result<(f64, f64)> {
                let (a, b) = v
                    .split_once(',')
                    .ok_or_else(|| bad(format!("expected a,b in {v:?}")))?;
                Ok((num(a.trim())?, num(b.trim())?))
            };
            match key.trim() {
                "grid_rows" => c.grid_rows = int(value)? as usize,
                "grid_cols" => c.grid_cols = int(value)? as usize,
                "regions" => c.regions = int(value)? as usize,
                "urban_only_regions" => c.urban_only_regions = int(value)? as usize,
                "cell_km" => c.cell_km = num(value)?,
                "rural_eas" => c.rural_eas = int(value)? as usize,
                "urban_eas" => c.urban_eas = int(value)? as usize,
                "households" => {
                    let (a, b) = pair(value)?;
                    c.households = (a as u32, b as u32);
                }
                "birth_rate" => c.birth_rate = pair(value)?,
                "first_birth_year" => c.first_birth_year = int(value)? as i32,
                "survey_year" => c.survey_year = int(value)? as i32,
                "interview_months" => {
                    let (a, b) = pair(value)?;
                    c.interview_months = (a as u32, b as u32);
                }
                "periods" => {
                    let (a, b) = pair(value)?;
                    c.periods = (a as i32, b as i32);
                }
                "truth.band_hazards" => {
                    let v: Vec<f64> = value
                        .split(',')
                        .map(|s| num(s.trim()))
                        .collect::<Result<_>>()?;
                    c.truth.band_hazards = v
                        .try_into()
                        .map_err(|_| bad("need six band hazards".into()))?;
                }
                "truth.urban_effect" => c.truth.urban_effect = num(value)?,
                "truth.period_slope" => c.truth.period_slope = num(value)?,
                "truth.reference_period" => c.truth.reference_period = int(value)? as i32,
                "truth.period_amplitude" => c.truth.period_amplitude = num(value)?,
                "truth.cohort_amplitude" => c.truth.cohort_amplitude = num(value)?,
                "truth.spatial_tau" => c.truth.spatial_tau = num(value)?,
                "truth.spatial_phi" => c.truth.spatial_phi = num(value)?,
                "truth.interaction_sd" => c.truth.interaction_sd = num(value)?,
                "truth.frailty_sd" => c.truth.frailty_sd = num(value)?,
                other => return Err(bad(format!("unknown key {other:?}"))),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

/// One enumeration area (the primary sampling unit).
#[derive(Debug, Clone, PartialEq)]
pub struct EnumerationArea {
    pub id: String,
    pub region: usize,
    pub urban: bool,
    pub households: u32,
    pub frailty: f64,
    pub interview: Month,
    pub x: f64,
    pub y: f64,
}

/// True U5MR for one region-period; stratum values are `None` for absent
/// strata.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthRow {
    pub region: String,
    pub period: i32,
    pub u5mr: f64,
    pub rural: Option<f64>,
    pub urban: Option<f64>,
}

/// A child's history inside one household.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChildHistory {
    pub birth: Month,
    pub death: Option<Month>,
}

#[derive(Debug, Clone)]
pub struct SyntheticPopulation {
    pub config: PopulationConfig,
    pub seed: u64,
    pub polygons: Vec<Polygon>,
    pub graph: AdjacencyGraph,
    pub urban_only: Vec<bool>,
    pub birth_rate: Vec<f64>,
    pub spatial: Vec<f64>,
    /// `a_r` in `delta_{p,r} = a_r c(p)`.
    pub interaction: Vec<f64>,
    pub eas: Vec<EnumerationArea>,
    /// Enumeration-area indices per stratum `(region, urban)`.
    pub strata: BTreeMap<(usize, bool), Vec<usize>>,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const STREAM_TRUTH: u64 = 1 << 40;
const STREAM_REGION: u64 = 2 << 40;
const STREAM_SURVEY: u64 = 3 << 40;

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

pub fn generate_population(config: &PopulationConfig, seed: u64) -> Result<SyntheticPopulation> {
    config.validate()?;
    let c = config;
    let polygons: Vec<Polygon> = (0..c.regions)
        .map(|k| {
            let (row, col) = ((k / c.grid_cols) as f64, (k % c.grid_cols) as f64);
            let s = c.cell_km;
            Polygon {
                id: format!("R{:02}", k + 1),
                vertices: vec![
                    (col * s, row * s),
                    ((col + 1.0) * s, row * s),
                    ((col + 1.0) * s, (row + 1.0) * s),
                    (col * s, (row + 1.0) * s),
                ],
            }
        })
        .collect();
    let graph = AdjacencyGraph::from_polygons(&polygons)?;
    let mut urban_only = vec![false; c.regions];
    for k in 1..=c.urban_only_regions {
        urban_only[k * c.regions / (c.urban_only_regions + 1)] = true;
    }

    let mut rng = stream_rng(seed, STREAM_TRUTH);
    let scaled = scale_icar(&icar_precision(&graph))?;
    let spatial = bym2_block(c.truth.spatial_tau, c.truth.spatial_phi, &scaled)?.sample_s(&mut rng);
    let mut interaction: Vec<f64> = (0..c.regions)
        .map(|_| c.truth.interaction_sd * normal(&mut rng))
        .collect();
    let mean = interaction.iter().sum::<f64>() / c.regions as f64;
    interaction.iter_mut().for_each(|a| *a -= mean);
    let birth_rate: Vec<f64> = (0..c.regions)
        .map(|_| c.birth_rate.0 + (c.birth_rate.1 - c.birth_rate.0) * rng.random::<f64>())
        .collect();

    let per_region: Vec<Vec<EnumerationArea>> = (0..c.regions)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream_rng(seed, STREAM_REGION + r as u64);
            let poly = &polygons[r];
            let (x0, y0) = poly.vertices[0];
            let mut out = Vec::new();
            for urban in [false, true] {
                if !urban && urban_only[r] {
                    continue;
                }
                let n = if urban { c.urban_eas } else { c.rural_eas };
                for _ in 0..n {
                    let month = rng.random_range(c.interview_months.0..=c.interview_months.1);
                    out.push(EnumerationArea {
                        id: String::new(),
                        region: r,
                        urban,
                        households: rng.random_range(c.households.0..=c.households.1),
                        frailty: c.truth.frailty_sd * normal(&mut rng),
                        interview: Month::new(c.survey_year, month),
                        x: x0 + c.cell_km * rng.random::<f64>(),
                        y: y0 + c.cell_km * rng.random::<f64>(),
                    });
                }
            }
            out
        })
        .collect();
    let mut eas = Vec::new();
    let mut strata: BTreeMap<(usize, bool), Vec<usize>> = BTreeMap::new();
    for mut ea in per_region.into_iter().flatten() {
        ea.id = format!("E{:05}", eas.len() + 1);
        strata
            .entry((ea.region, ea.urban))
            .or_default()
            .push(eas.len());
        eas.push(ea);
    }
    Ok(SyntheticPopulation {
        config: config.clone(),
        seed,
        polygons,
        graph,
        urban_only,
        birth_rate,
        spatial,
        interaction,
        eas,
        strata,
    })
}

impl SyntheticPopulation {
    pub fn region_id(&self, r: usize) -> &str {
        &self.graph.ids()[r]
    }

    fn period_curve(&self, period: i32) -> f64 {
        let (a, b) = (
            self.config.periods.0,
            self.config.periods.1.max(self.config.periods.0 + 1),
        );
        (std::f64::consts::PI * (period - a) as f64 / (b - a) as f64).cos()
    }

    /// Logit hazard without the enumeration-area frailty.
    pub fn logit_hazard(
        &self,
        band: usize,
        period: i32,
        cohort: i32,
        region: usize,
        urban: bool,
    ) -> f64 {
        let t = &self.config.truth;
        let two_pi = 2.0 * std::f64::consts::PI;
        logit(t.band_hazards[band])
            + if urban { t.urban_effect } else { 0.0 }
            + t.period_slope * (period - t.reference_period) as f64
            + t.period_amplitude * (two_pi * (period - 2000) as f64 / 11.0).sin()
            + t.cohort_amplitude * (two_pi * (cohort - 2000) as f64 / 9.0).sin()
            + self.spatial[region]
            + self.interaction[region] * self.period_curve(period)
    }

    pub fn total_households(&self) -> u64 {
        self.eas.iter().map(|e| e.households as u64).sum()
    }

    /// Children ever born in one household, simulated month by month from
    /// the hazards; reproducible for a given (population seed, area,
    /// household).
    pub fn household_births(&self, ea: usize, household: u32) -> Vec<ChildHistory> {
        let area = &self.eas[ea];
        let mut rng = stream_rng(self.seed, ((ea as u64) << 20) | household as u64);
        let start = Month::new(self.config.first_birth_year, 1);
        let span = area.interview.0 - start.0;
        let mean = self.birth_rate[area.region] * span as f64 / 12.0;
        let count = if mean > 0.0 {
            Poisson::new(mean)
                .map(|p| p.sample(&mut rng) as usize)
                .unwrap_or(0)
        } else {
            0
        };
        let mut births: Vec<Month> = (0..count)
            .map(|_| start.plus(rng.random_range(0..span)))
            .collect();
        births.sort();
        let schema = AgeBandSchema::default();
        births
            .into_iter()
            .map(|birth| {
                let cohort = birth.year();
                let last = (area.interview.0 - birth.0 - 1).min(AgeBandSchema::MAX_AGE as i32 - 1);
                let mut death = None;
                for age in 0..=last {
                    let band = schema.band_of(age as u32).expect("age below 60");
                    let month = birth.plus(age);
                    let h = expit(
                        self.logit_hazard(band, month.year(), cohort, area.region, area.urban)
                            + area.frailty,
                    );
                    if rng.random::<f64>() < h {
                        death = Some(month);
                        break;
                    }
                }
                ChildHistory { birth, death }
            })
            .collect()
    }

    /// Household-weighted mean hazard over a stratum's areas, with the
    /// dominant cohort of each (band, period).
    pub fn stratum_hazards(
        &self,
        region: usize,
        urban: bool,
        period: i32,
    ) -> Option<[f64; AgeBandSchema::BANDS]> {
        let eas = self.strata.get(&(region, urban))?;
        let schema = AgeBandSchema::default();
        let total: f64 = eas.iter().map(|&e| self.eas[e].households as f64).sum();
        Some(std::array::from_fn(|b| {
            let eta = self.logit_hazard(
                b,
                period,
                dominant_cohort(b, period, &schema),
                region,
                urban,
            );
            eas.iter()
                .map(|&e| self.eas[e].households as f64 * expit(eta + self.eas[e].frailty))
                .sum::<f64>()
                / total
        }))
    }

    /// Rural share of households and national household share per region,
    /// constant across the configured periods.
    pub fn proportions(&self) -> Result<StratumProportions> {
        let total = self.total_households() as f64;
        let mut entries = Vec::new();
        for r in 0..self.graph.len() {
            let size = |urban| -> f64 {
                self.strata.get(&(r, urban)).map_or(0.0, |v| {
                    v.iter().map(|&e| self.eas[e].households as f64).sum()
                })
            };
            let (rural, urban) = (size(false), size(true));
            for p in self.config.periods.0..=self.config.periods.1 {
                entries.push((
                    p,
                    self.region_id(r).to_string(),
                    rural / (rural + urban),
                    (rural + urban) / total,
                ));
            }
        }
        StratumProportions::new(entries)
    }

    pub fn truth(&self) -> Result<Vec<TruthRow>> {
        let props = self.proportions()?;
        let schema = AgeBandSchema::default();
        let mut rows = Vec::new();
        for r in 0..self.graph.len() {
            for p in self.config.periods.0..=self.config.periods.1 {
                let rural = self
                    .stratum_hazards(r, false, p)
                    .map(|h| u5mr_from_hazards(&h, &schema));
                let urban = self
                    .stratum_hazards(r, true, p)
                    .map(|h| u5mr_from_hazards(&h, &schema));
                let q = props.q(p, self.region_id(r))?;
                let u5mr = q * rural.unwrap_or(0.0) + (1.0 - q) * urban.unwrap_or(0.0);
                rows.push(TruthRow {
                    region: self.region_id(r).to_string(),
                    period: p,
                    u5mr,
                    rural,
                    urban,
                });
            }
        }
        Ok(rows)
    }

    /// Every child in the population, as survey records with weight 1.
    pub fn census(&self) -> Vec<BirthRecord> {
        (0..self.eas.len())
            .into_par_iter()
            .flat_map_iter(|e| {
                let design = ClusterDraw {
                    ea: e,
                    inclusion: 1.0,
                    households: (0..self.eas[e].households).collect(),
                };
                self.cluster_records(&design, 1.0)
            })
            .collect()
    }

    fn cluster_records(&self, draw: &ClusterDraw, weight: f64) -> Vec<BirthRecord> {
        let area = &self.eas[draw.ea];
        let mut out = Vec::new();
        for &hh in &draw.households {
            for (k, child) in self.household_births(draw.ea, hh).into_iter().enumerate() {
                out.push(BirthRecord {
                    child_id: format!("{}-{:04}-{:02}", area.id, hh, k + 1),
                    birth_month: child.birth,
                    death_month: child.death,
                    interview_month: area.interview,
                    cluster_id: area.id.clone(),
                    region_id: self.region_id(area.region).to_string(),
                    is_urban: area.urban,
                    weight,
                });
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurveyDesign {
    pub rural_clusters: usize,
    pub urban_clusters: usize,
    pub households: u32,
    pub jitter: bool,
}

impl Default for SurveyDesign {
    fn default() -> Self {
        Self {
            rural_clusters: 22,
            urban_clusters: 13,
            households: 25,
            jitter: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledCluster {
    pub cluster_id: String,
    pub ea: usize,
    pub region_id: String,
    pub is_urban: bool,
    pub households_total: u32,
    pub households_sampled: u32,
    /// First-stage inclusion probability.
    pub inclusion: f64,
    pub weight: f64,
    pub x: f64,
    pub y: f64,
    pub x_displaced: f64,
    pub y_displaced: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Survey {
    pub records: Vec<BirthRecord>,
    pub clusters: Vec<SampledCluster>,
}

struct ClusterDraw {
    ea: usize,
    inclusion: f64,
    households: Vec<u32>,
}

/// Systematic PPS without replacement over a randomly ordered list. Units
/// whose size would give an inclusion probability of at least one are taken
/// with certainty. Returns `(unit, inclusion probability)`.
pub fn systematic_pps<R: Rng + ?Sized>(
    sizes: &[f64],
    n: usize,
    rng: &mut R,
) -> Result<Vec<(usize, f64)>> {
    if n == 0 || n > sizes.len() {
        return Err(Error::InvalidParameter(format!(
            "cannot select {n} of {} units",
            sizes.len()
        )));
    }
    if sizes.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::InvalidParameter(
            "unit sizes must be positive".into(),
        ));
    }
    let mut certain = vec![false; sizes.len()];
    loop {
        let k = n - certain.iter().filter(|&&c| c).count();
        let total: f64 = sizes
            .iter()
            .zip(&certain)
            .filter(|(_, &c)| !c)
            .map(|(s, _)| s)
            .sum();
        let mut changed = false;
        for (i, &s) in sizes.iter().enumerate() {
            if !certain[i] && k > 0 && k as f64 * s >= total {
                certain[i] = true;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let k = n - certain.iter().filter(|&&c| c).count();
    let total: f64 = sizes
        .iter()
        .zip(&certain)
        .filter(|(_, &c)| !c)
        .map(|(s, _)| s)
        .sum();
    let mut out: Vec<(usize, f64)> = (0..sizes.len())
        .filter(|&i| certain[i])
        .map(|i| (i, 1.0))
        .collect();
    if k > 0 {
        let mut order: Vec<usize> = (0..sizes.len()).filter(|&i| !certain[i]).collect();
        order.shuffle(rng);
        let start: f64 = rng.random();
        let mut cum = 0.0;
        let mut next = start;
        for i in order {
            let pi = k as f64 * sizes[i] / total;
            cum += pi;
            if next < cum && out.len() < n {
                out.push((i, pi));
                next += 1.0;
            }
        }
    }
    out.sort_by_key(|e| e.0);
    Ok(out)
}

/// Displaces a point by a uniform direction and a uniform distance up to the
/// cap: 2 km urban, 5 km rural, 10 km for a random 1% of rural clusters.
pub fn jitter<R: Rng + ?Sized>(x: f64, y: f64, urban: bool, rng: &mut R) -> (f64, f64) {
    let cap = if urban {
        2.0
    } else if rng.random::<f64>() < 0.01 {
        10.0
    } else {
        5.0
    };
    let angle = 2.0 * std::f64::consts::PI * rng.random::<f64>();
    let dist = cap * rng.random::<f64>();
    (x + dist * angle.cos(), y + dist * angle.sin())
}

/// Stage 1: systematic PPS of areas per stratum (size = households).
/// Stage 2: simple random sample of households within each area.
pub fn draw_survey(
    population: &SyntheticPopulation,
    design: &SurveyDesign,
    seed: u64,
) -> Result<Survey> {
    if design.rural_clusters == 0 || design.urban_clusters == 0 || design.households == 0 {
        return Err(Error::InvalidParameter(
            "survey design counts must be positive".into(),
        ));
    }
    let mut rng = stream_rng(seed, STREAM_SURVEY);
    let mut draws = Vec::new();
    for (&(_, urban), eas) in &population.strata {
        let n = if urban {
            design.urban_clusters
        } else {
            design.rural_clusters
        };
        if n > eas.len() {
            return Err(Error::InvalidParameter(format!(
                "{n} clusters requested from a stratum of {} areas",
                eas.len()
            )));
        }
        let sizes: Vec<f64> = eas
            .iter()
            .map(|&e| population.eas[e].households as f64)
            .collect();
        for (i, pi) in systematic_pps(&sizes, n, &mut rng)? {
            let ea = eas[i];
            let total = population.eas[ea].households;
            let m = design.households.min(total);
            let mut households: Vec<u32> =
                rand::seq::index::sample(&mut rng, total as usize, m as usize)
                    .into_iter()
                    .map(|h| h as u32)
                    .collect();
            households.sort();
            draws.push(ClusterDraw {
                ea,
                inclusion: pi,
                households,
            });
        }
    }
    let mut clusters = Vec::new();
    for d in &draws {
        let area = &population.eas[d.ea];
        let m = d.households.len() as u32;
        let weight = area.households as f64 / (d.inclusion * m as f64);
        let (xd, yd) = if design.jitter {
            jitter(area.x, area.y, area.urban, &mut rng)
        } else {
            (area.x, area.y)
        };
        clusters.push(SampledCluster {
            cluster_id: area.id.clone(),
            ea: d.ea,
            region_id: population.region_id(area.region).to_string(),
            is_urban: area.urban,
            households_total: area.households,
            households_sampled: m,
            inclusion: d.inclusion,
            weight,
            x: area.x,
            y: area.y,
            x_displaced: xd,
            y_displaced: yd,
        });
    }
    let records: Vec<BirthRecord> = draws
        .par_iter()
        .zip(clusters.par_iter())
        .flat_map_iter(|(d, c)| population.cluster_records(d, c.weight))
        .collect();
    Ok(Survey { records, clusters })
}

pub fn write_truth_csv(path: &Path, rows: &[TruthRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["region", "period", "u5mr", "u5mr_rural", "u5mr_urban"])?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.10}")).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.region.clone(),
            r.period.to_string(),
            format!("{:.10}", r.u5mr),
            opt(r.rural),
            opt(r.urban),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_truth_csv(path: &Path) -> Result<Vec<TruthRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let bad = || Error::Parse {
            path: path.into(),
            line: i + 2,
            reason: "invalid truth row".into(),
        };
        let opt = |k: usize| -> Result<Option<f64>> {
            match rec.get(k).unwrap_or("").trim() {
                "" => Ok(None),
                s => s.parse().map(Some).map_err(|_| bad()),
            }
        };
        out.push(TruthRow {
            region: rec.get(0).ok_or_else(bad)?.to_string(),
            period: rec.get(1).unwrap_or("").trim().parse().map_err(|_| bad())?,
            u5mr: opt(2)?.ok_or_else(bad)?,
            rural: opt(3)?,
            urban: opt(4)?,
        });
    }
    Ok(out)
}

pub fn write_clusters_csv(path: &Path, clusters: &[SampledCluster]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "cluster_id",
        "region_id",
        "is_urban",
        "households_total",
        "households_sampled",
        "inclusion",
        "weight",
        "x_km",
        "y_km",
        "x_displaced_km",
        "y_displaced_km",
    ])?;
    for c in clusters {
        w.write_record([
            c.cluster_id.clone(),
            c.region_id.clone(),
            (c.is_urban as u8).to_string(),
            c.households_total.to_string(),
            c.households_sampled.to_string(),
            format!("{:.10}", c.inclusion),
            format!("{:.6}", c.weight),
            format!("{:.4}", c.x),
            format!("{:.4}", c.y),
            format!("{:.4}", c.x_displaced),
            format!("{:.4}", c.y_displaced),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PopulationConfig {
        PopulationConfig {
            grid_rows: 2,
            grid_cols: 2,
            regions: 4,
            urban_only_regions: 1,
            rural_eas: 5,
            urban_eas: 3,
            households: (10, 20),
            ..PopulationConfig::default()
        }
    }

    #[test]
    fn kenya_scale_strata() {
        let pop = generate_population(&PopulationConfig::default(), 1).unwrap();
        assert_eq!(pop.graph.len(), 47);
        assert_eq!(pop.strata.len(), 92);
        assert!(pop.eas.iter().all(|e| e.households > 0));
    }

    #[test]
    fn pps_inclusion_sums_to_sample_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sizes = [5.0, 100.0, 7.0, 20.0, 30.0, 1.0];
        let sel = systematic_pps(&sizes, 3, &mut rng).unwrap();
        assert_eq!(sel.len(), 3);
        assert!(sel.iter().any(|&(i, p)| i == 1 && p == 1.0));
        assert!(systematic_pps(&sizes, 7, &mut rng).is_err());
        assert_eq!(systematic_pps(&[3.0], 1, &mut rng).unwrap(), vec![(0, 1.0)]);
    }

    #[test]
    fn zero_and_certain_hazards() {
        let mut c = small();
        c.truth.band_hazards = [0.0; 6];
        let pop = generate_population(&c, 3).unwrap();
        assert!(pop.census().iter().all(|r| r.death_month.is_none()));
        c.truth.band_hazards[0] = 1.0;
        let pop = generate_population(&c, 3).unwrap();
        let census = pop.census();
        assert!(!census.is_empty());
        assert!(census.iter().all(|r| r.death_month == Some(r.birth_month)));
        assert!(pop.truth().unwrap().iter().all(|t| t.u5mr == 1.0));
    }

    #[test]
    fn single_area_stratum_is_certain() {
        let mut c = small();
        c.urban_eas = 1;
        let pop = generate_population(&c, 5).unwrap();
        let design = SurveyDesign {
            rural_clusters: 2,
            urban_clusters: 1,
            households: 4,
            jitter: false,
        };
        let s = draw_survey(&pop, &design, 9).unwrap();
        for cl in s.clusters.iter().filter(|c| c.is_urban) {
            assert_eq!(cl.inclusion, 1.0);
            assert!((cl.weight - cl.households_total as f64 / 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn config_parse() {
        let c = PopulationConfig::parse(
            "regions = 4\ngrid_rows = 2\ngrid_cols = 2\nhouseholds = 5, 9\n",
            Path::new("x"),
        )
        .unwrap();
        assert_eq!((c.regions, c.households), (4, (5, 9)));
        assert!(PopulationConfig::parse("nope = 1", Path::new("x")).is_err());
        assert!(PopulationConfig::parse("regions = 60", Path::new("x")).is_err());
    }
}
