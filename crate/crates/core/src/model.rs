//! Assembly of the spatio-temporal APC model: design rows, latent blocks,
//! penalised-complexity priors and the beta-binomial likelihood.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;

use crate::data::{AgeBandSchema, CountCell};
use crate::error::{Error, Result};
use crate::inference::{
    BlockPrior, HyperParameter, HyperPrior, LatentBlock, LatentGaussianModel, Likelihood,
    ModelBuilder,
};
use crate::interaction::{kronecker_precision, null_space_constraints, DEFAULT_MAX_DIM};
use crate::linalg::RANK_TOLERANCE;
use crate::spatial::{icar_precision, scale_icar, AdjacencyGraph};
use crate::special::{digamma_rising, expit, ln_choose, log_rising, trigamma_rising};
use crate::temporal::{
    build_apc_layout, curvature_constraints, rw2_precision, ApcLayout, ApcVariant, AxisKind,
    LayoutOptions, SlopePair,
};

/// Beta-binomial log-likelihood of `y` deaths in `n` trials with mean
/// `expit(eta)` and intra-cluster correlation `d`, with its first and second
/// derivatives in `eta`.
pub fn betabinomial_loglik(y: u64, n: u64, eta: f64, d: f64) -> Result<(f64, f64, f64)> {
    if !(d > 0.0 && d < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "overdispersion must lie in (0, 1), got {d}"
        )));
    }
    if y > n {
        return Err(Error::InvalidParameter(format!(
            "deaths {y} exceed exposure {n}"
        )));
    }
    let s = (1.0 - d) / d;
    let pi = expit(eta);
    let q = expit(-eta);
    let (a, b) = (s * pi, s * q);
    let ll = log_rising(a, y) + log_rising(b, n - y) + ln_choose(n, y) - log_rising(s, n);
    // Written around the binomial terms so that small `d` does not cancel.
    let (a1, a2) = rising_ratio_sums(a, y);
    let (b1, b2) = rising_ratio_sums(b, n - y);
    let (yf, nf) = (y as f64, n as f64);
    let l1 = yf * q - (nf - yf) * pi - q * a1 + pi * b1;
    let l2 = -nf * pi * q + pi * q * (a1 + b1) + q * q * a2 + pi * pi * b2;
    Ok((ll, l1, l2))
}

/// `(sum_{j<m} j / (x + j), sum_{j<m} j x / (x + j)^2)`.
fn rising_ratio_sums(x: f64, m: u64) -> (f64, f64) {
    if m <= 64 {
        return (0..m).fold((0.0, 0.0), |(s1, s2), j| {
            let j = j as f64;
            let z = x + j;
            (s1 + j / z, s2 + j * x / (z * z))
        });
    }
    let d1 = digamma_rising(x, m);
    let d2 = trigamma_rising(x, m);
    (m as f64 - x * d1, x * d1 - x * x * d2)
}

/// Tail statement `P(parameter > U) = p` (or `P(phi < U) = p` for mixing).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PcPriorSpec {
    pub u: f64,
    pub p: f64,
}

impl PcPriorSpec {
    pub fn new(u: f64, p: f64) -> Result<Self> {
        if !(u > 0.0) || !(p > 0.0 && p < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "PC prior needs U > 0 and 0 < p < 1, got U={u}, p={p}"
            )));
        }
        Ok(Self { u, p })
    }
}

/// Exponential prior on `sigma = tau^{-1/2}` with `P(sigma > U) = p`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PcPrecisionPrior {
    pub spec: PcPriorSpec,
    pub lambda: f64,
}

pub fn pc_prior_precision(spec: PcPriorSpec) -> PcPrecisionPrior {
    PcPrecisionPrior {
        spec,
        lambda: -spec.p.ln() / spec.u,
    }
}

impl PcPrecisionPrior {
    /// Log density of `tau`.
    pub fn log_density(&self, tau: f64) -> f64 {
        if !(tau > 0.0) {
            return f64::NEG_INFINITY;
        }
        (self.lambda / 2.0).ln() - 1.5 * tau.ln() - self.lambda / tau.sqrt()
    }
}

const MIXING_GRID_LO: f64 = -12.0;
const MIXING_GRID_HI: f64 = 12.0;
const MIXING_GRID_N: usize = 4801;

/// PC prior on the BYM2 mixing weight, tabulated on a grid of `logit phi`.
#[derive(Debug, Clone, PartialEq)]
pub struct PcMixingPrior {
    pub spec: PcPriorSpec,
    /// Rate of the exponential prior on the distance scale.
    pub rate: f64,
    log_density_logit: Vec<f64>,
}

fn kld_and_derivative(phi: f64, gammas: &[f64]) -> (f64, f64) {
    let mut k = 0.0;
    let mut dk = 0.0;
    for &g in gammas {
        let x = phi * (g - 1.0);
        k += x - x.ln_1p();
        dk += (g - 1.0) - (g - 1.0) / (1.0 + x);
    }
    (0.5 * k, 0.5 * dk)
}

/// Builds the mixing prior from the positive eigenvalues of the scaled
/// structure. The distance from the base model `phi = 0` is
/// `sqrt(2 KLD(phi))`; the exponential rate is calibrated so that
/// `P(phi < U) = p`.
pub fn pc_prior_mixing(spec: PcPriorSpec, eigenvalues: &[f64]) -> Result<PcMixingPrior> {
    if !(spec.u < 1.0) {
        return Err(Error::InvalidParameter(
            "mixing PC prior needs U < 1".into(),
        ));
    }
    let gammas: Vec<f64> = eigenvalues
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|v| 1.0 / v)
        .collect();
    let dist = |phi: f64| (2.0 * kld_and_derivative(phi, &gammas).0).max(0.0).sqrt();
    let d_max = dist(1.0 - 1e-12);
    let d_u = dist(spec.u);
    if !(d_max > 0.0) {
        return Err(Error::InvalidParameter(
            "structure has no spread; mixing prior undefined".into(),
        ));
    }
    let prob = |r: f64| (-(r * d_u)).exp_m1() / (-(r * d_max)).exp_m1();
    if spec.p <= d_u / d_max {
        return Err(Error::InvalidParameter(format!(
            "P(phi < {}) = {} is not attainable (minimum {:.4})",
            spec.u,
            spec.p,
            d_u / d_max
        )));
    }
    let (mut lo, mut hi) = (-30.0f64, 30.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if prob(mid.exp()) < spec.p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let rate = (0.5 * (lo + hi)).exp();
    let mass = -(-(rate * d_max)).exp_m1();
    let log_norm = -mass.ln();
    let step = (MIXING_GRID_HI - MIXING_GRID_LO) / (MIXING_GRID_N - 1) as f64;
    let mut table = Vec::with_capacity(MIXING_GRID_N);
    for i in 0..MIXING_GRID_N {
        let t = MIXING_GRID_LO + step * i as f64;
        let phi = expit(t);
        let (k, dk) = kld_and_derivative(phi, &gammas);
        let d = (2.0 * k).max(0.0).sqrt();
        let dd = if d > 1e-300 {
            dk / d
        } else {
            (0.5 * gammas.iter().map(|g| (g - 1.0).powi(2)).sum::<f64>()).sqrt()
        };
        let jac = phi * expit(-t);
        table.push(rate.ln() - rate * d + dd.ln() + log_norm + jac.ln());
    }
    Ok(PcMixingPrior {
        spec,
        rate,
        log_density_logit: table,
    })
}

impl PcMixingPrior {
    /// Log density of `logit phi` (includes the Jacobian).
    pub fn log_density_logit(&self, t: f64) -> f64 {
        if !(MIXING_GRID_LO..=MIXING_GRID_HI).contains(&t) {
            return f64::NEG_INFINITY;
        }
        let step = (MIXING_GRID_HI - MIXING_GRID_LO) / (MIXING_GRID_N - 1) as f64;
        let pos = (t - MIXING_GRID_LO) / step;
        let i = (pos.floor() as usize).min(MIXING_GRID_N - 2);
        let w = pos - i as f64;
        (1.0 - w) * self.log_density_logit[i] + w * self.log_density_logit[i + 1]
    }

    /// Log density of `phi`.
    pub fn log_density(&self, phi: f64) -> f64 {
        if !(phi > 0.0 && phi < 1.0) {
            return f64::NEG_INFINITY;
        }
        self.log_density_logit(crate::special::logit(phi)) - (phi * (1.0 - phi)).ln()
    }
}

/// Named hyperparameters on their natural scale.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    pub overdispersion: f64,
    pub tau_age: f64,
    pub tau_period: Option<f64>,
    pub tau_cohort: Option<f64>,
    pub tau_spatial: f64,
    pub phi: f64,
    pub tau_interaction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub variant: ApcVariant,
    pub fixed_effect_variance: f64,
    pub pc_age: PcPriorSpec,
    pub pc_period: PcPriorSpec,
    pub pc_cohort: PcPriorSpec,
    pub pc_spatial: PcPriorSpec,
    pub pc_mixing: PcPriorSpec,
    pub pc_interaction: PcPriorSpec,
    /// Normal prior on `logit d`: mean and precision.
    pub overdispersion_mean: f64,
    pub overdispersion_precision: f64,
    pub age_values: Option<Vec<f64>>,
    pub slopes: Option<SlopePair>,
    pub horizon: u32,
    /// Inclusive period range used for estimation, if restricted.
    pub periods: Option<(i32, i32)>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let curvature = PcPriorSpec { u: 1.0, p: 0.01 };
        let half = PcPriorSpec {
            u: 0.5,
            p: 2.0 / 3.0,
        };
        Self {
            variant: ApcVariant::Apc,
            fixed_effect_variance: 1000.0,
            pc_age: curvature,
            pc_period: curvature,
            pc_cohort: curvature,
            pc_spatial: curvature,
            pc_mixing: half,
            pc_interaction: half,
            overdispersion_mean: 0.0,
            overdispersion_precision: 0.4,
            age_values: None,
            slopes: None,
            horizon: 0,
            periods: None,
        }
    }
}

impl ModelConfig {
    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |reason: String| Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                reason,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad("expected `key = value`".into()))?;
            let (key, value) = (key.trim(), value.trim());
            let numbers = || -> Result<Vec<f64>> {
                value
                    .split(',')
                    .map(|v| {
                        v.trim()
                            .parse::<f64>()
                            .map_err(|_| bad(format!("malformed number in {value:?}")))
                    })
                    .collect()
            };
            let pc = || -> Result<PcPriorSpec> {
                match numbers()?.as_slice() {
                    [u, p] => PcPriorSpec::new(*u, *p).map_err(|e| bad(e.to_string())),
                    _ => Err(bad(format!("{key} expects `U, p`"))),
                }
            };
            match key {
                "variant" => cfg.variant = value.parse().map_err(|e: Error| bad(e.to_string()))?,
                "fixed_effect_variance" => {
                    cfg.fixed_effect_variance = value
                        .parse()
                        .map_err(|_| bad("malformed variance".into()))?;
                    if !(cfg.fixed_effect_variance > 0.0) {
                        return Err(bad("fixed_effect_variance must be positive".into()));
                    }
                }
                "pc.age" => cfg.pc_age = pc()?,
                "pc.period" => cfg.pc_period = pc()?,
                "pc.cohort" => cfg.pc_cohort = pc()?,
                "pc.spatial" => cfg.pc_spatial = pc()?,
                "pc.mixing" => cfg.pc_mixing = pc()?,
                "pc.interaction" => cfg.pc_interaction = pc()?,
                "overdispersion.mean" => {
                    cfg.overdispersion_mean =
                        value.parse().map_err(|_| bad("malformed mean".into()))?
                }
                "overdispersion.precision" => {
                    cfg.overdispersion_precision = value
                        .parse()
                        .map_err(|_| bad("malformed precision".into()))?;
                    if !(cfg.overdispersion_precision > 0.0) {
                        return Err(bad("overdispersion.precision must be positive".into()));
                    }
                }
                "age.values" => cfg.age_values = Some(numbers()?),
                "slopes" => {
                    cfg.slopes = Some(value.parse().map_err(|e: Error| bad(e.to_string()))?)
                }
                "horizon" => {
                    cfg.horizon = value.parse().map_err(|_| bad("malformed horizon".into()))?
                }
                "periods" => match numbers()?.as_slice() {
                    [a, b] if a <= b => cfg.periods = Some((*a as i32, *b as i32)),
                    _ => return Err(bad("periods expects `first, last`".into())),
                },
                _ => return Err(bad(format!("unknown key {key:?}"))),
            }
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_text(&self) -> String {
        let pc = |s: &PcPriorSpec| format!("{}, {}", s.u, s.p);
        let mut lines = vec![
            format!("variant = {}", self.variant),
            format!("fixed_effect_variance = {}", self.fixed_effect_variance),
            format!("pc.age = {}", pc(&self.pc_age)),
            format!("pc.period = {}", pc(&self.pc_period)),
            format!("pc.cohort = {}", pc(&self.pc_cohort)),
            format!("pc.spatial = {}", pc(&self.pc_spatial)),
            format!("pc.mixing = {}", pc(&self.pc_mixing)),
            format!("pc.interaction = {}", pc(&self.pc_interaction)),
            format!("overdispersion.mean = {}", self.overdispersion_mean),
            format!(
                "overdispersion.precision = {}",
                self.overdispersion_precision
            ),
            format!("horizon = {}", self.horizon),
        ];
        if let Some(v) = &self.age_values {
            lines.push(format!(
                "age.values = {}",
                v.iter()
                    .map(|x| x.to_string())
                    .collect::<Vec<_>>()
                    .join(", ")
            ));
        }
        if let Some(s) = self.slopes {
            lines.push(format!(
                "slopes = {}",
                if s == SlopePair::AgePeriod {
                    "age-period"
                } else {
                    "age-cohort"
                }
            ));
        }
        if let Some((a, b)) = self.periods {
            lines.push(format!("periods = {a}, {b}"));
        }
        lines.join("\n") + "\n"
    }
}

/// Key of a design row: the covariates that determine a linear predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RowKey {
    pub age_band: usize,
    pub period: i32,
    pub cohort: i32,
    pub region: usize,
    pub urban: bool,
}

/// Indices of the hyperparameters in the internal vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HyperIndex {
    pub overdispersion: usize,
    pub tau_age: usize,
    pub tau_period: Option<usize>,
    pub tau_cohort: Option<usize>,
    pub tau_spatial: usize,
    pub phi: usize,
    pub tau_interaction: usize,
}

/// Offsets of the latent blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatentLayout {
    pub fixed: usize,
    pub age: usize,
    pub period: Option<usize>,
    pub cohort: Option<usize>,
    /// `S` occupies `spatial..spatial+R`, `u*` the next `R` entries.
    pub spatial: usize,
    pub interaction: usize,
    pub dim: usize,
}

/// The assembled APC model with its data.
#[derive(Debug, Clone)]
pub struct LatentModel {
    pub config: ModelConfig,
    pub schema: AgeBandSchema,
    pub layout: ApcLayout,
    pub graph: AdjacencyGraph,
    pub latent: LatentLayout,
    pub hyper: HyperIndex,
    pub row_keys: Vec<RowKey>,
    pub lgm: LatentGaussianModel,
}

pub fn assemble_model(
    cells: &[CountCell],
    graph: &AdjacencyGraph,
    schema: &AgeBandSchema,
    config: &ModelConfig,
) -> Result<LatentModel> {
    let cells: Vec<&CountCell> = cells
        .iter()
        .filter(|c| {
            config
                .periods
                .is_none_or(|(a, b)| c.period >= a && c.period <= b)
        })
        .collect();
    if cells.is_empty() {
        return Err(Error::Assembly("no data cells".into()));
    }
    let mut regions = Vec::with_capacity(cells.len());
    for c in &cells {
        let r = graph.index_of(&c.region_id).ok_or_else(|| {
            Error::Assembly(format!(
                "region {:?} is not in the adjacency graph",
                c.region_id
            ))
        })?;
        regions.push(r);
    }
    let owned: Vec<CountCell> = cells.iter().map(|c| (*c).clone()).collect();
    let options = LayoutOptions {
        slopes: config.slopes,
        age_values: config.age_values.clone(),
        horizon: config.horizon,
    };
    let data_periods = {
        let lo = owned.iter().map(|c| c.period).min().unwrap();
        let hi = owned.iter().map(|c| c.period).max().unwrap();
        (lo, hi)
    };
    if data_periods.1 - data_periods.0 + 1 < 3 {
        return Err(Error::Assembly("data must cover at least 3 periods".into()));
    }
    let layout = build_apc_layout(&owned, config.variant, schema, &options)?;
    let n_regions = graph.len();
    let n_periods = layout.period.len();

    let mut b = ModelBuilder::new(Likelihood::BetaBinomial { overdispersion: 0 });
    let od = b.hyper(HyperParameter {
        name: "overdispersion".into(),
        prior: HyperPrior::Normal {
            mean: config.overdispersion_mean,
            precision: config.overdispersion_precision,
        },
        lower: -25.0,
        upper: 5.0,
        initial: -4.0,
    });
    debug_assert_eq!(od, 0);
    let tau_param = |name: &str, spec: PcPriorSpec| HyperParameter {
        name: name.into(),
        prior: HyperPrior::PcPrecision(pc_prior_precision(spec)),
        lower: -15.0,
        upper: 20.0,
        initial: 2.0,
    };
    let tau_age = b.hyper(tau_param("tau_age", config.pc_age));
    let tau_period = layout
        .has_curvature(AxisKind::Period)
        .then(|| b.hyper(tau_param("tau_period", config.pc_period)));
    let tau_cohort = layout
        .has_curvature(AxisKind::Cohort)
        .then(|| b.hyper(tau_param("tau_cohort", config.pc_cohort)));
    let tau_spatial = b.hyper(tau_param("tau_spatial", config.pc_spatial));

    let icar = icar_precision(graph);
    let scaled = scale_icar(&icar)?;
    let mixing = pc_prior_mixing(config.pc_mixing, &scaled.positive_eigenvalues())?;
    let phi = b.hyper(HyperParameter {
        name: "phi".into(),
        prior: HyperPrior::PcMixing(Arc::new(mixing)),
        lower: -12.0,
        upper: 12.0,
        initial: 0.0,
    });
    let tau_interaction = b.hyper(tau_param("tau_interaction", config.pc_interaction));

    let fixed = b.block(LatentBlock {
        name: "fixed".into(),
        size: 4,
        prior: BlockPrior::Fixed {
            precision: 1.0 / config.fixed_effect_variance,
        },
        constraints: vec![],
        regularizer: vec![],
    });
    let curvature_block = |b: &mut ModelBuilder, kind: AxisKind, tau: usize| -> Result<usize> {
        let axis = layout.axis(kind);
        let q = rw2_precision(axis)?;
        let cons = curvature_constraints(axis);
        Ok(b.block(LatentBlock {
            name: kind.to_string(),
            size: axis.len(),
            prior: BlockPrior::Scaled {
                log_pdet: q.log_pdet(),
                structure: q.matrix,
                tau,
            },
            regularizer: cons.iter().map(|r| normalized(r)).collect(),
            constraints: cons,
        }))
    };
    let age = curvature_block(&mut b, AxisKind::Age, tau_age)?;
    let period = match tau_period {
        Some(t) => Some(curvature_block(&mut b, AxisKind::Period, t)?),
        None => None,
    };
    let cohort = match tau_cohort {
        Some(t) => Some(curvature_block(&mut b, AxisKind::Cohort, t)?),
        None => None,
    };

    let spatial_cons: Vec<Vec<f64>> = scaled
        .constraints
        .iter()
        .map(|row| {
            let mut full = vec![0.0; 2 * n_regions];
            full[n_regions..].copy_from_slice(row);
            full
        })
        .collect();
    let spatial = b.block(LatentBlock {
        name: "spatial".into(),
        size: 2 * n_regions,
        prior: BlockPrior::Bym2 {
            log_pdet: scaled.log_pdet(),
            scaled: scaled.matrix.clone(),
            tau: tau_spatial,
            phi,
        },
        regularizer: spatial_cons.iter().map(|r| normalized(r)).collect(),
        constraints: spatial_cons,
    });

    let rw2_period = rw2_precision(&layout.period)?;
    let block = kronecker_precision(&rw2_period, &icar, DEFAULT_MAX_DIM)?;
    let null = null_space_constraints(&block, RANK_TOLERANCE)?;
    let mut reg = Vec::new();
    for members in graph.component_members() {
        for p in 0..n_periods {
            let mut v = vec![0.0; block.dim()];
            for &r in &members {
                v[block.index(p, r)] = 1.0;
            }
            reg.push(normalized(&v));
        }
    }
    let interaction = b.block(LatentBlock {
        name: "interaction".into(),
        size: block.dim(),
        prior: BlockPrior::Scaled {
            log_pdet: block.log_pdet(),
            structure: block.precision.clone(),
            tau: tau_interaction,
        },
        constraints: null,
        regularizer: reg,
    });
    let latent = LatentLayout {
        fixed,
        age,
        period,
        cohort,
        spatial,
        interaction,
        dim: interaction + block.dim(),
    };
    let hyper = HyperIndex {
        overdispersion: od,
        tau_age,
        tau_period,
        tau_cohort,
        tau_spatial,
        phi,
        tau_interaction,
    };

    let mut keys: BTreeMap<RowKey, Vec<(u64, u64)>> = BTreeMap::new();
    for (c, &r) in cells.iter().zip(&regions) {
        if c.deaths > c.exposure {
            return Err(Error::Assembly(format!(
                "cell with {} deaths and exposure {}",
                c.deaths, c.exposure
            )));
        }
        let key = RowKey {
            age_band: c.age_band,
            period: c.period,
            cohort: c.cohort,
            region: r,
            urban: c.is_urban,
        };
        keys.entry(key).or_default().push((c.deaths, c.exposure));
    }
    let mut row_keys = Vec::with_capacity(keys.len());
    for (key, obs) in keys {
        let idx = b.row(row_entries(&layout, &latent, n_regions, &key)?);
        row_keys.push(key);
        for (y, n) in obs {
            b.observe(idx, y as f64, n as f64);
        }
    }
    Ok(LatentModel {
        config: config.clone(),
        schema: schema.clone(),
        layout,
        graph: graph.clone(),
        latent,
        hyper,
        row_keys,
        lgm: b.build()?,
    })
}

fn row_entries(
    layout: &ApcLayout,
    l: &LatentLayout,
    n_regions: usize,
    key: &RowKey,
) -> Result<Vec<(usize, f64)>> {
    let k = layout.coords(key.age_band, key.period, key.cohort)?;
    if key.region >= n_regions {
        return Err(Error::Assembly(format!(
            "region index {} out of range",
            key.region
        )));
    }
    let mut row = vec![
        (l.fixed, 1.0),
        (l.fixed + 2, k.t1),
        (l.fixed + 3, k.t2),
        (l.age + k.age, 1.0),
    ];
    if key.urban {
        row.push((l.fixed + 1, 1.0));
    }
    if let Some(p) = l.period {
        row.push((p + k.period, 1.0));
    }
    if let Some(c) = l.cohort {
        row.push((c + k.cohort, 1.0));
    }
    row.push((l.spatial + key.region, 1.0));
    row.push((l.interaction + k.period * n_regions + key.region, 1.0));
    Ok(row)
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

impl LatentModel {
    /// Latent coefficients of the linear predictor for a row key.
    pub fn predictor_row(&self, key: &RowKey) -> Result<Vec<(usize, f64)>> {
        row_entries(&self.layout, &self.latent, self.graph.len(), key)
    }

    pub fn hyper_params(&self, theta: &[f64]) -> HyperParams {
        let h = &self.hyper;
        HyperParams {
            overdispersion: expit(theta[h.overdispersion]),
            tau_age: theta[h.tau_age].exp(),
            tau_period: h.tau_period.map(|i| theta[i].exp()),
            tau_cohort: h.tau_cohort.map(|i| theta[i].exp()),
            tau_spatial: theta[h.tau_spatial].exp(),
            phi: expit(theta[h.phi]),
            tau_interaction: theta[h.tau_interaction].exp(),
        }
    }

    /// Row indices per (region index, period) for observation filtering.
    pub fn rows_by_region_period(&self) -> HashMap<(usize, i32), Vec<usize>> {
        let mut out: HashMap<(usize, i32), Vec<usize>> = HashMap::new();
        for (i, k) in self.row_keys.iter().enumerate() {
            out.entry((k.region, k.period)).or_default().push(i);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::special::{ln_gamma, logit};
    use crate::temporal::period_cells;

    fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        // Composite Simpson rule.
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            s += f(a + h * i as f64) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }

    #[test]
    fn betabinomial_binomial_limit() {
        let (ll, _, _) = betabinomial_loglik(3, 20, -2.0, 1e-8).unwrap();
        let p = expit(-2.0);
        let binom = ln_choose(20, 3) + 3.0 * p.ln() + 17.0 * (1.0 - p).ln();
        assert!((ll - binom).abs() < 1e-4);
    }

    #[test]
    fn betabinomial_matches_pmf() {
        let (pi, d) = (0.5, 0.2);
        let s = (1.0 - d) / d;
        let (a, b) = (pi * s, (1.0 - pi) * s);
        let ln_beta = |x: f64, y: f64| ln_gamma(x) + ln_gamma(y) - ln_gamma(x + y);
        let pmf = |y: u64, n: u64| {
            (ln_choose(n, y) + ln_beta(y as f64 + a, (n - y) as f64 + b) - ln_beta(a, b)).exp()
        };
        let (ll, _, _) = betabinomial_loglik(1, 2, logit(pi), d).unwrap();
        assert!((ll.exp() - pmf(1, 2)).abs() < 1e-12);
        let total: f64 = (0..=2)
            .map(|y| betabinomial_loglik(y, 2, logit(pi), d).unwrap().0.exp())
            .sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(betabinomial_loglik(1, 2, 0.0, 1.0).is_err());
        assert!(betabinomial_loglik(3, 2, 0.0, 0.5).is_err());
    }

    #[test]
    fn betabinomial_derivatives() {
        for &(y, n, eta, d) in &[
            (3u64, 20u64, -2.0, 0.1),
            (0, 150, -6.0, 1e-4),
            (40, 300, -1.2, 0.02),
            (1, 1, 0.3, 0.5),
        ] {
            let (_, g, h) = betabinomial_loglik(y, n, eta, d).unwrap();
            let e = 1e-5;
            let f = |x: f64| betabinomial_loglik(y, n, x, d).unwrap();
            let g_fd = (f(eta + e).0 - f(eta - e).0) / (2.0 * e);
            let h_fd = (f(eta + e).1 - f(eta - e).1) / (2.0 * e);
            assert!(
                (g - g_fd).abs() <= 1e-6 * g.abs().max(1.0),
                "gradient {g} vs {g_fd}"
            );
            assert!(
                (h - h_fd).abs() <= 1e-6 * h.abs().max(1.0),
                "curvature {h} vs {h_fd}"
            );
            assert!(h < 0.0);
        }
    }

    #[test]
    fn pc_precision_calibration() {
        let prior = pc_prior_precision(PcPriorSpec::new(1.0, 0.01).unwrap());
        assert!((prior.lambda - 4.60517).abs() < 1e-5);
        let half = pc_prior_precision(PcPriorSpec::new(0.5, 2.0 / 3.0).unwrap());
        assert!((half.lambda - 0.81093).abs() < 1e-5);
        // P(sigma > 1) = P(tau < 1), integrated over log tau.
        let dens = |t: f64| (prior.log_density(t.exp()) + t).exp();
        let tail = integrate(dens, -60.0, 0.0, 20_000);
        assert!((tail - 0.01).abs() < 1e-6, "tail {tail}");
        let total = integrate(dens, -60.0, 60.0, 40_000);
        assert!((total - 1.0).abs() < 1e-6, "total {total}");
    }

    fn lattice_eigen() -> Vec<f64> {
        let mut edges = Vec::new();
        for k in 0..47usize {
            if k % 7 != 6 && k + 1 < 47 {
                edges.push((k, k + 1));
            }
            if k + 7 < 47 {
                edges.push((k, k + 7));
            }
        }
        let g =
            AdjacencyGraph::from_edges((0..47).map(|i| i.to_string()).collect(), &edges).unwrap();
        scale_icar(&icar_precision(&g))
            .unwrap()
            .positive_eigenvalues()
    }

    #[test]
    fn pc_mixing_calibration() {
        let prior =
            pc_prior_mixing(PcPriorSpec::new(0.5, 2.0 / 3.0).unwrap(), &lattice_eigen()).unwrap();
        let dens = |t: f64| prior.log_density_logit(t).exp();
        let below = integrate(dens, -12.0, 0.0, 24_000);
        let total = integrate(dens, -12.0, 12.0, 48_000);
        assert!((below - 2.0 / 3.0).abs() < 1e-3, "P(phi < 1/2) = {below}");
        assert!((total - 1.0).abs() < 1e-3, "total {total}");
        assert!(prior.log_density(1e-4).is_finite());
    }

    #[test]
    fn config_roundtrip() {
        let cfg = ModelConfig {
            variant: ApcVariant::Ac,
            horizon: 5,
            age_values: Some(vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]),
            slopes: Some(SlopePair::AgeCohort),
            periods: Some((2006, 2013)),
            ..ModelConfig::default()
        };
        let back = ModelConfig::parse(&cfg.to_text(), Path::new("mem")).unwrap();
        assert_eq!(back, cfg);
        assert!(ModelConfig::parse("bogus = 1\n", Path::new("mem")).is_err());
        assert!(ModelConfig::parse("pc.age = 1, 2\n", Path::new("mem")).is_err());
    }

    fn grid_graph(n: usize) -> AdjacencyGraph {
        let w = 7;
        let mut edges = Vec::new();
        for k in 0..n {
            if k % w != w - 1 && k + 1 < n {
                edges.push((k, k + 1));
            }
            if k + w < n {
                edges.push((k, k + w));
            }
        }
        AdjacencyGraph::from_edges((0..n).map(|i| format!("r{i}")).collect(), &edges).unwrap()
    }

    fn full_cells(regions: usize) -> Vec<CountCell> {
        let schema = AgeBandSchema::default();
        let mut out = Vec::new();
        for r in 0..regions {
            for p in 2006..=2013 {
                for c in period_cells(p, &schema) {
                    out.push(CountCell {
                        age_band: c.age_band,
                        period: p,
                        cohort: c.cohort,
                        cluster_id: format!("k{r}"),
                        region_id: format!("r{r}"),
                        is_urban: r % 2 == 0,
                        deaths: 0,
                        exposure: c.months as u64,
                    });
                }
            }
        }
        out
    }

    #[test]
    fn kenya_shape_dimensions() {
        let g = grid_graph(47);
        let cells = full_cells(47);
        let schema = AgeBandSchema::default();
        let apc = assemble_model(&cells, &g, &schema, &ModelConfig::default()).unwrap();
        assert_eq!(apc.lgm.dim(), 4 + 6 + 8 + 13 + 2 * 47 + 8 * 47);
        let ap = assemble_model(
            &cells,
            &g,
            &schema,
            &ModelConfig {
                variant: ApcVariant::Ap,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(ap.lgm.dim(), apc.lgm.dim() - 13);
        let again = assemble_model(&cells, &g, &schema, &ModelConfig::default()).unwrap();
        assert_eq!(again.row_keys, apc.row_keys);
        assert_eq!(again.lgm.rows(), apc.lgm.rows());
    }

    #[test]
    fn unknown_region_rejected() {
        let g = grid_graph(4);
        let mut cells = full_cells(4);
        cells[0].region_id = "nowhere".into();
        let err = assemble_model(
            &cells,
            &g,
            &AgeBandSchema::default(),
            &ModelConfig::default(),
        );
        assert!(matches!(err, Err(Error::Assembly(_))));
    }
}
