//! Empirical-Bayes Laplace engine for latent Gaussian models with intrinsic
//! blocks and linear constraints: constrained Newton mode search, Laplace
//! marginal likelihood of the hyperparameters, BFGS ascent, constrained
//! posterior sampling and a random-walk Metropolis reference.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{
    sym_eigen, CholeskyFactor, DenseCholesky, Ordering, SymSparse, SymbolicCholesky,
};
use crate::model::{betabinomial_loglik, PcMixingPrior, PcPrecisionPrior};
use crate::special::{expit, ln_choose};

const NEWTON_MAX_ITER: usize = 50;
const NEWTON_GRAD_TOL: f64 = 1e-6;
const KAPPA: f64 = 1.0;

/// Observation model linking a design row's linear predictor to data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Likelihood {
    /// `y` deaths out of `n` trials with overdispersion `d = expit(theta[idx])`.
    BetaBinomial {
        overdispersion: usize,
    },
    Binomial,
    /// `y` observed with known precision `n`.
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub row: usize,
    pub y: f64,
    pub n: f64,
}

impl Likelihood {
    /// Log-likelihood and its first two derivatives in the linear predictor.
    pub fn eval(&self, obs: &Observation, eta: f64, theta: &[f64]) -> (f64, f64, f64) {
        match *self {
            Likelihood::BetaBinomial { overdispersion } => {
                let d = expit(theta[overdispersion]);
                betabinomial_loglik(obs.y as u64, obs.n as u64, eta, d).expect("validated counts")
            }
            Likelihood::Binomial => {
                let (y, n) = (obs.y, obs.n);
                let p = expit(eta);
                let log_p = -crate::special::log1p_exp(-eta);
                let log_q = -crate::special::log1p_exp(eta);
                let ll = ln_choose(n as u64, y as u64) + y * log_p + (n - y) * log_q;
                (ll, y - n * p, -n * p * (1.0 - p))
            }
            Likelihood::Gaussian => {
                let r = obs.y - eta;
                let ll = 0.5 * (obs.n / (2.0 * std::f64::consts::PI)).ln() - 0.5 * obs.n * r * r;
                (ll, obs.n * r, -obs.n)
            }
        }
    }

    fn validate(&self, obs: &Observation) -> Result<()> {
        match self {
            Likelihood::BetaBinomial { .. } | Likelihood::Binomial => {
                if obs.y < 0.0 || obs.n < obs.y || obs.y.fract() != 0.0 || obs.n.fract() != 0.0 {
                    return Err(Error::InvalidParameter(format!(
                        "invalid counts y={} n={}",
                        obs.y, obs.n
                    )));
                }
            }
            Likelihood::Gaussian => {
                if !(obs.n > 0.0) || !obs.y.is_finite() {
                    return Err(Error::InvalidParameter(format!(
                        "invalid Gaussian observation {obs:?}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Prior of one hyperparameter on its internal (unconstrained) scale.
#[derive(Debug, Clone)]
pub enum HyperPrior {
    /// PC prior on a precision; internal scale `log tau`.
    PcPrecision(PcPrecisionPrior),
    /// PC prior on the BYM2 mixing weight; internal scale `logit phi`.
    PcMixing(Arc<PcMixingPrior>),
    /// Normal prior directly on the internal value.
    Normal { mean: f64, precision: f64 },
}

impl HyperPrior {
    pub fn log_density_internal(&self, theta: f64) -> f64 {
        match self {
            HyperPrior::PcPrecision(p) => p.log_density(theta.exp()) + theta,
            HyperPrior::PcMixing(p) => p.log_density_logit(theta),
            HyperPrior::Normal { mean, precision } => {
                0.5 * (precision / (2.0 * std::f64::consts::PI)).ln()
                    - 0.5 * precision * (theta - mean).powi(2)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct HyperParameter {
    pub name: String,
    pub prior: HyperPrior,
    pub lower: f64,
    pub upper: f64,
    pub initial: f64,
}

/// Prior precision of one latent block as a function of the hyperparameters.
#[derive(Debug, Clone)]
pub enum BlockPrior {
    /// Independent entries with a fixed precision.
    Fixed { precision: f64 },
    /// `tau * R` with `tau = exp(theta[tau])`; `log_pdet` is the log
    /// pseudo-determinant of `R`.
    Scaled {
        structure: SymSparse,
        log_pdet: f64,
        tau: usize,
    },
    /// Augmented BYM2 pair `(S, u*)` over the scaled structure `R*`.
    Bym2 {
        scaled: SymSparse,
        log_pdet: f64,
        tau: usize,
        phi: usize,
    },
}

#[derive(Debug, Clone)]
pub struct LatentBlock {
    pub name: String,
    pub size: usize,
    pub prior: BlockPrior,
    /// Block-local constraint rows (`A x = 0`); they must span the directions
    /// in which the block prior is improper.
    pub constraints: Vec<Vec<f64>>,
    /// Block-local vectors in the span of `constraints` that make the prior
    /// plus regulariser positive definite.
    pub regularizer: Vec<Vec<f64>>,
}

impl LatentBlock {
    fn pattern(&self) -> Vec<(usize, usize)> {
        match &self.prior {
            BlockPrior::Fixed { .. } => (0..self.size).map(|i| (i, i)).collect(),
            BlockPrior::Scaled { structure, .. } => structure
                .entries()
                .iter()
                .map(|&(i, j, _)| (i, j))
                .collect(),
            BlockPrior::Bym2 { scaled, .. } => {
                let r = scaled.n();
                let mut p: Vec<(usize, usize)> = (0..r).map(|i| (i, i)).collect();
                p.extend((0..r).map(|i| (i, r + i)));
                p.extend((0..r).map(|i| (r + i, r + i)));
                p.extend(
                    scaled
                        .entries()
                        .iter()
                        .filter(|e| e.0 != e.1)
                        .map(|&(i, j, _)| (r + i, r + j)),
                );
                p
            }
        }
    }

    fn values(&self, theta: &[f64]) -> Vec<f64> {
        match &self.prior {
            BlockPrior::Fixed { precision } => vec![*precision; self.size],
            BlockPrior::Scaled { structure, tau, .. } => {
                let t = theta[*tau].exp();
                structure.entries().iter().map(|e| t * e.2).collect()
            }
            BlockPrior::Bym2 {
                scaled, tau, phi, ..
            } => {
                let r = scaled.n();
                let t = theta[*tau].exp();
                let f = expit(theta[*phi]);
                let a = t / (1.0 - f);
                let c = -(f * t).sqrt() / (1.0 - f);
                let d = f / (1.0 - f);
                let diag = scaled.diagonal();
                let mut v = vec![a; r];
                v.extend(std::iter::repeat_n(c, r));
                v.extend(diag.iter().map(|x| x + d));
                v.extend(scaled.entries().iter().filter(|e| e.0 != e.1).map(|e| e.2));
                v
            }
        }
    }

    fn rank(&self) -> usize {
        self.size - self.constraints.len()
    }

    fn log_det(&self, theta: &[f64]) -> f64 {
        match &self.prior {
            BlockPrior::Fixed { precision } => self.size as f64 * precision.ln(),
            BlockPrior::Scaled { log_pdet, tau, .. } => self.rank() as f64 * theta[*tau] + log_pdet,
            BlockPrior::Bym2 {
                scaled,
                log_pdet,
                tau,
                phi,
            } => {
                let f = expit(theta[*phi]);
                scaled.n() as f64 * (theta[*tau] - (1.0 - f).ln()) + log_pdet
            }
        }
    }
}

/// Incrementally collects blocks, design rows and observations.
#[derive(Debug, Clone)]
pub struct ModelBuilder {
    likelihood: Likelihood,
    hyper: Vec<HyperParameter>,
    blocks: Vec<LatentBlock>,
    offsets: Vec<usize>,
    dim: usize,
    rows: Vec<Vec<(usize, f64)>>,
    observations: Vec<Observation>,
    ordering: Ordering,
}

impl ModelBuilder {
    pub fn new(likelihood: Likelihood) -> Self {
        Self {
            likelihood,
            hyper: Vec::new(),
            blocks: Vec::new(),
            offsets: Vec::new(),
            dim: 0,
            rows: Vec::new(),
            observations: Vec::new(),
            ordering: Ordering::MinimumDegree,
        }
    }

    pub fn ordering(mut self, ordering: Ordering) -> Self {
        self.ordering = ordering;
        self
    }

    pub fn hyper(&mut self, param: HyperParameter) -> usize {
        self.hyper.push(param);
        self.hyper.len() - 1
    }

    /// Adds a block and returns its offset in the latent vector.
    pub fn block(&mut self, block: LatentBlock) -> usize {
        let offset = self.dim;
        self.dim += block.size;
        self.offsets.push(offset);
        self.blocks.push(block);
        offset
    }

    /// Adds a design row (latent index, coefficient) and returns its index.
    pub fn row(&mut self, mut entries: Vec<(usize, f64)>) -> usize {
        entries.sort_by_key(|e| e.0);
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(entries.len());
        for (j, v) in entries {
            match merged.last_mut() {
                Some(last) if last.0 == j => last.1 += v,
                _ => merged.push((j, v)),
            }
        }
        self.rows.push(merged);
        self.rows.len() - 1
    }

    pub fn observe(&mut self, row: usize, y: f64, n: f64) {
        self.observations.push(Observation { row, y, n });
    }

    pub fn build(self) -> Result<LatentGaussianModel> {
        let n = self.dim;
        if n == 0 {
            return Err(Error::Assembly("model has no latent variables".into()));
        }
        for row in &self.rows {
            if row.iter().any(|&(j, _)| j >= n) {
                return Err(Error::Assembly(
                    "design row references a latent index out of range".into(),
                ));
            }
        }
        for o in &self.observations {
            if o.row >= self.rows.len() {
                return Err(Error::Assembly(
                    "observation references an unknown design row".into(),
                ));
            }
            self.likelihood.validate(o)?;
        }
        for h in &self.hyper {
            if !(h.lower < h.upper) || h.initial < h.lower || h.initial > h.upper {
                return Err(Error::Assembly(format!(
                    "hyperparameter {} has an invalid range",
                    h.name
                )));
            }
        }

        // Constraint rows, orthonormalised block by block.
        let mut a_rows: Vec<Vec<f64>> = Vec::new();
        let mut s_cols: Vec<Vec<(usize, f64)>> = Vec::new();
        for (b, block) in self.blocks.iter().enumerate() {
            let off = self.offsets[b];
            for row in orthonormalize(&block.constraints, &block.name)? {
                let mut full = vec![0.0; n];
                full[off..off + block.size].copy_from_slice(&row);
                a_rows.push(full);
            }
            for v in &block.regularizer {
                if v.len() != block.size {
                    return Err(Error::Assembly(format!(
                        "regulariser length mismatch in block {}",
                        block.name
                    )));
                }
                s_cols.push(
                    v.iter()
                        .enumerate()
                        .filter(|e| *e.1 != 0.0)
                        .map(|(i, &x)| (off + i, x))
                        .collect(),
                );
            }
        }
        let k = a_rows.len();
        let a = DMatrix::from_fn(k, n, |i, j| a_rows[i][j]);

        let mut pattern: Vec<(usize, usize)> = Vec::new();
        let block_patterns: Vec<Vec<(usize, usize)>> = self
            .blocks
            .iter()
            .zip(&self.offsets)
            .map(|(b, &off)| {
                b.pattern()
                    .into_iter()
                    .map(|(i, j)| (off + i, off + j))
                    .collect()
            })
            .collect();
        for bp in &block_patterns {
            pattern.extend(bp);
        }
        for row in &self.rows {
            for (x, &(i, _)) in row.iter().enumerate() {
                for &(j, _) in &row[x..] {
                    pattern.push((i, j));
                }
            }
        }
        for col in &s_cols {
            for (x, &(i, _)) in col.iter().enumerate() {
                for &(j, _) in &col[x..] {
                    pattern.push((i, j));
                }
            }
        }
        let symbolic = Arc::new(SymbolicCholesky::analyze(n, &pattern, self.ordering));
        let slot = |i: usize, j: usize| symbolic.slot(i, j).expect("pattern entry has a slot");
        let block_slots: Vec<Vec<usize>> = block_patterns
            .iter()
            .map(|bp| bp.iter().map(|&(i, j)| slot(i, j)).collect())
            .collect();
        let row_pairs: Vec<Vec<(usize, f64)>> = self
            .rows
            .iter()
            .map(|row| {
                let mut pairs = Vec::new();
                for (x, &(i, vi)) in row.iter().enumerate() {
                    for &(j, vj) in &row[x..] {
                        pairs.push((slot(i, j), vi * vj));
                    }
                }
                pairs
            })
            .collect();
        let mut base_values = vec![0.0; symbolic.value_len()];
        for col in &s_cols {
            for (x, &(i, vi)) in col.iter().enumerate() {
                for &(j, vj) in &col[x..] {
                    base_values[slot(i, j)] += KAPPA * vi * vj;
                }
            }
        }

        let patterns: Vec<Vec<(usize, usize)>> = self.blocks.iter().map(|b| b.pattern()).collect();
        let core = ModelCore {
            dim: n,
            likelihood: self.likelihood,
            hyper: self.hyper,
            blocks: self.blocks,
            offsets: self.offsets,
            rows: self.rows,
            a,
            symbolic,
            patterns,
            block_slots,
            row_pairs,
            base_values,
        };
        Ok(LatentGaussianModel::from_parts(
            Arc::new(core),
            self.observations,
        ))
    }
}

fn orthonormalize(rows: &[Vec<f64>], name: &str) -> Result<Vec<Vec<f64>>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(rows.len());
    for row in rows {
        let mut v = row.clone();
        let scale = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if scale == 0.0 {
            return Err(Error::Assembly(format!(
                "zero constraint row in block {name}"
            )));
        }
        for _ in 0..2 {
            for q in &out {
                let dot: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-10 * scale {
            return Err(Error::Assembly(format!(
                "linearly dependent constraints in block {name}"
            )));
        }
        v.iter_mut().for_each(|x| *x /= norm);
        out.push(v);
    }
    Ok(out)
}

#[derive(Debug)]
struct ModelCore {
    dim: usize,
    likelihood: Likelihood,
    hyper: Vec<HyperParameter>,
    blocks: Vec<LatentBlock>,
    offsets: Vec<usize>,
    rows: Vec<Vec<(usize, f64)>>,
    a: DMatrix<f64>,
    symbolic: Arc<SymbolicCholesky>,
    patterns: Vec<Vec<(usize, usize)>>,
    block_slots: Vec<Vec<usize>>,
    row_pairs: Vec<Vec<(usize, f64)>>,
    base_values: Vec<f64>,
}

/// A latent Gaussian model with its data. Cloning is cheap; the structure
/// (including the symbolic factorization) is shared between clones, so
/// subsets of the observations can be refitted without re-analysis.
#[derive(Debug, Clone)]
pub struct LatentGaussianModel {
    core: Arc<ModelCore>,
    observations: Arc<Vec<Observation>>,
}

impl LatentGaussianModel {
    fn from_parts(core: Arc<ModelCore>, mut observations: Vec<Observation>) -> Self {
        observations.sort_by(|a, b| {
            (a.row, a.y, a.n)
                .partial_cmp(&(b.row, b.y, b.n))
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        Self {
            core,
            observations: Arc::new(observations),
        }
    }

    /// Same structure, observations restricted to those kept by `keep`.
    pub fn filter_observations(&self, keep: impl Fn(&Observation) -> bool) -> Self {
        let obs = self
            .observations
            .iter()
            .copied()
            .filter(|o| keep(o))
            .collect();
        Self::from_parts(self.core.clone(), obs)
    }

    pub fn dim(&self) -> usize {
        self.core.dim
    }

    pub fn n_constraints(&self) -> usize {
        self.core.a.nrows()
    }

    /// Orthonormal constraint matrix `A` (the constraints are `A x = 0`).
    pub fn constraint_matrix(&self) -> &DMatrix<f64> {
        &self.core.a
    }

    pub fn hyper(&self) -> &[HyperParameter] {
        &self.core.hyper
    }

    pub fn blocks(&self) -> &[LatentBlock] {
        &self.core.blocks
    }

    pub fn block_offset(&self, name: &str) -> Option<usize> {
        self.core
            .blocks
            .iter()
            .position(|b| b.name == name)
            .map(|i| self.core.offsets[i])
    }

    pub fn rows(&self) -> &[Vec<(usize, f64)>] {
        &self.core.rows
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn likelihood(&self) -> Likelihood {
        self.core.likelihood
    }

    pub fn symbolic(&self) -> &Arc<SymbolicCholesky> {
        &self.core.symbolic
    }

    pub fn initial_theta(&self) -> Vec<f64> {
        self.core.hyper.iter().map(|h| h.initial).collect()
    }

    pub fn in_domain(&self, theta: &[f64]) -> bool {
        theta.len() == self.core.hyper.len()
            && theta
                .iter()
                .zip(&self.core.hyper)
                .all(|(t, h)| t.is_finite() && *t >= h.lower && *t <= h.upper)
    }

    pub fn log_prior_hyper(&self, theta: &[f64]) -> f64 {
        theta
            .iter()
            .zip(&self.core.hyper)
            .map(|(t, h)| h.prior.log_density_internal(*t))
            .sum()
    }

    pub fn row_value(&self, row: usize, x: &[f64]) -> f64 {
        self.core.rows[row].iter().map(|&(j, v)| v * x[j]).sum()
    }

    pub fn linear_predictor(&self, x: &[f64]) -> Vec<f64> {
        (0..self.core.rows.len())
            .map(|r| self.row_value(r, x))
            .collect()
    }

    pub fn constraint_residual(&self, x: &[f64]) -> f64 {
        let v = &self.core.a * DVector::from_column_slice(x);
        v.amax()
    }

    fn prior_values(&self, theta: &[f64]) -> Vec<Vec<f64>> {
        self.core.blocks.iter().map(|b| b.values(theta)).collect()
    }

    /// `x' Q x` and half the sum of block log-determinants.
    fn prior_terms(&self, theta: &[f64], values: &[Vec<f64>], x: &[f64]) -> (f64, f64) {
        let logdet_half = self
            .core
            .blocks
            .iter()
            .map(|b| 0.5 * b.log_det(theta))
            .sum();
        (self.prior_quad(values, x), logdet_half)
    }

    fn prior_quad(&self, values: &[Vec<f64>], x: &[f64]) -> f64 {
        let mut quad = 0.0;
        for (b, pattern) in self.core.patterns.iter().enumerate() {
            let off = self.core.offsets[b];
            for (&(i, j), v) in pattern.iter().zip(&values[b]) {
                let t = v * x[off + i] * x[off + j];
                quad += if i == j { t } else { 2.0 * t };
            }
        }
        quad
    }

    fn prior_mul(&self, values: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for (b, pattern) in self.core.patterns.iter().enumerate() {
            let off = self.core.offsets[b];
            for (&(i, j), v) in pattern.iter().zip(&values[b]) {
                out[off + i] += v * x[off + j];
                if i != j {
                    out[off + j] += v * x[off + i];
                }
            }
        }
        out
    }

    /// Log-likelihood and per-row gradient/curvature at linear predictor `eta`.
    fn likelihood_terms(&self, eta: &[f64], theta: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
        let nrows = self.core.rows.len();
        let mut g = vec![0.0; nrows];
        let mut h = vec![0.0; nrows];
        let mut ll = 0.0;
        for o in self.observations.iter() {
            let (l, d1, d2) = self.core.likelihood.eval(o, eta[o.row], theta);
            ll += l;
            g[o.row] += d1;
            h[o.row] -= d2;
        }
        for v in &mut h {
            *v = v.max(0.0);
        }
        (ll, g, h)
    }

    pub fn log_likelihood(&self, x: &[f64], theta: &[f64]) -> f64 {
        let eta = self.linear_predictor(x);
        self.observations
            .iter()
            .map(|o| self.core.likelihood.eval(o, eta[o.row], theta).0)
            .sum()
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if !self.in_domain(theta) {
            return Err(Error::InvalidParameter(format!(
                "hyperparameters {theta:?} outside the admissible domain"
            )));
        }
        Ok(())
    }

    /// Newton iterations for the constrained posterior mode of the latent
    /// field at fixed hyperparameters.
    pub fn find_mode(&self, theta: &[f64], start: Option<&[f64]>) -> Result<GaussianApprox> {
        self.check_theta(theta)?;
        let n = self.dim();
        let values = self.prior_values(theta);
        let mut x = match start {
            Some(s) if s.len() == n => s.to_vec(),
            Some(_) => {
                return Err(Error::Dimension(
                    "starting point has the wrong length".into(),
                ))
            }
            None => vec![0.0; n],
        };
        let objective = |x: &[f64]| -> f64 {
            let eta = self.linear_predictor(x);
            let ll: f64 = self
                .observations
                .iter()
                .map(|o| self.core.likelihood.eval(o, eta[o.row], theta).0)
                .sum();
            ll - 0.5 * self.prior_quad(&values, x)
        };

        let mut last_f = f64::NEG_INFINITY;
        for iter in 0..NEWTON_MAX_ITER {
            let eta = self.linear_predictor(&x);
            let (ll, g, h) = self.likelihood_terms(&eta, theta);
            let f = ll - 0.5 * self.prior_quad(&values, &x);

            let mut vals = self.core.base_values.clone();
            for (b, slots) in self.core.block_slots.iter().enumerate() {
                for (&s, v) in slots.iter().zip(&values[b]) {
                    vals[s] += v;
                }
            }
            for (r, pairs) in self.core.row_pairs.iter().enumerate() {
                if h[r] > 0.0 {
                    for &(s, c) in pairs {
                        vals[s] += h[r] * c;
                    }
                }
            }
            let factor = self.core.symbolic.factor(&vals)?;

            let mut grad = self.prior_mul(&values, &x);
            grad.iter_mut().for_each(|v| *v = -*v);
            let mut b = vec![0.0; n];
            for (r, row) in self.core.rows.iter().enumerate() {
                let rhs = g[r] + h[r] * eta[r];
                for &(j, c) in row {
                    grad[j] += c * g[r];
                    b[j] += c * rhs;
                }
            }
            let grad_v = DVector::from_vec(grad);
            let pg = &grad_v - self.core.a.transpose() * (&self.core.a * &grad_v);
            let pg_norm = pg.amax();

            let (w, aw) = kriging_terms(&factor, &self.core.a)?;
            let stagnant = (f - last_f).abs() <= 1e-13 * (1.0 + f.abs());
            if pg_norm < NEWTON_GRAD_TOL || (stagnant && pg_norm < 1e-3) {
                return self.approx(theta, x, eta, ll, &values, factor, w, aw, iter);
            }

            let mut target = factor.solve(&b);
            if let Some(c) = &aw {
                let r = &self.core.a * DVector::from_column_slice(&target);
                let corr = &w * DVector::from_vec(c.solve(r.as_slice()));
                target
                    .iter_mut()
                    .zip(corr.iter())
                    .for_each(|(t, c)| *t -= c);
            }
            let step: Vec<f64> = target.iter().zip(&x).map(|(t, x)| t - x).collect();
            let mut t = 1.0;
            let mut accepted = false;
            while t > 1e-10 {
                let trial: Vec<f64> = x.iter().zip(&step).map(|(x, d)| x + t * d).collect();
                let ft = objective(&trial);
                if ft.is_finite() && ft >= f - 1e-12 * (1.0 + f.abs()) {
                    x = trial;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                if pg_norm < 1e-3 {
                    return self.approx(theta, x, eta, ll, &values, factor, w, aw, iter);
                }
                return Err(Error::NoConvergence {
                    iterations: iter + 1,
                    reason: format!("line search failed (projected gradient {pg_norm:.3e})"),
                });
            }
            last_f = f;
        }
        Err(Error::NoConvergence {
            iterations: NEWTON_MAX_ITER,
            reason: "Newton iteration limit".into(),
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn approx(
        &self,
        theta: &[f64],
        x: Vec<f64>,
        eta: Vec<f64>,
        ll: f64,
        values: &[Vec<f64>],
        factor: CholeskyFactor,
        w: DMatrix<f64>,
        aw: Option<DenseCholesky>,
        iterations: usize,
    ) -> Result<GaussianApprox> {
        let (quad, logdet_half) = self.prior_terms(theta, values, &x);
        let log_prior_latent = logdet_half - 0.5 * quad;
        let logdet_aw = aw.as_ref().map_or(0.0, |c| c.log_det());
        let log_marginal = ll + log_prior_latent - 0.5 * (factor.log_det() + logdet_aw);
        Ok(GaussianApprox {
            theta: theta.to_vec(),
            mode: x,
            eta,
            factor,
            w,
            aw,
            log_likelihood: ll,
            log_prior_latent,
            log_marginal,
            iterations,
        })
    }

    /// Laplace approximation of `log p(theta | y)` up to a constant.
    /// Returns `-inf` outside the hyperparameter domain.
    pub fn log_posterior_hyper(&self, theta: &[f64], start: Option<&[f64]>) -> Result<f64> {
        if !self.in_domain(theta) {
            return Ok(f64::NEG_INFINITY);
        }
        let approx = self.find_mode(theta, start)?;
        Ok(self.log_prior_hyper(theta) + approx.log_marginal)
    }
}

fn kriging_terms(
    factor: &CholeskyFactor,
    a: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, Option<DenseCholesky>)> {
    let (k, n) = (a.nrows(), a.ncols());
    if k == 0 {
        return Ok((DMatrix::zeros(n, 0), None));
    }
    let cols: Vec<Vec<f64>> = (0..k)
        .into_par_iter()
        .map(|i| {
            let row: Vec<f64> = a.row(i).iter().copied().collect();
            factor.solve(&row)
        })
        .collect();
    let w = DMatrix::from_fn(n, k, |i, j| cols[j][i]);
    let aw = a * &w;
    let aw = (&aw + aw.transpose()) * 0.5;
    Ok((w, Some(DenseCholesky::new(aw)?)))
}

/// Gaussian approximation of the latent field at its constrained mode.
#[derive(Debug, Clone)]
pub struct GaussianApprox {
    pub theta: Vec<f64>,
    pub mode: Vec<f64>,
    /// Linear predictor of every design row at the mode.
    pub eta: Vec<f64>,
    /// Factor of the regularised precision at the mode.
    pub factor: CholeskyFactor,
    w: DMatrix<f64>,
    aw: Option<DenseCholesky>,
    pub log_likelihood: f64,
    pub log_prior_latent: f64,
    /// Laplace log marginal likelihood `log p(y | theta)`.
    pub log_marginal: f64,
    pub iterations: usize,
}

impl GaussianApprox {
    /// Removes the constrained component `W (A W)^{-1} A v` from `v`.
    pub fn krige(&self, a: &DMatrix<f64>, v: &mut [f64]) {
        if let Some(aw) = &self.aw {
            let r = a * DVector::from_column_slice(v);
            let corr = &self.w * DVector::from_vec(aw.solve(r.as_slice()));
            v.iter_mut().zip(corr.iter()).for_each(|(x, c)| *x -= c);
        }
    }

    /// Dense covariance of the constrained Gaussian approximation.
    pub fn covariance(&self) -> DMatrix<f64> {
        let n = self.mode.len();
        let mut cov = DMatrix::zeros(n, n);
        for j in 0..n {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            let col = self.factor.solve(&e);
            for i in 0..n {
                cov[(i, j)] = col[i];
            }
        }
        if let Some(aw) = &self.aw {
            cov -= &self.w * aw.inverse() * self.w.transpose();
        }
        cov
    }
}

/// Joint posterior draws of the latent field.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    pub draws: Vec<Vec<f64>>,
}

impl PosteriorDraws {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    /// Draws of `sum_j c_j x_j` for a design row.
    pub fn combination(&self, row: &[(usize, f64)]) -> Vec<f64> {
        self.draws
            .iter()
            .map(|x| row.iter().map(|&(j, c)| c * x[j]).sum())
            .collect()
    }
}

fn draw_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// `count` draws from the Gaussian approximation, each corrected by
/// conditioning by kriging so that `A x = 0` holds exactly.
pub fn sample_latent(
    model: &LatentGaussianModel,
    approx: &GaussianApprox,
    count: usize,
    seed: u64,
) -> Result<PosteriorDraws> {
    sample_latent_from(model, approx, count, seed, 0)
}

fn sample_latent_from(
    model: &LatentGaussianModel,
    approx: &GaussianApprox,
    count: usize,
    seed: u64,
    first_stream: u64,
) -> Result<PosteriorDraws> {
    if count == 0 {
        return Err(Error::InvalidParameter(
            "number of draws must be positive".into(),
        ));
    }
    let n = model.dim();
    let a = model.constraint_matrix();
    let draws = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = draw_rng(seed, first_stream + i as u64);
            let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            let mut x: Vec<f64> = approx
                .factor
                .sample_transform(&z)
                .iter()
                .zip(&approx.mode)
                .map(|(e, m)| e + m)
                .collect();
            for _ in 0..3 {
                approx.krige(a, &mut x);
                if model.constraint_residual(&x) < 1e-10 {
                    break;
                }
            }
            x
        })
        .collect();
    Ok(PosteriorDraws { draws })
}

/// Result of the hyperparameter search.
#[derive(Debug, Clone)]
pub struct HyperOptimum {
    pub theta: Vec<f64>,
    pub log_posterior: f64,
    /// Finite-difference Hessian of the log posterior on the internal scale.
    pub hessian: DMatrix<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub approx: GaussianApprox,
}

/// BFGS ascent on the Laplace log posterior with central-difference
/// gradients. `budget` is the maximum number of BFGS iterations.
pub fn optimize_hyper(
    model: &LatentGaussianModel,
    theta0: &[f64],
    budget: usize,
) -> Result<HyperOptimum> {
    if budget == 0 {
        return Err(Error::NoConvergence {
            iterations: 0,
            reason: "optimisation budget is zero".into(),
        });
    }
    if !model.in_domain(theta0) {
        return Err(Error::InvalidParameter(
            "initial hyperparameters outside the domain".into(),
        ));
    }
    let m = theta0.len();
    let mut evaluations = 0usize;
    let mut theta = theta0.to_vec();
    let mut approx = model.find_mode(&theta, None)?;
    let mut value = model.log_prior_hyper(&theta) + approx.log_marginal;
    evaluations += 1;
    if m == 0 {
        return Ok(HyperOptimum {
            theta,
            log_posterior: value,
            hessian: DMatrix::zeros(0, 0),
            iterations: 0,
            evaluations,
            converged: true,
            approx,
        });
    }

    let eval = |t: &[f64], start: &[f64]| -> f64 {
        if !model.in_domain(t) {
            return f64::NEG_INFINITY;
        }
        match model.find_mode(t, Some(start)) {
            Ok(a) => model.log_prior_hyper(t) + a.log_marginal,
            Err(_) => f64::NEG_INFINITY,
        }
    };
    let gradient = |t: &[f64], start: &[f64]| -> Vec<f64> {
        const H: f64 = 1e-3;
        (0..2 * m)
            .into_par_iter()
            .map(|idx| {
                let i = idx / 2;
                let mut p = t.to_vec();
                p[i] += if idx % 2 == 0 { H } else { -H };
                eval(&p, start)
            })
            .collect::<Vec<f64>>()
            .chunks(2)
            .map(|c| {
                if c[0].is_finite() && c[1].is_finite() {
                    (c[0] - c[1]) / (2.0 * H)
                } else {
                    0.0
                }
            })
            .collect()
    };

    let mut grad = gradient(&theta, &approx.mode);
    evaluations += 2 * m;
    // Inverse Hessian approximation of the negative log posterior.
    let mut hinv = DMatrix::<f64>::identity(m, m);
    let mut converged = false;
    let mut iterations = 0;
    for iter in 0..budget {
        iterations = iter + 1;
        let gmax = grad.iter().fold(0.0f64, |a, g| a.max(g.abs()));
        if gmax < 1e-3 {
            converged = true;
            break;
        }
        let gv = DVector::from_vec(grad.clone());
        let mut dir = &hinv * &gv;
        if dir.dot(&gv) <= 0.0 {
            hinv = DMatrix::identity(m, m);
            dir = gv.clone();
        }
        let longest = dir.amax();
        if longest > 2.0 {
            dir *= 2.0 / longest;
        }
        let slope = dir.dot(&gv);
        let mut t = 1.0;
        let mut next = None;
        while t > 1e-8 {
            let trial: Vec<f64> = theta
                .iter()
                .zip(dir.iter())
                .map(|(a, d)| a + t * d)
                .collect();
            let v = eval(&trial, &approx.mode);
            evaluations += 1;
            if v.is_finite() && v >= value + 1e-4 * t * slope {
                next = Some((trial, v));
                break;
            }
            t *= 0.5;
        }
        let Some((trial, v)) = next else {
            converged = gmax < 1e-2;
            break;
        };
        let new_approx = model.find_mode(&trial, Some(&approx.mode))?;
        evaluations += 1;
        let new_grad = gradient(&trial, &new_approx.mode);
        evaluations += 2 * m;
        let s = DVector::from_iterator(m, trial.iter().zip(&theta).map(|(a, b)| a - b));
        // Gradient of the negative log posterior changes by -(new - old).
        let y = DVector::from_iterator(m, grad.iter().zip(&new_grad).map(|(o, n)| o - n));
        let sy = s.dot(&y);
        if sy > 1e-12 {
            if iter == 0 {
                hinv = DMatrix::identity(m, m) * (sy / y.dot(&y));
            }
            let rho = 1.0 / sy;
            let i = DMatrix::<f64>::identity(m, m);
            let left = &i - rho * &s * y.transpose();
            let right = &i - rho * &y * s.transpose();
            hinv = &left * &hinv * &right + rho * &s * s.transpose();
        }
        let improvement = v - value;
        theta = trial;
        value = v;
        approx = new_approx;
        grad = new_grad;
        if improvement.abs() < 1e-9 * (1.0 + value.abs()) && s.amax() < 1e-5 {
            converged = true;
            break;
        }
    }
    if !converged {
        let gmax = grad.iter().fold(0.0f64, |a, g| a.max(g.abs()));
        if gmax > 1e-1 {
            return Err(Error::NoConvergence {
                iterations,
                reason: format!("hyperparameter gradient {gmax:.3e} after budget"),
            });
        }
    }
    let hessian = hessian_fd(model, &theta, value, &approx.mode, &mut evaluations);
    Ok(HyperOptimum {
        theta,
        log_posterior: value,
        hessian,
        iterations,
        evaluations,
        converged,
        approx,
    })
}

fn hessian_fd(
    model: &LatentGaussianModel,
    theta: &[f64],
    f0: f64,
    start: &[f64],
    evaluations: &mut usize,
) -> DMatrix<f64> {
    const H: f64 = 5e-3;
    let m = theta.len();
    let mut points: Vec<(usize, usize, f64, f64)> = Vec::new();
    for i in 0..m {
        points.push((i, i, H, 0.0));
        points.push((i, i, -H, 0.0));
        for j in i + 1..m {
            for (si, sj) in [(H, H), (H, -H), (-H, H), (-H, -H)] {
                points.push((i, j, si, sj));
            }
        }
    }
    *evaluations += points.len();
    let values: Vec<f64> = points
        .par_iter()
        .map(|&(i, j, si, sj)| {
            let mut p = theta.to_vec();
            p[i] += si;
            if i != j {
                p[j] += sj;
            }
            model
                .log_posterior_hyper(&p, Some(start))
                .unwrap_or(f64::NEG_INFINITY)
        })
        .collect();
    let mut h = DMatrix::zeros(m, m);
    let mut idx = 0;
    for i in 0..m {
        h[(i, i)] = (values[idx] - 2.0 * f0 + values[idx + 1]) / (H * H);
        idx += 2;
        for j in i + 1..m {
            let v =
                (values[idx] - values[idx + 1] - values[idx + 2] + values[idx + 3]) / (4.0 * H * H);
            h[(i, j)] = v;
            h[(j, i)] = v;
            idx += 4;
        }
    }
    h
}

/// Hyperparameter integration points with normalised weights.
#[derive(Debug, Clone)]
pub struct CcdPoint {
    pub theta: Vec<f64>,
    pub weight: f64,
    pub approx: GaussianApprox,
}

/// Central composite design around the optimum: the centre, axial points
/// and a two-level orthogonal array, placed in the eigenbasis of the
/// negative Hessian. Weights combine the design weights with the Laplace
/// posterior density at each point.
pub fn ccd_points(model: &LatentGaussianModel, opt: &HyperOptimum) -> Result<Vec<CcdPoint>> {
    const F0: f64 = 1.1;
    let m = opt.theta.len();
    if m == 0 {
        return Ok(vec![CcdPoint {
            theta: vec![],
            weight: 1.0,
            approx: opt.approx.clone(),
        }]);
    }
    let neg = -&opt.hessian;
    let (vals, vecs) = sym_eigen(&((&neg + neg.transpose()) * 0.5));
    if vals.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::InvalidParameter(
            "Hessian at the optimum is not negative definite".into(),
        ));
    }
    let mut runs = 1;
    while runs < m + 1 {
        runs *= 2;
    }
    let mut design: Vec<Vec<f64>> = Vec::new();
    for i in 0..m {
        for s in [1.0, -1.0] {
            let mut z = vec![0.0; m];
            z[i] = s * (m as f64).sqrt();
            design.push(z);
        }
    }
    for r in 0..runs {
        // Columns 1..=m of a Sylvester Hadamard matrix.
        design.push(
            (1..=m)
                .map(|c| {
                    if (r & c).count_ones() % 2 == 0 {
                        1.0
                    } else {
                        -1.0
                    }
                })
                .collect(),
        );
    }
    let radius2 = F0 * F0 * m as f64;
    let delta = (radius2 / 2.0).exp() / (design.len() as f64 * (F0 * F0 - 1.0));
    let mut thetas = vec![opt.theta.clone()];
    for z in &design {
        let mut t = opt.theta.clone();
        for (k, &lam) in vals.iter().enumerate() {
            let c = F0 * z[k] / lam.sqrt();
            for i in 0..m {
                t[i] += c * vecs[(i, k)];
            }
        }
        thetas.push(t);
    }
    let evaluated: Vec<Option<(f64, GaussianApprox)>> = thetas
        .par_iter()
        .map(|t| {
            if !model.in_domain(t) {
                return None;
            }
            model
                .find_mode(t, Some(&opt.approx.mode))
                .ok()
                .map(|a| (model.log_prior_hyper(t) + a.log_marginal, a))
        })
        .collect();
    let mut points = Vec::new();
    for (idx, (t, e)) in thetas.into_iter().zip(evaluated).enumerate() {
        if let Some((lp, approx)) = e {
            let design_weight = if idx == 0 { 1.0 } else { delta };
            let weight = design_weight * (lp - opt.log_posterior).exp();
            if weight.is_finite() && weight > 0.0 {
                points.push(CcdPoint {
                    theta: t,
                    weight,
                    approx,
                });
            }
        }
    }
    let total: f64 = points.iter().map(|p| p.weight).sum();
    points.iter_mut().for_each(|p| p.weight /= total);
    Ok(points)
}

/// Draws mixed over CCD points, allocating draws by largest remainder.
pub fn sample_latent_ccd(
    model: &LatentGaussianModel,
    points: &[CcdPoint],
    count: usize,
    seed: u64,
) -> Result<PosteriorDraws> {
    if count == 0 {
        return Err(Error::InvalidParameter(
            "number of draws must be positive".into(),
        ));
    }
    let raw: Vec<f64> = points.iter().map(|p| p.weight * count as f64).collect();
    let mut alloc: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut rest: Vec<(usize, f64)> = raw
        .iter()
        .enumerate()
        .map(|(i, r)| (i, r - r.floor()))
        .collect();
    rest.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let missing = count - alloc.iter().sum::<usize>();
    for &(i, _) in rest.iter().take(missing) {
        alloc[i] += 1;
    }
    let mut draws = Vec::with_capacity(count);
    let mut stream = 0u64;
    for (p, &c) in points.iter().zip(&alloc) {
        if c > 0 {
            draws.extend(sample_latent_from(model, &p.approx, c, seed, stream)?.draws);
            stream += c as u64;
        }
    }
    Ok(PosteriorDraws { draws })
}

/// Posterior summaries from the Metropolis reference sampler.
#[derive(Debug, Clone)]
pub struct McmcSummary {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    /// Posterior mean of every design row's linear predictor.
    pub eta_mean: Vec<f64>,
    pub acceptance_rate: f64,
    pub iterations: usize,
}

/// Random-walk Metropolis on the latent field at fixed hyperparameters.
/// Proposals are Gaussian increments shaped by the Laplace covariance and
/// projected onto the constraint set; the step scale is adapted during the
/// first fifth of the run and then frozen.
pub fn mcmc_reference(
    model: &LatentGaussianModel,
    theta: &[f64],
    iterations: usize,
    seed: u64,
) -> Result<McmcSummary> {
    let n = model.dim();
    if n > 200 {
        return Err(Error::InvalidParameter(format!(
            "MCMC reference is limited to 200 latent dimensions, got {n}"
        )));
    }
    if iterations < 10 {
        return Err(Error::InvalidParameter(
            "MCMC needs at least 10 iterations".into(),
        ));
    }
    let approx = model.find_mode(theta, None)?;
    let values = model.prior_values(theta);
    let a = model.constraint_matrix();
    let log_target =
        |x: &[f64]| model.log_likelihood(x, theta) - 0.5 * model.prior_quad(&values, x);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = approx.mode.clone();
    let mut lx = log_target(&x);
    let mut scale = 2.38 / ((n - model.n_constraints()).max(1) as f64).sqrt();
    let burn = iterations / 5;
    let mut accepted = 0usize;
    let mut counted = 0usize;
    let mut sum = vec![0.0; n];
    let mut sumsq = vec![0.0; n];
    let nrows = model.rows().len();
    let mut eta_sum = vec![0.0; nrows];
    for it in 0..iterations {
        let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let mut step = approx.factor.sample_transform(&z);
        approx.krige(a, &mut step);
        let prop: Vec<f64> = x.iter().zip(&step).map(|(x, s)| x + scale * s).collect();
        let lp = log_target(&prop);
        let u: f64 = rng.random();
        let accept = lp.is_finite() && u.ln() < lp - lx;
        if accept {
            x = prop;
            lx = lp;
        }
        if it < burn {
            let gain = 1.0 / ((it + 1) as f64).sqrt();
            scale *= (gain * ((accept as u8 as f64) - 0.234)).exp();
        } else {
            counted += 1;
            accepted += accept as usize;
            for i in 0..n {
                sum[i] += x[i];
                sumsq[i] += x[i] * x[i];
            }
            if nrows <= 4 * n {
                for (r, e) in eta_sum.iter_mut().enumerate() {
                    *e += model.row_value(r, &x);
                }
            }
        }
    }
    let c = counted as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / c).collect();
    let sd = sumsq
        .iter()
        .zip(&mean)
        .map(|(s, m)| (s / c - m * m).max(0.0).sqrt())
        .collect();
    let eta_mean = if nrows <= 4 * n {
        eta_sum.iter().map(|e| e / c).collect()
    } else {
        model.linear_predictor(&mean)
    };
    Ok(McmcSummary {
        mean,
        sd,
        eta_mean,
        acceptance_rate: accepted as f64 / c,
        iterations,
    })
}
