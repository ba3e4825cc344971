//! Type IV space-period interaction: Kronecker structure and the constraints
//! that remove its null space. Entries are indexed `p * S + r`, space fastest.

use std::sync::OnceLock;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{sym_eigen, SymSparse};
use crate::spatial::StructuredPrecision;

/// Largest `P * S` accepted by default.
pub const DEFAULT_MAX_DIM: usize = 20_000;

#[derive(Debug, Clone)]
pub struct InteractionBlock {
    pub periods: usize,
    pub regions: usize,
    pub precision: SymSparse,
    pub nullity: usize,
    deficiency: (usize, usize),
    factors: (SymSparse, SymSparse),
    /// Factor eigendecompositions, computed on first use.
    eigen: OnceLock<[(Vec<f64>, DMatrix<f64>); 2]>,
}

pub fn kronecker_precision(
    q_period: &StructuredPrecision,
    q_space: &StructuredPrecision,
    max_dim: usize,
) -> Result<InteractionBlock> {
    let (p, s) = (q_period.dim(), q_space.dim());
    let dim = p
        .checked_mul(s)
        .ok_or_else(|| Error::Dimension("interaction dimension overflows".into()))?;
    if dim > max_dim {
        return Err(Error::Dimension(format!(
            "interaction dimension {dim} exceeds limit {max_dim}"
        )));
    }
    let rank = (p - q_period.rank_deficiency) * (s - q_space.rank_deficiency);
    Ok(InteractionBlock {
        periods: p,
        regions: s,
        precision: q_period.matrix.kron(&q_space.matrix),
        nullity: dim - rank,
        deficiency: (q_period.rank_deficiency, q_space.rank_deficiency),
        factors: (q_period.matrix.clone(), q_space.matrix.clone()),
        eigen: OnceLock::new(),
    })
}

impl InteractionBlock {
    pub fn dim(&self) -> usize {
        self.periods * self.regions
    }

    pub fn index(&self, period: usize, region: usize) -> usize {
        period * self.regions + region
    }

    fn factor_eigen(&self) -> &[(Vec<f64>, DMatrix<f64>); 2] {
        self.eigen.get_or_init(|| {
            [
                sym_eigen(&self.factors.0.to_dense()),
                sym_eigen(&self.factors.1.to_dense()),
            ]
        })
    }

    /// Log of the product of positive eigenvalues of the structure: the
    /// products of positive factor eigenvalues.
    pub fn log_pdet(&self) -> f64 {
        let (p_def, s_def) = self.deficiency;
        let [period, space] = self.factor_eigen();
        let lp: f64 = period.0[p_def..].iter().map(|v| v.ln()).sum();
        let ls: f64 = space.0[s_def..].iter().map(|v| v.ln()).sum();
        let (np, ns) = ((self.periods - p_def) as f64, (self.regions - s_def) as f64);
        ns * lp + np * ls
    }

    /// Per-period sums `e_p ⊗ 1` scaled to unit length. They lie in the null
    /// space when the spatial factor is a connected ICAR.
    pub fn period_sum_vectors(&self) -> Vec<Vec<f64>> {
        let s = self.regions;
        let v = 1.0 / (s as f64).sqrt();
        (0..self.periods)
            .map(|p| {
                let mut row = vec![0.0; self.dim()];
                row[p * s..(p + 1) * s].fill(v);
                row
            })
            .collect()
    }
}

/// Checks that a factor's `deficiency` smallest eigenvalues are numerical
/// zeros (at most `tol` times the largest) and the next one is not (above
/// the rounding level of the eigensolver).
fn check_factor(values: &[f64], deficiency: usize, tol: f64) -> Result<()> {
    let max = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let zeros = values.iter().filter(|v| v.abs() <= tol * max).count();
    let null_ok = values[..deficiency].iter().all(|v| v.abs() <= tol * max);
    let rounding = 64.0 * values.len() as f64 * f64::EPSILON * max;
    let rest_ok = values.get(deficiency).is_none_or(|&v| v > rounding);
    if !(null_ok && rest_ok) {
        return Err(Error::NullSpaceMismatch {
            declared: deficiency,
            found: zeros,
        });
    }
    Ok(())
}

/// Orthonormal basis of the null space: products of factor eigenvectors in
/// which either factor is a null vector. The factor null spaces come from the
/// declared deficiencies, so long axes whose smallest positive eigenvalue
/// falls below `tol` are still split correctly; `tol` bounds the eigenvalues
/// accepted as zeros.
pub fn null_space_constraints(block: &InteractionBlock, tol: f64) -> Result<Vec<Vec<f64>>> {
    let [(pv, pvec), (sv, svec)] = block.factor_eigen();
    let (p_def, s_def) = block.deficiency;
    check_factor(pv, p_def, tol)?;
    check_factor(sv, s_def, tol)?;
    let mut rows = Vec::new();
    for i in 0..pv.len() {
        for j in 0..sv.len() {
            if i < p_def || j < s_def {
                let mut row = vec![0.0; block.dim()];
                for p in 0..block.periods {
                    let x = pvec[(p, i)];
                    if x != 0.0 {
                        for r in 0..block.regions {
                            row[p * block.regions + r] = x * svec[(r, j)];
                        }
                    }
                }
                rows.push(row);
            }
        }
    }
    if rows.len() != block.nullity {
        return Err(Error::NullSpaceMismatch {
            declared: block.nullity,
            found: rows.len(),
        });
    }
    Ok(rows)
}
