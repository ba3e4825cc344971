//! Up-looking sparse Cholesky factorization with a symbolic phase that is
//! computed once per sparsity pattern and reused for every numeric refactor.

use std::sync::Arc;

use super::ordering::{minimum_degree, Ordering};
use crate::error::{Error, Result};

const NONE: usize = usize::MAX;

/// Ordering, elimination tree and column pointers of `L` for a fixed pattern.
#[derive(Debug, Clone)]
pub struct SymbolicCholesky {
    n: usize,
    perm: Vec<usize>,
    iperm: Vec<usize>,
    a_colptr: Vec<usize>,
    a_rowidx: Vec<usize>,
    parent: Vec<usize>,
    l_colptr: Vec<usize>,
}

impl SymbolicCholesky {
    /// `pattern` lists structurally non-zero positions (either triangle, any
    /// order, duplicates allowed) in original indexing. The diagonal is always
    /// included.
    pub fn analyze(n: usize, pattern: &[(usize, usize)], ordering: Ordering) -> Self {
        let perm = match ordering {
            Ordering::Natural => (0..n).collect(),
            Ordering::MinimumDegree => minimum_degree(n, pattern),
        };
        let mut iperm = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            iperm[old] = new;
        }

        let mut cols: Vec<Vec<usize>> = (0..n).map(|k| vec![k]).collect();
        for &(i, j) in pattern {
            let (a, b) = (iperm[i], iperm[j]);
            let (r, c) = if a <= b { (a, b) } else { (b, a) };
            cols[c].push(r);
        }
        let mut a_colptr = Vec::with_capacity(n + 1);
        let mut a_rowidx = Vec::new();
        a_colptr.push(0);
        for col in &mut cols {
            col.sort_unstable();
            col.dedup();
            a_rowidx.extend_from_slice(col);
            a_colptr.push(a_rowidx.len());
        }

        let parent = etree(n, &a_colptr, &a_rowidx);
        let counts = column_counts(n, &a_colptr, &a_rowidx, &parent);
        let mut l_colptr = Vec::with_capacity(n + 1);
        l_colptr.push(0);
        for c in counts {
            l_colptr.push(l_colptr.last().unwrap() + c);
        }
        Self {
            n,
            perm,
            iperm,
            a_colptr,
            a_rowidx,
            parent,
            l_colptr,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of stored values in the permuted upper triangle.
    pub fn value_len(&self) -> usize {
        self.a_rowidx.len()
    }

    /// Declared number of non-zeros in `L`.
    pub fn l_nnz(&self) -> usize {
        self.l_colptr[self.n]
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    /// Position of original entry `(i, j)` in the value array, if structural.
    pub fn slot(&self, i: usize, j: usize) -> Option<usize> {
        let (a, b) = (self.iperm[i], self.iperm[j]);
        let (r, c) = if a <= b { (a, b) } else { (b, a) };
        let rows = &self.a_rowidx[self.a_colptr[c]..self.a_colptr[c + 1]];
        rows.binary_search(&r).ok().map(|k| self.a_colptr[c] + k)
    }

    /// Numeric factorization of the matrix whose permuted upper triangle is
    /// `values` (laid out as returned by [`slot`](Self::slot)).
    pub fn factor(self: &Arc<Self>, values: &[f64]) -> Result<CholeskyFactor> {
        assert_eq!(values.len(), self.value_len());
        let n = self.n;
        let lp = &self.l_colptr;
        let (ap, ai) = (&self.a_colptr, &self.a_rowidx);
        let mut li = vec![0usize; self.l_nnz()];
        let mut lx = vec![0.0; self.l_nnz()];
        let mut next: Vec<usize> = lp[..n].to_vec();
        let mut x = vec![0.0; n];
        let mut stack = vec![0usize; n];
        let mut mark = vec![false; n];

        for k in 0..n {
            let top = ereach(k, ap, ai, &self.parent, &mut stack, &mut mark);
            for p in ap[k]..ap[k + 1] {
                x[ai[p]] = values[p];
            }
            let mut d = x[k];
            x[k] = 0.0;
            for &i in &stack[top..n] {
                let lki = x[i] / lx[lp[i]];
                x[i] = 0.0;
                for p in lp[i] + 1..next[i] {
                    x[li[p]] -= lx[p] * lki;
                }
                d -= lki * lki;
                let p = next[i];
                next[i] += 1;
                li[p] = k;
                lx[p] = lki;
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::NotPositiveDefinite {
                    pivot: self.perm[k],
                });
            }
            let p = next[k];
            next[k] += 1;
            li[p] = k;
            lx[p] = d.sqrt();
        }
        debug_assert!((0..n).all(|k| next[k] == lp[k + 1]));
        Ok(CholeskyFactor {
            symbolic: Arc::clone(self),
            li,
            lx,
        })
    }
}

fn etree(n: usize, ap: &[usize], ai: &[usize]) -> Vec<usize> {
    let mut parent = vec![NONE; n];
    let mut ancestor = vec![NONE; n];
    for k in 0..n {
        for &row in &ai[ap[k]..ap[k + 1]] {
            let mut i = row;
            while i != NONE && i < k {
                let inext = ancestor[i];
                ancestor[i] = k;
                if inext == NONE {
                    parent[i] = k;
                }
                i = inext;
            }
        }
    }
    parent
}

/// Pattern of row `k` of `L` (excluding the diagonal) in topological order,
/// written to `stack[top..n]`; returns `top`.
fn ereach(
    k: usize,
    ap: &[usize],
    ai: &[usize],
    parent: &[usize],
    stack: &mut [usize],
    mark: &mut [bool],
) -> usize {
    let n = stack.len();
    let mut top = n;
    mark[k] = true;
    for &row in &ai[ap[k]..ap[k + 1]] {
        let mut i = row;
        let mut len = 0;
        while !mark[i] {
            stack[len] = i;
            len += 1;
            mark[i] = true;
            i = parent[i];
        }
        while len > 0 {
            top -= 1;
            len -= 1;
            stack[top] = stack[len];
        }
    }
    for &i in &stack[top..n] {
        mark[i] = false;
    }
    mark[k] = false;
    top
}

fn column_counts(n: usize, ap: &[usize], ai: &[usize], parent: &[usize]) -> Vec<usize> {
    let mut counts = vec![1usize; n];
    let mut stack = vec![0usize; n];
    let mut mark = vec![false; n];
    for k in 0..n {
        let top = ereach(k, ap, ai, parent, &mut stack, &mut mark);
        for &i in &stack[top..n] {
            counts[i] += 1;
        }
    }
    counts
}

/// Numeric factor `P A P^T = L L^T`.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    symbolic: Arc<SymbolicCholesky>,
    li: Vec<usize>,
    lx: Vec<f64>,
}

impl CholeskyFactor {
    pub fn n(&self) -> usize {
        self.symbolic.n
    }

    pub fn nnz(&self) -> usize {
        self.lx.len()
    }

    pub fn symbolic(&self) -> &Arc<SymbolicCholesky> {
        &self.symbolic
    }

    pub fn log_det(&self) -> f64 {
        let lp = &self.symbolic.l_colptr;
        2.0 * (0..self.n()).map(|k| self.lx[lp[k]].ln()).sum::<f64>()
    }

    fn lower_solve(&self, y: &mut [f64]) {
        let lp = &self.symbolic.l_colptr;
        for j in 0..self.n() {
            y[j] /= self.lx[lp[j]];
            let yj = y[j];
            for p in lp[j] + 1..lp[j + 1] {
                y[self.li[p]] -= self.lx[p] * yj;
            }
        }
    }

    fn upper_solve(&self, y: &mut [f64]) {
        let lp = &self.symbolic.l_colptr;
        for j in (0..self.n()).rev() {
            let mut s = y[j];
            for p in lp[j] + 1..lp[j + 1] {
                s -= self.lx[p] * y[self.li[p]];
            }
            y[j] = s / self.lx[lp[j]];
        }
    }

    /// Solves `A x = b` in original indexing.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let perm = &self.symbolic.perm;
        let mut y: Vec<f64> = perm.iter().map(|&old| b[old]).collect();
        self.lower_solve(&mut y);
        self.upper_solve(&mut y);
        let mut x = vec![0.0; self.n()];
        for (new, &old) in perm.iter().enumerate() {
            x[old] = y[new];
        }
        x
    }

    /// Maps `z ~ N(0, I)` to a draw from `N(0, A^{-1})`.
    pub fn sample_transform(&self, z: &[f64]) -> Vec<f64> {
        let mut y = z.to_vec();
        self.upper_solve(&mut y);
        let mut x = vec![0.0; self.n()];
        for (new, &old) in self.symbolic.perm.iter().enumerate() {
            x[old] = y[new];
        }
        x
    }
}
