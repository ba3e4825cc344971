use nalgebra::DMatrix;

/// Symmetric sparse matrix stored as its upper triangle (`i <= j`), sorted by
/// `(i, j)` with unique positions.
#[derive(Debug, Clone, PartialEq)]
pub struct SymSparse {
    n: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl SymSparse {
    /// Builds from triplets in either triangle; duplicates are summed.
    pub fn from_triplets(
        n: usize,
        triplets: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Self {
        let mut entries: Vec<(usize, usize, f64)> = triplets
            .into_iter()
            .map(|(i, j, v)| if i <= j { (i, j, v) } else { (j, i, v) })
            .collect();
        assert!(
            entries.iter().all(|&(_, j, _)| j < n),
            "triplet index out of range"
        );
        entries.sort_by_key(|a| (a.0, a.1));
        let mut merged: Vec<(usize, usize, f64)> = Vec::with_capacity(entries.len());
        for (i, j, v) in entries {
            match merged.last_mut() {
                Some(last) if last.0 == i && last.1 == j => last.2 += v,
                _ => merged.push((i, j, v)),
            }
        }
        Self { n, entries: merged }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_triplets(n, (0..n).map(|i| (i, i, 1.0)))
    }

    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let n = m.nrows();
        let mut t = Vec::new();
        for j in 0..n {
            for i in 0..=j {
                if m[(i, j)] != 0.0 {
                    t.push((i, j, m[(i, j)]));
                }
            }
        }
        Self::from_triplets(n, t)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    pub fn nnz_upper(&self) -> usize {
        self.entries.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let key = if i <= j { (i, j) } else { (j, i) };
        self.entries
            .binary_search_by(|e| (e.0, e.1).cmp(&key))
            .map(|k| self.entries[k].2)
            .unwrap_or(0.0)
    }

    /// Iterates over every stored position of the full matrix (both triangles).
    pub fn iter_full(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.entries.iter().flat_map(|&(i, j, v)| {
            let mirror = if i != j { Some((j, i, v)) } else { None };
            std::iter::once((i, j, v)).chain(mirror)
        })
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            n: self.n,
            entries: self
                .entries
                .iter()
                .map(|&(i, j, v)| (i, j, v * factor))
                .collect(),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for (i, j, v) in self.iter_full() {
            m[(i, j)] = v;
        }
        m
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        let mut y = vec![0.0; self.n];
        for &(i, j, v) in &self.entries {
            y[i] += v * x[j];
            if i != j {
                y[j] += v * x[i];
            }
        }
        y
    }

    pub fn quad_form(&self, x: &[f64]) -> f64 {
        self.entries
            .iter()
            .map(|&(i, j, v)| {
                if i == j {
                    v * x[i] * x[i]
                } else {
                    2.0 * v * x[i] * x[j]
                }
            })
            .sum()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n];
        for &(i, j, v) in &self.entries {
            if i == j {
                d[i] = v;
            }
        }
        d
    }

    /// Kronecker product `self (x) other`; index `a * other.n + b`, so the
    /// second factor runs fastest.
    pub fn kron(&self, other: &SymSparse) -> SymSparse {
        let nb = other.n;
        let mut t = Vec::new();
        for (i1, j1, a) in self.iter_full() {
            for (i2, j2, b) in other.iter_full() {
                let r = i1 * nb + i2;
                let c = j1 * nb + j2;
                if r <= c {
                    t.push((r, c, a * b));
                }
            }
        }
        SymSparse::from_triplets(self.n * nb, t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kron_matches_dense() {
        let a = SymSparse::from_triplets(2, [(0, 0, 2.0), (0, 1, -1.0), (1, 1, 3.0)]);
        let b = SymSparse::from_triplets(3, [(0, 0, 1.0), (1, 2, 0.5), (2, 2, 4.0), (1, 1, 1.0)]);
        let k = a.kron(&b).to_dense();
        let expected = a.to_dense().kronecker(&b.to_dense());
        assert_eq!(k, expected);
    }

    #[test]
    fn quad_form_and_mul_agree() {
        let a = SymSparse::from_triplets(3, [(0, 0, 2.0), (2, 0, -1.0), (1, 1, 3.0), (2, 2, 1.0)]);
        let x = [1.0, -2.0, 0.5];
        let y = a.mul_vec(&x);
        let q: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
        assert!((q - a.quad_form(&x)).abs() < 1e-14);
    }
}
