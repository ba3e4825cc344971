//! Region adjacency graphs, ICAR structure matrices and the BYM2 block.

use std::collections::{HashMap, VecDeque};
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{numerical_rank, sym_eigen, DenseCholesky, SymSparse, RANK_TOLERANCE};

#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyGraph {
    ids: Vec<String>,
    neighbors: Vec<Vec<usize>>,
    component: Vec<usize>,
    n_components: usize,
    index: HashMap<String, usize>,
}

impl AdjacencyGraph {
    /// Builds a graph from per-region neighbour lists, which must be symmetric
    /// and free of self-loops.
    pub fn new(ids: Vec<String>, mut neighbors: Vec<Vec<usize>>) -> Result<Self> {
        let n = ids.len();
        if n == 0 {
            return Err(Error::InvalidGraph("graph has no regions".into()));
        }
        if neighbors.len() != n {
            return Err(Error::InvalidGraph(format!(
                "{} ids but {} neighbour lists",
                n,
                neighbors.len()
            )));
        }
        let mut index = HashMap::with_capacity(n);
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::InvalidGraph(format!("duplicate region id {id:?}")));
            }
        }
        for (i, list) in neighbors.iter_mut().enumerate() {
            list.sort_unstable();
            list.dedup();
            if list.iter().any(|&j| j >= n) {
                return Err(Error::InvalidGraph(format!(
                    "region {:?} has an out-of-range neighbour",
                    ids[i]
                )));
            }
            if list.contains(&i) {
                return Err(Error::InvalidGraph(format!(
                    "region {:?} lists itself as a neighbour",
                    ids[i]
                )));
            }
        }
        for i in 0..n {
            for &j in &neighbors[i] {
                if neighbors[j].binary_search(&i).is_err() {
                    return Err(Error::InvalidGraph(format!(
                        "asymmetric adjacency: {:?} lists {:?} but not the reverse",
                        ids[i], ids[j]
                    )));
                }
            }
        }
        let (component, n_components) = components(&neighbors);
        Ok(Self {
            ids,
            neighbors,
            component,
            n_components,
            index,
        })
    }

    pub fn from_edges(ids: Vec<String>, edges: &[(usize, usize)]) -> Result<Self> {
        let mut neighbors = vec![Vec::new(); ids.len()];
        for &(a, b) in edges {
            if a >= ids.len() || b >= ids.len() {
                return Err(Error::InvalidGraph(format!("edge ({a}, {b}) out of range")));
            }
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        Self::new(ids, neighbors)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn component_of(&self, i: usize) -> usize {
        self.component[i]
    }

    pub fn n_components(&self) -> usize {
        self.n_components
    }

    /// Members of each connected component, in region order.
    pub fn component_members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_components];
        for (i, &c) in self.component.iter().enumerate() {
            out[c].push(i);
        }
        out
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut e = Vec::new();
        for (i, list) in self.neighbors.iter().enumerate() {
            e.extend(list.iter().filter(|&&j| j > i).map(|&j| (i, j)));
        }
        e
    }

    /// Parses the textual format `region_id: neighbour,neighbour,...`, one
    /// line per region. Blank lines and lines starting with `#` are skipped.
    pub fn parse_adjacency(text: &str, path: &Path) -> Result<Self> {
        let mut ids = Vec::new();
        let mut raw: Vec<(usize, Vec<String>)> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (id, rest) = line.split_once(':').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                reason: "expected `region_id: neighbours`".into(),
            })?;
            let id = id.trim();
            if id.is_empty() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    reason: "empty region id".into(),
                });
            }
            let nb = rest
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(String::from)
                .collect();
            ids.push(id.to_string());
            raw.push((lineno + 1, nb));
        }
        let index: HashMap<&str, usize> = ids
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        let mut neighbors = Vec::with_capacity(ids.len());
        for (line, nb) in &raw {
            let mut list = Vec::with_capacity(nb.len());
            for name in nb {
                let j = index.get(name.as_str()).ok_or_else(|| Error::Parse {
                    path: path.to_path_buf(),
                    line: *line,
                    reason: format!("unknown neighbour {name:?}"),
                })?;
                list.push(*j);
            }
            neighbors.push(list);
        }
        Self::new(ids, neighbors)
    }

    pub fn load_adjacency(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_adjacency(&text, path)
    }

    pub fn to_adjacency_text(&self) -> String {
        let mut s = String::new();
        for (i, id) in self.ids.iter().enumerate() {
            let nb: Vec<&str> = self.neighbors[i]
                .iter()
                .map(|&j| self.ids[j].as_str())
                .collect();
            let _ = writeln!(s, "{}: {}", id, nb.join(","));
        }
        s
    }

    /// Derives adjacency from polygons: two regions are neighbours when their
    /// boundaries share a segment of positive length.
    pub fn from_polygons(polygons: &[Polygon]) -> Result<Self> {
        let ids: Vec<String> = polygons.iter().map(|p| p.id.clone()).collect();
        let mut edges = Vec::new();
        for a in 0..polygons.len() {
            for b in a + 1..polygons.len() {
                if polygons[a].shares_boundary(&polygons[b]) {
                    edges.push((a, b));
                }
            }
        }
        Self::from_edges(ids, &edges)
    }
}

fn components(neighbors: &[Vec<usize>]) -> (Vec<usize>, usize) {
    let n = neighbors.len();
    let mut label = vec![usize::MAX; n];
    let mut count = 0;
    let mut queue = VecDeque::new();
    for start in 0..n {
        if label[start] != usize::MAX {
            continue;
        }
        label[start] = count;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            for &j in &neighbors[i] {
                if label[j] == usize::MAX {
                    label[j] = count;
                    queue.push_back(j);
                }
            }
        }
        count += 1;
    }
    (label, count)
}

/// A simple polygon given by its vertices (closed implicitly).
#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    pub id: String,
    pub vertices: Vec<(f64, f64)>,
}

impl Polygon {
    fn segments(&self) -> impl Iterator<Item = ((f64, f64), (f64, f64))> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    pub fn centroid(&self) -> (f64, f64) {
        let n = self.vertices.len() as f64;
        let (sx, sy) = self
            .vertices
            .iter()
            .fold((0.0, 0.0), |a, v| (a.0 + v.0, a.1 + v.1));
        (sx / n, sy / n)
    }

    pub fn shares_boundary(&self, other: &Polygon) -> bool {
        self.segments()
            .any(|s| other.segments().any(|t| collinear_overlap(s, t) > 1e-9))
    }

    /// Parses `region_id: x y; x y; x y; ...`, one polygon per line.
    pub fn parse_file(text: &str, path: &Path) -> Result<Vec<Polygon>> {
        let mut out = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |reason: &str| Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                reason: reason.into(),
            };
            let (id, rest) = line
                .split_once(':')
                .ok_or_else(|| bad("expected `region_id: x y; x y; ...`"))?;
            let mut vertices = Vec::new();
            for pair in rest.split(';').map(str::trim).filter(|s| !s.is_empty()) {
                let mut it = pair.split_whitespace().map(str::parse::<f64>);
                match (it.next(), it.next(), it.next()) {
                    (Some(Ok(x)), Some(Ok(y)), None) => vertices.push((x, y)),
                    _ => return Err(bad(&format!("malformed vertex {pair:?}"))),
                }
            }
            if vertices.len() < 3 {
                return Err(bad("polygon needs at least three vertices"));
            }
            out.push(Polygon {
                id: id.trim().to_string(),
                vertices,
            });
        }
        Ok(out)
    }

    pub fn to_line(&self) -> String {
        let v: Vec<String> = self
            .vertices
            .iter()
            .map(|(x, y)| format!("{x} {y}"))
            .collect();
        format!("{}: {}", self.id, v.join("; "))
    }
}

fn collinear_overlap(s: ((f64, f64), (f64, f64)), t: ((f64, f64), (f64, f64))) -> f64 {
    let (p0, p1) = s;
    let d = (p1.0 - p0.0, p1.1 - p0.1);
    let len = (d.0 * d.0 + d.1 * d.1).sqrt();
    if len == 0.0 {
        return 0.0;
    }
    let tol = 1e-9 * len.max(1.0);
    let cross = |q: (f64, f64)| (d.0 * (q.1 - p0.1) - d.1 * (q.0 - p0.0)) / len;
    if cross(t.0).abs() > tol || cross(t.1).abs() > tol {
        return 0.0;
    }
    let proj = |q: (f64, f64)| (d.0 * (q.0 - p0.0) + d.1 * (q.1 - p0.1)) / len;
    let (a, b) = (proj(t.0), proj(t.1));
    let (lo, hi) = (a.min(b), a.max(b));
    (hi.min(len) - lo.max(0.0)).max(0.0)
}

/// Sparse symmetric non-negative-definite structure matrix with its declared
/// rank deficiency and linear constraints `A x = e` (rows of `A`).
#[derive(Debug, Clone, PartialEq)]
pub struct StructuredPrecision {
    pub matrix: SymSparse,
    pub rank_deficiency: usize,
    pub constraints: Vec<Vec<f64>>,
    pub e: Vec<f64>,
}

impl StructuredPrecision {
    pub fn dim(&self) -> usize {
        self.matrix.n()
    }

    /// Numerical rank deficiency by dense eigen-count.
    pub fn numerical_deficiency(&self) -> usize {
        self.dim() - numerical_rank(&self.matrix.to_dense(), RANK_TOLERANCE)
    }

    pub fn check_rank(&self) -> Result<()> {
        let found = self.numerical_deficiency();
        if found != self.rank_deficiency {
            return Err(Error::NullSpaceMismatch {
                declared: self.rank_deficiency,
                found,
            });
        }
        Ok(())
    }

    /// Eigenvalues above the rank threshold, ascending.
    pub fn positive_eigenvalues(&self) -> Vec<f64> {
        let (vals, _) = sym_eigen(&self.matrix.to_dense());
        let max = vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        vals.into_iter()
            .filter(|&v| v > RANK_TOLERANCE * max)
            .collect()
    }

    /// Sum of logs of the positive eigenvalues.
    pub fn log_pdet(&self) -> f64 {
        self.positive_eigenvalues().iter().map(|v| v.ln()).sum()
    }
}

/// ICAR structure: degree on the diagonal and -1 per edge, one sum-to-zero
/// constraint per connected component.
pub fn icar_precision(graph: &AdjacencyGraph) -> StructuredPrecision {
    let n = graph.len();
    let mut trip = Vec::with_capacity(n + graph.edges().len());
    for i in 0..n {
        trip.push((i, i, graph.degree(i) as f64));
    }
    for (i, j) in graph.edges() {
        trip.push((i, j, -1.0));
    }
    let constraints = graph
        .component_members()
        .into_iter()
        .map(|members| {
            let mut row = vec![0.0; n];
            for i in members {
                row[i] = 1.0;
            }
            row
        })
        .collect::<Vec<_>>();
    StructuredPrecision {
        matrix: SymSparse::from_triplets(n, trip),
        rank_deficiency: graph.n_components(),
        e: vec![0.0; constraints.len()],
        constraints,
    }
}

/// Indices of the rows/columns of `q` that form connected blocks, grouped by
/// the sparsity graph of `q`.
fn structure_components(q: &SymSparse) -> Vec<Vec<usize>> {
    let n = q.n();
    let mut nb = vec![Vec::new(); n];
    for &(i, j, v) in q.entries() {
        if i != j && v != 0.0 {
            nb[i].push(j);
            nb[j].push(i);
        }
    }
    let (label, count) = components(&nb);
    let mut out = vec![Vec::new(); count];
    for (i, &c) in label.iter().enumerate() {
        out[c].push(i);
    }
    out
}

/// Generalized-inverse marginal variances of a connected intrinsic block with
/// constant null vector, from `(Q + 11'/m)^{-1} - 11'/m`.
fn constrained_variances(block: &DMatrix<f64>) -> Result<Vec<f64>> {
    let m = block.nrows();
    let shift = 1.0 / m as f64;
    let aug = block.map(|v| v + shift);
    let chol = DenseCholesky::new(aug)?;
    let inv = chol.inverse();
    Ok((0..m).map(|i| inv[(i, i)] - shift).collect())
}

/// Scales each connected component of an ICAR structure so that the
/// geometric mean of its constrained marginal variances is one.
///
/// Single-region components (islands) have no structured part. Their
/// diagonal is set to one and their constraint dropped, so in a BYM2 block
/// they behave as an unstructured effect with the full variance.
pub fn scale_icar(q: &StructuredPrecision) -> Result<StructuredPrecision> {
    let n = q.dim();
    let dense = q.matrix.to_dense();
    let mut factor = vec![1.0; n];
    let mut islands = Vec::new();
    for members in structure_components(&q.matrix) {
        if members.len() == 1 {
            let i = members[0];
            if dense[(i, i)] != 0.0 && dense[(i, i)] != 1.0 {
                return Err(Error::InvalidParameter(format!(
                    "isolated entry {i} is not an ICAR island"
                )));
            }
            islands.push(i);
            continue;
        }
        let m = members.len();
        let block = DMatrix::from_fn(m, m, |a, b| dense[(members[a], members[b])]);
        let vars = constrained_variances(&block).map_err(|_| {
            Error::InvalidParameter(
                "structure is singular beyond its declared rank deficiency".into(),
            )
        })?;
        if vars.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::InvalidParameter(
                "non-positive constrained variance".into(),
            ));
        }
        let geo = (vars.iter().map(|v| v.ln()).sum::<f64>() / m as f64).exp();
        for &i in &members {
            factor[i] = geo;
        }
    }
    let mut trip: Vec<(usize, usize, f64)> = q
        .matrix
        .entries()
        .iter()
        .filter(|&&(i, j, _)| !(i == j && islands.contains(&i)))
        .map(|&(i, j, v)| (i, j, v * factor[i]))
        .collect();
    trip.extend(islands.iter().map(|&i| (i, i, 1.0)));
    let constraints: Vec<Vec<f64>> = q
        .constraints
        .iter()
        .filter(|row| {
            let nz: Vec<usize> = (0..n).filter(|&i| row[i] != 0.0).collect();
            !(nz.len() == 1 && islands.contains(&nz[0]))
        })
        .cloned()
        .collect();
    Ok(StructuredPrecision {
        matrix: SymSparse::from_triplets(n, trip),
        rank_deficiency: q.rank_deficiency - (q.constraints.len() - constraints.len()),
        e: vec![0.0; constraints.len()],
        constraints,
    })
}

/// Augmented BYM2 representation of `S = (sqrt(1-phi) v + sqrt(phi) u*) / sqrt(tau)`
/// with `v` white noise and `u*` following the scaled ICAR structure.
/// The latent pair is ordered `(S, u*)`.
#[derive(Debug, Clone)]
pub struct Bym2Block {
    pub tau: f64,
    pub phi: f64,
    pub scaled: StructuredPrecision,
}

pub fn bym2_block(tau: f64, phi: f64, scaled: &StructuredPrecision) -> Result<Bym2Block> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "BYM2 precision must be positive, got {tau}"
        )));
    }
    if !(0.0..=1.0).contains(&phi) {
        return Err(Error::InvalidParameter(format!(
            "BYM2 mixing must lie in [0, 1], got {phi}"
        )));
    }
    Ok(Bym2Block {
        tau,
        phi,
        scaled: scaled.clone(),
    })
}

impl Bym2Block {
    pub fn regions(&self) -> usize {
        self.scaled.dim()
    }

    /// Joint precision of `(S, u*)`, size `2R`. Undefined at `phi = 1`, where
    /// `S` is a deterministic function of `u*`.
    pub fn joint_precision(&self) -> Result<SymSparse> {
        if self.phi >= 1.0 {
            return Err(Error::InvalidParameter(
                "joint BYM2 precision is singular at phi = 1".into(),
            ));
        }
        Ok(bym2_joint_precision(
            self.tau,
            self.phi,
            &self.scaled.matrix,
        ))
    }

    /// Constraints on the joint `(S, u*)` vector: the structured sum-to-zero
    /// rows applied to `u*`.
    pub fn constraints(&self) -> Vec<Vec<f64>> {
        let r = self.regions();
        self.scaled
            .constraints
            .iter()
            .map(|row| {
                let mut full = vec![0.0; 2 * r];
                full[r..].copy_from_slice(row);
                full
            })
            .collect()
    }

    /// Marginal covariance of `S`: `((1-phi) I + phi R*^+) / tau`.
    pub fn covariance_s(&self) -> DMatrix<f64> {
        let cov_u = constrained_covariance(&self.scaled);
        let r = self.regions();
        DMatrix::from_fn(r, r, |i, j| {
            (if i == j { 1.0 - self.phi } else { 0.0 } + self.phi * cov_u[(i, j)]) / self.tau
        })
    }

    /// Draws `S` directly from its definition.
    pub fn sample_s<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let r = self.regions();
        let (vals, vecs) = sym_eigen(&self.scaled.matrix.to_dense());
        let max = vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut u = vec![0.0; r];
        for (k, &lam) in vals.iter().enumerate() {
            if lam > RANK_TOLERANCE * max {
                let z: f64 = rng.sample(StandardNormal);
                let s = z / lam.sqrt();
                for i in 0..r {
                    u[i] += s * vecs[(i, k)];
                }
            }
        }
        let a = (1.0 - self.phi).sqrt();
        let b = self.phi.sqrt();
        let scale = 1.0 / self.tau.sqrt();
        (0..r)
            .map(|i| {
                let v: f64 = rng.sample(StandardNormal);
                scale * (a * v + b * u[i])
            })
            .collect()
    }
}

/// Joint `(S, u*)` precision for `0 <= phi < 1`.
pub fn bym2_joint_precision(tau: f64, phi: f64, scaled: &SymSparse) -> SymSparse {
    let r = scaled.n();
    let a = tau / (1.0 - phi);
    let c = -(phi * tau).sqrt() / (1.0 - phi);
    let d = phi / (1.0 - phi);
    let mut trip = Vec::with_capacity(3 * r + scaled.nnz_upper());
    for i in 0..r {
        trip.push((i, i, a));
        trip.push((i, r + i, c));
        trip.push((r + i, r + i, d));
    }
    for &(i, j, v) in scaled.entries() {
        trip.push((r + i, r + j, v));
    }
    SymSparse::from_triplets(2 * r, trip)
}

/// Moore-Penrose inverse of a structure matrix, i.e. the covariance of the
/// constrained intrinsic field when its constraints span the null space.
pub fn constrained_covariance(q: &StructuredPrecision) -> DMatrix<f64> {
    let (vals, vecs) = sym_eigen(&q.matrix.to_dense());
    let max = vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let n = q.dim();
    let mut out = DMatrix::zeros(n, n);
    for (k, &lam) in vals.iter().enumerate() {
        if lam > RANK_TOLERANCE * max {
            let v = vecs.column(k);
            out += (v * v.transpose()) / lam;
        }
    }
    out
}
