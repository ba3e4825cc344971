/// Elimination ordering for the sparse Cholesky factorization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ordering {
    Natural,
    MinimumDegree,
}

/// Greedy minimum-degree ordering on the explicit elimination graph.
///
/// `edges` are off-diagonal positions of a symmetric pattern. Returns `perm`
/// with `perm[new] = old`. Ties break on the smallest index, so the result is
/// deterministic.
pub fn minimum_degree(n: usize, edges: &[(usize, usize)]) -> Vec<usize> {
    let words = n.div_ceil(64);
    let mut adj = vec![0u64; n * words];
    let set = |adj: &mut [u64], i: usize, j: usize| adj[i * words + j / 64] |= 1u64 << (j % 64);
    for &(i, j) in edges {
        if i != j {
            set(&mut adj, i, j);
            set(&mut adj, j, i);
        }
    }
    let degree_of = |adj: &[u64], i: usize| -> usize {
        adj[i * words..(i + 1) * words]
            .iter()
            .map(|w| w.count_ones() as usize)
            .sum()
    };
    let mut degree: Vec<usize> = (0..n).map(|i| degree_of(&adj, i)).collect();
    let mut eliminated = vec![false; n];
    let mut perm = Vec::with_capacity(n);
    let mut nbrs = Vec::new();
    let mut row = vec![0u64; words];

    for _ in 0..n {
        let v = (0..n)
            .filter(|&i| !eliminated[i])
            .min_by_key(|&i| (degree[i], i))
            .expect("a node remains");
        eliminated[v] = true;
        perm.push(v);

        row.copy_from_slice(&adj[v * words..(v + 1) * words]);
        nbrs.clear();
        for (w, &bits) in row.iter().enumerate() {
            let mut b = bits;
            while b != 0 {
                let t = b.trailing_zeros() as usize;
                nbrs.push(w * 64 + t);
                b &= b - 1;
            }
        }
        for &u in &nbrs {
            let base = u * words;
            for w in 0..words {
                adj[base + w] |= row[w];
            }
            adj[base + u / 64] &= !(1u64 << (u % 64));
            adj[base + v / 64] &= !(1u64 << (v % 64));
            degree[u] = degree_of(&adj, u);
        }
        for w in &mut adj[v * words..(v + 1) * words] {
            *w = 0;
        }
    }
    perm
}
