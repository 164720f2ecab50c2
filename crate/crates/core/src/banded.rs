//! Reverse Cuthill-McKee ordering and banded LU with partial pivoting.
//!
//! The factorization follows the classic column-oriented band algorithm:
//! row interchanges can widen the upper band by at most `kl`, so storage
//! reserves `2 kl + ku + 1` diagonals.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

/// Symmetrized adjacency of the nonzero entries, self loops dropped.
pub fn adjacency(a: &CsrMatrix) -> Vec<Vec<usize>> {
    let n = a.n();
    let mut adj = vec![Vec::new(); n];
    for ((i, j), &v) in a.pattern().entries().zip(a.values()) {
        if i != j && v != 0.0 {
            adj[i].push(j);
            adj[j].push(i);
        }
    }
    for row in &mut adj {
        row.sort_unstable();
        row.dedup();
    }
    adj
}

fn bfs_levels(adj: &[Vec<usize>], start: usize, level: &mut [usize]) -> (usize, usize) {
    // Returns (eccentricity, a minimum-degree node in the last level).
    // `level` must be all unset on entry and is restored on exit.
    let mut queue = VecDeque::from([start]);
    let mut seen = vec![start];
    level[start] = 0;
    let mut last = (0, start);
    while let Some(v) = queue.pop_front() {
        let lv = level[v];
        if lv > last.0 || (lv == last.0 && adj[v].len() < adj[last.1].len()) {
            last = (lv, v);
        }
        for &w in &adj[v] {
            if level[w] == usize::MAX {
                level[w] = lv + 1;
                seen.push(w);
                queue.push_back(w);
            }
        }
    }
    for v in seen {
        level[v] = usize::MAX;
    }
    last
}

/// `perm[new] = old`, the concatenation of `rcm_components`.
pub fn rcm_ordering(adj: &[Vec<usize>]) -> Vec<usize> {
    rcm_components(adj).concat()
}

/// RCM order of every connected component. Each component starts at a
/// pseudo-peripheral node; neighbors are visited by increasing degree, ties
/// by index.
pub fn rcm_components(adj: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let n = adj.len();
    let mut visited = vec![false; n];
    let mut components = Vec::new();
    let mut level = vec![usize::MAX; n];
    let mut by_degree: Vec<usize> = (0..n).collect();
    by_degree.sort_by_key(|&v| (adj[v].len(), v));
    for &seed in &by_degree {
        if visited[seed] {
            continue;
        }
        let mut start = seed;
        let (mut ecc, mut cand) = bfs_levels(adj, start, &mut level);
        loop {
            let (e2, c2) = bfs_levels(adj, cand, &mut level);
            if e2 <= ecc {
                break;
            }
            start = cand;
            ecc = e2;
            cand = c2;
        }
        let mut order = Vec::new();
        let mut queue = VecDeque::from([start]);
        visited[start] = true;
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut next: Vec<usize> = adj[v].iter().copied().filter(|&w| !visited[w]).collect();
            next.sort_by_key(|&w| (adj[w].len(), w));
            for w in next {
                visited[w] = true;
                queue.push_back(w);
            }
        }
        order.reverse();
        components.push(order);
    }
    components
}

/// Lower and upper bandwidth of `a` under the symmetric permutation `perm`.
pub fn bandwidth(a: &CsrMatrix, perm: &[usize]) -> (usize, usize) {
    let mut inv = vec![0; perm.len()];
    for (new, &old) in perm.iter().enumerate() {
        inv[old] = new;
    }
    let (mut kl, mut ku) = (0, 0);
    for ((i, j), &v) in a.pattern().entries().zip(a.values()) {
        if v == 0.0 {
            continue;
        }
        let (pi, pj) = (inv[i], inv[j]);
        if pi > pj {
            kl = kl.max(pi - pj);
        } else {
            ku = ku.max(pj - pi);
        }
    }
    (kl, ku)
}

#[derive(Debug, Clone)]
pub struct BandedLu {
    n: usize,
    kl: usize,
    ku: usize,
    ldab: usize,
    ab: Vec<f64>,
    ipiv: Vec<usize>,
    perm: Vec<usize>,
}

impl BandedLu {
    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        j * self.ldab + self.kl + self.ku + i - j
    }

    /// Orders with RCM, then factors.
    pub fn factor(a: &CsrMatrix) -> Result<Self> {
        let perm = rcm_ordering(&adjacency(a));
        Self::factor_with(a, perm)
    }

    /// Factors `a` symmetrically permuted by `perm` (`perm[new] = old`).
    pub fn factor_with(a: &CsrMatrix, perm: Vec<usize>) -> Result<Self> {
        let n = a.n();
        if perm.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "permutation of length {} for n = {n}",
                perm.len()
            )));
        }
        let mut local = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            local[old] = new;
        }
        Self::factor_block(a, perm, &local)
    }

    /// Factors the diagonal block of `a` on the rows `perm`, which must not
    /// couple to rows outside it. `local[old]` is the position in `perm`.
    fn factor_block(a: &CsrMatrix, perm: Vec<usize>, local: &[usize]) -> Result<Self> {
        let rp = a.pattern().row_ptr();
        let ci = a.pattern().col_idx();
        let vals = a.values();
        let (mut kl, mut ku) = (0, 0);
        for (pi, &i) in perm.iter().enumerate() {
            for p in rp[i]..rp[i + 1] {
                if vals[p] != 0.0 {
                    let pj = local[ci[p]];
                    if pi > pj {
                        kl = kl.max(pi - pj);
                    } else {
                        ku = ku.max(pj - pi);
                    }
                }
            }
        }
        let n = perm.len();
        let ldab = 2 * kl + ku + 1;
        let mut lu = Self {
            n,
            kl,
            ku,
            ldab,
            ab: vec![0.0; ldab * n],
            ipiv: vec![0; n],
            perm,
        };
        for pi in 0..n {
            let i = lu.perm[pi];
            for p in rp[i]..rp[i + 1] {
                if vals[p] != 0.0 {
                    let k = lu.idx(pi, local[ci[p]]);
                    lu.ab[k] += vals[p];
                }
            }
        }
        lu.factor_in_place()?;
        Ok(lu)
    }

    fn factor_in_place(&mut self) -> Result<()> {
        let (n, kl, ku) = (self.n, self.kl, self.ku);
        let mut ju = 0;
        for j in 0..n {
            let km = kl.min(n - 1 - j);
            let mut jp = 0;
            let mut best = self.ab[self.idx(j, j)].abs();
            for r in 1..=km {
                let v = self.ab[self.idx(j + r, j)].abs();
                if v > best {
                    best = v;
                    jp = r;
                }
            }
            self.ipiv[j] = j + jp;
            if best == 0.0 || !best.is_finite() {
                return Err(Error::SingularMatrix { pivot: self.perm[j] });
            }
            ju = ju.max((j + ku + jp).min(n - 1));
            if jp != 0 {
                for c in j..=ju {
                    let (x, y) = (self.idx(j, c), self.idx(j + jp, c));
                    self.ab.swap(x, y);
                }
            }
            // Trailing zeros below the pivot need no elimination.
            let km = (1..=km)
                .rev()
                .find(|&r| self.ab[self.idx(j + r, j)] != 0.0)
                .unwrap_or(0);
            if km > 0 {
                let d = self.idx(j, j);
                let inv_piv = 1.0 / self.ab[d];
                for r in 1..=km {
                    self.ab[d + r] *= inv_piv;
                }
                for c in j + 1..=ju {
                    let t = self.ab[self.idx(j, c)];
                    if t == 0.0 {
                        continue;
                    }
                    let base = self.idx(j, c);
                    for r in 1..=km {
                        self.ab[base + r] -= self.ab[d + r] * t;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn bandwidths(&self) -> (usize, usize) {
        (self.kl, self.ku)
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; rhs.len()];
        self.solve_into(rhs, &mut out);
        out
    }

    /// Solves for the rows in this factor's permutation, writing only those.
    pub fn solve_into(&self, rhs: &[f64], out: &mut [f64]) {
        let n = self.n;
        let mut x: Vec<f64> = self.perm.iter().map(|&old| rhs[old]).collect();
        for j in 0..n {
            let p = self.ipiv[j];
            if p != j {
                x.swap(j, p);
            }
            let km = self.kl.min(n - 1 - j);
            let xj = x[j];
            if xj != 0.0 {
                let d = self.idx(j, j);
                for r in 1..=km {
                    x[j + r] -= self.ab[d + r] * xj;
                }
            }
        }
        let kv = self.kl + self.ku;
        for j in (0..n).rev() {
            x[j] /= self.ab[self.idx(j, j)];
            let xj = x[j];
            if xj != 0.0 {
                for i in j.saturating_sub(kv)..j {
                    x[i] -= self.ab[self.idx(i, j)] * xj;
                }
            }
        }
        for (new, &old) in self.perm.iter().enumerate() {
            out[old] = x[new];
        }
    }
}

/// Block-diagonal splitting into connected components, each factored as a
/// banded matrix in its own RCM order.
#[derive(Debug, Clone)]
pub struct SparseLu {
    n: usize,
    blocks: Vec<BandedLu>,
}

impl SparseLu {
    pub fn factor(a: &CsrMatrix) -> Result<Self> {
        let n = a.n();
        let comps = rcm_components(&adjacency(a));
        let mut local = vec![0; n];
        for comp in &comps {
            for (k, &v) in comp.iter().enumerate() {
                local[v] = k;
            }
        }
        let blocks = comps
            .into_iter()
            .map(|comp| BandedLu::factor_block(a, comp, &local))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { n, blocks })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    /// Largest `(kl, ku)` over the blocks.
    pub fn max_bandwidths(&self) -> (usize, usize) {
        self.blocks
            .iter()
            .map(BandedLu::bandwidths)
            .fold((0, 0), |(a, b), (c, d)| (a.max(c), b.max(d)))
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for b in &self.blocks {
            b.solve_into(rhs, &mut out);
        }
        out
    }
}
