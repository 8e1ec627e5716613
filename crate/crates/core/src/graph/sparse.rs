//! Block-sparse Cholesky factorization of symmetric positive-definite systems
//! with a greedy minimum-degree elimination order.

use std::collections::{BTreeSet, HashMap};

use nalgebra::{DMatrix, DVector};

/// Elimination order and fill pattern of a block-symmetric matrix.
#[derive(Debug, Clone)]
pub struct BlockPattern {
    // dims by original block index
    dims: Vec<usize>,
    order: Vec<usize>,
    position: Vec<usize>,
    // per elimination position j: positions i > j with a structural L_ij
    rows: Vec<Vec<usize>>,
    slots: HashMap<(usize, usize), usize>,
}

/// Lower-triangular blocks of a symmetric matrix, laid out by a [`BlockPattern`].
#[derive(Debug, Clone)]
pub struct BlockMatrix {
    blocks: Vec<DMatrix<f64>>,
}

impl BlockPattern {
    /// Builds the pattern for blocks of the given sizes, coupled by `edges`
    /// (pairs of original block indices; order and duplicates are irrelevant).
    pub fn new(dims: Vec<usize>, edges: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let n = dims.len();
        let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
        for (a, b) in edges {
            if a != b {
                adj[a].insert(b);
                adj[b].insert(a);
            }
        }
        // greedy minimum degree on the elimination graph, ties by index;
        // the cliques added here are exactly the Cholesky fill
        let mut alive: BTreeSet<(usize, usize)> = (0..n).map(|v| (adj[v].len(), v)).collect();
        let mut order = Vec::with_capacity(n);
        let mut neighbors: Vec<Vec<usize>> = vec![Vec::new(); n];
        while let Some((_, v)) = alive.pop_first() {
            order.push(v);
            let nb: Vec<usize> = adj[v].iter().copied().collect();
            for &u in &nb {
                alive.remove(&(adj[u].len(), u));
                adj[u].remove(&v);
            }
            for (k, &u) in nb.iter().enumerate() {
                for &w in &nb[k + 1..] {
                    adj[u].insert(w);
                    adj[w].insert(u);
                }
            }
            for &u in &nb {
                alive.insert((adj[u].len(), u));
            }
            neighbors[v] = nb;
            adj[v].clear();
        }
        let mut position = vec![0; n];
        for (p, &v) in order.iter().enumerate() {
            position[v] = p;
        }
        let mut slots = HashMap::new();
        let mut rows = Vec::with_capacity(n);
        for (j, &v) in order.iter().enumerate() {
            slots.insert((j, j), slots.len());
            let mut r: Vec<usize> = neighbors[v].iter().map(|&u| position[u]).collect();
            r.sort_unstable();
            for &i in &r {
                slots.insert((i, j), slots.len());
            }
            rows.push(r);
        }
        Self { dims, order, position, rows, slots }
    }

    pub fn n_blocks(&self) -> usize {
        self.dims.len()
    }

    /// Number of stored lower-triangular blocks including fill.
    pub fn n_stored(&self) -> usize {
        self.slots.len()
    }

    pub fn zeros(&self) -> BlockMatrix {
        let mut blocks = vec![DMatrix::zeros(0, 0); self.slots.len()];
        for (&(i, j), &s) in &self.slots {
            blocks[s] = DMatrix::zeros(self.dims[self.order[i]], self.dims[self.order[j]]);
        }
        BlockMatrix { blocks }
    }

    /// Adds `m` to block (p, q) of the symmetric matrix (original indices).
    /// Off-diagonal contributions need to be added once, for either order.
    pub fn add(&self, a: &mut BlockMatrix, p: usize, q: usize, m: &DMatrix<f64>) {
        let (i, j) = (self.position[p], self.position[q]);
        if i >= j {
            let s = self.slots[&(i, j)];
            a.blocks[s] += m;
        } else {
            let s = self.slots[&(j, i)];
            a.blocks[s] += m.transpose();
        }
    }

    pub fn diagonal(&self, a: &BlockMatrix, p: usize) -> DVector<f64> {
        let j = self.position[p];
        a.blocks[self.slots[&(j, j)]].diagonal()
    }

    pub fn add_to_diagonal(&self, a: &mut BlockMatrix, p: usize, d: &DVector<f64>) {
        let j = self.position[p];
        let b = &mut a.blocks[self.slots[&(j, j)]];
        for k in 0..d.len() {
            b[(k, k)] += d[k];
        }
    }

    /// In-place block Cholesky `A = L Lᵀ`; None if a pivot block is not
    /// positive definite.
    pub fn factor(&self, mut a: BlockMatrix) -> Option<BlockMatrix> {
        let n = self.n_blocks();
        for j in 0..n {
            let d = self.slots[&(j, j)];
            let chol = a.blocks[d].clone().cholesky()?;
            let l = chol.l();
            for &i in &self.rows[j] {
                let s = self.slots[&(i, j)];
                // L_ij = A_ij L_jj⁻ᵀ
                let t = l.solve_lower_triangular(&a.blocks[s].transpose())?;
                a.blocks[s] = t.transpose();
            }
            a.blocks[d] = l;
            for (x, &i) in self.rows[j].iter().enumerate() {
                let lij = a.blocks[self.slots[&(i, j)]].clone();
                for &k in &self.rows[j][..=x] {
                    let lkj = &a.blocks[self.slots[&(k, j)]];
                    let upd = &lij * lkj.transpose();
                    let s = self.slots[&(i, k)];
                    a.blocks[s] -= upd;
                }
            }
        }
        Some(a)
    }

    /// Solves `L Lᵀ x = b` for a factor from [`BlockPattern::factor`]. The
    /// right-hand side and solution are indexed by original block.
    pub fn solve(&self, l: &BlockMatrix, b: &[DVector<f64>]) -> Option<Vec<DVector<f64>>> {
        let n = self.n_blocks();
        let mut y: Vec<DVector<f64>> = self.order.iter().map(|&v| b[v].clone()).collect();
        for j in 0..n {
            let ljj = &l.blocks[self.slots[&(j, j)]];
            y[j] = ljj.solve_lower_triangular(&y[j])?;
            for &i in &self.rows[j] {
                let upd = &l.blocks[self.slots[&(i, j)]] * &y[j];
                y[i] -= upd;
            }
        }
        for j in (0..n).rev() {
            let mut rhs = y[j].clone();
            for &i in &self.rows[j] {
                rhs -= l.blocks[self.slots[&(i, j)]].transpose() * &y[i];
            }
            y[j] = l.blocks[self.slots[&(j, j)]].transpose().solve_upper_triangular(&rhs)?;
        }
        let mut x = vec![DVector::zeros(0); n];
        for (j, v) in self.order.iter().enumerate() {
            x[*v] = y[j].clone();
        }
        Some(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_dense_solve_on_random_sparse_systems() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..30 {
            let nb = rng.random_range(1..12);
            let dims: Vec<usize> = (0..nb).map(|_| rng.random_range(1..5)).collect();
            let offsets: Vec<usize> = dims
                .iter()
                .scan(0, |acc, d| {
                    let o = *acc;
                    *acc += d;
                    Some(o)
                })
                .collect();
            let total: usize = dims.iter().sum();
            let mut edges = Vec::new();
            for a in 0..nb {
                for b in 0..a {
                    if rng.random_bool(0.25) {
                        edges.push((a, b));
                    }
                }
            }
            // SPD matrix with the given block sparsity: JᵀJ + I
            let mut dense = DMatrix::<f64>::zeros(total, total);
            let pattern = BlockPattern::new(dims.clone(), edges.clone());
            let mut a = pattern.zeros();
            let mut add = |p: usize, q: usize, m: DMatrix<f64>, dense: &mut DMatrix<f64>| {
                pattern.add(&mut a, p, q, &m);
                let mut v = dense.view_mut((offsets[p], offsets[q]), (dims[p], dims[q]));
                v += &m;
                if p != q {
                    let mut v = dense.view_mut((offsets[q], offsets[p]), (dims[q], dims[p]));
                    v += m.transpose();
                }
            };
            for (p, &d) in dims.iter().enumerate() {
                add(p, p, DMatrix::identity(d, d), &mut dense);
            }
            for &(p, q) in &edges {
                let jp = DMatrix::from_fn(2, dims[p], |_, _| rng.random_range(-1.0..1.0));
                let jq = DMatrix::from_fn(2, dims[q], |_, _| rng.random_range(-1.0..1.0));
                add(p, p, jp.transpose() * &jp, &mut dense);
                add(q, q, jq.transpose() * &jq, &mut dense);
                add(p, q, jp.transpose() * &jq, &mut dense);
            }
            let b: Vec<DVector<f64>> =
                dims.iter().map(|&d| DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0))).collect();
            let l = pattern.factor(a).unwrap();
            let x = pattern.solve(&l, &b).unwrap();
            let flat_b = DVector::from_iterator(total, b.iter().flat_map(|v| v.iter().copied()));
            let expect = dense.cholesky().unwrap().solve(&flat_b);
            let got = DVector::from_iterator(total, x.iter().flat_map(|v| v.iter().copied()));
            assert!((expect - got).amax() < 1e-10);
        }
    }

    #[test]
    fn star_graph_eliminates_leaves_first_without_fill() {
        // hub 0 connected to many leaves: leaves first, so no fill appears
        let n = 50;
        let p = BlockPattern::new(vec![3; n], (1..n).map(|v| (0, v)));
        assert!(p.position[0] >= n - 2);
        assert_eq!(p.n_stored(), n + (n - 1));
    }

    #[test]
    fn rejects_indefinite() {
        let p = BlockPattern::new(vec![1], []);
        let mut a = p.zeros();
        p.add(&mut a, 0, 0, &DMatrix::from_element(1, 1, -1.0));
        assert!(p.factor(a).is_none());
    }
}
