//! Compressed sparse rows, a reverse Cuthill–McKee envelope Cholesky
//! factorization, and a Jacobi-preconditioned conjugate gradient fallback.

use crate::error::{Error, Result};

/// Systems with more unknowns than this go to the iterative solver.
pub const DIRECT_SOLVE_LIMIT: usize = 50_000;
/// Relative residual target of the iterative solver.
pub const CG_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n_rows: usize,
    n_cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(n_rows: usize, n_cols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut sorted: Vec<(usize, usize, f64)> = triplets.to_vec();
        sorted.sort_by_key(|t| (t.0, t.1));
        let mut row_ptr = vec![0; n_rows + 1];
        let mut col_idx = Vec::with_capacity(sorted.len());
        let mut values: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in sorted {
            assert!(r < n_rows && c < n_cols, "triplet ({r}, {c}) out of bounds");
            if last == Some((r, c)) {
                *values.last_mut().expect("previous entry") += v;
            } else {
                col_idx.push(c);
                values.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 0..n_rows {
            row_ptr[i + 1] += row_ptr[i];
        }
        Self {
            n_rows,
            n_cols,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[r.clone()]
            .iter()
            .copied()
            .zip(self.values[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.col_idx[r.clone()].binary_search(&j) {
            Ok(k) => self.values[r.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n_cols);
        (0..self.n_rows)
            .map(|i| self.row(i).map(|(j, v)| v * x[j]).sum())
            .collect()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n_rows)
            .map(|i| self.row(i).map(|(_, v)| v).sum())
            .collect()
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.n_rows == self.n_cols
            && (0..self.n_rows).all(|i| self.row(i).all(|(j, v)| (v - self.get(j, i)).abs() <= tol))
    }

    /// Principal submatrix on `keep` (in the given order).
    pub fn submatrix(&self, keep: &[usize]) -> CsrMatrix {
        let mut map = vec![usize::MAX; self.n_cols];
        for (new, &old) in keep.iter().enumerate() {
            map[old] = new;
        }
        let mut trip = Vec::new();
        for (new_r, &old_r) in keep.iter().enumerate() {
            for (c, v) in self.row(old_r) {
                if map[c] != usize::MAX {
                    trip.push((new_r, map[c], v));
                }
            }
        }
        CsrMatrix::from_triplets(keep.len(), keep.len(), &trip)
    }
}

/// Reverse Cuthill–McKee ordering of the symmetric sparsity pattern.
/// Returns `perm` with `perm[new] = old`.
pub fn reverse_cuthill_mckee(a: &CsrMatrix) -> Vec<usize> {
    let n = a.n_rows();
    let adj: Vec<Vec<usize>> = (0..n)
        .map(|i| a.row(i).map(|(j, _)| j).filter(|&j| j != i).collect())
        .collect();
    let degree: Vec<usize> = adj.iter().map(Vec::len).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);

    let bfs_levels = |start: usize, visited: &[bool]| -> (usize, usize) {
        // returns (farthest node with min degree in last level, depth)
        let mut seen = visited.to_vec();
        let mut frontier = vec![start];
        seen[start] = true;
        let mut depth = 0;
        let mut last = frontier.clone();
        while !frontier.is_empty() {
            last = frontier.clone();
            let mut next = Vec::new();
            for &u in &frontier {
                for &v in &adj[u] {
                    if !seen[v] {
                        seen[v] = true;
                        next.push(v);
                    }
                }
            }
            if !next.is_empty() {
                depth += 1;
            }
            frontier = next;
        }
        let far = *last
            .iter()
            .min_by_key(|&&v| (degree[v], v))
            .expect("nonempty level");
        (far, depth)
    };

    while order.len() < n {
        let seed = (0..n)
            .filter(|&i| !visited[i])
            .min_by_key(|&i| (degree[i], i))
            .expect("unvisited node remains");
        // pseudo-peripheral start
        let mut start = seed;
        let (mut far, mut depth) = bfs_levels(start, &visited);
        for _ in 0..4 {
            let (f2, d2) = bfs_levels(far, &visited);
            if d2 <= depth {
                break;
            }
            start = far;
            far = f2;
            depth = d2;
        }
        let _ = far;
        let mut queue = std::collections::VecDeque::from([start]);
        visited[start] = true;
        while let Some(u) = queue.pop_front() {
            order.push(u);
            let mut nbrs: Vec<usize> = adj[u].iter().copied().filter(|&v| !visited[v]).collect();
            nbrs.sort_by_key(|&v| (degree[v], v));
            for v in nbrs {
                visited[v] = true;
                queue.push_back(v);
            }
        }
    }
    order.reverse();
    order
}

/// `L·Lᵀ` factorization stored as a variable-band (envelope) lower triangle.
#[derive(Debug, Clone)]
pub struct EnvelopeCholesky {
    perm: Vec<usize>,
    first: Vec<usize>,
    start: Vec<usize>,
    values: Vec<f64>,
}

impl EnvelopeCholesky {
    /// Factors a symmetric positive definite matrix after RCM reordering.
    pub fn factor(a: &CsrMatrix) -> Result<Self> {
        let n = a.n_rows();
        if n != a.n_cols() {
            return Err(Error::InvalidArgument(format!(
                "cholesky needs a square matrix, got {}x{}",
                n,
                a.n_cols()
            )));
        }
        let perm = reverse_cuthill_mckee(a);
        let mut inv = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let mut first: Vec<usize> = (0..n).collect();
        for (new_i, &old_i) in perm.iter().enumerate() {
            for (old_j, _) in a.row(old_i) {
                let new_j = inv[old_j];
                if new_j < first[new_i] {
                    first[new_i] = new_j;
                }
            }
        }
        let mut start = vec![0; n + 1];
        for i in 0..n {
            start[i + 1] = start[i] + (i - first[i] + 1);
        }
        let mut values = vec![0.0; start[n]];
        for (new_i, &old_i) in perm.iter().enumerate() {
            for (old_j, v) in a.row(old_i) {
                let new_j = inv[old_j];
                if new_j <= new_i {
                    values[start[new_i] + new_j - first[new_i]] = v;
                }
            }
        }
        let max_diag = (0..n)
            .map(|i| values[start[i] + i - first[i]].abs())
            .fold(0.0, f64::max);
        let pivot_floor = 1e-14 * max_diag.max(f64::MIN_POSITIVE);

        for i in 0..n {
            let fi = first[i];
            for j in fi..i {
                let fj = first[j];
                let k0 = fi.max(fj);
                let mut s = values[start[i] + j - fi];
                let ri = start[i] - fi;
                let rj = start[j] - fj;
                for k in k0..j {
                    s -= values[ri + k] * values[rj + k];
                }
                values[ri + j] = s / values[rj + j];
            }
            let ri = start[i] - fi;
            let mut d = values[ri + i];
            for k in fi..i {
                d -= values[ri + k] * values[ri + k];
            }
            if !(d > pivot_floor) {
                return Err(Error::SingularSystem(format!(
                    "non-positive pivot {d:.3e} at row {}",
                    perm[i]
                )));
            }
            values[ri + i] = d.sqrt();
        }
        Ok(Self {
            perm,
            first,
            start,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    /// Stored entries of the factor (envelope size).
    pub fn envelope_size(&self) -> usize {
        self.values.len()
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.len();
        assert_eq!(b.len(), n);
        let mut y: Vec<f64> = self.perm.iter().map(|&old| b[old]).collect();
        // forward: L y = b
        for i in 0..n {
            let fi = self.first[i];
            let ri = self.start[i] - fi;
            let mut s = y[i];
            for (v, yk) in self.values[ri + fi..ri + i].iter().zip(&y[fi..i]) {
                s -= v * yk;
            }
            y[i] = s / self.values[ri + i];
        }
        // backward: Lᵀ x = y
        for i in (0..n).rev() {
            let fi = self.first[i];
            let ri = self.start[i] - fi;
            y[i] /= self.values[ri + i];
            let yi = y[i];
            for (yk, v) in y[fi..i].iter_mut().zip(&self.values[ri + fi..ri + i]) {
                *yk -= v * yi;
            }
        }
        let mut x = vec![0.0; n];
        for (new, &old) in self.perm.iter().enumerate() {
            x[old] = y[new];
        }
        x
    }
}

/// Jacobi-preconditioned conjugate gradients for SPD systems.
pub fn conjugate_gradient(
    a: &CsrMatrix,
    b: &[f64],
    rel_tol: f64,
    max_iter: usize,
) -> Result<Vec<f64>> {
    let n = a.n_rows();
    let diag: Vec<f64> = (0..n).map(|i| a.get(i, i)).collect();
    if diag.iter().any(|d| !(*d > 0.0)) {
        return Err(Error::SingularSystem("non-positive diagonal".into()));
    }
    let b_norm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut x = vec![0.0; n];
    if b_norm == 0.0 {
        return Ok(x);
    }
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&diag).map(|(r, d)| r / d).collect();
    let mut p = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    for _ in 0..max_iter {
        let ap = a.mul_vec(&p);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if !(pap > 0.0) {
            return Err(Error::SingularSystem(
                "matrix is not positive definite".into(),
            ));
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let r_norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if r_norm <= rel_tol * b_norm {
            return Ok(x);
        }
        for i in 0..n {
            z[i] = r[i] / diag[i];
        }
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::SingularSystem(format!(
        "conjugate gradient did not reach relative residual {rel_tol:e} in {max_iter} iterations"
    )))
}

/// Solves `K x = 0` on the free rows of `k` with `x` prescribed on `fixed`,
/// for several right-hand-side columns at once. `fixed_values[c][i]` is the
/// value of column `c` at `fixed[i]`. Returns full-length columns.
pub fn solve_dirichlet(
    k: &CsrMatrix,
    fixed: &[usize],
    fixed_values: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>> {
    let n = k.n_rows();
    let mut is_fixed = vec![usize::MAX; n];
    for (i, &v) in fixed.iter().enumerate() {
        is_fixed[v] = i;
    }
    let free: Vec<usize> = (0..n).filter(|&v| is_fixed[v] == usize::MAX).collect();
    let mut cols: Vec<Vec<f64>> = fixed_values
        .iter()
        .map(|vals| {
            let mut x = vec![0.0; n];
            for (&v, &val) in fixed.iter().zip(vals) {
                x[v] = val;
            }
            x
        })
        .collect();
    if free.is_empty() {
        return Ok(cols);
    }
    let k_ii = k.submatrix(&free);
    let rhs: Vec<Vec<f64>> = cols
        .iter()
        .map(|x| {
            free.iter()
                .map(|&r| {
                    -k.row(r)
                        .filter(|(c, _)| is_fixed[*c] != usize::MAX)
                        .map(|(c, v)| v * x[c])
                        .sum::<f64>()
                })
                .collect()
        })
        .collect();
    let solutions: Vec<Vec<f64>> = if free.len() <= DIRECT_SOLVE_LIMIT {
        let chol = EnvelopeCholesky::factor(&k_ii)?;
        rhs.iter().map(|b| chol.solve(b)).collect()
    } else {
        rhs.iter()
            .map(|b| conjugate_gradient(&k_ii, b, CG_TOLERANCE, 20 * free.len()))
            .collect::<Result<_>>()?
    };
    for (x, sol) in cols.iter_mut().zip(solutions) {
        for (&v, s) in free.iter().zip(sol) {
            x[v] = s;
        }
    }
    Ok(cols)
}
