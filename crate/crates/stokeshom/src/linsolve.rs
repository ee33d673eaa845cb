//! Sparse direct factorization for the discrete KKT systems.
//!
//! All saddle-point systems in this crate are symmetric (velocity stiffness,
//! divergence coupling, optional pressure block) plus a handful of mean
//! constraints. They are solved by one sparse LDL^T factorization:
//!
//! * ordering: geometric nested dissection on the structured lattice the
//!   dofs live on (separators are single grid lines, so fill stays near the
//!   2D optimum and the ordering is deterministic);
//! * factorization: simplicial up-looking LDL^T with static quasi-definite
//!   regularization (+delta on velocity-type dofs, -delta on pressure-type
//!   dofs) and a dynamic pivot floor;
//! * accuracy: iterative refinement against the unregularized matrix;
//! * constraints: mean rows are dense, which would destroy sparse fill, so
//!   they are kept out of the factorization and enforced exactly by a
//!   bordered block elimination. The nullspace the constraints fix is made
//!   invertible by diagonal pins whose effect is removed algebraically, so
//!   the solved system is exactly the KKT-with-multipliers system.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinError {
    #[error("matrix is structurally singular at column {0}")]
    Singular(usize),
    #[error("iterative refinement stalled at relative residual {0:.3e}")]
    Residual(f64),
    #[error("constraint Schur complement is singular")]
    SchurSingular,
}

/// Symmetric sparse matrix stored as its upper triangle in CSC form
/// (diagonal included; every structural diagonal entry must be present).
#[derive(Debug, Clone)]
pub struct SparseSym {
    pub n: usize,
    pub colptr: Vec<usize>,
    pub rows: Vec<u32>,
    pub vals: Vec<f64>,
}

impl SparseSym {
    /// Build from upper-triangle triplets (r <= c); duplicates are summed.
    pub fn from_triplets(n: usize, mut trips: Vec<(u32, u32, f64)>) -> Self {
        debug_assert!(trips.iter().all(|&(r, c, _)| r <= c));
        trips.sort_unstable_by_key(|&(r, c, _)| ((c as u64) << 32) | r as u64);
        let mut colptr = vec![0usize; n + 1];
        let mut rows = Vec::with_capacity(trips.len());
        let mut vals = Vec::with_capacity(trips.len());
        let mut last: Option<(u32, u32)> = None;
        for &(r, c, v) in &trips {
            if last == Some((r, c)) {
                *vals.last_mut().unwrap() += v;
            } else {
                rows.push(r);
                vals.push(v);
                colptr[c as usize + 1] += 1;
                last = Some((r, c));
            }
        }
        for c in 0..n {
            colptr[c + 1] += colptr[c];
        }
        SparseSym { n, colptr, rows, vals }
    }

    /// y = A x using only the stored upper triangle.
    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        y.fill(0.0);
        for c in 0..self.n {
            let xc = x[c];
            for p in self.colptr[c]..self.colptr[c + 1] {
                let r = self.rows[p] as usize;
                let v = self.vals[p];
                y[r] += v * xc;
                if r != c {
                    y[c] += v * x[r];
                }
            }
        }
    }

    /// Largest diagonal magnitude (scaling for regularization and pins).
    pub fn diag_scale(&self) -> f64 {
        let mut s: f64 = 0.0;
        for c in 0..self.n {
            for p in self.colptr[c]..self.colptr[c + 1] {
                if self.rows[p] as usize == c {
                    s = s.max(self.vals[p].abs());
                }
            }
        }
        if s == 0.0 {
            1.0
        } else {
            s
        }
    }

    pub fn add_to_diag(&mut self, k: usize, v: f64) {
        for p in self.colptr[k]..self.colptr[k + 1] {
            if self.rows[p] as usize == k {
                self.vals[p] += v;
                return;
            }
        }
        panic!("diagonal entry {k} not present structurally");
    }
}

/// Geometric nested-dissection ordering.
///
/// `coords` gives each dof an integer position on the half-step lattice of
/// its mesh (Q2 nodes at every lattice point, Q1 nodes at even points).
/// Dofs interact only within one element, so a single lattice line at an
/// even coordinate separates left from right. Wrapped (periodic) axes are
/// opened by removing their zero line first. Returns `order` with
/// `order[new] = old`.
pub fn nd_order(coords: &[(i32, i32)], wrap_x: bool, wrap_y: bool) -> Vec<u32> {
    let mut out = Vec::with_capacity(coords.len());
    let all: Vec<u32> = (0..coords.len() as u32).collect();
    nd_rec(all, wrap_x, wrap_y, coords, &mut out);
    debug_assert_eq!(out.len(), coords.len());
    out
}

const ND_LEAF: usize = 48;

fn emit_sorted(mut dofs: Vec<u32>, coords: &[(i32, i32)], out: &mut Vec<u32>) {
    dofs.sort_unstable_by_key(|&d| {
        let (x, y) = coords[d as usize];
        (y, x, d)
    });
    out.extend_from_slice(&dofs);
}

fn nd_rec(dofs: Vec<u32>, wrap_x: bool, wrap_y: bool, coords: &[(i32, i32)], out: &mut Vec<u32>) {
    if dofs.len() <= ND_LEAF {
        emit_sorted(dofs, coords, out);
        return;
    }
    if wrap_x {
        let (sep, rest): (Vec<u32>, Vec<u32>) =
            dofs.into_iter().partition(|&d| coords[d as usize].0 == 0);
        nd_rec(rest, false, wrap_y, coords, out);
        emit_sorted(sep, coords, out);
        return;
    }
    if wrap_y {
        let (sep, rest): (Vec<u32>, Vec<u32>) =
            dofs.into_iter().partition(|&d| coords[d as usize].1 == 0);
        nd_rec(rest, false, false, coords, out);
        emit_sorted(sep, coords, out);
        return;
    }
    let (mut xmin, mut xmax, mut ymin, mut ymax) = (i32::MAX, i32::MIN, i32::MAX, i32::MIN);
    for &d in &dofs {
        let (x, y) = coords[d as usize];
        xmin = xmin.min(x);
        xmax = xmax.max(x);
        ymin = ymin.min(y);
        ymax = ymax.max(y);
    }
    let split_x = (xmax - xmin) >= (ymax - ymin);
    let (lo, hi) = if split_x { (xmin, xmax) } else { (ymin, ymax) };
    // element boundaries sit at even lattice coordinates
    let mut cut = ((lo + hi) / 2) & !1;
    if cut <= lo {
        cut += 2;
    }
    if cut >= hi {
        cut -= 2;
    }
    if cut <= lo || cut >= hi {
        emit_sorted(dofs, coords, out);
        return;
    }
    let mut left = Vec::new();
    let mut right = Vec::new();
    let mut sep = Vec::new();
    for &d in &dofs {
        let g = if split_x { coords[d as usize].0 } else { coords[d as usize].1 };
        if g < cut {
            left.push(d);
        } else if g > cut {
            right.push(d);
        } else {
            sep.push(d);
        }
    }
    nd_rec(left, false, false, coords, out);
    nd_rec(right, false, false, coords, out);
    emit_sorted(sep, coords, out);
}

/// Simplicial LDL^T factorization of a permuted symmetric matrix.
pub struct Ldlt {
    n: usize,
    /// order[new] = old
    order: Vec<u32>,
    lp: Vec<usize>,
    li: Vec<u32>,
    lx: Vec<f64>,
    d: Vec<f64>,
}

impl Ldlt {
    /// Factor `a` (upper CSC) permuted by `order`, with static diagonal
    /// regularization `reg * signs[k]` and a dynamic pivot floor.
    pub fn factor(
        a: &SparseSym,
        order: &[u32],
        signs: &[i8],
        reg: f64,
    ) -> Result<Ldlt, LinError> {
        let n = a.n;
        let mut iorder = vec![0u32; n];
        for (newi, &old) in order.iter().enumerate() {
            iorder[old as usize] = newi as u32;
        }
        // permuted upper triplets
        let mut trips: Vec<(u32, u32, f64)> = Vec::with_capacity(a.rows.len());
        for c in 0..n {
            for p in a.colptr[c]..a.colptr[c + 1] {
                let r = a.rows[p] as usize;
                let (pr, pc) = (iorder[r], iorder[c]);
                let (pr, pc) = if pr <= pc { (pr, pc) } else { (pc, pr) };
                trips.push((pr, pc, a.vals[p]));
            }
        }
        let mut ap = SparseSym::from_triplets(n, trips);
        for k in 0..n {
            let s = signs[order[k] as usize] as f64;
            ap.add_to_diag(k, s * reg);
        }

        // symbolic: elimination tree and column counts
        let mut parent = vec![-1i64; n];
        let mut flag = vec![0u32; n];
        let mut lnz = vec![0usize; n];
        for k in 0..n {
            parent[k] = -1;
            flag[k] = k as u32;
            for p in ap.colptr[k]..ap.colptr[k + 1] {
                let mut i = ap.rows[p] as usize;
                while i < k && flag[i] != k as u32 {
                    if parent[i] == -1 {
                        parent[i] = k as i64;
                    }
                    lnz[i] += 1;
                    flag[i] = k as u32;
                    i = parent[i] as usize;
                }
            }
        }
        let mut lp = vec![0usize; n + 1];
        for k in 0..n {
            lp[k + 1] = lp[k] + lnz[k];
        }
        let nnz_l = lp[n];
        let mut li = vec![0u32; nnz_l];
        let mut lx = vec![0f64; nnz_l];
        let mut d = vec![0f64; n];

        // numeric: up-looking, one row of L per step
        let mut y = vec![0f64; n];
        let mut pattern = vec![0u32; n];
        let mut used = vec![0usize; n];
        let dyn_floor = 1e-13 * ap.diag_scale().max(reg);
        for k in 0..n {
            flag[k] = k as u32;
            let mut top = n;
            for p in ap.colptr[k]..ap.colptr[k + 1] {
                let i0 = ap.rows[p] as usize;
                if i0 <= k {
                    y[i0] += ap.vals[p];
                    let mut len = 0usize;
                    let mut i = i0;
                    while i < k && flag[i] != k as u32 {
                        pattern[len] = i as u32;
                        len += 1;
                        flag[i] = k as u32;
                        i = parent[i] as usize;
                    }
                    while len > 0 {
                        len -= 1;
                        top -= 1;
                        pattern[top] = pattern[len];
                    }
                }
            }
            d[k] = y[k];
            y[k] = 0.0;
            for pp in top..n {
                let i = pattern[pp] as usize;
                let yi = y[i];
                y[i] = 0.0;
                let p2 = lp[i] + used[i];
                for p in lp[i]..p2 {
                    y[li[p] as usize] -= lx[p] * yi;
                }
                let lki = yi / d[i];
                d[k] -= lki * yi;
                li[p2] = k as u32;
                lx[p2] = lki;
                used[i] += 1;
            }
            if d[k].abs() < dyn_floor {
                let s = signs[order[k] as usize] as f64;
                d[k] = if s < 0.0 { -dyn_floor } else { dyn_floor };
            }
        }

        Ok(Ldlt { n, order: order.to_vec(), lp, li, lx, d })
    }

    pub fn nnz_l(&self) -> usize {
        self.lx.len()
    }

    /// Solve with the factored (regularized, permuted) matrix.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x = vec![0.0; n];
        for k in 0..n {
            x[k] = b[self.order[k] as usize];
        }
        // L z = b
        for j in 0..n {
            let xj = x[j];
            if xj != 0.0 {
                for p in self.lp[j]..self.lp[j + 1] {
                    x[self.li[p] as usize] -= self.lx[p] * xj;
                }
            }
        }
        for k in 0..n {
            x[k] /= self.d[k];
        }
        // L^T x = z
        for j in (0..n).rev() {
            let mut s = x[j];
            for p in self.lp[j]..self.lp[j + 1] {
                s -= self.lx[p] * x[self.li[p] as usize];
            }
            x[j] = s;
        }
        let mut out = vec![0.0; n];
        for k in 0..n {
            out[self.order[k] as usize] = x[k];
        }
        out
    }
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// LDL^T factorization plus iterative refinement against the true
/// (unregularized) matrix.
pub struct RefinedSolver {
    pub a: SparseSym,
    f: Ldlt,
    tol: f64,
}

impl RefinedSolver {
    pub fn new(
        a: SparseSym,
        order: &[u32],
        signs: &[i8],
        tol: f64,
    ) -> Result<Self, LinError> {
        let reg = 1e-8 * a.diag_scale();
        let f = Ldlt::factor(&a, order, signs, reg)?;
        Ok(RefinedSolver { a, f, tol })
    }

    /// Solve to `tol` relative residual; returns (x, achieved residual).
    pub fn solve(&self, b: &[f64]) -> Result<(Vec<f64>, f64), LinError> {
        let bn = norm2(b).max(f64::MIN_POSITIVE);
        let mut x = self.f.solve(b);
        let mut ax = vec![0.0; self.a.n];
        let mut best = f64::INFINITY;
        for _ in 0..20 {
            self.a.matvec(&x, &mut ax);
            let mut r = b.to_vec();
            for i in 0..r.len() {
                r[i] -= ax[i];
            }
            let rel = norm2(&r) / bn;
            if rel <= self.tol * 0.1 {
                return Ok((x, rel));
            }
            if rel >= best * 0.5 {
                // stalled
                if rel <= self.tol {
                    return Ok((x, rel));
                }
                return Err(LinError::Residual(rel));
            }
            best = rel;
            let dx = self.f.solve(&r);
            for i in 0..x.len() {
                x[i] += dx[i];
            }
        }
        self.a.matvec(&x, &mut ax);
        let mut r = b.to_vec();
        for i in 0..r.len() {
            r[i] -= ax[i];
        }
        let rel = norm2(&r) / bn;
        if rel <= self.tol {
            Ok((x, rel))
        } else {
            Err(LinError::Residual(rel))
        }
    }
}

/// Exact solver for `[A C^T; C 0] [x; lambda] = [b; c]` where `A` is
/// symmetric (possibly singular with a small nullspace) and `C` holds a few
/// dense constraint rows fixing it.
///
/// The dense rows never enter the sparse factorization: the regularized
/// block is factored alone and the bordered system is solved by block
/// elimination with a small dense Schur complement. The bordered system
/// itself is nonsingular and well conditioned, so outer iterative
/// refinement against it removes the regularization error.
pub struct ConstrainedSystem {
    a: SparseSym,
    f: Ldlt,
    cons: Vec<Vec<f64>>,
    ycols: Vec<Vec<f64>>,
    schur: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    tol: f64,
}

impl ConstrainedSystem {
    pub fn new(
        a: SparseSym,
        order: &[u32],
        signs: &[i8],
        cons: Vec<Vec<f64>>,
        tol: f64,
    ) -> Result<Self, LinError> {
        let reg = 1e-8 * a.diag_scale();
        let f = Ldlt::factor(&a, order, signs, reg)?;
        let k = cons.len();
        let mut ycols = Vec::with_capacity(k);
        for row in &cons {
            ycols.push(f.solve(row));
        }
        let mut s = nalgebra::DMatrix::<f64>::zeros(k, k);
        for (col, y) in ycols.iter().enumerate() {
            for (i, row) in cons.iter().enumerate() {
                s[(i, col)] = dot(row, y);
            }
        }
        let schur = s.lu();
        if k > 0 && schur.determinant().abs() == 0.0 {
            return Err(LinError::SchurSingular);
        }
        Ok(ConstrainedSystem { a, f, cons, ycols, schur, tol })
    }

    pub fn n(&self) -> usize {
        self.a.n
    }

    fn solve_once(&self, b: &[f64], c: &[f64]) -> Result<(Vec<f64>, Vec<f64>), LinError> {
        let k = self.cons.len();
        let mut x = self.f.solve(b);
        if k == 0 {
            return Ok((x, Vec::new()));
        }
        let mut rhs = nalgebra::DVector::<f64>::zeros(k);
        for i in 0..k {
            rhs[i] = dot(&self.cons[i], &x) - c[i];
        }
        let lam = self.schur.solve(&rhs).ok_or(LinError::SchurSingular)?;
        for (col, y) in self.ycols.iter().enumerate() {
            let s = lam[col];
            if s != 0.0 {
                for i in 0..x.len() {
                    x[i] -= s * y[i];
                }
            }
        }
        Ok((x, lam.as_slice().to_vec()))
    }

    /// Residual of the true bordered system at (x, lambda).
    fn residual(&self, b: &[f64], c: &[f64], x: &[f64], lam: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
        let n = self.a.n;
        let mut ax = vec![0.0; n];
        self.a.matvec(x, &mut ax);
        let mut r1 = vec![0.0; n];
        for i in 0..n {
            let mut ct = 0.0;
            for (j, row) in self.cons.iter().enumerate() {
                ct += row[i] * lam[j];
            }
            r1[i] = b[i] - ax[i] - ct;
        }
        let mut r2 = vec![0.0; self.cons.len()];
        for (j, row) in self.cons.iter().enumerate() {
            r2[j] = c[j] - dot(row, x);
        }
        let scale = (norm2(b).powi(2) + norm2(c).powi(2)).sqrt().max(f64::MIN_POSITIVE);
        let rel = (norm2(&r1).powi(2) + norm2(&r2).powi(2)).sqrt() / scale;
        (r1, r2, rel)
    }

    /// Solve the bordered system; returns (x, lambda, relative residual).
    pub fn solve(&self, b: &[f64], c: &[f64]) -> Result<(Vec<f64>, Vec<f64>, f64), LinError> {
        let (mut x, mut lam) = self.solve_once(b, c)?;
        let (mut r1, mut r2, mut rel) = self.residual(b, c, &x, &lam);
        let mut best = f64::INFINITY;
        for _ in 0..12 {
            if rel <= self.tol * 0.1 || rel >= best {
                break;
            }
            best = rel;
            let (dx, dlam) = self.solve_once(&r1, &r2)?;
            for i in 0..x.len() {
                x[i] += dx[i];
            }
            for i in 0..lam.len() {
                lam[i] += dlam[i];
            }
            let out = self.residual(b, c, &x, &lam);
            r1 = out.0;
            r2 = out.1;
            rel = out.2;
        }
        if rel > self.tol {
            return Err(LinError::Residual(rel));
        }
        Ok((x, lam, rel))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nd_order_is_permutation() {
        let mut coords = Vec::new();
        for j in 0..17i32 {
            for i in 0..17i32 {
                coords.push((i, j));
            }
        }
        let ord = nd_order(&coords, false, false);
        let mut seen = vec![false; coords.len()];
        for &o in &ord {
            assert!(!seen[o as usize]);
            seen[o as usize] = true;
        }
        assert!(seen.iter().all(|&s| s));

        let ordp = nd_order(&coords, true, true);
        let mut seen = vec![false; coords.len()];
        for &o in &ordp {
            assert!(!seen[o as usize]);
            seen[o as usize] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn spd_tridiagonal_solve() {
        // -u'' on a path graph; compare against a dense solve.
        let n = 40;
        let mut trips = Vec::new();
        for i in 0..n {
            trips.push((i as u32, i as u32, 2.0));
            if i + 1 < n {
                trips.push((i as u32, i as u32 + 1, -1.0));
            }
        }
        let a = SparseSym::from_triplets(n, trips);
        let coords: Vec<(i32, i32)> = (0..n as i32).map(|i| (2 * i, 0)).collect();
        let order = nd_order(&coords, false, false);
        let signs = vec![1i8; n];
        let s = RefinedSolver::new(a.clone(), &order, &signs, 1e-12).unwrap();
        let b: Vec<f64> = (0..n).map(|i| (i as f64 * 0.7).sin()).collect();
        let (x, rel) = s.solve(&b).unwrap();
        assert!(rel < 1e-12);
        let mut ax = vec![0.0; n];
        a.matvec(&x, &mut ax);
        for i in 0..n {
            assert!((ax[i] - b[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn constrained_saddle_point_matches_dense() {
        // A singular (constants in the nullspace), fixed by a mean row.
        let n = 12;
        let mut trips = Vec::new();
        for i in 0..n {
            let deg = if i == 0 || i == n - 1 { 1.0 } else { 2.0 };
            trips.push((i as u32, i as u32, deg));
            if i + 1 < n {
                trips.push((i as u32, i as u32 + 1, -1.0));
            }
        }
        let a = SparseSym::from_triplets(n, trips);
        let coords: Vec<(i32, i32)> = (0..n as i32).map(|i| (2 * i, 0)).collect();
        let order = nd_order(&coords, false, false);
        let signs = vec![1i8; n];
        let cons = vec![vec![1.0 / n as f64; n]];
        let sys =
            ConstrainedSystem::new(a.clone(), &order, &signs, cons.clone(), 1e-11).unwrap();
        // compatible rhs: subtract the mean
        let mut b: Vec<f64> = (0..n).map(|i| (i as f64 * 1.3).cos()).collect();
        let mu = b.iter().sum::<f64>() / n as f64;
        for v in b.iter_mut() {
            *v -= mu;
        }
        let (x, lam, rel) = sys.solve(&b, &[0.0]).unwrap();
        assert!(rel < 1e-11, "rel = {rel}");
        // dense check on the full bordered system
        let dim = n + 1;
        let mut m = nalgebra::DMatrix::<f64>::zeros(dim, dim);
        for c in 0..n {
            for p in a.colptr[c]..a.colptr[c + 1] {
                let r = a.rows[p] as usize;
                m[(r, c)] = a.vals[p];
                m[(c, r)] = a.vals[p];
            }
        }
        for i in 0..n {
            m[(n, i)] = cons[0][i];
            m[(i, n)] = cons[0][i];
        }
        let mut rhs = nalgebra::DVector::<f64>::zeros(dim);
        for i in 0..n {
            rhs[i] = b[i];
        }
        let sol = m.lu().solve(&rhs).unwrap();
        for i in 0..n {
            assert!((x[i] - sol[i]).abs() < 1e-9, "x[{i}] {} vs {}", x[i], sol[i]);
        }
        assert!((lam[0] - sol[n]).abs() < 1e-9);
        // the constraint holds exactly at solver precision
        let mean: f64 = x.iter().sum::<f64>() / n as f64;
        assert!(mean.abs() < 1e-11);
    }

    #[test]
    fn quasidefinite_block_system() {
        // [K B^T; B -0] style system with a pressure-like block, solved and
        // verified against nalgebra dense.
        let nu = 9;
        let np = 4;
        let n = nu + np;
        let mut trips = Vec::new();
        for i in 0..nu {
            trips.push((i as u32, i as u32, 4.0));
            if i + 1 < nu {
                trips.push((i as u32, i as u32 + 1, -1.0));
            }
        }
        for j in 0..np {
            let r = nu + j;
            trips.push((r as u32, r as u32, 0.0)); // structural zero diagonal
            for i in 0..3 {
                let c = (2 * j + i).min(nu - 1);
                trips.push((c as u32, r as u32, 0.3 + 0.1 * i as f64));
            }
        }
        let a = SparseSym::from_triplets(n, trips);
        let coords: Vec<(i32, i32)> = (0..nu as i32)
            .map(|i| (2 * i, 0))
            .chain((0..np as i32).map(|j| (4 * j, 2)))
            .collect();
        let order = nd_order(&coords, false, false);
        let mut signs = vec![1i8; nu];
        signs.extend(vec![-1i8; np]);
        let s = RefinedSolver::new(a.clone(), &order, &signs, 1e-12).unwrap();
        let b: Vec<f64> = (0..n).map(|i| 1.0 / (1.0 + i as f64)).collect();
        let (x, rel) = s.solve(&b).unwrap();
        assert!(rel < 1e-12);
        let mut ax = vec![0.0; n];
        a.matvec(&x, &mut ax);
        for i in 0..n {
            assert!((ax[i] - b[i]).abs() < 1e-9);
        }
    }
}
