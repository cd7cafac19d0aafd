//! Two-phase revised simplex for `min c'x  s.t.  Ax = b, x >= 0` with a sparse
//! column-major constraint matrix and an explicit dense basis inverse.
//!
//! Entering variables follow Dantzig's rule with lowest-index tie breaking;
//! after a run of degenerate pivots the solver switches to Bland's rule until
//! the objective moves again, which rules out cycling. The basis inverse is
//! refactored periodically and once more before optimality is declared.

use crate::error::{Error, Result};

/// Sparse LP in equality standard form.
#[derive(Debug, Clone, Default)]
pub struct SparseLp {
    n_rows: usize,
    col_start: Vec<usize>,
    row_idx: Vec<usize>,
    vals: Vec<f64>,
    rhs: Vec<f64>,
    cost: Vec<f64>,
}

impl SparseLp {
    pub fn new(rhs: Vec<f64>) -> Self {
        Self {
            n_rows: rhs.len(),
            col_start: vec![0],
            row_idx: Vec::new(),
            vals: Vec::new(),
            rhs,
            cost: Vec::new(),
        }
    }

    /// Appends a column; zero coefficients are dropped. Returns its index.
    pub fn add_column(&mut self, cost: f64, entries: &[(usize, f64)]) -> usize {
        for &(r, v) in entries {
            assert!(r < self.n_rows, "row {r} out of range");
            if v != 0.0 {
                self.row_idx.push(r);
                self.vals.push(v);
            }
        }
        self.col_start.push(self.row_idx.len());
        self.cost.push(cost);
        self.cost.len() - 1
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.cost.len()
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn rhs(&self) -> &[f64] {
        &self.rhs
    }

    pub fn cost(&self) -> &[f64] {
        &self.cost
    }

    pub fn set_cost(&mut self, cost: Vec<f64>) {
        assert_eq!(cost.len(), self.n_cols());
        self.cost = cost;
    }

    pub fn column(&self, j: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.col_start[j], self.col_start[j + 1]);
        (&self.row_idx[a..b], &self.vals[a..b])
    }

    /// `y'A_j`.
    pub fn dot_column(&self, j: usize, y: &[f64]) -> f64 {
        let (rows, vals) = self.column(j);
        rows.iter().zip(vals).map(|(&r, &v)| y[r] * v).sum()
    }

    /// `Ax`.
    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_rows];
        for (j, &xj) in x.iter().enumerate() {
            if xj != 0.0 {
                let (rows, vals) = self.column(j);
                for (&r, &v) in rows.iter().zip(vals) {
                    out[r] += v * xj;
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SimplexOptions {
    /// Zero means `max(50_000, 50 (m + n))`.
    pub max_iter: usize,
    pub feas_tol: f64,
    pub opt_tol: f64,
    pub pivot_tol: f64,
    pub refactor_every: usize,
    /// Consecutive degenerate pivots before switching to Bland's rule.
    pub degenerate_switch: usize,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        Self {
            max_iter: 0,
            feas_tol: 1e-9,
            opt_tol: 1e-10,
            pivot_tol: 1e-9,
            refactor_every: 64,
            degenerate_switch: 40,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LpSolution {
    pub x: Vec<f64>,
    /// Row multipliers `y` with `c - A'y >= 0` at optimality.
    pub duals: Vec<f64>,
    pub reduced_costs: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    /// Basic variable per row; indices `>= n_cols` are artificials left on
    /// redundant rows.
    pub basis: Vec<usize>,
}

struct Simplex<'a> {
    lp: &'a SparseLp,
    opts: SimplexOptions,
    m: usize,
    n: usize,
    sign: Vec<f64>,
    b: Vec<f64>,
    basis: Vec<usize>,
    position: Vec<Option<usize>>,
    binv: Vec<f64>,
    xb: Vec<f64>,
    iterations: usize,
    max_iter: usize,
    since_refactor: usize,
}

enum Phase {
    One,
    Two,
}

impl<'a> Simplex<'a> {
    fn new(lp: &'a SparseLp, opts: SimplexOptions) -> Self {
        let (m, n) = (lp.n_rows(), lp.n_cols());
        let sign: Vec<f64> = lp.rhs.iter().map(|&b| if b < 0.0 { -1.0 } else { 1.0 }).collect();
        let b: Vec<f64> = lp.rhs.iter().zip(&sign).map(|(b, s)| b * s).collect();
        let mut binv = vec![0.0; m * m];
        for r in 0..m {
            binv[r * m + r] = 1.0;
        }
        let mut position = vec![None; n + m];
        for r in 0..m {
            position[n + r] = Some(r);
        }
        let max_iter = if opts.max_iter == 0 {
            50_000usize.max(50 * (m + n))
        } else {
            opts.max_iter
        };
        Self {
            lp,
            opts,
            m,
            n,
            sign,
            xb: b.clone(),
            b,
            basis: (n..n + m).collect(),
            position,
            binv,
            iterations: 0,
            max_iter,
            since_refactor: 0,
        }
    }

    fn cost(&self, j: usize, phase: &Phase) -> f64 {
        match phase {
            Phase::One => {
                if j >= self.n {
                    1.0
                } else {
                    0.0
                }
            }
            Phase::Two => {
                if j >= self.n {
                    0.0
                } else {
                    self.lp.cost[j]
                }
            }
        }
    }

    /// Column `j` of the sign-adjusted matrix `[A' | I]`, as (row, value).
    fn for_column(&self, j: usize, mut f: impl FnMut(usize, f64)) {
        if j >= self.n {
            f(j - self.n, 1.0);
        } else {
            let (rows, vals) = self.lp.column(j);
            for (&r, &v) in rows.iter().zip(vals) {
                f(r, v * self.sign[r]);
            }
        }
    }

    fn duals(&self, phase: &Phase) -> Vec<f64> {
        let m = self.m;
        let mut y = vec![0.0; m];
        for p in 0..m {
            let c = self.cost(self.basis[p], phase);
            if c != 0.0 {
                let row = &self.binv[p * m..(p + 1) * m];
                for (yr, &v) in y.iter_mut().zip(row) {
                    *yr += c * v;
                }
            }
        }
        y
    }

    fn reduced_cost(&self, j: usize, y: &[f64], phase: &Phase) -> f64 {
        let mut d = self.cost(j, phase);
        self.for_column(j, |r, v| d -= y[r] * v);
        d
    }

    fn ftran(&self, j: usize) -> Vec<f64> {
        let m = self.m;
        let mut alpha = vec![0.0; m];
        self.for_column(j, |r, v| {
            for (p, a) in alpha.iter_mut().enumerate() {
                *a += self.binv[p * m + r] * v;
            }
        });
        alpha
    }

    fn pivot(&mut self, p: usize, q: usize, alpha: &[f64]) {
        let m = self.m;
        let ap = alpha[p];
        let theta = self.xb[p] / ap;
        for k in 0..m {
            if k != p {
                self.xb[k] -= theta * alpha[k];
            }
        }
        self.xb[p] = theta;
        let inv = 1.0 / ap;
        let (before, rest) = self.binv.split_at_mut(p * m);
        let (prow, after) = rest.split_at_mut(m);
        for v in prow.iter_mut() {
            *v *= inv;
        }
        for (k, row) in before.chunks_mut(m).chain(after.chunks_mut(m)).enumerate() {
            let k = if k < p { k } else { k + 1 };
            let f = alpha[k];
            if f != 0.0 {
                for (v, &pv) in row.iter_mut().zip(prow.iter()) {
                    *v -= f * pv;
                }
            }
        }
        let leaving = self.basis[p];
        self.position[leaving] = None;
        self.position[q] = Some(p);
        self.basis[p] = q;
        self.iterations += 1;
        self.since_refactor += 1;
    }

    /// Rebuilds the basis inverse from scratch and recomputes `x_B` with one
    /// step of iterative refinement.
    fn refactor(&mut self) -> Result<()> {
        let m = self.m;
        let mut bmat = vec![0.0; m * m];
        for p in 0..m {
            let j = self.basis[p];
            self.for_column(j, |r, v| bmat[r * m + p] = v);
        }
        self.binv = invert(&bmat, m)?;
        let mut xb = mat_vec(&self.binv, &self.b, m);
        let bx = mat_vec(&bmat, &xb, m);
        let resid: Vec<f64> = self.b.iter().zip(&bx).map(|(b, v)| b - v).collect();
        let corr = mat_vec(&self.binv, &resid, m);
        for (x, c) in xb.iter_mut().zip(corr) {
            *x += c;
        }
        self.xb = xb;
        self.since_refactor = 0;
        Ok(())
    }

    fn run(&mut self, phase: &Phase) -> Result<()> {
        let mut degenerate_run = 0usize;
        let mut bland = false;
        loop {
            if self.iterations >= self.max_iter {
                return Err(Error::IterationLimit(self.max_iter));
            }
            if self.since_refactor >= self.opts.refactor_every {
                self.refactor()?;
            }
            let y = self.duals(phase);
            let mut entering: Option<(usize, f64)> = None;
            for j in 0..self.n + self.m {
                if self.position[j].is_some() {
                    continue;
                }
                if j >= self.n && matches!(phase, Phase::Two) {
                    continue;
                }
                let d = self.reduced_cost(j, &y, phase);
                if d < -self.opts.opt_tol {
                    if bland {
                        entering = Some((j, d));
                        break;
                    }
                    if entering.is_none_or(|(_, best)| d < best) {
                        entering = Some((j, d));
                    }
                }
            }
            let Some((q, _)) = entering else {
                if self.since_refactor > 0 {
                    self.refactor()?;
                    continue;
                }
                return Ok(());
            };
            let alpha = self.ftran(q);
            let mut leave: Option<(usize, f64)> = None;
            let mut min_ratio = f64::INFINITY;
            for (p, &a) in alpha.iter().enumerate() {
                if a > self.opts.pivot_tol {
                    min_ratio = min_ratio.min(self.xb[p].max(0.0) / a);
                }
            }
            if !min_ratio.is_finite() {
                return Err(Error::Unbounded);
            }
            let slack = 1e-12 * (1.0 + min_ratio);
            for (p, &a) in alpha.iter().enumerate() {
                if a > self.opts.pivot_tol && self.xb[p].max(0.0) / a <= min_ratio + slack {
                    let better = match leave {
                        None => true,
                        Some((bp, ba)) => {
                            if bland {
                                self.basis[p] < self.basis[bp]
                            } else {
                                a > ba || (a == ba && self.basis[p] < self.basis[bp])
                            }
                        }
                    };
                    if better {
                        leave = Some((p, a));
                    }
                }
            }
            let (p, _) = leave.expect("ratio test found a candidate");
            if self.xb[p] < 0.0 {
                self.xb[p] = 0.0;
            }
            if min_ratio <= 1e-12 {
                degenerate_run += 1;
                if degenerate_run > self.opts.degenerate_switch {
                    bland = true;
                }
            } else {
                degenerate_run = 0;
                bland = false;
            }
            self.pivot(p, q, &alpha);
        }
    }

    /// Pivots artificials at zero level out of the basis where a real column
    /// can replace them; the rest sit on redundant rows.
    fn expel_artificials(&mut self) {
        let m = self.m;
        for p in 0..m {
            if self.basis[p] < self.n {
                continue;
            }
            let row = &self.binv[p * m..(p + 1) * m];
            let mut best: Option<(usize, f64)> = None;
            for j in 0..self.n {
                if self.position[j].is_some() {
                    continue;
                }
                let mut rho = 0.0;
                self.for_column(j, |r, v| rho += row[r] * v);
                if rho.abs() > self.opts.pivot_tol && best.is_none_or(|(_, b)| rho.abs() > b) {
                    best = Some((j, rho.abs()));
                }
            }
            if let Some((q, _)) = best {
                let alpha = self.ftran(q);
                self.xb[p] = 0.0;
                self.pivot(p, q, &alpha);
            }
        }
    }
}

fn mat_vec(a: &[f64], x: &[f64], m: usize) -> Vec<f64> {
    a.chunks(m).map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

/// Gauss-Jordan inverse with partial pivoting.
fn invert(a: &[f64], m: usize) -> Result<Vec<f64>> {
    let mut work = a.to_vec();
    let mut inv = vec![0.0; m * m];
    for r in 0..m {
        inv[r * m + r] = 1.0;
    }
    for col in 0..m {
        let (mut piv, mut best) = (col, work[col * m + col].abs());
        for r in col + 1..m {
            let v = work[r * m + col].abs();
            if v > best {
                piv = r;
                best = v;
            }
        }
        if best < 1e-13 {
            return Err(Error::Numerical("singular basis during refactorisation".into()));
        }
        if piv != col {
            for k in 0..m {
                work.swap(col * m + k, piv * m + k);
                inv.swap(col * m + k, piv * m + k);
            }
        }
        let d = 1.0 / work[col * m + col];
        for k in 0..m {
            work[col * m + k] *= d;
            inv[col * m + k] *= d;
        }
        for r in 0..m {
            if r == col {
                continue;
            }
            let f = work[r * m + col];
            if f != 0.0 {
                for k in 0..m {
                    work[r * m + k] -= f * work[col * m + k];
                    inv[r * m + k] -= f * inv[col * m + k];
                }
            }
        }
    }
    Ok(inv)
}

/// Phase-one residual: the minimal total infeasibility `sum |Ax - b|` over
/// `x >= 0`, with the phase-one basis left for reuse.
fn phase_one(s: &mut Simplex) -> Result<f64> {
    s.run(&Phase::One)?;
    s.refactor()?;
    Ok(s
        .basis
        .iter()
        .zip(&s.xb)
        .filter(|(&j, _)| j >= s.n)
        .map(|(_, &x)| x.max(0.0))
        .sum())
}

fn infeasible_threshold(lp: &SparseLp, opts: &SimplexOptions) -> f64 {
    let scale: f64 = lp.rhs.iter().map(|b| b.abs()).sum();
    opts.feas_tol * scale.max(1.0)
}

/// Whether `{x >= 0 : Ax = b}` is nonempty.
pub fn is_feasible(lp: &SparseLp, opts: SimplexOptions) -> Result<bool> {
    let mut s = Simplex::new(lp, opts);
    let resid = phase_one(&mut s)?;
    Ok(resid <= infeasible_threshold(lp, &opts))
}

/// Solves `min c'x  s.t.  Ax = b, x >= 0`.
pub fn solve(lp: &SparseLp, opts: SimplexOptions) -> Result<LpSolution> {
    let mut s = Simplex::new(lp, opts);
    let resid = phase_one(&mut s)?;
    if resid > infeasible_threshold(lp, &opts) {
        return Err(Error::Infeasible { residual: resid });
    }
    s.expel_artificials();
    s.refactor()?;
    s.run(&Phase::Two)?;

    let (m, n) = (s.m, s.n);
    let y_signed = s.duals(&Phase::Two);
    let duals: Vec<f64> = y_signed.iter().zip(&s.sign).map(|(y, sg)| y * sg).collect();
    let mut x = vec![0.0; n];
    for p in 0..m {
        let j = s.basis[p];
        if j < n {
            x[j] = s.xb[p].max(0.0);
        }
    }
    let reduced_costs: Vec<f64> = (0..n).map(|j| lp.cost[j] - lp.dot_column(j, &duals)).collect();
    let objective = x.iter().zip(&lp.cost).map(|(x, c)| x * c).sum();
    Ok(LpSolution {
        x,
        duals,
        reduced_costs,
        objective,
        iterations: s.iterations,
        basis: s.basis,
    })
}
