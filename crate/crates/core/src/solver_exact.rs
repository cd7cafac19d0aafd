//! The discrete primal as a finite linear program over path masses.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::instance::{Conditioning, Direction, InstanceOptions, MarginalSystem, Payoff, PathGrid, VmotInstance};
use crate::simplex::{self, LpSolution, SimplexOptions, SparseLp};

/// Largest grid handed to the dense-basis simplex by default.
pub const DEFAULT_VARIABLE_BUDGET: usize = 1 << 16;

/// Masses below this are treated as numerical zeros when extracting a
/// coupling from a basic solution.
const MASS_CUTOFF: f64 = 1e-14;

/// Conditional martingale residuals are only assessed on histories carrying
/// at least this much mass.
pub const COUPLING_MASS_FLOOR: f64 = 1e-10;

/// A probability on the path grid, stored sparsely by flat path index.
#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    masses: Vec<(usize, f64)>,
    instance_hash: String,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CouplingDiagnostics {
    /// `|sum(pi) - 1|`.
    pub mass_error: f64,
    pub min_mass: f64,
    /// Largest total-variation distance between a pushforward and its target.
    pub marginal_tv: f64,
    /// Largest componentwise conditional martingale residual.
    pub martingale_residual: f64,
}

impl CouplingDiagnostics {
    pub fn is_valid(&self, tol: f64) -> bool {
        self.mass_error <= tol && self.min_mass >= 0.0 && self.marginal_tv <= tol && self.martingale_residual <= tol
    }
}

impl Coupling {
    /// Entries are sorted by path index; duplicate indices are summed.
    pub fn new(mut masses: Vec<(usize, f64)>, instance_hash: impl Into<String>) -> Self {
        masses.sort_by_key(|&(k, _)| k);
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(masses.len());
        for (k, m) in masses {
            match merged.last_mut() {
                Some((last, acc)) if *last == k => *acc += m,
                _ => merged.push((k, m)),
            }
        }
        Self {
            masses: merged,
            instance_hash: instance_hash.into(),
        }
    }

    fn from_dense(x: &[f64], instance_hash: &str) -> Self {
        let masses = x
            .iter()
            .enumerate()
            .filter(|&(_, &m)| m > MASS_CUTOFF)
            .map(|(k, &m)| (k, m))
            .collect();
        Self::new(masses, instance_hash)
    }

    pub fn masses(&self) -> &[(usize, f64)] {
        &self.masses
    }

    pub fn instance_hash(&self) -> &str {
        &self.instance_hash
    }

    pub fn mass(&self, flat: usize) -> f64 {
        self.masses
            .binary_search_by_key(&flat, |&(k, _)| k)
            .map_or(0.0, |pos| self.masses[pos].1)
    }

    pub fn total_mass(&self) -> f64 {
        self.masses.iter().map(|&(_, m)| m).sum()
    }

    /// `E_pi[f]` for a table indexed by flat path.
    pub fn expectation(&self, table: &[f64]) -> f64 {
        self.masses.iter().map(|&(k, m)| m * table[k]).sum()
    }

    /// Marginal, normalisation and martingale diagnostics against
    /// `instance`. Martingale residuals follow the instance's conditioning.
    pub fn diagnostics(&self, instance: &VmotInstance) -> Result<CouplingDiagnostics> {
        if self.instance_hash != instance.hash() {
            return Err(Error::MismatchedInstance {
                expected: instance.hash(),
                found: self.instance_hash.clone(),
            });
        }
        let grid = instance.grid();
        let (n, d) = (instance.periods(), instance.assets());
        if let Some(&(k, _)) = self.masses.last() {
            if k >= grid.n_paths() {
                return Err(Error::InvalidArgument(format!("path index {k} out of range")));
            }
        }
        let mass_error = (self.total_mass() - 1.0).abs();
        let min_mass = self.masses.iter().map(|&(_, m)| m).fold(f64::INFINITY, f64::min).min(0.0);

        let mut marginal_tv: f64 = 0.0;
        for t in 0..n {
            for i in 0..d {
                let mut push = vec![0.0; grid.size(t, i)];
                for &(k, m) in &self.masses {
                    push[grid.atom(k, t, i)] += m;
                }
                let w = instance.system().marginal(t, i).weights();
                let tv: f64 = push.iter().zip(w).map(|(a, b)| (a - b).abs()).sum::<f64>() / 2.0;
                marginal_tv = marginal_tv.max(tv);
            }
        }

        let mut martingale_residual: f64 = 0.0;
        for t in 0..n - 1 {
            let blocks = martingale_blocks(grid, instance.conditioning(), t, &self.masses);
            for (mass, moments) in blocks {
                if mass < COUPLING_MASS_FLOOR {
                    continue;
                }
                for m in moments {
                    martingale_residual = martingale_residual.max((m / mass).abs());
                }
            }
        }
        Ok(CouplingDiagnostics {
            mass_error,
            min_mass,
            marginal_tv,
            martingale_residual,
        })
    }
}

/// Mass and first increment moments `sum m (x_{t+1,i} - x_{t,i})` of every
/// conditioning block of maturity `t`.
fn martingale_blocks(
    grid: &PathGrid,
    conditioning: Conditioning,
    t: usize,
    masses: &[(usize, f64)],
) -> Vec<(f64, Vec<f64>)> {
    let d = grid.assets();
    let n_blocks = match conditioning {
        Conditioning::FullHistory => grid.n_prefixes(t + 1),
        Conditioning::Markov => grid.n_states(t),
    };
    let mut blocks = vec![(0.0, vec![0.0; d]); n_blocks];
    for &(k, m) in masses {
        let b = match conditioning {
            Conditioning::FullHistory => grid.prefix(k, t + 1),
            Conditioning::Markov => grid.state(k, t),
        };
        let entry = &mut blocks[b];
        entry.0 += m;
        for i in 0..d {
            entry.1[i] += m * (grid.value(k, t + 1, i) - grid.value(k, t, i));
        }
    }
    blocks
}

/// Tag of one constraint row. Indices are zero-based; `block` is a history
/// index of length `t + 1` under full-history conditioning and a state of
/// maturity `t` under Markov conditioning.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowTag {
    Marginal { t: usize, i: usize, atom: usize },
    Martingale { t: usize, block: usize, i: usize },
}

/// The assembled LP. The cost is stored unsigned; the direction is applied
/// when solving.
#[derive(Debug, Clone)]
pub struct LpTableau {
    lp: SparseLp,
    tags: Vec<RowTag>,
    n_marginal_rows: usize,
    n_dropped: usize,
    /// Instance hashes for `Min` and `Max`.
    hashes: [String; 2],
    periods: usize,
    assets: usize,
    conditioning: Conditioning,
    weights: Vec<Vec<Vec<f64>>>,
    block_counts: Vec<usize>,
}

impl LpTableau {
    pub fn n_variables(&self) -> usize {
        self.lp.n_cols()
    }

    pub fn n_rows(&self) -> usize {
        self.lp.n_rows()
    }

    /// Marginal rows kept in the LP.
    pub fn n_marginal_rows(&self) -> usize {
        self.n_marginal_rows
    }

    /// Marginal rows removed as linearly redundant.
    pub fn n_dropped_rows(&self) -> usize {
        self.n_dropped
    }

    pub fn n_martingale_rows(&self) -> usize {
        self.lp.n_rows() - self.n_marginal_rows
    }

    pub fn tags(&self) -> &[RowTag] {
        &self.tags
    }

    pub fn lp(&self) -> &SparseLp {
        &self.lp
    }

    /// Hash of the instance solved in `direction`.
    pub fn instance_hash(&self, direction: Direction) -> &str {
        &self.hashes[match direction {
            Direction::Min => 0,
            Direction::Max => 1,
        }]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ExactOptions {
    pub variable_budget: usize,
    pub simplex: SimplexOptions,
}

impl Default for ExactOptions {
    fn default() -> Self {
        Self {
            variable_budget: DEFAULT_VARIABLE_BUDGET,
            simplex: SimplexOptions::default(),
        }
    }
}

/// Builds the LP with the default variable budget.
pub fn assemble_lp(instance: &VmotInstance) -> Result<LpTableau> {
    assemble_lp_with(instance, DEFAULT_VARIABLE_BUDGET)
}

/// Variables are path masses. Marginal rows: every `(t, i, atom)` except
/// the last atom of each `(t, i) != (1, 1)`, whose row follows from the
/// others. Martingale rows: one per conditioning block and asset, dropping
/// rows whose increments vanish identically.
pub fn assemble_lp_with(instance: &VmotInstance, variable_budget: usize) -> Result<LpTableau> {
    let grid = instance.grid();
    let n_paths = grid.n_paths();
    if n_paths > variable_budget {
        return Err(Error::GridBudgetExceeded {
            paths: n_paths as u128,
            budget: variable_budget as u128,
        });
    }
    let costs = instance.costs()?;
    let (n, d) = (instance.periods(), instance.assets());
    let conditioning = instance.conditioning();

    let mut rhs = Vec::new();
    let mut tags = Vec::new();
    let mut marginal_row: Vec<Vec<Option<usize>>> = Vec::with_capacity(n * d);
    let mut weights = vec![Vec::with_capacity(d); n];
    let mut n_dropped = 0;
    for t in 0..n {
        for i in 0..d {
            let w = instance.system().marginal(t, i).weights();
            weights[t].push(w.to_vec());
            let keep = if t == 0 && i == 0 { w.len() } else { w.len() - 1 };
            n_dropped += w.len() - keep;
            let mut rows = vec![None; w.len()];
            for (atom, row) in rows.iter_mut().enumerate().take(keep) {
                *row = Some(rhs.len());
                rhs.push(w[atom]);
                tags.push(RowTag::Marginal { t, i, atom });
            }
            marginal_row.push(rows);
        }
    }
    let n_marginal_rows = rhs.len();

    // A martingale row is kept when some path in its block moves asset i.
    let mut block_counts = Vec::with_capacity(n - 1);
    let mut martingale_row: Vec<Vec<Option<usize>>> = Vec::with_capacity(n - 1);
    for t in 0..n - 1 {
        let n_blocks = match conditioning {
            Conditioning::FullHistory => grid.n_prefixes(t + 1),
            Conditioning::Markov => grid.n_states(t),
        };
        block_counts.push(n_blocks);
        let mut active = vec![false; n_blocks * d];
        for flat in 0..n_paths {
            let b = block_of(grid, conditioning, flat, t);
            for i in 0..d {
                if grid.value(flat, t + 1, i) != grid.value(flat, t, i) {
                    active[b * d + i] = true;
                }
            }
        }
        let mut rows = vec![None; n_blocks * d];
        for (k, row) in rows.iter_mut().enumerate() {
            if active[k] {
                *row = Some(rhs.len());
                rhs.push(0.0);
                tags.push(RowTag::Martingale { t, block: k / d, i: k % d });
            }
        }
        martingale_row.push(rows);
    }

    let mut lp = SparseLp::new(rhs);
    let mut entries = Vec::with_capacity(n * d * 2);
    for (flat, &c) in costs.iter().enumerate() {
        entries.clear();
        for t in 0..n {
            for i in 0..d {
                if let Some(r) = marginal_row[t * d + i][grid.atom(flat, t, i)] {
                    entries.push((r, 1.0));
                }
            }
        }
        for t in 0..n - 1 {
            let b = block_of(grid, conditioning, flat, t);
            for i in 0..d {
                if let Some(r) = martingale_row[t][b * d + i] {
                    entries.push((r, grid.value(flat, t + 1, i) - grid.value(flat, t, i)));
                }
            }
        }
        lp.add_column(c, &entries);
    }
    Ok(LpTableau {
        lp,
        tags,
        n_marginal_rows,
        n_dropped,
        hashes: [Direction::Min, Direction::Max].map(|dir| {
            if dir == instance.direction() {
                instance.hash()
            } else {
                instance.with_direction(dir).hash()
            }
        }),
        periods: n,
        assets: d,
        conditioning,
        weights,
        block_counts,
    })
}

#[inline]
fn block_of(grid: &PathGrid, conditioning: Conditioning, flat: usize, t: usize) -> usize {
    match conditioning {
        Conditioning::FullHistory => grid.prefix(flat, t + 1),
        Conditioning::Markov => grid.state(flat, t),
    }
}

/// Row multipliers mapped onto the hedge. `phi[t][i][atom]` and
/// `h[t][block][i]` (`t < N - 1`) are oriented so that
/// `sum phi + sum h . dx <= c` for `Min` and `>= c` for `Max`.
#[derive(Debug, Clone, PartialEq)]
pub struct LpDuals {
    pub phi: Vec<Vec<Vec<f64>>>,
    pub h: Vec<Vec<Vec<f64>>>,
    pub conditioning: Conditioning,
}

impl LpDuals {
    /// `sum_{t,i} mu_{t,i}(phi_{t,i})`.
    pub fn value(&self, weights: &[Vec<Vec<f64>>]) -> f64 {
        self.phi
            .iter()
            .zip(weights)
            .flat_map(|(pt, wt)| pt.iter().zip(wt))
            .map(|(p, w)| p.iter().zip(w).map(|(a, b)| a * b).sum::<f64>())
            .sum()
    }
}

#[derive(Debug, Clone)]
pub struct ExactSolution {
    pub value: f64,
    pub direction: Direction,
    pub coupling: Coupling,
    pub duals: LpDuals,
    pub iterations: usize,
    /// Oriented reduced costs `s c - A'y` per path.
    pub reduced_costs: Vec<f64>,
}

fn oriented(tableau: &LpTableau, direction: Direction) -> SparseLp {
    let mut lp = tableau.lp.clone();
    let s = direction.sign();
    lp.set_cost(tableau.lp.cost().iter().map(|c| s * c).collect());
    lp
}

/// Solves the LP in the given direction.
pub fn solve_exact(tableau: &LpTableau, direction: Direction) -> Result<ExactSolution> {
    solve_exact_with(tableau, direction, SimplexOptions::default())
}

pub fn solve_exact_with(tableau: &LpTableau, direction: Direction, opts: SimplexOptions) -> Result<ExactSolution> {
    let lp = oriented(tableau, direction);
    let sol = simplex::solve(&lp, opts)?;
    Ok(package(tableau, direction, sol))
}

fn package(tableau: &LpTableau, direction: Direction, sol: LpSolution) -> ExactSolution {
    let s = direction.sign();
    let (n, d) = (tableau.periods, tableau.assets);
    let mut phi: Vec<Vec<Vec<f64>>> = tableau
        .weights
        .iter()
        .map(|wt| wt.iter().map(|w| vec![0.0; w.len()]).collect())
        .collect();
    let mut h: Vec<Vec<Vec<f64>>> = tableau.block_counts.iter().map(|&b| vec![vec![0.0; d]; b]).collect();
    for (tag, &y) in tableau.tags.iter().zip(&sol.duals) {
        match *tag {
            RowTag::Marginal { t, i, atom } => phi[t][i][atom] = s * y,
            RowTag::Martingale { t, block, i } => h[t][block][i] = s * y,
        }
    }
    debug_assert_eq!(phi.len(), n);
    let coupling = Coupling::from_dense(&sol.x, tableau.instance_hash(direction));
    ExactSolution {
        value: s * sol.objective,
        direction,
        coupling,
        duals: LpDuals {
            phi,
            h,
            conditioning: tableau.conditioning,
        },
        iterations: sol.iterations,
        reduced_costs: sol.reduced_costs,
    }
}

/// Assembles and solves in the instance's own direction.
pub fn solve_instance(instance: &VmotInstance) -> Result<ExactSolution> {
    solve_instance_with(instance, ExactOptions::default())
}

pub fn solve_instance_with(instance: &VmotInstance, opts: ExactOptions) -> Result<ExactSolution> {
    let tableau = assemble_lp_with(instance, opts.variable_budget)?;
    solve_exact_with(&tableau, instance.direction(), opts.simplex)
}

/// Phase-one feasibility of the martingale transport polytope, without
/// consulting convex order.
pub fn feasibility_probe(system: &MarginalSystem) -> Result<bool> {
    feasibility_probe_with(system, DEFAULT_VARIABLE_BUDGET)
}

pub fn feasibility_probe_with(system: &MarginalSystem, variable_budget: usize) -> Result<bool> {
    let opts = InstanceOptions {
        path_budget: variable_budget as u128,
        enforce_convex_order: false,
        conditioning: Conditioning::FullHistory,
    };
    let payoff = Payoff::parse("0", system.periods(), system.assets())?;
    let instance = VmotInstance::build(system.clone(), payoff, Direction::Min, opts)?;
    let tableau = assemble_lp_with(&instance, variable_budget)?;
    simplex::is_feasible(&tableau.lp, SimplexOptions::default())
}

/// Up to `count` distinct optimal couplings, found by re-solving over the
/// optimal face with random objectives.
pub fn alternate_optima(
    tableau: &LpTableau,
    solution: &ExactSolution,
    count: usize,
    seed: u64,
) -> Result<Vec<Coupling>> {
    let face: Vec<usize> = solution
        .reduced_costs
        .iter()
        .enumerate()
        .filter(|&(_, &r)| r <= 1e-9)
        .map(|(j, _)| j)
        .collect();
    let mut restricted = SparseLp::new(tableau.lp.rhs().to_vec());
    for &j in &face {
        let (rows, vals) = tableau.lp.column(j);
        let entries: Vec<(usize, f64)> = rows.iter().copied().zip(vals.iter().copied()).collect();
        restricted.add_column(0.0, &entries);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut found: Vec<Coupling> = vec![solution.coupling.clone()];
    for _ in 0..count.saturating_mul(4) {
        if found.len() >= count {
            break;
        }
        restricted.set_cost((0..face.len()).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let sol = simplex::solve(&restricted, SimplexOptions::default())?;
        let mut x = vec![0.0; tableau.n_variables()];
        for (k, &j) in face.iter().enumerate() {
            x[j] = sol.x[k];
        }
        let c = Coupling::from_dense(&x, solution.coupling.instance_hash());
        let distinct = found.iter().all(|f| {
            let diff: f64 = x.iter().enumerate().map(|(k, &m)| (m - f.mass(k)).abs()).sum();
            diff > 1e-8
        });
        if distinct {
            found.push(c);
        }
    }
    found.truncate(count);
    Ok(found)
}

/// Writes the LP in CPLEX LP text format. Variables are `p<flat>`.
pub fn export_lp(tableau: &LpTableau, direction: Direction, out: &mut impl Write) -> Result<()> {
    fn term(coef: f64, var: &str, first: bool) -> String {
        match (coef < 0.0, first) {
            (true, _) => format!(" - {} {var}", -coef),
            (false, true) => format!(" {coef} {var}"),
            (false, false) => format!(" + {coef} {var}"),
        }
    }
    let lp = &tableau.lp;
    writeln!(out, "\\ vmot instance {}", tableau.instance_hash(direction))?;
    writeln!(
        out,
        "{}",
        match direction {
            Direction::Min => "Minimize",
            Direction::Max => "Maximize",
        }
    )?;
    let mut line = String::from(" obj:");
    let mut first = true;
    for (j, &c) in lp.cost().iter().enumerate() {
        if c != 0.0 {
            line.push_str(&term(c, &format!("p{j}"), first));
            first = false;
            if line.len() > 200 {
                writeln!(out, "{line}")?;
                line.clear();
            }
        }
    }
    if first {
        line.push_str(" 0 p0");
    }
    writeln!(out, "{line}")?;

    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); lp.n_rows()];
    for j in 0..lp.n_cols() {
        let (r, v) = lp.column(j);
        for (&r, &v) in r.iter().zip(v) {
            rows[r].push((j, v));
        }
    }
    writeln!(out, "Subject To")?;
    for (r, entries) in rows.iter().enumerate() {
        let name = match tableau.tags[r] {
            RowTag::Marginal { t, i, atom } => format!("m_{}_{}_{}", t + 1, i + 1, atom + 1),
            RowTag::Martingale { t, block, i } => format!("g_{}_{}_{}", t + 1, block + 1, i + 1),
        };
        let mut line = format!(" {name}:");
        for (k, &(j, v)) in entries.iter().enumerate() {
            line.push_str(&term(v, &format!("p{j}"), k == 0));
            if line.len() > 200 {
                writeln!(out, "{line}")?;
                line.clear();
            }
        }
        writeln!(out, "{line} = {}", lp.rhs()[r])?;
    }
    writeln!(out, "End")?;
    Ok(())
}
