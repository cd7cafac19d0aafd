//! Entropic regularisation of the path LP, solved by cyclic Bregman
//! projections in the log domain.
//!
//! The iterate is the Gibbs measure
//! `pi(x) = R(x) exp((psi^+(x) + g(x) . dx - s c(x)) / eps)` with `R` the
//! product of the marginals and `s` the direction sign. A sweep projects onto
//! every marginal constraint (closed form per atom) and then onto every
//! martingale block (a monotone scalar root-find per block and asset). The
//! potentials `(psi, g)` live in the subhedging orientation and are returned
//! as a dual certificate.

use rayon::prelude::*;

use crate::dual_recovery::{CertificateSource, DualCertificate};
use crate::error::{Error, Result};
use crate::instance::{Conditioning, PathGrid, VmotInstance};
use crate::solver_exact::Coupling;

pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 20_000;
/// Sweeps without a 1% improvement of the best violation before giving up.
pub const DEFAULT_STALL_WINDOW: usize = 2_000;

/// Paths per work unit in reductions. Fixed so that sums do not depend on
/// thread scheduling.
const CHUNK: usize = 4096;

/// Potentials of an entropic solve, reusable as a warm start.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropicState {
    pub epsilon: f64,
    /// `psi[t][i][atom]`, payoff units.
    pub phi: Vec<Vec<Vec<f64>>>,
    /// `g[t][block][i]` with blocks as in the instance's conditioning.
    pub h: Vec<Vec<Vec<f64>>>,
    pub iterations: usize,
    pub violation: f64,
}

impl EntropicState {
    pub fn zero(instance: &VmotInstance, epsilon: f64) -> Self {
        let grid = instance.grid();
        let (n, d) = (instance.periods(), instance.assets());
        Self {
            epsilon,
            phi: (0..n).map(|t| (0..d).map(|i| vec![0.0; grid.size(t, i)]).collect()).collect(),
            h: (0..n - 1)
                .map(|t| vec![vec![0.0; d]; n_blocks(grid, instance.conditioning(), t)])
                .collect(),
            iterations: 0,
            violation: f64::INFINITY,
        }
    }

    fn matches(&self, other: &Self) -> bool {
        let shape = |s: &Self| {
            (
                s.phi.iter().map(|r| r.iter().map(Vec::len).collect::<Vec<_>>()).collect::<Vec<_>>(),
                s.h.iter().map(|r| (r.len(), r.first().map_or(0, Vec::len))).collect::<Vec<_>>(),
            )
        };
        shape(self) == shape(other)
    }
}

#[derive(Debug, Clone)]
pub struct EntropicOptions {
    pub epsilon: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub stall_window: usize,
    pub warm_start: Option<EntropicState>,
}

impl EntropicOptions {
    pub fn new(epsilon: f64) -> Self {
        Self {
            epsilon,
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
            stall_window: DEFAULT_STALL_WINDOW,
            warm_start: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EntropicSolution {
    /// `<c, pi_eps>`, without the entropy term.
    pub value: f64,
    pub epsilon: f64,
    pub coupling: Coupling,
    /// Raw potentials as a certificate; hedges only approximately.
    pub certificate: DualCertificate,
    pub state: EntropicState,
    pub converged: bool,
    pub iterations: usize,
    pub marginal_violation: f64,
    pub martingale_violation: f64,
    /// Violation after every sweep.
    pub history: Vec<f64>,
}

fn n_blocks(grid: &PathGrid, conditioning: Conditioning, t: usize) -> usize {
    match conditioning {
        Conditioning::FullHistory => grid.n_prefixes(t + 1),
        Conditioning::Markov => grid.n_states(t),
    }
}

#[inline]
fn block_of(grid: &PathGrid, conditioning: Conditioning, flat: usize, t: usize) -> usize {
    match conditioning {
        Conditioning::FullHistory => grid.prefix(flat, t + 1),
        Conditioning::Markov => grid.state(flat, t),
    }
}

/// Runs the projections at one temperature.
pub fn solve_entropic(instance: &VmotInstance, epsilon: f64, max_iter: usize, tol: f64) -> Result<EntropicSolution> {
    let opts = EntropicOptions {
        max_iter,
        tol,
        ..EntropicOptions::new(epsilon)
    };
    solve_entropic_with(instance, &opts)
}

pub fn solve_entropic_with(instance: &VmotInstance, opts: &EntropicOptions) -> Result<EntropicSolution> {
    if !(opts.epsilon > 0.0 && opts.epsilon.is_finite()) {
        return Err(Error::InvalidArgument(format!("epsilon must be positive, got {}", opts.epsilon)));
    }
    if !(opts.tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance must be positive, got {}", opts.tol)));
    }
    let mut state = EntropicState::zero(instance, opts.epsilon);
    if let Some(w) = &opts.warm_start {
        if !w.matches(&state) {
            return Err(Error::InvalidArgument("warm start does not fit this instance".into()));
        }
        state.phi = w.phi.clone();
        state.h = w.h.clone();
    }
    let mut engine = Engine::new(instance, state)?;
    engine.run(opts)
}

struct Engine<'a> {
    instance: &'a VmotInstance,
    grid: &'a PathGrid,
    conditioning: Conditioning,
    eps: f64,
    state: EntropicState,
    /// `log pi` per path.
    log_pi: Vec<f64>,
    /// Block membership for Markov conditioning.
    members: Vec<Vec<Vec<usize>>>,
}

impl<'a> Engine<'a> {
    fn new(instance: &'a VmotInstance, state: EntropicState) -> Result<Self> {
        let grid = instance.grid();
        let (n, d) = (instance.periods(), instance.assets());
        let costs = instance.costs()?;
        let s = instance.direction().sign();
        let conditioning = instance.conditioning();
        let eps = state.epsilon;
        let sys = instance.system();
        let log_w: Vec<Vec<Vec<f64>>> = (0..n)
            .map(|t| (0..d).map(|i| sys.marginal(t, i).weights().iter().map(|w| w.ln()).collect()).collect())
            .collect();
        let log_pi: Vec<f64> = (0..grid.n_paths())
            .into_par_iter()
            .map(|k| {
                let mut v = -s * costs[k];
                let mut log_ref = 0.0;
                for t in 0..n {
                    for i in 0..d {
                        let a = grid.atom(k, t, i);
                        v += state.phi[t][i][a];
                        log_ref += log_w[t][i][a];
                    }
                }
                for t in 0..n - 1 {
                    let g = &state.h[t][block_of(grid, conditioning, k, t)];
                    for i in 0..d {
                        v += g[i] * (grid.value(k, t + 1, i) - grid.value(k, t, i));
                    }
                }
                v / eps + log_ref
            })
            .collect();
        let members = match conditioning {
            Conditioning::FullHistory => Vec::new(),
            Conditioning::Markov => (0..n - 1)
                .map(|t| {
                    let mut m = vec![Vec::new(); grid.n_states(t)];
                    for k in 0..grid.n_paths() {
                        m[grid.state(k, t)].push(k);
                    }
                    m
                })
                .collect(),
        };
        Ok(Self {
            instance,
            grid,
            conditioning,
            eps,
            state,
            log_pi,
            members,
        })
    }

    fn project_marginal(&mut self, t: usize, i: usize) -> Result<()> {
        let grid = self.grid;
        let na = grid.size(t, i);
        let maxes: Vec<Vec<f64>> = self
            .log_pi
            .par_chunks(CHUNK)
            .enumerate()
            .map(|(c, chunk)| {
                let mut m = vec![f64::NEG_INFINITY; na];
                for (off, &l) in chunk.iter().enumerate() {
                    let a = grid.atom(c * CHUNK + off, t, i);
                    m[a] = m[a].max(l);
                }
                m
            })
            .collect();
        let mut top = vec![f64::NEG_INFINITY; na];
        for m in &maxes {
            for (a, v) in top.iter_mut().zip(m) {
                *a = a.max(*v);
            }
        }
        let sums: Vec<Vec<f64>> = self
            .log_pi
            .par_chunks(CHUNK)
            .enumerate()
            .map(|(c, chunk)| {
                let mut s = vec![0.0; na];
                for (off, &l) in chunk.iter().enumerate() {
                    let a = grid.atom(c * CHUNK + off, t, i);
                    s[a] += (l - top[a]).exp();
                }
                s
            })
            .collect();
        let w = self.instance.system().marginal(t, i).weights();
        let mut delta = vec![0.0; na];
        for a in 0..na {
            let total: f64 = sums.iter().map(|s| s[a]).sum();
            let lse = top[a] + total.ln();
            if !lse.is_finite() {
                return Err(Error::NumericUnderflow(format!(
                    "mass of atom {} of marginal ({}, {}) vanished",
                    a + 1,
                    t + 1,
                    i + 1
                )));
            }
            delta[a] = w[a].ln() - lse;
            self.state.phi[t][i][a] += self.eps * delta[a];
        }
        self.log_pi.par_chunks_mut(CHUNK).enumerate().for_each(|(c, chunk)| {
            for (off, l) in chunk.iter_mut().enumerate() {
                *l += delta[grid.atom(c * CHUNK + off, t, i)];
            }
        });
        Ok(())
    }

    fn project_martingale(&mut self, t: usize, i: usize) {
        let grid = self.grid;
        let incr = |k: usize| grid.value(k, t + 1, i) - grid.value(k, t, i);
        let lambdas: Vec<f64> = match self.conditioning {
            Conditioning::FullHistory => {
                let len = grid.suffix_len(t + 1);
                let log_pi = &self.log_pi;
                (0..grid.n_prefixes(t + 1))
                    .into_par_iter()
                    .map(|b| {
                        let range = b * len..(b + 1) * len;
                        let dx: Vec<f64> = range.clone().map(incr).collect();
                        root(&log_pi[range], &dx)
                    })
                    .collect()
            }
            Conditioning::Markov => {
                let log_pi = &self.log_pi;
                self.members[t]
                    .par_iter()
                    .map(|m| {
                        let l: Vec<f64> = m.iter().map(|&k| log_pi[k]).collect();
                        let dx: Vec<f64> = m.iter().map(|&k| incr(k)).collect();
                        root(&l, &dx)
                    })
                    .collect()
            }
        };
        for (b, &lam) in lambdas.iter().enumerate() {
            self.state.h[t][b][i] += self.eps * lam;
        }
        let conditioning = self.conditioning;
        self.log_pi.par_chunks_mut(CHUNK).enumerate().for_each(|(c, chunk)| {
            for (off, l) in chunk.iter_mut().enumerate() {
                let k = c * CHUNK + off;
                let lam = lambdas[block_of(grid, conditioning, k, t)];
                if lam != 0.0 {
                    *l += lam * incr(k);
                }
            }
        });
    }

    /// Largest marginal total variation and largest conditional martingale
    /// residual over blocks with mass at least `floor`.
    fn violations(&self, floor: f64) -> (f64, f64) {
        let grid = self.grid;
        let (n, d) = (grid.periods(), grid.assets());
        let sizes: Vec<usize> = (0..n).flat_map(|t| (0..d).map(move |i| grid.size(t, i))).collect();
        let offsets: Vec<usize> = sizes
            .iter()
            .scan(0, |acc, &s| {
                let o = *acc;
                *acc += s;
                Some(o)
            })
            .collect();
        let total: usize = sizes.iter().sum();
        let partial: Vec<Vec<f64>> = self
            .log_pi
            .par_chunks(CHUNK)
            .enumerate()
            .map(|(c, chunk)| {
                let mut acc = vec![0.0; total];
                for (off, &l) in chunk.iter().enumerate() {
                    let k = c * CHUNK + off;
                    let p = l.exp();
                    for t in 0..n {
                        for i in 0..d {
                            acc[offsets[t * d + i] + grid.atom(k, t, i)] += p;
                        }
                    }
                }
                acc
            })
            .collect();
        let mut masses = vec![0.0; total];
        for p in &partial {
            for (m, v) in masses.iter_mut().zip(p) {
                *m += v;
            }
        }
        let sys = self.instance.system();
        let mut marginal: f64 = 0.0;
        for t in 0..n {
            for i in 0..d {
                let o = offsets[t * d + i];
                let w = sys.marginal(t, i).weights();
                let tv: f64 = w.iter().enumerate().map(|(a, wa)| (masses[o + a] - wa).abs()).sum::<f64>() / 2.0;
                marginal = marginal.max(if tv.is_nan() { f64::INFINITY } else { tv });
            }
        }

        let mut martingale: f64 = 0.0;
        for t in 0..n - 1 {
            let moments: Vec<(f64, Vec<f64>)> = match self.conditioning {
                Conditioning::FullHistory => {
                    let len = grid.suffix_len(t + 1);
                    self.log_pi
                        .par_chunks(len)
                        .enumerate()
                        .map(|(b, chunk)| {
                            let mut m = (0.0, vec![0.0; d]);
                            for (off, &l) in chunk.iter().enumerate() {
                                let k = b * len + off;
                                let p = l.exp();
                                m.0 += p;
                                for i in 0..d {
                                    m.1[i] += p * (grid.value(k, t + 1, i) - grid.value(k, t, i));
                                }
                            }
                            m
                        })
                        .collect()
                }
                Conditioning::Markov => self.members[t]
                    .par_iter()
                    .map(|mem| {
                        let mut m = (0.0, vec![0.0; d]);
                        for &k in mem {
                            let p = self.log_pi[k].exp();
                            m.0 += p;
                            for i in 0..d {
                                m.1[i] += p * (grid.value(k, t + 1, i) - grid.value(k, t, i));
                            }
                        }
                        m
                    })
                    .collect(),
            };
            for (mass, m) in moments {
                if mass.is_nan() || m.iter().any(|v| v.is_nan()) {
                    martingale = f64::INFINITY;
                } else if mass >= floor {
                    for v in m {
                        martingale = martingale.max((v / mass).abs());
                    }
                }
            }
        }
        (marginal, martingale)
    }

    fn run(&mut self, opts: &EntropicOptions) -> Result<EntropicSolution> {
        let (n, d) = (self.grid.periods(), self.grid.assets());
        let mut history = Vec::new();
        let mut best = f64::INFINITY;
        let mut best_at = 0usize;
        let mut converged = false;
        let (mut marginal, mut martingale) = (f64::INFINITY, f64::INFINITY);
        let mut sweeps = 0usize;
        while sweeps < opts.max_iter {
            for t in 0..n {
                for i in 0..d {
                    self.project_marginal(t, i)?;
                }
            }
            for t in 0..n - 1 {
                for i in 0..d {
                    self.project_martingale(t, i);
                }
            }
            sweeps += 1;
            (marginal, martingale) = self.violations(opts.tol);
            let v = marginal.max(martingale);
            if !v.is_finite() {
                return Err(Error::NumericUnderflow(format!(
                    "non-finite iterate after {sweeps} sweeps at epsilon {}",
                    self.eps
                )));
            }
            history.push(v);
            if v < opts.tol {
                converged = true;
                break;
            }
            if v < 0.99 * best {
                best = v;
                best_at = sweeps;
            } else if sweeps - best_at >= opts.stall_window {
                return Err(Error::Stalled {
                    violation: v,
                    iterations: sweeps,
                });
            }
        }
        self.finish(converged, sweeps, marginal, martingale, history)
    }

    fn finish(
        &mut self,
        converged: bool,
        sweeps: usize,
        marginal: f64,
        martingale: f64,
        history: Vec<f64>,
    ) -> Result<EntropicSolution> {
        let instance = self.instance;
        let grid = self.grid;
        let costs = instance.costs()?;
        let value: f64 = self
            .log_pi
            .par_chunks(CHUNK)
            .enumerate()
            .map(|(c, chunk)| {
                chunk
                    .iter()
                    .enumerate()
                    .map(|(off, &l)| l.exp() * costs[c * CHUNK + off])
                    .sum::<f64>()
            })
            .collect::<Vec<f64>>()
            .iter()
            .sum();
        let masses: Vec<(usize, f64)> = self
            .log_pi
            .iter()
            .enumerate()
            .map(|(k, &l)| (k, l.exp()))
            .filter(|&(_, m)| m > 0.0)
            .collect();
        let coupling = Coupling::new(masses, instance.hash());

        let s = instance.direction().sign();
        let mut cert = DualCertificate::zero(instance, CertificateSource::Entropic);
        cert.epsilon = Some(self.eps);
        for (t, row) in self.state.phi.iter().enumerate() {
            for (i, table) in row.iter().enumerate() {
                cert.phi[t][i] = table.iter().map(|v| s * v).collect();
            }
        }
        for t in 0..grid.periods() - 1 {
            for p in 0..grid.n_prefixes(t + 1) {
                let b = match self.conditioning {
                    Conditioning::FullHistory => p,
                    Conditioning::Markov => grid.state_of_prefix(p, t + 1),
                };
                cert.h[t][p] = self.state.h[t][b].iter().map(|v| s * v).collect();
            }
        }
        self.state.iterations += sweeps;
        self.state.violation = marginal.max(martingale);
        Ok(EntropicSolution {
            value,
            epsilon: self.eps,
            coupling,
            certificate: cert,
            state: self.state.clone(),
            converged,
            iterations: sweeps,
            marginal_violation: marginal,
            martingale_violation: martingale,
            history,
        })
    }
}

/// The multiplier `lambda` with `sum_x exp(l_x + lambda dx_x) dx_x = 0`,
/// by safeguarded Newton on a bracketing interval. The left side is
/// increasing in `lambda`. Without a sign change in `dx` the root sits at
/// infinity and a large finite step is returned.
fn root(l: &[f64], dx: &[f64]) -> f64 {
    let scale = dx.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    let eval = |lam: f64| {
        let top = l
            .iter()
            .zip(dx)
            .filter(|(_, &d)| d != 0.0)
            .map(|(a, d)| a + lam * d)
            .fold(f64::NEG_INFINITY, f64::max);
        if !top.is_finite() {
            return (0.0, 1.0, 1.0);
        }
        let (mut f, mut fp, mut abs) = (0.0, 0.0, 0.0);
        for (a, &d) in l.iter().zip(dx) {
            if d != 0.0 {
                let e = (a + lam * d - top).exp();
                f += d * e;
                fp += d * d * e;
                abs += d.abs() * e;
            }
        }
        (f, fp, abs)
    };

    let (f0, _, _) = eval(0.0);
    if f0 == 0.0 {
        return 0.0;
    }
    let mut step = 1.0 / scale;
    let (mut lo, mut hi);
    if f0 > 0.0 {
        hi = 0.0;
        lo = -step;
        while eval(lo).0 > 0.0 {
            step *= 2.0;
            if step * scale > 1e15 {
                return lo;
            }
            hi = lo;
            lo = -step;
        }
    } else {
        lo = 0.0;
        hi = step;
        while eval(hi).0 < 0.0 {
            step *= 2.0;
            if step * scale > 1e15 {
                return hi;
            }
            lo = hi;
            hi = step;
        }
    }
    let mut lam = 0.5 * (lo + hi);
    for _ in 0..200 {
        let (f, fp, abs) = eval(lam);
        if f.abs() <= 1e-15 * abs {
            return lam;
        }
        if f > 0.0 {
            hi = lam;
        } else {
            lo = lam;
        }
        let newton = lam - f / fp;
        lam = if newton > lo && newton < hi && newton.is_finite() {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if hi - lo <= 1e-15 * (1.0 + lam.abs()) {
            return lam;
        }
    }
    lam
}

/// One stage of an annealing schedule.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScheduleStage {
    pub epsilon: f64,
    pub value: f64,
    pub converged: bool,
    pub iterations: usize,
    pub violation: f64,
}

#[derive(Debug, Clone)]
pub struct ScheduleResult {
    pub stages: Vec<ScheduleStage>,
    /// The solve at the smallest temperature.
    pub last: EntropicSolution,
}

/// Solves at each temperature of a strictly decreasing list, warm-starting
/// every stage from the previous potentials.
pub fn epsilon_schedule(instance: &VmotInstance, eps_list: &[f64], max_iter: usize, tol: f64) -> Result<ScheduleResult> {
    if eps_list.is_empty() {
        return Err(Error::InvalidSchedule("empty list".into()));
    }
    if let Some(e) = eps_list.iter().find(|e| !(**e > 0.0 && e.is_finite())) {
        return Err(Error::InvalidSchedule(format!("temperature {e} is not positive")));
    }
    if eps_list.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidSchedule("temperatures must be strictly decreasing".into()));
    }
    let mut stages = Vec::with_capacity(eps_list.len());
    let mut warm: Option<EntropicState> = None;
    let mut last = None;
    for &eps in eps_list {
        let opts = EntropicOptions {
            max_iter,
            tol,
            warm_start: warm.take(),
            ..EntropicOptions::new(eps)
        };
        let sol = solve_entropic_with(instance, &opts)?;
        stages.push(ScheduleStage {
            epsilon: eps,
            value: sol.value,
            converged: sol.converged,
            iterations: sol.iterations,
            violation: sol.state.violation,
        });
        warm = Some(sol.state.clone());
        last = Some(sol);
    }
    Ok(ScheduleResult {
        stages,
        last: last.expect("nonempty schedule"),
    })
}
