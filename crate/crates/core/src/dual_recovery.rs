//! Dual certificates `(phi, h)`: static option legs per maturity and asset,
//! and history-dependent trading strategies. Built from LP multipliers or
//! entropic potentials, normalised by the affine gauge, diagnosed through the
//! path suprema `chi_t`, and rebuilt from the legs alone by the backward
//! convex-envelope recursion.
//!
//! Internally everything is done in the subhedging orientation: for `Max`
//! the certificate, the cost and all inequalities are negated first.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hull;
use crate::instance::{Conditioning, Direction, PathGrid, VmotInstance};
use crate::solver_exact::{ExactSolution, LpTableau};

/// Where a certificate came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CertificateSource {
    Exact,
    Entropic,
    Envelope,
}

/// `phi[t][i][atom]` per atom of `mu_{t,i}`; `h[t][history][i]` for
/// `t < N - 1`, indexed by histories `(x_1, .., x_{t+1})` in grid order.
/// For `Min` the payout `sum phi + sum h . dx` is below the cost on every
/// path, for `Max` above it.
#[derive(Debug, Clone, PartialEq)]
pub struct DualCertificate {
    pub phi: Vec<Vec<Vec<f64>>>,
    pub h: Vec<Vec<Vec<f64>>>,
    pub direction: Direction,
    pub source: CertificateSource,
    pub anchor: Option<Vec<f64>>,
    pub epsilon: Option<f64>,
    pub instance_hash: String,
}

/// Worst pathwise breach of the hedging inequality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HedgeViolation {
    /// `max_x s (payout(x) - c(x))`; positive means the inequality fails.
    pub amount: f64,
    pub path_index: usize,
    pub path: Vec<Vec<f64>>,
}

impl DualCertificate {
    pub fn zero(instance: &VmotInstance, source: CertificateSource) -> Self {
        let grid = instance.grid();
        let (n, d) = (instance.periods(), instance.assets());
        Self {
            phi: (0..n).map(|t| (0..d).map(|i| vec![0.0; grid.size(t, i)]).collect()).collect(),
            h: (0..n - 1).map(|t| vec![vec![0.0; d]; grid.n_prefixes(t + 1)]).collect(),
            direction: instance.direction(),
            source,
            anchor: None,
            epsilon: None,
            instance_hash: instance.hash(),
        }
    }

    /// Shapes match the instance and every entry is finite.
    pub fn validate(&self, instance: &VmotInstance) -> Result<()> {
        if self.instance_hash != instance.hash() {
            return Err(Error::MismatchedInstance {
                expected: instance.hash(),
                found: self.instance_hash.clone(),
            });
        }
        let grid = instance.grid();
        let (n, d) = (instance.periods(), instance.assets());
        let bad = |msg: String| Err(Error::Format(msg));
        if self.phi.len() != n || self.h.len() != n - 1 {
            return bad("certificate has the wrong number of maturities".into());
        }
        for t in 0..n {
            if self.phi[t].len() != d {
                return bad(format!("phi at maturity {} has the wrong number of assets", t + 1));
            }
            for i in 0..d {
                if self.phi[t][i].len() != grid.size(t, i) {
                    return bad(format!("phi[{}][{}] does not match the support", t + 1, i + 1));
                }
                if self.phi[t][i].iter().any(|v| !v.is_finite()) {
                    return bad(format!("phi[{}][{}] is not finite", t + 1, i + 1));
                }
            }
        }
        for t in 0..n - 1 {
            if self.h[t].len() != grid.n_prefixes(t + 1) || self.h[t].iter().any(|r| r.len() != d) {
                return bad(format!("h at maturity {} does not match the histories", t + 1));
            }
            if self.h[t].iter().flatten().any(|v| !v.is_finite()) {
                return bad(format!("h at maturity {} is not finite", t + 1));
            }
        }
        Ok(())
    }

    /// `mu(phi) = sum_{t,i} sum_atoms w phi`.
    pub fn dual_value(&self, instance: &VmotInstance) -> f64 {
        let sys = instance.system();
        let mut v = 0.0;
        for (t, row) in self.phi.iter().enumerate() {
            for (i, table) in row.iter().enumerate() {
                v += table.iter().zip(sys.marginal(t, i).weights()).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        v
    }

    /// Portfolio payout on grid path `flat`.
    pub fn payout(&self, grid: &PathGrid, flat: usize) -> f64 {
        let (n, d) = (grid.periods(), grid.assets());
        let mut v = 0.0;
        for t in 0..n {
            for i in 0..d {
                v += self.phi[t][i][grid.atom(flat, t, i)];
            }
        }
        for t in 0..n - 1 {
            let h = &self.h[t][grid.prefix(flat, t + 1)];
            for i in 0..d {
                v += h[i] * (grid.value(flat, t + 1, i) - grid.value(flat, t, i));
            }
        }
        v
    }

    /// Payout of every grid path.
    pub fn payouts(&self, instance: &VmotInstance) -> Vec<f64> {
        let grid = instance.grid();
        (0..grid.n_paths()).into_par_iter().map(|k| self.payout(grid, k)).collect()
    }

    /// Trading gains `sum_t h_t . dx_t` on path `flat`.
    pub fn trading_gain(&self, grid: &PathGrid, flat: usize) -> f64 {
        let d = grid.assets();
        (0..grid.periods() - 1)
            .map(|t| {
                let h = &self.h[t][grid.prefix(flat, t + 1)];
                (0..d).map(|i| h[i] * (grid.value(flat, t + 1, i) - grid.value(flat, t, i))).sum::<f64>()
            })
            .sum()
    }

    /// Largest breach of the hedging inequality over the grid.
    pub fn worst_violation(&self, instance: &VmotInstance) -> Result<HedgeViolation> {
        self.validate(instance)?;
        let costs = instance.costs()?;
        let s = self.direction.sign();
        let payouts = self.payouts(instance);
        let (k, amount) = payouts
            .iter()
            .zip(costs)
            .map(|(p, c)| s * (p - c))
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (k, v)| if v > acc.1 { (k, v) } else { acc });
        Ok(HedgeViolation {
            amount,
            path_index: k,
            path: instance.grid().nested_values(k),
        })
    }

    /// Adds `shift[t][i]` to every entry of `phi[t][i]`.
    pub fn shift_constants(&mut self, shift: &[Vec<f64>]) {
        for (row, srow) in self.phi.iter_mut().zip(shift) {
            for (table, &c) in row.iter_mut().zip(srow) {
                for v in table.iter_mut() {
                    *v += c;
                }
            }
        }
    }

    fn scaled(&self, s: f64) -> (Vec<Vec<Vec<f64>>>, Vec<Vec<Vec<f64>>>) {
        let scale = |x: &Vec<Vec<Vec<f64>>>| -> Vec<Vec<Vec<f64>>> {
            x.iter().map(|r| r.iter().map(|v| v.iter().map(|a| s * a).collect()).collect()).collect()
        };
        (scale(&self.phi), scale(&self.h))
    }

    pub fn to_file(&self, instance: &VmotInstance) -> Result<CertificateFile> {
        self.validate(instance)?;
        let grid = instance.grid();
        let (n, d) = (instance.periods(), instance.assets());
        let phi = (0..n)
            .map(|t| {
                (0..d)
                    .map(|i| {
                        grid.support(t, i)
                            .iter()
                            .zip(&self.phi[t][i])
                            .map(|(p, v)| (format!("{p}"), *v))
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let h = (0..n - 1)
            .map(|t| {
                self.h[t]
                    .iter()
                    .enumerate()
                    .map(|(p, v)| (history_key(&grid.prefix_values(p, t + 1), d), v.clone()))
                    .collect()
            })
            .collect();
        Ok(CertificateFile {
            instance_hash: self.instance_hash.clone(),
            direction: self.direction,
            source: self.source,
            anchor: self.anchor.clone(),
            epsilon: self.epsilon,
            periods: n,
            assets: d,
            phi,
            h,
        })
    }

    pub fn from_file(file: CertificateFile, instance: &VmotInstance) -> Result<Self> {
        if file.instance_hash != instance.hash() {
            return Err(Error::MismatchedInstance {
                expected: instance.hash(),
                found: file.instance_hash,
            });
        }
        let grid = instance.grid();
        let (n, d) = (instance.periods(), instance.assets());
        if file.periods != n || file.assets != d || file.phi.len() != n || file.h.len() != n - 1 {
            return Err(Error::Format("certificate shape does not match the instance".into()));
        }
        let mut cert = Self::zero(instance, file.source);
        cert.direction = file.direction;
        cert.anchor = file.anchor;
        cert.epsilon = file.epsilon;
        for t in 0..n {
            if file.phi[t].len() != d {
                return Err(Error::Format(format!("phi at maturity {} has the wrong number of assets", t + 1)));
            }
            for i in 0..d {
                let map = &file.phi[t][i];
                if map.len() != grid.size(t, i) {
                    return Err(Error::Format(format!("phi[{}][{}] does not match the support", t + 1, i + 1)));
                }
                for (key, &v) in map {
                    let atom = key
                        .parse::<f64>()
                        .ok()
                        .and_then(|p| instance.system().marginal(t, i).atom_index(p))
                        .ok_or_else(|| Error::Format(format!("phi[{}][{}]: unknown atom {key}", t + 1, i + 1)))?;
                    cert.phi[t][i][atom] = v;
                }
            }
        }
        for t in 0..n - 1 {
            let expected = grid.n_prefixes(t + 1);
            if file.h[t].len() != expected {
                return Err(Error::Format(format!("h at maturity {} does not match the histories", t + 1)));
            }
            let index: BTreeMap<String, usize> =
                (0..expected).map(|p| (history_key(&grid.prefix_values(p, t + 1), d), p)).collect();
            for (key, v) in &file.h[t] {
                let p = *index
                    .get(key)
                    .ok_or_else(|| Error::Format(format!("h at maturity {}: unknown history {key}", t + 1)))?;
                if v.len() != d {
                    return Err(Error::Format(format!("h at history {key} needs {d} entries")));
                }
                cert.h[t][p] = v.clone();
            }
        }
        cert.validate(instance)?;
        Ok(cert)
    }

    pub fn save(&self, instance: &VmotInstance, out: impl Write) -> Result<()> {
        serde_json::to_writer_pretty(out, &self.to_file(instance)?)?;
        Ok(())
    }

    pub fn load(input: impl Read, instance: &VmotInstance) -> Result<Self> {
        let file: CertificateFile = serde_json::from_reader(input)?;
        Self::from_file(file, instance)
    }
}

/// `"x11,x12;x21,x22"`: maturities separated by `;`, assets by `,`.
pub fn history_key(values: &[f64], assets: usize) -> String {
    values
        .chunks(assets)
        .map(|c| c.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(","))
        .collect::<Vec<_>>()
        .join(";")
}

/// On-disk form of a certificate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateFile {
    pub instance_hash: String,
    pub direction: Direction,
    pub source: CertificateSource,
    pub anchor: Option<Vec<f64>>,
    pub epsilon: Option<f64>,
    pub periods: usize,
    pub assets: usize,
    pub phi: Vec<Vec<BTreeMap<String, f64>>>,
    pub h: Vec<BTreeMap<String, Vec<f64>>>,
}

/// Tolerance of the consistency checks applied to LP multipliers, relative
/// to the payoff scale.
pub const LP_DUAL_TOL: f64 = 1e-7;

/// Reads `phi` and `h` off the LP multipliers and checks them.
pub fn certificate_from_lp(tableau: &LpTableau, solution: &ExactSolution, instance: &VmotInstance) -> Result<DualCertificate> {
    let hash = tableau.instance_hash(solution.direction);
    if hash != instance.hash() || solution.direction != instance.direction() {
        return Err(Error::MismatchedInstance {
            expected: instance.hash(),
            found: hash.to_string(),
        });
    }
    let grid = instance.grid();
    let d = instance.assets();
    let mut cert = DualCertificate::zero(instance, CertificateSource::Exact);
    cert.phi = solution.duals.phi.clone();
    for t in 0..instance.periods() - 1 {
        for p in 0..grid.n_prefixes(t + 1) {
            let block = match solution.duals.conditioning {
                Conditioning::FullHistory => p,
                Conditioning::Markov => grid.state_of_prefix(p, t + 1),
            };
            cert.h[t][p] = solution.duals.h[t][block][..d].to_vec();
        }
    }
    cert.validate(instance)?;

    let scale = instance.costs()?.iter().fold(1.0f64, |m, c| m.max(c.abs()));
    let worst = cert.worst_violation(instance)?;
    if worst.amount > LP_DUAL_TOL * scale {
        return Err(Error::InconsistentDuals {
            msg: "hedging inequality fails".into(),
            path: worst.path.into_iter().flatten().collect(),
            violation: worst.amount,
        });
    }
    let gap = (cert.dual_value(instance) - solution.value).abs();
    if gap > LP_DUAL_TOL * scale {
        return Err(Error::InconsistentDuals {
            msg: format!("dual value misses the primal value by {gap:e}"),
            path: Vec::new(),
            violation: gap,
        });
    }
    Ok(cert)
}

/// `phi_t^+` at every state of maturity `t`.
fn leg_sums(phi: &[Vec<Vec<f64>>], grid: &PathGrid, t: usize) -> Vec<f64> {
    (0..grid.n_states(t))
        .map(|s| grid.state_atoms(t, s).iter().enumerate().map(|(i, &a)| phi[t][i][a]).sum())
        .collect()
}

/// Affine pieces `y -> alpha + beta . y` whose maximum is `chi_t`, one per
/// history `(x_1, .., x_{t})` (zero-based `t >= 1`).
struct Pieces {
    alpha: Vec<f64>,
    beta: Vec<Vec<f64>>,
}

impl Pieces {
    fn eval(&self, y: &[f64]) -> f64 {
        self.alpha
            .iter()
            .zip(&self.beta)
            .map(|(a, b)| a + b.iter().zip(y).map(|(u, v)| u * v).sum::<f64>())
            .fold(f64::NEG_INFINITY, f64::max)
    }

    fn active_slopes(&self, y: &[f64], tol: f64) -> (f64, Vec<Vec<f64>>) {
        let vals: Vec<f64> = self
            .alpha
            .iter()
            .zip(&self.beta)
            .map(|(a, b)| a + b.iter().zip(y).map(|(u, v)| u * v).sum::<f64>())
            .collect();
        let top = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let slopes = vals
            .iter()
            .zip(&self.beta)
            .filter(|(v, _)| **v >= top - tol * (1.0 + top.abs()))
            .map(|(_, b)| b.clone())
            .collect();
        (top, slopes)
    }
}

/// Forward recursion over histories: `W` accumulates legs and trading gains
/// up to maturity `t - 1`, then each history contributes one affine piece.
fn chi_pieces(phi: &[Vec<Vec<f64>>], h: &[Vec<Vec<f64>>], grid: &PathGrid, t: usize) -> Pieces {
    let d = grid.assets();
    let mut w = leg_sums(phi, grid, 0);
    for r in 1..t {
        let legs = leg_sums(phi, grid, r);
        let ns = grid.n_states(r);
        let prev_states = grid.n_states(r - 1);
        let mut next = vec![0.0; w.len() * ns];
        for (p, &wp) in w.iter().enumerate() {
            let x = grid.state_values(r - 1, p % prev_states);
            let hp = &h[r - 1][p];
            for s in 0..ns {
                let y = grid.state_values(r, s);
                let gain: f64 = (0..d).map(|i| hp[i] * (y[i] - x[i])).sum();
                next[p * ns + s] = wp + gain + legs[s];
            }
        }
        w = next;
    }
    let prev_states = grid.n_states(t - 1);
    let mut alpha = Vec::with_capacity(w.len());
    let mut beta = Vec::with_capacity(w.len());
    for (p, &wp) in w.iter().enumerate() {
        let x = grid.state_values(t - 1, p % prev_states);
        let hp = h[t - 1][p].clone();
        alpha.push(wp - hp.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>());
        beta.push(hp);
    }
    Pieces { alpha, beta }
}

fn check_anchor(instance: &VmotInstance, anchor: &[f64]) -> Result<()> {
    if anchor.len() != instance.assets() {
        return Err(Error::InvalidArgument(format!(
            "anchor needs {} components, got {}",
            instance.assets(),
            anchor.len()
        )));
    }
    for (t, row) in instance.system().domains()?.iter().enumerate() {
        for (i, dom) in row.iter().enumerate() {
            if !dom.contains_open(anchor[i]) {
                return Err(Error::AnchorOutsideDomain {
                    period: t + 1,
                    asset: i + 1,
                    value: anchor[i],
                });
            }
        }
    }
    Ok(())
}

/// Tolerance for treating an affine piece of `chi_t` as active at the
/// anchor.
const ACTIVE_TOL: f64 = 1e-9;

/// Moves affine functions between consecutive legs, with the matching
/// change of `h`, so that every `chi_t` vanishes at the anchor and is
/// nonnegative; then centres the legs of assets `2..d` at each maturity,
/// pushing their means into the first asset. The payout on every path and
/// the dual value are unchanged. The anchor defaults to the means of the
/// first maturity.
pub fn gauge_normalize(cert: &DualCertificate, instance: &VmotInstance, anchor: Option<&[f64]>) -> Result<DualCertificate> {
    cert.validate(instance)?;
    let a: Vec<f64> = anchor.map_or_else(|| instance.system().first_means(), <[f64]>::to_vec);
    check_anchor(instance, &a)?;
    let grid = instance.grid();
    let (n, d) = (instance.periods(), instance.assets());
    let s = cert.direction.sign();
    let (mut phi, mut h) = cert.scaled(s);

    for t in 1..n {
        let pieces = chi_pieces(&phi, &h, grid, t);
        let (chi_a, slopes) = pieces.active_slopes(&a, ACTIVE_TOL);
        let g = hull::min_norm_in_hull(&slopes);
        for (sign, r) in [(-1.0, t - 1), (1.0, t)] {
            for v in phi[r][0].iter_mut() {
                *v += sign * chi_a;
            }
            for i in 0..d {
                for (v, x) in phi[r][i].iter_mut().zip(grid.support(r, i)) {
                    *v += sign * g[i] * (x - a[i]);
                }
            }
        }
        for hp in h[t - 1].iter_mut() {
            for (v, gi) in hp.iter_mut().zip(&g) {
                *v -= gi;
            }
        }
    }
    for (t, row) in phi.iter_mut().enumerate() {
        for i in 1..d {
            let w = instance.system().marginal(t, i).weights();
            let m: f64 = row[i].iter().zip(w).map(|(a, b)| a * b).sum();
            for v in row[i].iter_mut() {
                *v -= m;
            }
            for v in row[0].iter_mut() {
                *v += m;
            }
        }
    }

    let back = DualCertificate {
        phi,
        h,
        anchor: Some(a),
        ..cert.clone()
    };
    let (phi, h) = back.scaled(s);
    Ok(DualCertificate { phi, h, ..back })
}

/// `chi_t` for one maturity (1-based `period` in `2..=N`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChiPeriod {
    pub period: usize,
    /// Values at the states of this maturity, in grid order.
    pub values: Vec<f64>,
    pub at_anchor: f64,
    pub min_value: f64,
    /// Largest `chi_t + phi_t^+ - chi_{t+1}` over the states of this
    /// maturity; at the last maturity `chi_{t+1}` is replaced by the
    /// supremum of the cost over histories ending in the state.
    pub step_violation: f64,
    /// `int chi_t d(mu_t - mu_{t-1})` against the product laws.
    pub integral: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChiTable {
    pub anchor: Vec<f64>,
    pub periods: Vec<ChiPeriod>,
}

impl ChiTable {
    pub fn min_value(&self) -> f64 {
        self.periods.iter().map(|p| p.min_value).fold(f64::INFINITY, f64::min)
    }

    pub fn max_step_violation(&self) -> f64 {
        self.periods.iter().map(|p| p.step_violation).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_abs_at_anchor(&self) -> f64 {
        self.periods.iter().map(|p| p.at_anchor.abs()).fold(0.0, f64::max)
    }
}

/// Evaluates every `chi_t` on the grid by forward recursion over histories.
/// The anchor defaults to the certificate's own, then to the first means.
pub fn compute_chi(cert: &DualCertificate, instance: &VmotInstance) -> Result<ChiTable> {
    cert.validate(instance)?;
    let grid = instance.grid();
    let sys = instance.system();
    let n = instance.periods();
    let a = cert.anchor.clone().unwrap_or_else(|| sys.first_means());
    let s = cert.direction.sign();
    let (phi, h) = cert.scaled(s);
    let pieces: Vec<Pieces> = (1..n).map(|t| chi_pieces(&phi, &h, grid, t)).collect();
    let costs = instance.costs()?;

    let mut terminal_sup = vec![f64::NEG_INFINITY; grid.n_states(n - 1)];
    for (k, &c) in costs.iter().enumerate() {
        let st = grid.state(k, n - 1);
        terminal_sup[st] = terminal_sup[st].max(s * c);
    }

    let mut periods = Vec::with_capacity(n - 1);
    for t in 1..n {
        let chi = &pieces[t - 1];
        let states: Vec<Vec<f64>> = (0..grid.n_states(t)).map(|st| grid.state_values(t, st)).collect();
        let values: Vec<f64> = states.iter().map(|y| chi.eval(y)).collect();
        let legs = leg_sums(&phi, grid, t);
        let step_violation = (0..states.len())
            .map(|st| {
                let upper = if t + 1 < n {
                    pieces[t].eval(&states[st])
                } else {
                    terminal_sup[st]
                };
                values[st] + legs[st] - upper
            })
            .fold(f64::NEG_INFINITY, f64::max);
        let here: f64 = values
            .iter()
            .enumerate()
            .map(|(st, v)| v * grid.state_weight(sys, t, st))
            .sum();
        let before: f64 = (0..grid.n_states(t - 1))
            .map(|st| chi.eval(&grid.state_values(t - 1, st)) * grid.state_weight(sys, t - 1, st))
            .sum();
        periods.push(ChiPeriod {
            period: t + 1,
            at_anchor: chi.eval(&a),
            min_value: values.iter().copied().fold(f64::INFINITY, f64::min),
            values,
            step_violation,
            integral: here - before,
        });
    }
    Ok(ChiTable { anchor: a, periods })
}

/// `H_t(history, .)` on the states of the next maturity, per history.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvelopePeriod {
    /// 1-based maturity `t` of the histories `(x_1, .., x_t)`.
    pub period: usize,
    pub values: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvelopeTable {
    pub periods: Vec<EnvelopePeriod>,
}

/// [`recover_with_table`] without the table.
pub fn recover_h_by_envelope(phi: &[Vec<Vec<f64>>], instance: &VmotInstance) -> Result<DualCertificate> {
    recover_with_table(phi, instance).map(|(c, _)| c)
}

/// Rebuilds `h` from the legs alone. With `G_N = c`, for `t = N-1 .. 1`
/// and each history, `H_t(history, .)` is the convex envelope over the
/// next maturity's grid of `G_{t+1}(history, .) - phi_{t+1}^+`,
/// `G_t(history) = H_t(history, x_t)` and `h_t(history)` is the
/// minimum-norm subgradient there. Requires `d <= 2`.
pub fn recover_with_table(phi: &[Vec<Vec<f64>>], instance: &VmotInstance) -> Result<(DualCertificate, EnvelopeTable)> {
    let (n, d) = (instance.periods(), instance.assets());
    if d > 2 {
        return Err(Error::DimensionUnsupported(d));
    }
    let mut cert = DualCertificate::zero(instance, CertificateSource::Envelope);
    cert.phi = phi.to_vec();
    cert.validate(instance)?;
    let grid = instance.grid();
    let s = instance.direction().sign();
    let (phi_t, _) = cert.scaled(s);

    let mut g_next: Vec<f64> = instance.costs()?.iter().map(|c| s * c).collect();
    let mut table = Vec::with_capacity(n - 1);
    let mut h_rows: Vec<Vec<Vec<f64>>> = vec![Vec::new(); n - 1];
    for t in (0..n - 1).rev() {
        let ns = grid.n_states(t + 1);
        let pts: Vec<f64> = (0..ns).flat_map(|st| grid.state_values(t + 1, st)).collect();
        let legs = leg_sums(&phi_t, grid, t + 1);
        let here_states = grid.n_states(t);
        let results: Vec<Result<(f64, Vec<f64>, Vec<f64>)>> = (0..grid.n_prefixes(t + 1))
            .into_par_iter()
            .map(|p| {
                let f: Vec<f64> = (0..ns).map(|st| g_next[p * ns + st] - legs[st]).collect();
                if f.iter().any(|v| !v.is_finite()) {
                    return Err(Error::EnvelopeDegenerate(format!(
                        "non-finite continuation value at maturity {}",
                        t + 2
                    )));
                }
                let x = grid.state_values(t, p % here_states);
                let env_all = envelope_values(d, &pts, &f)?;
                let env_x = hull::envelope_at(d, &pts, &f, &x).ok_or_else(|| {
                    Error::EnvelopeDegenerate(format!("state {x:?} lies outside the next maturity's grid"))
                })?;
                let g = hull::min_norm_subgradient(d, &pts, &f, &x, env_x).ok_or_else(|| {
                    Error::EnvelopeDegenerate(format!("empty subdifferential at {x:?}"))
                })?;
                Ok((env_x, g, env_all))
            })
            .collect();
        let mut g_here = Vec::with_capacity(results.len());
        let mut rows = Vec::with_capacity(results.len());
        let mut hs = Vec::with_capacity(results.len());
        for r in results {
            let (v, g, env) = r?;
            g_here.push(v);
            hs.push(g.iter().map(|x| s * x).collect());
            rows.push(env);
        }
        h_rows[t] = hs;
        table.push(EnvelopePeriod {
            period: t + 1,
            values: rows,
        });
        g_next = g_here;
    }
    table.reverse();

    let legs0 = leg_sums(&phi_t, grid, 0);
    let scale = 1.0 + g_next.iter().chain(&legs0).fold(0.0f64, |m, v| m.max(v.abs()));
    for (st, (&g0, &l0)) in g_next.iter().zip(&legs0).enumerate() {
        if g0 < l0 - 1e-9 * scale {
            return Err(Error::EnvelopeDegenerate(format!(
                "option legs admit no hedge from x_1 = {:?} (shortfall {:e})",
                grid.state_values(0, st),
                l0 - g0
            )));
        }
    }
    cert.h = h_rows;
    Ok((cert, EnvelopeTable { periods: table }))
}

fn envelope_values(dim: usize, pts: &[f64], f: &[f64]) -> Result<Vec<f64>> {
    if dim == 1 {
        return Ok(hull::lower_hull_1d(pts, f));
    }
    (0..f.len())
        .map(|k| {
            hull::envelope_at(dim, pts, f, &pts[k * dim..(k + 1) * dim])
                .ok_or_else(|| Error::EnvelopeDegenerate("envelope evaluation failed on the grid".into()))
        })
        .collect()
}
