//! Checks of duality, pathwise hedging and replication on the support of
//! computed optimisers.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dual_recovery::{certificate_from_lp, gauge_normalize, recover_h_by_envelope, CertificateSource, DualCertificate, HedgeViolation};
use crate::error::{Error, Result};
use crate::instance::{Direction, VmotInstance};
use crate::solver_entropic::{epsilon_schedule, ScheduleStage, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::solver_exact::{alternate_optima, assemble_lp, solve_exact, Coupling};

/// Weak duality may fail by at most this much.
pub const WEAK_DUALITY_TOL: f64 = 1e-7;
/// Gap allowed for certificates that hedge exactly.
pub const EXACT_GAP_TOL: f64 = 1e-6;
pub const DEFAULT_MASS_FLOOR: f64 = 1e-10;
pub const DEFAULT_SUPPORT_TOL: f64 = 1e-6;
pub const DEFAULT_ONE_SIDED_TOL: f64 = 1e-6;

/// Gap threshold for a certificate: [`EXACT_GAP_TOL`] unless it carries an
/// entropic temperature `eps`, in which case `eps * max(2, ln P)` over `P`
/// grid paths.
pub fn default_gap_tol(cert: &DualCertificate, instance: &VmotInstance) -> f64 {
    match (cert.source, cert.epsilon) {
        (CertificateSource::Entropic, Some(eps)) => eps * (instance.n_paths() as f64).ln().max(2.0),
        _ => EXACT_GAP_TOL,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContactSummary {
    pub mass_floor: f64,
    pub support_size: usize,
    pub max_residual: f64,
    pub worst_path: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub instance_hash: String,
    pub direction: Direction,
    pub source: CertificateSource,
    pub epsilon: Option<f64>,
    /// `<c, pi>`.
    pub primal_value: f64,
    /// `mu(phi)`.
    pub dual_value: f64,
    /// `|P - D|`.
    pub gap: f64,
    /// `s (P - D)`, nonnegative under weak duality.
    pub signed_gap: f64,
    pub gap_tol: f64,
    pub weak_duality: bool,
    pub worst_violation: HedgeViolation,
    pub contact: ContactSummary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elapsed_ms: Option<f64>,
    pub pass: bool,
}

fn same_instance(instance: &VmotInstance, hash: &str) -> Result<()> {
    if hash != instance.hash() {
        return Err(Error::MismatchedInstance {
            expected: instance.hash(),
            found: hash.to_string(),
        });
    }
    Ok(())
}

fn support_residuals(instance: &VmotInstance, coupling: &Coupling, cert: &DualCertificate, floor: f64) -> Result<Vec<SupportResidual>> {
    let costs = instance.costs()?;
    let grid = instance.grid();
    Ok(coupling
        .masses()
        .par_iter()
        .filter(|&&(_, m)| m > floor)
        .map(|&(k, m)| SupportResidual {
            path_index: k,
            path: grid.nested_values(k),
            mass: m,
            residual: cert.payout(grid, k) - costs[k],
        })
        .collect())
}

/// Primal and dual values of a coupling and a certificate of the same
/// instance. Passes when the gap is within the source's threshold and,
/// for certificates that hedge exactly, weak duality holds.
pub fn check_duality(instance: &VmotInstance, coupling: &Coupling, cert: &DualCertificate) -> Result<SolveReport> {
    check_duality_with(instance, coupling, cert, default_gap_tol(cert, instance))
}

pub fn check_duality_with(instance: &VmotInstance, coupling: &Coupling, cert: &DualCertificate, gap_tol: f64) -> Result<SolveReport> {
    same_instance(instance, coupling.instance_hash())?;
    same_instance(instance, &cert.instance_hash)?;
    let costs = instance.costs()?;
    let primal = coupling.expectation(costs);
    let dual = cert.dual_value(instance);
    let s = instance.direction().sign();
    let signed_gap = s * (primal - dual);
    let worst_violation = cert.worst_violation(instance)?;
    let support = support_residuals(instance, coupling, cert, DEFAULT_MASS_FLOOR)?;
    let worst = support
        .iter()
        .max_by(|a, b| a.residual.abs().total_cmp(&b.residual.abs()));
    let contact = ContactSummary {
        mass_floor: DEFAULT_MASS_FLOOR,
        support_size: support.len(),
        max_residual: worst.map_or(0.0, |w| w.residual.abs()),
        worst_path: worst.map(|w| w.path.clone()),
    };
    let weak_duality = signed_gap >= -WEAK_DUALITY_TOL;
    let gap = (primal - dual).abs();
    let pass = gap <= gap_tol && (cert.source == CertificateSource::Entropic || weak_duality);
    Ok(SolveReport {
        instance_hash: instance.hash(),
        direction: instance.direction(),
        source: cert.source,
        epsilon: cert.epsilon,
        primal_value: primal,
        dual_value: dual,
        gap,
        signed_gap,
        gap_tol,
        weak_duality,
        worst_violation,
        contact,
        elapsed_ms: None,
        pass,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportResidual {
    pub path_index: usize,
    pub path: Vec<Vec<f64>>,
    pub mass: f64,
    /// `payout(x) - c(x)`.
    pub residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReplicationOptions {
    pub mass_floor: f64,
    pub support_tol: f64,
    pub one_sided_tol: f64,
}

impl Default for ReplicationOptions {
    fn default() -> Self {
        Self {
            mass_floor: DEFAULT_MASS_FLOOR,
            support_tol: DEFAULT_SUPPORT_TOL,
            one_sided_tol: DEFAULT_ONE_SIDED_TOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationReport {
    pub instance_hash: String,
    pub direction: Direction,
    pub mass_floor: f64,
    pub support_tol: f64,
    pub one_sided_tol: f64,
    pub support: Vec<SupportResidual>,
    pub max_support_residual: f64,
    pub worst_support_path: Option<Vec<Vec<f64>>>,
    /// Worst breach of the hedging inequality over every grid path.
    pub worst_one_sided: HedgeViolation,
    pub paths_checked: usize,
    pub pass: bool,
}

/// Residuals of the certificate on the support of `coupling` and the
/// one-sided hedging inequality on the whole grid.
pub fn check_replication(instance: &VmotInstance, coupling: &Coupling, cert: &DualCertificate, mass_floor: f64) -> Result<ReplicationReport> {
    check_replication_with(
        instance,
        coupling,
        cert,
        ReplicationOptions {
            mass_floor,
            ..Default::default()
        },
    )
}

pub fn check_replication_with(
    instance: &VmotInstance,
    coupling: &Coupling,
    cert: &DualCertificate,
    opts: ReplicationOptions,
) -> Result<ReplicationReport> {
    same_instance(instance, coupling.instance_hash())?;
    same_instance(instance, &cert.instance_hash)?;
    let support = support_residuals(instance, coupling, cert, opts.mass_floor)?;
    let worst = support
        .iter()
        .max_by(|a, b| a.residual.abs().total_cmp(&b.residual.abs()));
    let max_support_residual = worst.map_or(0.0, |w| w.residual.abs());
    let worst_support_path = worst.map(|w| w.path.clone());
    let worst_one_sided = cert.worst_violation(instance)?;
    let pass = max_support_residual <= opts.support_tol && worst_one_sided.amount <= opts.one_sided_tol;
    Ok(ReplicationReport {
        instance_hash: instance.hash(),
        direction: instance.direction(),
        mass_floor: opts.mass_floor,
        support_tol: opts.support_tol,
        one_sided_tol: opts.one_sided_tol,
        support,
        max_support_residual,
        worst_support_path,
        worst_one_sided,
        paths_checked: instance.n_paths(),
        pass,
    })
}

#[derive(Debug, Clone)]
pub struct CrossValidationOptions {
    pub eps_list: Vec<f64>,
    pub max_iter: usize,
    pub tol: f64,
    /// Alternate optimal couplings searched per direction.
    pub alternates: usize,
    pub seed: u64,
}

impl Default for CrossValidationOptions {
    fn default() -> Self {
        Self {
            eps_list: vec![0.5, 0.1, 0.02],
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
            alternates: 3,
            seed: 0,
        }
    }
}

/// Outcome of one certificate route.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteCheck {
    pub route: String,
    pub dual_value: f64,
    pub gap: f64,
    pub worst_violation: f64,
    /// Largest support residual over every optimiser checked.
    pub max_support_residual: f64,
    pub optimizers_checked: usize,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValidation {
    pub instance_hash: String,
    pub direction: Direction,
    pub exact_value: f64,
    /// `[MIN, MAX]` from both exact solves.
    pub bracket: [f64; 2],
    pub routes: Vec<RouteCheck>,
    /// Absent when the envelope route does not apply (`d > 2`).
    pub envelope_skipped: Option<String>,
    pub entropic: Vec<ScheduleStage>,
    pub entropic_slack: f64,
    pub entropic_in_bracket: bool,
    pub pass: bool,
}

/// Runs the exact solver in both directions, both certificate routes for
/// the instance's direction, and the entropic schedule, and checks that
/// they agree. Entropic values must fall in the exact bracket up to a slack
/// of `10 tol (1 + max |c|)` accounting for their approximate feasibility.
pub fn cross_validate(instance: &VmotInstance) -> Result<CrossValidation> {
    cross_validate_with(instance, &CrossValidationOptions::default())
}

pub fn cross_validate_with(instance: &VmotInstance, opts: &CrossValidationOptions) -> Result<CrossValidation> {
    let dir = instance.direction();
    let tableau = assemble_lp(instance).map_err(|e| e.in_route("exact"))?;
    let sol = solve_exact(&tableau, dir).map_err(|e| e.in_route("exact"))?;
    let other = solve_exact(&tableau, dir.opposite()).map_err(|e| e.in_route("exact (opposite)"))?;
    let (lo, hi) = match dir {
        Direction::Min => (sol.value, other.value),
        Direction::Max => (other.value, sol.value),
    };
    let optima = alternate_optima(&tableau, &sol, opts.alternates.max(1), opts.seed).map_err(|e| e.in_route("alternate optima"))?;

    let check_route = |route: &str, cert: &DualCertificate| -> Result<RouteCheck> {
        let dual = cert.dual_value(instance);
        let worst = cert.worst_violation(instance)?.amount;
        let mut max_res: f64 = 0.0;
        for c in &optima {
            let rep = check_replication(instance, c, cert, DEFAULT_MASS_FLOOR)?;
            max_res = max_res.max(rep.max_support_residual);
        }
        let gap = (sol.value - dual).abs();
        Ok(RouteCheck {
            route: route.to_string(),
            dual_value: dual,
            gap,
            worst_violation: worst,
            max_support_residual: max_res,
            optimizers_checked: optima.len(),
            pass: gap <= EXACT_GAP_TOL && worst <= WEAK_DUALITY_TOL && max_res <= DEFAULT_SUPPORT_TOL,
        })
    };

    let lp_cert = certificate_from_lp(&tableau, &sol, instance).map_err(|e| e.in_route("lp duals"))?;
    let mut routes = vec![check_route("lp-duals", &lp_cert).map_err(|e| e.in_route("lp duals"))?];
    if let Ok(norm) = gauge_normalize(&lp_cert, instance, None) {
        routes.push(check_route("lp-duals-normalized", &norm).map_err(|e| e.in_route("gauge"))?);
    }
    let envelope_skipped = if instance.assets() > 2 {
        Some(format!("envelope recovery needs d <= 2, instance has d = {}", instance.assets()))
    } else {
        let env = recover_h_by_envelope(&lp_cert.phi, instance).map_err(|e| e.in_route("envelope"))?;
        routes.push(check_route("envelope", &env).map_err(|e| e.in_route("envelope"))?);
        None
    };

    let schedule = epsilon_schedule(instance, &opts.eps_list, opts.max_iter, opts.tol).map_err(|e| e.in_route("entropic"))?;
    let cmax = instance.costs()?.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    let slack = 10.0 * opts.tol * (1.0 + cmax);
    let entropic_in_bracket = schedule
        .stages
        .iter()
        .all(|s| s.converged && s.value >= lo - slack && s.value <= hi + slack);
    let pass = routes.iter().all(|r| r.pass) && entropic_in_bracket && lo <= hi + WEAK_DUALITY_TOL;
    Ok(CrossValidation {
        instance_hash: instance.hash(),
        direction: dir,
        exact_value: sol.value,
        bracket: [lo, hi],
        routes,
        envelope_skipped,
        entropic: schedule.stages,
        entropic_slack: slack,
        entropic_in_bracket,
        pass,
    })
}
