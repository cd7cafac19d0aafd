use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use vmot_core::dual_recovery::{compute_chi, gauge_normalize, certificate_from_lp, CertificateSource, DualCertificate};
use vmot_core::error::Error;
use vmot_core::instance::{Conditioning, Direction, VmotInstance};
use vmot_core::io::{load_config, load_coupling, read_json, save_coupling, write_json, BuildOptions, LoadedConfig};
use vmot_core::marginals::{check_convex_order, irreducibility};
use vmot_core::solver_entropic::{epsilon_schedule, solve_entropic_with, EntropicOptions, ScheduleStage, DEFAULT_MAX_ITER, DEFAULT_TOL};
use vmot_core::solver_exact::{assemble_lp_with, export_lp, solve_exact, Coupling, CouplingDiagnostics, DEFAULT_VARIABLE_BUDGET};
use vmot_core::verify::{check_duality, check_replication_with, cross_validate_with, CrossValidationOptions, ReplicationOptions, ReplicationReport, SolveReport};

#[derive(Parser)]
#[command(name = "vmot", version, about = "Model-free price bounds for multi-period multi-asset martingale transport")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Check convex order and irreducibility of every consecutive pair.
    Check {
        #[arg(long)]
        config: PathBuf,
    },
    /// Solve for the price bound and write report, certificate and coupling.
    Solve(SolveArgs),
    /// Re-check solve artifacts against their instance.
    Verify(VerifyArgs),
    /// Compare exact, envelope and entropic routes on one instance.
    CrossValidate(CrossArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Backend {
    Exact,
    Entropic,
    Both,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DirArg {
    Min,
    Max,
}

impl From<DirArg> for Direction {
    fn from(d: DirArg) -> Self {
        match d {
            DirArg::Min => Direction::Min,
            DirArg::Max => Direction::Max,
        }
    }
}

#[derive(Args, Clone)]
struct InstanceArgs {
    #[arg(long)]
    config: PathBuf,
    /// Override the config's direction.
    #[arg(long, value_enum)]
    direction: Option<DirArg>,
    /// Mix every marginal with two far atoms of this weight to force
    /// irreducibility.
    #[arg(long, value_name = "EPS")]
    perturb: Option<f64>,
    /// Condition the martingale constraint on the current state only.
    #[arg(long)]
    markov_martingale: bool,
}

#[derive(Args)]
struct SolveArgs {
    #[command(flatten)]
    inst: InstanceArgs,
    #[arg(long, value_enum, default_value = "exact")]
    backend: Backend,
    #[arg(long, conflicts_with = "schedule")]
    epsilon: Option<f64>,
    /// Comma-separated decreasing temperatures.
    #[arg(long, value_delimiter = ',')]
    schedule: Option<Vec<f64>>,
    #[arg(long, default_value_t = DEFAULT_TOL)]
    tol: f64,
    #[arg(long, default_value_t = DEFAULT_MAX_ITER)]
    max_iter: usize,
    /// Largest grid the exact backend accepts.
    #[arg(long, default_value_t = DEFAULT_VARIABLE_BUDGET)]
    max_exact_paths: usize,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Also write the exact LP in CPLEX LP format.
    #[arg(long, value_name = "FILE")]
    export_lp: Option<PathBuf>,
    /// Solve both directions and print the bracket.
    #[arg(long)]
    both_directions: bool,
    /// Exit 1 when a certificate fails its own duality check.
    #[arg(long)]
    fail_on_violation: bool,
    /// Omit timings so repeated runs give identical reports.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    config: PathBuf,
    /// Directory holding the solve artifacts.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long, default_value_t = vmot_core::verify::DEFAULT_MASS_FLOOR)]
    mass_floor: f64,
    #[arg(long, default_value_t = vmot_core::verify::DEFAULT_SUPPORT_TOL)]
    support_tol: f64,
    #[arg(long, default_value_t = vmot_core::verify::DEFAULT_ONE_SIDED_TOL)]
    one_sided_tol: f64,
}

#[derive(Args)]
struct CrossArgs {
    #[command(flatten)]
    inst: InstanceArgs,
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.1,0.02")]
    schedule: Vec<f64>,
    #[arg(long, default_value_t = DEFAULT_TOL)]
    tol: f64,
    #[arg(long, default_value_t = DEFAULT_MAX_ITER)]
    max_iter: usize,
    /// Number of alternate optimal couplings to check.
    #[arg(long, default_value_t = 3)]
    alternates: usize,
    /// Seed for the alternate-optimum search.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write cross_validation.json here.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failure carrying the process exit code.
struct Fail {
    code: u8,
    msg: String,
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let code = match e.root() {
            Error::Io(_)
            | Error::Format(_)
            | Error::PayoffParseError { .. }
            | Error::InvalidArgument(_)
            | Error::InvalidMarginal(_)
            | Error::EmptyInput
            | Error::InvalidSchedule(_)
            | Error::MismatchedInstance { .. } => 2,
            _ => 1,
        };
        Fail { code, msg: e.to_string() }
    }
}

fn usage(msg: impl Into<String>) -> Fail {
    Fail { code: 2, msg: msg.into() }
}

type Outcome = Result<bool, Fail>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Check { config } => cmd_check(&config),
        Cmd::Solve(a) => cmd_solve(&a),
        Cmd::Verify(a) => cmd_verify(&a),
        Cmd::CrossValidate(a) => cmd_cross(&a),
    };
    match res {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

fn fmt_value(v: f64) -> String {
    let s = format!("{v:.10}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.into() }
}

fn fmt_interval(iv: Option<(f64, f64)>) -> String {
    iv.map_or("-".into(), |(a, b)| format!("({}, {})", fmt_value(a), fmt_value(b)))
}

fn cmd_check(config: &Path) -> Outcome {
    let cfg = load_config(config)?;
    let sys = cfg.system()?;
    let (n, d) = (sys.periods(), sys.assets());
    println!("{:<6} {:<11} {:<13} {:<12} {:<12} domain", "asset", "maturities", "convex-order", "witness", "irreducible");
    let mut ok = true;
    let mut reducible = false;
    for i in 0..d {
        for t in 0..n - 1 {
            let (mu, nu) = (sys.marginal(t, i), sys.marginal(t + 1, i));
            let order = check_convex_order(mu, nu);
            let (irr, dom) = if order.holds {
                let dom = irreducibility(mu, nu)?;
                (if dom.irreducible { "yes" } else { "no" }, fmt_interval(dom.interval))
            } else {
                ("-", "-".into())
            };
            ok &= order.holds && irr == "yes";
            reducible |= irr == "no";
            println!(
                "{:<6} {:<11} {:<13} {:<12} {:<12} {}",
                i + 1,
                format!("{} -> {}", t + 1, t + 2),
                if order.holds { "ok" } else { "VIOLATED" },
                order.witness.map_or("-".into(), |w| format!("x = {}", fmt_value(w))),
                irr,
                dom
            );
        }
    }
    if reducible {
        println!("some pairs are not irreducible; solve with --perturb EPS");
    }
    println!("{}", if ok { "all checks passed" } else { "checks failed" });
    Ok(ok)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct BuildInfo {
    direction: Direction,
    perturb: Option<f64>,
    conditioning: Conditioning,
}

fn build(cfg: &LoadedConfig, info: BuildInfo) -> Result<VmotInstance, Fail> {
    if let Some(eps) = info.perturb {
        if !(eps > 0.0 && eps < 1.0) {
            return Err(usage(format!("--perturb must lie in (0, 1), got {eps}")));
        }
    }
    cfg.build(BuildOptions {
        perturb: info.perturb,
        conditioning: info.conditioning,
        direction: Some(info.direction),
    })
    .map_err(|e| {
        let mut f = Fail::from(e);
        if f.msg.contains("budget") {
            f.msg.push_str("\nhint: raise path_budget in the config or quantize the marginals more coarsely");
        }
        f
    })
}

fn prepare(a: &InstanceArgs) -> Result<(LoadedConfig, BuildInfo, VmotInstance), Fail> {
    let cfg = load_config(&a.config)?;
    let info = BuildInfo {
        direction: a.direction.map_or(cfg.config.direction, Into::into),
        perturb: a.perturb,
        conditioning: if a.markov_martingale { Conditioning::Markov } else { Conditioning::FullHistory },
    };
    let inst = build(&cfg, info)?;
    if info.perturb.is_none() && !inst.system().is_irreducible()? {
        return Err(Fail {
            code: 1,
            msg: "some consecutive marginal pairs are not irreducible; rerun with --perturb EPS (see `vmot check`)".into(),
        });
    }
    Ok((cfg, info, inst))
}

#[derive(Serialize, Deserialize)]
struct ChiSummary {
    min_value: f64,
    max_abs_at_anchor: f64,
    max_step_violation: f64,
    integrals: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct BackendResult {
    backend: String,
    direction: Direction,
    value: f64,
    epsilon: Option<f64>,
    iterations: usize,
    converged: bool,
    certificate: String,
    coupling: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    schedule: Option<Vec<ScheduleStage>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    chi: Option<ChiSummary>,
    coupling_diagnostics: CouplingDiagnostics,
    duality: SolveReport,
}

#[derive(Serialize, Deserialize)]
struct RunReport {
    instance_hash: String,
    payoff: String,
    periods: usize,
    assets: usize,
    paths: usize,
    build: BuildInfo,
    results: Vec<BackendResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bracket: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    elapsed_ms: Option<f64>,
}

fn artifact_name(kind: &str, suffix: &str) -> String {
    format!("{kind}{suffix}.json")
}

fn normalized(cert: DualCertificate, inst: &VmotInstance) -> DualCertificate {
    match gauge_normalize(&cert, inst, None) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("warning: certificate left unnormalized: {e}");
            cert
        }
    }
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn cmd_solve(a: &SolveArgs) -> Outcome {
    if a.backend == Backend::Exact && (a.epsilon.is_some() || a.schedule.is_some()) {
        return Err(usage("--epsilon and --schedule need --backend entropic or both"));
    }
    if a.export_lp.is_some() && a.backend == Backend::Entropic {
        return Err(usage("--export-lp needs the exact backend"));
    }
    let (_, info, inst) = prepare(&a.inst)?;
    std::fs::create_dir_all(&a.out).map_err(Error::from)?;
    let started = Instant::now();
    let mut dirs = vec![info.direction];
    if a.both_directions {
        dirs.push(info.direction.opposite());
    }
    let mut results = Vec::new();
    for (k, &dir) in dirs.iter().enumerate() {
        let inst = inst.with_direction(dir);
        let dir_suffix = if k == 0 { String::new() } else { format!(".{dir}") };
        if a.backend != Backend::Entropic {
            results.push(solve_exact_backend(a, &inst, &dir_suffix, a.deterministic)?);
        }
        if a.backend != Backend::Exact {
            let suffix = if a.backend == Backend::Both { format!("{dir_suffix}.entropic") } else { dir_suffix.clone() };
            results.push(solve_entropic_backend(a, &inst, &suffix, a.deterministic)?);
        }
    }
    let bracket = if a.both_directions {
        let pick = |d: Direction| results.iter().find(|r| r.direction == d).map(|r| r.value).unwrap_or(f64::NAN);
        Some([pick(Direction::Min), pick(Direction::Max)])
    } else {
        None
    };
    for r in &results {
        println!("{} bound ({}): {}", r.direction, r.backend, fmt_value(r.value));
        if !r.duality.pass {
            println!(
                "  warning: duality gap {:e} exceeds {:e} or weak duality fails",
                r.duality.gap, r.duality.gap_tol
            );
        }
    }
    if let Some([lo, hi]) = bracket {
        println!("[MIN, MAX] = [{}, {}]", fmt_value(lo), fmt_value(hi));
    }
    let all_pass = results.iter().all(|r| r.duality.pass);
    let report = RunReport {
        instance_hash: inst.hash(),
        payoff: inst.payoff().label().to_string(),
        periods: inst.periods(),
        assets: inst.assets(),
        paths: inst.n_paths(),
        build: info,
        results,
        bracket,
        elapsed_ms: (!a.deterministic).then(|| ms(started)),
    };
    write_json(a.out.join("report.json"), &report)?;
    println!("artifacts written to {}", a.out.display());
    Ok(all_pass || !a.fail_on_violation)
}

fn solve_exact_backend(a: &SolveArgs, inst: &VmotInstance, suffix: &str, deterministic: bool) -> Result<BackendResult, Fail> {
    let started = Instant::now();
    let budget_hint = |e: Error| {
        let mut f = Fail::from(e);
        if f.msg.contains("budget") {
            f.msg.push_str("\nhint: the grid is too large for the exact backend; try --backend entropic");
        }
        f
    };
    let tableau = assemble_lp_with(inst, a.max_exact_paths).map_err(budget_hint)?;
    if let Some(p) = &a.export_lp {
        let p = if suffix.is_empty() { p.clone() } else { p.with_extension(format!("{}.lp", &suffix[1..])) };
        let mut f = File::create(&p).map_err(Error::from)?;
        export_lp(&tableau, inst.direction(), &mut f)?;
    }
    let sol = solve_exact(&tableau, inst.direction())?;
    let cert = normalized(certificate_from_lp(&tableau, &sol, inst)?, inst);
    let chi = compute_chi(&cert, inst).ok().map(|c| ChiSummary {
        min_value: c.min_value(),
        max_abs_at_anchor: c.max_abs_at_anchor(),
        max_step_violation: c.max_step_violation(),
        integrals: c.periods.iter().map(|p| p.integral).collect(),
    });
    let mut duality = check_duality(inst, &sol.coupling, &cert)?;
    duality.elapsed_ms = (!deterministic).then(|| ms(started));
    let (cert_name, coupling_name) = (artifact_name("certificate", suffix), artifact_name("coupling", suffix));
    write_json(a.out.join(&cert_name), &cert.to_file(inst)?)?;
    save_coupling(a.out.join(&coupling_name), &sol.coupling, inst)?;
    Ok(BackendResult {
        backend: "exact".into(),
        direction: inst.direction(),
        value: sol.value,
        epsilon: None,
        iterations: sol.iterations,
        converged: true,
        certificate: cert_name,
        coupling: coupling_name,
        schedule: None,
        chi,
        coupling_diagnostics: sol.coupling.diagnostics(inst)?,
        duality,
    })
}

fn solve_entropic_backend(a: &SolveArgs, inst: &VmotInstance, suffix: &str, deterministic: bool) -> Result<BackendResult, Fail> {
    let started = Instant::now();
    let (sol, schedule) = match (&a.schedule, a.epsilon) {
        (Some(list), _) => {
            let r = epsilon_schedule(inst, list, a.max_iter, a.tol)?;
            (r.last, Some(r.stages))
        }
        (None, eps) => {
            let opts = EntropicOptions {
                max_iter: a.max_iter,
                tol: a.tol,
                ..EntropicOptions::new(eps.unwrap_or(0.05))
            };
            (solve_entropic_with(inst, &opts)?, None)
        }
    };
    if !sol.converged {
        eprintln!(
            "warning: entropic solve stopped at the iteration limit with violation {:e}",
            sol.marginal_violation.max(sol.martingale_violation)
        );
    }
    let cert = normalized(sol.certificate.clone(), inst);
    let mut duality = check_duality(inst, &sol.coupling, &cert)?;
    duality.elapsed_ms = (!deterministic).then(|| ms(started));
    let (cert_name, coupling_name) = (artifact_name("certificate", suffix), artifact_name("coupling", suffix));
    write_json(a.out.join(&cert_name), &cert.to_file(inst)?)?;
    save_coupling(a.out.join(&coupling_name), &sol.coupling, inst)?;
    Ok(BackendResult {
        backend: "entropic".into(),
        direction: inst.direction(),
        value: sol.value,
        epsilon: Some(sol.epsilon),
        iterations: sol.iterations,
        converged: sol.converged,
        certificate: cert_name,
        coupling: coupling_name,
        schedule,
        chi: None,
        coupling_diagnostics: sol.coupling.diagnostics(inst)?,
        duality,
    })
}

/// Tolerances for an entropic certificate. Its pathwise slack is at most
/// `eps ln(1 / R(x))` with `R` the product of the marginals, so that bound
/// replaces the one-sided tolerance and support residuals are reported only.
fn entropic_replication(inst: &VmotInstance, eps: f64, base: ReplicationOptions) -> ReplicationOptions {
    let sys = inst.system();
    let mut log_r_min = 0.0;
    for t in 0..inst.periods() {
        for i in 0..inst.assets() {
            let w = sys.marginal(t, i).weights().iter().copied().fold(f64::INFINITY, f64::min);
            log_r_min += w.ln();
        }
    }
    ReplicationOptions {
        one_sided_tol: base.one_sided_tol + eps * -log_r_min,
        support_tol: f64::INFINITY,
        ..base
    }
}

fn cmd_verify(a: &VerifyArgs) -> Outcome {
    let cfg = load_config(&a.config)?;
    let report_path = a.out.join("report.json");
    let (info, pairs) = if report_path.exists() {
        let rep: RunReport = read_json(&report_path)?;
        let pairs: Vec<_> = rep.results.iter().map(|r| (r.direction, r.certificate.clone(), r.coupling.clone())).collect();
        (rep.build, pairs)
    } else {
        let info = BuildInfo {
            direction: cfg.config.direction,
            perturb: None,
            conditioning: Conditioning::FullHistory,
        };
        (info, vec![(info.direction, "certificate.json".into(), "coupling.json".into())])
    };
    let base = build(&cfg, info)?;
    let opts = ReplicationOptions {
        mass_floor: a.mass_floor,
        support_tol: a.support_tol,
        one_sided_tol: a.one_sided_tol,
    };
    let mut all = true;
    for (dir, cert_name, coupling_name) in pairs {
        let inst = base.with_direction(dir);
        let file = File::open(a.out.join(&cert_name)).map_err(|e| usage(format!("{cert_name}: {e}")))?;
        let cert = DualCertificate::load(BufReader::new(file), &inst)?;
        let coupling: Coupling = load_coupling(a.out.join(&coupling_name), &inst)
            .map_err(|e| Fail { msg: format!("{coupling_name}: {e}"), ..Fail::from(e) })?;
        let duality = check_duality(&inst, &coupling, &cert)?;
        let opts = match (cert.source, cert.epsilon) {
            (CertificateSource::Entropic, Some(eps)) => entropic_replication(&inst, eps, opts),
            _ => opts,
        };
        let rep = check_replication_with(&inst, &coupling, &cert, opts)?;
        print_verify(&cert_name, &duality, &rep);
        all &= duality.pass && rep.pass;
    }
    println!("{}", if all { "PASS" } else { "FAIL" });
    Ok(all)
}

fn print_verify(name: &str, d: &SolveReport, r: &ReplicationReport) {
    println!("{name} ({}, {:?}):", d.direction, d.source);
    println!(
        "  primal {}  dual {}  gap {:.3e} (tol {:.1e})  {}",
        fmt_value(d.primal_value),
        fmt_value(d.dual_value),
        d.gap,
        d.gap_tol,
        if d.pass { "ok" } else { "FAIL" }
    );
    println!(
        "  support paths {}  max residual {:.3e} (tol {:.1e})",
        r.support.len(),
        r.max_support_residual,
        r.support_tol
    );
    println!(
        "  worst one-sided breach {:.3e} (tol {:.1e}) at {:?}  {}",
        r.worst_one_sided.amount,
        r.one_sided_tol,
        r.worst_one_sided.path,
        if r.pass { "ok" } else { "FAIL" }
    );
}

fn cmd_cross(a: &CrossArgs) -> Outcome {
    let (_, _, inst) = prepare(&a.inst)?;
    let opts = CrossValidationOptions {
        eps_list: a.schedule.clone(),
        max_iter: a.max_iter,
        tol: a.tol,
        alternates: a.alternates,
        seed: a.seed,
    };
    let cv = cross_validate_with(&inst, &opts)?;
    println!("exact {} value: {}", cv.direction, fmt_value(cv.exact_value));
    println!("[MIN, MAX] = [{}, {}]", fmt_value(cv.bracket[0]), fmt_value(cv.bracket[1]));
    println!("{:<22} {:>14} {:>11} {:>11} {:>11}  result", "route", "dual value", "gap", "breach", "residual");
    for r in &cv.routes {
        println!(
            "{:<22} {:>14} {:>11.3e} {:>11.3e} {:>11.3e}  {}",
            r.route,
            fmt_value(r.dual_value),
            r.gap,
            r.worst_violation,
            r.max_support_residual,
            if r.pass { "ok" } else { "FAIL" }
        );
    }
    if let Some(why) = &cv.envelope_skipped {
        println!("envelope route skipped: {why}");
    }
    for s in &cv.entropic {
        println!(
            "entropic eps {:<6} value {:<14} violation {:.2e}{}",
            s.epsilon,
            fmt_value(s.value),
            s.violation,
            if s.converged { "" } else { " (not converged)" }
        );
    }
    println!(
        "entropic values inside bracket (slack {:.1e}): {}",
        cv.entropic_slack,
        if cv.entropic_in_bracket { "yes" } else { "no" }
    );
    if let Some(dir) = &a.out {
        std::fs::create_dir_all(dir).map_err(Error::from)?;
        write_json(dir.join("cross_validation.json"), &cv)?;
    }
    println!("{}", if cv.pass { "PASS" } else { "FAIL" });
    Ok(cv.pass)
}
