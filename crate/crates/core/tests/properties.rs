use proptest::prelude::*;

use vmot_core::dual_recovery::{certificate_from_lp, CertificateSource, DualCertificate};
use vmot_core::instance::{build_instance, Direction, MarginalSystem, Payoff, VmotInstance};
use vmot_core::marginals::DiscreteMarginal;
use vmot_core::solver_entropic::{solve_entropic, DEFAULT_MAX_ITER};
use vmot_core::solver_exact::{assemble_lp, solve_exact, Coupling};
use vmot_core::verify::{check_duality, check_replication_with, ReplicationOptions};

/// One asset: a law on 1-3 atoms followed by mean-preserving two-point
/// splits of every atom.
fn chain(periods: usize) -> impl Strategy<Value = Vec<DiscreteMarginal>> {
    let first = prop::collection::vec((-1.0f64..1.0, 0.2f64..1.0), 1..=3);
    let splits = prop::collection::vec((0.3f64..1.5, 0.3f64..1.5), 12);
    (first, splits).prop_map(move |(atoms, splits)| {
        let (p, w): (Vec<f64>, Vec<f64>) = atoms.into_iter().unzip();
        let mut out = vec![DiscreteMarginal::normalized(p, w).unwrap()];
        let mut k = 0;
        while out.len() < periods {
            let mu = out.last().unwrap();
            let mut pts = Vec::new();
            let mut ws = Vec::new();
            for (&x, &m) in mu.points().iter().zip(mu.weights()) {
                let (a, b) = splits[k % splits.len()];
                k += 1;
                pts.extend([x - a, x + b]);
                ws.extend([m * b / (a + b), m * a / (a + b)]);
            }
            out.push(DiscreteMarginal::normalized(pts, ws).unwrap());
        }
        out
    })
}

const PAYOFFS: [&str; 5] = [
    "abs(x[N][1]-x[1][1])",
    "max(x[N][1]-x[1][1], 0)",
    "pow(x[2][1]-x[1][1], 2)",
    "max(x[1][1], x[2][1], x[N][1])",
    "x[2][1]*x[N][1]",
];

fn instance(mu: Vec<DiscreteMarginal>, payoff: usize, dir: Direction) -> VmotInstance {
    let n = mu.len();
    let src = PAYOFFS[payoff].replace('N', &n.to_string());
    let sys = MarginalSystem::new(mu.into_iter().map(|m| vec![m]).collect()).unwrap();
    build_instance(sys, Payoff::parse(&src, n, 1).unwrap(), dir).unwrap()
}

fn solve(inst: &VmotInstance) -> (f64, Coupling, DualCertificate) {
    let tab = assemble_lp(inst).unwrap();
    let sol = solve_exact(&tab, inst.direction()).unwrap();
    let cert = certificate_from_lp(&tab, &sol, inst).unwrap();
    (sol.value, sol.coupling, cert)
}

fn instances() -> impl Strategy<Value = (Vec<DiscreteMarginal>, usize)> {
    (2usize..=3).prop_flat_map(|n| (chain(n), 0..PAYOFFS.len()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn lp_duals_close_the_gap((mu, k) in instances()) {
        for dir in [Direction::Min, Direction::Max] {
            let inst = instance(mu.clone(), k, dir);
            let (value, coupling, cert) = solve(&inst);
            prop_assert!((cert.dual_value(&inst) - value).abs() <= 1e-7);
            prop_assert!(coupling.diagnostics(&inst).unwrap().is_valid(1e-9));
            let rep = check_duality(&inst, &coupling, &cert).unwrap();
            prop_assert!(rep.pass && rep.weak_duality);
        }
    }

    #[test]
    fn min_never_exceeds_max((mu, k) in instances()) {
        let lo = solve(&instance(mu.clone(), k, Direction::Min)).0;
        let hi = solve(&instance(mu, k, Direction::Max)).0;
        prop_assert!(lo <= hi + 1e-9);
    }

    #[test]
    fn certificates_hedge_and_trading_legs_vanish((mu, k) in instances()) {
        let min = instance(mu.clone(), k, Direction::Min);
        let max = instance(mu, k, Direction::Max);
        let (_, pi_min, cert_min) = solve(&min);
        let (_, pi_max, cert_max) = solve(&max);
        prop_assert!(cert_min.worst_violation(&min).unwrap().amount <= 1e-7);
        prop_assert!(cert_max.worst_violation(&max).unwrap().amount <= 1e-7);
        let grid = min.grid();
        for cert in [&cert_min, &cert_max] {
            for pi in [&pi_min, &pi_max] {
                let gain: f64 = pi.masses().iter().map(|&(j, m)| m * cert.trading_gain(grid, j)).sum();
                prop_assert!(gain.abs() <= 1e-8);
            }
        }
        // Weak duality against the other direction's optimizer.
        let costs = min.costs().unwrap();
        prop_assert!(cert_min.dual_value(&min) <= pi_max.expectation(costs) + 1e-7);
        prop_assert!(cert_max.dual_value(&max) >= pi_min.expectation(costs) - 1e-7);
    }

    #[test]
    fn support_residuals_follow_the_gap((mu, k) in instances()) {
        let inst = instance(mu, k, Direction::Min);
        let (_, pi, cert) = solve(&inst);
        let gap = check_duality(&inst, &pi, &cert).unwrap().gap;
        let opts = ReplicationOptions { one_sided_tol: 1e-7, ..Default::default() };
        let rep = check_replication_with(&inst, &pi, &cert, opts).unwrap();
        // E_pi[payout - c] = -gap for a feasible pi, and every support
        // residual has the same sign, so each is at most gap / mass.
        let min_mass = rep.support.iter().map(|s| s.mass).fold(f64::INFINITY, f64::min);
        prop_assert!(rep.max_support_residual <= (gap + 1e-9) / min_mass);
        prop_assert!(rep.pass);
    }

    #[test]
    fn marginal_shift_moves_both_bounds((mu, k) in instances(), a in -1.0f64..1.0, b in -1.0f64..1.0) {
        let n = mu.len();
        let g = move |t: usize, x: f64| a * (x * (t as f64 + 1.0)).sin() + b * x * x;
        let shift: f64 = mu.iter().enumerate().map(|(t, m)| m.integrate(|x| g(t, x))).sum();
        for dir in [Direction::Min, Direction::Max] {
            let base = instance(mu.clone(), k, dir);
            let v0 = solve(&base).0;
            let inner = base.payoff().clone();
            let shifted = Payoff::native("shifted", move |x: &[f64]| {
                inner.eval(x, 1) + x.iter().enumerate().map(|(t, &v)| g(t, v)).sum::<f64>()
            });
            let sys = base.system().clone();
            let inst = build_instance(sys, shifted, dir).unwrap();
            prop_assert!((solve(&inst).0 - v0 - shift).abs() <= 1e-8, "n = {n}");
        }
    }

    #[test]
    fn affine_transfers_leave_payouts_fixed((mu, k) in instances(), beta in -3.0f64..3.0, alpha in -3.0f64..3.0) {
        let inst = instance(mu, k, Direction::Min);
        let (_, _, cert) = solve(&inst);
        let mut moved = cert.clone();
        // Add alpha + beta (x_2 - x_1) through phi and cancel it with h.
        let sys = inst.system();
        for (a, &x) in sys.marginal(1, 0).points().iter().enumerate() {
            moved.phi[1][0][a] += alpha + beta * x;
        }
        for (a, &x) in sys.marginal(0, 0).points().iter().enumerate() {
            moved.phi[0][0][a] -= alpha + beta * x;
        }
        for h in moved.h[0].iter_mut() {
            h[0] -= beta;
        }
        let grid = inst.grid();
        for j in 0..inst.n_paths() {
            prop_assert!((moved.payout(grid, j) - cert.payout(grid, j)).abs() <= 1e-10);
        }
        prop_assert!((moved.dual_value(&inst) - cert.dual_value(&inst)).abs() <= 1e-10);
    }

    #[test]
    fn terminal_payoffs_replicate_statically(mu in (2usize..=3).prop_flat_map(chain), strike in -1.0f64..1.0) {
        let n = mu.len();
        let f = move |x: f64| (x - strike).max(0.0);
        let src = format!("max(x[{n}][1]-{strike}, 0)");
        let expect = mu[n - 1].integrate(f);
        for dir in [Direction::Min, Direction::Max] {
            let sys = MarginalSystem::new(mu.iter().map(|m| vec![m.clone()]).collect()).unwrap();
            let inst = build_instance(sys, Payoff::parse(&src, n, 1).unwrap(), dir).unwrap();
            let (value, pi, _) = solve(&inst);
            prop_assert!((value - expect).abs() <= 1e-8);
            let mut cert = DualCertificate::zero(&inst, CertificateSource::Exact);
            for (a, &x) in mu[n - 1].points().iter().enumerate() {
                cert.phi[n - 1][0][a] = f(x);
            }
            let rep = check_replication_with(&inst, &pi, &cert, ReplicationOptions::default()).unwrap();
            prop_assert!(rep.max_support_residual == 0.0 && rep.worst_one_sided.amount <= 0.0);
        }
    }

    #[test]
    fn cost_table_and_build_are_deterministic((mu, k) in instances()) {
        let a = instance(mu.clone(), k, Direction::Min);
        let b = instance(mu, k, Direction::Min);
        prop_assert_eq!(a.hash(), b.hash());
        let (ca, cb) = (a.costs().unwrap(), b.costs().unwrap());
        for j in 0..a.n_paths() {
            let first = a.eval_payoff(j).unwrap();
            prop_assert_eq!(first.to_bits(), a.eval_payoff(j).unwrap().to_bits());
            prop_assert_eq!(first.to_bits(), ca[j].to_bits());
            prop_assert_eq!(ca[j].to_bits(), cb[j].to_bits());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    /// `|v_eps - v_exact| <= K eps ln P` with `K = 1`; a regression guard.
    #[test]
    fn entropic_tracks_exact_and_meets_constraints((mu, k) in instances(), eps in prop::sample::select(vec![0.5, 0.1, 0.05])) {
        let tol = 1e-7;
        let inst = instance(mu, k, Direction::Min);
        // On reducible pairs the potentials diverge and convergence is only
        // sublinear.
        prop_assume!(inst.system().is_irreducible().unwrap());
        let exact = solve(&inst).0;
        let sol = solve_entropic(&inst, eps, DEFAULT_MAX_ITER, tol).unwrap();
        prop_assert!(sol.converged);
        let p = inst.n_paths() as f64;
        prop_assert!((sol.value - exact).abs() <= eps * p.ln().max(1.0));

        let grid = inst.grid();
        for t in 0..inst.periods() {
            let mu_t = inst.system().marginal(t, 0);
            let mut push = vec![0.0; mu_t.len()];
            for &(j, m) in sol.coupling.masses() {
                push[grid.atom(j, t, 0)] += m;
            }
            let tv: f64 = push.iter().zip(mu_t.weights()).map(|(a, b)| (a - b).abs()).sum::<f64>() / 2.0;
            prop_assert!(tv <= tol);
        }
        for t in 0..inst.periods() - 1 {
            let blocks = grid.n_prefixes(t + 1);
            let mut mass = vec![0.0; blocks];
            let mut drift = vec![0.0; blocks];
            for &(j, m) in sol.coupling.masses() {
                let b = grid.prefix(j, t + 1);
                mass[b] += m;
                drift[b] += m * (grid.value(j, t + 1, 0) - grid.value(j, t, 0));
            }
            for (m, d) in mass.iter().zip(&drift) {
                if *m >= tol {
                    prop_assert!((d / m).abs() <= tol + 1e-12);
                }
            }
        }
    }
}
