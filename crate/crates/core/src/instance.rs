//! Problem instances: the marginal system, the product path grid and the
//! payoff with its cached cost table.

use std::fmt;
use std::sync::{Arc, OnceLock};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::marginals::{check_convex_order, irreducibility, perturb_chain, DiscreteMarginal, IrreducibleDomain};
use crate::payoff::Expr;

/// Default cap on the number of grid paths.
pub const DEFAULT_PATH_BUDGET: u128 = 1 << 22;

/// The `N x d` array of marginals, stored period-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalSystem {
    periods: usize,
    assets: usize,
    marginals: Vec<DiscreteMarginal>,
}

impl MarginalSystem {
    /// `marginals[t][i]` is the law of asset `i` at maturity `t`. Every
    /// consecutive pair of one asset must be in convex order.
    pub fn new(marginals: Vec<Vec<DiscreteMarginal>>) -> Result<Self> {
        let sys = Self::new_unchecked(marginals)?;
        sys.check_order()?;
        Ok(sys)
    }

    /// Shape validation only; convex order is not enforced.
    pub fn new_unchecked(marginals: Vec<Vec<DiscreteMarginal>>) -> Result<Self> {
        let periods = marginals.len();
        if periods < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least two maturities, got {periods}"
            )));
        }
        let assets = marginals[0].len();
        if assets == 0 {
            return Err(Error::InvalidArgument("need at least one asset".into()));
        }
        if marginals.iter().any(|row| row.len() != assets) {
            return Err(Error::InvalidArgument(
                "every maturity needs one marginal per asset".into(),
            ));
        }
        Ok(Self {
            periods,
            assets,
            marginals: marginals.into_iter().flatten().collect(),
        })
    }

    pub fn periods(&self) -> usize {
        self.periods
    }

    pub fn assets(&self) -> usize {
        self.assets
    }

    /// Zero-based `(t, i)`.
    pub fn marginal(&self, t: usize, i: usize) -> &DiscreteMarginal {
        &self.marginals[t * self.assets + i]
    }

    /// Fails on the first `(t, i)` whose pair `(mu_{t,i}, mu_{t+1,i})` is
    /// not in convex order (reported 1-based).
    pub fn check_order(&self) -> Result<()> {
        for t in 0..self.periods - 1 {
            for i in 0..self.assets {
                let r = check_convex_order(self.marginal(t, i), self.marginal(t + 1, i));
                if !r.holds {
                    return Err(Error::ConvexOrderViolation {
                        period: t + 1,
                        asset: i + 1,
                        witness: r.witness.unwrap_or(f64::NAN),
                    });
                }
            }
        }
        Ok(())
    }

    /// Domains of every consecutive pair, indexed `[t][i]` for `t < N - 1`.
    pub fn domains(&self) -> Result<Vec<Vec<IrreducibleDomain>>> {
        (0..self.periods - 1)
            .map(|t| {
                (0..self.assets)
                    .map(|i| {
                        irreducibility(self.marginal(t, i), self.marginal(t + 1, i)).map_err(|e| match e {
                            Error::ConvexOrderViolation { witness, .. } => Error::ConvexOrderViolation {
                                period: t + 1,
                                asset: i + 1,
                                witness,
                            },
                            other => other,
                        })
                    })
                    .collect()
            })
            .collect()
    }

    /// A sequence is irreducible when every consecutive pair of every asset
    /// is.
    pub fn is_irreducible(&self) -> Result<bool> {
        Ok(self.domains()?.iter().flatten().all(|d| d.irreducible))
    }

    /// Applies [`perturb_chain`] to every asset.
    pub fn perturbed(&self, eps: f64) -> Result<Self> {
        let mut rows = vec![Vec::with_capacity(self.assets); self.periods];
        for i in 0..self.assets {
            let chain: Vec<DiscreteMarginal> =
                (0..self.periods).map(|t| self.marginal(t, i).clone()).collect();
            for (t, mu) in perturb_chain(&chain, eps)?.into_iter().enumerate() {
                rows[t].push(mu);
            }
        }
        Self::new_unchecked(rows)
    }

    /// Per-asset mean of the first maturity.
    pub fn first_means(&self) -> Vec<f64> {
        (0..self.assets).map(|i| self.marginal(0, i).mean()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Min,
    Max,
}

impl Direction {
    /// `+1` for minimisation, `-1` for maximisation.
    pub fn sign(self) -> f64 {
        match self {
            Direction::Min => 1.0,
            Direction::Max => -1.0,
        }
    }

    pub fn opposite(self) -> Self {
        match self {
            Direction::Min => Direction::Max,
            Direction::Max => Direction::Min,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Min => "min",
            Direction::Max => "max",
        })
    }
}

/// What the martingale constraint conditions on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Conditioning {
    /// `E[X_{t+1} | X_1, ..., X_t] = X_t`.
    #[default]
    FullHistory,
    /// `E[X_{t+1} | X_t] = X_t`.
    Markov,
}

/// The product grid of marginal supports. Paths are indexed row-major over
/// `(t, i, atom)`, the last asset of the last maturity varying fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct PathGrid {
    periods: usize,
    assets: usize,
    supports: Vec<Vec<f64>>,
    sizes: Vec<usize>,
    /// `suffix[k]` = number of grid cells spanned by coordinates `k..`.
    suffix: Vec<usize>,
}

impl PathGrid {
    pub fn new(system: &MarginalSystem, budget: u128) -> Result<Self> {
        let (n, d) = (system.periods(), system.assets());
        let supports: Vec<Vec<f64>> = (0..n)
            .flat_map(|t| (0..d).map(move |i| (t, i)))
            .map(|(t, i)| system.marginal(t, i).points().to_vec())
            .collect();
        let sizes: Vec<usize> = supports.iter().map(Vec::len).collect();
        let paths: u128 = sizes.iter().map(|&s| s as u128).product();
        if paths > budget || paths > usize::MAX as u128 {
            return Err(Error::GridBudgetExceeded { paths, budget });
        }
        let mut suffix = vec![1usize; sizes.len() + 1];
        for k in (0..sizes.len()).rev() {
            suffix[k] = suffix[k + 1] * sizes[k];
        }
        Ok(Self {
            periods: n,
            assets: d,
            supports,
            sizes,
            suffix,
        })
    }

    pub fn periods(&self) -> usize {
        self.periods
    }

    pub fn assets(&self) -> usize {
        self.assets
    }

    pub fn n_paths(&self) -> usize {
        self.suffix[0]
    }

    /// Support of `mu_{t,i}` (zero-based).
    pub fn support(&self, t: usize, i: usize) -> &[f64] {
        &self.supports[t * self.assets + i]
    }

    pub fn size(&self, t: usize, i: usize) -> usize {
        self.sizes[t * self.assets + i]
    }

    /// Atom index of asset `i` at maturity `t` on path `flat`.
    #[inline]
    pub fn atom(&self, flat: usize, t: usize, i: usize) -> usize {
        let k = t * self.assets + i;
        (flat / self.suffix[k + 1]) % self.sizes[k]
    }

    #[inline]
    pub fn value(&self, flat: usize, t: usize, i: usize) -> f64 {
        self.supports[t * self.assets + i][self.atom(flat, t, i)]
    }

    /// Path values laid out `x[t * d + i]`.
    pub fn values(&self, flat: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.sizes.len());
        self.fill_values(flat, &mut out);
        out
    }

    pub fn fill_values(&self, flat: usize, out: &mut Vec<f64>) {
        out.clear();
        for k in 0..self.sizes.len() {
            out.push(self.supports[k][(flat / self.suffix[k + 1]) % self.sizes[k]]);
        }
    }

    /// Path values as `[[x_{1,1}, ..], .., [x_{N,1}, ..]]`.
    pub fn nested_values(&self, flat: usize) -> Vec<Vec<f64>> {
        self.values(flat)
            .chunks(self.assets)
            .map(<[f64]>::to_vec)
            .collect()
    }

    /// Number of distinct histories `(x_1, .., x_t)` for `t` in `1..=N`.
    pub fn n_prefixes(&self, t: usize) -> usize {
        self.suffix[0] / self.suffix[t * self.assets]
    }

    /// Number of paths sharing one history of length `t`.
    pub fn suffix_len(&self, t: usize) -> usize {
        self.suffix[t * self.assets]
    }

    /// History index of length `t` (`1..=N`) for path `flat`.
    #[inline]
    pub fn prefix(&self, flat: usize, t: usize) -> usize {
        flat / self.suffix[t * self.assets]
    }

    /// Number of states of maturity `t` (zero-based).
    pub fn n_states(&self, t: usize) -> usize {
        self.suffix[t * self.assets] / self.suffix[(t + 1) * self.assets]
    }

    /// State index of maturity `t` (zero-based) on path `flat`.
    #[inline]
    pub fn state(&self, flat: usize, t: usize) -> usize {
        (flat / self.suffix[(t + 1) * self.assets]) % self.n_states(t)
    }

    /// Values of state `s` at maturity `t`.
    pub fn state_values(&self, t: usize, s: usize) -> Vec<f64> {
        let d = self.assets;
        (0..d)
            .map(|i| {
                let k = t * d + i;
                let stride = self.suffix[k + 1] / self.suffix[(t + 1) * d];
                self.supports[k][(s / stride) % self.sizes[k]]
            })
            .collect()
    }

    /// Values of history `prefix` of length `t`, laid out `x[s * d + i]`.
    pub fn prefix_values(&self, prefix: usize, t: usize) -> Vec<f64> {
        // The first path of the history carries its values.
        let flat = prefix * self.suffix_len(t);
        let mut v = self.values(flat);
        v.truncate(t * self.assets);
        v
    }

    /// State index at maturity `t - 1` (zero-based) of a history of length
    /// `t`.
    pub fn state_of_prefix(&self, prefix: usize, t: usize) -> usize {
        prefix % self.n_states(t - 1)
    }

    /// Product-measure weight of state `s` at maturity `t`.
    pub fn state_weight(&self, system: &MarginalSystem, t: usize, s: usize) -> f64 {
        let d = self.assets;
        (0..d)
            .map(|i| {
                let k = t * d + i;
                let stride = self.suffix[k + 1] / self.suffix[(t + 1) * d];
                system.marginal(t, i).weights()[(s / stride) % self.sizes[k]]
            })
            .product()
    }

    /// Atom indices of state `s` at maturity `t`.
    pub fn state_atoms(&self, t: usize, s: usize) -> Vec<usize> {
        let d = self.assets;
        (0..d)
            .map(|i| {
                let k = t * d + i;
                let stride = self.suffix[k + 1] / self.suffix[(t + 1) * d];
                (s / stride) % self.sizes[k]
            })
            .collect()
    }
}

type NativeFn = dyn Fn(&[f64]) -> f64 + Send + Sync;

/// Payoff of the path-dependent claim.
#[derive(Clone)]
pub enum PayoffFn {
    Expr(Expr),
    /// Closure over path values `x[t * d + i]` with a label used in reports
    /// and hashing.
    Native { label: String, func: Arc<NativeFn> },
}

impl fmt::Debug for PayoffFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PayoffFn::Expr(e) => write!(f, "{e:?}"),
            PayoffFn::Native { label, .. } => write!(f, "Native({label:?})"),
        }
    }
}

/// A payoff together with optional one-dimensional bounds `v_{t,i}`.
#[derive(Debug, Clone)]
pub struct Payoff {
    pub func: PayoffFn,
    /// `bounds[t][i]` is a function of the scalar `x`.
    pub bounds: Option<Vec<Vec<Expr>>>,
}

impl Payoff {
    pub fn parse(src: &str, periods: usize, assets: usize) -> Result<Self> {
        Ok(Self {
            func: PayoffFn::Expr(Expr::parse(src, periods, assets)?),
            bounds: None,
        })
    }

    pub fn native(label: impl Into<String>, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            func: PayoffFn::Native {
                label: label.into(),
                func: Arc::new(f),
            },
            bounds: None,
        }
    }

    pub fn with_bounds(mut self, bounds: Vec<Vec<Expr>>) -> Self {
        self.bounds = Some(bounds);
        self
    }

    pub fn label(&self) -> &str {
        match &self.func {
            PayoffFn::Expr(e) => e.source(),
            PayoffFn::Native { label, .. } => label,
        }
    }

    pub fn eval(&self, x: &[f64], assets: usize) -> f64 {
        match &self.func {
            PayoffFn::Expr(e) => e.eval(x, assets),
            PayoffFn::Native { func, .. } => func(x),
        }
    }
}

/// Whether the integrability bound of the cost was verified on the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundStatus {
    Checked,
    Unchecked,
}

#[derive(Debug, Clone, Copy)]
pub struct InstanceOptions {
    pub path_budget: u128,
    pub enforce_convex_order: bool,
    pub conditioning: Conditioning,
}

impl Default for InstanceOptions {
    fn default() -> Self {
        Self {
            path_budget: DEFAULT_PATH_BUDGET,
            enforce_convex_order: true,
            conditioning: Conditioning::FullHistory,
        }
    }
}

/// A fully specified VMOT problem. Immutable after construction; the cost
/// table is computed once on first use.
#[derive(Debug)]
pub struct VmotInstance {
    system: MarginalSystem,
    grid: PathGrid,
    payoff: Payoff,
    direction: Direction,
    conditioning: Conditioning,
    bound_status: BoundStatus,
    costs: OnceLock<std::result::Result<Vec<f64>, usize>>,
    hash: OnceLock<String>,
}

/// [`VmotInstance::build`] with default options.
pub fn build_instance(system: MarginalSystem, payoff: Payoff, direction: Direction) -> Result<VmotInstance> {
    VmotInstance::build(system, payoff, direction, InstanceOptions::default())
}

impl VmotInstance {
    pub fn build(
        system: MarginalSystem,
        payoff: Payoff,
        direction: Direction,
        options: InstanceOptions,
    ) -> Result<Self> {
        if options.enforce_convex_order {
            system.check_order()?;
        }
        let grid = PathGrid::new(&system, options.path_budget)?;
        if let Some(b) = &payoff.bounds {
            if b.len() != system.periods() || b.iter().any(|r| r.len() != system.assets()) {
                return Err(Error::InvalidArgument(
                    "bounds need one function per (maturity, asset)".into(),
                ));
            }
        }
        let mut inst = Self {
            system,
            grid,
            payoff,
            direction,
            conditioning: options.conditioning,
            bound_status: BoundStatus::Unchecked,
            costs: OnceLock::new(),
            hash: OnceLock::new(),
        };
        if inst.payoff.bounds.is_some() {
            inst.check_bounds()?;
            inst.bound_status = BoundStatus::Checked;
        }
        Ok(inst)
    }

    /// The same marginals and payoff under the other direction.
    pub fn with_direction(&self, direction: Direction) -> Self {
        let costs = OnceLock::new();
        if let Some(c) = self.costs.get() {
            let _ = costs.set(c.clone());
        }
        Self {
            system: self.system.clone(),
            grid: self.grid.clone(),
            payoff: self.payoff.clone(),
            direction,
            conditioning: self.conditioning,
            bound_status: self.bound_status,
            costs,
            hash: OnceLock::new(),
        }
    }

    fn check_bounds(&self) -> Result<()> {
        let bounds = self.payoff.bounds.as_ref().expect("bounds present");
        let costs = self.costs()?;
        let d = self.assets();
        let mut x = Vec::new();
        for (flat, &c) in costs.iter().enumerate() {
            self.grid.fill_values(flat, &mut x);
            let bound: f64 = (0..x.len())
                .map(|k| bounds[k / d][k % d].eval_scalar(x[k]))
                .sum();
            if !(c.abs() <= bound) {
                return Err(Error::BoundViolation {
                    path: x.clone(),
                    cost_abs: c.abs(),
                    bound,
                });
            }
        }
        Ok(())
    }

    pub fn system(&self) -> &MarginalSystem {
        &self.system
    }

    pub fn grid(&self) -> &PathGrid {
        &self.grid
    }

    pub fn payoff(&self) -> &Payoff {
        &self.payoff
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn conditioning(&self) -> Conditioning {
        self.conditioning
    }

    pub fn bound_status(&self) -> BoundStatus {
        self.bound_status
    }

    pub fn periods(&self) -> usize {
        self.system.periods()
    }

    pub fn assets(&self) -> usize {
        self.system.assets()
    }

    pub fn n_paths(&self) -> usize {
        self.grid.n_paths()
    }

    /// Cost of every grid path, computed once.
    pub fn costs(&self) -> Result<&[f64]> {
        let cached = self.costs.get_or_init(|| {
            let d = self.assets();
            let table: Vec<f64> = (0..self.n_paths())
                .into_par_iter()
                .map_init(Vec::new, |buf, flat| {
                    self.grid.fill_values(flat, buf);
                    self.payoff.eval(buf, d)
                })
                .collect();
            match table.iter().position(|c| !c.is_finite()) {
                Some(bad) => Err(bad),
                None => Ok(table),
            }
        });
        match cached {
            Ok(t) => Ok(t),
            Err(bad) => Err(Error::NonFiniteCost {
                path: self.grid.values(*bad),
            }),
        }
    }

    /// `c(x)` on grid path `flat`.
    pub fn eval_payoff(&self, flat: usize) -> Result<f64> {
        if flat >= self.n_paths() {
            return Err(Error::InvalidArgument(format!(
                "path index {flat} out of range ({} paths)",
                self.n_paths()
            )));
        }
        Ok(self.costs()?[flat])
    }

    /// Path index from per-coordinate atom indices laid out `[t * d + i]`.
    pub fn path_index(&self, atoms: &[usize]) -> Result<usize> {
        let (n, d) = (self.periods(), self.assets());
        if atoms.len() != n * d {
            return Err(Error::InvalidArgument(format!(
                "expected {} atom indices, got {}",
                n * d,
                atoms.len()
            )));
        }
        let mut flat = 0usize;
        for (k, &a) in atoms.iter().enumerate() {
            let size = self.grid.size(k / d, k % d);
            if a >= size {
                return Err(Error::InvalidArgument(format!("atom index {a} out of range at coordinate {k}")));
            }
            flat = flat * size + a;
        }
        Ok(flat)
    }

    /// Content hash identifying this instance in artifacts.
    pub fn hash(&self) -> String {
        self.hash
            .get_or_init(|| {
                let mut h = Sha256::new();
                h.update(b"vmot-instance-v1");
                h.update((self.periods() as u64).to_le_bytes());
                h.update((self.assets() as u64).to_le_bytes());
                for t in 0..self.periods() {
                    for i in 0..self.assets() {
                        let mu = self.system.marginal(t, i);
                        h.update((mu.len() as u64).to_le_bytes());
                        for (p, w) in mu.points().iter().zip(mu.weights()) {
                            h.update(p.to_bits().to_le_bytes());
                            h.update(w.to_bits().to_le_bytes());
                        }
                    }
                }
                match &self.payoff.func {
                    PayoffFn::Expr(e) => {
                        h.update(b"expr:");
                        h.update(e.source().as_bytes());
                    }
                    PayoffFn::Native { label, .. } => {
                        h.update(b"native:");
                        h.update(label.as_bytes());
                        if let Ok(costs) = self.costs() {
                            for c in costs {
                                h.update(c.to_bits().to_le_bytes());
                            }
                        }
                    }
                }
                h.update(self.direction.to_string().as_bytes());
                h.update(match self.conditioning {
                    Conditioning::FullHistory => b"full".as_slice(),
                    Conditioning::Markov => b"markov".as_slice(),
                });
                hex::encode(h.finalize())
            })
            .clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two(a: f64, b: f64) -> DiscreteMarginal {
        DiscreteMarginal::new(vec![a, b], vec![0.5, 0.5]).unwrap()
    }

    fn inst_a() -> VmotInstance {
        let sys = MarginalSystem::new(vec![vec![DiscreteMarginal::dirac(0.0)], vec![two(-1.0, 1.0)]]).unwrap();
        build_instance(sys, Payoff::parse("abs(x[2][1]-x[1][1])", 2, 1).unwrap(), Direction::Min).unwrap()
    }

    #[test]
    fn build_examples() {
        assert_eq!(inst_a().n_paths(), 2);

        let swapped = MarginalSystem::new(vec![vec![two(-1.0, 1.0)], vec![DiscreteMarginal::dirac(0.0)]]);
        assert!(matches!(
            swapped,
            Err(Error::ConvexOrderViolation { period: 1, asset: 1, .. })
        ));

        let three = |s: f64| DiscreteMarginal::uniform(&[-s, 0.0, s]).unwrap();
        let sys = MarginalSystem::new(vec![vec![three(1.0), three(1.0)], vec![three(2.0), three(2.0)]]).unwrap();
        let inst = build_instance(sys, Payoff::parse("x[2][1]", 2, 2).unwrap(), Direction::Max).unwrap();
        assert_eq!(inst.n_paths(), 81);
    }

    #[test]
    fn unchecked_build_allows_unordered_marginals() {
        let sys = MarginalSystem::new_unchecked(vec![vec![two(-1.0, 1.0)], vec![DiscreteMarginal::dirac(0.0)]]).unwrap();
        let payoff = Payoff::parse("x[1][1]", 2, 1).unwrap();
        assert!(build_instance(sys.clone(), payoff.clone(), Direction::Min).is_err());
        let opts = InstanceOptions {
            enforce_convex_order: false,
            ..Default::default()
        };
        assert!(VmotInstance::build(sys, payoff, Direction::Min, opts).is_ok());
    }

    #[test]
    fn eval_examples() {
        let sys = MarginalSystem::new(vec![vec![DiscreteMarginal::dirac(0.0)], vec![two(-1.0, 1.0)]]).unwrap();
        let inst = build_instance(sys, Payoff::parse("x[2][1]-x[1][1]", 2, 1).unwrap(), Direction::Min).unwrap();
        // Path (0, 1) by values is atom indices (0, 1).
        let flat = inst.path_index(&[0, 1]).unwrap();
        assert_eq!(inst.eval_payoff(flat).unwrap(), 1.0);
        assert_eq!(inst.eval_payoff(flat).unwrap().to_bits(), inst.eval_payoff(flat).unwrap().to_bits());
        assert!(inst.eval_payoff(2).is_err());
    }

    #[test]
    fn spread_on_second_maturity() {
        let m = |pts: &[f64]| DiscreteMarginal::uniform(pts).unwrap();
        let sys = MarginalSystem::new(vec![
            vec![m(&[4.0]), m(&[3.0])],
            vec![m(&[3.0, 5.0]), m(&[1.0, 3.0, 5.0])],
        ])
        .unwrap();
        let inst = build_instance(sys, Payoff::parse("abs(x[2][1]-x[2][2])", 2, 2).unwrap(), Direction::Min).unwrap();
        let flat = inst.path_index(&[0, 0, 1, 1]).unwrap();
        assert_eq!(inst.grid().nested_values(flat), vec![vec![4.0, 3.0], vec![5.0, 3.0]]);
        assert_eq!(inst.eval_payoff(flat).unwrap(), 2.0);
    }

    #[test]
    fn non_finite_cost_is_reported() {
        let sys = MarginalSystem::new(vec![vec![DiscreteMarginal::dirac(0.0)], vec![two(-1.0, 1.0)]]).unwrap();
        let inst = build_instance(sys, Payoff::parse("1 / (x[2][1] + 1)", 2, 1).unwrap(), Direction::Min).unwrap();
        match inst.eval_payoff(1) {
            Err(Error::NonFiniteCost { path }) => assert_eq!(path, vec![0.0, -1.0]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bounds_are_checked() {
        let sys = MarginalSystem::new(vec![vec![DiscreteMarginal::dirac(0.0)], vec![two(-1.0, 1.0)]]).unwrap();
        let ok = vec![
            vec![Expr::parse_scalar("abs(x)").unwrap()],
            vec![Expr::parse_scalar("abs(x)").unwrap()],
        ];
        let p = Payoff::parse("abs(x[2][1]-x[1][1])", 2, 1).unwrap().with_bounds(ok);
        let inst = build_instance(sys.clone(), p, Direction::Min).unwrap();
        assert_eq!(inst.bound_status(), BoundStatus::Checked);
        assert_eq!(inst_a().bound_status(), BoundStatus::Unchecked);

        let tight = vec![
            vec![Expr::parse_scalar("0").unwrap()],
            vec![Expr::parse_scalar("0.5").unwrap()],
        ];
        let p = Payoff::parse("abs(x[2][1]-x[1][1])", 2, 1).unwrap().with_bounds(tight);
        assert!(matches!(build_instance(sys, p, Direction::Min), Err(Error::BoundViolation { .. })));
    }

    #[test]
    fn grid_indexing_is_row_major() {
        let m = |pts: &[f64]| DiscreteMarginal::uniform(pts).unwrap();
        let sys = MarginalSystem::new(vec![
            vec![m(&[0.0]), m(&[-1.0, 1.0])],
            vec![m(&[-1.0, 1.0]), m(&[-2.0, 0.0, 2.0])],
            vec![m(&[-2.0, 0.0, 2.0]), m(&[-2.0, 0.0, 2.0])],
        ])
        .unwrap();
        let g = PathGrid::new(&sys, DEFAULT_PATH_BUDGET).unwrap();
        assert_eq!(g.n_paths(), 2 * 2 * 3 * 3 * 3);
        assert_eq!(g.n_prefixes(1), 2);
        assert_eq!(g.n_prefixes(2), 12);
        assert_eq!(g.n_prefixes(3), g.n_paths());
        assert_eq!(g.n_states(1), 6);
        for flat in [0, 17, 53, 107] {
            let v = g.values(flat);
            for t in 1..=3 {
                let p = g.prefix(flat, t);
                assert_eq!(g.prefix_values(p, t), v[..2 * t].to_vec());
                assert_eq!(g.state_of_prefix(p, t), g.state(flat, t - 1));
            }
            for t in 0..3 {
                assert_eq!(g.state_values(t, g.state(flat, t)), v[2 * t..2 * t + 2].to_vec());
            }
        }
    }

    #[test]
    fn budget_is_enforced() {
        let m = DiscreteMarginal::uniform(&[-1.0, 0.0, 1.0]).unwrap();
        let sys = MarginalSystem::new(vec![vec![m.clone(); 2]; 2]).unwrap();
        let opts = InstanceOptions {
            path_budget: 80,
            ..Default::default()
        };
        let r = VmotInstance::build(sys, Payoff::parse("0", 2, 2).unwrap(), Direction::Min, opts);
        assert!(matches!(r, Err(Error::GridBudgetExceeded { paths: 81, budget: 80 })));
    }

    #[test]
    fn hash_is_deterministic_and_direction_sensitive() {
        let a = inst_a();
        assert_eq!(a.hash(), inst_a().hash());
        assert_ne!(a.hash(), a.with_direction(Direction::Max).hash());
    }
}
