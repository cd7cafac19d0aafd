//! One-dimensional discrete marginals, their potential functions, the convex
//! order between them and the irreducible domain of a dominating pair.
//!
//! For a discrete law `mu` the potential `u(x) = sum_k w_k |x - p_k|` is
//! piecewise linear with kinks at the atoms, so every comparison between two
//! potentials only needs the union of both breakpoint sets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `sum(weights) == 1`.
pub const WEIGHT_SUM_TOL: f64 = 1e-12;
/// Relative tolerance on equality of means in the convex-order test.
pub const MEAN_REL_TOL: f64 = 1e-10;
/// Absolute tolerance on potential dominance `u_mu <= u_nu`.
pub const POTENTIAL_TOL: f64 = 1e-10;

/// A finitely supported probability law on the real line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MarginalRepr", into = "MarginalRepr")]
pub struct DiscreteMarginal {
    points: Vec<f64>,
    weights: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct MarginalRepr {
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl TryFrom<MarginalRepr> for DiscreteMarginal {
    type Error = Error;
    fn try_from(r: MarginalRepr) -> Result<Self> {
        DiscreteMarginal::new(r.points, r.weights)
    }
}

impl From<DiscreteMarginal> for MarginalRepr {
    fn from(m: DiscreteMarginal) -> Self {
        MarginalRepr {
            points: m.points,
            weights: m.weights,
        }
    }
}

impl DiscreteMarginal {
    /// Builds a marginal from atoms and masses. Points are sorted, duplicate
    /// points merged and zero-mass atoms dropped. The masses must sum to one
    /// within [`WEIGHT_SUM_TOL`].
    pub fn new(points: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        let m = Self::assemble(points, weights)?;
        let total: f64 = m.weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidMarginal(format!(
                "weights sum to {total}, expected 1"
            )));
        }
        Ok(m)
    }

    /// Like [`DiscreteMarginal::new`] but rescales the masses to sum to one.
    pub fn normalized(points: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        let mut m = Self::assemble(points, weights)?;
        let total: f64 = m.weights.iter().sum();
        for w in &mut m.weights {
            *w /= total;
        }
        Ok(m)
    }

    /// Point mass at `a`.
    pub fn dirac(a: f64) -> Self {
        Self {
            points: vec![a],
            weights: vec![1.0],
        }
    }

    /// Uniform law on the given points.
    pub fn uniform(points: &[f64]) -> Result<Self> {
        let n = points.len();
        Self::normalized(points.to_vec(), vec![1.0; n])
    }

    fn assemble(points: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if points.len() != weights.len() {
            return Err(Error::InvalidMarginal(format!(
                "{} points but {} weights",
                points.len(),
                weights.len()
            )));
        }
        if points.is_empty() {
            return Err(Error::InvalidMarginal("no atoms".into()));
        }
        let mut atoms: Vec<(f64, f64)> = Vec::with_capacity(points.len());
        for (&p, &w) in points.iter().zip(&weights) {
            if !p.is_finite() {
                return Err(Error::InvalidMarginal(format!("non-finite point {p}")));
            }
            if !w.is_finite() || w < 0.0 {
                return Err(Error::InvalidMarginal(format!("invalid weight {w}")));
            }
            atoms.push((p, w));
        }
        atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut pts: Vec<f64> = Vec::with_capacity(atoms.len());
        let mut wts: Vec<f64> = Vec::with_capacity(atoms.len());
        for (p, w) in atoms {
            match pts.last() {
                Some(&last) if last == p => *wts.last_mut().unwrap() += w,
                _ => {
                    pts.push(p);
                    wts.push(w);
                }
            }
        }
        let (points, weights): (Vec<f64>, Vec<f64>) =
            pts.into_iter().zip(wts).filter(|&(_, w)| w > 0.0).unzip();
        if points.is_empty() {
            return Err(Error::InvalidMarginal("all weights are zero".into()));
        }
        Ok(Self { points, weights })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.points
            .iter()
            .zip(&self.weights)
            .map(|(p, w)| p * w)
            .sum()
    }

    /// `mu(f)`.
    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.points
            .iter()
            .zip(&self.weights)
            .map(|(&p, &w)| w * f(p))
            .sum()
    }

    /// Mass of the atom at exactly `x`, zero when `x` is not an atom.
    pub fn atom_mass(&self, x: f64) -> f64 {
        self.atom_index(x).map_or(0.0, |k| self.weights[k])
    }

    /// Index of the atom located exactly at `x`.
    pub fn atom_index(&self, x: f64) -> Option<usize> {
        self.points
            .binary_search_by(|p| p.total_cmp(&x))
            .ok()
    }

    pub fn min_point(&self) -> f64 {
        self.points[0]
    }

    pub fn max_point(&self) -> f64 {
        self.points[self.points.len() - 1]
    }

    pub fn potential_fn(&self) -> PotentialFn {
        PotentialFn::new(self)
    }
}

/// `u(x) = integral |x - y| dmu(y)` stored through its values and slopes at
/// the atoms.
#[derive(Debug, Clone)]
pub struct PotentialFn {
    breakpoints: Vec<f64>,
    values: Vec<f64>,
    /// Slope on `(breakpoints[k], breakpoints[k+1])`; the entry at the last
    /// index is the right tail slope `+1`.
    right_slopes: Vec<f64>,
    mean: f64,
}

impl PotentialFn {
    fn new(mu: &DiscreteMarginal) -> Self {
        let pts = mu.points();
        let wts = mu.weights();
        let mean = mu.mean();
        let n = pts.len();
        let mut values = Vec::with_capacity(n);
        let mut right_slopes = Vec::with_capacity(n);
        // Mass and first moment strictly left of the current point.
        let (mut w_left, mut m_left) = (0.0, 0.0);
        for k in 0..n {
            let x = pts[k];
            values.push(x * w_left - m_left + (mean - m_left) - x * (1.0 - w_left));
            w_left += wts[k];
            m_left += wts[k] * x;
            right_slopes.push(2.0 * w_left - 1.0);
        }
        if let Some(last) = right_slopes.last_mut() {
            *last = 1.0;
        }
        Self {
            breakpoints: pts.to_vec(),
            values,
            right_slopes,
            mean,
        }
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Slope immediately left of breakpoint `k`.
    pub fn left_slope(&self, k: usize) -> f64 {
        if k == 0 {
            -1.0
        } else {
            self.right_slopes[k - 1]
        }
    }

    /// Slope immediately right of breakpoint `k`.
    pub fn right_slope(&self, k: usize) -> f64 {
        self.right_slopes[k]
    }

    pub fn eval(&self, x: f64) -> f64 {
        let bp = &self.breakpoints;
        if x <= bp[0] {
            return self.values[0] + (bp[0] - x);
        }
        // Largest k with bp[k] <= x.
        let k = bp.partition_point(|&b| b <= x) - 1;
        self.values[k] + self.right_slopes[k] * (x - bp[k])
    }
}

/// `u_mu(x)`.
pub fn potential(mu: &DiscreteMarginal, x: f64) -> f64 {
    mu.potential_fn().eval(x)
}

fn union_breakpoints(mu: &DiscreteMarginal, nu: &DiscreteMarginal) -> Vec<f64> {
    let mut b: Vec<f64> = mu.points().iter().chain(nu.points()).copied().collect();
    b.sort_by(f64::total_cmp);
    b.dedup();
    b
}

/// Outcome of the potential-function convex-order test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvexOrderCheck {
    pub holds: bool,
    pub witness: Option<f64>,
}

fn means_match(a: f64, b: f64) -> bool {
    (a - b).abs() <= MEAN_REL_TOL * 1f64.max(a.abs()).max(b.abs())
}

/// Tests `mu <=_c nu` through equal means and `u_mu <= u_nu` on the union of
/// breakpoints. The witness is the breakpoint of largest violation, or a
/// point in the tail where the potentials differ when the means disagree.
pub fn check_convex_order(mu: &DiscreteMarginal, nu: &DiscreteMarginal) -> ConvexOrderCheck {
    let (m_mu, m_nu) = (mu.mean(), nu.mean());
    let lo = mu.min_point().min(nu.min_point());
    let hi = mu.max_point().max(nu.max_point());
    if !means_match(m_mu, m_nu) {
        // Left tail: u = mean - x, so u_mu > u_nu there iff m_mu > m_nu.
        let witness = if m_mu > m_nu { lo - 1.0 } else { hi + 1.0 };
        return ConvexOrderCheck {
            holds: false,
            witness: Some(witness),
        };
    }
    let (u_mu, u_nu) = (mu.potential_fn(), nu.potential_fn());
    let mut worst: Option<(f64, f64)> = None;
    for x in union_breakpoints(mu, nu) {
        let excess = u_mu.eval(x) - u_nu.eval(x);
        if excess > POTENTIAL_TOL && worst.is_none_or(|(_, e)| excess > e) {
            worst = Some((x, excess));
        }
    }
    ConvexOrderCheck {
        holds: worst.is_none(),
        witness: worst.map(|(x, _)| x),
    }
}

/// The domain `(I, J)` of a pair in convex order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrreducibleDomain {
    /// Open interval `I = (a, b)`: the component of `{u_mu < u_nu}` carrying
    /// the most `mu`-mass, `None` when the set is empty.
    pub interval: Option<(f64, f64)>,
    /// `J` contains `a` (resp. `b`) iff it is an atom of `nu`.
    pub closed_left: bool,
    pub closed_right: bool,
    pub irreducible: bool,
    /// Every connected component of `{u_mu < u_nu}`, left to right.
    pub components: Vec<(f64, f64)>,
}

impl IrreducibleDomain {
    /// Whether `x` lies in the open interval `I`.
    pub fn contains_open(&self, x: f64) -> bool {
        self.interval.is_some_and(|(a, b)| a < x && x < b)
    }

    /// Whether `x` lies in `J`.
    pub fn contains_closed(&self, x: f64) -> bool {
        match self.interval {
            None => false,
            Some((a, b)) => {
                (a < x && x < b) || (self.closed_left && x == a) || (self.closed_right && x == b)
            }
        }
    }
}

/// Computes the domain of `mu <=_c nu`. Fails with `ConvexOrderViolation`
/// (asset and period reported as 0) when the pair is not in convex order.
pub fn irreducibility(mu: &DiscreteMarginal, nu: &DiscreteMarginal) -> Result<IrreducibleDomain> {
    let order = check_convex_order(mu, nu);
    if !order.holds {
        return Err(Error::ConvexOrderViolation {
            period: 0,
            asset: 0,
            witness: order.witness.unwrap_or(f64::NAN),
        });
    }
    let (u_mu, u_nu) = (mu.potential_fn(), nu.potential_fn());
    let bps = union_breakpoints(mu, nu);
    let mut components = Vec::new();
    let mut start = bps[0];
    let mut open = false;
    for &x in &bps {
        if u_nu.eval(x) - u_mu.eval(x) > POTENTIAL_TOL {
            open = true;
        } else {
            if open {
                components.push((start, x));
                open = false;
            }
            start = x;
        }
    }
    if open {
        // The gap closes in the tails, so this only happens under roundoff.
        components.push((start, f64::INFINITY));
    }

    let mass_in = |(a, b): (f64, f64)| -> f64 {
        mu.points()
            .iter()
            .zip(mu.weights())
            .filter(|(&p, _)| a < p && p < b)
            .map(|(_, &w)| w)
            .sum()
    };
    let best = components
        .iter()
        .copied()
        .map(|c| (c, mass_in(c)))
        .fold(None::<((f64, f64), f64)>, |acc, (c, m)| match acc {
            Some((_, best_m)) if best_m >= m => acc,
            _ => Some((c, m)),
        });
    let interval = best.map(|(c, _)| c);
    let irreducible = components.len() == 1
        && mu
            .points()
            .iter()
            .all(|&p| components[0].0 < p && p < components[0].1);
    let (closed_left, closed_right) = match interval {
        Some((a, b)) => (nu.atom_mass(a) > 0.0, nu.atom_mass(b) > 0.0),
        None => (false, false),
    };
    Ok(IrreducibleDomain {
        interval,
        closed_left,
        closed_right,
        irreducible,
        components,
    })
}

/// Quantile quantization of an empirical sample into at most `n_points`
/// atoms. Sorted samples are split into `n_points` rank bins of near-equal
/// size, each replaced by its mean; equal representatives are merged. The
/// result has the sample mean exactly (up to a final mean-correction shift).
pub fn quantize(samples: &[f64], n_points: usize) -> Result<DiscreteMarginal> {
    if samples.is_empty() {
        return Err(Error::EmptyInput);
    }
    if n_points == 0 {
        return Err(Error::InvalidArgument("n_points must be at least 1".into()));
    }
    if samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument("non-finite sample".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let bins = n_points.min(n);
    let mut points = Vec::with_capacity(bins);
    let mut weights = Vec::with_capacity(bins);
    for b in 0..bins {
        let lo = b * n / bins;
        let hi = (b + 1) * n / bins;
        let chunk = &sorted[lo..hi];
        points.push(chunk.iter().sum::<f64>() / chunk.len() as f64);
        weights.push(chunk.len() as f64 / n as f64);
    }
    let sample_mean = sorted.iter().sum::<f64>() / n as f64;
    let q_mean: f64 = points.iter().zip(&weights).map(|(p, w)| p * w).sum();
    let shift = sample_mean - q_mean;
    for p in &mut points {
        *p += shift;
    }
    DiscreteMarginal::normalized(points, weights)
}

/// Perturbs one asset's chain of marginals so that every consecutive pair
/// becomes irreducible: `mu_t' = (1 - eps) mu_t + eps/2 (delta_{m - r_t} +
/// delta_{m + r_t})` with `m` the common mean and radii `r_t` increasing in
/// `t` and beyond every support. Convex order is preserved.
pub fn perturb_chain(chain: &[DiscreteMarginal], eps: f64) -> Result<Vec<DiscreteMarginal>> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "perturbation weight must lie in (0, 1), got {eps}"
        )));
    }
    let Some(first) = chain.first() else {
        return Err(Error::EmptyInput);
    };
    let m = first.mean();
    let span = chain
        .iter()
        .flat_map(|mu| mu.points().iter().map(|p| (p - m).abs()))
        .fold(0.0f64, f64::max)
        .max(1.0);
    chain
        .iter()
        .enumerate()
        .map(|(t, mu)| {
            let r = span * (2 + t) as f64;
            let mut pts = mu.points().to_vec();
            let mut wts: Vec<f64> = mu.weights().iter().map(|w| w * (1.0 - eps)).collect();
            pts.extend([m - r, m + r]);
            wts.extend([eps / 2.0, eps / 2.0]);
            DiscreteMarginal::normalized(pts, wts)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two(a: f64, b: f64) -> DiscreteMarginal {
        DiscreteMarginal::new(vec![a, b], vec![0.5, 0.5]).unwrap()
    }

    fn third(a: f64, b: f64, c: f64) -> DiscreteMarginal {
        DiscreteMarginal::uniform(&[a, b, c]).unwrap()
    }

    /// Direct summation, independent of the prefix-sum form.
    fn brute_potential(mu: &DiscreteMarginal, x: f64) -> f64 {
        mu.points()
            .iter()
            .zip(mu.weights())
            .map(|(p, w)| w * (x - p).abs())
            .sum()
    }

    #[test]
    fn potential_examples() {
        assert_eq!(potential(&DiscreteMarginal::dirac(0.0), 3.0), 3.0);
        assert_eq!(potential(&two(-1.0, 1.0), 0.0), 1.0);
        assert!((potential(&third(-1.0, 0.0, 1.0), 0.0) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn potential_matches_direct_sum_everywhere() {
        let mu = DiscreteMarginal::new(vec![-2.0, 0.5, 1.0, 4.0], vec![0.1, 0.4, 0.3, 0.2]).unwrap();
        let u = mu.potential_fn();
        for k in -80..=80 {
            let x = k as f64 * 0.1;
            assert!((u.eval(x) - brute_potential(&mu, x)).abs() < 1e-12, "x = {x}");
        }
        assert_eq!(u.left_slope(0), -1.0);
        assert_eq!(u.right_slope(3), 1.0);
        assert!((u.right_slope(1) - (2.0 * 0.5 - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn construction_merges_and_drops() {
        let m = DiscreteMarginal::new(vec![1.0, 0.0, 1.0, 2.0], vec![0.25, 0.5, 0.25, 0.0]).unwrap();
        assert_eq!(m.points(), &[0.0, 1.0]);
        assert_eq!(m.weights(), &[0.5, 0.5]);
        assert!(DiscreteMarginal::new(vec![0.0], vec![0.9]).is_err());
        assert!(DiscreteMarginal::new(vec![0.0, 1.0], vec![1.5, -0.5]).is_err());
        assert!(DiscreteMarginal::new(vec![f64::NAN], vec![1.0]).is_err());
    }

    #[test]
    fn convex_order_examples() {
        let r = check_convex_order(&DiscreteMarginal::dirac(0.0), &two(-1.0, 1.0));
        assert!(r.holds);
        let r = check_convex_order(&two(-1.0, 1.0), &DiscreteMarginal::dirac(0.0));
        assert_eq!(r, ConvexOrderCheck { holds: false, witness: Some(0.0) });
        // Oracle: direct evaluation on {-2,-1,0,1,2}.
        let (mu, nu) = (two(-1.0, 1.0), two(-2.0, 2.0));
        for x in [-2.0, -1.0, 0.0, 1.0, 2.0] {
            assert!(brute_potential(&mu, x) <= brute_potential(&nu, x));
        }
        assert!(check_convex_order(&mu, &nu).holds);
    }

    #[test]
    fn mean_mismatch_has_tail_witness() {
        let r = check_convex_order(&DiscreteMarginal::dirac(1.0), &two(-1.0, 1.0));
        assert!(!r.holds);
        let w = r.witness.unwrap();
        let (a, b) = (DiscreteMarginal::dirac(1.0), two(-1.0, 1.0));
        assert!(brute_potential(&a, w) > brute_potential(&b, w));
    }

    #[test]
    fn irreducibility_examples() {
        let d = irreducibility(&DiscreteMarginal::dirac(0.0), &third(-1.0, 0.0, 1.0)).unwrap();
        // Oracle: the gap on a fine grid is positive exactly inside (-1, 1).
        let nu = third(-1.0, 0.0, 1.0);
        let mu = DiscreteMarginal::dirac(0.0);
        for k in -300..=300 {
            let x = k as f64 / 100.0;
            let gap = brute_potential(&nu, x) - brute_potential(&mu, x);
            assert_eq!(gap > 1e-12, x > -1.0 && x < 1.0, "x = {x}");
        }
        assert_eq!(d.interval, Some((-1.0, 1.0)));
        assert!(d.closed_left && d.closed_right && d.irreducible);

        let same = irreducibility(&two(-1.0, 1.0), &two(-1.0, 1.0)).unwrap();
        assert!(same.interval.is_none() && !same.irreducible);

        let d = irreducibility(&two(-1.0, 1.0), &two(-2.0, 2.0)).unwrap();
        assert_eq!(d.interval, Some((-2.0, 2.0)));
        assert!(d.irreducible);
    }

    #[test]
    fn reducible_pair_has_two_components() {
        let mu = two(-1.0, 1.0);
        let nu = DiscreteMarginal::uniform(&[-1.5, -0.5, 0.5, 1.5]).unwrap();
        let d = irreducibility(&mu, &nu).unwrap();
        assert_eq!(d.components, vec![(-1.5, -0.5), (0.5, 1.5)]);
        assert!(!d.irreducible);
    }

    #[test]
    fn irreducibility_rejects_unordered() {
        assert!(matches!(
            irreducibility(&two(-1.0, 1.0), &DiscreteMarginal::dirac(0.0)),
            Err(Error::ConvexOrderViolation { .. })
        ));
    }

    #[test]
    fn quantize_examples() {
        let q = quantize(&[1.0, 1.0, 1.0, 1.0], 2).unwrap();
        assert_eq!(q.points(), &[1.0]);
        assert_eq!(q.weights(), &[1.0]);
        let q = quantize(&[0.0, 2.0], 2).unwrap();
        assert_eq!(q, two(0.0, 2.0));
        assert!(matches!(quantize(&[], 3), Err(Error::EmptyInput)));
    }

    #[test]
    fn quantize_preserves_uniform_sample_mean() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let samples: Vec<f64> = (0..1000).map(|_| rng.gen::<f64>()).collect();
        let q = quantize(&samples, 4).unwrap();
        let mean = samples.iter().sum::<f64>() / 1000.0;
        assert_eq!(q.len(), 4);
        assert!((q.mean() - mean).abs() < 1e-14);
        // Bin means are dominated by the empirical law.
        let emp = DiscreteMarginal::uniform(&samples).unwrap();
        assert!(check_convex_order(&q, &emp).holds);
    }

    #[test]
    fn perturbation_restores_irreducibility() {
        let chain = vec![two(-1.0, 1.0), two(-1.0, 1.0), two(-2.0, 2.0)];
        assert!(!irreducibility(&chain[0], &chain[1]).unwrap().irreducible);
        let p = perturb_chain(&chain, 1e-3).unwrap();
        for w in p.windows(2) {
            let d = irreducibility(&w[0], &w[1]).unwrap();
            assert!(d.irreducible, "{d:?}");
        }
        assert!((p[1].mean() - chain[1].mean()).abs() < 1e-15);
    }

    #[test]
    fn json_round_trip_validates() {
        let m = third(-1.0, 0.0, 1.0);
        let s = serde_json::to_string(&m).unwrap();
        let back: DiscreteMarginal = serde_json::from_str(&s).unwrap();
        assert_eq!(m, back);
        assert!(serde_json::from_str::<DiscreteMarginal>(r#"{"points":[0],"weights":[0.5]}"#).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn marginal() -> impl Strategy<Value = DiscreteMarginal> {
            prop::collection::vec((-10.0f64..10.0, 0.01f64..1.0), 1..8)
                .prop_map(|atoms| {
                    let (p, w): (Vec<f64>, Vec<f64>) = atoms.into_iter().unzip();
                    DiscreteMarginal::normalized(p, w).unwrap()
                })
        }

        proptest! {
            #[test]
            fn potential_dominates_distance_to_mean(mu in marginal(), x in -30.0f64..30.0) {
                let u = mu.potential_fn();
                let m = mu.mean();
                prop_assert!(u.eval(x) >= (x - m).abs() - 1e-12);
                let far_l = mu.min_point() - 1.0 - x.abs();
                let far_r = mu.max_point() + 1.0 + x.abs();
                prop_assert!((u.eval(far_l) - (far_l - m).abs()).abs() < 1e-9);
                prop_assert!((u.eval(far_r) - (far_r - m).abs()).abs() < 1e-9);
            }

            #[test]
            fn convex_order_is_reflexive(mu in marginal()) {
                prop_assert!(check_convex_order(&mu, &mu).holds);
            }

            #[test]
            fn potential_is_convex_on_breakpoints(mu in marginal()) {
                let u = mu.potential_fn();
                let b = u.breakpoints();
                let v = u.values();
                for i in 0..b.len() {
                    for j in i + 1..b.len() {
                        for k in j + 1..b.len() {
                            let lam = (b[k] - b[j]) / (b[k] - b[i]);
                            prop_assert!(v[j] <= lam * v[i] + (1.0 - lam) * v[k] + 1e-12);
                        }
                    }
                }
            }
        }
    }
}
