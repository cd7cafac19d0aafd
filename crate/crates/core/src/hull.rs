//! Lower convex envelopes of functions sampled on small grids, and
//! minimum-norm points of convex sets of slopes.

use crate::simplex::{self, SimplexOptions, SparseLp};

/// Values at `xs` of the lower convex envelope of `(xs, f)`. `xs` must be
/// strictly increasing.
pub fn lower_hull_1d(xs: &[f64], f: &[f64]) -> Vec<f64> {
    assert_eq!(xs.len(), f.len());
    let n = xs.len();
    if n <= 2 {
        return f.to_vec();
    }
    // Monotone chain, keeping only the lower side.
    let mut hull: Vec<usize> = Vec::with_capacity(n);
    for k in 0..n {
        while hull.len() >= 2 {
            let (a, b) = (hull[hull.len() - 2], hull[hull.len() - 1]);
            let cross = (xs[b] - xs[a]) * (f[k] - f[a]) - (f[b] - f[a]) * (xs[k] - xs[a]);
            if cross <= 0.0 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(k);
    }
    let mut out = vec![0.0; n];
    for w in hull.windows(2) {
        let (a, b) = (w[0], w[1]);
        let slope = (f[b] - f[a]) / (xs[b] - xs[a]);
        for k in a..=b {
            out[k] = if k == a || k == b { f[k] } else { f[a] + slope * (xs[k] - xs[a]) };
        }
    }
    out
}

/// Convex envelope of the samples `(pts[k], f[k])` evaluated at `x`, or
/// `None` when `x` lies outside the convex hull of the points. Points are
/// stored flat with `dim` coordinates each; `dim` is 1 or 2.
pub fn envelope_at(dim: usize, pts: &[f64], f: &[f64], x: &[f64]) -> Option<f64> {
    assert!(dim == 1 || dim == 2, "envelope supports one or two dimensions");
    let n = f.len();
    assert_eq!(pts.len(), n * dim);
    if dim == 1 {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| pts[a].total_cmp(&pts[b]));
        let xs: Vec<f64> = order.iter().map(|&k| pts[k]).collect();
        let fs: Vec<f64> = order.iter().map(|&k| f[k]).collect();
        let env = lower_hull_1d(&xs, &fs);
        let x = x[0];
        if x < xs[0] || x > xs[n - 1] {
            return None;
        }
        let k = xs.partition_point(|&p| p < x);
        if xs[k] == x {
            return Some(env[k]);
        }
        let (a, b) = (k - 1, k);
        return Some(env[a] + (env[b] - env[a]) * (x - xs[a]) / (xs[b] - xs[a]));
    }
    // min sum l_k f_k  s.t.  sum l_k p_k = x, sum l_k = 1, l >= 0.
    let mut lp = SparseLp::new(vec![x[0], x[1], 1.0]);
    for k in 0..n {
        lp.add_column(f[k], &[(0, pts[2 * k]), (1, pts[2 * k + 1]), (2, 1.0)]);
    }
    simplex::solve(&lp, SimplexOptions::default()).ok().map(|s| s.objective)
}

/// Minimum-norm subgradient at `x` of the convex envelope of `(pts, f)`,
/// given its value `env_x` there. The subdifferential is
/// `{g : g . (p_k - x) <= f_k - env_x for all k}`, unbounded when `x` is on
/// the boundary of the hull. Returns `None` if that set is empty.
pub fn min_norm_subgradient(dim: usize, pts: &[f64], f: &[f64], x: &[f64], env_x: f64) -> Option<Vec<f64>> {
    assert!(dim == 1 || dim == 2, "envelope supports one or two dimensions");
    let n = f.len();
    let scale = 1.0 + env_x.abs() + f.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tol = 1e-9 * scale;
    let mut us: Vec<f64> = Vec::with_capacity(n * dim);
    let mut bs: Vec<f64> = Vec::with_capacity(n);
    for k in 0..n {
        let u = &pts[k * dim..(k + 1) * dim];
        let b = f[k] - env_x;
        let diff: Vec<f64> = u.iter().zip(x).map(|(p, q)| p - q).collect();
        if diff.iter().all(|&v| v == 0.0) {
            if b < -tol {
                return None;
            }
            continue;
        }
        us.extend(diff);
        bs.push(b);
    }
    let m = bs.len();
    if dim == 1 {
        let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
        for k in 0..m {
            let bound = bs[k] / us[k];
            if us[k] > 0.0 {
                hi = hi.min(bound);
            } else {
                lo = lo.max(bound);
            }
        }
        if lo > hi {
            if lo - hi > 1e-7 * (1.0 + lo.abs()) {
                return None;
            }
            return Some(vec![0.5 * (lo + hi)]);
        }
        return Some(vec![0.0f64.clamp(lo, hi)]);
    }

    let feasible = |g: &[f64; 2]| {
        (0..m).all(|k| {
            let (ux, uy) = (us[2 * k], us[2 * k + 1]);
            g[0] * ux + g[1] * uy <= bs[k] + tol * (1.0 + (g[0].abs() + g[1].abs()) * (ux.abs() + uy.abs()))
        })
    };
    if feasible(&[0.0, 0.0]) {
        return Some(vec![0.0, 0.0]);
    }
    let mut candidates: Vec<[f64; 2]> = Vec::new();
    for k in 0..m {
        let (ux, uy) = (us[2 * k], us[2 * k + 1]);
        let nn = ux * ux + uy * uy;
        candidates.push([bs[k] * ux / nn, bs[k] * uy / nn]);
    }
    for k in 0..m {
        for l in k + 1..m {
            let (a, b) = (us[2 * k], us[2 * k + 1]);
            let (c, d) = (us[2 * l], us[2 * l + 1]);
            let det = a * d - b * c;
            if det.abs() <= 1e-12 * (a.abs() + b.abs()) * (c.abs() + d.abs()) {
                continue;
            }
            candidates.push([(bs[k] * d - b * bs[l]) / det, (a * bs[l] - bs[k] * c) / det]);
        }
    }
    let mut best: Option<[f64; 2]> = None;
    for g in candidates {
        if best.is_none_or(|b| g[0] * g[0] + g[1] * g[1] < b[0] * b[0] + b[1] * b[1]) && feasible(&g) {
            best = Some(g);
        }
    }
    best.map(|g| g.to_vec())
}

/// Minimum-norm point of the convex hull of `points`, by Wolfe's algorithm.
pub fn min_norm_in_hull(points: &[Vec<f64>]) -> Vec<f64> {
    assert!(!points.is_empty());
    let dim = points[0].len();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let norm_max = points.iter().map(|p| dot(p, p)).fold(0.0, f64::max);
    if dim == 0 || norm_max == 0.0 {
        return vec![0.0; dim];
    }
    let tol = 1e-12 * norm_max;

    let start = (0..points.len())
        .min_by(|&a, &b| dot(&points[a], &points[a]).total_cmp(&dot(&points[b], &points[b])))
        .unwrap();
    let mut active: Vec<usize> = vec![start];
    let mut lambda: Vec<f64> = vec![1.0];
    let mut x = points[start].clone();

    let combine = |active: &[usize], w: &[f64]| {
        let mut out = vec![0.0; dim];
        for (&k, &wk) in active.iter().zip(w) {
            for (o, v) in out.iter_mut().zip(&points[k]) {
                *o += wk * v;
            }
        }
        out
    };

    for _ in 0..1000 {
        let xx = dot(&x, &x);
        let j = (0..points.len())
            .min_by(|&a, &b| dot(&x, &points[a]).total_cmp(&dot(&x, &points[b])))
            .unwrap();
        if dot(&x, &points[j]) >= xx - tol || active.contains(&j) {
            return x;
        }
        active.push(j);
        lambda.push(0.0);
        loop {
            let Some(alpha) = affine_min_norm(points, &active) else {
                // Affinely dependent set: drop the newest point.
                active.pop();
                lambda.pop();
                return x;
            };
            if alpha.iter().all(|&a| a > 1e-14) {
                lambda = alpha;
                x = combine(&active, &lambda);
                break;
            }
            let mut theta: f64 = 1.0;
            for (l, a) in lambda.iter().zip(&alpha) {
                if *a <= 1e-14 {
                    theta = theta.min(if l - a > 0.0 { l / (l - a) } else { 0.0 });
                }
            }
            for (l, a) in lambda.iter_mut().zip(&alpha) {
                *l = (1.0 - theta) * *l + theta * a;
            }
            let mut k = 0;
            while k < active.len() {
                if lambda[k] <= 1e-14 {
                    active.remove(k);
                    lambda.remove(k);
                } else {
                    k += 1;
                }
            }
            let s: f64 = lambda.iter().sum();
            for l in lambda.iter_mut() {
                *l /= s;
            }
            x = combine(&active, &lambda);
        }
    }
    x
}

/// Weights `alpha` (summing to one) of the minimum-norm point of the affine
/// hull of `points[active]`.
fn affine_min_norm(points: &[Vec<f64>], active: &[usize]) -> Option<Vec<f64>> {
    let k = active.len();
    let n = k + 1;
    let mut a = vec![0.0; n * n];
    let mut b = vec![0.0; n];
    for r in 0..k {
        for c in 0..k {
            a[r * n + c] = points[active[r]].iter().zip(&points[active[c]]).map(|(x, y)| x * y).sum();
        }
        a[r * n + k] = 1.0;
        a[k * n + r] = 1.0;
    }
    b[k] = 1.0;
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for col in 0..n {
        let piv = (col..n).max_by(|&x, &y| a[x * n + col].abs().total_cmp(&a[y * n + col].abs()))?;
        if a[piv * n + col].abs() <= 1e-13 * scale {
            return None;
        }
        for c in 0..n {
            a.swap(col * n + c, piv * n + c);
        }
        b.swap(col, piv);
        for r in 0..n {
            if r != col {
                let f = a[r * n + col] / a[col * n + col];
                for c in col..n {
                    a[r * n + c] -= f * a[col * n + c];
                }
                b[r] -= f * b[col];
            }
        }
    }
    Some((0..k).map(|r| b[r] / a[r * n + r]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hull_examples() {
        assert_eq!(lower_hull_1d(&[-1.0, 0.0, 1.0], &[0.0, 1.0, 0.0]), vec![0.0, 0.0, 0.0]);
        assert_eq!(lower_hull_1d(&[-1.0, 0.0, 1.0], &[0.0, -1.0, 0.0]), vec![0.0, -1.0, 0.0]);
        assert_eq!(lower_hull_1d(&[0.0, 1.0, 2.0, 3.0], &[0.0, 1.0, 2.0, 0.0]), vec![0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn envelope_in_two_dimensions() {
        // f = |p|_1 on the 3x3 grid with the centre raised.
        let mut pts = Vec::new();
        let mut f = Vec::new();
        for a in [-1.0, 0.0, 1.0] {
            for b in [-1.0, 0.0, 1.0] {
                pts.extend([a, b]);
                f.push(if a == 0.0 && b == 0.0 { 5.0 } else { f64::abs(a) + f64::abs(b) });
            }
        }
        let v = envelope_at(2, &pts, &f, &[0.0, 0.0]).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
        assert!(envelope_at(2, &pts, &f, &[1.5, 0.0]).is_none());
        // At the centre the envelope has the flat piece g = 0 available.
        let g = min_norm_subgradient(2, &pts, &f, &[0.0, 0.0], v).unwrap();
        assert!(g.iter().all(|x| x.abs() < 1e-9), "{g:?}");
        // At a corner only half-planes bound the subdifferential.
        let v = envelope_at(2, &pts, &f, &[1.0, 1.0]).unwrap();
        assert!((v - 2.0).abs() < 1e-12);
        let g = min_norm_subgradient(2, &pts, &f, &[1.0, 1.0], v).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-9 && (g[1] - 1.0).abs() < 1e-9, "{g:?}");
    }

    #[test]
    fn one_dimensional_subgradients() {
        let pts = [-1.0, 0.0, 2.0];
        let f = [1.0, 0.0, 2.0];
        let g = min_norm_subgradient(1, &pts, &f, &[0.0], 0.0).unwrap();
        assert_eq!(g, vec![0.0]);
        let g = min_norm_subgradient(1, &pts, &f, &[2.0], 2.0).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-12);
        assert!(min_norm_subgradient(1, &pts, &f, &[0.0], 1.0).is_none());
    }

    #[test]
    fn wolfe_matches_simple_cases() {
        let g = min_norm_in_hull(&[vec![1.0, 1.0], vec![1.0, -1.0]]);
        assert!((g[0] - 1.0).abs() < 1e-12 && g[1].abs() < 1e-12);
        let g = min_norm_in_hull(&[vec![-1.0, 2.0], vec![1.0, 2.0], vec![0.0, 3.0]]);
        assert!(g[0].abs() < 1e-12 && (g[1] - 2.0).abs() < 1e-12);
        let g = min_norm_in_hull(&[vec![-1.0], vec![2.0]]);
        assert!(g[0].abs() < 1e-12);
        let g = min_norm_in_hull(&[vec![3.0, 0.0, 0.0], vec![0.0, 3.0, 0.0], vec![0.0, 0.0, 3.0]]);
        assert!(g.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    /// Brute-force min-norm over segments of a planar point set.
    fn brute_min_norm(pts: &[Vec<f64>]) -> f64 {
        let mut best = f64::INFINITY;
        for a in pts {
            best = best.min(a[0].hypot(a[1]));
            for b in pts {
                let d = [b[0] - a[0], b[1] - a[1]];
                let nn = d[0] * d[0] + d[1] * d[1];
                if nn > 0.0 {
                    let t = (-(a[0] * d[0] + a[1] * d[1]) / nn).clamp(0.0, 1.0);
                    best = best.min((a[0] + t * d[0]).hypot(a[1] + t * d[1]));
                }
            }
        }
        best
    }

    /// Whether the origin lies in the convex hull of planar points.
    fn contains_origin(pts: &[Vec<f64>]) -> bool {
        for a in pts {
            for b in pts {
                for c in pts {
                    let cross = |p: &Vec<f64>, q: &Vec<f64>| p[0] * q[1] - p[1] * q[0];
                    let area = cross(a, b) + cross(b, c) + cross(c, a);
                    if area.abs() < 1e-12 {
                        continue;
                    }
                    let s = [cross(a, b), cross(b, c), cross(c, a)];
                    if s.iter().all(|v| v * area >= 0.0) {
                        return true;
                    }
                }
            }
        }
        false
    }

    proptest! {
        #[test]
        fn wolfe_agrees_with_brute_force(raw in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..7)) {
            let pts: Vec<Vec<f64>> = raw.iter().map(|&(a, b)| vec![a, b]).collect();
            let g = min_norm_in_hull(&pts);
            let expect = if contains_origin(&pts) { 0.0 } else { brute_min_norm(&pts) };
            prop_assert!((g[0].hypot(g[1]) - expect).abs() < 1e-9);
        }

        #[test]
        fn hull_is_convex_minorant(f in prop::collection::vec(-5.0f64..5.0, 2..12)) {
            let xs: Vec<f64> = (0..f.len()).map(|k| k as f64 * 0.5).collect();
            let env = lower_hull_1d(&xs, &f);
            for k in 0..f.len() {
                prop_assert!(env[k] <= f[k] + 1e-12);
            }
            for k in 1..f.len() - 1 {
                prop_assert!(env[k - 1] + env[k + 1] - 2.0 * env[k] >= -1e-9);
            }
            let convex = (1..f.len() - 1).all(|k| f[k - 1] + f[k + 1] - 2.0 * f[k] >= 0.0);
            if convex {
                prop_assert_eq!(env, f);
            }
        }
    }
}
