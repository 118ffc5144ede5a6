//! Maximization of smooth objectives over the probability simplex, optionally
//! intersected with one half-space `aᵀb ≥ c`.
//!
//! Each start runs projected gradient ascent with Armijo backtracking, then an
//! active-set Newton polish on the face the ascent identified. The two phases
//! alternate until the point stops moving.

use nalgebra::{DMatrix, DVector};

use crate::rng;

pub(crate) trait Objective: Sync {
    fn dim(&self) -> usize;
    /// Objective value; `-inf` outside the domain.
    fn value(&self, b: &[f64]) -> f64;
    fn gradient(&self, b: &[f64]) -> Vec<f64>;
    fn hessian(&self, b: &[f64]) -> DMatrix<f64>;
}

/// Optional half-space `normal · b ≥ floor`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct HalfSpace<'a> {
    pub normal: &'a [f64],
    pub floor: f64,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct AscentSettings {
    pub restarts: usize,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub seed: u64,
}

/// Euclidean projection onto the probability simplex.
pub(crate) fn project_simplex(y: &[f64]) -> Vec<f64> {
    let mut sorted = y.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (i, v) in sorted.iter().enumerate() {
        cumsum += v;
        let t = (cumsum - 1.0) / (i + 1) as f64;
        if v - t > 0.0 {
            theta = t;
        }
    }
    y.iter().map(|v| (v - theta).max(0.0)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn satisfies(h: &Option<HalfSpace<'_>>, b: &[f64]) -> bool {
    match h {
        None => true,
        Some(h) => dot(h.normal, b) >= h.floor - 1e-14 * h.floor.abs().max(1.0),
    }
}

/// Projection onto `simplex ∩ {aᵀb ≥ c}`: `P_simplex(y + γa)` with the
/// smallest `γ ≥ 0` meeting the floor (`aᵀP_simplex(y + γa)` is monotone in γ).
pub(crate) fn project(y: &[f64], half: &Option<HalfSpace<'_>>) -> Vec<f64> {
    let p = project_simplex(y);
    let Some(h) = half else { return p };
    if satisfies(half, &p) {
        return p;
    }
    let shifted = |g: f64| -> Vec<f64> {
        let z: Vec<f64> = y.iter().zip(h.normal).map(|(v, a)| v + g * a).collect();
        project_simplex(&z)
    };
    let mut lo = 0.0;
    let mut hi = 1.0;
    let mut best = shifted(hi);
    while !satisfies(half, &best) {
        lo = hi;
        hi *= 2.0;
        best = shifted(hi);
        if hi > 1e15 {
            break;
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let p = shifted(mid);
        if satisfies(half, &p) {
            hi = mid;
            best = p;
        } else {
            lo = mid;
        }
    }
    best
}

fn projected_ascent<O: Objective>(
    obj: &O,
    half: &Option<HalfSpace<'_>>,
    start: Vec<f64>,
    settings: &AscentSettings,
) -> Vec<f64> {
    let mut b = project(&start, half);
    let mut f = obj.value(&b);
    let mut step = 1.0;
    for _ in 0..settings.max_iterations {
        let g = obj.gradient(&b);
        let mut s = step;
        let (next, next_f) = loop {
            let y: Vec<f64> = b.iter().zip(&g).map(|(x, gi)| x + s * gi).collect();
            let cand = project(&y, half);
            let lin: f64 = g.iter().zip(cand.iter().zip(&b)).map(|(gi, (c, x))| gi * (c - x)).sum();
            let cf = obj.value(&cand);
            if cf.is_finite() && cf >= f + 1e-4 * lin {
                break (cand, cf);
            }
            s *= 0.5;
            if s < 1e-18 {
                break (b.clone(), f);
            }
        };
        let moved = next
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        let gain = next_f - f;
        b = next;
        f = next_f;
        if moved == 0.0 || (gain.abs() <= settings.tolerance && moved < 1e-9) {
            break;
        }
        step = (2.0 * s).min(1e8);
    }
    b
}

/// Newton iterations restricted to the current support (and the half-space
/// boundary when it binds). Steps that would leave the orthant are truncated
/// and the blocking coordinate is pinned to zero.
fn newton_polish<O: Objective>(obj: &O, half: &Option<HalfSpace<'_>>, start: Vec<f64>) -> Vec<f64> {
    let mut b = start;
    let mut f = obj.value(&b);
    for _ in 0..60 {
        let free: Vec<usize> = (0..b.len()).filter(|&i| b[i] > 0.0).collect();
        if free.len() <= 1 {
            break;
        }
        let g = obj.gradient(&b);
        let h = obj.hessian(&b);
        let mut rows: Vec<Vec<f64>> = vec![vec![1.0; free.len()]];
        if let Some(hs) = half {
            let slack = dot(hs.normal, &b) - hs.floor;
            let a_f: Vec<f64> = free.iter().map(|&i| hs.normal[i]).collect();
            let spread = a_f.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - a_f.iter().cloned().fold(f64::INFINITY, f64::min);
            if slack <= 1e-10 * hs.floor.abs().max(1.0) && spread > 1e-14 {
                rows.push(a_f);
            }
        }
        let nf = free.len();
        let m = nf + rows.len();
        let mut kkt = DMatrix::<f64>::zeros(m, m);
        let mut rhs = DVector::<f64>::zeros(m);
        for (p, &i) in free.iter().enumerate() {
            for (q, &j) in free.iter().enumerate() {
                kkt[(p, q)] = h[(i, j)];
            }
            rhs[p] = -g[i];
        }
        for (r, row) in rows.iter().enumerate() {
            for (p, v) in row.iter().enumerate() {
                kkt[(nf + r, p)] = *v;
                kkt[(p, nf + r)] = *v;
            }
        }
        let Ok(sol) = kkt.svd(true, true).solve(&rhs, 1e-13) else {
            break;
        };
        let delta: Vec<f64> = (0..nf).map(|p| sol[p]).collect();
        let size = delta.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if !size.is_finite() || size < 1e-15 {
            break;
        }
        // longest step that keeps the free coordinates nonnegative
        let mut t_max = 1.0;
        let mut blocking = None;
        for (p, &i) in free.iter().enumerate() {
            if delta[p] < 0.0 {
                let t = -b[i] / delta[p];
                if t < t_max {
                    t_max = t;
                    blocking = Some(i);
                }
            }
        }
        let mut t = t_max;
        let mut accepted = None;
        for _ in 0..30 {
            let mut cand = b.clone();
            for (p, &i) in free.iter().enumerate() {
                cand[i] = (b[i] + t * delta[p]).max(0.0);
            }
            if t == t_max {
                if let Some(i) = blocking {
                    cand[i] = 0.0;
                }
            }
            let s: f64 = cand.iter().sum();
            cand.iter_mut().for_each(|x| *x /= s);
            let cf = obj.value(&cand);
            if satisfies(half, &cand) && cf.is_finite() && cf >= f - 1e-15 * f.abs().max(1.0) {
                accepted = Some((cand, cf));
                break;
            }
            t *= 0.5;
        }
        match accepted {
            Some((cand, cf)) => {
                let moved = cand.iter().zip(&b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
                b = cand;
                f = cf;
                if moved < 1e-15 {
                    break;
                }
            }
            None => break,
        }
    }
    b
}

/// Local maximization from one start.
pub(crate) fn local_maximum<O: Objective>(
    obj: &O,
    half: &Option<HalfSpace<'_>>,
    start: Vec<f64>,
    settings: &AscentSettings,
) -> Vec<f64> {
    let mut b = start;
    for _ in 0..6 {
        let before = b.clone();
        b = projected_ascent(obj, half, b, settings);
        b = newton_polish(obj, half, b);
        let moved = b.iter().zip(&before).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        if moved < 1e-13 {
            break;
        }
    }
    b
}

/// Best local maximum over the uniform start plus `restarts - 1` random
/// simplex points. Ties keep the earlier start.
pub(crate) fn maximize<O: Objective>(
    obj: &O,
    half: Option<HalfSpace<'_>>,
    settings: &AscentSettings,
) -> Vec<f64> {
    let d = obj.dim();
    let mut starts = vec![vec![1.0 / d as f64; d]];
    let mut rng = rng::seeded(settings.seed);
    for _ in 1..settings.restarts.max(1) {
        starts.push(rng::simplex_point(&mut rng, d));
    }
    let mut best: Option<(Vec<f64>, f64)> = None;
    for s in starts {
        let b = local_maximum(obj, &half, s, settings);
        let f = obj.value(&b);
        if best.as_ref().is_none_or(|(_, bf)| f > *bf) {
            best = Some((b, f));
        }
    }
    best.map(|(b, _)| b).unwrap_or_else(|| vec![1.0 / d as f64; d])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simplex_projection_basics() {
        assert_eq!(project_simplex(&[0.2, 0.8]), vec![0.2, 0.8]);
        let p = project_simplex(&[2.0, 0.0]);
        assert_eq!(p, vec![1.0, 0.0]);
        let p = project_simplex(&[0.0, 0.0, 0.0]);
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn halfspace_projection_meets_floor() {
        let a = [1.0, 2.0, 3.0];
        let h = Some(HalfSpace { normal: &a, floor: 2.5 });
        let p = project(&[1.0, 0.0, 0.0], &h);
        assert!(dot(&a, &p) >= 2.5 - 1e-12, "{p:?}");
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let h = Some(HalfSpace { normal: &a, floor: 3.0 });
        let p = project(&[1.0, 0.0, 0.0], &h);
        assert!((p[2] - 1.0).abs() < 1e-12);
    }

    struct Quadratic {
        target: Vec<f64>,
    }

    impl Objective for Quadratic {
        fn dim(&self) -> usize {
            self.target.len()
        }
        fn value(&self, b: &[f64]) -> f64 {
            -b.iter().zip(&self.target).map(|(x, t)| (x - t).powi(2)).sum::<f64>()
        }
        fn gradient(&self, b: &[f64]) -> Vec<f64> {
            b.iter().zip(&self.target).map(|(x, t)| -2.0 * (x - t)).collect()
        }
        fn hessian(&self, b: &[f64]) -> DMatrix<f64> {
            DMatrix::from_diagonal_element(b.len(), b.len(), -2.0)
        }
    }

    #[test]
    fn recovers_projection_of_target() {
        let obj = Quadratic { target: vec![0.9, 0.4, -0.3] };
        let settings = AscentSettings { restarts: 3, tolerance: 1e-14, max_iterations: 1000, seed: 1 };
        let b = maximize(&obj, None, &settings);
        let expect = project_simplex(&obj.target);
        for (x, e) in b.iter().zip(&expect) {
            assert!((x - e).abs() < 1e-12, "{b:?} vs {expect:?}");
        }
    }
}
