//! Limited-memory BFGS with box constraints via gradient projection.
//!
//! Variables sitting on a bound whose gradient points outward are frozen for
//! the iteration; the two-loop recursion runs on the remaining ones and the
//! step is projected back onto the box during an Armijo backtracking search.

use std::collections::VecDeque;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsbOptions {
    pub max_iters: usize,
    /// Stop when `|f_k - f_{k+1}| <= tol * max(|f_k|, |f_{k+1}|, 1)`.
    pub tol: f64,
    /// Stop when the projected gradient's max-norm falls below this.
    pub pg_tol: f64,
    pub memory: usize,
    pub max_backtracks: usize,
}

impl Default for LbfgsbOptions {
    fn default() -> Self {
        Self {
            max_iters: 1000,
            tol: 1e-9,
            pg_tol: 1e-10,
            memory: 10,
            max_backtracks: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsbResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    /// A non-finite value stopped the search; `x` is the best point seen.
    pub diverged: bool,
    /// Best objective value after each iteration, starting with `f(x0)`.
    pub trace: Vec<f64>,
}

fn project(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for ((v, l), h) in x.iter_mut().zip(lo).zip(hi) {
        *v = v.clamp(*l, *h);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Variables free to move given the gradient sign at the bounds.
fn free_mask(x: &[f64], g: &[f64], lo: &[f64], hi: &[f64]) -> Vec<bool> {
    x.iter()
        .zip(g)
        .zip(lo.iter().zip(hi))
        .map(|((&x, &g), (&l, &h))| !((x <= l && g > 0.0) || (x >= h && g < 0.0)))
        .collect()
}

fn projected_gradient_norm(x: &[f64], g: &[f64], lo: &[f64], hi: &[f64]) -> f64 {
    x.iter()
        .zip(g)
        .zip(lo.iter().zip(hi))
        .map(|((&x, &g), (&l, &h))| ((x - g).clamp(l, h) - x).abs())
        .fold(0.0, f64::max)
}

/// Minimises `f` over the box `[lo, hi]` from `x0` (projected onto the box
/// first). `f` returns the value and gradient.
pub fn minimize<F>(mut f: F, x0: &[f64], lo: &[f64], hi: &[f64], opts: &LbfgsbOptions) -> LbfgsbResult
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let n = x0.len();
    assert!(lo.len() == n && hi.len() == n, "bound lengths must match x0");
    let mut x = x0.to_vec();
    project(&mut x, lo, hi);
    let (mut fx, mut g) = f(&x);
    let mut evaluations = 1;
    let finite = |v: f64, g: &[f64]| v.is_finite() && g.iter().all(|t| t.is_finite());
    if !finite(fx, &g) {
        return LbfgsbResult {
            x,
            f: fx,
            iterations: 0,
            evaluations,
            converged: false,
            diverged: true,
            trace: vec![fx],
        };
    }
    let mut trace = vec![fx];
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let mut converged = false;
    let mut diverged = false;
    let mut iterations = 0;

    while iterations < opts.max_iters {
        if projected_gradient_norm(&x, &g, lo, hi) <= opts.pg_tol {
            converged = true;
            break;
        }
        let free = free_mask(&x, &g, lo, hi);
        let mut q: Vec<f64> = g.iter().zip(&free).map(|(v, f)| if *f { *v } else { 0.0 }).collect();

        // two-loop recursion over the stored curvature pairs
        let mut alphas = Vec::with_capacity(pairs.len());
        for (s, y, rho) in pairs.iter().rev() {
            let a = rho * dot(s, &q);
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= a * yi;
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = pairs.back() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        } else {
            let gn = dot(&q, &q).sqrt();
            if gn > 0.0 {
                q.iter_mut().for_each(|v| *v /= gn.max(1.0));
            }
        }
        for ((s, y, rho), a) in pairs.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (a - b) * si;
            }
        }
        let mut dir: Vec<f64> = q.iter().zip(&free).map(|(v, f)| if *f { -v } else { 0.0 }).collect();
        if dot(&dir, &g) >= 0.0 {
            // not a descent direction: reset memory and use steepest descent
            pairs.clear();
            let gn = dot(&g, &g).sqrt().max(1.0);
            dir = g.iter().zip(&free).map(|(v, f)| if *f { -v / gn } else { 0.0 }).collect();
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..opts.max_backtracks {
            let mut trial: Vec<f64> = x.iter().zip(&dir).map(|(a, b)| a + step * b).collect();
            project(&mut trial, lo, hi);
            let moved: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
            let decrease = dot(&g, &moved);
            if moved.iter().all(|v| *v == 0.0) {
                break;
            }
            let (ft, gt) = f(&trial);
            evaluations += 1;
            if finite(ft, &gt) && ft <= fx + 1e-4 * decrease {
                accepted = Some((trial, moved, ft, gt));
                break;
            }
            if !ft.is_finite() {
                diverged = true;
            }
            step *= 0.5;
        }
        let Some((x_new, s, f_new, g_new)) = accepted else {
            // no acceptable step: treat as stationary unless a non-finite
            // value was hit on every attempt
            converged = !diverged;
            break;
        };
        diverged = false;
        iterations += 1;
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).max(f64::MIN_POSITIVE) {
            if pairs.len() == opts.memory {
                pairs.pop_front();
            }
            pairs.push_back((s, y, 1.0 / sy));
        }
        let change = (fx - f_new).abs();
        let scale = fx.abs().max(f_new.abs()).max(1.0);
        x = x_new;
        fx = f_new;
        g = g_new;
        trace.push(fx);
        if change <= opts.tol * scale {
            converged = true;
            break;
        }
    }
    LbfgsbResult {
        x,
        f: fx,
        iterations,
        evaluations,
        converged,
        diverged,
        trace,
    }
}
