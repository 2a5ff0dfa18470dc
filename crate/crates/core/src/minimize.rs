//! Limited-memory BFGS with backtracking line search.
//!
//! The objective returns `None` for points outside its domain; the line
//! search treats those as infinitely high and backs off.

use std::collections::VecDeque;

use nalgebra::DVector;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinimizeOptions {
    /// Stop when every block of `block_size` gradient components has norm
    /// below this.
    pub grad_tol: f64,
    pub block_size: usize,
    pub max_evaluations: usize,
    pub history: usize,
    /// Largest displacement of any single block in one step.
    pub max_step: f64,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        MinimizeOptions {
            grad_tol: 1e-25,
            block_size: 3,
            max_evaluations: 100_000,
            history: 12,
            max_step: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinimizeResult {
    pub x: DVector<f64>,
    pub value: f64,
    pub gradient: DVector<f64>,
    /// Largest block norm of the gradient.
    pub max_block_grad: f64,
    pub evaluations: usize,
    pub converged: bool,
}

pub fn max_block_norm(g: &DVector<f64>, block: usize) -> f64 {
    g.as_slice()
        .chunks(block.max(1))
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

fn max_block_step(d: &DVector<f64>, block: usize) -> f64 {
    max_block_norm(d, block)
}

/// Minimizes `f` from `x0`. Returns `None` if `f` is undefined at `x0`.
pub fn lbfgs<F>(mut f: F, x0: DVector<f64>, opts: &MinimizeOptions) -> Option<MinimizeResult>
where
    F: FnMut(&DVector<f64>) -> Option<(f64, DVector<f64>)>,
{
    let mut evaluations = 1;
    let (mut fx, mut g) = f(&x0)?;
    let mut x = x0;
    let mut mem: VecDeque<(DVector<f64>, DVector<f64>, f64)> = VecDeque::with_capacity(opts.history);
    let mut gmax = max_block_norm(&g, opts.block_size);
    let mut stalled_after_reset = false;

    while gmax >= opts.grad_tol && evaluations < opts.max_evaluations {
        // two-loop recursion
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(mem.len());
        for (s, y, rho) in mem.iter().rev() {
            let a = rho * s.dot(&q);
            q.axpy(-a, y, 1.0);
            alphas.push(a);
        }
        if let Some((s, y, _)) = mem.back() {
            q *= s.dot(y) / y.dot(y);
        } else {
            // first step: move the worst block by at most max_step
            let scale = opts.max_step / gmax.max(f64::MIN_POSITIVE);
            q *= scale;
        }
        for ((s, y, rho), a) in mem.iter().zip(alphas.iter().rev()) {
            let b = rho * y.dot(&q);
            q.axpy(a - b, s, 1.0);
        }
        let mut d = -q;
        let mut slope = g.dot(&d);
        if !(slope < 0.0) {
            mem.clear();
            d = -g.clone() * (opts.max_step / gmax.max(f64::MIN_POSITIVE));
            slope = g.dot(&d);
        }
        let longest = max_block_step(&d, opts.block_size);
        if longest > opts.max_step {
            d *= opts.max_step / longest;
            slope = g.dot(&d);
        }

        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            if evaluations >= opts.max_evaluations {
                break;
            }
            let trial = &x + &d * t;
            evaluations += 1;
            if let Some((ft, gt)) = f(&trial) {
                let armijo = ft <= fx + 1e-4 * t * slope;
                // at the resolution limit of the energy, accept steps that
                // reduce the force instead
                let flat = (ft - fx).abs() <= 1e-14 * fx.abs().max(f64::MIN_POSITIVE)
                    && max_block_norm(&gt, opts.block_size) < gmax;
                if armijo || flat {
                    accepted = Some((trial, ft, gt));
                    break;
                }
            }
            t *= 0.5;
        }
        match accepted {
            Some((xn, fnew, gn)) => {
                let s = &xn - &x;
                let y = &gn - &g;
                let sy = s.dot(&y);
                if sy > 0.0 {
                    if mem.len() == opts.history {
                        mem.pop_front();
                    }
                    mem.push_back((s, y, 1.0 / sy));
                }
                x = xn;
                fx = fnew;
                g = gn;
                gmax = max_block_norm(&g, opts.block_size);
                stalled_after_reset = false;
            }
            None => {
                if stalled_after_reset || mem.is_empty() {
                    break;
                }
                mem.clear();
                stalled_after_reset = true;
            }
        }
    }

    Some(MinimizeResult {
        converged: gmax < opts.grad_tol,
        x,
        value: fx,
        gradient: g,
        max_block_grad: gmax,
        evaluations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let f = |x: &DVector<f64>| {
            let (a, b) = (x[0], x[1]);
            let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = DVector::from_vec(vec![
                -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
                200.0 * (b - a * a),
            ]);
            Some((v, g))
        };
        let opts = MinimizeOptions {
            grad_tol: 1e-10,
            block_size: 2,
            max_step: 0.5,
            ..Default::default()
        };
        let r = lbfgs(f, DVector::from_vec(vec![-1.2, 1.0]), &opts).unwrap();
        assert!(r.converged, "{r:?}");
        assert!((r.x[0] - 1.0).abs() < 1e-8 && (r.x[1] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn respects_domain() {
        // minimum of (x - 2)^2 restricted to x < 1.5 is approached but never crossed
        let f = |x: &DVector<f64>| {
            if x[0] >= 1.5 {
                None
            } else {
                Some(((x[0] - 2.0).powi(2) - (1.5 - x[0]).ln(), DVector::from_vec(vec![2.0 * (x[0] - 2.0) + 1.0 / (1.5 - x[0])])))
            }
        };
        let opts = MinimizeOptions {
            grad_tol: 1e-9,
            block_size: 1,
            max_step: 10.0,
            ..Default::default()
        };
        let r = lbfgs(f, DVector::from_vec(vec![0.0]), &opts).unwrap();
        assert!(r.converged);
        assert!(r.x[0] < 1.5);
        assert!(lbfgs(f, DVector::from_vec(vec![2.0]), &opts).is_none());
    }

    #[test]
    fn evaluation_budget() {
        let f = |x: &DVector<f64>| Some((x.dot(x), x * 2.0));
        let opts = MinimizeOptions {
            grad_tol: 0.0,
            max_evaluations: 7,
            ..Default::default()
        };
        let r = lbfgs(f, DVector::from_vec(vec![1.0, 2.0, 3.0]), &opts).unwrap();
        assert!(!r.converged);
        assert!(r.evaluations <= 7);
    }
}
