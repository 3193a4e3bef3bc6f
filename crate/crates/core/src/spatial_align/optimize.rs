//! Descent on the correspondence objective with Armijo backtracking.

use super::loss::{Matrix7, ReprojectionObjective};

/// How the descent direction is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Direction {
    /// Negative gradient.
    Gradient,
    /// Negative gradient preconditioned by the IRLS Gauss-Newton matrix.
    #[default]
    GaussNewton,
}

/// Line-search and stopping constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DescentConfig {
    pub max_steps: usize,
    pub initial_step: f64,
    pub armijo_c: f64,
    pub shrink: f64,
    /// Stop once a step moves the parameters by less than this (Euclidean norm).
    pub tolerance: f64,
    pub direction: Direction,
}

impl Default for DescentConfig {
    fn default() -> Self {
        Self {
            max_steps: 200,
            initial_step: 1e-2,
            armijo_c: 1e-4,
            shrink: 0.5,
            tolerance: 1e-6,
            direction: Direction::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DescentResult {
    pub params: [f64; 7],
    /// Mean objective before the first step and after each accepted step.
    pub trace: Vec<f64>,
    pub steps: usize,
    /// Set when a step smaller than the tolerance was taken or no descent was possible.
    pub converged: bool,
}

fn normalize(p: &mut [f64; 7]) {
    let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2] + p[3] * p[3]).sqrt();
    for v in p.iter_mut().take(4) {
        *v /= n;
    }
}

/// Solves `(H + μ q̂q̂ᵀ) d = g`. The rank-one term fixes the scale direction of
/// the quaternion, along which the objective is flat.
fn preconditioned(h: &Matrix7, q: &[f64; 7], g: &[f64; 7]) -> Option<[f64; 7]> {
    let scale = h.trace() / 7.0;
    if !(scale.is_finite() && scale > 0.0) {
        return None;
    }
    let mut qv = nalgebra::SVector::<f64, 7>::zeros();
    for i in 0..4 {
        qv[i] = q[i];
    }
    let m = h + qv * qv.transpose() * scale + Matrix7::identity() * (scale * 1e-12);
    let d = m.cholesky()?.solve(&nalgebra::SVector::<f64, 7>::from_column_slice(g));
    let mut out = [0.0; 7];
    out.copy_from_slice(d.as_slice());
    Some(out)
}

/// Descent on the mean objective. The quaternion is renormalized after every
/// step; a step is accepted only if it satisfies the Armijo condition, so the
/// trace never increases.
pub fn gradient_descent(obj: &ReprojectionObjective, start: [f64; 7], cfg: &DescentConfig) -> DescentResult {
    let n = obj.len().max(1) as f64;
    let mut p = start;
    normalize(&mut p);
    let eval = |p: &[f64; 7]| {
        let v = obj.evaluate(p);
        let mut g = v.gradient;
        g.iter_mut().for_each(|x| *x /= n);
        (v.loss / n, g, v.dropped)
    };
    let (mut f, mut g, mut dropped) = eval(&p);
    let mut trace = vec![f];
    let mut alpha = cfg.initial_step;
    let mut converged = false;
    let mut steps = 0;

    while steps < cfg.max_steps {
        let dir = match cfg.direction {
            Direction::Gradient => Some(g),
            Direction::GaussNewton => {
                let mut h = obj.gauss_newton_matrix(&p);
                h /= n;
                alpha = 1.0;
                preconditioned(&h, &p, &g)
            }
        }
        .unwrap_or(g);
        let slope: f64 = g.iter().zip(&dir).map(|(a, b)| a * b).sum();
        if !(slope > 0.0) {
            converged = true;
            break;
        }
        let mut accepted = None;
        while alpha > 1e-30 {
            let mut cand = p;
            for i in 0..7 {
                cand[i] -= alpha * dir[i];
            }
            normalize(&mut cand);
            let vc = obj.value(&cand);
            let fc = vc.loss / n;
            // Steps that push more points behind the camera are never taken.
            if vc.dropped <= dropped && fc <= f - cfg.armijo_c * alpha * slope {
                accepted = Some((cand, fc));
                break;
            }
            alpha *= cfg.shrink;
        }
        let Some((cand, fc)) = accepted else {
            converged = true;
            break;
        };
        let moved = cand.iter().zip(&p).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        p = cand;
        steps += 1;
        let (nf, ng, nd) = eval(&p);
        debug_assert!((nf - fc).abs() <= 1e-9 * fc.abs().max(1.0));
        f = nf;
        g = ng;
        dropped = nd;
        trace.push(f);
        if moved < cfg.tolerance {
            converged = true;
            break;
        }
        // Warm start the next line search from a slightly longer step.
        alpha /= cfg.shrink;
    }

    DescentResult {
        params: p,
        trace,
        steps,
        converged,
    }
}
