use nalgebra::{DMatrix, DVector};

use super::estep::ItemCounts;
use super::quadrature::QuadratureGrid;
use crate::error::{Error, Result};
use crate::grm::{logistic, ItemParams, INTERCEPT_BOUND, PROB_FLOOR};

const MAX_NEWTON_ITERS: usize = 100;
const MAX_HALVINGS: usize = 20;
const GRAD_TOL: f64 = 1e-9;

/// Expected complete-data log-likelihood of one item and its derivatives with
/// respect to `(slope, d_1, ..., d_{C-1})`.
#[derive(Debug, Clone)]
pub struct Objective {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

/// `P(X = k)` as `s_k - s_{k+1}`, evaluated on the side of the logistic that
/// avoids cancellation.
#[inline]
fn prob_between(z_upper: Option<f64>, z_lower: Option<f64>) -> f64 {
    match (z_upper, z_lower) {
        (None, None) => 1.0,
        (None, Some(lo)) => logistic(-lo),
        (Some(hi), None) => logistic(hi),
        (Some(hi), Some(lo)) => {
            if lo > 0.0 {
                logistic(-lo) - logistic(-hi)
            } else {
                logistic(hi) - logistic(lo)
            }
        }
    }
}

/// Evaluates the objective. `counts` is `P x C` row-major over the
/// loading-dimension coordinates `thetas`.
pub fn item_objective(counts: &[f64], thetas: &[f64], slope: f64, intercepts: &[f64]) -> Objective {
    let n_thr = intercepts.len();
    let c = n_thr + 1;
    let dim = c;
    let mut value = 0.0;
    let mut grad = DVector::zeros(dim);
    let mut hess = DMatrix::zeros(dim, dim);

    // Index 0 is unused for s/s1/s2 of the virtual boundaries.
    let mut s1 = vec![0.0; c + 1];
    let mut s2 = vec![0.0; c + 1];
    let mut dp = vec![0.0; dim];

    for (node, &theta) in thetas.iter().enumerate() {
        let row = &counts[node * c..(node + 1) * c];
        if row.iter().all(|&n| n == 0.0) {
            continue;
        }
        let eta = slope * theta;
        for t in 1..=n_thr {
            let s = logistic(eta + intercepts[t - 1]);
            s1[t] = s * (1.0 - s);
            s2[t] = s1[t] * (1.0 - 2.0 * s);
        }
        for (k, &n) in row.iter().enumerate() {
            if n == 0.0 {
                continue;
            }
            // Boundaries k (upper) and k + 1 (lower); 0 and C are fixed.
            let upper = (k >= 1).then_some(k);
            let lower = (k < n_thr).then_some(k + 1);
            let p = prob_between(
                upper.map(|t| eta + intercepts[t - 1]),
                lower.map(|t| eta + intercepts[t - 1]),
            )
            .max(PROB_FLOOR);
            value += n * p.ln();

            let su1 = upper.map_or(0.0, |t| s1[t]);
            let sl1 = lower.map_or(0.0, |t| s1[t]);
            let su2 = upper.map_or(0.0, |t| s2[t]);
            let sl2 = lower.map_or(0.0, |t| s2[t]);

            dp.iter_mut().for_each(|v| *v = 0.0);
            dp[0] = theta * (su1 - sl1);
            if let Some(t) = upper {
                dp[t] = su1;
            }
            if let Some(t) = lower {
                dp[t] = -sl1;
            }

            let w = n / p;
            for a in 0..dim {
                grad[a] += w * dp[a];
            }
            // Second derivatives of P.
            let mut d2 = |i: usize, j: usize, v: f64| {
                hess[(i, j)] += w * v;
                if i != j {
                    hess[(j, i)] += w * v;
                }
            };
            d2(0, 0, theta * theta * (su2 - sl2));
            if let Some(t) = upper {
                d2(0, t, theta * su2);
                d2(t, t, su2);
            }
            if let Some(t) = lower {
                d2(0, t, -theta * sl2);
                d2(t, t, -sl2);
            }
            let w2 = n / (p * p);
            for a in 0..dim {
                if dp[a] == 0.0 {
                    continue;
                }
                for b in 0..dim {
                    hess[(a, b)] -= w2 * dp[a] * dp[b];
                }
            }
        }
    }
    Objective {
        value,
        gradient: grad,
        hessian: hess,
    }
}

fn feasible(slope: f64, intercepts: &[f64]) -> bool {
    slope > 0.0
        && slope.is_finite()
        && intercepts.iter().all(|d| d.is_finite() && d.abs() <= INTERCEPT_BOUND)
        && intercepts.windows(2).all(|w| w[0] > w[1])
}

/// Sums node counts sharing the same coordinate on `dim`, giving a `P x C`
/// table over the grid axis.
pub fn collapse_counts(counts: &ItemCounts, grid: &QuadratureGrid, dim: usize) -> Vec<f64> {
    let c = counts.n_categories;
    let mut out = vec![0.0; grid.axis.len() * c];
    for m in 0..counts.n_nodes() {
        let i = grid.axis_index(m, dim);
        for k in 0..c {
            out[i * c + k] += counts.at(m, k);
        }
    }
    out
}

/// Newton maximization of one item's expected complete-data log-likelihood
/// with step-halving to keep iterates feasible and ascending.
pub fn m_step_item(counts: &ItemCounts, grid: &QuadratureGrid, current: &ItemParams) -> Result<ItemParams> {
    if counts.n_nodes() != grid.n_nodes() || counts.n_categories != current.n_categories() {
        return Err(Error::arg("expected counts do not match the grid or item"));
    }
    let collapsed = collapse_counts(counts, grid, current.loading_dim);
    let (slope, intercepts) = maximize_item(
        &collapsed,
        &grid.axis,
        current.slope(),
        &current.intercepts,
        counts.item,
    )?;
    let mut next = current.clone();
    next.slopes[current.loading_dim] = slope;
    next.intercepts = intercepts;
    Ok(next)
}

pub(crate) fn maximize_item(
    counts: &[f64],
    thetas: &[f64],
    slope: f64,
    intercepts: &[f64],
    item: usize,
) -> Result<(f64, Vec<f64>)> {
    let c = intercepts.len() + 1;
    for k in 0..c {
        let total: f64 = counts.iter().skip(k).step_by(c).sum();
        if total <= 0.0 {
            return Err(Error::Calibration {
                item,
                reason: format!("category {k} has zero expected count"),
            });
        }
    }
    if !feasible(slope, intercepts) {
        return Err(Error::Calibration {
            item,
            reason: format!("infeasible start (slope {slope}, intercepts {intercepts:?})"),
        });
    }

    let mut x = DVector::from_iterator(c, std::iter::once(slope).chain(intercepts.iter().copied()));
    let mut obj = item_objective(counts, thetas, x[0], &x.as_slice()[1..]);
    for _ in 0..MAX_NEWTON_ITERS {
        if obj.gradient.amax() < GRAD_TOL {
            break;
        }
        let neg_h = -&obj.hessian;
        let step = match neg_h.clone().cholesky() {
            Some(ch) => ch.solve(&obj.gradient),
            // Fall back to a scaled gradient step if curvature is lost.
            None => &obj.gradient / neg_h.diagonal().amax().max(1.0),
        };
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let cand = &x + t * &step;
            if feasible(cand[0], &cand.as_slice()[1..]) {
                let cand_obj = item_objective(counts, thetas, cand[0], &cand.as_slice()[1..]);
                // Tolerate rounding noise in Q once steps are tiny.
                if cand_obj.value >= obj.value - 1e-13 * (1.0 + obj.value.abs()) {
                    accepted = Some((cand, cand_obj));
                    break;
                }
            }
            t *= 0.5;
        }
        match accepted {
            Some((cand, cand_obj)) => {
                let moved = (&cand - &x).amax();
                x = cand;
                obj = cand_obj;
                if moved < 1e-14 {
                    break;
                }
            }
            // No ascent possible: numerically at the optimum unless the
            // gradient is still large.
            None if obj.gradient.amax() < 1e-6 => break,
            None => {
                return Err(Error::Calibration {
                    item,
                    reason: format!(
                        "step-halving failed to find a feasible ascent step (slope {}, intercepts {:?})",
                        x[0],
                        &x.as_slice()[1..]
                    ),
                })
            }
        }
    }
    Ok((x[0], x.as_slice()[1..].to_vec()))
}
