//! Marginal maximum likelihood calibration of the confirmatory
//! simple-structure MGRM by EM over a rectangular quadrature grid.
//!
//! Each cycle runs an E-step (posterior expected category counts at every
//! node) followed by an independent Newton M-step per item. With an
//! orthogonal prior and simple structure the marginal likelihood factors over
//! dimensions, and `factorize` fits each dimension on its own one-dimensional
//! grid. Both routes visit the same iterates up to rounding.

mod estep;
mod mstep;
mod quadrature;

pub use estep::{e_step, marginal_loglik, posterior_weights, EStep, ItemCounts};
pub use mstep::{collapse_counts, item_objective, m_step_item, Objective};
pub use quadrature::{build_quadrature, QuadratureGrid};

use serde::{Deserialize, Serialize};

use crate::design::{check_rho, loading_dims, ResponseMatrix};
use crate::error::{Error, Result};
use crate::grm::{ItemParams, TestForm, INTERCEPT_BOUND};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmConfig {
    pub points_per_dim: usize,
    pub bounds: (f64, f64),
    pub max_cycles: usize,
    /// Convergence threshold on the largest absolute parameter change.
    pub tol: f64,
    /// Latent correlation assumed by the estimation prior.
    pub prior_correlation: f64,
    /// Fit dimensions separately when the prior is orthogonal.
    pub factorize: bool,
    /// Upper bound on full-grid node count.
    pub max_nodes: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            points_per_dim: 15,
            bounds: (-6.0, 6.0),
            max_cycles: 500,
            tol: 1e-4,
            prior_correlation: 0.0,
            factorize: true,
            max_nodes: 100_000,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.points_per_dim < 3 {
            return Err(Error::arg("points_per_dim must be at least 3"));
        }
        if self.tol.is_nan() || self.tol <= 0.0 {
            return Err(Error::arg("tol must be positive"));
        }
        if self.bounds.0.partial_cmp(&self.bounds.1) != Some(std::cmp::Ordering::Less) || !self.bounds.0.is_finite() || !self.bounds.1.is_finite() {
            return Err(Error::arg("quadrature bounds must be finite with low < high"));
        }
        if self.max_cycles == 0 {
            return Err(Error::arg("max_cycles must be at least 1"));
        }
        Ok(())
    }

    /// Whether `fit` will take the per-dimension route.
    pub fn uses_factorization(&self) -> bool {
        self.factorize && self.prior_correlation == 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub estimates: TestForm,
    /// Marginal log-likelihood at the start of each cycle, followed by the
    /// value at the returned estimates.
    pub loglik_trace: Vec<f64>,
    pub loglik: f64,
    pub n_cycles: usize,
    pub converged: bool,
}

/// Start values: unit slope, `d_k = logit(P(X >= k))` from observed
/// proportions.
pub fn start_values(responses: &ResponseMatrix, allocation: &[usize]) -> Result<TestForm> {
    let n_dims = allocation.len();
    let c = responses.n_categories;
    let n = responses.n_persons as f64;
    let items = loading_dims(allocation)
        .into_iter()
        .enumerate()
        .map(|(j, dim)| {
            let counts = responses.category_counts(j);
            if let Some(k) = counts.iter().position(|&v| v == 0) {
                return Err(Error::Calibration {
                    item: j,
                    reason: format!("category {k} is never observed"),
                });
            }
            let mut at_least = n;
            let intercepts = counts[..c - 1]
                .iter()
                .map(|&cnt| {
                    at_least -= cnt as f64;
                    let p = at_least / n;
                    (p / (1.0 - p)).ln().clamp(-INTERCEPT_BOUND, INTERCEPT_BOUND)
                })
                .collect();
            ItemParams::simple(n_dims, dim, 1.0, intercepts)
        })
        .collect::<Result<Vec<_>>>()?;
    TestForm::new(items, n_dims, c)
}

/// One independently integrable set of items.
struct Block {
    items: Vec<usize>,
    responses: ResponseMatrix,
    grid: QuadratureGrid,
    /// Dimension index of the block's grid that each item loads on.
    local_dims: Vec<usize>,
}

impl Block {
    fn form(&self, params: &[ItemParams]) -> Result<TestForm> {
        let items = self
            .items
            .iter()
            .zip(&self.local_dims)
            .map(|(&j, &dim)| ItemParams::simple(self.grid.n_dims, dim, params[j].slope(), params[j].intercepts.clone()))
            .collect::<Result<Vec<_>>>()?;
        TestForm::new(items, self.grid.n_dims, self.responses.n_categories)
    }
}

fn blocks(responses: &ResponseMatrix, allocation: &[usize], config: &EmConfig) -> Result<Vec<Block>> {
    let dims = loading_dims(allocation);
    if config.uses_factorization() {
        let grid = build_quadrature(config, 1)?;
        Ok((0..allocation.len())
            .map(|d| {
                let items: Vec<usize> = (0..dims.len()).filter(|&j| dims[j] == d).collect();
                Block {
                    responses: responses.select_items(&items),
                    local_dims: vec![0; items.len()],
                    items,
                    grid: grid.clone(),
                }
            })
            .collect())
    } else {
        Ok(vec![Block {
            items: (0..dims.len()).collect(),
            responses: responses.clone(),
            grid: build_quadrature(config, allocation.len())?,
            local_dims: dims,
        }])
    }
}

/// Fits the confirmatory model in which item `j` loads only on the dimension
/// given by `allocation` (contiguous blocks). Non-convergence is reported
/// through `converged`, not as an error.
pub fn fit(responses: &ResponseMatrix, allocation: &[usize], config: &EmConfig) -> Result<FitResult> {
    config.validate()?;
    check_rho(config.prior_correlation, allocation.len())?;
    if allocation.iter().sum::<usize>() != responses.n_items {
        return Err(Error::arg(format!(
            "allocation {allocation:?} does not cover {} items",
            responses.n_items
        )));
    }
    if allocation.contains(&0) {
        return Err(Error::arg("every dimension needs at least one item"));
    }
    let start = start_values(responses, allocation)?;
    let mut params = start.items.clone();
    let blocks = blocks(responses, allocation, config)?;

    let mut trace = Vec::new();
    let mut converged = false;
    let mut n_cycles = 0;
    while n_cycles < config.max_cycles {
        n_cycles += 1;
        let mut loglik = 0.0;
        let mut max_change: f64 = 0.0;
        for block in &blocks {
            let form = block.form(&params)?;
            let e = e_step(&block.responses, &form, &block.grid)?;
            loglik += e.loglik;
            for (local, &j) in block.items.iter().enumerate() {
                let counts = ItemCounts {
                    item: j,
                    ..e.counts[local].clone()
                };
                let next = m_step_item(&counts, &block.grid, &form.items[local])?;
                max_change = max_change.max((next.slope() - params[j].slope()).abs());
                for (new, old) in next.intercepts.iter().zip(&params[j].intercepts) {
                    max_change = max_change.max((new - old).abs());
                }
                let dim = params[j].loading_dim;
                params[j].slopes[dim] = next.slope();
                params[j].intercepts = next.intercepts;
            }
        }
        trace.push(loglik);
        if max_change < config.tol {
            converged = true;
            break;
        }
    }

    let mut loglik = 0.0;
    for block in &blocks {
        loglik += marginal_loglik(&block.responses, &block.form(&params)?, &block.grid)?;
    }
    trace.push(loglik);

    let estimates = TestForm {
        items: params,
        n_dims: allocation.len(),
        n_categories: responses.n_categories,
    };
    Ok(fix_reflection(FitResult {
        estimates,
        loglik_trace: trace,
        loglik,
        n_cycles,
        converged,
    }))
}

/// Resolves the per-dimension sign indeterminacy: any dimension whose slopes
/// sum to a negative value has them negated. The marginal likelihood is
/// unchanged under an orthogonal (or otherwise reflection-symmetric) prior.
pub fn fix_reflection(mut result: FitResult) -> FitResult {
    let n_dims = result.estimates.n_dims;
    for dim in 0..n_dims {
        let total: f64 = result.estimates.items.iter().map(|i| i.slopes[dim]).sum();
        if total < 0.0 {
            for item in &mut result.estimates.items {
                item.slopes[dim] = -item.slopes[dim];
            }
        }
    }
    result
}

/// Marginal log-likelihood of `form` under `config`'s prior, using the
/// per-dimension factorization when it applies.
pub fn form_loglik(responses: &ResponseMatrix, form: &TestForm, config: &EmConfig) -> Result<f64> {
    let allocation = form.allocation();
    let ordered = loading_dims(&allocation) == form.items.iter().map(|i| i.loading_dim).collect::<Vec<_>>();
    if !ordered {
        return Err(Error::arg("items must be ordered by loading dimension"));
    }
    let blocks = blocks(responses, &allocation, config)?;
    let mut total = 0.0;
    for block in &blocks {
        total += marginal_loglik(&block.responses, &block.form(&form.items)?, &block.grid)?;
    }
    Ok(total)
}
