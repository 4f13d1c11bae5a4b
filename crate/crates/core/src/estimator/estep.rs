use rayon::prelude::*;

use super::quadrature::QuadratureGrid;
use crate::design::ResponseMatrix;
use crate::error::{Error, Result};
use crate::grm::{category_probs_from_predictor, TestForm, PROB_FLOOR};

const PERSON_CHUNK: usize = 256;

/// Expected category counts of one item at every quadrature node.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemCounts {
    pub item: usize,
    pub n_categories: usize,
    /// `M x C`, row-major.
    pub counts: Vec<f64>,
}

impl ItemCounts {
    pub fn n_nodes(&self) -> usize {
        self.counts.len() / self.n_categories
    }

    pub fn at(&self, m: usize, k: usize) -> f64 {
        self.counts[m * self.n_categories + k]
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone)]
pub struct EStep {
    pub counts: Vec<ItemCounts>,
    pub loglik: f64,
}

/// Log category probabilities, indexed `[item][node * C + k]`.
fn log_prob_table(form: &TestForm, grid: &QuadratureGrid) -> Vec<Vec<f64>> {
    let c = form.n_categories;
    let mut probs = vec![0.0; c];
    form.items
        .iter()
        .map(|item| {
            let mut table = Vec::with_capacity(grid.n_nodes() * c);
            for m in 0..grid.n_nodes() {
                category_probs_from_predictor(item.linear_predictor(grid.node(m)), &item.intercepts, &mut probs);
                table.extend(probs.iter().map(|p| p.max(PROB_FLOOR).ln()));
            }
            table
        })
        .collect()
}

fn check_shapes(responses: &ResponseMatrix, form: &TestForm, grid: &QuadratureGrid) -> Result<()> {
    if responses.n_items != form.n_items() {
        return Err(Error::arg(format!(
            "responses have {} items, form has {}",
            responses.n_items,
            form.n_items()
        )));
    }
    if responses.n_categories != form.n_categories {
        return Err(Error::arg("responses and form disagree on category count"));
    }
    if grid.n_dims != form.n_dims {
        return Err(Error::arg(format!(
            "grid has {} dimensions, form has {}",
            grid.n_dims, form.n_dims
        )));
    }
    Ok(())
}

/// Log joint `ln w_m + sum_j ln P(x_nj | node_m)` for one person, written into
/// `out`; returns the person's log marginal likelihood and leaves `out`
/// holding normalized posterior weights.
fn person_posterior(
    person: usize,
    row: &[u8],
    log_w: &[f64],
    table: &[Vec<f64>],
    c: usize,
    out: &mut [f64],
) -> Result<f64> {
    out.copy_from_slice(log_w);
    for (j, &x) in row.iter().enumerate() {
        let t = &table[j];
        for (m, o) in out.iter_mut().enumerate() {
            *o += t[m * c + x as usize];
        }
    }
    let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Numerical(format!(
            "likelihood of person {person} vanished at every quadrature node"
        )));
    }
    let mut total = 0.0;
    for o in out.iter_mut() {
        *o = (*o - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
    Ok(max + total.ln())
}

/// Posterior expected counts per (item, node, category) and the marginal
/// log-likelihood at the current parameters.
///
/// Persons are processed in fixed chunks whose partial sums are combined in
/// chunk order, so the result does not depend on the thread count.
pub fn e_step(responses: &ResponseMatrix, form: &TestForm, grid: &QuadratureGrid) -> Result<EStep> {
    check_shapes(responses, form, grid)?;
    let c = form.n_categories;
    let m = grid.n_nodes();
    let k = form.n_items();
    let table = log_prob_table(form, grid);
    let log_w: Vec<f64> = grid.weights.iter().map(|w| w.ln()).collect();

    let n_chunks = responses.n_persons.div_ceil(PERSON_CHUNK);
    let partials = (0..n_chunks)
        .into_par_iter()
        .map(|chunk| -> Result<(Vec<f64>, f64)> {
            let mut counts = vec![0.0; k * m * c];
            let mut post = vec![0.0; m];
            let mut ll = 0.0;
            let start = chunk * PERSON_CHUNK;
            let end = (start + PERSON_CHUNK).min(responses.n_persons);
            for n in start..end {
                let row = responses.row(n);
                ll += person_posterior(n, row, &log_w, &table, c, &mut post)?;
                for (j, &x) in row.iter().enumerate() {
                    let base = j * m * c + x as usize;
                    for (node, p) in post.iter().enumerate() {
                        counts[base + node * c] += p;
                    }
                }
            }
            Ok((counts, ll))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut counts = vec![0.0; k * m * c];
    let mut loglik = 0.0;
    for (part, ll) in partials {
        for (a, b) in counts.iter_mut().zip(part) {
            *a += b;
        }
        loglik += ll;
    }
    let counts = counts
        .chunks_exact(m * c)
        .enumerate()
        .map(|(item, chunk)| ItemCounts {
            item,
            n_categories: c,
            counts: chunk.to_vec(),
        })
        .collect();
    Ok(EStep { counts, loglik })
}

/// Per-person posterior weights over the grid (`N x M`, row-major).
pub fn posterior_weights(responses: &ResponseMatrix, form: &TestForm, grid: &QuadratureGrid) -> Result<Vec<f64>> {
    check_shapes(responses, form, grid)?;
    let table = log_prob_table(form, grid);
    let log_w: Vec<f64> = grid.weights.iter().map(|w| w.ln()).collect();
    let m = grid.n_nodes();
    let mut out = vec![0.0; responses.n_persons * m];
    for (n, post) in out.chunks_exact_mut(m).enumerate() {
        person_posterior(n, responses.row(n), &log_w, &table, form.n_categories, post)?;
    }
    Ok(out)
}

/// `sum_n log sum_m w_m prod_j P(x_nj | node_m)`, with per-person
/// max-rescaling in log space.
pub fn marginal_loglik(responses: &ResponseMatrix, form: &TestForm, grid: &QuadratureGrid) -> Result<f64> {
    check_shapes(responses, form, grid)?;
    let table = log_prob_table(form, grid);
    let log_w: Vec<f64> = grid.weights.iter().map(|w| w.ln()).collect();
    let mut post = vec![0.0; grid.n_nodes()];
    let mut total = 0.0;
    for n in 0..responses.n_persons {
        total += person_posterior(n, responses.row(n), &log_w, &table, form.n_categories, &mut post)?;
    }
    Ok(total)
}
