use nalgebra::DMatrix;

use super::EmConfig;
use crate::design::{check_rho, equicorrelation};
use crate::error::{Error, Result};

/// Tensor-product rectangular grid with normalized prior weights.
///
/// Nodes are enumerated with the last dimension varying fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureGrid {
    /// Equally spaced coordinates shared by every axis.
    pub axis: Vec<f64>,
    pub n_dims: usize,
    /// `M x D`, row-major.
    pub nodes: Vec<f64>,
    /// Length `M`, sums to one.
    pub weights: Vec<f64>,
}

impl QuadratureGrid {
    pub fn n_nodes(&self) -> usize {
        self.weights.len()
    }

    pub fn node(&self, m: usize) -> &[f64] {
        &self.nodes[m * self.n_dims..(m + 1) * self.n_dims]
    }

    /// Position of node `m` along axis `dim`.
    pub fn axis_index(&self, m: usize, dim: usize) -> usize {
        let p = self.axis.len();
        let stride = p.pow((self.n_dims - 1 - dim) as u32);
        (m / stride) % p
    }
}

/// Builds the grid: `points_per_dim` equally spaced nodes over the bounds on
/// each axis, weighted by the equicorrelated normal density with correlation
/// `prior_correlation` and renormalized.
pub fn build_quadrature(config: &EmConfig, n_dims: usize) -> Result<QuadratureGrid> {
    let p = config.points_per_dim;
    if p == 0 || n_dims == 0 {
        return Err(Error::arg("grid needs at least one point and one dimension"));
    }
    let (lo, hi) = config.bounds;
    if lo.partial_cmp(&hi) != Some(std::cmp::Ordering::Less) {
        return Err(Error::arg(format!("quadrature bounds ({lo}, {hi}) must satisfy low < high")));
    }
    let m = p
        .checked_pow(n_dims as u32)
        .filter(|&m| m <= config.max_nodes)
        .ok_or_else(|| {
            Error::Resource(format!(
                "{p}^{n_dims} quadrature nodes exceed the cap of {}; enable factorize \
                 (orthogonal prior) or reduce points_per_dim",
                config.max_nodes
            ))
        })?;
    check_rho(config.prior_correlation, n_dims)?;

    let axis: Vec<f64> = if p == 1 {
        vec![0.5 * (lo + hi)]
    } else {
        let step = (hi - lo) / (p - 1) as f64;
        (0..p).map(|i| lo + step * i as f64).collect()
    };

    let precision: DMatrix<f64> = equicorrelation(config.prior_correlation, n_dims)
        .try_inverse()
        .ok_or_else(|| Error::arg("prior covariance is singular"))?;

    let mut nodes = Vec::with_capacity(m * n_dims);
    let mut log_w = Vec::with_capacity(m);
    let mut x = vec![0.0; n_dims];
    for idx in 0..m {
        let mut rem = idx;
        for d in (0..n_dims).rev() {
            x[d] = axis[rem % p];
            rem /= p;
        }
        let mut quad = 0.0;
        for i in 0..n_dims {
            for j in 0..n_dims {
                quad += x[i] * precision[(i, j)] * x[j];
            }
        }
        nodes.extend_from_slice(&x);
        log_w.push(-0.5 * quad);
    }
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    Ok(QuadratureGrid {
        axis,
        n_dims,
        nodes,
        weights,
    })
}
