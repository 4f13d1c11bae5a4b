//! Compensatory multidimensional graded response model.
//!
//! Boundary probabilities use the slope-intercept form
//! `P*(X >= k | theta) = logistic(a . theta + d_k)` with `P*(X >= 0) = 1` and
//! `P*(X >= C) = 0`; category probabilities are adjacent differences.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest admissible intercept magnitude. Past this the logistic is
/// saturated to machine precision.
pub const INTERCEPT_BOUND: f64 = 25.0;

/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-300;

/// Numerically stable logistic function.
#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Parameters of one polytomous item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemParams {
    /// One slope per latent dimension.
    pub slopes: Vec<f64>,
    /// `C - 1` boundary intercepts, strictly decreasing.
    pub intercepts: Vec<f64>,
    /// Dimension carrying the single nonzero slope.
    pub loading_dim: usize,
}

impl ItemParams {
    /// Simple-structure item loading only on `loading_dim`.
    pub fn simple(n_dims: usize, loading_dim: usize, slope: f64, intercepts: Vec<f64>) -> Result<Self> {
        if loading_dim >= n_dims {
            return Err(Error::arg(format!(
                "loading dimension {loading_dim} out of range for {n_dims} dimensions"
            )));
        }
        let mut slopes = vec![0.0; n_dims];
        slopes[loading_dim] = slope;
        let item = ItemParams {
            slopes,
            intercepts,
            loading_dim,
        };
        item.validate()?;
        Ok(item)
    }

    pub fn n_dims(&self) -> usize {
        self.slopes.len()
    }

    pub fn n_categories(&self) -> usize {
        self.intercepts.len() + 1
    }

    /// Slope on the loading dimension.
    pub fn slope(&self) -> f64 {
        self.slopes[self.loading_dim]
    }

    /// Checks finiteness, intercept ordering, the intercept bound and simple
    /// structure.
    pub fn validate(&self) -> Result<()> {
        if self.intercepts.is_empty() {
            return Err(Error::arg("an item needs at least two categories"));
        }
        if self.loading_dim >= self.slopes.len() {
            return Err(Error::arg("loading dimension out of range"));
        }
        if self
            .slopes
            .iter()
            .chain(&self.intercepts)
            .any(|v| !v.is_finite())
        {
            return Err(Error::arg("item parameters must be finite"));
        }
        if self.intercepts.iter().any(|d| d.abs() > INTERCEPT_BOUND) {
            return Err(Error::arg(format!(
                "intercepts must satisfy |d| <= {INTERCEPT_BOUND}"
            )));
        }
        if self.intercepts.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::arg(format!(
                "intercepts must be strictly decreasing, got {:?}",
                self.intercepts
            )));
        }
        for (dim, &a) in self.slopes.iter().enumerate() {
            if dim == self.loading_dim {
                if a <= 0.0 {
                    return Err(Error::arg(format!(
                        "loading slope must be positive, got {a}"
                    )));
                }
            } else if a != 0.0 {
                return Err(Error::arg(format!(
                    "slope on non-loading dimension {dim} must be zero, got {a}"
                )));
            }
        }
        Ok(())
    }

    /// Linear predictor `a . theta` without the intercept.
    #[inline]
    pub fn linear_predictor(&self, theta: &[f64]) -> f64 {
        self.slopes.iter().zip(theta).map(|(a, t)| a * t).sum()
    }

    /// `P*(X >= k | theta)` for `k` in `0..=C`.
    pub fn boundary_prob(&self, theta: &[f64], k: usize) -> Result<f64> {
        let c = self.n_categories();
        if k > c {
            return Err(Error::arg(format!(
                "boundary index {k} outside 0..={c}"
            )));
        }
        self.check_theta(theta)?;
        Ok(boundary_from_predictor(
            self.linear_predictor(theta),
            &self.intercepts,
            k,
        ))
    }

    /// Category probabilities `P(X = k | theta)` for `k` in `0..C`.
    pub fn category_probs(&self, theta: &[f64]) -> Result<Vec<f64>> {
        self.check_theta(theta)?;
        let mut out = vec![0.0; self.n_categories()];
        category_probs_from_predictor(self.linear_predictor(theta), &self.intercepts, &mut out);
        Ok(out)
    }

    /// Log probability of response `x` at `theta`, floored at `ln(1e-300)`.
    pub fn response_loglik(&self, theta: &[f64], x: usize) -> Result<f64> {
        let c = self.n_categories();
        if x >= c {
            return Err(Error::arg(format!("response {x} outside 0..{c}")));
        }
        let p = self.category_probs(theta)?[x];
        if p.is_nan() {
            return Err(Error::Numerical(format!(
                "category probability is NaN at theta {theta:?}"
            )));
        }
        Ok(p.max(PROB_FLOOR).ln())
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.slopes.len() {
            return Err(Error::arg(format!(
                "theta has {} components, item has {} dimensions",
                theta.len(),
                self.slopes.len()
            )));
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::arg("theta must be finite"));
        }
        Ok(())
    }
}

/// Boundary probability given the linear predictor `eta = a . theta`.
#[inline]
pub fn boundary_from_predictor(eta: f64, intercepts: &[f64], k: usize) -> f64 {
    if k == 0 {
        1.0
    } else if k > intercepts.len() {
        0.0
    } else {
        logistic(eta + intercepts[k - 1])
    }
}

/// Fills `out` (length `C`) with category probabilities for linear predictor
/// `eta`.
#[inline]
pub fn category_probs_from_predictor(eta: f64, intercepts: &[f64], out: &mut [f64]) {
    debug_assert_eq!(out.len(), intercepts.len() + 1);
    let mut upper = 1.0;
    for (k, d) in intercepts.iter().enumerate() {
        let lower = logistic(eta + d);
        out[k] = upper - lower;
        upper = lower;
    }
    out[intercepts.len()] = upper;
}

/// Inverse-CDF categorical draw: the smallest `k` with `u < sum_{j<=k} p_j`.
pub fn sample_category(probs: &[f64], u: f64) -> Result<usize> {
    if probs.is_empty() {
        return Err(Error::arg("empty probability vector"));
    }
    if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::arg("probabilities must lie in [0, 1]"));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::arg(format!(
            "probabilities sum to {total}, expected 1"
        )));
    }
    if !(0.0..1.0).contains(&u) {
        return Err(Error::arg(format!("uniform draw {u} outside [0, 1)")));
    }
    Ok(sample_unchecked(probs, u))
}

#[inline]
pub(crate) fn sample_unchecked(probs: &[f64], u: f64) -> usize {
    let mut cum = 0.0;
    for (k, p) in probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return k;
        }
    }
    probs.len() - 1
}

/// A set of items sharing dimensionality and category count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestForm {
    pub items: Vec<ItemParams>,
    pub n_dims: usize,
    pub n_categories: usize,
}

impl TestForm {
    pub fn new(items: Vec<ItemParams>, n_dims: usize, n_categories: usize) -> Result<Self> {
        let form = TestForm {
            items,
            n_dims,
            n_categories,
        };
        form.validate()?;
        Ok(form)
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_categories < 2 {
            return Err(Error::arg("at least two categories are required"));
        }
        let mut covered = vec![false; self.n_dims];
        for (j, item) in self.items.iter().enumerate() {
            if item.n_dims() != self.n_dims || item.n_categories() != self.n_categories {
                return Err(Error::arg(format!(
                    "item {j} has shape ({}, {}), form expects ({}, {})",
                    item.n_dims(),
                    item.n_categories(),
                    self.n_dims,
                    self.n_categories
                )));
            }
            item.validate()
                .map_err(|e| Error::arg(format!("item {j}: {e}")))?;
            covered[item.loading_dim] = true;
        }
        if let Some(dim) = covered.iter().position(|c| !c) {
            return Err(Error::arg(format!("dimension {dim} has no loading item")));
        }
        Ok(())
    }

    /// Items per dimension, in dimension order.
    pub fn allocation(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_dims];
        for item in &self.items {
            counts[item.loading_dim] += 1;
        }
        counts
    }

    /// `K x D` slope matrix as nested rows.
    pub fn slope_rows(&self) -> Vec<Vec<f64>> {
        self.items.iter().map(|i| i.slopes.clone()).collect()
    }

    /// `K x (C-1)` intercept matrix as nested rows.
    pub fn intercept_rows(&self) -> Vec<Vec<f64>> {
        self.items.iter().map(|i| i.intercepts.clone()).collect()
    }

    /// Rebuilds a form from slope/intercept matrices, inferring each item's
    /// loading dimension from its largest-magnitude slope.
    pub fn from_rows(slopes: &[Vec<f64>], intercepts: &[Vec<f64>]) -> Result<Self> {
        if slopes.len() != intercepts.len() || slopes.is_empty() {
            return Err(Error::arg("slope and intercept matrices must have equal, nonzero row counts"));
        }
        let n_dims = slopes[0].len();
        let n_categories = intercepts[0].len() + 1;
        let items = slopes
            .iter()
            .zip(intercepts)
            .map(|(a, d)| {
                let loading_dim = a
                    .iter()
                    .enumerate()
                    .max_by(|x, y| x.1.abs().total_cmp(&y.1.abs()))
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                ItemParams {
                    slopes: a.clone(),
                    intercepts: d.clone(),
                    loading_dim,
                }
            })
            .collect();
        TestForm::new(items, n_dims, n_categories)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn item(a: [f64; 3], d: [f64; 3]) -> ItemParams {
        let loading_dim = a.iter().position(|v| *v != 0.0).unwrap();
        ItemParams {
            slopes: a.to_vec(),
            intercepts: d.to_vec(),
            loading_dim,
        }
    }

    #[test]
    fn boundary_examples() {
        let it = item([0.6, 0.0, 0.0], [1.0, 0.0, -1.0]);
        assert_abs_diff_eq!(it.boundary_prob(&[0.0; 3], 1).unwrap(), 0.731059, epsilon = 1e-6);
        assert_eq!(it.boundary_prob(&[3.0, -1.0, 2.0], 0).unwrap(), 1.0);
        assert_eq!(it.boundary_prob(&[3.0, -1.0, 2.0], 4).unwrap(), 0.0);
        let it = item([0.5, 0.0, 0.0], [1.0, 0.0, -1.0]);
        assert_abs_diff_eq!(it.boundary_prob(&[2.0, 0.0, 0.0], 1).unwrap(), 0.880797, epsilon = 1e-6);
    }

    #[test]
    fn boundary_index_out_of_range() {
        let it = item([0.6, 0.0, 0.0], [1.0, 0.0, -1.0]);
        assert!(matches!(it.boundary_prob(&[0.0; 3], 5), Err(Error::Argument(_))));
    }

    #[test]
    fn category_examples() {
        let it = item([0.6, 0.0, 0.0], [1.0, 0.0, -1.0]);
        let p = it.category_probs(&[0.0; 3]).unwrap();
        for (got, want) in p.iter().zip([0.268941, 0.231059, 0.231059, 0.268941]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-6);
        }

        // Hand evaluation: logistic(2) = 0.880797, logistic(1) = 0.731059,
        // logistic(0) = 0.5.
        let it = item([1.0, 0.0, 0.0], [1.0, 0.0, -1.0]);
        let p = it.category_probs(&[1.0, 0.0, 0.0]).unwrap();
        let want = [
            1.0 - 0.880797,
            0.880797 - 0.731059,
            0.731059 - 0.5,
            0.5,
        ];
        for (got, want) in p.iter().zip(want) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-6);
        }

        let p = it.category_probs(&[1e6, 0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(p[3], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn loglik_examples() {
        let it = item([0.6, 0.0, 0.0], [1.0, 0.0, -1.0]);
        assert_abs_diff_eq!(it.response_loglik(&[0.0; 3], 0).unwrap(), -1.313262, epsilon = 1e-6);
        assert_abs_diff_eq!(it.response_loglik(&[1e6, 0.0, 0.0], 3).unwrap(), 0.0, epsilon = 1e-12);
        // Extreme tail stays finite.
        let ll = it.response_loglik(&[1e6, 0.0, 0.0], 0).unwrap();
        assert!(ll.is_finite() && ll <= PROB_FLOOR.ln() + 1e-9);
        assert!(it.response_loglik(&[0.0; 3], 4).is_err());
    }

    #[test]
    fn uniform_four_category_loglik() {
        // Intercepts logit(0.75), 0, logit(0.25) give equal categories at the origin.
        let it = item([1.0, 0.0, 0.0], [3f64.ln(), 0.0, -(3f64.ln())]);
        for x in 0..4 {
            assert_abs_diff_eq!(it.response_loglik(&[0.0; 3], x).unwrap(), -1.386294, epsilon = 1e-6);
        }
    }

    #[test]
    fn sample_examples() {
        assert_eq!(sample_category(&[0.25; 4], 0.0).unwrap(), 0);
        assert_eq!(sample_category(&[0.25; 4], 0.999).unwrap(), 3);
        let p = [0.268941, 0.231059, 0.231059, 0.268941];
        assert_eq!(sample_category(&p, 0.5).unwrap(), 2);
        assert!(matches!(sample_category(&[0.5, 0.6], 0.1), Err(Error::Argument(_))));
    }

    #[test]
    fn validation_rejects_bad_items() {
        assert!(ItemParams::simple(3, 0, 0.5, vec![0.0, 1.0]).is_err());
        assert!(ItemParams::simple(3, 0, -0.5, vec![1.0, 0.0]).is_err());
        assert!(ItemParams::simple(3, 0, 0.5, vec![30.0, 0.0]).is_err());
        assert!(ItemParams::simple(3, 3, 0.5, vec![1.0, 0.0]).is_err());
        assert!(ItemParams::simple(3, 2, 0.5, vec![1.0, 0.0]).is_ok());
        let cross = item([0.5, 0.2, 0.0], [1.0, 0.0, -1.0]);
        assert!(cross.validate().is_err());
    }

    #[test]
    fn form_requires_every_dimension() {
        let items = vec![
            ItemParams::simple(2, 0, 1.0, vec![0.5]).unwrap(),
            ItemParams::simple(2, 0, 1.0, vec![0.5]).unwrap(),
        ];
        assert!(TestForm::new(items, 2, 2).is_err());
    }

    #[test]
    fn sampling_frequencies_match_probs() {
        let probs = [0.268941, 0.231059, 0.231059, 0.268941];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 1_000_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[sample_category(&probs, rng.random::<f64>()).unwrap()] += 1;
        }
        for (c, p) in counts.iter().zip(probs) {
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!((*c as f64 / n as f64 - p).abs() < 3.0 * se, "{c} vs {p}");
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_item() -> impl Strategy<Value = ItemParams> {
            (
                0usize..3,
                0.05f64..3.0,
                -4.0f64..4.0,
                prop::collection::vec(0.01f64..3.0, 1..5),
            )
                .prop_map(|(dim, a, d1, gaps)| {
                    let mut d = vec![d1];
                    for g in gaps {
                        let last = *d.last().unwrap();
                        d.push(last - g);
                    }
                    ItemParams::simple(3, dim, a, d).unwrap()
                })
        }

        fn arb_theta() -> impl Strategy<Value = Vec<f64>> {
            prop::collection::vec(-8.0f64..8.0, 3)
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(10_000))]

            #[test]
            fn probabilities_normalize(it in arb_item(), theta in arb_theta()) {
                let p = it.category_probs(&theta).unwrap();
                prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for k in 0..it.n_categories() {
                    prop_assert!(
                        it.boundary_prob(&theta, k).unwrap() >= it.boundary_prob(&theta, k + 1).unwrap()
                    );
                }
            }
        }

        proptest! {
            #[test]
            fn trait_monotonicity(it in arb_item(), theta in arb_theta(), step in 0.01f64..2.0) {
                let mut up = theta.clone();
                up[it.loading_dim] += step;
                let mut side = theta.clone();
                let other = (it.loading_dim + 1) % 3;
                side[other] += step;
                for k in 1..it.n_categories() {
                    let base = it.boundary_prob(&theta, k).unwrap();
                    let b_up = it.boundary_prob(&up, k).unwrap();
                    // Strict increase unless the logistic is saturated.
                    if base < 1.0 - 1e-12 {
                        prop_assert!(b_up > base);
                    }
                    prop_assert_eq!(it.boundary_prob(&side, k).unwrap(), base);
                }
            }
        }
    }
}
