//! Bias and RMSE per parameter family, per replication and aggregated.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grm::TestForm;

/// Slope families `a1..aD` and intercept families `b1..b(C-1)`.
///
/// Intercept families carry the `b` label used in reports even though they
/// are slope-intercept intercepts (`d`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamFamily {
    Slope(usize),
    Intercept(usize),
}

impl ParamFamily {
    /// Report order: all slope families, then all intercept families.
    pub fn all(n_dims: usize, n_categories: usize) -> Vec<ParamFamily> {
        (0..n_dims)
            .map(ParamFamily::Slope)
            .chain((0..n_categories - 1).map(ParamFamily::Intercept))
            .collect()
    }

    pub fn label(&self) -> String {
        match self {
            ParamFamily::Slope(d) => format!("a{}", d + 1),
            ParamFamily::Intercept(k) => format!("b{}", k + 1),
        }
    }

    pub fn parse(label: &str) -> Option<ParamFamily> {
        let (kind, idx) = label.split_at(1);
        let idx: usize = idx.parse().ok().filter(|&i| i >= 1)?;
        match kind {
            "a" => Some(ParamFamily::Slope(idx - 1)),
            "b" | "d" => Some(ParamFamily::Intercept(idx - 1)),
            _ => None,
        }
    }

    /// Member item indices of this family in `form`.
    pub fn members(&self, form: &TestForm) -> Vec<usize> {
        match *self {
            ParamFamily::Slope(d) => (0..form.n_items())
                .filter(|&j| form.items[j].loading_dim == d)
                .collect(),
            ParamFamily::Intercept(_) => (0..form.n_items()).collect(),
        }
    }

    fn values(&self, form: &TestForm, members: &[usize]) -> Vec<f64> {
        members
            .iter()
            .map(|&j| match *self {
                ParamFamily::Slope(d) => form.items[j].slopes[d],
                ParamFamily::Intercept(k) => form.items[j].intercepts[k],
            })
            .collect()
    }
}

impl fmt::Display for ParamFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

fn check_lengths(estimates: &[f64], truths: &[f64]) -> Result<()> {
    if estimates.len() != truths.len() {
        return Err(Error::arg(format!(
            "{} estimates vs {} true values",
            estimates.len(),
            truths.len()
        )));
    }
    if estimates.is_empty() {
        return Err(Error::arg("bias and RMSE need at least one value"));
    }
    Ok(())
}

/// Mean signed deviation, estimate minus truth.
pub fn bias(estimates: &[f64], truths: &[f64]) -> Result<f64> {
    check_lengths(estimates, truths)?;
    let sum: f64 = estimates.iter().zip(truths).map(|(e, t)| e - t).sum();
    Ok(sum / estimates.len() as f64)
}

/// Root mean squared deviation.
pub fn rmse(estimates: &[f64], truths: &[f64]) -> Result<f64> {
    check_lengths(estimates, truths)?;
    let sum: f64 = estimates.iter().zip(truths).map(|(e, t)| (e - t).powi(2)).sum();
    Ok((sum / estimates.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FamilyMetric {
    pub family: ParamFamily,
    pub n_params: usize,
    pub bias: f64,
    pub rmse: f64,
}

/// Recovery of one fitted replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationMetrics {
    pub families: Vec<FamilyMetric>,
    pub converged: bool,
}

/// Scores `estimates` against `truth`. Items are aligned by index; slope
/// families use each member's loading-dimension slope only.
pub fn evaluate_replication(estimates: &TestForm, truth: &TestForm, converged: bool) -> Result<ReplicationMetrics> {
    if estimates.n_items() != truth.n_items()
        || estimates.n_dims != truth.n_dims
        || estimates.n_categories != truth.n_categories
    {
        return Err(Error::arg("estimated and true forms differ in shape"));
    }
    if estimates.allocation() != truth.allocation() {
        return Err(Error::arg("estimated and true forms use different loading structures"));
    }
    let families = ParamFamily::all(truth.n_dims, truth.n_categories)
        .into_iter()
        .map(|family| {
            let members = family.members(truth);
            let est = family.values(estimates, &members);
            let tru = family.values(truth, &members);
            Ok(FamilyMetric {
                family,
                n_params: members.len(),
                bias: bias(&est, &tru)?,
                rmse: rmse(&est, &tru)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ReplicationMetrics { families, converged })
}

/// Rounds half away from zero to three decimals and clears negative zero.
pub fn round3(x: f64) -> f64 {
    let r = (x * 1000.0).round() / 1000.0;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilySummary {
    pub family: ParamFamily,
    /// Full-precision means across replications.
    pub mean_bias: f64,
    pub mean_rmse: f64,
}

impl FamilySummary {
    pub fn reported_bias(&self) -> f64 {
        round3(self.mean_bias)
    }

    pub fn reported_rmse(&self) -> f64 {
        round3(self.mean_rmse)
    }
}

/// Aggregated recovery for one condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryMetrics {
    pub families: Vec<FamilySummary>,
    pub n_replications: usize,
    pub n_nonconverged: usize,
    pub replications: Vec<ReplicationMetrics>,
}

impl RecoveryMetrics {
    pub fn family(&self, family: ParamFamily) -> Option<&FamilySummary> {
        self.families.iter().find(|f| f.family == family)
    }
}

/// Arithmetic means per family across replications. Summation runs in a
/// canonical order so the result is independent of input order.
pub fn aggregate(replications: &[ReplicationMetrics]) -> Result<RecoveryMetrics> {
    let first = replications
        .first()
        .ok_or_else(|| Error::arg("cannot aggregate zero replications"))?;
    let n = replications.len() as f64;
    let families = first
        .families
        .iter()
        .enumerate()
        .map(|(i, fm)| {
            let mut biases = Vec::with_capacity(replications.len());
            let mut rmses = Vec::with_capacity(replications.len());
            for rep in replications {
                let m = rep
                    .families
                    .get(i)
                    .filter(|m| m.family == fm.family)
                    .ok_or_else(|| Error::arg("replications report different families"))?;
                biases.push(m.bias);
                rmses.push(m.rmse);
            }
            biases.sort_by(f64::total_cmp);
            rmses.sort_by(f64::total_cmp);
            Ok(FamilySummary {
                family: fm.family,
                mean_bias: biases.iter().sum::<f64>() / n,
                mean_rmse: rmses.iter().sum::<f64>() / n,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RecoveryMetrics {
        families,
        n_replications: replications.len(),
        n_nonconverged: replications.iter().filter(|r| !r.converged).count(),
        replications: replications.to_vec(),
    })
}
