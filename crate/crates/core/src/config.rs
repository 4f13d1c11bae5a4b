//! Run configuration loaded from TOML.
//!
//! Recognized keys (all optional; defaults reproduce the full study design):
//!
//! ```toml
//! seed = 1234
//! test_lengths = [20, 40]
//! rhos = [0.3, 0.7]
//! n_persons = 2000
//! n_reps = 100
//! n_categories = 4
//! slope_ranges = [[0.44, 0.75], [0.58, 0.98], [0.75, 1.33]]
//! intercept_range = [0.67, 1.34]
//! tolerance = 1e-4
//! max_cycles = 500
//! prior_correlation = 0.0
//! factorize = true
//! threads = 4
//! out_dir = "out"
//!
//! [quadrature]
//! points_per_dim = 15
//! bounds = [-6.0, 6.0]
//!
//! [allocations]
//! 30 = [10, 10, 10]
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::design::{allocate_items, check_rho, Range, SimulationDesign};
use crate::error::{Error, Result};
use crate::estimator::EmConfig;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub design: SimulationDesign,
    pub em: EmConfig,
    pub out_dir: PathBuf,
    pub threads: usize,
    /// Overwrite existing stage outputs.
    pub force: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            design: SimulationDesign::default(),
            em: EmConfig::default(),
            out_dir: PathBuf::from("out"),
            threads: std::thread::available_parallelism().map_or(1, |n| n.get()),
            force: false,
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct QuadratureFile {
    points_per_dim: Option<usize>,
    bounds: Option<Range>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    #[serde(alias = "master_seed")]
    seed: Option<u64>,
    test_lengths: Option<Vec<usize>>,
    rhos: Option<Vec<f64>>,
    n_persons: Option<usize>,
    n_reps: Option<usize>,
    n_categories: Option<usize>,
    slope_ranges: Option<Vec<Range>>,
    intercept_range: Option<Range>,
    allocations: Option<BTreeMap<String, Vec<usize>>>,
    quadrature: Option<QuadratureFile>,
    tolerance: Option<f64>,
    max_cycles: Option<usize>,
    prior_correlation: Option<f64>,
    factorize: Option<bool>,
    threads: Option<usize>,
    out_dir: Option<PathBuf>,
}

fn config_err(key: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        reason: reason.into(),
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let file: ConfigFile = toml::from_str(text).map_err(|e| {
        let msg = e.message().to_string();
        let key = msg
            .split('`')
            .nth(1)
            .filter(|_| msg.starts_with("unknown field"))
            .unwrap_or("<file>")
            .to_string();
        Error::Config { key, reason: msg }
    })?;

    let mut cfg = RunConfig::default();
    let d = &mut cfg.design;
    if let Some(v) = file.seed {
        d.master_seed = v;
    }
    if let Some(v) = file.test_lengths {
        d.test_lengths = v;
    }
    if let Some(v) = file.rhos {
        d.rhos = v;
    }
    if let Some(v) = file.n_persons {
        d.n_persons = v;
    }
    if let Some(v) = file.n_reps {
        d.n_reps = v;
    }
    if let Some(v) = file.n_categories {
        d.n_categories = v;
    }
    if let Some(v) = file.slope_ranges {
        d.slope_ranges = v;
    }
    if let Some(v) = file.intercept_range {
        d.intercept_range = v;
    }
    if let Some(map) = file.allocations {
        for (k, v) in map {
            let tl: usize = k
                .parse()
                .map_err(|_| config_err("allocations", format!("`{k}` is not a test length")))?;
            d.allocations.insert(tl, v);
        }
    }
    let em = &mut cfg.em;
    if let Some(q) = file.quadrature {
        if let Some(v) = q.points_per_dim {
            em.points_per_dim = v;
        }
        if let Some(v) = q.bounds {
            em.bounds = v;
        }
    }
    if let Some(v) = file.tolerance {
        em.tol = v;
    }
    if let Some(v) = file.max_cycles {
        em.max_cycles = v;
    }
    if let Some(v) = file.prior_correlation {
        em.prior_correlation = v;
    }
    if let Some(v) = file.factorize {
        em.factorize = v;
    }
    if let Some(v) = file.threads {
        cfg.threads = v;
    }
    if let Some(v) = file.out_dir {
        cfg.out_dir = v;
    }
    validate(&cfg)?;
    Ok(cfg)
}

/// Checks every key, reporting the first offending one.
pub fn validate(cfg: &RunConfig) -> Result<()> {
    let d = &cfg.design;
    let n_dims = d.slope_ranges.len();
    if n_dims == 0 {
        return Err(config_err("slope_ranges", "at least one dimension is required"));
    }
    for &(lo, hi) in &d.slope_ranges {
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(config_err("slope_ranges", format!("range [{lo}, {hi}] must satisfy 0 < low <= high")));
        }
    }
    let (lo, hi) = d.intercept_range;
    if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
        return Err(config_err(
            "intercept_range",
            format!("range [{lo}, {hi}] must satisfy 0 < low <= high so intercepts stay ordered"),
        ));
    }
    if d.test_lengths.is_empty() {
        return Err(config_err("test_lengths", "at least one test length is required"));
    }
    for &tl in &d.test_lengths {
        allocate_items(tl, n_dims, d.allocations.get(&tl).map(Vec::as_slice)).map_err(|e| {
            config_err(
                "test_lengths",
                format!("{e}; add `{tl} = [..]` under [allocations] to use this length"),
            )
        })?;
    }
    if d.rhos.is_empty() {
        return Err(config_err("rhos", "at least one correlation level is required"));
    }
    for &rho in &d.rhos {
        check_rho(rho, n_dims).map_err(|e| config_err("rhos", e.to_string()))?;
    }
    if d.n_persons == 0 {
        return Err(config_err("n_persons", "must be at least 1"));
    }
    if d.n_reps == 0 {
        return Err(config_err("n_reps", "must be at least 1"));
    }
    if !(2..=256).contains(&d.n_categories) {
        return Err(config_err("n_categories", "must lie in 2..=256"));
    }
    let em = &cfg.em;
    if em.points_per_dim < 3 {
        return Err(config_err("quadrature.points_per_dim", "must be at least 3"));
    }
    if !(em.bounds.0 < em.bounds.1 && em.bounds.0.is_finite() && em.bounds.1.is_finite()) {
        return Err(config_err("quadrature.bounds", "must be finite with low < high"));
    }
    if em.tol.is_nan() || em.tol <= 0.0 {
        return Err(config_err("tolerance", "must be positive"));
    }
    if em.max_cycles == 0 {
        return Err(config_err("max_cycles", "must be at least 1"));
    }
    check_rho(em.prior_correlation, n_dims).map_err(|e| config_err("prior_correlation", e.to_string()))?;
    if cfg.threads == 0 {
        return Err(config_err("threads", "must be at least 1"));
    }
    Ok(())
}
