//! Simulation design, true-parameter generation, correlated abilities and
//! response simulation.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grm::{category_probs_from_predictor, sample_unchecked, ItemParams, TestForm};

/// Closed uniform range `(low, high)`.
pub type Range = (f64, f64);

/// One cell of the simulation design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub test_length: usize,
    pub rho: f64,
    pub n_persons: usize,
    pub n_reps: usize,
    /// Items per dimension, summing to `test_length`.
    pub allocation: Vec<usize>,
}

impl Condition {
    pub fn n_dims(&self) -> usize {
        self.allocation.len()
    }

    /// Directory-friendly label such as `tl20_rho0.3`.
    pub fn label(&self) -> String {
        format!("tl{}_rho{}", self.test_length, self.rho)
    }

    /// Loading dimension of each item (items are assigned to dimensions in
    /// contiguous blocks).
    pub fn loading_dims(&self) -> Vec<usize> {
        loading_dims(&self.allocation)
    }

    pub fn validate(&self) -> Result<()> {
        if self.allocation.iter().sum::<usize>() != self.test_length {
            return Err(Error::arg(format!(
                "allocation {:?} does not sum to test length {}",
                self.allocation, self.test_length
            )));
        }
        if self.allocation.contains(&0) {
            return Err(Error::arg("every dimension needs at least one item"));
        }
        check_rho(self.rho, self.n_dims())?;
        if self.n_persons == 0 {
            return Err(Error::arg("n_persons must be at least 1"));
        }
        Ok(())
    }
}

pub fn loading_dims(allocation: &[usize]) -> Vec<usize> {
    allocation
        .iter()
        .enumerate()
        .flat_map(|(dim, &count)| std::iter::repeat_n(dim, count))
        .collect()
}

/// Equicorrelation is positive definite iff `-1/(D-1) < rho < 1`.
pub fn check_rho(rho: f64, n_dims: usize) -> Result<()> {
    let lower = if n_dims > 1 {
        -1.0 / (n_dims as f64 - 1.0)
    } else {
        f64::NEG_INFINITY
    };
    if !rho.is_finite() || (n_dims > 1 && (rho <= lower || rho >= 1.0)) {
        return Err(Error::arg(format!(
            "correlation {rho} is outside ({lower}, 1); the equicorrelation matrix is not positive definite"
        )));
    }
    Ok(())
}

/// Factor levels and generating distributions of the study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationDesign {
    pub test_lengths: Vec<usize>,
    pub rhos: Vec<f64>,
    pub n_persons: usize,
    pub n_reps: usize,
    pub master_seed: u64,
    pub n_categories: usize,
    /// Per-dimension slope ranges; their count fixes the number of dimensions.
    pub slope_ranges: Vec<Range>,
    /// Range of the first intercept and of each successive decrement.
    pub intercept_range: Range,
    /// Explicit allocations for test lengths without a built-in split.
    pub allocations: BTreeMap<usize, Vec<usize>>,
}

impl Default for SimulationDesign {
    fn default() -> Self {
        SimulationDesign {
            test_lengths: vec![20, 40],
            rhos: vec![0.3, 0.7],
            n_persons: 2000,
            n_reps: 100,
            master_seed: 1234,
            n_categories: 4,
            slope_ranges: vec![(0.44, 0.75), (0.58, 0.98), (0.75, 1.33)],
            intercept_range: (0.67, 1.34),
            allocations: BTreeMap::new(),
        }
    }
}

impl SimulationDesign {
    pub fn n_dims(&self) -> usize {
        self.slope_ranges.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.slope_ranges.is_empty() {
            return Err(Error::arg("at least one slope range is required"));
        }
        for &(lo, hi) in &self.slope_ranges {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(Error::arg(format!(
                    "slope range ({lo}, {hi}) must satisfy 0 < low <= high"
                )));
            }
        }
        let (lo, hi) = self.intercept_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::arg(format!(
                "intercept range ({lo}, {hi}) must satisfy 0 < low <= high"
            )));
        }
        if self.n_categories < 2 {
            return Err(Error::arg("at least two response categories are required"));
        }
        if self.n_categories > u8::MAX as usize + 1 {
            return Err(Error::arg("too many response categories"));
        }
        if self.n_reps == 0 {
            return Err(Error::arg("n_reps must be at least 1"));
        }
        Ok(())
    }
}

/// Cartesian product of design factors, test length major and correlation
/// minor.
pub fn expand_conditions(design: &SimulationDesign) -> Result<Vec<Condition>> {
    design.validate()?;
    if design.test_lengths.is_empty() || design.rhos.is_empty() {
        return Err(Error::arg("every design factor needs at least one level"));
    }
    let mut out = Vec::with_capacity(design.test_lengths.len() * design.rhos.len());
    for &test_length in &design.test_lengths {
        let allocation = allocate_items(
            test_length,
            design.n_dims(),
            design.allocations.get(&test_length).map(Vec::as_slice),
        )?;
        for &rho in &design.rhos {
            let condition = Condition {
                test_length,
                rho,
                n_persons: design.n_persons,
                n_reps: design.n_reps,
                allocation: allocation.clone(),
            };
            condition.validate()?;
            out.push(condition);
        }
    }
    Ok(out)
}

/// Items per dimension. Three-dimensional forms of 20 and 40 items have
/// built-in splits; anything else needs an explicit allocation.
pub fn allocate_items(test_length: usize, n_dims: usize, custom: Option<&[usize]>) -> Result<Vec<usize>> {
    if let Some(custom) = custom {
        if custom.len() != n_dims {
            return Err(Error::arg(format!(
                "allocation {custom:?} has {} entries for {n_dims} dimensions",
                custom.len()
            )));
        }
        if custom.iter().sum::<usize>() != test_length {
            return Err(Error::arg(format!(
                "allocation {custom:?} does not sum to test length {test_length}"
            )));
        }
        if custom.contains(&0) {
            return Err(Error::arg("every dimension needs at least one item"));
        }
        return Ok(custom.to_vec());
    }
    match (n_dims, test_length) {
        (3, 20) => Ok(vec![7, 7, 6]),
        (3, 40) => Ok(vec![13, 13, 14]),
        _ => Err(Error::arg(format!(
            "no built-in allocation for {test_length} items on {n_dims} dimensions; \
             supply an explicit per-dimension allocation"
        ))),
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): Range) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Draws a fresh simple-structure form.
///
/// Draw order: slopes dimension by dimension (items in order), then the
/// first intercept of every item, then each successive decrement for every
/// item.
pub fn draw_item_parameters<R: Rng + ?Sized>(
    condition: &Condition,
    design: &SimulationDesign,
    rng: &mut R,
) -> Result<TestForm> {
    let n_dims = design.n_dims();
    if condition.n_dims() != n_dims {
        return Err(Error::arg("condition and design disagree on dimensionality"));
    }
    let k = condition.test_length;
    let dims = condition.loading_dims();

    let mut slopes = Vec::with_capacity(k);
    for (dim, &count) in condition.allocation.iter().enumerate() {
        for _ in 0..count {
            slopes.push(uniform(rng, design.slope_ranges[dim]));
        }
    }

    let n_thresholds = design.n_categories - 1;
    let mut intercepts = vec![Vec::with_capacity(n_thresholds); k];
    for row in intercepts.iter_mut() {
        row.push(uniform(rng, design.intercept_range));
    }
    for _ in 1..n_thresholds {
        for row in intercepts.iter_mut() {
            let last = *row.last().expect("first intercept drawn");
            row.push(last - uniform(rng, design.intercept_range));
        }
    }

    let items = intercepts
        .into_iter()
        .zip(slopes)
        .zip(dims)
        .map(|((mut d, a), dim)| {
            d.sort_by(|x, y| y.total_cmp(x));
            ItemParams::simple(n_dims, dim, a, d)
        })
        .collect::<Result<Vec<_>>>()?;
    TestForm::new(items, n_dims, design.n_categories)
}

/// Lower Cholesky factor of the `D x D` equicorrelation matrix.
pub fn equicorrelation_cholesky(rho: f64, n_dims: usize) -> Result<DMatrix<f64>> {
    check_rho(rho, n_dims)?;
    let sigma = equicorrelation(rho, n_dims);
    sigma
        .cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::arg(format!("equicorrelation matrix with rho {rho} is not positive definite")))
}

pub fn equicorrelation(rho: f64, n_dims: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n_dims, n_dims, |i, j| if i == j { 1.0 } else { rho })
}

/// `N x D` latent trait draws, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AbilityMatrix {
    pub n_persons: usize,
    pub n_dims: usize,
    pub values: Vec<f64>,
    pub sigma: DMatrix<f64>,
}

impl AbilityMatrix {
    pub fn row(&self, n: usize) -> &[f64] {
        &self.values[n * self.n_dims..(n + 1) * self.n_dims]
    }

    pub fn column(&self, d: usize) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().skip(d).step_by(self.n_dims).copied()
    }
}

/// Abilities `Z L^T` with `Z` standard normal, drawn person-major. Normal
/// variates come from `rand_distr::StandardNormal` (ziggurat).
pub fn draw_abilities<R: Rng + ?Sized>(condition: &Condition, rng: &mut R) -> Result<AbilityMatrix> {
    let n_dims = condition.n_dims();
    let l = equicorrelation_cholesky(condition.rho, n_dims)?;
    let mut values = vec![0.0; condition.n_persons * n_dims];
    let mut z = vec![0.0; n_dims];
    for row in values.chunks_exact_mut(n_dims) {
        for zi in z.iter_mut() {
            *zi = rng.sample(StandardNormal);
        }
        for (i, out) in row.iter_mut().enumerate() {
            *out = (0..=i).map(|j| l[(i, j)] * z[j]).sum();
        }
    }
    Ok(AbilityMatrix {
        n_persons: condition.n_persons,
        n_dims,
        values,
        sigma: equicorrelation(condition.rho, n_dims),
    })
}

/// `N x K` polytomous responses, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResponseMatrix {
    pub n_persons: usize,
    pub n_items: usize,
    pub n_categories: usize,
    pub values: Vec<u8>,
}

impl ResponseMatrix {
    pub fn new(n_persons: usize, n_items: usize, n_categories: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != n_persons * n_items {
            return Err(Error::arg(format!(
                "expected {} responses, got {}",
                n_persons * n_items,
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|&&v| v as usize >= n_categories) {
            return Err(Error::arg(format!(
                "response {bad} outside 0..{n_categories}"
            )));
        }
        Ok(ResponseMatrix {
            n_persons,
            n_items,
            n_categories,
            values,
        })
    }

    pub fn row(&self, n: usize) -> &[u8] {
        &self.values[n * self.n_items..(n + 1) * self.n_items]
    }

    pub fn get(&self, n: usize, j: usize) -> u8 {
        self.values[n * self.n_items + j]
    }

    /// Observed count of each category for item `j`.
    pub fn category_counts(&self, j: usize) -> Vec<usize> {
        let mut counts = vec![0; self.n_categories];
        for n in 0..self.n_persons {
            counts[self.get(n, j) as usize] += 1;
        }
        counts
    }

    /// Keeps only the given item columns, in the given order.
    pub fn select_items(&self, items: &[usize]) -> ResponseMatrix {
        let mut values = Vec::with_capacity(self.n_persons * items.len());
        for n in 0..self.n_persons {
            let row = self.row(n);
            values.extend(items.iter().map(|&j| row[j]));
        }
        ResponseMatrix {
            n_persons: self.n_persons,
            n_items: items.len(),
            n_categories: self.n_categories,
            values,
        }
    }

    /// CSV with header `item_1,...,item_K`, one row per person.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let header: Vec<String> = (1..=self.n_items).map(|j| format!("item_{j}")).collect();
        let mut buf = header.join(",");
        buf.push('\n');
        for n in 0..self.n_persons {
            for (j, v) in self.row(n).iter().enumerate() {
                if j > 0 {
                    buf.push(',');
                }
                if *v < 10 {
                    buf.push(char::from(b'0' + *v));
                } else {
                    buf.push_str(&v.to_string());
                }
            }
            buf.push('\n');
        }
        w.write_all(buf.as_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path, n_categories: usize) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path).map_err(|e| Error::format(path, e))?;
        let header = reader.headers().map_err(|e| Error::format(path, e))?.clone();
        let n_items = header.len();
        for (j, name) in header.iter().enumerate() {
            if name != format!("item_{}", j + 1) {
                return Err(Error::format(path, format!("unexpected column `{name}`")));
            }
        }
        let mut values = Vec::new();
        let mut n_persons = 0;
        for record in reader.records() {
            let record = record.map_err(|e| Error::format(path, e))?;
            for field in record.iter() {
                let v: u8 = field
                    .parse()
                    .map_err(|_| Error::format(path, format!("non-integer response `{field}`")))?;
                values.push(v);
            }
            n_persons += 1;
        }
        ResponseMatrix::new(n_persons, n_items, n_categories, values)
            .map_err(|e| Error::format(path, e))
    }
}

/// Samples one response per (person, item) cell, person-major, one uniform
/// draw per cell.
pub fn simulate_dataset<R: Rng + ?Sized>(
    form: &TestForm,
    abilities: &AbilityMatrix,
    rng: &mut R,
) -> Result<ResponseMatrix> {
    if abilities.n_dims != form.n_dims {
        return Err(Error::arg(format!(
            "abilities have {} dimensions, form has {}",
            abilities.n_dims, form.n_dims
        )));
    }
    let k = form.n_items();
    let mut probs = vec![0.0; form.n_categories];
    let mut values = Vec::with_capacity(abilities.n_persons * k);
    for n in 0..abilities.n_persons {
        let theta = abilities.row(n);
        for item in &form.items {
            category_probs_from_predictor(item.linear_predictor(theta), &item.intercepts, &mut probs);
            let u: f64 = rng.random();
            values.push(sample_unchecked(&probs, u) as u8);
        }
    }
    ResponseMatrix::new(abilities.n_persons, k, form.n_categories, values)
}
