//! Stage orchestration: generate, fit, evaluate, report.
//!
//! Work units are `(condition, replication)` pairs. Each unit owns the
//! random stream returned by [`derive_stream`] and writes only its own files,
//! so units run on a bounded rayon pool and outputs are identical for any
//! thread count. Aggregation happens after all units have joined.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::config::RunConfig;
use crate::design::{
    draw_abilities, draw_item_parameters, expand_conditions, simulate_dataset, Condition, ResponseMatrix,
    SimulationDesign,
};
use crate::error::{Error, Result};
use crate::estimator::{fit, EmConfig, FitResult};
use crate::grm::TestForm;
use crate::metrics::{aggregate, evaluate_replication, RecoveryMetrics, ReplicationMetrics};
use crate::report::{render_metric_plot, write_results_csv, PlotSpec, ResultsTable};
use crate::rng::derive_stream;

pub const MANIFEST: &str = "manifest.json";
pub const TIMINGS: &str = "timings.json";
pub const METRICS: &str = "metrics.json";
pub const RESULTS: &str = "results.csv";
pub const BIAS_SVG: &str = "bias.svg";
pub const RMSE_SVG: &str = "rmse.svg";

/// Truth and simulated responses of one replication.
#[derive(Debug, Clone)]
pub struct Replication {
    pub truth: TestForm,
    pub responses: ResponseMatrix,
}

/// Draws the true form, abilities and responses for one work unit, in that
/// order, from the unit's private stream.
pub fn simulate_replication(
    design: &SimulationDesign,
    condition_index: usize,
    condition: &Condition,
    replication: usize,
) -> Result<Replication> {
    let mut rng = derive_stream(design.master_seed, condition_index, replication);
    let truth = draw_item_parameters(condition, design, &mut rng)?;
    let abilities = draw_abilities(condition, &mut rng)?;
    let responses = simulate_dataset(&truth, &abilities, &mut rng)?;
    Ok(Replication { truth, responses })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionMeta {
    pub test_length: usize,
    pub rho: f64,
    pub n_persons: usize,
}

impl From<&Condition> for ConditionMeta {
    fn from(c: &Condition) -> Self {
        ConditionMeta {
            test_length: c.test_length,
            rho: c.rho,
            n_persons: c.n_persons,
        }
    }
}

/// Generating parameters of one replication.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthSidecar {
    pub condition: ConditionMeta,
    pub replication: usize,
    /// Master seed; the stream id below selects this unit's substream.
    pub seed: u64,
    pub stream: u64,
    pub slopes: Vec<Vec<f64>>,
    pub intercepts: Vec<Vec<f64>>,
    pub allocation: Vec<usize>,
}

/// Estimated parameters of one replication.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimateSidecar {
    pub condition: ConditionMeta,
    pub replication: usize,
    pub slopes: Vec<Vec<f64>>,
    pub intercepts: Vec<Vec<f64>>,
    pub loglik: f64,
    pub loglik_trace: Vec<f64>,
    pub n_cycles: usize,
    pub converged: bool,
    pub config: EmConfig,
}

impl EstimateSidecar {
    fn new(condition: &Condition, replication: usize, fit: &FitResult, config: &EmConfig) -> Self {
        EstimateSidecar {
            condition: condition.into(),
            replication,
            slopes: fit.estimates.slope_rows(),
            intercepts: fit.estimates.intercept_rows(),
            loglik: fit.loglik,
            loglik_trace: fit.loglik_trace.clone(),
            n_cycles: fit.n_cycles,
            converged: fit.converged,
            config: config.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub condition_index: usize,
    pub condition: String,
    pub replication: usize,
    pub seed: u64,
    pub stream: u64,
    pub dataset: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub estimate: Option<PathBuf>,
    pub converged: Option<bool>,
    pub n_cycles: Option<usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Stages {
    pub generated: bool,
    pub fitted: bool,
    pub evaluated: bool,
    pub reported: bool,
}

/// Per-replication bookkeeping. Paths are relative to the output directory.
/// Wall-clock timings live in a separate `timings.json` so that the manifest
/// itself is reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub design: SimulationDesign,
    pub conditions: Vec<Condition>,
    pub stages: Stages,
    pub records: Vec<ReplicationRecord>,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn load(out_dir: &Path) -> Result<Self> {
        read_json(&out_dir.join(MANIFEST))
    }

    /// Every referenced file exists and every work unit appears once.
    pub fn check_complete(&self, out_dir: &Path) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for r in &self.records {
            if !seen.insert((r.condition_index, r.replication)) {
                return Err(Error::Usage(format!(
                    "manifest lists condition {} replication {} twice",
                    r.condition_index, r.replication
                )));
            }
            for p in [&r.dataset, &r.truth, &r.estimate].into_iter().flatten() {
                if !out_dir.join(p).exists() {
                    return Err(Error::Usage(format!("manifest references missing file {}", p.display())));
                }
            }
        }
        let expected: usize = self.conditions.iter().map(|c| c.n_reps).sum();
        if seen.len() != expected {
            return Err(Error::Usage(format!(
                "manifest has {} work units, design has {expected}",
                seen.len()
            )));
        }
        for p in &self.outputs {
            if !out_dir.join(p).exists() {
                return Err(Error::Usage(format!("manifest references missing file {}", p.display())));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Timings {
    pub generate_secs: Vec<f64>,
    pub fit_secs: Vec<f64>,
}

/// Aggregated metrics of every condition, as written by `evaluate`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionMetrics {
    pub condition: ConditionMeta,
    pub n_failed: usize,
    pub metrics: RecoveryMetrics,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn refuse_overwrite(path: &Path, force: bool) -> Result<()> {
    if !force && path.exists() {
        return Err(Error::Usage(format!(
            "{} already exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Resource(format!("cannot start worker pool: {e}")))
}

fn rep_file(kind: &str, condition: &Condition, replication: usize, ext: &str) -> PathBuf {
    PathBuf::from(kind)
        .join(condition.label())
        .join(format!("{:03}.{ext}", replication + 1))
}

fn stream_id(condition_index: usize, replication: usize) -> u64 {
    ((condition_index as u64) << 32) | replication as u64
}

fn units(conditions: &[Condition]) -> Vec<(usize, usize)> {
    conditions
        .iter()
        .enumerate()
        .flat_map(|(c, cond)| (0..cond.n_reps).map(move |r| (c, r)))
        .collect()
}

/// Simulates every work unit and writes `datasets/`, `truth/` and a fresh
/// manifest.
pub fn generate(cfg: &RunConfig) -> Result<RunManifest> {
    let out = &cfg.out_dir;
    refuse_overwrite(&out.join(MANIFEST), cfg.force)?;
    refuse_overwrite(&out.join("datasets"), cfg.force)?;
    let conditions = expand_conditions(&cfg.design)?;
    for c in &conditions {
        create_dir(&out.join("datasets").join(c.label()))?;
        create_dir(&out.join("truth").join(c.label()))?;
    }
    let design = &cfg.design;
    let results: Vec<Result<(ReplicationRecord, f64)>> = pool(cfg.threads)?.install(|| {
        units(&conditions)
            .into_par_iter()
            .map(|(ci, r)| {
                let started = Instant::now();
                let cond = &conditions[ci];
                let rep = simulate_replication(design, ci, cond, r)?;
                let dataset = rep_file("datasets", cond, r, "csv");
                let truth = rep_file("truth", cond, r, "json");
                rep.responses.write_csv(&out.join(&dataset))?;
                write_json(
                    &out.join(&truth),
                    &TruthSidecar {
                        condition: cond.into(),
                        replication: r,
                        seed: design.master_seed,
                        stream: stream_id(ci, r),
                        slopes: rep.truth.slope_rows(),
                        intercepts: rep.truth.intercept_rows(),
                        allocation: cond.allocation.clone(),
                    },
                )?;
                Ok((
                    ReplicationRecord {
                        condition_index: ci,
                        condition: cond.label(),
                        replication: r,
                        seed: design.master_seed,
                        stream: stream_id(ci, r),
                        dataset: Some(dataset),
                        truth: Some(truth),
                        estimate: None,
                        converged: None,
                        n_cycles: None,
                        error: None,
                    },
                    started.elapsed().as_secs_f64(),
                ))
            })
            .collect()
    });
    let mut records = Vec::with_capacity(results.len());
    let mut timings = Timings::default();
    for r in results {
        let (rec, secs) = r?;
        records.push(rec);
        timings.generate_secs.push(secs);
    }
    let manifest = RunManifest {
        design: cfg.design.clone(),
        conditions,
        stages: Stages {
            generated: true,
            ..Stages::default()
        },
        records,
        outputs: Vec::new(),
    };
    write_json(&out.join(MANIFEST), &manifest)?;
    write_json(&out.join(TIMINGS), &timings)?;
    Ok(manifest)
}

fn require(ok: bool, stage: &str, before: &str) -> Result<()> {
    if !ok {
        return Err(Error::Usage(format!("`{stage}` needs `{before}` to have run first")));
    }
    Ok(())
}

fn load_manifest_for(out: &Path, stage: &str) -> Result<RunManifest> {
    if !out.join(MANIFEST).exists() {
        return Err(Error::Usage(format!(
            "no manifest in {}; run `generate` before `{stage}`",
            out.display()
        )));
    }
    RunManifest::load(out)
}

/// Estimates path, convergence flag and cycle count of one written fit.
type FitWritten = (PathBuf, bool, usize);

/// Fits every generated dataset. A failed fit is recorded against its work
/// unit and does not stop the others.
pub fn fit_all(cfg: &RunConfig) -> Result<RunManifest> {
    let out = &cfg.out_dir;
    let mut manifest = load_manifest_for(out, "fit")?;
    require(manifest.stages.generated, "fit", "generate")?;
    refuse_overwrite(&out.join("estimates"), cfg.force)?;
    for c in &manifest.conditions {
        create_dir(&out.join("estimates").join(c.label()))?;
    }
    let conditions = manifest.conditions.clone();
    let n_categories = manifest.design.n_categories;
    let em = &cfg.em;
    let results: Vec<(Result<FitWritten>, f64)> = pool(cfg.threads)?.install(|| {
        manifest
            .records
            .par_iter()
            .map(|rec| {
                let started = Instant::now();
                let run = || -> Result<FitWritten> {
                    let cond = &conditions[rec.condition_index];
                    let dataset = rec
                        .dataset
                        .as_ref()
                        .ok_or_else(|| Error::Usage("work unit has no dataset".into()))?;
                    let responses = ResponseMatrix::read_csv(&out.join(dataset), n_categories)?;
                    let result = fit(&responses, &cond.allocation, em)?;
                    let path = rep_file("estimates", cond, rec.replication, "json");
                    write_json(&out.join(&path), &EstimateSidecar::new(cond, rec.replication, &result, em))?;
                    Ok((path, result.converged, result.n_cycles))
                };
                let res = run();
                (res, started.elapsed().as_secs_f64())
            })
            .collect()
    });
    let mut fit_secs = Vec::with_capacity(results.len());
    for (rec, (res, secs)) in manifest.records.iter_mut().zip(results) {
        fit_secs.push(secs);
        match res {
            Ok((path, converged, n_cycles)) => {
                rec.estimate = Some(path);
                rec.converged = Some(converged);
                rec.n_cycles = Some(n_cycles);
                rec.error = None;
            }
            Err(Error::Io { path, source }) => return Err(Error::Io { path, source }),
            Err(e) => {
                rec.estimate = None;
                rec.converged = None;
                rec.n_cycles = None;
                rec.error = Some(e.to_string());
            }
        }
    }
    manifest.stages.fitted = true;
    manifest.stages.evaluated = false;
    manifest.stages.reported = false;
    write_json(&out.join(MANIFEST), &manifest)?;
    let mut timings: Timings = read_json(&out.join(TIMINGS)).unwrap_or_default();
    timings.fit_secs = fit_secs;
    write_json(&out.join(TIMINGS), &timings)?;
    Ok(manifest)
}

fn truth_form(path: &Path) -> Result<TestForm> {
    let t: TruthSidecar = read_json(path)?;
    TestForm::from_rows(&t.slopes, &t.intercepts).map_err(|e| Error::format(path, e))
}

/// Scores each fitted replication and aggregates per condition into
/// `metrics.json`.
pub fn evaluate(cfg: &RunConfig) -> Result<Vec<ConditionMetrics>> {
    let out = &cfg.out_dir;
    let mut manifest = load_manifest_for(out, "evaluate")?;
    require(manifest.stages.fitted, "evaluate", "fit")?;
    refuse_overwrite(&out.join(METRICS), cfg.force)?;
    let mut per_condition: Vec<Vec<ReplicationMetrics>> = vec![Vec::new(); manifest.conditions.len()];
    let mut failed = vec![0; manifest.conditions.len()];
    for rec in &manifest.records {
        let (Some(truth), Some(estimate)) = (&rec.truth, &rec.estimate) else {
            failed[rec.condition_index] += 1;
            continue;
        };
        let truth = truth_form(&out.join(truth))?;
        let est_path = out.join(estimate);
        let est: EstimateSidecar = read_json(&est_path)?;
        let estimates = TestForm::from_rows(&est.slopes, &est.intercepts).map_err(|e| Error::format(&est_path, e))?;
        per_condition[rec.condition_index].push(evaluate_replication(&estimates, &truth, est.converged)?);
    }
    let summary = manifest
        .conditions
        .iter()
        .zip(per_condition)
        .zip(failed)
        .map(|((cond, reps), n_failed)| {
            Ok(ConditionMetrics {
                condition: cond.into(),
                n_failed,
                metrics: aggregate(&reps).map_err(|_| {
                    Error::Usage(format!("condition {} has no successfully fitted replication", cond.label()))
                })?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_json(&out.join(METRICS), &summary)?;
    manifest.stages.evaluated = true;
    manifest.stages.reported = false;
    write_json(&out.join(MANIFEST), &manifest)?;
    Ok(summary)
}

pub fn results_table(summary: &[ConditionMetrics]) -> ResultsTable {
    ResultsTable::from_metrics(
        summary
            .iter()
            .map(|c| ((c.condition.test_length, c.condition.rho), &c.metrics)),
    )
}

/// Writes `results.csv`, `bias.svg` and `rmse.svg` from `metrics.json`.
pub fn report(cfg: &RunConfig) -> Result<ResultsTable> {
    let out = &cfg.out_dir;
    let mut manifest = load_manifest_for(out, "report")?;
    require(manifest.stages.evaluated, "report", "evaluate")?;
    for name in [RESULTS, BIAS_SVG, RMSE_SVG] {
        refuse_overwrite(&out.join(name), cfg.force)?;
    }
    let summary: Vec<ConditionMetrics> = read_json(&out.join(METRICS))?;
    let table = results_table(&summary);
    write_results_csv(&table, &out.join(RESULTS))?;
    for (name, spec) in [(BIAS_SVG, PlotSpec::bias()), (RMSE_SVG, PlotSpec::rmse())] {
        let svg = render_metric_plot(&table, &spec)?;
        fs::write(out.join(name), svg).map_err(|e| Error::io(out.join(name), e))?;
    }
    manifest.stages.reported = true;
    manifest.outputs = [METRICS, RESULTS, BIAS_SVG, RMSE_SVG].iter().map(PathBuf::from).collect();
    write_json(&out.join(MANIFEST), &manifest)?;
    Ok(table)
}

/// All four stages in order.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunManifest> {
    create_dir(&cfg.out_dir)?;
    generate(cfg)?;
    fit_all(cfg)?;
    evaluate(cfg)?;
    report(cfg)?;
    RunManifest::load(&cfg.out_dir)
}

/// Outcome of one work unit run fully in memory.
#[derive(Debug, Clone)]
pub struct UnitOutcome {
    pub condition_index: usize,
    pub replication: usize,
    pub truth: TestForm,
    pub fit: std::result::Result<FitResult, String>,
}

/// Simulates and fits every work unit without touching the filesystem.
/// Produces the same fits as the staged pipeline.
pub fn simulate_and_fit(design: &SimulationDesign, em: &EmConfig, threads: usize) -> Result<(Vec<Condition>, Vec<UnitOutcome>)> {
    let conditions = expand_conditions(design)?;
    let outcomes = pool(threads)?.install(|| {
        units(&conditions)
            .into_par_iter()
            .map(|(ci, r)| {
                let rep = simulate_replication(design, ci, &conditions[ci], r)?;
                let fit = fit(&rep.responses, &conditions[ci].allocation, em).map_err(|e| e.to_string());
                Ok(UnitOutcome {
                    condition_index: ci,
                    replication: r,
                    truth: rep.truth,
                    fit,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok((conditions, outcomes))
}

/// Per-condition aggregation of in-memory outcomes, mirroring `evaluate`.
pub fn summarize(conditions: &[Condition], outcomes: &[UnitOutcome]) -> Result<Vec<ConditionMetrics>> {
    conditions
        .iter()
        .enumerate()
        .map(|(ci, cond)| {
            let mut reps = Vec::new();
            let mut n_failed = 0;
            for o in outcomes.iter().filter(|o| o.condition_index == ci) {
                match &o.fit {
                    Ok(f) => reps.push(evaluate_replication(&f.estimates, &o.truth, f.converged)?),
                    Err(_) => n_failed += 1,
                }
            }
            Ok(ConditionMetrics {
                condition: cond.into(),
                n_failed,
                metrics: aggregate(&reps)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(out: &Path) -> RunConfig {
        RunConfig {
            design: SimulationDesign {
                test_lengths: vec![20],
                rhos: vec![0.3],
                n_persons: 300,
                n_reps: 2,
                ..SimulationDesign::default()
            },
            em: EmConfig {
                points_per_dim: 11,
                ..EmConfig::default()
            },
            out_dir: out.to_path_buf(),
            threads: 2,
            force: false,
        }
    }

    #[test]
    fn stages_out_of_order_are_usage_errors() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        assert!(matches!(fit_all(&cfg), Err(Error::Usage(_))));
        assert!(matches!(evaluate(&cfg), Err(Error::Usage(_))));
        generate(&cfg).unwrap();
        assert!(matches!(evaluate(&cfg), Err(Error::Usage(_))));
        assert!(matches!(report(&cfg), Err(Error::Usage(_))));
    }

    #[test]
    fn rerun_refuses_without_force() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(dir.path());
        let manifest = run_pipeline(&cfg).unwrap();
        manifest.check_complete(dir.path()).unwrap();
        let before = fs::read(dir.path().join(RESULTS)).unwrap();
        assert!(matches!(generate(&cfg), Err(Error::Usage(_))));
        assert!(matches!(report(&cfg), Err(Error::Usage(_))));
        assert_eq!(fs::read(dir.path().join(RESULTS)).unwrap(), before);
        cfg.force = true;
        run_pipeline(&cfg).unwrap();
        assert_eq!(fs::read(dir.path().join(RESULTS)).unwrap(), before);
    }

    #[test]
    fn staged_and_in_memory_agree() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        run_pipeline(&cfg).unwrap();
        let on_disk: Vec<ConditionMetrics> = read_json(&dir.path().join(METRICS)).unwrap();
        let (conds, outcomes) = simulate_and_fit(&cfg.design, &cfg.em, 1).unwrap();
        let in_mem = summarize(&conds, &outcomes).unwrap();
        assert_eq!(on_disk[0].metrics, in_mem[0].metrics);
    }

    #[test]
    fn failed_fit_is_recorded_and_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(dir.path());
        cfg.design.n_persons = 3;
        generate(&cfg).unwrap();
        let manifest = fit_all(&cfg).unwrap();
        assert!(manifest.records.iter().all(|r| r.error.is_some() && r.estimate.is_none()));
        // Nothing to aggregate: evaluate reports it instead of writing garbage.
        assert!(matches!(evaluate(&cfg), Err(Error::Usage(_))));
    }
}
