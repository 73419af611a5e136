//! Multi-seed experiment suites: every variant is trained once per seed,
//! evaluated on the test tasks, summarized as mean ± std and Welch-tested
//! against a baseline variant.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{self, ModelEmbedder};
use crate::exec::Execution;
use crate::metrics::{self, StsPair, TTest, POSITIVE_GOLD_THRESHOLD};
use crate::synth::GroundedCorpus;
use crate::train::{self, Objective, TrainConfig, TrainingData};

pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

/// λ values swept by the trade-off study.
pub const LAMBDA_GRID: [f64; 5] = [0.001, 0.01, 0.05, 0.1, 0.5];

/// Per-source training-set caps swept by the data-scale study; `None` is
/// the full corpus.
pub const SAMPLE_LIMIT_GRID: [Option<usize>; 5] =
    [Some(100), Some(500), Some(1000), Some(5000), None];

pub const SIMCSE: &str = "simcse";
pub const MCSE: &str = "mcse";
pub const MCSE_SHUFFLED: &str = "mcse-shuffled";

/// A named training configuration. The seed is replaced per run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub config: TrainConfig,
}

impl Variant {
    pub fn new(name: impl Into<String>, config: TrainConfig) -> Self {
        Variant {
            name: name.into(),
            config,
        }
    }
}

/// SimCSE, MCSE and MCSE with shuffled image pairing, all from `base`.
pub fn standard_variants(base: &TrainConfig) -> Vec<Variant> {
    vec![
        Variant::new(
            SIMCSE,
            TrainConfig {
                objective: Objective::Simcse,
                ..base.clone()
            },
        ),
        Variant::new(
            MCSE,
            TrainConfig {
                objective: Objective::Mcse,
                shuffle_images: false,
                ..base.clone()
            },
        ),
        Variant::new(
            MCSE_SHUFFLED,
            TrainConfig {
                objective: Objective::Mcse,
                shuffle_images: true,
                ..base.clone()
            },
        ),
    ]
}

/// SimCSE plus one MCSE variant per λ in [`LAMBDA_GRID`].
pub fn lambda_grid_variants(base: &TrainConfig) -> Vec<Variant> {
    let mut out = vec![Variant::new(
        SIMCSE,
        TrainConfig {
            objective: Objective::Simcse,
            ..base.clone()
        },
    )];
    out.extend(LAMBDA_GRID.iter().map(|&lambda| {
        Variant::new(
            format!("mcse-lambda-{lambda}"),
            TrainConfig {
                objective: Objective::Mcse,
                lambda,
                ..base.clone()
            },
        )
    }));
    out
}

/// Where each run's training data comes from.
#[derive(Clone, Copy, Debug)]
pub enum DataSource<'a> {
    /// An in-memory synthetic corpus; captions are sampled with the run seed.
    Corpus(&'a GroundedCorpus),
    /// The files named in each run's config.
    Files,
}

impl DataSource<'_> {
    pub fn load(&self, cfg: &TrainConfig) -> Result<TrainingData> {
        match self {
            DataSource::Corpus(c) => TrainingData::from_corpus(c, cfg.seed),
            DataSource::Files => TrainingData::load(cfg),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    /// Average test Spearman ×100 of the best checkpoint.
    pub spearman: f64,
    pub per_task: BTreeMap<String, f64>,
    pub alignment: Option<f64>,
    pub uniformity: Option<f64>,
    pub best_step: usize,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub variant: String,
    pub seed: u64,
    /// `Err` holds the failure message.
    pub outcome: std::result::Result<RunMetrics, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub name: String,
    pub runs: usize,
    pub failed: usize,
    pub mean_spearman: f64,
    pub std_spearman: f64,
    pub mean_alignment: Option<f64>,
    pub mean_uniformity: Option<f64>,
    /// Difference of means against the baseline; `None` for the baseline.
    pub delta_vs_baseline: Option<f64>,
    pub test_vs_baseline: Option<TTest>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub baseline: String,
    pub seeds: Vec<u64>,
    pub summaries: Vec<VariantSummary>,
    pub runs: Vec<RunRecord>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation; zero for fewer than two values.
fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| v.to_string())
}

impl SuiteReport {
    pub fn summary(&self, name: &str) -> Option<&VariantSummary> {
        self.summaries.iter().find(|s| s.name == name)
    }

    pub fn scores(&self, name: &str) -> Vec<f64> {
        self.runs
            .iter()
            .filter(|r| r.variant == name)
            .filter_map(|r| r.outcome.as_ref().ok().map(|m| m.spearman))
            .collect()
    }

    pub fn failures(&self) -> Vec<&RunRecord> {
        self.runs.iter().filter(|r| r.outcome.is_err()).collect()
    }

    /// One row per variant.
    pub fn summary_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "variant",
            "runs",
            "failed",
            "mean_spearman",
            "std_spearman",
            "mean_alignment",
            "mean_uniformity",
            "delta_vs_baseline",
            "t",
            "dof",
            "p_value",
            "significant",
        ])?;
        for s in &self.summaries {
            let t = s.test_vs_baseline;
            w.write_record([
                s.name.clone(),
                s.runs.to_string(),
                s.failed.to_string(),
                s.mean_spearman.to_string(),
                s.std_spearman.to_string(),
                fmt_opt(s.mean_alignment),
                fmt_opt(s.mean_uniformity),
                fmt_opt(s.delta_vs_baseline),
                fmt_opt(t.map(|t| t.t)),
                fmt_opt(t.map(|t| t.dof)),
                fmt_opt(t.map(|t| t.p_value)),
                t.map_or_else(String::new, |t| t.significant.to_string()),
            ])?;
        }
        metrics::csv_string(w)
    }

    /// One row per (variant, seed); failed runs carry `status = failed`.
    pub fn runs_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "variant",
            "seed",
            "status",
            "spearman",
            "alignment",
            "uniformity",
            "best_step",
            "steps",
            "error",
        ])?;
        for r in &self.runs {
            match &r.outcome {
                Ok(m) => w.write_record([
                    r.variant.clone(),
                    r.seed.to_string(),
                    "ok".into(),
                    m.spearman.to_string(),
                    fmt_opt(m.alignment),
                    fmt_opt(m.uniformity),
                    m.best_step.to_string(),
                    m.steps.to_string(),
                    String::new(),
                ])?,
                Err(e) => w.write_record([
                    r.variant.clone(),
                    r.seed.to_string(),
                    "failed".into(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    e.clone(),
                ])?,
            }
        }
        metrics::csv_string(w)
    }

    /// Human-readable table with mean ± std per variant.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<24} {:>16} {:>9} {:>9} {:>9} {:>8}\n",
            "variant", "spearman", "align", "uniform", "p", "runs"
        );
        for s in &self.summaries {
            let p = s.test_vs_baseline.map_or_else(
                || "-".to_string(),
                |t| format!("{:.4}{}", t.p_value, if t.significant { "*" } else { "" }),
            );
            let runs = if s.failed > 0 {
                format!("{}/{}!", s.runs - s.failed, s.runs)
            } else {
                s.runs.to_string()
            };
            out.push_str(&format!(
                "{:<24} {:>16} {:>9} {:>9} {:>9} {:>8}\n",
                s.name,
                format!("{:.2} ± {:.2}", s.mean_spearman, s.std_spearman),
                s.mean_alignment.map_or("-".into(), |a| format!("{a:.4}")),
                s.mean_uniformity.map_or("-".into(), |u| format!("{u:.4}")),
                p,
                runs
            ));
        }
        for r in self.failures() {
            if let Err(e) = &r.outcome {
                out.push_str(&format!("FAILED {} seed {}: {e}\n", r.variant, r.seed));
            }
        }
        out
    }
}

fn run_one(
    variant: &Variant,
    seed: u64,
    source: DataSource<'_>,
    tasks: &BTreeMap<String, Vec<StsPair>>,
    geometry_pairs: &[StsPair],
) -> Result<RunMetrics> {
    let cfg = TrainConfig {
        seed,
        ..variant.config.clone()
    };
    let data = source.load(&cfg)?;
    let outcome = train::train_on(&cfg, &data, Execution::Sequential)?;
    let params = &outcome.best.params;
    let report = eval::evaluate_params(params, tasks, Execution::Sequential)?;
    let (alignment, uniformity) = if geometry_pairs
        .iter()
        .any(|p| p.gold > POSITIVE_GOLD_THRESHOLD)
    {
        let a = eval::analyze_with(
            &ModelEmbedder { params },
            geometry_pairs,
            Execution::Sequential,
        )?;
        (Some(a.alignment), Some(a.uniformity))
    } else {
        (None, None)
    };
    Ok(RunMetrics {
        spearman: report.average,
        per_task: report.per_task_spearman,
        alignment,
        uniformity,
        best_step: outcome.best.step,
        steps: outcome.log.steps(),
    })
}

/// Trains every variant under every seed and summarizes the results.
/// Runs are independent and scheduled by `exec`; a failing run is recorded
/// with its error and excluded from the statistics.
pub fn run_experiment_suite(
    variants: &[Variant],
    seeds: &[u64],
    baseline: &str,
    source: DataSource<'_>,
    test_tasks: &BTreeMap<String, Vec<StsPair>>,
    exec: Execution,
) -> Result<SuiteReport> {
    if seeds.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "significance testing needs at least 2 seeds, got {}",
            seeds.len()
        )));
    }
    if variants.is_empty() {
        return Err(Error::Empty("no variants"));
    }
    if test_tasks.is_empty() {
        return Err(Error::Empty("no test tasks"));
    }
    for (i, v) in variants.iter().enumerate() {
        if variants[..i].iter().any(|w| w.name == v.name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate variant `{}`",
                v.name
            )));
        }
    }
    if !variants.iter().any(|v| v.name == baseline) {
        return Err(Error::InvalidArgument(format!(
            "baseline `{baseline}` is not a variant"
        )));
    }
    let geometry_pairs: Vec<StsPair> = test_tasks.values().flatten().cloned().collect();
    let jobs: Vec<(usize, u64)> = (0..variants.len())
        .flat_map(|v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let runs: Vec<RunRecord> = exec.map(&jobs, |&(v, seed)| RunRecord {
        variant: variants[v].name.clone(),
        seed,
        outcome: run_one(&variants[v], seed, source, test_tasks, &geometry_pairs)
            .map_err(|e| e.to_string()),
    });

    let mut report = SuiteReport {
        baseline: baseline.to_string(),
        seeds: seeds.to_vec(),
        summaries: Vec::new(),
        runs,
    };
    let base_scores = report.scores(baseline);
    for v in variants {
        let ok: Vec<&RunMetrics> = report
            .runs
            .iter()
            .filter(|r| r.variant == v.name)
            .filter_map(|r| r.outcome.as_ref().ok())
            .collect();
        let scores: Vec<f64> = ok.iter().map(|m| m.spearman).collect();
        let opt_mean = |xs: Vec<f64>| (!xs.is_empty() && xs.len() == ok.len()).then(|| mean(&xs));
        let is_base = v.name == baseline;
        let delta = (!is_base && !scores.is_empty() && !base_scores.is_empty())
            .then(|| mean(&scores) - mean(&base_scores));
        let test = if is_base {
            None
        } else {
            metrics::welch_t_test(&scores, &base_scores, SIGNIFICANCE_LEVEL).ok()
        };
        report.summaries.push(VariantSummary {
            name: v.name.clone(),
            runs: seeds.len(),
            failed: seeds.len() - ok.len(),
            mean_spearman: if scores.is_empty() {
                f64::NAN
            } else {
                mean(&scores)
            },
            std_spearman: std_dev(&scores),
            mean_alignment: opt_mean(ok.iter().filter_map(|m| m.alignment).collect()),
            mean_uniformity: opt_mean(ok.iter().filter_map(|m| m.uniformity).collect()),
            delta_vs_baseline: delta,
            test_vs_baseline: test,
        });
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleRow {
    pub sample_limit: Option<usize>,
    pub simcse: f64,
    pub mcse: f64,
    pub advantage: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataScaleReport {
    /// Optimizer steps every run takes, equal to the full-data run's plan.
    pub steps: usize,
    pub rows: Vec<ScaleRow>,
    /// Advantage never decreases as the sample limit grows.
    pub monotone: bool,
    /// Advantage at the largest setting exceeds the advantage at the smallest.
    pub largest_exceeds_smallest: bool,
    pub suite: SuiteReport,
}

impl DataScaleReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["sample_limit", "simcse", "mcse", "advantage"])?;
        for r in &self.rows {
            w.write_record([
                r.sample_limit
                    .map_or_else(|| "full".to_string(), |n| n.to_string()),
                r.simcse.to_string(),
                r.mcse.to_string(),
                r.advantage.to_string(),
            ])?;
        }
        w.write_record(["monotone", &self.monotone.to_string(), "", ""])?;
        w.write_record([
            "largest_exceeds_smallest",
            &self.largest_exceeds_smallest.to_string(),
            "",
            "",
        ])?;
        metrics::csv_string(w)
    }
}

fn limit_label(limit: Option<usize>) -> String {
    limit.map_or_else(|| "full".to_string(), |n| n.to_string())
}

/// SimCSE and MCSE over a grid of sample limits, every run taking the same
/// number of steps as the unrestricted run so only the data size varies.
pub fn run_data_scale(
    base: &TrainConfig,
    limits: &[Option<usize>],
    seeds: &[u64],
    source: DataSource<'_>,
    test_tasks: &BTreeMap<String, Vec<StsPair>>,
    exec: Execution,
) -> Result<DataScaleReport> {
    if limits.is_empty() {
        return Err(Error::Empty("sample-limit grid"));
    }
    let full_cfg = TrainConfig {
        sample_limit: None,
        ..base.clone()
    };
    let steps = match base.steps {
        Some(s) => s,
        None => train::planned_steps(&full_cfg, &source.load(&full_cfg)?)?,
    };
    let mut variants = Vec::new();
    for &limit in limits {
        for objective in [Objective::Simcse, Objective::Mcse] {
            variants.push(Variant::new(
                format!("{}@{}", objective.name(), limit_label(limit)),
                TrainConfig {
                    objective,
                    sample_limit: limit,
                    steps: Some(steps),
                    ..base.clone()
                },
            ));
        }
    }
    let baseline = variants[0].name.clone();
    let suite = run_experiment_suite(&variants, seeds, &baseline, source, test_tasks, exec)?;
    let rows: Vec<ScaleRow> = limits
        .iter()
        .map(|&limit| {
            let l = limit_label(limit);
            let get = |o: Objective| {
                suite
                    .summary(&format!("{}@{l}", o.name()))
                    .map_or(f64::NAN, |s| s.mean_spearman)
            };
            let (simcse, mcse) = (get(Objective::Simcse), get(Objective::Mcse));
            ScaleRow {
                sample_limit: limit,
                simcse,
                mcse,
                advantage: mcse - simcse,
            }
        })
        .collect();
    let monotone = rows.windows(2).all(|w| w[1].advantage >= w[0].advantage);
    let largest_exceeds_smallest = rows.last().unwrap().advantage > rows[0].advantage;
    Ok(DataScaleReport {
        steps,
        rows,
        monotone,
        largest_exceeds_smallest,
        suite,
    })
}
