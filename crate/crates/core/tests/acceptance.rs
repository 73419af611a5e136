//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use mcse_core::data::MiniBatch;
use mcse_core::eval::ModelEmbedder;
use mcse_core::metrics::{self, EmbeddedCorpus, SentenceEmbedder, StsPair};
use mcse_core::model::{Dims, FeatureTable, ImageFeature, ModelParams, ParamGroup};
use mcse_core::numeric::{DenseMatrix, DenseVector};
use mcse_core::objectives::{self, LossConfig, MaskStream};
use mcse_core::suite::{self, DataScaleReport, DataSource, SuiteReport};
use mcse_core::synth::{self, GroundedCorpus, SynthConfig};
use mcse_core::train::{self, LogRow, Objective, TrainConfig, TrainingData};
use mcse_core::Execution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

// ---------------------------------------------------------------------------
// 1. Gradient oracle

fn gradient_oracle() -> Outcome {
    let start = Instant::now();
    let dims = Dims {
        d: 8,
        d_s: 4,
        d_v: 6,
        vocab: 16,
    };
    let cfg = LossConfig {
        tau: 0.05,
        tau_prime: 0.05,
        lambda: 0.05,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let features = ok(FeatureTable::new(
        (0..4)
            .map(|i| ImageFeature {
                image_id: format!("img{i}"),
                vector: DenseVector::new((0..6).map(|_| rng.random_range(-1.0..1.0)).collect())
                    .unwrap(),
            })
            .collect(),
    ))?;
    let sentences: Vec<Vec<u32>> =
        vec![vec![0, 3, 5], vec![1, 2], vec![4, 7, 9, 11], vec![6, 13, 2]];
    let batch = ok(MiniBatch::multimodal(
        sentences,
        (0..4).map(|i| format!("img{i}")).collect(),
    ))?;
    let masks = MaskStream {
        seed: 77,
        keep_prob: 0.9,
    };
    let mut params = ok(ModelParams::init(dims, 5))?;
    params.zero_grads();
    ok(objectives::batch_loss_and_grads(
        &batch,
        Some(&features),
        &mut params,
        &cfg,
        masks,
    ))?;
    let analytic = params.grads.clone();

    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    let mut checked = 0usize;
    for g in ParamGroup::ALL {
        let n = params.values.group(g).len();
        let mut numeric = vec![0.0; n];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let orig = params.values.group(g)[k];
            params.values.group_mut(g)[k] = orig + h;
            let up = ok(objectives::batch_loss(
                &batch,
                Some(&features),
                &params,
                &cfg,
                masks,
            ))?
            .mean_total;
            params.values.group_mut(g)[k] = orig - h;
            let down = ok(objectives::batch_loss(
                &batch,
                Some(&features),
                &params,
                &cfg,
                masks,
            ))?
            .mean_total;
            params.values.group_mut(g)[k] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        let a = analytic.group(g);
        let scale = numeric.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        for k in 0..n {
            let denom = a[k]
                .abs()
                .max(numeric[k].abs())
                .max(1e-3 * scale)
                .max(1e-12);
            let rel = (a[k] - numeric[k]).abs() / denom;
            checked += 1;
            if rel > worst {
                worst = rel;
                worst_at = format!("{}[{k}]", g.name());
            }
        }
    }
    let elapsed = start.elapsed();
    let detail = format!(
        "{checked} parameters, max relative error {worst:.2e} at {worst_at}, {elapsed:.2?}"
    );
    ensure(worst < 1e-4, format!("relative error too large: {detail}"))?;
    ensure(
        elapsed < Duration::from_secs(10),
        format!("too slow: {detail}"),
    )?;
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 2. Exact reductions

fn strip_multimodal_column(tsv: &str) -> Vec<String> {
    tsv.lines()
        .map(|l| {
            let mut cols: Vec<&str> = l.split('\t').collect();
            cols.remove(3);
            cols.join("\t")
        })
        .collect()
}

fn exact_reductions(corpus: &GroundedCorpus) -> Outcome {
    // N = 1 batches.
    let h = ok(DenseMatrix::from_rows(&[[0.3, -0.2, 0.9]]))?;
    let hp = ok(DenseMatrix::from_rows(&[[-0.5, 0.1, 0.4]]))?;
    let ls = ok(objectives::simcse_batch_loss(&h, &hp, 0.05))?;
    ensure(ls == vec![0.0], format!("N=1 textual loss {ls:?}"))?;
    let s = ok(DenseMatrix::from_rows(&[[0.6, 0.8]]))?;
    let sp = ok(DenseMatrix::from_rows(&[[0.0, 1.0]]))?;
    let v = ok(DenseMatrix::from_rows(&[[1.0, 0.0]]))?;
    let lm = ok(objectives::multimodal_batch_loss(&s, &sp, &v, 0.05))?;
    ensure(lm == vec![0.0], format!("N=1 multimodal loss {lm:?}"))?;
    let params = ok(ModelParams::init(Dims::default(), 1))?;
    let one = ok(MiniBatch::multimodal(
        vec![vec![1, 2, 3]],
        vec![corpus.caption_groups[0].image_id.clone()],
    ))?;
    let r = ok(objectives::batch_loss(
        &one,
        Some(&corpus.features),
        &params,
        &LossConfig::default(),
        MaskStream {
            seed: 3,
            keep_prob: 0.9,
        },
    ))?;
    ensure(
        r.per_instance_textual == vec![0.0] && r.per_instance_multimodal == vec![0.0],
        format!(
            "N=1 model batch losses {:?} {:?}",
            r.per_instance_textual, r.per_instance_multimodal
        ),
    )?;

    // λ = 0 against SimCSE mode.
    let data = ok(TrainingData::from_corpus(corpus, 0))?;
    let base = TrainConfig {
        steps: Some(500),
        ..TrainConfig::default()
    };
    let zero = TrainConfig {
        objective: Objective::Mcse,
        lambda: 0.0,
        ..base.clone()
    };
    let simcse = TrainConfig {
        objective: Objective::Simcse,
        ..base
    };
    let a = ok(train::train_on(&zero, &data, Execution::Parallel))?;
    let b = ok(train::train_on(&simcse, &data, Execution::Parallel))?;
    ensure(
        a.log.steps() == 500,
        format!("expected 500 steps, got {}", a.log.steps()),
    )?;
    let mm_rows = a
        .log
        .rows
        .iter()
        .filter(|r| {
            matches!(
                r,
                LogRow::Step {
                    loss_m: Some(_),
                    ..
                }
            )
        })
        .count();
    ensure(mm_rows > 0, "λ=0 run computed no multimodal losses")?;
    let (la, lb) = (
        strip_multimodal_column(&a.log.to_tsv()),
        strip_multimodal_column(&b.log.to_tsv()),
    );
    ensure(la == lb, "logs differ outside the loss_M column")?;
    for g in ParamGroup::ALL {
        let same = a
            .final_params
            .values
            .group(g)
            .iter()
            .zip(b.final_params.values.group(g))
            .all(|(x, y)| x.to_bits() == y.to_bits());
        ensure(same, format!("final {} differs", g.name()))?;
    }
    ensure(
        a.best.params == b.best.params && a.best.step == b.best.step,
        "best checkpoints differ",
    )?;
    Ok(format!(
        "N=1 losses exactly 0; λ=0 and SimCSE identical over 500 steps ({} log lines, {mm_rows} caption batches)",
        la.len()
    ))
}

// ---------------------------------------------------------------------------
// 3. Temperature limit

fn temperature_limit() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut m = || {
        let rows: Vec<Vec<f64>> = (0..8)
            .map(|_| (0..16).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        DenseMatrix::from_rows(&rows).unwrap()
    };
    let (h, hp) = (m(), m());
    let losses = ok(objectives::simcse_batch_loss(&h, &hp, 1e9))?;
    let target = 8f64.ln();
    let worst = losses
        .iter()
        .map(|l| (l - target).abs())
        .fold(0.0, f64::max);
    ensure(losses.len() == 8, "expected 8 losses")?;
    ensure(worst < 1e-6, format!("max |ℓ − ln 8| = {worst:e}"))?;
    Ok(format!("max |ℓ − ln 8| = {worst:.2e}"))
}

// ---------------------------------------------------------------------------
// 4. Metric closed forms

fn metric_closed_forms() -> Outcome {
    let v = |x: &[f64]| DenseVector::new(x.to_vec()).unwrap();
    let align = ok(metrics::alignment_loss(&[(v(&[1.0, 0.0]), v(&[0.0, 1.0]))]))?;
    ensure((align - 2.0).abs() <= 1e-9, format!("alignment {align}"))?;
    let unif = ok(metrics::uniformity_loss(&[v(&[0.0, 1.0]), v(&[0.0, -1.0])]))?;
    ensure((unif + 8.0).abs() <= 1e-9, format!("uniformity {unif}"))?;
    let rho = ok(metrics::spearman(
        &[1.0, 2.0, 3.0, 4.0],
        &[2.0, 1.0, 4.0, 3.0],
    ))?;
    ensure((rho - 0.6).abs() <= 1e-12, format!("spearman {rho}"))?;
    // Targets are the standard basis, so query rows are the similarity rows.
    let queries = vec![
        v(&[0.9, 0.1, 0.0]),
        v(&[0.2, 0.8, 0.1]),
        v(&[0.3, 0.4, 0.2]),
    ];
    let targets = vec![
        v(&[1.0, 0.0, 0.0]),
        v(&[0.0, 1.0, 0.0]),
        v(&[0.0, 0.0, 1.0]),
    ];
    let r1 = ok(metrics::recall_at_k(&queries, &targets, &[0, 1, 2], 1))?;
    ensure(r1 == 2.0 / 3.0, format!("recall@1 {r1}"))?;
    Ok(format!(
        "alignment {align}, uniformity {unif}, spearman {rho}, recall@1 {r1}"
    ))
}

// ---------------------------------------------------------------------------
// 5. Oracle equivalence

fn oracle_ranks(xs: &[f64]) -> Vec<f64> {
    xs.iter()
        .map(|&a| {
            let below = xs.iter().filter(|&&b| b < a).count() as f64;
            let tied = xs.iter().filter(|&&b| b == a).count() as f64;
            below + (tied + 1.0) / 2.0
        })
        .collect()
}

fn oracle_spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (oracle_ranks(x), oracle_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
    cov / (vx * vy).sqrt()
}

fn oracle_cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Indices of `targets` ordered by descending cosine, lower index first on ties.
fn oracle_order(q: &[f64], targets: &[Vec<f64>]) -> Vec<(usize, f64)> {
    let mut s: Vec<(usize, f64)> = targets
        .iter()
        .enumerate()
        .map(|(i, t)| (i, oracle_cos(q, t)))
        .collect();
    s.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    s
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for case in 0..100 {
        // Every fourth case uses coarse values so ties occur.
        let draw = |rng: &mut ChaCha8Rng| -> f64 {
            if case % 4 == 0 {
                rng.random_range(0..6) as f64
            } else {
                rng.random_range(-10.0..10.0)
            }
        };
        let x: Vec<f64> = (0..50).map(|_| draw(&mut rng)).collect();
        let y: Vec<f64> = (0..50).map(|_| draw(&mut rng)).collect();
        let got = ok(metrics::spearman(&x, &y))?;
        worst = worst.max((got - oracle_spearman(&x, &y)).abs());
    }
    ensure(
        worst <= 1e-10,
        format!("spearman deviates from oracle by {worst:e}"),
    )?;

    // Retrieval over 100 random sentences with a randomly initialized model.
    let dims = Dims {
        d: 16,
        ..Dims::default()
    };
    let params = ok(ModelParams::init(dims, 8))?;
    let embedder = ModelEmbedder { params: &params };
    let words = [
        "red", "cat", "sea", "hill", "sky", "old", "boat", "tree", "road", "lamp", "rain", "gold",
    ];
    let mut sentences: Vec<String> = Vec::new();
    while sentences.len() < 100 {
        let len = rng.random_range(2..7);
        let s: Vec<&str> = (0..len)
            .map(|_| words[rng.random_range(0..words.len())])
            .collect();
        let s = s.join(" ");
        if !sentences.contains(&s) {
            sentences.push(s);
        }
    }
    let corpus = ok(EmbeddedCorpus::build(
        &embedder,
        sentences.clone(),
        Execution::Parallel,
    ))?;
    let vectors: Vec<Vec<f64>> = sentences
        .iter()
        .map(|s| embedder.embed(s).unwrap().into_inner())
        .collect();
    let mut queries: Vec<String> = sentences[..10].to_vec();
    queries.extend(["cat sea boat", "gold rain", "tree"].map(String::from));
    for q in &queries {
        let got = ok(metrics::nearest_sentences(q, &embedder, &corpus, 5))?;
        let qv = embedder.embed(q).unwrap().into_inner();
        let expected: Vec<(usize, f64)> = oracle_order(&qv, &vectors)
            .into_iter()
            .filter(|(i, _)| &sentences[*i] != q)
            .take(5)
            .collect();
        let same = got.len() == expected.len()
            && got.iter().zip(&expected).all(|(g, e)| {
                g.index == e.0 && (g.score - e.1).abs() < 1e-12 && g.sentence == sentences[e.0]
            });
        ensure(same, format!("nearest_sentences mismatch for `{q}`"))?;
    }

    let rand_vec = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()
    };
    let targets: Vec<Vec<f64>> = (0..100).map(|_| rand_vec(&mut rng)).collect();
    let qs: Vec<Vec<f64>> = (0..100).map(|_| rand_vec(&mut rng)).collect();
    let truth: Vec<usize> = (0..100).map(|_| rng.random_range(0..100)).collect();
    let dv = |xs: &[Vec<f64>]| {
        xs.iter()
            .map(|x| DenseVector::new(x.clone()).unwrap())
            .collect::<Vec<_>>()
    };
    let (tq, tt) = (dv(&qs), dv(&targets));
    for k in [1, 5, 10, 50, 100] {
        let got = ok(metrics::recall_at_k(&tq, &tt, &truth, k))?;
        let hits = qs
            .iter()
            .zip(&truth)
            .filter(|(q, &t)| {
                oracle_order(q, &targets)
                    .iter()
                    .take(k)
                    .any(|(i, _)| *i == t)
            })
            .count();
        let expected = hits as f64 / 100.0;
        ensure(
            got == expected,
            format!("recall@{k}: {got} vs oracle {expected}"),
        )?;
    }
    Ok(format!(
        "spearman max deviation {worst:.1e} over 100 inputs; {} retrieval queries and recall@{{1,5,10,50,100}} match exhaustive scans",
        queries.len()
    ))
}

// ---------------------------------------------------------------------------
// 6–8. Directional reproduction on the default synthetic corpus

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Experiments {
    standard: SuiteReport,
    scale: DataScaleReport,
    elapsed: Duration,
}

fn run_experiments(corpus: &GroundedCorpus) -> Result<Experiments, String> {
    let start = Instant::now();
    let base = TrainConfig::default();
    let tasks = corpus.test_tasks();
    let standard = ok(suite::run_experiment_suite(
        &suite::standard_variants(&base),
        &SEEDS,
        suite::SIMCSE,
        DataSource::Corpus(corpus),
        &tasks,
        Execution::Parallel,
    ))?;
    let scale = ok(suite::run_data_scale(
        &base,
        &suite::SAMPLE_LIMIT_GRID,
        &SEEDS,
        DataSource::Corpus(corpus),
        &tasks,
        Execution::Parallel,
    ))?;
    Ok(Experiments {
        standard,
        scale,
        elapsed: start.elapsed(),
    })
}

fn directional_main(exp: &Experiments) -> Outcome {
    let r = &exp.standard;
    ensure(
        r.failures().is_empty(),
        format!("failed runs: {}", r.failures().len()),
    )?;
    let s = r.summary(suite::SIMCSE).ok_or("missing simcse")?;
    let m = r.summary(suite::MCSE).ok_or("missing mcse")?;
    let (sa, ma) = (
        s.mean_alignment.ok_or("no alignment")?,
        m.mean_alignment.ok_or("no alignment")?,
    );
    let (su, mu) = (
        s.mean_uniformity.ok_or("no uniformity")?,
        m.mean_uniformity.ok_or("no uniformity")?,
    );
    let t = m.test_vs_baseline.ok_or("no significance test")?;
    let detail = format!(
        "spearman MCSE {:.2}±{:.2} vs SimCSE {:.2}±{:.2} (p={:.2e}, significant={}); alignment {ma:.4} vs {sa:.4}; uniformity {mu:.4} vs {su:.4}; suite {:.1?}",
        m.mean_spearman, m.std_spearman, s.mean_spearman, s.std_spearman, t.p_value, t.significant, exp.elapsed
    );
    ensure(
        m.mean_spearman >= s.mean_spearman,
        format!("MCSE below SimCSE: {detail}"),
    )?;
    ensure(ma <= sa, format!("MCSE alignment worse: {detail}"))?;
    ensure(
        (mu - su).abs() <= 0.5,
        format!("uniformity gap over 0.5: {detail}"),
    )?;
    ensure(
        exp.elapsed < Duration::from_secs(300),
        format!("suite over 5 minutes: {detail}"),
    )?;
    Ok(detail)
}

fn directional_shuffled(exp: &Experiments) -> Outcome {
    let r = &exp.standard;
    let m = r.summary(suite::MCSE).ok_or("missing mcse")?;
    let sh = r.summary(suite::MCSE_SHUFFLED).ok_or("missing shuffled")?;
    let detail = format!(
        "shuffled {:.2}±{:.2} vs matched MCSE {:.2}±{:.2}",
        sh.mean_spearman, sh.std_spearman, m.mean_spearman, m.std_spearman
    );
    ensure(
        sh.failed == 0 && m.failed == 0,
        format!("failed runs: {detail}"),
    )?;
    ensure(sh.mean_spearman < m.mean_spearman, detail.clone())?;
    Ok(detail)
}

fn data_scale(exp: &Experiments) -> Outcome {
    let r = &exp.scale;
    ensure(
        r.suite.failures().is_empty(),
        format!("failed runs: {}", r.suite.failures().len()),
    )?;
    let limits: Vec<Option<usize>> = r.rows.iter().map(|row| row.sample_limit).collect();
    ensure(
        limits == suite::SAMPLE_LIMIT_GRID.to_vec(),
        format!("grid {limits:?}"),
    )?;
    ok(r.to_csv())?;
    let advantages: Vec<String> = r
        .rows
        .iter()
        .map(|row| {
            format!(
                "{}:{:+.2}",
                row.sample_limit
                    .map_or("full".to_string(), |n| n.to_string()),
                row.advantage
            )
        })
        .collect();
    let detail = format!(
        "advantage {} (monotone={}, {} steps per run)",
        advantages.join(" "),
        r.monotone,
        r.steps
    );
    let (first, last) = (&r.rows[0], r.rows.last().unwrap());
    ensure(last.advantage > first.advantage, detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 9. Reproducibility

fn reproducibility() -> Outcome {
    let dir = ok(tempfile::tempdir())?;
    let corpus = ok(synth::generate_grounded_corpus(&SynthConfig {
        num_images: 200,
        num_text_only_sentences: 400,
        sts_test_pairs: 100,
        sts_dev_pairs: 60,
        seed: 9,
        ..SynthConfig::default()
    }))?;
    ok(corpus.write_to_dir(dir.path()))?;
    let cfg = TrainConfig {
        epochs: 2,
        eval_every_steps: 5,
        seed: 17,
        text_corpus: Some(dir.path().join(synth::CORPUS_FILE)),
        captions: Some(dir.path().join(synth::CAPTIONS_FILE)),
        features: Some(dir.path().join(synth::FEATURES_FILE)),
        dev_sts: Some(dir.path().join(synth::STS_DEV_FILE)),
        ..TrainConfig::default()
    };
    let cfg_path = dir.path().join("train.toml");
    ok(std::fs::write(&cfg_path, ok(toml::to_string(&cfg))?))?;
    let mut outputs = Vec::new();
    for (i, exec) in [Execution::Parallel, Execution::Sequential]
        .into_iter()
        .enumerate()
    {
        let cfg = ok(TrainConfig::from_toml(&ok(std::fs::read_to_string(
            &cfg_path,
        ))?))?;
        let out = ok(train::train(&cfg, exec))?;
        let run_dir = dir.path().join(format!("run{i}"));
        ok(train::write_outputs(&out, &run_dir))?;
        let read = |f: &str| std::fs::read(run_dir.join(f)).unwrap();
        outputs.push((
            read("best.ckpt"),
            read("train_log.tsv"),
            read("train_log.csv"),
        ));
    }
    ensure(outputs[0].0 == outputs[1].0, "checkpoints differ")?;
    ensure(outputs[0].1 == outputs[1].1, "TSV logs differ")?;
    ensure(outputs[0].2 == outputs[1].2, "CSV logs differ")?;
    Ok(format!(
        "checkpoint ({} bytes) and logs ({} bytes) byte-identical across two runs",
        outputs[0].0.len(),
        outputs[0].1.len()
    ))
}

// ---------------------------------------------------------------------------
// 10. Protocol fidelity

fn protocol_fidelity() -> Outcome {
    // `a*` embeds to e₁, `b<c>` to the unit vector with cosine c to e₁.
    let embedder = |text: &str| -> mcse_core::Result<DenseVector> {
        if text.starts_with('a') {
            return DenseVector::new(vec![1.0, 0.0]);
        }
        let c: f64 = text[1..].parse().unwrap();
        DenseVector::new(vec![c, (1.0 - c * c).sqrt()])
    };
    let pair = |i: usize, c: f64, gold: f64, tag: &str| {
        StsPair::new(
            format!("a{i}"),
            format!("b{c}"),
            gold,
            Some(tag.to_string()),
        )
        .unwrap()
    };
    let pairs = vec![
        pair(0, 0.5, 1.0, "lo"),
        pair(1, 0.6, 2.0, "lo"),
        pair(2, 0.1, 3.0, "hi"),
        pair(3, 0.2, 4.0, "hi"),
    ];
    let tasks = BTreeMap::from([("sts".to_string(), pairs)]);
    let report = ok(metrics::sts_evaluate(
        &embedder,
        &tasks,
        Execution::Sequential,
    ))?;
    let all = report.per_task_spearman["sts"];
    let subsets = &report.per_subset["sts"];
    let mean_subset = subsets.values().sum::<f64>() / subsets.len() as f64;
    let detail = format!("concatenated ρ×100 = {all:.2}, mean per-subset ρ×100 = {mean_subset:.2}");
    ensure(subsets.len() == 2, "expected two subsets")?;
    ensure(all < mean_subset, detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------------------

fn main() {
    let total = Instant::now();
    let corpus = synth::generate_grounded_corpus(&SynthConfig::default()).expect("default corpus");
    let mut experiments: Option<Result<Experiments, String>> = None;
    let mut failures = 0;

    let mut report = |id: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        match result {
            Ok(detail) => println!("PASS [{id:>2}] {name}: {detail} ({:.1?})", t.elapsed()),
            Err(detail) => {
                failures += 1;
                println!("FAIL [{id:>2}] {name}: {detail} ({:.1?})", t.elapsed());
            }
        }
    };

    report(1, "gradient oracle", &mut gradient_oracle);
    report(2, "exact reductions", &mut || exact_reductions(&corpus));
    report(3, "temperature limit", &mut temperature_limit);
    report(4, "metric closed forms", &mut metric_closed_forms);
    report(5, "oracle equivalence", &mut oracle_equivalence);
    let mut get = |f: fn(&Experiments) -> Outcome| -> Outcome {
        let exp = experiments.get_or_insert_with(|| run_experiments(&corpus));
        match exp {
            Ok(e) => f(e),
            Err(e) => Err(format!("experiment suite failed: {e}")),
        }
    };
    report(6, "directional: MCSE vs SimCSE", &mut || {
        get(directional_main)
    });
    report(7, "directional: shuffled images", &mut || {
        get(directional_shuffled)
    });
    report(8, "data-scale advantage", &mut || get(data_scale));
    report(9, "reproducibility", &mut reproducibility);
    report(10, "protocol fidelity", &mut protocol_fidelity);

    println!(
        "acceptance: {} passed, {failures} failed ({:.1?})",
        10 - failures,
        total.elapsed()
    );
    if failures > 0 {
        std::process::exit(1);
    }
}
