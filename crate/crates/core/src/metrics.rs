//! Evaluation: embedding-space geometry, STS correlation, retrieval and the
//! significance test used for multi-seed comparisons.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::numeric::{self, DenseVector};
use crate::seed;

/// Largest point set [`uniformity_loss`] evaluates exhaustively.
pub const UNIFORMITY_MAX_POINTS: usize = 5000;

/// Gold score above which an STS pair counts as a positive pair.
pub const POSITIVE_GOLD_THRESHOLD: f64 = 4.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StsPair {
    pub sent_a: String,
    pub sent_b: String,
    pub gold: f64,
    pub subset_tag: Option<String>,
}

impl StsPair {
    pub fn new(
        sent_a: impl Into<String>,
        sent_b: impl Into<String>,
        gold: f64,
        subset_tag: Option<String>,
    ) -> Result<Self> {
        if !(0.0..=5.0).contains(&gold) {
            return Err(Error::InvalidArgument(format!(
                "gold score {gold} outside [0, 5]"
            )));
        }
        Ok(StsPair {
            sent_a: sent_a.into(),
            sent_b: sent_b.into(),
            gold,
            subset_tag,
        })
    }
}

/// Anything that maps a sentence to an evaluation embedding.
pub trait SentenceEmbedder: Sync {
    fn embed(&self, text: &str) -> Result<DenseVector>;
}

impl<F> SentenceEmbedder for F
where
    F: Fn(&str) -> Result<DenseVector> + Sync,
{
    fn embed(&self, text: &str) -> Result<DenseVector> {
        self(text)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Task name → Spearman ×100 over all of the task's subsets.
    pub per_task_spearman: BTreeMap<String, f64>,
    pub average: f64,
    pub alignment: Option<f64>,
    pub uniformity: Option<f64>,
    /// Task → subset tag → Spearman ×100, for subsets where it is defined.
    pub per_subset: BTreeMap<String, BTreeMap<String, f64>>,
    /// `(direction, k)` → recall.
    pub recall: BTreeMap<String, f64>,
}

impl EvalReport {
    /// Long-format CSV: `scope,task,subset,value`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["scope", "task", "subset", "value"])?;
        for (task, rho) in &self.per_task_spearman {
            w.write_record(["spearman", task, "", &rho.to_string()])?;
        }
        w.write_record(["average", "", "", &self.average.to_string()])?;
        for (task, subsets) in &self.per_subset {
            for (subset, rho) in subsets {
                w.write_record(["subset_spearman", task, subset, &rho.to_string()])?;
            }
        }
        if let Some(a) = self.alignment {
            w.write_record(["alignment", "", "", &a.to_string()])?;
        }
        if let Some(u) = self.uniformity {
            w.write_record(["uniformity", "", "", &u.to_string()])?;
        }
        for (key, r) in &self.recall {
            w.write_record(["recall", key, "", &r.to_string()])?;
        }
        csv_string(w)
    }
}

pub(crate) fn csv_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| Error::InvalidArgument(format!("csv flush: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn normalized(v: &DenseVector) -> Result<Vec<f64>> {
    numeric::normalize_slice(v.as_slice())
}

/// Mean squared distance between the normalized members of each pair.
pub fn alignment_loss(positive_pairs: &[(DenseVector, DenseVector)]) -> Result<f64> {
    if positive_pairs.is_empty() {
        return Err(Error::Empty("alignment needs at least one positive pair"));
    }
    let mut total = 0.0;
    for (a, b) in positive_pairs {
        if a.dim() != b.dim() {
            return Err(Error::DimensionMismatch {
                expected: a.dim(),
                got: b.dim(),
            });
        }
        total += numeric::squared_distance(&normalized(a)?, &normalized(b)?);
    }
    Ok(total / positive_pairs.len() as f64)
}

/// `log E[exp(-2‖x − y‖²)]` over distinct unordered pairs of normalized
/// points. Sets larger than [`UNIFORMITY_MAX_POINTS`] are subsampled with a
/// fixed seed.
pub fn uniformity_loss(embeddings: &[DenseVector]) -> Result<f64> {
    uniformity_loss_with(embeddings, UNIFORMITY_MAX_POINTS, 0x0417)
}

pub fn uniformity_loss_with(
    embeddings: &[DenseVector],
    max_points: usize,
    seed: u64,
) -> Result<f64> {
    if embeddings.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "uniformity needs at least 2 points, got {}",
            embeddings.len()
        )));
    }
    let dim = embeddings[0].dim();
    let chosen: Vec<&DenseVector> = if embeddings.len() > max_points.max(2) {
        let mut rng = seed::rng(&[seed]);
        let mut idx =
            rand::seq::index::sample(&mut rng, embeddings.len(), max_points.max(2)).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| &embeddings[i]).collect()
    } else {
        embeddings.iter().collect()
    };
    let points = chosen
        .iter()
        .map(|v| {
            if v.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: v.dim(),
                });
            }
            normalized(v)
        })
        .collect::<Result<Vec<_>>>()?;
    // Squared distances of unit vectors are at most 4, so every term is at
    // least e^-8 and the plain sum cannot underflow.
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            sum += (-2.0 * numeric::squared_distance(&points[i], &points[j])).exp();
            count += 1;
        }
    }
    Ok((sum / count as f64).ln().min(0.0))
}

/// Fractional ranks (1-based, ties share their average rank).
pub fn fractional_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && xs[order[end]] == xs[order[start]] {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::InvalidArgument(
            "correlation needs at least 2 points".into(),
        ));
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::InvalidArgument(
            "correlation undefined: zero variance".into(),
        ));
    }
    Ok((cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman's ρ: Pearson correlation of fractional ranks.
pub fn spearman(gold: &[f64], pred: &[f64]) -> Result<f64> {
    if gold.len() != pred.len() {
        return Err(Error::DimensionMismatch {
            expected: gold.len(),
            got: pred.len(),
        });
    }
    pearson(&fractional_ranks(gold), &fractional_ranks(pred))
}

/// Scores every pair by the cosine of its evaluation embeddings.
pub fn score_pairs(
    embedder: &dyn SentenceEmbedder,
    pairs: &[StsPair],
    exec: Execution,
) -> Result<Vec<f64>> {
    let mut unique: Vec<&str> = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::new();
    for p in pairs {
        for s in [p.sent_a.as_str(), p.sent_b.as_str()] {
            index.entry(s).or_insert_with(|| {
                unique.push(s);
                unique.len() - 1
            });
        }
    }
    let vectors = exec
        .map(&unique, |s| embedder.embed(s))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    pairs
        .iter()
        .map(|p| {
            numeric::cosine_sim(
                &vectors[index[p.sent_a.as_str()]],
                &vectors[index[p.sent_b.as_str()]],
            )
        })
        .collect()
}

/// STS evaluation in the "all" setting: one Spearman per task over the
/// concatenation of its subsets, reported ×100, plus a per-subset breakdown
/// wherever subset tags are present.
pub fn sts_evaluate(
    embedder: &dyn SentenceEmbedder,
    tasks: &BTreeMap<String, Vec<StsPair>>,
    exec: Execution,
) -> Result<EvalReport> {
    if tasks.is_empty() {
        return Err(Error::Empty("no STS tasks"));
    }
    let mut report = EvalReport::default();
    for (task, pairs) in tasks {
        if pairs.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "task `{task}` has no pairs"
            )));
        }
        let scores = score_pairs(embedder, pairs, exec)?;
        let gold: Vec<f64> = pairs.iter().map(|p| p.gold).collect();
        let rho = spearman(&gold, &scores)
            .map_err(|e| Error::InvalidArgument(format!("task `{task}`: {e}")))?;
        report.per_task_spearman.insert(task.clone(), 100.0 * rho);

        let mut by_subset: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for (p, s) in pairs.iter().zip(&scores) {
            if let Some(tag) = &p.subset_tag {
                let e = by_subset.entry(tag).or_default();
                e.0.push(p.gold);
                e.1.push(*s);
            }
        }
        let subsets: BTreeMap<String, f64> = by_subset
            .into_iter()
            .filter_map(|(tag, (g, s))| spearman(&g, &s).ok().map(|r| (tag.to_string(), 100.0 * r)))
            .collect();
        if !subsets.is_empty() {
            report.per_subset.insert(task.clone(), subsets);
        }
    }
    report.average =
        report.per_task_spearman.values().sum::<f64>() / report.per_task_spearman.len() as f64;
    Ok(report)
}

/// Alignment over pairs with gold above [`POSITIVE_GOLD_THRESHOLD`] and
/// uniformity over every distinct sentence of `pairs`.
pub fn alignment_uniformity(
    embedder: &dyn SentenceEmbedder,
    pairs: &[StsPair],
    exec: Execution,
) -> Result<(f64, f64)> {
    let positives: Vec<&StsPair> = pairs
        .iter()
        .filter(|p| p.gold > POSITIVE_GOLD_THRESHOLD)
        .collect();
    if positives.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no pairs with gold above {POSITIVE_GOLD_THRESHOLD}"
        )));
    }
    let mut sentences: Vec<&str> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for p in pairs {
        for s in [p.sent_a.as_str(), p.sent_b.as_str()] {
            if seen.insert(s) {
                sentences.push(s);
            }
        }
    }
    let vectors = exec
        .map(&sentences, |s| embedder.embed(s))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let lookup: HashMap<&str, &DenseVector> =
        sentences.iter().copied().zip(vectors.iter()).collect();
    let pos: Vec<(DenseVector, DenseVector)> = positives
        .iter()
        .map(|p| {
            (
                lookup[p.sent_a.as_str()].clone(),
                lookup[p.sent_b.as_str()].clone(),
            )
        })
        .collect();
    Ok((alignment_loss(&pos)?, uniformity_loss(&vectors)?))
}

/// Fraction of queries whose true target ranks in the top `k` by cosine
/// similarity. Ties go to the lower target index.
pub fn recall_at_k(
    queries: &[DenseVector],
    targets: &[DenseVector],
    truth: &[usize],
    k: usize,
) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if targets.is_empty() || queries.is_empty() {
        return Err(Error::Empty("recall needs queries and targets"));
    }
    if truth.len() != queries.len() {
        return Err(Error::DimensionMismatch {
            expected: queries.len(),
            got: truth.len(),
        });
    }
    let mut hits = 0usize;
    for (q, &t) in queries.iter().zip(truth) {
        if t >= targets.len() {
            return Err(Error::IndexOutOfRange {
                index: t,
                len: targets.len(),
            });
        }
        let truth_sim = numeric::cosine_sim(q, &targets[t])?;
        let mut rank = 0usize;
        for (j, target) in targets.iter().enumerate() {
            let s = numeric::cosine_sim(q, target)?;
            if s > truth_sim || (s == truth_sim && j < t) {
                rank += 1;
            }
        }
        if rank < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / queries.len() as f64)
}

/// Sentences with precomputed evaluation embeddings.
#[derive(Clone, Debug)]
pub struct EmbeddedCorpus {
    pub sentences: Vec<String>,
    pub vectors: Vec<DenseVector>,
}

impl EmbeddedCorpus {
    pub fn build(
        embedder: &dyn SentenceEmbedder,
        sentences: Vec<String>,
        exec: Execution,
    ) -> Result<Self> {
        let vectors = exec
            .map(&sentences, |s| embedder.embed(s))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        Ok(EmbeddedCorpus { sentences, vectors })
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Neighbor {
    pub index: usize,
    pub sentence: String,
    pub score: f64,
}

/// Top-`k` corpus sentences by cosine similarity to the query, skipping
/// corpus entries identical to the query string.
pub fn nearest_sentences(
    query: &str,
    embedder: &dyn SentenceEmbedder,
    corpus: &EmbeddedCorpus,
    k: usize,
) -> Result<Vec<Neighbor>> {
    if corpus.is_empty() {
        return Err(Error::Empty("retrieval corpus"));
    }
    let q = embedder.embed(query)?;
    let mut scored = Vec::with_capacity(corpus.len());
    for (i, (s, v)) in corpus.sentences.iter().zip(&corpus.vectors).enumerate() {
        if s == query {
            continue;
        }
        scored.push((i, numeric::cosine_sim(&q, v)?));
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(scored
        .into_iter()
        .take(k)
        .map(|(index, score)| Neighbor {
            index,
            sentence: corpus.sentences[index].clone(),
            score,
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub dof: f64,
    pub p_value: f64,
    pub significant: bool,
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// Two-sided Welch t-test. When both samples have zero variance the test is
/// decided by the means alone: equal means give `t = 0` (not significant),
/// unequal means give an infinite `t` (significant).
pub fn welch_t_test(a: &[f64], b: &[f64], alpha: f64) -> Result<TTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "t-test needs at least 2 samples per group, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "alpha {alpha} outside (0, 1)"
        )));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (sa, sb) = (va / na, vb / nb);
    let se2 = sa + sb;
    if se2 == 0.0 {
        let dof = na + nb - 2.0;
        return Ok(if ma == mb {
            TTest {
                t: 0.0,
                dof,
                p_value: 1.0,
                significant: false,
            }
        } else {
            TTest {
                t: if ma > mb {
                    f64::INFINITY
                } else {
                    f64::NEG_INFINITY
                },
                dof,
                p_value: 0.0,
                significant: true,
            }
        });
    }
    let t = (ma - mb) / se2.sqrt();
    let dof = se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, dof)
        .map_err(|e| Error::InvalidArgument(format!("t distribution: {e}")))?;
    let p_value = (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0);
    Ok(TTest {
        t,
        dof,
        p_value,
        significant: p_value < alpha,
    })
}
