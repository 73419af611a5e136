//! Evaluation of trained parameters: STS, embedding geometry and
//! cross-modal retrieval.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{self, CaptionPair};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::metrics::{self, EvalReport, SentenceEmbedder, StsPair, POSITIVE_GOLD_THRESHOLD};
use crate::model::{self, FeatureTable, Head, ModelParams};
use crate::numeric::DenseVector;

/// Sentence embedder backed by model parameters (no dropout, no head).
#[derive(Clone, Copy, Debug)]
pub struct ModelEmbedder<'a> {
    pub params: &'a ModelParams,
}

impl SentenceEmbedder for ModelEmbedder<'_> {
    fn embed(&self, text: &str) -> Result<DenseVector> {
        let tokens = model::tokenize(text, self.params.dims().vocab)?;
        model::embed_for_eval(&tokens, self.params)
    }
}

/// Loads STS files into tasks keyed by file stem.
pub fn load_tasks(paths: &[PathBuf]) -> Result<BTreeMap<String, Vec<StsPair>>> {
    if paths.is_empty() {
        return Err(Error::Empty("no STS task files"));
    }
    let mut tasks = BTreeMap::new();
    for p in paths {
        let name = p
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| p.display().to_string());
        let pairs = data::load_sts(p)?;
        if pairs.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "task file {} has no pairs",
                p.display()
            )));
        }
        if tasks.insert(name.clone(), pairs).is_some() {
            return Err(Error::InvalidArgument(format!(
                "duplicate task name `{name}`"
            )));
        }
    }
    Ok(tasks)
}

pub fn evaluate_params(
    params: &ModelParams,
    tasks: &BTreeMap<String, Vec<StsPair>>,
    exec: Execution,
) -> Result<EvalReport> {
    metrics::sts_evaluate(&ModelEmbedder { params }, tasks, exec)
}

pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    tasks: &BTreeMap<String, Vec<StsPair>>,
    exec: Execution,
) -> Result<EvalReport> {
    evaluate_params(&ckpt.params, tasks, exec)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpaceAnalysis {
    pub alignment: f64,
    pub uniformity: f64,
    pub positive_pairs: usize,
    pub pairs: usize,
}

impl SpaceAnalysis {
    pub const CSV_HEADER: &'static str = "label,alignment,uniformity,positive_pairs,pairs";

    pub fn csv_row(&self, label: &str) -> String {
        format!(
            "{label},{},{},{},{}",
            self.alignment, self.uniformity, self.positive_pairs, self.pairs
        )
    }
}

/// Alignment over the gold > 4.0 pairs and uniformity over every sentence
/// of `pairs`, both on normalized evaluation embeddings.
pub fn analyze_with(
    embedder: &dyn SentenceEmbedder,
    pairs: &[StsPair],
    exec: Execution,
) -> Result<SpaceAnalysis> {
    let positive_pairs = pairs
        .iter()
        .filter(|p| p.gold > POSITIVE_GOLD_THRESHOLD)
        .count();
    let (alignment, uniformity) = metrics::alignment_uniformity(embedder, pairs, exec)?;
    Ok(SpaceAnalysis {
        alignment,
        uniformity,
        positive_pairs,
        pairs: pairs.len(),
    })
}

pub fn analyze_embedding_space(
    ckpt: &Checkpoint,
    sts_file: &Path,
    exec: Execution,
) -> Result<SpaceAnalysis> {
    let pairs = data::load_sts(sts_file)?;
    analyze_with(
        &ModelEmbedder {
            params: &ckpt.params,
        },
        &pairs,
        exec,
    )
}

/// Sentence and image embeddings in the shared space, aligned by index.
pub fn shared_space_embeddings(
    params: &ModelParams,
    pairs: &[CaptionPair],
    features: &FeatureTable,
    exec: Execution,
) -> Result<(Vec<DenseVector>, Vec<DenseVector>)> {
    if pairs.is_empty() {
        return Err(Error::Empty("no caption pairs"));
    }
    if features.dim() != params.dims().d_v {
        return Err(Error::DimensionMismatch {
            expected: params.dims().d_v,
            got: features.dim(),
        });
    }
    let embedder = ModelEmbedder { params };
    let text = exec
        .map(pairs, |p| {
            let pooled = embedder.embed(&p.sentence.text)?;
            model::project(params, Head::SharedText, &pooled)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let images = exec
        .map(pairs, |p| {
            let v = DenseVector::new(features.require(&p.image_id)?.to_vec())?;
            model::project(params, Head::SharedImage, &v)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok((text, images))
}

/// Caption→image and image→caption recall@k in the shared space. Keys are
/// `t2i@k` and `i2t@k`.
pub fn cross_modal_recall(
    params: &ModelParams,
    pairs: &[CaptionPair],
    features: &FeatureTable,
    ks: &[usize],
    exec: Execution,
) -> Result<BTreeMap<String, f64>> {
    let (text, images) = shared_space_embeddings(params, pairs, features, exec)?;
    let truth: Vec<usize> = (0..pairs.len()).collect();
    let mut out = BTreeMap::new();
    for &k in ks {
        out.insert(
            format!("t2i@{k}"),
            metrics::recall_at_k(&text, &images, &truth, k)?,
        );
        out.insert(
            format!("i2t@{k}"),
            metrics::recall_at_k(&images, &text, &truth, k)?,
        );
    }
    Ok(out)
}
