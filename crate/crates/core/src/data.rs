//! Corpus ingestion, caption sampling, batch planning and the data-side
//! ablations.
//!
//! File formats (all UTF-8, one record per line):
//!
//! * sentence corpus: one sentence per line, blank lines ignored;
//! * captions: `image_id<TAB>caption`, several lines per image allowed;
//! * STS pairs: `sent_a<TAB>sent_b<TAB>gold[<TAB>subset_tag]`;
//! * image features: see [`FeatureTable`].

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::StsPair;
use crate::model::{FeatureTable, TokenId};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SentenceRecord {
    pub id: String,
    pub text: String,
}

impl SentenceRecord {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::Empty("sentence text"));
        }
        Ok(SentenceRecord {
            id: id.into(),
            text,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaptionGroup {
    pub image_id: String,
    pub captions: Vec<String>,
}

/// One sampled caption paired with its image.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptionPair {
    pub sentence: SentenceRecord,
    pub image_id: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchKind {
    TextOnly,
    Multimodal,
}

impl BatchKind {
    pub fn tag(self) -> &'static str {
        match self {
            BatchKind::TextOnly => "text",
            BatchKind::Multimodal => "mm",
        }
    }
}

/// A homogeneous training batch.
#[derive(Clone, Debug, PartialEq)]
pub struct MiniBatch {
    pub kind: BatchKind,
    pub sentences: Vec<Vec<TokenId>>,
    /// Aligned with `sentences`; empty for text-only batches.
    pub image_ids: Vec<String>,
}

impl MiniBatch {
    pub fn text_only(sentences: Vec<Vec<TokenId>>) -> Self {
        MiniBatch {
            kind: BatchKind::TextOnly,
            sentences,
            image_ids: Vec::new(),
        }
    }

    pub fn multimodal(sentences: Vec<Vec<TokenId>>, image_ids: Vec<String>) -> Result<Self> {
        if sentences.len() != image_ids.len() {
            return Err(Error::DimensionMismatch {
                expected: sentences.len(),
                got: image_ids.len(),
            });
        }
        Ok(MiniBatch {
            kind: BatchKind::Multimodal,
            sentences,
            image_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Records are identified by their 1-based line number.
pub fn parse_sentence_corpus(text: &str, path: &Path) -> Result<Vec<SentenceRecord>> {
    let records: Vec<SentenceRecord> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| SentenceRecord {
            id: (i + 1).to_string(),
            text: l.trim().to_string(),
        })
        .collect();
    if records.is_empty() {
        return Err(Error::parse(path, 1, "corpus has no sentences"));
    }
    Ok(records)
}

pub fn load_sentence_corpus(path: &Path) -> Result<Vec<SentenceRecord>> {
    parse_sentence_corpus(&read(path)?, path)
}

pub fn write_sentence_corpus<S: AsRef<str>>(path: &Path, sentences: &[S]) -> Result<()> {
    let mut out = String::new();
    for s in sentences {
        out.push_str(s.as_ref());
        out.push('\n');
    }
    write(path, &out)
}

/// Groups keep first-appearance order.
pub fn parse_captions(text: &str, path: &Path) -> Result<Vec<CaptionGroup>> {
    let mut groups: Vec<CaptionGroup> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, caption) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(path, i + 1, "expected `image_id<TAB>caption`"))?;
        let (id, caption) = (id.trim(), caption.trim());
        if id.is_empty() || caption.is_empty() {
            return Err(Error::parse(path, i + 1, "empty image id or caption"));
        }
        let slot = *index.entry(id.to_string()).or_insert_with(|| {
            groups.push(CaptionGroup {
                image_id: id.to_string(),
                captions: Vec::new(),
            });
            groups.len() - 1
        });
        groups[slot].captions.push(caption.to_string());
    }
    if groups.is_empty() {
        return Err(Error::parse(path, 1, "captions file has no records"));
    }
    Ok(groups)
}

pub fn load_captions(path: &Path) -> Result<Vec<CaptionGroup>> {
    parse_captions(&read(path)?, path)
}

pub fn write_captions(path: &Path, groups: &[CaptionGroup]) -> Result<()> {
    let mut out = String::new();
    for g in groups {
        for c in &g.captions {
            let _ = writeln!(out, "{}\t{}", g.image_id, c);
        }
    }
    write(path, &out)
}

/// Picks one caption per image, uniformly, with a generator seeded from
/// `(seed, image_id)`.
pub fn sample_captions(
    groups: &[CaptionGroup],
    features: &FeatureTable,
    seed: u64,
) -> Result<Vec<CaptionPair>> {
    groups
        .iter()
        .map(|g| {
            if !features.contains(&g.image_id) {
                return Err(Error::MissingFeature(g.image_id.clone()));
            }
            if g.captions.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "image `{}` has no captions",
                    g.image_id
                )));
            }
            let mut rng = seed::rng(&[seed, seed::hash_str(&g.image_id)]);
            let k = rng.random_range(0..g.captions.len());
            Ok(CaptionPair {
                sentence: SentenceRecord::new(
                    format!("{}#{k}", g.image_id),
                    g.captions[k].clone(),
                )?,
                image_id: g.image_id.clone(),
            })
        })
        .collect()
}

/// A caption dataset together with its frozen image features.
#[derive(Clone, Debug)]
pub struct MultimodalCorpus {
    pub groups: Vec<CaptionGroup>,
    pub features: FeatureTable,
}

impl MultimodalCorpus {
    pub fn new(groups: Vec<CaptionGroup>, features: FeatureTable) -> Result<Self> {
        if let Some(g) = groups.iter().find(|g| !features.contains(&g.image_id)) {
            return Err(Error::MissingFeature(g.image_id.clone()));
        }
        Ok(MultimodalCorpus { groups, features })
    }

    pub fn load(captions: &Path, features: &Path) -> Result<Self> {
        MultimodalCorpus::new(load_captions(captions)?, FeatureTable::load(features)?)
    }

    pub fn sample(&self, seed: u64) -> Result<Vec<CaptionPair>> {
        sample_captions(&self.groups, &self.features, seed)
    }
}

pub fn load_multimodal_dataset(
    captions_path: &Path,
    features_path: &Path,
    seed: u64,
) -> Result<Vec<CaptionPair>> {
    let groups = load_captions(captions_path)?;
    let features = FeatureTable::load(features_path)?;
    sample_captions(&groups, &features, seed)
}

pub fn parse_sts(text: &str, path: &Path) -> Result<Vec<StsPair>> {
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if !(3..=4).contains(&fields.len()) {
            return Err(Error::parse(
                path,
                i + 1,
                format!(
                    "expected 3 or 4 tab-separated fields, found {}",
                    fields.len()
                ),
            ));
        }
        let gold: f64 = fields[2]
            .trim()
            .parse()
            .map_err(|e| Error::parse(path, i + 1, format!("gold score: {e}")))?;
        let pair = StsPair::new(
            fields[0],
            fields[1],
            gold,
            fields
                .get(3)
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty()),
        )
        .map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        pairs.push(pair);
    }
    if pairs.is_empty() {
        return Err(Error::parse(path, 1, "no STS pairs"));
    }
    Ok(pairs)
}

pub fn load_sts(path: &Path) -> Result<Vec<StsPair>> {
    parse_sts(&read(path)?, path)
}

pub fn write_sts(path: &Path, pairs: &[StsPair]) -> Result<()> {
    let mut out = String::new();
    for p in pairs {
        let _ = write!(out, "{}\t{}\t{}", p.sent_a, p.sent_b, p.gold);
        if let Some(tag) = &p.subset_tag {
            let _ = write!(out, "\t{tag}");
        }
        out.push('\n');
    }
    write(path, &out)
}

/// One planned batch: a source index and the item indices drawn from it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchDescriptor {
    pub source: usize,
    pub kind: BatchKind,
    pub indices: Vec<usize>,
}

/// A training source as seen by the planner.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PlanSource {
    pub kind: BatchKind,
    pub size: usize,
}

/// Plans `epochs` passes over every source. Within an epoch each source is
/// shuffled without replacement and chunked into batches of at most
/// `batch_size` (partial last batch kept); the batches of all sources are
/// then interleaved by a seeded shuffle, so a batch comes from a source in
/// proportion to that source's size.
pub fn plan_batches_multi(
    sources: &[PlanSource],
    batch_size: usize,
    epochs: usize,
    seed: u64,
) -> Result<Vec<BatchDescriptor>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument(
            "batch size must be at least 1".into(),
        ));
    }
    if sources.iter().all(|s| s.size == 0) {
        return Err(Error::Empty("all training sources are empty"));
    }
    let mut plan = Vec::new();
    for epoch in 0..epochs as u64 {
        let mut epoch_batches = Vec::new();
        for (s, src) in sources.iter().enumerate() {
            let mut order: Vec<usize> = (0..src.size).collect();
            order.shuffle(&mut seed::rng(&[seed, epoch, s as u64, 0x51]));
            epoch_batches.extend(order.chunks(batch_size).map(|chunk| BatchDescriptor {
                source: s,
                kind: src.kind,
                indices: chunk.to_vec(),
            }));
        }
        epoch_batches.shuffle(&mut seed::rng(&[seed, epoch, 0x0BAD]));
        plan.extend(epoch_batches);
    }
    Ok(plan)
}

/// Two-source form: a text-only corpus of size `text_size` and a multimodal
/// corpus of size `multimodal_size` (sources 0 and 1).
pub fn plan_batches(
    text_size: usize,
    multimodal_size: usize,
    batch_size: usize,
    epochs: usize,
    seed: u64,
) -> Result<Vec<BatchDescriptor>> {
    plan_batches_multi(
        &[
            PlanSource {
                kind: BatchKind::TextOnly,
                size: text_size,
            },
            PlanSource {
                kind: BatchKind::Multimodal,
                size: multimodal_size,
            },
        ],
        batch_size,
        epochs,
        seed,
    )
}

/// Permutes image ids across the whole dataset, leaving sentences in place.
pub fn shuffle_image_ablation(pairs: &[CaptionPair], seed: u64) -> Result<Vec<CaptionPair>> {
    if pairs.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "shuffling needs at least 2 pairs, got {}",
            pairs.len()
        )));
    }
    let mut ids: Vec<&String> = pairs.iter().map(|p| &p.image_id).collect();
    ids.shuffle(&mut seed::rng(&[seed, 0x5417]));
    Ok(pairs
        .iter()
        .zip(ids)
        .map(|(p, id)| CaptionPair {
            sentence: p.sentence.clone(),
            image_id: id.clone(),
        })
        .collect())
}

/// Uniform seeded sample of `n` items without replacement, in shuffled order.
pub fn limit_training_samples<T: Clone>(dataset: &[T], n: usize, seed: u64) -> Result<Vec<T>> {
    if n == 0 || n > dataset.len() {
        return Err(Error::InvalidArgument(format!(
            "sample limit {n} outside 1..={}",
            dataset.len()
        )));
    }
    let mut rng = seed::rng(&[seed, 0x11A1]);
    Ok(rand::seq::index::sample(&mut rng, dataset.len(), n)
        .into_iter()
        .map(|i| dataset[i].clone())
        .collect())
}
