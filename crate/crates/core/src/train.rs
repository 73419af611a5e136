//! The training loop: batch planning, Adam updates, periodic dev
//! evaluation and best-checkpoint selection.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint, ConfigHash};
use crate::data::{self, BatchKind, CaptionPair, MiniBatch};
use crate::error::{Error, Result};
use crate::eval;
use crate::exec::Execution;
use crate::metrics::StsPair;
use crate::model::{self, Dims, FeatureTable, ModelParams, TokenId};
use crate::objectives::{self, LossConfig, MaskStream};
use crate::optim::{Adam, AdamConfig};
use crate::seed;
use crate::synth::GroundedCorpus;

/// Name of the dev task in evaluation reports produced during training.
pub const DEV_TASK: &str = "dev";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Dropout-noise contrastive loss only. Caption batches are trained as
    /// text and the shared-space heads are never touched.
    Simcse,
    /// Textual loss plus λ times the multimodal loss on caption batches.
    #[default]
    Mcse,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::Simcse => "simcse",
            Objective::Mcse => "mcse",
        }
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "simcse" => Ok(Objective::Simcse),
            "mcse" => Ok(Objective::Mcse),
            other => Err(Error::InvalidConfig(format!("unknown objective `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: Objective,
    pub tau: f64,
    pub tau_prime: f64,
    pub lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// When set, overrides `epochs`: the plan is extended over as many
    /// epochs as needed and cut at exactly this many steps.
    pub steps: Option<usize>,
    pub eval_every_steps: usize,
    pub keep_prob: f64,
    pub d: usize,
    pub d_s: usize,
    pub d_v: usize,
    pub vocab: usize,
    pub seed: u64,
    pub text_corpus: Option<PathBuf>,
    pub captions: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub dev_sts: Option<PathBuf>,
    pub shuffle_images: bool,
    /// Per-source cap on training items, drawn by a seeded sample.
    pub sample_limit: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let loss = LossConfig::default();
        let dims = Dims::default();
        TrainConfig {
            objective: Objective::Mcse,
            tau: loss.tau,
            tau_prime: loss.tau_prime,
            lambda: loss.lambda,
            learning_rate: 3e-3,
            batch_size: 64,
            epochs: 6,
            steps: None,
            eval_every_steps: 125,
            keep_prob: 0.9,
            d: dims.d,
            d_s: dims.d_s,
            d_v: dims.d_v,
            vocab: dims.vocab,
            seed: 0,
            text_corpus: None,
            captions: None,
            features: None,
            dev_sts: None,
            shuffle_images: false,
            sample_limit: None,
        }
    }
}

impl TrainConfig {
    pub fn loss(&self) -> LossConfig {
        LossConfig {
            tau: self.tau,
            tau_prime: self.tau_prime,
            lambda: self.lambda,
        }
    }

    pub fn dims(&self) -> Dims {
        Dims {
            d: self.d,
            d_s: self.d_s,
            d_v: self.d_v,
            vocab: self.vocab,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss().validate()?;
        self.dims().validate()?;
        AdamConfig::with_learning_rate(self.learning_rate).validate()?;
        if self.eval_every_steps == 0 {
            return Err(Error::InvalidConfig(
                "eval_every_steps must be at least 1".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if self.steps.is_none() && self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.steps == Some(0) {
            return Err(Error::InvalidConfig("steps must be at least 1".into()));
        }
        if self.sample_limit == Some(0) {
            return Err(Error::InvalidConfig(
                "sample_limit must be at least 1".into(),
            ));
        }
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "keep_prob {} outside (0, 1]",
                self.keep_prob
            )));
        }
        Ok(())
    }

    /// SHA-256 of the config's canonical JSON form.
    pub fn hash(&self) -> ConfigHash {
        let json = serde_json::to_vec(self).expect("config serializes");
        checkpoint::hash_bytes(&json)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }
}

/// In-memory training inputs.
#[derive(Clone, Debug, Default)]
pub struct TrainingData {
    pub text: Vec<String>,
    pub pairs: Vec<CaptionPair>,
    pub features: Option<FeatureTable>,
    pub dev: Vec<StsPair>,
}

impl TrainingData {
    /// Reads the files named in `cfg`; one caption per image is sampled
    /// with the run seed.
    pub fn load(cfg: &TrainConfig) -> Result<Self> {
        let text = match &cfg.text_corpus {
            Some(p) => data::load_sentence_corpus(p)?
                .into_iter()
                .map(|r| r.text)
                .collect(),
            None => Vec::new(),
        };
        let (pairs, features) = match (&cfg.captions, &cfg.features) {
            (Some(c), Some(f)) => {
                let corpus = data::MultimodalCorpus::load(c, f)?;
                (corpus.sample(cfg.seed)?, Some(corpus.features))
            }
            (None, None) => (Vec::new(), None),
            _ => {
                return Err(Error::InvalidConfig(
                    "captions and features must be given together".into(),
                ))
            }
        };
        let dev = match &cfg.dev_sts {
            Some(p) => data::load_sts(p)?,
            None => {
                return Err(Error::InvalidConfig(
                    "dev_sts is required for checkpoint selection".into(),
                ))
            }
        };
        Ok(TrainingData {
            text,
            pairs,
            features,
            dev,
        })
    }

    pub fn from_corpus(corpus: &GroundedCorpus, seed: u64) -> Result<Self> {
        Ok(TrainingData {
            text: corpus.text_only_sentences(),
            pairs: data::sample_captions(&corpus.caption_groups, &corpus.features, seed)?,
            features: Some(corpus.features.clone()),
            dev: corpus.sts_dev.clone(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LogRow {
    Step {
        step: usize,
        kind: BatchKind,
        loss_s: f64,
        loss_m: Option<f64>,
        total: f64,
    },
    Dev {
        step: usize,
        spearman: f64,
    },
}

/// Step-indexed training log. Floats are written in shortest round-trip
/// form, so equal logs are equal bit for bit.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub const HEADER: &'static str = "step\tkind\tloss_S\tloss_M\ttotal";

    pub fn to_tsv(&self) -> String {
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        for row in &self.rows {
            match row {
                LogRow::Step {
                    step,
                    kind,
                    loss_s,
                    loss_m,
                    total,
                } => {
                    let m = loss_m.map_or_else(|| "-".to_string(), |m| m.to_string());
                    let _ = writeln!(out, "{step}\t{}\t{loss_s}\t{m}\t{total}", kind.tag());
                }
                LogRow::Dev { step, spearman } => {
                    let _ = writeln!(out, "{step}\tdev\t-\t-\t{spearman}");
                }
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        self.to_tsv().replace('\t', ",")
    }

    pub fn step_totals(&self) -> Vec<f64> {
        self.rows
            .iter()
            .filter_map(|r| match r {
                LogRow::Step { total, .. } => Some(*total),
                LogRow::Dev { .. } => None,
            })
            .collect()
    }

    pub fn dev_scores(&self) -> Vec<(usize, f64)> {
        self.rows
            .iter()
            .filter_map(|r| match r {
                LogRow::Dev { step, spearman } => Some((*step, *spearman)),
                LogRow::Step { .. } => None,
            })
            .collect()
    }

    pub fn steps(&self) -> usize {
        self.step_totals().len()
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub final_params: ModelParams,
    pub log: TrainLog,
}

struct Prepared {
    text: Vec<Vec<TokenId>>,
    pair_tokens: Vec<Vec<TokenId>>,
    pair_images: Vec<String>,
}

fn prepare(cfg: &TrainConfig, data: &TrainingData) -> Result<Prepared> {
    let limit = |n: usize, len: usize| cfg.sample_limit.filter(|&l| l < len).map(|l| l.min(n));
    let text = match limit(usize::MAX, data.text.len()) {
        Some(n) => data::limit_training_samples(&data.text, n, seed::derive(&[cfg.seed, 0]))?,
        None => data.text.clone(),
    };
    let mut pairs = match limit(usize::MAX, data.pairs.len()) {
        Some(n) => data::limit_training_samples(&data.pairs, n, seed::derive(&[cfg.seed, 1]))?,
        None => data.pairs.clone(),
    };
    if cfg.shuffle_images {
        pairs = data::shuffle_image_ablation(&pairs, cfg.seed)?;
    }
    if !pairs.is_empty() {
        let features = data.features.as_ref().ok_or_else(|| {
            Error::InvalidConfig("caption pairs given without image features".into())
        })?;
        if features.dim() != cfg.d_v {
            return Err(Error::InvalidConfig(format!(
                "d_v = {} but image features have dimension {}",
                cfg.d_v,
                features.dim()
            )));
        }
        for p in &pairs {
            features.require(&p.image_id)?;
        }
    }
    let tok = |s: &str| model::tokenize(s, cfg.vocab);
    Ok(Prepared {
        text: text.iter().map(|s| tok(s)).collect::<Result<_>>()?,
        pair_tokens: pairs
            .iter()
            .map(|p| tok(&p.sentence.text))
            .collect::<Result<_>>()?,
        pair_images: pairs.into_iter().map(|p| p.image_id).collect(),
    })
}

/// Number of optimizer steps a run of `cfg` over `data` takes.
pub fn planned_steps(cfg: &TrainConfig, data: &TrainingData) -> Result<usize> {
    Ok(plan(cfg, &prepare(cfg, data)?)?.len())
}

fn plan(cfg: &TrainConfig, p: &Prepared) -> Result<Vec<data::BatchDescriptor>> {
    let n = cfg.batch_size;
    let per_epoch = p.text.len().div_ceil(n) + p.pair_tokens.len().div_ceil(n);
    let epochs = match cfg.steps {
        Some(s) => s.div_ceil(per_epoch.max(1)),
        None => cfg.epochs,
    };
    let mut batches = data::plan_batches(p.text.len(), p.pair_tokens.len(), n, epochs, cfg.seed)?;
    if let Some(s) = cfg.steps {
        batches.truncate(s);
    }
    Ok(batches)
}

/// Trains from the files named in `cfg`.
pub fn train(cfg: &TrainConfig, exec: Execution) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = TrainingData::load(cfg)?;
    train_on(cfg, &data, exec)
}

/// Trains on in-memory data. The result is a deterministic function of
/// `cfg` and `data`; `exec` only changes how dev evaluation is scheduled.
pub fn train_on(cfg: &TrainConfig, data: &TrainingData, exec: Execution) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.dev.is_empty() {
        return Err(Error::Empty("dev STS set"));
    }
    let prepared = prepare(cfg, data)?;
    let batches = plan(cfg, &prepared)?;
    let loss_cfg = cfg.loss();
    let mut params = ModelParams::init(cfg.dims(), cfg.seed)?;
    let mut adam = Adam::new(AdamConfig::with_learning_rate(cfg.learning_rate), &params)?;
    let dev_tasks = BTreeMap::from([(DEV_TASK.to_string(), data.dev.clone())]);
    let config_hash = cfg.hash();
    let mut log = TrainLog::default();
    let mut best: Option<Checkpoint> = None;
    let total_steps = batches.len();

    for (i, desc) in batches.iter().enumerate() {
        let step = i + 1;
        let sentences: Vec<Vec<TokenId>> = match desc.kind {
            BatchKind::TextOnly => desc
                .indices
                .iter()
                .map(|&j| prepared.text[j].clone())
                .collect(),
            BatchKind::Multimodal => desc
                .indices
                .iter()
                .map(|&j| prepared.pair_tokens[j].clone())
                .collect(),
        };
        let batch = match (desc.kind, cfg.objective) {
            (BatchKind::Multimodal, Objective::Mcse) => MiniBatch::multimodal(
                sentences,
                desc.indices
                    .iter()
                    .map(|&j| prepared.pair_images[j].clone())
                    .collect(),
            )?,
            _ => MiniBatch::text_only(sentences),
        };
        let masks = MaskStream {
            seed: seed::derive(&[cfg.seed, step as u64, 0xD20]),
            keep_prob: cfg.keep_prob,
        };
        params.zero_grads();
        let res = match objectives::batch_loss_and_grads(
            &batch,
            data.features.as_ref(),
            &mut params,
            &loss_cfg,
            masks,
        ) {
            Err(Error::NonFinite(_)) => {
                return Err(Error::Diverged {
                    step,
                    value: f64::NAN,
                })
            }
            other => other?,
        };
        if !res.mean_total.is_finite() {
            return Err(Error::Diverged {
                step,
                value: res.mean_total,
            });
        }
        adam.step(&mut params);
        if !params.values.all_finite() {
            return Err(Error::Diverged {
                step,
                value: f64::NAN,
            });
        }
        log.rows.push(LogRow::Step {
            step,
            kind: desc.kind,
            loss_s: res.mean_textual(),
            loss_m: res.mean_multimodal(),
            total: res.mean_total,
        });

        if step % cfg.eval_every_steps == 0 || step == total_steps {
            let report = eval::evaluate_params(&params, &dev_tasks, exec)?;
            let spearman = report.average;
            log.rows.push(LogRow::Dev { step, spearman });
            if best.as_ref().is_none_or(|b| spearman > b.dev_metric) {
                best = Some(Checkpoint {
                    params: ModelParams::from_values(*params.dims(), params.values.clone())?,
                    step,
                    dev_metric: spearman,
                    config_hash,
                });
            }
        }
    }
    let best = best.ok_or(Error::Empty("training plan has no batches"))?;
    Ok(TrainOutcome {
        best,
        final_params: params,
        log,
    })
}

/// Writes `best.ckpt`, `train_log.tsv` and `train_log.csv` under `dir`.
pub fn write_outputs(outcome: &TrainOutcome, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    outcome.best.save(&dir.join("best.ckpt"))?;
    let tsv = dir.join("train_log.tsv");
    std::fs::write(&tsv, outcome.log.to_tsv()).map_err(|e| Error::io(&tsv, e))?;
    let csv = dir.join("train_log.csv");
    std::fs::write(&csv, outcome.log.to_csv()).map_err(|e| Error::io(&csv, e))
}
