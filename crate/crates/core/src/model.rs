//! The trainable text encoder, its projection heads and the frozen image
//! feature channel.
//!
//! The encoder is an embedding table with mean pooling. Dropout is applied
//! once to the pooled vector, so two passes with different masks give the
//! positive pair for the textual objective. Three single-layer tanh heads sit
//! on top: one for the textual objective and one per modality for the shared
//! grounded space, whose outputs are L2-normalized.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{self, DenseMatrix, DenseVector};
use crate::seed;

pub type TokenId = u32;

/// Splits on anything that is not alphanumeric, folds case and hashes each
/// token into `[0, vocab_size)`.
pub fn tokenize(text: &str, vocab_size: usize) -> Result<Vec<TokenId>> {
    if vocab_size == 0 || vocab_size > TokenId::MAX as usize {
        return Err(Error::InvalidArgument(format!(
            "vocabulary size {vocab_size}"
        )));
    }
    let ids: Vec<TokenId> = text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| (seed::hash_str(&w.to_lowercase()) % vocab_size as u64) as TokenId)
        .collect();
    if ids.is_empty() {
        return Err(Error::Empty("text contains no tokens"));
    }
    Ok(ids)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    /// Encoder width.
    pub d: usize,
    /// Shared grounded-space width.
    pub d_s: usize,
    /// Image feature width.
    pub d_v: usize,
    pub vocab: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Dims {
            d: 32,
            d_s: 16,
            d_v: 48,
            vocab: 4096,
        }
    }
}

impl Dims {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d_s == 0 || self.d_v == 0 || self.vocab == 0 {
            return Err(Error::InvalidConfig(format!(
                "all dimensions must be positive: {self:?}"
            )));
        }
        if self.vocab > TokenId::MAX as usize {
            return Err(Error::InvalidConfig(format!(
                "vocabulary {} too large",
                self.vocab
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Head {
    Textual,
    SharedText,
    SharedImage,
}

/// `tanh(W x + b)` parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
}

impl Affine {
    fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Affine {
            weight: DenseMatrix::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    /// Writes `tanh(W x + b)` into `out`.
    pub(crate) fn forward_into(&self, x: &[f64], out: &mut [f64]) {
        self.weight.matvec_into(x, out);
        for (o, b) in out.iter_mut().zip(&self.bias) {
            *o = (*o + b).tanh();
        }
    }
}

/// Identifies one contiguous parameter array.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Embed,
    TextualWeight,
    TextualBias,
    SharedTextWeight,
    SharedTextBias,
    SharedImageWeight,
    SharedImageBias,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 7] = [
        ParamGroup::Embed,
        ParamGroup::TextualWeight,
        ParamGroup::TextualBias,
        ParamGroup::SharedTextWeight,
        ParamGroup::SharedTextBias,
        ParamGroup::SharedImageWeight,
        ParamGroup::SharedImageBias,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Embed => "embed_table",
            ParamGroup::TextualWeight => "head_textual.weight",
            ParamGroup::TextualBias => "head_textual.bias",
            ParamGroup::SharedTextWeight => "head_shared_text.weight",
            ParamGroup::SharedTextBias => "head_shared_text.bias",
            ParamGroup::SharedImageWeight => "head_shared_image.weight",
            ParamGroup::SharedImageBias => "head_shared_image.bias",
        }
    }
}

/// One full set of parameter-shaped arrays. Used both for values and for
/// their gradient slots.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensors {
    pub embed: DenseMatrix,
    pub textual: Affine,
    pub shared_text: Affine,
    pub shared_image: Affine,
}

impl Tensors {
    pub fn zeros(dims: &Dims) -> Self {
        Tensors {
            embed: DenseMatrix::zeros(dims.vocab, dims.d),
            textual: Affine::zeros(dims.d, dims.d),
            shared_text: Affine::zeros(dims.d_s, dims.d),
            shared_image: Affine::zeros(dims.d_s, dims.d_v),
        }
    }

    pub fn head(&self, head: Head) -> &Affine {
        match head {
            Head::Textual => &self.textual,
            Head::SharedText => &self.shared_text,
            Head::SharedImage => &self.shared_image,
        }
    }

    pub fn group(&self, group: ParamGroup) -> &[f64] {
        match group {
            ParamGroup::Embed => self.embed.as_slice(),
            ParamGroup::TextualWeight => self.textual.weight.as_slice(),
            ParamGroup::TextualBias => &self.textual.bias,
            ParamGroup::SharedTextWeight => self.shared_text.weight.as_slice(),
            ParamGroup::SharedTextBias => &self.shared_text.bias,
            ParamGroup::SharedImageWeight => self.shared_image.weight.as_slice(),
            ParamGroup::SharedImageBias => &self.shared_image.bias,
        }
    }

    pub fn group_mut(&mut self, group: ParamGroup) -> &mut [f64] {
        match group {
            ParamGroup::Embed => self.embed.as_mut_slice(),
            ParamGroup::TextualWeight => self.textual.weight.as_mut_slice(),
            ParamGroup::TextualBias => &mut self.textual.bias,
            ParamGroup::SharedTextWeight => self.shared_text.weight.as_mut_slice(),
            ParamGroup::SharedTextBias => &mut self.shared_text.bias,
            ParamGroup::SharedImageWeight => self.shared_image.weight.as_mut_slice(),
            ParamGroup::SharedImageBias => &mut self.shared_image.bias,
        }
    }

    pub fn len(&self) -> usize {
        ParamGroup::ALL.iter().map(|&g| self.group(g).len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn fill_zero(&mut self) {
        for g in ParamGroup::ALL {
            self.group_mut(g).iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub fn all_finite(&self) -> bool {
        ParamGroup::ALL
            .iter()
            .all(|&g| self.group(g).iter().all(|x| x.is_finite()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    dims: Dims,
    pub values: Tensors,
    pub grads: Tensors,
}

impl ModelParams {
    /// Every parameter drawn uniformly from `[-0.1, 0.1]`, in a fixed order.
    pub fn init(dims: Dims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut values = Tensors::zeros(&dims);
        let mut rng = seed::rng(&[seed, 0x1417]);
        for g in ParamGroup::ALL {
            for x in values.group_mut(g) {
                *x = rng.random_range(-0.1..=0.1);
            }
        }
        Ok(ModelParams {
            dims,
            values,
            grads: Tensors::zeros(&dims),
        })
    }

    pub fn from_values(dims: Dims, values: Tensors) -> Result<Self> {
        dims.validate()?;
        let shape = Tensors::zeros(&dims);
        for g in ParamGroup::ALL {
            if values.group(g).len() != shape.group(g).len() {
                return Err(Error::DimensionMismatch {
                    expected: shape.group(g).len(),
                    got: values.group(g).len(),
                });
            }
        }
        if values.embed.shape() != shape.embed.shape()
            || values.textual.weight.shape() != shape.textual.weight.shape()
            || values.shared_text.weight.shape() != shape.shared_text.weight.shape()
            || values.shared_image.weight.shape() != shape.shared_image.weight.shape()
        {
            return Err(Error::InvalidArgument(
                "parameter shapes do not match dims".into(),
            ));
        }
        if !values.all_finite() {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(ModelParams {
            dims,
            values,
            grads: shape,
        })
    }

    pub fn dims(&self) -> &Dims {
        &self.dims
    }

    pub fn zero_grads(&mut self) {
        self.grads.fill_zero();
    }

    pub(crate) fn check_tokens(&self, token_ids: &[TokenId]) -> Result<()> {
        if token_ids.is_empty() {
            return Err(Error::Empty("sentence has no tokens"));
        }
        if let Some(&bad) = token_ids.iter().find(|&&t| t as usize >= self.dims.vocab) {
            return Err(Error::IndexOutOfRange {
                index: bad as usize,
                len: self.dims.vocab,
            });
        }
        Ok(())
    }

    /// Mean of the embedding rows. Callers have validated the token ids.
    pub(crate) fn pool_into(&self, token_ids: &[TokenId], out: &mut [f64]) {
        out.iter_mut().for_each(|x| *x = 0.0);
        for &t in token_ids {
            numeric::axpy(1.0, self.values.embed.row(t as usize), out);
        }
        let inv = 1.0 / token_ids.len() as f64;
        out.iter_mut().for_each(|x| *x *= inv);
    }
}

/// A per-unit dropout mask over the pooled sentence vector.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMask {
    keep: Vec<bool>,
    keep_prob: f64,
}

impl DropoutMask {
    /// Reproducible mask for one `(seed, instance, pass)` triple.
    pub fn derive(seed: u64, instance: u64, pass: u64, dim: usize, keep_prob: f64) -> Result<Self> {
        check_keep_prob(keep_prob)?;
        let keep = if keep_prob >= 1.0 {
            vec![true; dim]
        } else {
            let mut rng = seed::rng(&[seed, instance, pass]);
            (0..dim).map(|_| rng.random::<f64>() < keep_prob).collect()
        };
        Ok(DropoutMask { keep, keep_prob })
    }

    pub fn disabled(dim: usize) -> Self {
        DropoutMask {
            keep: vec![true; dim],
            keep_prob: 1.0,
        }
    }

    pub fn from_flags(keep: Vec<bool>, keep_prob: f64) -> Result<Self> {
        check_keep_prob(keep_prob)?;
        Ok(DropoutMask { keep, keep_prob })
    }

    pub fn keep_flags(&self) -> &[bool] {
        &self.keep
    }

    pub fn keep_prob(&self) -> f64 {
        self.keep_prob
    }

    pub fn dim(&self) -> usize {
        self.keep.len()
    }

    /// Inverted-dropout multiplier for unit `k`.
    #[inline]
    pub(crate) fn scale(&self, k: usize) -> f64 {
        if self.keep[k] {
            1.0 / self.keep_prob
        } else {
            0.0
        }
    }

    pub(crate) fn apply(&self, x: &mut [f64]) {
        for (k, v) in x.iter_mut().enumerate() {
            *v *= self.scale(k);
        }
    }
}

fn check_keep_prob(keep_prob: f64) -> Result<()> {
    if keep_prob > 0.0 && keep_prob <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "keep_prob {keep_prob} outside (0, 1]"
        )))
    }
}

/// `f_θ(x, z)`: mean-pooled embedding rows with the dropout mask applied.
pub fn encode_sentence(
    token_ids: &[TokenId],
    params: &ModelParams,
    mask: &DropoutMask,
) -> Result<DenseVector> {
    params.check_tokens(token_ids)?;
    if mask.dim() != params.dims.d {
        return Err(Error::DimensionMismatch {
            expected: params.dims.d,
            got: mask.dim(),
        });
    }
    let mut out = vec![0.0; params.dims.d];
    params.pool_into(token_ids, &mut out);
    mask.apply(&mut out);
    DenseVector::new(out)
}

/// Applies one projection head. Shared-space heads are L2-normalized.
pub fn project(params: &ModelParams, head: Head, x: &DenseVector) -> Result<DenseVector> {
    let affine = params.values.head(head);
    if x.dim() != affine.in_dim() {
        return Err(Error::DimensionMismatch {
            expected: affine.in_dim(),
            got: x.dim(),
        });
    }
    let mut out = vec![0.0; affine.out_dim()];
    affine.forward_into(x.as_slice(), &mut out);
    match head {
        Head::Textual => DenseVector::new(out),
        Head::SharedText | Head::SharedImage => DenseVector::new(numeric::normalize_slice(&out)?),
    }
}

/// Evaluation embedding: no dropout and no projection head.
pub fn embed_for_eval(token_ids: &[TokenId], params: &ModelParams) -> Result<DenseVector> {
    encode_sentence(token_ids, params, &DropoutMask::disabled(params.dims.d))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageFeature {
    pub image_id: String,
    pub vector: DenseVector,
}

/// Precomputed image features, keyed by image id. Read-only once loaded.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    ids: Vec<String>,
    index: HashMap<String, usize>,
    data: DenseMatrix,
}

const FEATURE_HEADER: &str = "d_v";

impl FeatureTable {
    pub fn new(features: Vec<ImageFeature>) -> Result<Self> {
        let first = features.first().ok_or(Error::Empty("feature table"))?;
        let dim = first.vector.dim();
        let mut ids = Vec::with_capacity(features.len());
        let mut index = HashMap::with_capacity(features.len());
        let mut data = Vec::with_capacity(features.len() * dim);
        for f in features {
            if f.vector.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: f.vector.dim(),
                });
            }
            if index.insert(f.image_id.clone(), ids.len()).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "duplicate image id `{}`",
                    f.image_id
                )));
            }
            data.extend_from_slice(f.vector.as_slice());
            ids.push(f.image_id);
        }
        let data = DenseMatrix::new(ids.len(), dim, data)?;
        Ok(FeatureTable { ids, index, data })
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn get(&self, image_id: &str) -> Option<&[f64]> {
        self.index.get(image_id).map(|&i| self.data.row(i))
    }

    pub fn require(&self, image_id: &str) -> Result<&[f64]> {
        self.get(image_id)
            .ok_or_else(|| Error::MissingFeature(image_id.to_string()))
    }

    pub fn contains(&self, image_id: &str) -> bool {
        self.index.contains_key(image_id)
    }

    /// Header `d_v<TAB>dim`, then `image_id<TAB>v1,v2,...` per line.
    pub fn to_text(&self) -> String {
        let mut out = format!("{FEATURE_HEADER}\t{}\n", self.dim());
        for (id, row) in self.ids.iter().zip(self.data.iter_rows()) {
            out.push_str(id);
            out.push('\t');
            for (k, x) in row.iter().enumerate() {
                if k > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{x}");
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::parse(path, 1, "missing header line"))?;
        let dim: usize = header
            .strip_prefix(FEATURE_HEADER)
            .and_then(|rest| rest.trim().parse().ok())
            .filter(|&d| d > 0)
            .ok_or_else(|| {
                Error::parse(path, 1, format!("expected `{FEATURE_HEADER}<TAB><dim>`"))
            })?;
        let mut features = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let lineno = i + 1;
            let (id, values) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(path, lineno, "expected `image_id<TAB>values`"))?;
            let vector: Vec<f64> = values
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::parse(path, lineno, e.to_string()))?;
            if vector.len() != dim {
                return Err(Error::parse(
                    path,
                    lineno,
                    format!("expected {dim} values, found {}", vector.len()),
                ));
            }
            let vector =
                DenseVector::new(vector).map_err(|e| Error::parse(path, lineno, e.to_string()))?;
            features.push(ImageFeature {
                image_id: id.to_string(),
                vector,
            });
        }
        if features.is_empty() {
            return Err(Error::parse(path, 1, "no feature records"));
        }
        FeatureTable::new(features)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        FeatureTable::parse(&text, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}
