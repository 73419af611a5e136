//! Synthetic grounded corpora with known semantics.
//!
//! Each topic owns a disjoint vocabulary and a unit direction in image
//! feature space. Captions are drawn from a single topic and paired with an
//! image whose feature is the topic direction plus Gaussian noise. Text-only
//! sentences and STS sentences are drawn from topic mixtures, and STS gold
//! scores are `5 · max(0, cos)` of the two sentences' mixture vectors, so the
//! mixture vector itself is an embedder with a perfect Spearman score.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{self, CaptionGroup};
use crate::error::{Error, Result};
use crate::metrics::{SentenceEmbedder, StsPair, POSITIVE_GOLD_THRESHOLD};
use crate::model::{FeatureTable, ImageFeature};
use crate::numeric::{self, DenseVector};
use crate::seed;

const ONSETS: [&str; 15] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "h",
];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

/// Number of distinct two-syllable words the generator can produce.
pub const WORD_BUDGET: usize = (ONSETS.len() * VOWELS.len()).pow(2);

/// Gold-score strata used when sampling STS pairs; the last bin is the
/// positive-pair range above 4.0.
const GOLD_BINS: [(f64, f64); 5] = [(0.0, 1.0), (1.0, 2.0), (2.0, 3.0), (3.0, 4.0), (4.0, 5.0)];

/// Minimum share of STS pairs with gold above 4.0.
pub const MIN_POSITIVE_FRACTION: f64 = 0.10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_topics: usize,
    pub words_per_topic: usize,
    pub min_sentence_len: usize,
    pub max_sentence_len: usize,
    pub num_images: usize,
    pub captions_per_image: usize,
    pub num_text_only_sentences: usize,
    pub feature_dim: usize,
    /// Standard deviation of the per-coordinate image feature noise.
    pub feature_noise: f64,
    /// Share of tokens drawn from outside the sentence's topics.
    pub noise_word_rate: f64,
    pub sts_test_pairs: usize,
    pub sts_dev_pairs: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_topics: 8,
            words_per_topic: 300,
            min_sentence_len: 6,
            max_sentence_len: 12,
            num_images: 2000,
            captions_per_image: 3,
            num_text_only_sentences: 8000,
            feature_dim: 48,
            feature_noise: 0.05,
            noise_word_rate: 0.1,
            sts_test_pairs: 400,
            sts_dev_pairs: 200,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.num_topics < 2 {
            return bad(format!("need at least 2 topics, got {}", self.num_topics));
        }
        if self.words_per_topic == 0
            || self.min_sentence_len == 0
            || self.num_images == 0
            || self.captions_per_image == 0
            || self.feature_dim == 0
            || self.sts_test_pairs == 0
            || self.sts_dev_pairs == 0
        {
            return bad("all counts must be positive".into());
        }
        if self.min_sentence_len > self.max_sentence_len {
            return bad("min_sentence_len exceeds max_sentence_len".into());
        }
        if !(self.feature_noise >= 0.0 && self.feature_noise.is_finite()) {
            return bad(format!(
                "feature noise must be non-negative, got {}",
                self.feature_noise
            ));
        }
        if !(0.0..1.0).contains(&self.noise_word_rate) {
            return bad(format!(
                "noise word rate {} outside [0, 1)",
                self.noise_word_rate
            ));
        }
        if self.num_topics * self.words_per_topic > WORD_BUDGET {
            return bad(format!(
                "{} topics × {} words exceeds the word budget of {WORD_BUDGET}",
                self.num_topics, self.words_per_topic
            ));
        }
        Ok(())
    }
}

/// A generated sentence with its ground-truth topic mixture.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSentence {
    pub text: String,
    pub mixture: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct GroundedCorpus {
    pub topic_words: Vec<Vec<String>>,
    pub topic_directions: Vec<Vec<f64>>,
    pub text_only: Vec<SynthSentence>,
    pub caption_groups: Vec<CaptionGroup>,
    /// Topic of each image, aligned with `caption_groups`.
    pub image_topics: Vec<usize>,
    pub features: FeatureTable,
    pub sts_dev: Vec<StsPair>,
    pub sts_test: Vec<StsPair>,
    /// Mixture vector of every STS sentence.
    pub mixtures: HashMap<String, Vec<f64>>,
}

pub const CORPUS_FILE: &str = "corpus.txt";
pub const CAPTIONS_FILE: &str = "captions.tsv";
pub const FEATURES_FILE: &str = "features.tsv";
pub const STS_DEV_FILE: &str = "sts_dev.tsv";
pub const STS_TEST_FILE: &str = "sts_test.tsv";

impl GroundedCorpus {
    pub fn text_only_sentences(&self) -> Vec<String> {
        self.text_only.iter().map(|s| s.text.clone()).collect()
    }

    pub fn ground_truth_embedder(&self) -> GroundTruthEmbedder {
        GroundTruthEmbedder {
            mixtures: self.mixtures.clone(),
        }
    }

    pub fn test_tasks(&self) -> BTreeMap<String, Vec<StsPair>> {
        BTreeMap::from([("sts-synth".to_string(), self.sts_test.clone())])
    }

    /// Writes the corpus in the formats the loaders read.
    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        data::write_sentence_corpus(&dir.join(CORPUS_FILE), &self.text_only_sentences())?;
        data::write_captions(&dir.join(CAPTIONS_FILE), &self.caption_groups)?;
        self.features.save(&dir.join(FEATURES_FILE))?;
        data::write_sts(&dir.join(STS_DEV_FILE), &self.sts_dev)?;
        data::write_sts(&dir.join(STS_TEST_FILE), &self.sts_test)
    }
}

/// Embeds a sentence as its generating topic mixture.
#[derive(Clone, Debug)]
pub struct GroundTruthEmbedder {
    mixtures: HashMap<String, Vec<f64>>,
}

impl SentenceEmbedder for GroundTruthEmbedder {
    fn embed(&self, text: &str) -> Result<DenseVector> {
        let m = self
            .mixtures
            .get(text)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown sentence `{text}`")))?;
        DenseVector::new(m.clone())
    }
}

pub fn gold_from_mixtures(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(5.0 * numeric::cosine_slices(a, b)?.max(0.0))
}

fn make_vocabulary(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<String>> {
    let syllables: Vec<String> = ONSETS
        .iter()
        .flat_map(|o| VOWELS.iter().map(move |v| format!("{o}{v}")))
        .collect();
    let mut words: Vec<String> = syllables
        .iter()
        .flat_map(|a| syllables.iter().map(move |b| format!("{a}{b}")))
        .collect();
    words.shuffle(rng);
    words
        .chunks(cfg.words_per_topic)
        .take(cfg.num_topics)
        .map(|c| c.to_vec())
        .collect()
}

struct Sampler<'a> {
    cfg: &'a SynthConfig,
    words: &'a [Vec<String>],
    seen: HashSet<String>,
}

impl Sampler<'_> {
    fn sentence(&self, mixture: &[f64], rng: &mut ChaCha8Rng) -> String {
        let len = rng.random_range(self.cfg.min_sentence_len..=self.cfg.max_sentence_len);
        let total: f64 = mixture.iter().sum();
        let mut out: Vec<&str> = Vec::with_capacity(len);
        for _ in 0..len {
            let topic = if rng.random::<f64>() < self.cfg.noise_word_rate {
                // Noise words come from a topic outside the mixture when possible.
                let outside: Vec<usize> =
                    (0..mixture.len()).filter(|&t| mixture[t] == 0.0).collect();
                *outside
                    .choose(rng)
                    .unwrap_or(&rng.random_range(0..mixture.len()))
            } else {
                let mut u = rng.random::<f64>() * total;
                let mut pick = mixture.len() - 1;
                for (t, w) in mixture.iter().enumerate() {
                    if u < *w {
                        pick = t;
                        break;
                    }
                    u -= w;
                }
                pick
            };
            out.push(self.words[topic].choose(rng).expect("non-empty vocabulary"));
        }
        out.join(" ")
    }

    /// Draws sentences until one has not been produced before.
    fn unique_sentence(&mut self, mixture: &[f64], rng: &mut ChaCha8Rng) -> String {
        loop {
            let s = self.sentence(mixture, rng);
            if self.seen.insert(s.clone()) {
                return s;
            }
        }
    }
}

fn pure(t: usize, topics: usize) -> Vec<f64> {
    let mut m = vec![0.0; topics];
    m[t] = 1.0;
    m
}

/// One or two topics with random weights.
fn random_mixture(topics: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let a = rng.random_range(0..topics);
    if rng.random::<bool>() {
        return pure(a, topics);
    }
    let mut b = rng.random_range(0..topics - 1);
    if b >= a {
        b += 1;
    }
    let w = rng.random_range(0.15..0.85);
    let mut m = vec![0.0; topics];
    m[a] = w;
    m[b] = 1.0 - w;
    m
}

fn random_unit(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        if let Ok(u) = numeric::normalize_slice(&v) {
            return u;
        }
    }
}

pub fn generate_grounded_corpus(cfg: &SynthConfig) -> Result<GroundedCorpus> {
    cfg.validate()?;
    let t = cfg.num_topics;
    let mut rng = seed::rng(&[cfg.seed, 0x5EED]);
    let topic_words = make_vocabulary(cfg, &mut rng);
    let topic_directions: Vec<Vec<f64>> = (0..t)
        .map(|_| random_unit(cfg.feature_dim, &mut rng))
        .collect();
    let mut sampler = Sampler {
        cfg,
        words: &topic_words,
        seen: HashSet::new(),
    };

    // STS pools first so they never collide with training text.
    let pool_size = |pairs: usize| (pairs / 2).max(40);
    let mut dev_pool = Vec::new();
    let mut test_pool = Vec::new();
    for (pool, n) in [
        (&mut dev_pool, pool_size(cfg.sts_dev_pairs)),
        (&mut test_pool, pool_size(cfg.sts_test_pairs)),
    ] {
        for i in 0..n {
            // Half pure-topic sentences, spread evenly over topics.
            let mixture = if i % 2 == 0 {
                pure((i / 2) % t, t)
            } else {
                random_mixture(t, &mut rng)
            };
            let text = sampler.unique_sentence(&mixture, &mut rng);
            pool.push(SynthSentence { text, mixture });
        }
    }

    let mut caption_groups = Vec::with_capacity(cfg.num_images);
    let mut image_topics = Vec::with_capacity(cfg.num_images);
    let mut features = Vec::with_capacity(cfg.num_images);
    for i in 0..cfg.num_images {
        let topic = rng.random_range(0..t);
        let mixture = pure(topic, t);
        let captions = (0..cfg.captions_per_image)
            .map(|_| sampler.unique_sentence(&mixture, &mut rng))
            .collect();
        let image_id = format!("img{i:05}");
        let noisy: Vec<f64> = topic_directions[topic]
            .iter()
            .map(|u| {
                let n: f64 = StandardNormal.sample(&mut rng);
                u + cfg.feature_noise * n
            })
            .collect();
        features.push(ImageFeature {
            image_id: image_id.clone(),
            vector: DenseVector::new(numeric::normalize_slice(&noisy)?)?,
        });
        caption_groups.push(CaptionGroup { image_id, captions });
        image_topics.push(topic);
    }

    let text_only = (0..cfg.num_text_only_sentences)
        .map(|_| {
            let mixture = random_mixture(t, &mut rng);
            let text = sampler.unique_sentence(&mixture, &mut rng);
            SynthSentence { text, mixture }
        })
        .collect();

    let sts_dev = derive_sts_pairs(&dev_pool, cfg.sts_dev_pairs, seed::derive(&[cfg.seed, 1]))?;
    let sts_test = derive_sts_pairs(&test_pool, cfg.sts_test_pairs, seed::derive(&[cfg.seed, 2]))?;
    let mixtures = dev_pool
        .iter()
        .chain(&test_pool)
        .map(|s| (s.text.clone(), s.mixture.clone()))
        .collect();

    Ok(GroundedCorpus {
        topic_words,
        topic_directions,
        text_only,
        caption_groups,
        image_topics,
        features: FeatureTable::new(features)?,
        sts_dev,
        sts_test,
        mixtures,
    })
}

fn bin_of(gold: f64) -> usize {
    GOLD_BINS
        .iter()
        .position(|&(lo, hi)| {
            if hi >= 5.0 {
                gold > lo
            } else {
                gold >= lo && gold < hi
            }
        })
        .unwrap_or(0)
}

fn subset_tag(a: &SynthSentence, b: &SynthSentence) -> &'static str {
    let is_pure = |s: &SynthSentence| s.mixture.iter().filter(|&&w| w > 0.0).count() == 1;
    match (is_pure(a), is_pure(b)) {
        (true, true) => "pure",
        (false, false) => "mixed",
        _ => "cross",
    }
}

/// Samples `count` distinct pairs, stratified over gold-score bins so the
/// scores cover `[0, 5]` and at least [`MIN_POSITIVE_FRACTION`] of pairs
/// score above 4.0. Pairs of a sentence with itself are never produced.
pub fn derive_sts_pairs(pool: &[SynthSentence], count: usize, seed: u64) -> Result<Vec<StsPair>> {
    if pool.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "STS pool needs at least 2 sentences, got {}",
            pool.len()
        )));
    }
    if count == 0 {
        return Err(Error::InvalidArgument("pair count must be positive".into()));
    }
    let mut rng = seed::rng(&[seed, 0x575]);
    let quota = count.div_ceil(GOLD_BINS.len());
    let min_positive = (MIN_POSITIVE_FRACTION * count as f64).ceil() as usize;
    let mut bins: Vec<Vec<(usize, usize, f64)>> = vec![Vec::new(); GOLD_BINS.len()];
    let mut overflow: Vec<(usize, usize, f64)> = Vec::new();
    let mut used = HashSet::new();
    let attempts = 200 * count + 1000;
    for _ in 0..attempts {
        if bins.iter().all(|b| b.len() >= quota) {
            break;
        }
        let i = rng.random_range(0..pool.len());
        let j = rng.random_range(0..pool.len());
        if i == j || pool[i].text == pool[j].text || !used.insert((i.min(j), i.max(j))) {
            continue;
        }
        let gold = gold_from_mixtures(&pool[i].mixture, &pool[j].mixture)?;
        let b = bin_of(gold);
        if bins[b].len() < quota {
            bins[b].push((i, j, gold));
        } else {
            overflow.push((i, j, gold));
        }
    }
    let positives = bins.last().map_or(0, Vec::len);
    if positives < min_positive.min(count) {
        return Err(Error::InvalidArgument(format!(
            "pool of {} sentences yields only {positives} pairs above {POSITIVE_GOLD_THRESHOLD}; need {min_positive}",
            pool.len()
        )));
    }
    // Round-robin over bins keeps the strata balanced when trimming to `count`.
    let mut chosen = Vec::with_capacity(count);
    let mut cursors = vec![0usize; bins.len()];
    while chosen.len() < count {
        let mut progressed = false;
        for (b, bin) in bins.iter().enumerate().rev() {
            if chosen.len() < count && cursors[b] < bin.len() {
                chosen.push(bin[cursors[b]]);
                cursors[b] += 1;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    let mut extra = overflow.into_iter();
    while chosen.len() < count {
        match extra.next() {
            Some(p) => chosen.push(p),
            None => {
                return Err(Error::InvalidArgument(format!(
                    "pool of {} sentences cannot supply {count} distinct pairs",
                    pool.len()
                )))
            }
        }
    }
    chosen.shuffle(&mut rng);
    chosen
        .into_iter()
        .map(|(i, j, gold)| {
            StsPair::new(
                pool[i].text.clone(),
                pool[j].text.clone(),
                gold,
                Some(subset_tag(&pool[i], &pool[j]).to_string()),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::Execution;
    use crate::metrics::sts_evaluate;

    fn small() -> SynthConfig {
        SynthConfig {
            num_images: 60,
            num_text_only_sentences: 100,
            sts_test_pairs: 120,
            sts_dev_pairs: 60,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn gold_examples() {
        assert_eq!(gold_from_mixtures(&pure(1, 4), &pure(1, 4)).unwrap(), 5.0);
        assert_eq!(gold_from_mixtures(&pure(1, 4), &pure(2, 4)).unwrap(), 0.0);
        let a = [0.5, 0.5, 0.0];
        let b = [0.0, 0.5, 0.5];
        assert_eq!(
            gold_from_mixtures(&a, &b).unwrap(),
            gold_from_mixtures(&b, &a).unwrap()
        );
    }

    #[test]
    fn vocabularies_are_disjoint() {
        let c = generate_grounded_corpus(&small()).unwrap();
        let all: Vec<&String> = c.topic_words.iter().flatten().collect();
        let unique: HashSet<&&String> = all.iter().collect();
        assert_eq!(all.len(), unique.len());
        assert_eq!(c.topic_words.len(), 8);
        assert!(c.topic_words.iter().all(|w| w.len() == 300));
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_grounded_corpus(&small()).unwrap();
        let b = generate_grounded_corpus(&small()).unwrap();
        assert_eq!(a.caption_groups, b.caption_groups);
        assert_eq!(a.features, b.features);
        assert_eq!(a.sts_test, b.sts_test);
        assert_eq!(a.text_only, b.text_only);
        let c = generate_grounded_corpus(&SynthConfig { seed: 4, ..small() }).unwrap();
        assert_ne!(a.sts_test, c.sts_test);
    }

    #[test]
    fn noiseless_features_collapse_per_topic() {
        let c = generate_grounded_corpus(&SynthConfig {
            feature_noise: 0.0,
            ..small()
        })
        .unwrap();
        let mut by_topic: HashMap<usize, &[f64]> = HashMap::new();
        for (g, &t) in c.caption_groups.iter().zip(&c.image_topics) {
            let f = c.features.get(&g.image_id).unwrap();
            assert_eq!(*by_topic.entry(t).or_insert(f), f);
        }
    }

    #[test]
    fn features_unit_norm_and_captions_on_topic() {
        let c = generate_grounded_corpus(&small()).unwrap();
        for (g, &t) in c.caption_groups.iter().zip(&c.image_topics) {
            let f = c.features.get(&g.image_id).unwrap();
            assert!((numeric::norm(f) - 1.0).abs() < 1e-12);
            assert_eq!(g.captions.len(), 3);
            for cap in &g.captions {
                let on_topic = cap
                    .split(' ')
                    .filter(|w| c.topic_words[t].iter().any(|x| x == w))
                    .count();
                assert!(on_topic * 2 > cap.split(' ').count());
            }
        }
    }

    #[test]
    fn sts_pairs_are_stratified_and_symmetric() {
        let c = generate_grounded_corpus(&small()).unwrap();
        for pairs in [&c.sts_dev, &c.sts_test] {
            let above = pairs.iter().filter(|p| p.gold > 4.0).count();
            assert!(above as f64 >= 0.10 * pairs.len() as f64);
            assert!(pairs.iter().all(|p| (0.0..=5.0).contains(&p.gold)));
            assert!(pairs.iter().all(|p| p.sent_a != p.sent_b));
            assert!(pairs.iter().any(|p| p.gold < 1.0));
            assert!(pairs.iter().any(|p| (2.0..3.0).contains(&p.gold)));
            for p in pairs.iter() {
                let a = &c.mixtures[&p.sent_a];
                let b = &c.mixtures[&p.sent_b];
                assert_eq!(gold_from_mixtures(b, a).unwrap(), p.gold);
            }
        }
        assert_eq!(c.sts_test.len(), 120);
        assert_eq!(c.sts_dev.len(), 60);
    }

    #[test]
    fn ground_truth_embedder_is_perfect() {
        let c = generate_grounded_corpus(&small()).unwrap();
        let report = sts_evaluate(
            &c.ground_truth_embedder(),
            &c.test_tasks(),
            Execution::Sequential,
        )
        .unwrap();
        assert!((report.average - 100.0).abs() < 1e-9, "{report:?}");
    }

    #[test]
    fn derive_pairs_rules() {
        let pool: Vec<SynthSentence> = (0..12)
            .map(|i| SynthSentence {
                text: format!("s{i}"),
                mixture: pure(i % 3, 3),
            })
            .collect();
        let a = derive_sts_pairs(&pool, 20, 1).unwrap();
        assert_eq!(a, derive_sts_pairs(&pool, 20, 1).unwrap());
        assert!(a.iter().all(|p| p.sent_a != p.sent_b));
        assert!(a.iter().filter(|p| p.gold > 4.0).count() >= 2);

        // Only cross-topic pairs exist, so no positives can be found.
        let disjoint: Vec<SynthSentence> = (0..3)
            .map(|i| SynthSentence {
                text: format!("s{i}"),
                mixture: pure(i, 3),
            })
            .collect();
        assert!(derive_sts_pairs(&disjoint, 3, 1).is_err());
        assert!(derive_sts_pairs(&pool[..1], 3, 1).is_err());
    }

    #[test]
    fn word_budget_enforced() {
        let cfg = SynthConfig {
            num_topics: 100,
            words_per_topic: 100,
            ..small()
        };
        assert!(matches!(
            generate_grounded_corpus(&cfg),
            Err(Error::InvalidConfig(_))
        ));
        assert!(SynthConfig {
            num_topics: 1,
            ..small()
        }
        .validate()
        .is_err());
        assert!(SynthConfig {
            feature_noise: -1.0,
            ..small()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn written_files_load_back() {
        let dir = tempfile::tempdir().unwrap();
        let c = generate_grounded_corpus(&small()).unwrap();
        c.write_to_dir(dir.path()).unwrap();
        let corpus = data::load_sentence_corpus(&dir.path().join(CORPUS_FILE)).unwrap();
        assert_eq!(corpus.len(), 100);
        let pairs = data::load_multimodal_dataset(
            &dir.path().join(CAPTIONS_FILE),
            &dir.path().join(FEATURES_FILE),
            5,
        )
        .unwrap();
        assert_eq!(pairs.len(), 60);
        assert_eq!(
            data::load_sts(&dir.path().join(STS_TEST_FILE)).unwrap(),
            c.sts_test
        );
        assert_eq!(
            FeatureTable::load(&dir.path().join(FEATURES_FILE)).unwrap(),
            c.features
        );
    }
}
