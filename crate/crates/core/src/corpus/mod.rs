//! Synthetic multilingual corpora with controlled imbalance, their on-disk
//! format, batch sampling and the audio frontend.
//!
//! Every language shares one inventory of acoustic prototypes but maps its
//! characters onto them with its own permutation, so the same sound means a
//! different character in each language. A per-language coloring vector is
//! added to every frame, which makes the language recoverable from audio.

mod batch;
pub mod format;
pub mod logmel;

pub use batch::{sample_batch, SequenceBatch};

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{MoleError, Result};
use crate::tensor::Tensor;
use format::TranscriptLine;

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const MANIFEST_VERSION: u32 = 1;

/// Characters handed out to vocabularies, in order.
const CHAR_POOL: &str =
    "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789αβγδεζηθικλμνξοπρστυφχψω";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguageSpec {
    pub name: String,
    /// Number of characters, 4 to 12.
    pub vocab_size: usize,
    /// Relative share of the training frame budget.
    pub weight: f64,
}

/// Generation parameters, read from the `gen-corpus --spec` file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub seed: u64,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    /// Size of the shared prototype inventory.
    pub prototypes: usize,
    pub prototype_scale: f64,
    /// Norm of each coloring vector before the separation check.
    pub coloring_norm: f64,
    pub frames_per_token: [usize; 2],
    pub tokens_per_utterance: [usize; 2],
    pub train_frames: usize,
    pub dev_utterances: usize,
    pub test_utterances: usize,
    /// Characters common to every vocabulary; 0 gives disjoint vocabularies.
    pub shared_chars: usize,
    pub languages: Vec<LanguageSpec>,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        let weights = [600.0, 320.0, 400.0, 122.0, 43.0];
        let sizes = [8, 6, 10, 12, 7];
        CorpusSpec {
            seed: 1,
            feature_dim: 16,
            noise_sigma: 0.3,
            prototypes: 12,
            prototype_scale: 1.0,
            coloring_norm: 2.5,
            frames_per_token: [2, 3],
            tokens_per_utterance: [3, 6],
            train_frames: 16_000,
            dev_utterances: 10,
            test_utterances: 30,
            shared_chars: 0,
            languages: weights
                .iter()
                .zip(sizes)
                .enumerate()
                .map(|(i, (&weight, vocab_size))| LanguageSpec {
                    name: format!("L{i}"),
                    vocab_size,
                    weight,
                })
                .collect(),
        }
    }
}

impl CorpusSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: CorpusSpec =
            toml::from_str(text).map_err(|e| MoleError::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("corpus spec serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(MoleError::Config(m));
        if self.languages.is_empty() {
            return cfg("no languages".into());
        }
        let mut names = BTreeSet::new();
        for l in &self.languages {
            if !names.insert(l.name.as_str()) {
                return cfg(format!("duplicate language id {}", l.name));
            }
            if l.name.is_empty() || l.name.contains(['\t', '\n', '-']) {
                return cfg(format!(
                    "language id {:?} must be non-empty without tabs, newlines or '-'",
                    l.name
                ));
            }
            if !(4..=12).contains(&l.vocab_size) {
                return cfg(format!(
                    "{}: vocabulary size {} outside 4..=12",
                    l.name, l.vocab_size
                ));
            }
            if !(l.weight > 0.0) {
                return cfg(format!("{}: budget weight must be positive", l.name));
            }
            if l.vocab_size > self.prototypes {
                return cfg(format!(
                    "{}: {} characters but only {} prototypes",
                    l.name, l.vocab_size, self.prototypes
                ));
            }
            if self.shared_chars > l.vocab_size {
                return cfg(format!("{}: shared_chars exceeds vocabulary size", l.name));
            }
        }
        let pool = CHAR_POOL.chars().count();
        let needed = self.shared_chars
            + self
                .languages
                .iter()
                .map(|l| l.vocab_size - self.shared_chars)
                .sum::<usize>();
        if needed > pool {
            return cfg(format!(
                "{needed} distinct characters needed, pool has {pool}"
            ));
        }
        let [f0, f1] = self.frames_per_token;
        let [t0, t1] = self.tokens_per_utterance;
        if f0 == 0 || f0 > f1 || t0 == 0 || t0 > t1 {
            return cfg("frames_per_token and tokens_per_utterance must be non-empty ranges starting at 1 or more".into());
        }
        if self.feature_dim == 0 || self.prototypes == 0 {
            return cfg("feature_dim and prototypes must be positive".into());
        }
        if !(self.noise_sigma >= 0.0) || !(self.coloring_norm > 0.0) {
            return cfg("noise_sigma must be >= 0 and coloring_norm > 0".into());
        }
        if self.test_utterances == 0 {
            return cfg("test split must not be empty".into());
        }
        for b in self.frame_budgets() {
            if b == 0 {
                return cfg("a language received a zero frame budget; raise train_frames".into());
            }
        }
        Ok(())
    }

    /// Training frame budget per language, proportional to the weights.
    pub fn frame_budgets(&self) -> Vec<usize> {
        let total: f64 = self.languages.iter().map(|l| l.weight).sum();
        self.languages
            .iter()
            .map(|l| (self.train_frames as f64 * l.weight / total).round() as usize)
            .collect()
    }
}

/// RNG stream keyed by the corpus seed and a label.
pub fn derived_rng(seed: u64, label: &str) -> ChaCha8Rng {
    let digest = Sha256::digest(label.as_bytes());
    let stream = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// A fully instantiated synthetic language.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticLanguage {
    pub name: String,
    pub vocabulary: Vec<char>,
    /// Prototype frame for each character of `vocabulary`.
    pub codebook: Vec<Vec<f64>>,
    pub coloring: Vec<f64>,
    pub frames_per_token: [usize; 2],
    pub tokens_per_utterance: [usize; 2],
    pub noise_sigma: f64,
}

impl SyntheticLanguage {
    /// Draws one utterance: features rounded to `f32` precision, and text.
    pub fn utterance(&self, rng: &mut ChaCha8Rng) -> (Tensor, String) {
        let d = self.coloring.len();
        let [t0, t1] = self.tokens_per_utterance;
        let n_tokens = rng.gen_range(t0..=t1);
        let mut text = String::new();
        let mut prev: Option<usize> = None;
        let mut data = Vec::new();
        for _ in 0..n_tokens {
            let tok = loop {
                let c = rng.gen_range(0..self.vocabulary.len());
                if prev != Some(c) || self.vocabulary.len() == 1 {
                    break c;
                }
            };
            prev = Some(tok);
            text.push(self.vocabulary[tok]);
            let [f0, f1] = self.frames_per_token;
            for _ in 0..rng.gen_range(f0..=f1) {
                for j in 0..d {
                    let noise: f64 = rng.sample(StandardNormal);
                    let v = self.codebook[tok][j] + self.coloring[j] + self.noise_sigma * noise;
                    data.push(f64::from(v as f32));
                }
            }
        }
        let frames = data.len() / d;
        (
            Tensor::new(vec![frames, d], data).expect("consistent"),
            text,
        )
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> Vec<f64> {
    (0..d)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Instantiates vocabularies, codebooks and colorings. Colorings are scaled
/// up when needed so every pair is at least `4·noise_sigma` apart.
pub fn build_languages(spec: &CorpusSpec) -> Result<Vec<SyntheticLanguage>> {
    spec.validate()?;
    let d = spec.feature_dim;
    let mut rng = derived_rng(spec.seed, "prototypes");
    let prototypes: Vec<Vec<f64>> = (0..spec.prototypes)
        .map(|_| gaussian_vec(&mut rng, d, spec.prototype_scale))
        .collect();

    let pool: Vec<char> = CHAR_POOL.chars().collect();
    let shared = &pool[..spec.shared_chars];
    let mut next = spec.shared_chars;

    let mut colorings = Vec::new();
    let mut langs = Vec::new();
    for l in &spec.languages {
        let mut rng = derived_rng(spec.seed, &format!("language:{}", l.name));
        let own = l.vocab_size - spec.shared_chars;
        let vocabulary: Vec<char> = shared
            .iter()
            .chain(&pool[next..next + own])
            .copied()
            .collect();
        next += own;
        let mut perm: Vec<usize> = (0..spec.prototypes).collect();
        perm.shuffle(&mut rng);
        let codebook = perm[..l.vocab_size]
            .iter()
            .map(|&p| prototypes[p].clone())
            .collect();
        let dir = gaussian_vec(&mut rng, d, 1.0);
        let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        colorings.push(
            dir.iter()
                .map(|x| x * spec.coloring_norm / norm)
                .collect::<Vec<f64>>(),
        );
        langs.push(SyntheticLanguage {
            name: l.name.clone(),
            vocabulary,
            codebook,
            coloring: Vec::new(),
            frames_per_token: spec.frames_per_token,
            tokens_per_utterance: spec.tokens_per_utterance,
            noise_sigma: spec.noise_sigma,
        });
    }
    let min_dist = min_pairwise_distance(&colorings);
    let needed = 4.0 * spec.noise_sigma;
    if min_dist.is_finite() && min_dist < needed {
        let s = needed / min_dist * (1.0 + 1e-9);
        colorings.iter_mut().flatten().for_each(|v| *v *= s);
    }
    for (l, c) in langs.iter_mut().zip(colorings) {
        l.coloring = c;
    }
    Ok(langs)
}

pub fn min_pairwise_distance(vectors: &[Vec<f64>]) -> f64 {
    let mut m = f64::INFINITY;
    for i in 0..vectors.len() {
        for j in i + 1..vectors.len() {
            m = m.min(distance(&vectors[i], &vectors[j]));
        }
    }
    m
}

/// Output alphabet shared by all languages; index 0 is the CTC blank.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    chars: Vec<char>,
}

impl Vocabulary {
    pub fn new(chars: Vec<char>) -> Result<Self> {
        let set: BTreeSet<char> = chars.iter().copied().collect();
        if set.len() != chars.len() {
            return Err(MoleError::Config(
                "vocabulary has repeated characters".into(),
            ));
        }
        Ok(Vocabulary { chars })
    }

    /// Union of per-language vocabularies in first-seen order.
    pub fn union<'a>(vocabs: impl IntoIterator<Item = &'a [char]>) -> Self {
        let mut chars = Vec::new();
        for v in vocabs {
            for &c in v {
                if !chars.contains(&c) {
                    chars.push(c);
                }
            }
        }
        Vocabulary { chars }
    }

    /// Number of output classes including the blank.
    pub fn size(&self) -> usize {
        self.chars.len() + 1
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.chars
                    .iter()
                    .position(|&x| x == c)
                    .map(|p| p + 1)
                    .ok_or_else(|| {
                        MoleError::Contract(format!("character {c:?} not in vocabulary"))
                    })
            })
            .collect()
    }

    pub fn decode(&self, tokens: &[usize]) -> String {
        tokens
            .iter()
            .filter(|&&t| t > 0 && t <= self.chars.len())
            .map(|&t| self.chars[t - 1])
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = MoleError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            _ => Err(MoleError::Config(format!(
                "unknown split {s:?}; expected train, dev or test"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub language: usize,
    /// `[T × d_feat]`.
    pub features: Tensor,
    /// Indices into the union vocabulary, blank excluded.
    pub tokens: Vec<usize>,
    pub text: String,
}

impl Utterance {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageEntry {
    pub name: String,
    pub vocabulary: String,
    pub budget_frames: usize,
    pub train_frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub split: Split,
    pub utterances: usize,
    pub frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceEntry {
    pub id: String,
    pub split: Split,
    pub language: String,
    pub frames: usize,
}

/// Contents of `manifest.toml`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format_version: u32,
    pub seed: u64,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    pub languages: Vec<LanguageEntry>,
    pub splits: Vec<SplitEntry>,
    pub utterances: Vec<UtteranceEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub vocabulary: Vocabulary,
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

fn feature_file(split: Split) -> String {
    format!("{split}.feats")
}

fn transcript_file(split: Split) -> String {
    format!("{split}.txt")
}

/// Generates a corpus in memory. Each utterance is drawn from its own RNG
/// stream keyed by its id, so the output does not depend on generation order.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    let langs = build_languages(spec)?;
    let vocabulary = Vocabulary::union(langs.iter().map(|l| l.vocabulary.as_slice()));
    let budgets = spec.frame_budgets();
    let make = |split: Split, li: usize, idx: usize| -> Result<Utterance> {
        let lang = &langs[li];
        let id = format!("{split}-{}-{idx:05}", lang.name);
        let mut rng = derived_rng(spec.seed, &format!("utterance:{id}"));
        let (features, text) = lang.utterance(&mut rng);
        Ok(Utterance {
            tokens: vocabulary.encode(&text)?,
            id,
            language: li,
            features,
            text,
        })
    };

    let mut train = Vec::new();
    let mut dev = Vec::new();
    let mut test = Vec::new();
    let mut entries = Vec::new();
    for (li, lang) in langs.iter().enumerate() {
        let mut emitted = 0;
        let mut idx = 0;
        while emitted < budgets[li] {
            let u = make(Split::Train, li, idx)?;
            emitted += u.len();
            train.push(u);
            idx += 1;
        }
        for i in 0..spec.dev_utterances {
            dev.push(make(Split::Dev, li, i)?);
        }
        for i in 0..spec.test_utterances {
            test.push(make(Split::Test, li, i)?);
        }
        entries.push(LanguageEntry {
            name: lang.name.clone(),
            vocabulary: lang.vocabulary.iter().collect(),
            budget_frames: budgets[li],
            train_frames: emitted,
        });
    }
    let mut utterances = Vec::new();
    let mut splits = Vec::new();
    for (split, list) in [
        (Split::Train, &train),
        (Split::Dev, &dev),
        (Split::Test, &test),
    ] {
        splits.push(SplitEntry {
            split,
            utterances: list.len(),
            frames: list.iter().map(Utterance::len).sum(),
        });
        utterances.extend(list.iter().map(|u| UtteranceEntry {
            id: u.id.clone(),
            split,
            language: langs[u.language].name.clone(),
            frames: u.len(),
        }));
    }
    Ok(Corpus {
        manifest: CorpusManifest {
            format_version: MANIFEST_VERSION,
            seed: spec.seed,
            feature_dim: spec.feature_dim,
            noise_sigma: spec.noise_sigma,
            languages: entries,
            splits,
            utterances,
        },
        vocabulary,
        train,
        dev,
        test,
    })
}

impl Corpus {
    pub fn num_languages(&self) -> usize {
        self.manifest.languages.len()
    }

    pub fn language_names(&self) -> Vec<String> {
        self.manifest
            .languages
            .iter()
            .map(|l| l.name.clone())
            .collect()
    }

    pub fn feature_dim(&self) -> usize {
        self.manifest.feature_dim
    }

    pub fn split(&self, split: Split) -> &[Utterance] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    /// Writes the manifest, one feature file and one transcript per split.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| MoleError::io(dir, e))?;
        let manifest =
            toml::to_string(&self.manifest).map_err(|e| MoleError::format(dir, e.to_string()))?;
        let mpath = dir.join(MANIFEST_FILE);
        fs::write(&mpath, manifest).map_err(|e| MoleError::io(&mpath, e))?;
        for split in Split::ALL {
            let utts = self.split(split);
            let records: Vec<(&str, &Tensor)> =
                utts.iter().map(|u| (u.id.as_str(), &u.features)).collect();
            format::write_features(&dir.join(feature_file(split)), self.feature_dim(), &records)?;
            let lines: Vec<TranscriptLine> = utts
                .iter()
                .map(|u| TranscriptLine {
                    id: u.id.clone(),
                    language: self.manifest.languages[u.language].name.clone(),
                    text: u.text.clone(),
                })
                .collect();
            format::write_transcripts(&dir.join(transcript_file(split)), &lines)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Corpus> {
        let mpath = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).map_err(|e| MoleError::io(&mpath, e))?;
        let manifest: CorpusManifest =
            toml::from_str(&text).map_err(|e| MoleError::format(&mpath, e.to_string()))?;
        if manifest.format_version != MANIFEST_VERSION {
            return Err(MoleError::format(
                &mpath,
                format!("unsupported version {}", manifest.format_version),
            ));
        }
        let vocabs: Vec<Vec<char>> = manifest
            .languages
            .iter()
            .map(|l| l.vocabulary.chars().collect())
            .collect();
        let vocabulary = Vocabulary::union(vocabs.iter().map(Vec::as_slice));
        let names = manifest
            .languages
            .iter()
            .map(|l| l.name.as_str())
            .collect::<Vec<_>>();
        let mut loaded: Vec<Vec<Utterance>> = Vec::new();
        for split in Split::ALL {
            let fpath = dir.join(feature_file(split));
            let (dim, feats) = format::read_features(&fpath)?;
            if dim != manifest.feature_dim {
                return Err(MoleError::format(
                    &fpath,
                    format!("dimension {dim}, manifest says {}", manifest.feature_dim),
                ));
            }
            let tpath = dir.join(transcript_file(split));
            let lines = format::read_transcripts(&tpath)?;
            if lines.len() != feats.len() {
                return Err(MoleError::format(
                    &tpath,
                    "transcript and feature counts differ",
                ));
            }
            let mut utts = Vec::with_capacity(lines.len());
            for ((id, features), line) in feats.into_iter().zip(lines) {
                if id != line.id {
                    return Err(MoleError::format(
                        &tpath,
                        format!("id {} does not match feature record {id}", line.id),
                    ));
                }
                let language = names
                    .iter()
                    .position(|n| *n == line.language)
                    .ok_or_else(|| {
                        MoleError::format(&tpath, format!("unknown language {}", line.language))
                    })?;
                utts.push(Utterance {
                    tokens: vocabulary.encode(&line.text)?,
                    id,
                    language,
                    features,
                    text: line.text,
                });
            }
            let expected: Vec<&UtteranceEntry> = manifest
                .utterances
                .iter()
                .filter(|e| e.split == split)
                .collect();
            let consistent = expected.len() == utts.len()
                && expected
                    .iter()
                    .zip(&utts)
                    .all(|(e, u)| e.id == u.id && e.frames == u.len());
            if !consistent {
                return Err(MoleError::format(
                    &fpath,
                    "records disagree with the manifest index",
                ));
            }
            loaded.push(utts);
        }
        let test = loaded.pop().expect("three splits");
        let dev = loaded.pop().expect("three splits");
        let train = loaded.pop().expect("three splits");
        Ok(Corpus {
            manifest,
            vocabulary,
            train,
            dev,
            test,
        })
    }
}

/// SHA-256 over the corpus files in a fixed order, hex encoded.
pub fn corpus_hash(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    let mut names = vec![MANIFEST_FILE.to_string()];
    for s in Split::ALL {
        names.push(feature_file(s));
        names.push(transcript_file(s));
    }
    for name in names {
        let p = dir.join(&name);
        let bytes = fs::read(&p).map_err(|e| MoleError::io(&p, e))?;
        h.update(name.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn mean_frame(u: &Utterance) -> Vec<f64> {
    let d = u.features.cols();
    let mut m = vec![0.0; d];
    for t in 0..u.len() {
        for (a, b) in m.iter_mut().zip(u.features.row(t)) {
            *a += b / u.len() as f64;
        }
    }
    m
}

/// Accuracy of a nearest-centroid language classifier on mean frame vectors.
pub fn nearest_centroid_accuracy(
    train: &[Utterance],
    test: &[Utterance],
    num_languages: usize,
) -> Result<f64> {
    if train.is_empty() || test.is_empty() {
        return Err(MoleError::Contract(
            "nearest-centroid check needs train and test data".into(),
        ));
    }
    let d = train[0].features.cols();
    let mut centroids = vec![vec![0.0; d]; num_languages];
    let mut counts = vec![0usize; num_languages];
    for u in train {
        for (a, b) in centroids[u.language].iter_mut().zip(mean_frame(u)) {
            *a += b;
        }
        counts[u.language] += 1;
    }
    for (c, n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= (*n).max(1) as f64);
    }
    let correct = test
        .iter()
        .filter(|u| {
            let m = mean_frame(u);
            let best = (0..num_languages)
                .filter(|&l| counts[l] > 0)
                .min_by(|&a, &b| {
                    distance(&m, &centroids[a]).total_cmp(&distance(&m, &centroids[b]))
                });
            best == Some(u.language)
        })
        .count();
    Ok(correct as f64 / test.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> CorpusSpec {
        CorpusSpec {
            train_frames: 1500,
            dev_utterances: 2,
            test_utterances: 5,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn default_spec_round_trips_through_toml() {
        let spec = CorpusSpec::default();
        assert_eq!(CorpusSpec::from_toml(&spec.to_toml()).unwrap(), spec);
        assert_eq!(spec.frame_budgets().len(), 5);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = small_spec();
        s.languages[1].name = "L0".into();
        assert!(matches!(generate_corpus(&s), Err(MoleError::Config(_))));
        let mut s = small_spec();
        s.languages[0].vocab_size = 3;
        assert!(s.validate().is_err());
        let mut s = small_spec();
        s.languages[0].vocab_size = 13;
        assert!(s.validate().is_err());
        let mut s = small_spec();
        s.train_frames = 10;
        assert!(s.validate().is_err());
        assert!(CorpusSpec::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn budgets_follow_the_weights() {
        let s = CorpusSpec {
            train_frames: 1485,
            ..CorpusSpec::default()
        };
        assert_eq!(s.frame_budgets(), vec![600, 320, 400, 122, 43]);
    }

    #[test]
    fn emitted_frames_within_one_utterance_of_budget() {
        let mut s = small_spec();
        s.languages.truncate(2);
        s.languages[0].weight = 2.0;
        s.languages[1].weight = 1.0;
        s.train_frames = 150;
        let c = generate_corpus(&s).unwrap();
        let max_len = s.frames_per_token[1] * s.tokens_per_utterance[1];
        for (l, target) in c.manifest.languages.iter().zip([100, 50]) {
            assert_eq!(l.budget_frames, target);
            assert!(l.train_frames >= target && l.train_frames < target + max_len);
        }
    }

    #[test]
    fn noiseless_frames_are_prototype_plus_coloring() {
        let s = CorpusSpec {
            noise_sigma: 0.0,
            ..small_spec()
        };
        let langs = build_languages(&s).unwrap();
        let c = generate_corpus(&s).unwrap();
        for u in c.train.iter().take(40) {
            let lang = &langs[u.language];
            let mut t = 0;
            for ch in u.text.chars() {
                let k = lang.vocabulary.iter().position(|&x| x == ch).unwrap();
                let expect: Vec<f64> = lang.codebook[k]
                    .iter()
                    .zip(&lang.coloring)
                    .map(|(a, b)| f64::from((a + b) as f32))
                    .collect();
                let mut run = 0;
                while t < u.len() && u.features.row(t) == expect.as_slice() {
                    t += 1;
                    run += 1;
                }
                assert!((s.frames_per_token[0]..=s.frames_per_token[1]).contains(&run));
            }
            assert_eq!(t, u.len());
        }
    }

    #[test]
    fn utterances_respect_their_language() {
        let c = generate_corpus(&small_spec()).unwrap();
        let langs = build_languages(&small_spec()).unwrap();
        for u in c.train.iter().chain(&c.test) {
            assert!(u
                .text
                .chars()
                .all(|ch| langs[u.language].vocabulary.contains(&ch)));
            assert!(u
                .text
                .chars()
                .zip(u.text.chars().skip(1))
                .all(|(a, b)| a != b));
            assert_eq!(c.vocabulary.decode(&u.tokens), u.text);
        }
    }

    #[test]
    fn vocabularies_disjoint_unless_shared() {
        let langs = build_languages(&small_spec()).unwrap();
        let total: usize = langs.iter().map(|l| l.vocabulary.len()).sum();
        let v = Vocabulary::union(langs.iter().map(|l| l.vocabulary.as_slice()));
        assert_eq!(v.size(), total + 1);

        let shared = CorpusSpec {
            shared_chars: 2,
            ..small_spec()
        };
        let langs = build_languages(&shared).unwrap();
        let v = Vocabulary::union(langs.iter().map(|l| l.vocabulary.as_slice()));
        assert_eq!(v.size(), total - 2 * (langs.len() - 1) + 1);
        assert!(langs
            .iter()
            .all(|l| l.vocabulary[..2] == langs[0].vocabulary[..2]));
    }

    #[test]
    fn colorings_are_separated_by_four_sigma() {
        for (sigma, norm) in [(0.3, 2.5), (1.0, 0.1), (0.0, 1.0)] {
            let s = CorpusSpec {
                noise_sigma: sigma,
                coloring_norm: norm,
                ..small_spec()
            };
            let langs = build_languages(&s).unwrap();
            let cols: Vec<Vec<f64>> = langs.iter().map(|l| l.coloring.clone()).collect();
            let m = min_pairwise_distance(&cols);
            assert!(m >= 4.0 * sigma && m > 0.0, "sigma {sigma}: {m}");
        }
    }

    #[test]
    fn save_load_round_trip_and_deterministic_hash() {
        let spec = small_spec();
        let c = generate_corpus(&spec).unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        c.save(a.path()).unwrap();
        generate_corpus(&spec).unwrap().save(b.path()).unwrap();
        assert_eq!(
            corpus_hash(a.path()).unwrap(),
            corpus_hash(b.path()).unwrap()
        );
        assert_eq!(Corpus::load(a.path()).unwrap(), c);

        let other = CorpusSpec { seed: 99, ..spec };
        let d = tempfile::tempdir().unwrap();
        generate_corpus(&other).unwrap().save(d.path()).unwrap();
        assert_ne!(
            corpus_hash(a.path()).unwrap(),
            corpus_hash(d.path()).unwrap()
        );
    }

    #[test]
    fn utterance_content_depends_only_on_its_id() {
        let spec = small_spec();
        let mut bigger = spec.clone();
        bigger.train_frames *= 2;
        let a = generate_corpus(&spec).unwrap();
        let b = generate_corpus(&bigger).unwrap();
        for u in &a.test {
            let v = b.test.iter().find(|v| v.id == u.id).unwrap();
            assert_eq!(u, v);
        }
    }

    #[test]
    fn nearest_centroid_identifies_languages() {
        let clean = CorpusSpec {
            noise_sigma: 0.0,
            ..small_spec()
        };
        let c = generate_corpus(&clean).unwrap();
        assert_eq!(
            nearest_centroid_accuracy(&c.train, &c.test, 5).unwrap(),
            1.0
        );
        let c = generate_corpus(&CorpusSpec::default()).unwrap();
        assert!(nearest_centroid_accuracy(&c.train, &c.test, 5).unwrap() >= 0.99);
    }

    #[test]
    fn split_names_parse() {
        for s in Split::ALL {
            assert_eq!(s.as_str().parse::<Split>().unwrap(), s);
        }
        assert!("valid".parse::<Split>().is_err());
    }
}
