//! Seeded generator of toy speech-translation corpora.
//!
//! Source tokens live in a shared universe. Each token owns a prototype frame
//! vector; the first `feature_dim` prototypes are mutually orthogonal, so a
//! time-summed feature sequence is close to a bag-of-tokens vector. A
//! domain picks a subset of the universe, a number of sentence templates, an
//! acoustic noise level and a set of speakers whose constant offsets are added
//! to every frame.

mod io;

pub use io::{
    decode_features, encode_features, read_features, read_manifest, write_features, write_manifest,
    ManifestRow, FEATURE_MAGIC, FEATURE_VERSION,
};

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::{fnv1a, seed_from};
use crate::tensor::Tensor;

/// Seed of the shared prototype bank and of the pseudo-word lexicon.
const UNIVERSE_SEED: u64 = 0x5e_ed0f_70c3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    /// 80/10/10 split by id hash.
    pub fn of(id: &str) -> Split {
        match fnv1a(id.as_bytes()) % 10 {
            0 => Split::Valid,
            1 => Split::Test,
            _ => Split::Train,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
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
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Invalid(format!("unknown split {other:?}"))),
        }
    }
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Name of universe token `i`.
pub fn token_name(i: usize) -> String {
    format!("w{i:02}")
}

fn token_index(token: &str) -> Option<usize> {
    token.strip_prefix('w')?.parse().ok()
}

/// Deterministic pseudo-word for universe token `i`. Words are distinct for
/// distinct tokens.
pub fn pseudo_word(i: usize) -> String {
    lexicon(i + 1).pop().expect("lexicon has i + 1 words")
}

fn lexicon(n: usize) -> Vec<String> {
    const CONSONANTS: &[u8] = b"bcdfghjklmnpqrstvwxyz";
    const VOWELS: &[u8] = b"aeiou";
    let mut rng = ChaCha8Rng::seed_from_u64(UNIVERSE_SEED);
    let mut seen = HashSet::new();
    let mut words = Vec::with_capacity(n);
    while words.len() < n {
        let len = rng.gen_range(3..=6);
        let start_vowel = rng.gen_bool(0.3);
        let w: String = (0..len)
            .map(|p| {
                let set = if (p % 2 == 0) != start_vowel {
                    CONSONANTS
                } else {
                    VOWELS
                };
                set[rng.gen_range(0..set.len())] as char
            })
            .collect();
        if seen.insert(w.clone()) {
            words.push(w);
        }
    }
    words
}

/// Prototype frame vectors of the token universe for one feature dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    dim: usize,
    rows: Vec<Vec<f64>>,
}

impl PrototypeBank {
    /// Prototypes for tokens `0..count`. The first `dim` are Gram-Schmidt
    /// orthogonalised; all have norm `sqrt(dim)`.
    pub fn new(dim: usize, count: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(UNIVERSE_SEED ^ dim as u64);
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(count);
        for i in 0..count {
            let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            if i < dim {
                for r in &rows {
                    let proj = crate::tensor::kernels::dot(&v, r) / dim as f64;
                    v.iter_mut().zip(r).for_each(|(a, b)| *a -= proj * b);
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let scale = (dim as f64).sqrt() / norm;
            v.iter_mut().for_each(|x| *x *= scale);
            rows.push(v);
        }
        PrototypeBank { dim, rows }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, token: &str) -> Result<&[f64]> {
        token_index(token)
            .and_then(|i| self.rows.get(i))
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownToken(token.into()))
    }
}

/// Generative knobs of one synthetic domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    /// Source tokens, drawn from the `w00`, `w01`, ... universe.
    pub vocab: Vec<String>,
    /// Fewer templates means more repetition.
    pub template_count: usize,
    /// Inclusive token-count range of a template.
    pub template_len: (usize, usize),
    /// Per-position probability of replacing a template token.
    pub substitution_rate: f64,
    /// Upper bound on substitutions per utterance.
    pub max_substitutions: usize,
    /// Standard deviation of per-frame additive noise.
    pub noise_sigma: f64,
    /// Standard deviation of each speaker's constant offset vector.
    pub speaker_offset_sigma: f64,
    /// Number of speakers; 0 draws a fresh offset for every utterance.
    pub speakers: usize,
    /// Inclusive frame-count range per token.
    pub frames_per_token: (usize, usize),
    pub feature_dim: usize,
    /// Source token to target word.
    pub translation_map: BTreeMap<String, String>,
}

fn translations(vocab: &[String]) -> BTreeMap<String, String> {
    let max = vocab
        .iter()
        .filter_map(|t| token_index(t))
        .max()
        .map_or(0, |m| m + 1);
    let words = lexicon(max);
    vocab
        .iter()
        .filter_map(|t| token_index(t).map(|i| (t.clone(), words[i].clone())))
        .collect()
}

impl DomainSpec {
    /// Domain over universe tokens `range` with the default pseudo-word lexicon.
    pub fn over_tokens(name: &str, range: std::ops::Range<usize>, feature_dim: usize) -> Self {
        let vocab: Vec<String> = range.map(token_name).collect();
        DomainSpec {
            name: name.into(),
            translation_map: translations(&vocab),
            vocab,
            template_count: 10,
            template_len: (3, 5),
            substitution_rate: 0.2,
            max_substitutions: 2,
            noise_sigma: 0.3,
            speaker_offset_sigma: 0.3,
            speakers: 10,
            frames_per_token: (5, 8),
            feature_dim,
        }
    }

    /// Larger vocabulary, noisier audio, many templates.
    pub fn preset_a() -> Self {
        DomainSpec {
            template_count: 30,
            substitution_rate: 0.25,
            noise_sigma: 0.3,
            speaker_offset_sigma: 0.3,
            speakers: 40,
            ..DomainSpec::over_tokens("A", 0..24, 32)
        }
    }

    /// Smaller vocabulary, half of it shared with A, cleaner audio, few templates.
    pub fn preset_b() -> Self {
        DomainSpec {
            template_count: 8,
            substitution_rate: 0.15,
            noise_sigma: 0.2,
            speaker_offset_sigma: 0.3,
            speakers: 8,
            ..DomainSpec::over_tokens("B", 18..30, 32)
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "A" | "a" => Ok(DomainSpec::preset_a()),
            "B" | "b" => Ok(DomainSpec::preset_b()),
            other => Err(Error::Invalid(format!("unknown domain preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("domain {}: {m}", self.name)));
        if self.vocab.is_empty() {
            return fail("empty vocabulary".into());
        }
        if self.template_count == 0 {
            return fail("template_count must be >= 1".into());
        }
        if !(self.noise_sigma >= 0.0) || !(self.speaker_offset_sigma >= 0.0) {
            return fail("noise levels must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.substitution_rate) {
            return fail("substitution_rate must lie in [0, 1]".into());
        }
        let (a, b) = self.template_len;
        let (fa, fb) = self.frames_per_token;
        if a == 0 || a > b || fa == 0 || fa > fb {
            return fail("ranges must be non-empty and start at >= 1".into());
        }
        if self.feature_dim == 0 {
            return fail("feature_dim must be positive".into());
        }
        for t in &self.vocab {
            if token_index(t).is_none() {
                return fail(format!("token {t:?} is not in the universe"));
            }
            match self.translation_map.get(t) {
                Some(w) if !w.is_empty() && !w.contains(char::is_whitespace) => {}
                _ => return fail(format!("token {t:?} lacks a single-word translation")),
            }
        }
        Ok(())
    }

    fn bank(&self) -> PrototypeBank {
        let max = self
            .vocab
            .iter()
            .filter_map(|t| token_index(t))
            .max()
            .unwrap_or(0);
        PrototypeBank::new(self.feature_dim, max + 1)
    }

    fn speaker_offset(&self, speaker: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed_from(&self.name, speaker ^ 0x5bea_4e70));
        (0..self.feature_dim)
            .map(|_| self.speaker_offset_sigma * normal(&mut rng))
            .collect()
    }

    /// Space-joined translation of a token sequence.
    pub fn translate_tokens(&self, tokens: &[String]) -> Result<String> {
        let words = tokens
            .iter()
            .map(|t| {
                self.translation_map
                    .get(t)
                    .map(String::as_str)
                    .ok_or_else(|| Error::UnknownToken(t.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }
}

/// One synthetic (features, translation) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub domain: String,
    pub features: Tensor,
    pub tokens: Vec<String>,
    pub target: String,
    pub split: Split,
    pub speaker: usize,
}

struct Synth<'a> {
    spec: &'a DomainSpec,
    bank: PrototypeBank,
}

impl Synth<'_> {
    fn frames(
        &self,
        tokens: &[String],
        speaker: Option<usize>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor> {
        let spec = self.spec;
        let k = spec.feature_dim;
        let vocab: HashSet<&str> = spec.vocab.iter().map(String::as_str).collect();
        let protos = tokens
            .iter()
            .map(|t| {
                if vocab.contains(t.as_str()) {
                    self.bank.get(t)
                } else {
                    Err(Error::UnknownToken(t.clone()))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        if protos.is_empty() {
            return Err(Error::Empty("token sequence".into()));
        }
        let offset = match speaker {
            Some(s) => spec.speaker_offset(s as u64),
            None => (0..k)
                .map(|_| spec.speaker_offset_sigma * normal(rng))
                .collect(),
        };
        let (lo, hi) = spec.frames_per_token;
        let mut data = Vec::new();
        for p in protos {
            for _ in 0..rng.gen_range(lo..=hi) {
                for j in 0..k {
                    let noise: f64 = StandardNormal.sample(rng);
                    data.push(p[j] + offset[j] + spec.noise_sigma * noise);
                }
            }
        }
        let n = data.len() / k;
        Ok(Tensor::new(vec![n, k], data)?)
    }

    fn pick_speaker(&self, rng: &mut ChaCha8Rng) -> Option<usize> {
        (self.spec.speakers > 0).then(|| rng.gen_range(0..self.spec.speakers))
    }
}

/// Synthetic filterbank stand-in for `tokens`; a pure function of its inputs.
pub fn synth_features(tokens: &[String], spec: &DomainSpec, seed: u64) -> Result<Tensor> {
    spec.validate()?;
    let synth = Synth {
        spec,
        bank: spec.bank(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let speaker = synth.pick_speaker(&mut rng);
    synth.frames(tokens, speaker, &mut rng)
}

/// `size` utterances with ids `<name>-00000`, `<name>-00001`, ...
pub fn generate_corpus(spec: &DomainSpec, size: usize, seed: u64) -> Result<Vec<Utterance>> {
    spec.validate()?;
    if size == 0 {
        return Err(Error::Invalid("corpus size must be >= 1".into()));
    }
    let synth = Synth {
        spec,
        bank: spec.bank(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed_from(&spec.name, seed));
    let (lo, hi) = spec.template_len;
    let templates: Vec<Vec<String>> = (0..spec.template_count)
        .map(|_| {
            let len = rng.gen_range(lo..=hi);
            (0..len)
                .map(|_| spec.vocab[rng.gen_range(0..spec.vocab.len())].clone())
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(size);
    for i in 0..size {
        let mut tokens = templates[rng.gen_range(0..templates.len())].clone();
        let mut subs = 0;
        for t in tokens.iter_mut() {
            if subs < spec.max_substitutions && rng.gen_bool(spec.substitution_rate) {
                *t = spec.vocab[rng.gen_range(0..spec.vocab.len())].clone();
                subs += 1;
            }
        }
        let speaker = synth.pick_speaker(&mut rng);
        let features = synth.frames(&tokens, speaker, &mut rng)?;
        let id = format!("{}-{i:05}", spec.name);
        out.push(Utterance {
            split: Split::of(&id),
            domain: spec.name.clone(),
            target: spec.translate_tokens(&tokens)?,
            id,
            features,
            tokens,
            speaker: speaker.unwrap_or(usize::MAX),
        });
    }
    Ok(out)
}

fn word_types<'a>(targets: impl IntoIterator<Item = &'a str>) -> BTreeSet<&'a str> {
    targets
        .into_iter()
        .flat_map(str::split_whitespace)
        .collect()
}

/// Fraction of A's target word types that also occur in B.
pub fn vocab_overlap<'a, 'b>(
    a: impl IntoIterator<Item = &'a str>,
    b: impl IntoIterator<Item = &'b str>,
) -> Result<f64> {
    let ta = word_types(a);
    let tb = word_types(b);
    if ta.is_empty() || tb.is_empty() {
        return Err(Error::Empty("corpus target side".into()));
    }
    Ok(ta.iter().filter(|w| tb.contains(*w)).count() as f64 / ta.len() as f64)
}

/// Distinct target word types divided by target word tokens.
pub fn type_token_ratio<'a>(targets: impl IntoIterator<Item = &'a str>) -> f64 {
    let mut types = BTreeSet::new();
    let mut tokens = 0usize;
    for t in targets {
        for w in t.split_whitespace() {
            types.insert(w);
            tokens += 1;
        }
    }
    if tokens == 0 {
        0.0
    } else {
        types.len() as f64 / tokens as f64
    }
}

/// Sorted set of target characters across utterances.
pub fn target_symbols(utts: &[Utterance]) -> String {
    crate::model::CharVocab::symbols_of(utts.iter().map(|u| u.target.as_str()))
}
