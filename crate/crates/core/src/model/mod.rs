//! Compact S-Transformer: a strided 2-D CNN front end, two 2-D self-attention
//! blocks over (time, frequency), a Transformer encoder whose self-attention
//! is biased toward nearby frames by a log-distance penalty, and an
//! autoregressive character decoder.

mod checkpoint;
mod decode;
mod layers;
mod vocab;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use decode::greedy_search;
pub use layers::{distance_penalty, distance_penalty_matrix, Forward};
pub use vocab::{CharVocab, BOS, EOS, PAD, UNK};

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Mode, RunningStats, Tensor};

/// Architecture hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Input features per frame.
    pub feature_dim: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    /// Character vocabulary size, specials included.
    pub vocab_size: usize,
    /// Ordered non-special symbols; id of `symbols[i]` is `4 + i`.
    pub symbols: String,
    pub dropout_p: f64,
    pub max_decode_len: usize,
    /// Output channels of both strided CNNs and of the first 2-D attention block.
    pub cnn_channels: usize,
    /// Heads (internal Q/K/V channels) of each 2-D attention block.
    pub attn2d_channels: usize,
    /// Output channels of the last 2-D attention block.
    pub attn2d_out_channels: usize,
    pub label_smoothing: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let symbols: String = "abcdefghijklmnopqrstuvwxyz ".into();
        ModelConfig {
            feature_dim: 8,
            d_model: 64,
            n_heads: 4,
            ff_dim: 128,
            n_enc_layers: 2,
            n_dec_layers: 2,
            vocab_size: 4 + symbols.chars().count(),
            symbols,
            dropout_p: 0.1,
            max_decode_len: 64,
            cnn_channels: 8,
            attn2d_channels: 4,
            attn2d_out_channels: 16,
            label_smoothing: 0.1,
        }
    }
}

impl ModelConfig {
    /// Full-size settings: 512-wide layers, 8 heads, 1024 feed-forward units,
    /// 4-head 2-D attention with 64 output channels.
    pub fn full_scale(feature_dim: usize, symbols: &str) -> Self {
        ModelConfig {
            feature_dim,
            d_model: 512,
            n_heads: 8,
            ff_dim: 1024,
            vocab_size: 4 + symbols.chars().count(),
            symbols: symbols.into(),
            cnn_channels: 64,
            attn2d_channels: 4,
            attn2d_out_channels: 64,
            ..ModelConfig::default()
        }
    }

    pub fn with_symbols(mut self, symbols: &str) -> Self {
        self.symbols = symbols.into();
        self.vocab_size = 4 + symbols.chars().count();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail("d_model must be divisible by n_heads");
        }
        if self.vocab_size < 4 {
            return fail("vocab_size must be >= 4");
        }
        if self.vocab_size != 4 + self.symbols.chars().count() {
            return fail("vocab_size must equal 4 + number of symbols");
        }
        if self.feature_dim == 0 || self.ff_dim == 0 || self.max_decode_len == 0 {
            return fail("feature_dim, ff_dim and max_decode_len must be positive");
        }
        if self.cnn_channels == 0 || self.attn2d_channels == 0 || self.attn2d_out_channels == 0 {
            return fail("channel counts must be positive");
        }
        if !(0.0..=1.0).contains(&self.dropout_p) || !(0.0..=1.0).contains(&self.label_smoothing) {
            return fail("dropout_p and label_smoothing must lie in [0, 1]");
        }
        Ok(())
    }

    /// Frequency bins left after the two strided convolutions.
    pub fn reduced_freq(&self) -> usize {
        self.feature_dim.div_ceil(2).div_ceil(2)
    }
}

/// Encoder length after the two stride-2 convolutions.
pub fn encoded_len(frames: usize) -> usize {
    frames.div_ceil(2).div_ceil(2)
}

/// Encoder output for one segment.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSegment {
    /// `[T', d_model]`.
    pub states: Tensor,
    pub len: usize,
}

/// One teacher-forcing example: features `[N, k]` and BOS..EOS target ids.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub features: &'a Tensor,
    pub target: &'a [usize],
}

/// Deep copy of everything a training step can touch.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterImage {
    config: ModelConfig,
    params: BTreeMap<String, Tensor>,
    bn: BTreeMap<String, RunningStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct STModel {
    config: ModelConfig,
    vocab: CharVocab,
    params: BTreeMap<String, Tensor>,
    bn: BTreeMap<String, RunningStats>,
    training: bool,
}

impl STModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        let mut bn = BTreeMap::new();
        let c = &config;
        let d = c.d_model;

        let conv = |params: &mut BTreeMap<String, Tensor>,
                    bn: &mut BTreeMap<String, RunningStats>,
                    name: &str,
                    cout: usize,
                    cin: usize,
                    rng: &mut ChaCha8Rng| {
            let std = (2.0 / (cin * 9) as f64).sqrt();
            params.insert(format!("{name}.w"), normal(&[cout, cin, 3, 3], std, rng));
            params.insert(format!("{name}.bn.gamma"), ones(&[cout]));
            params.insert(format!("{name}.bn.beta"), zeros(&[cout]));
            bn.insert(format!("{name}.bn"), RunningStats::identity(cout));
        };
        conv(
            &mut params,
            &mut bn,
            "front.conv1",
            c.cnn_channels,
            1,
            &mut rng,
        );
        conv(
            &mut params,
            &mut bn,
            "front.conv2",
            c.cnn_channels,
            c.cnn_channels,
            &mut rng,
        );
        let mut cin = c.cnn_channels;
        for l in 0..2 {
            let cout = if l == 0 {
                c.cnn_channels
            } else {
                c.attn2d_out_channels
            };
            for qkv in ["q", "k", "v"] {
                conv(
                    &mut params,
                    &mut bn,
                    &format!("attn2d.{l}.{qkv}"),
                    c.attn2d_channels,
                    cin,
                    &mut rng,
                );
            }
            conv(
                &mut params,
                &mut bn,
                &format!("attn2d.{l}.out"),
                cout,
                2 * c.attn2d_channels,
                &mut rng,
            );
            cin = cout;
        }
        let flat = c.attn2d_out_channels * c.reduced_freq();
        linear(&mut params, "front.proj", flat, d, &mut rng);

        for i in 0..c.n_enc_layers {
            let p = format!("enc.{i}");
            layer_norm(&mut params, &format!("{p}.ln1"), d);
            attention(&mut params, &format!("{p}.attn"), d, &mut rng);
            layer_norm(&mut params, &format!("{p}.ln2"), d);
            feed_forward(&mut params, &format!("{p}.ff"), d, c.ff_dim, &mut rng);
        }
        layer_norm(&mut params, "enc.ln_f", d);

        params.insert(
            "dec.embed".into(),
            normal(&[c.vocab_size, d], (d as f64).powf(-0.5), &mut rng),
        );
        for i in 0..c.n_dec_layers {
            let p = format!("dec.{i}");
            layer_norm(&mut params, &format!("{p}.ln1"), d);
            attention(&mut params, &format!("{p}.self"), d, &mut rng);
            layer_norm(&mut params, &format!("{p}.ln2"), d);
            attention(&mut params, &format!("{p}.cross"), d, &mut rng);
            layer_norm(&mut params, &format!("{p}.ln3"), d);
            feed_forward(&mut params, &format!("{p}.ff"), d, c.ff_dim, &mut rng);
        }
        layer_norm(&mut params, "dec.ln_f", d);
        linear(&mut params, "dec.out", d, c.vocab_size, &mut rng);

        for t in params.values_mut() {
            t.requires_grad = true;
        }
        let vocab = CharVocab::new(&config.symbols);
        Ok(STModel {
            config,
            vocab,
            params,
            bn,
            training: false,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &CharVocab {
        &self.vocab
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> &Tensor {
        &self.params[name]
    }

    pub fn bn_stats(&self) -> &BTreeMap<String, RunningStats> {
        &self.bn
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn set_train(&mut self, train: bool) {
        self.training = train;
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn mode(&self) -> Mode {
        if self.training {
            Mode::Train
        } else {
            Mode::Eval
        }
    }

    pub fn zero_grad(&mut self) {
        self.params.values_mut().for_each(Tensor::zero_grad);
    }

    /// Runs the encoder in eval mode.
    pub fn encode(&self, features: &Tensor) -> Result<EncodedSegment> {
        let mut g = Graph::new();
        let mut fw = Forward::new(&mut g, self, Mode::Eval, 0);
        let out = fw.encode(&[features])?.remove(0);
        let states = fw.graph().value(out).clone();
        Ok(EncodedSegment {
            len: states.shape()[0],
            states,
        })
    }

    /// Encoder output in an explicit mode; train mode draws dropout masks from `seed`.
    pub fn encode_in_mode(&self, features: &Tensor, mode: Mode, seed: u64) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut fw = Forward::new(&mut g, self, mode, seed);
        let out = fw.encode(&[features])?.remove(0);
        Ok(fw.graph().value(out).clone())
    }

    /// Teacher-forced loss of a batch without touching gradients or statistics.
    pub fn loss(&self, batch: &[Example<'_>], mode: Mode, seed: u64) -> Result<f64> {
        let mut g = Graph::new();
        let mut fw = Forward::new(&mut g, self, mode, seed);
        let loss = fw.batch_loss(batch)?;
        Ok(g.scalar(loss))
    }

    /// Teacher-forced logits `[L-1, V]` for one example (decoder inputs are
    /// `target[..L-1]`).
    pub fn teacher_forced_logits(&self, features: &Tensor, target: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut fw = Forward::new(&mut g, self, Mode::Eval, 0);
        let enc = fw.encode(&[features])?.remove(0);
        let logits = fw.decoder_logits(enc, &target[..target.len().saturating_sub(1).max(1)])?;
        Ok(g.value(logits).clone())
    }

    /// Forward + backward on a batch in the model's current mode. Gradients are
    /// added to each parameter's `grad`; in train mode the batch-norm running
    /// statistics are updated. Returns the loss.
    pub fn accumulate_gradients(&mut self, batch: &[Example<'_>], seed: u64) -> Result<f64> {
        let mode = self.mode();
        let mut g = Graph::new();
        let (loss, bound, updates) = {
            let mut fw = Forward::new(&mut g, self, mode, seed);
            let loss = fw.batch_loss(batch)?;
            let (bound, updates) = fw.finish();
            (loss, bound, updates)
        };
        g.backward(loss)?;
        for (name, var) in bound {
            if let Some(grad) = g.grad(var) {
                self.params
                    .get_mut(&name)
                    .expect("bound parameter exists")
                    .accumulate_grad(grad);
            }
        }
        for (name, stats) in updates {
            self.bn
                .get_mut(&name)
                .expect("batch norm exists")
                .update(&stats, crate::tensor::BN_MOMENTUM);
        }
        Ok(g.scalar(loss))
    }

    pub fn translate(&self, features: &Tensor) -> Result<String> {
        let enc = self.encode(features)?;
        Ok(self.greedy_decode(&enc))
    }

    /// Parameter values and running statistics; gradient buffers are not copied.
    pub fn snapshot(&self) -> ParameterImage {
        let mut params = self.params.clone();
        params.values_mut().for_each(Tensor::zero_grad);
        ParameterImage {
            config: self.config.clone(),
            params,
            bn: self.bn.clone(),
        }
    }

    pub fn restore(&mut self, image: &ParameterImage) -> Result<()> {
        if image.config != self.config {
            return Err(Error::Incompatible(describe_config_diff(
                &self.config,
                &image.config,
            )));
        }
        self.params = image.params.clone();
        self.bn = image.bn.clone();
        Ok(())
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        params: BTreeMap<String, Tensor>,
        bn: BTreeMap<String, RunningStats>,
    ) -> Result<Self> {
        let reference = STModel::new(config.clone(), 0)?;
        for (name, t) in &reference.params {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::Incompatible(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::Incompatible(format!("missing parameter {name}"))),
            }
        }
        for (name, s) in &reference.bn {
            match bn.get(name) {
                Some(b) if b.mean.len() == s.mean.len() && b.var.len() == s.var.len() => {}
                _ => {
                    return Err(Error::Incompatible(format!(
                        "missing or malformed statistics {name}"
                    )))
                }
            }
        }
        if params.len() != reference.params.len() || bn.len() != reference.bn.len() {
            return Err(Error::Incompatible("unexpected parameter set".into()));
        }
        let vocab = CharVocab::new(&config.symbols);
        Ok(STModel {
            config,
            vocab,
            params,
            bn,
            training: false,
        })
    }
}

impl ParameterImage {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }
}

fn describe_config_diff(a: &ModelConfig, b: &ModelConfig) -> String {
    if a.vocab_size != b.vocab_size {
        format!("vocab_size {} vs {}", a.vocab_size, b.vocab_size)
    } else {
        "model configurations differ".into()
    }
}

fn zeros(shape: &[usize]) -> Tensor {
    Tensor::zeros(shape).expect("positive shape")
}

fn ones(shape: &[usize]) -> Tensor {
    Tensor::full(shape, 1.0).expect("positive shape")
}

fn normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("positive shape")
}

fn xavier(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-a..a))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("positive shape")
}

fn linear(
    params: &mut BTreeMap<String, Tensor>,
    name: &str,
    i: usize,
    o: usize,
    rng: &mut impl Rng,
) {
    params.insert(format!("{name}.w"), xavier(i, o, rng));
    params.insert(format!("{name}.b"), zeros(&[o]));
}

fn layer_norm(params: &mut BTreeMap<String, Tensor>, name: &str, d: usize) {
    params.insert(format!("{name}.gamma"), ones(&[d]));
    params.insert(format!("{name}.beta"), zeros(&[d]));
}

fn attention(params: &mut BTreeMap<String, Tensor>, name: &str, d: usize, rng: &mut impl Rng) {
    for p in ["q", "k", "v", "o"] {
        linear(params, &format!("{name}.{p}"), d, d, rng);
    }
}

fn feed_forward(
    params: &mut BTreeMap<String, Tensor>,
    name: &str,
    d: usize,
    ff: usize,
    rng: &mut impl Rng,
) {
    linear(params, &format!("{name}.1"), d, ff, rng);
    linear(params, &format!("{name}.2"), ff, d, rng);
}
