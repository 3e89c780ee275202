use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Example, STModel, PAD};
use crate::error::{Error, Result};
use crate::tensor::{
    kernels, BatchStats, Graph, Mode, Reduction, Tensor, TensorError, Var, BN_EPS,
};

pub(crate) const LN_EPS: f64 = 1e-5;

/// `-log|i-j|` off the diagonal, 0 on it, for a `t x t` score matrix.
pub fn distance_penalty_matrix(t: usize) -> Vec<f64> {
    let mut m = vec![0.0; t * t];
    for i in 0..t {
        for j in 0..t {
            if i != j {
                m[i * t + j] = -((i as f64 - j as f64).abs()).ln();
            }
        }
    }
    m
}

/// Subtracts `log|i-j|` from every off-diagonal attention score.
pub fn distance_penalty(g: &mut Graph, scores: Var) -> Result<Var> {
    let s = g.shape(scores).to_vec();
    if s.len() != 2 || s[0] != s[1] {
        return Err(TensorError::InvalidShape {
            op: "distance_penalty",
            shape: s,
            reason: "score matrix must be square".into(),
        }
        .into());
    }
    Ok(g.add_const(scores, &distance_penalty_matrix(s[0]))?)
}

fn causal_mask(t: usize) -> Vec<f64> {
    let mut m = vec![0.0; t * t];
    for i in 0..t {
        for j in i + 1..t {
            m[i * t + j] = f64::NEG_INFINITY;
        }
    }
    m
}

#[derive(Clone, Copy)]
enum ScoreBias {
    None,
    DistancePenalty,
    Causal,
}

/// One forward pass of an [`STModel`] recorded on a [`Graph`]. Parameters are
/// bound into the graph on first use.
pub struct Forward<'a> {
    g: &'a mut Graph,
    model: &'a STModel,
    mode: Mode,
    rng: ChaCha8Rng,
    bound: BTreeMap<String, Var>,
    bn_updates: Vec<(String, BatchStats)>,
    attn_maps: Vec<Var>,
}

impl<'a> Forward<'a> {
    pub fn new(g: &'a mut Graph, model: &'a STModel, mode: Mode, seed: u64) -> Self {
        Forward::with_bindings(g, model, mode, seed, BTreeMap::new())
    }

    /// Uses caller-supplied graph variables for the named parameters.
    pub fn with_bindings(
        g: &'a mut Graph,
        model: &'a STModel,
        mode: Mode,
        seed: u64,
        bound: BTreeMap<String, Var>,
    ) -> Self {
        Forward {
            g,
            model,
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            bound,
            bn_updates: Vec::new(),
            attn_maps: Vec::new(),
        }
    }

    pub fn graph(&self) -> &Graph {
        self.g
    }

    pub fn graph_mut(&mut self) -> &mut Graph {
        self.g
    }

    /// Softmax maps produced by the latest 2-D attention block: per segment,
    /// time-axis maps for every head followed by frequency-axis maps.
    pub fn attention_maps(&self) -> &[Var] {
        &self.attn_maps
    }

    /// Bound parameters and pending batch-norm statistics.
    pub fn finish(self) -> (BTreeMap<String, Var>, Vec<(String, BatchStats)>) {
        (self.bound, self.bn_updates)
    }

    fn p(&mut self, name: &str) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let v = self.g.param(self.model.param(name));
        self.bound.insert(name.to_string(), v);
        v
    }

    fn dropout(&mut self, x: Var) -> Result<Var> {
        let p = self.model.config().dropout_p;
        Ok(self
            .g
            .dropout(x, p, self.mode == Mode::Train, &mut self.rng)?)
    }

    fn linear(&mut self, name: &str, x: Var) -> Result<Var> {
        let w = self.p(&format!("{name}.w"));
        let b = self.p(&format!("{name}.b"));
        Ok(self.g.linear(x, w, Some(b))?)
    }

    fn layer_norm(&mut self, name: &str, x: Var) -> Result<Var> {
        let gamma = self.p(&format!("{name}.gamma"));
        let beta = self.p(&format!("{name}.beta"));
        Ok(self.g.layer_norm(x, gamma, beta, LN_EPS)?)
    }

    /// Batch norm over every segment of the batch jointly (train) or with the
    /// running statistics (eval).
    fn batch_norm(&mut self, name: &str, xs: Vec<Var>, relu: bool) -> Result<Vec<Var>> {
        let gamma = self.p(&format!("{name}.bn.gamma"));
        let beta = self.p(&format!("{name}.bn.beta"));
        let key = format!("{name}.bn");
        let normed = match self.mode {
            Mode::Train => {
                let lens: Vec<usize> = xs.iter().map(|&x| self.g.shape(x)[1]).collect();
                let joined = if xs.len() == 1 {
                    xs[0]
                } else {
                    self.g.concat(&xs, 1)?
                };
                let (y, stats) = self.g.batchnorm_train(joined, gamma, beta, BN_EPS)?;
                self.bn_updates.push((key, stats));
                if xs.len() == 1 {
                    vec![y]
                } else {
                    let mut out = Vec::with_capacity(xs.len());
                    let mut start = 0;
                    for len in lens {
                        out.push(self.g.slice(y, 1, start, len)?);
                        start += len;
                    }
                    out
                }
            }
            Mode::Eval => {
                let stats = &self.model.bn_stats()[&key];
                if !stats.initialized {
                    return Err(
                        TensorError::State(format!("{key} has no running statistics")).into(),
                    );
                }
                let mut out = Vec::with_capacity(xs.len());
                for x in xs {
                    out.push(self.g.batchnorm_eval(
                        x,
                        gamma,
                        beta,
                        &stats.mean,
                        &stats.var,
                        BN_EPS,
                    )?);
                }
                out
            }
        };
        Ok(if relu {
            normed.into_iter().map(|y| self.g.relu(y)).collect()
        } else {
            normed
        })
    }

    fn conv_bn(&mut self, name: &str, xs: &[Var], stride: usize, relu: bool) -> Result<Vec<Var>> {
        let w = self.p(&format!("{name}.w"));
        let mut ys = Vec::with_capacity(xs.len());
        for &x in xs {
            ys.push(self.g.conv2d(x, w, (stride, stride))?);
        }
        self.batch_norm(name, ys, relu)
    }

    /// Two stride-(2,2) convolutions, each with batch norm and ReLU.
    /// Returns `[cnn_channels, ceil(ceil(N/2)/2), ceil(ceil(k/2)/2)]` per segment.
    pub fn cnn_frontend(&mut self, feats: &[&Tensor]) -> Result<Vec<Var>> {
        let k = self.model.config().feature_dim;
        let mut xs = Vec::with_capacity(feats.len());
        for f in feats {
            let s = f.shape();
            if s.len() != 2 || s[1] != k {
                return Err(Error::Dimension {
                    expected: k,
                    got: *s.last().unwrap_or(&0),
                });
            }
            if s[0] < 4 {
                return Err(Error::TooShort { frames: s[0] });
            }
            let t = Tensor::new(vec![1, s[0], k], f.data().to_vec())?;
            xs.push(self.g.constant(t));
        }
        let xs = self.conv_bn("front.conv1", &xs, 2, true)?;
        self.conv_bn("front.conv2", &xs, 2, true)
    }

    /// Axis-factored 2-D self-attention block `layer` (0 or 1) over `[c, T, F]`
    /// inputs. Each head attends along time (frames as F-vectors) and along
    /// frequency (bins as T-vectors); the two results are stacked as channels
    /// and mixed by an output convolution.
    pub fn self_attention_2d(&mut self, layer: usize, xs: &[Var]) -> Result<Vec<Var>> {
        let cfg = self.model.config();
        let expected = cfg.cnn_channels;
        let heads = cfg.attn2d_channels;
        if layer > 1 {
            return Err(Error::Config(format!("no 2-D attention block {layer}")));
        }
        for &x in xs {
            let c = self.g.shape(x)[0];
            if c != expected {
                return Err(Error::Config(format!(
                    "2-D attention block {layer} expects {expected} channels, got {c}"
                )));
            }
        }
        let name = format!("attn2d.{layer}");
        let q = self.conv_bn(&format!("{name}.q"), xs, 1, false)?;
        let k = self.conv_bn(&format!("{name}.k"), xs, 1, false)?;
        let v = self.conv_bn(&format!("{name}.v"), xs, 1, false)?;
        self.attn_maps.clear();
        let mut stacked = Vec::with_capacity(xs.len());
        for u in 0..xs.len() {
            let s = self.g.shape(q[u]).to_vec();
            let (t, f) = (s[1], s[2]);
            let mut time_out = Vec::with_capacity(heads);
            let mut freq_out = Vec::with_capacity(heads);
            let mut freq_maps = Vec::with_capacity(heads);
            for h in 0..heads {
                let head = |g: &mut Graph, x: Var| -> Result<Var> {
                    let sl = g.slice(x, 0, h, 1)?;
                    Ok(g.reshape(sl, &[t, f])?)
                };
                let qh = head(self.g, q[u])?;
                let kh = head(self.g, k[u])?;
                let vh = head(self.g, v[u])?;

                let st = self.g.matmul_t(qh, false, kh, true)?;
                let st = self.g.scale(st, 1.0 / (f as f64).sqrt());
                let pt = self.g.softmax_rows(st);
                self.attn_maps.push(pt);
                let ot = self.g.matmul(pt, vh)?;
                time_out.push(self.g.reshape(ot, &[1, t, f])?);

                let sf = self.g.matmul_t(qh, true, kh, false)?;
                let sf = self.g.scale(sf, 1.0 / (t as f64).sqrt());
                let pf = self.g.softmax_rows(sf);
                freq_maps.push(pf);
                let of = self.g.matmul_t(vh, false, pf, true)?;
                freq_out.push(self.g.reshape(of, &[1, t, f])?);
            }
            self.attn_maps.extend(freq_maps);
            time_out.extend(freq_out);
            stacked.push(self.g.concat(&time_out, 0)?);
        }
        self.conv_bn(&format!("{name}.out"), &stacked, 1, true)
    }

    /// `[c, T, F] -> [T, c*F] -> [T, d_model]`, plus position encoding and dropout.
    pub fn flatten_project(&mut self, x: Var) -> Result<Var> {
        let s = self.g.shape(x).to_vec();
        let p = self.g.permute3(x, [1, 0, 2])?;
        let flat = self.g.reshape(p, &[s[1], s[0] * s[2]])?;
        let h = self.linear("front.proj", flat)?;
        let d = self.model.config().d_model;
        let h = self
            .g
            .add_const(h, &kernels::sinusoidal_positions(0, s[1], d))?;
        self.dropout(h)
    }

    fn mha(&mut self, name: &str, xq: Var, xkv: Var, bias: ScoreBias) -> Result<Var> {
        let cfg = self.model.config();
        let heads = cfg.n_heads;
        let dh = cfg.d_model / heads;
        let q = self.linear(&format!("{name}.q"), xq)?;
        let k = self.linear(&format!("{name}.k"), xkv)?;
        let v = self.linear(&format!("{name}.v"), xkv)?;
        let tq = self.g.shape(q)[0];
        let mask = match bias {
            ScoreBias::Causal => Some(causal_mask(tq)),
            _ => None,
        };
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = self.g.slice(q, 1, h * dh, dh)?;
            let kh = self.g.slice(k, 1, h * dh, dh)?;
            let vh = self.g.slice(v, 1, h * dh, dh)?;
            let s = self.g.matmul_t(qh, false, kh, true)?;
            let mut s = self.g.scale(s, 1.0 / (dh as f64).sqrt());
            match bias {
                ScoreBias::DistancePenalty => s = distance_penalty(self.g, s)?,
                ScoreBias::Causal => s = self.g.add_const(s, mask.as_deref().unwrap())?,
                ScoreBias::None => {}
            }
            let p = self.g.softmax_rows(s);
            outs.push(self.g.matmul(p, vh)?);
        }
        let cat = if heads == 1 {
            outs[0]
        } else {
            self.g.concat(&outs, 1)?
        };
        self.linear(&format!("{name}.o"), cat)
    }

    fn feed_forward(&mut self, name: &str, x: Var) -> Result<Var> {
        let h = self.linear(&format!("{name}.1"), x)?;
        let h = self.g.relu(h);
        self.linear(&format!("{name}.2"), h)
    }

    fn residual(&mut self, x: Var, sub: Var) -> Result<Var> {
        let sub = self.dropout(sub)?;
        Ok(self.g.add(x, sub)?)
    }

    /// Full encoder over a batch; returns `[T', d_model]` per segment.
    pub fn encode(&mut self, feats: &[&Tensor]) -> Result<Vec<Var>> {
        if feats.is_empty() {
            return Err(Error::Empty("encoder batch".into()));
        }
        let xs = self.cnn_frontend(feats)?;
        let xs = self.self_attention_2d(0, &xs)?;
        let xs = self.self_attention_2d(1, &xs)?;
        let n_layers = self.model.config().n_enc_layers;
        let mut outs = Vec::with_capacity(xs.len());
        for x in xs {
            let mut h = self.flatten_project(x)?;
            for i in 0..n_layers {
                let n = self.layer_norm(&format!("enc.{i}.ln1"), h)?;
                let a = self.mha(&format!("enc.{i}.attn"), n, n, ScoreBias::DistancePenalty)?;
                h = self.residual(h, a)?;
                let n = self.layer_norm(&format!("enc.{i}.ln2"), h)?;
                let f = self.feed_forward(&format!("enc.{i}.ff"), n)?;
                h = self.residual(h, f)?;
            }
            outs.push(self.layer_norm("enc.ln_f", h)?);
        }
        Ok(outs)
    }

    /// Teacher-forced decoder logits `[L, V]` for decoder inputs `inputs`.
    pub fn decoder_logits(&mut self, enc: Var, inputs: &[usize]) -> Result<Var> {
        let cfg = self.model.config();
        let d = cfg.d_model;
        let n_layers = cfg.n_dec_layers;
        let table = self.p("dec.embed");
        let e = self.g.embedding(inputs, table)?;
        let e = self.g.scale(e, (d as f64).sqrt());
        let e = self
            .g
            .add_const(e, &kernels::sinusoidal_positions(0, inputs.len(), d))?;
        let mut h = self.dropout(e)?;
        for i in 0..n_layers {
            let n = self.layer_norm(&format!("dec.{i}.ln1"), h)?;
            let a = self.mha(&format!("dec.{i}.self"), n, n, ScoreBias::Causal)?;
            h = self.residual(h, a)?;
            let n = self.layer_norm(&format!("dec.{i}.ln2"), h)?;
            let a = self.mha(&format!("dec.{i}.cross"), n, enc, ScoreBias::None)?;
            h = self.residual(h, a)?;
            let n = self.layer_norm(&format!("dec.{i}.ln3"), h)?;
            let f = self.feed_forward(&format!("dec.{i}.ff"), n)?;
            h = self.residual(h, f)?;
        }
        let h = self.layer_norm("dec.ln_f", h)?;
        self.linear("dec.out", h)
    }

    /// Label-smoothed cross entropy of `target` (BOS-prefixed, EOS-terminated,
    /// optionally PAD-padded) given an encoded segment, summed over positions.
    pub fn decoder_loss(&mut self, enc: Var, target: &[usize]) -> Result<Var> {
        if target.len() < 2 {
            return Err(Error::Contract("target needs at least BOS and EOS".into()));
        }
        let logits = self.decoder_logits(enc, &target[..target.len() - 1])?;
        let eps = self.model.config().label_smoothing;
        Ok(self
            .g
            .cross_entropy(logits, &target[1..], eps, Some(PAD), Reduction::Sum)?)
    }

    /// Summed loss over a batch of examples.
    pub fn batch_loss(&mut self, batch: &[Example<'_>]) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Empty("training batch".into()));
        }
        let feats: Vec<&Tensor> = batch.iter().map(|e| e.features).collect();
        let encs = self.encode(&feats)?;
        let mut logits = Vec::with_capacity(batch.len());
        let mut labels = Vec::new();
        for (ex, &enc) in batch.iter().zip(&encs) {
            if ex.target.len() < 2 {
                return Err(Error::Contract("target needs at least BOS and EOS".into()));
            }
            let n = ex.target.len();
            logits.push(self.decoder_logits(enc, &ex.target[..n - 1])?);
            labels.extend_from_slice(&ex.target[1..]);
        }
        let all = if logits.len() == 1 {
            logits[0]
        } else {
            self.g.concat(&logits, 0)?
        };
        let eps = self.model.config().label_smoothing;
        Ok(self
            .g
            .cross_entropy(all, &labels, eps, Some(PAD), Reduction::Sum)?)
    }
}
