use super::layers::LN_EPS;
use super::{EncodedSegment, STModel, BOS, EOS, PAD};
use crate::error::Result;
use crate::tensor::kernels::{gemm, layer_norm_row, sinusoidal_positions, softmax_in_place};
use crate::tensor::Tensor;

/// Greedy search driver. `step` receives the previous token and returns the
/// next-token logits. PAD and BOS are never emitted; ties go to the lowest id.
/// Stops at EOS (not included) or after `max_len` tokens.
pub fn greedy_search(
    max_len: usize,
    mut step: impl FnMut(usize) -> Result<Vec<f64>>,
) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    let mut prev = BOS;
    while out.len() < max_len {
        let logits = step(prev)?;
        let next = argmax_excluding(&logits, &[PAD, BOS]);
        if next == EOS {
            break;
        }
        out.push(next);
        prev = next;
    }
    Ok(out)
}

fn argmax_excluding(logits: &[f64], skip: &[usize]) -> usize {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in logits.iter().enumerate() {
        if skip.contains(&i) {
            continue;
        }
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map_or(EOS, |(i, _)| i)
}

/// `x [rows, in] * w [in, out] + b`.
fn affine(model: &STModel, name: &str, x: &[f64], rows: usize) -> Vec<f64> {
    let w = model.param(&format!("{name}.w"));
    let b = model.param(&format!("{name}.b")).data();
    let (i, o) = (w.shape()[0], w.shape()[1]);
    let mut out: Vec<f64> = (0..rows).flat_map(|_| b.iter().copied()).collect();
    gemm(rows, i, o, 1.0, x, false, w.data(), false, 1.0, &mut out);
    out
}

fn norm(model: &STModel, name: &str, x: &[f64]) -> Vec<f64> {
    let g = model.param(&format!("{name}.gamma")).data();
    let b = model.param(&format!("{name}.beta")).data();
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks(g.len()).zip(out.chunks_mut(g.len())) {
        layer_norm_row(row, g, b, LN_EPS, o);
    }
    out
}

/// Attention of one query row over `t` cached key/value rows, all heads.
fn attend(q: &[f64], k: &[f64], v: &[f64], t: usize, heads: usize) -> Vec<f64> {
    let d = q.len();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; d];
    let mut scores = vec![0.0; t];
    for h in 0..heads {
        let qh = &q[h * dh..(h + 1) * dh];
        for (j, s) in scores.iter_mut().enumerate() {
            let kh = &k[j * d + h * dh..j * d + (h + 1) * dh];
            *s = qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f64>() * scale;
        }
        softmax_in_place(&mut scores);
        for (j, &p) in scores.iter().enumerate() {
            let vh = &v[j * d + h * dh..j * d + (h + 1) * dh];
            for (o, x) in out[h * dh..(h + 1) * dh].iter_mut().zip(vh) {
                *o += p * x;
            }
        }
    }
    out
}

struct LayerCache {
    self_k: Vec<f64>,
    self_v: Vec<f64>,
    cross_k: Vec<f64>,
    cross_v: Vec<f64>,
}

/// Incremental eval-mode decoder with per-layer key/value caches.
pub(crate) struct CachedDecoder<'a> {
    model: &'a STModel,
    src_len: usize,
    layers: Vec<LayerCache>,
    pos: usize,
}

impl<'a> CachedDecoder<'a> {
    pub(crate) fn new(model: &'a STModel, enc: &Tensor) -> Self {
        let src_len = enc.shape()[0];
        let layers = (0..model.config().n_dec_layers)
            .map(|i| LayerCache {
                self_k: Vec::new(),
                self_v: Vec::new(),
                cross_k: affine(model, &format!("dec.{i}.cross.k"), enc.data(), src_len),
                cross_v: affine(model, &format!("dec.{i}.cross.v"), enc.data(), src_len),
            })
            .collect();
        CachedDecoder {
            model,
            src_len,
            layers,
            pos: 0,
        }
    }

    /// Feeds one token and returns the logits for the next position.
    pub(crate) fn step(&mut self, token: usize) -> Vec<f64> {
        let m = self.model;
        let cfg = m.config();
        let d = cfg.d_model;
        let heads = cfg.n_heads;
        let table = m.param("dec.embed");
        let pe = sinusoidal_positions(self.pos, 1, d);
        let scale = (d as f64).sqrt();
        let mut h: Vec<f64> = table
            .row(token)
            .iter()
            .zip(&pe)
            .map(|(e, p)| e * scale + p)
            .collect();
        for (i, cache) in self.layers.iter_mut().enumerate() {
            let n = norm(m, &format!("dec.{i}.ln1"), &h);
            cache
                .self_k
                .extend(affine(m, &format!("dec.{i}.self.k"), &n, 1));
            cache
                .self_v
                .extend(affine(m, &format!("dec.{i}.self.v"), &n, 1));
            let q = affine(m, &format!("dec.{i}.self.q"), &n, 1);
            let a = attend(&q, &cache.self_k, &cache.self_v, self.pos + 1, heads);
            let a = affine(m, &format!("dec.{i}.self.o"), &a, 1);
            h.iter_mut().zip(&a).for_each(|(x, y)| *x += y);

            let n = norm(m, &format!("dec.{i}.ln2"), &h);
            let q = affine(m, &format!("dec.{i}.cross.q"), &n, 1);
            let a = attend(&q, &cache.cross_k, &cache.cross_v, self.src_len, heads);
            let a = affine(m, &format!("dec.{i}.cross.o"), &a, 1);
            h.iter_mut().zip(&a).for_each(|(x, y)| *x += y);

            let n = norm(m, &format!("dec.{i}.ln3"), &h);
            let mut f = affine(m, &format!("dec.{i}.ff.1"), &n, 1);
            f.iter_mut().for_each(|v| *v = v.max(0.0));
            let f = affine(m, &format!("dec.{i}.ff.2"), &f, 1);
            h.iter_mut().zip(&f).for_each(|(x, y)| *x += y);
        }
        self.pos += 1;
        let n = norm(m, "dec.ln_f", &h);
        affine(m, "dec.out", &n, 1)
    }
}

impl STModel {
    /// Greedy character decoding from an encoded segment.
    pub fn greedy_decode(&self, enc: &EncodedSegment) -> String {
        let ids = self.greedy_decode_ids(enc);
        self.vocab().decode(&ids)
    }

    pub fn greedy_decode_ids(&self, enc: &EncodedSegment) -> Vec<usize> {
        let mut dec = CachedDecoder::new(self, &enc.states);
        greedy_search(self.config().max_decode_len, |tok| Ok(dec.step(tok)))
            .expect("cached decoder is infallible")
    }

    /// Logits from the cached decoder for decoder inputs `inputs`, `[L, V]`.
    pub fn cached_logits(&self, enc: &EncodedSegment, inputs: &[usize]) -> Result<Tensor> {
        let mut dec = CachedDecoder::new(self, &enc.states);
        let mut data = Vec::with_capacity(inputs.len() * self.config().vocab_size);
        for &t in inputs {
            data.extend(dec.step(t));
        }
        Ok(Tensor::new(
            vec![inputs.len(), self.config().vocab_size],
            data,
        )?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eos_first_yields_nothing() {
        let out = greedy_search(10, |_| {
            let mut l = vec![0.0; 6];
            l[EOS] = 5.0;
            Ok(l)
        })
        .unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn never_eos_stops_at_max_len() {
        let out = greedy_search(7, |_| {
            let mut l = vec![0.0; 6];
            l[4] = 5.0;
            Ok(l)
        })
        .unwrap();
        assert_eq!(out, vec![4; 7]);
    }

    #[test]
    fn ties_go_to_lowest_id_and_specials_are_skipped() {
        let l = vec![9.0, 9.0, 1.0, 3.0, 3.0];
        assert_eq!(argmax_excluding(&l, &[PAD, BOS]), 3);
    }
}
