//! Semantic path: token ids to a per-token feature map `C`, then the affine
//! projection `H_C = C W^C + b^C` and its elementwise confidence
//! `sigmoid(H_C)`.
//!
//! Batches are flattened: `B` messages of `m` token slots become a
//! `(B*m) x d_model` matrix, message `b` occupying rows `b*m .. (b+1)*m`.

use std::collections::HashMap;
use std::rc::Rc;

use crate::corpus::{LogDataset, Split};
use crate::error::{Error, Result};
use crate::numcore::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::rng::Rng;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

/// Token-to-id map for the semantic encoder. Train words seen fewer than
/// `min_count` times map to `<unk>`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderVocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl EncoderVocab {
    pub fn from_tokens(words: impl IntoIterator<Item = String>) -> Self {
        let mut vocab = EncoderVocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for w in [PAD.to_string(), UNK.to_string()].into_iter().chain(words) {
            if !vocab.index.contains_key(&w) {
                vocab.index.insert(w.clone(), vocab.tokens.len());
                vocab.tokens.push(w);
            }
        }
        vocab
    }

    /// Train-split words with at least `min_count` occurrences, in
    /// lexicographic order.
    pub fn build(dataset: &LogDataset, min_count: u64) -> Self {
        let mut counts: std::collections::BTreeMap<&str, u64> = Default::default();
        for r in dataset.split_records(Split::Train) {
            for t in &r.tokens {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        Self::from_tokens(
            counts
                .into_iter()
                .filter(|&(_, c)| c >= min_count.max(1))
                .map(|(w, _)| w.to_string()),
        )
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    /// All tokens after the two reserved ones.
    pub fn words(&self) -> &[String] {
        &self.tokens[2..]
    }
}

/// Padded id matrix of a batch. Messages longer than `m` are truncated; an
/// empty message becomes a single `<unk>`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub ids: Rc<[usize]>,
    pub mask: Rc<[bool]>,
    pub m: usize,
    pub batch: usize,
}

impl TokenBatch {
    pub fn new<S: AsRef<str>>(vocab: &EncoderVocab, messages: &[&[S]], m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidArgument("sequence length m must be positive".into()));
        }
        let mut ids = vec![PAD_ID; messages.len() * m];
        let mut mask = vec![false; messages.len() * m];
        for (b, msg) in messages.iter().enumerate() {
            if msg.is_empty() {
                ids[b * m] = UNK_ID;
                mask[b * m] = true;
            }
            for (i, tok) in msg.iter().take(m).enumerate() {
                ids[b * m + i] = vocab.id(tok.as_ref());
                mask[b * m + i] = true;
            }
        }
        Ok(TokenBatch {
            ids: ids.into(),
            mask: mask.into(),
            m,
            batch: messages.len(),
        })
    }

    pub fn rows(&self) -> usize {
        self.batch * self.m
    }

    /// `(B*m) x d` matrix with ones on real rows and zeros on pad rows.
    pub fn row_mask(&self, d: usize) -> Tensor {
        let data = self
            .mask
            .iter()
            .flat_map(|&keep| std::iter::repeat_n(if keep { 1.0 } else { 0.0 }, d))
            .collect();
        Tensor::matrix(self.rows(), d, data).expect("sized by construction")
    }
}

/// A token encoder producing the feature map `C` (`(B*m) x d_model`) with
/// pad rows exactly zero. Implementations register their parameters in the
/// shared store at construction.
pub trait SemanticEncoder: std::fmt::Debug {
    fn name(&self) -> &'static str;
    fn d_model(&self) -> usize;
    fn encode(&self, g: &mut Graph, store: &ParamStore, batch: &TokenBatch) -> Result<Var>;
}

/// `pe[p][2i] = sin(p / 10000^(2i/d))`, `pe[p][2i+1] = cos(...)`.
pub fn sinusoidal_positions(m: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; m * d];
    for p in 0..m {
        for j in 0..d {
            let rate = 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
            let angle = p as f64 / rate;
            data[p * d + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::matrix(m, d, data).expect("sized by construction")
}

fn embed(g: &mut Graph, store: &ParamStore, table: ParamId, batch: &TokenBatch, d: usize) -> Result<Var> {
    let t = g.param(store, table);
    let x = g.gather(t, batch.ids.clone())?;
    let pe = g.constant(sinusoidal_positions(batch.m, d));
    g.add_tiled(x, pe)
}

/// Token embeddings plus sinusoidal positions, no mixing across tokens.
#[derive(Debug, Clone)]
pub struct EmbeddingEncoder {
    table: ParamId,
    d_model: usize,
}

impl EmbeddingEncoder {
    pub fn new(store: &mut ParamStore, vocab_size: usize, d_model: usize, rng: &mut Rng) -> Self {
        let table = store.add("snet.embed", Tensor::randn(&[vocab_size, d_model], 0.1, rng));
        EmbeddingEncoder { table, d_model }
    }
}

impl SemanticEncoder for EmbeddingEncoder {
    fn name(&self) -> &'static str {
        "embedding"
    }

    fn d_model(&self) -> usize {
        self.d_model
    }

    fn encode(&self, g: &mut Graph, store: &ParamStore, batch: &TokenBatch) -> Result<Var> {
        let x = embed(g, store, self.table, batch, self.d_model)?;
        let keep = g.constant(batch.row_mask(self.d_model));
        g.mul(x, keep)
    }
}

/// Embeddings and positions followed by one scaled dot-product
/// self-attention block and a ReLU feed-forward block, each residual.
#[derive(Debug, Clone)]
pub struct AttentionEncoder {
    table: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ff_w1: ParamId,
    ff_b1: ParamId,
    ff_w2: ParamId,
    ff_b2: ParamId,
    d_model: usize,
}

impl AttentionEncoder {
    pub fn new(store: &mut ParamStore, vocab_size: usize, d_model: usize, rng: &mut Rng) -> Self {
        let d = d_model;
        let table = store.add("snet.embed", Tensor::randn(&[vocab_size, d], 0.1, rng));
        let wq = store.add("snet.attn.wq", Tensor::glorot(d, d, rng));
        let wk = store.add("snet.attn.wk", Tensor::glorot(d, d, rng));
        let wv = store.add("snet.attn.wv", Tensor::glorot(d, d, rng));
        let wo = store.add("snet.attn.wo", Tensor::glorot(d, d, rng));
        let ff_w1 = store.add("snet.ff.w1", Tensor::glorot(d, 2 * d, rng));
        let ff_b1 = store.add("snet.ff.b1", Tensor::zeros(&[1, 2 * d]));
        let ff_w2 = store.add("snet.ff.w2", Tensor::glorot(2 * d, d, rng));
        let ff_b2 = store.add("snet.ff.b2", Tensor::zeros(&[1, d]));
        AttentionEncoder {
            table,
            wq,
            wk,
            wv,
            wo,
            ff_w1,
            ff_b1,
            ff_w2,
            ff_b2,
            d_model,
        }
    }
}

impl SemanticEncoder for AttentionEncoder {
    fn name(&self) -> &'static str {
        "attention"
    }

    fn d_model(&self) -> usize {
        self.d_model
    }

    fn encode(&self, g: &mut Graph, store: &ParamStore, batch: &TokenBatch) -> Result<Var> {
        let m = batch.m;
        let x = embed(g, store, self.table, batch, self.d_model)?;
        let [wq, wk, wv, wo] = [self.wq, self.wk, self.wv, self.wo].map(|id| g.param(store, id));
        let q = g.matmul(x, wq)?;
        let k = g.matmul(x, wk)?;
        let v = g.matmul(x, wv)?;
        let s = g.block_scores(q, k, m)?;
        let s = g.scale(s, 1.0 / (self.d_model as f64).sqrt());
        let p = g.masked_softmax(s, m, batch.mask.clone())?;
        let a = g.block_apply(p, v, m)?;
        let a = g.matmul(a, wo)?;
        let x1 = g.add(x, a)?;

        let [w1, b1, w2, b2] = [self.ff_w1, self.ff_b1, self.ff_w2, self.ff_b2].map(|id| g.param(store, id));
        let h = g.linear(x1, w1, b1)?;
        let h = g.relu(h);
        let f = g.linear(h, w2, b2)?;
        let c = g.add(x1, f)?;
        let keep = g.constant(batch.row_mask(self.d_model));
        g.mul(c, keep)
    }
}

pub const ENCODERS: [&str; 2] = ["attention", "embedding"];

/// Constructs a registered encoder by name.
pub fn build_encoder(
    name: &str,
    store: &mut ParamStore,
    vocab_size: usize,
    d_model: usize,
    rng: &mut Rng,
) -> Result<Box<dyn SemanticEncoder>> {
    match name {
        "attention" => Ok(Box::new(AttentionEncoder::new(store, vocab_size, d_model, rng))),
        "embedding" => Ok(Box::new(EmbeddingEncoder::new(store, vocab_size, d_model, rng))),
        other => Err(Error::Config(format!(
            "unknown encoder {other:?} (known: {})",
            ENCODERS.join(", ")
        ))),
    }
}

/// `W^C` (`d x d`) and `b^C` (`1 x d`).
#[derive(Debug, Clone, Copy)]
pub struct InfoProjection {
    pub w: ParamId,
    pub b: ParamId,
}

impl InfoProjection {
    pub fn new(store: &mut ParamStore, d_model: usize, rng: &mut Rng) -> Self {
        InfoProjection {
            w: store.add("snet.proj.w", Tensor::glorot(d_model, d_model, rng)),
            b: store.add("snet.proj.b", Tensor::zeros(&[1, d_model])),
        }
    }

    /// Fixes the projection to `W^C = I`, `b^C = 0` and excludes it from
    /// training.
    pub fn freeze_identity(&self, store: &mut ParamStore) -> Result<()> {
        let d = store.value(self.w).rows();
        store.set_value(self.w, Tensor::identity(d))?;
        store.set_value(self.b, Tensor::zeros(&[1, d]))?;
        store.get_mut(self.w).trainable = false;
        store.get_mut(self.b).trainable = false;
        Ok(())
    }
}

/// Returns `(H_C, sigmoid(H_C))`, both `(B*m) x d`.
pub fn project_info(g: &mut Graph, store: &ParamStore, proj: &InfoProjection, c: Var) -> Result<(Var, Var)> {
    let (w, b) = (g.param(store, proj.w), g.param(store, proj.b));
    let h_c = g.linear(c, w, b)?;
    let conf = g.sigmoid(h_c);
    Ok((h_c, conf))
}

/// Single-message convenience: the feature map of `tokens` as an `m x d`
/// tensor.
pub fn encode_message(
    encoder: &dyn SemanticEncoder,
    store: &ParamStore,
    vocab: &EncoderVocab,
    tokens: &[String],
    m: usize,
) -> Result<Tensor> {
    let batch = TokenBatch::new(vocab, &[tokens], m)?;
    let mut g = Graph::new();
    let c = encoder.encode(&mut g, store, &batch)?;
    Ok(g.value(c).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, Stream};

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn vocab() -> EncoderVocab {
        EncoderVocab::from_tokens(toks("alpha beta gamma"))
    }

    #[test]
    fn reserved_ids_and_unknowns() {
        let v = vocab();
        assert_eq!(v.id(PAD), PAD_ID);
        assert_eq!(v.id(UNK), UNK_ID);
        assert_eq!(v.id("beta"), 3);
        assert_eq!(v.id("never"), UNK_ID);
        assert_eq!(v.len(), 5);
    }

    #[test]
    fn batch_pads_truncates_and_fills_empty() {
        let v = vocab();
        let a = toks("alpha beta gamma alpha");
        let b = toks("gamma");
        let empty: Vec<String> = Vec::new();
        let batch = TokenBatch::new(&v, &[&a[..], &b[..], &empty[..]], 3).unwrap();
        assert_eq!(&*batch.ids, &[2, 3, 4, 4, 0, 0, 1, 0, 0]);
        assert_eq!(&*batch.mask, &[true, true, true, true, false, false, true, false, false]);
        assert!(TokenBatch::new(&v, &[&a[..]], 0).is_err());
    }

    #[test]
    fn pad_rows_are_zero_and_messages_are_independent() {
        let v = vocab();
        let mut store = ParamStore::new();
        let mut rng = rng::stream(1, Stream::Test);
        let enc = AttentionEncoder::new(&mut store, v.len(), 8, &mut rng);
        let a = toks("alpha beta");
        let b = toks("gamma gamma gamma");
        let batch = TokenBatch::new(&v, &[&a[..], &b[..]], 4).unwrap();
        let mut g = Graph::new();
        let c = enc.encode(&mut g, &store, &batch).unwrap();
        let c = g.value(c);
        assert!(c.row(2).iter().chain(c.row(3)).all(|&x| x == 0.0));
        let alone = encode_message(&enc, &store, &v, &a, 4).unwrap();
        for r in 0..4 {
            for (x, y) in alone.row(r).iter().zip(c.row(r)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn padding_does_not_leak_into_real_rows() {
        let v = vocab();
        let mut store = ParamStore::new();
        let enc = AttentionEncoder::new(&mut store, v.len(), 6, &mut rng::stream(2, Stream::Test));
        let a = toks("alpha gamma");
        let short = encode_message(&enc, &store, &v, &a, 2).unwrap();
        let long = encode_message(&enc, &store, &v, &a, 5).unwrap();
        for r in 0..2 {
            for (x, y) in short.row(r).iter().zip(long.row(r)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_projection_passes_features_through() {
        let mut store = ParamStore::new();
        let proj = InfoProjection::new(&mut store, 3, &mut rng::stream(3, Stream::Test));
        proj.freeze_identity(&mut store).unwrap();
        let mut g = Graph::new();
        let c = g.constant(Tensor::from_rows(&[vec![0.0, 1.0, -2.0]]).unwrap());
        let (h, conf) = project_info(&mut g, &store, &proj, c).unwrap();
        assert_eq!(g.value(h).data(), &[0.0, 1.0, -2.0]);
        assert_eq!(g.value(conf).get(0, 0), 0.5);
        assert!(!store.get(proj.w).trainable);
    }

    #[test]
    fn positions_match_closed_form() {
        let pe = sinusoidal_positions(3, 4);
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe.get(2, 0) - 2f64.sin()).abs() < 1e-15);
        assert!((pe.get(2, 3) - (2.0 / 100.0f64).cos()).abs() < 1e-15);
    }

    #[test]
    fn unknown_encoder_name_is_rejected() {
        let mut store = ParamStore::new();
        let err = build_encoder("lstm", &mut store, 4, 4, &mut rng::stream(0, Stream::Test)).unwrap_err();
        assert!(err.to_string().contains("attention"));
    }
}
