//! Fusion and classification.
//!
//! For a message with feature map `C`, projection `H_C` and statistics
//! embedding `e_s`:
//!
//! ```text
//! H_E  = e_s W^E + b^E                  broadcast to every token row
//! H_O  = relu(H_C) + gate(sigmoid(H_C), eps) * H_E
//! Z    = masked_softmax(H_O C^T) C      unscaled, pad keys excluded
//! y    = W2 relu(W1 meanpool(Z) + b1) + b2
//! ```
//!
//! `gate(a, eps)` is `a` when `0.5 - eps <= a <= 0.5 + eps` and `0`
//! otherwise, so only tokens whose semantic confidence is near 0.5 admit the
//! statistics.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numcore::{Checkpoint, Graph, ParamId, ParamStore, Tensor, Var};
use crate::rng::{self, Rng, Stream};
use crate::snet::{self, EncoderVocab, InfoProjection, SemanticEncoder, TokenBatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Gated fusion of both paths.
    Full,
    /// Classifier over the broadcast statistics projection alone.
    StatsOnly,
    /// Gate closed (`eps = 0`), statistics never computed.
    SemanticOnly,
    /// Statistics added at every token: `relu(H_C) + H_E`.
    NoGate,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Full, Mode::StatsOnly, Mode::SemanticOnly, Mode::NoGate];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::StatsOnly => "stats_only",
            Mode::SemanticOnly => "semantic_only",
            Mode::NoGate => "no_gate",
        }
    }

    /// Whether the mode reads the statistics embedding.
    pub fn uses_stats(self) -> bool {
        self != Mode::SemanticOnly
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?} (known: full, stats_only, semantic_only, no_gate)")))
    }
}

/// The gate on plain numbers: `alpha` inside the closed band
/// `[0.5 - eps, 0.5 + eps]`, else `0`.
pub fn gate_fn(alpha: f64, epsilon: f64) -> f64 {
    if (0.5 - epsilon..=0.5 + epsilon).contains(&alpha) {
        alpha
    } else {
        0.0
    }
}

/// `gate(conf, eps) * H_E`, elementwise. The band membership carries no
/// gradient; inside the band the gate value does.
pub fn ada_sem_gate(g: &mut Graph, conf: Var, h_e: Var, epsilon: f64) -> Result<Var> {
    let gate = g.band_pass(conf, 0.5 - epsilon, 0.5 + epsilon);
    g.mul(gate, h_e)
}

/// `W^E` (`d_z x d_model`) and `b^E`.
#[derive(Debug, Clone, Copy)]
pub struct StatProjection {
    pub w: ParamId,
    pub b: ParamId,
}

impl StatProjection {
    pub fn new(store: &mut ParamStore, d_z: usize, d_model: usize, rng: &mut Rng) -> Self {
        StatProjection {
            w: store.add("gnet.stat.w", Tensor::glorot(d_z, d_model, rng)),
            b: store.add("gnet.stat.b", Tensor::zeros(&[1, d_model])),
        }
    }
}

/// `e_s` (`B x d_z`) to `H_E` (`(B*m) x d_model`), each message's row
/// repeated over its `m` token slots.
pub fn project_stats(g: &mut Graph, store: &ParamStore, proj: &StatProjection, e_s: Var, m: usize) -> Result<Var> {
    let (w, b) = (g.param(store, proj.w), g.param(store, proj.b));
    let h = g.linear(e_s, w, b)?;
    g.repeat_rows(h, m)
}

/// `masked_softmax(H_O C^T) C` per message. Returns the output and the
/// attention weights (`(B*m) x m`).
pub fn global_attention(g: &mut Graph, h_o: Var, c: Var, batch: &TokenBatch) -> Result<(Var, Var)> {
    let scores = g.block_scores(h_o, c, batch.m)?;
    let weights = g.masked_softmax(scores, batch.m, batch.mask.clone())?;
    let out = g.block_apply(weights, c, batch.m)?;
    Ok((out, weights))
}

/// Mean-pool, `d -> d` ReLU layer, `d -> k` logits.
#[derive(Debug, Clone, Copy)]
pub struct ClassifierHead {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl ClassifierHead {
    pub fn new(store: &mut ParamStore, d_model: usize, n_labels: usize, rng: &mut Rng) -> Self {
        ClassifierHead {
            w1: store.add("gnet.head.w1", Tensor::glorot(d_model, d_model, rng)),
            b1: store.add("gnet.head.b1", Tensor::zeros(&[1, d_model])),
            w2: store.add("gnet.head.w2", Tensor::glorot(d_model, n_labels, rng)),
            b2: store.add("gnet.head.b2", Tensor::zeros(&[1, n_labels])),
        }
    }
}

/// Logits (`B x k`) from token rows (`(B*m) x d`), pooling over real tokens.
pub fn classify(g: &mut Graph, store: &ParamStore, head: &ClassifierHead, x: Var, batch: &TokenBatch) -> Result<Var> {
    let pooled = g.mean_pool(x, batch.m, batch.mask.clone())?;
    let (w1, b1) = (g.param(store, head.w1), g.param(store, head.b1));
    let h = g.linear(pooled, w1, b1)?;
    let h = g.relu(h);
    let (w2, b2) = (g.param(store, head.w2), g.param(store, head.b2));
    g.linear(h, w2, b2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_z: usize,
    pub m: usize,
    pub n_labels: usize,
    pub epsilon: f64,
    pub mode: Mode,
    pub encoder: String,
    /// Freeze `W^C = I`, `b^C = 0`.
    pub identity_projection: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_z == 0 || self.m == 0 || self.n_labels == 0 {
            return Err(Error::Config("d_model, d_z, m and the label count must be positive".into()));
        }
        if !(0.0..=0.5).contains(&self.epsilon) {
            return Err(Error::Config(format!("epsilon must lie in [0, 0.5], got {}", self.epsilon)));
        }
        Ok(())
    }

    /// The band half-width actually applied.
    pub fn effective_epsilon(&self) -> f64 {
        match self.mode {
            Mode::SemanticOnly => 0.0,
            _ => self.epsilon,
        }
    }
}

/// Graph handles of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub logits: Var,
    pub c: Option<Var>,
    pub h_c: Option<Var>,
    pub conf: Option<Var>,
    pub h_e: Option<Var>,
    pub h_o: Option<Var>,
    pub attention: Option<Var>,
}

/// The classifier: semantic encoder, projections, gate, global attention
/// and head, with all parameters in one store.
#[derive(Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: EncoderVocab,
    pub store: ParamStore,
    encoder: Box<dyn SemanticEncoder>,
    info: InfoProjection,
    stat: StatProjection,
    head: ClassifierHead,
}

impl Model {
    /// Parameters are created in the same order for every mode, so runs
    /// that differ only in mode start from identical weights.
    pub fn new(config: ModelConfig, vocab: EncoderVocab, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, Stream::ClassifierInit);
        let mut store = ParamStore::new();
        let encoder = snet::build_encoder(&config.encoder, &mut store, vocab.len(), config.d_model, &mut rng)?;
        let info = InfoProjection::new(&mut store, config.d_model, &mut rng);
        if config.identity_projection {
            info.freeze_identity(&mut store)?;
        }
        let stat = StatProjection::new(&mut store, config.d_z, config.d_model, &mut rng);
        let head = ClassifierHead::new(&mut store, config.d_model, config.n_labels, &mut rng);
        Ok(Model {
            config,
            vocab,
            store,
            encoder,
            info,
            stat,
            head,
        })
    }

    pub fn encoder(&self) -> &dyn SemanticEncoder {
        self.encoder.as_ref()
    }

    pub fn batch<S: AsRef<str>>(&self, messages: &[&[S]]) -> Result<TokenBatch> {
        TokenBatch::new(&self.vocab, messages, self.config.m)
    }

    /// Builds the forward graph. `e_s` is `B x d_z`; it is ignored in
    /// semantic-only mode.
    pub fn forward(&self, g: &mut Graph, batch: &TokenBatch, e_s: &Tensor) -> Result<Forward> {
        let cfg = &self.config;
        let s = &self.store;
        if cfg.mode.uses_stats() && e_s.shape() != [batch.batch, cfg.d_z] {
            return Err(Error::shape("statistics embedding", e_s.shape(), &[batch.batch, cfg.d_z]));
        }
        let h_e = match cfg.mode.uses_stats() {
            true => {
                let e = g.constant(e_s.clone());
                Some(project_stats(g, s, &self.stat, e, batch.m)?)
            }
            false => None,
        };
        if cfg.mode == Mode::StatsOnly {
            let logits = classify(g, s, &self.head, h_e.expect("stats mode"), batch)?;
            return Ok(Forward {
                logits,
                c: None,
                h_c: None,
                conf: None,
                h_e,
                h_o: None,
                attention: None,
            });
        }
        let c = self.encoder.encode(g, s, batch)?;
        let (h_c, conf) = snet::project_info(g, s, &self.info, c)?;
        let base = g.relu(h_c);
        let h_o = match (cfg.mode, h_e) {
            (Mode::NoGate, Some(h_e)) => g.add(base, h_e)?,
            (Mode::Full, Some(h_e)) => {
                let gated = ada_sem_gate(g, conf, h_e, cfg.effective_epsilon())?;
                g.add(base, gated)?
            }
            _ => base,
        };
        let (z, attention) = global_attention(g, h_o, c, batch)?;
        let logits = classify(g, s, &self.head, z, batch)?;
        Ok(Forward {
            logits,
            c: Some(c),
            h_c: Some(h_c),
            conf: Some(conf),
            h_e,
            h_o: Some(h_o),
            attention: Some(attention),
        })
    }

    /// Logits for a batch, without gradient bookkeeping kept around.
    pub fn logits(&self, batch: &TokenBatch, e_s: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, batch, e_s)?;
        Ok(g.value(f.logits).clone())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let c = &self.config;
        Checkpoint::new(self.store.clone())
            .with_meta("kind", "classifier")
            .with_meta("d_model", c.d_model.to_string())
            .with_meta("d_z", c.d_z.to_string())
            .with_meta("m", c.m.to_string())
            .with_meta("n_labels", c.n_labels.to_string())
            .with_meta("epsilon", format!("{:?}", c.epsilon))
            .with_meta("mode", c.mode.as_str())
            .with_meta("encoder", c.encoder.clone())
            .with_meta("identity_projection", c.identity_projection.to_string())
            .with_meta("vocab", self.vocab.words().join("\n"))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta("kind")? != "classifier" {
            return Err(Error::Checkpoint("not a classifier checkpoint".into()));
        }
        fn parse<T: FromStr>(ck: &Checkpoint, key: &str) -> Result<T> {
            ck.meta(key)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad metadata value for {key}")))
        }
        let config = ModelConfig {
            d_model: parse(ck, "d_model")?,
            d_z: parse(ck, "d_z")?,
            m: parse(ck, "m")?,
            n_labels: parse(ck, "n_labels")?,
            epsilon: parse(ck, "epsilon")?,
            mode: ck.meta("mode")?.parse()?,
            encoder: ck.meta("encoder")?.to_string(),
            identity_projection: parse(ck, "identity_projection")?,
        };
        let words = ck.meta("vocab")?;
        let vocab = EncoderVocab::from_tokens(words.split('\n').filter(|w| !w.is_empty()).map(str::to_string));
        let mut model = Model::new(config, vocab, 0)?;
        if model.store.len() != ck.params.len() {
            return Err(Error::Checkpoint("parameter count disagrees with metadata".into()));
        }
        for id in model.store.ids().collect::<Vec<_>>() {
            let name = model.store.get(id).name.clone();
            let src = ck
                .params
                .find(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            let src = ck.params.get(src);
            if src.value.shape() != model.store.value(id).shape() {
                return Err(Error::Checkpoint(format!("shape mismatch for {name}")));
            }
            let p = model.store.get_mut(id);
            p.value = src.value.clone();
            p.trainable = src.trainable;
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(mode: Mode) -> ModelConfig {
        ModelConfig {
            d_model: 6,
            d_z: 3,
            m: 4,
            n_labels: 3,
            epsilon: 0.1,
            mode,
            encoder: "attention".into(),
            identity_projection: false,
        }
    }

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn vocab() -> EncoderVocab {
        EncoderVocab::from_tokens(toks("a b c d"))
    }

    #[test]
    fn gate_examples() {
        assert_eq!(gate_fn(0.5, 0.0), 0.5);
        assert_eq!(gate_fn(0.55, 0.1), 0.55);
        assert_eq!(gate_fn(0.7, 0.1), 0.0);
        assert_eq!(gate_fn(0.4, 0.1), 0.4);
        assert_eq!(gate_fn(0.0, 0.5), 0.0);
        assert_eq!(gate_fn(1.0, 0.5), 1.0);
    }

    #[test]
    fn graph_gate_matches_scalar_gate() {
        let alphas = [0.0, 0.3, 0.39, 0.4, 0.45, 0.5, 0.6, 0.61, 1.0];
        let mut g = Graph::new();
        let conf = g.constant(Tensor::matrix(1, alphas.len(), alphas.to_vec()).unwrap());
        let ones = g.constant(Tensor::full(&[1, alphas.len()], 1.0));
        let out = ada_sem_gate(&mut g, conf, ones, 0.1).unwrap();
        let expect: Vec<f64> = alphas.iter().map(|&a| gate_fn(a, 0.1)).collect();
        assert_eq!(g.value(out).data(), &expect[..]);
    }

    #[test]
    fn modes_parse_and_display() {
        for m in Mode::ALL {
            assert_eq!(m.as_str().parse::<Mode>().unwrap(), m);
        }
        assert!("both".parse::<Mode>().is_err());
    }

    #[test]
    fn every_mode_produces_logits() {
        let a = toks("a b c");
        let b = toks("d");
        let e_s = Tensor::from_rows(&[vec![0.1, -0.2, 0.3], vec![1.0, 0.0, -1.0]]).unwrap();
        for mode in Mode::ALL {
            let model = Model::new(config(mode), vocab(), 1).unwrap();
            let batch = model.batch(&[&a[..], &b[..]]).unwrap();
            let logits = model.logits(&batch, &e_s).unwrap();
            assert_eq!(logits.shape(), &[2, 3]);
            assert!(logits.data().iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn same_seed_same_init_across_modes() {
        let full = Model::new(config(Mode::Full), vocab(), 5).unwrap();
        let sem = Model::new(config(Mode::SemanticOnly), vocab(), 5).unwrap();
        assert_eq!(full.store, sem.store);
    }

    #[test]
    fn stats_only_ignores_tokens() {
        let model = Model::new(config(Mode::StatsOnly), vocab(), 2).unwrap();
        let e_s = Tensor::from_rows(&[vec![0.4, 0.1, -0.3]]).unwrap();
        let x = toks("a b");
        let y = toks("d c b a");
        let lx = model.logits(&model.batch(&[&x[..]]).unwrap(), &e_s).unwrap();
        let ly = model.logits(&model.batch(&[&y[..]]).unwrap(), &e_s).unwrap();
        assert!(lx.max_abs_diff(&ly) < 1e-12);
    }

    #[test]
    fn wrong_embedding_shape_is_an_error() {
        let model = Model::new(config(Mode::Full), vocab(), 2).unwrap();
        let x = toks("a");
        let batch = model.batch(&[&x[..]]).unwrap();
        assert!(model.logits(&batch, &Tensor::zeros(&[1, 2])).is_err());
        let sem = Model::new(config(Mode::SemanticOnly), vocab(), 2).unwrap();
        assert!(sem.logits(&batch, &Tensor::zeros(&[0, 0])).is_ok());
    }

    #[test]
    fn epsilon_out_of_range_rejected() {
        let mut c = config(Mode::Full);
        c.epsilon = 0.6;
        assert!(Model::new(c, vocab(), 0).is_err());
    }

    #[test]
    fn checkpoint_round_trip_reproduces_logits() {
        let mut c = config(Mode::NoGate);
        c.identity_projection = true;
        let model = Model::new(c, vocab(), 3).unwrap();
        let back = Model::from_checkpoint(&Checkpoint::from_bytes(&model.to_checkpoint().to_bytes()).unwrap()).unwrap();
        assert_eq!(back.config, model.config);
        assert_eq!(back.vocab, model.vocab);
        let x = toks("b c a");
        let e_s = Tensor::from_rows(&[vec![0.2, 0.2, 0.2]]).unwrap();
        let batch = model.batch(&[&x[..]]).unwrap();
        assert_eq!(model.logits(&batch, &e_s).unwrap(), back.logits(&batch, &e_s).unwrap());
    }
}
