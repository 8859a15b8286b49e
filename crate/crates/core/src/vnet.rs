//! Variational autoencoder over per-message statistics vectors.
//!
//! The encoder maps a standardized `log1p` label-count vector through one
//! ReLU hidden layer to two heads, the posterior mean `mu` and log-variance
//! `log_var` of a diagonal Gaussian. Training samples
//! `z = mu + exp(log_var / 2) * noise` and minimizes
//! `kl_weight * KL(q || N(0, I)) + ||x - decode(z)||^2`, i.e. the negative
//! evidence lower bound under a unit-variance Gaussian observation model
//! with constants dropped. At inference the statistics embedding is `mu`.
//!
//! Inputs are standardized per dimension with the train-split mean and
//! standard deviation before encoding. Both are stored as frozen
//! parameters so a checkpoint is self-contained.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numcore::{AdamConfig, AdamState, Checkpoint, Graph, ParamId, ParamStore, Tensor, Var};
use crate::rng::{self, Rng, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct VNetConfig {
    pub d_z: usize,
    pub hidden: usize,
    pub kl_weight: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for VNetConfig {
    fn default() -> Self {
        VNetConfig {
            d_z: 16,
            hidden: 64,
            kl_weight: 1.0,
            epochs: 50,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Ids {
    shift: ParamId,
    scale: ParamId,
    enc_w: ParamId,
    enc_b: ParamId,
    mu_w: ParamId,
    mu_b: ParamId,
    lv_w: ParamId,
    lv_b: ParamId,
    dec_w1: ParamId,
    dec_b1: ParamId,
    dec_w2: ParamId,
    dec_b2: ParamId,
}

const NAMES: [&str; 12] = [
    "vnet.shift",
    "vnet.scale",
    "vnet.enc.w",
    "vnet.enc.b",
    "vnet.mu.w",
    "vnet.mu.b",
    "vnet.logvar.w",
    "vnet.logvar.b",
    "vnet.dec.w1",
    "vnet.dec.b1",
    "vnet.dec.w2",
    "vnet.dec.b2",
];

impl Ids {
    fn resolve(store: &ParamStore) -> Result<Self> {
        let get = |name: &str| {
            store
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
        };
        Ok(Ids {
            shift: get(NAMES[0])?,
            scale: get(NAMES[1])?,
            enc_w: get(NAMES[2])?,
            enc_b: get(NAMES[3])?,
            mu_w: get(NAMES[4])?,
            mu_b: get(NAMES[5])?,
            lv_w: get(NAMES[6])?,
            lv_b: get(NAMES[7])?,
            dec_w1: get(NAMES[8])?,
            dec_b1: get(NAMES[9])?,
            dec_w2: get(NAMES[10])?,
            dec_b2: get(NAMES[11])?,
        })
    }
}

/// Posterior parameters for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
    /// Reparameterized sample, present only when noise was supplied.
    pub sample: Option<Vec<f64>>,
}

impl LatentCode {
    /// The deterministic statistics embedding: the posterior mean.
    pub fn e_s(&self) -> &[f64] {
        &self.mu
    }
}

/// Graph handles of one batched forward pass.
#[derive(Debug, Clone, Copy)]
pub struct VaeForward {
    pub mu: Var,
    pub log_var: Var,
    pub sample: Var,
    pub reconstruction: Var,
    pub kl: Var,
    pub reconstruction_error: Var,
    pub loss: Var,
}

#[derive(Debug, Clone)]
pub struct VNetParams {
    pub store: ParamStore,
    ids: Ids,
    n_inputs: usize,
    d_z: usize,
    hidden: usize,
}

/// `1/2 * sum(mu^2 + exp(log_var) - 1 - log_var)`; exactly `+0.0` at the
/// prior.
pub fn kl_divergence(code: &LatentCode) -> f64 {
    0.5 * code
        .mu
        .iter()
        .zip(&code.log_var)
        .map(|(m, lv)| m * m + lv.exp() - 1.0 - lv)
        .sum::<f64>()
}

/// Negative ELBO for one input: weighted closed-form KL plus squared
/// reconstruction error against `x` (which must be in the space the decoder
/// reconstructs, i.e. standardized).
pub fn elbo_loss(x: &[f64], code: &LatentCode, reconstruction: &[f64], kl_weight: f64) -> Result<f64> {
    if x.len() != reconstruction.len() {
        return Err(Error::shape("elbo_loss", &[x.len()], &[reconstruction.len()]));
    }
    let sse: f64 = x.iter().zip(reconstruction).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(kl_weight * kl_divergence(code) + sse)
}

impl VNetParams {
    /// Fresh weights with an identity standardization.
    pub fn init(n_inputs: usize, d_z: usize, hidden: usize, rng: &mut Rng) -> Self {
        let mut store = ParamStore::new();
        store.add_frozen(NAMES[0], Tensor::zeros(&[1, n_inputs]));
        store.add_frozen(NAMES[1], Tensor::full(&[1, n_inputs], 1.0));
        store.add(NAMES[2], Tensor::glorot(n_inputs, hidden, rng));
        store.add(NAMES[3], Tensor::zeros(&[1, hidden]));
        store.add(NAMES[4], Tensor::glorot(hidden, d_z, rng));
        store.add(NAMES[5], Tensor::zeros(&[1, d_z]));
        store.add(NAMES[6], Tensor::glorot(hidden, d_z, rng).map(|w| 0.1 * w));
        store.add(NAMES[7], Tensor::zeros(&[1, d_z]));
        store.add(NAMES[8], Tensor::glorot(d_z, hidden, rng));
        store.add(NAMES[9], Tensor::zeros(&[1, hidden]));
        store.add(NAMES[10], Tensor::glorot(hidden, n_inputs, rng));
        store.add(NAMES[11], Tensor::zeros(&[1, n_inputs]));
        let ids = Ids::resolve(&store).expect("all names registered");
        VNetParams {
            store,
            ids,
            n_inputs,
            d_z,
            hidden,
        }
    }

    pub fn n_inputs(&self) -> usize {
        self.n_inputs
    }

    pub fn d_z(&self) -> usize {
        self.d_z
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// Sets the per-dimension standardization from a sample of inputs.
    /// Constant dimensions keep scale 1.
    pub fn fit_standardization(&mut self, inputs: &[Vec<f64>]) -> Result<()> {
        let n = self.n_inputs;
        if inputs.is_empty() {
            return Err(Error::InvalidArgument("no inputs to standardize".into()));
        }
        let count = inputs.len() as f64;
        let mut mean = vec![0.0; n];
        for x in inputs {
            self.check_dim(x)?;
            mean.iter_mut().zip(x).for_each(|(m, v)| *m += v / count);
        }
        let mut var = vec![0.0; n];
        for x in inputs {
            for i in 0..n {
                var[i] += (x[i] - mean[i]).powi(2) / count;
            }
        }
        let scale = var
            .iter()
            .map(|v| if v.sqrt() > 1e-12 { 1.0 / v.sqrt() } else { 1.0 })
            .collect();
        self.store.set_value(self.ids.shift, Tensor::matrix(1, n, mean)?)?;
        self.store.set_value(self.ids.scale, Tensor::matrix(1, n, scale)?)?;
        Ok(())
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n_inputs {
            return Err(Error::shape("vnet input", &[self.n_inputs], &[x.len()]));
        }
        Ok(())
    }

    pub fn standardize(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let shift = self.store.value(self.ids.shift).data();
        let scale = self.store.value(self.ids.scale).data();
        Ok(x.iter().zip(shift).zip(scale).map(|((v, s), c)| (v - s) * c).collect())
    }

    fn standardized_batch(&self, xs: &[Vec<f64>]) -> Result<Tensor> {
        let rows = xs.iter().map(|x| self.standardize(x)).collect::<Result<Vec<_>>>()?;
        Tensor::matrix(xs.len(), self.n_inputs, rows.concat())
    }

    fn encoder(&self, g: &mut Graph, x_std: Var) -> Result<(Var, Var)> {
        let ids = self.ids;
        let (w, b) = (g.param(&self.store, ids.enc_w), g.param(&self.store, ids.enc_b));
        let h = g.linear(x_std, w, b)?;
        let h = g.relu(h);
        let (w, b) = (g.param(&self.store, ids.mu_w), g.param(&self.store, ids.mu_b));
        let mu = g.linear(h, w, b)?;
        let (w, b) = (g.param(&self.store, ids.lv_w), g.param(&self.store, ids.lv_b));
        let log_var = g.linear(h, w, b)?;
        Ok((mu, log_var))
    }

    fn decoder(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let ids = self.ids;
        let (w, b) = (g.param(&self.store, ids.dec_w1), g.param(&self.store, ids.dec_b1));
        let h = g.linear(z, w, b)?;
        let h = g.relu(h);
        let (w, b) = (g.param(&self.store, ids.dec_w2), g.param(&self.store, ids.dec_b2));
        g.linear(h, w, b)
    }

    /// Batched training objective with caller-supplied noise
    /// (`B x d_z`). `x_std` must already be standardized (`B x n`).
    /// The loss is averaged over the batch.
    pub fn forward_loss(&self, g: &mut Graph, x_std: Var, noise: Tensor, kl_weight: f64) -> Result<VaeForward> {
        let (mu, log_var) = self.encoder(g, x_std)?;
        let batch = g.value(mu).rows() as f64;
        if noise.shape() != g.value(mu).shape() {
            return Err(Error::shape("vnet noise", noise.shape(), g.value(mu).shape()));
        }
        let noise = g.constant(noise);
        let half = g.scale(log_var, 0.5);
        let std = g.exp(half);
        let spread = g.mul(std, noise)?;
        let sample = g.add(mu, spread)?;
        let reconstruction = self.decoder(g, sample)?;

        // KL = -1/2 sum(1 + lv - mu^2 - e^lv), as a batch mean
        let mu_sq = g.mul(mu, mu)?;
        let var = g.exp(log_var);
        let t = g.sub(log_var, mu_sq)?;
        let t = g.sub(t, var)?;
        let t = g.sum(t);
        let d_z = g.value(mu).numel() as f64;
        let one = g.constant(Tensor::scalar(d_z));
        let t = g.add(t, one)?;
        let kl = g.scale(t, -0.5 / batch);

        let diff = g.sub(x_std, reconstruction)?;
        let sq = g.mul(diff, diff)?;
        let sse = g.sum(sq);
        let reconstruction_error = g.scale(sse, 1.0 / batch);

        let weighted = g.scale(kl, kl_weight);
        let loss = g.add(weighted, reconstruction_error)?;
        Ok(VaeForward {
            mu,
            log_var,
            sample,
            reconstruction,
            kl,
            reconstruction_error,
            loss,
        })
    }

    /// Posterior for one (unstandardized) input. With `noise_rng` the
    /// reparameterized sample is drawn as well.
    pub fn encode(&self, x: &[f64], noise_rng: Option<&mut Rng>) -> Result<LatentCode> {
        let x_std = self.standardize(x)?;
        let mut g = Graph::new();
        let xv = g.constant(Tensor::matrix(1, self.n_inputs, x_std)?);
        let (mu, lv) = self.encoder(&mut g, xv)?;
        let mu = g.value(mu).data().to_vec();
        let log_var = g.value(lv).data().to_vec();
        let sample = noise_rng.map(|rng| {
            mu.iter()
                .zip(&log_var)
                .map(|(m, lv)| {
                    let e: f64 = StandardNormal.sample(rng);
                    m + (0.5 * lv).exp() * e
                })
                .collect()
        });
        Ok(LatentCode { mu, log_var, sample })
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.d_z {
            return Err(Error::shape("vnet decode", &[self.d_z], &[z.len()]));
        }
        let mut g = Graph::new();
        let zv = g.constant(Tensor::matrix(1, self.d_z, z.to_vec())?);
        let out = self.decoder(&mut g, zv)?;
        Ok(g.value(out).data().to_vec())
    }

    /// The statistics embedding of one input: the posterior mean.
    pub fn embed_statistics(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.encode(x, None)?.mu)
    }

    /// Posterior means for many inputs in one batched pass.
    pub fn embed_batch(&self, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if xs.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let x = g.constant(self.standardized_batch(xs)?);
        let (mu, _) = self.encoder(&mut g, x)?;
        Ok(g.value(mu).data().chunks(self.d_z).map(<[f64]>::to_vec).collect())
    }

    /// Mean loss over `xs` with noise drawn from a fixed stream, so repeated
    /// evaluations are comparable.
    pub fn evaluate_loss(&self, xs: &[Vec<f64>], kl_weight: f64, seed: u64) -> Result<f64> {
        if xs.is_empty() {
            return Err(Error::InvalidArgument("no inputs".into()));
        }
        let mut rng = rng::stream(seed, Stream::Test);
        let mut g = Graph::new();
        let x = g.constant(self.standardized_batch(xs)?);
        let noise = Tensor::randn(&[xs.len(), self.d_z], 1.0, &mut rng);
        let f = self.forward_loss(&mut g, x, noise, kl_weight)?;
        Ok(g.value(f.loss).item())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(self.store.clone())
            .with_meta("kind", "vnet")
            .with_meta("n_inputs", self.n_inputs.to_string())
            .with_meta("d_z", self.d_z.to_string())
            .with_meta("hidden", self.hidden.to_string())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta("kind")? != "vnet" {
            return Err(Error::Checkpoint("not a vnet checkpoint".into()));
        }
        let parse = |k: &str| -> Result<usize> {
            ck.meta(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad {k}")))
        };
        let store = ck.params.clone();
        let ids = Ids::resolve(&store)?;
        let params = VNetParams {
            n_inputs: parse("n_inputs")?,
            d_z: parse("d_z")?,
            hidden: parse("hidden")?,
            ids,
            store,
        };
        if params.store.value(ids.mu_w).shape() != [params.hidden, params.d_z] {
            return Err(Error::Checkpoint("vnet shapes disagree with metadata".into()));
        }
        Ok(params)
    }
}

/// Outcome of V-Net pretraining.
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub params: VNetParams,
    /// `loss_curve[e]` is the evaluation loss after `e` epochs (index 0 is
    /// the untrained model).
    pub loss_curve: Vec<f64>,
}

/// Trains the V-Net on `inputs` (normalized statistics vectors of the train
/// split). The classifier is never involved.
pub fn pretrain(inputs: &[Vec<f64>], config: &VNetConfig) -> Result<Pretrained> {
    let n = inputs
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::InvalidArgument("pretraining needs at least one input".into()))?;
    if config.batch_size == 0 || config.d_z == 0 || config.hidden == 0 {
        return Err(Error::InvalidArgument("batch_size, d_z and hidden must be positive".into()));
    }
    let mut params = VNetParams::init(n, config.d_z, config.hidden, &mut rng::stream(config.seed, Stream::VNetInit));
    params.fit_standardization(inputs)?;
    let standardized = inputs
        .iter()
        .map(|x| params.standardize(x))
        .collect::<Result<Vec<_>>>()?;

    let mut adam = AdamState::new(AdamConfig::with_lr(config.learning_rate), &params.store);
    let mut shuffle_rng = rng::stream(config.seed, Stream::VNetShuffle);
    let mut noise_rng = rng::stream(config.seed, Stream::VNetNoise);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut loss_curve = vec![params.evaluate_loss(inputs, config.kl_weight, config.seed)?];

    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(config.batch_size) {
            let rows: Vec<f64> = chunk.iter().flat_map(|&i| standardized[i].iter().copied()).collect();
            let mut g = Graph::new();
            let x = g.constant(Tensor::matrix(chunk.len(), n, rows)?);
            let noise = Tensor::randn(&[chunk.len(), config.d_z], 1.0, &mut noise_rng);
            let f = params.forward_loss(&mut g, x, noise, config.kl_weight)?;
            params.store.zero_grad();
            g.backward(f.loss, &mut params.store)?;
            adam.step(&mut params.store);
        }
        let loss = params.evaluate_loss(inputs, config.kl_weight, config.seed)?;
        log::debug!("vnet epoch {}: loss {loss:.6}", epoch + 1);
        loss_curve.push(loss);
    }
    Ok(Pretrained { params, loss_curve })
}

/// Cached statistics embeddings keyed by message id, tagged with the hash
/// of the dictionary they were computed from.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingCache {
    pub dict_hash: String,
    pub d_z: usize,
    pub entries: BTreeMap<u64, Vec<f64>>,
}

const CACHE_MAGIC: &[u8; 8] = b"LGEMB001";

impl EmbeddingCache {
    pub fn get(&self, message_id: u64) -> Option<&[f64]> {
        self.entries.get(&message_id).map(Vec::as_slice)
    }

    /// Errors unless the cache was built from the dictionary with `dict_hash`.
    pub fn check_fresh(&self, dict_hash: &str) -> Result<()> {
        if self.dict_hash != dict_hash {
            return Err(Error::Stale(format!(
                "embedding cache was built from dictionary {} but the current dictionary is {}",
                self.dict_hash, dict_hash
            )));
        }
        Ok(())
    }

    /// `magic, u32 hash_len, hash, u32 d_z, u64 count, (u64 id, f64[d_z])*`,
    /// little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.entries.len() * (8 + 8 * self.d_z));
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&(self.dict_hash.len() as u32).to_le_bytes());
        out.extend_from_slice(self.dict_hash.as_bytes());
        out.extend_from_slice(&(self.d_z as u32).to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for (id, v) in &self.entries {
            out.extend_from_slice(&id.to_le_bytes());
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = || Error::Checkpoint("malformed embedding cache".into());
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + n).ok_or_else(bad)?;
            pos += n;
            Ok(s)
        };
        if take(8)? != CACHE_MAGIC {
            return Err(bad());
        }
        let hash_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let dict_hash = String::from_utf8(take(hash_len)?.to_vec()).map_err(|_| bad())?;
        let d_z = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let id = u64::from_le_bytes(take(8)?.try_into().unwrap());
            let v = take(8 * d_z)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            entries.insert(id, v);
        }
        if pos != bytes.len() {
            return Err(bad());
        }
        Ok(EmbeddingCache {
            dict_hash,
            d_z,
            entries,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}
