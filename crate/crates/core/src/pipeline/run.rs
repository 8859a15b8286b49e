use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::rc::Rc;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;

use super::config::RunConfig;
use super::metrics::MetricsReport;
use crate::corpus::{load_dataset, LogDataset, Split};
use crate::error::{Error, Result, StageContext};
use crate::gnet::{Mode, Model};
use crate::numcore::{AdamConfig, AdamState, Checkpoint, Graph, ParamStore, Tensor};
use crate::rng::{self, Stream};
use crate::snet::EncoderVocab;
use crate::statfeat::StatDictionary;
use crate::vnet::{self, EmbeddingCache, Pretrained, VNetParams};

const PREDICT_BATCH: usize = 256;

/// Everything the classifier consumes that does not depend on classifier
/// settings: the dataset, its statistics dictionary and the statistics
/// embedding of every record.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub dataset: LogDataset,
    pub dict: StatDictionary,
    pub vnet: Option<Pretrained>,
    /// `embeddings[i]` belongs to `dataset.records[i]`; all zeros when the
    /// V-Net was skipped.
    pub embeddings: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_macro_f1: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    /// Test-split metrics of the selected checkpoint.
    pub report: MetricsReport,
    /// Entry 0 is the untrained model.
    pub history: Vec<EpochLog>,
    pub best_epoch: usize,
}

pub fn load_stage(config: &RunConfig) -> Result<LogDataset> {
    config.validate().stage("load")?;
    load_dataset(&config.dataset, &config.split_spec()).stage("load")
}

/// Normalized pooled statistics of every record.
pub fn stat_inputs(dict: &StatDictionary, dataset: &LogDataset, m_fixed: usize) -> Vec<Vec<f64>> {
    dataset
        .records
        .iter()
        .map(|r| dict.message_stats(r, m_fixed).normalized)
        .collect()
}

/// Loads the dataset, builds the dictionary and, if `with_vnet`, pretrains
/// the V-Net and embeds every record.
pub fn prepare(config: &RunConfig, with_vnet: bool) -> Result<Prepared> {
    let dataset = load_stage(config)?;
    let dict = StatDictionary::build(&dataset).stage("build-stats")?;
    if !with_vnet {
        let embeddings = vec![vec![0.0; config.d_z]; dataset.records.len()];
        return Ok(Prepared {
            dataset,
            dict,
            vnet: None,
            embeddings,
        });
    }
    let inputs = stat_inputs(&dict, &dataset, config.m_fixed);
    let train_inputs: Vec<Vec<f64>> = inputs
        .iter()
        .zip(&dataset.splits)
        .filter(|(_, s)| **s == Split::Train)
        .map(|(x, _)| x.clone())
        .collect();
    let pretrained = vnet::pretrain(&train_inputs, &config.vnet_config()).stage("pretrain-vae")?;
    log::info!(
        "vnet loss {:.4} -> {:.4} over {} epochs",
        pretrained.loss_curve[0],
        pretrained.loss_curve.last().copied().unwrap_or(f64::NAN),
        config.vae_epochs
    );
    let embeddings = pretrained.params.embed_batch(&inputs).stage("embed")?;
    Ok(Prepared {
        dataset,
        dict,
        vnet: Some(pretrained),
        embeddings,
    })
}

fn split_indices(dataset: &LogDataset, split: Split) -> Vec<usize> {
    (0..dataset.records.len())
        .filter(|&i| dataset.splits[i] == split)
        .collect()
}

fn batch_inputs(model: &Model, dataset: &LogDataset, embeddings: &[Vec<f64>], idx: &[usize]) -> Result<(crate::snet::TokenBatch, Tensor)> {
    let messages: Vec<&[String]> = idx.iter().map(|&i| dataset.records[i].tokens.as_slice()).collect();
    let batch = model.batch(&messages)?;
    let d_z = model.config.d_z;
    let mut e = Vec::with_capacity(idx.len() * d_z);
    for &i in idx {
        e.extend_from_slice(&embeddings[i]);
    }
    Ok((batch, Tensor::matrix(idx.len(), d_z, e)?))
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Predicted label ids for the records at `idx`. Ties go to the lower id.
pub fn predict(model: &Model, dataset: &LogDataset, embeddings: &[Vec<f64>], idx: &[usize]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(PREDICT_BATCH) {
        let (batch, e_s) = batch_inputs(model, dataset, embeddings, chunk)?;
        let logits = model.logits(&batch, &e_s)?;
        out.extend((0..chunk.len()).map(|r| argmax(logits.row(r))));
    }
    Ok(out)
}

/// Logits for a split, one row per record in record order.
pub fn split_logits(model: &Model, prep: &Prepared, split: Split) -> Result<Vec<Vec<f64>>> {
    let idx = split_indices(&prep.dataset, split);
    let mut out = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(PREDICT_BATCH) {
        let (batch, e_s) = batch_inputs(model, &prep.dataset, &prep.embeddings, chunk)?;
        let logits = model.logits(&batch, &e_s)?;
        out.extend((0..chunk.len()).map(|r| logits.row(r).to_vec()));
    }
    Ok(out)
}

/// Scores `model` on one split.
pub fn score(model: &Model, dataset: &LogDataset, embeddings: &[Vec<f64>], split: Split) -> Result<MetricsReport> {
    let idx = split_indices(dataset, split);
    let predicted = predict(model, dataset, embeddings, &idx)?;
    let truth: Vec<usize> = idx.iter().map(|&i| dataset.records[i].label_id).collect();
    Ok(MetricsReport::compute(dataset.labels.labels(), &truth, &predicted)?
        .with_info("mode", model.config.mode)
        .with_info("split", split.as_str())
        .with_info("messages", idx.len()))
}

/// Trains the classifier on prepared inputs, keeping the parameters with
/// the best dev macro-F1 (earliest on ties; the untrained model counts as
/// epoch 0). Without a dev split the last epoch is kept.
pub fn train_classifier(config: &RunConfig, prep: &Prepared) -> Result<TrainOutcome> {
    let start = Instant::now();
    let dataset = &prep.dataset;
    let vocab = EncoderVocab::build(dataset, config.vocab_min_count);
    let mut model = Model::new(config.model_config(dataset.labels.len()), vocab, config.seed).stage("train")?;
    let mut adam = AdamState::new(AdamConfig::with_lr(config.learning_rate), &model.store);
    let mut shuffle_rng = rng::stream(config.seed, Stream::ClassifierShuffle);
    let mut train_idx = split_indices(dataset, Split::Train);
    if train_idx.is_empty() {
        return Err(Error::EmptyTrainSplit).stage("train");
    }
    let has_dev = dataset.split_len(Split::Dev) > 0;
    let dev_f1 = |model: &Model| -> Result<f64> {
        if has_dev {
            Ok(score(model, dataset, &prep.embeddings, Split::Dev)?.macro_f1)
        } else {
            Ok(0.0)
        }
    };

    let initial = dev_f1(&model).stage("train")?;
    let mut history = vec![EpochLog {
        epoch: 0,
        train_loss: f64::NAN,
        dev_macro_f1: initial,
    }];
    let mut best: (f64, usize, ParamStore) = (initial, 0, model.store.clone());

    for epoch in 1..=config.epochs {
        train_idx.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for chunk in train_idx.chunks(config.batch_size) {
            let mut step = || -> Result<f64> {
                let (batch, e_s) = batch_inputs(&model, dataset, &prep.embeddings, chunk)?;
                let labels: Rc<[usize]> = chunk.iter().map(|&i| dataset.records[i].label_id).collect();
                let mut g = Graph::new();
                let f = model.forward(&mut g, &batch, &e_s)?;
                let loss = g.cross_entropy(f.logits, labels)?;
                model.store.zero_grad();
                g.backward(loss, &mut model.store)?;
                Ok(g.value(loss).item())
            };
            let loss = step().stage("train")?;
            adam.step(&mut model.store);
            total += loss * chunk.len() as f64;
        }
        let train_loss = total / train_idx.len() as f64;
        let f1 = dev_f1(&model).stage("train")?;
        log::info!("epoch {epoch}: train loss {train_loss:.4}, dev macro-F1 {f1:.4}");
        history.push(EpochLog {
            epoch,
            train_loss,
            dev_macro_f1: f1,
        });
        if f1 > best.0 || (!has_dev && epoch == config.epochs) {
            best = (f1, epoch, model.store.clone());
        }
    }
    let (_, best_epoch, store) = best;
    model.store = store;

    let mut report = score(&model, dataset, &prep.embeddings, Split::Test).stage("evaluate")?;
    report = report
        .with_info("best_epoch", best_epoch)
        .with_info("epochs", config.epochs)
        .with_info("train_hash", dataset.train_hash())
        .with_info("dict_hash", prep.dict.content_hash());
    report.config = config.to_text();
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(TrainOutcome {
        model,
        report,
        history,
        best_epoch,
    })
}

fn write_file(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// `stats.tsv`, plus `vnet.ckpt`, `vnet_loss.tsv` and `embeddings.bin` when
/// the V-Net ran.
pub fn write_prepared(dir: &Path, prep: &Prepared) -> Result<()> {
    ensure_dir(dir)?;
    prep.dict.save(dir.join("stats.tsv"))?;
    if let Some(p) = &prep.vnet {
        p.params.to_checkpoint().save(dir.join("vnet.ckpt"))?;
        let mut curve = String::from("epoch\tloss\n");
        for (e, l) in p.loss_curve.iter().enumerate() {
            let _ = writeln!(curve, "{e}\t{l:?}");
        }
        write_file(&dir.join("vnet_loss.tsv"), curve)?;
        embedding_cache(prep).save(dir.join("embeddings.bin"))?;
    }
    Ok(())
}

pub fn embedding_cache(prep: &Prepared) -> EmbeddingCache {
    EmbeddingCache {
        dict_hash: prep.dict.content_hash(),
        d_z: prep.embeddings.first().map_or(0, Vec::len),
        entries: prep
            .dataset
            .records
            .iter()
            .zip(&prep.embeddings)
            .map(|(r, e)| (r.message_id, e.clone()))
            .collect(),
    }
}

/// `model.ckpt`, `history.tsv` and the report files.
pub fn write_outcome(dir: &Path, prep: &Prepared, outcome: &TrainOutcome) -> Result<()> {
    ensure_dir(dir)?;
    outcome
        .model
        .to_checkpoint()
        .with_meta("train_hash", prep.dataset.train_hash())
        .with_meta("dict_hash", prep.dict.content_hash())
        .save(dir.join("model.ckpt"))?;
    let mut hist = String::from("epoch\ttrain_loss\tdev_macro_f1\n");
    for h in &outcome.history {
        let _ = writeln!(hist, "{}\t{:?}\t{:?}", h.epoch, h.train_loss, h.dev_macro_f1);
    }
    write_file(&dir.join("history.tsv"), hist)?;
    outcome.report.write(dir)
}

/// Full run: statistics, V-Net, classifier, test report. Artifacts go to
/// `out` when given.
pub fn train(config: &RunConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    let start = Instant::now();
    let prep = prepare(config, config.mode.uses_stats())?;
    let mut outcome = train_classifier(config, &prep)?;
    outcome.report.wall_clock_secs = start.elapsed().as_secs_f64();
    if let Some(dir) = out {
        write_prepared(dir, &prep).stage("write")?;
        write_outcome(dir, &prep, &outcome).stage("write")?;
    }
    Ok(outcome)
}

/// Re-scores a trained run directory on `split` of the configured dataset.
/// Fails with a staleness error if the dataset's train split or the
/// dictionary no longer match what the model was trained on.
pub fn evaluate(run_dir: &Path, config: &RunConfig, split: Split) -> Result<MetricsReport> {
    let start = Instant::now();
    let dataset = load_stage(config)?;
    let inner = || -> Result<MetricsReport> {
        let ck = Checkpoint::load(run_dir.join("model.ckpt"))?;
        let model = Model::from_checkpoint(&ck)?;
        let train_hash = dataset.train_hash();
        if ck.meta("train_hash")? != train_hash {
            return Err(Error::Stale(format!(
                "model was trained on train split {} but the dataset's train split is {}",
                ck.meta("train_hash")?,
                train_hash
            )));
        }
        let dict = StatDictionary::load(run_dir.join("stats.tsv"))?;
        let dict_hash = dict.content_hash();
        if ck.meta("dict_hash")? != dict_hash || dict.built_from() != train_hash {
            return Err(Error::Stale("statistics dictionary does not match the model and dataset".into()));
        }
        let embeddings = if model.config.mode.uses_stats() {
            let cache = EmbeddingCache::load(run_dir.join("embeddings.bin"))?;
            cache.check_fresh(&dict_hash)?;
            dataset
                .records
                .iter()
                .map(|r| {
                    cache
                        .get(r.message_id)
                        .map(<[f64]>::to_vec)
                        .ok_or_else(|| Error::Stale(format!("no cached embedding for message {}", r.message_id)))
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            vec![vec![0.0; model.config.d_z]; dataset.records.len()]
        };
        score(&model, &dataset, &embeddings, split)
    };
    let mut report = inner().stage("evaluate")?;
    report.config = config.to_text();
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Builds only the statistics dictionary.
pub fn build_stats(config: &RunConfig, out: Option<&Path>) -> Result<StatDictionary> {
    let dataset = load_stage(config)?;
    let dict = StatDictionary::build(&dataset).stage("build-stats")?;
    if let Some(dir) = out {
        let write = || -> Result<()> {
            ensure_dir(dir)?;
            dict.save(dir.join("stats.tsv"))
        };
        write().stage("write")?;
    }
    Ok(dict)
}

/// Dictionary plus V-Net pretraining and the embedding cache.
pub fn pretrain_vae(config: &RunConfig, out: Option<&Path>) -> Result<Prepared> {
    let prep = prepare(config, true)?;
    if let Some(dir) = out {
        write_prepared(dir, &prep).stage("write")?;
    }
    Ok(prep)
}

/// The four model variants in a fixed order: full, stats-only,
/// semantic-only, no-gate.
pub const ABLATION_MODES: [Mode; 4] = [Mode::Full, Mode::StatsOnly, Mode::SemanticOnly, Mode::NoGate];

/// Trains every variant on one shared preparation; settings other than the
/// mode are identical. Each variant's artifacts go to `out/<mode>/`.
pub fn run_ablation(config: &RunConfig, out: Option<&Path>) -> Result<Vec<(Mode, TrainOutcome)>> {
    let prep = prepare(config, true)?;
    if let Some(dir) = out {
        write_prepared(dir, &prep).stage("write")?;
    }
    let mut results = Vec::new();
    for mode in ABLATION_MODES {
        let cfg = RunConfig {
            mode,
            ..config.clone()
        };
        let outcome = train_classifier(&cfg, &prep)?;
        log::info!("ablation {mode}: test macro-F1 {:.4}", outcome.report.macro_f1);
        if let Some(dir) = out {
            write_outcome(&dir.join(mode.as_str()), &prep, &outcome).stage("write")?;
        }
        results.push((mode, outcome));
    }
    if let Some(dir) = out {
        let mut table = String::from("mode\tmacro_f1\tmicro_f1\tbest_epoch\n");
        for (mode, o) in &results {
            let _ = writeln!(table, "{mode}\t{:?}\t{:?}\t{}", o.report.macro_f1, o.report.micro_f1, o.best_epoch);
        }
        write_file(&dir.join("ablation.tsv"), table).stage("write")?;
    }
    Ok(results)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Epsilon,
    HiddenDim,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::Epsilon => "epsilon",
            SweepAxis::HiddenDim => "hidden_dim",
        }
    }

    fn apply(self, config: &mut RunConfig, value: f64) -> Result<()> {
        match self {
            SweepAxis::Epsilon => config.epsilon = value,
            SweepAxis::HiddenDim => {
                if value.fract() != 0.0 || value < 1.0 {
                    return Err(Error::Config(format!("hidden_dim grid value {value} is not a positive integer")));
                }
                config.d_model = value as usize;
            }
        }
        config.validate()
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "epsilon" => Ok(SweepAxis::Epsilon),
            "hidden_dim" | "d_model" => Ok(SweepAxis::HiddenDim),
            other => Err(Error::Config(format!("unknown sweep axis {other:?} (known: epsilon, hidden_dim)"))),
        }
    }
}

/// Parses a comma-separated grid.
pub fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let grid = text
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad grid value {s:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if grid.is_empty() {
        return Err(Error::Config("empty grid".into()));
    }
    Ok(grid)
}

/// One classifier run per grid point with the shared seed. The V-Net does
/// not depend on either axis, so it is pretrained once. Each point's
/// artifacts go to `out/<axis>_<value>/` and a table to `out/sweep.tsv`.
pub fn run_sweep(config: &RunConfig, axis: SweepAxis, grid: &[f64], out: Option<&Path>) -> Result<Vec<(f64, TrainOutcome)>> {
    if grid.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    let configs = grid
        .iter()
        .map(|&v| {
            let mut c = config.clone();
            axis.apply(&mut c, v).map(|_| c)
        })
        .collect::<Result<Vec<_>>>()
        .stage("sweep")?;
    let prep = prepare(config, config.mode.uses_stats())?;
    if let Some(dir) = out {
        write_prepared(dir, &prep).stage("write")?;
    }
    let mut results = Vec::new();
    for (&value, cfg) in grid.iter().zip(&configs) {
        let outcome = train_classifier(cfg, &prep)?;
        log::info!("sweep {}={value}: test macro-F1 {:.4}", axis.as_str(), outcome.report.macro_f1);
        if let Some(dir) = out {
            write_outcome(&dir.join(format!("{}_{value}", axis.as_str())), &prep, &outcome).stage("write")?;
        }
        results.push((value, outcome));
    }
    if let Some(dir) = out {
        let mut table = format!("{}\tmacro_f1\tmicro_f1\twall_clock_secs\n", axis.as_str());
        for (v, o) in &results {
            let _ = writeln!(
                table,
                "{v}\t{:?}\t{:?}\t{:.3}",
                o.report.macro_f1, o.report.micro_f1, o.report.wall_clock_secs
            );
        }
        write_file(&dir.join("sweep.tsv"), table).stage("write")?;
    }
    Ok(results)
}

/// Reloads the V-Net of a run directory.
pub fn load_vnet(run_dir: &Path) -> Result<VNetParams> {
    VNetParams::from_checkpoint(&Checkpoint::load(run_dir.join("vnet.ckpt"))?)
}
