//! Orchestration: statistics, V-Net pretraining, classifier training with
//! dev-set model selection, evaluation, ablations and sweeps.
//!
//! A run directory holds `stats.tsv`, `vnet.ckpt`, `vnet_loss.tsv`,
//! `embeddings.bin`, `model.ckpt`, `history.tsv`, `metrics.tsv`,
//! `summary.txt` and `config.cfg`. Errors from [`train`] and friends carry
//! the name of the failing stage (`load`, `build-stats`, `pretrain-vae`,
//! `embed`, `train`, `evaluate`, `write`).

mod config;
mod metrics;
mod run;
pub mod synth;

pub use config::{RunConfig, KEYS as CONFIG_KEYS};
pub use metrics::{f1_score, LabelMetrics, MetricsReport};
pub use run::{
    build_stats, embedding_cache, evaluate, load_stage, load_vnet, parse_grid, predict, prepare, pretrain_vae,
    run_ablation, run_sweep, score, split_logits, stat_inputs, train, train_classifier, write_outcome,
    write_prepared, EpochLog, Prepared, SweepAxis, TrainOutcome, ABLATION_MODES,
};
pub use synth::{generate_synthetic, write_synthetic, SynthManifest, SynthSpec};
