//! Joint training of entity detection and response generation, with model
//! selection on validation entity F1.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Example;
use crate::embeddings::StaticEmbeddings;
use crate::encoder::EncoderKind;
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::kg::KnowledgeGraph;
use crate::model::{KgirNet, ModelConfig};
use crate::nn::{Adam, Gradients, ParamStore, Tape};

pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    #[serde(flatten)]
    pub model: ModelConfig,
    pub batch_size: usize,
    pub lr_encoder: f64,
    pub lr_decoder: f64,
    pub epochs: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub clip_norm: f64,
    pub seed: u64,
    /// Hard cap on optimiser steps across epochs.
    pub max_steps: Option<usize>,
    /// Skip per-epoch validation generation (selection then keeps the last epoch).
    pub skip_validation: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            batch_size: 20,
            lr_encoder: 1e-4,
            lr_decoder: 1e-3,
            epochs: 50,
            patience: 10,
            clip_norm: 5.0,
            seed: 0,
            max_steps: None,
            skip_validation: false,
        }
    }
}

/// Named ablation variants; each changes only its own switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Contextual transformer, relation tokens, sub-graph gate.
    Full,
    /// Static embeddings instead of the transformer.
    NoTransformer,
    /// No sub-graph gate.
    NoSubgraph,
    /// Plain sequence-to-sequence over static embeddings.
    Seq2Seq,
    /// Plain sequence-to-sequence over the transformer.
    Seq2SeqTransformer,
}

impl Preset {
    pub const ALL: [Preset; 5] = [
        Preset::Full,
        Preset::NoTransformer,
        Preset::NoSubgraph,
        Preset::Seq2Seq,
        Preset::Seq2SeqTransformer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Full => "kgirnet",
            Preset::NoTransformer => "kgirnet_nb",
            Preset::NoSubgraph => "kgirnet_ns",
            Preset::Seq2Seq => "s2s",
            Preset::Seq2SeqTransformer => "s2s_bert",
        }
    }

    pub fn from_name(name: &str) -> Option<Preset> {
        Preset::ALL.into_iter().find(|p| p.name() == name.to_ascii_lowercase())
    }

    pub fn apply(self, mut config: TrainConfig) -> TrainConfig {
        let m = &mut config.model;
        let (kind, intermediate, gate) = match self {
            Preset::Full => (EncoderKind::Transformer, true, true),
            Preset::NoTransformer => (EncoderKind::Static, true, true),
            Preset::NoSubgraph => (EncoderKind::Transformer, true, false),
            Preset::Seq2Seq => (EncoderKind::Static, false, false),
            Preset::Seq2SeqTransformer => (EncoderKind::Transformer, false, false),
        };
        m.encoder_kind = kind;
        m.intermediate = intermediate;
        m.subgraph_gate = gate;
        config
    }
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub valid_bleu: Option<f64>,
    pub valid_entity_f1: Option<f64>,
}

pub struct TrainOutcome {
    pub model: KgirNet,
    pub history: Vec<EpochMetrics>,
    /// Mean loss of each optimiser step, in order.
    pub step_losses: Vec<f64>,
    pub best_entity_f1: Option<f64>,
}

/// Mean loss and summed gradients over a batch; examples run in parallel and
/// merge in batch order so results do not depend on scheduling.
pub fn batch_gradients(model: &KgirNet, batch: &[&Example], seed: u64) -> (f64, Gradients) {
    let parts: Vec<(f64, Gradients)> = batch
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let prepared = model.prepare(ex);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut tape = Tape::new(&model.params);
            let terms = model.loss_terms(&mut tape, &prepared, Some(&mut rng));
            (tape.scalar(terms.total), tape.backward(terms.total))
        })
        .collect();
    let n = batch.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grads = Gradients::new();
    for (l, g) in parts {
        loss += l;
        grads.merge(g);
    }
    grads.scale(1.0 / n);
    (loss / n, grads)
}

pub struct Trainer {
    pub config: TrainConfig,
    pub output: Option<PathBuf>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Self {
        Trainer { config, output: None }
    }

    /// Checkpoint directory for the best model and `metrics.csv`.
    pub fn with_output(mut self, dir: impl Into<PathBuf>) -> Self {
        self.output = Some(dir.into());
        self
    }

    pub fn build_model(&self, kg: KnowledgeGraph, embeddings: StaticEmbeddings, train: &[Example]) -> Result<KgirNet> {
        KgirNet::for_examples(self.config.model.clone(), kg, embeddings, train, self.config.seed)
    }

    pub fn train(
        &self,
        kg: KnowledgeGraph,
        embeddings: StaticEmbeddings,
        train: &[Example],
        valid: &[Example],
    ) -> Result<TrainOutcome> {
        let model = self.build_model(kg, embeddings, train)?;
        self.train_model(model, train, valid)
    }

    pub fn train_model(&self, mut model: KgirNet, train: &[Example], valid: &[Example]) -> Result<TrainOutcome> {
        let cfg = &self.config;
        if train.is_empty() {
            return Err(Error::Config("no training examples".into()));
        }
        if cfg.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let mut adam = Adam::new(&model.params, cfg.lr_encoder, cfg.lr_decoder);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut history = Vec::new();
        let mut step_losses = Vec::new();
        let mut best: Option<(f64, ParamStore)> = None;
        let mut stale = 0;
        let mut step = 0usize;

        'epochs: for epoch in 1..=cfg.epochs {
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            let mut batches = 0usize;
            for chunk in order.chunks(cfg.batch_size) {
                if cfg.max_steps.is_some_and(|m| step >= m) {
                    break;
                }
                let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
                let batch_seed = cfg.seed.wrapping_add((step as u64 + 1).wrapping_mul(0x2545_F491_4F6C_DD1D));
                let (loss, mut grads) = batch_gradients(&model, &batch, batch_seed);
                if !loss.is_finite() || !grads.is_finite() {
                    return Err(Error::Diverged {
                        step,
                        message: format!(
                            "loss {loss}, gradient norm {}, epoch {epoch}, batch of {}",
                            grads.global_norm(),
                            batch.len()
                        ),
                    });
                }
                grads.clip_global_norm(cfg.clip_norm);
                adam.update(&mut model.params, &grads);
                step += 1;
                step_losses.push(loss);
                epoch_loss += loss;
                batches += 1;
            }
            if batches == 0 {
                break;
            }
            let (valid_bleu, valid_f1) = if cfg.skip_validation || valid.is_empty() {
                (None, None)
            } else {
                let report = evaluate(&model, valid)?;
                (Some(report.bleu), Some(report.entity_f1))
            };
            let metrics = EpochMetrics {
                epoch,
                steps: step,
                train_loss: epoch_loss / batches as f64,
                valid_bleu,
                valid_entity_f1: valid_f1,
            };
            log::info!(
                "epoch {epoch}: loss {:.4} valid BLEU {:?} entity F1 {:?}",
                metrics.train_loss,
                valid_bleu,
                valid_f1
            );
            history.push(metrics);
            if let Some(f1) = valid_f1 {
                if best.as_ref().is_none_or(|(b, _)| f1 > *b) {
                    best = Some((f1, model.params.clone()));
                    stale = 0;
                    self.persist(&model, &history, Some(f1))?;
                } else {
                    stale += 1;
                    self.write_metrics(&history)?;
                    if stale >= cfg.patience {
                        log::info!("no validation improvement for {stale} epochs; stopping");
                        break 'epochs;
                    }
                }
            } else {
                self.persist(&model, &history, None)?;
            }
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break;
            }
        }

        let best_entity_f1 = best.as_ref().map(|(f1, _)| *f1);
        if let Some((_, params)) = best {
            model.params = params;
        }
        Ok(TrainOutcome {
            model,
            history,
            step_losses,
            best_entity_f1,
        })
    }

    fn persist(&self, model: &KgirNet, history: &[EpochMetrics], valid_entity_f1: Option<f64>) -> Result<()> {
        if let Some(dir) = &self.output {
            model.save_scored(dir, self.config.seed, valid_entity_f1)?;
            write_metrics(dir, history)?;
        }
        Ok(())
    }

    fn write_metrics(&self, history: &[EpochMetrics]) -> Result<()> {
        match &self.output {
            Some(dir) => write_metrics(dir, history),
            None => Ok(()),
        }
    }
}

pub fn write_metrics(dir: &Path, history: &[EpochMetrics]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = String::from("epoch,steps,train_loss,valid_bleu,valid_entity_f1\n");
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
    for m in history {
        let _ = writeln!(
            out,
            "{},{},{:.6},{},{}",
            m.epoch,
            m.steps,
            m.train_loss,
            opt(m.valid_bleu),
            opt(m.valid_entity_f1)
        );
    }
    let path = dir.join(METRICS_FILE);
    fs::write(&path, out).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_published_settings() {
        let c = TrainConfig::default();
        assert_eq!(c.batch_size, 20);
        assert_eq!(c.lr_encoder, 1e-4);
        assert_eq!(c.lr_decoder, 1e-3);
        assert_eq!(c.model.k, 2);
        assert_eq!(c.model.h_dim, 256);
        assert_eq!(c.model.entity_head, crate::encoder::EntityHeadKind::Cnn);
        assert!(c.model.subgraph_gate);
        assert_eq!(c.clip_norm, 5.0);
        assert_eq!(c.patience, 10);
    }

    #[test]
    fn presets_touch_only_their_switches() {
        let base = TrainConfig::default();
        let ns = Preset::NoSubgraph.apply(base.clone());
        assert!(!ns.model.subgraph_gate);
        assert_eq!(
            TrainConfig {
                model: ModelConfig {
                    subgraph_gate: true,
                    ..ns.model.clone()
                },
                ..ns.clone()
            },
            base
        );
        let nb = Preset::NoTransformer.apply(base.clone());
        assert_eq!(nb.model.encoder_kind, EncoderKind::Static);
        assert_eq!(
            ModelConfig {
                encoder_kind: EncoderKind::Transformer,
                ..nb.model.clone()
            },
            base.model
        );
        assert_eq!(Preset::from_name("KGIRNET_NS"), Some(Preset::NoSubgraph));
    }

    #[test]
    fn config_json_roundtrip_with_partial_input() {
        let c: TrainConfig = serde_json::from_str(r#"{"h_dim": 32, "encoder_kind": "static", "epochs": 3}"#).unwrap();
        assert_eq!(c.model.h_dim, 32);
        assert_eq!(c.model.encoder_kind, EncoderKind::Static);
        assert_eq!(c.epochs, 3);
        assert_eq!(c.batch_size, 20);
        let back: TrainConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
