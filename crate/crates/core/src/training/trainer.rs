//! Desk-scale training loop.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::EmbeddingCorpus;
use crate::error::{Error, Result};
use crate::evaluation::DialogueRecord;
use crate::model::{GraphDialogue, Model, ModelConfig};
use crate::numerics::Matrix;
use crate::params::{Graph, ParamGrads, ParamStore};
use crate::training::loss::{contrastive_loss, round_average};
use crate::training::optim::{AdamW, AdamWConfig, StepOutcome};
use crate::visual::{build_visual_history, VisualHistory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub optimizer: AdamWConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Pipeline rounds used per dialogue (caption included); `None` uses all.
    pub rounds: Option<usize>,
    pub seed: u64,
    /// Cut gradients between rounds instead of back-propagating through the
    /// whole dialogue.
    pub truncate_backprop: bool,
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            model: ModelConfig::desk(),
            optimizer: AdamWConfig {
                lr_backbone: 3e-3,
                lr_head: 3e-3,
                ..AdamWConfig::default()
            },
            batch_size: 32,
            epochs: 30,
            rounds: None,
            seed: 0,
            truncate_backprop: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.rounds == Some(0) {
            return Err(Error::Config("rounds must be at least 1".into()));
        }
        let o = &self.optimizer;
        if !(o.lr_backbone >= 0.0 && o.lr_head >= 0.0 && o.eps > 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        self.model.validate()
    }
}

/// Loss of one batch and, for trainable graphs, its gradient.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub loss: f64,
    pub per_round: Vec<f64>,
    pub grads: Option<ParamGrads>,
}

/// Runs `batch` through the pipeline round by round under `params`, scoring
/// each round with the contrastive loss against the targets and averaging
/// over rounds. Round `t` includes the dialogues that are longer than `t`.
pub fn batch_loss(
    model: &Model,
    params: &ParamStore,
    corpus: &EmbeddingCorpus,
    batch: &[&DialogueRecord],
    rounds: Option<usize>,
    truncate: bool,
    trainable: bool,
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let targets = batch
        .iter()
        .map(|d| {
            corpus
                .position(&d.target_id)
                .ok_or_else(|| Error::Data(format!("target {} is not in the corpus", d.target_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let lens: Vec<usize> = batch
        .iter()
        .map(|d| rounds.map_or(d.len(), |r| r.min(d.len())))
        .collect();
    let max_len = lens.iter().copied().max().unwrap_or(0);

    let mut g = if trainable { Graph::new(params) } else { Graph::inference(params) };
    let log_tau = g.param(model.arch.log_tau);
    let mut states: Vec<GraphDialogue> = vec![GraphDialogue::default(); batch.len()];
    let mut histories: Vec<Option<VisualHistory>> = vec![None; batch.len()];
    let mut losses = Vec::with_capacity(max_len);
    for t in 0..max_len {
        let active: Vec<usize> = (0..batch.len()).filter(|&i| lens[i] > t).collect();
        let mut queries = Vec::with_capacity(active.len());
        for &i in &active {
            let text = batch[i].text(t).expect("round within dialogue");
            let vars = model.step(&mut g, &mut states[i], &text, histories[i].as_ref())?;
            let qv = g.value(vars.query).data().to_vec();
            histories[i] = Some(build_visual_history(&qv, corpus, model.config.history_k, t)?);
            queries.push(vars.query);
            if truncate {
                let frozen = states[i].detach(&g);
                states[i] = frozen.attach(&mut g);
            }
        }
        let q = g.concat_rows(&queries)?;
        let idx: Vec<usize> = active.iter().map(|&i| targets[i]).collect();
        let v = g.constant(corpus.gather(&idx));
        losses.push(contrastive_loss(&mut g, q, v, log_tau)?);
    }
    let total = round_average(&mut g, &losses)?;
    let per_round = losses.iter().map(|&l| g.value(l).get(0, 0)).collect();
    let loss = g.value(total).get(0, 0);
    let grads = if trainable {
        Some(g.backward(&[(total, Matrix::filled(1, 1, 1.0))])?.0)
    } else {
        None
    };
    Ok(BatchLoss { loss, per_round, grads })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs: usize,
    pub seed: u64,
    /// Mean loss over the data before any update, in the unshuffled order.
    pub initial_loss: f64,
    /// Mean batch loss during each epoch.
    pub loss_curve: Vec<f64>,
    pub skipped_steps: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub meta: TrainingMeta,
}

fn check_data(corpus: &EmbeddingCorpus, dialogues: &[DialogueRecord], cfg: &ModelConfig) -> Result<()> {
    if dialogues.is_empty() {
        return Err(Error::Data("no training dialogues".into()));
    }
    if corpus.dim() != cfg.image_dim {
        return Err(Error::Data(format!(
            "corpus dimension {} does not match image_dim {}",
            corpus.dim(),
            cfg.image_dim
        )));
    }
    let mut missing = HashSet::new();
    for (i, d) in dialogues.iter().enumerate() {
        if corpus.position(&d.target_id).is_none() && missing.insert(&d.target_id) {
            return Err(Error::Data(format!(
                "dialogue {i} references missing image {}",
                d.target_id
            )));
        }
    }
    Ok(())
}

/// Mean loss over fixed-order batches, without gradients.
pub fn dataset_loss(
    model: &Model,
    corpus: &EmbeddingCorpus,
    dialogues: &[DialogueRecord],
    batch_size: usize,
    rounds: Option<usize>,
) -> Result<f64> {
    let refs: Vec<&DialogueRecord> = dialogues.iter().collect();
    let mut total = 0.0;
    let mut n = 0;
    for chunk in refs.chunks(batch_size.max(1)) {
        total += batch_loss(model, &model.params, corpus, chunk, rounds, false, false)?.loss;
        n += 1;
    }
    Ok(total / n as f64)
}

/// Trains from a seeded initialization. Bit-for-bit deterministic in the
/// configuration and data. Final parameters are rounded to checkpoint precision.
pub fn train(cfg: &TrainConfig, corpus: &EmbeddingCorpus, dialogues: &[DialogueRecord]) -> Result<TrainOutcome> {
    train_with_progress(cfg, corpus, dialogues, |_, _| {})
}

pub fn train_with_progress(
    cfg: &TrainConfig,
    corpus: &EmbeddingCorpus,
    dialogues: &[DialogueRecord],
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_data(corpus, dialogues, &cfg.model)?;
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    let initial_loss = dataset_loss(&model, corpus, dialogues, cfg.batch_size, cfg.rounds)?;
    let mut meta = TrainingMeta {
        epochs: cfg.epochs,
        seed: cfg.seed,
        initial_loss,
        loss_curve: Vec::with_capacity(cfg.epochs),
        skipped_steps: 0,
    };
    if cfg.epochs == 0 {
        return Ok(TrainOutcome { model, meta });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut opt = AdamW::new(cfg.optimizer.clone(), &model.params);
    let mut order: Vec<usize> = (0..dialogues.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&DialogueRecord> = chunk.iter().map(|&i| &dialogues[i]).collect();
            let out = batch_loss(&model, &model.params, corpus, &batch, cfg.rounds, cfg.truncate_backprop, true)?;
            let grads = out.grads.expect("trainable batch has gradients");
            if opt.step(&mut model.params, &grads)? == StepOutcome::SkippedNonFinite {
                meta.skipped_steps += 1;
            }
            sum += out.loss;
            batches += 1;
        }
        let mean = sum / batches as f64;
        log::info!("epoch {} loss {mean:.5}", epoch + 1);
        meta.loss_curve.push(mean);
        on_epoch(epoch, mean);
    }
    model.params.quantize_f32();
    Ok(TrainOutcome { model, meta })
}
