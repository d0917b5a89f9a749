//! Analytic token and FLOPs accounting for three dialogue-encoding strategies.
//!
//! Encoder FLOPs for `T` tokens: `2·L·(4·T·d² + 2·T²·d + 2·r·T·d²)`, counting a
//! multiply-accumulate as two FLOPs (projections, attention scores and
//! values, feed-forward).

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::encoders::tokenizer::tokenize;
use crate::error::{Error, Result};
use crate::evaluation::DialogueRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Re-encode caption plus every round so far.
    Concat,
    /// Encode an externally reconstructed query plus a prompt.
    Reconstruct,
    /// Encode only the current round; memory carries the rest.
    Memory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderCostSpec {
    pub layers: usize,
    pub hidden: usize,
    pub ffn_ratio: usize,
    pub memory: MemoryCostSpec,
}

/// Shapes of the per-round memory pipeline run after the encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryCostSpec {
    pub tokens: usize,
    pub image_dim: usize,
    pub history_k: usize,
    pub recall_n: usize,
}

impl EncoderCostSpec {
    /// A BERT-base sized text encoder with the default memory pipeline.
    pub fn base() -> Self {
        Self {
            layers: 12,
            hidden: 768,
            ffn_ratio: 4,
            memory: MemoryCostSpec {
                tokens: 36,
                image_dim: 256,
                history_k: 100,
                recall_n: 2,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.memory;
        if [self.layers, self.hidden, self.ffn_ratio, m.tokens, m.image_dim, m.history_k, m.recall_n].contains(&0) {
            return Err(Error::Config("cost spec entries must be positive".into()));
        }
        Ok(())
    }
}

pub fn encoder_flops(spec: &EncoderCostSpec, tokens: usize) -> f64 {
    let (l, d, r, t) = (spec.layers as f64, spec.hidden as f64, spec.ffn_ratio as f64, tokens as f64);
    2.0 * l * (4.0 * t * d * d + 2.0 * t * t * d + 2.0 * r * t * d * d)
}

/// FLOPs of one cross-attention block: `a` query rows over `b` key rows.
fn cross_attention_flops(a: f64, b: f64, d: f64) -> f64 {
    2.0 * (2.0 * a * d * d + 2.0 * b * d * d + 2.0 * a * b * d)
}

/// Itemized memory-pipeline FLOPs for a round of `tokens` words.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryOverhead {
    pub update: f64,
    pub recall_key: f64,
    pub recall_augment: f64,
    pub pooling: f64,
    pub visual_projection: f64,
    pub visual_fusion: f64,
    pub output_projection: f64,
}

impl MemoryOverhead {
    pub fn new(spec: &EncoderCostSpec, tokens: usize) -> Self {
        let m = &spec.memory;
        let (l, d, t, k, di) = (
            m.tokens as f64,
            spec.hidden as f64,
            tokens as f64,
            m.history_k as f64,
            m.image_dim as f64,
        );
        Self {
            update: cross_attention_flops(l, t, d),
            recall_key: cross_attention_flops(l, t, d),
            recall_augment: cross_attention_flops(l, 1.0, d) + 2.0 * m.recall_n as f64 * d,
            pooling: 3.0 * 4.0 * l * d,
            visual_projection: 2.0 * k * di * d,
            visual_fusion: cross_attention_flops(l, k, d),
            output_projection: 2.0 * d * di,
        }
    }

    pub fn total(&self) -> f64 {
        self.update
            + self.recall_key
            + self.recall_augment
            + self.pooling
            + self.visual_projection
            + self.visual_fusion
            + self.output_projection
    }
}

/// Tokens encoded at round `t` under a strategy. `reconstructed` holds one
/// externally produced text per round for [`Strategy::Reconstruct`].
pub fn count_tokens(
    strategy: Strategy,
    dialogue: &DialogueRecord,
    t: usize,
    reconstructed: Option<&[String]>,
    prompt_tokens: usize,
) -> Result<usize> {
    if t >= dialogue.len() {
        return Err(Error::invalid(format!(
            "round {t} is beyond a dialogue of {} rounds",
            dialogue.len()
        )));
    }
    let n = |s: &str| tokenize(s, usize::MAX).len();
    match strategy {
        Strategy::Memory => Ok(n(&dialogue.text(t).expect("round exists"))),
        Strategy::Concat => Ok(n(&dialogue.texts()[..=t].join(" "))),
        Strategy::Reconstruct => {
            let texts = reconstructed
                .ok_or_else(|| Error::Config("reconstruct strategy needs reconstructed texts".into()))?;
            let text = texts
                .get(t)
                .ok_or_else(|| Error::Config(format!("no reconstructed text for round {t}")))?;
            Ok(n(text) + prompt_tokens)
        }
    }
}

/// FLOPs of one round that encodes `tokens` under `strategy`.
pub fn flops_per_round(spec: &EncoderCostSpec, strategy: Strategy, tokens: usize) -> Result<f64> {
    if tokens == 0 {
        return Err(Error::invalid("a round encodes at least one token"));
    }
    let enc = encoder_flops(spec, tokens);
    Ok(match strategy {
        Strategy::Memory => enc + MemoryOverhead::new(spec, tokens).total(),
        Strategy::Concat | Strategy::Reconstruct => enc,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyTrace {
    pub strategy: Strategy,
    /// Mean tokens per round over the dialogues that reach it.
    pub tokens: Vec<f64>,
    /// Mean FLOPs per round.
    pub flops: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub traces: Vec<StrategyTrace>,
    /// `1 − F_memory / F_concat` at the final round.
    pub reduction: f64,
}

pub fn compare_strategies(
    dialogues: &[DialogueRecord],
    spec: &EncoderCostSpec,
    reconstructed: Option<(&[Vec<String>], usize)>,
) -> Result<CostReport> {
    spec.validate()?;
    if dialogues.is_empty() {
        return Err(Error::invalid("no dialogues to account"));
    }
    let rounds = dialogues.iter().map(DialogueRecord::len).max().unwrap_or(0);
    let mut strategies = vec![Strategy::Concat, Strategy::Memory];
    if reconstructed.is_some() {
        strategies.insert(0, Strategy::Reconstruct);
    }
    let mut traces = Vec::new();
    for strategy in strategies {
        let mut tokens = vec![0.0; rounds];
        let mut flops = vec![0.0; rounds];
        let mut counts = vec![0usize; rounds];
        for (i, d) in dialogues.iter().enumerate() {
            let rec = reconstructed.map(|(r, _)| r.get(i).map(Vec::as_slice).unwrap_or(&[]));
            let prompt = reconstructed.map_or(0, |(_, p)| p);
            for t in 0..d.len() {
                let n = count_tokens(strategy, d, t, rec, prompt)?;
                tokens[t] += n as f64;
                flops[t] += flops_per_round(spec, strategy, n)?;
                counts[t] += 1;
            }
        }
        for t in 0..rounds {
            tokens[t] /= counts[t] as f64;
            flops[t] /= counts[t] as f64;
        }
        traces.push(StrategyTrace { strategy, tokens, flops });
    }
    let last = |s: Strategy| {
        traces
            .iter()
            .find(|t| t.strategy == s)
            .and_then(|t| t.flops.last().copied())
            .expect("trace present")
    };
    let reduction = flops_reduction(last(Strategy::Memory), last(Strategy::Concat));
    Ok(CostReport { traces, reduction })
}

/// `1 − memory / baseline`.
pub fn flops_reduction(memory: f64, baseline: f64) -> f64 {
    1.0 - memory / baseline
}

/// Coefficient of variation (population standard deviation over mean).
pub fn coefficient_of_variation(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    var.sqrt() / mean
}

impl CostReport {
    pub fn table(&self) -> String {
        let mut s = String::new();
        let rounds = self.traces.first().map_or(0, |t| t.tokens.len());
        let header = |s: &mut String, title: &str| {
            let _ = write!(s, "{title:<14}");
            for r in 1..=rounds {
                let _ = write!(s, "{r:>9}");
            }
            s.push('\n');
        };
        header(&mut s, "tokens");
        for t in &self.traces {
            let _ = write!(s, "{:<14}", format!("{:?}", t.strategy).to_lowercase());
            for v in &t.tokens {
                let _ = write!(s, "{v:>9.1}");
            }
            s.push('\n');
        }
        header(&mut s, "GFLOPs");
        for t in &self.traces {
            let _ = write!(s, "{:<14}", format!("{:?}", t.strategy).to_lowercase());
            for v in &t.flops {
                let _ = write!(s, "{:>9.3}", v / 1e9);
            }
            s.push('\n');
        }
        let _ = writeln!(s, "reduction at final round: {:.1}%", 100.0 * self.reduction);
        s
    }
}
