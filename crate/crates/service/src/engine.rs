//! Checkpoint and corpus shared by every session, and the API view of a round.

use memir_core::cost::{flops_per_round, EncoderCostSpec, Strategy};
use memir_core::encoders::EmbeddingCorpus;
use memir_core::numerics::topk_by_similarity;
use memir_core::training::Checkpoint;
use memir_core::{Error, Model, Result, RoundResult, Session, SessionState};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiHit {
    pub image_id: String,
    pub score: f64,
    pub image_url: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiRoundResult {
    pub round: usize,
    pub top_k: Vec<ApiHit>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_rank: Option<usize>,
    /// Tokens encoded this round and their FLOPs under the memory strategy.
    pub tokens: usize,
    pub flops: f64,
    pub truncated: bool,
    pub recall_active: bool,
    pub recalled_rounds: Vec<usize>,
    pub repository_size: usize,
}

/// Immutable model state behind the API.
#[derive(Debug)]
pub struct Engine {
    pub model: Model,
    pub corpus: EmbeddingCorpus,
    pub k: usize,
    pub cost: EncoderCostSpec,
    pub checkpoint_id: String,
}

impl Engine {
    pub fn new(model: Model, corpus: EmbeddingCorpus, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if corpus.dim() != model.config.image_dim {
            return Err(Error::Data(format!(
                "corpus dimension {} does not match model image dimension {}",
                corpus.dim(),
                model.config.image_dim
            )));
        }
        let checkpoint_id = Checkpoint::new(model.clone(), None).id();
        Ok(Self {
            model,
            corpus,
            k,
            cost: EncoderCostSpec::base(),
            checkpoint_id,
        })
    }

    pub fn view(&self, r: &RoundResult) -> Result<ApiRoundResult> {
        let top = topk_by_similarity(&r.query, &self.corpus, self.k)?;
        Ok(ApiRoundResult {
            round: r.round,
            top_k: top
                .items
                .iter()
                .map(|s| {
                    let id = self.corpus.id(s.index);
                    ApiHit {
                        image_id: id.to_string(),
                        score: s.score,
                        image_url: format!("/images/{}", url_segment(id)),
                    }
                })
                .collect(),
            target_rank: r.target_rank,
            tokens: r.tokens,
            flops: flops_per_round(&self.cost, Strategy::Memory, r.tokens.max(1))?,
            truncated: r.truncated,
            recall_active: r.recall_active,
            recalled_rounds: r.recalled_rounds.clone(),
            repository_size: r.repository_size,
        })
    }

    /// Round 0 of a new dialogue.
    pub fn start(&self, caption: &str, target: Option<&str>) -> Result<(SessionState, ApiRoundResult)> {
        let mut s = Session::new(&self.model, &self.corpus, target)?;
        let view = self.view(s.advance(caption)?)?;
        Ok((s.into_state(), view))
    }

    pub fn advance(&self, state: SessionState, text: &str) -> Result<(SessionState, ApiRoundResult)> {
        let mut s = Session::resume(&self.model, &self.corpus, state)?;
        let view = self.view(s.advance(text)?)?;
        Ok((s.into_state(), view))
    }
}

/// Percent-encodes everything outside the unreserved set.
pub fn url_segment(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for b in s.bytes() {
        if b.is_ascii_alphanumeric() || b"-._~".contains(&b) {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}
