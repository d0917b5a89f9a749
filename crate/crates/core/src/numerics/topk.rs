//! Exact cosine ranking over an [`EmbeddingCorpus`].

use std::cmp::Ordering;

use crate::encoders::EmbeddingCorpus;
use crate::error::{Error, Result};
use crate::numerics::layers::cosine_with_norms;
use crate::numerics::matrix::norm;

/// One ranked corpus item.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub index: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopK {
    pub items: Vec<Scored>,
    /// Set when the corpus held fewer than `k` items.
    pub short: bool,
}

/// Descending score, then ascending id.
fn rank_order(corpus: &EmbeddingCorpus, a: &Scored, b: &Scored) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| corpus.id(a.index).cmp(corpus.id(b.index)))
}

fn score_all(q: &[f64], corpus: &EmbeddingCorpus) -> Result<Vec<Scored>> {
    if corpus.is_empty() {
        return Err(Error::invalid("ranking against an empty corpus"));
    }
    if q.len() != corpus.dim() {
        return Err(Error::invalid(format!(
            "query has length {} but corpus dimension is {}",
            q.len(),
            corpus.dim()
        )));
    }
    let qn = norm(q);
    Ok((0..corpus.len())
        .map(|i| Scored {
            index: i,
            score: cosine_with_norms(q, corpus.embedding(i), qn, corpus.norm(i)),
        })
        .collect())
}

/// The `k` items most cosine-similar to `q`.
pub fn topk_by_similarity(q: &[f64], corpus: &EmbeddingCorpus, k: usize) -> Result<TopK> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let mut scored = score_all(q, corpus)?;
    let short = scored.len() < k;
    if !short && k < scored.len() {
        scored.select_nth_unstable_by(k - 1, |a, b| rank_order(corpus, a, b));
        scored.truncate(k);
    }
    scored.sort_unstable_by(|a, b| rank_order(corpus, a, b));
    Ok(TopK {
        items: scored,
        short,
    })
}

/// Full ranking of the corpus against `q`.
pub fn rank_all(q: &[f64], corpus: &EmbeddingCorpus) -> Result<Vec<Scored>> {
    let mut scored = score_all(q, corpus)?;
    scored.sort_unstable_by(|a, b| rank_order(corpus, a, b));
    Ok(scored)
}
