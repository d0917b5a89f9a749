//! Sessions over recorded dialogues and their aggregate report.

use std::thread;

use serde::{Deserialize, Serialize};

use crate::encoders::EmbeddingCorpus;
use crate::error::{Error, Result};
use crate::evaluation::dialogue::DialogueRecord;
use crate::evaluation::metrics::{hit_recall_mhr, EvalReport};
use crate::model::{Model, Session};

/// Per-round target ranks and top-k ids for one dialogue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionTrace {
    pub target_id: String,
    pub ranks: Vec<usize>,
    pub top_ids: Vec<Vec<String>>,
}

/// Caption first, then each recorded round, capped at `max_rounds` pipeline
/// rounds when given.
pub fn run_session(
    model: &Model,
    corpus: &EmbeddingCorpus,
    dlg: &DialogueRecord,
    max_rounds: Option<usize>,
) -> Result<SessionTrace> {
    let mut s = Session::new(model, corpus, Some(&dlg.target_id))?;
    let rounds = max_rounds.map_or(dlg.len(), |m| m.min(dlg.len()));
    let mut trace = SessionTrace {
        target_id: dlg.target_id.clone(),
        ranks: Vec::with_capacity(rounds),
        top_ids: Vec::with_capacity(rounds),
    };
    for t in 0..rounds {
        let text = dlg.text(t).expect("round within dialogue");
        let r = s.advance(&text)?;
        trace.ranks.push(r.target_rank.expect("session has a target"));
        trace.top_ids.push(r.top_ids.clone());
    }
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub report: EvalReport,
    pub traces: Vec<SessionTrace>,
}

/// Runs every dialogue (in parallel over `threads`, results in input order)
/// and scores the ranks at cutoff `k`.
pub fn evaluate(
    model: &Model,
    corpus: &EmbeddingCorpus,
    dialogues: &[DialogueRecord],
    k: usize,
    max_rounds: Option<usize>,
    threads: usize,
) -> Result<EvalOutput> {
    if dialogues.is_empty() {
        return Err(Error::Data("no dialogues to evaluate".into()));
    }
    let threads = threads.clamp(1, dialogues.len());
    let chunk = dialogues.len().div_ceil(threads);
    let run = |offset: usize, part: &[DialogueRecord]| -> Result<Vec<SessionTrace>> {
        part.iter()
            .enumerate()
            .map(|(i, d)| {
                run_session(model, corpus, d, max_rounds)
                    .map_err(|e| Error::Data(format!("dialogue {}: {e}", offset + i)))
            })
            .collect()
    };
    let parts: Vec<Result<Vec<SessionTrace>>> = if threads == 1 {
        vec![run(0, dialogues)]
    } else {
        thread::scope(|scope| {
            let handles: Vec<_> = dialogues
                .chunks(chunk)
                .enumerate()
                .map(|(c, part)| scope.spawn(move || run(c * chunk, part)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
        })
    };
    let mut traces = Vec::with_capacity(dialogues.len());
    for p in parts {
        traces.extend(p?);
    }
    let ranks: Vec<Vec<usize>> = traces.iter().map(|t| t.ranks.clone()).collect();
    Ok(EvalOutput {
        report: hit_recall_mhr(&ranks, k)?,
        traces,
    })
}

pub fn default_threads() -> usize {
    thread::available_parallelism().map_or(1, |n| n.get())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::synthetic::{gen_synthetic, SyntheticConfig};
    use crate::model::ModelConfig;

    fn setup() -> (Model, crate::evaluation::synthetic::SyntheticDataset) {
        let cfg = SyntheticConfig {
            images: 40,
            dim: 8,
            rounds: 4,
            ..Default::default()
        };
        let ds = gen_synthetic(2, &cfg).unwrap();
        let mc = ModelConfig {
            text_dim: 8,
            image_dim: 8,
            memory_tokens: 4,
            history_k: 5,
            ..ModelConfig::desk()
        };
        (Model::new(mc, 0).unwrap(), ds)
    }

    #[test]
    fn zero_round_dialogue_gives_one_ranking() {
        let (m, ds) = setup();
        let mut d = ds.dialogues[0].clone();
        d.rounds.clear();
        let t = run_session(&m, &ds.corpus, &d, None).unwrap();
        assert_eq!(t.ranks.len(), 1);
        assert_eq!(t.top_ids[0].len(), 5);
    }

    #[test]
    fn parallel_matches_serial_and_errors_carry_index() {
        let (m, ds) = setup();
        let a = evaluate(&m, &ds.corpus, &ds.dialogues, 10, None, 1).unwrap();
        let b = evaluate(&m, &ds.corpus, &ds.dialogues, 10, None, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.report.rounds.windows(2).all(|w| w[0].hit <= w[1].hit));
        assert!(evaluate(&m, &ds.corpus, &[], 10, None, 1).is_err());
        let mut bad = ds.dialogues[..3].to_vec();
        bad[2].target_id = "ghost".into();
        let err = evaluate(&m, &ds.corpus, &bad, 10, None, 2).unwrap_err().to_string();
        assert!(err.contains("dialogue 2"), "{err}");
    }

    #[test]
    fn round_cap() {
        let (m, ds) = setup();
        let t = run_session(&m, &ds.corpus, &ds.dialogues[1], Some(2)).unwrap();
        assert_eq!(t.ranks.len(), 2);
    }
}
