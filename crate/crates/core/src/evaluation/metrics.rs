//! Per-round Hit@K, Recall@K and their mean (MHR@K).
//!
//! Hit@K at round `t` counts dialogues whose target reached the top `K` at any
//! round up to `t`; Recall@K counts those in the top `K` at round `t` itself.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    /// Zero-based pipeline round (the caption is round 0).
    pub round: usize,
    /// Dialogues that have this round.
    pub count: usize,
    pub hit: f64,
    pub recall: f64,
    pub mhr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub dialogues: usize,
    pub rounds: Vec<RoundMetrics>,
    pub avg_hit: f64,
    pub avg_recall: f64,
    pub avg_mhr: f64,
}

/// Metrics in percent. A dialogue that ends early keeps contributing its
/// final Hit@K to later rounds, so the Hit@K column never decreases; Recall@K
/// at a round only counts dialogues that reached it.
pub fn hit_recall_mhr(ranks: &[Vec<usize>], k: usize) -> Result<EvalReport> {
    if k == 0 {
        return Err(Error::invalid("K must be at least 1"));
    }
    if ranks.is_empty() {
        return Err(Error::invalid("no dialogues to score"));
    }
    if let Some(i) = ranks.iter().position(|r| r.is_empty()) {
        return Err(Error::invalid(format!("dialogue {i} has no ranked rounds")));
    }
    if ranks.iter().flatten().any(|&r| r == 0) {
        return Err(Error::invalid("ranks are 1-based"));
    }
    let n = ranks.len();
    let max_rounds = ranks.iter().map(Vec::len).max().unwrap_or(0);
    let mut hit_so_far = vec![false; n];
    let mut rounds = Vec::with_capacity(max_rounds);
    for t in 0..max_rounds {
        let mut count = 0;
        let mut recalled = 0;
        for (i, r) in ranks.iter().enumerate() {
            if let Some(&rank) = r.get(t) {
                count += 1;
                if rank <= k {
                    recalled += 1;
                    hit_so_far[i] = true;
                }
            }
        }
        let hits = hit_so_far.iter().filter(|&&h| h).count();
        let hit = 100.0 * hits as f64 / n as f64;
        let recall = 100.0 * recalled as f64 / count as f64;
        rounds.push(RoundMetrics {
            round: t,
            count,
            hit,
            recall,
            mhr: (hit + recall) / 2.0,
        });
    }
    let mean = |f: fn(&RoundMetrics) -> f64| rounds.iter().map(f).sum::<f64>() / rounds.len() as f64;
    Ok(EvalReport {
        k,
        dialogues: n,
        avg_hit: mean(|r| r.hit),
        avg_recall: mean(|r| r.recall),
        avg_mhr: mean(|r| r.mhr),
        rounds,
    })
}

impl EvalReport {
    /// Round-by-round table. Columns are numbered from 1, the caption being
    /// column 1.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<10}", "round");
        for r in &self.rounds {
            let _ = write!(s, "{:>8}", r.round + 1);
        }
        let _ = writeln!(s, "{:>8}", "Avg");
        let rows: [(String, fn(&RoundMetrics) -> f64, f64); 3] = [
            (format!("Hit@{}", self.k), |r| r.hit, self.avg_hit),
            (format!("Recall@{}", self.k), |r| r.recall, self.avg_recall),
            (format!("MHR@{}", self.k), |r| r.mhr, self.avg_mhr),
        ];
        for (name, f, avg) in rows {
            let _ = write!(s, "{name:<10}");
            for r in &self.rounds {
                let _ = write!(s, "{:>8.2}", f(r));
            }
            let _ = writeln!(s, "{avg:>8.2}");
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_dialogue_example() {
        let r = hit_recall_mhr(&[vec![15, 8, 20]], 10).unwrap();
        let col = |f: fn(&RoundMetrics) -> f64| r.rounds.iter().map(f).collect::<Vec<_>>();
        assert_eq!(col(|m| m.hit), vec![0.0, 100.0, 100.0]);
        assert_eq!(col(|m| m.recall), vec![0.0, 100.0, 0.0]);
        assert_eq!(col(|m| m.mhr), vec![0.0, 100.0, 50.0]);
    }

    #[test]
    fn saturation() {
        let r = hit_recall_mhr(&[vec![1; 4], vec![1; 4]], 10).unwrap();
        assert!(r.rounds.iter().all(|m| m.hit == 100.0 && m.recall == 100.0 && m.mhr == 100.0));
        assert_eq!(r.avg_mhr, 100.0);
    }

    #[test]
    fn ragged_dialogues_keep_hit_monotone() {
        let r = hit_recall_mhr(&[vec![3], vec![50, 60, 2]], 10).unwrap();
        assert_eq!(r.rounds[1].count, 1);
        assert_eq!(r.rounds[1].hit, 50.0);
        assert_eq!(r.rounds[1].recall, 0.0);
        assert_eq!(r.rounds[2].hit, 100.0);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(hit_recall_mhr(&[], 10).is_err());
        assert!(hit_recall_mhr(&[vec![0]], 10).is_err());
        assert!(hit_recall_mhr(&[vec![]], 10).is_err());
        assert!(hit_recall_mhr(&[vec![1]], 0).is_err());
    }

    #[test]
    fn table_layout() {
        let r = hit_recall_mhr(&[vec![15, 8, 20]], 10).unwrap();
        let t = r.table();
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].contains("Avg"));
        assert!(lines[3].starts_with("MHR@10"));
        assert!(lines[3].contains("50.00"));
        let back: EvalReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }
}
