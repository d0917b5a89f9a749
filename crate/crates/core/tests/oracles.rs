//! Library routines against brute-force recomputation.

use memir_core::encoders::EmbeddingCorpus;
use memir_core::evaluation::hit_recall_mhr;
use memir_core::numerics::{cosine, rank_all, topk_by_similarity};
use memir_core::recall::select_forgotten;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_corpus(rng: &mut ChaCha8Rng, n: usize, d: usize, dup_every: usize) -> EmbeddingCorpus {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    for i in 0..n {
        // Exact duplicates force ties that only the id order can break.
        if dup_every > 0 && i % dup_every == 1 {
            rows.push(rows[i - 1].clone());
        } else {
            rows.push((0..d).map(|_| rng.random_range(-1.0..1.0)).collect());
        }
    }
    // Ids are shuffled relative to insertion order.
    let mut ids: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        ids.swap(i, rng.random_range(0..=i));
    }
    let recs = rows
        .into_iter()
        .zip(ids)
        .map(|(v, id)| (format!("id{id:05}"), v, None))
        .collect();
    EmbeddingCorpus::new(d, recs).unwrap()
}

fn brute_order(q: &[f64], c: &EmbeddingCorpus) -> Vec<usize> {
    let mut all: Vec<(f64, &str, usize)> = (0..c.len())
        .map(|i| (cosine(q, c.embedding(i)).unwrap(), c.id(i), i))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
    all.into_iter().map(|x| x.2).collect()
}

#[test]
fn topk_is_sorted_prefix_up_to_ten_thousand() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for &(n, d) in &[(1, 3), (7, 4), (100, 8), (2_500, 16), (10_000, 32)] {
        let c = random_corpus(&mut rng, n, d, 5);
        for _ in 0..3 {
            let q: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let want = brute_order(&q, &c);
            for &k in &[1, 10, 100, n, n + 3] {
                let top = topk_by_similarity(&q, &c, k).unwrap();
                let got: Vec<usize> = top.items.iter().map(|s| s.index).collect();
                assert_eq!(got, want[..k.min(n)], "n={n} k={k}");
                assert_eq!(top.short, k > n);
            }
            let all: Vec<usize> = rank_all(&q, &c).unwrap().iter().map(|s| s.index).collect();
            assert_eq!(all, want);
        }
    }
}

proptest! {
    #[test]
    fn topk_matches_brute_force(seed in any::<u64>(), n in 1usize..300, d in 1usize..6, k in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = random_corpus(&mut rng, n, d, 3);
        let q: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let want = brute_order(&q, &c);
        let got: Vec<usize> = topk_by_similarity(&q, &c, k).unwrap().items.iter().map(|s| s.index).collect();
        prop_assert_eq!(&got[..], &want[..k.min(n)]);
    }

    #[test]
    fn select_forgotten_matches_brute_min_n(
        seed in any::<u64>(),
        size in 1usize..=50,
        n in 1usize..6,
        include0 in any::<bool>(),
        quantize in any::<bool>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 4;
        let keys: Vec<Vec<f64>> = (0..size)
            .map(|_| (0..d).map(|_| {
                let x: f64 = rng.random_range(-1.0..1.0);
                // Coarse values make similarity ties common.
                if quantize { x.signum() } else { x }
            }).collect())
            .collect();
        let q: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let t = rng.random_range(0..=size);
        let got = select_forgotten(keys.iter().enumerate().map(|(r, k)| (r, k.as_slice())), &q, t, n, include0).unwrap();

        let first = usize::from(!include0);
        let mut all: Vec<(f64, usize)> = (first..t).map(|r| (cosine(&q, &keys[r]).unwrap(), r)).collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        all.truncate(n);
        let got: Vec<(f64, usize)> = got.iter().map(|s| (s.sim, s.round)).collect();
        prop_assert_eq!(got, all);
    }
}

/// Direct restatement of the metric definitions.
fn brute_metrics(ranks: &[Vec<usize>], k: usize) -> (Vec<f64>, Vec<f64>) {
    let rounds = ranks.iter().map(Vec::len).max().unwrap();
    let mut hit = Vec::new();
    let mut recall = Vec::new();
    for t in 0..rounds {
        let h = ranks
            .iter()
            .filter(|r| r.iter().take(t + 1).any(|&x| x <= k))
            .count();
        let reached: Vec<&Vec<usize>> = ranks.iter().filter(|r| r.len() > t).collect();
        let rc = reached.iter().filter(|r| r[t] <= k).count();
        hit.push(100.0 * h as f64 / ranks.len() as f64);
        recall.push(100.0 * rc as f64 / reached.len() as f64);
    }
    (hit, recall)
}

#[test]
fn metrics_match_brute_force_on_random_dialogues() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..20 {
        let ragged = trial % 2 == 1;
        let ranks: Vec<Vec<usize>> = (0..100)
            .map(|_| {
                let len = if ragged { rng.random_range(1..=11) } else { 11 };
                (0..len).map(|_| rng.random_range(1..=40)).collect()
            })
            .collect();
        for k in [1, 10, 25] {
            let r = hit_recall_mhr(&ranks, k).unwrap();
            let (hit, recall) = brute_metrics(&ranks, k);
            assert_eq!(r.rounds.len(), hit.len());
            for (t, m) in r.rounds.iter().enumerate() {
                assert_eq!(m.hit, hit[t]);
                assert_eq!(m.recall, recall[t]);
                assert_eq!(m.mhr, (hit[t] + recall[t]) / 2.0);
            }
            let n = hit.len() as f64;
            assert_eq!(r.avg_hit, hit.iter().sum::<f64>() / n);
            assert_eq!(r.avg_recall, recall.iter().sum::<f64>() / n);
        }
    }
}
