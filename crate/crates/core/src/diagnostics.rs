//! Finite-difference gradient suite over every differentiable stage.

use std::time::Instant;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::encoders::{EmbeddingCorpus, TextEncoder};
use crate::error::Result;
use crate::evaluation::{DialogueRecord, RoundText};
use crate::memory::IcfParams;
use crate::model::{GraphDialogue, Model, ModelConfig};
use crate::numerics::{
    attention_pool, finite_diff_check, AttentionBlock, FnObjective, GradCheckOptions, GradCheckReport, Linear,
    Matrix, PoolingParams, Stencil, Var,
};
use crate::params::{init_normal, Graph, ParamGroup, ParamStore};
use crate::training::{batch_loss, contrastive_loss};
use crate::visual::{build_visual_history, RefineModule};

pub const CASES: &[&str] = &[
    "cross_attention",
    "attention_pool",
    "linear",
    "text_encoder",
    "icf_fusion",
    "recall_path",
    "refine_path",
    "contrastive_loss",
    "full_pipeline",
];

#[derive(Debug, Clone)]
pub struct SuiteConfig {
    pub dim: usize,
    pub memory_tokens: usize,
    pub history_k: usize,
    pub batch: usize,
    pub seeds: usize,
    pub tol: f64,
    pub eps: f64,
    /// Entries sampled per tensor for the two whole-model cases.
    pub sampled_entries: usize,
    /// Steps and formula for the whole-model cases. The recall path needs a
    /// wide step; the batch loss cannot take one without moving the top-k
    /// history across a boundary.
    pub recall_eps: f64,
    pub pipeline_eps: f64,
    pub model_stencil: Stencil,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            memory_tokens: 4,
            history_k: 3,
            batch: 4,
            seeds: 20,
            tol: 1e-4,
            eps: 1e-5,
            sampled_entries: 8,
            recall_eps: 1e-3,
            pipeline_eps: 3e-4,
            model_stencil: Stencil::FivePoint,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CaseSummary {
    pub name: String,
    pub seeds: usize,
    pub max_rel_error: f64,
    pub entries_checked: usize,
    pub passed: bool,
    pub seconds: f64,
}

const WORDS: &[&str] = &[
    "red", "dog", "beach", "small", "two", "running", "white", "car", "street", "night", "big", "cat",
];

fn sentence(rng: &mut ChaCha8Rng, n: usize) -> String {
    (0..n).map(|_| *WORDS.choose(rng).expect("nonempty")).collect::<Vec<_>>().join(" ")
}

fn random_corpus(rng: &mut ChaCha8Rng, n: usize, d: usize) -> EmbeddingCorpus {
    let recs = (0..n)
        .map(|i| (format!("c{i:02}"), init_normal(rng, 1, d, 1.0).into_data(), None))
        .collect();
    EmbeddingCorpus::new(d, recs).expect("valid corpus")
}

fn weighted_sum(m: &Matrix, r: &Matrix) -> f64 {
    m.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

/// Checks `Σ forward(θ) ⊙ R` for a fixed random `R`.
fn check_forward(
    store: &ParamStore,
    seed: u64,
    opts: &GradCheckOptions,
    forward: impl Fn(&mut Graph<'_>) -> Result<Var>,
) -> Result<GradCheckReport> {
    let shape = {
        let mut g = Graph::inference(store);
        let o = forward(&mut g)?;
        g.shape(o)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let r = init_normal(&mut rng, shape.0, shape.1, 1.0);
    let obj = FnObjective {
        loss: |p: &ParamStore| {
            let mut g = Graph::inference(p);
            let o = forward(&mut g)?;
            Ok(weighted_sum(g.value(o), &r))
        },
        grad: |p: &ParamStore| {
            let mut g = Graph::new(p);
            let o = forward(&mut g)?;
            let v = weighted_sum(g.value(o), &r);
            let (grads, _) = g.backward(&[(o, r.clone())])?;
            Ok((v, grads))
        },
    };
    finite_diff_check(&obj, store, opts)
}

fn input(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, rows: usize, cols: usize) -> Result<crate::params::ParamId> {
    store.register(name, ParamGroup::Head, init_normal(rng, rows, cols, 1.0))
}

fn small_model(cfg: &SuiteConfig, seed: u64) -> Result<Model> {
    Model::new(
        ModelConfig {
            vocab_size: 32,
            max_seq: 8,
            text_dim: cfg.dim,
            image_dim: cfg.dim,
            memory_tokens: cfg.memory_tokens,
            history_k: cfg.history_k,
            ..ModelConfig::desk()
        },
        seed,
    )
}

fn random_dialogue(rng: &mut ChaCha8Rng, target: &str, rounds: usize) -> DialogueRecord {
    DialogueRecord {
        target_id: target.to_string(),
        caption: sentence(rng, 4),
        rounds: (0..rounds)
            .map(|_| RoundText {
                q: sentence(rng, 2),
                a: sentence(rng, 2),
            })
            .collect(),
    }
}

/// One case at one seed.
pub fn check_case(name: &str, seed: u64, cfg: &SuiteConfig) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.dim;
    let full = GradCheckOptions {
        eps: cfg.eps,
        stencil: Stencil::Central,
        tol: cfg.tol,
        max_entries_per_tensor: None,
        sample_seed: seed,
    };
    let sampled = GradCheckOptions {
        max_entries_per_tensor: Some(cfg.sampled_entries),
        eps: cfg.recall_eps,
        stencil: cfg.model_stencil,
        ..full.clone()
    };
    let mut s = ParamStore::new();
    match name {
        "cross_attention" => {
            let heads = if seed % 2 == 0 { 1 } else { 2 };
            let block = AttentionBlock::new(&mut s, "attn", d, heads, ParamGroup::Head, &mut rng)?;
            let q = input(&mut s, &mut rng, "q", 4, d)?;
            let k = input(&mut s, &mut rng, "k", 3, d)?;
            let v = input(&mut s, &mut rng, "v", 3, d)?;
            check_forward(&s, seed, &full, |g| {
                let (q, k, v) = (g.param(q), g.param(k), g.param(v));
                block.forward(g, q, k, v)
            })
        }
        "attention_pool" => {
            let pool = PoolingParams::new(&mut s, "pool", d, ParamGroup::Head, &mut rng)?;
            *s.get_mut(pool.w) = init_normal(&mut rng, d, 1, 0.5);
            let x = input(&mut s, &mut rng, "x", 5, d)?;
            check_forward(&s, seed, &full, |g| {
                let x = g.param(x);
                Ok(attention_pool(g, x, &pool)?.0)
            })
        }
        "linear" => {
            let lin = Linear::new(&mut s, "fc", d, d / 2, ParamGroup::Head, &mut rng)?;
            *s.get_mut(lin.bias) = init_normal(&mut rng, 1, d / 2, 1.0);
            let x = input(&mut s, &mut rng, "x", 4, d)?;
            check_forward(&s, seed, &full, |g| {
                let x = g.param(x);
                lin.forward(g, x)
            })
        }
        "text_encoder" => {
            let enc = TextEncoder::new(&mut s, 32, 8, d, 1, &mut rng)?;
            let text = sentence(&mut rng, 5);
            check_forward(&s, seed, &full, |g| {
                let e = enc.encode(g, &text)?;
                g.concat_rows(&[e.words, e.cls])
            })
        }
        "icf_fusion" => {
            let icf = IcfParams::new(&mut s, d, &mut rng)?;
            let prev = input(&mut s, &mut rng, "prev", 1, d)?;
            let cur = input(&mut s, &mut rng, "cur", 1, d)?;
            check_forward(&s, seed, &full, |g| {
                let (p, c) = (g.param(prev), g.param(cur));
                icf.fuse_icf(g, p, c)
            })
        }
        "recall_path" => {
            let model = small_model(cfg, seed)?;
            let corpus = random_corpus(&mut rng, 12, d);
            let dlg = random_dialogue(&mut rng, "c00", 4);
            check_forward(&model.params, seed, &sampled, |g| {
                let mut st = GraphDialogue::default();
                let mut hist = None;
                let mut last = None;
                for t in 0..dlg.len() {
                    let vars = model.step(g, &mut st, &dlg.text(t).expect("round"), hist.as_ref())?;
                    let q = g.value(vars.query).data().to_vec();
                    hist = Some(build_visual_history(&q, &corpus, cfg.history_k, t)?);
                    last = Some(vars.recall_active);
                }
                debug_assert_eq!(last, Some(true));
                Ok(st.memory.expect("memory after rounds").tokens)
            })
        }
        "refine_path" => {
            let refine = RefineModule::new(&mut s, d, d, 1, true, true, &mut rng)?;
            let mem = input(&mut s, &mut rng, "memory", cfg.memory_tokens, d)?;
            let corpus = random_corpus(&mut rng, 12, d);
            let probe = init_normal(&mut rng, 1, d, 1.0).into_data();
            let hist = build_visual_history(&probe, &corpus, cfg.history_k, 0)?;
            check_forward(&s, seed, &full, |g| {
                let m = crate::memory::MemoryVar {
                    tokens: g.param(mem),
                    round: 1,
                };
                let refined = refine.refine_query(g, &m, Some(&hist))?;
                refine.finalize_query(g, refined)
            })
        }
        "contrastive_loss" => {
            let q = input(&mut s, &mut rng, "q", cfg.batch, d)?;
            let v = input(&mut s, &mut rng, "v", cfg.batch, d)?;
            let tau = 0.05 + 0.95 * (seed % 7) as f64 / 6.0;
            let lt = s.register("log_tau", ParamGroup::Head, Matrix::filled(1, 1, tau.ln()))?;
            check_forward(&s, seed, &full, |g| {
                let (q, v, lt) = (g.param(q), g.param(v), g.param(lt));
                contrastive_loss(g, q, v, lt)
            })
        }
        "full_pipeline" => {
            let model = small_model(cfg, seed)?;
            // Moderate temperature keeps the logits well scaled for differencing.
            let mut params = model.params.clone();
            *params.get_mut(model.arch.log_tau) = Matrix::filled(1, 1, 0.5f64.ln());
            let corpus = random_corpus(&mut rng, 12, d);
            let dialogues: Vec<DialogueRecord> = (0..cfg.batch)
                .map(|i| random_dialogue(&mut rng, corpus.id(i), 4))
                .collect();
            let batch: Vec<&DialogueRecord> = dialogues.iter().collect();
            let obj = FnObjective {
                loss: |p: &ParamStore| Ok(batch_loss(&model, p, &corpus, &batch, None, false, false)?.loss),
                grad: |p: &ParamStore| {
                    let out = batch_loss(&model, p, &corpus, &batch, None, false, true)?;
                    Ok((out.loss, out.grads.expect("trainable")))
                },
            };
            let opts = GradCheckOptions {
                eps: cfg.pipeline_eps,
                ..sampled
            };
            finite_diff_check(&obj, &params, &opts)
        }
        other => Err(crate::Error::invalid(format!("unknown gradient case {other}"))),
    }
}

/// Every case over `cfg.seeds` seeds.
pub fn gradient_suite(cfg: &SuiteConfig) -> Result<Vec<CaseSummary>> {
    CASES
        .iter()
        .map(|name| {
            let start = Instant::now();
            let mut worst = 0.0f64;
            let mut entries = 0;
            let mut passed = true;
            for seed in 0..cfg.seeds as u64 {
                let r = check_case(name, seed, cfg)?;
                worst = worst.max(r.max_rel_error);
                entries += r.tensors.iter().map(|t| t.checked).sum::<usize>();
                passed &= r.passed;
            }
            Ok(CaseSummary {
                name: name.to_string(),
                seeds: cfg.seeds,
                max_rel_error: worst,
                entries_checked: entries,
                passed,
                seconds: start.elapsed().as_secs_f64(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_passes_on_one_seed() {
        let cfg = SuiteConfig {
            seeds: 1,
            ..Default::default()
        };
        for name in CASES {
            let r = check_case(name, 3, &cfg).unwrap();
            assert!(r.passed, "{name}: {}", r.max_rel_error);
        }
        assert!(check_case("nope", 0, &cfg).is_err());
    }
}
