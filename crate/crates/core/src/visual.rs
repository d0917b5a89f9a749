//! Query refinement with the previous round's retrieved images, final query
//! pooling/projection, and corpus ranking.

use rand_chacha::ChaCha8Rng;

use crate::encoders::EmbeddingCorpus;
use crate::error::{Error, Result};
use crate::memory::MemoryVar;
use crate::numerics::{attention_pool, rank_all, topk_by_similarity, AttentionBlock, Linear, Matrix, PoolingParams, Scored, Var};
use crate::params::{Graph, ParamGroup, ParamStore};

/// Top-k embeddings retrieved by round `round`'s final query.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualHistory {
    pub round: usize,
    pub embeddings: Matrix,
    pub ids: Vec<String>,
    pub scores: Vec<f64>,
    pub short: bool,
}

impl VisualHistory {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Retrieves the top `k` images for the final query `q_prev` of round `round`.
pub fn build_visual_history(
    q_prev: &[f64],
    corpus: &EmbeddingCorpus,
    k: usize,
    round: usize,
) -> Result<VisualHistory> {
    let top = topk_by_similarity(q_prev, corpus, k)?;
    let indices: Vec<usize> = top.items.iter().map(|s| s.index).collect();
    Ok(VisualHistory {
        round,
        embeddings: corpus.gather(&indices),
        ids: indices.iter().map(|&i| corpus.id(i).to_string()).collect(),
        scores: top.items.iter().map(|s| s.score).collect(),
        short: top.short,
    })
}

/// Visual-history fusion plus the final pooling and projection. The fusion
/// parts are absent when query refinement is disabled; the pooling is absent
/// for global-vector fusion baselines, which have nothing to pool.
#[derive(Debug, Clone)]
pub struct RefineModule {
    pub fc: Option<Linear>,
    pub fuse_attn: Option<AttentionBlock>,
    pub final_pool: Option<PoolingParams>,
    pub out_proj: Linear,
}

impl RefineModule {
    pub fn new(
        store: &mut ParamStore,
        image_dim: usize,
        dim: usize,
        heads: usize,
        with_refine: bool,
        with_pool: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let g = ParamGroup::Head;
        let (fc, fuse_attn) = if with_refine {
            (
                Some(Linear::new(store, "refine.fc", image_dim, dim, g, rng)?),
                Some(AttentionBlock::new(store, "refine.fuse_attn", dim, heads, g, rng)?),
            )
        } else {
            (None, None)
        };
        let final_pool = if with_pool {
            Some(PoolingParams::new(store, "refine.final_pool", dim, g, rng)?)
        } else {
            None
        };
        Ok(Self {
            fc,
            fuse_attn,
            final_pool,
            out_proj: Linear::new(store, "refine.out_proj", dim, image_dim, g, rng)?,
        })
    }

    /// Memory tokens attend over the projected visual history. With no history
    /// (or refinement disabled) the memory tokens pass through unchanged.
    pub fn refine_query(
        &self,
        g: &mut Graph<'_>,
        memory: &MemoryVar,
        history: Option<&VisualHistory>,
    ) -> Result<Var> {
        let (Some(fc), Some(attn)) = (&self.fc, &self.fuse_attn) else {
            return Ok(memory.tokens);
        };
        let Some(hist) = history.filter(|h| !h.is_empty()) else {
            return Ok(memory.tokens);
        };
        if hist.round + 1 != memory.round {
            return Err(Error::State(format!(
                "visual history from round {} cannot refine round {}",
                hist.round, memory.round
            )));
        }
        let v = g.constant(hist.embeddings.clone());
        let projected = fc.forward(g, v)?;
        attn.forward(g, memory.tokens, projected, projected)
    }

    /// Pools the refined tokens and projects to the image dimension: `1 × d`.
    pub fn finalize_query(&self, g: &mut Graph<'_>, refined: Var) -> Result<Var> {
        let pooled = match &self.final_pool {
            Some(pool) => attention_pool(g, refined, pool)?.0,
            None if g.shape(refined).0 == 1 => refined,
            None => return Err(Error::State("no final pooling for a multi-row query".into())),
        };
        self.out_proj.forward(g, pooled)
    }
}

/// Full corpus ranking with the 1-based rank of an optional target.
#[derive(Debug, Clone, PartialEq)]
pub struct Ranking {
    pub order: Vec<Scored>,
    pub target_rank: Option<usize>,
}

pub fn rank_corpus(q: &[f64], corpus: &EmbeddingCorpus, target: Option<&str>) -> Result<Ranking> {
    let target_idx = match target {
        Some(id) => Some(corpus.position(id).ok_or_else(|| Error::Lookup(id.to_string()))?),
        None => None,
    };
    let order = rank_all(q, corpus)?;
    let target_rank = target_idx.map(|t| {
        order
            .iter()
            .position(|s| s.index == t)
            .expect("ranking is a permutation")
            + 1
    });
    Ok(Ranking { order, target_rank })
}

/// 1-based rank of `target` without materializing the permutation.
pub fn target_rank(q: &[f64], corpus: &EmbeddingCorpus, target: usize) -> Result<usize> {
    let ranking = rank_all(q, corpus)?;
    Ok(ranking.iter().position(|s| s.index == target).expect("permutation") + 1)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::params::init_normal;

    fn abc() -> EmbeddingCorpus {
        EmbeddingCorpus::new(
            2,
            vec![
                ("a".into(), vec![1.0, 0.0], None),
                ("b".into(), vec![0.0, 1.0], None),
                ("c".into(), vec![-1.0, 0.0], None),
            ],
        )
        .unwrap()
    }

    #[test]
    fn history_examples() {
        let c = abc();
        let h = build_visual_history(&[1.0, 0.0], &c, 1, 0).unwrap();
        assert_eq!(h.ids, vec!["a"]);
        assert_eq!(h.embeddings.shape(), (1, 2));
        let h = build_visual_history(&[1.0, 0.0], &c, 10, 0).unwrap();
        assert!(h.short);
        assert_eq!(h.len(), 3);
        let empty = EmbeddingCorpus::new(2, vec![]).unwrap();
        assert!(build_visual_history(&[1.0, 0.0], &empty, 1, 0).is_err());
    }

    #[test]
    fn rank_examples() {
        let one = EmbeddingCorpus::new(2, vec![("x".into(), vec![0.3, 0.1], None)]).unwrap();
        assert_eq!(rank_corpus(&[1.0, 0.0], &one, Some("x")).unwrap().target_rank, Some(1));
        let c = abc();
        assert_eq!(rank_corpus(&[0.0, 2.0], &c, Some("b")).unwrap().target_rank, Some(1));
        assert!(matches!(rank_corpus(&[0.0, 2.0], &c, Some("zz")), Err(Error::Lookup(_))));
        assert_eq!(target_rank(&[0.0, 2.0], &c, 1).unwrap(), 1);
    }

    fn module() -> (ParamStore, RefineModule) {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut s = ParamStore::new();
        let m = RefineModule::new(&mut s, 6, 8, 1, true, true, &mut rng).unwrap();
        (s, m)
    }

    #[test]
    fn refine_bypass_and_singleton() {
        let (s, m) = module();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::inference(&s);
        let mem = MemoryVar {
            tokens: g.constant(init_normal(&mut rng, 4, 8, 1.0)),
            round: 0,
        };
        assert_eq!(m.refine_query(&mut g, &mem, None).unwrap(), mem.tokens);

        let hist = VisualHistory {
            round: 0,
            embeddings: init_normal(&mut rng, 1, 6, 1.0),
            ids: vec!["a".into()],
            scores: vec![1.0],
            short: false,
        };
        let mem1 = MemoryVar { round: 1, ..mem };
        let v = g.constant(hist.embeddings.clone());
        let p = m.fc.as_ref().unwrap().forward(&mut g, v).unwrap();
        let out = m.fuse_attn.as_ref().unwrap().forward_with_weights(&mut g, mem1.tokens, p, p).unwrap();
        assert!(g.value(out.weights[0]).data().iter().all(|&w| w == 1.0));
        let refined = m.refine_query(&mut g, &mem1, Some(&hist)).unwrap();
        assert_eq!(g.value(refined), g.value(out.out));
        // History must come from the immediately preceding round.
        let mem3 = MemoryVar { round: 3, ..mem };
        assert!(matches!(m.refine_query(&mut g, &mem3, Some(&hist)), Err(Error::State(_))));
    }

    #[test]
    fn finalize_shape_and_zero_projection() {
        let (mut s, m) = module();
        let (r, c) = s.get(m.out_proj.weight).shape();
        *s.get_mut(m.out_proj.weight) = Matrix::zeros(r, c);
        *s.get_mut(m.out_proj.bias) = Matrix::row_vector(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::inference(&s);
        for l in [1, 4, 9] {
            let x = g.constant(init_normal(&mut rng, l, 8, 1.0));
            let q = m.finalize_query(&mut g, x).unwrap();
            assert_eq!(g.value(q).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        }
    }
}
