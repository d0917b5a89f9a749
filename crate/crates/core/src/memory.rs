//! Progressive memorization: a fixed set of memory tokens updated by
//! cross-attention with each round's text, plus the global-vector fusion
//! baselines used for ablation.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cosine, softmax, AttentionBlock, Linear, Matrix, Var};
use crate::params::{init_normal, Graph, ParamGroup, ParamId, ParamStore};

/// Memory tokens after a round, detached from any tape.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryState {
    pub tokens: Matrix,
    pub round: usize,
}

/// Memory tokens living on a graph.
#[derive(Debug, Clone, Copy)]
pub struct MemoryVar {
    pub tokens: Var,
    pub round: usize,
}

impl MemoryVar {
    pub fn detach(&self, g: &Graph<'_>) -> MemoryState {
        MemoryState {
            tokens: g.value(self.tokens).clone(),
            round: self.round,
        }
    }
}

impl MemoryState {
    pub fn attach(&self, g: &mut Graph<'_>) -> MemoryVar {
        MemoryVar {
            tokens: g.constant(self.tokens.clone()),
            round: self.round,
        }
    }
}

/// Learnable memory seeds `E` and the single cross-attention block shared by
/// every round.
#[derive(Debug, Clone)]
pub struct MemoryModule {
    pub seeds: ParamId,
    pub attn: AttentionBlock,
    pub tokens: usize,
}

impl MemoryModule {
    pub fn new(
        store: &mut ParamStore,
        tokens: usize,
        dim: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if tokens == 0 {
            return Err(Error::Config("memory needs at least one token".into()));
        }
        let seeds = store.register("memory.seeds", ParamGroup::Head, init_normal(rng, tokens, dim, 1.0))?;
        let attn = AttentionBlock::new(store, "memory.attn", dim, heads, ParamGroup::Head, rng)?;
        Ok(Self { seeds, attn, tokens })
    }

    /// Memory state for round 0: the seeds attend over the caption's word features.
    pub fn init_memory(&self, g: &mut Graph<'_>, caption: Var) -> Result<MemoryVar> {
        if g.shape(caption).0 == 0 {
            return Err(Error::invalid("initial query has no rows"));
        }
        let seeds = g.param(self.seeds);
        let tokens = self.attn.forward(g, seeds, caption, caption)?;
        Ok(MemoryVar { tokens, round: 0 })
    }

    /// Next state from the previous (post-recall) state and the current round's
    /// word features only.
    pub fn update_memory(&self, g: &mut Graph<'_>, prev: &MemoryVar, round_text: Var) -> Result<MemoryVar> {
        if g.shape(round_text).0 == 0 {
            return Err(Error::invalid("round text has no rows"));
        }
        let tokens = self.attn.forward(g, prev.tokens, round_text, round_text)?;
        Ok(MemoryVar {
            tokens,
            round: prev.round + 1,
        })
    }
}

/// Dialogue-fusion strategy used in place of memory tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Fusion {
    /// Memory tokens (the default path).
    Memory,
    /// Similarity-weighted aggregation of independently encoded rounds.
    SimAgg,
    /// `λ·prev + (1−λ)·cur`.
    Iws { lambda: f64 },
    /// MLP over `[prev, cur]`.
    Icf,
}

pub fn fuse_iws(prev: &[f64], cur: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("IWS weight {lambda} outside [0, 1]")));
    }
    if prev.len() != cur.len() {
        return Err(Error::invalid("IWS inputs differ in length"));
    }
    Ok(prev
        .iter()
        .zip(cur)
        .map(|(p, c)| lambda * p + (1.0 - lambda) * c)
        .collect())
}

pub fn fuse_iws_graph(g: &mut Graph<'_>, prev: Var, cur: Var, lambda: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("IWS weight {lambda} outside [0, 1]")));
    }
    if lambda == 1.0 {
        return Ok(prev);
    }
    if lambda == 0.0 {
        return Ok(cur);
    }
    let p = g.scale(prev, lambda);
    let c = g.scale(cur, 1.0 - lambda);
    g.add(p, c)
}

/// Weights `softmax_i(cos(v_i, v_0))`, output `Σ w_i v_i`.
pub fn fuse_simagg(rounds: &[Vec<f64>]) -> Result<Vec<f64>> {
    let anchor = rounds
        .first()
        .ok_or_else(|| Error::invalid("similarity aggregation over no rounds"))?;
    let sims = rounds
        .iter()
        .map(|r| cosine(r, anchor))
        .collect::<Result<Vec<_>>>()?;
    let w = softmax(&sims)?;
    let mut out = vec![0.0; anchor.len()];
    for (wi, r) in w.iter().zip(rounds) {
        for (o, v) in out.iter_mut().zip(r) {
            *o += wi * v;
        }
    }
    Ok(out)
}

pub fn fuse_simagg_graph(g: &mut Graph<'_>, rounds: &[Var]) -> Result<Var> {
    if rounds.is_empty() {
        return Err(Error::invalid("similarity aggregation over no rounds"));
    }
    let stacked = g.concat_rows(rounds)?;
    let unit = g.normalize_rows(stacked);
    let anchor = g.slice_rows(unit, 0, 1)?;
    let sims = g.matmul_t(anchor, unit)?;
    let w = g.softmax_rows(sims)?;
    g.matmul(w, stacked)
}

/// Two-layer projection over concatenated previous and current globals.
#[derive(Debug, Clone)]
pub struct IcfParams {
    pub hidden: Linear,
    pub out: Linear,
    pub dim: usize,
}

impl IcfParams {
    pub fn new(store: &mut ParamStore, dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            hidden: Linear::new(store, "icf.hidden", 2 * dim, dim, ParamGroup::Head, rng)?,
            out: Linear::new(store, "icf.out", dim, dim, ParamGroup::Head, rng)?,
            dim,
        })
    }

    pub fn param_ids(&self) -> [ParamId; 4] {
        [self.hidden.weight, self.hidden.bias, self.out.weight, self.out.bias]
    }

    pub fn fuse_icf(&self, g: &mut Graph<'_>, prev: Var, cur: Var) -> Result<Var> {
        if g.shape(prev) != (1, self.dim) || g.shape(cur) != (1, self.dim) {
            return Err(Error::invalid(format!(
                "ICF expects two 1x{} rows, got {:?} and {:?}",
                self.dim,
                g.shape(prev),
                g.shape(cur)
            )));
        }
        let cat = g.concat_cols(&[prev, cur])?;
        let h = self.hidden.forward(g, cat)?;
        let h = g.tanh(h);
        self.out.forward(g, h)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    fn module(l: usize, d: usize) -> (ParamStore, MemoryModule) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut s = ParamStore::new();
        let m = MemoryModule::new(&mut s, l, d, 1, &mut rng).unwrap();
        (s, m)
    }

    #[test]
    fn init_shape_and_singleton_attention() {
        let (s, m) = module(6, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::inference(&s);
        let q0 = g.constant(init_normal(&mut rng, 1, 8, 1.0));
        let seeds = g.param(m.seeds);
        let out = m.attn.forward_with_weights(&mut g, seeds, q0, q0).unwrap();
        assert!(g.value(out.weights[0]).data().iter().all(|&w| w == 1.0));
        for n in [1, 3, 17] {
            let q0 = g.constant(init_normal(&mut rng, n, 8, 1.0));
            let st = m.init_memory(&mut g, q0).unwrap();
            assert_eq!(g.shape(st.tokens), (6, 8));
            assert_eq!(st.round, 0);
        }
        let empty = g.constant(Matrix::zeros(0, 8));
        assert!(m.init_memory(&mut g, empty).is_err());
    }

    #[test]
    fn different_queries_give_different_states() {
        let (s, m) = module(4, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::inference(&s);
        let a = g.constant(init_normal(&mut rng, 3, 8, 1.0));
        let b = g.constant(init_normal(&mut rng, 3, 8, 1.0));
        let sa = m.init_memory(&mut g, a).unwrap();
        let sb = m.init_memory(&mut g, b).unwrap();
        assert!(g.value(sa.tokens).max_abs_diff(g.value(sb.tokens)) > 1e-6);
    }

    #[test]
    fn ten_updates_keep_size_constant() {
        let (s, m) = module(5, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::inference(&s);
        let q0 = g.constant(init_normal(&mut rng, 4, 8, 1.0));
        let mut st = m.init_memory(&mut g, q0).unwrap();
        for t in 1..=10 {
            let before = g.value(st.tokens).clone();
            let qt = g.constant(init_normal(&mut rng, t, 8, 1.0));
            let next = m.update_memory(&mut g, &st, qt).unwrap();
            assert_eq!(g.value(st.tokens), &before);
            st = next;
            assert_eq!(g.shape(st.tokens), (5, 8));
        }
        assert_eq!(st.round, 10);
    }

    #[test]
    fn iws_examples() {
        assert_eq!(fuse_iws(&[2.0, 0.0], &[0.0, 2.0], 0.5).unwrap(), vec![1.0, 1.0]);
        assert_eq!(fuse_iws(&[2.0, 3.0], &[5.0, 7.0], 1.0).unwrap(), vec![2.0, 3.0]);
        assert_eq!(fuse_iws(&[2.0, 3.0], &[5.0, 7.0], 0.0).unwrap(), vec![5.0, 7.0]);
        assert!(fuse_iws(&[1.0], &[1.0], 1.5).is_err());
        assert!(fuse_iws(&[1.0], &[1.0], -0.1).is_err());
    }

    #[test]
    fn simagg_examples() {
        assert_eq!(fuse_simagg(&[vec![1.0, 2.0]]).unwrap(), vec![1.0, 2.0]);
        let same = vec![vec![0.5, -1.0]; 4];
        let out = fuse_simagg(&same).unwrap();
        assert!((out[0] - 0.5).abs() < 1e-15 && (out[1] + 1.0).abs() < 1e-15);
        let out = fuse_simagg(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let e = std::f64::consts::E;
        assert!((out[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((out[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
        assert!((out[0] - 0.731).abs() < 5e-4 && (out[1] - 0.269).abs() < 5e-4);
        assert!(fuse_simagg(&[]).is_err());
    }

    #[test]
    fn simagg_graph_matches_value_version() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = ParamStore::new();
        let mut g = Graph::inference(&s);
        let rows: Vec<Matrix> = (0..4).map(|_| init_normal(&mut rng, 1, 6, 1.0)).collect();
        let vars: Vec<Var> = rows.iter().map(|r| g.constant(r.clone())).collect();
        let out = fuse_simagg_graph(&mut g, &vars).unwrap();
        let plain = fuse_simagg(&rows.iter().map(|r| r.data().to_vec()).collect::<Vec<_>>()).unwrap();
        for (a, b) in g.value(out).data().iter().zip(&plain) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn icf_zero_weights_give_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s = ParamStore::new();
        let icf = IcfParams::new(&mut s, 4, &mut rng).unwrap();
        for id in icf.param_ids() {
            let (r, c) = s.get(id).shape();
            *s.get_mut(id) = Matrix::zeros(r, c);
        }
        let mut g = Graph::inference(&s);
        let a = g.constant(init_normal(&mut rng, 1, 4, 1.0));
        let b = g.constant(init_normal(&mut rng, 1, 4, 1.0));
        let out = icf.fuse_icf(&mut g, a, b).unwrap();
        assert_eq!(g.shape(out), (1, 4));
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
        let bad = g.constant(Matrix::zeros(1, 3));
        assert!(icf.fuse_icf(&mut g, a, bad).is_err());
    }
}
