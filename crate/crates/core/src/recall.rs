//! Historical dialogue repository and recall of weakened rounds.
//!
//! Each completed round stores a `(key, value)` pair: the key is the round's
//! text attended by the round-0 memory and attention-pooled; the value is the
//! round's CLS embedding. From the activation round on, the `n` entries whose
//! keys are least similar to the pooled current memory are recalled with
//! weights `1 − softmax(cos)` and re-injected by cross-attention.

use std::cmp::Ordering;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::MemoryVar;
use crate::numerics::{attention_pool, cosine, softmax, AttentionBlock, Matrix, PoolingParams, Var};
use crate::params::{Graph, ParamGroup, ParamStore};

#[derive(Debug, Clone, PartialEq)]
pub struct RepositoryEntry<T> {
    pub round: usize,
    pub key: T,
    pub value: T,
}

/// Append-only, one entry per completed round, rounds `0, 1, 2, …`.
#[derive(Debug, Clone, PartialEq)]
pub struct Repository<T> {
    entries: Vec<RepositoryEntry<T>>,
}

impl<T> Default for Repository<T> {
    fn default() -> Self {
        Self { entries: Vec::new() }
    }
}

impl<T> Repository<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[RepositoryEntry<T>] {
        &self.entries
    }

    pub fn get(&self, round: usize) -> Option<&RepositoryEntry<T>> {
        self.entries.get(round)
    }

    pub fn store_entry(&mut self, round: usize, key: T, value: T) -> Result<()> {
        if round != self.entries.len() {
            return Err(Error::State(format!(
                "repository expects round {} but got {round}",
                self.entries.len()
            )));
        }
        self.entries.push(RepositoryEntry { round, key, value });
        Ok(())
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Repository<U> {
        Repository {
            entries: self
                .entries
                .iter()
                .map(|e| RepositoryEntry {
                    round: e.round,
                    key: f(&e.key),
                    value: f(&e.value),
                })
                .collect(),
        }
    }
}

impl Repository<Var> {
    pub fn detach(&self, g: &Graph<'_>) -> Repository<Vec<f64>> {
        self.map(|v| g.value(*v).data().to_vec())
    }
}

impl Repository<Vec<f64>> {
    pub fn attach(&self, g: &mut Graph<'_>) -> Repository<Var> {
        self.map(|v| g.constant(Matrix::row_vector(v)))
    }
}

/// How rounds are chosen for recall.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecallMode {
    /// Least-similar `n` keys, inverse-similarity weights.
    Similarity,
    /// All earlier rounds with linearly decaying weights, oldest heaviest.
    Holistic,
    Off,
}

/// What is used as each entry's key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyMode {
    /// Memory-aware pooled key.
    MemoryAware,
    /// The CLS value doubles as key.
    ValueAsKey,
}

/// What is recalled from each selected entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueMode {
    Cls,
    /// Recall the key vector instead of the CLS embedding.
    Key,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallConfig {
    pub mode: RecallMode,
    pub n: usize,
    pub activation_round: usize,
    pub include_round0: bool,
    pub key_mode: KeyMode,
    pub value_mode: ValueMode,
}

impl Default for RecallConfig {
    fn default() -> Self {
        Self {
            mode: RecallMode::Similarity,
            n: 2,
            activation_round: 3,
            include_round0: false,
            key_mode: KeyMode::MemoryAware,
            value_mode: ValueMode::Cls,
        }
    }
}

impl RecallConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("recall count n must be at least 1".into()));
        }
        if self.activation_round == 0 {
            return Err(Error::Config("recall activation round must be at least 1".into()));
        }
        Ok(())
    }

    pub fn is_active(&self, round: usize) -> bool {
        self.mode != RecallMode::Off && round >= self.activation_round
    }
}

/// One recalled round and its key similarity to the current memory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Selected {
    pub round: usize,
    pub sim: f64,
}

/// The `n` eligible rounds with the smallest similarity to `query`, ascending
/// by similarity then round. Eligible rounds are `1..t` (or `0..t`).
pub fn select_forgotten<'a>(
    keys: impl IntoIterator<Item = (usize, &'a [f64])>,
    query: &[f64],
    t: usize,
    n: usize,
    include_round0: bool,
) -> Result<Vec<Selected>> {
    let first = if include_round0 { 0 } else { 1 };
    let mut sims = Vec::new();
    for (round, key) in keys {
        if round >= first && round < t {
            sims.push(Selected {
                round,
                sim: cosine(query, key)?,
            });
        }
    }
    sims.sort_by(|a, b| match a.sim.total_cmp(&b.sim) {
        Ordering::Equal => a.round.cmp(&b.round),
        o => o,
    });
    sims.truncate(n);
    Ok(sims)
}

/// `w_i = 1 − exp(cos_i) / Σ_j exp(cos_j)`.
pub fn recall_weights(sims: &[f64]) -> Result<Vec<f64>> {
    if sims.is_empty() {
        return Err(Error::invalid("recall weights over an empty selection"));
    }
    Ok(softmax(sims)?.into_iter().map(|p| 1.0 - p).collect())
}

/// Weights `(t − i) / Σ_j (t − j)` for rounds `i = 1..t`; empty when `t < 2`.
pub fn holistic_weights(t: usize) -> Vec<f64> {
    if t < 2 {
        return Vec::new();
    }
    let total: f64 = (1..t).map(|j| (t - j) as f64).sum();
    (1..t).map(|i| (t - i) as f64 / total).collect()
}

/// `H_t = Σ u_i · value_i` over rounds `1..t`; `None` when `t < 2`.
pub fn holistic_recall(repo: &Repository<Vec<f64>>, t: usize) -> Option<Vec<f64>> {
    let w = holistic_weights(t);
    if w.is_empty() {
        return None;
    }
    let dim = repo.get(1)?.value.len();
    let mut out = vec![0.0; dim];
    for (wi, round) in w.iter().zip(1..t) {
        let v = &repo.get(round)?.value;
        for (o, x) in out.iter_mut().zip(v) {
            *o += wi * x;
        }
    }
    Some(out)
}

/// Trainable parts of the recall path. Only the parts a configuration
/// actually uses are allocated.
#[derive(Debug, Clone)]
pub struct RecallModule {
    /// Memory-aware key attention and pooling (absent when values double as keys).
    pub key_attn: Option<AttentionBlock>,
    pub key_pool: Option<PoolingParams>,
    /// Current-memory pooling (similarity mode only).
    pub mem_pool: Option<PoolingParams>,
    pub augment_attn: AttentionBlock,
}

/// Result of the recall stage for one round.
#[derive(Debug, Clone)]
pub struct RecallOutcome {
    pub memory: MemoryVar,
    pub active: bool,
    pub selected: Vec<Selected>,
    /// Recall weights aligned with `selected` (or holistic weights).
    pub weights: Vec<f64>,
}

impl RecallModule {
    pub fn new(
        store: &mut ParamStore,
        dim: usize,
        heads: usize,
        cfg: &RecallConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let g = ParamGroup::Head;
        let similarity = cfg.mode == RecallMode::Similarity;
        let keyed = similarity && cfg.key_mode == KeyMode::MemoryAware;
        let (key_attn, key_pool) = if keyed {
            (
                Some(AttentionBlock::new(store, "recall.key_attn", dim, heads, g, rng)?),
                Some(PoolingParams::new(store, "recall.key_pool", dim, g, rng)?),
            )
        } else {
            (None, None)
        };
        let mem_pool = if similarity {
            Some(PoolingParams::new(store, "recall.mem_pool", dim, g, rng)?)
        } else {
            None
        };
        Ok(Self {
            key_attn,
            key_pool,
            mem_pool,
            augment_attn: AttentionBlock::new(store, "recall.augment_attn", dim, heads, g, rng)?,
        })
    }

    /// Key `m_t*`: the round-0 memory attends over the round text, then pools.
    pub fn make_key(&self, g: &mut Graph<'_>, snapshot0: Option<&MemoryVar>, round_text: Var) -> Result<Var> {
        let snap = snapshot0.ok_or_else(|| Error::State("round-0 memory snapshot is missing".into()))?;
        let (Some(attn), Some(pool)) = (&self.key_attn, &self.key_pool) else {
            return Err(Error::State("recall module has no key parameters".into()));
        };
        let m = attn.forward(g, snap.tokens, round_text, round_text)?;
        let (key, _) = attention_pool(g, m, pool)?;
        Ok(key)
    }

    /// Repository key for a round: memory-aware when configured, else the CLS value.
    pub fn entry_key(
        &self,
        g: &mut Graph<'_>,
        snapshot0: Option<&MemoryVar>,
        round_text: Var,
        cls: Var,
    ) -> Result<Var> {
        if self.key_attn.is_some() {
            self.make_key(g, snapshot0, round_text)
        } else {
            Ok(cls)
        }
    }

    /// Pooled current memory `q̃_t*`.
    pub fn pool_memory(&self, g: &mut Graph<'_>, memory: &MemoryVar) -> Result<Var> {
        let pool = self
            .mem_pool
            .as_ref()
            .ok_or_else(|| Error::State("recall module has no memory pooling".into()))?;
        Ok(attention_pool(g, memory.tokens, pool)?.0)
    }

    /// `X-Attn(memory, H, H)` for a `1 × d` recalled row `h`.
    pub fn augment(&self, g: &mut Graph<'_>, memory: &MemoryVar, h: Var) -> Result<MemoryVar> {
        let tokens = self.augment_attn.forward(g, memory.tokens, h, h)?;
        Ok(MemoryVar {
            tokens,
            round: memory.round,
        })
    }

    /// Full recall stage at round `memory.round`; identity when inactive.
    pub fn recall(
        &self,
        g: &mut Graph<'_>,
        cfg: &RecallConfig,
        memory: MemoryVar,
        repo: &Repository<Var>,
    ) -> Result<RecallOutcome> {
        let t = memory.round;
        let bypass = RecallOutcome {
            memory,
            active: false,
            selected: Vec::new(),
            weights: Vec::new(),
        };
        if !cfg.is_active(t) {
            return Ok(bypass);
        }
        let pick = |e: &RepositoryEntry<Var>| match cfg.value_mode {
            ValueMode::Cls => e.value,
            ValueMode::Key => e.key,
        };
        match cfg.mode {
            RecallMode::Off => Ok(bypass),
            RecallMode::Holistic => {
                let w = holistic_weights(t);
                if w.is_empty() {
                    return Ok(bypass);
                }
                let values = (1..t)
                    .map(|r| repo.get(r).map(pick))
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(|| Error::State(format!("repository is missing rounds before {t}")))?;
                let stacked = g.concat_rows(&values)?;
                let wv = g.constant(Matrix::row_vector(&w));
                let h = g.matmul(wv, stacked)?;
                let memory = self.augment(g, &memory, h)?;
                Ok(RecallOutcome {
                    memory,
                    active: true,
                    selected: Vec::new(),
                    weights: w,
                })
            }
            RecallMode::Similarity => {
                let query = self.pool_memory(g, &memory)?;
                let qv = g.value(query).data().to_vec();
                let selected = {
                    let keys: Vec<(usize, &[f64])> = repo
                        .entries()
                        .iter()
                        .map(|e| (e.round, g.value(e.key).data()))
                        .collect();
                    select_forgotten(keys, &qv, t, cfg.n, cfg.include_round0)?
                };
                if selected.is_empty() {
                    return Ok(bypass);
                }
                if selected.len() == 1 {
                    log::debug!("round {t}: single recalled entry has weight 0; recalled row is zero");
                }
                let keys: Vec<Var> = selected.iter().map(|s| repo.entries()[s.round].key).collect();
                let values: Vec<Var> = selected.iter().map(|s| pick(&repo.entries()[s.round])).collect();
                let keys = g.concat_rows(&keys)?;
                let keys = g.normalize_rows(keys);
                let qn = g.normalize_rows(query);
                let sims = g.matmul_t(qn, keys)?;
                let p = g.softmax_rows(sims)?;
                let neg = g.scale(p, -1.0);
                let w = g.add_scalar(neg, 1.0);
                let weights = g.value(w).data().to_vec();
                let values = g.concat_rows(&values)?;
                let h = g.matmul(w, values)?;
                let memory = self.augment(g, &memory, h)?;
                Ok(RecallOutcome {
                    memory,
                    active: true,
                    selected,
                    weights,
                })
            }
        }
    }
}
