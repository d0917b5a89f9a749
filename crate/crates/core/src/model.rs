//! The per-round retrieval pipeline: encode, memorize, recall, refine, finalize.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{EmbeddingCorpus, TextEncoder};
use crate::error::{Error, Result};
use crate::memory::{fuse_iws_graph, fuse_simagg_graph, Fusion, IcfParams, MemoryModule, MemoryState, MemoryVar};
use crate::numerics::{Matrix, Var};
use crate::params::{Graph, ParamGroup, ParamId, ParamStore};
use crate::recall::{RecallConfig, RecallMode, RecallModule, Repository, Selected};
use crate::visual::{build_visual_history, RefineModule, VisualHistory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_seq: usize,
    /// Text feature width `d_q`.
    pub text_dim: usize,
    /// Image embedding width `d`.
    pub image_dim: usize,
    pub heads: usize,
    /// Number of memory tokens `l`.
    pub memory_tokens: usize,
    /// Visual history size `k`.
    pub history_k: usize,
    pub recall: RecallConfig,
    /// Query refinement with the previous round's results.
    pub refine: bool,
    pub fusion: Fusion,
    pub init_temperature: f64,
}

impl ModelConfig {
    /// Full-size hyperparameters.
    pub fn full() -> Self {
        Self {
            vocab_size: 30522,
            max_seq: 512,
            text_dim: 768,
            image_dim: 256,
            heads: 12,
            memory_tokens: 36,
            history_k: 100,
            recall: RecallConfig::default(),
            refine: true,
            fusion: Fusion::Memory,
            init_temperature: 0.07,
        }
    }

    /// Small configuration that trains in minutes on a CPU.
    pub fn desk() -> Self {
        Self {
            vocab_size: 1024,
            max_seq: 64,
            text_dim: 32,
            image_dim: 32,
            heads: 1,
            memory_tokens: 8,
            history_k: 10,
            recall: RecallConfig::default(),
            refine: true,
            fusion: Fusion::Memory,
            init_temperature: 0.07,
        }
    }

    /// Memorization only: recall and refinement disabled.
    pub fn pdsm_only(mut self) -> Self {
        self.recall.mode = RecallMode::Off;
        self.refine = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.text_dim == 0 || self.image_dim == 0 {
            return Err(Error::Config("feature dimensions must be positive".into()));
        }
        if self.heads == 0 || self.text_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "text_dim {} is not divisible by {} heads",
                self.text_dim, self.heads
            )));
        }
        if self.history_k == 0 {
            return Err(Error::Config("history_k must be at least 1".into()));
        }
        if !(self.init_temperature > 0.0 && self.init_temperature.is_finite()) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if let Fusion::Iws { lambda } = self.fusion {
            if !(0.0..=1.0).contains(&lambda) {
                return Err(Error::Config(format!("IWS weight {lambda} outside [0, 1]")));
            }
        }
        self.recall.validate()
    }

    fn uses_memory(&self) -> bool {
        self.fusion == Fusion::Memory
    }

    fn uses_recall(&self) -> bool {
        self.uses_memory() && self.recall.mode != RecallMode::Off
    }
}

/// Module layout: which parameters exist and how they are named.
#[derive(Debug, Clone)]
pub struct Architecture {
    pub text: TextEncoder,
    pub memory: Option<MemoryModule>,
    pub recall: Option<RecallModule>,
    pub icf: Option<IcfParams>,
    pub refine: RefineModule,
    pub log_tau: ParamId,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub arch: Architecture,
    pub params: ParamStore,
}

impl Model {
    /// Fresh model initialized from `seed`, rounded to checkpoint precision.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (dq, d, h) = (config.text_dim, config.image_dim, config.heads);
        let text = TextEncoder::new(&mut store, config.vocab_size, config.max_seq, dq, h, &mut rng)?;
        let memory = if config.uses_memory() {
            Some(MemoryModule::new(&mut store, config.memory_tokens, dq, h, &mut rng)?)
        } else {
            None
        };
        let recall = if config.uses_recall() {
            Some(RecallModule::new(&mut store, dq, h, &config.recall, &mut rng)?)
        } else {
            None
        };
        let icf = if config.fusion == Fusion::Icf {
            Some(IcfParams::new(&mut store, dq, &mut rng)?)
        } else {
            None
        };
        let refine = RefineModule::new(&mut store, d, dq, h, config.refine, config.uses_memory(), &mut rng)?;
        let log_tau = store.register(
            "temperature.log_tau",
            ParamGroup::Head,
            Matrix::filled(1, 1, config.init_temperature.ln()),
        )?;
        store.quantize_f32();
        Ok(Self {
            config,
            arch: Architecture {
                text,
                memory,
                recall,
                icf,
                refine,
                log_tau,
            },
            params: store,
        })
    }

    pub fn temperature(&self) -> f64 {
        self.params.get(self.arch.log_tau).get(0, 0).exp()
    }

    /// Runs one round on `g`, advancing `state`. `history` must come from the
    /// previous round's final query.
    pub fn step(
        &self,
        g: &mut Graph<'_>,
        state: &mut GraphDialogue,
        text: &str,
        history: Option<&VisualHistory>,
    ) -> Result<RoundVars> {
        let t = state.round;
        let tokens = self.arch.text.tokenize(text);
        let enc = self.arch.text.encode_text(g, &tokens)?;
        let mut recall_active = false;
        let mut selected = Vec::new();
        let mut weights = Vec::new();

        let memory = match self.config.fusion {
            Fusion::Memory => {
                let mm = self.arch.memory.as_ref().expect("memory fusion allocates a memory module");
                let pre = match &state.memory {
                    None if t == 0 => mm.init_memory(g, enc.words)?,
                    Some(prev) if t > 0 => mm.update_memory(g, prev, enc.words)?,
                    _ => return Err(Error::State(format!("dialogue state is inconsistent at round {t}"))),
                };
                if t == 0 {
                    state.snapshot0 = Some(pre);
                }
                match &self.arch.recall {
                    Some(rm) => {
                        let out = rm.recall(g, &self.config.recall, pre, &state.repo)?;
                        recall_active = out.active;
                        selected = out.selected;
                        weights = out.weights;
                        let key = rm.entry_key(g, state.snapshot0.as_ref(), enc.words, enc.cls)?;
                        state.repo.store_entry(t, key, enc.cls)?;
                        out.memory
                    }
                    None => pre,
                }
            }
            Fusion::SimAgg => {
                state.globals.push(enc.cls);
                let tokens = fuse_simagg_graph(g, &state.globals)?;
                MemoryVar { tokens, round: t }
            }
            Fusion::Iws { lambda } => {
                let tokens = match &state.memory {
                    Some(prev) => fuse_iws_graph(g, prev.tokens, enc.cls, lambda)?,
                    None => enc.cls,
                };
                MemoryVar { tokens, round: t }
            }
            Fusion::Icf => {
                let icf = self.arch.icf.as_ref().expect("ICF fusion allocates its projection");
                let tokens = match &state.memory {
                    Some(prev) => icf.fuse_icf(g, prev.tokens, enc.cls)?,
                    None => enc.cls,
                };
                MemoryVar { tokens, round: t }
            }
        };
        state.memory = Some(memory);
        let refined = self.arch.refine.refine_query(g, &memory, history)?;
        let query = self.arch.refine.finalize_query(g, refined)?;
        state.round += 1;
        Ok(RoundVars {
            query,
            tokens: tokens.len(),
            truncated: enc.truncated || tokens.truncated,
            recall_active,
            selected,
            weights,
        })
    }
}

/// Outputs of [`Model::step`] for one round.
#[derive(Debug, Clone)]
pub struct RoundVars {
    /// Final `1 × d` query.
    pub query: Var,
    pub tokens: usize,
    pub truncated: bool,
    pub recall_active: bool,
    pub selected: Vec<Selected>,
    pub weights: Vec<f64>,
}

/// Dialogue state living on a graph.
#[derive(Debug, Clone, Default)]
pub struct GraphDialogue {
    /// Index of the next round.
    pub round: usize,
    /// Post-recall memory (or fused global row for the fusion baselines).
    pub memory: Option<MemoryVar>,
    pub snapshot0: Option<MemoryVar>,
    pub repo: Repository<Var>,
    pub globals: Vec<Var>,
}

/// Tape-free dialogue state, the form kept between requests.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DialogueState {
    pub round: usize,
    pub memory: Option<MemoryState>,
    pub snapshot0: Option<MemoryState>,
    pub repo: Repository<Vec<f64>>,
    pub globals: Vec<Vec<f64>>,
}

impl GraphDialogue {
    pub fn detach(&self, g: &Graph<'_>) -> DialogueState {
        DialogueState {
            round: self.round,
            memory: self.memory.map(|m| m.detach(g)),
            snapshot0: self.snapshot0.map(|m| m.detach(g)),
            repo: self.repo.detach(g),
            globals: self.globals.iter().map(|v| g.value(*v).data().to_vec()).collect(),
        }
    }
}

impl DialogueState {
    pub fn attach(&self, g: &mut Graph<'_>) -> GraphDialogue {
        GraphDialogue {
            round: self.round,
            memory: self.memory.as_ref().map(|m| m.attach(g)),
            snapshot0: self.snapshot0.as_ref().map(|m| m.attach(g)),
            repo: self.repo.attach(g),
            globals: self.globals.iter().map(|v| g.constant(Matrix::row_vector(v))).collect(),
        }
    }
}

/// What one round returned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundResult {
    pub round: usize,
    pub query: Vec<f64>,
    pub top_ids: Vec<String>,
    pub top_scores: Vec<f64>,
    pub target_rank: Option<usize>,
    pub tokens: usize,
    pub truncated: bool,
    pub recall_active: bool,
    pub recalled_rounds: Vec<usize>,
    pub repository_size: usize,
}

/// A [`Session`] detached from its model and corpus.
#[derive(Debug, Clone, Default)]
pub struct SessionState {
    target: Option<usize>,
    state: DialogueState,
    history: Option<VisualHistory>,
    results: Vec<RoundResult>,
}

impl SessionState {
    pub fn results(&self) -> &[RoundResult] {
        &self.results
    }
}

/// An inference-time dialogue against a fixed model and corpus.
#[derive(Debug, Clone)]
pub struct Session<'a> {
    model: &'a Model,
    corpus: &'a EmbeddingCorpus,
    target: Option<usize>,
    state: DialogueState,
    history: Option<VisualHistory>,
    results: Vec<RoundResult>,
}

impl<'a> Session<'a> {
    pub fn new(model: &'a Model, corpus: &'a EmbeddingCorpus, target: Option<&str>) -> Result<Self> {
        if corpus.dim() != model.config.image_dim {
            return Err(Error::Data(format!(
                "corpus dimension {} does not match model image dimension {}",
                corpus.dim(),
                model.config.image_dim
            )));
        }
        let target = match target {
            Some(id) => Some(
                corpus
                    .position(id)
                    .ok_or_else(|| Error::Data(format!("target {id} is not in the corpus")))?,
            ),
            None => None,
        };
        Ok(Self {
            model,
            corpus,
            target,
            state: DialogueState::default(),
            history: None,
            results: Vec::new(),
        })
    }

    /// Continues a detached session. `model` and `corpus` must be the ones it
    /// was started with.
    pub fn resume(model: &'a Model, corpus: &'a EmbeddingCorpus, saved: SessionState) -> Result<Self> {
        if corpus.dim() != model.config.image_dim || saved.target.is_some_and(|t| t >= corpus.len()) {
            return Err(Error::Data("saved session does not fit this corpus".into()));
        }
        Ok(Self {
            model,
            corpus,
            target: saved.target,
            state: saved.state,
            history: saved.history,
            results: saved.results,
        })
    }

    pub fn into_state(self) -> SessionState {
        SessionState {
            target: self.target,
            state: self.state,
            history: self.history,
            results: self.results,
        }
    }

    pub fn round(&self) -> usize {
        self.state.round
    }

    pub fn state(&self) -> &DialogueState {
        &self.state
    }

    pub fn history(&self) -> Option<&VisualHistory> {
        self.history.as_ref()
    }

    pub fn results(&self) -> &[RoundResult] {
        &self.results
    }

    /// Feeds the caption (first call) or the next round's text.
    pub fn advance(&mut self, text: &str) -> Result<&RoundResult> {
        let model = self.model;
        let mut g = Graph::inference(&model.params);
        let mut live = self.state.attach(&mut g);
        let vars = model.step(&mut g, &mut live, text, self.history.as_ref())?;
        let query = g.value(vars.query).data().to_vec();
        let next_state = live.detach(&g);
        let t = self.state.round;
        let history = build_visual_history(&query, self.corpus, model.config.history_k, t)?;
        let target_rank = match self.target {
            Some(idx) => Some(crate::visual::target_rank(&query, self.corpus, idx)?),
            None => None,
        };
        self.results.push(RoundResult {
            round: t,
            query,
            top_ids: history.ids.clone(),
            top_scores: history.scores.clone(),
            target_rank,
            tokens: vars.tokens,
            truncated: vars.truncated,
            recall_active: vars.recall_active,
            recalled_rounds: vars.selected.iter().map(|s| s.round).collect(),
            repository_size: next_state.repo.len(),
        });
        self.state = next_state;
        self.history = Some(history);
        Ok(self.results.last().expect("just pushed"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::Fusion;

    fn corpus(d: usize) -> EmbeddingCorpus {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let recs = (0..20)
            .map(|i| {
                let v = crate::params::init_normal(&mut rng, 1, d, 1.0).into_data();
                (format!("img{i:02}"), v, None)
            })
            .collect();
        EmbeddingCorpus::new(d, recs).unwrap()
    }

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 128,
            text_dim: 8,
            image_dim: 6,
            memory_tokens: 4,
            history_k: 3,
            ..ModelConfig::desk()
        }
    }

    #[test]
    fn session_counts_rounds_and_repository() {
        let m = Model::new(tiny(), 0).unwrap();
        let c = corpus(6);
        let mut s = Session::new(&m, &c, Some("img03")).unwrap();
        for (i, text) in ["a red dog", "on a beach", "at night", "sleeping", "tiny"].iter().enumerate() {
            let r = s.advance(text).unwrap();
            assert_eq!(r.round, i);
            assert_eq!(r.repository_size, i + 1);
            assert_eq!(r.top_ids.len(), 3);
            assert_eq!(r.recall_active, i >= 3);
            assert!(r.target_rank.unwrap() >= 1);
        }
        assert_eq!(s.state().memory.as_ref().unwrap().tokens.shape(), (4, 8));
    }

    #[test]
    fn every_fusion_variant_runs() {
        let c = corpus(6);
        for fusion in [Fusion::Memory, Fusion::SimAgg, Fusion::Iws { lambda: 0.5 }, Fusion::Icf] {
            let m = Model::new(ModelConfig { fusion, ..tiny() }, 1).unwrap();
            let mut s = Session::new(&m, &c, None).unwrap();
            for text in ["one", "two", "three", "four"] {
                let r = s.advance(text).unwrap();
                assert_eq!(r.query.len(), 6);
                assert!(r.target_rank.is_none());
            }
        }
    }

    #[test]
    fn configuration_allocates_only_used_parameters() {
        let full = Model::new(tiny(), 0).unwrap();
        let pdsm = Model::new(tiny().pdsm_only(), 0).unwrap();
        assert!(full.params.find("recall.augment_attn.w_q").is_some());
        assert!(pdsm.params.find("recall.augment_attn.w_q").is_none());
        assert!(pdsm.params.find("refine.fc.weight").is_none());
        assert!(pdsm.params.len() < full.params.len());
        let iws = Model::new(ModelConfig { fusion: Fusion::Iws { lambda: 0.3 }, ..tiny() }, 0).unwrap();
        assert!(iws.params.find("memory.seeds").is_none());
        assert!(iws.params.find("refine.final_pool.w").is_none());
    }

    #[test]
    fn bad_configs_and_targets() {
        assert!(Model::new(ModelConfig { heads: 3, ..tiny() }, 0).is_err());
        assert!(Model::new(ModelConfig { fusion: Fusion::Iws { lambda: 2.0 }, ..tiny() }, 0).is_err());
        let m = Model::new(tiny(), 0).unwrap();
        assert!(matches!(Session::new(&m, &corpus(6), Some("nope")), Err(Error::Data(_))));
        assert!(matches!(Session::new(&m, &corpus(5), None), Err(Error::Data(_))));
    }

    #[test]
    fn temperature_initialized() {
        let m = Model::new(tiny(), 0).unwrap();
        assert!((m.temperature() - 0.07).abs() < 1e-7);
    }
}
