//! `memir` subcommands. Exit codes: 0 success, 1 usage or configuration
//! error, 2 data error.

use std::ffi::OsString;
use std::io::{BufRead, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use memir_core::cost::{compare_strategies, encoder_flops, flops_reduction, EncoderCostSpec};
use memir_core::diagnostics::{gradient_suite, SuiteConfig};
use memir_core::encoders::{load_corpus, EmbeddingCorpus};
use memir_core::evaluation::{
    default_threads, evaluate, gen_synthetic, load_dialogues, save_dialogues, DialogueRecord, RoundText,
    SyntheticConfig,
};
use memir_core::memory::Fusion;
use memir_core::recall::{KeyMode, RecallMode, ValueMode};
use memir_core::training::{load_checkpoint, save_checkpoint, train_with_progress, Checkpoint, TrainConfig};
use memir_core::{Error, Model, ModelConfig, Session};

use crate::api::{router, AppState};
use crate::engine::Engine;
use crate::store::{BusyPolicy, SessionStore, StoreConfig};

#[derive(Debug, Parser)]
#[command(name = "memir", version, about = "Memory-augmented conversational image retrieval")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on a corpus and dialogue file.
    Train(TrainArgs),
    /// Score a checkpoint on recorded dialogues.
    Eval(EvalArgs),
    /// Interactive retrieval on standard input.
    Chat(ChatArgs),
    /// HTTP session API.
    Serve(ServeArgs),
    /// Token and FLOPs accounting per strategy.
    Cost(CostArgs),
    /// Write a synthetic corpus and dialogues.
    GenSynthetic(GenArgs),
    /// Finite-difference gradient suite.
    CheckGradients(GradArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FusionArg {
    Memory,
    Simagg,
    Iws,
    Icf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RecallArg {
    Similarity,
    Holistic,
    Off,
}

/// Model toggles shared by every command that builds a model.
#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Start from the full-size configuration instead of the desk one.
    #[arg(long)]
    pub full_scale: bool,
    #[arg(long)]
    pub memory_tokens: Option<usize>,
    #[arg(long)]
    pub history_k: Option<usize>,
    #[arg(long)]
    pub text_dim: Option<usize>,
    #[arg(long, value_enum)]
    pub recall: Option<RecallArg>,
    /// Entries recalled per round.
    #[arg(long)]
    pub recall_n: Option<usize>,
    #[arg(long)]
    pub recall_from: Option<usize>,
    #[arg(long)]
    pub recall_round0: bool,
    /// Use the CLS value as the repository key.
    #[arg(long)]
    pub value_as_key: bool,
    /// Recall keys instead of CLS values.
    #[arg(long)]
    pub recall_keys: bool,
    #[arg(long)]
    pub no_refine: bool,
    /// Memory only: recall and refinement off.
    #[arg(long)]
    pub pdsm_only: bool,
    #[arg(long, value_enum)]
    pub fusion: Option<FusionArg>,
    #[arg(long, default_value_t = 0.5)]
    pub iws_lambda: f64,
}

impl ModelArgs {
    pub fn build(&self, image_dim: Option<usize>) -> ModelConfig {
        let mut c = if self.full_scale { ModelConfig::full() } else { ModelConfig::desk() };
        if let Some(d) = image_dim {
            c.image_dim = d;
        }
        if let Some(v) = self.memory_tokens {
            c.memory_tokens = v;
        }
        if let Some(v) = self.history_k {
            c.history_k = v;
        }
        if let Some(v) = self.text_dim {
            c.text_dim = v;
        }
        if let Some(r) = self.recall {
            c.recall.mode = match r {
                RecallArg::Similarity => RecallMode::Similarity,
                RecallArg::Holistic => RecallMode::Holistic,
                RecallArg::Off => RecallMode::Off,
            };
        }
        if let Some(n) = self.recall_n {
            c.recall.n = n;
        }
        if let Some(t) = self.recall_from {
            c.recall.activation_round = t;
        }
        c.recall.include_round0 |= self.recall_round0;
        if self.value_as_key {
            c.recall.key_mode = KeyMode::ValueAsKey;
        }
        if self.recall_keys {
            c.recall.value_mode = ValueMode::Key;
        }
        if self.no_refine {
            c.refine = false;
        }
        if self.pdsm_only {
            c = c.pdsm_only();
        }
        if let Some(f) = self.fusion {
            c.fusion = match f {
                FusionArg::Memory => Fusion::Memory,
                FusionArg::Simagg => Fusion::SimAgg,
                FusionArg::Iws => Fusion::Iws { lambda: self.iws_lambda },
                FusionArg::Icf => Fusion::Icf,
            };
        }
        c
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub dialogues: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_backbone: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    pub weight_decay: f64,
    /// Pipeline rounds per dialogue, caption included.
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub truncate_backprop: bool,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub dialogues: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long)]
    pub max_rounds: Option<usize>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// Print the report as JSON.
    #[arg(long)]
    pub json: bool,
}

/// Model source for chat and serve: a checkpoint, or a fresh model.
#[derive(Debug, Args)]
pub struct SourceArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Initialization seed when no checkpoint is given.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct ChatArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    #[arg(long)]
    pub target: Option<String>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Directory for session transcripts; sessions found there are replayed.
    #[arg(long)]
    pub state_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    pub idle_minutes: u64,
    #[arg(long, value_enum, default_value_t = BusyPolicy::Queue)]
    pub busy: BusyPolicy,
    /// Base directory for relative image paths; defaults to the corpus directory.
    #[arg(long)]
    pub image_root: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CostArgs {
    /// Dialogue file; without one a ten-round dialogue of constant rounds is used.
    #[arg(long)]
    pub dialogues: Option<PathBuf>,
    #[arg(long, default_value_t = 12)]
    pub layers: usize,
    #[arg(long, default_value_t = 768)]
    pub hidden: usize,
    #[arg(long, default_value_t = 4)]
    pub ffn_ratio: usize,
    /// Tokens per round for the generated dialogue.
    #[arg(long, default_value_t = 12)]
    pub round_tokens: usize,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 500)]
    pub images: usize,
    #[arg(long, default_value_t = 5)]
    pub rounds: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradArgs {
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 20)]
    pub seeds: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidArgument(_) => CliError::Usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

type CliResult = Result<(), CliError>;

/// Parses and runs; returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn write_out(out: &mut dyn Write, s: &str) -> CliResult {
    out.write_all(s.as_bytes())
        .and_then(|_| out.flush())
        .map_err(|e| CliError::Data(format!("writing output: {e}")))
}

pub fn dispatch(cmd: Command, out: &mut dyn Write) -> CliResult {
    match cmd {
        Command::Train(a) => train_cmd(a, out),
        Command::Eval(a) => eval_cmd(a, out),
        Command::Chat(a) => chat_cmd(a, out),
        Command::Serve(a) => serve_cmd(a),
        Command::Cost(a) => cost_cmd(a, out),
        Command::GenSynthetic(a) => gen_cmd(a, out),
        Command::CheckGradients(a) => grad_cmd(a, out),
    }
}

fn train_cmd(a: TrainArgs, out: &mut dyn Write) -> CliResult {
    let corpus = load_corpus(&a.corpus)?;
    let dialogues = load_dialogues(&a.dialogues)?;
    let mut cfg = TrainConfig {
        model: a.model.build(Some(corpus.dim())),
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: a.seed,
        rounds: a.rounds,
        truncate_backprop: a.truncate_backprop,
        ..TrainConfig::desk()
    };
    if let Some(lr) = a.lr {
        cfg.optimizer.lr_head = lr;
        cfg.optimizer.lr_backbone = lr;
    }
    if let Some(lr) = a.lr_backbone {
        cfg.optimizer.lr_backbone = lr;
    }
    cfg.optimizer.weight_decay = a.weight_decay;
    let mut lines = Vec::new();
    let outcome = train_with_progress(&cfg, &corpus, &dialogues, |e, loss| {
        lines.push(format!("epoch {:>3}  loss {loss:.5}\n", e + 1));
        log::info!("epoch {} loss {loss:.5}", e + 1);
    })?;
    for l in lines {
        write_out(out, &l)?;
    }
    let ckpt = Checkpoint::new(outcome.model, Some(outcome.meta));
    save_checkpoint(&a.out, &ckpt)?;
    write_out(out, &format!("saved {} ({})\n", a.out.display(), ckpt.id()))
}

fn eval_cmd(a: EvalArgs, out: &mut dyn Write) -> CliResult {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let corpus = load_corpus(&a.corpus)?;
    let dialogues = load_dialogues(&a.dialogues)?;
    let threads = a.threads.unwrap_or_else(default_threads);
    let res = evaluate(&ckpt.model, &corpus, &dialogues, a.k, a.max_rounds, threads)?;
    if a.json {
        write_out(out, &(res.report.to_json() + "\n"))
    } else {
        write_out(out, &res.report.table())
    }
}

fn load_source(s: &SourceArgs) -> Result<(Model, EmbeddingCorpus), CliError> {
    let corpus = load_corpus(&s.corpus)?;
    let model = match &s.checkpoint {
        Some(p) => load_checkpoint(p)?.model,
        None => Model::new(s.model.build(Some(corpus.dim())), s.seed)?,
    };
    Ok((model, corpus))
}

fn chat_cmd(a: ChatArgs, out: &mut dyn Write) -> CliResult {
    let (model, corpus) = load_source(&a.source)?;
    let engine = Engine::new(model, corpus, a.source.k)?;
    let mut session = Session::new(&engine.model, &engine.corpus, a.target.as_deref())?;
    write_out(out, "caption, then one refinement per line; empty line ends\n")?;
    for line in std::io::stdin().lock().lines() {
        let line = line.map_err(|e| CliError::Data(format!("reading input: {e}")))?;
        if line.trim().is_empty() {
            break;
        }
        let view = engine.view(session.advance(&line)?)?;
        let mut s = format!("round {}", view.round);
        if let Some(r) = view.target_rank {
            s.push_str(&format!("  target rank {r}"));
        }
        s.push('\n');
        for (i, h) in view.top_k.iter().enumerate() {
            s.push_str(&format!("  {:>3}. {}  {:.4}\n", i + 1, h.image_id, h.score));
        }
        write_out(out, &s)?;
    }
    Ok(())
}

fn serve_cmd(a: ServeArgs) -> CliResult {
    let (model, corpus) = load_source(&a.source)?;
    let engine = Arc::new(Engine::new(model, corpus, a.source.k)?);
    let store = SessionStore::open(
        engine,
        StoreConfig {
            idle_timeout: Duration::from_secs(a.idle_minutes * 60),
            busy: a.busy,
            state_dir: a.state_dir.clone(),
        },
    )?;
    let image_root = a.image_root.clone().unwrap_or_else(|| {
        a.source.corpus.parent().map(Path::to_path_buf).unwrap_or_default()
    });
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .map_err(|e| CliError::Usage(format!("bad address: {e}")))?;
    let state = Arc::new(AppState { store, image_root });
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Data(e.to_string()))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| CliError::Data(format!("bind {addr}: {e}")))?;
        log::info!("listening on {addr}, {} sessions restored", state.store.len());
        let sweeper = state.clone();
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(Duration::from_secs(60));
            loop {
                tick.tick().await;
                let n = sweeper.store.sweep();
                if n > 0 {
                    log::info!("expired {n} idle sessions");
                }
            }
        });
        axum::serve(listener, router(state))
            .await
            .map_err(|e| CliError::Data(e.to_string()))
    })
}

/// `rounds` rounds of `tokens` distinct words each.
pub fn constant_dialogue(rounds: usize, tokens: usize) -> DialogueRecord {
    let words = |r: usize, n: usize| (0..n).map(|i| format!("w{r}x{i}")).collect::<Vec<_>>().join(" ");
    DialogueRecord {
        target_id: "none".into(),
        caption: words(0, tokens),
        rounds: (1..rounds)
            .map(|r| RoundText {
                q: words(r, tokens / 2),
                a: words(r + 100, tokens - tokens / 2),
            })
            .collect(),
    }
}

fn cost_cmd(a: CostArgs, out: &mut dyn Write) -> CliResult {
    let spec = EncoderCostSpec {
        layers: a.layers,
        hidden: a.hidden,
        ffn_ratio: a.ffn_ratio,
        ..EncoderCostSpec::base()
    };
    if a.round_tokens == 0 {
        return Err(CliError::Usage("--round-tokens must be positive".into()));
    }
    let dialogues = match &a.dialogues {
        Some(p) => load_dialogues(p)?,
        None => vec![constant_dialogue(10, a.round_tokens)],
    };
    let report = compare_strategies(&dialogues, &spec, None)?;
    if a.json {
        let s = serde_json::to_string_pretty(&report).expect("report serializes");
        return write_out(out, &(s + "\n"));
    }
    let mut s = report.table();
    s.push_str(&format!(
        "published token counts 25 -> 122: concat FLOPs ratio {:.2}\n",
        encoder_flops(&spec, 122) / encoder_flops(&spec, 25)
    ));
    s.push_str(&format!(
        "published FLOPs 2.9G vs 21.3G: reduction {:.1}%\n",
        100.0 * flops_reduction(2.9, 21.3)
    ));
    write_out(out, &s)
}

fn gen_cmd(a: GenArgs, out: &mut dyn Write) -> CliResult {
    let ds = gen_synthetic(
        a.seed,
        &SyntheticConfig {
            images: a.images,
            rounds: a.rounds,
            dim: a.dim,
            ..Default::default()
        },
    )?;
    std::fs::create_dir_all(&a.out).map_err(|e| CliError::Data(format!("{}: {e}", a.out.display())))?;
    let cp = a.out.join("corpus.jsonl");
    let dp = a.out.join("dialogues.jsonl");
    ds.corpus.save(&cp)?;
    save_dialogues(&dp, &ds.dialogues)?;
    write_out(
        out,
        &format!(
            "wrote {} images to {} and {} dialogues to {}\n",
            ds.corpus.len(),
            cp.display(),
            ds.dialogues.len(),
            dp.display()
        ),
    )
}

fn grad_cmd(a: GradArgs, out: &mut dyn Write) -> CliResult {
    if a.dim < 2 || a.seeds == 0 {
        return Err(CliError::Usage("--dim must be at least 2 and --seeds at least 1".into()));
    }
    let cfg = SuiteConfig {
        dim: a.dim,
        seeds: a.seeds,
        tol: a.tol,
        ..Default::default()
    };
    let summary = gradient_suite(&cfg)?;
    let worst = summary.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let passed = summary.iter().all(|c| c.passed);
    if a.json {
        let s = serde_json::to_string_pretty(&summary).expect("summary serializes");
        write_out(out, &(s + "\n"))?;
    } else {
        let mut s = String::new();
        for c in &summary {
            s.push_str(&format!(
                "{:<18} seeds {:>3}  max rel err {:.2e}  {}\n",
                c.name,
                c.seeds,
                c.max_rel_error,
                if c.passed { "ok" } else { "FAIL" }
            ));
        }
        s.push_str(&format!("max relative error {worst:.2e} (threshold {:.0e})\n", a.tol));
        write_out(out, &s)?;
    }
    if passed {
        Ok(())
    } else {
        Err(CliError::Data(format!("gradient check failed: max relative error {worst:.2e}")))
    }
}
