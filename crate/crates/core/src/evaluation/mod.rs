pub mod dialogue;
pub mod metrics;
pub mod runner;
pub mod synthetic;

pub use dialogue::{load_dialogues, parse_dialogues, save_dialogues, DialogueRecord, RoundText};
pub use metrics::{hit_recall_mhr, EvalReport, RoundMetrics};
pub use runner::{default_threads, evaluate, run_session, EvalOutput, SessionTrace};
pub use synthetic::{gen_synthetic, SyntheticConfig, SyntheticDataset};
