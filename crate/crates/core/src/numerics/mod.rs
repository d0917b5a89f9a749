//! Dense linear algebra, attention primitives, and gradient checking.

pub mod gradcheck;
pub mod layers;
pub mod matrix;
pub mod tape;
pub mod topk;

pub use gradcheck::{finite_diff_check, FnObjective, GradCheckOptions, GradCheckReport, Objective, Stencil};
pub use layers::{attention_pool, cosine, softmax, AttentionBlock, AttentionOutput, Linear, PoolingParams};
pub use matrix::Matrix;
pub use tape::{Tape, TapeGrads, Var};
pub use topk::{rank_all, topk_by_similarity, Scored, TopK};
