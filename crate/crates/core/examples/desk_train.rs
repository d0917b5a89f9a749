//! Trains the desk configuration on the synthetic dataset and prints the
//! round-by-round report: `cargo run --release --example desk_train [epochs] [pdsm]`.

use std::time::Instant;

use memir_core::evaluation::{default_threads, evaluate, gen_synthetic, SyntheticConfig};
use memir_core::training::{train_with_progress, TrainConfig};

fn main() -> memir_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().and_then(|a| a.parse().ok()).unwrap_or(30);
    let pdsm = args.next().is_some_and(|a| a == "pdsm");
    let ds = gen_synthetic(0, &SyntheticConfig::default())?;
    let mut cfg = TrainConfig::desk();
    cfg.epochs = epochs;
    if pdsm {
        cfg.model = cfg.model.pdsm_only();
    }
    let start = Instant::now();
    let out = train_with_progress(&cfg, &ds.corpus, &ds.dialogues, |e, l| {
        println!("epoch {:>3}  loss {l:.4}  {:.1}s", e + 1, start.elapsed().as_secs_f64());
    })?;
    let eval_dialogues = ds.resample_dialogues(1);
    let report = evaluate(&out.model, &ds.corpus, &eval_dialogues, 10, None, default_threads())?.report;
    println!("{}", report.table());
    Ok(())
}
