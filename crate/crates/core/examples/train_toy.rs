//! Trains the toy model for a few hundred steps, printing the loss
//! components, and leaves a checkpoint behind.
//!
//! `cargo run --example train_toy [-- STEPS [OUT_DIR]]`

use std::path::PathBuf;

use emodiff::config::RunConfig;
use emodiff::corpus::{generate_corpus, Split};
use emodiff::training::{save_checkpoint, Dataset, Trainer};

fn main() -> emodiff::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(200);
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("emodiff-train"));

    let cfg = RunConfig::toy();
    let (corpus, _) = generate_corpus(&cfg.corpus, &out.join("data"))?;
    let train = Dataset::load(&corpus, Split::Train)?;
    let mut trainer = Trainer::new(&cfg)?;

    println!(" step    total    prior    opedm     diff      emo      opl");
    trainer.train(&train, steps, |t, m| {
        if t.step % 20 == 0 || t.step == steps {
            println!("{:>5} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}", t.step, m.total, m.prior, m.opedm, m.diff, m.emotion, m.opl);
        }
        Ok(())
    })?;
    let ckpt = out.join("checkpoint.safetensors");
    save_checkpoint(&trainer, &ckpt)?;
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}
