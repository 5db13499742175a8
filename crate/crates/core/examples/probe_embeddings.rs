//! Linear probes on held-out emotion embeddings: how much emotion and how
//! much speaker identity they carry.
//!
//! `cargo run --example probe_embeddings [-- CHECKPOINT CORPUS_MANIFEST]`

use emodiff::config::RunConfig;
use emodiff::corpus::{generate_corpus, load_manifest, Split};
use emodiff::evaluation::disentanglement_report;
use emodiff::training::{load_checkpoint, Dataset, Trainer};

fn main() -> emodiff::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (trainer, corpus) = match args.as_slice() {
        [ckpt, manifest] => (load_checkpoint(ckpt.as_ref())?, load_manifest(manifest.as_ref())?),
        _ => {
            let cfg = RunConfig::toy();
            let (corpus, _) = generate_corpus(&cfg.corpus, &std::env::temp_dir().join("emodiff-probe"))?;
            (Trainer::new(&cfg)?, corpus)
        }
    };
    let test = Dataset::load(&corpus, Split::Test)?;
    let r = disentanglement_report(&trainer.model, &test, trainer.config().eval.split_seed)?;
    println!("step {}", trainer.step);
    for (name, p) in [("emotion", &r.emotion_probe), ("speaker", &r.speaker_probe)] {
        println!("{name} probe: accuracy {:.3} (chance {:.3}, train {:.3}, {} held out)", p.accuracy, p.chance, p.train_accuracy, p.n_test);
    }
    println!("mean cosine between emotion groups:");
    for row in &r.emotion_cosines {
        println!("  {}", row.iter().map(|c| format!("{c:+.3}")).collect::<Vec<_>>().join("  "));
    }
    Ok(())
}
