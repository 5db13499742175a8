//! Transfers an emotion across speakers and languages: tokens from one
//! language, the speaker identity of another speaker, and the emotion of an
//! emotional reference.
//!
//! `cargo run --example synthesize [-- CHECKPOINT CORPUS_MANIFEST]`
//! Without arguments an untrained model and a fresh corpus are used, which
//! exercises the pipeline but not the quality.

use emodiff::config::RunConfig;
use emodiff::corpus::{generate_corpus, load_manifest, Split};
use emodiff::training::{load_checkpoint, synthesize, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> emodiff::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (trainer, corpus) = match args.as_slice() {
        [ckpt, manifest] => (load_checkpoint(ckpt.as_ref())?, load_manifest(manifest.as_ref())?),
        _ => {
            let cfg = RunConfig::toy();
            let (corpus, _) = generate_corpus(&cfg.corpus, &std::env::temp_dir().join("emodiff-synth"))?;
            (Trainer::new(&cfg)?, corpus)
        }
    };
    let model = &trainer.model;
    let test: Vec<_> = corpus.split(Split::Test).collect();
    // an emotional reference from speaker 0, text from the other language
    let reference = test.iter().find(|u| u.speaker_id == 0 && u.emotion_id == 1).expect("emotional reference");
    let text = test.iter().find(|u| u.language_id != reference.language_id).expect("other-language text");
    let target = test.iter().map(|u| u.speaker_id).find(|&s| s != 0).unwrap_or(0);

    let mut rng = ChaCha8Rng::seed_from_u64(model.config.eval.synth_seed);
    let s = synthesize(
        model,
        &text.tokens,
        target,
        &corpus.read_mel(reference)?,
        model.config.schedule.inference_steps,
        model.config.schedule.temperature,
        &mut rng,
    )?;
    println!("tokens of {} spoken by speaker {target} with the emotion of {}", text.id, reference.id);
    println!("durations {:?}", s.durations);
    println!("{} frames x {} bands", s.mel.frames(), s.mel.bands());
    let row = |m: &emodiff::corpus::MelSpectrum| m.values()[..m.bands()].iter().map(|v| format!("{v:+.2}")).collect::<Vec<_>>().join(" ");
    println!("prior frame 0:  {}", row(&s.prior_mean));
    println!("output frame 0: {}", row(&s.mel));
    Ok(())
}
