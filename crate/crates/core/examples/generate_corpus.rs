//! Writes the toy corpus and prints how it is spread over speakers,
//! emotions and splits.
//!
//! `cargo run --example generate_corpus [-- OUT_DIR]`

use std::collections::BTreeMap;
use std::path::PathBuf;

use emodiff::config::RunConfig;
use emodiff::corpus::{generate_corpus, Split};

fn main() -> emodiff::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("emodiff-corpus"));
    let cfg = RunConfig::toy();
    let (corpus, sig) = generate_corpus(&cfg.corpus, &out)?;

    let mut cells: BTreeMap<(usize, usize), (usize, usize)> = BTreeMap::new();
    for u in &corpus.utterances {
        let cell = cells.entry((u.speaker_id, u.emotion_id)).or_default();
        match u.split {
            Split::Train => cell.0 += 1,
            Split::Test => cell.1 += 1,
        }
    }
    println!("{} utterances in {}", corpus.utterances.len(), out.display());
    println!("speaker  language  emotion      train  test");
    for ((spk, emo), (train, test)) in cells {
        println!("{spk:>7}  {:>8}  {:<11}  {train:>5}  {test:>4}", sig.speaker_languages[spk], sig.emotion_names[emo]);
    }
    let u = &corpus.utterances[0];
    let mel = corpus.read_mel(u)?;
    println!("first utterance {}: {} tokens, {} frames x {} bands", u.id, u.tokens.len(), mel.frames(), mel.bands());
    Ok(())
}
