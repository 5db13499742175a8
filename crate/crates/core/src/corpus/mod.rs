//! Synthetic corpus, manifest and mel file formats.

mod generate;
mod manifest;
mod mel;

pub use generate::{
    draw_text, generate_corpus, LatentSignatures, MANIFEST_FILE, SIGNATURES_FILE,
};
pub use manifest::{load_manifest, save_manifest, Corpus, Split, Utterance};
pub use mel::{read_mel, read_mel_shape, write_mel, MelSpectrum};

pub(crate) use generate::argmax;
