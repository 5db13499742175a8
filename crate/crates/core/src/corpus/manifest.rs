//! JSON-lines manifest: one [`Utterance`] record per line, mel paths
//! relative to the manifest's directory.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::mel::{read_mel, read_mel_shape, MelSpectrum};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    pub speaker_id: usize,
    pub emotion_id: usize,
    pub language_id: usize,
    pub tokens: Vec<u32>,
    pub durations: Vec<u32>,
    pub mel_path: String,
    pub split: Split,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.durations.iter().map(|&d| d as usize).sum()
    }

    /// Token/duration structure checks that do not touch the mel file.
    pub fn check_structure(&self) -> std::result::Result<(), String> {
        if self.tokens.is_empty() {
            return Err("empty token sequence".into());
        }
        if self.tokens.len() != self.durations.len() {
            return Err(format!(
                "{} tokens but {} durations",
                self.tokens.len(),
                self.durations.len()
            ));
        }
        if let Some(j) = self.durations.iter().position(|&d| d == 0) {
            return Err(format!("duration of token {j} is zero"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    /// Directory that `mel_path`s are resolved against.
    pub root: PathBuf,
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn mel_path(&self, utt: &Utterance) -> PathBuf {
        self.root.join(&utt.mel_path)
    }

    pub fn read_mel(&self, utt: &Utterance) -> Result<MelSpectrum> {
        read_mel(&self.mel_path(utt))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Utterance> {
        self.utterances.iter().filter(move |u| u.split == split)
    }

    pub fn get(&self, id: &str) -> Option<&Utterance> {
        self.utterances.iter().find(|u| u.id == id)
    }
}

pub fn save_manifest(corpus: &Corpus, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for utt in &corpus.utterances {
        serde_json::to_writer(&mut out, utt)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Parses and validates a manifest; every referenced mel must exist and
/// hold exactly `sum(durations)` frames.
pub fn load_manifest(path: &Path) -> Result<Corpus> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let mut utterances = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let utt: Utterance = serde_json::from_str(&line).map_err(|e| Error::ManifestRecord {
            line: i + 1,
            reason: e.to_string(),
        })?;
        utt.check_structure()
            .map_err(|reason| Error::ManifestRecord { line: i + 1, reason })?;
        let mel = root.join(&utt.mel_path);
        if !mel.is_file() {
            return Err(Error::Utterance {
                id: utt.id,
                reason: format!("mel file {} not found", mel.display()),
            });
        }
        let (frames, _) = read_mel_shape(&mel)?;
        if frames != utt.frames() {
            return Err(Error::Utterance {
                reason: format!(
                    "durations sum to {} frames but the mel has {frames}",
                    utt.frames()
                ),
                id: utt.id,
            });
        }
        utterances.push(utt);
    }
    Ok(Corpus { root, utterances })
}
