//! `DMEL` binary mel files: magic, u32 frames, u32 bands, then
//! `frames * bands` little-endian f32 values in frame-major order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DMEL";
const HEADER_LEN: usize = 12;

/// A `frames x bands` mel-spectrum stored frame-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrum {
    frames: usize,
    bands: usize,
    values: Vec<f32>,
}

impl MelSpectrum {
    pub fn new(frames: usize, bands: usize, values: Vec<f32>) -> Result<Self> {
        if frames == 0 || bands == 0 {
            return Err(Error::Shape(format!("mel must be non-empty, got {frames}x{bands}")));
        }
        if values.len() != frames * bands {
            return Err(Error::Shape(format!(
                "{} values for a {frames}x{bands} mel",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("mel values must be finite".into()));
        }
        Ok(Self {
            frames,
            bands,
            values,
        })
    }

    pub fn zeros(frames: usize, bands: usize) -> Self {
        Self {
            frames,
            bands,
            values: vec![0.0; frames * bands],
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.values[t * self.bands..(t + 1) * self.bands]
    }

    /// Per-band mean over frames.
    pub fn band_means(&self) -> Vec<f64> {
        let mut acc = vec![0.0f64; self.bands];
        for t in 0..self.frames {
            for (a, v) in acc.iter_mut().zip(self.frame(t)) {
                *a += *v as f64;
            }
        }
        acc.iter_mut().for_each(|a| *a /= self.frames as f64);
        acc
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.values.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.frames as u32).to_le_bytes());
        out.extend_from_slice(&(self.bands as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let (frames, bands) = parse_header(bytes, path)?;
        let payload = &bytes[HEADER_LEN..];
        let expected = frames * bands * 4;
        if payload.len() != expected {
            return Err(Error::MelFormat {
                path: path.into(),
                reason: format!(
                    "header declares {frames}x{bands} ({expected} payload bytes), found {}",
                    payload.len()
                ),
            });
        }
        let values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(frames, bands, values).map_err(|e| Error::MelFormat {
            path: path.into(),
            reason: e.to_string(),
        })
    }
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<(usize, usize)> {
    let err = |reason: &str| Error::MelFormat {
        path: path.into(),
        reason: reason.to_string(),
    };
    if bytes.len() < HEADER_LEN {
        return Err(err("truncated header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(err("bad magic"));
    }
    let frames = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let bands = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    Ok((frames, bands))
}

pub fn write_mel(mel: &MelSpectrum, path: &Path) -> Result<()> {
    fs::write(path, mel.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_mel(path: &Path) -> Result<MelSpectrum> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    MelSpectrum::from_bytes(&bytes, path)
}

/// Reads only the header; returns `(frames, bands)`.
pub fn read_mel_shape(path: &Path) -> Result<(usize, usize)> {
    use std::io::Read;
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut head = [0u8; HEADER_LEN];
    f.read_exact(&mut head).map_err(|e| Error::io(path, e))?;
    parse_header(&head, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn zeros_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.dmel");
        let mel = MelSpectrum::zeros(3, 80);
        write_mel(&mel, &p).unwrap();
        assert_eq!(read_mel(&p).unwrap(), mel);
        assert_eq!(read_mel_shape(&p).unwrap(), (3, 80));
    }

    #[test]
    fn seeded_random_round_trip_is_bit_exact() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let values: Vec<f32> = (0..100 * 80).map(|_| rng.random_range(-5.0..5.0)).collect();
        let mel = MelSpectrum::new(100, 80, values).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.dmel");
        write_mel(&mel, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        let back = read_mel(&p).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        for (a, b) in back.values().iter().zip(mel.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn payload_length_mismatch_is_rejected() {
        let mut bytes = MelSpectrum::zeros(3, 4).to_bytes();
        bytes.truncate(bytes.len() - 4);
        let err = MelSpectrum::from_bytes(&bytes, Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("payload"), "{err}");
        let mut bytes = MelSpectrum::zeros(3, 4).to_bytes();
        bytes.extend_from_slice(&[0; 4]);
        assert!(MelSpectrum::from_bytes(&bytes, Path::new("x")).is_err());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut bytes = MelSpectrum::zeros(2, 4).to_bytes();
        bytes[0] = b'X';
        let err = MelSpectrum::from_bytes(&bytes, Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("magic"));
        assert!(MelSpectrum::from_bytes(b"DME", Path::new("x")).is_err());
    }

    proptest! {
        #[test]
        fn bytes_round_trip(frames in 1usize..20, bands in 1usize..12, seed in any::<u64>()) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let values = (0..frames * bands).map(|_| rng.random::<f32>() * 10.0 - 5.0).collect();
            let mel = MelSpectrum::new(frames, bands, values).unwrap();
            let back = MelSpectrum::from_bytes(&mel.to_bytes(), Path::new("p")).unwrap();
            prop_assert_eq!(back, mel);
        }
    }
}
