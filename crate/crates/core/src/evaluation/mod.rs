//! Objective checks of the embedding space and of the diffusion maths:
//! linear probes, cosine tables, a principal-component projection, the
//! projection-loss structure, Gaussian oracles, and the cross speaker and
//! language recombination test.

mod probe;

pub use probe::{linear_probe, LogisticProbe, ProbeResult, MIN_PER_CLASS};

use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use nalgebra::DMatrix;
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{LatentSignatures, Utterance};
use crate::diffusion::{
    diffusion_loss, forward_marginal, reverse_ode_sample, reverse_sde_sample, simulate_forward_sde,
    standard_normal, ConditionalScoreOracle, DiffusionSchedule, GaussianScoreOracle,
};
use crate::error::{Error, Result};
use crate::nn::scalar;
use crate::op_edm::{opl_values, EmotionCategorySet};
use crate::training::{synthesize, Dataset, Model};

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Mean pairwise cosine between every two groups. Within a group the
/// self-pairs are excluded.
pub fn cosine_report(groups: &[Vec<Vec<f32>>]) -> Vec<Vec<f64>> {
    let k = groups.len();
    let mut out = vec![vec![f64::NAN; k]; k];
    for i in 0..k {
        for j in i..k {
            let (mut sum, mut n) = (0.0, 0usize);
            for (a_idx, a) in groups[i].iter().enumerate() {
                for (b_idx, b) in groups[j].iter().enumerate() {
                    if i == j && a_idx == b_idx {
                        continue;
                    }
                    sum += cosine(a, b);
                    n += 1;
                }
            }
            let v = if n > 0 { sum / n as f64 } else { f64::NAN };
            out[i][j] = v;
            out[j][i] = v;
        }
    }
    out
}

/// Coordinates on the two leading principal axes of the centred data.
/// Each axis is signed so that its largest loading is positive.
pub fn project_2d(x: &[Vec<f32>]) -> Result<Vec<[f64; 2]>> {
    let n = x.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let d = x[0].len();
    if d == 0 || x.iter().any(|r| r.len() != d) {
        return Err(Error::Shape("embeddings must share one nonzero width".into()));
    }
    let mut m = DMatrix::from_fn(n, d, |i, j| x[i][j] as f64);
    let mean = m.row_mean();
    for mut row in m.row_iter_mut() {
        row -= &mean;
    }
    let svd = m.clone().svd(false, true);
    let vt = svd.v_t.expect("requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut axes = Vec::with_capacity(2);
    for &r in order.iter().take(2) {
        let mut axis: Vec<f64> = vt.row(r).iter().copied().collect();
        let lead = axis.iter().copied().fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        if lead < 0.0 {
            axis.iter_mut().for_each(|v| *v = -*v);
        }
        axes.push(axis);
    }
    while axes.len() < 2 {
        axes.push(vec![0.0; d]);
    }
    Ok((0..n)
        .map(|i| {
            let row = m.row(i);
            let p = |a: &[f64]| row.iter().zip(a).map(|(x, y)| x * y).sum::<f64>();
            [p(&axes[0]), p(&axes[1])]
        })
        .collect())
}

/// One projected point with its labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub id: String,
    pub x: f64,
    pub y: f64,
    pub speaker_id: usize,
    pub emotion_id: usize,
}

pub fn write_projection_csv(path: &Path, points: &[ProjectedPoint]) -> Result<()> {
    let mut out = String::from("id,x,y,speaker_id,emotion_id\n");
    for p in points {
        out.push_str(&format!("{},{},{},{},{}\n", p.id, p.x, p.y, p.speaker_id, p.emotion_id));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OplReport {
    pub e_same: Option<f64>,
    pub e_diff: Option<f64>,
    pub l_opl: f64,
}

pub fn opl_structure_report(x: &[Vec<f32>], labels: &[usize]) -> Result<OplReport> {
    let n = x.len();
    let d = x.first().map(|r| r.len()).unwrap_or(0);
    let flat: Vec<f64> = x.iter().flatten().map(|&v| v as f64).collect();
    let e = Tensor::from_vec(flat, (n, d), &Device::Cpu)?;
    let (e_same, e_diff, l_opl) = opl_values(&e, labels)?;
    Ok(OplReport { e_same, e_diff, l_opl })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentCheck {
    pub expected_mean: f64,
    pub observed_mean: f64,
    pub expected_var: f64,
    pub observed_var: f64,
    pub mean_rel_err: f64,
    pub var_rel_err: f64,
}

impl MomentCheck {
    fn new(expected: (f64, f64), observed: (f64, f64)) -> Self {
        Self {
            expected_mean: expected.0,
            observed_mean: observed.0,
            expected_var: expected.1,
            observed_var: observed.1,
            mean_rel_err: ((observed.0 - expected.0) / expected.0).abs(),
            var_rel_err: ((observed.1 - expected.1) / expected.1).abs(),
        }
    }

    pub fn max_rel_err(&self) -> f64 {
        self.mean_rel_err.max(self.var_rel_err)
    }
}

/// Gaussian-oracle checks of the diffusion maths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionOracleReport {
    pub n_paths: usize,
    /// Closed-form marginal samples against a 1000-step Euler-Maruyama
    /// simulation of the forward SDE at `t = 0.5`, from `X0 = 2`, `mu = 0`.
    pub forward_vs_simulation: MomentCheck,
    /// Closed-form marginal samples at `t = 1` against the exact moments;
    /// the mean error is in units of the marginal standard deviation.
    pub forward_t1_mean_err_sd: f64,
    pub forward_t1_var_rel_err: f64,
    /// Score-matching loss with the exact conditional score.
    pub true_score_loss: f64,
    /// Reverse ODE (200 steps) with the exact marginal score on
    /// `X0 ~ N(2, 0.25)`, 10^4 samples.
    pub ode: MomentCheck,
    /// Same for the reverse SDE.
    pub sde: MomentCheck,
}

fn sample_moments(x: &Tensor) -> Result<(f64, f64)> {
    let v = x.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    Ok((m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)))
}

pub fn diffusion_oracle_report(schedule: &DiffusionSchedule, n_paths: usize, seed: u64) -> Result<DiffusionOracleReport> {
    let dev = &Device::Cpu;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let full = |v: f64, n: usize| Tensor::full(v, (n, 1, 1), dev);
    let (x0, mu) = (full(2.0, n_paths)?, full(0.0, n_paths)?);

    let t = 0.5;
    let sim = simulate_forward_sde(schedule, &x0, &mu, t, 1000, &mut rng)?;
    let forward_vs_simulation = MomentCheck::new(
        (2.0 * schedule.mean_coeff(t), schedule.lambda(t)),
        sample_moments(&sim)?,
    );

    let at1 = forward_marginal(schedule, &x0, &mu, &vec![1.0; n_paths], &mut rng)?;
    let (m1, v1) = sample_moments(&at1)?;
    let lam1 = schedule.lambda(1.0);
    let forward_t1_mean_err_sd = ((m1 - 2.0 * schedule.mean_coeff(1.0)) / lam1.sqrt()).abs();
    let forward_t1_var_rel_err = (v1 / lam1 - 1.0).abs();

    let bx0 = standard_normal(&mut rng, &[8, 16, 4], DType::F64, dev)?;
    let bmu = standard_normal(&mut rng, &[8, 16, 4], DType::F64, dev)?;
    let mask = Tensor::ones((8, 16), DType::F64, dev)?;
    let oracle = ConditionalScoreOracle { schedule: *schedule, x0: &bx0 };
    let true_score_loss = scalar(&diffusion_loss(&oracle, schedule, &bx0, &bmu, &mask, 1e-3, &mut rng)?)?;

    let gauss = GaussianScoreOracle { schedule: *schedule, m: 2.0, sigma2: 0.25 };
    let n = 10_000;
    let ode = reverse_ode_sample(&gauss, schedule, &full(0.0, n)?, 200, 1.0, &mut rng)?;
    let sde = reverse_sde_sample(&gauss, schedule, &full(0.0, n)?, 200, 1.0, &mut rng)?;
    Ok(DiffusionOracleReport {
        n_paths,
        forward_vs_simulation,
        forward_t1_mean_err_sd,
        forward_t1_var_rel_err,
        true_score_loss,
        ode: MomentCheck::new((2.0, 0.25), sample_moments(&ode)?),
        sde: MomentCheck::new((2.0, 0.25), sample_moments(&sde)?),
    })
}

/// Held-out references split into the two probe sets: the emotional
/// speakers across their categories, and the neutral-only speakers, whose
/// utterances all share one category.
pub struct ProbeSets<'a> {
    pub emotion: Vec<(&'a Utterance, usize)>,
    pub speaker: Vec<(&'a Utterance, usize)>,
}

pub fn probe_sets<'a>(data: &'a Dataset, categories: &EmotionCategorySet) -> ProbeSets<'a> {
    let nn = categories.neutral_n();
    let mut sets = ProbeSets {
        emotion: Vec::new(),
        speaker: Vec::new(),
    };
    for (i, u) in data.utterances.iter().enumerate() {
        if u.emotion_id == nn {
            sets.speaker.push((u, i));
        } else {
            sets.emotion.push((u, i));
        }
    }
    sets
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisentanglementReport {
    pub emotion_probe: ProbeResult,
    pub speaker_probe: ProbeResult,
    /// Mean cosine between emotion groups of the emotional speakers, in
    /// category order.
    pub emotion_cosines: Vec<Vec<f64>>,
    pub emotion_opl: OplReport,
    /// Mean cosine between speaker groups of the neutral-only speakers.
    pub speaker_cosines: Vec<Vec<f64>>,
}

/// Embeds held-out references and probes them for emotion and speaker.
pub fn disentanglement_report(model: &Model, test: &Dataset, split_seed: u64) -> Result<DisentanglementReport> {
    let categories = model_categories(model)?;
    let sets = probe_sets(test, &categories);
    let embed = |set: &[(&Utterance, usize)]| -> Result<Vec<Vec<f32>>> {
        let mels: Vec<_> = set.iter().map(|&(_, i)| &test.mels[i]).collect();
        model.embed_all(&mels)
    };
    let emo_x = embed(&sets.emotion)?;
    let emo_y: Vec<usize> = sets.emotion.iter().map(|(u, _)| u.emotion_id).collect();
    let spk_x = embed(&sets.speaker)?;
    let spk_y: Vec<usize> = sets.speaker.iter().map(|(u, _)| u.speaker_id).collect();
    let group = |x: &[Vec<f32>], y: &[usize]| -> Vec<Vec<Vec<f32>>> {
        let mut ids: Vec<usize> = y.to_vec();
        ids.sort_unstable();
        ids.dedup();
        ids.iter()
            .map(|&g| x.iter().zip(y).filter(|(_, &l)| l == g).map(|(r, _)| r.clone()).collect())
            .collect()
    };
    Ok(DisentanglementReport {
        emotion_probe: linear_probe(&emo_x, &emo_y, split_seed)?,
        speaker_probe: linear_probe(&spk_x, &spk_y, split_seed)?,
        emotion_cosines: cosine_report(&group(&emo_x, &emo_y)),
        emotion_opl: opl_structure_report(&emo_x, &emo_y)?,
        speaker_cosines: cosine_report(&group(&spk_x, &spk_y)),
    })
}

fn model_categories(model: &Model) -> Result<EmotionCategorySet> {
    let mut names = model.config.corpus.emotions.clone();
    names.push(EmotionCategorySet::NEUTRAL_N.to_string());
    EmotionCategorySet::new(names)
}

/// One synthesis of unseen-language text for a monolingual speaker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecombinationTrial {
    pub tokens_from: String,
    pub reference: String,
    pub emotion_id: usize,
    pub assigned_speaker: usize,
    pub probed_emotion: usize,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecombinationReport {
    pub target_speaker: usize,
    pub target_language: usize,
    pub token_language: usize,
    pub speaker_rate: f64,
    pub emotion_rate: f64,
    pub trials: Vec<RecombinationTrial>,
}

/// Synthesises text from a language the target speaker never recorded,
/// with the emotion of a held-out reference from an emotional speaker.
/// Each output is scored by the corpus speaker-signature regression and by
/// an emotion probe fitted on held-out reference embeddings.
pub fn cross_recombination_report(
    model: &Model,
    test: &Dataset,
    signatures: &LatentSignatures,
    trials: usize,
    n_steps: usize,
    seed: u64,
) -> Result<RecombinationReport> {
    let categories = model_categories(model)?;
    let n_emo = model.config.corpus.n_emotional_speakers;
    let target = n_emo;
    if target >= signatures.n_speakers() {
        return Err(Error::Invalid("the corpus has no neutral-only speaker".into()));
    }
    let target_language = signatures.speaker_languages[target];
    let texts: Vec<&Utterance> = test.utterances.iter().filter(|u| u.language_id != target_language).collect();
    let token_language = texts
        .first()
        .map(|u| u.language_id)
        .ok_or_else(|| Error::Invalid("no held-out text in another language".into()))?;
    let texts: Vec<&Utterance> = texts.into_iter().filter(|u| u.language_id == token_language).collect();

    let sets = probe_sets(test, &categories);
    let emo_mels: Vec<_> = sets.emotion.iter().map(|&(_, i)| &test.mels[i]).collect();
    let emo_x = model.embed_all(&emo_mels)?;
    let emo_y: Vec<usize> = sets.emotion.iter().map(|(u, _)| u.emotion_id).collect();
    let probe = LogisticProbe::fit(&emo_x, &emo_y)?;

    // the first category is the emotional speakers' own neutral style
    let targets: Vec<usize> = (1..model.config.corpus.emotions.len()).collect();
    if targets.is_empty() {
        return Err(Error::Invalid("no non-neutral emotion to transfer".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(trials);
    for k in 0..trials {
        let emotion = targets[k % targets.len()];
        let refs: Vec<&(&Utterance, usize)> = sets.emotion.iter().filter(|(u, _)| u.emotion_id == emotion).collect();
        let &&(ref_utt, ref_idx) = refs
            .choose(&mut rng)
            .ok_or_else(|| Error::Invalid(format!("no held-out reference with emotion {emotion}")))?;
        let text = *texts.choose(&mut rng).expect("checked nonempty");
        let synth = synthesize(
            model,
            &text.tokens,
            target,
            &test.mels[ref_idx],
            n_steps,
            model.config.schedule.temperature,
            &mut rng,
        )?;
        let assigned = signatures.assign_speaker(&synth.mel, &text.tokens, &synth.durations, None)?;
        let e = model.embed_all(&[&synth.mel])?;
        out.push(RecombinationTrial {
            tokens_from: text.id.clone(),
            reference: ref_utt.id.clone(),
            emotion_id: emotion,
            assigned_speaker: assigned,
            probed_emotion: probe.predict(&e[0]),
            frames: synth.mel.frames(),
        });
    }
    let rate = |f: &dyn Fn(&RecombinationTrial) -> bool| out.iter().filter(|t| f(t)).count() as f64 / out.len().max(1) as f64;
    Ok(RecombinationReport {
        target_speaker: target,
        target_language,
        token_language,
        speaker_rate: rate(&|t| t.assigned_speaker == target),
        emotion_rate: rate(&|t| t.probed_emotion == t.emotion_id),
        trials: out,
    })
}

/// Writes any report as pretty JSON.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn cosine_table_examples() {
        let same = vec![vec![1.0f32, 2.0, 3.0]; 4];
        let r = cosine_report(&[same.clone(), same]);
        for row in &r {
            for v in row {
                assert!((v - 1.0).abs() < 1e-12);
            }
        }
        let a = vec![vec![1.0f32, 0.0], vec![2.0, 0.0]];
        let b = vec![vec![0.0f32, 1.0], vec![0.0, 3.0]];
        let r = cosine_report(&[a, b]);
        assert!(r[0][1].abs() < 1e-12 && r[1][0].abs() < 1e-12);
        assert!((r[0][0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn random_unit_vectors_are_nearly_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = || -> Vec<Vec<f32>> {
            (0..50)
                .map(|_| (0..32).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect())
                .collect()
        };
        let (a, b) = (g(), g());
        let r = cosine_report(&[a, b]);
        assert!(r[0][1].abs() <= 0.2);
        assert_eq!(r[0][1], r[1][0]);
    }

    #[test]
    fn projection_of_planar_data_is_a_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<Vec<f32>> = (0..40)
            .map(|_| vec![3.0 * rng.sample::<f32, _>(StandardNormal), rng.sample::<f32, _>(StandardNormal)])
            .collect();
        let p = project_2d(&x).unwrap();
        assert_eq!(p.len(), 40);
        let mean: Vec<f64> = (0..2).map(|j| x.iter().map(|r| r[j] as f64).sum::<f64>() / 40.0).collect();
        for i in 0..40 {
            for j in 0..40 {
                let d_in = ((x[i][0] as f64 - x[j][0] as f64).powi(2) + (x[i][1] as f64 - x[j][1] as f64).powi(2)).sqrt();
                let d_out = ((p[i][0] - p[j][0]).powi(2) + (p[i][1] - p[j][1]).powi(2)).sqrt();
                assert!((d_in - d_out).abs() < 1e-4);
            }
            let n_in = ((x[i][0] as f64 - mean[0]).powi(2) + (x[i][1] as f64 - mean[1]).powi(2)).sqrt();
            assert!((n_in - (p[i][0].powi(2) + p[i][1].powi(2)).sqrt()).abs() < 1e-4);
        }
        let var = |k: usize| p.iter().map(|r| r[k] * r[k]).sum::<f64>();
        assert!(var(0) >= var(1));
    }

    #[test]
    fn rank_two_data_is_reconstructed() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let basis: Vec<Vec<f64>> = (0..2).map(|_| (0..32).map(|_| rng.sample(StandardNormal)).collect()).collect();
        let x: Vec<Vec<f32>> = (0..30)
            .map(|_| {
                let (a, b): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
                (0..32).map(|j| (a * basis[0][j] + b * basis[1][j]) as f32).collect()
            })
            .collect();
        let p = project_2d(&x).unwrap();
        let total: f64 = {
            let mean: Vec<f64> = (0..32).map(|j| x.iter().map(|r| r[j] as f64).sum::<f64>() / 30.0).collect();
            x.iter().map(|r| r.iter().zip(&mean).map(|(v, m)| (*v as f64 - m).powi(2)).sum::<f64>()).sum()
        };
        let captured: f64 = p.iter().map(|r| r[0] * r[0] + r[1] * r[1]).sum();
        assert!(((total - captured) / total).abs() < 1e-6);
    }

    #[test]
    fn opl_report_matches_hand_examples() {
        let r = opl_structure_report(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]], &[0, 0, 1]).unwrap();
        assert!(r.l_opl.abs() < 1e-12);
        assert_eq!(r.e_same, Some(1.0));
        let r = opl_structure_report(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0, 0]).unwrap();
        assert!((r.l_opl - 1.0).abs() < 1e-12 && r.e_diff.is_none());
    }

    #[test]
    fn projection_csv_has_header_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        let pts = vec![ProjectedPoint { id: "a".into(), x: 1.0, y: -2.0, speaker_id: 1, emotion_id: 2 }];
        write_projection_csv(&path, &pts).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "id,x,y,speaker_id,emotion_id\na,1,-2,1,2\n");
    }
}
