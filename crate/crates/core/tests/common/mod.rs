#![allow(dead_code)]

use std::path::Path;

use emodiff::config::RunConfig;
use emodiff::corpus::{generate_corpus, Corpus, LatentSignatures};

/// Small enough for debug-speed tests, large enough for every probe class.
pub fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::toy();
    cfg.corpus.utts_per_cell = 40;
    cfg.corpus.n_bands = 8;
    cfg.corpus.vocab_per_language = 6;
    cfg.corpus.tokens_per_utt = (3, 5);
    let m = &mut cfg.model;
    m.text_dim = 16;
    m.text_blocks = 1;
    m.text_heads = 2;
    m.text_ffn_dim = 32;
    m.adversary_gru_dim = 8;
    m.duration_hidden = 16;
    m.adaptor_dim = 16;
    m.adaptor_blocks = 1;
    m.adaptor_heads = 2;
    m.emotion_dim = 8;
    m.ref_channels = vec![4, 4];
    m.ref_gru_dim = 8;
    m.speaker_dim = 8;
    m.unet_base = 8;
    m.unet_mults = vec![1, 2];
    m.time_embed_dim = 8;
    cfg.train.batch_size = 4;
    cfg.train.steps = 6;
    cfg.train.checkpoint_every = 3;
    cfg.train.decoder_segment_frames = Some(8);
    cfg.schedule.inference_steps = 4;
    cfg.eval.oracle_paths = 2_000;
    cfg.eval.synth_trials = 4;
    cfg.sync_model_with_corpus();
    cfg.validate().expect("tiny preset is valid");
    cfg
}

pub fn corpus_in(dir: &Path, cfg: &RunConfig) -> (Corpus, LatentSignatures) {
    generate_corpus(&cfg.corpus, dir).expect("corpus generation")
}
