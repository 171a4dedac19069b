//! Pipeline configuration: one JSON file with a `preset` field and a nested
//! record per stage.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cam::{AdlConfig, ClassifierArch, ClassifierHyper};
use crate::error::{Error, Result};
use crate::pepm::DEFAULT_POINTS;
use crate::postproc::PostprocConfig;
use crate::segmenter::{DecoderHyper, EncoderArch};
use crate::selftrain::RetrainConfig;
use crate::syndata::{DatasetParams, GeneratorParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Small data and short schedules; the full pipeline runs in minutes on a CPU.
    Desk,
    /// Classifier and decoder optimizer settings of the original method.
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::Config(format!("unknown preset `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CamConfig {
    pub arch: ClassifierArch,
    pub adl: AdlConfig,
    pub hyper: ClassifierHyper,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PepmConfig {
    pub k: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmenterConfig {
    pub encoder: EncoderArch,
    pub encoder_seed: u64,
    /// Seed of the decoder that is preliminarily fine-tuned on initial masks.
    pub decoder_seed: u64,
    pub hyper: DecoderHyper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub preset: Preset,
    pub seed: u64,
    pub syndata: DatasetParams,
    pub cam: CamConfig,
    pub postproc: PostprocConfig,
    pub pepm: PepmConfig,
    pub segmenter: SegmenterConfig,
    pub selftrain: RetrainConfig,
}

impl PipelineConfig {
    pub fn preset(preset: Preset) -> Self {
        let (cam_hyper, dec_hyper) = match preset {
            Preset::Desk => (ClassifierHyper::desk(), DecoderHyper::desk()),
            Preset::Paper => (ClassifierHyper::paper(), DecoderHyper::paper()),
        };
        let mut cfg = Self {
            preset,
            seed: 0,
            syndata: DatasetParams {
                train: 64,
                valid: 16,
                test: 32,
                slides: 12,
                generator: GeneratorParams::default(),
            },
            cam: CamConfig {
                arch: ClassifierArch::default(),
                adl: AdlConfig::default(),
                hyper: cam_hyper,
                seed: 0,
            },
            postproc: PostprocConfig::default(),
            pepm: PepmConfig {
                k: DEFAULT_POINTS,
                seed: 0,
            },
            segmenter: SegmenterConfig {
                encoder: EncoderArch::default(),
                encoder_seed: 0,
                decoder_seed: 0,
                hyper: dec_hyper,
            },
            selftrain: RetrainConfig::default(),
        };
        cfg.reseed(1);
        cfg
    }

    /// Sets the global seed and re-derives every per-stage seed from it.
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        self.cam.seed = seed.wrapping_mul(1000) + 1;
        self.pepm.seed = seed.wrapping_mul(1000) + 2;
        self.segmenter.encoder_seed = seed.wrapping_mul(1000) + 3;
        self.segmenter.decoder_seed = seed.wrapping_mul(1000) + 4;
        self.selftrain.base_seed = seed.wrapping_mul(1000) + 10;
    }

    pub fn validate(&self) -> Result<()> {
        self.syndata.generator.validate()?;
        if !self.syndata.generator.size.is_multiple_of(self.segmenter.encoder.downsample()) {
            return Err(Error::Config(
                "patch size must be divisible by the encoder stride".into(),
            ));
        }
        self.cam.adl.validate()?;
        if !(self.cam.arch.freq_cut_ratio > 0.0 && self.cam.arch.freq_cut_ratio < 1.0) {
            return Err(Error::Config("freq_cut_ratio must lie in (0, 1)".into()));
        }
        self.postproc.validate()?;
        if self.pepm.k == 0 {
            return Err(Error::Config("pepm.k must be at least 1".into()));
        }
        self.selftrain.validate()?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}
