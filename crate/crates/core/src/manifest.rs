//! Run manifest: every knob of a run in one TOML document.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::acoustics::{AcousticParams, SignalBank};
use crate::env::{Env, EnvConfig};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::features::FeatureConfig;
use crate::qnet::NetArchitecture;
use crate::simulator::Simulator;
use crate::trainer::TrainConfig;

/// Overrides `output_dir` when set.
pub const OUT_ENV_VAR: &str = "ECHOLOCATE_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunManifest {
    pub output_dir: PathBuf,
    pub run_id: String,
    pub env: EnvConfig,
    pub acoustics: AcousticParams,
    pub features: FeatureConfig,
    pub arch: NetArchitecture,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Mono WAV files replacing the default pseudo-noise signals.
    pub signals: Vec<SignalFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalFile {
    pub id: u32,
    pub path: PathBuf,
    #[serde(default)]
    pub looped: bool,
}

impl Default for RunManifest {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs"),
            run_id: "default".into(),
            env: EnvConfig::default(),
            acoustics: AcousticParams::default(),
            features: FeatureConfig::default(),
            arch: NetArchitecture::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            signals: Vec::new(),
        }
    }
}

impl RunManifest {
    /// Parses and validates; `origin` only labels error messages.
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let m: Self = toml::from_str(text).map_err(|e| Error::Manifest {
            path: origin.to_path_buf(),
            message: e.to_string().trim_end().to_string(),
        })?;
        m.validate().map_err(|e| Error::Manifest {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok(m)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialise manifest: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.acoustics.validate()?;
        self.features.validate()?;
        self.arch.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        for (name, f_s) in [
            ("acoustics.f_s", self.acoustics.f_s),
            ("features.f_s", self.features.f_s),
        ] {
            if f_s != self.env.f_s {
                return Err(Error::Config(format!(
                    "env.f_s ({}) and {name} ({f_s}) must be equal",
                    self.env.f_s
                )));
            }
        }
        if self.arch.n_actions != self.env.n_actions() {
            return Err(Error::Config(format!(
                "arch.n_actions ({}) must equal the environment's action count ({}, env.allow_vertical = {})",
                self.arch.n_actions,
                self.env.n_actions(),
                self.env.allow_vertical
            )));
        }
        if self.arch.input_channels != self.env.mics.len() {
            return Err(Error::Config(format!(
                "arch.input_channels ({}) must equal the number of env.mics.offsets ({})",
                self.arch.input_channels,
                self.env.mics.len()
            )));
        }
        let frames = self.features.frames(self.env.clip_samples());
        if frames == 0 {
            return Err(Error::Config(format!(
                "env.clip_seconds {} is shorter than one features.win",
                self.env.clip_seconds
            )));
        }
        self.arch.encoded_extent(self.features.n_mels, frames)?;
        Ok(())
    }

    /// Directory for this run's artifacts, honouring the environment
    /// override.
    pub fn run_dir(&self) -> PathBuf {
        let base = std::env::var_os(OUT_ENV_VAR)
            .map(PathBuf::from)
            .unwrap_or_else(|| self.output_dir.clone());
        base.join(&self.run_id)
    }

    pub fn simulator(&self) -> Result<Simulator> {
        let mut bank = SignalBank::pseudo_noise(self.env.n_sources, self.env.clip_samples(), self.env.f_s);
        for s in &self.signals {
            bank.load_wav(s.id, &s.path, s.looped)?;
        }
        let env = Env::new(self.env.clone(), self.acoustics.clone(), Arc::new(bank))?;
        Simulator::new(env, self.features.clone())
    }
}

/// Reads, parses and validates a manifest file.
pub fn parse_manifest(path: &Path) -> Result<RunManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::Manifest {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    RunManifest::from_toml(&text, path)
}
