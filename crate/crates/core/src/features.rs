//! Log-mel front end turning a K-channel clip into the network's input planes.

use std::fmt;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::acoustics::Waveform;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub f_s: f64,
    pub win: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub log_floor: f64,
    pub f_min: f64,
    /// Upper edge of the filterbank; Nyquist when absent.
    pub f_max: Option<f64>,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            f_s: 16_000.0,
            win: 512,
            hop: 256,
            n_mels: 64,
            log_floor: 1e-10,
            f_min: 0.0,
            f_max: None,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        let f_max = self.f_max();
        if self.win == 0 || self.hop == 0 || self.hop > self.win {
            return Err(Error::Config(format!(
                "need 0 < hop <= win, got hop {} win {}",
                self.hop, self.win
            )));
        }
        if self.n_mels == 0 {
            return Err(Error::Config("n_mels must be at least 1".into()));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::Config("log_floor must be positive".into()));
        }
        if !(self.f_min >= 0.0 && f_max > self.f_min && f_max <= self.f_s / 2.0) {
            return Err(Error::Config(format!(
                "mel range [{}, {}] invalid for f_s {}",
                self.f_min, f_max, self.f_s
            )));
        }
        Ok(())
    }

    pub fn f_max(&self) -> f64 {
        self.f_max.unwrap_or(self.f_s / 2.0)
    }

    /// Frames produced from `n` samples; zero when `n < win`.
    pub fn frames(&self, n: usize) -> usize {
        if n < self.win {
            0
        } else {
            1 + (n - self.win) / self.hop
        }
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Centre frequencies of the `n_mels` bands.
pub fn mel_centres(config: &FeatureConfig) -> Vec<f64> {
    band_edges(config)[1..=config.n_mels].to_vec()
}

fn band_edges(config: &FeatureConfig) -> Vec<f64> {
    let lo = hz_to_mel(config.f_min);
    let hi = hz_to_mel(config.f_max());
    let step = (hi - lo) / (config.n_mels + 1) as f64;
    (0..config.n_mels + 2)
        .map(|i| mel_to_hz(lo + step * i as f64))
        .collect()
}

/// `channels x n_mels x frames` log-mel tensor.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    channels: usize,
    n_mels: usize,
    frames: usize,
    data: Vec<f32>,
}

impl fmt::Debug for FeatureMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FeatureMap")
            .field("channels", &self.channels)
            .field("n_mels", &self.n_mels)
            .field("frames", &self.frames)
            .finish_non_exhaustive()
    }
}

impl FeatureMap {
    pub fn new(channels: usize, n_mels: usize, frames: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * n_mels * frames {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {channels}x{n_mels}x{frames} feature map",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            n_mels,
            frames,
            data,
        })
    }

    pub fn zeros(channels: usize, n_mels: usize, frames: usize) -> Self {
        Self {
            channels,
            n_mels,
            frames,
            data: vec![0.0; channels * n_mels * frames],
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.n_mels, self.frames]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, channel: usize, mel: usize, frame: usize) -> f32 {
        self.data[(channel * self.n_mels + mel) * self.frames + frame]
    }

    pub fn channel(&self, k: usize) -> &[f32] {
        let plane = self.n_mels * self.frames;
        &self.data[k * plane..(k + 1) * plane]
    }

    /// One row per (channel, mel band): `channel,mel,v0,v1,...`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("channel,mel");
        for t in 0..self.frames {
            out.push_str(&format!(",t{t}"));
        }
        out.push('\n');
        for c in 0..self.channels {
            for m in 0..self.n_mels {
                out.push_str(&format!("{c},{m}"));
                for t in 0..self.frames {
                    out.push_str(&format!(",{}", self.get(c, m, t)));
                }
                out.push('\n');
            }
        }
        out
    }
}

struct MelBand {
    first_bin: usize,
    weights: Vec<f64>,
}

/// Precomputed window, FFT plan and filterbank.
#[derive(Clone)]
pub struct LogMel {
    config: FeatureConfig,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    bands: Arc<Vec<MelBand>>,
}

impl fmt::Debug for LogMel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LogMel").field("config", &self.config).finish()
    }
}

impl LogMel {
    pub fn new(config: FeatureConfig) -> Result<Self> {
        config.validate()?;
        let win = config.win;
        // Periodic Hann.
        let window = (0..win)
            .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / win as f64).cos())
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(win);
        let edges = band_edges(&config);
        let bin_hz = config.f_s / win as f64;
        let n_bins = win / 2 + 1;
        let bands = (0..config.n_mels)
            .map(|b| {
                let (lo, centre, hi) = (edges[b], edges[b + 1], edges[b + 2]);
                let weight = |k: usize| {
                    let f = k as f64 * bin_hz;
                    if f > lo && f <= centre {
                        (f - lo) / (centre - lo)
                    } else if f > centre && f < hi {
                        (hi - f) / (hi - centre)
                    } else {
                        0.0
                    }
                };
                let bins: Vec<usize> = (0..n_bins).filter(|&k| weight(k) > 0.0).collect();
                match (bins.first(), bins.last()) {
                    (Some(&a), Some(&z)) => MelBand {
                        first_bin: a,
                        weights: (a..=z).map(weight).collect(),
                    },
                    _ => MelBand {
                        first_bin: 0,
                        weights: Vec::new(),
                    },
                }
            })
            .collect();
        Ok(Self {
            config,
            window,
            fft,
            bands: Arc::new(bands),
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.config
    }

    /// Filterbank weight of band `b` at FFT bin `k`.
    pub fn filter_weight(&self, b: usize, k: usize) -> f64 {
        let band = &self.bands[b];
        k.checked_sub(band.first_bin)
            .and_then(|i| band.weights.get(i).copied())
            .unwrap_or(0.0)
    }

    pub fn extract(&self, wave: &Waveform) -> Result<FeatureMap> {
        let cfg = &self.config;
        let n = wave.samples();
        if n < cfg.win {
            return Err(Error::InputTooShort {
                samples: n,
                needed: cfg.win,
            });
        }
        let frames = cfg.frames(n);
        let n_mels = cfg.n_mels;
        let floor = cfg.log_floor;
        let mut data = vec![0f32; wave.channels() * n_mels * frames];
        let mut buf = vec![Complex::new(0.0, 0.0); cfg.win];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0; cfg.win / 2 + 1];
        for c in 0..wave.channels() {
            let x = wave.channel(c);
            for t in 0..frames {
                let frame = &x[t * cfg.hop..t * cfg.hop + cfg.win];
                for ((b, s), w) in buf.iter_mut().zip(frame).zip(&self.window) {
                    *b = Complex::new(s * w, 0.0);
                }
                self.fft.process_with_scratch(&mut buf, &mut scratch);
                for (p, b) in power.iter_mut().zip(&buf) {
                    *p = b.norm_sqr();
                }
                for (m, band) in self.bands.iter().enumerate() {
                    let e: f64 = band
                        .weights
                        .iter()
                        .zip(&power[band.first_bin..])
                        .map(|(w, p)| w * p)
                        .sum();
                    data[(c * n_mels + m) * frames + t] = e.max(floor).log10() as f32;
                }
            }
        }
        FeatureMap::new(wave.channels(), n_mels, frames, data)
    }
}

/// One-shot log-mel extraction.
pub fn logmel(wave: &Waveform, config: &FeatureConfig) -> Result<FeatureMap> {
    LogMel::new(config.clone())?.extract(wave)
}
