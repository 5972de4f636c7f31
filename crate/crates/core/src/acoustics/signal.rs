//! Source waveforms: deterministic band-limited noise bursts or mono WAV
//! files.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::seed;

const NOISE_BAND_HZ: (f64, f64) = (200.0, 6000.0);
const NOISE_PEAK: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct SourceSignal {
    pub id: u32,
    pub samples: Vec<f64>,
    /// When set the source repeats its clip indefinitely.
    pub looped: bool,
}

impl SourceSignal {
    pub fn new(id: u32, samples: Vec<f64>, looped: bool) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Config(format!("signal {id} is empty")));
        }
        if let Some(bad) = samples.iter().find(|s| !(s.abs() <= 1.0)) {
            return Err(Error::Config(format!("signal {id} has sample {bad} outside [-1, 1]")));
        }
        Ok(Self { id, samples, looped })
    }

    /// Emitted sample at time `t`; the source starts at `t = 0`.
    pub fn at(&self, t: isize) -> f64 {
        if t < 0 {
            return 0.0;
        }
        let t = t as usize;
        if self.looped {
            self.samples[t % self.samples.len()]
        } else {
            self.samples.get(t).copied().unwrap_or(0.0)
        }
    }

    /// `len` emitted samples starting at time `start`.
    pub fn window(&self, start: isize, len: usize) -> Vec<f64> {
        (0..len as isize).map(|i| self.at(start + i)).collect()
    }
}

/// Band-limited pseudo-noise burst, a pure function of `id`.
pub fn pseudo_noise(id: u32, len: usize, f_s: f64) -> SourceSignal {
    let mut rng = seed::derived_rng(0x5349_474e, &[u64::from(id)]);
    let mut buf: Vec<Complex<f64>> = (0..len).map(|_| Complex::new(rng.gen_range(-1.0..1.0), 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(len).process(&mut buf);
    let (lo, hi) = NOISE_BAND_HZ;
    for (k, bin) in buf.iter_mut().enumerate() {
        let f = k.min(len - k) as f64 * f_s / len as f64;
        if f < lo || f > hi {
            *bin = Complex::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(len).process(&mut buf);
    let peak = buf.iter().map(|c| c.re.abs()).fold(0.0, f64::max);
    let scale = if peak > 0.0 { NOISE_PEAK / peak } else { 0.0 };
    let samples = buf.iter().map(|c| c.re * scale).collect();
    SourceSignal {
        id,
        samples,
        looped: false,
    }
}

/// Signals addressed by id, all at one sampling rate.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalBank {
    f_s: f64,
    signals: BTreeMap<u32, SourceSignal>,
}

impl SignalBank {
    pub fn new(f_s: f64) -> Self {
        Self {
            f_s,
            signals: BTreeMap::new(),
        }
    }

    /// Bank holding the default noise burst for ids `0..n`.
    pub fn pseudo_noise(n: usize, len: usize, f_s: f64) -> Self {
        let mut bank = Self::new(f_s);
        for id in 0..n as u32 {
            bank.insert(pseudo_noise(id, len, f_s));
        }
        bank
    }

    pub fn f_s(&self) -> f64 {
        self.f_s
    }

    pub fn insert(&mut self, signal: SourceSignal) {
        self.signals.insert(signal.id, signal);
    }

    pub fn get(&self, id: u32) -> Result<&SourceSignal> {
        self.signals
            .get(&id)
            .ok_or_else(|| Error::Config(format!("no signal with id {id} in the bank")))
    }

    pub fn len(&self) -> usize {
        self.signals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signals.is_empty()
    }

    /// Loads a mono WAV file as signal `id`. The file rate must match.
    pub fn load_wav(&mut self, id: u32, path: &Path, looped: bool) -> Result<()> {
        let mut reader = hound::WavReader::open(path)?;
        let spec = reader.spec();
        if spec.channels != 1 {
            return Err(Error::Config(format!(
                "{}: expected mono audio, found {} channels",
                path.display(),
                spec.channels
            )));
        }
        if f64::from(spec.sample_rate) != self.f_s {
            return Err(Error::Config(format!(
                "{}: sample rate {} differs from f_s {}",
                path.display(),
                spec.sample_rate,
                self.f_s
            )));
        }
        let samples: Vec<f64> = match spec.sample_format {
            hound::SampleFormat::Float => reader
                .samples::<f32>()
                .map(|s| s.map(f64::from))
                .collect::<Result<_, _>>()?,
            hound::SampleFormat::Int => {
                let full = f64::from(1u32 << (spec.bits_per_sample - 1));
                reader
                    .samples::<i32>()
                    .map(|s| s.map(|v| f64::from(v) / full))
                    .collect::<Result<_, _>>()?
            }
        };
        self.insert(SourceSignal::new(id, samples, looped)?);
        Ok(())
    }
}

/// Writes `samples` (nominally in [-1, 1]) as 16-bit PCM, clipping.
pub fn write_wav_pcm16(path: &Path, samples: &[f64], f_s: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: f_s,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in samples {
        writer.write_sample((s.clamp(-1.0, 1.0) * f64::from(i16::MAX)).round() as i16)?;
    }
    writer.finalize()?;
    Ok(())
}
