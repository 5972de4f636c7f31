//! Shoebox room acoustics by the image-source method.
//!
//! Every action period the full clip is re-synthesised from scratch at the
//! agent's current pose: each active source's signal is convolved with the
//! impulse response from the source to each microphone. Nothing is carried
//! over between poses.

mod ism;
mod signal;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

pub use ism::{enumerate_image_sources, render_rir, ImageSource, ImpulseResponse};
pub use signal::{pseudo_noise, write_wav_pcm16, SignalBank, SourceSignal};

use crate::env::{AgentPose, MicArraySpec, RoomSpec, SourceSpec};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcousticParams {
    /// Speed of sound, m/s.
    pub c: f64,
    pub max_order: u32,
    pub f_s: f64,
    /// Taps of the windowed-sinc fractional delay, odd.
    pub frac_delay_len: usize,
}

impl Default for AcousticParams {
    fn default() -> Self {
        Self {
            c: 343.0,
            max_order: 0,
            f_s: 16_000.0,
            frac_delay_len: 81,
        }
    }
}

impl AcousticParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0) || !(self.f_s > 0.0) {
            return Err(Error::Config("c and f_s must be positive".into()));
        }
        if self.frac_delay_len % 2 == 0 {
            return Err(Error::Config(format!(
                "frac_delay_len must be odd, got {}",
                self.frac_delay_len
            )));
        }
        Ok(())
    }
}

/// K-channel clip, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    channels: usize,
    samples: usize,
    data: Vec<f64>,
}

impl Waveform {
    pub fn zeros(channels: usize, samples: usize) -> Self {
        Self {
            channels,
            samples,
            data: vec![0.0; channels * samples],
        }
    }

    pub fn from_channels(channels: Vec<Vec<f64>>) -> Result<Self> {
        let samples = channels.first().map_or(0, Vec::len);
        if channels.iter().any(|c| c.len() != samples) {
            return Err(Error::ShapeMismatch("channels differ in length".into()));
        }
        Ok(Self {
            channels: channels.len(),
            samples,
            data: channels.concat(),
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn channel(&self, k: usize) -> &[f64] {
        &self.data[k * self.samples..(k + 1) * self.samples]
    }

    pub fn channel_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.data[k * self.samples..(k + 1) * self.samples]
    }

    pub fn rms(&self, k: usize) -> f64 {
        let c = self.channel(k);
        (c.iter().map(|s| s * s).sum::<f64>() / c.len().max(1) as f64).sqrt()
    }
}

/// Above this many non-zero taps the convolution goes through the FFT.
const DIRECT_TAP_LIMIT: usize = 384;

/// Adds to `out[t]` the signal heard through `rir` at times `0..out.len()`.
fn accumulate_convolution(out: &mut [f64], rir: &ImpulseResponse, signal: &SourceSignal) {
    let n = out.len();
    let l = rir.taps.len();
    if l == 0 || n == 0 {
        return;
    }
    // x[u] is the emitted sample at time u - (l - 1 - lead); the wanted
    // output is the full convolution (h * x) at indices l-1 .. l-1+n.
    let x = signal.window(rir.lead as isize + 1 - l as isize, n + l - 1);
    let nonzero = rir.taps.iter().filter(|t| **t != 0.0).count();
    if nonzero <= DIRECT_TAP_LIMIT {
        for (i, &h) in rir.taps.iter().enumerate() {
            if h == 0.0 {
                continue;
            }
            let src = &x[l - 1 - i..l - 1 - i + n];
            for (o, s) in out.iter_mut().zip(src) {
                *o += h * s;
            }
        }
    } else {
        let size = (x.len() + l - 1).next_power_of_two();
        let mut a: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
        a.resize(size, Complex::new(0.0, 0.0));
        let mut b: Vec<Complex<f64>> = rir.taps.iter().map(|&v| Complex::new(v, 0.0)).collect();
        b.resize(size, Complex::new(0.0, 0.0));
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(size);
        fwd.process(&mut a);
        fwd.process(&mut b);
        for (p, q) in a.iter_mut().zip(&b) {
            *p *= q;
        }
        planner.plan_fft_inverse(size).process(&mut a);
        let norm = 1.0 / size as f64;
        for (o, v) in out.iter_mut().zip(&a[l - 1..l - 1 + n]) {
            *o += v.re * norm;
        }
    }
}

/// Renders the clip each microphone receives from the active sources.
pub fn render_observation(
    room: &RoomSpec,
    sources: &[&SourceSpec],
    agent: &AgentPose,
    mics: &MicArraySpec,
    bank: &SignalBank,
    params: &AcousticParams,
    clip_seconds: f64,
) -> Result<Waveform> {
    let n = (clip_seconds * params.f_s).round() as usize;
    let mic_positions = mics.positions(agent);
    let mut wave = Waveform::zeros(mic_positions.len(), n);
    for source in sources {
        let signal = bank.get(source.signal_id)?;
        let images = enumerate_image_sources(room, source.position, params.max_order)?;
        for (k, &mic) in mic_positions.iter().enumerate() {
            let rir = render_rir(&images, mic, params)?;
            accumulate_convolution(wave.channel_mut(k), &rir, signal);
        }
    }
    Ok(wave)
}
