//! Image-source construction and fractional-delay tap synthesis.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::AcousticParams;
use crate::env::RoomSpec;
use crate::error::{Error, Result};
use crate::geometry::Vec3;

/// Mirror image of a source with the product of the reflection
/// coefficients of every wall it bounced off.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageSource {
    pub position: Vec3,
    pub reflection_gain: f64,
    pub order: u32,
}

/// Impulse response of one microphone.
///
/// Tap `i` holds time `i - lead` samples: the interpolation kernel of a
/// direct path reaches `lead` samples before its arrival time, so the
/// response may start before zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpulseResponse {
    pub taps: Vec<f64>,
    pub lead: usize,
}

impl ImpulseResponse {
    pub fn energy(&self) -> f64 {
        self.taps.iter().map(|t| t * t).sum()
    }

    /// Tap value at time `t` in samples; zero outside the stored range.
    pub fn at(&self, t: isize) -> f64 {
        let i = t + self.lead as isize;
        if i < 0 {
            return 0.0;
        }
        self.taps.get(i as usize).copied().unwrap_or(0.0)
    }

    /// Taps from time zero onward, the causal part written to audio files.
    pub fn causal(&self) -> &[f64] {
        &self.taps[self.lead.min(self.taps.len())..]
    }
}

/// All mirror images of `src` with at most `max_order` wall reflections.
///
/// Images whose gain vanishes (a fully absorbing wall on the path) are
/// dropped.
pub fn enumerate_image_sources(room: &RoomSpec, src: Vec3, max_order: u32) -> Result<Vec<ImageSource>> {
    if !room.contains(src) {
        return Err(Error::Domain(format!("source {src:?} lies outside the room")));
    }
    let beta: Vec<f64> = room.wall_absorption.iter().map(|a| (1.0 - a).sqrt()).collect();
    let s = src.to_array();
    let order = max_order as i64;
    // Per axis: image coordinate, reflection count and gain for every
    // (cell n, parity p) with |2n - p| <= max_order.
    let axis = |k: usize| -> Vec<(f64, i64, f64)> {
        let mut out = Vec::new();
        let n_max = (order + 1) / 2;
        for n in -n_max..=n_max {
            for p in 0..=1i64 {
                let refl = (2 * n - p).abs();
                if refl > order {
                    continue;
                }
                let lo = (n - p).abs() as i32;
                let hi = n.abs() as i32;
                let coord = (1 - 2 * p) as f64 * s[k] + 2.0 * n as f64 * room.dims[k];
                let gain = beta[2 * k].powi(lo) * beta[2 * k + 1].powi(hi);
                out.push((coord, refl, gain));
            }
        }
        out
    };
    let (ax, ay, az) = (axis(0), axis(1), axis(2));
    let mut images = Vec::new();
    for &(x, ox, gx) in &ax {
        for &(y, oy, gy) in &ay {
            if ox + oy > order {
                continue;
            }
            for &(z, oz, gz) in &az {
                let total = ox + oy + oz;
                if total > order {
                    continue;
                }
                let reflection_gain = gx * gy * gz;
                if reflection_gain <= 0.0 {
                    continue;
                }
                images.push(ImageSource {
                    position: Vec3::new(x, y, z),
                    reflection_gain,
                    order: total as u32,
                });
            }
        }
    }
    // Direct path first, then by order; ties keep enumeration order.
    images.sort_by_key(|i| i.order);
    Ok(images)
}

fn sinc(t: f64) -> f64 {
    if t.abs() < 1e-12 {
        1.0
    } else {
        (PI * t).sin() / (PI * t)
    }
}

/// Hann-windowed sinc kernel for a delay of `delay` samples, sampled at
/// the `len` integers closest to it. Returns the first integer time.
pub(crate) fn fractional_delay_kernel(delay: f64, len: usize, out: &mut Vec<f64>) -> isize {
    let half = (len / 2) as isize;
    let centre = delay.round() as isize;
    let width = half as f64 + 1.0;
    out.clear();
    out.extend((centre - half..=centre + half).map(|n| {
        let t = n as f64 - delay;
        0.5 * (1.0 + (PI * t / width).cos()) * sinc(t)
    }));
    centre - half
}

/// Sum of delayed, attenuated windowed-sinc taps, one cluster per image.
pub fn render_rir(images: &[ImageSource], mic: Vec3, params: &AcousticParams) -> Result<ImpulseResponse> {
    if images.is_empty() {
        return Err(Error::Usage("no image sources to render".into()));
    }
    let scale = params.f_s / params.c;
    let mut arrivals = Vec::with_capacity(images.len());
    for img in images {
        let d = img.position.distance(mic);
        if !(d > 1e-9) {
            return Err(Error::DegenerateGeometry(img.position.to_array()));
        }
        arrivals.push((d * scale, img.reflection_gain / d));
    }
    let lead = params.frac_delay_len / 2;
    let last = arrivals.iter().map(|(t, _)| t.round() as usize).max().unwrap_or(0);
    let mut taps = vec![0.0; last + 2 * lead + 1];
    let mut kernel = Vec::with_capacity(params.frac_delay_len);
    for (delay, amp) in arrivals {
        let start = fractional_delay_kernel(delay, params.frac_delay_len, &mut kernel);
        let base = (start + lead as isize) as usize;
        for (tap, k) in taps[base..base + kernel.len()].iter_mut().zip(&kernel) {
            *tap += amp * k;
        }
    }
    Ok(ImpulseResponse { taps, lead })
}
