//! Synthetic plane-wave channel data.
//!
//! Each transmission is modeled as a steered plane wave hitting point
//! scatterers. The received trace of element `e` is the sum over scatterers
//! of a two-way Gaussian pulse delayed by transmit wavefront arrival plus
//! return path, weighted by transmit apodization at the scatterer's lateral
//! projection onto the aperture, by the receive element's far-field
//! directivity, and by 1/r spreading on the return path.
//!
//! Synthesis runs at a high rate (default 148.4 MHz) so delays are smooth,
//! then a Kaiser-windowed-sinc polyphase decimator brings the data to the
//! beamforming rate (default 21.2 MHz).

use crate::par;
use crate::phantom::ScattererField;
use crate::probe::{self, PlaneWaveEvent, TransducerSpec};
use crate::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Channel data for a set of events: `panels[event][element][sample]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelDataset {
    pub panels: Vec<Vec<Vec<f64>>>,
    pub sampling_frequency: f64,
    /// Time of sample 0 relative to the transmit reference (wavefront
    /// crossing the earliest-firing element).
    pub t0: f64,
}

impl ChannelDataset {
    pub fn events(&self) -> usize {
        self.panels.len()
    }

    pub fn elements(&self) -> usize {
        self.panels.first().map_or(0, |p| p.len())
    }

    pub fn samples(&self) -> usize {
        self.panels.first().and_then(|p| p.first()).map_or(0, |t| t.len())
    }
}

/// Two-way pulse: squared Gaussian envelope times a carrier at the center
/// frequency. The -6 dB full width of the envelope spectrum equals
/// `fractional_bandwidth * center_frequency`.
#[derive(Clone, Copy, Debug)]
pub struct PulseModel {
    pub center_frequency: f64,
    pub fractional_bandwidth: f64,
}

impl PulseModel {
    /// Gaussian time constant: envelope^2 = exp(-t^2 / sigma^2).
    pub fn sigma(&self) -> f64 {
        2.0 * (2.0f64.ln()).sqrt()
            / (std::f64::consts::PI * self.fractional_bandwidth * self.center_frequency)
    }

    /// Support half-length: truncate where the squared envelope falls
    /// below 1e-3.
    pub fn half_duration(&self) -> f64 {
        self.sigma() * (1e3f64.ln()).sqrt()
    }
}

/// A pulse sampled symmetrically around its peak; sample `j` sits at
/// `t = (j - peak_index) / fs`.
#[derive(Clone, Debug)]
pub struct SampledPulse {
    pub samples: Vec<f64>,
    pub fs: f64,
    pub peak_index: usize,
}

pub fn pulse_waveform(model: &PulseModel, fs: f64) -> Result<SampledPulse> {
    if !(model.center_frequency > 0.0 && model.fractional_bandwidth > 0.0) {
        return Err(Error::InvalidArgument(
            "pulse frequency and bandwidth must be positive".into(),
        ));
    }
    if fs < 8.0 * model.center_frequency {
        return Err(Error::InvalidArgument(format!(
            "pulse sampling rate {fs} Hz is below 8x the center frequency"
        )));
    }
    let sigma = model.sigma();
    let half = (model.half_duration() * fs).ceil() as usize;
    let mut samples = Vec::with_capacity(2 * half + 1);
    for j in 0..=2 * half {
        let t = (j as f64 - half as f64) / fs;
        let env2 = (-(t * t) / (sigma * sigma)).exp();
        samples.push(env2 * (std::f64::consts::TAU * model.center_frequency * t).cos());
    }
    Ok(SampledPulse {
        samples,
        fs,
        peak_index: half,
    })
}

/// Far-field directivity of a rectangular element of width `width` at
/// off-axis angle with sine `sin_phi`: sinc(k * width/2 * sin_phi).
#[inline]
fn element_directivity(k_half_width: f64, sin_phi: f64) -> f64 {
    let u = k_half_width * sin_phi;
    if u.abs() < 1e-9 {
        1.0
    } else {
        u.sin() / u
    }
}

/// Synthesizes one event at the simulation rate. Returns
/// `panel[element][sample]` with `ceil(2 * record_depth / c * fs)` samples;
/// sample 0 is at t = 0 on the transmit reference clock.
pub fn simulate_event(
    field: &ScattererField,
    spec: &TransducerSpec,
    event: &PlaneWaveEvent,
    tx_apodization: &[f64],
    record_depth: f64,
) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    field.validate()?;
    if tx_apodization.len() != spec.element_count {
        return Err(Error::InvalidArgument(format!(
            "apodization has {} weights for {} elements",
            tx_apodization.len(),
            spec.element_count
        )));
    }
    if record_depth < field.max_depth() {
        return Err(Error::InvalidArgument(format!(
            "record depth {} m does not cover the deepest scatterer at {} m",
            record_depth,
            field.max_depth()
        )));
    }

    let c = spec.sound_speed;
    let fs = spec.sim_sampling_frequency;
    let n_samples = (2.0 * record_depth / c * fs).ceil() as usize;
    let positions = spec.element_positions();
    let pitch = spec.pitch;
    let x_first = positions[0];
    let n_el = spec.element_count;

    let pulse = pulse_waveform(
        &PulseModel {
            center_frequency: spec.center_frequency,
            fractional_bandwidth: spec.fractional_bandwidth,
        },
        fs,
    )?;
    // One trailing zero lets the interpolation read `table[j + 1]`
    // unconditionally.
    let mut table = pulse.samples.clone();
    table.push(0.0);
    let peak = pulse.peak_index as f64;
    let table_last = (pulse.samples.len() - 1) as f64;

    let sin_t = event.steering_angle.sin();
    let cos_t = event.steering_angle.cos();
    let tan_t = sin_t / cos_t;
    let min_proj = probe::transmit_reference_offset(spec, event.steering_angle) * c;
    let k_half_width = std::f64::consts::PI * spec.center_frequency * spec.element_width / c;

    // Per-scatterer transmit-side terms are element independent.
    let n_sc = field.len();
    let mut tau_tx = vec![0.0f64; n_sc];
    let mut w_tx = vec![0.0f64; n_sc];
    for i in 0..n_sc {
        tau_tx[i] = (field.x[i] * sin_t + field.z[i] * cos_t - min_proj) / c;
        // Lateral projection back along the propagation direction onto the
        // aperture, as a continuous element coordinate.
        let x_proj = field.x[i] - field.z[i] * tan_t;
        let e_star = (x_proj - x_first) / pitch;
        w_tx[i] = if e_star < 0.0 || e_star > (n_el - 1) as f64 {
            0.0
        } else {
            let j = (e_star.floor() as usize).min(n_el - 2);
            let frac = e_star - j as f64;
            tx_apodization[j] + frac * (tx_apodization[j + 1] - tx_apodization[j])
        };
    }

    let panel = par::map_indexed(n_el, |e| {
        let xe = positions[e];
        let mut row = vec![0.0f64; n_samples];
        for i in 0..n_sc {
            let w = w_tx[i] * field.amplitude[i];
            if w == 0.0 {
                continue;
            }
            let dx = field.x[i] - xe;
            let dz = field.z[i];
            let dist = (dx * dx + dz * dz).sqrt();
            let dir = element_directivity(k_half_width, dx.abs() / dist);
            let gain = w * dir / dist;
            let tau = tau_tx[i] + dist / c;
            // Index where pulse-table position 0 lands; the fractional part
            // is constant across the whole contribution.
            let start = tau * fs - peak;
            let k_begin = start.ceil().max(0.0) as usize;
            let k_end_f = (start + table_last).floor();
            if k_end_f < k_begin as f64 {
                continue;
            }
            let k_end = (k_end_f as usize).min(n_samples - 1);
            let pos = k_begin as f64 - start;
            let frac = pos - pos.floor();
            let mut j = pos.floor() as usize;
            for slot in row.iter_mut().take(k_end + 1).skip(k_begin) {
                let v = table[j] + frac * (table[j + 1] - table[j]);
                *slot += gain * v;
                j += 1;
            }
        }
        row
    });

    Ok(panel)
}

/// Zero-phase FIR low-pass for decimation by `factor`: Kaiser-windowed sinc,
/// 70 dB design attenuation, cutoff at 90% of the output Nyquist, unit DC
/// gain. Always an odd number of taps so the group delay is an integer.
pub fn design_decimation_filter(factor: usize) -> Vec<f64> {
    assert!(factor >= 1);
    if factor == 1 {
        return vec![1.0];
    }
    let atten = 70.0f64;
    let beta = 0.1102 * (atten - 8.7);
    // Transition band from 0.8x to 1.0x the output Nyquist, in cycles/sample
    // at the input rate.
    let transition = 0.1 / factor as f64;
    let mut taps =
        ((atten - 7.95) / (2.285 * std::f64::consts::TAU * transition)).ceil() as usize + 1;
    if taps % 2 == 0 {
        taps += 1;
    }
    let fc = 0.45 / factor as f64;
    let mid = (taps - 1) as f64 / 2.0;
    let i0_beta = bessel_i0(beta);
    let mut h: Vec<f64> = (0..taps)
        .map(|n| {
            let m = n as f64 - mid;
            let sinc = if m == 0.0 {
                2.0 * fc
            } else {
                (std::f64::consts::TAU * fc * m).sin() / (std::f64::consts::PI * m)
            };
            let r = m / mid;
            let window = bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / i0_beta;
            sinc * window
        })
        .collect();
    let sum: f64 = h.iter().sum();
    for v in &mut h {
        *v /= sum;
    }
    h
}

fn bessel_i0(x: f64) -> f64 {
    let half = x / 2.0;
    let mut term = 1.0f64;
    let mut sum = 1.0f64;
    let mut k = 1.0f64;
    loop {
        term *= (half / k) * (half / k);
        sum += term;
        if term < sum * 1e-17 {
            return sum;
        }
        k += 1.0;
    }
}

/// Decimates one panel with a precomputed filter, evaluating the convolution
/// only at the retained output instants (polyphase). Output sample `m` is
/// time-aligned with input sample `m * factor`, so `t0` is unchanged.
pub fn decimate_panel_with(
    panel: &[Vec<f64>],
    factor: usize,
    filter: &[f64],
) -> Result<Vec<Vec<f64>>> {
    if factor < 1 {
        return Err(Error::InvalidArgument("decimation factor must be >= 1".into()));
    }
    if factor == 1 {
        return Ok(panel.to_vec());
    }
    let mid = (filter.len() - 1) as isize / 2;
    let out = par::map_indexed(panel.len(), |e| {
        let x = &panel[e];
        let n_in = x.len() as isize;
        let n_out = (x.len() + factor - 1) / factor;
        let mut y = vec![0.0f64; n_out];
        for (m, slot) in y.iter_mut().enumerate() {
            let center = (m * factor) as isize;
            let mut acc = 0.0;
            for (j, &hj) in filter.iter().enumerate() {
                let idx = center + mid - j as isize;
                if idx >= 0 && idx < n_in {
                    acc += hj * x[idx as usize];
                }
            }
            *slot = acc;
        }
        y
    });
    Ok(out)
}

pub fn decimate_panel(panel: &[Vec<f64>], factor: usize) -> Result<Vec<Vec<f64>>> {
    let filter = design_decimation_filter(factor.max(1));
    decimate_panel_with(panel, factor, &filter)
}

/// Synthesizes every event of a sequence over a static scatterer field and
/// returns channel data already decimated to the output rate.
pub fn simulate_sequence_static(
    field: &ScattererField,
    spec: &TransducerSpec,
    events: &[PlaneWaveEvent],
    tx_apodization: &[f64],
    record_depth: f64,
) -> Result<ChannelDataset> {
    let factor = spec.decimation_factor();
    let filter = design_decimation_filter(factor);
    let mut panels = Vec::with_capacity(events.len());
    for event in events {
        let raw = simulate_event(field, spec, event, tx_apodization, record_depth)?;
        panels.push(decimate_panel_with(&raw, factor, &filter)?);
    }
    Ok(ChannelDataset {
        panels,
        sampling_frequency: spec.output_sampling_frequency,
        t0: 0.0,
    })
}

/// Derives one RNG substream per (event, element) so noise is independent of
/// iteration order and thread count.
fn stream_seed(seed: u64, event: u64, element: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ event.wrapping_mul(0x9E3779B97F4A7C15)) ^ element)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Adds white Gaussian noise sized against the signal power, where signal
/// power is the mean square over samples exceeding 1% of the global peak
/// magnitude (so quiet tails do not dilute the estimate). An infinite SNR
/// returns the input unchanged. The unit-variance noise realization depends
/// only on `(seed, event, element)`, so sweeping SNR with a fixed seed
/// rescales one common realization.
pub fn add_noise_for_snr(ds: &ChannelDataset, snr_db: f64, seed: u64) -> Result<ChannelDataset> {
    if snr_db == f64::INFINITY {
        return Ok(ds.clone());
    }
    if !snr_db.is_finite() {
        return Err(Error::InvalidArgument(format!("bad SNR {snr_db} dB")));
    }
    let peak = ds
        .panels
        .iter()
        .flatten()
        .flatten()
        .fold(0.0f64, |a, &v| a.max(v.abs()));
    if peak == 0.0 {
        return Err(Error::InvalidArgument(
            "cannot size noise for an all-zero dataset".into(),
        ));
    }
    let threshold = 0.01 * peak;
    let mut power_sum = 0.0;
    let mut power_n = 0u64;
    for panel in &ds.panels {
        for row in panel {
            for &v in row {
                if v.abs() > threshold {
                    power_sum += v * v;
                    power_n += 1;
                }
            }
        }
    }
    let signal_power = power_sum / power_n as f64;
    let sigma = (signal_power / 10f64.powf(snr_db / 10.0)).sqrt();

    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let n_events = ds.panels.len();
    let panels = par::map_indexed(n_events, |e| {
        let src = &ds.panels[e];
        let mut panel = Vec::with_capacity(src.len());
        for (el, row) in src.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, e as u64, el as u64));
            let noisy: Vec<f64> = row
                .iter()
                .map(|&v| v + sigma * normal.sample(&mut rng))
                .collect();
            panel.push(noisy);
        }
        panel
    });
    Ok(ChannelDataset {
        panels,
        sampling_frequency: ds.sampling_frequency,
        t0: ds.t0,
    })
}
