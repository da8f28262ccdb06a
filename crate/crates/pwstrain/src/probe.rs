//! Transducer description, plane-wave imaging sequences, transmit delays and
//! Tukey apodization.
//!
//! The linear array lies on z = 0, centered on x = 0, with elements indexed
//! left to right. Depth is +z, so every imaged point has z > 0. Angles are in
//! radians, measured from the array normal, positive toward +x.

use crate::{Error, Result};

/// Geometry and sampling description of a linear-array probe.
#[derive(Clone, Debug, PartialEq)]
pub struct TransducerSpec {
    /// Pulse center frequency in Hz.
    pub center_frequency: f64,
    /// Element center-to-center spacing in meters.
    pub pitch: f64,
    /// Active element width in meters (must not exceed the pitch).
    pub element_width: f64,
    pub element_count: usize,
    /// Speed of sound assumed by both simulation and beamforming, m/s.
    pub sound_speed: f64,
    /// Two-way fractional bandwidth of the pulse at -6 dB.
    pub fractional_bandwidth: f64,
    /// Channel-data synthesis rate in Hz.
    pub sim_sampling_frequency: f64,
    /// Rate of the decimated data handed to beamforming, Hz. Must divide the
    /// simulation rate by an integer factor.
    pub output_sampling_frequency: f64,
}

impl TransducerSpec {
    /// 5.3 MHz linear vascular probe used as the default everywhere.
    pub fn default_probe() -> Self {
        TransducerSpec {
            center_frequency: 5.3e6,
            pitch: 230e-6,
            element_width: 200e-6,
            element_count: 191,
            sound_speed: 1540.0,
            fractional_bandwidth: 0.6,
            sim_sampling_frequency: 148.4e6,
            output_sampling_frequency: 21.2e6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.center_frequency > 0.0
            && self.pitch > 0.0
            && self.element_width > 0.0
            && self.sound_speed > 0.0
            && self.fractional_bandwidth > 0.0)
        {
            return Err(Error::InvalidArgument(
                "probe frequencies, pitch, width, speed and bandwidth must be positive".into(),
            ));
        }
        if self.element_count < 2 {
            return Err(Error::InvalidArgument(
                "probe needs at least 2 elements".into(),
            ));
        }
        if self.element_width > self.pitch * (1.0 + 1e-12) {
            return Err(Error::InvalidArgument(format!(
                "element width {} m exceeds pitch {} m",
                self.element_width, self.pitch
            )));
        }
        // The decimated rate must still oversample the upper band edge.
        let band_top = self.center_frequency * (1.0 + self.fractional_bandwidth / 2.0);
        if self.output_sampling_frequency < 2.0 * band_top {
            return Err(Error::InvalidArgument(format!(
                "output rate {} Hz under-samples the pulse band (top {} Hz)",
                self.output_sampling_frequency, band_top
            )));
        }
        let ratio = self.sim_sampling_frequency / self.output_sampling_frequency;
        if ratio < 1.0 - 1e-9 || (ratio - ratio.round()).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "simulation rate must be an integer multiple of the output rate (ratio {ratio})"
            )));
        }
        Ok(())
    }

    pub fn wavelength(&self) -> f64 {
        self.sound_speed / self.center_frequency
    }

    pub fn decimation_factor(&self) -> usize {
        (self.sim_sampling_frequency / self.output_sampling_frequency).round() as usize
    }

    /// Element center x-coordinates, symmetric about 0.
    pub fn element_positions(&self) -> Vec<f64> {
        let mid = (self.element_count as f64 - 1.0) / 2.0;
        (0..self.element_count)
            .map(|e| (e as f64 - mid) * self.pitch)
            .collect()
    }

    pub fn aperture_width(&self) -> f64 {
        (self.element_count as f64 - 1.0) * self.pitch + self.element_width
    }
}

/// One plane-wave transmission.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlaneWaveEvent {
    /// Steering angle of the transmitted plane wave.
    pub steering_angle: f64,
    /// Angle of the receive medium this event is beamformed on.
    pub medium_angle: f64,
    /// Position of the event in firing order.
    pub event_index: usize,
}

/// A full firing schedule: for each receive medium, a fan of steering angles
/// centered on that medium's angle. Events are ordered medium-major with
/// angles ascending inside each medium.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagingSequence {
    pub events: Vec<PlaneWaveEvent>,
    pub medium_angles: Vec<f64>,
    pub events_per_medium: usize,
    /// Pulse repetition frequency: events are 1/prf apart in time.
    pub prf: f64,
}

impl ImagingSequence {
    /// Events belonging to one receive medium, in firing order.
    pub fn events_for_medium(&self, medium: usize) -> &[PlaneWaveEvent] {
        let n = self.events_per_medium;
        &self.events[medium * n..(medium + 1) * n]
    }
}

/// Builds the firing schedule. Each medium gets `events_per_medium` steering
/// angles spaced uniformly over `[medium - span, medium + span]` with both
/// endpoints included; a single event per medium steers exactly along the
/// medium angle.
pub fn build_sequence(
    medium_angles: &[f64],
    events_per_medium: usize,
    span: f64,
    prf: f64,
) -> Result<ImagingSequence> {
    if medium_angles.is_empty() {
        return Err(Error::InvalidArgument("no receive mediums given".into()));
    }
    if events_per_medium == 0 {
        return Err(Error::InvalidArgument(
            "need at least one event per medium".into(),
        ));
    }
    if span < 0.0 || !span.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "steering span must be finite and non-negative, got {span}"
        )));
    }
    if prf <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "prf must be positive, got {prf}"
        )));
    }
    let mut events = Vec::with_capacity(medium_angles.len() * events_per_medium);
    for &medium in medium_angles {
        for k in 0..events_per_medium {
            let steering = if events_per_medium == 1 {
                medium
            } else {
                // 2k/(n-1) - 1 sweeps [-1, 1] hitting both endpoints exactly.
                let frac = (2 * k) as f64 / (events_per_medium - 1) as f64 - 1.0;
                medium + span * frac
            };
            events.push(PlaneWaveEvent {
                steering_angle: steering,
                medium_angle: medium,
                event_index: events.len(),
            });
        }
    }
    Ok(ImagingSequence {
        events,
        medium_angles: medium_angles.to_vec(),
        events_per_medium,
        prf,
    })
}

/// Default receive-medium fan: sin(angle) = 1/3 on either side of broadside.
/// Symmetric angles make the lateral-displacement triangulation well posed.
pub fn default_medium_angle() -> f64 {
    (1.0f64 / 3.0).asin()
}

pub fn default_medium_angles() -> [f64; 3] {
    let a = default_medium_angle();
    [-a, 0.0, a]
}

/// Time offset of the transmit wavefront reference for a steered plane wave:
/// the wavefront crosses the earliest element at t = 0.
pub fn transmit_reference_offset(spec: &TransducerSpec, steering_angle: f64) -> f64 {
    let sin_t = steering_angle.sin();
    let positions = spec.element_positions();
    let min = positions
        .iter()
        .map(|&x| x * sin_t)
        .fold(f64::INFINITY, f64::min);
    min / spec.sound_speed
}

/// Per-element firing delays for a steered plane wave. The earliest element
/// fires at exactly 0; the wavefront geometry below the array is the single
/// reference shared by simulation and beamforming.
pub fn transmit_delays(spec: &TransducerSpec, steering_angle: f64) -> Vec<f64> {
    let sin_t = steering_angle.sin();
    let positions = spec.element_positions();
    let projections: Vec<f64> = positions.iter().map(|&x| x * sin_t).collect();
    let min = projections.iter().copied().fold(f64::INFINITY, f64::min);
    projections
        .iter()
        .map(|&p| (p - min) / spec.sound_speed)
        .collect()
}

/// Continuous Tukey (tapered cosine) profile on [0, 1]: flat in the middle,
/// cosine tapers over `fraction / 2` of the span at each end, zero outside.
pub fn tukey_profile(u: f64, fraction: f64) -> f64 {
    if !(0.0..=1.0).contains(&u) {
        return 0.0;
    }
    if fraction <= 0.0 {
        return 1.0;
    }
    let r = fraction.min(1.0);
    let edge = u.min(1.0 - u);
    if edge < r / 2.0 {
        0.5 * (1.0 + (std::f64::consts::PI * (2.0 * edge / r - 1.0)).cos())
    } else {
        1.0
    }
}

/// Samples the Tukey profile on `n` points spanning [0, 1] inclusive.
pub fn tukey_apodization(n: usize, fraction: f64) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::InvalidArgument(
            "apodization needs at least one sample".into(),
        ));
    }
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!(
            "tukey fraction must lie in [0, 1], got {fraction}"
        )));
    }
    if n == 1 {
        return Ok(vec![1.0]);
    }
    Ok((0..n)
        .map(|i| tukey_profile(i as f64 / (n - 1) as f64, fraction))
        .collect())
}
