//! Experiment configuration: TOML with explicit physical units, resolved
//! into the library's SI-typed structures.
//!
//! Every physical quantity accepts either a bare number (already in the base
//! unit: meters, seconds, hertz, radians, dB, m/s) or a string with an
//! explicit unit, e.g. `pitch = "230 um"`. Unknown keys are rejected
//! everywhere so a typo cannot silently fall back to a default.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::beamform::{make_mediums, BeamGrid, Interpolation};
use crate::metrics::VesselRegions;
use crate::phantom::{self, RadialMotionModel, VesselPhantomParams};
use crate::probe::{build_sequence, default_medium_angle, ImagingSequence, TransducerSpec};
use crate::strain::StrainWindows;
use crate::track::TrackingParams;
use crate::{Error, Result};

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawQuantity {
    Number(f64),
    Text(String),
}

/// Splits "230 um" into value and unit; the unit is the longest trailing run
/// of letters, `°`, `µ`, or `/`.
fn parse_with_units(text: &str, what: &str, units: &[(&str, f64)]) -> std::result::Result<f64, String> {
    let text = text.trim();
    let unit_start = text
        .char_indices()
        .rev()
        .take_while(|(_, c)| c.is_alphabetic() || *c == '°' || *c == 'µ' || *c == '/')
        .last()
        .map(|(i, _)| i)
        .unwrap_or(text.len());
    let (number, unit) = text.split_at(unit_start);
    let number = number.trim();
    if number.is_empty() {
        return Err(format!("{what} value {text:?} has no numeric part"));
    }
    let value: f64 = number
        .parse()
        .map_err(|_| format!("{what} value {text:?} has a malformed number"))?;
    if unit.is_empty() {
        return Err(format!(
            "{what} value {text:?} is missing a unit; expected one of {}",
            unit_names(units)
        ));
    }
    match units.iter().find(|(name, _)| *name == unit) {
        Some((_, factor)) => Ok(value * factor),
        None => Err(format!(
            "{what} has unknown unit {unit:?}; expected one of {}",
            unit_names(units)
        )),
    }
}

fn unit_names(units: &[(&str, f64)]) -> String {
    units
        .iter()
        .map(|(n, _)| *n)
        .collect::<Vec<_>>()
        .join(", ")
}

macro_rules! quantity {
    ($name:ident, $what:literal, $units:expr) => {
        /// Physical quantity normalized to its base unit.
        #[derive(Clone, Copy, Debug, PartialEq)]
        pub struct $name(pub f64);

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D>(deserializer: D) -> std::result::Result<Self, D::Error>
            where
                D: serde::Deserializer<'de>,
            {
                match RawQuantity::deserialize(deserializer)? {
                    RawQuantity::Number(v) => Ok($name(v)),
                    RawQuantity::Text(s) => parse_with_units(&s, $what, $units)
                        .map($name)
                        .map_err(serde::de::Error::custom),
                }
            }
        }
    };
}

const DEG: f64 = std::f64::consts::PI / 180.0;

quantity!(Meters, "length", &[
    ("m", 1.0),
    ("cm", 1e-2),
    ("mm", 1e-3),
    ("um", 1e-6),
    ("µm", 1e-6),
    ("nm", 1e-9),
]);
quantity!(Seconds, "time", &[
    ("s", 1.0),
    ("ms", 1e-3),
    ("us", 1e-6),
    ("µs", 1e-6),
    ("ns", 1e-9),
]);
quantity!(Hertz, "frequency", &[
    ("Hz", 1.0),
    ("kHz", 1e3),
    ("MHz", 1e6),
    ("GHz", 1e9),
]);
quantity!(Radians, "angle", &[
    ("rad", 1.0),
    ("mrad", 1e-3),
    ("deg", DEG),
    ("°", DEG),
]);
quantity!(Decibels, "level", &[("dB", 1.0)]);
quantity!(MetersPerSecond, "speed", &[
    ("m/s", 1.0),
    ("mm/s", 1e-3),
    ("km/s", 1e3),
]);

fn pair(p: [Meters; 2]) -> [f64; 2] {
    [p[0].0, p[1].0]
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub elements: usize,
    pub pitch: Meters,
    pub element_width: Meters,
    pub center_frequency: Hertz,
    pub fractional_bandwidth: f64,
    pub sim_sampling_frequency: Hertz,
    pub output_sampling_frequency: Hertz,
    pub sound_speed: MetersPerSecond,
    /// Tukey taper fraction of the transmit apodization.
    pub apodization_fraction: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        let spec = TransducerSpec::default_probe();
        ProbeConfig {
            elements: spec.element_count,
            pitch: Meters(spec.pitch),
            element_width: Meters(spec.element_width),
            center_frequency: Hertz(spec.center_frequency),
            fractional_bandwidth: spec.fractional_bandwidth,
            sim_sampling_frequency: Hertz(spec.sim_sampling_frequency),
            output_sampling_frequency: Hertz(spec.output_sampling_frequency),
            sound_speed: MetersPerSecond(spec.sound_speed),
            apodization_fraction: 0.5,
        }
    }
}

impl ProbeConfig {
    pub fn to_spec(&self) -> TransducerSpec {
        TransducerSpec {
            center_frequency: self.center_frequency.0,
            pitch: self.pitch.0,
            element_width: self.element_width.0,
            element_count: self.elements,
            sound_speed: self.sound_speed.0,
            fractional_bandwidth: self.fractional_bandwidth,
            sim_sampling_frequency: self.sim_sampling_frequency.0,
            output_sampling_frequency: self.output_sampling_frequency.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceMode {
    /// One plane wave per receive medium (3 events).
    Current,
    /// A 19-angle fan per receive medium (57 events).
    Proposed,
    /// `events_per_medium` set explicitly.
    Custom,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SequenceConfig {
    pub mode: SequenceMode,
    /// Required when `mode = "custom"`.
    pub events_per_medium: Option<usize>,
    /// Single-sided steering span of each medium's fan.
    pub max_transmit_angle: Radians,
    pub prf: Hertz,
    /// Angle of the outer receive mediums; defaults to asin(1/3).
    pub medium_angle: Option<Radians>,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        SequenceConfig {
            mode: SequenceMode::Proposed,
            events_per_medium: None,
            max_transmit_angle: Radians(10.0 * DEG),
            prf: Hertz(10e3),
            medium_angle: None,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointPhantomConfig {
    pub depth: Meters,
    #[serde(default = "one")]
    pub amplitude: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VesselPhantomConfig {
    /// Vessel center (x, z).
    pub center: [Meters; 2],
    pub inner_diameter: Meters,
    pub outer_diameter: Meters,
    /// Scatterers per squared wavelength in the wall.
    #[serde(default = "default_wall_density")]
    pub wall_density: f64,
    #[serde(default = "default_bg_density")]
    pub bg_density: f64,
    /// Background echogenicity relative to the wall.
    #[serde(default = "default_bg_level")]
    pub bg_level_db: Decibels,
    /// Background block (width, height) centered on the vessel.
    pub bg_extent: [Meters; 2],
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_wall_density() -> f64 {
    6.0
}

fn default_bg_density() -> f64 {
    3.0
}

fn default_bg_level() -> Decibels {
    Decibels(-20.0)
}

fn default_seed() -> u64 {
    1
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomConfig {
    pub point: Option<PointPhantomConfig>,
    pub vessel: Option<VesselPhantomConfig>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionTiming {
    /// The phantom is frozen within a frame; motion applies between frames.
    Frozen,
    /// The phantom advances between consecutive transmissions.
    Continuous,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RigidMotionConfig {
    /// Shift (x, z) applied per frame interval.
    pub shift_per_frame: [Meters; 2],
    #[serde(default = "frozen")]
    pub timing: MotionTiming,
}

fn frozen() -> MotionTiming {
    MotionTiming::Frozen
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RadialMotionConfig {
    /// Wall displacement per transmission at the inner radius; when absent
    /// it is derived from the systolic excursion and the prf.
    pub inter_transmit_step: Option<Meters>,
    /// Systolic excursion as a fraction of the inner radius.
    pub systole_fraction: f64,
    pub systole_duration: Seconds,
    /// Width of the concentric sections sharing one step displacement.
    pub section_width: Meters,
    pub timing: MotionTiming,
}

impl Default for RadialMotionConfig {
    fn default() -> Self {
        RadialMotionConfig {
            inter_transmit_step: None,
            systole_fraction: 0.10,
            systole_duration: Seconds(0.25),
            section_width: Meters(10e-6),
            timing: MotionTiming::Continuous,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MotionConfig {
    /// Number of frames to acquire.
    pub frames: usize,
    pub frame_rate: Hertz,
    pub rigid: Option<RigidMotionConfig>,
    pub radial: Option<RadialMotionConfig>,
}

impl Default for MotionConfig {
    fn default() -> Self {
        MotionConfig {
            frames: 1,
            frame_rate: Hertz(50.0),
            rigid: None,
            radial: None,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BeamformConfig {
    /// World (x, z) of the grid center, shared by all three mediums.
    pub origin: [Meters; 2],
    /// Grid size along (axial, lateral).
    pub extent: [Meters; 2],
    pub axial_step: Meters,
    pub lateral_step: Meters,
    /// Extra recorded depth beyond the worst-case acoustic path.
    pub record_margin: Meters,
    /// Channel-sample interpolation; "sinc8" removes the linear group-delay
    /// bias that displacement tracking would otherwise inherit.
    pub interpolation: Interpolation,
}

impl Default for BeamformConfig {
    fn default() -> Self {
        BeamformConfig {
            origin: [Meters(0.0), Meters(25e-3)],
            extent: [Meters(12e-3), Meters(12e-3)],
            axial_step: Meters(18e-6),
            lateral_step: Meters(46e-6),
            record_margin: Meters(1e-3),
            interpolation: Interpolation::Linear,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackingConfig {
    pub coarse_kernel: [Meters; 2],
    pub coarse_search: [Meters; 2],
    pub fine_kernel: [Meters; 2],
    pub fine_search: [Meters; 2],
    pub median_window: [Meters; 2],
    pub output_step: [Meters; 2],
}

impl Default for TrackingConfig {
    fn default() -> Self {
        let p = TrackingParams::default();
        let m = |v: [f64; 2]| [Meters(v[0]), Meters(v[1])];
        TrackingConfig {
            coarse_kernel: m(p.coarse_kernel),
            coarse_search: m(p.coarse_search),
            fine_kernel: m(p.fine_kernel),
            fine_search: m(p.fine_search),
            median_window: m(p.median_window),
            output_step: m(p.output_step),
        }
    }
}

impl TrackingConfig {
    pub fn to_params(&self) -> TrackingParams {
        TrackingParams {
            coarse_kernel: pair(self.coarse_kernel),
            coarse_search: pair(self.coarse_search),
            fine_kernel: pair(self.fine_kernel),
            fine_search: pair(self.fine_search),
            median_window: pair(self.median_window),
            output_step: pair(self.output_step),
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrainConfig {
    /// (axial, lateral) window when differentiating axially.
    pub axial_window: [Meters; 2],
    /// (axial, lateral) window when differentiating laterally.
    pub lateral_window: [Meters; 2],
    /// Symmetric strain limit of the rendered colormap.
    pub color_limit: f64,
}

impl Default for StrainConfig {
    fn default() -> Self {
        let w = StrainWindows::default();
        StrainConfig {
            axial_window: [Meters(w.axial_derivative[0]), Meters(w.axial_derivative[1])],
            lateral_window: [
                Meters(w.lateral_derivative[0]),
                Meters(w.lateral_derivative[1]),
            ],
            color_limit: 0.03,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// Channel-data SNR for the run; absent means noise-free.
    pub snr_db: Option<Decibels>,
    pub noise_seed: u64,
    /// Contrast-ratio exclusion radius; defaults to 2.5 wavelengths.
    pub cr_exclusion: Option<Meters>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            snr_db: None,
            noise_seed: 7777,
            cr_exclusion: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    NvsTheta,
    Snr,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub kind: SweepKind,
    /// Events per medium to sweep (nvs_theta).
    #[serde(default)]
    pub nvs: Vec<usize>,
    /// Single-sided spans to sweep (nvs_theta).
    #[serde(default)]
    pub theta_t: Vec<Radians>,
    /// SNR levels: the grid of an snr sweep, or optional noisy CR repeats of
    /// an nvs_theta sweep.
    #[serde(default)]
    pub snr_db: Vec<Decibels>,
    /// Phantom seeds averaged per cell (snr).
    #[serde(default)]
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_out_dir")]
    pub out_dir: String,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default)]
    pub sequence: SequenceConfig,
    #[serde(default)]
    pub phantom: PhantomConfig,
    #[serde(default)]
    pub motion: MotionConfig,
    #[serde(default)]
    pub beamform: BeamformConfig,
    #[serde(default)]
    pub tracking: TrackingConfig,
    #[serde(default)]
    pub strain: StrainConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
}

fn default_out_dir() -> String {
    "out".into()
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    toml::from_str(text).map_err(|e| cfg_err(e.to_string()))
}

/// Reads and parses a config file; returns the config plus the raw text,
/// which the pipeline echoes into the run manifest and content hashes.
pub fn load_config(path: &Path) -> Result<(ExperimentConfig, String)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg = parse_config(&text)?;
    Ok((cfg, text))
}

/// CLI overrides: `--out` replaces the output directory, `--seed` replaces
/// the phantom seed and derives a fresh noise seed from it.
pub fn apply_overrides(cfg: &mut ExperimentConfig, out: Option<&str>, seed: Option<u64>) {
    if let Some(out) = out {
        cfg.out_dir = out.to_string();
    }
    if let Some(seed) = seed {
        if let Some(vessel) = cfg.phantom.vessel.as_mut() {
            vessel.seed = seed;
        }
        cfg.metrics.noise_seed = seed.wrapping_add(0x9E3779B97F4A7C15);
    }
}

/// Fully resolved experiment: SI values, validated, ready to run.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub spec: TransducerSpec,
    pub apodization_fraction: f64,
    pub sequence: ImagingSequence,
    pub medium_angle: f64,
    pub max_transmit_angle: f64,
    /// Receive grids ordered (-angle, 0, +angle).
    pub grids: [BeamGrid; 3],
    pub record_depth: f64,
    pub interpolation: Interpolation,
    pub phantom: ResolvedPhantom,
    pub motion: ResolvedMotion,
    pub frames: usize,
    pub steps_per_frame: u32,
    pub tracking: TrackingParams,
    pub strain_windows: StrainWindows,
    pub color_limit: f64,
    pub snr_db: Option<f64>,
    pub noise_seed: u64,
    pub cr_exclusion: f64,
    pub out_dir: PathBuf,
    pub sweep: Option<ResolvedSweep>,
}

#[derive(Clone, Debug)]
pub enum ResolvedPhantom {
    Point { depth: f64, amplitude: f64 },
    Vessel {
        params: VesselPhantomParams,
        regions: VesselRegions,
    },
}

#[derive(Clone, Debug)]
pub enum ResolvedMotion {
    Static,
    Rigid {
        shift_per_frame: [f64; 2],
        frozen: bool,
    },
    Radial {
        model: RadialMotionModel,
        frozen: bool,
    },
}

#[derive(Clone, Debug)]
pub enum ResolvedSweep {
    NvsTheta {
        nvs: Vec<usize>,
        theta_t: Vec<f64>,
        snr_db: Vec<f64>,
    },
    Snr {
        snr_db: Vec<f64>,
        seeds: Vec<u64>,
    },
}

impl ExperimentConfig {
    pub fn resolve(&self) -> Result<Resolved> {
        let spec = self.probe.to_spec();
        spec.validate().map_err(|e| cfg_err(format!("probe: {e}")))?;
        if !(0.0..=1.0).contains(&self.probe.apodization_fraction) {
            return Err(cfg_err("probe: apodization_fraction must lie in [0, 1]"));
        }

        let events_per_medium = match self.sequence.mode {
            SequenceMode::Current => 1,
            SequenceMode::Proposed => 19,
            SequenceMode::Custom => self.sequence.events_per_medium.ok_or_else(|| {
                cfg_err("sequence: mode \"custom\" requires events_per_medium")
            })?,
        };
        let medium_angle = self
            .sequence
            .medium_angle
            .map_or_else(default_medium_angle, |a| a.0);
        if !(medium_angle > 0.0 && medium_angle < std::f64::consts::FRAC_PI_2) {
            return Err(cfg_err(format!(
                "sequence: medium_angle must lie in (0, pi/2) rad, got {medium_angle}"
            )));
        }
        let sequence = build_sequence(
            &[-medium_angle, 0.0, medium_angle],
            events_per_medium,
            self.sequence.max_transmit_angle.0,
            self.sequence.prf.0,
        )
        .map_err(|e| cfg_err(format!("sequence: {e}")))?;

        let grids = make_mediums(
            pair(self.beamform.origin),
            pair(self.beamform.extent),
            self.beamform.axial_step.0,
            self.beamform.lateral_step.0,
            medium_angle,
        )
        .map_err(|e| cfg_err(format!("beamform: {e}")))?;

        let phantom = match (&self.phantom.point, &self.phantom.vessel) {
            (Some(_), Some(_)) => {
                return Err(cfg_err("phantom: give either point or vessel, not both"))
            }
            (None, None) => {
                return Err(cfg_err("phantom: one of [phantom.point] or [phantom.vessel] is required"))
            }
            (Some(p), None) => {
                if !(p.depth.0 > 0.0) {
                    return Err(cfg_err("phantom: point depth must be positive"));
                }
                ResolvedPhantom::Point {
                    depth: p.depth.0,
                    amplitude: p.amplitude,
                }
            }
            (None, Some(v)) => {
                let params = VesselPhantomParams {
                    center: pair(v.center),
                    inner_diameter: v.inner_diameter.0,
                    outer_diameter: v.outer_diameter.0,
                    wall_density: v.wall_density,
                    bg_extent: pair(v.bg_extent),
                    bg_density: v.bg_density,
                    bg_level_db: v.bg_level_db.0,
                    wavelength: spec.wavelength(),
                    seed: v.seed,
                };
                let regions = VesselRegions {
                    center: params.center,
                    inner_radius: params.inner_diameter / 2.0,
                    outer_radius: params.outer_diameter / 2.0,
                };
                ResolvedPhantom::Vessel { params, regions }
            }
        };

        let frames = self.motion.frames;
        if frames == 0 {
            return Err(cfg_err("motion: frames must be at least 1"));
        }
        if !(self.motion.frame_rate.0 > 0.0) {
            return Err(cfg_err("motion: frame_rate must be positive"));
        }
        let steps_per_frame = (self.sequence.prf.0 / self.motion.frame_rate.0).round();
        if !(steps_per_frame >= 1.0 && steps_per_frame <= u32::MAX as f64) {
            return Err(cfg_err(
                "motion: prf / frame_rate must round to at least one transmission per frame",
            ));
        }
        let steps_per_frame = steps_per_frame as u32;

        let motion = match (&self.motion.rigid, &self.motion.radial) {
            (Some(_), Some(_)) => {
                return Err(cfg_err("motion: give either rigid or radial, not both"))
            }
            (None, None) => ResolvedMotion::Static,
            (Some(r), None) => ResolvedMotion::Rigid {
                shift_per_frame: pair(r.shift_per_frame),
                frozen: r.timing == MotionTiming::Frozen,
            },
            (None, Some(r)) => {
                let ResolvedPhantom::Vessel { params, .. } = &phantom else {
                    return Err(cfg_err("motion: radial motion requires the vessel phantom"));
                };
                if !(r.systole_fraction > 0.0 && r.systole_duration.0 > 0.0) {
                    return Err(cfg_err(
                        "motion: systole_fraction and systole_duration must be positive",
                    ));
                }
                if !(r.section_width.0 > 0.0) {
                    return Err(cfg_err("motion: section_width must be positive"));
                }
                let step = match r.inter_transmit_step {
                    Some(m) if m.0 > 0.0 => m.0,
                    Some(_) => {
                        return Err(cfg_err("motion: inter_transmit_step must be positive"))
                    }
                    None => phantom::inter_transmit_step(
                        params.inner_diameter,
                        r.systole_fraction,
                        r.systole_duration.0,
                        self.sequence.prf.0,
                    ),
                };
                ResolvedMotion::Radial {
                    model: RadialMotionModel {
                        center: params.center,
                        reference_radius: params.inner_diameter / 2.0,
                        reference_displacement: step,
                        section_width: r.section_width.0,
                    },
                    frozen: r.timing == MotionTiming::Frozen,
                }
            }
        };
        if !matches!(motion, ResolvedMotion::Static)
            && sequence.events.len() as u32 > steps_per_frame
        {
            return Err(cfg_err(format!(
                "motion: the sequence fires {} events but one frame interval holds only {} transmissions",
                sequence.events.len(),
                steps_per_frame
            )));
        }

        // Record long enough for the slowest acoustic path, not just the
        // deepest point: a steered plane wave's delay reference trails the
        // far aperture edge by aperture_half*sin(steer), and the return leg
        // to that edge is oblique. The window holds 2*record_depth/c of
        // flight time, so record_depth is half the worst-case path.
        let mut deepest: f64 = 0.0;
        let mut widest: f64 = 0.0;
        for g in &grids {
            for (i, j) in [(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)] {
                let p = g.position(
                    i * (g.n_axial as f64 - 1.0),
                    j * (g.n_lateral as f64 - 1.0),
                );
                deepest = deepest.max(p[1]);
                widest = widest.max(p[0].abs());
            }
        }
        let (phantom_depth, phantom_reach) = match &phantom {
            ResolvedPhantom::Point { depth, .. } => (*depth, 0.0),
            ResolvedPhantom::Vessel { params, .. } => {
                let half = [
                    (params.outer_diameter / 2.0).max(params.bg_extent[0] / 2.0),
                    (params.outer_diameter / 2.0).max(params.bg_extent[1] / 2.0),
                ];
                (
                    params.center[1] + half[1],
                    params.center[0].abs() + half[0],
                )
            }
        };
        let motion_allowance = match &motion {
            ResolvedMotion::Static => 0.0,
            ResolvedMotion::Rigid { shift_per_frame, .. } => {
                shift_per_frame[0].abs().max(shift_per_frame[1].abs()) * frames as f64
            }
            ResolvedMotion::Radial { model, .. } => {
                // Steps scale the inner-radius step by R0/r <= 1 outward.
                model.reference_displacement * (steps_per_frame as f64) * frames as f64
            }
        };
        if !(self.beamform.record_margin.0 >= 0.0) {
            return Err(cfg_err("beamform: record_margin must be non-negative"));
        }
        let z_max = deepest.max(phantom_depth + motion_allowance);
        let x_max = widest.max(phantom_reach + motion_allowance);
        let half_aperture = spec.pitch * (spec.element_count as f64 - 1.0) / 2.0;
        let steer = medium_angle.abs() + self.sequence.max_transmit_angle.0.abs();
        let tx_path = z_max + (x_max + half_aperture) * steer.sin();
        let rx_path = (x_max + half_aperture).hypot(z_max);
        let record_depth = 0.5 * (tx_path + rx_path) + self.beamform.record_margin.0;

        let tracking = self.tracking.to_params();
        for (name, w) in [
            ("coarse_kernel", tracking.coarse_kernel),
            ("coarse_search", tracking.coarse_search),
            ("fine_kernel", tracking.fine_kernel),
            ("fine_search", tracking.fine_search),
            ("median_window", tracking.median_window),
            ("output_step", tracking.output_step),
        ] {
            if !(w[0] > 0.0 && w[1] > 0.0) {
                return Err(cfg_err(format!("tracking: {name} must be positive")));
            }
        }
        let strain_windows = StrainWindows {
            axial_derivative: pair(self.strain.axial_window),
            lateral_derivative: pair(self.strain.lateral_window),
        };
        if !(self.strain.color_limit > 0.0) {
            return Err(cfg_err("strain: color_limit must be positive"));
        }

        let cr_exclusion = match self.metrics.cr_exclusion {
            Some(m) if m.0 > 0.0 => m.0,
            Some(_) => return Err(cfg_err("metrics: cr_exclusion must be positive")),
            None => 2.5 * spec.wavelength(),
        };

        let sweep = match &self.sweep {
            None => None,
            Some(s) => Some(resolve_sweep(s)?),
        };

        Ok(Resolved {
            spec,
            apodization_fraction: self.probe.apodization_fraction,
            sequence,
            medium_angle,
            max_transmit_angle: self.sequence.max_transmit_angle.0,
            grids,
            record_depth,
            interpolation: self.beamform.interpolation,
            phantom,
            motion,
            frames,
            steps_per_frame,
            tracking,
            strain_windows,
            color_limit: self.strain.color_limit,
            snr_db: self.metrics.snr_db.map(|d| d.0),
            noise_seed: self.metrics.noise_seed,
            cr_exclusion,
            out_dir: PathBuf::from(&self.out_dir),
            sweep,
        })
    }
}

fn resolve_sweep(s: &SweepConfig) -> Result<ResolvedSweep> {
    match s.kind {
        SweepKind::NvsTheta => {
            if s.nvs.is_empty() || s.theta_t.is_empty() {
                return Err(cfg_err("sweep: nvs_theta needs non-empty nvs and theta_t lists"));
            }
            if s.nvs.iter().any(|&n| n == 0) {
                return Err(cfg_err("sweep: nvs values must be at least 1"));
            }
            if s.theta_t.iter().any(|t| !(t.0 > 0.0)) {
                return Err(cfg_err("sweep: theta_t values must be positive"));
            }
            if !s.seeds.is_empty() {
                return Err(cfg_err("sweep: seeds only apply to the snr sweep"));
            }
            Ok(ResolvedSweep::NvsTheta {
                nvs: s.nvs.clone(),
                theta_t: s.theta_t.iter().map(|t| t.0).collect(),
                snr_db: s.snr_db.iter().map(|d| d.0).collect(),
            })
        }
        SweepKind::Snr => {
            if s.snr_db.is_empty() || s.seeds.is_empty() {
                return Err(cfg_err("sweep: snr needs non-empty snr_db and seeds lists"));
            }
            if !s.nvs.is_empty() || !s.theta_t.is_empty() {
                return Err(cfg_err("sweep: nvs/theta_t only apply to the nvs_theta sweep"));
            }
            Ok(ResolvedSweep::Snr {
                snr_db: s.snr_db.iter().map(|d| d.0).collect(),
                seeds: s.seeds.clone(),
            })
        }
    }
}
