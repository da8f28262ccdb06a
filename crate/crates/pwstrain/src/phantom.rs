//! Scatterer phantoms and wall motion.
//!
//! Two phantoms are provided: a single point target for point-spread-function
//! studies, and a vessel cross-section (annular wall filled with speckle
//! scatterers, surrounded by weaker background speckle, empty lumen).
//!
//! Wall motion is purely radial: every wall scatterer moves away from the
//! vessel center by `u0 * R0 / R`, the incompressible thin-step field, where
//! `R` is quantized into thin concentric sections so that scatterers in one
//! section share one displacement per step. Background scatterers never move.

use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScattererLabel {
    Wall,
    Background,
    Point,
}

impl ScattererLabel {
    pub fn to_u8(self) -> u8 {
        match self {
            ScattererLabel::Wall => 0,
            ScattererLabel::Background => 1,
            ScattererLabel::Point => 2,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(ScattererLabel::Wall),
            1 => Some(ScattererLabel::Background),
            2 => Some(ScattererLabel::Point),
            _ => None,
        }
    }
}

/// A set of point scatterers in the imaging plane (struct-of-arrays so the
/// simulator can stream positions efficiently).
#[derive(Clone, Debug, PartialEq)]
pub struct ScattererField {
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub amplitude: Vec<f64>,
    pub label: Vec<ScattererLabel>,
    /// Seed the field was generated from, kept for provenance.
    pub rng_seed: u64,
}

impl ScattererField {
    pub fn with_capacity(n: usize, rng_seed: u64) -> Self {
        ScattererField {
            x: Vec::with_capacity(n),
            z: Vec::with_capacity(n),
            amplitude: Vec::with_capacity(n),
            label: Vec::with_capacity(n),
            rng_seed,
        }
    }

    pub fn push(&mut self, x: f64, z: f64, amplitude: f64, label: ScattererLabel) {
        self.x.push(x);
        self.z.push(z);
        self.amplitude.push(amplitude);
        self.label.push(label);
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// All scatterers must sit strictly below the array plane with finite
    /// coordinates and amplitudes.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.z.len() != n || self.amplitude.len() != n || self.label.len() != n {
            return Err(Error::InvalidArgument(
                "scatterer field arrays have mismatched lengths".into(),
            ));
        }
        for i in 0..n {
            if !(self.x[i].is_finite() && self.z[i].is_finite() && self.amplitude[i].is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "scatterer {i} has non-finite coordinates or amplitude"
                )));
            }
            if self.z[i] <= 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "scatterer {i} lies at z = {} m, on or above the array",
                    self.z[i]
                )));
            }
        }
        Ok(())
    }

    pub fn max_depth(&self) -> f64 {
        self.z.iter().copied().fold(0.0, f64::max)
    }
}

/// Single unit-amplitude point target on the array axis.
pub fn single_scatterer(depth: f64) -> Result<ScattererField> {
    if !(depth > 0.0 && depth.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "point target depth must be positive, got {depth}"
        )));
    }
    let mut field = ScattererField::with_capacity(1, 0);
    field.push(0.0, depth, 1.0, ScattererLabel::Point);
    Ok(field)
}

/// Parameters of the vessel cross-section phantom.
#[derive(Clone, Debug)]
pub struct VesselPhantomParams {
    /// Vessel center (x, z) in meters.
    pub center: [f64; 2],
    pub inner_diameter: f64,
    pub outer_diameter: f64,
    /// Wall scatterer density in scatterers per squared wavelength.
    pub wall_density: f64,
    /// Background block extent (width in x, height in z), centered on the
    /// vessel. Background fills the block except the full outer disc.
    pub bg_extent: [f64; 2],
    pub bg_density: f64,
    /// Background echogenicity relative to the wall, in dB (amplitude scale
    /// `10^(dB/20)`).
    pub bg_level_db: f64,
    /// Acoustic wavelength that defines the density unit.
    pub wavelength: f64,
    pub seed: u64,
}

/// Draws the vessel phantom. Scatterer counts are Poisson with mean
/// `density * area / wavelength^2`; wall amplitudes are standard normal and
/// background amplitudes are normal with the configured relative level.
/// Background positions are drawn uniformly over the block and thinned by
/// rejecting the outer disc, which keeps the point process Poisson.
pub fn vessel_phantom(p: &VesselPhantomParams) -> Result<ScattererField> {
    if !(p.inner_diameter > 0.0 && p.outer_diameter > p.inner_diameter) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < inner diameter < outer diameter, got {} and {}",
            p.inner_diameter, p.outer_diameter
        )));
    }
    if p.wall_density < 0.0 || p.bg_density < 0.0 {
        return Err(Error::InvalidArgument(
            "scatterer densities must be non-negative".into(),
        ));
    }
    if !(p.wavelength > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "wavelength must be positive, got {}",
            p.wavelength
        )));
    }
    if !(p.bg_extent[0] >= 0.0 && p.bg_extent[1] >= 0.0) {
        return Err(Error::InvalidArgument(
            "background extent must be non-negative".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let lambda2 = p.wavelength * p.wavelength;
    let r_inner = p.inner_diameter / 2.0;
    let r_outer = p.outer_diameter / 2.0;
    let (cx, cz) = (p.center[0], p.center[1]);

    let mut field = ScattererField::with_capacity(0, p.seed);

    // Wall annulus: radius drawn area-uniformly (sqrt of uniform in r^2).
    let annulus_area = std::f64::consts::PI * (r_outer * r_outer - r_inner * r_inner);
    let wall_count = poisson_count(&mut rng, p.wall_density * annulus_area / lambda2);
    let wall_amp = Normal::new(0.0, 1.0).expect("unit normal");
    for _ in 0..wall_count {
        let u: f64 = rng.random();
        let r = (r_inner * r_inner + u * (r_outer * r_outer - r_inner * r_inner)).sqrt();
        let phi = rng.random::<f64>() * std::f64::consts::TAU;
        let amp = wall_amp.sample(&mut rng);
        field.push(cx + r * phi.cos(), cz + r * phi.sin(), amp, ScattererLabel::Wall);
    }

    // Background block, thinned by the outer disc.
    let block_area = p.bg_extent[0] * p.bg_extent[1];
    let bg_count = poisson_count(&mut rng, p.bg_density * block_area / lambda2);
    let bg_sigma = 10f64.powf(p.bg_level_db / 20.0);
    let bg_amp = Normal::new(0.0, bg_sigma)
        .map_err(|e| Error::InvalidArgument(format!("background level: {e}")))?;
    for _ in 0..bg_count {
        let x = cx + (rng.random::<f64>() - 0.5) * p.bg_extent[0];
        let z = cz + (rng.random::<f64>() - 0.5) * p.bg_extent[1];
        let dx = x - cx;
        let dz = z - cz;
        if (dx * dx + dz * dz).sqrt() < r_outer {
            continue;
        }
        let amp = bg_amp.sample(&mut rng);
        field.push(x, z, amp, ScattererLabel::Background);
    }

    field.validate()?;
    Ok(field)
}

fn poisson_count(rng: &mut ChaCha8Rng, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    let dist = Poisson::new(mean).expect("positive finite mean");
    dist.sample(rng) as u64
}

/// Radial wall-motion model: one step moves a scatterer at radius `R`
/// outward by `reference_displacement * reference_radius / R_section`, where
/// `R_section` is the center of the concentric section of width
/// `section_width` containing `R`.
#[derive(Clone, Copy, Debug)]
pub struct RadialMotionModel {
    pub center: [f64; 2],
    /// Radius at which one step displaces by exactly `reference_displacement`.
    pub reference_radius: f64,
    /// Displacement per step at the reference radius, meters.
    pub reference_displacement: f64,
    /// Width of the concentric sections sharing one displacement value.
    pub section_width: f64,
}

impl RadialMotionModel {
    pub fn new(center: [f64; 2], reference_radius: f64, reference_displacement: f64) -> Self {
        RadialMotionModel {
            center,
            reference_radius,
            reference_displacement,
            // Sections much thinner than a wavelength: the quantization is
            // invisible to tracking but keeps per-step work trivial.
            section_width: 10e-6,
        }
    }

    /// Outward displacement applied by a single step at radius `r`.
    pub fn step_displacement(&self, r: f64) -> f64 {
        debug_assert!(r > 0.0);
        let section = (r / self.section_width).floor();
        let r_section = (section + 0.5) * self.section_width;
        self.reference_displacement * self.reference_radius / r_section
    }

    /// Total outward displacement of a scatterer starting at radius `r0`
    /// after `steps` sequential steps (each step sees the updated radius).
    pub fn displacement_after(&self, r0: f64, steps: u32) -> f64 {
        let mut r = r0;
        for _ in 0..steps {
            r += self.step_displacement(r);
        }
        r - r0
    }
}

/// Advances wall (and point) scatterers by one motion step; background
/// scatterers are static. Radial direction is preserved exactly by scaling
/// the offset from the center.
pub fn apply_radial_step(field: &ScattererField, model: &RadialMotionModel) -> Result<ScattererField> {
    let mut out = field.clone();
    for i in 0..field.len() {
        if field.label[i] == ScattererLabel::Background {
            continue;
        }
        let dx = field.x[i] - model.center[0];
        let dz = field.z[i] - model.center[1];
        let r = (dx * dx + dz * dz).sqrt();
        if r == 0.0 {
            return Err(Error::InvalidArgument(format!(
                "scatterer {i} sits exactly on the motion center"
            )));
        }
        let scale = (r + model.step_displacement(r)) / r;
        out.x[i] = model.center[0] + dx * scale;
        out.z[i] = model.center[1] + dz * scale;
    }
    Ok(out)
}

/// Translates every scatterer by the same vector.
pub fn apply_rigid_shift(field: &ScattererField, shift: [f64; 2]) -> ScattererField {
    let mut out = field.clone();
    for i in 0..out.len() {
        out.x[i] += shift[0];
        out.z[i] += shift[1];
    }
    out
}

/// Per-transmit displacement at the inner vessel radius for a systolic
/// excursion of `systole_fraction` of the inner radius reached over
/// `systole_duration` at pulse repetition frequency `prf`. All inputs must be
/// positive.
pub fn inter_transmit_step(
    inner_diameter: f64,
    systole_fraction: f64,
    systole_duration: f64,
    prf: f64,
) -> f64 {
    assert!(
        inner_diameter > 0.0 && systole_fraction > 0.0 && systole_duration > 0.0 && prf > 0.0,
        "inter_transmit_step requires positive inputs"
    );
    systole_fraction * (inner_diameter / 2.0) / (systole_duration * prf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn test_params() -> VesselPhantomParams {
        VesselPhantomParams {
            center: [0.0, 15e-3],
            inner_diameter: 6e-3,
            outer_diameter: 9e-3,
            wall_density: 5.0,
            bg_extent: [20e-3, 12e-3],
            bg_density: 2.0,
            bg_level_db: -20.0,
            wavelength: 1540.0 / 5.3e6,
            seed: 42,
        }
    }

    #[test]
    fn point_target() {
        let f = single_scatterer(20e-3).unwrap();
        assert_eq!(f.len(), 1);
        assert_eq!(f.label[0], ScattererLabel::Point);
        assert_eq!((f.x[0], f.z[0], f.amplitude[0]), (0.0, 20e-3, 1.0));
        assert!(single_scatterer(0.0).is_err());
        assert!(single_scatterer(-1e-3).is_err());
    }

    #[test]
    fn vessel_geometry_respected() {
        let p = test_params();
        let f = vessel_phantom(&p).unwrap();
        f.validate().unwrap();
        assert!(f.len() > 100);
        let r_in = p.inner_diameter / 2.0;
        let r_out = p.outer_diameter / 2.0;
        for i in 0..f.len() {
            let dx = f.x[i] - p.center[0];
            let dz = f.z[i] - p.center[1];
            let r = (dx * dx + dz * dz).sqrt();
            match f.label[i] {
                ScattererLabel::Wall => {
                    assert!(r >= r_in - 1e-12 && r <= r_out + 1e-12);
                }
                ScattererLabel::Background => {
                    assert!(r >= r_out);
                    assert!(dx.abs() <= p.bg_extent[0] / 2.0);
                    assert!(dz.abs() <= p.bg_extent[1] / 2.0);
                }
                ScattererLabel::Point => panic!("no point scatterers expected"),
            }
        }
    }

    #[test]
    fn vessel_counts_match_densities() {
        let p = test_params();
        let f = vessel_phantom(&p).unwrap();
        let lambda2 = p.wavelength * p.wavelength;
        let r_in = p.inner_diameter / 2.0;
        let r_out = p.outer_diameter / 2.0;
        let wall_mean = p.wall_density * std::f64::consts::PI * (r_out * r_out - r_in * r_in)
            / lambda2;
        let wall_n = f.label.iter().filter(|&&l| l == ScattererLabel::Wall).count() as f64;
        assert!(
            (wall_n - wall_mean).abs() < 5.0 * wall_mean.sqrt(),
            "wall count {wall_n} too far from Poisson mean {wall_mean}"
        );
        // Background mean after thinning by the disc.
        let block = p.bg_extent[0] * p.bg_extent[1];
        let bg_mean = p.bg_density * (block - std::f64::consts::PI * r_out * r_out) / lambda2;
        let bg_n = f
            .label
            .iter()
            .filter(|&&l| l == ScattererLabel::Background)
            .count() as f64;
        assert!(
            (bg_n - bg_mean).abs() < 5.0 * bg_mean.sqrt(),
            "background count {bg_n} too far from Poisson mean {bg_mean}"
        );
    }

    #[test]
    fn background_amplitude_is_weaker() {
        let p = test_params();
        let f = vessel_phantom(&p).unwrap();
        let rms = |lbl: ScattererLabel| {
            let vals: Vec<f64> = (0..f.len())
                .filter(|&i| f.label[i] == lbl)
                .map(|i| f.amplitude[i])
                .collect();
            (vals.iter().map(|v| v * v).sum::<f64>() / vals.len() as f64).sqrt()
        };
        let ratio_db = 20.0 * (rms(ScattererLabel::Background) / rms(ScattererLabel::Wall)).log10();
        assert!(
            (ratio_db - p.bg_level_db).abs() < 2.0,
            "amplitude ratio {ratio_db} dB vs requested {} dB",
            p.bg_level_db
        );
    }

    #[test]
    fn phantom_is_deterministic_per_seed() {
        let p = test_params();
        let a = vessel_phantom(&p).unwrap();
        let b = vessel_phantom(&p).unwrap();
        assert_eq!(a, b);
        let mut p2 = test_params();
        p2.seed = 43;
        let c = vessel_phantom(&p2).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_background_density_gives_wall_only() {
        let mut p = test_params();
        p.bg_density = 0.0;
        let f = vessel_phantom(&p).unwrap();
        assert!(f.len() > 0);
        assert!(f.label.iter().all(|&l| l == ScattererLabel::Wall));
    }

    #[test]
    fn invalid_geometry_rejected() {
        let mut p = test_params();
        p.outer_diameter = p.inner_diameter;
        assert!(vessel_phantom(&p).is_err());
        let mut p = test_params();
        p.inner_diameter = -1.0;
        assert!(vessel_phantom(&p).is_err());
        // Vessel poking above the array plane.
        let mut p = test_params();
        p.center = [0.0, 2e-3];
        assert!(vessel_phantom(&p).is_err());
    }

    #[test]
    fn radial_law_with_thin_sections() {
        let mut model = RadialMotionModel::new([0.0, 0.0], 3e-3, 0.12e-6);
        model.section_width = 1e-9;
        let u_ref = model.step_displacement(3e-3);
        assert_relative_eq!(u_ref, 0.12e-6, max_relative = 1e-5);
        let u_double = model.step_displacement(6e-3);
        assert_relative_eq!(u_double, 0.06e-6, max_relative = 1e-5);
    }

    #[test]
    fn section_quantization_shares_displacement() {
        let model = RadialMotionModel::new([0.0, 0.0], 3e-3, 0.12e-6);
        // Sections are 10 um wide: radii in [3.00, 3.01) mm share one value.
        let a = model.step_displacement(3.0001e-3);
        let b = model.step_displacement(3.0099e-3);
        assert_eq!(a, b);
        let c = model.step_displacement(3.0101e-3);
        assert_ne!(a, c);
    }

    #[test]
    fn multi_step_approximates_area_conserving_field() {
        let mut model = RadialMotionModel::new([0.0, 0.0], 3e-3, 0.12e-6);
        model.section_width = 1e-7;
        let steps = 200;
        // r(n)^2 - r(0)^2 ~ 2 n u0 R0 for the 1/R field, independent of r0.
        let k = 2.0 * steps as f64 * 0.12e-6 * 3e-3;
        for &r0 in &[3e-3, 3.5e-3, 4.4e-3] {
            let u = model.displacement_after(r0, steps);
            let expect = (r0 * r0 + k).sqrt() - r0;
            assert_relative_eq!(u, expect, max_relative = 1e-3);
        }
    }

    #[test]
    fn radial_step_moves_wall_not_background() {
        let p = test_params();
        let f = vessel_phantom(&p).unwrap();
        let model = RadialMotionModel::new(p.center, 3e-3, 0.12e-6);
        let moved = apply_radial_step(&f, &model).unwrap();
        for i in 0..f.len() {
            let before = (f.x[i] - p.center[0]).hypot(f.z[i] - p.center[1]);
            let after = (moved.x[i] - p.center[0]).hypot(moved.z[i] - p.center[1]);
            match f.label[i] {
                ScattererLabel::Background => {
                    assert_eq!((f.x[i], f.z[i]), (moved.x[i], moved.z[i]));
                }
                _ => {
                    assert!(after > before);
                    // Direction preserved: angle unchanged.
                    let a0 = (f.z[i] - p.center[1]).atan2(f.x[i] - p.center[0]);
                    let a1 = (moved.z[i] - p.center[1]).atan2(moved.x[i] - p.center[0]);
                    assert_relative_eq!(a0, a1, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn rigid_shift_translates_everything() {
        let p = test_params();
        let f = vessel_phantom(&p).unwrap();
        let s = apply_rigid_shift(&f, [15e-6, -20e-6]);
        for i in 0..f.len() {
            assert_eq!(s.x[i], f.x[i] + 15e-6);
            assert_eq!(s.z[i], f.z[i] - 20e-6);
        }
    }

    #[test]
    fn inter_transmit_step_value() {
        // 6 mm vessel, 10% systolic excursion over 0.25 s at 10 kHz: 0.12 um.
        let u = inter_transmit_step(6e-3, 0.10, 0.25, 10e3);
        assert_relative_eq!(u, 0.12e-6, max_relative = 1e-12);
    }
}
