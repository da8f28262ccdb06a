//! Image-quality and accuracy metrics: point-spread contrast ratio and
//! widths, displacement/strain error against analytic ground truth.

use crate::array2::Array2D;
use crate::beamform::BeamGrid;
use crate::dispcomp::VectorDisplacementField;
use crate::phantom::RadialMotionModel;
use crate::strain::{principal_strains, StrainField};
use crate::{Error, Result};

/// Refined location of the envelope maximum.
#[derive(Clone, Copy, Debug)]
pub struct PeakInfo {
    /// Integer argmax as (axial, lateral) indices.
    pub index: [usize; 2],
    /// Subsample argmax as fractional (axial, lateral) indices.
    pub fractional: [f64; 2],
    /// Physical (x, z) of the refined peak, meters.
    pub position: [f64; 2],
    /// Interpolated peak amplitude.
    pub value: f64,
}

/// Vertex of the parabola through (-1, ym), (0, y0), (+1, yp); offset is
/// clamped to half a sample so a noisy neighbor cannot fling the estimate.
fn parabola_vertex(ym: f64, y0: f64, yp: f64) -> (f64, f64) {
    let denom = ym - 2.0 * y0 + yp;
    if denom >= 0.0 {
        return (0.0, y0);
    }
    let delta = ((ym - yp) / (2.0 * denom)).clamp(-0.5, 0.5);
    let a = 0.5 * denom;
    let b = 0.5 * (yp - ym);
    (delta, y0 + (a * delta + b) * delta)
}

/// Locate the envelope maximum and refine it with independent axial and
/// lateral parabolic fits. Peaks on the frame border keep their integer
/// location along the clipped axis.
pub fn envelope_peak(env: &Array2D<f64>, grid: &BeamGrid) -> Result<PeakInfo> {
    if env.rows() != grid.n_axial || env.cols() != grid.n_lateral {
        return Err(Error::GridMismatch("envelope does not match its grid".into()));
    }
    let mut best = (0usize, 0usize);
    let mut best_v = f64::NEG_INFINITY;
    for i in 0..env.rows() {
        for j in 0..env.cols() {
            let v = env.get(i, j);
            if v > best_v {
                best_v = v;
                best = (i, j);
            }
        }
    }
    if !(best_v > 0.0) {
        return Err(Error::InvalidArgument(
            "envelope has no positive maximum".into(),
        ));
    }
    let (i, j) = best;
    let (mut di, mut vi) = (0.0, best_v);
    if i > 0 && i + 1 < env.rows() {
        (di, vi) = parabola_vertex(env.get(i - 1, j), best_v, env.get(i + 1, j));
    }
    let (mut dj, mut vj) = (0.0, best_v);
    if j > 0 && j + 1 < env.cols() {
        (dj, vj) = parabola_vertex(env.get(i, j - 1), best_v, env.get(i, j + 1));
    }
    let fi = i as f64 + di;
    let fj = j as f64 + dj;
    Ok(PeakInfo {
        index: [i, j],
        fractional: [fi, fj],
        position: grid.position(fi, fj),
        value: vi.max(vj),
    })
}

/// Contrast ratio of a point response in dB: the energy fraction lying
/// farther than `exclusion_radius` from the refined peak,
/// `|10 log10(E_out / E_total)|` on the squared envelope. A response with no
/// energy outside the exclusion disc reports 120 dB.
pub fn contrast_ratio(env: &Array2D<f64>, grid: &BeamGrid, exclusion_radius: f64) -> Result<f64> {
    if !(exclusion_radius > 0.0) {
        return Err(Error::InvalidArgument("exclusion radius must be positive".into()));
    }
    let peak = envelope_peak(env, grid)?;
    let r2 = exclusion_radius * exclusion_radius;
    let mut total = 0.0;
    let mut outside = 0.0;
    for i in 0..env.rows() {
        for j in 0..env.cols() {
            let v = env.get(i, j);
            let e = v * v;
            total += e;
            let p = grid.position(i as f64, j as f64);
            let dx = p[0] - peak.position[0];
            let dz = p[1] - peak.position[1];
            if dx * dx + dz * dz > r2 {
                outside += e;
            }
        }
    }
    if outside <= 0.0 {
        return Ok(120.0);
    }
    Ok((10.0 * (outside / total).log10()).abs())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Axial,
    Lateral,
}

/// Full width at half maximum of the profile through the envelope peak,
/// along `axis`, in meters. Crossings are linearly interpolated; a profile
/// that never falls below half amplitude before the frame edge is clipped
/// and reports an error.
pub fn fwhm(env: &Array2D<f64>, grid: &BeamGrid, axis: Axis) -> Result<f64> {
    let peak = envelope_peak(env, grid)?;
    let (profile, step): (Vec<f64>, f64) = match axis {
        Axis::Axial => (
            (0..env.rows()).map(|i| env.get(i, peak.index[1])).collect(),
            grid.axial_step,
        ),
        Axis::Lateral => (
            (0..env.cols()).map(|j| env.get(peak.index[0], j)).collect(),
            grid.lateral_step,
        ),
    };
    let center = match axis {
        Axis::Axial => peak.index[0],
        Axis::Lateral => peak.index[1],
    };
    let half = 0.5 * peak.value;
    let right = crossing(&profile, center, half, 1)?;
    let left = crossing(&profile, center, half, -1)?;
    Ok((right - left) * step)
}

/// Fractional index of the first crossing below `half`, walking from `start`
/// in direction `dir`.
fn crossing(profile: &[f64], start: usize, half: f64, dir: isize) -> Result<f64> {
    let mut prev = start as isize;
    loop {
        let next = prev + dir;
        if next < 0 || next >= profile.len() as isize {
            return Err(Error::InvalidArgument(
                "half-amplitude crossing clipped by the frame edge".into(),
            ));
        }
        let a = profile[prev as usize];
        let b = profile[next as usize];
        if b < half {
            // Linear interpolation between the bracketing samples.
            let t = if a == b { 0.0 } else { (a - half) / (a - b) };
            return Ok(prev as f64 + t * dir as f64);
        }
        prev = next;
    }
}

/// Point-response summary used by the resolution sweeps.
#[derive(Clone, Copy, Debug)]
pub struct PsfReport {
    pub peak_position: [f64; 2],
    pub fwhm_axial: f64,
    pub fwhm_lateral: f64,
    pub cr_db: f64,
}

pub fn psf_report(env: &Array2D<f64>, grid: &BeamGrid, exclusion_radius: f64) -> Result<PsfReport> {
    let peak = envelope_peak(env, grid)?;
    Ok(PsfReport {
        peak_position: peak.position,
        fwhm_axial: fwhm(env, grid, Axis::Axial)?,
        fwhm_lateral: fwhm(env, grid, Axis::Lateral)?,
        cr_db: contrast_ratio(env, grid, exclusion_radius)?,
    })
}

/// Displacement and strain accuracy against ground truth at one SNR.
#[derive(Clone, Copy, Debug)]
pub struct ErrorReport {
    pub snr_db: f64,
    pub rmse_u_axial: f64,
    pub rmse_u_lateral: f64,
    pub rmse_strain_axial: f64,
    pub rmse_strain_lateral: f64,
    /// Fraction of lattice points entering the error statistics.
    pub mask_fraction: f64,
}

/// Error report over the intersection of both estimates' validity masks,
/// `region_mask`, and the truth masks.
pub fn error_report(
    disp: &VectorDisplacementField,
    disp_truth: &VectorDisplacementField,
    strain: &StrainField,
    strain_truth: &StrainField,
    region_mask: &Array2D<bool>,
    snr_db: f64,
) -> Result<ErrorReport> {
    let (rows, cols) = (disp.valid.rows(), disp.valid.cols());
    let mut mask = Array2D::filled(rows, cols, false);
    for i in 0..rows {
        for j in 0..cols {
            mask.set(
                i,
                j,
                disp.valid.get(i, j)
                    && disp_truth.valid.get(i, j)
                    && strain.valid.get(i, j)
                    && strain_truth.valid.get(i, j)
                    && region_mask.get(i, j),
            );
        }
    }
    let kept = mask.as_slice().iter().filter(|&&b| b).count();
    Ok(ErrorReport {
        snr_db,
        rmse_u_axial: rmse(&disp.u_z, &disp_truth.u_z, &mask)?,
        rmse_u_lateral: rmse(&disp.u_x, &disp_truth.u_x, &mask)?,
        rmse_strain_axial: rmse(&strain.e_zz, &strain_truth.e_zz, &mask)?,
        rmse_strain_lateral: rmse(&strain.e_xx, &strain_truth.e_xx, &mask)?,
        mask_fraction: kept as f64 / (rows * cols) as f64,
    })
}

/// Root-mean-square difference over the jointly valid points.
pub fn rmse(estimate: &Array2D<f64>, truth: &Array2D<f64>, mask: &Array2D<bool>) -> Result<f64> {
    if !estimate.same_shape(truth) || estimate.rows() != mask.rows() || estimate.cols() != mask.cols()
    {
        return Err(Error::GridMismatch("rmse inputs differ in shape".into()));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..estimate.rows() {
        for j in 0..estimate.cols() {
            if mask.get(i, j) {
                let d = estimate.get(i, j) - truth.get(i, j);
                sum += d * d;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::InvalidArgument("rmse mask selects no points".into()));
    }
    Ok((sum / n as f64).sqrt())
}

/// True when the point is at least the given margins away from every frame
/// edge; used to exclude shrunken-window borders from error statistics.
pub fn edge_mask(rows: usize, cols: usize, margin_ax: usize, margin_lat: usize) -> Array2D<bool> {
    let mut mask = Array2D::filled(rows, cols, false);
    for i in margin_ax..rows.saturating_sub(margin_ax) {
        for j in margin_lat..cols.saturating_sub(margin_lat) {
            mask.set(i, j, true);
        }
    }
    mask
}

/// Analytic motion laws matched to the phantoms the simulator can animate.
#[derive(Clone, Debug)]
pub enum MotionTruth {
    /// Uniform translation by `shift` (x, z) between the tracked frames.
    Rigid { shift: [f64; 2] },
    /// Continuum limit of the radial wall motion after fractional `steps`
    /// pulses: a point at initial radius R lands on sqrt(R^2 + K) with
    /// K = 2 * steps * step_amplitude * reference_radius.
    RadialExact { model: RadialMotionModel, steps: f64 },
    /// The discrete per-pulse stepping the simulator actually applies,
    /// including its radial section binning.
    RadialStepped { model: RadialMotionModel, steps: u32 },
}

impl MotionTruth {
    /// Displacement of the material point initially at `pos`.
    pub fn displacement_at(&self, pos: [f64; 2]) -> [f64; 2] {
        match self {
            MotionTruth::Rigid { shift } => *shift,
            MotionTruth::RadialExact { model, steps } => {
                let (r, dir) = radial_frame(model.center, pos);
                if r == 0.0 {
                    return [0.0, 0.0];
                }
                let u = radial_exact_displacement(r, model, *steps);
                [u * dir[0], u * dir[1]]
            }
            MotionTruth::RadialStepped { model, steps } => {
                let (r, dir) = radial_frame(model.center, pos);
                if r == 0.0 {
                    return [0.0, 0.0];
                }
                let u = model.displacement_after(r, *steps);
                [u * dir[0], u * dir[1]]
            }
        }
    }
}

fn radial_frame(center: [f64; 2], pos: [f64; 2]) -> (f64, [f64; 2]) {
    let dx = pos[0] - center[0];
    let dz = pos[1] - center[1];
    let r = (dx * dx + dz * dz).sqrt();
    if r == 0.0 {
        (0.0, [0.0, 0.0])
    } else {
        (r, [dx / r, dz / r])
    }
}

fn radial_k(model: &RadialMotionModel, steps: f64) -> f64 {
    2.0 * steps * model.reference_displacement * model.reference_radius
}

/// Closed-form radial displacement u(R) = sqrt(R^2 + K) - R.
pub fn radial_exact_displacement(r: f64, model: &RadialMotionModel, steps: f64) -> f64 {
    let k = radial_k(model, steps);
    (r * r + k).sqrt() - r
}

/// Radial and hoop strain of the continuum wall motion, linearized about the
/// initial configuration: eps_rr = R/sqrt(R^2+K) - 1, eps_tt = sqrt(R^2+K)/R - 1.
/// The mapping conserves area, so (1+eps_rr)(1+eps_tt) = 1.
pub fn radial_strain_truth(r: f64, model: &RadialMotionModel, steps: f64) -> (f64, f64) {
    let k = radial_k(model, steps);
    let deformed = (r * r + k).sqrt();
    (r / deformed - 1.0, deformed / r - 1.0)
}

/// Annulus geometry separating lumen, wall, and background for truth masks.
#[derive(Clone, Copy, Debug)]
pub struct VesselRegions {
    pub center: [f64; 2],
    pub inner_radius: f64,
    pub outer_radius: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    Lumen,
    Wall,
    Background,
}

impl VesselRegions {
    pub fn classify(&self, pos: [f64; 2]) -> Region {
        let (r, _) = radial_frame(self.center, pos);
        if r < self.inner_radius {
            Region::Lumen
        } else if r <= self.outer_radius {
            Region::Wall
        } else {
            Region::Background
        }
    }

    /// Same annulus with the wall eroded by `margin` on both faces; used to
    /// keep gradient windows clear of the lumen and background boundaries.
    pub fn eroded(&self, margin: f64) -> VesselRegions {
        VesselRegions {
            center: self.center,
            inner_radius: self.inner_radius + margin,
            outer_radius: self.outer_radius - margin,
        }
    }
}

/// Ground-truth displacement sampled on a lattice. Without regions every
/// point follows the motion law; with regions the lumen is masked out (it
/// holds no scatterers) and the background is pinned at zero.
pub fn ground_truth_displacement(
    grid: &BeamGrid,
    regions: Option<&VesselRegions>,
    motion: &MotionTruth,
) -> VectorDisplacementField {
    let mut u_x = Array2D::zeros(grid.n_axial, grid.n_lateral);
    let mut u_z = Array2D::zeros(grid.n_axial, grid.n_lateral);
    let mut valid = Array2D::filled(grid.n_axial, grid.n_lateral, true);
    for i in 0..grid.n_axial {
        for j in 0..grid.n_lateral {
            let pos = grid.position(i as f64, j as f64);
            let region = regions.map_or(Region::Wall, |g| g.classify(pos));
            match region {
                Region::Lumen => valid.set(i, j, false),
                Region::Background => {}
                Region::Wall => {
                    let u = motion.displacement_at(pos);
                    u_x.set(i, j, u[0]);
                    u_z.set(i, j, u[1]);
                }
            }
        }
    }
    VectorDisplacementField {
        grid: *grid,
        u_x,
        u_z,
        valid,
    }
}

/// Ground-truth strain tensor of the continuum wall motion on a lattice.
/// Wall points carry the radial law rotated into imaging axes, background
/// points are zero strain, lumen points are masked.
pub fn vessel_strain_truth(
    grid: &BeamGrid,
    regions: &VesselRegions,
    model: &RadialMotionModel,
    steps: f64,
) -> StrainField {
    let (rows, cols) = (grid.n_axial, grid.n_lateral);
    let mut e_xx = Array2D::zeros(rows, cols);
    let mut e_zz = Array2D::zeros(rows, cols);
    let mut e_xz = Array2D::zeros(rows, cols);
    let mut p_max = Array2D::zeros(rows, cols);
    let mut p_min = Array2D::zeros(rows, cols);
    let mut p_angle = Array2D::zeros(rows, cols);
    let mut valid = Array2D::filled(rows, cols, true);
    for i in 0..rows {
        for j in 0..cols {
            let pos = grid.position(i as f64, j as f64);
            match regions.classify(pos) {
                Region::Lumen => valid.set(i, j, false),
                Region::Background => {}
                Region::Wall => {
                    let (r, dir) = radial_frame(model.center, pos);
                    let (err, ett) = radial_strain_truth(r, model, steps);
                    let (c, s) = (dir[0], dir[1]);
                    let xx = err * c * c + ett * s * s;
                    let zz = err * s * s + ett * c * c;
                    let xz = (err - ett) * s * c;
                    e_xx.set(i, j, xx);
                    e_zz.set(i, j, zz);
                    e_xz.set(i, j, xz);
                    let (pmax, pmin, ang) = principal_strains(xx, zz, xz);
                    p_max.set(i, j, pmax);
                    p_min.set(i, j, pmin);
                    p_angle.set(i, j, ang);
                }
            }
        }
    }
    StrainField {
        grid: *grid,
        e_xx,
        e_zz,
        e_xz,
        p_max,
        p_min,
        p_angle,
        valid,
    }
}
