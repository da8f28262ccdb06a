//! Least-squares strain estimation and principal strains.
//!
//! Spatial displacement gradients are estimated by sliding a 2D window over
//! the lattice and fitting, by least squares, one shared slope along the
//! differentiation direction to all lines of the window (each line keeps its
//! own intercept). Averaging the regression over several parallel lines
//! suppresses displacement noise; the estimator is exact for affine fields.
//!
//! Windows shrink at lattice edges and skip masked points; a point's output
//! is masked when the point itself is masked or when fewer than two distinct
//! sample positions survive in its window.

use crate::array2::Array2D;
use crate::beamform::BeamGrid;
use crate::dispcomp::VectorDisplacementField;
use crate::par;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradientDirection {
    Axial,
    Lateral,
}

/// Window sizes for the gradient estimator, each as (axial extent, lateral
/// extent) in meters. `axial_derivative` is used when differentiating along
/// the axial axis, `lateral_derivative` along the lateral axis.
#[derive(Clone, Copy, Debug)]
pub struct StrainWindows {
    pub axial_derivative: [f64; 2],
    pub lateral_derivative: [f64; 2],
}

impl Default for StrainWindows {
    fn default() -> Self {
        StrainWindows {
            axial_derivative: [1.52e-3, 1.08e-3],
            lateral_derivative: [0.76e-3, 1.62e-3],
        }
    }
}

/// In-plane strain tensor with principal decomposition, on the displacement
/// lattice.
#[derive(Clone, Debug, PartialEq)]
pub struct StrainField {
    pub grid: BeamGrid,
    pub e_xx: Array2D<f64>,
    pub e_zz: Array2D<f64>,
    pub e_xz: Array2D<f64>,
    pub p_max: Array2D<f64>,
    pub p_min: Array2D<f64>,
    /// Orientation of the major principal axis from +x, radians.
    pub p_angle: Array2D<f64>,
    pub valid: Array2D<bool>,
}

/// Centered window offsets of `n` samples: `-(n-1)/2 ..= n/2`, one extra on
/// the positive side when `n` is even.
fn window_offsets(n: usize) -> (isize, isize) {
    (-(((n - 1) / 2) as isize), (n / 2) as isize)
}

/// Least-squares gradient of `values` along `direction`. `window` is the
/// (axial, lateral) extent in meters, converted to sample counts with the
/// lattice steps; the extent along the differentiation direction must cover
/// at least two samples.
pub fn lsqse_gradient(
    values: &Array2D<f64>,
    valid: &Array2D<bool>,
    grid: &BeamGrid,
    direction: GradientDirection,
    window: [f64; 2],
) -> Result<(Array2D<f64>, Array2D<bool>)> {
    if values.rows() != grid.n_axial || values.cols() != grid.n_lateral {
        return Err(Error::GridMismatch(
            "values do not match the lattice descriptor".into(),
        ));
    }
    if !values.same_shape(valid) {
        return Err(Error::GridMismatch("mask shape mismatch".into()));
    }
    let steps = [grid.axial_step, grid.lateral_step];
    let n_ax = (window[0] / steps[0]).round() as isize;
    let n_lat = (window[1] / steps[1]).round() as isize;
    let (n_fit, n_across, fit_step) = match direction {
        GradientDirection::Axial => (n_ax, n_lat.max(1), steps[0]),
        GradientDirection::Lateral => (n_lat, n_ax.max(1), steps[1]),
    };
    if n_fit < 2 {
        return Err(Error::InvalidArgument(format!(
            "gradient window covers {n_fit} samples along the fit direction; need at least 2"
        )));
    }
    let (fit_lo, fit_hi) = window_offsets(n_fit as usize);
    let (across_lo, across_hi) = window_offsets(n_across as usize);

    let (rows, cols) = (values.rows(), values.cols());
    let out_rows = par::map_indexed(rows, |i| {
        let mut slope_row = vec![0.0f64; cols];
        let mut valid_row = vec![false; cols];
        for j in 0..cols {
            if !valid.get(i, j) {
                continue;
            }
            let mut num = 0.0;
            let mut den = 0.0;
            for da in across_lo..=across_hi {
                // One regression line: accumulate raw moments, then center.
                let mut n = 0.0f64;
                let mut sum_s = 0.0;
                let mut sum_y = 0.0;
                let mut sum_sy = 0.0;
                let mut sum_ss = 0.0;
                for df in fit_lo..=fit_hi {
                    let (ii, jj) = match direction {
                        GradientDirection::Axial => (i as isize + df, j as isize + da),
                        GradientDirection::Lateral => (i as isize + da, j as isize + df),
                    };
                    if ii < 0 || jj < 0 || ii >= rows as isize || jj >= cols as isize {
                        continue;
                    }
                    if !valid.get(ii as usize, jj as usize) {
                        continue;
                    }
                    let s = df as f64 * fit_step;
                    let y = values.get(ii as usize, jj as usize);
                    n += 1.0;
                    sum_s += s;
                    sum_y += y;
                    sum_sy += s * y;
                    sum_ss += s * s;
                }
                if n >= 2.0 {
                    num += sum_sy - sum_s * sum_y / n;
                    den += sum_ss - sum_s * sum_s / n;
                }
            }
            if den > fit_step * fit_step * 1e-9 {
                slope_row[j] = num / den;
                valid_row[j] = true;
            }
        }
        (slope_row, valid_row)
    });

    let mut slopes = Array2D::zeros(rows, cols);
    let mut mask = Array2D::filled(rows, cols, false);
    for (i, (srow, vrow)) in out_rows.into_iter().enumerate() {
        for j in 0..cols {
            slopes.set(i, j, srow[j]);
            mask.set(i, j, vrow[j]);
        }
    }
    Ok((slopes, mask))
}

/// Principal values and major-axis orientation of the symmetric 2D strain
/// tensor.
pub fn principal_strains(e_xx: f64, e_zz: f64, e_xz: f64) -> (f64, f64, f64) {
    let mean = 0.5 * (e_xx + e_zz);
    let diff = 0.5 * (e_xx - e_zz);
    let radius = (diff * diff + e_xz * e_xz).sqrt();
    let angle = 0.5 * (2.0 * e_xz).atan2(e_xx - e_zz);
    (mean + radius, mean - radius, angle)
}

/// Full strain tensor from a vector displacement field on the zero-angle
/// lattice: normal strains from the same-direction gradients, shear from the
/// symmetrized cross gradients, and the principal decomposition per point.
pub fn strain_tensor(
    disp: &VectorDisplacementField,
    windows: &StrainWindows,
) -> Result<StrainField> {
    if disp.grid.medium_angle.abs() > 1e-9 {
        return Err(Error::InvalidArgument(
            "strain axes require the zero-angle lattice".into(),
        ));
    }
    let g = &disp.grid;
    let (e_zz, v_zz) = lsqse_gradient(
        &disp.u_z,
        &disp.valid,
        g,
        GradientDirection::Axial,
        windows.axial_derivative,
    )?;
    let (e_xx, v_xx) = lsqse_gradient(
        &disp.u_x,
        &disp.valid,
        g,
        GradientDirection::Lateral,
        windows.lateral_derivative,
    )?;
    let (dux_dz, v_xz1) = lsqse_gradient(
        &disp.u_x,
        &disp.valid,
        g,
        GradientDirection::Axial,
        windows.axial_derivative,
    )?;
    let (duz_dx, v_xz2) = lsqse_gradient(
        &disp.u_z,
        &disp.valid,
        g,
        GradientDirection::Lateral,
        windows.lateral_derivative,
    )?;

    let (rows, cols) = (e_zz.rows(), e_zz.cols());
    let mut e_xz = Array2D::zeros(rows, cols);
    let mut p_max = Array2D::zeros(rows, cols);
    let mut p_min = Array2D::zeros(rows, cols);
    let mut p_angle = Array2D::zeros(rows, cols);
    let mut valid = Array2D::filled(rows, cols, false);
    for i in 0..rows {
        for j in 0..cols {
            let ok = v_zz.get(i, j) && v_xx.get(i, j) && v_xz1.get(i, j) && v_xz2.get(i, j);
            if !ok {
                continue;
            }
            let shear = 0.5 * (dux_dz.get(i, j) + duz_dx.get(i, j));
            e_xz.set(i, j, shear);
            let (pmax, pmin, ang) = principal_strains(e_xx.get(i, j), e_zz.get(i, j), shear);
            p_max.set(i, j, pmax);
            p_min.set(i, j, pmin);
            p_angle.set(i, j, ang);
            valid.set(i, j, true);
        }
    }
    Ok(StrainField {
        grid: *g,
        e_xx,
        e_zz,
        e_xz,
        p_max,
        p_min,
        p_angle,
        valid,
    })
}
