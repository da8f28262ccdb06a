//! Vector displacement from angled axial estimates.
//!
//! Tracking along a medium rotated by +a measures the projection
//! `u . (sin a, cos a)`; the -a medium measures `u . (-sin a, cos a)`.
//! Subtracting the two isolates the lateral component:
//!
//! `u_x = (a_plus - a_minus) / (2 sin a)`
//!
//! while their sum provides a redundant axial estimate
//! `(a_plus + a_minus) / (2 cos a)` that is compared against the zero-angle
//! medium's own axial estimate as a consistency diagnostic.
//!
//! The angled lattices do not coincide with the zero-angle lattice, so the
//! angled estimates are first resampled bilinearly at the reference lattice
//! positions; points outside the angled coverage are masked out.

use crate::array2::Array2D;
use crate::beamform::BeamGrid;
use crate::track::DisplacementField;
use crate::{Error, Result};

/// Displacement in world axes on the zero-angle lattice. `u_x` is lateral
/// (+x), `u_z` is axial (+z, depth); `valid` marks points covered by every
/// contributing medium.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorDisplacementField {
    pub grid: BeamGrid,
    pub u_x: Array2D<f64>,
    pub u_z: Array2D<f64>,
    pub valid: Array2D<bool>,
}

/// Bilinearly resamples a plane of values living on `from` at the world
/// positions of `to`'s points. Points falling outside `from` are masked.
/// Fails if nothing overlaps.
pub fn resample_field(
    values: &Array2D<f64>,
    from: &BeamGrid,
    to: &BeamGrid,
) -> Result<(Array2D<f64>, Array2D<bool>)> {
    if values.rows() != from.n_axial || values.cols() != from.n_lateral {
        return Err(Error::GridMismatch(
            "values do not match their source grid".into(),
        ));
    }
    let mut out = Array2D::zeros(to.n_axial, to.n_lateral);
    let mut valid = Array2D::filled(to.n_axial, to.n_lateral, false);
    let mut any = false;
    for i in 0..to.n_axial {
        for j in 0..to.n_lateral {
            let p = to.position(i as f64, j as f64);
            let (mut fi, mut fj) = from.indices_of(p);
            // The world-coordinate round trip perturbs indices at the 1e-13
            // pixel scale; snap node-aligned targets so coinciding lattices
            // resample exactly and boundary rows are not masked.
            if (fi - fi.round()).abs() < 1e-6 {
                fi = fi.round();
            }
            if (fj - fj.round()).abs() < 1e-6 {
                fj = fj.round();
            }
            if fi < 0.0
                || fj < 0.0
                || fi > (from.n_axial - 1) as f64
                || fj > (from.n_lateral - 1) as f64
            {
                continue;
            }
            let i0 = (fi.floor() as usize).min(from.n_axial - 2);
            let j0 = (fj.floor() as usize).min(from.n_lateral - 2);
            let di = fi - i0 as f64;
            let dj = fj - j0 as f64;
            let v00 = values.get(i0, j0);
            let v01 = values.get(i0, j0 + 1);
            let v10 = values.get(i0 + 1, j0);
            let v11 = values.get(i0 + 1, j0 + 1);
            let v = v00 * (1.0 - di) * (1.0 - dj)
                + v01 * (1.0 - di) * dj
                + v10 * di * (1.0 - dj)
                + v11 * di * dj;
            out.set(i, j, v);
            valid.set(i, j, true);
            any = true;
        }
    }
    if !any {
        return Err(Error::GridMismatch(
            "resampling target does not overlap the source grid".into(),
        ));
    }
    Ok((out, valid))
}

/// Triangulates the lateral component from the two angled axial estimates
/// (already resampled onto one lattice).
pub fn triangulate_lateral(
    a_plus: &Array2D<f64>,
    a_minus: &Array2D<f64>,
    medium_angle: f64,
) -> Result<Array2D<f64>> {
    if !a_plus.same_shape(a_minus) {
        return Err(Error::GridMismatch(
            "angled estimates differ in shape".into(),
        ));
    }
    let s = medium_angle.sin();
    if s.abs() < 1e-9 {
        return Err(Error::InvalidArgument(
            "triangulation needs a non-zero medium angle".into(),
        ));
    }
    let mut out = Array2D::zeros(a_plus.rows(), a_plus.cols());
    for i in 0..out.rows() {
        for j in 0..out.cols() {
            out.set(i, j, (a_plus.get(i, j) - a_minus.get(i, j)) / (2.0 * s));
        }
    }
    Ok(out)
}

/// Combines per-medium tracking into a world-axes vector field on the
/// zero-angle lattice. Returns the field and the RMS discrepancy between the
/// triangulated axial estimate `(a_plus + a_minus) / (2 cos a)` and the
/// zero-angle axial estimate over valid points (a registration diagnostic).
pub fn compound_tracks(
    minus: &DisplacementField,
    zero: &DisplacementField,
    plus: &DisplacementField,
) -> Result<(VectorDisplacementField, f64)> {
    let a = plus.grid.medium_angle;
    if !(a > 0.0) {
        return Err(Error::InvalidArgument(
            "plus-medium angle must be positive".into(),
        ));
    }
    if (minus.grid.medium_angle + a).abs() > 1e-12 {
        return Err(Error::GridMismatch(format!(
            "angled mediums are not symmetric: {} vs {}",
            minus.grid.medium_angle, a
        )));
    }
    if zero.grid.medium_angle != 0.0 {
        return Err(Error::GridMismatch(
            "reference medium must be at zero angle".into(),
        ));
    }

    let (ap, ap_valid) = resample_field(&plus.u_axial, &plus.grid, &zero.grid)?;
    let (am, am_valid) = resample_field(&minus.u_axial, &minus.grid, &zero.grid)?;
    let u_x = triangulate_lateral(&ap, &am, a)?;
    let u_z = zero.u_axial.clone();

    let mut valid = Array2D::filled(u_x.rows(), u_x.cols(), false);
    let mut sq_sum = 0.0;
    let mut n = 0u64;
    let cos_a = a.cos();
    for i in 0..u_x.rows() {
        for j in 0..u_x.cols() {
            let ok = ap_valid.get(i, j) && am_valid.get(i, j);
            valid.set(i, j, ok);
            if ok {
                let diag = (ap.get(i, j) + am.get(i, j)) / (2.0 * cos_a);
                let d = diag - u_z.get(i, j);
                sq_sum += d * d;
                n += 1;
            }
        }
    }
    let rms = if n > 0 { (sq_sum / n as f64).sqrt() } else { 0.0 };
    Ok((
        VectorDisplacementField {
            grid: zero.grid,
            u_x,
            u_z,
            valid,
        },
        rms,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lattice(angle: f64, n_ax: usize, n_lat: usize, step: f64) -> BeamGrid {
        BeamGrid {
            medium_angle: angle,
            origin: [0.0, 20e-3],
            axial_step: step,
            lateral_step: step,
            n_axial: n_ax,
            n_lateral: n_lat,
        }
    }

    fn field_on(grid: BeamGrid, u_axial: Array2D<f64>) -> DisplacementField {
        let (r, c) = (u_axial.rows(), u_axial.cols());
        DisplacementField {
            grid,
            u_axial,
            u_lateral: Array2D::zeros(r, c),
            quality: Array2D::filled(r, c, 1.0),
        }
    }

    #[test]
    fn triangulation_recovers_exact_projections() {
        let angle = (1.0f64 / 3.0).asin();
        let (s, c) = angle.sin_cos();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let (rows, cols) = (4, 5);
            let mut ux = Array2D::zeros(rows, cols);
            let mut uz = Array2D::zeros(rows, cols);
            let mut ap = Array2D::zeros(rows, cols);
            let mut am = Array2D::zeros(rows, cols);
            for i in 0..rows {
                for j in 0..cols {
                    let x = (rng.random::<f64>() - 0.5) * 40e-6;
                    let z = (rng.random::<f64>() - 0.5) * 40e-6;
                    ux.set(i, j, x);
                    uz.set(i, j, z);
                    ap.set(i, j, x * s + z * c);
                    am.set(i, j, -x * s + z * c);
                }
            }
            let got = triangulate_lateral(&ap, &am, angle).unwrap();
            for i in 0..rows {
                for j in 0..cols {
                    assert_relative_eq!(got.get(i, j), ux.get(i, j), max_relative = 1e-12);
                    // The redundant axial estimate matches u_z too.
                    let diag = (ap.get(i, j) + am.get(i, j)) / (2.0 * c);
                    assert_relative_eq!(diag, uz.get(i, j), max_relative = 1e-12);
                }
            }
        }
    }

    #[test]
    fn triangulation_is_antisymmetric_in_the_mediums() {
        let angle = 0.3;
        let ap = Array2D::from_vec(1, 3, vec![1e-6, -2e-6, 3e-6]);
        let am = Array2D::from_vec(1, 3, vec![0.5e-6, 1e-6, -1e-6]);
        let fwd = triangulate_lateral(&ap, &am, angle).unwrap();
        let swapped = triangulate_lateral(&am, &ap, angle).unwrap();
        for j in 0..3 {
            assert_relative_eq!(fwd.get(0, j), -swapped.get(0, j), epsilon = 1e-18);
        }
        // Equal projections mean zero lateral motion.
        let same = triangulate_lateral(&ap, &ap, angle).unwrap();
        assert!(same.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn triangulation_rejects_zero_angle_and_shape_mismatch() {
        let a = Array2D::zeros(2, 2);
        assert!(triangulate_lateral(&a, &a, 0.0).is_err());
        let b = Array2D::zeros(2, 3);
        assert!(triangulate_lateral(&a, &b, 0.3).is_err());
    }

    #[test]
    fn resample_identity_is_exact() {
        let g = lattice(0.2, 6, 7, 100e-6);
        let mut vals = Array2D::zeros(6, 7);
        for i in 0..6 {
            for j in 0..7 {
                vals.set(i, j, (i * 7 + j) as f64);
            }
        }
        let (out, valid) = resample_field(&vals, &g, &g).unwrap();
        assert_eq!(out, vals);
        assert!(valid.as_slice().iter().all(|&v| v));
    }

    #[test]
    fn resample_affine_field_between_rotated_grids() {
        // Values linear in world coordinates survive bilinear resampling.
        let angle = (1.0f64 / 3.0).asin();
        let src = lattice(angle, 61, 61, 100e-6);
        let dst = lattice(0.0, 21, 21, 80e-6);
        let f = |p: [f64; 2]| 3.0 * p[0] - 2.0 * p[1] + 5e-3;
        let mut vals = Array2D::zeros(61, 61);
        for i in 0..61 {
            for j in 0..61 {
                vals.set(i, j, f(src.position(i as f64, j as f64)));
            }
        }
        let (out, valid) = resample_field(&vals, &src, &dst).unwrap();
        for i in 0..21 {
            for j in 0..21 {
                assert!(valid.get(i, j), "dst point ({i},{j}) should be covered");
                let expect = f(dst.position(i as f64, j as f64));
                assert_relative_eq!(out.get(i, j), expect, max_relative = 1e-9);
            }
        }
    }

    #[test]
    fn resample_masks_outside_coverage() {
        let src = lattice(0.0, 5, 5, 100e-6);
        let mut dst = lattice(0.0, 5, 5, 100e-6);
        dst.origin[0] += 300e-6; // shift target sideways
        let vals = Array2D::filled(5, 5, 1.0);
        let (_, valid) = resample_field(&vals, &src, &dst).unwrap();
        let covered = valid.as_slice().iter().filter(|&&v| v).count();
        assert!(covered > 0 && covered < 25);
        // Entirely disjoint grids: error.
        dst.origin[0] += 1.0;
        assert!(resample_field(&vals, &src, &dst).is_err());
    }

    #[test]
    fn compound_tracks_round_trip() {
        let angle = (1.0f64 / 3.0).asin();
        let (s, c) = angle.sin_cos();
        // Angled lattices cover a larger area so the reference lattice
        // stays inside both.
        let gp = lattice(angle, 41, 41, 120e-6);
        let gm = lattice(-angle, 41, 41, 120e-6);
        let g0 = lattice(0.0, 11, 11, 100e-6);
        // Constant true motion.
        let (ux, uz) = (4e-6, -7e-6);
        let plus = field_on(gp, Array2D::filled(41, 41, ux * s + uz * c));
        let minus = field_on(gm, Array2D::filled(41, 41, -ux * s + uz * c));
        let zero = field_on(g0, Array2D::filled(11, 11, uz));
        let (vf, rms) = compound_tracks(&minus, &zero, &plus).unwrap();
        assert!(rms < 1e-15, "consistency rms {rms}");
        for i in 0..11 {
            for j in 0..11 {
                assert!(vf.valid.get(i, j));
                assert_relative_eq!(vf.u_x.get(i, j), ux, max_relative = 1e-9);
                assert_relative_eq!(vf.u_z.get(i, j), uz, max_relative = 1e-9);
            }
        }
    }

    #[test]
    fn compound_tracks_reports_inconsistency() {
        let angle = 0.3;
        let gp = lattice(angle, 31, 31, 120e-6);
        let gm = lattice(-angle, 31, 31, 120e-6);
        let g0 = lattice(0.0, 9, 9, 100e-6);
        let plus = field_on(gp, Array2D::filled(31, 31, 10e-6));
        let minus = field_on(gm, Array2D::filled(31, 31, 10e-6));
        // Zero-medium disagrees with the diagonal estimate by 2 um.
        let diag = 10e-6 / angle.cos();
        let zero = field_on(g0, Array2D::filled(9, 9, diag - 2e-6));
        let (_, rms) = compound_tracks(&minus, &zero, &plus).unwrap();
        assert_relative_eq!(rms, 2e-6, max_relative = 1e-9);
    }

    #[test]
    fn compound_tracks_validates_medium_angles() {
        let gp = lattice(0.3, 5, 5, 100e-6);
        let gm = lattice(-0.2, 5, 5, 100e-6);
        let g0 = lattice(0.0, 5, 5, 100e-6);
        let f = |g: BeamGrid| field_on(g, Array2D::zeros(5, 5));
        assert!(compound_tracks(&f(gm), &f(g0), &f(gp)).is_err());
        let gm_ok = lattice(-0.3, 5, 5, 100e-6);
        let g_bad = lattice(0.1, 5, 5, 100e-6);
        assert!(compound_tracks(&f(gm_ok), &f(g_bad), &f(gp)).is_err());
    }
}
