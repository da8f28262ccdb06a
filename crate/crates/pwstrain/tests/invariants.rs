//! Property tests for the algebraic contracts that hold for every input:
//! window and delay shapes, subsample peak fitting, displacement compounding,
//! principal strains, metric invariances, and artifact round trips.

use proptest::prelude::*;

use pwstrain::array2::Array2D;
use pwstrain::beamform::BeamGrid;
use pwstrain::dispcomp::triangulate_lateral;
use pwstrain::io;
use pwstrain::metrics::{contrast_ratio, fwhm, Axis};
use pwstrain::phantom::{ScattererField, ScattererLabel};
use pwstrain::probe::{build_sequence, transmit_delays, tukey_apodization, TransducerSpec};
use pwstrain::sim::ChannelDataset;
use pwstrain::strain::principal_strains;
use pwstrain::track::{median_filter, parabolic_peak_offset, DisplacementField};

fn small_grid(rows: usize, cols: usize) -> BeamGrid {
    BeamGrid {
        medium_angle: 0.0,
        origin: [0.0, 20e-3],
        axial_step: 50e-6,
        lateral_step: 70e-6,
        n_axial: rows,
        n_lateral: cols,
    }
}

fn plane(rows: usize, cols: usize, values: Vec<f64>) -> Array2D<f64> {
    Array2D::from_vec(rows, cols, values)
}

proptest! {
    #[test]
    fn tukey_window_symmetric_unimodal_in_unit_range(
        n in 1usize..200,
        fraction in 0.0f64..=1.0,
    ) {
        let w = tukey_apodization(n, fraction).unwrap();
        prop_assert_eq!(w.len(), n);
        for i in 0..n {
            prop_assert!(w[i] >= 0.0 && w[i] <= 1.0 + 1e-12);
            prop_assert!((w[i] - w[n - 1 - i]).abs() < 1e-12);
        }
        // Rises monotonically to the middle; tapered edges start at zero.
        for pair in w[..n.div_ceil(2)].windows(2) {
            prop_assert!(pair[1] >= pair[0] - 1e-12);
        }
        if n > 1 {
            if fraction == 0.0 {
                prop_assert!((w[0] - 1.0).abs() < 1e-12);
            } else {
                prop_assert!(w[0].abs() < 1e-12);
            }
        }
        if n % 2 == 1 {
            prop_assert!((w[n / 2] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn transmit_delays_start_at_zero_and_follow_steering(
        angle in -0.6f64..0.6,
        elements in 2usize..64,
    ) {
        let mut spec = TransducerSpec::default_probe();
        spec.element_count = elements;
        let d = transmit_delays(&spec, angle);
        prop_assert_eq!(d.len(), elements);
        let min = d.iter().copied().fold(f64::INFINITY, f64::min);
        prop_assert!(min.abs() < 1e-18);
        // The wavefront walks across the aperture monotonically in the
        // steering direction.
        for pair in d.windows(2) {
            let step = pair[1] - pair[0];
            if angle > 1e-9 {
                prop_assert!(step >= 0.0);
            } else if angle < -1e-9 {
                prop_assert!(step <= 0.0);
            } else {
                prop_assert!(step.abs() < 1e-18);
            }
        }
    }

    #[test]
    fn sequence_covers_span_symmetrically(
        events in 1usize..40,
        span_deg in 0.5f64..15.0,
    ) {
        let medium = 0.34;
        let span = span_deg.to_radians();
        let seq = build_sequence(&[-medium, 0.0, medium], events, span, 10_000.0).unwrap();
        prop_assert_eq!(seq.events.len(), 3 * events);
        prop_assert_eq!(seq.events_per_medium, events);
        for (m, &center) in [-medium, 0.0, medium].iter().enumerate() {
            let angles: Vec<f64> = seq
                .events_for_medium(m)
                .iter()
                .map(|e| e.steering_angle)
                .collect();
            if events == 1 {
                prop_assert!((angles[0] - center).abs() < 1e-12);
                continue;
            }
            prop_assert!((angles[0] - (center - span)).abs() < 1e-12);
            prop_assert!((angles[events - 1] - (center + span)).abs() < 1e-12);
            // Symmetric pairs about the medium angle.
            for i in 0..events {
                let mirror = angles[events - 1 - i] - center;
                prop_assert!((mirror + (angles[i] - center)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn parabolic_vertex_recovers_sampled_parabola(
        vertex in -0.49f64..0.49,
        curvature in 0.05f64..4.0,
        peak in -1.0f64..1.0,
    ) {
        let y = |t: f64| peak - curvature * (t - vertex) * (t - vertex);
        let off = parabolic_peak_offset(y(-1.0), y(0.0), y(1.0));
        prop_assert!((off - vertex).abs() < 1e-9);
        prop_assert!(off.abs() < 1.0);
    }

    #[test]
    fn triangulation_is_antisymmetric_and_invertible(
        ux in proptest::collection::vec(-50e-6f64..50e-6, 12),
        uz in proptest::collection::vec(-50e-6f64..50e-6, 12),
        angle in 0.05f64..0.8,
    ) {
        let (s, c) = angle.sin_cos();
        let n = ux.len();
        let to = |v: &[f64]| plane(3, 4, v.to_vec());
        let a_plus = plane(3, 4, (0..n).map(|i| ux[i] * s + uz[i] * c).collect());
        let a_minus = plane(3, 4, (0..n).map(|i| -ux[i] * s + uz[i] * c).collect());
        let rec = triangulate_lateral(&a_plus, &a_minus, angle).unwrap();
        let swapped = triangulate_lateral(&a_minus, &a_plus, angle).unwrap();
        let truth = to(&ux);
        for i in 0..3 {
            for j in 0..4 {
                prop_assert!((rec.get(i, j) - truth.get(i, j)).abs() < 1e-12);
                prop_assert!((rec.get(i, j) + swapped.get(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn principal_strains_preserve_trace_and_order(
        e_xx in -0.2f64..0.2,
        e_zz in -0.2f64..0.2,
        e_xz in -0.2f64..0.2,
    ) {
        let (p_max, p_min, angle) = principal_strains(e_xx, e_zz, e_xz);
        prop_assert!(p_max >= p_min);
        prop_assert!((p_max + p_min - (e_xx + e_zz)).abs() < 1e-12);
        // The rotated tensor has no shear on the principal axes.
        let (s, c) = angle.sin_cos();
        let shear = (e_zz - e_xx) * s * c + e_xz * (c * c - s * s);
        prop_assert!(shear.abs() < 1e-12);
    }

    #[test]
    fn median_filter_bounded_and_fixes_constants(
        values in proptest::collection::vec(-1e-4f64..1e-4, 35),
        level in -1e-4f64..1e-4,
    ) {
        let grid = small_grid(5, 7);
        let field = DisplacementField {
            grid,
            u_axial: plane(5, 7, values.clone()),
            u_lateral: Array2D::filled(5, 7, level),
            quality: Array2D::filled(5, 7, 1.0),
        };
        let out = median_filter(&field, [150e-6, 150e-6]).unwrap();
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for i in 0..5 {
            for j in 0..7 {
                prop_assert!(out.u_axial.get(i, j) >= lo && out.u_axial.get(i, j) <= hi);
                prop_assert_eq!(out.u_lateral.get(i, j), level);
                prop_assert_eq!(out.quality.get(i, j), 1.0);
            }
        }
    }

    #[test]
    fn psf_metrics_ignore_envelope_scale(
        scale in 1e-3f64..1e3,
        sigma_px in 3.0f64..12.0,
    ) {
        let (rows, cols) = (61, 61);
        let grid = small_grid(rows, cols);
        let mut values = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                let d2 = (i as f64 - 30.0).powi(2) + (j as f64 - 30.0).powi(2);
                values.push((-0.5 * d2 / (sigma_px * sigma_px)).exp());
            }
        }
        let env = plane(rows, cols, values.clone());
        let scaled = plane(rows, cols, values.iter().map(|v| v * scale).collect());
        let r = 0.4e-3;
        let cr = contrast_ratio(&env, &grid, r).unwrap();
        let cr_scaled = contrast_ratio(&scaled, &grid, r).unwrap();
        prop_assert!((cr - cr_scaled).abs() < 1e-9);
        for axis in [Axis::Axial, Axis::Lateral] {
            let w = fwhm(&env, &grid, axis).unwrap();
            let w_scaled = fwhm(&scaled, &grid, axis).unwrap();
            prop_assert!((w - w_scaled).abs() < 1e-12);
        }
    }
}

proptest! {
    // Round trips do file io per case; a reduced case count keeps the suite
    // quick while still varying shapes and payloads.
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn scatterer_artifact_round_trips(
        n in 1usize..50,
        seed in any::<u64>(),
        payload in any::<u64>(),
    ) {
        let mix = |i: u64, salt: u64| {
            let h = (payload ^ salt).wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i);
            (h as f64 / u64::MAX as f64) * 2e-3 - 1e-3
        };
        let field = ScattererField {
            x: (0..n as u64).map(|i| mix(i, 1)).collect(),
            z: (0..n as u64).map(|i| mix(i, 2) + 20e-3).collect(),
            amplitude: (0..n as u64).map(|i| mix(i, 3)).collect(),
            label: (0..n)
                .map(|i| if i % 3 == 0 { ScattererLabel::Wall } else { ScattererLabel::Background })
                .collect(),
            rng_seed: seed,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scatterers.bin");
        io::write_scatterers(&path, &field).unwrap();
        let back = io::read_scatterers(&path).unwrap();
        prop_assert_eq!(back.x, field.x);
        prop_assert_eq!(back.z, field.z);
        prop_assert_eq!(back.amplitude, field.amplitude);
        prop_assert_eq!(back.label, field.label);
    }

    #[test]
    fn channel_artifact_round_trips(
        events in 1usize..4,
        elements in 1usize..6,
        samples in 1usize..40,
        t0 in -1e-6f64..1e-6,
    ) {
        let panels: Vec<Vec<Vec<f64>>> = (0..events)
            .map(|e| {
                (0..elements)
                    .map(|c| {
                        (0..samples)
                            .map(|s| ((e * 31 + c * 7 + s) as f64).sin() * 1e-2)
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let ds = ChannelDataset { panels, sampling_frequency: 21.2e6, t0 };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("channels.bin");
        io::write_channel_data(&path, &ds).unwrap();
        let back = io::read_channel_data(&path).unwrap();
        // Bulk samples are stored single-precision; the round trip is exact
        // at f32 resolution.
        for (pb, pd) in back.panels.iter().zip(&ds.panels) {
            for (tb, td) in pb.iter().zip(pd) {
                for (&b, &d) in tb.iter().zip(td) {
                    prop_assert_eq!(b, d as f32 as f64);
                }
            }
        }
        prop_assert_eq!(back.sampling_frequency, ds.sampling_frequency);
        prop_assert_eq!(back.t0, ds.t0);
    }

    #[test]
    fn frame_artifact_round_trips(
        rows in 2usize..12,
        cols in 2usize..12,
        angle in -0.4f64..0.4,
    ) {
        let grid = BeamGrid {
            medium_angle: angle,
            origin: [1e-3, 22e-3],
            axial_step: 18e-6,
            lateral_step: 46e-6,
            n_axial: rows,
            n_lateral: cols,
        };
        let rf = plane(
            rows,
            cols,
            (0..rows * cols).map(|k| (k as f64 * 0.7).cos()).collect(),
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("frame.bin");
        io::write_frame(&path, &grid, &rf).unwrap();
        let (grid_back, rf_back) = io::read_frame(&path).unwrap();
        prop_assert_eq!(grid_back, grid);
        // Sample planes are stored single-precision, grid metadata in full.
        for (&b, &d) in rf_back.as_slice().iter().zip(rf.as_slice()) {
            prop_assert_eq!(b, d as f32 as f64);
        }
    }
}
