//! Staged experiment runner.
//!
//! Each stage reads the artifacts of its predecessor, writes its own
//! atomically, and records a content hash so an unchanged stage is skipped on
//! the next run. Artifacts never embed timestamps, machine names, or thread
//! counts: two runs of one configuration produce byte-identical directories.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::array2::Array2D;
use crate::beamform::{coherent_compound, das_beamform_with, envelope, BeamGrid, BeamformedFrame};
use crate::config::{
    ExperimentConfig, Resolved, ResolvedMotion, ResolvedPhantom, ResolvedSweep,
};
use crate::dispcomp::{compound_tracks, VectorDisplacementField};
use crate::io;
use crate::metrics::{
    error_report, ground_truth_displacement, psf_report, vessel_strain_truth, ErrorReport,
    MotionTruth, Region, VesselRegions,
};
use crate::phantom::{
    apply_radial_step, apply_rigid_shift, single_scatterer, vessel_phantom, ScattererField,
};
use crate::probe::{build_sequence, tukey_apodization, PlaneWaveEvent};
use crate::render::{write_line_plot, write_ppm, PlotSeries};
use crate::sim::{
    add_noise_for_snr, decimate_panel_with, design_decimation_filter, simulate_event,
    simulate_sequence_static, ChannelDataset,
};
use crate::strain::{strain_tensor, StrainField};
use crate::track::two_step_track;
use crate::{Error, Result};

/// Pipeline stages in execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Simulate,
    Beamform,
    Track,
    Strain,
    Metrics,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Simulate,
        Stage::Beamform,
        Stage::Track,
        Stage::Strain,
        Stage::Metrics,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::Beamform => "beamform",
            Stage::Track => "track",
            Stage::Strain => "strain",
            Stage::Metrics => "metrics",
        }
    }
}

/// What happened to one stage during a run.
#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub stage: &'static str,
    /// True when the stage was skipped because its inputs were unchanged.
    pub cached: bool,
    pub outputs: Vec<PathBuf>,
}

/// Wall interior erosion applied before error statistics, keeping gradient
/// windows clear of the lumen and background boundaries while leaving a
/// usable band inside a 1.5 mm thick wall.
const WALL_ERODE_MARGIN: f64 = 0.4e-3;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

const BLUE: [u8; 3] = [59, 76, 192];
const RED: [u8; 3] = [180, 4, 38];
const PALETTE: [[u8; 3]; 6] = [
    BLUE,
    RED,
    [0, 128, 0],
    [128, 0, 128],
    [200, 128, 0],
    [0, 0, 0],
];

fn fv(v: f64) -> String {
    format!("{v:.9e}")
}

fn hex_digest(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn require_inputs(paths: &[PathBuf], producer: &str) -> Result<()> {
    for p in paths {
        if !p.exists() {
            return Err(Error::InvalidArgument(format!(
                "missing input {}; run the {} stage first",
                p.display(),
                producer
            )));
        }
    }
    Ok(())
}

fn medium_name(index: usize) -> &'static str {
    ["minus", "zero", "plus"][index]
}

pub struct Runner {
    resolved: Resolved,
    config_text: String,
}

impl Runner {
    pub fn new(cfg: &ExperimentConfig, config_text: &str) -> Result<Runner> {
        Ok(Runner {
            resolved: cfg.resolve()?,
            config_text: config_text.to_string(),
        })
    }

    pub fn resolved(&self) -> &Resolved {
        &self.resolved
    }

    pub fn out_dir(&self) -> &Path {
        &self.resolved.out_dir
    }

    /// Stages that apply to this configuration. Tracking needs a frame pair;
    /// metrics need either a point target or a tracked vessel.
    pub fn applicable_stages(&self) -> Vec<Stage> {
        let r = &self.resolved;
        let mut stages = vec![Stage::Simulate, Stage::Beamform];
        if r.frames >= 2 {
            stages.push(Stage::Track);
            stages.push(Stage::Strain);
        }
        if self.metrics_applicable() {
            stages.push(Stage::Metrics);
        }
        stages
    }

    fn metrics_applicable(&self) -> bool {
        match self.resolved.phantom {
            ResolvedPhantom::Point { .. } => true,
            ResolvedPhantom::Vessel { .. } => self.resolved.frames >= 2,
        }
    }

    pub fn run_pipeline(&self) -> Result<Vec<StageOutcome>> {
        self.write_manifest()?;
        let mut outcomes = Vec::new();
        for stage in self.applicable_stages() {
            outcomes.push(self.run_stage_checked(stage)?);
        }
        Ok(outcomes)
    }

    pub fn run_stage(&self, stage: Stage) -> Result<StageOutcome> {
        if !self.applicable_stages().contains(&stage) {
            return Err(Error::Config(match stage {
                Stage::Track | Stage::Strain => format!(
                    "the {} stage needs at least two frames (motion.frames)",
                    stage.name()
                ),
                Stage::Metrics => {
                    "the metrics stage needs a point phantom or a vessel with two frames".into()
                }
                _ => format!("the {} stage does not apply to this config", stage.name()),
            }));
        }
        self.write_manifest()?;
        self.run_stage_checked(stage)
    }

    fn run_stage_checked(&self, stage: Stage) -> Result<StageOutcome> {
        let outputs = self.stage_outputs(stage);
        let key = self.stage_key(stage);
        let hash_file = self.hash_path(stage);
        if outputs.iter().all(|p| p.exists()) {
            if let Ok(stored) = io::read_text(&hash_file) {
                if stored.trim() == key {
                    return Ok(StageOutcome {
                        stage: stage.name(),
                        cached: true,
                        outputs,
                    });
                }
            }
        }
        self.check_inputs(stage)?;
        let body = match stage {
            Stage::Simulate => self.run_simulate(),
            Stage::Beamform => self.run_beamform(),
            Stage::Track => self.run_track(),
            Stage::Strain => self.run_strain(),
            Stage::Metrics => self.run_metrics(),
        };
        body.map_err(Error::in_stage(stage.name()))?;
        ensure_dir(&self.hashes_dir())?;
        io::write_text(&hash_file, &format!("{key}\n"))?;
        Ok(StageOutcome {
            stage: stage.name(),
            cached: false,
            outputs,
        })
    }

    fn check_inputs(&self, stage: Stage) -> Result<()> {
        let stages = self.applicable_stages();
        let pos = stages.iter().position(|&s| s == stage).unwrap_or(0);
        if pos == 0 {
            return Ok(());
        }
        // Metrics on a tracked vessel also reads strain artifacts; for every
        // stage the full output set of each earlier stage must be present.
        for dep in &stages[..pos] {
            require_inputs(&self.stage_outputs(*dep), dep.name())
                .map_err(Error::in_stage(stage.name()))?;
        }
        Ok(())
    }

    // ------------------------------------------------------------------
    // Paths, hashing, manifest
    // ------------------------------------------------------------------

    fn dir(&self, name: &str) -> PathBuf {
        self.resolved.out_dir.join(name)
    }

    fn hashes_dir(&self) -> PathBuf {
        self.dir(".hashes")
    }

    fn hash_path(&self, stage: Stage) -> PathBuf {
        self.hashes_dir().join(format!("{}.sha256", stage.name()))
    }

    fn frame_path(&self, frame: usize) -> PathBuf {
        self.dir("sim").join(format!("frame_{frame:03}.chrf"))
    }

    fn scatterer_path(&self, frame: usize) -> PathBuf {
        self.dir("sim").join(format!("scatterers_{frame:03}.sctf"))
    }

    fn beamformed_path(&self, frame: usize, medium: usize) -> PathBuf {
        self.dir("beamform")
            .join(format!("frame_{frame:03}_{}.bfrf", medium_name(medium)))
    }

    fn beamformed_event_path(&self, frame: usize, medium: usize, event: usize) -> PathBuf {
        self.dir("beamform").join(format!(
            "frame_{frame:03}_{}_event_{event:02}.bfrf",
            medium_name(medium)
        ))
    }

    fn track_path(&self, pair: usize, medium: usize, ext: &str) -> PathBuf {
        self.dir("track")
            .join(format!("pair_{pair:03}_{}.{ext}", medium_name(medium)))
    }

    fn vector_path(&self, pair: usize, ext: &str) -> PathBuf {
        self.dir("track").join(format!("pair_{pair:03}_vector.{ext}"))
    }

    fn strain_path(&self, pair: usize, ext: &str) -> PathBuf {
        self.dir("strain").join(format!("pair_{pair:03}_strain.{ext}"))
    }

    fn strain_image_path(&self, pair: usize, component: &str) -> PathBuf {
        self.dir("strain")
            .join(format!("pair_{pair:03}_{component}.ppm"))
    }

    fn stage_outputs(&self, stage: Stage) -> Vec<PathBuf> {
        let r = &self.resolved;
        let pairs = r.frames.saturating_sub(1);
        let mut v = Vec::new();
        match stage {
            Stage::Simulate => {
                for f in 0..r.frames {
                    v.push(self.scatterer_path(f));
                    v.push(self.frame_path(f));
                }
            }
            Stage::Beamform => {
                for f in 0..r.frames {
                    for m in 0..3 {
                        for e in 0..r.sequence.events_per_medium {
                            v.push(self.beamformed_event_path(f, m, e));
                        }
                        v.push(self.beamformed_path(f, m));
                    }
                }
            }
            Stage::Track => {
                for p in 0..pairs {
                    for m in 0..3 {
                        v.push(self.track_path(p, m, "disp"));
                        v.push(self.track_path(p, m, "csv"));
                    }
                    v.push(self.vector_path(p, "disp"));
                    v.push(self.vector_path(p, "csv"));
                }
                v.push(self.dir("track").join("consistency.txt"));
            }
            Stage::Strain => {
                for p in 0..pairs {
                    v.push(self.strain_path(p, "disp"));
                    v.push(self.strain_path(p, "csv"));
                    for c in ["exx", "ezz", "exz"] {
                        v.push(self.strain_image_path(p, c));
                    }
                }
                v.push(self.dir("strain").join("color_scale.txt"));
            }
            Stage::Metrics => match r.phantom {
                ResolvedPhantom::Point { .. } => v.push(self.dir("metrics").join("psf.csv")),
                ResolvedPhantom::Vessel { .. } => v.push(self.dir("metrics").join("errors.csv")),
            },
        }
        v
    }

    /// Content fingerprint shared by every stage key: the config text plus
    /// the resolved values a CLI override can change.
    fn fingerprint(&self) -> String {
        let r = &self.resolved;
        let phantom_seed = match &r.phantom {
            ResolvedPhantom::Vessel { params, .. } => params.seed,
            ResolvedPhantom::Point { .. } => 0,
        };
        format!(
            "{}\0phantom_seed={phantom_seed}\0noise_seed={}\0version={}",
            self.config_text,
            r.noise_seed,
            env!("CARGO_PKG_VERSION"),
        )
    }

    fn stage_key(&self, stage: Stage) -> String {
        let stages = self.applicable_stages();
        let pos = stages.iter().position(|&s| s == stage).unwrap_or(0);
        let mut key = String::new();
        for s in &stages[..=pos.min(stages.len().saturating_sub(1))] {
            let mut h = Sha256::new();
            h.update(key.as_bytes());
            h.update([0]);
            h.update(s.name().as_bytes());
            h.update([0]);
            h.update(self.fingerprint().as_bytes());
            key = hex_digest(&h.finalize());
        }
        key
    }

    fn write_manifest(&self) -> Result<()> {
        let r = &self.resolved;
        ensure_dir(&r.out_dir)?;
        let mut h = Sha256::new();
        h.update(self.config_text.as_bytes());
        let config_sha = hex_digest(&h.finalize());
        let phantom = match r.phantom {
            ResolvedPhantom::Point { .. } => "point",
            ResolvedPhantom::Vessel { .. } => "vessel",
        };
        let phantom_seed = match &r.phantom {
            ResolvedPhantom::Vessel { params, .. } => Some(params.seed),
            ResolvedPhantom::Point { .. } => None,
        };
        let mut text = String::new();
        text.push_str("format_version = 1\n");
        text.push_str(&format!(
            "generator = \"pwstrain {}\"\n",
            env!("CARGO_PKG_VERSION")
        ));
        text.push_str("config_echo = \"config.echo.toml\"\n");
        text.push_str(&format!("config_sha256 = \"{config_sha}\"\n"));
        text.push_str(&format!("phantom = \"{phantom}\"\n"));
        text.push_str(&format!("frames = {}\n", r.frames));
        text.push_str(&format!("events = {}\n", r.sequence.events.len()));
        text.push_str(&format!("steps_per_frame = {}\n", r.steps_per_frame));
        text.push_str("\n[seeds]\n");
        if let Some(seed) = phantom_seed {
            text.push_str(&format!("phantom_seed = {seed}\n"));
        }
        text.push_str(&format!("noise_seed = {}\n", r.noise_seed));
        io::write_text(&r.out_dir.join("manifest.toml"), &text)?;
        io::write_text(&r.out_dir.join("config.echo.toml"), &self.config_text)
    }

    // ------------------------------------------------------------------
    // Stage bodies
    // ------------------------------------------------------------------

    fn build_phantom(&self) -> Result<ScattererField> {
        match &self.resolved.phantom {
            ResolvedPhantom::Point { depth, amplitude } => {
                let mut field = single_scatterer(*depth)?;
                field.amplitude[0] = *amplitude;
                Ok(field)
            }
            ResolvedPhantom::Vessel { params, .. } => vessel_phantom(params),
        }
    }

    fn run_simulate(&self) -> Result<()> {
        let r = &self.resolved;
        ensure_dir(&self.dir("sim"))?;
        let apod = tukey_apodization(r.spec.element_count, r.apodization_fraction)?;
        let factor = r.spec.decimation_factor();
        let filter = design_decimation_filter(factor);
        let events = &r.sequence.events;
        let spf = r.steps_per_frame as usize;
        let mut field = self.build_phantom()?;
        for f in 0..r.frames {
            io::write_scatterers(&self.scatterer_path(f), &field)?;
            let ds = match &r.motion {
                ResolvedMotion::Static => {
                    simulate_sequence_static(&field, &r.spec, events, &apod, r.record_depth)?
                }
                ResolvedMotion::Rigid {
                    shift_per_frame,
                    frozen,
                } => {
                    if *frozen {
                        simulate_sequence_static(&field, &r.spec, events, &apod, r.record_depth)?
                    } else {
                        let mut panels = Vec::with_capacity(events.len());
                        for (k, ev) in events.iter().enumerate() {
                            let frac = k as f64 / spf as f64;
                            let shifted = apply_rigid_shift(
                                &field,
                                [shift_per_frame[0] * frac, shift_per_frame[1] * frac],
                            );
                            let raw =
                                simulate_event(&shifted, &r.spec, ev, &apod, r.record_depth)?;
                            panels.push(decimate_panel_with(&raw, factor, &filter)?);
                        }
                        ChannelDataset {
                            panels,
                            sampling_frequency: r.spec.output_sampling_frequency,
                            t0: 0.0,
                        }
                    }
                }
                ResolvedMotion::Radial { model, frozen } => {
                    if *frozen {
                        simulate_sequence_static(&field, &r.spec, events, &apod, r.record_depth)?
                    } else {
                        let mut panels = Vec::with_capacity(events.len());
                        for ev in events {
                            let raw = simulate_event(&field, &r.spec, ev, &apod, r.record_depth)?;
                            panels.push(decimate_panel_with(&raw, factor, &filter)?);
                            field = apply_radial_step(&field, model)?;
                        }
                        ChannelDataset {
                            panels,
                            sampling_frequency: r.spec.output_sampling_frequency,
                            t0: 0.0,
                        }
                    }
                }
            };
            io::write_channel_data(&self.frame_path(f), &ds)?;
            if f + 1 < r.frames {
                match &r.motion {
                    ResolvedMotion::Static => {}
                    ResolvedMotion::Rigid { shift_per_frame, .. } => {
                        field = apply_rigid_shift(&field, *shift_per_frame);
                    }
                    ResolvedMotion::Radial { model, frozen } => {
                        let done = if *frozen { 0 } else { events.len() };
                        for _ in done..spf {
                            field = apply_radial_step(&field, model)?;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn noise_seed_for_frame(&self, frame: usize) -> u64 {
        self.resolved
            .noise_seed
            .wrapping_add((frame as u64).wrapping_mul(GOLDEN))
    }

    fn run_beamform(&self) -> Result<()> {
        let r = &self.resolved;
        ensure_dir(&self.dir("beamform"))?;
        for f in 0..r.frames {
            let clean = io::read_channel_data(&self.frame_path(f))?;
            let ds = match r.snr_db {
                Some(snr) => add_noise_for_snr(&clean, snr, self.noise_seed_for_frame(f))?,
                None => clean,
            };
            for (m, grid) in r.grids.iter().enumerate() {
                let events = r.sequence.events_for_medium(m);
                let mut singles = Vec::with_capacity(events.len());
                for (e, ev) in events.iter().enumerate() {
                    let single = das_beamform_with(
                        &ds.panels[ev.event_index],
                        &r.spec,
                        ev,
                        grid,
                        ds.sampling_frequency,
                        ds.t0,
                        r.interpolation,
                    )?;
                    io::write_frame(
                        &self.beamformed_event_path(f, m, e),
                        &single.grid,
                        &single.rf,
                    )?;
                    singles.push(single);
                }
                let frame = coherent_compound(&singles)?;
                io::write_frame(&self.beamformed_path(f, m), &frame.grid, &frame.rf)?;
            }
        }
        Ok(())
    }

    fn read_beamformed(&self, frame: usize, medium: usize) -> Result<BeamformedFrame> {
        let (grid, rf) = io::read_frame(&self.beamformed_path(frame, medium))?;
        Ok(BeamformedFrame {
            grid,
            rf,
            compounded_events: 1,
        })
    }

    fn run_track(&self) -> Result<()> {
        let r = &self.resolved;
        ensure_dir(&self.dir("track"))?;
        let mut consistency = String::new();
        for p in 0..r.frames - 1 {
            let mut tracks = Vec::with_capacity(3);
            for m in 0..3 {
                let reference = self.read_beamformed(p, m)?;
                let moving = self.read_beamformed(p + 1, m)?;
                let track = two_step_track(&reference, &moving, &r.tracking)?;
                io::write_displacement(&self.track_path(p, m, "disp"), &track)?;
                io::write_text(&self.track_path(p, m, "csv"), &io::displacement_csv(&track))?;
                tracks.push(track);
            }
            let (vector, rms) = compound_tracks(&tracks[0], &tracks[1], &tracks[2])?;
            io::write_vector_field(&self.vector_path(p, "disp"), &vector)?;
            io::write_text(&self.vector_path(p, "csv"), &io::vector_csv(&vector))?;
            consistency.push_str(&format!("pair {p:03}: axial consistency rms {} m\n", fv(rms)));
        }
        io::write_text(&self.dir("track").join("consistency.txt"), &consistency)
    }

    fn run_strain(&self) -> Result<()> {
        let r = &self.resolved;
        ensure_dir(&self.dir("strain"))?;
        for p in 0..r.frames - 1 {
            let vector = io::read_vector_field(&self.vector_path(p, "disp"))?;
            let strain = strain_tensor(&vector, &r.strain_windows)?;
            io::write_strain_field(&self.strain_path(p, "disp"), &strain)?;
            io::write_text(&self.strain_path(p, "csv"), &io::strain_csv(&strain))?;
            for (name, plane) in [
                ("exx", &strain.e_xx),
                ("ezz", &strain.e_zz),
                ("exz", &strain.e_xz),
            ] {
                write_ppm(
                    &self.strain_image_path(p, name),
                    plane,
                    &strain.valid,
                    r.color_limit,
                )?;
            }
        }
        let scale = format!(
            "diverging colormap, blue (59,76,192) to white to red (180,4,38)\n\
             limits: -{0} .. +{0} strain\ninvalid pixels: gray (64,64,64)\n",
            r.color_limit
        );
        io::write_text(&self.dir("strain").join("color_scale.txt"), &scale)
    }

    /// Displacement law of one frame interval, as tracked between frames.
    fn interval_truth(&self) -> MotionTruth {
        let r = &self.resolved;
        match &r.motion {
            ResolvedMotion::Static => MotionTruth::Rigid { shift: [0.0, 0.0] },
            ResolvedMotion::Rigid { shift_per_frame, .. } => MotionTruth::Rigid {
                shift: *shift_per_frame,
            },
            ResolvedMotion::Radial { model, .. } => MotionTruth::RadialStepped {
                model: *model,
                steps: r.steps_per_frame,
            },
        }
    }

    fn run_metrics(&self) -> Result<()> {
        let r = &self.resolved;
        ensure_dir(&self.dir("metrics"))?;
        match &r.phantom {
            ResolvedPhantom::Point { .. } => {
                let frame = self.read_beamformed(0, 1)?;
                let env = envelope(&frame)?;
                let report = psf_report(&env, &frame.grid, r.cr_exclusion)?;
                let mut csv =
                    String::from("cr_db,fwhm_axial_m,fwhm_lateral_m,peak_x_m,peak_z_m\n");
                csv.push_str(&format!(
                    "{},{},{},{},{}\n",
                    fv(report.cr_db),
                    fv(report.fwhm_axial),
                    fv(report.fwhm_lateral),
                    fv(report.peak_position[0]),
                    fv(report.peak_position[1]),
                ));
                io::write_text(&self.dir("metrics").join("psf.csv"), &csv)
            }
            ResolvedPhantom::Vessel { regions, .. } => {
                let truth_motion = self.interval_truth();
                let mut csv = String::from(
                    "pair,snr_db,rmse_ux,rmse_uz,rmse_exx,rmse_ezz,mask_fraction\n",
                );
                for p in 0..r.frames - 1 {
                    let report = self.vessel_pair_report(p, regions, &truth_motion)?;
                    csv.push_str(&format!(
                        "{p},{},{},{},{},{},{}\n",
                        fv(report.snr_db),
                        fv(report.rmse_u_lateral),
                        fv(report.rmse_u_axial),
                        fv(report.rmse_strain_lateral),
                        fv(report.rmse_strain_axial),
                        fv(report.mask_fraction),
                    ));
                }
                io::write_text(&self.dir("metrics").join("errors.csv"), &csv)
            }
        }
    }

    fn vessel_pair_report(
        &self,
        pair: usize,
        regions: &VesselRegions,
        truth_motion: &MotionTruth,
    ) -> Result<ErrorReport> {
        let r = &self.resolved;
        let vector = io::read_vector_field(&self.vector_path(pair, "disp"))?;
        let strain = io::read_strain_field(&self.strain_path(pair, "disp"))?;
        vessel_error_report(
            &vector,
            &strain,
            regions,
            truth_motion,
            r.steps_per_frame,
            r.snr_db.unwrap_or(f64::INFINITY),
        )
    }

    // ------------------------------------------------------------------
    // Sweeps
    // ------------------------------------------------------------------

    pub fn run_sweep(&self) -> Result<()> {
        self.write_manifest()?;
        match &self.resolved.sweep {
            None => Err(Error::Config(
                "this command needs a [sweep] section in the config".into(),
            )),
            Some(ResolvedSweep::NvsTheta { nvs, theta_t, snr_db }) => self
                .sweep_nvs_theta(nvs, theta_t, snr_db)
                .map_err(Error::in_stage("sweep")),
            Some(ResolvedSweep::Snr { snr_db, seeds }) => self
                .sweep_snr(snr_db, seeds)
                .map_err(Error::in_stage("sweep")),
        }
    }

    /// Point-target image quality versus the number of transmissions per
    /// medium and the fan span. Every cell images the same scatterer through
    /// the positive angled medium, whose steep transmit angles produce the
    /// grating artifacts that shape the contrast-ratio curve.
    fn sweep_nvs_theta(&self, nvs: &[usize], theta_t: &[f64], snr_db: &[f64]) -> Result<()> {
        let r = &self.resolved;
        if !matches!(r.phantom, ResolvedPhantom::Point { .. }) {
            return Err(Error::Config(
                "the nvs_theta sweep needs a point phantom".into(),
            ));
        }
        ensure_dir(&self.dir("sweep"))?;
        let apod = tukey_apodization(r.spec.element_count, r.apodization_fraction)?;
        let field = self.build_phantom()?;
        let grid = &r.grids[2];
        let mut clean_csv = String::from("nvs,theta_t_deg,cr_db,fwhm_ax_m,fwhm_lat_m\n");
        let mut noisy_csv = String::from("nvs,theta_t_deg,snr_db,cr_db\n");
        let mut failures = String::new();
        let mut curves: BTreeMap<u64, (f64, Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for (ti, &theta) in theta_t.iter().enumerate() {
            let theta_deg = theta.to_degrees();
            for (ci, &n) in nvs.iter().enumerate() {
                let seq = build_sequence(&[r.medium_angle], n, theta, r.sequence.prf)?;
                let ds =
                    simulate_sequence_static(&field, &r.spec, &seq.events, &apod, r.record_depth)?;
                let cell_seed = r
                    .noise_seed
                    .wrapping_add(((ti * nvs.len() + ci) as u64).wrapping_mul(GOLDEN));
                match self.cell_psf(&ds, &seq.events, grid) {
                    Ok(report) => {
                        clean_csv.push_str(&format!(
                            "{n},{},{},{},{}\n",
                            fv(theta_deg),
                            fv(report.cr_db),
                            fv(report.fwhm_axial),
                            fv(report.fwhm_lateral),
                        ));
                        let entry = curves
                            .entry(theta.to_bits())
                            .or_insert_with(|| (theta_deg, Vec::new(), Vec::new()));
                        entry.1.push(n as f64);
                        entry.2.push(report.cr_db);
                    }
                    Err(e) => {
                        failures.push_str(&format!("nvs={n} theta={theta_deg} deg: {e}\n"))
                    }
                }
                for &snr in snr_db {
                    let noisy = add_noise_for_snr(&ds, snr, cell_seed)?;
                    match self.cell_psf(&noisy, &seq.events, grid) {
                        Ok(report) => noisy_csv.push_str(&format!(
                            "{n},{},{},{}\n",
                            fv(theta_deg),
                            fv(snr),
                            fv(report.cr_db),
                        )),
                        Err(e) => failures.push_str(&format!(
                            "nvs={n} theta={theta_deg} deg snr={snr} dB: {e}\n"
                        )),
                    }
                }
            }
        }
        io::write_text(&self.dir("sweep").join("sweep_nvs_theta.csv"), &clean_csv)?;
        if !snr_db.is_empty() {
            io::write_text(&self.dir("sweep").join("sweep_cr_snr.csv"), &noisy_csv)?;
        }
        if failures.is_empty() {
            failures.push_str("none\n");
        }
        io::write_text(&self.dir("sweep").join("sweep_errors.txt"), &failures)?;
        let series: Vec<PlotSeries> = curves
            .values()
            .enumerate()
            .map(|(i, (_, x, y))| PlotSeries {
                x,
                y,
                color: PALETTE[i % PALETTE.len()],
            })
            .collect();
        if !series.is_empty() {
            write_line_plot(&self.dir("sweep").join("cr_vs_nvs.ppm"), &series, 640, 480)?;
            let legend: String = curves
                .values()
                .enumerate()
                .map(|(i, (deg, _, _))| {
                    let c = PALETTE[i % PALETTE.len()];
                    format!("series {i}: theta_t = {deg} deg, rgb ({},{},{})\n", c[0], c[1], c[2])
                })
                .collect();
            io::write_text(
                &self.dir("sweep").join("cr_vs_nvs.txt"),
                &format!("contrast ratio (dB) versus transmissions per medium\n{legend}"),
            )?;
        }
        Ok(())
    }

    fn cell_psf(
        &self,
        ds: &ChannelDataset,
        events: &[PlaneWaveEvent],
        grid: &BeamGrid,
    ) -> Result<crate::metrics::PsfReport> {
        let r = &self.resolved;
        let frame = compound_medium(ds, r, events, grid)?;
        let env = envelope(&frame)?;
        psf_report(&env, &frame.grid, r.cr_exclusion)
    }

    /// Displacement and strain error versus channel SNR, comparing the
    /// single-transmission sequence against the fan sequence on the same
    /// moving vessel. Noise is the only change across SNR levels.
    fn sweep_snr(&self, snr_db: &[f64], seeds: &[u64]) -> Result<()> {
        let r = &self.resolved;
        let ResolvedPhantom::Vessel { params, regions } = &r.phantom else {
            return Err(Error::Config("the snr sweep needs a vessel phantom".into()));
        };
        let ResolvedMotion::Radial { model, frozen } = &r.motion else {
            return Err(Error::Config(
                "the snr sweep needs [motion.radial] on the vessel".into(),
            ));
        };
        ensure_dir(&self.dir("sweep"))?;
        let apod = tukey_apodization(r.spec.element_count, r.apodization_fraction)?;
        let factor = r.spec.decimation_factor();
        let filter = design_decimation_filter(factor);
        let spf = r.steps_per_frame as usize;
        let truth_motion = MotionTruth::RadialStepped {
            model: *model,
            steps: r.steps_per_frame,
        };
        let methods: [(&str, usize); 2] =
            [("current", 1), ("proposed", r.sequence.events_per_medium)];
        let mut sums = vec![vec![[0.0f64; 4]; snr_db.len()]; methods.len()];
        for &seed in seeds {
            let mut p = params.clone();
            p.seed = seed;
            let base = vessel_phantom(&p)?;
            for (mi, (_, epm)) in methods.iter().enumerate() {
                let seq = build_sequence(
                    &[-r.medium_angle, 0.0, r.medium_angle],
                    *epm,
                    r.max_transmit_angle,
                    r.sequence.prf,
                )?;
                if seq.events.len() > spf {
                    return Err(Error::Config(format!(
                        "sweep sequence fires {} events but a frame holds {} transmissions",
                        seq.events.len(),
                        spf
                    )));
                }
                // Two frames with the configured motion timing, noise-free.
                let mut field = base.clone();
                let mut clean = Vec::with_capacity(2);
                for f in 0..2 {
                    if *frozen {
                        clean.push(simulate_sequence_static(
                            &field,
                            &r.spec,
                            &seq.events,
                            &apod,
                            r.record_depth,
                        )?);
                        if f == 0 {
                            for _ in 0..spf {
                                field = apply_radial_step(&field, model)?;
                            }
                        }
                    } else {
                        let mut panels = Vec::with_capacity(seq.events.len());
                        for ev in &seq.events {
                            let raw =
                                simulate_event(&field, &r.spec, ev, &apod, r.record_depth)?;
                            panels.push(decimate_panel_with(&raw, factor, &filter)?);
                            field = apply_radial_step(&field, model)?;
                        }
                        clean.push(ChannelDataset {
                            panels,
                            sampling_frequency: r.spec.output_sampling_frequency,
                            t0: 0.0,
                        });
                        if f == 0 {
                            for _ in seq.events.len()..spf {
                                field = apply_radial_step(&field, model)?;
                            }
                        }
                    }
                }
                for (ni, &snr) in snr_db.iter().enumerate() {
                    let mut frames_bf: Vec<[BeamformedFrame; 3]> = Vec::with_capacity(2);
                    for (f, ds) in clean.iter().enumerate() {
                        let noise_seed = r
                            .noise_seed
                            .wrapping_add(seed.wrapping_mul(0xD1B5_4A32_D192_ED03))
                            .wrapping_add((f as u64).wrapping_mul(GOLDEN));
                        let noisy = add_noise_for_snr(ds, snr, noise_seed)?;
                        let mut per_medium = Vec::with_capacity(3);
                        for (m, grid) in r.grids.iter().enumerate() {
                            per_medium.push(compound_medium(
                                &noisy,
                                r,
                                seq.events_for_medium(m),
                                grid,
                            )?);
                        }
                        let arr: [BeamformedFrame; 3] = per_medium
                            .try_into()
                            .map_err(|_| Error::InvalidArgument("expected 3 mediums".into()))?;
                        frames_bf.push(arr);
                    }
                    let mut tracks = Vec::with_capacity(3);
                    for m in 0..3 {
                        tracks.push(two_step_track(
                            &frames_bf[0][m],
                            &frames_bf[1][m],
                            &r.tracking,
                        )?);
                    }
                    let (vector, _) = compound_tracks(&tracks[0], &tracks[1], &tracks[2])?;
                    let strain = strain_tensor(&vector, &r.strain_windows)?;
                    let report = vessel_error_report(
                        &vector,
                        &strain,
                        regions,
                        &truth_motion,
                        r.steps_per_frame,
                        snr,
                    )?;
                    let s = &mut sums[mi][ni];
                    s[0] += report.rmse_u_lateral;
                    s[1] += report.rmse_u_axial;
                    s[2] += report.rmse_strain_lateral;
                    s[3] += report.rmse_strain_axial;
                }
            }
        }
        let n = seeds.len() as f64;
        let mut curves: Vec<(String, Vec<f64>, Vec<f64>)> = Vec::new();
        for (mi, (mname, _)) in methods.iter().enumerate() {
            let mut csv = String::from("snr_db,rmse_ux,rmse_uz,rmse_exx,rmse_ezz\n");
            let mut ux = Vec::with_capacity(snr_db.len());
            let mut uz = Vec::with_capacity(snr_db.len());
            for (ni, &snr) in snr_db.iter().enumerate() {
                let s = sums[mi][ni];
                csv.push_str(&format!(
                    "{},{},{},{},{}\n",
                    fv(snr),
                    fv(s[0] / n),
                    fv(s[1] / n),
                    fv(s[2] / n),
                    fv(s[3] / n),
                ));
                ux.push(s[0] / n);
                uz.push(s[1] / n);
            }
            io::write_text(
                &self.dir("sweep").join(format!("sweep_snr_{mname}.csv")),
                &csv,
            )?;
            curves.push((mname.to_string(), ux, uz));
        }
        let x: Vec<f64> = snr_db.to_vec();
        for (idx, name) in [(1usize, "rmse_lateral"), (2usize, "rmse_axial")] {
            let series: Vec<PlotSeries> = curves
                .iter()
                .enumerate()
                .map(|(i, c)| PlotSeries {
                    x: &x,
                    y: if idx == 1 { &c.1 } else { &c.2 },
                    color: PALETTE[i % PALETTE.len()],
                })
                .collect();
            write_line_plot(
                &self.dir("sweep").join(format!("{name}.ppm")),
                &series,
                640,
                480,
            )?;
        }
        io::write_text(
            &self.dir("sweep").join("rmse_legend.txt"),
            &format!(
                "rmse (m) versus channel snr (dB), averaged over {} phantom seeds\n\
                 series 0: current, rgb ({},{},{})\nseries 1: proposed, rgb ({},{},{})\n",
                seeds.len(),
                BLUE[0],
                BLUE[1],
                BLUE[2],
                RED[0],
                RED[1],
                RED[2],
            ),
        )
    }
}

/// Beamforms every listed event onto one grid and compounds coherently.
fn compound_medium(
    ds: &ChannelDataset,
    r: &Resolved,
    events: &[PlaneWaveEvent],
    grid: &BeamGrid,
) -> Result<BeamformedFrame> {
    let mut frames = Vec::with_capacity(events.len());
    for ev in events {
        frames.push(das_beamform_with(
            &ds.panels[ev.event_index],
            &r.spec,
            ev,
            grid,
            ds.sampling_frequency,
            ds.t0,
            r.interpolation,
        )?);
    }
    coherent_compound(&frames)
}

/// Error statistics of one tracked vessel pair over the eroded wall.
fn vessel_error_report(
    vector: &VectorDisplacementField,
    strain: &StrainField,
    regions: &VesselRegions,
    truth_motion: &MotionTruth,
    steps_per_frame: u32,
    snr_db: f64,
) -> Result<ErrorReport> {
    let disp_truth = ground_truth_displacement(&vector.grid, Some(regions), truth_motion);
    let strain_truth = match truth_motion {
        MotionTruth::RadialExact { model, .. } | MotionTruth::RadialStepped { model, .. } => {
            vessel_strain_truth(&strain.grid, regions, model, steps_per_frame as f64)
        }
        MotionTruth::Rigid { .. } => StrainField {
            grid: strain.grid,
            e_xx: Array2D::zeros(strain.grid.n_axial, strain.grid.n_lateral),
            e_zz: Array2D::zeros(strain.grid.n_axial, strain.grid.n_lateral),
            e_xz: Array2D::zeros(strain.grid.n_axial, strain.grid.n_lateral),
            p_max: Array2D::zeros(strain.grid.n_axial, strain.grid.n_lateral),
            p_min: Array2D::zeros(strain.grid.n_axial, strain.grid.n_lateral),
            p_angle: Array2D::zeros(strain.grid.n_axial, strain.grid.n_lateral),
            valid: Array2D::filled(strain.grid.n_axial, strain.grid.n_lateral, true),
        },
    };
    let eroded = regions.eroded(WALL_ERODE_MARGIN);
    let mut mask = Array2D::filled(vector.grid.n_axial, vector.grid.n_lateral, false);
    for i in 0..vector.grid.n_axial {
        for j in 0..vector.grid.n_lateral {
            let pos = vector.grid.position(i as f64, j as f64);
            mask.set(i, j, eroded.classify(pos) == Region::Wall);
        }
    }
    error_report(vector, &disp_truth, strain, &strain_truth, &mask, snr_db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;
    use tempfile::TempDir;

    fn tiny_point_config(out: &Path) -> String {
        format!(
            r#"
            out_dir = "{}"
            [probe]
            elements = 16
            sim_sampling_frequency = "42.4 MHz"
            output_sampling_frequency = "21.2 MHz"
            [sequence]
            mode = "custom"
            events_per_medium = 3
            [phantom.point]
            depth = "12 mm"
            [beamform]
            origin = ["0 mm", "12 mm"]
            extent = ["4 mm", "4 mm"]
            axial_step = "72 um"
            lateral_step = "184 um"
            "#,
            out.display()
        )
    }

    fn runner_for(text: &str) -> Runner {
        let cfg = parse_config(text).unwrap();
        Runner::new(&cfg, text).unwrap()
    }

    #[test]
    fn point_pipeline_writes_psf_artifacts_and_caches() {
        let dir = TempDir::new().unwrap();
        let text = tiny_point_config(dir.path());
        let runner = runner_for(&text);
        let outcomes = runner.run_pipeline().unwrap();
        assert_eq!(
            outcomes.iter().map(|o| o.stage).collect::<Vec<_>>(),
            ["simulate", "beamform", "metrics"]
        );
        assert!(outcomes.iter().all(|o| !o.cached));
        for o in &outcomes {
            for p in &o.outputs {
                assert!(p.exists(), "missing {}", p.display());
            }
        }
        let psf = io::read_text(&dir.path().join("metrics/psf.csv")).unwrap();
        assert!(psf.starts_with("cr_db,"));
        assert_eq!(psf.lines().count(), 2);
        // A second run touches nothing.
        let again = runner.run_pipeline().unwrap();
        assert!(again.iter().all(|o| o.cached));
    }

    #[test]
    fn stage_order_is_enforced() {
        let dir = TempDir::new().unwrap();
        let text = tiny_point_config(dir.path());
        let runner = runner_for(&text);
        let err = runner.run_stage(Stage::Beamform).unwrap_err();
        assert!(matches!(err, Error::Stage { stage: "beamform", .. }));
    }

    #[test]
    fn inapplicable_stage_is_a_config_error() {
        let dir = TempDir::new().unwrap();
        let text = tiny_point_config(dir.path());
        let runner = runner_for(&text);
        assert!(matches!(
            runner.run_stage(Stage::Track),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn pipeline_reruns_byte_identically() {
        let dir_a = TempDir::new().unwrap();
        let dir_b = TempDir::new().unwrap();
        for dir in [&dir_a, &dir_b] {
            let text = tiny_point_config(dir.path());
            runner_for(&text).run_pipeline().unwrap();
        }
        // Compare every artifact byte for byte (the config echo differs by
        // the embedded out_dir, so skip it and the manifest's config hash).
        let mut names_a = artifact_names(dir_a.path());
        let mut names_b = artifact_names(dir_b.path());
        names_a.sort();
        names_b.sort();
        assert_eq!(names_a, names_b);
        for name in &names_a {
            if name.ends_with("config.echo.toml")
                || name.ends_with("manifest.toml")
                || name.contains(".hashes")
            {
                continue;
            }
            let a = std::fs::read(dir_a.path().join(name)).unwrap();
            let b = std::fs::read(dir_b.path().join(name)).unwrap();
            assert_eq!(a, b, "artifact {name} differs between runs");
        }
    }

    fn artifact_names(root: &Path) -> Vec<String> {
        let mut out = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(d) = stack.pop() {
            for entry in std::fs::read_dir(&d).unwrap() {
                let p = entry.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push(p.strip_prefix(root).unwrap().to_string_lossy().into_owned());
                }
            }
        }
        out
    }
}
