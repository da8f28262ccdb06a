//! Persistence for every pipeline stage: binary artifacts, CSV tables, and
//! plain text.
//!
//! All binary layouts are little-endian and start with a four-byte ASCII
//! magic. Headers and grid descriptors are f64; bulk sample data is stored
//! as f32. Every write lands in a sibling temporary file that is renamed
//! into place, so an interrupted run never leaves a truncated artifact
//! under the final name.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::array2::Array2D;
use crate::beamform::BeamGrid;
use crate::dispcomp::VectorDisplacementField;
use crate::phantom::{ScattererField, ScattererLabel};
use crate::sim::ChannelDataset;
use crate::strain::StrainField;
use crate::track::DisplacementField;
use crate::{Error, Result};

const MAGIC_SCATTERERS: [u8; 4] = *b"SCTF";
const MAGIC_CHANNEL: [u8; 4] = *b"CHRF";
const MAGIC_FRAME: [u8; 4] = *b"BFRF";
const MAGIC_PLANES: [u8; 4] = *b"DISP";
const FORMAT_VERSION: u32 = 1;

/// Upper bound on any single bulk allocation implied by a header, so a
/// corrupt count cannot exhaust memory.
const MAX_BULK_BYTES: u64 = 1 << 32;

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

struct Sink<'a> {
    w: BufWriter<File>,
    path: &'a Path,
}

impl Sink<'_> {
    fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.w.write_all(b).map_err(|e| Error::io(self.path, e))
    }

    fn u8(&mut self, v: u8) -> Result<()> {
        self.bytes(&[v])
    }

    fn u32(&mut self, v: u32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    fn u64(&mut self, v: u64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    fn f32(&mut self, v: f32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    fn f64(&mut self, v: f64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }
}

/// Write `body` into a temporary sibling of `path`, then rename into place.
fn atomic_write<F>(path: &Path, body: F) -> Result<()>
where
    F: FnOnce(&mut Sink) -> Result<()>,
{
    let tmp = tmp_path(path);
    let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let mut sink = Sink {
        w: BufWriter::new(file),
        path: &tmp,
    };
    let result = body(&mut sink).and_then(|()| {
        sink.w.flush().map_err(|e| Error::io(&tmp, e))
    });
    drop(sink);
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(e);
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Source<'a> {
    r: BufReader<File>,
    path: &'a Path,
}

impl Source<'_> {
    fn open(path: &Path) -> Result<Source<'_>> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(Source {
            r: BufReader::new(file),
            path,
        })
    }

    fn exact<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.r.read_exact(&mut b).map_err(|e|

            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::format(self.path, "unexpected end of file")
            } else {
                Error::io(self.path, e)
            }
        )?;
        Ok(b)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.exact::<1>()?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.exact()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.exact()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.exact()?))
    }

    fn magic(&mut self, expect: [u8; 4]) -> Result<()> {
        let got: [u8; 4] = self.exact()?;
        if got != expect {
            return Err(Error::format(
                self.path,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(&got),
                    String::from_utf8_lossy(&expect)
                ),
            ));
        }
        Ok(())
    }

    fn version(&mut self) -> Result<()> {
        let v = self.u32()?;
        if v != FORMAT_VERSION {
            return Err(Error::format(
                self.path,
                format!("unsupported format version {v}"),
            ));
        }
        Ok(())
    }

    /// Bulk f32 block of `n` values, widened to f64.
    fn f32_block(&mut self, n: usize) -> Result<Vec<f64>> {
        if (n as u64).saturating_mul(4) > MAX_BULK_BYTES {
            return Err(Error::format(self.path, "sample count implausibly large"));
        }
        let mut raw = vec![0u8; n * 4];
        self.r.read_exact(&mut raw).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::format(self.path, "unexpected end of file")
            } else {
                Error::io(self.path, e)
            }
        })?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }
}

fn write_grid(s: &mut Sink, grid: &BeamGrid) -> Result<()> {
    s.f64(grid.medium_angle)?;
    s.f64(grid.axial_step)?;
    s.f64(grid.lateral_step)?;
    s.u32(grid.n_axial as u32)?;
    s.u32(grid.n_lateral as u32)?;
    s.f64(grid.origin[0])?;
    s.f64(grid.origin[1])
}

fn read_grid(s: &mut Source) -> Result<BeamGrid> {
    let grid = BeamGrid {
        medium_angle: s.f64()?,
        axial_step: s.f64()?,
        lateral_step: s.f64()?,
        n_axial: s.u32()? as usize,
        n_lateral: s.u32()? as usize,
        origin: [s.f64()?, s.f64()?],
    };
    grid.validate()
        .map_err(|e| Error::format(s.path, format!("bad grid descriptor: {e}")))?;
    Ok(grid)
}

/// Scatterer dump: magic "SCTF", version, count u64, then per scatterer
/// (x f64, z f64, amplitude f64, label u8). The generator seed is
/// provenance-only and not persisted; it reads back as zero.
pub fn write_scatterers(path: &Path, field: &ScattererField) -> Result<()> {
    atomic_write(path, |s| {
        s.bytes(&MAGIC_SCATTERERS)?;
        s.u32(FORMAT_VERSION)?;
        s.u64(field.len() as u64)?;
        for i in 0..field.len() {
            s.f64(field.x[i])?;
            s.f64(field.z[i])?;
            s.f64(field.amplitude[i])?;
            s.u8(field.label[i].to_u8())?;
        }
        Ok(())
    })
}

pub fn read_scatterers(path: &Path) -> Result<ScattererField> {
    let mut s = Source::open(path)?;
    s.magic(MAGIC_SCATTERERS)?;
    s.version()?;
    let count = s.u64()?;
    if count.saturating_mul(25) > MAX_BULK_BYTES {
        return Err(Error::format(path, "scatterer count implausibly large"));
    }
    let mut field = ScattererField::with_capacity(count as usize, 0);
    for _ in 0..count {
        let x = s.f64()?;
        let z = s.f64()?;
        let amplitude = s.f64()?;
        let raw = s.u8()?;
        let label = ScattererLabel::from_u8(raw)
            .ok_or_else(|| Error::format(path, format!("unknown scatterer label {raw}")))?;
        field.x.push(x);
        field.z.push(z);
        field.amplitude.push(amplitude);
        field.label.push(label);
    }
    field
        .validate()
        .map_err(|e| Error::format(path, format!("invalid scatterer field: {e}")))?;
    Ok(field)
}

/// Channel data: magic "CHRF", version, events u32, elements u32, samples
/// u64, fs f64, t0 f64, then f32 samples in event-major, element-major,
/// time-minor order.
pub fn write_channel_data(path: &Path, data: &ChannelDataset) -> Result<()> {
    let events = data.events();
    let elements = data.elements();
    let samples = data.samples();
    for panel in &data.panels {
        if panel.len() != elements || panel.iter().any(|tr| tr.len() != samples) {
            return Err(Error::InvalidArgument(
                "channel dataset is not rectangular".into(),
            ));
        }
    }
    atomic_write(path, |s| {
        s.bytes(&MAGIC_CHANNEL)?;
        s.u32(FORMAT_VERSION)?;
        s.u32(events as u32)?;
        s.u32(elements as u32)?;
        s.u64(samples as u64)?;
        s.f64(data.sampling_frequency)?;
        s.f64(data.t0)?;
        for panel in &data.panels {
            for trace in panel {
                for &v in trace {
                    s.f32(v as f32)?;
                }
            }
        }
        Ok(())
    })
}

pub fn read_channel_data(path: &Path) -> Result<ChannelDataset> {
    let mut s = Source::open(path)?;
    s.magic(MAGIC_CHANNEL)?;
    s.version()?;
    let events = s.u32()? as usize;
    let elements = s.u32()? as usize;
    let samples = s.u64()?;
    let total = (events as u64)
        .checked_mul(elements as u64)
        .and_then(|v| v.checked_mul(samples))
        .ok_or_else(|| Error::format(path, "sample count overflows"))?;
    if total.saturating_mul(4) > MAX_BULK_BYTES {
        return Err(Error::format(path, "sample count implausibly large"));
    }
    let sampling_frequency = s.f64()?;
    let t0 = s.f64()?;
    if !(sampling_frequency > 0.0) || !t0.is_finite() {
        return Err(Error::format(path, "bad sampling header"));
    }
    let samples = samples as usize;
    let mut panels = Vec::with_capacity(events);
    for _ in 0..events {
        let mut panel = Vec::with_capacity(elements);
        for _ in 0..elements {
            panel.push(s.f32_block(samples)?);
        }
        panels.push(panel);
    }
    Ok(ChannelDataset {
        panels,
        sampling_frequency,
        t0,
    })
}

/// Beamformed frame: magic "BFRF", grid descriptor, then f32 RF axial-major.
pub fn write_frame(path: &Path, grid: &BeamGrid, rf: &Array2D<f64>) -> Result<()> {
    if rf.rows() != grid.n_axial || rf.cols() != grid.n_lateral {
        return Err(Error::GridMismatch(
            "frame data does not match its grid descriptor".into(),
        ));
    }
    atomic_write(path, |s| {
        s.bytes(&MAGIC_FRAME)?;
        write_grid(s, grid)?;
        for &v in rf.as_slice() {
            s.f32(v as f32)?;
        }
        Ok(())
    })
}

pub fn read_frame(path: &Path) -> Result<(BeamGrid, Array2D<f64>)> {
    let mut s = Source::open(path)?;
    s.magic(MAGIC_FRAME)?;
    let grid = read_grid(&mut s)?;
    let data = s.f32_block(grid.n_axial * grid.n_lateral)?;
    Ok((grid, Array2D::from_vec(grid.n_axial, grid.n_lateral, data)))
}

/// Plane stack: magic "DISP", grid descriptor, plane count u32, then each
/// plane as f32 axial-major. Displacement, vector, and strain fields are
/// stored as 3, 3, and 7 planes respectively.
pub fn write_planes(path: &Path, grid: &BeamGrid, planes: &[&Array2D<f64>]) -> Result<()> {
    for plane in planes {
        if plane.rows() != grid.n_axial || plane.cols() != grid.n_lateral {
            return Err(Error::GridMismatch(
                "plane does not match the lattice descriptor".into(),
            ));
        }
    }
    atomic_write(path, |s| {
        s.bytes(&MAGIC_PLANES)?;
        write_grid(s, grid)?;
        s.u32(planes.len() as u32)?;
        for plane in planes {
            for &v in plane.as_slice() {
                s.f32(v as f32)?;
            }
        }
        Ok(())
    })
}

pub fn read_planes(path: &Path) -> Result<(BeamGrid, Vec<Array2D<f64>>)> {
    let mut s = Source::open(path)?;
    s.magic(MAGIC_PLANES)?;
    let grid = read_grid(&mut s)?;
    let n_planes = s.u32()?;
    if n_planes > 64 {
        return Err(Error::format(s.path, "plane count implausibly large"));
    }
    let mut planes = Vec::with_capacity(n_planes as usize);
    for _ in 0..n_planes {
        let data = s.f32_block(grid.n_axial * grid.n_lateral)?;
        planes.push(Array2D::from_vec(grid.n_axial, grid.n_lateral, data));
    }
    Ok((grid, planes))
}

fn bool_plane(mask: &Array2D<bool>) -> Array2D<f64> {
    let data = mask.as_slice().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    Array2D::from_vec(mask.rows(), mask.cols(), data)
}

fn plane_to_mask(plane: &Array2D<f64>) -> Array2D<bool> {
    let data = plane.as_slice().iter().map(|&v| v > 0.5).collect();
    Array2D::from_vec(plane.rows(), plane.cols(), data)
}

fn expect_planes(
    path: &Path,
    got: usize,
    want: usize,
    what: &str,
) -> Result<()> {
    if got != want {
        return Err(Error::format(
            path,
            format!("{what} expects {want} planes, found {got}"),
        ));
    }
    Ok(())
}

pub fn write_displacement(path: &Path, field: &DisplacementField) -> Result<()> {
    write_planes(
        path,
        &field.grid,
        &[&field.u_axial, &field.u_lateral, &field.quality],
    )
}

pub fn read_displacement(path: &Path) -> Result<DisplacementField> {
    let (grid, mut planes) = read_planes(path)?;
    expect_planes(path, planes.len(), 3, "displacement field")?;
    let quality = planes.pop().unwrap();
    let u_lateral = planes.pop().unwrap();
    let u_axial = planes.pop().unwrap();
    Ok(DisplacementField {
        grid,
        u_axial,
        u_lateral,
        quality,
    })
}

pub fn write_vector_field(path: &Path, field: &VectorDisplacementField) -> Result<()> {
    let valid = bool_plane(&field.valid);
    write_planes(path, &field.grid, &[&field.u_x, &field.u_z, &valid])
}

pub fn read_vector_field(path: &Path) -> Result<VectorDisplacementField> {
    let (grid, mut planes) = read_planes(path)?;
    expect_planes(path, planes.len(), 3, "vector displacement field")?;
    let valid = plane_to_mask(&planes.pop().unwrap());
    let u_z = planes.pop().unwrap();
    let u_x = planes.pop().unwrap();
    Ok(VectorDisplacementField { grid, u_x, u_z, valid })
}

pub fn write_strain_field(path: &Path, field: &StrainField) -> Result<()> {
    let valid = bool_plane(&field.valid);
    write_planes(
        path,
        &field.grid,
        &[
            &field.e_xx,
            &field.e_zz,
            &field.e_xz,
            &field.p_max,
            &field.p_min,
            &field.p_angle,
            &valid,
        ],
    )
}

pub fn read_strain_field(path: &Path) -> Result<StrainField> {
    let (grid, mut planes) = read_planes(path)?;
    expect_planes(path, planes.len(), 7, "strain field")?;
    let valid = plane_to_mask(&planes.pop().unwrap());
    let p_angle = planes.pop().unwrap();
    let p_min = planes.pop().unwrap();
    let p_max = planes.pop().unwrap();
    let e_xz = planes.pop().unwrap();
    let e_zz = planes.pop().unwrap();
    let e_xx = planes.pop().unwrap();
    Ok(StrainField {
        grid,
        e_xx,
        e_zz,
        e_xz,
        p_max,
        p_min,
        p_angle,
        valid,
    })
}

/// Atomically write UTF-8 text (manifests, CSV tables, sidecars).
pub fn write_text(path: &Path, content: &str) -> Result<()> {
    atomic_write(path, |s| s.bytes(content.as_bytes()))
}

/// Atomically write raw bytes (image files).
pub fn write_bytes(path: &Path, content: &[u8]) -> Result<()> {
    atomic_write(path, |s| s.bytes(content))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn fmt_val(v: f64) -> String {
    format!("{v:.9e}")
}

/// CSV rows of (x, z, u_axial, u_lateral, quality) over the lattice.
pub fn displacement_csv(field: &DisplacementField) -> String {
    let mut out = String::from("x_m,z_m,u_axial_m,u_lateral_m,quality\n");
    for i in 0..field.grid.n_axial {
        for j in 0..field.grid.n_lateral {
            let p = field.grid.position(i as f64, j as f64);
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                fmt_val(p[0]),
                fmt_val(p[1]),
                fmt_val(field.u_axial.get(i, j)),
                fmt_val(field.u_lateral.get(i, j)),
                fmt_val(field.quality.get(i, j)),
            ));
        }
    }
    out
}

/// CSV rows of (x, z, u_x, u_z, valid) over the lattice.
pub fn vector_csv(field: &VectorDisplacementField) -> String {
    let mut out = String::from("x_m,z_m,u_x_m,u_z_m,valid\n");
    for i in 0..field.grid.n_axial {
        for j in 0..field.grid.n_lateral {
            let p = field.grid.position(i as f64, j as f64);
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                fmt_val(p[0]),
                fmt_val(p[1]),
                fmt_val(field.u_x.get(i, j)),
                fmt_val(field.u_z.get(i, j)),
                u8::from(field.valid.get(i, j)),
            ));
        }
    }
    out
}

/// CSV rows of the strain tensor, principal values, and orientation.
pub fn strain_csv(field: &StrainField) -> String {
    let mut out =
        String::from("x_m,z_m,e_xx,e_zz,e_xz,principal_max,principal_min,principal_angle_rad,valid\n");
    for i in 0..field.grid.n_axial {
        for j in 0..field.grid.n_lateral {
            let p = field.grid.position(i as f64, j as f64);
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                fmt_val(p[0]),
                fmt_val(p[1]),
                fmt_val(field.e_xx.get(i, j)),
                fmt_val(field.e_zz.get(i, j)),
                fmt_val(field.e_xz.get(i, j)),
                fmt_val(field.p_max.get(i, j)),
                fmt_val(field.p_min.get(i, j)),
                fmt_val(field.p_angle.get(i, j)),
                u8::from(field.valid.get(i, j)),
            ));
        }
    }
    out
}
