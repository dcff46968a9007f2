//! Dynamic study container and its on-disk format.
//!
//! A study is a 4D frame stack `[F, Z, Y, X]` with an acquisition schedule.
//! On disk it is a JSON header sidecar (`<base>.json`) plus a raw blob
//! (`<base>.raw`) of little-endian IEEE-754 f32 in C order. Label volumes use
//! the same sidecar with a `u8` payload. Readers are strict: unknown header
//! keys, dimension mismatches, and truncated payloads are rejected.

use crate::error::{DecadeError, Result};
use crate::vol::{f32_from_le_bytes, f32_to_le_bytes, Volume};
use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

/// Frame start times and durations in seconds; contiguous by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameSchedule {
    pub starts_s: Vec<f64>,
    pub durations_s: Vec<f64>,
}

impl FrameSchedule {
    /// Builds a contiguous schedule from durations, starting at t = 0.
    pub fn from_durations(durations_s: &[f64]) -> Result<Self> {
        let mut starts = Vec::with_capacity(durations_s.len());
        let mut t = 0.0;
        for &d in durations_s {
            starts.push(t);
            t += d;
        }
        let s = FrameSchedule { starts_s: starts, durations_s: durations_s.to_vec() };
        s.validate()?;
        Ok(s)
    }

    /// The 30-frame acquisition protocol: 14 x 5 s, 7 x 10 s, 4 x 20 s,
    /// 4 x 30 s, 1 x 80 s; 420 s total.
    pub fn protocol_30_frame() -> Self {
        let mut d = Vec::with_capacity(30);
        d.extend(std::iter::repeat(5.0).take(14));
        d.extend(std::iter::repeat(10.0).take(7));
        d.extend(std::iter::repeat(20.0).take(4));
        d.extend(std::iter::repeat(30.0).take(4));
        d.push(80.0);
        Self::from_durations(&d).expect("protocol schedule is valid")
    }

    pub fn len(&self) -> usize {
        self.starts_s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts_s.is_empty()
    }

    pub fn midpoint_s(&self, f: usize) -> f64 {
        self.starts_s[f] + 0.5 * self.durations_s[f]
    }

    pub fn midpoints_s(&self) -> Vec<f64> {
        (0..self.len()).map(|f| self.midpoint_s(f)).collect()
    }

    pub fn end_s(&self) -> f64 {
        match self.len() {
            0 => 0.0,
            n => self.starts_s[n - 1] + self.durations_s[n - 1],
        }
    }

    /// Indices of frames whose midpoints fall in `[t_start, t_end]`.
    pub fn frames_in_window(&self, t_start: f64, t_end: f64) -> Vec<usize> {
        (0..self.len())
            .filter(|&f| {
                let m = self.midpoint_s(f);
                m >= t_start && m <= t_end
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.starts_s.len() != self.durations_s.len() {
            return Err(DecadeError::validation("schedule starts/durations length mismatch"));
        }
        if self.is_empty() {
            return Err(DecadeError::validation("schedule is empty"));
        }
        for (i, &d) in self.durations_s.iter().enumerate() {
            if !(d > 0.0) || !d.is_finite() {
                return Err(DecadeError::validation(format!("frame {i} duration {d} not positive")));
            }
        }
        for i in 1..self.len() {
            if self.starts_s[i] <= self.starts_s[i - 1] {
                return Err(DecadeError::validation("schedule starts not strictly increasing"));
            }
            let expect = self.starts_s[i - 1] + self.durations_s[i - 1];
            if (self.starts_s[i] - expect).abs() > 1e-9 {
                return Err(DecadeError::validation(format!(
                    "schedule gap before frame {i}: start {} != {}",
                    self.starts_s[i], expect
                )));
            }
        }
        Ok(())
    }
}

/// Value semantics of a frame stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Units {
    #[serde(rename = "counts")]
    Counts,
    #[serde(rename = "kBq_per_mL")]
    KbqPerMl,
}

impl Units {
    pub fn as_str(&self) -> &'static str {
        match self {
            Units::Counts => "counts",
            Units::KbqPerMl => "kBq_per_mL",
        }
    }
}

/// Provenance and physics constants carried with a study.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StudyMeta {
    pub seed: u64,
    pub phantom_id: String,
    /// Expected counts per kBq/mL per second of frame time.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sensitivity_cps_per_kbq_ml: Option<f64>,
    /// Physical decay constant of the tracer, 1/s.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decay_lambda_per_s: Option<f64>,
}

/// A dynamic frame stack with schedule and provenance.
#[derive(Debug, Clone)]
pub struct DynamicStudy {
    /// `[F, Z, Y, X]`.
    pub frames: Array4<f32>,
    pub schedule: FrameSchedule,
    pub units: Units,
    /// 1.0 = full statistics; thinning multiplies this down.
    pub count_fraction: f64,
    pub voxel_mm: f64,
    pub meta: StudyMeta,
}

impl DynamicStudy {
    pub fn n_frames(&self) -> usize {
        self.frames.dim().0
    }

    pub fn spatial_dims(&self) -> (usize, usize, usize) {
        let d = self.frames.dim();
        (d.1, d.2, d.3)
    }

    pub fn frame(&self, f: usize) -> Volume {
        self.frames.index_axis(ndarray::Axis(0), f).to_owned()
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.frames.dim().0 != self.schedule.len() {
            return Err(DecadeError::validation(format!(
                "frame count {} != schedule length {}",
                self.frames.dim().0,
                self.schedule.len()
            )));
        }
        if !(self.count_fraction > 0.0 && self.count_fraction <= 1.0) {
            return Err(DecadeError::validation(format!(
                "count_fraction {} outside (0, 1]",
                self.count_fraction
            )));
        }
        if !(self.voxel_mm > 0.0) {
            return Err(DecadeError::validation("voxel_mm must be positive"));
        }
        if self.units == Units::Counts && self.frames.iter().any(|&v| v < 0.0) {
            return Err(DecadeError::validation("negative values in a counts study"));
        }
        if self.frames.iter().any(|v| !v.is_finite()) {
            return Err(DecadeError::numerical("non-finite values in study frames"));
        }
        Ok(())
    }
}

/// JSON header written next to every raw payload. Strict schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyHeader {
    /// `[F, Z, Y, X]`.
    pub dims: [usize; 4],
    pub voxel_mm: f64,
    pub frame_starts_s: Vec<f64>,
    pub frame_durations_s: Vec<f64>,
    pub units: String,
    pub count_fraction: f64,
    pub seed: u64,
    pub phantom_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensitivity_cps_per_kbq_ml: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decay_lambda_per_s: Option<f64>,
}

/// Parses a study header from JSON text, reporting the offending key path on
/// schema violations.
pub fn parse_header(json: &str) -> Result<StudyHeader> {
    let de = &mut serde_json::Deserializer::from_str(json);
    let header: StudyHeader = serde_path_to_error::deserialize(de).map_err(|e| {
        DecadeError::format(format!("study header at `{}`: {}", e.path(), e.inner()))
    })?;
    validate_header(&header)?;
    Ok(header)
}

fn validate_header(h: &StudyHeader) -> Result<()> {
    let n_vox: usize = h.dims.iter().skip(1).try_fold(h.dims[0], |acc, &d| {
        acc.checked_mul(d)
    }).ok_or_else(|| DecadeError::format("dims product overflows"))?;
    if n_vox == 0 {
        return Err(DecadeError::format("zero-sized dims"));
    }
    if h.dims[0] != h.frame_starts_s.len() || h.dims[0] != h.frame_durations_s.len() {
        return Err(DecadeError::format(format!(
            "dims[0]={} disagrees with schedule arrays ({}, {})",
            h.dims[0],
            h.frame_starts_s.len(),
            h.frame_durations_s.len()
        )));
    }
    if !(h.voxel_mm > 0.0 && h.voxel_mm.is_finite()) {
        return Err(DecadeError::format("voxel_mm must be positive and finite"));
    }
    if !(h.count_fraction > 0.0 && h.count_fraction <= 1.0) {
        return Err(DecadeError::format("count_fraction outside (0, 1]"));
    }
    Ok(())
}

fn units_from_str(s: &str) -> Result<Units> {
    match s {
        "counts" => Ok(Units::Counts),
        "kBq_per_mL" => Ok(Units::KbqPerMl),
        other => Err(DecadeError::format(format!("unknown units tag `{other}`"))),
    }
}

fn paths_for(base: &Path) -> (PathBuf, PathBuf) {
    (base.with_extension("json"), base.with_extension("raw"))
}

/// Writes `<base>.json` + `<base>.raw` for a study.
pub fn write_study(base: &Path, study: &DynamicStudy) -> Result<()> {
    study.validate()?;
    let d = study.frames.dim();
    let header = StudyHeader {
        dims: [d.0, d.1, d.2, d.3],
        voxel_mm: study.voxel_mm,
        frame_starts_s: study.schedule.starts_s.clone(),
        frame_durations_s: study.schedule.durations_s.clone(),
        units: study.units.as_str().to_string(),
        count_fraction: study.count_fraction,
        seed: study.meta.seed,
        phantom_id: study.meta.phantom_id.clone(),
        sensitivity_cps_per_kbq_ml: study.meta.sensitivity_cps_per_kbq_ml,
        decay_lambda_per_s: study.meta.decay_lambda_per_s,
    };
    let (json_path, raw_path) = paths_for(base);
    if let Some(dir) = base.parent() {
        fs::create_dir_all(dir)?;
    }
    let json = serde_json::to_string_pretty(&header)
        .map_err(|e| DecadeError::format(format!("header serialization: {e}")))?;
    fs::write(json_path, json)?;
    let flat = study.frames.as_slice().expect("frames are C-contiguous");
    fs::write(raw_path, f32_to_le_bytes(flat))?;
    Ok(())
}

/// Decodes a study from header text plus raw payload bytes.
///
/// This is the untrusted-input entry point shared by the file reader and the
/// fuzz harness: every failure is a structured error, never a panic.
pub fn decode_study(header_json: &str, raw: &[u8]) -> Result<DynamicStudy> {
    let h = parse_header(header_json)?;
    let n: usize = h.dims.iter().product();
    let values = f32_from_le_bytes(raw)?;
    if values.len() != n {
        return Err(DecadeError::format(format!(
            "payload has {} values, header dims imply {}",
            values.len(),
            n
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(DecadeError::format("payload contains non-finite values"));
    }
    let frames = Array4::from_shape_vec((h.dims[0], h.dims[1], h.dims[2], h.dims[3]), values)
        .map_err(|e| DecadeError::format(format!("shape error: {e}")))?;
    let schedule = FrameSchedule {
        starts_s: h.frame_starts_s.clone(),
        durations_s: h.frame_durations_s.clone(),
    };
    schedule.validate().map_err(|e| DecadeError::format(format!("header schedule: {e}")))?;
    let study = DynamicStudy {
        frames,
        schedule,
        units: units_from_str(&h.units)?,
        count_fraction: h.count_fraction,
        voxel_mm: h.voxel_mm,
        meta: StudyMeta {
            seed: h.seed,
            phantom_id: h.phantom_id,
            sensitivity_cps_per_kbq_ml: h.sensitivity_cps_per_kbq_ml,
            decay_lambda_per_s: h.decay_lambda_per_s,
        },
    };
    study.validate().map_err(|e| DecadeError::format(format!("decoded study: {e}")))?;
    Ok(study)
}

/// Reads `<base>.json` + `<base>.raw`.
pub fn read_study(base: &Path) -> Result<DynamicStudy> {
    let (json_path, raw_path) = paths_for(base);
    let json = fs::read_to_string(&json_path)?;
    let raw = fs::read(&raw_path)?;
    decode_study(&json, &raw)
}

/// Writes a single 3D map as a 1-frame study file pair.
pub fn write_volume(base: &Path, vol: &Volume, voxel_mm: f64, phantom_id: &str) -> Result<()> {
    let d = vol.dim();
    let frames = vol
        .to_owned()
        .into_shape_with_order((1, d.0, d.1, d.2))
        .expect("adding frame axis preserves length");
    let study = DynamicStudy {
        frames,
        schedule: FrameSchedule::from_durations(&[1.0])?,
        units: Units::KbqPerMl,
        count_fraction: 1.0,
        voxel_mm,
        meta: StudyMeta {
            seed: 0,
            phantom_id: phantom_id.to_string(),
            sensitivity_cps_per_kbq_ml: None,
            decay_lambda_per_s: None,
        },
    };
    write_study(base, &study)
}

/// Reads a single 3D map written by [`write_volume`].
pub fn read_volume(base: &Path) -> Result<Volume> {
    let s = read_study(base)?;
    if s.n_frames() != 1 {
        return Err(DecadeError::format(format!(
            "expected a 1-frame map, found {} frames",
            s.n_frames()
        )));
    }
    Ok(s.frame(0))
}

/// Label header: a 3D `u8` payload with tissue codes.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelHeader {
    /// `[Z, Y, X]`.
    pub dims: [usize; 3],
    pub voxel_mm: f64,
    pub phantom_id: String,
}

/// Writes `<base>.json` + `<base>.raw` for a label volume.
pub fn write_labels(base: &Path, labels: &Array3<u8>, voxel_mm: f64, phantom_id: &str) -> Result<()> {
    let d = labels.dim();
    let header = LabelHeader { dims: [d.0, d.1, d.2], voxel_mm, phantom_id: phantom_id.to_string() };
    let (json_path, raw_path) = paths_for(base);
    if let Some(dir) = base.parent() {
        fs::create_dir_all(dir)?;
    }
    let json = serde_json::to_string_pretty(&header)
        .map_err(|e| DecadeError::format(format!("label header serialization: {e}")))?;
    fs::write(json_path, json)?;
    fs::write(raw_path, labels.as_slice().expect("labels are C-contiguous"))?;
    Ok(())
}

/// Decodes a label volume from header text plus payload bytes.
pub fn decode_labels(header_json: &str, raw: &[u8]) -> Result<Array3<u8>> {
    let de = &mut serde_json::Deserializer::from_str(header_json);
    let h: LabelHeader = serde_path_to_error::deserialize(de).map_err(|e| {
        DecadeError::format(format!("label header at `{}`: {}", e.path(), e.inner()))
    })?;
    let n = h.dims[0]
        .checked_mul(h.dims[1])
        .and_then(|p| p.checked_mul(h.dims[2]))
        .ok_or_else(|| DecadeError::format("label dims product overflows"))?;
    if n == 0 {
        return Err(DecadeError::format("zero-sized label dims"));
    }
    if raw.len() != n {
        return Err(DecadeError::format(format!(
            "label payload has {} bytes, dims imply {}",
            raw.len(),
            n
        )));
    }
    Array3::from_shape_vec((h.dims[0], h.dims[1], h.dims[2]), raw.to_vec())
        .map_err(|e| DecadeError::format(format!("label shape error: {e}")))
}

/// Reads `<base>.json` + `<base>.raw` label pair.
pub fn read_labels(base: &Path) -> Result<Array3<u8>> {
    let (json_path, raw_path) = paths_for(base);
    let json = fs::read_to_string(&json_path)?;
    let raw = fs::read(&raw_path)?;
    decode_labels(&json, &raw)
}
