//! Paired-point rigid registration between the virtual scene and the real
//! room, plus persistence of the resulting spatial anchor.
//!
//! The rotation is found first from the SVD of the centered cross-covariance
//! (with the usual reflection correction), then the translation is the offset
//! that maps the rotated virtual centroid onto the real centroid.

use std::fs;
use std::io;
use std::path::Path;

use chrono::{DateTime, SecondsFormat, Utc};
use nalgebra::{Matrix3, Vector3, SVD};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{self, Execution};
use crate::spatial::{RigidTransform, Rotation, Vec3};

pub const ANCHOR_FILE_VERSION: u32 = 1;

/// Ratio of the second to the first singular value of the cross-covariance
/// below which the rotation is considered non-unique.
const DEGENERACY_RATIO: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum RegistrationError {
    #[error("registration needs at least 3 correspondences, got {0}")]
    TooFewPoints(usize),
    #[error("virtual and real point lists differ in length ({virtual_len} vs {real_len})")]
    LengthMismatch { virtual_len: usize, real_len: usize },
    #[error("point configuration is collinear or coincident; rotation is not unique")]
    DegenerateConfiguration,
    #[error("non-finite coordinate in correspondence {0}")]
    NonFinite(usize),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("unsupported anchor file version {found} (expected {expected})")]
    VersionMismatch { found: u64, expected: u32 },
}

/// Ordered virtual/real point pairs, in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCorrespondences {
    virtual_points: Vec<Vec3>,
    real_points: Vec<Vec3>,
}

impl PointCorrespondences {
    pub fn new(
        virtual_points: Vec<Vec3>,
        real_points: Vec<Vec3>,
    ) -> Result<Self, RegistrationError> {
        if virtual_points.len() != real_points.len() {
            return Err(RegistrationError::LengthMismatch {
                virtual_len: virtual_points.len(),
                real_len: real_points.len(),
            });
        }
        if virtual_points.len() < 3 {
            return Err(RegistrationError::TooFewPoints(virtual_points.len()));
        }
        if let Some(i) = virtual_points
            .iter()
            .zip(&real_points)
            .position(|(v, r)| !(v.is_finite() && r.is_finite()))
        {
            return Err(RegistrationError::NonFinite(i));
        }
        Ok(Self {
            virtual_points,
            real_points,
        })
    }

    pub fn virtual_points(&self) -> &[Vec3] {
        &self.virtual_points
    }

    pub fn real_points(&self) -> &[Vec3] {
        &self.real_points
    }

    pub fn len(&self) -> usize {
        self.virtual_points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.virtual_points.is_empty()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (Vec3, Vec3)> + '_ {
        self.virtual_points
            .iter()
            .copied()
            .zip(self.real_points.iter().copied())
    }

    /// Reads the point-capture CSV (`vx,vy,vz,rx,ry,rz`).
    pub fn from_csv_reader<R: io::Read>(reader: R) -> Result<Self, RegistrationError> {
        #[derive(Deserialize)]
        struct Row {
            vx: f64,
            vy: f64,
            vz: f64,
            rx: f64,
            ry: f64,
            rz: f64,
        }
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = rdr
            .headers()
            .map_err(|e| RegistrationError::Parse(e.to_string()))?
            .clone();
        let expected = ["vx", "vy", "vz", "rx", "ry", "rz"];
        if headers.iter().ne(expected.iter().copied()) {
            return Err(RegistrationError::Parse(format!(
                "expected header `{}`, found `{}`",
                expected.join(","),
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut virt = Vec::new();
        let mut real = Vec::new();
        for (i, row) in rdr.deserialize::<Row>().enumerate() {
            // row 1 is the header
            let row = row.map_err(|e| RegistrationError::Parse(format!("row {}: {e}", i + 2)))?;
            virt.push(Vec3::new(row.vx, row.vy, row.vz));
            real.push(Vec3::new(row.rx, row.ry, row.rz));
        }
        Self::new(virt, real)
    }

    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self, RegistrationError> {
        Self::from_csv_reader(fs::File::open(path)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationResult {
    pub transform: RigidTransform,
    pub rms_residual: f64,
    pub per_point_residuals: Vec<f64>,
}

fn centroid(points: &[Vec3]) -> Vec3 {
    let sum = points.iter().fold(Vec3::ZERO, |acc, p| acc + *p);
    sum * (1.0 / points.len() as f64)
}

fn to_na(v: Vec3) -> Vector3<f64> {
    Vector3::new(v.x, v.y, v.z)
}

/// Least-squares rigid transform taking `virtual_points` onto `real_points`.
pub fn kabsch_solve(c: &PointCorrespondences) -> Result<RegistrationResult, RegistrationError> {
    let cv = centroid(&c.virtual_points);
    let cr = centroid(&c.real_points);

    // H = sum (v - cv)(r - cr)^T
    let mut h = Matrix3::<f64>::zeros();
    for (v, r) in c.pairs() {
        h += to_na(v - cv) * to_na(r - cr).transpose();
    }

    let svd = SVD::new(h, true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(RegistrationError::DegenerateConfiguration),
    };
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    if !(sv[0] > 0.0) || sv[1] <= DEGENERACY_RATIO * sv[0] {
        return Err(RegistrationError::DegenerateConfiguration);
    }

    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    // nalgebra does not promise an ordering, so flip whichever column
    // carries the smallest singular value.
    let smallest = (0..3)
        .min_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]))
        .unwrap_or(2);
    let mut correction = Matrix3::<f64>::identity();
    correction[(smallest, smallest)] = d;
    let r = v * correction * u.transpose();

    let rows = [
        [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
        [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
        [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
    ];
    let rotation = Rotation::from_matrix(rows).ok_or(RegistrationError::DegenerateConfiguration)?;
    let translation = cr - rotation.apply(cv);
    let transform = RigidTransform::new(rotation, translation);
    let (rms_residual, per_point_residuals) = residuals(&transform, c);
    Ok(RegistrationResult {
        transform,
        rms_residual,
        per_point_residuals,
    })
}

/// Solves many independent registrations, in parallel when enabled.
pub fn kabsch_solve_batch(
    exec: Execution,
    batch: &[PointCorrespondences],
) -> Vec<Result<RegistrationResult, RegistrationError>> {
    exec::map_slice(exec, batch, kabsch_solve)
}

fn residuals(t: &RigidTransform, c: &PointCorrespondences) -> (f64, Vec<f64>) {
    let per: Vec<f64> = c
        .pairs()
        .map(|(v, r)| t.transform_point(v).distance(r))
        .collect();
    let ms = per.iter().map(|d| d * d).sum::<f64>() / per.len() as f64;
    (ms.sqrt(), per)
}

/// RMS and per-point distances `|t * v_i - r_i|`.
pub fn registration_residual(t: &RigidTransform, c: &PointCorrespondences) -> (f64, Vec<f64>) {
    residuals(t, c)
}

/// Residuals for raw point lists, which may not have passed
/// [`PointCorrespondences`] validation.
pub fn registration_residual_raw(
    t: &RigidTransform,
    virtual_points: &[Vec3],
    real_points: &[Vec3],
) -> Result<(f64, Vec<f64>), RegistrationError> {
    if virtual_points.len() != real_points.len() {
        return Err(RegistrationError::LengthMismatch {
            virtual_len: virtual_points.len(),
            real_len: real_points.len(),
        });
    }
    if virtual_points.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let per: Vec<f64> = virtual_points
        .iter()
        .zip(real_points)
        .map(|(v, r)| t.transform_point(*v).distance(*r))
        .collect();
    let ms = per.iter().map(|d| d * d).sum::<f64>() / per.len() as f64;
    Ok((ms.sqrt(), per))
}

/// A persisted virtual-to-real calibration.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorRecord {
    pub transform: RigidTransform,
    pub label: String,
    pub created_at: DateTime<Utc>,
    pub source_points: PointCorrespondences,
}

#[derive(Serialize, Deserialize)]
struct AnchorPointPair {
    #[serde(rename = "virtual")]
    virtual_point: Vec3,
    real: Vec3,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnchorFile {
    version: u32,
    label: String,
    created_at: String,
    rotation_wxyz: [f64; 4],
    translation_m: [f64; 3],
    points: Vec<AnchorPointPair>,
}

impl AnchorRecord {
    pub fn to_json(&self) -> String {
        let file = AnchorFile {
            version: ANCHOR_FILE_VERSION,
            label: self.label.clone(),
            created_at: self.created_at.to_rfc3339_opts(SecondsFormat::AutoSi, true),
            rotation_wxyz: self.transform.rotation.wxyz(),
            translation_m: self.transform.translation.to_array(),
            points: self
                .source_points
                .pairs()
                .map(|(v, r)| AnchorPointPair {
                    virtual_point: v,
                    real: r,
                })
                .collect(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("anchor serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, RegistrationError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| RegistrationError::Parse(e.to_string()))?;
        let version = value
            .get("version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| RegistrationError::Parse("missing integer `version`".into()))?;
        if version != u64::from(ANCHOR_FILE_VERSION) {
            return Err(RegistrationError::VersionMismatch {
                found: version,
                expected: ANCHOR_FILE_VERSION,
            });
        }
        let file: AnchorFile =
            serde_json::from_value(value).map_err(|e| RegistrationError::Parse(e.to_string()))?;
        let rotation = Rotation::from_unit_wxyz(file.rotation_wxyz).ok_or_else(|| {
            RegistrationError::Parse("rotation_wxyz is not a unit quaternion".into())
        })?;
        let created_at = DateTime::parse_from_rfc3339(&file.created_at)
            .map_err(|e| RegistrationError::Parse(format!("created_at: {e}")))?
            .with_timezone(&Utc);
        let (virt, real) = file
            .points
            .into_iter()
            .map(|p| (p.virtual_point, p.real))
            .unzip();
        Ok(AnchorRecord {
            transform: RigidTransform::new(rotation, file.translation_m.into()),
            label: file.label,
            created_at,
            source_points: PointCorrespondences::new(virt, real)?,
        })
    }
}

pub fn save_anchor(a: &AnchorRecord, path: impl AsRef<Path>) -> Result<(), RegistrationError> {
    fs::write(path, a.to_json())?;
    Ok(())
}

pub fn load_anchor(path: impl AsRef<Path>) -> Result<AnchorRecord, RegistrationError> {
    AnchorRecord::from_json(&fs::read_to_string(path)?)
}
