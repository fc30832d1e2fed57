//! JSON artifacts exchanged between the command-line tool, the service and the UI.
//!
//! Numbers are written in shortest round-trip form, so `load ∘ save` is exact.

use std::path::Path;

use nalgebra::{Quaternion, Unit};
use placekit_core::geometry::{Intrinsics, Pose, Vec3};
use placekit_core::placement::{Adjustment, Placement, PlaneModel, Region, RegionSelection};
use placekit_core::recon::Reconstruction;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{PipelineError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub index: usize,
    /// `[tx, ty, tz, qx, qy, qz, qw]`, camera to world.
    pub pose: [f64; 7],
    pub keyframe: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconMeta {
    pub tau: f64,
    /// Sliding-window size in keyframes, 0 for the full graph.
    pub window: usize,
    pub iterations: usize,
    pub final_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconFile {
    /// `[fx, fy, cx, cy, width, height]`.
    pub intrinsics: [f64; 6],
    pub frames: Vec<FrameEntry>,
    pub meta: ReconMeta,
}

impl ReconFile {
    pub fn from_reconstruction(r: &Reconstruction, tau: f64, window: usize) -> Self {
        Self {
            intrinsics: r.intr.to_array(),
            frames: r
                .poses
                .iter()
                .enumerate()
                .map(|(index, p)| FrameEntry {
                    index,
                    pose: p.to_array(),
                    keyframe: r.keyframes.contains(&index),
                })
                .collect(),
            meta: ReconMeta {
                tau,
                window,
                iterations: r.iterations,
                final_cost: r.final_cost,
            },
        }
    }

    pub fn intrinsics(&self, path: &Path) -> Result<Intrinsics> {
        Intrinsics::from_array(self.intrinsics).map_err(|e| PipelineError::parse(path, e))
    }

    pub fn pose(&self, frame: usize, path: &Path) -> Result<Pose> {
        let entry = self
            .frames
            .get(frame)
            .ok_or_else(|| PipelineError::MissingInput(format!("frame {frame} is not in {}", path.display())))?;
        Pose::from_array(entry.pose).map_err(|e| PipelineError::parse(path, e))
    }

    pub fn poses(&self, path: &Path) -> Result<Vec<Pose>> {
        (0..self.frames.len()).map(|k| self.pose(k, path)).collect()
    }
}

/// A region as `{frame, box}` or `{frame, points}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub frame: usize,
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<Vec<[f64; 2]>>,
}

impl RegionSpec {
    pub fn selection(&self) -> Result<RegionSelection> {
        let region = match (&self.bbox, &self.points) {
            (Some(b), None) => Region::Box(*b),
            (None, Some(p)) => Region::Points(p.clone()),
            _ => {
                return Err(PipelineError::Config(
                    "a region needs exactly one of `box` or `points`".into(),
                ))
            }
        };
        Ok(RegionSelection {
            frame: self.frame,
            region,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaneSummary {
    pub normal: [f64; 3],
    pub offset: f64,
    pub anchor: [f64; 3],
    /// Inlier extent along the plane-frame `x` and `z` axes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extents: Option<[f64; 2]>,
}

impl PlaneSummary {
    pub fn new(plane: &PlaneModel, extents: Option<[f64; 2]>) -> Self {
        Self {
            normal: plane.normal.into(),
            offset: plane.offset,
            anchor: plane.anchor.into(),
            extents,
        }
    }
}

/// `region.json`: the committed selection and the plane fitted to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionFile {
    #[serde(flatten)]
    pub region: RegionSpec,
    pub plane: PlaneSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformFile {
    /// `[x, y, z, w]`.
    pub rotation: [f64; 4],
    pub scale: f64,
    pub translation: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementFile {
    #[serde(flatten)]
    pub region: RegionSpec,
    pub yaw_deg: f64,
    pub scale_mult: f64,
    pub planar_offset: [f64; 2],
    pub fill_ratio: f64,
    pub plane: PlaneSummary,
    pub transform: TransformFile,
}

impl PlacementFile {
    pub fn new(region: RegionSpec, plane: &PlaneModel, p: &Placement) -> Self {
        let q = p.rotation.quaternion();
        Self {
            region,
            yaw_deg: p.adjustment.yaw_deg,
            scale_mult: p.adjustment.scale_mult,
            planar_offset: p.adjustment.planar_offset,
            fill_ratio: p.adjustment.fill_ratio,
            plane: PlaneSummary::new(plane, None),
            transform: TransformFile {
                rotation: [q.i, q.j, q.k, q.w],
                scale: p.scale,
                translation: p.translation.into(),
            },
        }
    }

    pub fn placement(&self) -> Placement {
        let [x, y, z, w] = self.transform.rotation;
        Placement {
            rotation: Unit::new_unchecked(Quaternion::new(w, x, y, z)),
            scale: self.transform.scale,
            translation: Vec3::from(self.transform.translation),
            adjustment: Adjustment {
                yaw_deg: self.yaw_deg,
                scale_mult: self.scale_mult,
                planar_offset: self.planar_offset,
                fill_ratio: self.fill_ratio,
            },
        }
    }
}

pub fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("artifact types serialize");
    bytes.push(b'\n');
    bytes
}

/// Writes through a temporary sibling and a rename, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, &to_json(value))
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => PipelineError::MissingInput(path.display().to_string()),
        _ => PipelineError::Io(e),
    })?;
    serde_json::from_slice(&bytes).map_err(|e| PipelineError::parse(path, e))
}
