//! Solved map and trajectory, stored as NDJSON.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{Vector3, Vector4};
use serde::{Deserialize, Serialize};

use super::Mode;
use crate::error::{Error, Result};
use crate::eval::Trajectory;
use crate::geometry::{DualQuadric, Plane, Pose};
use crate::sim::dataset::{pose_from_log, pose_to_log, FORMAT_VERSION};

pub const SOLUTION_FILE: &str = "solution.ndjson";

#[derive(Debug, Clone, PartialEq)]
pub struct SolvedPlane {
    pub id: u64,
    pub anchor_frame: u64,
    /// World frame.
    pub plane: Plane,
    /// Tracks constrained to lie on the plane.
    pub inlier_tracks: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolvedQuadric {
    pub id: u64,
    pub anchor_frame: u64,
    /// World frame.
    pub quadric: DualQuadric,
    pub class_id: u32,
}

/// Estimated keyframe poses and landmarks, all in the world frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub mode: Mode,
    pub seed: Option<u64>,
    pub poses: Vec<(u64, Pose)>,
    pub points: BTreeMap<u64, Vector3<f64>>,
    pub planes: Vec<SolvedPlane>,
    pub quadrics: Vec<SolvedQuadric>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum Record {
    SolutionHeader {
        format_version: u32,
        mode: Mode,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    Pose {
        id: u64,
        pose: [f64; 6],
    },
    Point {
        track: u64,
        xyz: [f64; 3],
    },
    Plane {
        id: u64,
        anchor_frame: u64,
        coeffs: [f64; 4],
        inlier_tracks: Vec<u64>,
    },
    Quadric {
        id: u64,
        anchor_frame: u64,
        pose: [f64; 6],
        semi_axes: [f64; 3],
        class: u32,
    },
}

fn line(r: &Record) -> String {
    serde_json::to_string(r).expect("records serialize")
}

impl Solution {
    pub fn trajectory(&self) -> Result<Trajectory> {
        Trajectory::new(self.poses.clone())
    }

    pub fn to_ndjson(&self) -> String {
        let mut out = String::new();
        let mut push = |r: Record| {
            let _ = writeln!(out, "{}", line(&r));
        };
        push(Record::SolutionHeader { format_version: FORMAT_VERSION, mode: self.mode, seed: self.seed });
        for (id, p) in &self.poses {
            push(Record::Pose { id: *id, pose: pose_to_log(p) });
        }
        for (track, x) in &self.points {
            push(Record::Point { track: *track, xyz: [x.x, x.y, x.z] });
        }
        for p in &self.planes {
            let c = p.plane.coeffs();
            push(Record::Plane {
                id: p.id,
                anchor_frame: p.anchor_frame,
                coeffs: [c[0], c[1], c[2], c[3]],
                inlier_tracks: p.inlier_tracks.clone(),
            });
        }
        for q in &self.quadrics {
            let a = q.quadric.semi_axes();
            push(Record::Quadric {
                id: q.id,
                anchor_frame: q.anchor_frame,
                pose: pose_to_log(&q.quadric.frame),
                semi_axes: [a.x, a.y, a.z],
                class: q.class_id,
            });
        }
        out
    }

    pub fn from_ndjson(text: &str) -> Result<Self> {
        let err = |line: usize, message: String| Error::Format { line, message };
        let mut sol: Option<Solution> = None;
        for (i, raw) in text.lines().enumerate() {
            let n = i + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(raw).map_err(|e| err(n, e.to_string()))?;
            if let Record::SolutionHeader { format_version, mode, seed } = rec {
                if sol.is_some() {
                    return Err(err(n, "duplicate header".into()));
                }
                if format_version != FORMAT_VERSION {
                    return Err(err(n, format!("unsupported format_version {format_version}")));
                }
                sol = Some(Solution {
                    mode,
                    seed,
                    poses: vec![],
                    points: BTreeMap::new(),
                    planes: vec![],
                    quadrics: vec![],
                });
                continue;
            }
            let s = sol.as_mut().ok_or_else(|| err(n, "the first record must be the solution header".into()))?;
            match rec {
                Record::SolutionHeader { .. } => unreachable!(),
                Record::Pose { id, pose } => {
                    if s.poses.last().is_some_and(|(last, _)| *last >= id) {
                        return Err(err(n, "pose ids must be strictly increasing".into()));
                    }
                    s.poses.push((id, pose_from_log(&pose)));
                }
                Record::Point { track, xyz } => {
                    s.points.insert(track, Vector3::from(xyz));
                }
                Record::Plane { id, anchor_frame, coeffs, inlier_tracks } => {
                    let plane = Plane::from_coeffs(Vector4::from(coeffs)).map_err(|e| err(n, e.to_string()))?;
                    s.planes.push(SolvedPlane { id, anchor_frame, plane, inlier_tracks });
                }
                Record::Quadric { id, anchor_frame, pose, semi_axes, class } => {
                    let quadric = DualQuadric::new(pose_from_log(&pose), Vector3::from(semi_axes))
                        .map_err(|e| err(n, e.to_string()))?;
                    s.quadrics.push(SolvedQuadric { id, anchor_frame, quadric, class_id: class });
                }
            }
        }
        sol.ok_or_else(|| err(0, "empty solution".into()))
    }

    pub fn path(dir: &Path) -> PathBuf {
        dir.join(SOLUTION_FILE)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(Self::path(dir), self.to_ndjson())?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = Self::path(dir);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_ndjson(&text)
    }
}
