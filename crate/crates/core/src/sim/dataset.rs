//! Newline-delimited JSON dataset files (format version 1).

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{Vector3, Vector4, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, Camera, DualQuadric, Plane, Pose};

pub const FORMAT_VERSION: u32 = 1;
pub const DATASET_FILE: &str = "dataset.ndjson";
pub const CLOUD_DIR: &str = "clouds";

/// One line of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Record {
    Header {
        format_version: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    Camera {
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: f64,
        height: f64,
    },
    Keyframe {
        id: u64,
        odom: [f64; 6],
        #[serde(default, skip_serializing_if = "Option::is_none")]
        gt_pose: Option<[f64; 6]>,
    },
    PointObs {
        frame: u64,
        track: u64,
        u: f64,
        v: f64,
    },
    PlaneObs {
        frame: u64,
        coeffs: [f64; 4],
        inlier_tracks: Vec<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        gt_id: Option<u64>,
    },
    ObjectObs {
        frame: u64,
        bbox: [f64; 4],
        class: u32,
        score: f64,
        tracks: Vec<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cloud_file: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        gt_id: Option<u64>,
    },
    GtPoint {
        track: u64,
        xyz: [f64; 3],
    },
    GtPlane {
        id: u64,
        coeffs: [f64; 4],
        center: [f64; 3],
        half_u: [f64; 3],
        half_v: [f64; 3],
    },
    GtQuadric {
        id: u64,
        pose: [f64; 6],
        semi_axes: [f64; 3],
        class: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        support_plane: Option<u64>,
    },
}

pub fn pose_to_log(p: &Pose) -> [f64; 6] {
    p.log().into()
}

pub fn pose_from_log(v: &[f64; 6]) -> Pose {
    Pose::exp(&Vector6::from_column_slice(v))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Keyframe {
    pub id: u64,
    /// Measured motion from the previous keyframe, `T_{k-1}⁻¹ T_k`.
    pub odom: Pose,
    pub gt_pose: Option<Pose>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointObs {
    pub track: u64,
    pub u: f64,
    pub v: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlaneObs {
    /// Camera frame.
    pub plane: Plane,
    pub inlier_tracks: BTreeSet<u64>,
    pub gt_id: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectObs {
    pub bbox: BBox,
    pub tracks: BTreeSet<u64>,
    pub cloud_file: Option<String>,
    pub gt_id: Option<u64>,
}

/// Everything observed at one keyframe.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub keyframe: Keyframe,
    pub points: Vec<PointObs>,
    pub planes: Vec<PlaneObs>,
    pub objects: Vec<ObjectObs>,
}

/// A rectangular patch of a ground-truth plane.
#[derive(Debug, Clone, PartialEq)]
pub struct GtPlane {
    pub id: u64,
    pub plane: Plane,
    pub center: Vector3<f64>,
    pub half_u: Vector3<f64>,
    pub half_v: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GtQuadric {
    pub id: u64,
    pub quadric: DualQuadric,
    pub class_id: u32,
    pub support_plane: Option<u64>,
}

/// Ground-truth landmarks stored alongside the observations.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GtMap {
    pub points: BTreeMap<u64, Vector3<f64>>,
    pub planes: Vec<GtPlane>,
    pub quadrics: Vec<GtQuadric>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub seed: Option<u64>,
    pub camera: Camera,
    pub frames: Vec<Frame>,
    pub gt: GtMap,
    /// Object point clouds keyed by file name relative to the dataset directory.
    pub clouds: BTreeMap<String, Vec<Vector3<f64>>>,
}

impl Dataset {
    pub fn gt_trajectory(&self) -> Option<Vec<(u64, Pose)>> {
        self.frames.iter().map(|f| f.keyframe.gt_pose.map(|p| (f.keyframe.id, p))).collect()
    }

    pub fn to_records(&self) -> Vec<Record> {
        let c = &self.camera;
        let mut out = vec![
            Record::Header { format_version: FORMAT_VERSION, seed: self.seed },
            Record::Camera { fx: c.fx, fy: c.fy, cx: c.cx, cy: c.cy, width: c.width, height: c.height },
        ];
        for (track, x) in &self.gt.points {
            out.push(Record::GtPoint { track: *track, xyz: (*x).into() });
        }
        for p in &self.gt.planes {
            out.push(Record::GtPlane {
                id: p.id,
                coeffs: (*p.plane.coeffs()).into(),
                center: p.center.into(),
                half_u: p.half_u.into(),
                half_v: p.half_v.into(),
            });
        }
        for q in &self.gt.quadrics {
            out.push(Record::GtQuadric {
                id: q.id,
                pose: pose_to_log(&q.quadric.frame),
                semi_axes: q.quadric.semi_axes().into(),
                class: q.class_id,
                support_plane: q.support_plane,
            });
        }
        for f in &self.frames {
            let id = f.keyframe.id;
            out.push(Record::Keyframe {
                id,
                odom: pose_to_log(&f.keyframe.odom),
                gt_pose: f.keyframe.gt_pose.as_ref().map(pose_to_log),
            });
            for p in &f.points {
                out.push(Record::PointObs { frame: id, track: p.track, u: p.u, v: p.v });
            }
            for p in &f.planes {
                out.push(Record::PlaneObs {
                    frame: id,
                    coeffs: (*p.plane.coeffs()).into(),
                    inlier_tracks: p.inlier_tracks.iter().copied().collect(),
                    gt_id: p.gt_id,
                });
            }
            for o in &f.objects {
                let b = &o.bbox;
                out.push(Record::ObjectObs {
                    frame: id,
                    bbox: [b.x_min, b.y_min, b.x_max, b.y_max],
                    class: b.class_id,
                    score: b.score,
                    tracks: o.tracks.iter().copied().collect(),
                    cloud_file: o.cloud_file.clone(),
                    gt_id: o.gt_id,
                });
            }
        }
        out
    }

    pub fn to_ndjson(&self) -> String {
        let mut s = String::new();
        for r in self.to_records() {
            s.push_str(&serde_json::to_string(&r).expect("records serialize"));
            s.push('\n');
        }
        s
    }

    /// Parses a dataset file; cloud files are not loaded.
    pub fn from_ndjson(text: &str) -> Result<Self> {
        let mut seed = None;
        let mut camera = None;
        let mut frames: Vec<Frame> = Vec::new();
        let mut gt = GtMap::default();
        let mut saw_header = false;
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let err = |message: String| Error::Format { line: line_no, message };
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
            if !saw_header {
                match rec {
                    Record::Header { format_version, seed: s } => {
                        if format_version != FORMAT_VERSION {
                            return Err(err(format!("unsupported format_version {format_version}")));
                        }
                        seed = s;
                        saw_header = true;
                        continue;
                    }
                    _ => return Err(err("first record must be the header".into())),
                }
            }
            let current = |frames: &mut Vec<Frame>, frame: u64| -> Result<usize> {
                match frames.last() {
                    Some(f) if f.keyframe.id == frame => Ok(frames.len() - 1),
                    _ => Err(err(format!("observation for frame {frame} outside its keyframe block"))),
                }
            };
            match rec {
                Record::Header { .. } => return Err(err("duplicate header".into())),
                Record::Camera { fx, fy, cx, cy, width, height } => {
                    if camera.is_some() {
                        return Err(err("duplicate camera record".into()));
                    }
                    camera = Some(Camera::new(fx, fy, cx, cy, width, height).map_err(|e| err(e.to_string()))?);
                }
                Record::Keyframe { id, odom, gt_pose } => {
                    if frames.last().is_some_and(|f| f.keyframe.id >= id) {
                        return Err(err("keyframe ids must be strictly increasing".into()));
                    }
                    if !odom.iter().chain(gt_pose.iter().flatten()).all(|v| v.is_finite()) {
                        return Err(err("non-finite pose".into()));
                    }
                    frames.push(Frame {
                        keyframe: Keyframe {
                            id,
                            odom: pose_from_log(&odom),
                            gt_pose: gt_pose.as_ref().map(pose_from_log),
                        },
                        points: Vec::new(),
                        planes: Vec::new(),
                        objects: Vec::new(),
                    });
                }
                Record::PointObs { frame, track, u, v } => {
                    let k = current(&mut frames, frame)?;
                    if !(u.is_finite() && v.is_finite()) {
                        return Err(err("non-finite pixel".into()));
                    }
                    frames[k].points.push(PointObs { track, u, v });
                }
                Record::PlaneObs { frame, coeffs, inlier_tracks, gt_id } => {
                    let k = current(&mut frames, frame)?;
                    let plane = Plane::from_coeffs(Vector4::from(coeffs)).map_err(|e| err(e.to_string()))?;
                    frames[k].planes.push(PlaneObs {
                        plane,
                        inlier_tracks: inlier_tracks.into_iter().collect(),
                        gt_id,
                    });
                }
                Record::ObjectObs { frame, bbox, class, score, tracks, cloud_file, gt_id } => {
                    let k = current(&mut frames, frame)?;
                    let bbox = BBox::with_meta(bbox[0], bbox[1], bbox[2], bbox[3], score, class)
                        .map_err(|e| err(e.to_string()))?;
                    if let Some(f) = &cloud_file {
                        if Path::new(f).is_absolute() || f.contains("..") {
                            return Err(err("cloud_file must be a path inside the dataset directory".into()));
                        }
                    }
                    frames[k].objects.push(ObjectObs { bbox, tracks: tracks.into_iter().collect(), cloud_file, gt_id });
                }
                Record::GtPoint { track, xyz } => {
                    gt.points.insert(track, Vector3::from(xyz));
                }
                Record::GtPlane { id, coeffs, center, half_u, half_v } => {
                    let plane = Plane::from_coeffs(Vector4::from(coeffs)).map_err(|e| err(e.to_string()))?;
                    gt.planes.push(GtPlane {
                        id,
                        plane,
                        center: center.into(),
                        half_u: half_u.into(),
                        half_v: half_v.into(),
                    });
                }
                Record::GtQuadric { id, pose, semi_axes, class, support_plane } => {
                    let quadric = DualQuadric::new(pose_from_log(&pose), Vector3::from(semi_axes))
                        .map_err(|e| err(e.to_string()))?;
                    gt.quadrics.push(GtQuadric { id, quadric, class_id: class, support_plane });
                }
            }
        }
        if !saw_header {
            return Err(Error::Format { line: 1, message: "missing header".into() });
        }
        let camera = camera.ok_or_else(|| Error::Format { line: 0, message: "missing camera record".into() })?;
        Ok(Self { seed, camera, frames, gt, clouds: BTreeMap::new() })
    }

    /// Writes `dataset.ndjson` and every cloud file into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut f = fs::File::create(dir.join(DATASET_FILE))?;
        f.write_all(self.to_ndjson().as_bytes())?;
        for (name, pts) in &self.clouds {
            let path = dir.join(name);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::write(path, write_cloud(pts))?;
        }
        Ok(())
    }

    /// Reads `dataset.ndjson` from `dir` together with the referenced clouds.
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dataset_path(dir);
        let text = fs::read_to_string(&path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let mut ds = Self::from_ndjson(&text)?;
        let names: BTreeSet<String> =
            ds.frames.iter().flat_map(|f| f.objects.iter().filter_map(|o| o.cloud_file.clone())).collect();
        for name in names {
            let p = dir.join(&name);
            let text = fs::read_to_string(&p).map_err(|e| Error::Io(format!("{}: {e}", p.display())))?;
            ds.clouds.insert(name, read_cloud(&text)?);
        }
        Ok(ds)
    }
}

/// Accepts either a dataset directory or the dataset file itself.
pub fn dataset_path(dir: &Path) -> PathBuf {
    if dir.is_file() {
        dir.to_path_buf()
    } else {
        dir.join(DATASET_FILE)
    }
}

/// One `x y z` line per point.
pub fn write_cloud(points: &[Vector3<f64>]) -> String {
    let mut s = String::new();
    for p in points {
        s.push_str(&format!("{} {} {}\n", p.x, p.y, p.z));
    }
    s
}

pub fn read_cloud(text: &str) -> Result<Vec<Vector3<f64>>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format { line: i + 1, message: format!("cloud: {e}") })?;
        if v.len() != 3 || !v.iter().all(|x| x.is_finite()) {
            return Err(Error::Format { line: i + 1, message: "cloud lines need three finite numbers".into() });
        }
        out.push(Vector3::new(v[0], v[1], v[2]));
    }
    Ok(out)
}
