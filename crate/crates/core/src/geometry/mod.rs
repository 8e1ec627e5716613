//! Manifold types and geometric primitives: SE(3) poses, unit-normal planes,
//! ellipsoids as dual quadrics, conic projection, IoU measures, minimum
//! enclosing ellipsoids and point-cloud registration.
//!
//! Pose convention: a camera pose `T_w^c` maps camera-frame points into the
//! world. The transform from a reference keyframe `r` to camera `c` is
//! `T_r^c = (T_w^c)⁻¹ · T_w^r`, mapping reference-frame points into the camera.

pub mod bbox;
pub mod camera;
pub mod cuboid;
pub mod mee;
pub mod plane;
pub mod quadric;
pub mod registration;
pub mod se3;

pub use bbox::BBox;
pub use camera::Camera;
pub use cuboid::{cuboid_iou, quadric_cuboid, Cuboid};
pub use mee::{min_enclosing_ellipsoid, Ellipsoid3};
pub use plane::Plane;
pub use quadric::{conic_to_bbox, eigen_signature, project_quadric, DualQuadric, Vector9};
pub use registration::{register_pointcloud, Registration, Similarity};
pub use se3::Pose;

/// `T_r^c`: maps points of reference keyframe `r` into camera `c`, both given
/// as camera-to-world poses.
pub fn relative_pose(reference: &Pose, camera: &Pose) -> Pose {
    camera.inverse().compose(reference)
}
