use nalgebra::{DVector, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{DualQuadric, Plane, Pose, Vector9};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum VariableKind {
    Pose,
    Point,
    Plane,
    Quadric,
}

impl VariableKind {
    /// Dimension of the tangent space.
    pub fn dim(self) -> usize {
        match self {
            Self::Pose => 6,
            Self::Point | Self::Plane => 3,
            Self::Quadric => 9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VariableId {
    pub kind: VariableKind,
    pub index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Variable {
    Pose(Pose),
    Point(Vector3<f64>),
    Plane(Plane),
    Quadric(DualQuadric),
}

impl Variable {
    pub fn kind(&self) -> VariableKind {
        match self {
            Self::Pose(_) => VariableKind::Pose,
            Self::Point(_) => VariableKind::Point,
            Self::Plane(_) => VariableKind::Plane,
            Self::Quadric(_) => VariableKind::Quadric,
        }
    }

    pub fn dim(&self) -> usize {
        self.kind().dim()
    }

    /// Checks the type invariants of the stored value.
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Pose(p) if !p.is_valid() => Err(invalid("pose rotation is not orthonormal")),
            Self::Point(x) if !x.iter().all(|v| v.is_finite()) => Err(invalid("point is not finite")),
            Self::Plane(p) if (p.normal().norm() - 1.0).abs() > 1e-9 => Err(invalid("plane normal is not unit")),
            Self::Quadric(q) if !q.semi_axes().iter().all(|a| a.is_finite() && *a > 0.0) => {
                Err(invalid("quadric semi-axes are not positive"))
            }
            _ => Ok(()),
        }
    }

    pub fn retract(&self, delta: &[f64]) -> Result<Self> {
        if delta.len() != self.dim() {
            return Err(invalid(format!("update of length {} for a {:?}", delta.len(), self.kind())));
        }
        Ok(match self {
            Self::Pose(p) => Self::Pose(p.retract(&Vector6::from_column_slice(delta))?),
            Self::Point(x) => {
                let d = Vector3::from_column_slice(delta);
                if !d.iter().all(|v| v.is_finite()) {
                    return Err(invalid("point update is not finite"));
                }
                Self::Point(x + d)
            }
            Self::Plane(p) => Self::Plane(p.retract(&Vector3::from_column_slice(delta))?),
            Self::Quadric(q) => Self::Quadric(q.retract(&Vector9::from_column_slice(delta))?),
        })
    }

    /// Tangent vector taking `self` to `other` (same kind).
    pub fn local(&self, other: &Variable) -> Result<DVector<f64>> {
        Ok(match (self, other) {
            (Self::Pose(a), Self::Pose(b)) => DVector::from_column_slice(a.local(b).as_slice()),
            (Self::Point(a), Self::Point(b)) => DVector::from_column_slice((b - a).as_slice()),
            (Self::Plane(a), Self::Plane(b)) => DVector::from_column_slice(a.local(b).as_slice()),
            (Self::Quadric(a), Self::Quadric(b)) => DVector::from_column_slice(a.local(b).as_slice()),
            _ => return Err(invalid("variable kinds differ")),
        })
    }

    pub fn as_pose(&self) -> Option<&Pose> {
        match self {
            Self::Pose(p) => Some(p),
            _ => None,
        }
    }

    pub fn as_point(&self) -> Option<&Vector3<f64>> {
        match self {
            Self::Point(p) => Some(p),
            _ => None,
        }
    }

    pub fn as_plane(&self) -> Option<&Plane> {
        match self {
            Self::Plane(p) => Some(p),
            _ => None,
        }
    }

    pub fn as_quadric(&self) -> Option<&DualQuadric> {
        match self {
            Self::Quadric(q) => Some(q),
            _ => None,
        }
    }
}
