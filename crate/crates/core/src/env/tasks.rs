//! The seven tasks, their object categories, and per-template grasp geometry.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Pose, Rotation, Vec3};
use crate::kinematics::HandJoints;
use crate::shape::Shape;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    CylinderGraspable,
    HandleGraspable,
    TopPinchable,
    FlatLiftable,
}

impl Category {
    pub const ALL: [Category; 4] =
        [Category::CylinderGraspable, Category::HandleGraspable, Category::TopPinchable, Category::FlatLiftable];

    pub fn template(self) -> Template {
        match self {
            Category::CylinderGraspable => Template::SideGrasp,
            Category::HandleGraspable => Template::HandleGrasp,
            Category::TopPinchable => Template::TopPinch,
            Category::FlatLiftable => Template::BimanualLift,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::CylinderGraspable => "cylinder-graspable",
            Category::HandleGraspable => "handle-graspable",
            Category::TopPinchable => "top-pinchable",
            Category::FlatLiftable => "flat-liftable",
        }
    }

    /// Whether a shape is of the kind this category manipulates.
    pub fn accepts(self, shape: &Shape) -> bool {
        matches!(
            (self, shape),
            (Category::CylinderGraspable, Shape::Cylinder { .. })
                | (Category::HandleGraspable, Shape::Box { .. })
                | (Category::TopPinchable, Shape::Box { .. })
                | (Category::FlatLiftable, Shape::Box { .. })
        )
    }
}

/// Mechanical templates: every task is one of these motions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Template {
    SideGrasp,
    HandleGrasp,
    TopPinch,
    BimanualLift,
}

impl Template {
    pub const ALL: [Template; 4] = [Template::SideGrasp, Template::HandleGrasp, Template::TopPinch, Template::BimanualLift];

    pub fn name(self) -> &'static str {
        match self {
            Template::SideGrasp => "side-grasp",
            Template::HandleGrasp => "handle-grasp",
            Template::TopPinch => "top-pinch",
            Template::BimanualLift => "bimanual-lift",
        }
    }

    /// The task used when a template is evaluated as a whole.
    pub fn representative_task(self) -> &'static str {
        match self {
            Template::SideGrasp => "grasp_cup",
            Template::HandleGrasp => "hold_scanner",
            Template::TopPinch => "pinch_toy",
            Template::BimanualLift => "lift_tray",
        }
    }

    /// Height (m) the object must be raised for success.
    pub fn lift_threshold(self) -> f64 {
        match self {
            Template::TopPinch => 0.02,
            _ => 0.05,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Right,
    Left,
}

impl Side {
    pub fn name(self) -> &'static str {
        match self {
            Side::Right => "right",
            Side::Left => "left",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskSpec {
    pub name: &'static str,
    pub object_name: &'static str,
    pub category: Category,
    pub shape: Shape,
    pub color: [u8; 3],
    /// A support the object rests on (the tray stand).
    pub stand: Option<Shape>,
}

pub const TASK_NAMES: [&str; 7] =
    ["grasp_cup", "take_mug", "hold_scanner", "catch_loopy", "pinch_toy", "grasp_sanitizer", "lift_tray"];

const TRAY_STAND: Shape = Shape::Box { size: [0.14, 0.18, 0.07] };

pub fn task(name: &str) -> Result<TaskSpec> {
    let (object_name, category, shape, color, stand) = match name {
        "grasp_cup" => ("cup", Category::CylinderGraspable, Shape::Cylinder { radius: 0.035, height: 0.10 }, [200, 60, 50], None),
        "catch_loopy" => ("loopy", Category::CylinderGraspable, Shape::Cylinder { radius: 0.045, height: 0.12 }, [235, 150, 190], None),
        "grasp_sanitizer" => {
            ("sanitizer", Category::CylinderGraspable, Shape::Cylinder { radius: 0.03, height: 0.16 }, [70, 160, 210], None)
        }
        "take_mug" => ("mug", Category::HandleGraspable, Shape::Box { size: [0.03, 0.02, 0.09] }, [240, 220, 80], None),
        "hold_scanner" => ("scanner", Category::HandleGraspable, Shape::Box { size: [0.04, 0.03, 0.12] }, [60, 60, 70], None),
        "pinch_toy" => ("toy", Category::TopPinchable, Shape::Box { size: [0.03, 0.03, 0.03] }, [80, 190, 90], None),
        "lift_tray" => {
            ("tray", Category::FlatLiftable, Shape::Box { size: [0.24, 0.36, 0.015] }, [190, 110, 40], Some(TRAY_STAND))
        }
        _ => return Err(Error::UnknownTask(name.to_string())),
    };
    Ok(TaskSpec { name: TASK_NAMES.iter().find(|n| **n == name).copied().unwrap_or("unknown"), object_name, category, shape, color, stand })
}

impl TaskSpec {
    pub fn template(&self) -> Template {
        self.category.template()
    }

    pub fn bimanual(&self) -> bool {
        self.template() == Template::BimanualLift
    }

    pub fn sides(&self) -> &'static [Side] {
        if self.bimanual() {
            &[Side::Right, Side::Left]
        } else {
            &[Side::Right]
        }
    }

    /// Height of the object's center when resting.
    pub fn rest_height(&self) -> f64 {
        let base = self.stand.map_or(0.0, |s| 2.0 * s.half_height());
        base + self.shape.half_height()
    }

    /// Default placement rectangle for object centers: ([x0, x1], [y0, y1]).
    pub fn placement_rect(&self) -> ([f64; 2], [f64; 2]) {
        if self.bimanual() {
            ([0.36, 0.48], [0.21, 0.29])
        } else {
            ([0.36, 0.48], [0.0, 0.16])
        }
    }
}

/// Distance (m) the hand backs off from the grasp along its palm normal to
/// reach the pre-manipulation pose.
pub const APPROACH_DISTANCE: f64 = 0.08;
const SIDE_RISE: f64 = 0.03;

/// Where the wrist sits relative to the object when grasping.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GraspGeometry {
    /// Hand orientation in the object frame.
    pub rotation: Rotation,
    /// Wrist position in the object frame at the grasp.
    pub grasp_offset: Vec3,
    pub approach: f64,
    /// Extra height (object z) of the pre-manipulation pose above the approach line.
    pub rise: f64,
}

impl GraspGeometry {
    fn from_object_in_hand(rotation: Rotation, object_in_hand: Vec3) -> Self {
        GraspGeometry { rotation, grasp_offset: -rotation.apply(&object_in_hand), approach: APPROACH_DISTANCE, rise: 0.0 }
    }

    /// Wrist position in the object frame at the pre-manipulation pose.
    pub fn pre_offset(&self) -> Vec3 {
        self.grasp_offset - self.rotation.apply(&Vec3::x()) * self.approach + Vec3::z() * self.rise
    }

    /// Wrist pose in the object frame at the grasp.
    pub fn grasp_in_object(&self) -> Pose {
        Pose::new(self.rotation, self.grasp_offset)
    }

    /// Wrist pose in the object frame at the pre-manipulation pose.
    pub fn pre_in_object(&self) -> Pose {
        Pose::new(self.rotation, self.pre_offset())
    }

    /// The same placement for a hand mirrored through the object's xz-plane.
    pub fn mirrored_y(&self) -> Self {
        let m = nalgebra::Matrix3::from_diagonal(&Vec3::new(1.0, -1.0, 1.0));
        GraspGeometry {
            rotation: Rotation::from_matrix_projected(m * self.rotation.matrix() * m),
            grasp_offset: m * self.grasp_offset,
            approach: self.approach,
            rise: self.rise,
        }
    }
}

fn side_rotation() -> Rotation {
    // palm toward +y, fingers along +x, thumb up
    Rotation::from_columns(&Vec3::y(), &Vec3::z(), &Vec3::x())
}

fn pinch_rotation() -> Rotation {
    // palm down, fingers along +x
    Rotation::from_columns(&-Vec3::z(), &Vec3::y(), &Vec3::x())
}

fn rim_rotation() -> Rotation {
    // palm down, fingers pointing across the rim toward +y
    Rotation::from_columns(&-Vec3::z(), &-Vec3::x(), &Vec3::y())
}

/// Grasp geometry for a template and object shape, for the given hand.
pub fn grasp_geometry(template: Template, shape: &Shape, side: Side) -> GraspGeometry {
    let right = match (template, *shape) {
        // side approaches start above the grasp height to keep the palm clear of the table
        (Template::SideGrasp, Shape::Cylinder { radius, .. }) => GraspGeometry {
            rise: SIDE_RISE,
            ..GraspGeometry::from_object_in_hand(side_rotation(), Vec3::new(0.026 + radius, 0.0, 0.085))
        },
        (Template::HandleGrasp, Shape::Box { size }) => GraspGeometry {
            rise: SIDE_RISE,
            ..GraspGeometry::from_object_in_hand(side_rotation(), Vec3::new(0.026 + size[1] / 2.0, 0.0, 0.085))
        },
        (Template::TopPinch, Shape::Box { size }) => {
            GraspGeometry::from_object_in_hand(pinch_rotation(), Vec3::new(0.055 + size[2] / 2.0, 0.035, 0.085))
        }
        (Template::BimanualLift, Shape::Box { size }) => GraspGeometry {
            rotation: rim_rotation(),
            // tray top 4.5 cm below the palm, rim 5.5 cm along the fingers from the wrist
            grasp_offset: Vec3::new(0.0, -size[1] / 2.0 - 0.055, size[2] / 2.0 + 0.045),
            approach: APPROACH_DISTANCE,
            rise: 0.0,
        },
        _ => nominal_geometry(template, Side::Right),
    };
    match side {
        Side::Right => right,
        Side::Left => right.mirrored_y(),
    }
}

/// Category-wide geometry from nominal object dimensions; the basis of the
/// pre-manipulation offsets shared by every object of a category.
pub fn nominal_geometry(template: Template, side: Side) -> GraspGeometry {
    let shape = match template {
        Template::SideGrasp => Shape::Cylinder { radius: 0.04, height: 0.1 },
        Template::HandleGrasp => Shape::Box { size: [0.03, 0.03, 0.1] },
        Template::TopPinch => Shape::Box { size: [0.03, 0.03, 0.03] },
        Template::BimanualLift => Shape::Box { size: [0.24, 0.36, 0.015] },
    };
    grasp_geometry(template, &shape, side)
}

/// Hand opening used while travelling to the pre-manipulation pose.
pub fn open_hand() -> HandJoints {
    HandJoints([0.1, 0.1, 0.1, 0.1, 1.3, 0.0])
}
