//! Hemisphere split and quasi-conformal flattening onto the unit square.

mod beltrami;
mod boundary;
mod report;
mod split;
mod teichmuller;

use nalgebra::Vector2;

pub use beltrami::{
    beltrami_coefficient, harmonic_map, linear_beltrami_solver, BeltramiField, FaceFrames, C64,
};
pub use boundary::{
    extract_boundary, rectangle_boundary_conditions, rectangle_boundary_conditions_with_axes,
    rectangle_boundary_from_corners, BoundaryCondition,
};
pub use report::{
    distortion_report, read_planar_map, write_beltrami, write_planar_map, DistortionReport,
};
pub use split::{split_sphere, SphereSplit};
pub use teichmuller::{teichmuller_map, TeichmullerMap, DEFAULT_MAX_ITER, DEFAULT_TOLERANCE};

use crate::error::Result;
use crate::mesh::TriMesh;

pub type Vec2 = Vector2<f64>;

/// Per-vertex coordinates of an open mesh in the plane.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanarMap {
    pub uv: Vec<Vec2>,
}

/// Boundary extraction, corner selection and Teichmüller flattening of one open half.
pub fn flatten_half(open_mesh: &TriMesh, tol: f64, max_iter: usize) -> Result<TeichmullerMap> {
    let lp = extract_boundary(open_mesh)?;
    let bc = rectangle_boundary_conditions(&lp, open_mesh.vertices())?;
    teichmuller_map(open_mesh, &bc, tol, max_iter)
}
