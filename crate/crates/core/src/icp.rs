//! Retrieval baseline: rigid point-to-point ICP of the observed points
//! against every reference shape, keeping the best fit.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::grid::{inverse_log_tsdf_value, GridDims, Observation, OccupancyGrid, SdfGrid, LOG_TSDF_MAX};
use crate::kdtree::KdTree;
use crate::mesh::{marching_cubes, sample_surface, Point};
use crate::model::ShapeSample;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: [[f64; 3]; 3],
    pub translation: Point,
}

impl RigidTransform {
    pub const IDENTITY: RigidTransform =
        RigidTransform { rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], translation: [0.0; 3] };

    pub fn apply(&self, p: Point) -> Point {
        let r = &self.rotation;
        let t = self.translation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + t[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + t[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + t[2],
        ]
    }

    /// Rotation angle in degrees.
    pub fn angle_degrees(&self) -> f64 {
        let r = &self.rotation;
        ((r[0][0] + r[1][1] + r[2][2] - 1.0) / 2.0).clamp(-1.0, 1.0).acos().to_degrees()
    }

    /// Least-squares rigid fit mapping `src[i]` onto `dst[i]`.
    pub fn fit(src: &[Point], dst: &[Point]) -> RigidTransform {
        let n = src.len() as f64;
        let mean = |pts: &[Point]| {
            let mut m = Vector3::zeros();
            pts.iter().for_each(|p| m += Vector3::from(*p));
            m / n
        };
        let (cs, cd) = (mean(src), mean(dst));
        let mut h = Matrix3::zeros();
        for (s, d) in src.iter().zip(dst) {
            h += (Vector3::from(*s) - cs) * (Vector3::from(*d) - cd).transpose();
        }
        let svd = h.svd(true, true);
        let (u, vt) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
        let mut fix = Matrix3::identity();
        if (vt.transpose() * u.transpose()).determinant() < 0.0 {
            fix[(2, 2)] = -1.0;
        }
        let r = vt.transpose() * fix * u.transpose();
        let t = cd - r * cs;
        RigidTransform {
            rotation: [[r[(0, 0)], r[(0, 1)], r[(0, 2)]], [r[(1, 0)], r[(1, 1)], r[(1, 2)]], [r[(2, 0)], r[(2, 1)], r[(2, 2)]]],
            translation: [t[0], t[1], t[2]],
        }
    }
}

#[derive(Clone, Debug)]
pub struct IcpResult {
    pub transform: RigidTransform,
    /// Mean squared closest-point distance before each update and after the
    /// last one.
    pub residuals: Vec<f64>,
}

impl IcpResult {
    pub fn residual(&self) -> f64 {
        *self.residuals.last().expect("at least one residual")
    }
}

/// Point-to-point ICP from the identity.
pub fn icp(source: &[Point], target: &[Point], tree: &KdTree, max_iterations: usize) -> IcpResult {
    let mut transform = RigidTransform::IDENTITY;
    let mut residuals = Vec::new();
    let mut matched = vec![[0.0; 3]; source.len()];
    for it in 0..=max_iterations {
        let mut sum = 0.0;
        for (m, s) in matched.iter_mut().zip(source) {
            let (j, d2) = tree.nearest(transform.apply(*s)).expect("non-empty target");
            *m = target[j];
            sum += d2;
        }
        let residual = sum / source.len() as f64;
        let converged = residuals.last().is_some_and(|&prev: &f64| prev - residual <= 1e-12 * prev.max(1.0));
        residuals.push(residual);
        if converged || it == max_iterations {
            break;
        }
        transform = RigidTransform::fit(source, &matched);
    }
    IcpResult { transform, residuals }
}

/// A candidate shape with its sampled surface.
pub struct IcpReference {
    pub shape: ShapeSample,
    pub points: Vec<Point>,
    tree: KdTree,
}

impl IcpReference {
    pub fn new(shape: ShapeSample, points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidInput("reference without surface points".into()));
        }
        let tree = KdTree::new(&points);
        Ok(IcpReference { shape, points, tree })
    }

    /// Samples `n` points on the zero level set of the shape's SDF.
    pub fn from_shape(shape: ShapeSample, n: usize, seed: u64) -> Result<Self> {
        let values: Vec<f64> = shape.log_tsdf.values().iter().map(|&v| inverse_log_tsdf_value(v as f64)).collect();
        let sdf = SdfGrid::from_values(shape.dims(), values.iter().map(|&v| v as f32).collect())?;
        let pts = sample_surface(&marching_cubes(&sdf, 0.0), n, seed)?;
        Self::new(shape, pts)
    }
}

#[derive(Clone, Debug)]
pub struct IcpMatch {
    pub index: usize,
    pub transform: RigidTransform,
    pub residual: f64,
}

pub const ICP_ITERATIONS: usize = 100;

/// Registers the observed occupied voxel centers to every reference and
/// returns the one with the lowest final residual.
pub fn icp_baseline(x: &Observation, references: &[IcpReference]) -> Result<IcpMatch> {
    let src = x.occupied_points();
    if src.len() < 3 {
        return Err(Error::InvalidInput(format!("ICP needs at least 3 observed points, got {}", src.len())));
    }
    if references.is_empty() {
        return Err(Error::InvalidInput("ICP needs at least one reference".into()));
    }
    let mut best: Option<IcpMatch> = None;
    for (index, r) in references.iter().enumerate() {
        let res = icp(&src, &r.points, &r.tree, ICP_ITERATIONS);
        let residual = res.residual();
        if best.as_ref().is_none_or(|b| residual < b.residual) {
            best = Some(IcpMatch { index, transform: res.transform, residual });
        }
    }
    Ok(best.expect("non-empty references"))
}

/// The matched reference resampled into the observation frame.
pub fn icp_prediction(reference: &ShapeSample, transform: &RigidTransform, dims: GridDims) -> (OccupancyGrid, SdfGrid) {
    let rd = reference.dims();
    let lookup = |idx: usize| {
        let q = transform.apply(dims.center(idx));
        rd.checked_index([q[0].floor() as i64, q[1].floor() as i64, q[2].floor() as i64])
    };
    let mut occ = OccupancyGrid::empty(dims);
    let mut sdf = vec![inverse_log_tsdf_value(LOG_TSDF_MAX) as f32; dims.len()];
    for (idx, s) in sdf.iter_mut().enumerate() {
        if let Some(r) = lookup(idx) {
            occ.set_index(idx, reference.occupancy.values()[r]);
            *s = inverse_log_tsdf_value(reference.log_tsdf.values()[r] as f64) as f32;
        }
    }
    (occ, SdfGrid::from_values(dims, sdf).expect("sized to dims"))
}
