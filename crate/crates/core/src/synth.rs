//! Procedural desk benchmark: watertight primitive shapes, surface
//! voxelization, ray-cast depth maps with sensor noise, and observation
//! carving.
//!
//! Shapes live in the unit cube with axis 0 pointing up. Voxelization maps
//! the unit cube onto the full grid extent, so non-cubic grids stretch
//! shapes accordingly. Cameras sit on a horizontal ring around the grid.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

use crate::error::{Error, Result};
use crate::grid::{GridDims, Observation, OccupancyGrid, SdfGrid, VoxelState};
use crate::mesh::{cross, dot, marching_cubes, norm, scale, sub, Point, TriangleMesh};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeFamily {
    CuboidUnion,
    EllipsoidUnion,
    ChairLike,
    TableLike,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 4] =
        [ShapeFamily::CuboidUnion, ShapeFamily::EllipsoidUnion, ShapeFamily::ChairLike, ShapeFamily::TableLike];

    pub fn name(self) -> &'static str {
        match self {
            ShapeFamily::CuboidUnion => "cuboid-union",
            ShapeFamily::EllipsoidUnion => "ellipsoid-union",
            ShapeFamily::ChairLike => "chair-like",
            ShapeFamily::TableLike => "table-like",
        }
    }

    /// Largest rotation about the up axis, in radians. Furniture keeps a
    /// canonical facing, as in aligned model collections.
    pub fn max_yaw(self) -> f64 {
        use std::f64::consts::PI;
        match self {
            ShapeFamily::CuboidUnion | ShapeFamily::EllipsoidUnion => PI / 6.0,
            ShapeFamily::ChairLike | ShapeFamily::TableLike => PI / 12.0,
        }
    }
}

impl fmt::Display for ShapeFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ShapeFamily::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown shape family {s:?}")))
    }
}

#[derive(Clone, Copy, Debug)]
enum Primitive {
    Cuboid { center: Point, half: Point },
    Ellipsoid { center: Point, radii: Point },
}

impl Primitive {
    fn sdf(&self, p: Point) -> f64 {
        match *self {
            Primitive::Cuboid { center, half } => {
                let q: Vec<f64> = (0..3).map(|a| (p[a] - center[a]).abs() - half[a]).collect();
                let outside = q.iter().map(|v| v.max(0.0).powi(2)).sum::<f64>().sqrt();
                outside + q[0].max(q[1]).max(q[2]).min(0.0)
            }
            Primitive::Ellipsoid { center, radii } => {
                let k = norm([(p[0] - center[0]) / radii[0], (p[1] - center[1]) / radii[1], (p[2] - center[2]) / radii[2]]);
                (k - 1.0) * radii[0].min(radii[1]).min(radii[2])
            }
        }
    }
}

/// Samples per unit length when meshing a procedural shape.
const SHAPE_RESOLUTION: usize = 40;

fn cuboid(center: Point, half: Point) -> Primitive {
    Primitive::Cuboid { center, half }
}

fn primitives(family: ShapeFamily, rng: &mut ChaCha8Rng) -> Vec<Primitive> {
    let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
    match family {
        ShapeFamily::CuboidUnion => {
            let half = [u(0.1, 0.2), u(0.1, 0.22), u(0.1, 0.22)];
            let main = [0.5 + u(-0.04, 0.04), 0.5, 0.5];
            let mut out = vec![cuboid(main, half)];
            let extra = 1 + (u(0.0, 1.0) * 3.0) as usize;
            for _ in 0..extra {
                let h = [u(0.05, 0.14), u(0.05, 0.14), u(0.05, 0.14)];
                let c = [main[0] + u(-1.0, 1.0) * half[0], main[1] + u(-1.0, 1.0) * half[1], main[2] + u(-1.0, 1.0) * half[2]];
                out.push(cuboid(c, h));
            }
            out
        }
        ShapeFamily::EllipsoidUnion => {
            let main = [0.5, 0.5, 0.5];
            let r = [u(0.12, 0.24), u(0.12, 0.24), u(0.12, 0.24)];
            let mut out = vec![Primitive::Ellipsoid { center: main, radii: r }];
            let extra = 1 + (u(0.0, 1.0) * 2.0) as usize;
            for _ in 0..extra {
                let rr = [u(0.07, 0.15), u(0.07, 0.15), u(0.07, 0.15)];
                let c = [main[0] + u(-0.7, 0.7) * r[0], main[1] + u(-0.8, 0.8) * r[1], main[2] + u(-0.8, 0.8) * r[2]];
                out.push(Primitive::Ellipsoid { center: c, radii: rr });
            }
            out
        }
        ShapeFamily::ChairLike => {
            let seat_h = u(0.38, 0.5);
            let seat_t = u(0.03, 0.05);
            let (sw, sd) = (u(0.17, 0.24), u(0.17, 0.24));
            let leg = u(0.035, 0.05);
            let top = u(0.78, 0.86);
            let back_t = u(0.03, 0.05);
            let bottom = 0.12;
            let mut out = vec![cuboid([seat_h, 0.5, 0.5], [seat_t, sw, sd])];
            for (sy, sz) in [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)] {
                let c = [(bottom + seat_h) / 2.0, 0.5 + sy * (sw - leg), 0.5 + sz * (sd - leg)];
                out.push(cuboid(c, [(seat_h - bottom) / 2.0, leg, leg]));
            }
            out.push(cuboid([(seat_h + top) / 2.0, 0.5, 0.5 - sd + back_t], [(top - seat_h) / 2.0, sw, back_t]));
            out
        }
        ShapeFamily::TableLike => {
            let top_h = u(0.6, 0.72);
            let top_t = u(0.03, 0.05);
            let (tw, td) = (u(0.18, 0.26), u(0.14, 0.25));
            let bottom = 0.12;
            let mut out = vec![cuboid([top_h, 0.5, 0.5], [top_t, tw, td])];
            if u(0.0, 1.0) < 0.5 {
                let leg = u(0.035, 0.05);
                for (sy, sz) in [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)] {
                    let c = [(bottom + top_h) / 2.0, 0.5 + sy * (tw - leg), 0.5 + sz * (td - leg)];
                    out.push(cuboid(c, [(top_h - bottom) / 2.0, leg, leg]));
                }
            } else {
                let col = u(0.05, 0.08);
                out.push(cuboid([(bottom + top_h) / 2.0, 0.5, 0.5], [(top_h - bottom) / 2.0, col, col]));
                out.push(cuboid([bottom + 0.03, 0.5, 0.5], [0.03, tw * 0.7, td * 0.7]));
            }
            out
        }
    }
}

/// Generates a closed, outward-oriented mesh inside the unit cube.
///
/// The family's primitives are combined as a union of signed distance
/// functions, rotated by a random angle about the up axis (within the
/// family's [`ShapeFamily::max_yaw`]), and meshed with
/// marching cubes.
pub fn generate_primitive_shape(family: ShapeFamily, seed: u64) -> TriangleMesh {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prims = primitives(family, &mut rng);
    let yaw = family.max_yaw();
    let angle: f64 = rng.random_range(-yaw..=yaw);
    let (s, c) = angle.sin_cos();
    let n = SHAPE_RESOLUTION;
    let dims = GridDims::cube(n).expect("valid resolution");
    let field = SdfGrid::from_fn(dims, |p| {
        let q = scale(p, 1.0 / n as f64);
        // inverse rotation about the up axis through the cube center
        let (y, z) = (q[1] - 0.5, q[2] - 0.5);
        let local = [q[0], 0.5 + c * y + s * z, 0.5 - s * y + c * z];
        prims.iter().map(|pr| pr.sdf(local)).fold(f64::INFINITY, f64::min)
    });
    // exact zeros would weld neighboring vertices together
    let values = field.values().iter().map(|&v| if v == 0.0 { 1e-6 } else { v }).collect();
    let field = SdfGrid::from_values(dims, values).expect("same dims");
    let mesh = marching_cubes(&field, 0.0);
    TriangleMesh { vertices: mesh.vertices.iter().map(|&v| scale(v, 1.0 / n as f64)).collect(), faces: mesh.faces }
}

/// Signed volume by the divergence theorem; positive for outward orientation.
pub fn signed_volume(mesh: &TriangleMesh) -> f64 {
    (0..mesh.faces.len())
        .map(|f| {
            let [a, b, c] = mesh.triangle(f);
            dot(a, cross(b, c)) / 6.0
        })
        .sum()
}

/// Separating-axis test between a triangle and the closed box
/// `center +- half`.
pub fn triangle_box_overlap(tri: &[Point; 3], center: Point, half: Point) -> bool {
    let v = [sub(tri[0], center), sub(tri[1], center), sub(tri[2], center)];
    for a in 0..3 {
        let lo = v[0][a].min(v[1][a]).min(v[2][a]);
        let hi = v[0][a].max(v[1][a]).max(v[2][a]);
        if lo > half[a] || hi < -half[a] {
            return false;
        }
    }
    let e = [sub(v[1], v[0]), sub(v[2], v[1]), sub(v[0], v[2])];
    let separated = |axis: Point| {
        let p = [dot(v[0], axis), dot(v[1], axis), dot(v[2], axis)];
        let r = half[0] * axis[0].abs() + half[1] * axis[1].abs() + half[2] * axis[2].abs();
        p[0].min(p[1]).min(p[2]) > r || p[0].max(p[1]).max(p[2]) < -r
    };
    let normal = cross(e[0], e[1]);
    if separated(normal) {
        return false;
    }
    for edge in &e {
        for a in 0..3 {
            let mut unit = [0.0; 3];
            unit[a] = 1.0;
            if separated(cross(*edge, unit)) {
                return false;
            }
        }
    }
    true
}

fn to_voxel_coords(p: Point, dims: GridDims) -> Point {
    [p[0] * dims.h as f64, p[1] * dims.w as f64, p[2] * dims.d as f64]
}

/// Marks every voxel whose box intersects a triangle of `mesh`, a mesh
/// given in unit-cube coordinates.
pub fn voxelize_mesh(mesh: &TriangleMesh, dims: GridDims) -> Result<OccupancyGrid> {
    const TOL: f64 = 1e-9;
    if mesh.vertices.iter().flatten().any(|&x| !(-TOL..=1.0 + TOL).contains(&x)) {
        return Err(Error::InvalidInput("mesh extends outside the unit cube".into()));
    }
    let mut grid = OccupancyGrid::empty(dims);
    let ext = dims.extents();
    for f in 0..mesh.faces.len() {
        let tri = mesh.triangle(f).map(|p| to_voxel_coords(p, dims));
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        for a in 0..3 {
            let mn = tri[0][a].min(tri[1][a]).min(tri[2][a]);
            let mx = tri[0][a].max(tri[1][a]).max(tri[2][a]);
            lo[a] = (mn.floor() as i64 - 1).max(0) as usize;
            hi[a] = ((mx.floor() as i64 + 1).max(0) as usize).min(ext[a] - 1);
        }
        for i in lo[0]..=hi[0] {
            for j in lo[1]..=hi[1] {
                for k in lo[2]..=hi[2] {
                    let c = [i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5];
                    if !grid.get(i, j, k) && triangle_box_overlap(&tri, c, [0.5; 3]) {
                        grid.set(i, j, k, true);
                    }
                }
            }
        }
    }
    Ok(grid)
}

/// Pinhole camera in voxel coordinates. Pixel `(u, v)` looks along
/// `R * ((u + .5 - cx) / f, (v + .5 - cy) / f, 1)`, so ray parameters are
/// depths along the optical axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    /// Columns are the camera's right, down and forward axes.
    pub rotation: [[f64; 3]; 3],
    pub center: Point,
    /// Depth reported for rays without a return.
    pub max_depth: f64,
}

impl Camera {
    pub fn new(width: usize, height: usize, focal: f64, rotation: [[f64; 3]; 3], center: Point, max_depth: f64) -> Result<Self> {
        if width == 0 || height == 0 || !(focal > 0.0) || !(max_depth > 0.0) {
            return Err(Error::InvalidInput("camera needs a positive image size, focal length and max depth".into()));
        }
        for a in 0..3 {
            for b in 0..3 {
                let col = |c: usize| [rotation[0][c], rotation[1][c], rotation[2][c]];
                let expect = if a == b { 1.0 } else { 0.0 };
                if (dot(col(a), col(b)) - expect).abs() > 1e-9 {
                    return Err(Error::InvalidInput("camera rotation is not orthonormal".into()));
                }
            }
        }
        Ok(Camera { width, height, focal, cx: width as f64 / 2.0, cy: height as f64 / 2.0, rotation, center, max_depth })
    }

    /// Camera on the horizontal ring around the grid center, looking at it.
    /// The image is square with `pixels` per side and just covers the
    /// grid's bounding sphere.
    pub fn on_ring(dims: GridDims, azimuth: f64, pixels: usize) -> Result<Self> {
        let target = [dims.h as f64 / 2.0, dims.w as f64 / 2.0, dims.d as f64 / 2.0];
        let r_grid = norm(target);
        let dist = 2.5 * r_grid;
        let center = [target[0], target[1] + dist * azimuth.cos(), target[2] + dist * azimuth.sin()];
        let forward = scale(sub(target, center), 1.0 / dist);
        let down = [-1.0, 0.0, 0.0];
        let right = cross(down, forward);
        let rotation = [[right[0], down[0], forward[0]], [right[1], down[1], forward[1]], [right[2], down[2], forward[2]]];
        let half_fov = (r_grid / dist).asin();
        let focal = pixels as f64 / 2.0 / half_fov.tan();
        Camera::new(pixels, pixels, focal, rotation, center, dist + 2.0 * r_grid)
    }

    pub fn ray(&self, u: usize, v: usize) -> Point {
        let d = [(u as f64 + 0.5 - self.cx) / self.focal, (v as f64 + 0.5 - self.cy) / self.focal, 1.0];
        let r = &self.rotation;
        [dot(r[0], d), dot(r[1], d), dot(r[2], d)]
    }
}

/// Calls `visit(index, t_enter, t_exit)` for every voxel the ray
/// `origin + t * dir`, `t >= 0`, passes through with positive length, in
/// order, until `visit` returns false. Voxels are half-open boxes.
pub fn traverse_voxels(dims: GridDims, origin: Point, dir: Point, mut visit: impl FnMut(usize, f64, f64) -> bool) {
    let ext = dims.extents().map(|e| e as f64);
    let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
    for a in 0..3 {
        if dir[a] == 0.0 {
            if origin[a] < 0.0 || origin[a] >= ext[a] {
                return;
            }
        } else {
            let (ta, tb) = ((0.0 - origin[a]) / dir[a], (ext[a] - origin[a]) / dir[a]);
            t0 = t0.max(ta.min(tb));
            t1 = t1.min(ta.max(tb));
        }
    }
    if t0 >= t1 {
        return;
    }
    let mut voxel = [0i64; 3];
    let mut t_next = [f64::INFINITY; 3];
    let mut step = [0i64; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for a in 0..3 {
        let p = origin[a] + t0 * dir[a];
        voxel[a] = (p.floor() as i64).clamp(0, ext[a] as i64 - 1);
        if dir[a] > 0.0 {
            step[a] = 1;
            t_next[a] = (voxel[a] as f64 + 1.0 - origin[a]) / dir[a];
            t_delta[a] = 1.0 / dir[a];
        } else if dir[a] < 0.0 {
            step[a] = -1;
            t_next[a] = (voxel[a] as f64 - origin[a]) / dir[a];
            t_delta[a] = -1.0 / dir[a];
        }
    }
    let mut t = t0;
    loop {
        let a = (0..3).min_by(|&x, &y| t_next[x].total_cmp(&t_next[y])).expect("three axes");
        let exit = t_next[a].min(t1);
        if exit > t {
            let idx = dims.index(voxel[0] as usize, voxel[1] as usize, voxel[2] as usize);
            if !visit(idx, t, exit) {
                return;
            }
            t = exit;
        }
        if t_next[a] >= t1 {
            return;
        }
        voxel[a] += step[a];
        t_next[a] += t_delta[a];
        if voxel[a] < 0 || voxel[a] >= ext[a] as i64 {
            return;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    /// Row-major, `v * width + u`.
    pub depth: Vec<f64>,
    pub max_depth: f64,
    /// Voxel units per normalized grid unit (the largest grid extent).
    pub grid_span: f64,
}

impl DepthMap {
    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.depth[v * self.width + u]
    }

    pub fn returns(&self) -> usize {
        self.depth.iter().filter(|&&d| d < self.max_depth).count()
    }
}

/// Ray-casts the first occupied voxel for every pixel.
pub fn render_depth(occ: &OccupancyGrid, cam: &Camera) -> Result<DepthMap> {
    let dims = occ.dims();
    let c = cam.center;
    if (0..3).all(|a| c[a] >= 0.0 && c[a] < dims.extents()[a] as f64)
        && occ.get(c[0] as usize, c[1] as usize, c[2] as usize)
    {
        return Err(Error::InvalidInput("camera center lies in an occupied voxel".into()));
    }
    let values = occ.values();
    let mut depth = vec![cam.max_depth; cam.width * cam.height];
    for v in 0..cam.height {
        for u in 0..cam.width {
            let dir = cam.ray(u, v);
            traverse_voxels(dims, c, dir, |idx, t_in, _| {
                if values[idx] {
                    depth[v * cam.width + u] = t_in.min(cam.max_depth);
                    return false;
                }
                true
            });
        }
    }
    Ok(DepthMap { width: cam.width, height: cam.height, depth, max_depth: cam.max_depth, grid_span: dims.max_extent() as f64 })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseParams {
    /// Rate of the additive exponential noise, in normalized grid units.
    pub exp_rate: f64,
    pub drop_prob: f64,
}

impl NoiseParams {
    pub fn new(exp_rate: f64, drop_prob: f64) -> Result<Self> {
        if !(exp_rate > 0.0) || !(0.0..=1.0).contains(&drop_prob) {
            return Err(Error::InvalidInput(format!("invalid noise parameters rate={exp_rate} drop={drop_prob}")));
        }
        Ok(NoiseParams { exp_rate, drop_prob })
    }
}

impl Default for NoiseParams {
    fn default() -> Self {
        NoiseParams { exp_rate: 70.0, drop_prob: 0.075 }
    }
}

/// Drops returns with `drop_prob` and pushes the rest back by exponential
/// noise.
pub fn perturb_depth(depth: &DepthMap, np: NoiseParams, seed: u64) -> DepthMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let exp = Exp::new(np.exp_rate).expect("validated rate");
    let mut out = depth.clone();
    for d in out.depth.iter_mut() {
        if *d >= depth.max_depth {
            continue;
        }
        if rng.random::<f64>() < np.drop_prob {
            *d = depth.max_depth;
        } else {
            *d = (*d + exp.sample(&mut rng) * depth.grid_span).min(depth.max_depth);
        }
    }
    out
}

/// Back-projects a depth map into a ternary observation.
///
/// The voxel containing each returned point becomes occupied and the voxels
/// crossed before it become free. With `carve_misses`, rays without a return
/// also mark everything they cross as free. Occupied always wins over free.
pub fn observation_from_depth(depth: &DepthMap, cam: &Camera, dims: GridDims, carve_misses: bool) -> Observation {
    let mut states = vec![VoxelState::Unknown; dims.len()];
    let mut free = vec![false; dims.len()];
    for v in 0..depth.height {
        for u in 0..depth.width {
            let d = depth.get(u, v);
            let hit = d < depth.max_depth;
            if !hit && !carve_misses {
                continue;
            }
            traverse_voxels(dims, cam.center, cam.ray(u, v), |idx, _, t_out| {
                if hit && t_out > d {
                    states[idx] = VoxelState::Occupied;
                    return false;
                }
                free[idx] = true;
                true
            });
        }
    }
    for (s, f) in states.iter_mut().zip(free) {
        if f && *s != VoxelState::Occupied {
            *s = VoxelState::Free;
        }
    }
    Observation::from_states(dims, states).expect("sized to dims")
}

/// Per voxel: occupied if any input is, else free if any is, else unknown.
pub fn fuse_observations(obs: &[Observation]) -> Result<Observation> {
    let first = obs.first().ok_or_else(|| Error::InvalidInput("nothing to fuse".into()))?;
    let dims = first.dims();
    let mut out = first.clone();
    for o in &obs[1..] {
        dims.ensure_same(&o.dims())?;
        for idx in 0..dims.len() {
            let (a, b) = (out.get(idx), o.get(idx));
            let s = if a == VoxelState::Occupied || b == VoxelState::Occupied {
                VoxelState::Occupied
            } else if a == VoxelState::Free || b == VoxelState::Free {
                VoxelState::Free
            } else {
                VoxelState::Unknown
            };
            out.set(idx, s);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{fill_interior, occupancy_from_sdf, signed_distance_transform};
    use proptest::prelude::*;

    #[test]
    fn families_round_trip_names() {
        for f in ShapeFamily::ALL {
            assert_eq!(f.name().parse::<ShapeFamily>().unwrap(), f);
        }
        assert!("sofa".parse::<ShapeFamily>().is_err());
    }

    #[test]
    fn shapes_are_closed_and_deterministic() {
        for f in ShapeFamily::ALL {
            let m = generate_primitive_shape(f, 0);
            assert!(m.is_watertight(), "{f}");
            assert_eq!(m, generate_primitive_shape(f, 0));
            assert!(m.vertices.iter().flatten().all(|&x| x > 0.0 && x < 1.0));
        }
    }

    #[test]
    fn hundred_seeds_have_positive_volume() {
        for seed in 0..100u64 {
            let f = ShapeFamily::ALL[seed as usize % 4];
            let m = generate_primitive_shape(f, seed);
            assert!(m.is_watertight(), "{f} {seed}");
            assert!(signed_volume(&m) > 0.0, "{f} {seed}");
        }
    }

    #[test]
    fn signed_volume_of_cube() {
        let c = crate::mesh::cube_mesh([0.0; 3], 2.0);
        assert!((signed_volume(&c) - 8.0).abs() < 1e-12);
    }

    fn exhaustive_voxelization(mesh: &TriangleMesh, dims: GridDims) -> OccupancyGrid {
        OccupancyGrid::from_fn(dims, |i, j, k| {
            let c = [i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5];
            (0..mesh.faces.len()).any(|f| triangle_box_overlap(&mesh.triangle(f).map(|p| to_voxel_coords(p, dims)), c, [0.5; 3]))
        })
    }

    #[test]
    fn voxelize_single_triangle() {
        let dims = GridDims::cube(4).unwrap();
        let tri = TriangleMesh::new(vec![[0.3, 0.3, 0.3], [0.45, 0.3, 0.32], [0.3, 0.45, 0.4]], vec![[0, 1, 2]]).unwrap();
        let g = voxelize_mesh(&tri, dims).unwrap();
        assert_eq!(g.count(), 1);
        assert!(g.get(1, 1, 1));
        assert_eq!(g, exhaustive_voxelization(&tri, dims));
    }

    #[test]
    fn voxelize_cube_matches_exhaustive_oracle() {
        let dims = GridDims::cube(8).unwrap();
        let cube = crate::mesh::cube_mesh([0.3, 0.3, 0.3], 0.4);
        let g = voxelize_mesh(&cube, dims).unwrap();
        assert_eq!(g, exhaustive_voxelization(&cube, dims));
        // faces at 2.4 and 5.6 voxels: a hollow 4x4x4 shell
        assert_eq!(g.count(), 64 - 8);
        assert!(!g.get(3, 3, 3));
        assert!(voxelize_mesh(&TriangleMesh::default(), dims).unwrap().count() == 0);
        assert!(voxelize_mesh(&crate::mesh::cube_mesh([0.5; 3], 1.0), dims).is_err());
    }

    #[test]
    fn voxelized_shapes_match_oracle_and_round_trip() {
        let dims = GridDims::cube(16).unwrap();
        for f in ShapeFamily::ALL {
            let m = generate_primitive_shape(f, 7);
            let surf = voxelize_mesh(&m, dims).unwrap();
            assert_eq!(surf, exhaustive_voxelization(&m, dims));
            let filled = fill_interior(&surf);
            if matches!(f, ShapeFamily::CuboidUnion | ShapeFamily::EllipsoidUnion) {
                assert!(filled.count() > surf.count(), "{f} has an interior");
            }
            let sdf = signed_distance_transform(&filled).unwrap();
            assert_eq!(occupancy_from_sdf(&sdf), filled);
        }
    }

    fn axis_camera(dims: GridDims, pixels: usize) -> Camera {
        // looking along +axis 1 from in front of the grid
        let rot = [[0.0, -1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]];
        let c = [dims.h as f64 / 2.0, -10.0, dims.d as f64 / 2.0];
        Camera::new(pixels, pixels, pixels as f64, rot, c, 100.0).unwrap()
    }

    #[test]
    fn ring_camera_is_valid_and_sees_the_grid() {
        let dims = GridDims::cube(16).unwrap();
        let cam = Camera::on_ring(dims, 1.0, 32).unwrap();
        let full = OccupancyGrid::from_fn(dims, |_, _, _| true);
        let d = render_depth(&full, &cam).unwrap();
        // a 16-voxel cube against an image spanning its bounding sphere
        assert!(d.returns() > 32 * 32 / 4);
        assert!(Camera::new(0, 4, 1.0, cam.rotation, cam.center, 1.0).is_err());
        let mut bad = cam.rotation;
        bad[1][0] += 0.5;
        assert!(Camera::new(4, 4, 1.0, bad, cam.center, 1.0).is_err());
    }

    #[test]
    fn render_cases() {
        let dims = GridDims::cube(8).unwrap();
        let cam = axis_camera(dims, 9);
        let empty = OccupancyGrid::empty(dims);
        assert!(render_depth(&empty, &cam).unwrap().depth.iter().all(|&d| d == cam.max_depth));
        let mut one = OccupancyGrid::empty(dims);
        one.set(4, 5, 4, true);
        let d = render_depth(&one, &cam).unwrap();
        // entry face of the voxel at y = 5, camera at y = -10
        assert!((d.get(4, 4) - 15.0).abs() <= 0.5);
        let mut inside = OccupancyGrid::empty(dims);
        inside.set(1, 1, 1, true);
        let mut cam_in = cam.clone();
        cam_in.center = [1.5, 1.5, 1.5];
        assert!(render_depth(&inside, &cam_in).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn removing_voxels_never_decreases_depth(seed in any::<u64>()) {
            let dims = GridDims::cube(6).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = OccupancyGrid::from_fn(dims, |_, _, _| rng.random::<f64>() < 0.2);
            let b = OccupancyGrid::from_fn(dims, |i, j, k| a.get(i, j, k) && rng.random::<f64>() < 0.5);
            let cam = Camera::on_ring(dims, rng.random_range(0.0..6.28), 12).unwrap();
            let (da, db) = (render_depth(&a, &cam).unwrap(), render_depth(&b, &cam).unwrap());
            for (x, y) in da.depth.iter().zip(&db.depth) {
                prop_assert!(y >= x);
            }
        }

        #[test]
        fn traversal_matches_dense_sampling(seed in any::<u64>()) {
            let dims = GridDims::new(5, 7, 4).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let o = [rng.random_range(-3.0..8.0), rng.random_range(-3.0..10.0), rng.random_range(-3.0..7.0)];
            let dir = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let mut cells = Vec::new();
            traverse_voxels(dims, o, dir, |idx, a, b| { cells.push((idx, a, b)); true });
            for w in cells.windows(2) {
                prop_assert_eq!(w[0].2, w[1].1);
            }
            for &(idx, a, b) in &cells {
                let t = 0.5 * (a + b);
                let p = [o[0] + t * dir[0], o[1] + t * dir[1], o[2] + t * dir[2]];
                let c = [p[0].floor() as i64, p[1].floor() as i64, p[2].floor() as i64];
                prop_assert_eq!(dims.checked_index(c), Some(idx));
            }
            // dense samples inside the grid land in visited voxels
            for s in 0..2000 {
                let t = s as f64 * 0.01;
                let p = [o[0] + t * dir[0], o[1] + t * dir[1], o[2] + t * dir[2]];
                if let Some(idx) = dims.checked_index([p[0].floor() as i64, p[1].floor() as i64, p[2].floor() as i64]) {
                    prop_assert!(cells.iter().any(|c| c.0 == idx));
                }
            }
        }
    }

    #[test]
    fn noise_cases() {
        let base = DepthMap { width: 1000, height: 100, depth: vec![10.0; 100_000], max_depth: 50.0, grid_span: 1.0 };
        let all_drop = perturb_depth(&base, NoiseParams::new(70.0, 1.0).unwrap(), 1);
        assert!(all_drop.depth.iter().all(|&d| d == 50.0));
        let tiny = perturb_depth(&base, NoiseParams::new(1e6, 0.0).unwrap(), 2);
        assert!(tiny.depth.iter().all(|&d| (d - 10.0).abs() < 1e-3));
        let noisy = perturb_depth(&base, NoiseParams::new(70.0, 0.0).unwrap(), 3);
        let mean = noisy.depth.iter().map(|d| d - 10.0).sum::<f64>() / 1e5;
        let se = (1.0 / 70.0) / (1e5f64).sqrt();
        assert!((mean - 1.0 / 70.0).abs() < 3.0 * se, "{mean}");
        assert!(NoiseParams::new(0.0, 0.1).is_err());
        assert!(NoiseParams::new(1.0, 1.5).is_err());
    }

    #[test]
    fn observation_of_single_voxel_matches_dense_ray_sampling() {
        let dims = GridDims::cube(8).unwrap();
        let cam = axis_camera(dims, 9);
        let mut one = OccupancyGrid::empty(dims);
        one.set(4, 5, 4, true);
        let depth = render_depth(&one, &cam).unwrap();
        let obs = observation_from_depth(&depth, &cam, dims, false);
        assert_eq!(obs.get(dims.index(4, 5, 4)), VoxelState::Occupied);
        assert_eq!(obs.count(VoxelState::Occupied), 1);
        for v in 0..9 {
            for u in 0..9 {
                let d = depth.get(u, v);
                if d >= depth.max_depth {
                    continue;
                }
                let dir = cam.ray(u, v);
                for s in 1..2000 {
                    let t = d * s as f64 / 2000.0;
                    let p = [cam.center[0] + t * dir[0], cam.center[1] + t * dir[1], cam.center[2] + t * dir[2]];
                    if let Some(idx) = dims.checked_index([p[0].floor() as i64, p[1].floor() as i64, p[2].floor() as i64]) {
                        assert_eq!(obs.get(idx), VoxelState::Free);
                    }
                }
            }
        }
        let misses = observation_from_depth(&render_depth(&OccupancyGrid::empty(dims), &cam).unwrap(), &cam, dims, true);
        assert_eq!(misses.count(VoxelState::Occupied), 0);
        assert!(misses.count(VoxelState::Free) > 0);
    }

    #[test]
    fn noiseless_observations_agree_with_ground_truth() {
        let dims = GridDims::cube(16).unwrap();
        for (n, f) in ShapeFamily::ALL.into_iter().enumerate() {
            let filled = fill_interior(&voxelize_mesh(&generate_primitive_shape(f, n as u64), dims).unwrap());
            for view in 0..4 {
                let cam = Camera::on_ring(dims, view as f64 * 1.3, 32).unwrap();
                let obs = observation_from_depth(&render_depth(&filled, &cam).unwrap(), &cam, dims, false);
                assert!(obs.count(VoxelState::Occupied) > 0);
                for idx in 0..dims.len() {
                    match obs.get(idx) {
                        VoxelState::Occupied => assert!(filled.values()[idx]),
                        VoxelState::Free => assert!(!filled.values()[idx]),
                        VoxelState::Unknown => {}
                    }
                }
            }
        }
    }

    #[test]
    fn fusion() {
        let dims = GridDims::cube(2).unwrap();
        let mut a = Observation::unknown(dims);
        a.set(0, VoxelState::Occupied);
        a.set(1, VoxelState::Free);
        let mut b = Observation::unknown(dims);
        b.set(1, VoxelState::Occupied);
        b.set(2, VoxelState::Free);
        assert_eq!(fuse_observations(&[a.clone()]).unwrap(), a);
        let ab = fuse_observations(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(ab, fuse_observations(&[b, a]).unwrap());
        assert_eq!(ab.count(VoxelState::Occupied), 2);
        assert_eq!(ab.get(2), VoxelState::Free);
        assert!(fuse_observations(&[]).is_err());
    }
}
