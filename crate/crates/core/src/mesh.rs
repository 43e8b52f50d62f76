//! Triangle meshes: marching-cubes extraction, area-weighted surface
//! sampling, exact point-to-mesh distances and OFF/OBJ text I/O.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::SdfGrid;

pub type Point = [f64; 3];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Point>,
    pub faces: Vec<[u32; 3]>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Point>, faces: Vec<[u32; 3]>) -> Result<Self> {
        let n = vertices.len() as u32;
        if faces.iter().flatten().any(|&i| i >= n) {
            return Err(Error::InvalidInput("face index out of range".into()));
        }
        if vertices.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite vertex".into()));
        }
        Ok(TriangleMesh { vertices, faces })
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn triangle(&self, f: usize) -> [Point; 3] {
        let [a, b, c] = self.faces[f];
        [self.vertices[a as usize], self.vertices[b as usize], self.vertices[c as usize]]
    }

    pub fn face_area(&self, f: usize) -> f64 {
        let [a, b, c] = self.triangle(f);
        0.5 * norm(cross(sub(b, a), sub(c, a)))
    }

    pub fn area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    /// Undirected edges with the number of faces using each.
    pub fn edge_counts(&self) -> HashMap<(u32, u32), usize> {
        let mut m = HashMap::new();
        for f in &self.faces {
            for e in 0..3 {
                let (a, b) = (f[e], f[(e + 1) % 3]);
                *m.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        m
    }

    /// Every edge is shared by exactly two faces.
    pub fn is_watertight(&self) -> bool {
        !self.faces.is_empty() && self.edge_counts().values().all(|&c| c == 2)
    }

    /// `V - E + F` over referenced vertices.
    pub fn euler_characteristic(&self) -> i64 {
        let mut used = vec![false; self.vertices.len()];
        self.faces.iter().flatten().for_each(|&i| used[i as usize] = true);
        let v = used.iter().filter(|&&u| u).count() as i64;
        v - self.edge_counts().len() as i64 + self.faces.len() as i64
    }

    /// Applies `p -> r p + t` to every vertex.
    pub fn transformed(&self, r: &[[f64; 3]; 3], t: Point) -> TriangleMesh {
        TriangleMesh { vertices: self.vertices.iter().map(|&p| add(mat_vec(r, p), t)).collect(), faces: self.faces.clone() }
    }
}

#[inline]
pub(crate) fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub(crate) fn add(a: Point, b: Point) -> Point {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub(crate) fn scale(a: Point, s: f64) -> Point {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub(crate) fn dot(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub(crate) fn cross(a: Point, b: Point) -> Point {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

#[inline]
pub(crate) fn norm(a: Point) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub(crate) fn mat_vec(r: &[[f64; 3]; 3], p: Point) -> Point {
    [dot(r[0], p), dot(r[1], p), dot(r[2], p)]
}

// Cube corners are numbered by bits: bit a set means +1 along axis a.
// Edge `a * 4 + q` runs along axis `a`; `q` packs the lower corner's bits on
// the two remaining axes (ascending).

fn edge_id(c1: usize, c2: usize) -> usize {
    let diff = c1 ^ c2;
    let axis = diff.trailing_zeros() as usize;
    let low = c1 & c2;
    let others: Vec<usize> = (0..3).filter(|&b| b != axis).collect();
    axis * 4 + ((low >> others[0]) & 1) + 2 * ((low >> others[1]) & 1)
}

fn edge_corners(e: usize) -> (usize, usize) {
    let axis = e / 4;
    let others: Vec<usize> = (0..3).filter(|&b| b != axis).collect();
    let low = ((e & 1) << others[0]) | (((e >> 1) & 1) << others[1]);
    (low, low | (1 << axis))
}

/// Triangles (as edge-id triples) for each of the 256 inside/outside corner
/// configurations, traced from the iso-contours on the six cube faces.
///
/// On every face the contour segments run from an "exit" crossing to the
/// matching "entry" crossing of the inside region, walking the face
/// counter-clockwise as seen from outside the cube. Faces with two diagonal
/// inside corners keep those corners separated. Because each face's segments
/// depend on that face's corners alone, neighboring cubes agree on shared
/// faces and the extracted surface is crack-free.
fn case_table() -> &'static Vec<Vec<[u8; 3]>> {
    static TABLE: OnceLock<Vec<Vec<[u8; 3]>>> = OnceLock::new();
    TABLE.get_or_init(|| (0..256).map(case_triangles).collect())
}

fn case_triangles(case: usize) -> Vec<[u8; 3]> {
    let inside = |c: usize| case >> c & 1 == 1;
    let mut next: [Option<usize>; 12] = [None; 12];
    for axis in 0..3 {
        let (b, c) = ((axis + 1) % 3, (axis + 2) % 3);
        for side in 0..2 {
            let base = side << axis;
            let mut cycle = [base, base | 1 << b, base | 1 << b | 1 << c, base | 1 << c];
            if side == 0 {
                cycle.reverse();
            }
            let crossing = |t: usize| edge_id(cycle[t], cycle[(t + 1) % 4]);
            let ins: Vec<bool> = cycle.iter().map(|&c| inside(c)).collect();
            let count = (0..4).filter(|&t| ins[t] != ins[(t + 1) % 4]).count();
            if count == 2 {
                let exit = (0..4).find(|&t| ins[t] && !ins[(t + 1) % 4]).unwrap();
                let entry = (0..4).find(|&t| !ins[t] && ins[(t + 1) % 4]).unwrap();
                next[crossing(exit)] = Some(crossing(entry));
            } else if count == 4 {
                for t in (0..4).filter(|&t| ins[t]) {
                    next[crossing(t)] = Some(crossing((t + 3) % 4));
                }
            }
        }
    }
    let mut tris = Vec::new();
    let mut seen = [false; 12];
    for start in 0..12 {
        if seen[start] || next[start].is_none() {
            continue;
        }
        let mut poly = vec![start];
        seen[start] = true;
        let mut e = next[start].expect("checked");
        while e != start {
            seen[e] = true;
            poly.push(e);
            e = next[e].expect("contour loops close on the cube surface");
        }
        let mut loop_tris = Vec::new();
        assert!(triangulate(&poly, 0, poly.len() - 1, &mut loop_tris), "case {case} has no interior triangulation");
        // reversed so that normals face the positive (outside) side
        tris.extend(loop_tris.into_iter().map(|[a, b, c]| [a as u8, c as u8, b as u8]));
    }
    tris
}

fn edges_share_face(e1: usize, e2: usize) -> bool {
    let ((a0, a1), (b0, b1)) = (edge_corners(e1), edge_corners(e2));
    // corners of a face agree on one coordinate bit
    (0..3).any(|bit| {
        let v = a0 >> bit & 1;
        [a0, a1, b0, b1].iter().all(|c| c >> bit & 1 == v)
    })
}

/// Triangulates `poly[i..=j]` using only diagonals that pass through the cube
/// interior, so that a diagonal never coincides with geometry of a
/// neighboring cube.
fn triangulate(poly: &[usize], i: usize, j: usize, out: &mut Vec<[usize; 3]>) -> bool {
    if j - i < 2 {
        return true;
    }
    let ok = |a: usize, b: usize| b == a + 1 || (a == 0 && b == poly.len() - 1) || !edges_share_face(poly[a], poly[b]);
    if !ok(i, j) {
        return false;
    }
    for k in i + 1..j {
        if !ok(i, k) || !ok(k, j) {
            continue;
        }
        let mark = out.len();
        if triangulate(poly, i, k, out) && triangulate(poly, k, j, out) {
            out.push([poly[i], poly[k], poly[j]]);
            return true;
        }
        out.truncate(mark);
    }
    false
}

/// Extracts the `iso` level set of `sdf`, with voxel centers as lattice
/// points. Samples `<= iso` count as inside; triangles are oriented with
/// normals toward larger values. Coincident vertices are welded and faces
/// that collapse to zero area are dropped.
pub fn marching_cubes(sdf: &SdfGrid, iso: f64) -> TriangleMesh {
    let dims = sdf.dims();
    let [h, w, d] = dims.extents();
    let table = case_table();
    let val = |i: usize, j: usize, k: usize| sdf.get(i, j, k) as f64;
    let mut edge_vertex: HashMap<(usize, usize), u32> = HashMap::new();
    let mut pos_vertex: HashMap<[u64; 3], u32> = HashMap::new();
    let mut vertices: Vec<Point> = Vec::new();
    let mut faces = Vec::new();

    for i in 0..h.saturating_sub(1) {
        for j in 0..w.saturating_sub(1) {
            for k in 0..d.saturating_sub(1) {
                let corner = |c: usize| [i + (c & 1), j + (c >> 1 & 1), k + (c >> 2 & 1)];
                let mut case = 0;
                for c in 0..8 {
                    let [a, b, e] = corner(c);
                    if val(a, b, e) <= iso {
                        case |= 1 << c;
                    }
                }
                for tri in &table[case] {
                    let mut idx = [0u32; 3];
                    for (slot, &e) in idx.iter_mut().zip(tri) {
                        let (c0, c1) = edge_corners(e as usize);
                        let p0 = corner(c0);
                        let axis = e as usize / 4;
                        let key = (dims.index(p0[0], p0[1], p0[2]), axis);
                        *slot = *edge_vertex.entry(key).or_insert_with(|| {
                            let p1 = corner(c1);
                            let (v0, v1) = (val(p0[0], p0[1], p0[2]), val(p1[0], p1[1], p1[2]));
                            let t = (iso - v0) / (v1 - v0);
                            let mut p = [p0[0] as f64 + 0.5, p0[1] as f64 + 0.5, p0[2] as f64 + 0.5];
                            p[axis] += t;
                            let bits = p.map(|x| x.to_bits());
                            *pos_vertex.entry(bits).or_insert_with(|| {
                                vertices.push(p);
                                (vertices.len() - 1) as u32
                            })
                        });
                    }
                    faces.push(idx);
                }
            }
        }
    }
    let mut mesh = TriangleMesh { vertices, faces };
    mesh.faces.retain(|f| f[0] != f[1] && f[1] != f[2] && f[0] != f[2]);
    let keep: Vec<bool> = (0..mesh.faces.len()).map(|f| mesh.face_area(f) > 0.0).collect();
    let mut it = keep.iter();
    mesh.faces.retain(|_| *it.next().unwrap());
    mesh
}

/// Draws `n` points uniformly over the surface (area-proportional face
/// choice, uniform barycentric position).
pub fn sample_surface(mesh: &TriangleMesh, n: usize, seed: u64) -> Result<Vec<Point>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut cdf = Vec::with_capacity(mesh.faces.len());
    let mut acc = 0.0;
    for f in 0..mesh.faces.len() {
        acc += mesh.face_area(f);
        cdf.push(acc);
    }
    if mesh.faces.is_empty() || acc <= 0.0 {
        return Err(Error::Degenerate("cannot sample an empty mesh".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let u = rng.random::<f64>() * acc;
            let f = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
            let [a, b, c] = mesh.triangle(f);
            let (r1, r2): (f64, f64) = (rng.random(), rng.random());
            let s = r1.sqrt();
            let (wa, wb, wc) = (1.0 - s, s * (1.0 - r2), s * r2);
            [
                wa * a[0] + wb * b[0] + wc * c[0],
                wa * a[1] + wb * b[1] + wc * c[1],
                wa * a[2] + wb * b[2] + wc * c[2],
            ]
        })
        .collect())
}

/// Closest point on triangle `abc` to `p`.
pub fn closest_point_on_triangle(p: Point, a: Point, b: Point, c: Point) -> Point {
    let ab = sub(b, a);
    let ac = sub(c, a);
    let ap = sub(p, a);
    let d1 = dot(ab, ap);
    let d2 = dot(ac, ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return a;
    }
    let bp = sub(p, b);
    let d3 = dot(ab, bp);
    let d4 = dot(ac, bp);
    if d3 >= 0.0 && d4 <= d3 {
        return b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return add(a, scale(ab, v));
    }
    let cp = sub(p, c);
    let d5 = dot(ab, cp);
    let d6 = dot(ac, cp);
    if d6 >= 0.0 && d5 <= d6 {
        return c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return add(a, scale(ac, w));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return add(b, scale(sub(c, b), w));
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    add(a, add(scale(ab, v), scale(ac, w)))
}

pub fn point_triangle_distance_sq(p: Point, tri: &[Point; 3]) -> f64 {
    let q = closest_point_on_triangle(p, tri[0], tri[1], tri[2]);
    let d = sub(p, q);
    dot(d, d)
}

#[derive(Clone, Copy, Debug)]
struct Aabb {
    lo: Point,
    hi: Point,
}

impl Aabb {
    fn of(tris: &[[Point; 3]]) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for t in tris {
            for p in t {
                for a in 0..3 {
                    lo[a] = lo[a].min(p[a]);
                    hi[a] = hi[a].max(p[a]);
                }
            }
        }
        Aabb { lo, hi }
    }

    fn distance_sq(&self, p: Point) -> f64 {
        let mut s = 0.0;
        for a in 0..3 {
            let d = (self.lo[a] - p[a]).max(0.0).max(p[a] - self.hi[a]);
            s += d * d;
        }
        s
    }
}

enum Node {
    Leaf { bounds: Aabb, start: usize, end: usize },
    Inner { bounds: Aabb, left: usize, right: usize },
}

/// Bounding-volume hierarchy over a mesh's triangles for exact
/// nearest-surface queries.
pub struct MeshDistance {
    tris: Vec<[Point; 3]>,
    nodes: Vec<Node>,
}

const LEAF_SIZE: usize = 4;

impl MeshDistance {
    pub fn new(mesh: &TriangleMesh) -> Result<Self> {
        if mesh.faces.is_empty() {
            return Err(Error::Degenerate("distance to an empty mesh".into()));
        }
        let mut tris: Vec<[Point; 3]> = (0..mesh.faces.len()).map(|f| mesh.triangle(f)).collect();
        let mut nodes = Vec::new();
        let n = tris.len();
        build(&mut tris, 0, n, &mut nodes);
        Ok(MeshDistance { tris, nodes })
    }

    pub fn distance(&self, p: Point) -> f64 {
        let mut best = f64::INFINITY;
        let mut stack = vec![0usize];
        while let Some(ni) = stack.pop() {
            match &self.nodes[ni] {
                Node::Leaf { bounds, start, end } => {
                    if bounds.distance_sq(p) > best {
                        continue;
                    }
                    for t in &self.tris[*start..*end] {
                        best = best.min(point_triangle_distance_sq(p, t));
                    }
                }
                Node::Inner { bounds, left, right } => {
                    if bounds.distance_sq(p) > best {
                        continue;
                    }
                    let (dl, dr) = (self.nodes[*left].bounds().distance_sq(p), self.nodes[*right].bounds().distance_sq(p));
                    // visit the nearer child first
                    if dl < dr {
                        stack.push(*right);
                        stack.push(*left);
                    } else {
                        stack.push(*left);
                        stack.push(*right);
                    }
                }
            }
        }
        best.sqrt()
    }
}

impl Node {
    fn bounds(&self) -> &Aabb {
        match self {
            Node::Leaf { bounds, .. } | Node::Inner { bounds, .. } => bounds,
        }
    }
}

fn build(tris: &mut [[Point; 3]], start: usize, end: usize, nodes: &mut Vec<Node>) -> usize {
    let bounds = Aabb::of(&tris[start..end]);
    let id = nodes.len();
    if end - start <= LEAF_SIZE {
        nodes.push(Node::Leaf { bounds, start, end });
        return id;
    }
    let ext = sub(bounds.hi, bounds.lo);
    let axis = (0..3).max_by(|&a, &b| ext[a].total_cmp(&ext[b])).unwrap();
    let centroid = |t: &[Point; 3]| t[0][axis] + t[1][axis] + t[2][axis];
    tris[start..end].sort_by(|a, b| centroid(a).total_cmp(&centroid(b)));
    let mid = (start + end) / 2;
    nodes.push(Node::Leaf { bounds, start, end });
    let left = build(tris, start, mid, nodes);
    let right = build(tris, mid, end, nodes);
    nodes[id] = Node::Inner { bounds, left, right };
    id
}

/// Unsigned distance from each point to the nearest triangle.
pub fn point_mesh_distance(points: &[Point], mesh: &TriangleMesh) -> Result<Vec<f64>> {
    let bvh = MeshDistance::new(mesh)?;
    Ok(points.iter().map(|&p| bvh.distance(p)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MeshFormat {
    Off,
    Obj,
}

impl MeshFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "off" => Some(MeshFormat::Off),
            "obj" => Some(MeshFormat::Obj),
            _ => None,
        }
    }
}

pub fn mesh_to_string(mesh: &TriangleMesh, format: MeshFormat) -> String {
    let mut s = String::new();
    match format {
        MeshFormat::Off => {
            let _ = writeln!(s, "OFF\n{} {} 0", mesh.vertices.len(), mesh.faces.len());
            for v in &mesh.vertices {
                let _ = writeln!(s, "{} {} {}", v[0] as f32, v[1] as f32, v[2] as f32);
            }
            for f in &mesh.faces {
                let _ = writeln!(s, "3 {} {} {}", f[0], f[1], f[2]);
            }
        }
        MeshFormat::Obj => {
            for v in &mesh.vertices {
                let _ = writeln!(s, "v {} {} {}", v[0] as f32, v[1] as f32, v[2] as f32);
            }
            for f in &mesh.faces {
                let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
            }
        }
    }
    s
}

pub fn parse_mesh(text: &str, format: MeshFormat) -> Result<TriangleMesh> {
    let bad = |d: String| Error::InvalidInput(format!("mesh parse error: {d}"));
    let num = |t: &str| t.parse::<f64>().map_err(|_| bad(format!("bad number {t:?}")));
    let idx = |t: &str| t.parse::<u32>().map_err(|_| bad(format!("bad index {t:?}")));
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    match format {
        MeshFormat::Off => {
            let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'));
            if lines.next() != Some("OFF") {
                return Err(bad("missing OFF header".into()));
            }
            let counts: Vec<usize> = lines
                .next()
                .ok_or_else(|| bad("missing counts".into()))?
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| bad(format!("bad count {t:?}"))))
                .collect::<Result<_>>()?;
            if counts.len() < 2 {
                return Err(bad("short count line".into()));
            }
            for _ in 0..counts[0] {
                let t: Vec<&str> = lines.next().ok_or_else(|| bad("missing vertex".into()))?.split_whitespace().collect();
                if t.len() < 3 {
                    return Err(bad("short vertex line".into()));
                }
                vertices.push([num(t[0])?, num(t[1])?, num(t[2])?]);
            }
            for _ in 0..counts[1] {
                let t: Vec<&str> = lines.next().ok_or_else(|| bad("missing face".into()))?.split_whitespace().collect();
                if t.len() != 4 || t[0] != "3" {
                    return Err(bad("only triangle faces are supported".into()));
                }
                faces.push([idx(t[1])?, idx(t[2])?, idx(t[3])?]);
            }
        }
        MeshFormat::Obj => {
            for line in text.lines() {
                let t: Vec<&str> = line.split_whitespace().collect();
                match t.first() {
                    Some(&"v") if t.len() >= 4 => vertices.push([num(t[1])?, num(t[2])?, num(t[3])?]),
                    Some(&"f") if t.len() == 4 => {
                        let mut f = [0u32; 3];
                        for (slot, tok) in f.iter_mut().zip(&t[1..]) {
                            let i = idx(tok.split('/').next().unwrap_or(""))?;
                            if i == 0 {
                                return Err(bad("OBJ indices are 1-based".into()));
                            }
                            *slot = i - 1;
                        }
                        faces.push(f);
                    }
                    Some(&"f") => return Err(bad("only triangle faces are supported".into())),
                    _ => {}
                }
            }
        }
    }
    TriangleMesh::new(vertices, faces)
}

pub fn export_mesh(mesh: &TriangleMesh, path: &Path, format: MeshFormat) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, mesh_to_string(mesh, format)).map_err(|e| Error::io(path, e))
}

pub fn load_mesh(path: &Path) -> Result<TriangleMesh> {
    let format = MeshFormat::from_path(path)
        .ok_or_else(|| Error::InvalidInput(format!("unknown mesh extension: {}", path.display())))?;
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_mesh(&text, format)
}

/// Axis-aligned unit cube `[0,1]^3` scaled by `s` and offset by `o`.
pub fn cube_mesh(o: Point, s: f64) -> TriangleMesh {
    let vertices = (0..8)
        .map(|c| [o[0] + s * (c & 1) as f64, o[1] + s * (c >> 1 & 1) as f64, o[2] + s * (c >> 2 & 1) as f64])
        .collect();
    let faces = vec![
        [0, 2, 1], [1, 2, 3], [4, 5, 6], [5, 7, 6],
        [0, 1, 4], [1, 5, 4], [2, 6, 3], [3, 6, 7],
        [0, 4, 2], [2, 4, 6], [1, 3, 5], [3, 7, 5],
    ];
    TriangleMesh { vertices, faces }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridDims;
    use proptest::prelude::*;

    fn sphere_sdf(n: usize, c: f64, r: f64) -> SdfGrid {
        SdfGrid::from_fn(GridDims::cube(n).unwrap(), |p| {
            ((p[0] - c).powi(2) + (p[1] - c).powi(2) + (p[2] - c).powi(2)).sqrt() - r
        })
    }

    fn trilinear(sdf: &SdfGrid, p: Point) -> f64 {
        let q = p.map(|x| x - 0.5);
        let b = q.map(|x| x.floor() as usize);
        let f = [q[0] - b[0] as f64, q[1] - b[1] as f64, q[2] - b[2] as f64];
        let mut v = 0.0;
        for c in 0..8usize {
            let o = [c & 1, c >> 1 & 1, c >> 2 & 1];
            let idx = [(b[0] + o[0]).min(sdf.dims().h - 1), (b[1] + o[1]).min(sdf.dims().w - 1), (b[2] + o[2]).min(sdf.dims().d - 1)];
            let wgt: f64 = (0..3).map(|a| if o[a] == 1 { f[a] } else { 1.0 - f[a] }).product();
            v += wgt * sdf.get(idx[0], idx[1], idx[2]) as f64;
        }
        v
    }

    #[test]
    fn table_loops_close_for_every_case() {
        assert!(case_table()[0].is_empty());
        assert!(case_table()[255].is_empty());
        for (case, tris) in case_table().iter().enumerate() {
            let corners = (case as u32).count_ones();
            if corners != 0 && corners != 8 {
                assert!(!tris.is_empty(), "case {case}");
            }
        }
        for e in 0..12 {
            let (a, b) = edge_corners(e);
            assert_eq!(edge_id(a, b), e);
        }
    }

    #[test]
    fn all_positive_is_empty() {
        let sdf = SdfGrid::from_fn(GridDims::cube(5).unwrap(), |_| 1.0);
        assert!(marching_cubes(&sdf, 0.0).is_empty());
    }

    #[test]
    fn sphere_vertices_near_radius_and_outward() {
        let sdf = sphere_sdf(16, 8.0, 5.0);
        let mesh = marching_cubes(&sdf, 0.0);
        assert!(!mesh.is_empty());
        for v in &mesh.vertices {
            let r = norm(sub(*v, [8.0; 3]));
            assert!((r - 5.0).abs() <= 0.5, "{r}");
        }
        assert!(mesh.is_watertight());
        assert_eq!(mesh.euler_characteristic(), 2);
        for f in 0..mesh.faces.len() {
            let [a, b, c] = mesh.triangle(f);
            let n = cross(sub(b, a), sub(c, a));
            let centroid = scale(add(add(a, b), c), 1.0 / 3.0);
            assert!(dot(n, sub(centroid, [8.0; 3])) > 0.0);
        }
    }

    #[test]
    fn single_negative_voxel_is_closed() {
        let dims = GridDims::cube(5).unwrap();
        let sdf = SdfGrid::from_fn(dims, |p| if p == [2.5, 2.5, 2.5] { -1.0 } else { 1.0 });
        let mesh = marching_cubes(&sdf, 0.0);
        assert_eq!(mesh.faces.len(), 8);
        assert_eq!(mesh.euler_characteristic(), 2);
        assert!(mesh.is_watertight());
    }

    #[test]
    fn vertices_on_interpolated_zero_set() {
        let sdf = sphere_sdf(12, 6.1, 3.7);
        for v in &marching_cubes(&sdf, 0.0).vertices {
            assert!(trilinear(&sdf, *v).abs() < 1e-6);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn random_fields_are_watertight(seed in any::<u64>()) {
            // random blobs, padded so the surface stays inside the grid
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dims = GridDims::cube(7).unwrap();
            let vals: Vec<f32> = (0..dims.len()).map(|idx| {
                let [i, j, k] = dims.coords(idx);
                if [i, j, k].iter().any(|&c| c == 0 || c == 6) { 1.0 } else { rng.random_range(-1.0f32..1.0) }
            }).collect();
            let sdf = SdfGrid::from_values(dims, vals).unwrap();
            let mesh = marching_cubes(&sdf, 0.0);
            if !mesh.is_empty() {
                prop_assert!(mesh.is_watertight());
            }
        }
    }

    #[test]
    fn sampling() {
        assert!(sample_surface(&TriangleMesh::default(), 3, 0).is_err());
        let tri = TriangleMesh::new(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], vec![[0, 1, 2]]).unwrap();
        assert!(sample_surface(&tri, 0, 0).unwrap().is_empty());
        for p in sample_surface(&tri, 1000, 1).unwrap() {
            assert!(p[0] >= 0.0 && p[1] >= 0.0 && p[0] + p[1] <= 1.0 + 1e-12 && p[2] == 0.0);
        }
        // areas 1 and 3
        let two = TriangleMesh::new(
            vec![[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 1.0, 0.0], [10.0, 0.0, 0.0], [16.0, 0.0, 0.0], [10.0, 1.0, 0.0]],
            vec![[0, 1, 2], [3, 4, 5]],
        )
        .unwrap();
        let pts = sample_surface(&two, 10_000, 2).unwrap();
        let first = pts.iter().filter(|p| p[0] < 5.0).count() as f64 / 1e4;
        let se = (0.25f64 * 0.75 / 1e4).sqrt();
        assert!((first - 0.25).abs() < 3.0 * se, "{first}");
    }

    fn random_mesh(seed: u64, faces: usize) -> TriangleMesh {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = Vec::new();
        let mut f = Vec::new();
        for t in 0..faces {
            let base: Point = [rng.random_range(0.0..10.0), rng.random_range(0.0..10.0), rng.random_range(0.0..10.0)];
            for _ in 0..3 {
                v.push(add(base, [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]));
            }
            f.push([3 * t as u32, 3 * t as u32 + 1, 3 * t as u32 + 2]);
        }
        TriangleMesh::new(v, f).unwrap()
    }

    #[test]
    fn distance_cases() {
        let tri = TriangleMesh::new(vec![[-50.0, -50.0, 0.0], [50.0, -50.0, 0.0], [0.0, 50.0, 0.0]], vec![[0, 1, 2]]).unwrap();
        let d = point_mesh_distance(&[[1.0, 2.0, 3.5], [-50.0, -50.0, 0.0]], &tri).unwrap();
        assert_eq!(d, vec![3.5, 0.0]);
        assert!(point_mesh_distance(&[[0.0; 3]], &TriangleMesh::default()).is_err());
    }

    #[test]
    fn bvh_equals_brute_force() {
        for seed in 0..5 {
            let mesh = random_mesh(seed, 100);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 50);
            let pts: Vec<Point> = (0..200).map(|_| [rng.random_range(-3.0..13.0), rng.random_range(-3.0..13.0), rng.random_range(-3.0..13.0)]).collect();
            let fast = point_mesh_distance(&pts, &mesh).unwrap();
            for (p, d) in pts.iter().zip(fast) {
                let brute = (0..mesh.faces.len()).map(|f| point_triangle_distance_sq(*p, &mesh.triangle(f))).fold(f64::INFINITY, f64::min).sqrt();
                assert_eq!(d, brute);
            }
        }
    }

    #[test]
    fn distance_invariant_under_rigid_motion() {
        let mesh = random_mesh(3, 30);
        let (s, c) = 0.7f64.sin_cos();
        let r = [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]];
        let t = [1.5, -2.0, 0.25];
        let pts: Vec<Point> = (0..50).map(|i| [i as f64 * 0.2, 5.0 - i as f64 * 0.1, 3.0]).collect();
        let moved: Vec<Point> = pts.iter().map(|&p| add(mat_vec(&r, p), t)).collect();
        let a = point_mesh_distance(&pts, &mesh).unwrap();
        let b = point_mesh_distance(&moved, &mesh.transformed(&r, t)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn text_formats() {
        let cube = cube_mesh([0.0; 3], 1.0);
        assert!(cube.is_watertight());
        let off = mesh_to_string(&cube, MeshFormat::Off);
        assert!(off.starts_with("OFF\n8 12 0\n"));
        assert_eq!(off.lines().count(), 2 + 8 + 12);
        let obj = mesh_to_string(&cube, MeshFormat::Obj);
        assert_eq!(obj.lines().filter(|l| l.starts_with("v ")).count(), 8);
        assert_eq!(obj.lines().filter(|l| l.starts_with("f ")).count(), 12);
        for fmt in [MeshFormat::Off, MeshFormat::Obj] {
            let m = random_mesh(9, 10);
            let back = parse_mesh(&mesh_to_string(&m, fmt), fmt).unwrap();
            assert_eq!(back.faces, m.faces);
            for (a, b) in back.vertices.iter().zip(&m.vertices) {
                for k in 0..3 {
                    assert_eq!(a[k] as f32, b[k] as f32);
                }
            }
            let empty = mesh_to_string(&TriangleMesh::default(), fmt);
            assert!(parse_mesh(&empty, fmt).unwrap().is_empty());
        }
        assert_eq!(mesh_to_string(&TriangleMesh::default(), MeshFormat::Off), "OFF\n0 0 0\n");
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m/cube.obj");
        export_mesh(&cube_mesh([1.0; 3], 2.0), &p, MeshFormat::Obj).unwrap();
        assert_eq!(load_mesh(&p).unwrap().faces.len(), 12);
    }
}
