//! Distance transform, marching cubes, mesh export and point-to-mesh
//! distances on a voxelized ellipsoid union.

use shapecomp::grid::{fill_interior, log_tsdf, signed_distance_transform, GridDims};
use shapecomp::mesh::{marching_cubes, mesh_to_string, point_mesh_distance, sample_surface, MeshFormat};
use shapecomp::synth::{generate_primitive_shape, voxelize_mesh, ShapeFamily};

fn main() -> shapecomp::Result<()> {
    let dims = GridDims::cube(20)?;
    let source = generate_primitive_shape(ShapeFamily::EllipsoidUnion, 11);
    let filled = fill_interior(&voxelize_mesh(&source, dims)?);
    let sdf = signed_distance_transform(&filled)?;
    let lt = log_tsdf(&sdf);
    let (lo, hi) = sdf.values().iter().fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    println!("{} filled voxels, SDF in [{lo}, {hi}], logTSDF max {:.3}", filled.count(), lt.values().iter().cloned().fold(0.0f32, f32::max));

    let mesh = marching_cubes(&sdf, 0.0);
    println!("marching cubes: {} vertices, {} faces, watertight {}, area {:.1}", mesh.vertices.len(), mesh.faces.len(), mesh.is_watertight(), mesh.area());

    let pts = sample_surface(&source, 2000, 3)?;
    let d = point_mesh_distance(&pts, &mesh)?;
    println!("source surface to extracted mesh: mean {:.3}, max {:.3} voxels", d.iter().sum::<f64>() / d.len() as f64, d.iter().cloned().fold(0.0, f64::max));

    let obj = mesh_to_string(&mesh, MeshFormat::Obj);
    println!("OBJ export: {} lines", obj.lines().count());
    Ok(())
}
