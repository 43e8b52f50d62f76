//! Render a shape from a ring camera, carve free space along the rays and
//! fuse several views into one observation.

use shapecomp::grid::{fill_interior, supervision_fraction, GridDims, VoxelState};
use shapecomp::synth::{fuse_observations, generate_primitive_shape, observation_from_depth, perturb_depth, render_depth, voxelize_mesh, Camera, NoiseParams, ShapeFamily};

fn main() -> shapecomp::Result<()> {
    let dims = GridDims::cube(16)?;
    let mesh = generate_primitive_shape(ShapeFamily::ChairLike, 5);
    let filled = fill_interior(&voxelize_mesh(&mesh, dims)?);
    println!("chair: {} faces, {} filled voxels", mesh.faces.len(), filled.count());

    let mut views = Vec::new();
    for (v, azimuth) in [0.0f64, 2.1, 4.2].into_iter().enumerate() {
        let cam = Camera::on_ring(dims, azimuth, 32)?;
        let clean = render_depth(&filled, &cam)?;
        let noisy = perturb_depth(&clean, NoiseParams::default(), v as u64);
        let x = observation_from_depth(&clean, &cam, dims, false);
        println!(
            "view {v}: {} returns ({} after noise), {} occupied, {} free, observed {:.3}",
            clean.returns(),
            noisy.returns(),
            x.count(VoxelState::Occupied),
            x.count(VoxelState::Free),
            supervision_fraction(&x)
        );
        views.push(x);
    }
    let fused = fuse_observations(&views)?;
    println!("fused: observed {:.3}", supervision_fraction(&fused));
    Ok(())
}
