//! Score predictions with Ham, IoU, Acc and Comp and print report tables.

use shapecomp::eval::{pretty_table, summary_table, EvalItem, MetricReport};
use shapecomp::grid::{occupancy_from_sdf, GridDims, SdfGrid};

fn sphere(n: usize, r: f64, shift: f64) -> SdfGrid {
    let c = n as f64 / 2.0;
    SdfGrid::from_fn(GridDims::cube(n).unwrap(), |p| ((p[0] - c - shift).powi(2) + (p[1] - c).powi(2) + (p[2] - c).powi(2)).sqrt() - r)
}

fn main() -> shapecomp::Result<()> {
    let gt_sdf = sphere(16, 5.0, 0.0);
    let gt = occupancy_from_sdf(&gt_sdf);
    let mut reports = Vec::new();
    for (name, r, shift) in [("exact", 5.0, 0.0), ("smaller", 4.0, 0.0), ("shifted", 5.0, 1.5)] {
        let sdf = sphere(16, r, shift);
        let occ = occupancy_from_sdf(&sdf);
        let item = EvalItem { sample: "0".into(), pred_occupancy: &occ, pred_sdf: &sdf, gt_occupancy: &gt, gt_sdf: &gt_sdf, seconds: 0.0 };
        reports.push(MetricReport::evaluate(name, "spheres", &[item], 5000, 1)?);
    }
    print!("{}", pretty_table(&reports));
    println!();
    print!("{}", summary_table(&reports));
    Ok(())
}
