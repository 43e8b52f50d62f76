//! The weakly-supervised pipeline end to end: prior on complete shapes,
//! encoder trained on partial observations against the frozen decoder,
//! then amortized completion of held-out observations.

use std::time::Instant;

use shapecomp::aml::{complete_batch, train_aml, AmlConfig};
use shapecomp::dataset::{build_dataset, Dataset, Split, SynthConfig};
use shapecomp::eval::iou;
use shapecomp::grid::{free_space_weights, GridDims, Observation, OccupancyGrid};
use shapecomp::nn::AdamConfig;
use shapecomp::prior::{train_prior, PriorConfig};

fn main() -> shapecomp::Result<()> {
    let dir = tempfile::tempdir().expect("temp dir");
    let cfg = SynthConfig { dims: GridDims::cube(16)?, shapes_prior: 40, shapes_train: 30, shapes_test: 5, views: 4, ..Default::default() };
    build_dataset(&cfg, dir.path(), 2)?;
    let ds = Dataset::open(dir.path())?;
    println!("observed fraction: {:.3}", ds.mean_supervision_fraction(Split::InferenceTrain)?);

    let shapes = ds.shapes(Split::PriorTrain)?;
    let pcfg = PriorConfig { epochs: 15, adam: AdamConfig { lr: 2e-3, ..AdamConfig::default() }, ..PriorConfig::default() };
    let (prior, _) = train_prior(&shapes, &pcfg, 3)?;

    // weights for free-space evidence come from the reference shapes only
    let kappa = free_space_weights(&shapes.iter().map(|s| s.occupancy.clone()).collect::<Vec<OccupancyGrid>>())?;
    ds.clear_accesses();
    let xs: Vec<Observation> = ds.manifest().records_in(Split::InferenceTrain).map(|r| ds.observation(r)).collect::<Result<_, _>>()?;
    let acfg = AmlConfig { epochs: 5, ..AmlConfig::default() };
    let (mut model, log) = train_aml(&xs, &kappa, &prior, &acfg, 4)?;
    println!("AML loss {:.1} -> {:.1}; inference ground truth read: {}", log.first_total().unwrap_or(0.0), log.last_total().unwrap_or(0.0), ds.ground_truth_touched(Split::InferenceTrain).len());

    let recs: Vec<_> = ds.manifest().first_views(Split::Test).into_iter().cloned().collect();
    let test: Vec<Observation> = recs.iter().map(|r| ds.observation(r)).collect::<Result<_, _>>()?;
    let t = Instant::now();
    let done = complete_batch(&test, &mut model.encoder, &mut model.decoder)?;
    println!("{} completions in {:.1} ms", done.len(), t.elapsed().as_secs_f64() * 1e3);
    for (r, c) in recs.iter().zip(&done) {
        println!("shape {} ({}): IoU {:.3}", r.shape_id, r.family, iou(&c.occupancy, &ds.shape(r.shape_id)?.occupancy)?);
    }
    Ok(())
}
