//! The comparison methods on one dataset: per-instance latent optimization,
//! ICP retrieval, the mean shape and the prior applied to raw observations.

use shapecomp::baselines::{mean_baseline, ml_baseline_batch, naive_baseline, MlConfig};
use shapecomp::dataset::{build_dataset, Dataset, Split, SynthConfig};
use shapecomp::eval::iou;
use shapecomp::grid::{free_space_weights, GridDims, Observation};
use shapecomp::icp::{icp_baseline, icp_prediction, IcpReference};
use shapecomp::nn::AdamConfig;
use shapecomp::prior::{train_prior, PriorConfig};

fn main() -> shapecomp::Result<()> {
    let dir = tempfile::tempdir().expect("temp dir");
    let cfg = SynthConfig { dims: GridDims::cube(16)?, shapes_prior: 30, shapes_train: 0, shapes_test: 4, views: 2, ..Default::default() };
    build_dataset(&cfg, dir.path(), 6)?;
    let ds = Dataset::open(dir.path())?;
    let refs = ds.shapes(Split::PriorTrain)?;
    let recs: Vec<_> = ds.manifest().first_views(Split::Test).into_iter().cloned().collect();
    let xs: Vec<Observation> = recs.iter().map(|r| ds.observation(r)).collect::<Result<_, _>>()?;
    let truth: Vec<_> = recs.iter().map(|r| ds.shape(r.shape_id)).collect::<Result<_, _>>()?;
    let score = |name: &str, preds: Vec<shapecomp::grid::OccupancyGrid>| {
        let m: f64 = preds.iter().zip(&truth).map(|(p, y)| iou(p, &y.occupancy).unwrap_or(0.0)).sum::<f64>() / preds.len() as f64;
        println!("{name:<6} IoU {m:.3}");
    };

    let mean = mean_baseline(&refs)?;
    score("mean", vec![mean.occupancy; xs.len()]);

    let references: Vec<IcpReference> = refs.iter().enumerate().map(|(i, s)| IcpReference::from_shape(s.clone(), 500, i as u64)).collect::<Result<_, _>>()?;
    let mut icp = Vec::new();
    for x in &xs {
        let m = icp_baseline(x, &references)?;
        println!("  ICP picked reference {} (residual {:.3}, {:.1} deg)", m.index, m.residual, m.transform.angle_degrees());
        icp.push(icp_prediction(&references[m.index].shape, &m.transform, cfg.dims).0);
    }
    score("icp", icp);

    let pcfg = PriorConfig { epochs: 10, adam: AdamConfig { lr: 2e-3, ..AdamConfig::default() }, ..PriorConfig::default() };
    let (mut prior, _) = train_prior(&refs, &pcfg, 1)?;
    let naive = xs.iter().map(|x| naive_baseline(x, &mut prior).map(|c| c.occupancy)).collect::<Result<_, _>>()?;
    score("naive", naive);

    let kappa = free_space_weights(&refs.iter().map(|s| s.occupancy.clone()).collect::<Vec<_>>())?;
    let results = ml_baseline_batch(&xs, &kappa, &mut prior.decoder, &MlConfig { iterations: 200, ..MlConfig::default() })?;
    for r in &results {
        println!("  ML loss {:.1} -> {:.1}", r.trace[0], r.loss);
    }
    score("ml", results.into_iter().map(|r| r.output.occupancy()).collect());
    Ok(())
}
