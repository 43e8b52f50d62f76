//! Train a small denoising VAE shape prior on generated shapes, then
//! reconstruct a held-out shape and decode random latent codes.

use shapecomp::dataset::{build_dataset, Dataset, Split, SynthConfig};
use shapecomp::eval::iou;
use shapecomp::grid::GridDims;
use shapecomp::nn::AdamConfig;
use shapecomp::prior::{reconstruct, sample_prior, train_prior, PriorConfig};

fn main() -> shapecomp::Result<()> {
    let dir = tempfile::tempdir().expect("temp dir");
    let cfg = SynthConfig { dims: GridDims::cube(16)?, shapes_prior: 40, shapes_train: 0, shapes_test: 4, views: 1, ..Default::default() };
    build_dataset(&cfg, dir.path(), 1)?;
    let ds = Dataset::open(dir.path())?;
    let shapes = ds.shapes(Split::PriorTrain)?;

    let pcfg = PriorConfig { epochs: 15, adam: AdamConfig { lr: 2e-3, ..AdamConfig::default() }, ..PriorConfig::default() };
    let (mut prior, log) = train_prior(&shapes, &pcfg, 7)?;
    for (epoch, loss) in log.epoch_means().iter().step_by(3) {
        println!("epoch {epoch:>2}: mean loss {loss:.1}");
    }

    for y in ds.shapes(Split::Test)? {
        let out = reconstruct(&y, &mut prior.encoder, &mut prior.decoder)?;
        println!("held-out reconstruction IoU {:.3}", iou(&out.occupancy(), &y.occupancy)?);
    }
    for (i, s) in sample_prior(3, &mut prior.decoder, cfg.dims, 5)?.iter().enumerate() {
        println!("sample {i}: {} occupied voxels", s.occupancy().count());
    }
    Ok(())
}
