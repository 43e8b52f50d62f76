//! Command implementations behind the `shapecomp` binary. Each command reads
//! a [`RunConfig`], writes into one output directory and snapshots the
//! effective configuration there as `config.txt`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::aml::{complete_batch, continue_aml, init_aml, Completion};
use crate::baselines::{continue_supervised, mean_baseline, ml_baseline_batch, naive_baseline};
use crate::config::RunConfig;
use crate::dataset::{build_dataset, Dataset, SampleRecord, Split};
use crate::error::{Error, Result};
use crate::eval::{pretty_table, summary_table, timing_table, EvalItem, MetricReport};
use crate::grid::{free_space_weights, Observation, OccupancyGrid, SdfGrid, WeightGrid};
use crate::icp::{icp_baseline, icp_prediction, IcpReference};
use crate::mesh::{export_mesh, marching_cubes, MeshFormat};
use crate::model::ShapeSample;
use crate::nn::{Checkpoint, Network};
use crate::prior::{continue_prior, init_prior, reconstruct, ShapeModel, TrainLog};
use crate::seed::derive_seed;
use crate::voxg::VoxgCodec;

pub const CONFIG_FILE: &str = "config.txt";
pub const MODEL_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "train.log";
pub const AUDIT_FILE: &str = "audit.txt";
pub const PREDICTIONS_FILE: &str = "predictions.tsv";
/// Wall times live apart from the predictions so reruns match byte for byte.
pub const PRED_TIMING_FILE: &str = "pred_timing.tsv";
const PREDICTIONS_HEADER: &str = "shape_id\tview_id\tocc\tsdf\tmesh";
const PRED_TIMING_HEADER: &str = "shape_id\tview_id\tseconds";

/// Observations completed per forward pass.
const CHUNK: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Synth,
    TrainPrior,
    TrainAml,
    TrainSup,
    Complete,
    Baseline,
    Eval,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::TrainPrior => "train-prior",
            Command::TrainAml => "train-aml",
            Command::TrainSup => "train-sup",
            Command::Complete => "complete",
            Command::Baseline => "baseline",
            Command::Eval => "eval",
        }
    }
}

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::MissingInput(_) => 3,
        Error::Divergence { .. } => 4,
        Error::Io { .. } | Error::Format { .. } | Error::OutputExists(_) => 5,
        _ => 2,
    }
}

/// Creates `out`, refusing to reuse a non-empty directory unless `force`.
pub fn prepare_output(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        let non_empty = fs::read_dir(out).map_err(|e| Error::io(out, e))?.next().is_some();
        if non_empty && !force {
            return Err(Error::OutputExists(out.to_path_buf()));
        }
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingInput(path.to_path_buf()),
        _ => Error::io(path, e),
    })
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::Config(format!("{key} is not set")))
}

fn open_data(cfg: &RunConfig) -> Result<Dataset> {
    Dataset::open(required(&cfg.data, "data")?)
}

fn load_model(path: &Path, kinds: &[&str]) -> Result<(String, ShapeModel)> {
    let ck = Checkpoint::load(path)?;
    let kind = ck.meta.get("kind").cloned().unwrap_or_default();
    if !kinds.contains(&kind.as_str()) {
        return Err(Error::Config(format!("{} holds a {kind:?} model, expected one of {kinds:?}", path.display())));
    }
    Ok((kind, ShapeModel::from_checkpoint(ck)?))
}

/// SHA-256 of a network's parameters and buffers, hex encoded.
pub fn network_hash(net: &Network<f32>) -> String {
    let mut h = Sha256::new();
    for (name, t) in net.named_params().into_iter().chain(net.named_buffers()) {
        h.update(name.as_bytes());
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Dispatches one command. `out` must already be prepared.
pub fn run(cmd: Command, cfg: &RunConfig, out: &Path) -> Result<()> {
    match cmd {
        Command::Synth => synth(cfg, out),
        Command::TrainPrior => train_prior(cfg, out),
        Command::TrainAml => train_aml(cfg, out),
        Command::TrainSup => train_sup(cfg, out),
        Command::Complete => complete(cfg, out),
        Command::Baseline => baseline(cfg, out),
        Command::Eval => eval(cfg, out),
    }?;
    write_text(&out.join(CONFIG_FILE), &cfg.to_text())
}

pub fn synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let scfg = cfg.synth()?;
    let m = build_dataset(&scfg, out, cfg.seed)?;
    let ds = Dataset::open(out)?;
    println!("{} records over {} shapes at {}", m.records.len(), scfg.total_shapes(), scfg.dims);
    if scfg.shapes_train > 0 {
        println!("observed fraction (inference-train): {:.4}", ds.mean_supervision_fraction(Split::InferenceTrain)?);
    }
    Ok(())
}

/// Loads the resume checkpoint and the log written next to it.
fn resume_from(cfg: &RunConfig, kind: &str) -> Result<Option<(ShapeModel, TrainLog)>> {
    let Some(path) = &cfg.resume else { return Ok(None) };
    let (_, model) = load_model(path, &[kind])?;
    let log_path = path.with_file_name(LOG_FILE);
    let log = if log_path.exists() { TrainLog::parse(&read_text(&log_path)?)? } else { TrainLog::default() };
    Ok(Some((model, log)))
}

fn save_training(out: &Path, kind: &str, model: &ShapeModel, log: &TrainLog) -> Result<()> {
    model.to_checkpoint(kind).save(&out.join(MODEL_FILE))?;
    write_text(&out.join(LOG_FILE), &log.to_text())?;
    if let Some(last) = log.entries.last() {
        println!("{kind}: {} epochs, {} steps, final loss {:.4}", model.epochs, last.step, last.total);
    }
    Ok(())
}

/// Epochs still to run so that the model reaches `target` in total.
fn remaining(model: &ShapeModel, target: usize) -> usize {
    target.saturating_sub(model.epochs)
}

pub fn train_prior(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = open_data(cfg)?;
    let shapes = ds.shapes(Split::PriorTrain)?;
    let pcfg = cfg.prior_config()?;
    let (mut model, mut log) = match resume_from(cfg, "prior")? {
        Some(r) => r,
        None => {
            let first = shapes.first().ok_or_else(|| Error::InvalidInput("no prior-train shapes".into()))?;
            (init_prior(first.dims(), &pcfg, cfg.seed)?, TrainLog::default())
        }
    };
    let run_cfg = crate::prior::PriorConfig { epochs: remaining(&model, pcfg.epochs), ..pcfg };
    log.append(continue_prior(&mut model, &shapes, &run_cfg, cfg.seed)?);
    save_training(out, "prior", &model, &log)
}

fn training_records(ds: &Dataset, cfg: &RunConfig) -> Vec<SampleRecord> {
    ds.manifest()
        .records_in(Split::InferenceTrain)
        .filter(|r| cfg.train_views == 0 || r.view_id < cfg.train_views)
        .cloned()
        .collect()
}

fn prior_kappa(ds: &Dataset) -> Result<WeightGrid> {
    let refs: Vec<OccupancyGrid> = ds.shapes(Split::PriorTrain)?.into_iter().map(|s| s.occupancy).collect();
    free_space_weights(&refs)
}

pub fn train_aml(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = open_data(cfg)?;
    let acfg = cfg.aml_config()?;
    let kappa = prior_kappa(&ds)?;
    let recs = training_records(&ds, cfg);
    let xs: Vec<Observation> = recs.iter().map(|r| ds.observation(r)).collect::<Result<_>>()?;
    let (mut model, mut log) = match resume_from(cfg, "aml")? {
        Some(r) => r,
        None => {
            let (_, prior) = load_model(required(&cfg.prior, "prior")?, &["prior"])?;
            let m = init_aml(&prior.decoder, ds.manifest().dims, &cfg.widths, cfg.convs_per_stage, cfg.seed, &acfg)?;
            (m, TrainLog::default())
        }
    };
    let before = network_hash(&model.decoder);
    let run_cfg = crate::aml::AmlConfig { epochs: remaining(&model, acfg.epochs), ..acfg };
    log.append(continue_aml(&mut model, &xs, &kappa, &run_cfg, cfg.seed)?);
    let after = network_hash(&model.decoder);

    let touched = ds.ground_truth_touched(Split::InferenceTrain);
    let mut audit = String::new();
    let _ = writeln!(audit, "observations\t{}", xs.len());
    let _ = writeln!(audit, "decoder_sha256_before\t{before}");
    let _ = writeln!(audit, "decoder_sha256_after\t{after}");
    let _ = writeln!(audit, "inference_train_ground_truth_reads\t{}", touched.len());
    for split in Split::ALL {
        let n = ds.accesses().iter().filter(|a| a.split == split && a.ground_truth).count();
        let _ = writeln!(audit, "ground_truth_reads[{split}]\t{n}");
    }
    write_text(&out.join(AUDIT_FILE), &audit)?;
    if !touched.is_empty() {
        return Err(Error::InvalidInput(format!("AML training read inference-train ground truth: {}", touched[0])));
    }
    if before != after {
        return Err(Error::InvalidInput("the prior decoder changed during AML training".into()));
    }
    save_training(out, "aml", &model, &log)
}

pub fn train_sup(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = open_data(cfg)?;
    let pcfg = cfg.sup_config()?;
    let recs = training_records(&ds, cfg);
    let xs: Vec<Observation> = recs.iter().map(|r| ds.observation(r)).collect::<Result<_>>()?;
    let mut cache: std::collections::BTreeMap<usize, ShapeSample> = Default::default();
    let mut targets = Vec::with_capacity(recs.len());
    for r in &recs {
        if !cache.contains_key(&r.shape_id) {
            cache.insert(r.shape_id, ds.shape(r.shape_id)?);
        }
        targets.push(cache[&r.shape_id].clone());
    }
    let (mut model, mut log) = match resume_from(cfg, "sup")? {
        Some(r) => r,
        None => {
            let init = init_prior(ds.manifest().dims, &pcfg, cfg.seed)?;
            (init, TrainLog::default())
        }
    };
    let run_cfg = crate::prior::PriorConfig { epochs: remaining(&model, pcfg.epochs), ..pcfg };
    log.append(continue_supervised(&mut model, &xs, &targets, &run_cfg, cfg.seed)?);
    save_training(out, "sup", &model, &log)
}

/// One prediction on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRecord {
    pub shape_id: usize,
    pub view_id: usize,
    pub occ: String,
    pub sdf: String,
    pub mesh: String,
    /// Wall time, from the timing file; zero when it is absent.
    pub seconds: f64,
}

/// Predictions of one method on one split, as listed in `predictions.tsv`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    pub method: String,
    pub split: Split,
    pub records: Vec<PredictionRecord>,
}

impl PredictionSet {
    pub fn to_text(&self) -> String {
        let mut s = format!("#method {}\n#split {}\n{PREDICTIONS_HEADER}\n", self.method, self.split);
        for r in &self.records {
            let _ = writeln!(s, "{}\t{}\t{}\t{}\t{}", r.shape_id, r.view_id, r.occ, r.sdf, r.mesh);
        }
        s
    }

    pub fn timing_text(&self) -> String {
        let mut s = format!("{PRED_TIMING_HEADER}\n");
        for r in &self.records {
            let _ = writeln!(s, "{}\t{}\t{:.6e}", r.shape_id, r.view_id, r.seconds);
        }
        s
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let bad = |d: String| Error::format(origin, d);
        let mut lines = text.lines();
        let mut header = |key: &str| {
            lines
                .next()
                .and_then(|l| l.strip_prefix(&format!("#{key} ")).map(str::to_string))
                .ok_or_else(|| bad(format!("missing #{key} header")))
        };
        let method = header("method")?;
        let split = header("split")?.parse().map_err(|e: Error| bad(e.to_string()))?;
        if lines.next() != Some(PREDICTIONS_HEADER) {
            return Err(bad("missing column header".into()));
        }
        let mut records = Vec::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(bad(format!("expected 5 columns: {line:?}")));
            }
            let int = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad integer {s:?}")));
            records.push(PredictionRecord {
                shape_id: int(f[0])?,
                view_id: int(f[1])?,
                occ: f[2].into(),
                sdf: f[3].into(),
                mesh: f[4].into(),
                seconds: 0.0,
            });
        }
        Ok(PredictionSet { method, split, records })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(PREDICTIONS_FILE);
        let mut set = Self::parse(&read_text(&path)?, &path)?;
        let tpath = dir.join(PRED_TIMING_FILE);
        if tpath.exists() {
            let text = read_text(&tpath)?;
            let mut times = std::collections::HashMap::new();
            for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
                let f: Vec<&str> = line.split('\t').collect();
                let parsed = (f.len() == 3).then(|| Some((f[0].parse::<usize>().ok()?, f[1].parse::<usize>().ok()?, f[2].parse::<f64>().ok()?))).flatten();
                let (a, b, t) = parsed.ok_or_else(|| Error::format(&tpath, format!("bad timing row {line:?}")))?;
                times.insert((a, b), t);
            }
            for r in &mut set.records {
                r.seconds = times.get(&(r.shape_id, r.view_id)).copied().unwrap_or(0.0);
            }
        }
        Ok(set)
    }
}

fn write_predictions(out: &Path, method: &str, split: Split, items: Vec<(&SampleRecord, OccupancyGrid, SdfGrid, f64)>) -> Result<PredictionSet> {
    let dir = out.join("pred");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut records = Vec::with_capacity(items.len());
    for (r, occ, sdf, seconds) in items {
        let base = format!("pred/{:05}_{:02}", r.shape_id, r.view_id);
        let rec = PredictionRecord {
            shape_id: r.shape_id,
            view_id: r.view_id,
            occ: format!("{base}.occ.voxg"),
            sdf: format!("{base}.sdf.voxg"),
            mesh: format!("{base}.obj"),
            seconds,
        };
        occ.save(&out.join(&rec.occ))?;
        sdf.save(&out.join(&rec.sdf))?;
        export_mesh(&marching_cubes(&sdf, 0.0), &out.join(&rec.mesh), MeshFormat::Obj)?;
        records.push(rec);
    }
    let set = PredictionSet { method: method.into(), split, records };
    write_text(&out.join(PREDICTIONS_FILE), &set.to_text())?;
    write_text(&out.join(PRED_TIMING_FILE), &set.timing_text())?;
    println!("{method}: {} predictions on {split}", set.records.len());
    Ok(set)
}

fn split_records(ds: &Dataset, cfg: &RunConfig) -> Result<(Split, Vec<SampleRecord>)> {
    let split: Split = cfg.split.parse().map_err(|e: Error| Error::Config(e.to_string()))?;
    let recs: Vec<SampleRecord> = ds.manifest().records_in(split).cloned().collect();
    if recs.is_empty() {
        return Err(Error::InvalidInput(format!("split {split} has no records")));
    }
    Ok((split, recs))
}

/// Runs `f` over `CHUNK`-sized slices and spreads each slice's wall time
/// evenly over its samples.
fn timed_chunks<T>(xs: &[Observation], mut f: impl FnMut(&[Observation]) -> Result<Vec<T>>) -> Result<Vec<(T, f64)>> {
    let mut out = Vec::with_capacity(xs.len());
    for chunk in xs.chunks(CHUNK) {
        let t = Instant::now();
        let res = f(chunk)?;
        let per = t.elapsed().as_secs_f64() / chunk.len() as f64;
        out.extend(res.into_iter().map(|r| (r, per)));
    }
    Ok(out)
}

pub fn complete(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = open_data(cfg)?;
    let (kind, mut model) = load_model(required(&cfg.model, "model")?, &["aml", "sup"])?;
    let (split, recs) = split_records(&ds, cfg)?;
    let xs: Vec<Observation> = recs.iter().map(|r| ds.observation(r)).collect::<Result<_>>()?;
    let done = timed_chunks(&xs, |c| complete_batch(c, &mut model.encoder, &mut model.decoder))?;
    let items = recs.iter().zip(done).map(|(r, (c, s))| (r, c.occupancy, c.sdf, s)).collect();
    write_predictions(out, &kind, split, items)?;
    Ok(())
}

pub fn baseline(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = open_data(cfg)?;
    let (split, recs) = split_records(&ds, cfg)?;
    let xs: Vec<Observation> = recs.iter().map(|r| ds.observation(r)).collect::<Result<_>>()?;
    let method = cfg.method.as_str();
    let results: Vec<(OccupancyGrid, SdfGrid, f64)> = match method {
        "mean" => {
            let t = Instant::now();
            let m = mean_baseline(&ds.shapes(Split::PriorTrain)?)?;
            let per = t.elapsed().as_secs_f64() / xs.len() as f64;
            xs.iter().map(|_| (m.occupancy.clone(), m.sdf.clone(), per)).collect()
        }
        "naive" => {
            let (_, mut prior) = load_model(required(&cfg.prior, "prior")?, &["prior"])?;
            xs.iter()
                .map(|x| {
                    let t = Instant::now();
                    let c = naive_baseline(x, &mut prior)?;
                    Ok((c.occupancy, c.sdf, t.elapsed().as_secs_f64()))
                })
                .collect::<Result<_>>()?
        }
        "dvae" => {
            // Upper bound: the prior reconstructing the true shape.
            let (_, mut prior) = load_model(required(&cfg.prior, "prior")?, &["prior"])?;
            recs.iter()
                .map(|r| {
                    let y = ds.shape(r.shape_id)?;
                    let t = Instant::now();
                    let c = Completion::from_output(reconstruct(&y, &mut prior.encoder, &mut prior.decoder)?);
                    Ok((c.occupancy, c.sdf, t.elapsed().as_secs_f64()))
                })
                .collect::<Result<_>>()?
        }
        "ml" => {
            let (_, mut prior) = load_model(required(&cfg.prior, "prior")?, &["prior"])?;
            let kappa = prior_kappa(&ds)?;
            let mcfg = cfg.ml_config()?;
            timed_chunks(&xs, |c| ml_baseline_batch(c, &kappa, &mut prior.decoder, &mcfg))?
                .into_iter()
                .map(|(r, s)| {
                    let c = Completion::from_output(r.output);
                    (c.occupancy, c.sdf, s)
                })
                .collect()
        }
        "icp" => {
            let refs: Vec<IcpReference> = ds
                .shapes(Split::PriorTrain)?
                .into_par_iter()
                .enumerate()
                .map(|(i, s)| IcpReference::from_shape(s, cfg.icp_points, derive_seed(cfg.seed, &[7, i as u64])))
                .collect::<Result<_>>()?;
            let dims = ds.manifest().dims;
            xs.par_iter()
                .map(|x| {
                    let t = Instant::now();
                    let m = icp_baseline(x, &refs)?;
                    let (occ, sdf) = icp_prediction(&refs[m.index].shape, &m.transform, dims);
                    Ok((occ, sdf, t.elapsed().as_secs_f64()))
                })
                .collect::<Result<_>>()?
        }
        other => return Err(Error::Config(format!("unknown baseline method {other:?}"))),
    };
    let items = recs.iter().zip(results).map(|(r, (o, s, t))| (r, o, s, t)).collect();
    write_predictions(out, method, split, items)?;
    Ok(())
}

/// Reports `ham`, `iou`, `acc` and `comp` for each prediction directory.
pub fn evaluate_predictions(ds: &Dataset, set: &PredictionSet, dir: &Path, dataset_name: &str, cfg: &RunConfig) -> Result<MetricReport> {
    let mut gt = std::collections::BTreeMap::new();
    let mut preds = Vec::with_capacity(set.records.len());
    for r in &set.records {
        if !gt.contains_key(&r.shape_id) {
            gt.insert(r.shape_id, (ds.shape(r.shape_id)?.occupancy, ds.sdf(r.shape_id)?));
        }
        preds.push((OccupancyGrid::load(&dir.join(&r.occ))?, SdfGrid::load(&dir.join(&r.sdf))?));
    }
    let items: Vec<EvalItem<'_>> = set
        .records
        .iter()
        .zip(&preds)
        .map(|(r, (po, ps))| {
            let (go, gs) = &gt[&r.shape_id];
            EvalItem {
                sample: format!("{:05}_{:02}", r.shape_id, r.view_id),
                pred_occupancy: po,
                pred_sdf: ps,
                gt_occupancy: go,
                gt_sdf: gs,
                seconds: r.seconds,
            }
        })
        .collect();
    MetricReport::evaluate(&set.method, dataset_name, &items, cfg.surface_samples, derive_seed(cfg.seed, &[11]))
}

pub fn eval(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = open_data(cfg)?;
    if cfg.predictions.is_empty() {
        return Err(Error::Config("predictions is not set".into()));
    }
    let name = cfg.data.as_ref().and_then(|p| p.file_name()).map_or("data".into(), |n| n.to_string_lossy().into_owned());
    let mut reports = Vec::new();
    for dir in &cfg.predictions {
        let set = PredictionSet::load(dir)?;
        reports.push(evaluate_predictions(&ds, &set, dir, &name, cfg)?);
    }
    let mut per_sample = String::from(MetricReport::HEADER);
    per_sample.push('\n');
    let mut timing = String::from(MetricReport::TIMING_HEADER);
    timing.push('\n');
    for r in &reports {
        per_sample.extend(r.to_tsv().lines().skip(1).map(|l| format!("{l}\n")));
        timing.extend(r.timing_tsv().lines().skip(1).map(|l| format!("{l}\n")));
    }
    write_text(&out.join("report.tsv"), &per_sample)?;
    write_text(&out.join("summary.tsv"), &summary_table(&reports))?;
    write_text(&out.join("timing.tsv"), &timing)?;
    write_text(&out.join("timing_summary.tsv"), &timing_table(&reports))?;
    print!("{}", pretty_table(&reports));
    Ok(())
}
