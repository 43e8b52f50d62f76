//! Dataset assembly on disk: per-shape ground truth, per-view observations,
//! a tab-separated manifest, and an audited reader that records every file
//! it opens.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{
    fill_interior, log_tsdf, signed_distance_transform, supervision_fraction, GridDims, LogTsdfGrid, Observation,
    OccupancyGrid, SdfGrid,
};
use crate::model::ShapeSample;
use crate::seed::derive_seed;
use crate::synth::{
    fuse_observations, generate_primitive_shape, observation_from_depth, perturb_depth, render_depth, voxelize_mesh,
    Camera, NoiseParams, ShapeFamily,
};
use crate::voxg::VoxgCodec;

pub const MANIFEST_FILE: &str = "manifest.tsv";
const MANIFEST_MAGIC: &str = "#shapecomp-manifest 1";
const COLUMNS: [&str; 10] =
    ["shape_id", "pose_id", "view_id", "split", "family", "views", "occ", "sdf", "logtsdf", "observation"];

// seed-derivation tags
const TAG_FAMILY: u64 = 1;
const TAG_MESH: u64 = 2;
const TAG_VIEW: u64 = 3;
const TAG_NOISE: u64 = 4;
const TAG_FUSE: u64 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    /// Reference shapes for the prior.
    PriorTrain,
    /// Observations for weakly-supervised training; their shapes stay hidden.
    InferenceTrain,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::PriorTrain, Split::InferenceTrain, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::PriorTrain => "prior-train",
            Split::InferenceTrain => "inference-train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Split::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| Error::InvalidInput(format!("unknown split {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub dims: GridDims,
    /// Restrict generation to one family; `None` mixes all four.
    pub family: Option<ShapeFamily>,
    pub shapes_prior: usize,
    pub shapes_train: usize,
    pub shapes_test: usize,
    pub views: usize,
    pub noise: bool,
    pub noise_params: NoiseParams,
    /// Views fused into each observation record.
    pub fuse_k: usize,
    /// Treat rays without a return as free space.
    pub carve_misses: bool,
    /// Depth image side length in pixels; 0 picks twice the largest extent.
    pub image: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            dims: GridDims::cube(16).expect("valid"),
            family: None,
            shapes_prior: 200,
            shapes_train: 200,
            shapes_test: 20,
            views: 10,
            noise: false,
            noise_params: NoiseParams::default(),
            fuse_k: 1,
            carve_misses: false,
            image: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shapes_prior == 0 || self.shapes_train + self.shapes_test == 0 {
            return Err(Error::Config("need prior shapes and at least one inference or test shape".into()));
        }
        if self.views == 0 || self.fuse_k == 0 || self.fuse_k > self.views {
            return Err(Error::Config(format!("need 1 <= fuse_k ({}) <= views ({})", self.fuse_k, self.views)));
        }
        NoiseParams::new(self.noise_params.exp_rate, self.noise_params.drop_prob).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn image_size(&self) -> usize {
        if self.image == 0 {
            2 * self.dims.max_extent()
        } else {
            self.image
        }
    }

    pub fn total_shapes(&self) -> usize {
        self.shapes_prior + self.shapes_train + self.shapes_test
    }

    /// Shape ids are assigned in split order, so splits never share ids.
    pub fn split_of(&self, shape_id: usize) -> Split {
        if shape_id < self.shapes_prior {
            Split::PriorTrain
        } else if shape_id < self.shapes_prior + self.shapes_train {
            Split::InferenceTrain
        } else {
            Split::Test
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleRecord {
    pub shape_id: usize,
    pub pose_id: usize,
    pub view_id: usize,
    pub split: Split,
    pub family: ShapeFamily,
    /// View ids fused into this observation.
    pub views: Vec<usize>,
    pub occ: String,
    pub sdf: String,
    pub log_tsdf: String,
    pub observation: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub seed: u64,
    pub dims: GridDims,
    pub records: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Distinct shape ids of a split, ascending.
    pub fn shape_ids(&self, split: Split) -> Vec<usize> {
        self.records_in(split).map(|r| r.shape_id).collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// First record of each shape in a split.
    pub fn first_views(&self, split: Split) -> Vec<&SampleRecord> {
        let mut seen = BTreeSet::new();
        self.records_in(split).filter(|r| seen.insert(r.shape_id)).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{MANIFEST_MAGIC}\n#seed {}\n#dims {}\n#columns {}\n", self.seed, self.dims, COLUMNS.join("\t"));
        for r in &self.records {
            let views: Vec<String> = r.views.iter().map(|v| v.to_string()).collect();
            s += &format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.shape_id,
                r.pose_id,
                r.view_id,
                r.split,
                r.family,
                views.join(","),
                r.occ,
                r.sdf,
                r.log_tsdf,
                r.observation
            );
        }
        s
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let bad = |d: String| Error::format(origin, d);
        let mut lines = text.lines();
        if lines.next() != Some(MANIFEST_MAGIC) {
            return Err(bad("missing manifest header".into()));
        }
        let mut header = |key: &str| -> Result<String> {
            let l = lines.next().ok_or_else(|| bad(format!("missing #{key}")))?;
            l.strip_prefix(&format!("#{key} ")).map(str::to_string).ok_or_else(|| bad(format!("expected #{key}, got {l:?}")))
        };
        let seed = header("seed")?.parse().map_err(|_| bad("bad seed".into()))?;
        let dims: GridDims = header("dims")?.parse().map_err(|e: Error| bad(e.to_string()))?;
        if header("columns")? != COLUMNS.join("\t") {
            return Err(bad("unexpected column layout".into()));
        }
        let mut records = Vec::new();
        for (n, line) in lines.enumerate() {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != COLUMNS.len() {
                return Err(bad(format!("record {n}: expected {} fields, got {}", COLUMNS.len(), f.len())));
            }
            let num = |t: &str| t.parse::<usize>().map_err(|_| bad(format!("record {n}: bad number {t:?}")));
            records.push(SampleRecord {
                shape_id: num(f[0])?,
                pose_id: num(f[1])?,
                view_id: num(f[2])?,
                split: f[3].parse().map_err(|e: Error| bad(e.to_string()))?,
                family: f[4].parse().map_err(|e: Error| bad(e.to_string()))?,
                views: f[5].split(',').map(num).collect::<Result<_>>()?,
                occ: f[6].into(),
                sdf: f[7].into(),
                log_tsdf: f[8].into(),
                observation: f[9].into(),
            });
        }
        let m = DatasetManifest { seed, dims, records };
        m.check_disjoint().map_err(|e| bad(e.to_string()))?;
        Ok(m)
    }

    /// Fails if any shape id appears under more than one split.
    pub fn check_disjoint(&self) -> Result<()> {
        for (i, a) in Split::ALL.iter().enumerate() {
            let ids: BTreeSet<usize> = self.shape_ids(*a).into_iter().collect();
            for b in &Split::ALL[i + 1..] {
                if let Some(id) = self.shape_ids(*b).into_iter().find(|id| ids.contains(id)) {
                    return Err(Error::Config(format!("shape {id} appears in both {a} and {b}")));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingInput(path.clone())
            } else {
                Error::io(&path, e)
            }
        })?;
        Self::parse(&text, &path)
    }
}

/// Ground truth of one generated shape.
pub struct GeneratedShape {
    pub family: ShapeFamily,
    pub filled: OccupancyGrid,
    pub sdf: SdfGrid,
    pub log_tsdf: LogTsdfGrid,
}

/// Generates, voxelizes and fills shape `shape_id`, retrying with fresh
/// seeds if the voxelized shape is degenerate at this resolution.
pub fn generate_shape(dims: GridDims, family: Option<ShapeFamily>, seed: u64, shape_id: usize) -> Result<GeneratedShape> {
    for attempt in 0..16u64 {
        let id = shape_id as u64;
        let family = family.unwrap_or(ShapeFamily::ALL[(derive_seed(seed, &[TAG_FAMILY, id, attempt]) % 4) as usize]);
        let mesh = generate_primitive_shape(family, derive_seed(seed, &[TAG_MESH, id, attempt]));
        let filled = fill_interior(&voxelize_mesh(&mesh, dims)?);
        if let Ok(sdf) = signed_distance_transform(&filled) {
            return Ok(GeneratedShape { family, log_tsdf: log_tsdf(&sdf), filled, sdf });
        }
    }
    Err(Error::Degenerate(format!("could not generate shape {shape_id} at {dims}")))
}

/// The `k` single-view observations of one shape, before fusion.
pub fn shape_views(cfg: &SynthConfig, filled: &OccupancyGrid, seed: u64, shape_id: usize) -> Result<Vec<Observation>> {
    let id = shape_id as u64;
    (0..cfg.views)
        .map(|v| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[TAG_VIEW, id, v as u64]));
            let cam = Camera::on_ring(cfg.dims, rng.random_range(0.0..std::f64::consts::TAU), cfg.image_size())?;
            let mut depth = render_depth(filled, &cam)?;
            if cfg.noise {
                depth = perturb_depth(&depth, cfg.noise_params, derive_seed(seed, &[TAG_NOISE, id, v as u64]));
            }
            Ok(observation_from_depth(&depth, &cam, cfg.dims, cfg.carve_misses))
        })
        .collect()
}

/// View `v` plus `fuse_k - 1` other random views of the same shape.
fn fused_view_ids(cfg: &SynthConfig, seed: u64, shape_id: usize, v: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[TAG_FUSE, shape_id as u64, v as u64]));
    let others: Vec<usize> = (0..cfg.views).filter(|&o| o != v).collect();
    let mut ids = vec![v];
    ids.extend(sample(&mut rng, others.len(), cfg.fuse_k - 1).into_iter().map(|i| others[i]));
    ids
}

/// Generates the whole dataset into `out` and writes its manifest.
pub fn build_dataset(cfg: &SynthConfig, out: &Path, seed: u64) -> Result<DatasetManifest> {
    cfg.validate()?;
    for sub in ["shapes", "obs"] {
        let d = out.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(d, e))?;
    }
    let mut records = Vec::new();
    for shape_id in 0..cfg.total_shapes() {
        let shape = generate_shape(cfg.dims, cfg.family, seed, shape_id)?;
        let base = format!("shapes/{shape_id:05}");
        let (occ, sdf, lt) = (format!("{base}.occ.voxg"), format!("{base}.sdf.voxg"), format!("{base}.logtsdf.voxg"));
        shape.filled.save(&out.join(&occ))?;
        shape.sdf.save(&out.join(&sdf))?;
        shape.log_tsdf.save(&out.join(&lt))?;
        let views = shape_views(cfg, &shape.filled, seed, shape_id)?;
        for v in 0..cfg.views {
            let ids = fused_view_ids(cfg, seed, shape_id, v);
            let parts: Vec<Observation> = ids.iter().map(|&i| views[i].clone()).collect();
            let obs = fuse_observations(&parts)?;
            let obs_path = format!("obs/{shape_id:05}_{v:02}.obs.voxg");
            obs.save(&out.join(&obs_path))?;
            records.push(SampleRecord {
                shape_id,
                pose_id: 0,
                view_id: v,
                split: cfg.split_of(shape_id),
                family: shape.family,
                views: ids,
                occ: occ.clone(),
                sdf: sdf.clone(),
                log_tsdf: lt.clone(),
                observation: obs_path,
            });
        }
    }
    let manifest = DatasetManifest { seed, dims: cfg.dims, records };
    manifest.check_disjoint()?;
    manifest.save(out)?;
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Access {
    pub path: String,
    pub split: Split,
    pub ground_truth: bool,
}

/// Read access to a generated dataset. Every file opened is logged so that
/// pipelines can prove which ground truth they touched.
pub struct Dataset {
    root: PathBuf,
    manifest: DatasetManifest,
    log: Mutex<Vec<Access>>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        Ok(Dataset { root: root.to_path_buf(), manifest: DatasetManifest::load(root)?, log: Mutex::new(Vec::new()) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    fn record_for_shape(&self, shape_id: usize) -> Result<&SampleRecord> {
        self.manifest
            .records
            .iter()
            .find(|r| r.shape_id == shape_id)
            .ok_or_else(|| Error::InvalidInput(format!("shape {shape_id} is not in the manifest")))
    }

    fn note(&self, path: &str, split: Split, ground_truth: bool) {
        self.log.lock().expect("log lock").push(Access { path: path.to_string(), split, ground_truth });
    }

    pub fn shape(&self, shape_id: usize) -> Result<ShapeSample> {
        let r = self.record_for_shape(shape_id)?;
        self.note(&r.occ, r.split, true);
        self.note(&r.log_tsdf, r.split, true);
        ShapeSample::new(OccupancyGrid::load(&self.root.join(&r.occ))?, LogTsdfGrid::load(&self.root.join(&r.log_tsdf))?)
    }

    pub fn sdf(&self, shape_id: usize) -> Result<SdfGrid> {
        let r = self.record_for_shape(shape_id)?;
        self.note(&r.sdf, r.split, true);
        SdfGrid::load(&self.root.join(&r.sdf))
    }

    pub fn observation(&self, record: &SampleRecord) -> Result<Observation> {
        self.note(&record.observation, record.split, false);
        Observation::load(&self.root.join(&record.observation))
    }

    pub fn shapes(&self, split: Split) -> Result<Vec<ShapeSample>> {
        self.manifest.shape_ids(split).into_iter().map(|id| self.shape(id)).collect()
    }

    pub fn accesses(&self) -> Vec<Access> {
        self.log.lock().expect("log lock").clone()
    }

    pub fn clear_accesses(&self) {
        self.log.lock().expect("log lock").clear();
    }

    /// Ground-truth files of `split` opened since the last clear.
    pub fn ground_truth_touched(&self, split: Split) -> Vec<String> {
        self.accesses().into_iter().filter(|a| a.ground_truth && a.split == split).map(|a| a.path).collect()
    }

    /// Mean observed-voxel fraction over the records of a split.
    pub fn mean_supervision_fraction(&self, split: Split) -> Result<f64> {
        let recs: Vec<&SampleRecord> = self.manifest.records_in(split).collect();
        if recs.is_empty() {
            return Err(Error::InvalidInput(format!("split {split} is empty")));
        }
        let mut sum = 0.0;
        for r in &recs {
            sum += supervision_fraction(&self.observation(r)?);
        }
        Ok(sum / recs.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::VoxelState;

    fn tiny() -> SynthConfig {
        SynthConfig { dims: GridDims::cube(12).unwrap(), shapes_prior: 3, shapes_train: 2, shapes_test: 1, views: 3, ..Default::default() }
    }

    #[test]
    fn split_names() {
        for s in Split::ALL {
            assert_eq!(s.name().parse::<Split>().unwrap(), s);
        }
    }

    #[test]
    fn validation() {
        assert!(tiny().validate().is_ok());
        assert!(SynthConfig { views: 2, fuse_k: 3, ..tiny() }.validate().is_err());
        assert!(SynthConfig { shapes_prior: 0, ..tiny() }.validate().is_err());
        assert!(SynthConfig { noise_params: NoiseParams { exp_rate: -1.0, drop_prob: 0.0 }, ..tiny() }.validate().is_err());
    }

    #[test]
    fn full_scale_record_count() {
        let cfg = SynthConfig { shapes_prior: 100, shapes_train: 100, shapes_test: 20, views: 10, ..Default::default() };
        let n: usize = (0..cfg.total_shapes()).map(|_| cfg.views).sum();
        assert_eq!(n, 2200);
    }

    #[test]
    fn build_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        let m = build_dataset(&cfg, dir.path(), 5).unwrap();
        assert_eq!(m.records.len(), 6 * 3);
        assert_eq!(m.shape_ids(Split::PriorTrain), vec![0, 1, 2]);
        assert_eq!(m.shape_ids(Split::Test), vec![5]);
        let text = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(DatasetManifest::parse(&text, Path::new("m")).unwrap(), m);

        let again = tempfile::tempdir().unwrap();
        build_dataset(&cfg, again.path(), 5).unwrap();
        assert_eq!(fs::read(again.path().join(MANIFEST_FILE)).unwrap(), text.as_bytes());
        for r in &m.records {
            assert_eq!(fs::read(dir.path().join(&r.observation)).unwrap(), fs::read(again.path().join(&r.observation)).unwrap());
        }

        let ds = Dataset::open(dir.path()).unwrap();
        let shape = ds.shape(0).unwrap();
        let rec = ds.manifest().first_views(Split::Test)[0].clone();
        let obs = ds.observation(&rec).unwrap();
        let gt = ds.shape(rec.shape_id).unwrap().occupancy;
        for (idx, &occupied) in gt.values().iter().enumerate() {
            match obs.get(idx) {
                VoxelState::Occupied => assert!(occupied),
                VoxelState::Free => assert!(!occupied),
                VoxelState::Unknown => {}
            }
        }
        assert_eq!(shape.dims(), cfg.dims);
        assert_eq!(ds.ground_truth_touched(Split::PriorTrain).len(), 2);
        assert!(!ds.ground_truth_touched(Split::Test).is_empty());
        ds.clear_accesses();
        ds.observation(&rec).unwrap();
        assert!(ds.ground_truth_touched(Split::Test).is_empty());
    }

    #[test]
    fn fused_records_list_k_distinct_views() {
        let cfg = SynthConfig { views: 5, fuse_k: 3, ..tiny() };
        for v in 0..5 {
            let ids = fused_view_ids(&cfg, 1, 4, v);
            assert_eq!(ids.len(), 3);
            assert_eq!(ids[0], v);
            assert_eq!(ids.iter().collect::<BTreeSet<_>>().len(), 3);
        }
    }

    #[test]
    fn noise_lowers_supervision() {
        let clean = SynthConfig { shapes_prior: 2, shapes_train: 0, shapes_test: 2, views: 4, ..tiny() };
        let noisy = SynthConfig { noise: true, ..clean.clone() };
        let mean = |cfg: &SynthConfig| {
            let mut s = 0.0;
            for id in 0..cfg.total_shapes() {
                let shape = generate_shape(cfg.dims, cfg.family, 9, id).unwrap();
                for o in shape_views(cfg, &shape.filled, 9, id).unwrap() {
                    s += supervision_fraction(&o);
                }
            }
            s
        };
        assert!(mean(&noisy) < mean(&clean));
    }

    #[test]
    fn rejects_overlap_and_damage() {
        let rec = |id: usize, split: Split| SampleRecord {
            shape_id: id,
            pose_id: 0,
            view_id: 0,
            split,
            family: ShapeFamily::ChairLike,
            views: vec![0],
            occ: "a".into(),
            sdf: "b".into(),
            log_tsdf: "c".into(),
            observation: "d".into(),
        };
        let m = DatasetManifest { seed: 1, dims: GridDims::cube(4).unwrap(), records: vec![rec(0, Split::PriorTrain), rec(0, Split::Test)] };
        assert!(m.check_disjoint().is_err());
        assert!(DatasetManifest::parse(&m.to_text(), Path::new("m")).is_err());
        assert!(DatasetManifest::parse("nope", Path::new("m")).is_err());
        assert!(matches!(DatasetManifest::load(Path::new("/nonexistent")), Err(Error::MissingInput(_))));
    }
}
