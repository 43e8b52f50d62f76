//! Flat `key = value` run configuration shared by all commands.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are errors.
//! Relative paths are resolved against the directory of the config file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::aml::AmlConfig;
use crate::baselines::MlConfig;
use crate::dataset::SynthConfig;
use crate::error::{Error, Result};
use crate::grid::GridDims;
use crate::nn::AdamConfig;
use crate::prior::{CorruptionParams, PriorConfig};
use crate::synth::{NoiseParams, ShapeFamily};

/// Every setting with its default. See [`KEYS`] for descriptions.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    // dataset
    pub dims: GridDims,
    pub family: Option<ShapeFamily>,
    pub shapes_prior: usize,
    pub shapes_train: usize,
    pub shapes_test: usize,
    pub views: usize,
    pub noise: bool,
    pub exp_rate: f64,
    pub drop_prob: f64,
    pub fuse_k: usize,
    pub carve_misses: bool,
    pub image: usize,
    // inputs
    pub data: Option<PathBuf>,
    pub prior: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub predictions: Vec<PathBuf>,
    pub split: String,
    // networks
    pub widths: Vec<usize>,
    pub convs_per_stage: usize,
    pub latent: usize,
    pub batch_size: usize,
    pub log_sigma2: f64,
    pub lambda: f64,
    pub flip_prob: f64,
    pub noise_var: f64,
    pub max_shift: i64,
    pub weight_decay: f64,
    pub decay_interval: u64,
    pub prior_epochs: usize,
    pub prior_lr: f64,
    pub prior_lr_decay: f64,
    pub aml_epochs: usize,
    pub aml_lr: f64,
    pub aml_lr_decay: f64,
    pub free_multiplier: Option<f64>,
    pub deterministic: bool,
    pub train_views: usize,
    pub sup_epochs: usize,
    // baselines and evaluation
    pub method: String,
    pub ml_iterations: usize,
    pub ml_lr: f64,
    pub ml_momentum: f64,
    pub icp_points: usize,
    pub surface_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        let prior = PriorConfig::default();
        let aml = AmlConfig::default();
        let ml = MlConfig::default();
        RunConfig {
            seed: 0,
            dims: synth.dims,
            family: None,
            shapes_prior: synth.shapes_prior,
            shapes_train: synth.shapes_train,
            shapes_test: synth.shapes_test,
            views: synth.views,
            noise: synth.noise,
            exp_rate: synth.noise_params.exp_rate,
            drop_prob: synth.noise_params.drop_prob,
            fuse_k: synth.fuse_k,
            carve_misses: synth.carve_misses,
            image: synth.image,
            data: None,
            prior: None,
            model: None,
            resume: None,
            predictions: Vec::new(),
            split: "test".into(),
            widths: prior.widths,
            convs_per_stage: prior.convs_per_stage,
            latent: prior.latent,
            batch_size: prior.batch_size,
            log_sigma2: prior.sigma2.ln(),
            lambda: prior.lambda,
            flip_prob: prior.corruption.flip_prob,
            noise_var: prior.corruption.noise_var,
            max_shift: prior.max_shift,
            weight_decay: prior.adam.weight_decay,
            decay_interval: prior.adam.decay_interval,
            prior_epochs: prior.epochs,
            prior_lr: prior.adam.lr,
            prior_lr_decay: prior.adam.decay,
            aml_epochs: aml.epochs,
            aml_lr: aml.adam.lr,
            aml_lr_decay: aml.adam.decay,
            free_multiplier: None,
            deterministic: aml.deterministic,
            train_views: 0,
            sup_epochs: 300,
            method: "mean".into(),
            ml_iterations: ml.iterations,
            ml_lr: ml.lr,
            ml_momentum: ml.momentum,
            icp_points: 2000,
            surface_samples: crate::eval::SURFACE_SAMPLES,
        }
    }
}

/// `(key, description)` for every accepted key, in snapshot order.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "master seed; every random stream is derived from it"),
    ("dims", "grid size, HxWxD or a single extent"),
    ("family", "shape family for synth, or 'mixed'"),
    ("shapes_prior", "reference shapes for the prior"),
    ("shapes_train", "shapes observed for inference training"),
    ("shapes_test", "held-out shapes"),
    ("views", "depth views per shape"),
    ("noise", "perturb depth maps (true/false)"),
    ("exp_rate", "rate of the exponential depth noise, per grid span"),
    ("drop_prob", "probability that a pixel returns nothing"),
    ("fuse_k", "views fused into each observation"),
    ("carve_misses", "also carve along rays without a return"),
    ("image", "depth image side in pixels; 0 picks twice the largest extent"),
    ("data", "dataset directory"),
    ("prior", "prior checkpoint"),
    ("model", "checkpoint used by complete"),
    ("resume", "checkpoint to continue training from"),
    ("predictions", "comma-separated prediction directories for eval"),
    ("split", "split to complete or evaluate"),
    ("widths", "channel widths per encoder stage, comma-separated"),
    ("convs_per_stage", "convolutions per stage"),
    ("latent", "latent code size"),
    ("batch_size", "minibatch size"),
    ("log_sigma2", "log variance of the logTSDF head"),
    ("lambda", "weight of the latent regularizer"),
    ("flip_prob", "input corruption: occupancy flip probability"),
    ("noise_var", "input corruption: Gaussian variance"),
    ("max_shift", "prior augmentation: largest translation in voxels"),
    ("weight_decay", "L2 coefficient in Adam"),
    ("decay_interval", "steps between learning-rate decays"),
    ("prior_epochs", "prior training epochs"),
    ("prior_lr", "prior initial learning rate"),
    ("prior_lr_decay", "prior learning-rate decay factor"),
    ("aml_epochs", "AML training epochs"),
    ("aml_lr", "AML initial learning rate"),
    ("aml_lr_decay", "AML learning-rate decay factor"),
    ("free_multiplier", "free-space weight factor; default 0.25 with noise, else 1"),
    ("deterministic", "use the recognition mean during AML training"),
    ("train_views", "views per shape used for training; 0 uses all"),
    ("sup_epochs", "supervised baseline epochs"),
    ("method", "baseline: ml, icp, mean, naive, or dvae (prior reconstruction of the true shape)"),
    ("ml_iterations", "iterations of the ML baseline"),
    ("ml_lr", "ML baseline initial learning rate"),
    ("ml_momentum", "ML baseline momentum"),
    ("icp_points", "surface points per ICP reference"),
    ("surface_samples", "surface samples for Acc and Comp"),
];

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| parse(key, s)).collect()
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "dims" => self.dims = v.parse().map_err(|e: Error| Error::Config(format!("dims: {e}")))?,
            "family" => {
                self.family = if v == "mixed" { None } else { Some(v.parse().map_err(|e: Error| Error::Config(e.to_string()))?) }
            }
            "shapes_prior" => self.shapes_prior = parse(key, v)?,
            "shapes_train" => self.shapes_train = parse(key, v)?,
            "shapes_test" => self.shapes_test = parse(key, v)?,
            "views" => self.views = parse(key, v)?,
            "noise" => self.noise = parse_bool(key, v)?,
            "exp_rate" => self.exp_rate = parse(key, v)?,
            "drop_prob" => self.drop_prob = parse(key, v)?,
            "fuse_k" => self.fuse_k = parse(key, v)?,
            "carve_misses" => self.carve_misses = parse_bool(key, v)?,
            "image" => self.image = parse(key, v)?,
            "data" => self.data = opt_path(v),
            "prior" => self.prior = opt_path(v),
            "model" => self.model = opt_path(v),
            "resume" => self.resume = opt_path(v),
            "predictions" => self.predictions = v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(PathBuf::from).collect(),
            "split" => {
                crate::dataset::Split::from_str(v).map_err(|e| Error::Config(e.to_string()))?;
                self.split = v.into()
            }
            "widths" => self.widths = list(key, v)?,
            "convs_per_stage" => self.convs_per_stage = parse(key, v)?,
            "latent" => self.latent = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "log_sigma2" => self.log_sigma2 = parse(key, v)?,
            "lambda" => self.lambda = parse(key, v)?,
            "flip_prob" => self.flip_prob = parse(key, v)?,
            "noise_var" => self.noise_var = parse(key, v)?,
            "max_shift" => self.max_shift = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "decay_interval" => self.decay_interval = parse(key, v)?,
            "prior_epochs" => self.prior_epochs = parse(key, v)?,
            "prior_lr" => self.prior_lr = parse(key, v)?,
            "prior_lr_decay" => self.prior_lr_decay = parse(key, v)?,
            "aml_epochs" => self.aml_epochs = parse(key, v)?,
            "aml_lr" => self.aml_lr = parse(key, v)?,
            "aml_lr_decay" => self.aml_lr_decay = parse(key, v)?,
            "free_multiplier" => self.free_multiplier = if v.is_empty() { None } else { Some(parse(key, v)?) },
            "deterministic" => self.deterministic = parse_bool(key, v)?,
            "train_views" => self.train_views = parse(key, v)?,
            "sup_epochs" => self.sup_epochs = parse(key, v)?,
            "method" => {
                if !["ml", "icp", "mean", "naive", "dvae"].contains(&v) {
                    return Err(Error::Config(format!("unknown baseline method {v:?}")));
                }
                self.method = v.into()
            }
            "ml_iterations" => self.ml_iterations = parse(key, v)?,
            "ml_lr" => self.ml_lr = parse(key, v)?,
            "ml_momentum" => self.ml_momentum = parse(key, v)?,
            "icp_points" => self.icp_points = parse(key, v)?,
            "surface_samples" => self.surface_samples = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parses `text`, starting from the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {line:?}", n + 1)))?;
            cfg.set(k.trim(), v)?;
        }
        Ok(cfg)
    }

    /// Loads a config file and resolves its relative paths against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingInput(path.to_path_buf()),
            _ => Error::io(path, e),
        })?;
        let mut cfg = Self::parse(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [&mut self.data, &mut self.prior, &mut self.model, &mut self.resume].into_iter().flatten() {
            fix(p);
        }
        self.predictions.iter_mut().for_each(fix);
    }

    fn value(&self, key: &str) -> String {
        match key {
            "seed" => self.seed.to_string(),
            "dims" => self.dims.to_string(),
            "family" => self.family.map_or("mixed".into(), |f| f.name().into()),
            "shapes_prior" => self.shapes_prior.to_string(),
            "shapes_train" => self.shapes_train.to_string(),
            "shapes_test" => self.shapes_test.to_string(),
            "views" => self.views.to_string(),
            "noise" => self.noise.to_string(),
            "exp_rate" => self.exp_rate.to_string(),
            "drop_prob" => self.drop_prob.to_string(),
            "fuse_k" => self.fuse_k.to_string(),
            "carve_misses" => self.carve_misses.to_string(),
            "image" => self.image.to_string(),
            "data" => show_path(&self.data),
            "prior" => show_path(&self.prior),
            "model" => show_path(&self.model),
            "resume" => show_path(&self.resume),
            "predictions" => self.predictions.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(","),
            "split" => self.split.clone(),
            "widths" => join(&self.widths),
            "convs_per_stage" => self.convs_per_stage.to_string(),
            "latent" => self.latent.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "log_sigma2" => self.log_sigma2.to_string(),
            "lambda" => self.lambda.to_string(),
            "flip_prob" => self.flip_prob.to_string(),
            "noise_var" => self.noise_var.to_string(),
            "max_shift" => self.max_shift.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "decay_interval" => self.decay_interval.to_string(),
            "prior_epochs" => self.prior_epochs.to_string(),
            "prior_lr" => self.prior_lr.to_string(),
            "prior_lr_decay" => self.prior_lr_decay.to_string(),
            "aml_epochs" => self.aml_epochs.to_string(),
            "aml_lr" => self.aml_lr.to_string(),
            "aml_lr_decay" => self.aml_lr_decay.to_string(),
            "free_multiplier" => self.free_multiplier.map(|v| v.to_string()).unwrap_or_default(),
            "deterministic" => self.deterministic.to_string(),
            "train_views" => self.train_views.to_string(),
            "sup_epochs" => self.sup_epochs.to_string(),
            "method" => self.method.clone(),
            "ml_iterations" => self.ml_iterations.to_string(),
            "ml_lr" => self.ml_lr.to_string(),
            "ml_momentum" => self.ml_momentum.to_string(),
            "icp_points" => self.icp_points.to_string(),
            "surface_samples" => self.surface_samples.to_string(),
            _ => unreachable!("every key in KEYS has a value"),
        }
    }

    /// Canonical text form listing every key; parses back to `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, doc) in KEYS {
            let _ = writeln!(out, "# {doc}\n{k} = {}", self.value(k));
        }
        out
    }

    pub fn synth(&self) -> Result<SynthConfig> {
        let cfg = SynthConfig {
            dims: self.dims,
            family: self.family,
            shapes_prior: self.shapes_prior,
            shapes_train: self.shapes_train,
            shapes_test: self.shapes_test,
            views: self.views,
            noise: self.noise,
            noise_params: NoiseParams::new(self.exp_rate, self.drop_prob).map_err(|e| Error::Config(e.to_string()))?,
            fuse_k: self.fuse_k,
            carve_misses: self.carve_misses,
            image: self.image,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn corruption(&self) -> Result<CorruptionParams> {
        CorruptionParams::new(self.flip_prob, self.noise_var).map_err(|e| Error::Config(e.to_string()))
    }

    fn adam(&self, lr: f64, decay: f64) -> Result<AdamConfig> {
        if !(lr > 0.0) || !(decay > 0.0 && decay <= 1.0) || self.decay_interval == 0 || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("invalid optimizer settings lr={lr} decay={decay}")));
        }
        Ok(AdamConfig { lr, decay, decay_interval: self.decay_interval, weight_decay: self.weight_decay, ..AdamConfig::default() })
    }

    fn sigma2(&self) -> Result<f64> {
        if !self.log_sigma2.is_finite() {
            return Err(Error::Config("log_sigma2 must be finite".into()));
        }
        Ok(self.log_sigma2.exp())
    }

    pub fn prior_config(&self) -> Result<PriorConfig> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        Ok(PriorConfig {
            widths: self.widths.clone(),
            convs_per_stage: self.convs_per_stage,
            latent: self.latent,
            epochs: self.prior_epochs,
            batch_size: self.batch_size,
            lambda: self.lambda,
            sigma2: self.sigma2()?,
            corruption: self.corruption()?,
            max_shift: self.max_shift,
            adam: self.adam(self.prior_lr, self.prior_lr_decay)?,
        })
    }

    /// Supervised baseline: the prior's procedure on observation inputs.
    pub fn sup_config(&self) -> Result<PriorConfig> {
        Ok(PriorConfig { epochs: self.sup_epochs, ..self.prior_config()? })
    }

    pub fn free_multiplier(&self) -> f64 {
        self.free_multiplier.unwrap_or(if self.noise { 0.25 } else { 1.0 })
    }

    pub fn aml_config(&self) -> Result<AmlConfig> {
        let cfg = AmlConfig {
            lambda: self.lambda,
            free_multiplier: self.free_multiplier(),
            deterministic: self.deterministic,
            corruption: self.corruption()?,
            sigma: self.sigma2()?.sqrt(),
            epochs: self.aml_epochs,
            batch_size: self.batch_size,
            adam: self.adam(self.aml_lr, self.aml_lr_decay)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn ml_config(&self) -> Result<MlConfig> {
        if !(self.ml_lr > 0.0) || !(0.0..1.0).contains(&self.ml_momentum) {
            return Err(Error::Config(format!("invalid ML settings lr={} momentum={}", self.ml_lr, self.ml_momentum)));
        }
        Ok(MlConfig {
            iterations: self.ml_iterations,
            lr: self.ml_lr,
            momentum: self.ml_momentum,
            lambda: self.lambda,
            free_multiplier: self.free_multiplier(),
            sigma: self.sigma2()?.sqrt(),
            ..MlConfig::default()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_round_trips() {
        let mut c = RunConfig::default();
        c.set("dims", "24x54x24").unwrap();
        c.set("noise", "true").unwrap();
        c.set("widths", "4, 8").unwrap();
        c.set("data", "ds").unwrap();
        c.set("family", "chair-like").unwrap();
        c.set("predictions", "a,b").unwrap();
        let back = RunConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(RunConfig::parse(&RunConfig::default().to_text()).unwrap(), RunConfig::default());
        assert_eq!(c.free_multiplier(), 0.25);
        assert_eq!(c.to_text().lines().filter(|l| !l.starts_with('#')).count(), KEYS.len());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(RunConfig::parse("colour = red"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("views 3"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("views = three"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("method = magic"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("split = validation"), Err(Error::Config(_))));
        let c = RunConfig::parse("# comment\n\nseed = 5 # trailing\n").unwrap();
        assert_eq!(c.seed, 5);
        assert!(RunConfig::parse("lambda = 0").unwrap().aml_config().is_err());
    }

    #[test]
    fn defaults_match_module_defaults() {
        let c = RunConfig::default();
        assert_eq!(c.prior_config().unwrap(), PriorConfig { epochs: c.prior_epochs, ..PriorConfig::default() });
        let a = c.aml_config().unwrap();
        assert_eq!(a, AmlConfig::default());
        assert!((a.sigma - (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!(c.ml_config().unwrap(), MlConfig::default());
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let mut c = RunConfig::parse("data = ds\nprior = /abs/p.ckpt\npredictions = a,b").unwrap();
        c.resolve_paths(Path::new("/runs/x"));
        assert_eq!(c.data, Some(PathBuf::from("/runs/x/ds")));
        assert_eq!(c.prior, Some(PathBuf::from("/abs/p.ckpt")));
        assert_eq!(c.predictions[1], PathBuf::from("/runs/x/b"));
    }
}
