//! Run configuration: a plain-text file of `section.key = value` lines,
//! with `#` comments, overridden by `--set section.key=value` flags.

use std::path::PathBuf;

use dualzsl::datagen::GenConfig;
use dualzsl::dual_channel::TrainConfig;
use dualzsl::zsl_head::{ClassifierConfig, LatentDraws, VaeConfig};
use dualzsl::{Error, Result};

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "DUALZSL_CONFIG";

/// Pre-training on the generic pretext task.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub classes: usize,
    pub samples_per_class: usize,
    /// Expected norm of a pretext class mean.
    pub spread: f64,
    pub noise: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 10,
            learning_rate: 0.01,
            classes: 20,
            samples_per_class: 40,
            spread: 6.0,
            noise: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub benchmark_dir: PathBuf,
    pub output_dir: PathBuf,
    pub gen: GenConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    /// Auxiliary classes drawn from a pool, and samples used per class.
    pub aux_classes: usize,
    pub aux_per_class: usize,
    pub vae: VaeConfig,
    pub classifier: ClassifierConfig,
    pub draws: LatentDraws,
    /// Fraction of each seen class's samples held out for testing.
    pub test_fraction: f64,
    pub seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            benchmark_dir: PathBuf::from("bench"),
            output_dir: PathBuf::from("out"),
            gen: GenConfig::default(),
            pretrain: PretrainConfig::default(),
            // The core default step size undertrains the extractor within 30
            // epochs at this scale.
            train: TrainConfig {
                learning_rate: 0.01,
                ..TrainConfig::default()
            },
            aux_classes: 30,
            aux_per_class: 32,
            vae: VaeConfig::default(),
            classifier: ClassifierConfig::default(),
            draws: LatentDraws {
                per_seen_feature: 1,
                per_unseen_class: 100,
            },
            test_fraction: 0.2,
            seeds: vec![1, 2, 3, 4, 5],
        }
    }
}

fn bad(key: &str, value: &str, what: &str) -> Error {
    Error::Config(format!("`{key}`: cannot parse `{value}` as {what}"))
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| bad(key, value, std::any::type_name::<T>()))
}

fn list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| num(key, v.trim())).collect()
}

fn ranks<T: std::str::FromStr + Copy>(key: &str, value: &str) -> Result<[T; 7]> {
    let v: Vec<T> = list(key, value)?;
    v.try_into()
        .map_err(|_| bad(key, value, "seven comma-separated values, species first"))
}

impl RunConfig {
    /// Apply one `section.key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let g = &mut self.gen;
        let t = &mut self.train;
        let p = &mut self.pretrain;
        let vae = &mut self.vae;
        let c = &mut self.classifier;
        match key.trim() {
            "paths.benchmark" => self.benchmark_dir = PathBuf::from(v),
            "paths.output" => self.output_dir = PathBuf::from(v),

            "gen.branching" => g.branching = ranks(key, v)?,
            "gen.feature_dim" => g.feature_dim = num(key, v)?,
            "gen.attr_dim" => g.attr_dim = num(key, v)?,
            "gen.diffusion_scales" => g.diffusion_scales = ranks(key, v)?,
            "gen.subspace_dim" => g.subspace_dim = num(key, v)?,
            "gen.subspace_tilt" => g.subspace_tilt = ranks(key, v)?,
            "gen.sample_noise" => g.sample_noise = num(key, v)?,
            "gen.attr_noise" => g.attr_noise = num(key, v)?,
            "gen.samples_per_class" => g.samples_per_class = num(key, v)?,
            "gen.n_seen" => g.n_seen = num(key, v)?,
            "gen.n_unseen" => g.n_unseen = num(key, v)?,
            "gen.n_aux" => g.n_aux = num(key, v)?,
            "gen.seed" => g.seed = num(key, v)?,

            "pretrain.epochs" => p.epochs = num(key, v)?,
            "pretrain.learning_rate" => p.learning_rate = num(key, v)?,
            "pretrain.classes" => p.classes = num(key, v)?,
            "pretrain.samples_per_class" => p.samples_per_class = num(key, v)?,
            "pretrain.spread" => p.spread = num(key, v)?,
            "pretrain.noise" => p.noise = num(key, v)?,

            "train.lambda" => t.lambda = num(key, v)?,
            "train.learning_rate" => t.learning_rate = num(key, v)?,
            "train.epochs" => t.epochs = num(key, v)?,
            "train.batch_size" => t.batch_size = num(key, v)?,
            "train.hidden_width" => t.hidden_width = num(key, v)?,
            "train.feature_width" => t.feature_width = num(key, v)?,

            "aux.classes" => self.aux_classes = num(key, v)?,
            "aux.per_class" => self.aux_per_class = num(key, v)?,

            "vae.beta" => vae.beta = num(key, v)?,
            "vae.gamma" => vae.gamma = num(key, v)?,
            "vae.delta" => vae.delta = num(key, v)?,
            "vae.latent_width" => vae.latent_width = num(key, v)?,
            "vae.hidden_width" => vae.hidden_width = num(key, v)?,
            "vae.learning_rate" => vae.learning_rate = num(key, v)?,
            "vae.epochs" => vae.epochs = num(key, v)?,
            "vae.batch_size" => vae.batch_size = num(key, v)?,

            "classifier.learning_rate" => c.learning_rate = num(key, v)?,
            "classifier.epochs" => c.epochs = num(key, v)?,
            "classifier.batch_size" => c.batch_size = num(key, v)?,

            "latent.seen_draws" => self.draws.per_seen_feature = num(key, v)?,
            "latent.unseen_draws" => self.draws.per_unseen_class = num(key, v)?,

            "run.test_fraction" => self.test_fraction = num(key, v)?,
            "run.seeds" => self.seeds = list(key, v)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Parse a config file body on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected `section.key = value`, found `{line}`"),
            })?;
            self.set(key, value).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    /// Apply a `section.key=value` override.
    pub fn override_with(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not `section.key=value`")))?;
        self.set(key, value)
    }

    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.train.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("run.seeds must list at least one seed".into()));
        }
        if self.benchmark_dir == self.output_dir {
            return Err(Error::Config("benchmark and output directories must differ".into()));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config("run.test_fraction must lie strictly between 0 and 1".into()));
        }
        if self.draws.per_seen_feature == 0 || self.draws.per_unseen_class == 0 {
            return Err(Error::Config("latent draws must be at least 1".into()));
        }
        if !(self.pretrain.learning_rate > 0.0) || self.pretrain.classes < 2 {
            return Err(Error::Config("pretraining needs a positive rate and two classes".into()));
        }
        Ok(())
    }

    /// The configuration as a file that [`RunConfig::parse`] reads back.
    pub fn to_text(&self) -> String {
        let join = |v: &[String]| v.join(",");
        let f7 = |a: &[f64; 7]| join(&a.iter().map(f64::to_string).collect::<Vec<_>>());
        let u7 = |a: &[usize; 7]| join(&a.iter().map(usize::to_string).collect::<Vec<_>>());
        let (g, p, t, v, c) = (&self.gen, &self.pretrain, &self.train, &self.vae, &self.classifier);
        let lines = [
            format!("paths.benchmark = {}", self.benchmark_dir.display()),
            format!("paths.output = {}", self.output_dir.display()),
            format!("gen.branching = {}", u7(&g.branching)),
            format!("gen.feature_dim = {}", g.feature_dim),
            format!("gen.attr_dim = {}", g.attr_dim),
            format!("gen.diffusion_scales = {}", f7(&g.diffusion_scales)),
            format!("gen.subspace_dim = {}", g.subspace_dim),
            format!("gen.subspace_tilt = {}", f7(&g.subspace_tilt)),
            format!("gen.sample_noise = {}", g.sample_noise),
            format!("gen.attr_noise = {}", g.attr_noise),
            format!("gen.samples_per_class = {}", g.samples_per_class),
            format!("gen.n_seen = {}", g.n_seen),
            format!("gen.n_unseen = {}", g.n_unseen),
            format!("gen.n_aux = {}", g.n_aux),
            format!("gen.seed = {}", g.seed),
            format!("pretrain.epochs = {}", p.epochs),
            format!("pretrain.learning_rate = {}", p.learning_rate),
            format!("pretrain.classes = {}", p.classes),
            format!("pretrain.samples_per_class = {}", p.samples_per_class),
            format!("pretrain.spread = {}", p.spread),
            format!("pretrain.noise = {}", p.noise),
            format!("train.lambda = {}", t.lambda),
            format!("train.learning_rate = {}", t.learning_rate),
            format!("train.epochs = {}", t.epochs),
            format!("train.batch_size = {}", t.batch_size),
            format!("train.hidden_width = {}", t.hidden_width),
            format!("train.feature_width = {}", t.feature_width),
            format!("aux.classes = {}", self.aux_classes),
            format!("aux.per_class = {}", self.aux_per_class),
            format!("vae.beta = {}", v.beta),
            format!("vae.gamma = {}", v.gamma),
            format!("vae.delta = {}", v.delta),
            format!("vae.latent_width = {}", v.latent_width),
            format!("vae.hidden_width = {}", v.hidden_width),
            format!("vae.learning_rate = {}", v.learning_rate),
            format!("vae.epochs = {}", v.epochs),
            format!("vae.batch_size = {}", v.batch_size),
            format!("classifier.learning_rate = {}", c.learning_rate),
            format!("classifier.epochs = {}", c.epochs),
            format!("classifier.batch_size = {}", c.batch_size),
            format!("latent.seen_draws = {}", self.draws.per_seen_feature),
            format!("latent.unseen_draws = {}", self.draws.per_unseen_class),
            format!("run.test_fraction = {}", self.test_fraction),
            format!("run.seeds = {}", join(&self.seeds.iter().map(u64::to_string).collect::<Vec<_>>())),
        ];
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }
}
