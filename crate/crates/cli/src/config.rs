//! Experiment configuration: defaults, a sectioned `key = value` file, and
//! command-line overrides applied last.
//!
//! ```text
//! [experiment]
//! model = mnist-mlp          # mnist-mlp | small-vgg | mlp
//! hidden = 300,100           # mlp only
//! dataset = mnist            # mnist | cifar10 | synthetic
//! data_dir = data/mnist-5k
//! seed = 0
//! out = runs/default
//! init_weights = init.ckpt   # optional
//!
//! [synthetic]
//! classes = 4
//! per_class = 100            # per split
//! dim = 16
//! separation = 3.0
//! seed = 0
//!
//! [prune]
//! criterion = prospr         # prospr | prospr-fo | snip | magnitude | random
//! sparsity = 95              # percent; or `density = 0.05`
//! meta_steps = 3
//! meta_lr = 0.1
//! meta_batch_size = 512
//! sampler = class-balanced   # shuffled | class-balanced | fixed-single-batch
//! granularity = unstructured # unstructured | structured
//!
//! [train]
//! epochs = 10
//! batch_size = 64
//! lr = 0.1
//! lr_drops = 5,7
//! lr_drop_factor = 10
//! weight_decay = 5e-4
//! momentum = 0
//! augment = false
//!
//! [check_grad]
//! step = 1e-3
//! entries = 64               # or `all`
//! tolerance = 1e-4
//! batch_size = 64
//! ```

use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::Ini;
use prospr_core::data::{load_cifar10, load_mnist, make_synthetic, Dataset, SamplerMode, Split};
use prospr_core::nn::{init_params, InitScheme, ModelState, Network};
use prospr_core::pipeline::PruneConfig;
use prospr_core::pruning::{density_from_sparsity_percent, Criterion, Granularity};
use prospr_core::trainer::TrainConfig;
use prospr_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum ModelKind {
    MnistMlp,
    SmallVgg,
    /// Perceptron over the flattened input with these hidden widths.
    Mlp { hidden: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum DatasetKind {
    Mnist,
    Cifar10,
    Synthetic { classes: usize, per_class: usize, dim: usize, separation: f64, seed: u64 },
}

impl DatasetKind {
    pub fn tag(&self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
            DatasetKind::Synthetic { .. } => "synthetic",
        }
    }
}

impl ModelKind {
    pub fn tag(&self) -> &'static str {
        match self {
            ModelKind::MnistMlp => "mnist-mlp",
            ModelKind::SmallVgg => "small-vgg",
            ModelKind::Mlp { .. } => "mlp",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckGradConfig {
    pub step: f64,
    /// `None` checks every entry.
    pub entries: Option<usize>,
    pub tolerance: f64,
    pub batch_size: usize,
}

impl Default for CheckGradConfig {
    fn default() -> Self {
        CheckGradConfig { step: 1e-3, entries: Some(64), tolerance: 1e-4, batch_size: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelKind,
    pub dataset: DatasetKind,
    pub data_dir: PathBuf,
    pub seed: u64,
    pub out: PathBuf,
    pub init_weights: Option<PathBuf>,
    pub criterion: Criterion,
    pub density: f64,
    pub meta_steps: usize,
    pub meta_lr: f64,
    pub meta_batch_size: usize,
    pub sampler: SamplerMode,
    pub granularity: Granularity,
    pub train: TrainConfig,
    pub check_grad: CheckGradConfig,
}

impl Default for ExperimentConfig {
    /// MNIST perceptron at 95% sparsity with a 10-epoch schedule.
    fn default() -> Self {
        let prune = PruneConfig::default();
        ExperimentConfig {
            model: ModelKind::MnistMlp,
            dataset: DatasetKind::Mnist,
            data_dir: PathBuf::from("data/mnist-5k"),
            seed: 0,
            out: PathBuf::from("runs/default"),
            init_weights: None,
            criterion: prune.criterion,
            density: prune.density,
            meta_steps: prune.meta_steps,
            meta_lr: prune.meta_lr,
            meta_batch_size: prune.meta_batch_size,
            sampler: prune.sampler,
            granularity: prune.granularity,
            train: TrainConfig { epochs: 10, batch_size: 64, lr_drop_epochs: vec![5, 7], ..TrainConfig::default() },
            check_grad: CheckGradConfig::default(),
        }
    }
}

/// Values given on the command line; each one set replaces the config value.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub data_dir: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub criterion: Option<String>,
    pub sparsity: Option<f64>,
    pub meta_steps: Option<usize>,
    pub meta_lr: Option<f64>,
    pub meta_batch_size: Option<usize>,
    pub granularity: Option<String>,
    pub init_weights: Option<PathBuf>,
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim().parse().map_err(|_| usage(format!("{key}: cannot parse `{v}`")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| parse_num(key, s)).collect()
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(usage(format!("{key}: expected true or false, got `{v}`"))),
    }
}

pub fn parse_criterion(v: &str) -> Result<Criterion> {
    Criterion::from_tag(v.trim()).ok_or_else(|| {
        usage(format!("criterion: unknown `{v}` (expected prospr, prospr-fo, snip, magnitude or random)"))
    })
}

pub fn parse_granularity(v: &str) -> Result<Granularity> {
    match v.trim() {
        "unstructured" | "per-weight" => Ok(Granularity::PerWeight),
        "structured" | "per-channel" => Ok(Granularity::PerChannel),
        _ => Err(usage(format!("granularity: unknown `{v}` (expected unstructured or structured)"))),
    }
}

pub fn granularity_tag(g: Granularity) -> &'static str {
    match g {
        Granularity::PerWeight => "unstructured",
        Granularity::PerChannel => "structured",
    }
}

fn parse_sampler(v: &str) -> Result<SamplerMode> {
    match v.trim() {
        "shuffled" => Ok(SamplerMode::Shuffled),
        "class-balanced" => Ok(SamplerMode::ClassBalanced),
        "fixed-single-batch" => Ok(SamplerMode::FixedSingleBatch),
        _ => Err(usage(format!("sampler: unknown `{v}` (expected shuffled, class-balanced or fixed-single-batch)"))),
    }
}

pub fn parse_sparsity(v: f64) -> Result<f64> {
    if !(0.0..100.0).contains(&v) {
        return Err(usage(format!("sparsity must be in [0, 100), got {v}")));
    }
    Ok(density_from_sparsity_percent(v))
}

impl ExperimentConfig {
    /// Defaults, then `file` if given, then `overrides`.
    pub fn resolve(file: Option<&Path>, overrides: &Overrides) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
            cfg.apply_text(&text).map_err(|e| match e {
                CliError::Usage(m) => usage(format!("{}: {m}", path.display())),
                other => other,
            })?;
        }
        cfg.apply_overrides(overrides)?;
        Ok(cfg)
    }

    /// Applies a sectioned `key = value` document. All unknown keys are
    /// reported together.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let ini = Ini::load_from_str(text).map_err(|e| usage(format!("config syntax: {e}")))?;
        let mut unknown = Vec::new();
        let mut model: Option<String> = None;
        let mut hidden: Option<Vec<usize>> = None;
        let mut dataset: Option<String> = None;
        let mut syn = (4usize, 100usize, 16usize, 3.0f64, 0u64);
        let mut sparsity: Option<f64> = None;
        let mut density: Option<f64> = None;
        for (section, props) in ini.iter() {
            for (key, v) in props.iter() {
                let full = format!("[{}] {key}", section.unwrap_or(""));
                match (section.unwrap_or(""), key) {
                    ("experiment", "model") => model = Some(v.trim().to_string()),
                    ("experiment", "hidden") => hidden = Some(parse_list(key, v)?),
                    ("experiment", "dataset") => dataset = Some(v.trim().to_string()),
                    ("experiment", "data_dir") => self.data_dir = PathBuf::from(v.trim()),
                    ("experiment", "seed") => self.seed = parse_num(key, v)?,
                    ("experiment", "out") => self.out = PathBuf::from(v.trim()),
                    ("experiment", "init_weights") => self.init_weights = Some(PathBuf::from(v.trim())),
                    ("synthetic", "classes") => syn.0 = parse_num(key, v)?,
                    ("synthetic", "per_class") => syn.1 = parse_num(key, v)?,
                    ("synthetic", "dim") => syn.2 = parse_num(key, v)?,
                    ("synthetic", "separation") => syn.3 = parse_num(key, v)?,
                    ("synthetic", "seed") => syn.4 = parse_num(key, v)?,
                    ("prune", "criterion") => self.criterion = parse_criterion(v)?,
                    ("prune", "sparsity") => sparsity = Some(parse_num(key, v)?),
                    ("prune", "density") => density = Some(parse_num(key, v)?),
                    ("prune", "meta_steps") => self.meta_steps = parse_num(key, v)?,
                    ("prune", "meta_lr") => self.meta_lr = parse_num(key, v)?,
                    ("prune", "meta_batch_size") => self.meta_batch_size = parse_num(key, v)?,
                    ("prune", "sampler") => self.sampler = parse_sampler(v)?,
                    ("prune", "granularity") => self.granularity = parse_granularity(v)?,
                    ("train", "epochs") => self.train.epochs = parse_num(key, v)?,
                    ("train", "batch_size") => self.train.batch_size = parse_num(key, v)?,
                    ("train", "lr") => self.train.lr = parse_num(key, v)?,
                    ("train", "lr_drops") => self.train.lr_drop_epochs = parse_list(key, v)?,
                    ("train", "lr_drop_factor") => self.train.lr_drop_factor = parse_num(key, v)?,
                    ("train", "weight_decay") => self.train.weight_decay = parse_num(key, v)?,
                    ("train", "momentum") => self.train.momentum = parse_num(key, v)?,
                    ("train", "augment") => self.train.augment = parse_bool(key, v)?,
                    ("check_grad", "step") => self.check_grad.step = parse_num(key, v)?,
                    ("check_grad", "entries") => {
                        self.check_grad.entries = if v.trim() == "all" { None } else { Some(parse_num(key, v)?) }
                    }
                    ("check_grad", "tolerance") => self.check_grad.tolerance = parse_num(key, v)?,
                    ("check_grad", "batch_size") => self.check_grad.batch_size = parse_num(key, v)?,
                    _ => unknown.push(full),
                }
            }
        }
        if !unknown.is_empty() {
            return Err(usage(format!("unknown config keys: {}", unknown.join(", "))));
        }
        match (sparsity, density) {
            (Some(_), Some(_)) => return Err(usage("set either sparsity or density, not both")),
            (Some(s), None) => self.density = parse_sparsity(s)?,
            (None, Some(d)) => self.density = d,
            (None, None) => {}
        }
        if let Some(m) = model {
            self.model = match m.as_str() {
                "mnist-mlp" => ModelKind::MnistMlp,
                "small-vgg" => ModelKind::SmallVgg,
                "mlp" => ModelKind::Mlp { hidden: hidden.take().unwrap_or_else(|| vec![300, 100]) },
                other => return Err(usage(format!("model: unknown `{other}` (expected mnist-mlp, small-vgg or mlp)"))),
            };
        }
        if let Some(h) = hidden {
            match &mut self.model {
                ModelKind::Mlp { hidden } => *hidden = h,
                _ => return Err(usage("hidden is only meaningful with model = mlp")),
            }
        }
        if let Some(d) = dataset {
            self.dataset = match d.as_str() {
                "mnist" => DatasetKind::Mnist,
                "cifar10" => DatasetKind::Cifar10,
                "synthetic" => DatasetKind::Synthetic {
                    classes: syn.0,
                    per_class: syn.1,
                    dim: syn.2,
                    separation: syn.3,
                    seed: syn.4,
                },
                other => return Err(usage(format!("dataset: unknown `{other}` (expected mnist, cifar10 or synthetic)"))),
            };
        }
        Ok(())
    }

    pub fn apply_overrides(&mut self, o: &Overrides) -> Result<()> {
        if let Some(v) = &o.data_dir {
            self.data_dir = v.clone();
        }
        if let Some(v) = &o.out {
            self.out = v.clone();
        }
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = &o.criterion {
            self.criterion = parse_criterion(v)?;
        }
        if let Some(v) = o.sparsity {
            self.density = parse_sparsity(v)?;
        }
        if let Some(v) = o.meta_steps {
            self.meta_steps = v;
        }
        if let Some(v) = o.meta_lr {
            self.meta_lr = v;
        }
        if let Some(v) = o.meta_batch_size {
            self.meta_batch_size = v;
        }
        if let Some(v) = &o.granularity {
            self.granularity = parse_granularity(v)?;
        }
        if let Some(v) = &o.init_weights {
            self.init_weights = Some(v.clone());
        }
        Ok(())
    }

    /// Rejects inconsistent settings. Zero unrolled steps is refused for the
    /// meta-gradient criteria unless `allow_zero_steps`.
    pub fn validate(&self, allow_zero_steps: bool) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.density > 0.0 && self.density <= 1.0) {
            problems.push(format!("density must be in (0, 1], got {}", self.density));
        }
        let meta = matches!(self.criterion, Criterion::Prospr | Criterion::ProsprFirstOrder);
        if meta && self.meta_steps == 0 && !allow_zero_steps {
            problems.push(format!("meta_steps must be >= 1 for {}", self.criterion.tag()));
        }
        if !(self.meta_lr >= 0.0 && self.meta_lr.is_finite()) {
            problems.push(format!("meta_lr must be finite and >= 0, got {}", self.meta_lr));
        }
        if self.meta_batch_size == 0 {
            problems.push("meta_batch_size must be positive".into());
        }
        if let ModelKind::Mlp { hidden } = &self.model {
            if hidden.contains(&0) {
                problems.push("hidden widths must be positive".into());
            }
        }
        if let DatasetKind::Synthetic { classes, per_class, dim, separation, .. } = self.dataset {
            if classes < 2 || per_class == 0 || dim == 0 || !separation.is_finite() {
                problems.push("synthetic data needs classes >= 2, per_class >= 1, dim >= 1".into());
            }
        }
        if let Err(e) = self.train.validate() {
            problems.push(format!("train: {e}"));
        }
        let c = &self.check_grad;
        if !(c.step > 0.0) || !(c.tolerance > 0.0) || c.batch_size == 0 || c.entries == Some(0) {
            problems.push("check_grad: step, tolerance, batch_size and entries must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(usage(format!("invalid configuration: {}", problems.join("; "))))
        }
    }

    pub fn prune_config(&self) -> PruneConfig {
        PruneConfig {
            criterion: self.criterion,
            granularity: self.granularity,
            density: self.density,
            meta_steps: self.meta_steps,
            meta_lr: self.meta_lr,
            meta_batch_size: self.meta_batch_size,
            sampler: self.sampler,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }

    pub fn sparsity_percent(&self) -> f64 {
        ((1.0 - self.density) * 1000.0).round() / 10.0
    }

    /// Stable identifier of one grid point.
    pub fn run_id(&self) -> String {
        format!(
            "{}-m{}-sp{}-{}-s{}",
            self.criterion.tag(),
            self.meta_steps,
            self.sparsity_percent(),
            granularity_tag(self.granularity),
            self.seed
        )
    }

    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        match self.dataset {
            DatasetKind::Mnist => {
                Ok((load_mnist(&self.data_dir, Split::Train)?, load_mnist(&self.data_dir, Split::Test)?))
            }
            DatasetKind::Cifar10 => {
                Ok((load_cifar10(&self.data_dir, Split::Train)?, load_cifar10(&self.data_dir, Split::Test)?))
            }
            DatasetKind::Synthetic { classes, per_class, dim, separation, seed } => {
                let all = make_synthetic(classes, 2 * per_class, dim, separation, seed)?;
                let half = all.len() / 2;
                let split = |range: std::ops::Range<usize>, split: Split| -> Result<Dataset> {
                    let data = all.inputs().data()[range.start * dim..range.end * dim].to_vec();
                    let inputs = Tensor::new(vec![range.len(), dim], data)?;
                    Ok(Dataset::new(inputs, all.labels()[range].to_vec(), classes, split)?)
                };
                Ok((split(0..half, Split::Train)?, split(half..all.len(), Split::Test)?))
            }
        }
    }

    pub fn network(&self, data: &Dataset) -> Result<Network> {
        let shape = data.sample_shape();
        let classes = data.num_categories();
        let net = match &self.model {
            ModelKind::MnistMlp => Network::mnist_mlp(),
            ModelKind::SmallVgg => match *shape {
                [c, h, w] if h == w && h % 4 == 0 => Network::small_vgg(c, h, classes),
                _ => {
                    return Err(usage(format!(
                        "small-vgg needs square images with side divisible by 4, got sample shape {shape:?}"
                    )))
                }
            },
            ModelKind::Mlp { hidden } => {
                let mut widths = hidden.clone();
                widths.push(classes);
                Network::mlp("mlp", shape, &widths)
            }
        };
        let expected: usize = net.input_shape.iter().product();
        if expected != shape.iter().product::<usize>() || net.num_outputs()? != classes {
            return Err(usage(format!(
                "model {} expects inputs {:?} and {} classes; dataset {} has {shape:?} and {classes}",
                self.model.tag(),
                net.input_shape,
                net.num_outputs()?,
                self.dataset.tag()
            )));
        }
        Ok(net)
    }

    pub fn init_state(&self, net: &Network) -> Result<ModelState> {
        let scheme = match &self.init_weights {
            Some(p) => InitScheme::External(p.clone()),
            None => InitScheme::KaimingUniform,
        };
        Ok(init_params(net, self.seed, &scheme)?)
    }
}
