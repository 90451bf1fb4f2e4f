//! INI-style experiment configuration.
//!
//! ```text
//! [dataset]
//! kind = label_shift
//! [hyper]
//! mode = metafed
//! lambda0 = 1
//! [run]
//! seeds = 0, 1, 2
//! ```
//!
//! `#` starts a comment, as does `;` at the start of a line. Unknown sections or keys are errors so that
//! typos never fall back silently to defaults.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{FeatureShiftSpec, Fractions, GaussianPoolSpec};
use crate::error::{Error, Result};
use crate::protocol::{Grouping, HyperParams};

/// Where federation data comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    /// Gaussian pool split across federations by Dirichlet label shift.
    LabelShift(GaussianPoolSpec),
    /// Per-federation affine distortions of shared Gaussians.
    FeatureShift(FeatureShiftSpec),
    /// A CSV pool split by Dirichlet label shift.
    Csv(PathBuf),
}

impl DatasetSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            DatasetSpec::LabelShift(_) => "label_shift",
            DatasetSpec::FeatureShift(_) => "feature_shift",
            DatasetSpec::Csv(_) => "csv",
        }
    }
}

/// Label-shift partition settings; the seed comes from the run seed.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionConfig {
    pub federations: usize,
    pub alpha: f64,
    pub fractions: Fractions,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            federations: 20,
            alpha: 0.5,
            fractions: Fractions::LABEL_SHIFT,
        }
    }
}

/// Value grids for the sensitivity and budget sweeps.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrids {
    pub lambda0: Vec<f64>,
    pub l_t1: Vec<f64>,
    pub budget_rounds: Vec<usize>,
    /// Communication-phase steps per federation held fixed by the budget
    /// sweep (`rounds × local_iters`).
    pub budget_steps: usize,
}

impl Default for SweepGrids {
    fn default() -> Self {
        Self {
            lambda0: vec![0.1, 1.0, 5.0, 10.0],
            l_t1: vec![0.0, 0.4, 0.5, 0.6, 1.1],
            budget_rounds: vec![1, 2, 3, 5, 10],
            budget_steps: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub partition: PartitionConfig,
    pub hyper: HyperParams,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub sweep: SweepGrids,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::LabelShift(GaussianPoolSpec::default()),
            partition: PartitionConfig::default(),
            hyper: HyperParams::default(),
            seeds: vec![0, 1, 2],
            out_dir: PathBuf::from("results"),
            sweep: SweepGrids::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        let s = &self.sweep;
        if s.lambda0.is_empty() || s.l_t1.is_empty() || s.budget_rounds.is_empty() {
            return Err(Error::Config("sweep grids must not be empty".into()));
        }
        if s.budget_rounds.contains(&0) || s.budget_steps == 0 {
            return Err(Error::Config("budget rounds and steps must be positive".into()));
        }
        if let Some(r) = s.budget_rounds.iter().find(|&&r| s.budget_steps % r != 0) {
            return Err(Error::Config(format!(
                "budget_steps {} is not divisible by {r} rounds",
                s.budget_steps
            )));
        }
        match &self.dataset {
            DatasetSpec::FeatureShift(spec) => {
                if spec.federations < 2 || spec.classes < 2 || spec.dim < 2 || !(spec.shift_scale >= 0.0) {
                    return Err(Error::Config(format!("bad feature-shift dataset {spec:?}")));
                }
            }
            _ => {
                if self.partition.federations == 0 || !(self.partition.alpha > 0.0) {
                    return Err(Error::Config("partition needs ≥1 federation and alpha > 0".into()));
                }
                self.partition.fractions.validate()?;
            }
        }
        self.hyper.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.parse()
    }

    /// Renders every setting, so the output parses back to `self`.
    pub fn to_ini(&self) -> String {
        let mut out = String::new();
        let list = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(", ");
        out.push_str("[dataset]\n");
        let _ = writeln!(out, "kind = {}", self.dataset.kind());
        match &self.dataset {
            DatasetSpec::LabelShift(p) => {
                let _ = writeln!(out, "classes = {}", p.classes);
                let _ = writeln!(out, "dim = {}", p.dim);
                let _ = writeln!(out, "samples = {}", p.samples);
                let _ = writeln!(out, "separation = {}", p.separation);
            }
            DatasetSpec::FeatureShift(f) => {
                let _ = writeln!(out, "classes = {}", f.classes);
                let _ = writeln!(out, "dim = {}", f.dim);
                let _ = writeln!(out, "samples_per_federation = {}", f.samples_per_federation);
                let _ = writeln!(out, "separation = {}", f.separation);
                let _ = writeln!(out, "shift_scale = {}", f.shift_scale);
                let _ = writeln!(out, "federations = {}", f.federations);
            }
            DatasetSpec::Csv(path) => {
                let _ = writeln!(out, "path = {}", path.display());
            }
        }
        let p = &self.partition;
        out.push_str("\n[partition]\n");
        let _ = writeln!(out, "federations = {}", p.federations);
        let _ = writeln!(out, "alpha = {}", p.alpha);
        let _ = writeln!(out, "train = {}", p.fractions.train);
        let _ = writeln!(out, "valid = {}", p.fractions.valid);
        let _ = writeln!(out, "test = {}", p.fractions.test);

        let h = &self.hyper;
        out.push_str("\n[hyper]\n");
        let _ = writeln!(out, "mode = {}", h.method);
        let _ = writeln!(out, "lambda0 = {}", h.lambda0);
        let _ = writeln!(out, "l_t1 = {}", h.l_t1);
        let _ = writeln!(out, "l_t2 = {}", h.l_t2);
        let _ = writeln!(out, "rounds = {}", h.rounds_stage1);
        let _ = writeln!(out, "local_iters = {}", h.local_iters);
        let _ = writeln!(out, "pretrain_iters = {}", h.pretrain_steps());
        let _ = writeln!(out, "personal_iters = {}", h.personal_steps());
        let _ = writeln!(out, "lr = {}", h.lr);
        let _ = writeln!(out, "batch_size = {}", h.batch_size);
        let _ = writeln!(out, "tap = {}", h.tap);
        let _ = writeln!(out, "share_norm = {}", h.share_norm);
        let _ = writeln!(out, "order = {}", h.order);
        let _ = writeln!(out, "prox_mu = {}", h.prox_mu);
        match &h.groups {
            None => out.push_str("# groups = kmeans:3\n"),
            Some(g) => {
                let _ = writeln!(out, "groups = {}", grouping_to_string(g));
            }
        }
        let hidden: Vec<String> = h.hidden.iter().map(usize::to_string).collect();
        let _ = writeln!(out, "hidden = {}", hidden.join(", "));
        let _ = writeln!(out, "normalize = {}", h.normalize);
        let _ = writeln!(out, "early_stop = {}", h.early_stop);
        let _ = writeln!(out, "eval_every = {}", h.eval_every);

        out.push_str("\n[run]\n");
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(out, "seeds = {}", seeds.join(", "));
        let _ = writeln!(out, "out = {}", self.out_dir.display());

        let s = &self.sweep;
        out.push_str("\n[sweep]\n");
        let _ = writeln!(out, "lambda0 = {}", list(&s.lambda0));
        let _ = writeln!(out, "l_t1 = {}", list(&s.l_t1));
        let rounds: Vec<String> = s.budget_rounds.iter().map(usize::to_string).collect();
        let _ = writeln!(out, "budget_rounds = {}", rounds.join(", "));
        let _ = writeln!(out, "budget_steps = {}", s.budget_steps);
        out
    }
}

fn grouping_to_string(g: &Grouping) -> String {
    match g {
        Grouping::KMeans(k) => format!("kmeans:{k}"),
        Grouping::Explicit(groups) => groups
            .iter()
            .map(|g| g.iter().map(usize::to_string).collect::<Vec<_>>().join(" "))
            .collect::<Vec<_>>()
            .join("; "),
    }
}

/// `kmeans:K`, or groups separated by `;` with members separated by spaces
/// or commas (`0 1; 2 3`).
pub fn parse_grouping(s: &str) -> Result<Grouping> {
    let s = s.trim();
    if let Some(k) = s.strip_prefix("kmeans:") {
        return k
            .trim()
            .parse()
            .map(Grouping::KMeans)
            .map_err(|_| Error::Config(format!("bad group count '{k}'")));
    }
    s.split(';')
        .map(|g| {
            g.split([' ', ','])
                .filter(|t| !t.is_empty())
                .map(|t| t.parse::<usize>().map_err(|_| Error::Config(format!("bad group member '{t}'"))))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()
        .map(Grouping::Explicit)
}

fn parse_value<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Parse {
        line,
        message: format!("bad value '{value}' for {key}"),
    })
}

fn parse_list<T: FromStr>(line: usize, key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| parse_value(line, key, t))
        .collect()
}

/// Dataset keys are collected first because defaults depend on `kind`.
#[derive(Default)]
struct DatasetKeys {
    kind: Option<String>,
    path: Option<PathBuf>,
    classes: Option<usize>,
    dim: Option<usize>,
    samples: Option<usize>,
    samples_per_federation: Option<usize>,
    separation: Option<f64>,
    shift_scale: Option<f64>,
    federations: Option<usize>,
}

impl FromStr for ExperimentConfig {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut ds = DatasetKeys::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            // `;` also separates groups inside a value, so it only starts a
            // comment at the beginning of a line.
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() || content.starts_with(';') {
                continue;
            }
            if let Some(name) = content.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| Error::Parse {
                    line,
                    message: "unterminated section header".into(),
                })?;
                section = name.trim().to_string();
                if !matches!(section.as_str(), "dataset" | "partition" | "hyper" | "run" | "sweep") {
                    return Err(Error::Parse {
                        line,
                        message: format!("unknown section [{section}]"),
                    });
                }
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::Parse {
                line,
                message: format!("expected key = value, got '{content}'"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            let h = &mut cfg.hyper;
            match (section.as_str(), key) {
                ("dataset", "kind") => ds.kind = Some(value.to_string()),
                ("dataset", "path") => ds.path = Some(PathBuf::from(value)),
                ("dataset", "classes") => ds.classes = Some(parse_value(line, key, value)?),
                ("dataset", "dim") => ds.dim = Some(parse_value(line, key, value)?),
                ("dataset", "samples") => ds.samples = Some(parse_value(line, key, value)?),
                ("dataset", "samples_per_federation") => ds.samples_per_federation = Some(parse_value(line, key, value)?),
                ("dataset", "separation") => ds.separation = Some(parse_value(line, key, value)?),
                ("dataset", "shift_scale") => ds.shift_scale = Some(parse_value(line, key, value)?),
                ("dataset", "federations") => ds.federations = Some(parse_value(line, key, value)?),
                ("partition", "federations") => cfg.partition.federations = parse_value(line, key, value)?,
                ("partition", "alpha") => cfg.partition.alpha = parse_value(line, key, value)?,
                ("partition", "train") => cfg.partition.fractions.train = parse_value(line, key, value)?,
                ("partition", "valid") => cfg.partition.fractions.valid = parse_value(line, key, value)?,
                ("partition", "test") => cfg.partition.fractions.test = parse_value(line, key, value)?,
                ("hyper", "mode") => h.method = parse_value(line, key, value)?,
                ("hyper", "lambda0") => h.lambda0 = parse_value(line, key, value)?,
                ("hyper", "l_t1") => h.l_t1 = parse_value(line, key, value)?,
                ("hyper", "l_t2") => h.l_t2 = parse_value(line, key, value)?,
                ("hyper", "rounds") => h.rounds_stage1 = parse_value(line, key, value)?,
                ("hyper", "local_iters") => h.local_iters = parse_value(line, key, value)?,
                ("hyper", "pretrain_iters") => h.pretrain_iters = Some(parse_value(line, key, value)?),
                ("hyper", "personal_iters") => h.personal_iters = Some(parse_value(line, key, value)?),
                ("hyper", "lr") => h.lr = parse_value(line, key, value)?,
                ("hyper", "batch_size") => h.batch_size = parse_value(line, key, value)?,
                ("hyper", "tap") => h.tap = parse_value(line, key, value)?,
                ("hyper", "share_norm") => h.share_norm = parse_value(line, key, value)?,
                ("hyper", "order") => h.order = parse_value(line, key, value)?,
                ("hyper", "prox_mu") => h.prox_mu = parse_value(line, key, value)?,
                ("hyper", "groups") => {
                    h.groups = Some(parse_grouping(value).map_err(|e| Error::Parse {
                        line,
                        message: e.to_string(),
                    })?)
                }
                ("hyper", "hidden") => h.hidden = parse_list(line, key, value)?,
                ("hyper", "normalize") => h.normalize = parse_value(line, key, value)?,
                ("hyper", "early_stop") => h.early_stop = parse_value(line, key, value)?,
                ("hyper", "eval_every") => h.eval_every = parse_value(line, key, value)?,
                ("run", "seeds") => cfg.seeds = parse_list(line, key, value)?,
                ("run", "out") => cfg.out_dir = PathBuf::from(value),
                ("sweep", "lambda0") => cfg.sweep.lambda0 = parse_list(line, key, value)?,
                ("sweep", "l_t1") => cfg.sweep.l_t1 = parse_list(line, key, value)?,
                ("sweep", "budget_rounds") => cfg.sweep.budget_rounds = parse_list(line, key, value)?,
                ("sweep", "budget_steps") => cfg.sweep.budget_steps = parse_value(line, key, value)?,
                ("", _) => {
                    return Err(Error::Parse {
                        line,
                        message: format!("key '{key}' outside any section"),
                    })
                }
                (s, k) => {
                    return Err(Error::Parse {
                        line,
                        message: format!("unknown key '{k}' in [{s}]"),
                    })
                }
            }
        }
        cfg.dataset = build_dataset(ds)?;
        Ok(cfg)
    }
}

fn build_dataset(ds: DatasetKeys) -> Result<DatasetSpec> {
    let kind = ds.kind.as_deref().unwrap_or("label_shift");
    let misplaced = |what: &str| Error::Config(format!("dataset key '{what}' does not apply to kind {kind}"));
    match kind {
        "label_shift" => {
            if ds.path.is_some() {
                return Err(misplaced("path"));
            }
            if ds.shift_scale.is_some() || ds.samples_per_federation.is_some() || ds.federations.is_some() {
                return Err(misplaced("shift_scale/samples_per_federation/federations"));
            }
            let d = GaussianPoolSpec::default();
            Ok(DatasetSpec::LabelShift(GaussianPoolSpec {
                classes: ds.classes.unwrap_or(d.classes),
                dim: ds.dim.unwrap_or(d.dim),
                samples: ds.samples.unwrap_or(d.samples),
                separation: ds.separation.unwrap_or(d.separation),
                seed: 0,
            }))
        }
        "feature_shift" => {
            if ds.path.is_some() || ds.samples.is_some() {
                return Err(misplaced("path/samples"));
            }
            let d = FeatureShiftSpec::default();
            Ok(DatasetSpec::FeatureShift(FeatureShiftSpec {
                classes: ds.classes.unwrap_or(d.classes),
                dim: ds.dim.unwrap_or(d.dim),
                federations: ds.federations.unwrap_or(d.federations),
                shift_scale: ds.shift_scale.unwrap_or(d.shift_scale),
                samples_per_federation: ds.samples_per_federation.unwrap_or(d.samples_per_federation),
                separation: ds.separation.unwrap_or(d.separation),
                seed: 0,
            }))
        }
        "csv" => {
            if ds.classes.is_some() || ds.dim.is_some() || ds.samples.is_some() || ds.separation.is_some() {
                return Err(misplaced("generator parameters"));
            }
            ds.path
                .map(DatasetSpec::Csv)
                .ok_or_else(|| Error::Config("dataset kind csv needs a path".into()))
        }
        other => Err(Error::Config(format!(
            "unknown dataset kind '{other}' (expected label_shift, feature_shift or csv)"
        ))),
    }
}
