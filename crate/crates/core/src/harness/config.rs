//! Experiment configuration and its flat `key = value` file format.
//!
//! Blank lines and lines starting with `#` are ignored. Lists are
//! comma-separated. Unknown keys are rejected. Recognised keys, with defaults:
//!
//! | key | default | meaning |
//! |---|---|---|
//! | `method` | `er` | `finetune`, `er`, `agem`, `mir`, `gss`, `offline` |
//! | `optimizer` | `kfac` | `sgd` or `kfac` |
//! | `trick` | `none` | `none`, `lb`, `ss`, `rv`, `ncm` |
//! | `buffer_capacity` | 200 | replay memory size |
//! | `learning_rate` | 0.1 | step size |
//! | `damping` | 1.0 | KFAC Tikhonov damping |
//! | `ema_decay` | 0.9 | KFAC factor decay |
//! | `batch_size` | 10 | stream batch |
//! | `replay_batch` | 10 | examples drawn from memory per step |
//! | `mir_candidates` | 50 | MIR candidate pool |
//! | `gss_refs` | 10 | GSS reference gradients |
//! | `allow_gss_class_incremental` | false | lift the domain-only GSS rule |
//! | `seeds` | `0,...,9` | repetitions |
//! | `hidden` | 64 | hidden widths, empty for a linear model |
//! | `offline_epochs` | 70 | offline baseline epochs |
//! | `offline_batch` | 128 | offline baseline batch |
//! | `test_fraction` | 0.2 | held-out share of each task |
//! | `dataset` | `synthetic` | `synthetic` or a path to an `OCLD` file |
//! | `synthetic_classes` | 20 | generator classes |
//! | `synthetic_per_class` | 250 | generator examples per class |
//! | `synthetic_dim` | 20 | generator dimension |
//! | `synthetic_separation` | 6.0 | generator center distance |
//! | `scenario` | `class` | `class` or `domain` |
//! | `num_tasks` | 10 | class-incremental task count |
//! | `classes_per_task` | 2 | class-incremental task width |
//! | `transform` | `noise` | domain shift: `noise`, `occlusion`, `blur` |
//! | `image_width` | unset | image side for occlusion and blur |
//! | `review_steps` | unset | review SGD steps, unset for one pass |
//! | `review_learning_rate` | unset | review rate, unset for `learning_rate / 10` |
//! | `review_quota` | 50 | per-class cap of the balanced review subset |
//! | `review_every_task` | true | review at every boundary, else only at the end |
//! | `parallel` | true | run seeds on a thread pool |
//! | `buffer_dump_dir` | unset | write each seed's final buffer here (debug) |

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{OclError, Result};
use crate::stream::Transform;

macro_rules! keyword_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub fn name(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $name {
            type Err = OclError;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(OclError::InvalidConfig(format!(
                        concat!("unknown ", stringify!($name), " `{}`"),
                        other
                    ))),
                }
            }
        }
    };
}

keyword_enum!(Method {
    Finetune => "finetune",
    Er => "er",
    Agem => "agem",
    Mir => "mir",
    Gss => "gss",
    Offline => "offline",
});

keyword_enum!(OptimizerKind { Sgd => "sgd", Kfac => "kfac" });

keyword_enum!(Trick { None => "none", Lb => "lb", Ss => "ss", Rv => "rv", Ncm => "ncm" });

keyword_enum!(Scenario { Class => "class", Domain => "domain" });

impl Method {
    pub fn uses_buffer(self) -> bool {
        !matches!(self, Method::Finetune | Method::Offline)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic {
        classes: usize,
        per_class: usize,
        dim: usize,
        separation: f64,
    },
    File(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub method: Method,
    pub optimizer: OptimizerKind,
    pub trick: Trick,
    pub buffer_capacity: usize,
    pub learning_rate: f64,
    pub damping: f64,
    pub ema_decay: f64,
    pub batch_size: usize,
    pub replay_batch: usize,
    pub mir_candidates: usize,
    pub gss_refs: usize,
    pub allow_gss_class_incremental: bool,
    pub seeds: Vec<u64>,
    pub hidden: Vec<usize>,
    pub offline_epochs: usize,
    pub offline_batch: usize,
    pub test_fraction: f64,
    pub data: DataSource,
    pub scenario: Scenario,
    pub num_tasks: usize,
    pub classes_per_task: usize,
    pub transform: Transform,
    pub image_width: Option<usize>,
    pub review_steps: Option<usize>,
    pub review_learning_rate: Option<f64>,
    pub review_quota: usize,
    pub review_every_task: bool,
    pub parallel: bool,
    pub buffer_dump_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            method: Method::Er,
            optimizer: OptimizerKind::Kfac,
            trick: Trick::None,
            buffer_capacity: 200,
            learning_rate: 0.1,
            damping: 1.0,
            ema_decay: 0.9,
            batch_size: 10,
            replay_batch: 10,
            mir_candidates: 50,
            gss_refs: 10,
            allow_gss_class_incremental: false,
            seeds: (0..10).collect(),
            hidden: vec![64],
            offline_epochs: 70,
            offline_batch: 128,
            test_fraction: 0.2,
            data: DataSource::Synthetic {
                classes: 20,
                per_class: 250,
                dim: 20,
                separation: 6.0,
            },
            scenario: Scenario::Class,
            num_tasks: 10,
            classes_per_task: 2,
            transform: Transform::Noise,
            image_width: None,
            review_steps: None,
            review_learning_rate: None,
            review_quota: 50,
            review_every_task: true,
            parallel: true,
            buffer_dump_dir: None,
        }
    }
}

fn parse_value<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| OclError::InvalidConfig(format!("bad value `{value}` for `{key}`")))
}

fn parse_list<V: FromStr>(key: &str, value: &str) -> Result<Vec<V>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

fn parse_optional<V: FromStr>(key: &str, value: &str) -> Result<Option<V>> {
    if value.is_empty() || value == "auto" {
        Ok(None)
    } else {
        parse_value(key, value).map(Some)
    }
}

fn join<V: fmt::Display>(items: &[V]) -> String {
    items
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

fn show_optional<V: fmt::Display>(v: &Option<V>) -> String {
    v.as_ref()
        .map_or_else(|| "auto".to_string(), ToString::to_string)
}

impl ExperimentConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "method" => self.method = value.parse()?,
            "optimizer" => self.optimizer = value.parse()?,
            "trick" => self.trick = value.parse()?,
            "buffer_capacity" => self.buffer_capacity = parse_value(key, value)?,
            "learning_rate" => self.learning_rate = parse_value(key, value)?,
            "damping" => self.damping = parse_value(key, value)?,
            "ema_decay" => self.ema_decay = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "replay_batch" => self.replay_batch = parse_value(key, value)?,
            "mir_candidates" => self.mir_candidates = parse_value(key, value)?,
            "gss_refs" => self.gss_refs = parse_value(key, value)?,
            "allow_gss_class_incremental" => {
                self.allow_gss_class_incremental = parse_value(key, value)?
            }
            "seeds" => self.seeds = parse_list(key, value)?,
            "hidden" => self.hidden = parse_list(key, value)?,
            "offline_epochs" => self.offline_epochs = parse_value(key, value)?,
            "offline_batch" => self.offline_batch = parse_value(key, value)?,
            "test_fraction" => self.test_fraction = parse_value(key, value)?,
            "dataset" => {
                self.data = if value == "synthetic" {
                    match self.data {
                        DataSource::Synthetic { .. } => self.data.clone(),
                        DataSource::File(_) => ExperimentConfig::default().data,
                    }
                } else {
                    DataSource::File(PathBuf::from(value))
                }
            }
            "synthetic_classes"
            | "synthetic_per_class"
            | "synthetic_dim"
            | "synthetic_separation" => {
                let DataSource::Synthetic {
                    classes,
                    per_class,
                    dim,
                    separation,
                } = &mut self.data
                else {
                    return Err(OclError::InvalidConfig(format!(
                        "`{key}` needs `dataset = synthetic`"
                    )));
                };
                match key {
                    "synthetic_classes" => *classes = parse_value(key, value)?,
                    "synthetic_per_class" => *per_class = parse_value(key, value)?,
                    "synthetic_dim" => *dim = parse_value(key, value)?,
                    _ => *separation = parse_value(key, value)?,
                }
            }
            "scenario" => self.scenario = value.parse()?,
            "num_tasks" => self.num_tasks = parse_value(key, value)?,
            "classes_per_task" => self.classes_per_task = parse_value(key, value)?,
            "transform" => {
                self.transform = value
                    .parse()
                    .map_err(|_| OclError::InvalidConfig(format!("unknown transform `{value}`")))?
            }
            "image_width" => self.image_width = parse_optional(key, value)?,
            "review_steps" => self.review_steps = parse_optional(key, value)?,
            "review_learning_rate" => self.review_learning_rate = parse_optional(key, value)?,
            "review_quota" => self.review_quota = parse_value(key, value)?,
            "review_every_task" => self.review_every_task = parse_value(key, value)?,
            "parallel" => self.parallel = parse_value(key, value)?,
            "buffer_dump_dir" => self.buffer_dump_dir = parse_optional(key, value)?,
            other => return Err(OclError::InvalidConfig(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                OclError::InvalidConfig(format!("line {}: expected `key = value`", n + 1))
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| OclError::io(path, e))?;
        Self::from_text(&text)
    }

    /// Every key with its current value, in a fixed order. Feeding the
    /// result back through [`ExperimentConfig::from_text`] reproduces `self`.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let mut out = vec![
            ("method", self.method.to_string()),
            ("optimizer", self.optimizer.to_string()),
            ("trick", self.trick.to_string()),
            ("buffer_capacity", self.buffer_capacity.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("damping", self.damping.to_string()),
            ("ema_decay", self.ema_decay.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("replay_batch", self.replay_batch.to_string()),
            ("mir_candidates", self.mir_candidates.to_string()),
            ("gss_refs", self.gss_refs.to_string()),
            (
                "allow_gss_class_incremental",
                self.allow_gss_class_incremental.to_string(),
            ),
            ("seeds", join(&self.seeds)),
            ("hidden", join(&self.hidden)),
            ("offline_epochs", self.offline_epochs.to_string()),
            ("offline_batch", self.offline_batch.to_string()),
            ("test_fraction", self.test_fraction.to_string()),
        ];
        match &self.data {
            DataSource::Synthetic {
                classes,
                per_class,
                dim,
                separation,
            } => out.extend([
                ("dataset", "synthetic".to_string()),
                ("synthetic_classes", classes.to_string()),
                ("synthetic_per_class", per_class.to_string()),
                ("synthetic_dim", dim.to_string()),
                ("synthetic_separation", separation.to_string()),
            ]),
            DataSource::File(p) => out.push(("dataset", p.display().to_string())),
        }
        out.extend([
            ("scenario", self.scenario.to_string()),
            ("num_tasks", self.num_tasks.to_string()),
            ("classes_per_task", self.classes_per_task.to_string()),
            ("transform", self.transform.to_string()),
            ("image_width", show_optional(&self.image_width)),
            ("review_steps", show_optional(&self.review_steps)),
            (
                "review_learning_rate",
                show_optional(&self.review_learning_rate),
            ),
            ("review_quota", self.review_quota.to_string()),
            ("review_every_task", self.review_every_task.to_string()),
            ("parallel", self.parallel.to_string()),
            (
                "buffer_dump_dir",
                self.buffer_dump_dir
                    .as_ref()
                    .map_or_else(|| "auto".into(), |p| p.display().to_string()),
            ),
        ]);
        out
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn review_rate(&self) -> f64 {
        self.review_learning_rate
            .unwrap_or(self.learning_rate / 10.0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(OclError::InvalidConfig(m.to_string()));
        if self.seeds.is_empty() {
            return bad("seed list is empty");
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|p| p[0] == p[1]) {
            return bad("seed list repeats a seed");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.damping > 0.0 && self.damping.is_finite()) {
            return bad("damping must be positive");
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad("ema_decay must lie in [0, 1)");
        }
        if self.batch_size == 0 || self.replay_batch == 0 || self.offline_batch == 0 {
            return bad("batch sizes must be positive");
        }
        if self.mir_candidates == 0 || self.gss_refs == 0 || self.review_quota == 0 {
            return bad("mir_candidates, gss_refs and review_quota must be positive");
        }
        if self.method.uses_buffer() && self.buffer_capacity == 0 {
            return bad("buffer_capacity must be positive");
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be positive");
        }
        if !(0.0..1.0).contains(&self.test_fraction) || self.test_fraction == 0.0 {
            return bad("test_fraction must lie in (0, 1)");
        }
        if self.review_learning_rate.is_some_and(|r| !(r > 0.0)) {
            return bad("review_learning_rate must be positive");
        }
        if self.method == Method::Gss
            && self.scenario == Scenario::Class
            && !self.allow_gss_class_incremental
        {
            return bad("gss runs on domain-incremental streams only; set allow_gss_class_incremental = true to override");
        }
        if matches!(self.trick, Trick::Rv | Trick::Ncm) && !self.method.uses_buffer() {
            return bad("the rv and ncm tricks need a replay method");
        }
        if self.method == Method::Offline && self.trick != Trick::None {
            return bad("the offline baseline takes no trick");
        }
        Ok(())
    }
}
