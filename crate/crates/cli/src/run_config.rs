//! Flat `key = value` run configuration: every model key plus paths and
//! command options.

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sethpose::config::{ModelConfig, SequenceMode};
use sethpose::data::{DatasetHeader, SplitBy};
use sethpose::metrics::PckPooling;
use sethpose::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
    Both,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::One => "1",
            Stage::Two => "2",
            Stage::Both => "both",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" => Ok(Stage::One),
            "2" => Ok(Stage::Two),
            "both" => Ok(Stage::Both),
            _ => Err(Error::Config(format!("stage must be 1, 2 or both, got `{s}`"))),
        }
    }
}

/// Which side of the split manifest a command reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Subset {
    All,
    Train,
    Test,
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Subset::All => "all",
            Subset::Train => "train",
            Subset::Test => "test",
        })
    }
}

impl FromStr for Subset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Subset::All),
            "train" => Ok(Subset::Train),
            "test" => Ok(Subset::Test),
            _ => Err(Error::Config(format!(
                "subset must be all, train or test, got `{s}`"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub mode: SequenceMode,
    pub subjects: u32,
    pub activities: u32,
    pub sequences: u32,
    pub occlusion: f64,
    pub split: SplitBy,
    /// Held-out ids; empty means the default choice for the id count.
    pub test_ids: Vec<u32>,
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub stage: Stage,
    pub ablation: bool,
    /// Score the ground truth against itself instead of running a model.
    pub ground_truth: bool,
    pub train_on: Subset,
    pub eval_on: Subset,
    pub pck_min: f64,
    pub pck_max: f64,
    pub pck_count: usize,
    pub pck_pooling: PckPooling,
    pub workers: usize,
    pub sweep_heads: Vec<usize>,
    pub gradcheck_eps: f64,
    pub gradcheck_tolerance: f64,
    /// Keys given a value by a file or flag rather than left at default.
    explicit: BTreeSet<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            mode: SequenceMode::Temporal,
            subjects: 4,
            activities: 2,
            sequences: 2,
            occlusion: 0.0,
            split: SplitBy::Subject,
            test_ids: Vec::new(),
            data: None,
            checkpoint: None,
            out: None,
            stage: Stage::Both,
            ablation: false,
            ground_truth: false,
            train_on: Subset::All,
            eval_on: Subset::All,
            pck_min: 0.2,
            pck_max: 0.5,
            pck_count: 100,
            pck_pooling: PckPooling::PerJoint,
            workers: 1,
            sweep_heads: vec![1, 2, 4, 8, 16],
            gradcheck_eps: sethpose::gradcheck::DEFAULT_EPS,
            gradcheck_tolerance: sethpose::gradcheck::DEFAULT_TOLERANCE,
            explicit: BTreeSet::new(),
        }
    }
}

/// Keys that are not model hyperparameters.
const RUN_KEYS: [&str; 23] = [
    "mode",
    "subjects",
    "activities",
    "sequences",
    "occlusion",
    "split",
    "test_ids",
    "data",
    "checkpoint",
    "out",
    "stage",
    "ablation",
    "ground_truth",
    "train_on",
    "eval_on",
    "pck.min",
    "pck.max",
    "pck.count",
    "pck.pooling",
    "workers",
    "sweep.heads",
    "gradcheck.eps",
    "gradcheck.tolerance",
];

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_list<V: FromStr>(key: &str, value: &str) -> Result<Vec<V>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<V: ToString>(v: &[V]) -> String {
    v.iter().map(V::to_string).collect::<Vec<_>>().join(",")
}

fn path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or(String::new(), |p| p.display().to_string())
}

impl RunConfig {
    /// Sets one key. Unknown keys are rejected by name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "mode" => self.mode = v.parse()?,
            "subjects" => self.subjects = parse(key, v)?,
            "activities" => self.activities = parse(key, v)?,
            "sequences" => self.sequences = parse(key, v)?,
            "occlusion" => self.occlusion = parse(key, v)?,
            "split" => self.split = v.parse()?,
            "test_ids" => self.test_ids = parse_list(key, v)?,
            "data" => self.data = path(v),
            "checkpoint" => self.checkpoint = path(v),
            "out" => self.out = path(v),
            "stage" => self.stage = v.parse()?,
            "ablation" => self.ablation = parse(key, v)?,
            "ground_truth" => self.ground_truth = parse(key, v)?,
            "train_on" => self.train_on = v.parse()?,
            "eval_on" => self.eval_on = v.parse()?,
            "pck.min" => self.pck_min = parse(key, v)?,
            "pck.max" => self.pck_max = parse(key, v)?,
            "pck.count" => self.pck_count = parse(key, v)?,
            "pck.pooling" => {
                self.pck_pooling = match v {
                    "joint" => PckPooling::PerJoint,
                    "frame" => PckPooling::PerFrame,
                    _ => {
                        return Err(Error::Config(format!(
                            "pck.pooling must be joint or frame, got `{v}`"
                        )))
                    }
                }
            }
            "workers" => self.workers = parse(key, v)?,
            "sweep.heads" => self.sweep_heads = parse_list(key, v)?,
            "gradcheck.eps" => self.gradcheck_eps = parse(key, v)?,
            "gradcheck.tolerance" => self.gradcheck_tolerance = parse(key, v)?,
            _ => self.model.set(key, v)?,
        }
        self.explicit.insert(key.to_string());
        Ok(())
    }

    /// Applies `key = value` lines. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "{}:{}: expected `key = value`",
                    origin.display(),
                    i + 1
                ))
            })?;
            self.set(k.trim(), v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("{}:{}: {m}", origin.display(), i + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, file: &Path) -> Result<()> {
        let text = std::fs::read_to_string(file).map_err(|e| Error::io(file, e))?;
        self.apply_text(&text, file)
    }

    /// Applies only the model keys of a resolved config file.
    pub fn apply_model_keys(&mut self, file: &Path) -> Result<()> {
        let mut other = RunConfig::default();
        other.apply_file(file)?;
        self.model = other.model;
        self.explicit
            .extend(other.explicit.into_iter().filter(|k| !RUN_KEYS.contains(&k.as_str())));
        Ok(())
    }

    /// Applies a `KEY=VALUE` command-line override.
    pub fn apply_override(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{pair}` is not KEY=VALUE")))?;
        self.set(k.trim(), v)
    }

    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    /// Sequence length for generated data: the explicit `seq_len`, else the
    /// default of the mode.
    pub fn generated_len(&self) -> usize {
        if self.is_explicit("seq_len") {
            self.model.seq_len
        } else {
            self.mode.default_len()
        }
    }

    /// Takes sequence length, image size and channel count from a dataset
    /// unless they were set explicitly, in which case they must agree.
    pub fn adopt_header(&mut self, h: &DatasetHeader) -> Result<()> {
        let m = &mut self.model;
        for (key, field, want) in [
            ("seq_len", &mut m.seq_len, h.seq_len),
            ("img_h", &mut m.img_h, h.img_h),
            ("img_w", &mut m.img_w, h.img_w),
            ("channels", &mut m.channels, h.channels),
        ] {
            if self.explicit.contains(key) && *field != want {
                return Err(Error::Config(format!(
                    "`{key}` is {} but the dataset has {want}",
                    *field
                )));
            }
            *field = want;
        }
        Ok(())
    }

    pub fn thresholds(&self) -> Result<Vec<f64>> {
        if !(self.pck_min < self.pck_max) || self.pck_count < 2 {
            return Err(Error::Config(
                "pck.min must be below pck.max and pck.count at least 2".into(),
            ));
        }
        Ok(sethpose::metrics::linspace(self.pck_min, self.pck_max, self.pck_count))
    }

    /// Every key, model keys first, as `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut out = self.model.to_kv();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("mode", self.mode.to_string());
        put("subjects", self.subjects.to_string());
        put("activities", self.activities.to_string());
        put("sequences", self.sequences.to_string());
        put("occlusion", self.occlusion.to_string());
        put("split", self.split.to_string());
        put("test_ids", join(&self.test_ids));
        put("data", show(&self.data));
        put("checkpoint", show(&self.checkpoint));
        put("out", show(&self.out));
        put("stage", self.stage.to_string());
        put("ablation", self.ablation.to_string());
        put("ground_truth", self.ground_truth.to_string());
        put("train_on", self.train_on.to_string());
        put("eval_on", self.eval_on.to_string());
        put("pck.min", self.pck_min.to_string());
        put("pck.max", self.pck_max.to_string());
        put("pck.count", self.pck_count.to_string());
        put(
            "pck.pooling",
            match self.pck_pooling {
                PckPooling::PerJoint => "joint".into(),
                PckPooling::PerFrame => "frame".into(),
            },
        );
        put("workers", self.workers.to_string());
        put("sweep.heads", join(&self.sweep_heads));
        put("gradcheck.eps", self.gradcheck_eps.to_string());
        put("gradcheck.tolerance", self.gradcheck_tolerance.to_string());
        out
    }
}
