//! Run configuration file.
//!
//! ```toml
//! [model]
//! d = 16
//! n_layers = 2
//! n_heads = 1
//! channels = 1
//! image_h = 8
//! image_w = 8
//! patch_h = 4
//! patch_w = 4
//! n_classes = 4
//! teb_variant = "minimal"      # or "full"
//! position_embedding = false
//!
//! [train]
//! mode = "row_column_shuffle"  # vanilla | row_shuffle | row_column_shuffle
//! lr = 0.05
//! epochs = 5
//! batch_size = 16
//! mixup_prob = 0.0
//! seed = 7
//!
//! [transport]
//! kind = "loopback"            # or "tcp" with address = "127.0.0.1:7878"
//!
//! [data]
//! source = "synthetic"         # or "csv" with path / test_path
//! task = "plain"               # or "order_dependent"
//! n = 1000
//! n_test = 200
//! ```

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::data::{self, Task};
use crate::edgemodel::{EdgeGeometry, Sample};
use crate::encoder::TebVariant;
use crate::error::{Error, Result};
use crate::shuffle::{ShuffleMode, TrainConfig};
use crate::tensor::Activation;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelSection {
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub channels: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub n_classes: usize,
    pub teb_variant: TebVariant,
    pub position_embedding: bool,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSection {
    pub mode: ShuffleMode,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub mixup_prob: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransportSection {
    Loopback,
    Tcp { address: String },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSection {
    Synthetic { task: Task, n: usize, n_test: usize },
    Csv { path: PathBuf, test_path: Option<PathBuf> },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainSection,
    pub transport: TransportSection,
    pub data: DataSection,
}

static EMPTY: std::sync::LazyLock<toml::Table> = std::sync::LazyLock::new(toml::Table::new);

struct Section<'a> {
    name: &'static str,
    table: &'a toml::Table,
}

impl<'a> Section<'a> {
    fn of(root: &'a toml::Table, name: &'static str, allowed: &[&str]) -> Result<Self> {
        let table = match root.get(name) {
            Some(toml::Value::Table(t)) => t,
            Some(_) => return Err(Error::config(name, "must be a table")),
            // An absent section takes every default.
            None => &EMPTY,
        };
        for k in table.keys() {
            if !allowed.contains(&k.as_str()) {
                return Err(Error::config(format!("{name}.{k}"), "unknown field"));
            }
        }
        Ok(Self { name, table })
    }

    fn field(&self, key: &str) -> String {
        format!("{}.{key}", self.name)
    }

    fn int(&self, key: &str, default: Option<i64>) -> Result<i64> {
        match self.table.get(key) {
            Some(toml::Value::Integer(v)) => Ok(*v),
            Some(_) => Err(Error::config(self.field(key), "must be an integer")),
            None => default.ok_or_else(|| Error::config(self.field(key), "missing")),
        }
    }

    fn count(&self, key: &str, default: Option<usize>, min: usize) -> Result<usize> {
        let v = self.int(key, default.map(|d| d as i64))?;
        if v < min as i64 {
            return Err(Error::config(self.field(key), format!("must be at least {min}, got {v}")));
        }
        usize::try_from(v).map_err(|_| Error::config(self.field(key), "out of range"))
    }

    fn float(&self, key: &str, default: Option<f64>) -> Result<f64> {
        let v = match self.table.get(key) {
            Some(toml::Value::Float(v)) => *v,
            Some(toml::Value::Integer(v)) => *v as f64,
            Some(_) => return Err(Error::config(self.field(key), "must be a number")),
            None => default.ok_or_else(|| Error::config(self.field(key), "missing"))?,
        };
        if !v.is_finite() {
            return Err(Error::config(self.field(key), "must be finite"));
        }
        Ok(v)
    }

    fn boolean(&self, key: &str, default: bool) -> Result<bool> {
        match self.table.get(key) {
            Some(toml::Value::Boolean(b)) => Ok(*b),
            Some(_) => Err(Error::config(self.field(key), "must be true or false")),
            None => Ok(default),
        }
    }

    fn string(&self, key: &str, default: Option<&str>) -> Result<String> {
        match self.table.get(key) {
            Some(toml::Value::String(s)) => Ok(s.clone()),
            Some(_) => Err(Error::config(self.field(key), "must be a string")),
            None => default
                .map(str::to_owned)
                .ok_or_else(|| Error::config(self.field(key), "missing")),
        }
    }

    fn choice<T: Copy>(&self, key: &str, default: Option<&str>, options: &[(&str, T)]) -> Result<T> {
        let s = self.string(key, default)?;
        options.iter().find(|(n, _)| *n == s).map(|(_, v)| *v).ok_or_else(|| {
            let names: Vec<_> = options.iter().map(|(n, _)| *n).collect();
            Error::config(self.field(key), format!("{s:?} is not one of {}", names.join(", ")))
        })
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let root: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Parse(e.to_string()))?;
        for k in root.keys() {
            if !["model", "train", "transport", "data"].contains(&k.as_str()) {
                return Err(Error::config(k.clone(), "unknown section"));
            }
        }
        let m = Section::of(
            &root,
            "model",
            &[
                "p", "d", "n_layers", "n_heads", "channels", "image_h", "image_w", "patch_h", "patch_w",
                "n_classes", "teb_variant", "position_embedding", "activation",
            ],
        )?;
        let model = ModelSection {
            d: m.count("d", None, 1)?,
            n_layers: m.count("n_layers", Some(1), 1)?,
            n_heads: m.count("n_heads", Some(1), 1)?,
            channels: m.count("channels", Some(1), 1)?,
            image_h: m.count("image_h", Some(8), 1)?,
            image_w: m.count("image_w", Some(8), 1)?,
            patch_h: m.count("patch_h", Some(4), 1)?,
            patch_w: m.count("patch_w", Some(4), 1)?,
            n_classes: m.count("n_classes", Some(2), 2)?,
            teb_variant: m.choice(
                "teb_variant",
                Some("minimal"),
                &[("minimal", TebVariant::Minimal), ("full", TebVariant::Full)],
            )?,
            position_embedding: m.boolean("position_embedding", false)?,
            activation: m.choice("activation", Some("relu"), &[("relu", Activation::Relu), ("tanh", Activation::Tanh)])?,
        };
        if model.image_h % model.patch_h != 0 {
            return Err(Error::config("model.patch_h", "must divide model.image_h"));
        }
        if model.image_w % model.patch_w != 0 {
            return Err(Error::config("model.patch_w", "must divide model.image_w"));
        }
        let p = (model.image_h / model.patch_h) * (model.image_w / model.patch_w);
        if m.table.contains_key("p") && m.count("p", None, 1)? != p {
            return Err(Error::config("model.p", format!("must equal the patch count {p}")));
        }
        if model.d % model.n_heads != 0 {
            return Err(Error::config("model.n_heads", "must divide model.d"));
        }

        let t = Section::of(&root, "train", &["mode", "lr", "epochs", "batch_size", "mixup_prob", "seed"])?;
        let seed = t.int("seed", Some(0))?;
        let train = TrainSection {
            mode: t.choice(
                "mode",
                Some("vanilla"),
                &[
                    ("vanilla", ShuffleMode::Vanilla),
                    ("row_shuffle", ShuffleMode::RowShuffle),
                    ("row_column_shuffle", ShuffleMode::RowColumnShuffle),
                ],
            )?,
            lr: t.float("lr", Some(0.05))?,
            epochs: t.count("epochs", Some(1), 0)?,
            batch_size: t.count("batch_size", Some(16), 1)?,
            mixup_prob: t.float("mixup_prob", Some(0.0))?,
            seed: u64::try_from(seed).map_err(|_| Error::config("train.seed", "must be non-negative"))?,
        };
        if train.lr <= 0.0 {
            return Err(Error::config("train.lr", "must be positive"));
        }
        if !(0.0..=1.0).contains(&train.mixup_prob) {
            return Err(Error::config("train.mixup_prob", "must lie in [0, 1]"));
        }
        if train.mixup_prob > 0.0 && train.batch_size < 2 {
            return Err(Error::config("train.batch_size", "CutMix needs at least 2"));
        }
        if train.mode == ShuffleMode::RowColumnShuffle && model.n_heads != 1 {
            return Err(Error::config("model.n_heads", "row_column_shuffle requires 1 head"));
        }

        let transport = if root.contains_key("transport") {
            let tr = Section::of(&root, "transport", &["kind", "address"])?;
            match tr.choice("kind", Some("loopback"), &[("loopback", false), ("tcp", true)])? {
                false => TransportSection::Loopback,
                true => {
                    let address = tr.string("address", None)?;
                    if !address.contains(':') {
                        return Err(Error::config("transport.address", "expected host:port"));
                    }
                    TransportSection::Tcp { address }
                }
            }
        } else {
            TransportSection::Loopback
        };

        let ds = Section::of(&root, "data", &["source", "task", "n", "n_test", "path", "test_path"])?;
        let data = match ds.choice("source", Some("synthetic"), &[("synthetic", false), ("csv", true)])? {
            false => DataSection::Synthetic {
                task: ds.choice(
                    "task",
                    Some("plain"),
                    &[("plain", Task::Plain), ("order_dependent", Task::OrderDependent)],
                )?,
                n: ds.count("n", Some(1000), 1)?,
                n_test: ds.count("n_test", Some(200), 0)?,
            },
            true => DataSection::Csv {
                path: PathBuf::from(ds.string("path", None)?),
                test_path: ds.table.contains_key("test_path").then(|| ds.string("test_path", None)).transpose()?.map(PathBuf::from),
            },
        };
        if let DataSection::Synthetic { task, .. } = &data {
            match task {
                Task::Plain if model.n_classes > 4 => {
                    return Err(Error::config("model.n_classes", "the plain task supports at most 4 classes"))
                }
                Task::OrderDependent if model.n_classes != 2 => {
                    return Err(Error::config("model.n_classes", "order_dependent needs exactly 2 classes"))
                }
                Task::OrderDependent if !model.position_embedding => {
                    return Err(Error::config("model.position_embedding", "order_dependent needs position embeddings"))
                }
                Task::OrderDependent if p < 2 => {
                    return Err(Error::config("model.patch_h", "order_dependent needs at least 2 patches"))
                }
                _ => {}
            }
        }

        let cfg = Self { model, train, transport, data };
        cfg.train_config().validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    pub fn geometry(&self) -> EdgeGeometry {
        let m = &self.model;
        EdgeGeometry {
            channels: m.channels,
            image_h: m.image_h,
            image_w: m.image_w,
            patch_h: m.patch_h,
            patch_w: m.patch_w,
            d: m.d,
            n_classes: m.n_classes,
            position_embedding: m.position_embedding,
        }
    }

    pub fn p(&self) -> usize {
        self.geometry().p()
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            mode: self.train.mode,
            mixup_prob: self.train.mixup_prob,
            lr: self.train.lr,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            seed: self.train.seed,
            geometry: self.geometry(),
            n_layers: self.model.n_layers,
            n_heads: self.model.n_heads,
            teb_variant: self.model.teb_variant,
            activation: self.model.activation,
        }
    }

    /// Train and test sets; relative CSV paths resolve against `base`.
    pub fn datasets(&self, base: &Path) -> Result<(Vec<Sample>, Vec<Sample>)> {
        let geom = self.geometry();
        match &self.data {
            DataSection::Synthetic { task, n, n_test } => data::train_test(&geom, *task, *n, *n_test, self.train.seed),
            DataSection::Csv { path, test_path } => {
                let train = data::read_csv(base.join(path), &geom)?;
                let test = match test_path {
                    Some(p) => data::read_csv(base.join(p), &geom)?,
                    None => Vec::new(),
                };
                Ok((train, test))
            }
        }
    }
}
