//! Run configuration: a flat file of dotted `key = value` lines (TOML
//! syntax), resolved against defaults and command-line overrides.
//!
//! Every key has a default, so resolution is total. The resolved config is
//! rendered back as sorted `key = value` lines, which is the form echoed into
//! output directories.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use toml::Value;

/// A parsed config value.
pub use toml::Value as ConfigValue;

use crate::data::{
    load_cifar10_files, load_idx, synth_data, take_fraction, AugmentConfig, Role, SynthSpec,
};
use crate::error::{Error, Result};
use crate::optim::{LrSchedule, SgdConfig};
use crate::scheduler::{Injection, InjectionPolicy, PreparedData, TrainSettings};

/// Environment variable naming the directory relative dataset paths are
/// resolved against.
pub const DATA_ROOT_ENV: &str = "PBITT_DATA_ROOT";

pub const CONFIG_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic,
    /// CIFAR-10 binary batches.
    Cifar10 { train: Vec<PathBuf>, test: Vec<PathBuf> },
    /// IDX image/label pairs.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        classes: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum PassiveSource {
    None,
    Synthetic,
    Cifar10 { files: Vec<PathBuf> },
    Idx { images: PathBuf, labels: PathBuf, classes: Option<usize> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub active: DataSource,
    pub passive: PassiveSource,
    pub synth: SynthSpec,
    pub synth_seed: u64,
    /// Fraction of the active training split kept (stratified).
    pub fraction: f64,
    pub train: TrainSettings,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            active: DataSource::Synthetic,
            passive: PassiveSource::Synthetic,
            synth: SynthSpec::default(),
            synth_seed: 0,
            fraction: 1.0,
            train: TrainSettings::default(),
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

type Table = BTreeMap<String, Value>;

fn flatten(prefix: &str, table: &toml::Table, out: &mut Table) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

/// Parses the text of a config file into dotted keys.
pub fn parse_keys(text: &str, origin: &str) -> Result<Table> {
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::Config(format!("{origin}: {}", e.message())))?;
    let mut out = Table::new();
    flatten("", &table, &mut out);
    Ok(out)
}

/// Parses a `key=value` override. Values that are not valid TOML are taken
/// as bare strings, so `passive.source=none` works without quoting.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {s:?} is not key=value")))?;
    let key = k.trim().to_string();
    let raw = v.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    Ok((key, value))
}

struct Reader {
    keys: Table,
    root: Option<PathBuf>,
}

impl Reader {
    fn take(&mut self, key: &str) -> Option<Value> {
        self.keys.remove(key)
    }

    fn string(&mut self, key: &str, default: &str) -> Result<String> {
        match self.take(key) {
            None => Ok(default.to_string()),
            Some(Value::String(s)) => Ok(s),
            Some(v) => Err(Error::Config(format!("{key}: expected a string, got {v}"))),
        }
    }

    fn float(&mut self, key: &str, default: f64) -> Result<f64> {
        match self.take(key) {
            None => Ok(default),
            Some(Value::Float(f)) => Ok(f),
            Some(Value::Integer(i)) => Ok(i as f64),
            Some(v) => Err(Error::Config(format!("{key}: expected a number, got {v}"))),
        }
    }

    fn uint(&mut self, key: &str, default: u64) -> Result<u64> {
        match self.take(key) {
            None => Ok(default),
            Some(Value::Integer(i)) if i >= 0 => Ok(i as u64),
            Some(v) => Err(Error::Config(format!("{key}: expected a non-negative integer, got {v}"))),
        }
    }

    fn usize(&mut self, key: &str, default: usize) -> Result<usize> {
        self.uint(key, default as u64).map(|v| v as usize)
    }

    fn boolean(&mut self, key: &str, default: bool) -> Result<bool> {
        match self.take(key) {
            None => Ok(default),
            Some(Value::Boolean(b)) => Ok(b),
            Some(v) => Err(Error::Config(format!("{key}: expected true or false, got {v}"))),
        }
    }

    fn usizes(&mut self, key: &str, default: &[usize]) -> Result<Vec<usize>> {
        match self.take(key) {
            None => Ok(default.to_vec()),
            Some(Value::Array(items)) => items
                .into_iter()
                .map(|v| match v {
                    Value::Integer(i) if i >= 0 => Ok(i as usize),
                    other => Err(Error::Config(format!("{key}: expected non-negative integers, got {other}"))),
                })
                .collect(),
            Some(v) => Err(Error::Config(format!("{key}: expected an array of integers, got {v}"))),
        }
    }

    fn path(&mut self, key: &str) -> Result<PathBuf> {
        let s = self.string(key, "")?;
        if s.is_empty() {
            return Err(Error::Config(format!("{key} is required for this data source")));
        }
        Ok(self.resolve(&s))
    }

    fn paths(&mut self, key: &str) -> Result<Vec<PathBuf>> {
        let items = match self.take(key) {
            None => return Err(Error::Config(format!("{key} is required for this data source"))),
            Some(Value::String(s)) => vec![s],
            Some(Value::Array(items)) => items
                .into_iter()
                .map(|v| match v {
                    Value::String(s) => Ok(s),
                    other => Err(Error::Config(format!("{key}: expected paths, got {other}"))),
                })
                .collect::<Result<_>>()?,
            Some(v) => return Err(Error::Config(format!("{key}: expected a path or array of paths, got {v}"))),
        };
        Ok(items.iter().map(|s| self.resolve(s)).collect())
    }

    fn resolve(&self, s: &str) -> PathBuf {
        let p = PathBuf::from(s);
        match &self.root {
            Some(root) if p.is_relative() => root.join(p),
            _ => p,
        }
    }

    fn classes(&mut self, key: &str) -> Result<Option<usize>> {
        let c = self.usize(key, 0)?;
        Ok((c > 0).then_some(c))
    }
}

impl RunConfig {
    /// Resolves a config from dotted keys and overrides (applied in order,
    /// last wins). `data_root` anchors relative dataset paths.
    pub fn resolve(file_keys: Table, overrides: &[(String, Value)], data_root: Option<&Path>) -> Result<Self> {
        let mut keys = file_keys;
        for (k, v) in overrides {
            keys.insert(k.clone(), v.clone());
        }
        let mut r = Reader {
            keys,
            root: data_root.map(Path::to_path_buf),
        };
        let version = r.uint("config.version", CONFIG_FORMAT_VERSION as u64)?;
        if version != CONFIG_FORMAT_VERSION as u64 {
            return Err(Error::Config(format!(
                "config.version {version} is not supported (expected {CONFIG_FORMAT_VERSION})"
            )));
        }
        let d = RunConfig::default();
        let dt = &d.train;

        let active = match r.string("data.active.source", "synthetic")?.as_str() {
            "synthetic" => DataSource::Synthetic,
            "cifar10" => DataSource::Cifar10 {
                train: r.paths("data.active.train_files")?,
                test: r.paths("data.active.test_files")?,
            },
            "idx" => DataSource::Idx {
                train_images: r.path("data.active.train_images")?,
                train_labels: r.path("data.active.train_labels")?,
                test_images: r.path("data.active.test_images")?,
                test_labels: r.path("data.active.test_labels")?,
                classes: r.classes("data.active.classes")?,
            },
            other => {
                return Err(Error::Config(format!(
                    "data.active.source: expected synthetic, cifar10 or idx, got {other:?}"
                )))
            }
        };
        let passive = match r.string("data.passive.source", "synthetic")?.as_str() {
            "none" => PassiveSource::None,
            "synthetic" => PassiveSource::Synthetic,
            "cifar10" => PassiveSource::Cifar10 {
                files: r.paths("data.passive.files")?,
            },
            "idx" => PassiveSource::Idx {
                images: r.path("data.passive.images")?,
                labels: r.path("data.passive.labels")?,
                classes: r.classes("data.passive.classes")?,
            },
            other => {
                return Err(Error::Config(format!(
                    "data.passive.source: expected none, synthetic, cifar10 or idx, got {other:?}"
                )))
            }
        };

        let ds = &d.synth;
        let image = r.usizes("synth.image", &ds.image)?;
        let image: [usize; 3] = image
            .try_into()
            .map_err(|v: Vec<usize>| Error::Config(format!("synth.image: expected [C, H, W], got {} values", v.len())))?;
        let synth = SynthSpec {
            image,
            active_classes: r.usize("synth.active_classes", ds.active_classes)?,
            passive_classes: r.usize("synth.passive_classes", ds.passive_classes)?,
            active_train: r.usize("synth.active_train", ds.active_train)?,
            active_test: r.usize("synth.active_test", ds.active_test)?,
            passive_count: r.usize("synth.passive_count", ds.passive_count)?,
            blobs: r.usize("synth.blobs", ds.blobs)?,
            distractors: r.usize("synth.distractors", ds.distractors)?,
            jitter: r.float("synth.jitter", ds.jitter)?,
            noise: r.float("synth.noise", ds.noise)?,
        };
        let synth_seed = r.uint("synth.seed", d.synth_seed)?;

        let g = match r.take("policy.g") {
            None => dt.policy.g,
            Some(Value::Integer(i)) if i >= 1 => Injection::Every(i as usize),
            Some(Value::Integer(i)) => {
                return Err(Error::Config(format!("policy.g must be >= 1 (or \"inf\"), got {i}")))
            }
            Some(Value::Float(f)) if f.is_infinite() && f > 0.0 => Injection::Never,
            Some(Value::String(s)) => s.parse()?,
            Some(v) => return Err(Error::Config(format!("policy.g: expected an integer or \"inf\", got {v}"))),
        };
        let g = if passive == PassiveSource::None { Injection::Never } else { g };
        let policy = InjectionPolicy {
            g,
            active_batch: r.usize("policy.active_batch", dt.policy.active_batch)?,
            passive_batch: r.usize("policy.passive_batch", dt.policy.passive_batch)?,
        };

        let crop_h = r.usize("augment.crop_height", 0)?;
        let crop_w = r.usize("augment.crop_width", 0)?;
        let augment = AugmentConfig {
            enabled: r.boolean("augment.enabled", dt.augment.enabled)?,
            pad: r.usize("augment.pad", dt.augment.pad)?,
            crop: match (crop_h, crop_w) {
                (0, 0) => None,
                (h, w) if h > 0 && w > 0 => Some((h, w)),
                _ => return Err(Error::Config("augment.crop_height and augment.crop_width must be set together".into())),
            },
            flip_prob: r.float("augment.flip_prob", dt.augment.flip_prob)?,
        };

        let train = TrainSettings {
            trunk_widths: r.usizes("model.trunk_widths", &dt.trunk_widths)?,
            active_hidden: r.usizes("model.active_hidden", &dt.active_hidden)?,
            passive_hidden: r.usizes("model.passive_hidden", &dt.passive_hidden)?,
            policy,
            sgd: SgdConfig {
                momentum: r.float("optimizer.momentum", dt.sgd.momentum)?,
                weight_decay: r.float("optimizer.weight_decay", dt.sgd.weight_decay)?,
                decay_bn: r.boolean("optimizer.decay_bn", dt.sgd.decay_bn)?,
            },
            schedule: LrSchedule {
                initial: r.float("optimizer.lr", dt.schedule.initial)?,
                factor: r.float("optimizer.lr_factor", dt.schedule.factor)?,
                period: r.usize("optimizer.lr_period", dt.schedule.period)?,
            },
            epochs: r.usize("train.epochs", dt.epochs)?,
            seed: r.uint("train.seed", dt.seed)?,
            augment,
            passive_augment: r.boolean("policy.passive_augment", dt.passive_augment)?,
            passive_bn_update: r.boolean("policy.passive_bn_update", dt.passive_bn_update)?,
            eval_batch: r.usize("train.eval_batch", dt.eval_batch)?,
        };
        let fraction = r.float("train.fraction", d.fraction)?;
        let out_dir = PathBuf::from(r.string("output.dir", &d.out_dir.to_string_lossy())?);

        if let Some(unknown) = r.keys.keys().next() {
            return Err(Error::Config(format!("unknown config key {unknown:?}")));
        }
        let cfg = RunConfig {
            active,
            passive,
            synth,
            synth_seed,
            fraction,
            train,
            out_dir,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, then applies overrides and resolves.
    pub fn load(path: &Path, overrides: &[(String, Value)], data_root: Option<&Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::resolve(parse_keys(&text, &path.display().to_string())?, overrides, data_root)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::Config(format!("train.fraction must be in (0, 1], got {}", self.fraction)));
        }
        if !(0.0..=1.0).contains(&self.train.augment.flip_prob) {
            return Err(Error::Config("augment.flip_prob must be in [0, 1]".into()));
        }
        if self.train.eval_batch == 0 {
            return Err(Error::Config("train.eval_batch must be >= 1".into()));
        }
        if self.active == DataSource::Synthetic || self.passive == PassiveSource::Synthetic {
            self.synth.validate()?;
        }
        Ok(())
    }

    /// Sorted `key = value` lines covering every key.
    pub fn render(&self) -> String {
        fn q(s: &str) -> String {
            Value::String(s.to_string()).to_string()
        }
        fn qp(p: &Path) -> String {
            q(&p.to_string_lossy())
        }
        fn list<T: std::fmt::Display>(xs: &[T]) -> String {
            let items: Vec<String> = xs.iter().map(|x| x.to_string()).collect();
            format!("[{}]", items.join(", "))
        }
        fn plist(ps: &[PathBuf]) -> String {
            let items: Vec<String> = ps.iter().map(|p| qp(p)).collect();
            format!("[{}]", items.join(", "))
        }
        fn float(f: f64) -> String {
            Value::Float(f).to_string()
        }

        let t = &self.train;
        let mut m: BTreeMap<&str, String> = BTreeMap::new();
        m.insert("config.version", CONFIG_FORMAT_VERSION.to_string());
        match &self.active {
            DataSource::Synthetic => {
                m.insert("data.active.source", q("synthetic"));
            }
            DataSource::Cifar10 { train, test } => {
                m.insert("data.active.source", q("cifar10"));
                m.insert("data.active.train_files", plist(train));
                m.insert("data.active.test_files", plist(test));
            }
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                classes,
            } => {
                m.insert("data.active.source", q("idx"));
                m.insert("data.active.train_images", qp(train_images));
                m.insert("data.active.train_labels", qp(train_labels));
                m.insert("data.active.test_images", qp(test_images));
                m.insert("data.active.test_labels", qp(test_labels));
                m.insert("data.active.classes", classes.unwrap_or(0).to_string());
            }
        }
        match &self.passive {
            PassiveSource::None => {
                m.insert("data.passive.source", q("none"));
            }
            PassiveSource::Synthetic => {
                m.insert("data.passive.source", q("synthetic"));
            }
            PassiveSource::Cifar10 { files } => {
                m.insert("data.passive.source", q("cifar10"));
                m.insert("data.passive.files", plist(files));
            }
            PassiveSource::Idx { images, labels, classes } => {
                m.insert("data.passive.source", q("idx"));
                m.insert("data.passive.images", qp(images));
                m.insert("data.passive.labels", qp(labels));
                m.insert("data.passive.classes", classes.unwrap_or(0).to_string());
            }
        }
        let s = &self.synth;
        m.insert("synth.image", list(&s.image));
        m.insert("synth.active_classes", s.active_classes.to_string());
        m.insert("synth.passive_classes", s.passive_classes.to_string());
        m.insert("synth.active_train", s.active_train.to_string());
        m.insert("synth.active_test", s.active_test.to_string());
        m.insert("synth.passive_count", s.passive_count.to_string());
        m.insert("synth.blobs", s.blobs.to_string());
        m.insert("synth.distractors", s.distractors.to_string());
        m.insert("synth.jitter", float(s.jitter));
        m.insert("synth.noise", float(s.noise));
        m.insert("synth.seed", self.synth_seed.to_string());
        m.insert("model.trunk_widths", list(&t.trunk_widths));
        m.insert("model.active_hidden", list(&t.active_hidden));
        m.insert("model.passive_hidden", list(&t.passive_hidden));
        m.insert(
            "policy.g",
            match t.policy.g {
                Injection::Every(g) => g.to_string(),
                Injection::Never => q("inf"),
            },
        );
        m.insert("policy.active_batch", t.policy.active_batch.to_string());
        m.insert("policy.passive_batch", t.policy.passive_batch.to_string());
        m.insert("policy.passive_augment", t.passive_augment.to_string());
        m.insert("policy.passive_bn_update", t.passive_bn_update.to_string());
        m.insert("optimizer.lr", float(t.schedule.initial));
        m.insert("optimizer.lr_factor", float(t.schedule.factor));
        m.insert("optimizer.lr_period", t.schedule.period.to_string());
        m.insert("optimizer.momentum", float(t.sgd.momentum));
        m.insert("optimizer.weight_decay", float(t.sgd.weight_decay));
        m.insert("optimizer.decay_bn", t.sgd.decay_bn.to_string());
        m.insert("augment.enabled", t.augment.enabled.to_string());
        m.insert("augment.pad", t.augment.pad.to_string());
        let (ch, cw) = t.augment.crop.unwrap_or((0, 0));
        m.insert("augment.crop_height", ch.to_string());
        m.insert("augment.crop_width", cw.to_string());
        m.insert("augment.flip_prob", float(t.augment.flip_prob));
        m.insert("train.epochs", t.epochs.to_string());
        m.insert("train.seed", t.seed.to_string());
        m.insert("train.fraction", float(self.fraction));
        m.insert("train.eval_batch", t.eval_batch.to_string());
        m.insert("output.dir", qp(&self.out_dir));

        let mut out = String::new();
        for (k, v) in m {
            writeln!(out, "{k} = {v}").expect("writing to a String");
        }
        out
    }

    /// Loads (or generates) the datasets and applies the training fraction.
    pub fn prepare_data(&self) -> Result<PreparedData> {
        let synth = if self.active == DataSource::Synthetic || self.passive == PassiveSource::Synthetic {
            Some(synth_data(&self.synth, self.synth_seed)?)
        } else {
            None
        };
        let (train, test) = match &self.active {
            DataSource::Synthetic => {
                let s = synth.as_ref().expect("generated above");
                (s.active_train.clone(), s.active_test.clone())
            }
            DataSource::Cifar10 { train, test } => (load_cifar10_files(train)?, load_cifar10_files(test)?),
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                classes,
            } => {
                let train = load_idx(train_images, train_labels, *classes)?;
                let classes = classes.or(Some(train.classes));
                (train, load_idx(test_images, test_labels, classes)?)
            }
        };
        let passive = match &self.passive {
            PassiveSource::None => None,
            PassiveSource::Synthetic => Some(synth.expect("generated above").passive),
            PassiveSource::Cifar10 { files } => Some(load_cifar10_files(files)?),
            PassiveSource::Idx { images, labels, classes } => Some(load_idx(images, labels, *classes)?),
        }
        .map(|p| p.with_role(Role::Passive));
        let train = if self.fraction < 1.0 {
            take_fraction(&train, self.fraction, self.train.seed)?
        } else {
            train
        };
        PreparedData::new(train, test, passive)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self
    }

    pub fn passive_label(&self) -> &'static str {
        match self.passive {
            PassiveSource::None => "none",
            PassiveSource::Synthetic => "synthetic",
            PassiveSource::Cifar10 { .. } => "cifar10",
            PassiveSource::Idx { .. } => "idx",
        }
    }
}

/// Returns the dataset root from the environment, if set and non-empty.
pub fn data_root_from_env() -> Option<PathBuf> {
    std::env::var_os(DATA_ROOT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from)
}


#[cfg(test)]
mod tests {
    use super::*;

    fn resolve(text: &str, overrides: &[&str]) -> Result<RunConfig> {
        let ov: Vec<_> = overrides.iter().map(|s| parse_override(s).unwrap()).collect();
        RunConfig::resolve(parse_keys(text, "test")?, &ov, None)
    }

    #[test]
    fn empty_file_resolves_to_defaults() {
        assert_eq!(resolve("", &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn render_round_trips() {
        let cfg = resolve("policy.g = 10\n[train]\nepochs = 3\n", &["output.dir=out/x"]).unwrap();
        let again = resolve(&cfg.render(), &[]).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.render(), again.render());
        let rendered = cfg.render();
        let lines: Vec<&str> = rendered.lines().collect();
        let mut sorted = lines.clone();
        sorted.sort();
        assert_eq!(lines, sorted);
    }

    #[test]
    fn overrides_are_last_wins() {
        let cfg = resolve("train.seed = 4", &["train.seed=5", "train.seed=6"]).unwrap();
        assert_eq!(cfg.train.seed, 6);
    }

    #[test]
    fn none_passive_forces_baseline() {
        let cfg = resolve("policy.g = 1\ndata.passive.source = \"none\"", &[]).unwrap();
        assert_eq!(cfg.train.policy.g, Injection::Never);
        let cfg = resolve("", &["data.passive.source=none"]).unwrap();
        assert_eq!(cfg.passive, PassiveSource::None);
    }

    #[test]
    fn g_values() {
        assert_eq!(resolve("policy.g = \"inf\"", &[]).unwrap().train.policy.g, Injection::Never);
        assert_eq!(resolve("", &["policy.g=inf"]).unwrap().train.policy.g, Injection::Never);
        let e = resolve("policy.g = 0", &[]).unwrap_err().to_string();
        assert!(e.contains("policy.g"), "{e}");
    }

    #[test]
    fn rejects_bad_input() {
        assert!(resolve("policy.gg = 3", &[]).unwrap_err().to_string().contains("policy.gg"));
        assert!(resolve("train.epochs = \"many\"", &[]).is_err());
        assert!(resolve("train.fraction = 0.0", &[]).is_err());
        assert!(resolve("data.active.source = \"cifar10\"", &[]).unwrap_err().to_string().contains("train_files"));
        assert!(resolve("not toml ===", &[]).is_err());
    }

    #[test]
    fn relative_paths_join_data_root() {
        let keys = parse_keys(
            "data.passive.source = \"idx\"\ndata.passive.images = \"svhn/img.idx\"\ndata.passive.labels = \"/abs/lbl.idx\"",
            "t",
        )
        .unwrap();
        let cfg = RunConfig::resolve(keys, &[], Some(Path::new("/data"))).unwrap();
        match cfg.passive {
            PassiveSource::Idx { images, labels, .. } => {
                assert_eq!(images, PathBuf::from("/data/svhn/img.idx"));
                assert_eq!(labels, PathBuf::from("/abs/lbl.idx"));
            }
            other => panic!("{other:?}"),
        }
    }
}
