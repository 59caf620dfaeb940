//! Flat `key = value` run configuration.
//!
//! Each command has a schema: an ordered list of keys with default values.
//! Values are layered as defaults, then the `--config` file, then
//! command-line flags, and every key is checked against the schema before
//! any work starts. The resolved result can be written back out verbatim
//! and later passed to `--config` to repeat the run.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use anchorml::data::{SynthConfig, DEFAULT_AUDIO_DIM, DEFAULT_VISUAL_DIM};
use anchorml::io::DType;
use anchorml::{LossConfig, LossKind, OptimizerConfig, TrainConfig};

use crate::CliError;

pub const ECHO_FILE: &str = "config.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    command: &'static str,
    /// Schema order, used for echoing.
    keys: Vec<&'static str>,
    values: BTreeMap<&'static str, String>,
}

impl RunConfig {
    pub fn new(command: &'static str, defaults: Vec<(&'static str, String)>) -> Self {
        Self {
            command,
            keys: defaults.iter().map(|(k, _)| *k).collect(),
            values: defaults.into_iter().collect(),
        }
    }

    fn key(&self, key: &str) -> Result<&'static str, CliError> {
        self.keys
            .iter()
            .copied()
            .find(|k| *k == key)
            .ok_or_else(|| CliError::Usage(format!("unknown config key `{key}` for `{}`", self.command)))
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<(), CliError> {
        let k = self.key(key)?;
        self.values.insert(k, value.into());
        Ok(())
    }

    /// Applies every `key = value` line of `text`. Blank lines and `#`
    /// comments (whole-line or trailing) are skipped.
    pub fn merge_text(&mut self, text: &str, origin: &Path) -> Result<(), CliError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("{}:{}: expected `key = value`", origin.display(), n + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| CliError::Usage(format!("{}:{}: {e}", origin.display(), n + 1)))?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        self.merge_text(&text, path)
    }

    /// Applies `--set key=value` pairs.
    pub fn merge_assignments(&mut self, pairs: &[String]) -> Result<(), CliError> {
        for p in pairs {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {p:?}")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Applies dedicated flags that were given on the command line.
    pub fn merge_flags(&mut self, flags: &[(&str, Option<&String>)]) -> Result<(), CliError> {
        for (k, v) in flags {
            if let Some(v) = v {
                self.set(k, v.as_str())?;
            }
        }
        Ok(())
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map_or("", String::as_str)
    }

    pub fn get<T>(&self, key: &str) -> Result<T, CliError>
    where
        T: FromStr,
        T::Err: Display,
    {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|e| CliError::Usage(format!("invalid value {raw:?} for key `{key}`: {e}")))
    }

    /// A value that must be present (its schema default is empty).
    pub fn required(&self, key: &str) -> Result<&str, CliError> {
        match self.raw(key) {
            "" => Err(CliError::Usage(format!("missing required key `{key}`"))),
            v => Ok(v),
        }
    }

    pub fn optional<T>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.raw(key) {
            "" | "none" => Ok(None),
            _ => self.get(key).map(Some),
        }
    }

    pub fn list<T>(&self, key: &str) -> Result<Vec<T>, CliError>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.raw(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|e| CliError::Usage(format!("invalid list item {s:?} for key `{key}`: {e}")))
            })
            .collect()
    }

    pub fn echo(&self) -> String {
        let mut s = format!("# resolved configuration for `anchorml {}`\n", self.command);
        for k in &self.keys {
            s.push_str(&format!("{k} = {}\n", self.raw(k)));
        }
        s
    }

    pub fn write_echo(&self, dir: &Path) -> Result<(), CliError> {
        std::fs::write(dir.join(ECHO_FILE), self.echo()).map_err(|e| CliError::Runtime(e.into()))
    }
}

fn s(v: impl ToString) -> String {
    v.to_string()
}

fn joined(values: &[usize]) -> String {
    values.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

pub const DEFAULT_TRAIN_FRACTION: f64 = 0.8;

pub fn synth_schema() -> RunConfig {
    let d = SynthConfig::default();
    RunConfig::new(
        "synth",
        vec![
            ("classes", s(d.classes)),
            ("per_class", s(d.per_class)),
            ("audio_dim", s(DEFAULT_AUDIO_DIM)),
            ("visual_dim", s(DEFAULT_VISUAL_DIM)),
            ("separation", s(d.class_separation)),
            ("noise", s(d.noise_sigma)),
            ("seed", s(d.seed)),
            ("train_fraction", s(DEFAULT_TRAIN_FRACTION)),
            ("dtype", "f64".into()),
        ],
    )
}

pub struct SynthSettings {
    pub synth: SynthConfig,
    pub train_fraction: f64,
    pub dtype: DType,
}

pub fn synth_settings(c: &RunConfig) -> Result<SynthSettings, CliError> {
    let dtype = match c.raw("dtype") {
        "f32" => DType::F32,
        "f64" => DType::F64,
        other => {
            return Err(CliError::Usage(format!(
                "invalid value {other:?} for key `dtype`: expected f32 or f64"
            )))
        }
    };
    let train_fraction: f64 = c.get("train_fraction")?;
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(CliError::Usage("key `train_fraction` must lie in (0, 1)".into()));
    }
    Ok(SynthSettings {
        synth: SynthConfig {
            classes: c.get("classes")?,
            per_class: c.get("per_class")?,
            audio_dim: c.get("audio_dim")?,
            visual_dim: c.get("visual_dim")?,
            class_separation: c.get("separation")?,
            noise_sigma: c.get("noise")?,
            seed: c.get("seed")?,
        },
        train_fraction,
        dtype,
    })
}

/// Keys shared by `train`, `eval` and `sweep-k`, defaulting to the library
/// defaults.
fn training_keys() -> Vec<(&'static str, String)> {
    let d = TrainConfig::default();
    let (o, l) = (&d.optimizer, &d.loss);
    vec![
        ("data", String::new()),
        ("epochs", s(d.epochs)),
        ("batch_size", s(d.batch_size)),
        ("optimizer", s(o.kind.as_str())),
        ("lr", s(o.lr)),
        ("beta1", s(o.beta1)),
        ("beta2", s(o.beta2)),
        ("epsilon", s(o.epsilon)),
        ("clip_norm", o.clip_norm.map_or("none".into(), s)),
        ("seed", s(d.seed)),
        ("k", s(d.k)),
        ("loss", s(l.kind.as_str())),
        ("triplet_margin", s(l.triplet_margin)),
        ("contrastive_margin", s(l.contrastive_margin)),
        ("aa_scope", s(l.scope.as_str())),
        ("aa_mode", s(l.aa_mode.as_str())),
        ("use_aa", s(l.use_aa)),
        ("contrastive_convention", s(l.contrastive_convention.as_str())),
        ("angular_degrees", s(l.angular_degrees)),
        ("hinge_pos_margin", s(l.hinge_pos_margin)),
        ("hinge_neg_margin", s(l.hinge_neg_margin)),
        ("graph_scope", s(d.graph_scope.as_str())),
        ("neighbor_pool", s(d.neighbor_pool.as_str())),
        ("hidden", s(d.hidden)),
        ("heads", s(d.heads)),
        ("dropout", s(d.dropout)),
        ("eval_every", s(d.eval_every)),
        ("eval_proxies", s(d.eval_proxies)),
        ("k_grid", joined(&d.k_grid)),
        ("checkpoint_every", s(d.checkpoint_every)),
    ]
}

pub fn train_schema() -> RunConfig {
    let mut keys = training_keys();
    keys.push(("resume", String::new()));
    RunConfig::new("train", keys)
}

/// A superset of the `train` schema, so a training run's echo can be passed
/// straight to `eval`; `resume` is accepted and ignored.
pub fn eval_schema() -> RunConfig {
    let mut keys = training_keys();
    keys.push(("resume", String::new()));
    keys.push(("checkpoint", String::new()));
    RunConfig::new("eval", keys)
}

pub const DEFAULT_STRATEGIES: [LossKind; 3] = [LossKind::Triplet, LossKind::TripletDagger, LossKind::HardTriplet];
pub const DEFAULT_K_MAX: usize = 7;

pub fn sweep_schema() -> RunConfig {
    let mut keys = training_keys();
    let strategies: Vec<&str> = DEFAULT_STRATEGIES.iter().map(|k| k.as_str()).collect();
    keys.push(("strategies", strategies.join(",")));
    keys.push(("k_max", s(DEFAULT_K_MAX)));
    keys.push(("jobs", "1".into()));
    RunConfig::new("sweep-k", keys)
}

/// Builds and validates the trainer settings; output paths are left unset.
pub fn train_config(c: &RunConfig) -> Result<TrainConfig, CliError> {
    let cfg = TrainConfig {
        epochs: c.get("epochs")?,
        batch_size: c.get("batch_size")?,
        optimizer: OptimizerConfig {
            kind: c.get("optimizer")?,
            lr: c.get("lr")?,
            beta1: c.get("beta1")?,
            beta2: c.get("beta2")?,
            epsilon: c.get("epsilon")?,
            clip_norm: c.optional("clip_norm")?,
        },
        seed: c.get("seed")?,
        k: c.get("k")?,
        loss: LossConfig {
            kind: c.get("loss")?,
            triplet_margin: c.get("triplet_margin")?,
            contrastive_margin: c.get("contrastive_margin")?,
            scope: c.get("aa_scope")?,
            aa_mode: c.get("aa_mode")?,
            use_aa: c.get("use_aa")?,
            contrastive_convention: c.get("contrastive_convention")?,
            angular_degrees: c.get("angular_degrees")?,
            hinge_pos_margin: c.get("hinge_pos_margin")?,
            hinge_neg_margin: c.get("hinge_neg_margin")?,
        },
        graph_scope: c.get("graph_scope")?,
        neighbor_pool: c.get("neighbor_pool")?,
        hidden: c.get("hidden")?,
        heads: c.get("heads")?,
        dropout: c.get("dropout")?,
        eval_every: c.get("eval_every")?,
        eval_proxies: c.get("eval_proxies")?,
        k_grid: c.list("k_grid")?,
        checkpoint_every: c.get("checkpoint_every")?,
        checkpoint_path: None,
        trace_path: None,
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve_to_library_defaults() {
        assert_eq!(train_config(&train_schema()).unwrap(), TrainConfig::default());
    }

    #[test]
    fn file_values_and_flags_layer_in_order() {
        let mut c = train_schema();
        c.merge_text("# comment\nk = 5   # trailing\n\nloss=hard_triplet\n", Path::new("f"))
            .unwrap();
        let seven = "7".to_string();
        c.merge_flags(&[("k", Some(&seven)), ("epochs", None)]).unwrap();
        let t = train_config(&c).unwrap();
        assert_eq!(t.k, 7);
        assert_eq!(t.loss.kind, LossKind::HardTriplet);
        assert_eq!(t.epochs, TrainConfig::default().epochs);
    }

    #[test]
    fn unknown_keys_and_bad_values_name_the_key() {
        let mut c = train_schema();
        let err = c.merge_text("lerning_rate = 1\n", Path::new("run.conf")).unwrap_err();
        assert!(err.to_string().contains("lerning_rate"));
        c.set("heads", "two").unwrap();
        assert!(train_config(&c).unwrap_err().to_string().contains("`heads`"));
        assert!(c.merge_text("no equals sign\n", Path::new("x")).is_err());
    }

    #[test]
    fn echo_round_trips() {
        let mut c = sweep_schema();
        c.set("k_max", "3").unwrap();
        c.set("clip_norm", "10").unwrap();
        let mut again = sweep_schema();
        again.merge_text(&c.echo(), Path::new("echo")).unwrap();
        assert_eq!(again, c);
        assert_eq!(train_config(&again).unwrap().optimizer.clip_norm, Some(10.0));
    }
}
