//! Flat key-value run configuration (TOML file plus `key=value` overrides).
//!
//! Every key is optional; missing keys keep their defaults. Unknown keys and
//! ill-typed values are collected and reported together before any work
//! starts. The schema is listed by [`KEYS`].

use std::path::{Path, PathBuf};

use toml::Value;

use crate::data::Modality;
use crate::error::{Error, Result};
use crate::losses::EdgeNorm;
use crate::models::{Architecture, ModelConfig};
use crate::training::{Selection, TrainConfig};

/// `(key, type, description)` for every accepted key.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("architecture", "string", "UNET, ATT_UNET, XATT_UNET, DUAL_UNET, COLEARN_UNET or DXM_TRANSFUSE"),
    ("in_channels", "integer", "channels per input stream"),
    ("base_width", "integer", "channels of the first encoder stage"),
    ("heads", "integer", "attention heads of the cross-modal transformer blocks"),
    ("dropout_p", "float", "dropout inside the transformer blocks"),
    ("image_size", "integer", "square network input side, multiple of 16"),
    ("seed", "integer", "seed for initialization, shuffling, augmentation and folds"),
    ("epochs", "integer", "training epochs per fold"),
    ("batch_size", "integer", "samples per mini-batch"),
    ("lr_initial", "float", "initial learning rate"),
    ("lr_milestones", "float array", "fractions of epochs where the rate drops"),
    ("lr_factor", "float", "multiplier applied at each milestone"),
    ("momentum", "float", "SGD momentum, 0 for plain SGD"),
    ("dice_threshold", "float", "Dice above which a detection counts"),
    ("selection", "string", "checkpoint selection metric: f2 or dice"),
    ("folds", "integer", "cross-validation folds"),
    ("augment", "boolean", "add the four augmented variants of each training sample"),
    ("brightness", "float", "brightness factor range, drawn from [1-b, 1+b]"),
    ("contrast", "float", "contrast factor range, drawn from [1-c, 1+c]"),
    ("noise_sigma", "float", "Gaussian noise std in [0, 1] units"),
    ("edge_norm", "string", "edge loss reduction: pixel_abs or image_l2"),
    ("modality", "string", "input of single-modality networks: jet or rgb"),
    ("data_dir", "string", "dataset root"),
];

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data_dir: Option<PathBuf>,
}

fn as_usize(v: &Value) -> std::result::Result<usize, String> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as usize),
        other => Err(format!("expected a non-negative integer, got {other}")),
    }
}

fn as_f64(v: &Value) -> std::result::Result<f64, String> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        other => Err(format!("expected a number, got {other}")),
    }
}

fn as_str(v: &Value) -> std::result::Result<&str, String> {
    v.as_str().ok_or_else(|| format!("expected a string, got {v}"))
}

fn parse<T: std::str::FromStr>(v: &Value) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    as_str(v)?.parse::<T>().map_err(|e| e.to_string())
}

impl RunConfig {
    fn set(&mut self, key: &str, v: &Value) -> std::result::Result<(), String> {
        let (m, t) = (&mut self.model, &mut self.train);
        match key {
            "architecture" => m.architecture = parse::<Architecture>(v)?,
            "in_channels" => m.in_channels = as_usize(v)?,
            "base_width" => m.base_width = as_usize(v)?,
            "heads" => m.heads = as_usize(v)?,
            "dropout_p" => m.dropout_p = as_f64(v)?,
            "image_size" => m.image_size = as_usize(v)?,
            "seed" => {
                let s = as_usize(v)? as u64;
                m.seed = s;
                t.seed = s;
            }
            "epochs" => t.epochs = as_usize(v)?,
            "batch_size" => t.batch_size = as_usize(v)?,
            "lr_initial" => t.lr_initial = as_f64(v)?,
            "lr_milestones" => {
                let arr = v.as_array().ok_or_else(|| format!("expected an array, got {v}"))?;
                t.lr_milestones = arr.iter().map(as_f64).collect::<std::result::Result<_, _>>()?;
            }
            "lr_factor" => t.lr_factor = as_f64(v)?,
            "momentum" => t.momentum = as_f64(v)?,
            "dice_threshold" => t.dice_threshold = as_f64(v)?,
            "selection" => {
                t.selection = match as_str(v)?.to_ascii_lowercase().as_str() {
                    "f2" => Selection::F2,
                    "dice" => Selection::Dice,
                    other => return Err(format!("unknown selection `{other}` (expected f2 or dice)")),
                }
            }
            "folds" => t.folds = as_usize(v)?,
            "augment" => t.augment = v.as_bool().ok_or_else(|| format!("expected a boolean, got {v}"))?,
            "brightness" => t.augmentation.brightness = as_f64(v)?,
            "contrast" => t.augmentation.contrast = as_f64(v)?,
            "noise_sigma" => t.augmentation.noise_sigma = as_f64(v)?,
            "edge_norm" => {
                t.edge_norm = match as_str(v)?.to_ascii_lowercase().as_str() {
                    "pixel_abs" => EdgeNorm::PixelAbs,
                    "image_l2" => EdgeNorm::ImageL2,
                    other => return Err(format!("unknown edge_norm `{other}` (expected pixel_abs or image_l2)")),
                }
            }
            "modality" => t.modality = parse::<Modality>(v)?,
            "data_dir" => self.data_dir = Some(PathBuf::from(as_str(v)?)),
            _ => return Err("unknown key".to_string()),
        }
        Ok(())
    }

    /// Applies `entries` in order, collecting every failure.
    fn apply<'a>(&mut self, entries: impl IntoIterator<Item = (&'a str, Value)>, errs: &mut Vec<String>) {
        for (k, v) in entries {
            if let Err(e) = self.set(k, &v) {
                errs.push(format!("{k}: {e}"));
            }
        }
    }

    /// Defaults, then the file (if any), then the overrides, then
    /// validation. All problems are reported in one [`Error::Config`].
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut errs = Vec::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            match text.parse::<toml::Table>() {
                Ok(table) => cfg.apply(table.iter().map(|(k, v)| (k.as_str(), v.clone())), &mut errs),
                Err(e) => errs.push(format!("{}: {e}", path.display())),
            }
        }
        let mut parsed = Vec::new();
        for o in overrides {
            match parse_override(o) {
                Ok(kv) => parsed.push(kv),
                Err(e) => errs.push(e),
            }
        }
        cfg.apply(parsed.iter().map(|(k, v)| (k.as_str(), v.clone())), &mut errs);
        for check in [cfg.model.validate(), cfg.train.validate()] {
            match check {
                Ok(()) => {}
                Err(Error::Config(e)) => errs.extend(e),
                Err(e) => errs.push(e.to_string()),
            }
        }
        if errs.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errs))
        }
    }

    /// The configuration as a flat TOML document accepted by [`Self::load`].
    pub fn to_toml(&self) -> String {
        let (m, t) = (&self.model, &self.train);
        let mut table = toml::Table::new();
        let mut put = |k: &str, v: Value| {
            table.insert(k.to_string(), v);
        };
        put("architecture", Value::String(m.architecture.key().into()));
        put("in_channels", Value::Integer(m.in_channels as i64));
        put("base_width", Value::Integer(m.base_width as i64));
        put("heads", Value::Integer(m.heads as i64));
        put("dropout_p", Value::Float(m.dropout_p));
        put("image_size", Value::Integer(m.image_size as i64));
        put("seed", Value::Integer(t.seed as i64));
        put("epochs", Value::Integer(t.epochs as i64));
        put("batch_size", Value::Integer(t.batch_size as i64));
        put("lr_initial", Value::Float(t.lr_initial));
        put(
            "lr_milestones",
            Value::Array(t.lr_milestones.iter().map(|&f| Value::Float(f)).collect()),
        );
        put("lr_factor", Value::Float(t.lr_factor));
        put("momentum", Value::Float(t.momentum));
        put("dice_threshold", Value::Float(t.dice_threshold));
        put(
            "selection",
            Value::String(match t.selection {
                Selection::F2 => "f2".into(),
                Selection::Dice => "dice".into(),
            }),
        );
        put("folds", Value::Integer(t.folds as i64));
        put("augment", Value::Boolean(t.augment));
        put("brightness", Value::Float(t.augmentation.brightness));
        put("contrast", Value::Float(t.augmentation.contrast));
        put("noise_sigma", Value::Float(t.augmentation.noise_sigma));
        put(
            "edge_norm",
            Value::String(match t.edge_norm {
                EdgeNorm::PixelAbs => "pixel_abs".into(),
                EdgeNorm::ImageL2 => "image_l2".into(),
            }),
        );
        put(
            "modality",
            Value::String(match t.modality {
                Modality::Jet => "jet".into(),
                Modality::Rgb => "rgb".into(),
            }),
        );
        if let Some(d) = &self.data_dir {
            put("data_dir", Value::String(d.display().to_string()));
        }
        toml::to_string(&table).expect("flat table serializes")
    }
}

/// `key=value`, where the value is read as a TOML literal and falls back to
/// a bare string (so `architecture=DXM_TRANSFUSE` works unquoted).
fn parse_override(s: &str) -> std::result::Result<(String, Value), String> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| format!("override `{s}` is not of the form key=value"))?;
    let (k, v) = (k.trim(), v.trim());
    if k.is_empty() {
        return Err(format!("override `{s}` has an empty key"));
    }
    let value = format!("v = {v}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(v.to_string()));
    Ok((k.to_string(), value))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_switch_architecture() -> Result<()> {
        let cfg = RunConfig::load(None, &["architecture=DXM_TRANSFUSE".into(), "epochs=2".into()])?;
        assert_eq!(cfg.model.architecture, Architecture::DxmTransfuse);
        assert_eq!(cfg.train.epochs, 2);
        Ok(())
    }

    #[test]
    fn all_errors_are_listed() {
        let err = RunConfig::load(
            None,
            &[
                "bogus=1".into(),
                "epochs=-3".into(),
                "lr_factor=2".into(),
                "noequals".into(),
            ],
        )
        .unwrap_err();
        match err {
            Error::Config(errs) => {
                assert_eq!(errs.len(), 4, "{errs:?}");
                assert!(errs[0].contains("noequals"));
                assert!(errs.iter().any(|e| e.starts_with("bogus")));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn every_key_is_documented_and_example_configs_load() -> Result<()> {
        let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
        let doc = std::fs::read_to_string(root.join("docs/config.md")).unwrap();
        for (key, _, _) in KEYS {
            assert!(doc.contains(&format!("| `{key}` |")), "{key} missing from docs/config.md");
        }
        for name in ["dxm_transfuse.toml", "desk.toml"] {
            RunConfig::load(Some(&root.join("configs").join(name)), &[])?;
        }
        Ok(())
    }

    #[test]
    fn toml_round_trip() -> Result<()> {
        let mut cfg = RunConfig::default();
        cfg.model.architecture = Architecture::ColearnUnet;
        cfg.train.lr_milestones = vec![0.3, 0.6, 0.9];
        cfg.train.modality = Modality::Rgb;
        cfg.data_dir = Some("data/x".into());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, cfg.to_toml()).unwrap();
        assert_eq!(RunConfig::load(Some(&path), &[])?, cfg);
        Ok(())
    }
}
