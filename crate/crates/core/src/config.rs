//! Run configuration file: a JSON document binding a dataset, encoder, loss
//! and training settings, plus an optional sweep grid.
//!
//! ```json
//! {
//!   "dataset": { "synthetic": { "num_users": 200, "num_items": 100,
//!                               "num_clusters": 2, "noise": 0.0, "seed": 7 } },
//!   "encoder": { "kind": "mf" },
//!   "loss": { "kind": "mmcl", "margins": [0.7, 0.8, 0.9],
//!             "margin_weights": [0.10, 0.15, 0.75], "neg_ratio": 100 },
//!   "train": { "learning_rate": 0.01, "epochs": 50, "embedding_dim": 16 },
//!   "eval_k": 10,
//!   "output_dir": "runs/fixture",
//!   "sweep": { "axes": [ { "path": "train.num_negatives", "values": [10, 100] } ] }
//! }
//! ```
//!
//! A sweep expands to the Cartesian product of its axes. Each axis value is
//! written at `path` in the base config; object values are merged into an
//! existing object, so `{"path": "loss", "values": [{"margins": [0.9],
//! "margin_weights": [1.0]}]}` changes two keys at once. An object carrying a
//! `kind` tag replaces its target outright, so a `loss` axis can switch
//! between loss kinds.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataset::InteractionDataset;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::losses::LossSpec;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_users: usize,
    pub num_items: usize,
    pub num_clusters: usize,
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Files {
        train: PathBuf,
        test: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
    },
    Synthetic(SyntheticSpec),
}

impl DatasetSource {
    pub fn name(&self) -> String {
        match self {
            DatasetSource::Files { name: Some(n), .. } => n.clone(),
            DatasetSource::Files { train, .. } => train
                .parent()
                .and_then(Path::file_name)
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "dataset".into()),
            DatasetSource::Synthetic(_) => "synthetic".into(),
        }
    }

    pub fn load(&self) -> Result<InteractionDataset> {
        match self {
            DatasetSource::Files { train, test, .. } => {
                for (key, p) in [("dataset.files.train", train), ("dataset.files.test", test)] {
                    if !p.is_file() {
                        return Err(Error::config(key, format!("file not found: {}", p.display())));
                    }
                }
                InteractionDataset::load_adjacency_text(train, test)
            }
            DatasetSource::Synthetic(s) => {
                InteractionDataset::make_synthetic(s.num_users, s.num_items, s.num_clusters, s.noise, s.seed)
                    .map_err(|e| Error::config("dataset.synthetic", e.to_string()))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub path: String,
    pub values: Vec<Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axes: Vec<Axis>,
}

fn default_eval_k() -> usize {
    20
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/latest")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    #[serde(default)]
    pub encoder: EncoderConfig,
    pub loss: LossSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_eval_k")]
    pub eval_k: usize,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
}

fn from_value_with_path<T: serde::de::DeserializeOwned>(value: Value) -> Result<T> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        Error::config(
            if path == "." { String::new() } else { path },
            e.into_inner().to_string(),
        )
    })
}

impl RunConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: Value =
            serde_json::from_str(text).map_err(|e| Error::config("", format!("invalid JSON: {e}")))?;
        let cfg: RunConfig = from_value_with_path(value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("", format!("cannot read {}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.eval_k == 0 {
            return Err(Error::config("eval_k", "must be at least 1"));
        }
        self.encoder.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        if let Some(sweep) = &self.sweep {
            for (i, axis) in sweep.axes.iter().enumerate() {
                let root = axis.path.split('.').next().unwrap_or_default();
                if !matches!(root, "encoder" | "loss" | "train" | "eval_k") {
                    return Err(Error::config(
                        format!("sweep.axes[{i}].path"),
                        format!("`{}` is not a sweepable key", axis.path),
                    ));
                }
                if axis.values.is_empty() {
                    return Err(Error::config(
                        format!("sweep.axes[{i}].values"),
                        "axis has no values",
                    ));
                }
            }
        }
        Ok(())
    }

    /// The fully resolved config (defaults filled) as pretty JSON. Parsing it
    /// back yields an identical config.
    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Expands the sweep grid into labelled per-cell configs, without the
    /// sweep section and with `output_dir` pointing at `cell_NNN`. A config
    /// without a sweep expands to itself.
    pub fn expand_sweep(&self) -> Result<Vec<(String, RunConfig)>> {
        let mut base = self.clone();
        let axes = base.sweep.take().map(|s| s.axes).unwrap_or_default();
        let base_value = serde_json::to_value(&base)?;

        let mut combos: Vec<(Vec<String>, Value)> = vec![(Vec::new(), base_value)];
        for (i, axis) in axes.iter().enumerate() {
            let mut next = Vec::with_capacity(combos.len() * axis.values.len());
            for (labels, value) in &combos {
                for v in &axis.values {
                    let mut patched = value.clone();
                    set_path(&mut patched, &axis.path, v.clone())
                        .map_err(|msg| Error::config(format!("sweep.axes[{i}].path"), msg))?;
                    let mut labels = labels.clone();
                    labels.push(format!("{}={}", axis.path, v));
                    next.push((labels, patched));
                }
            }
            combos = next;
        }

        let multi = !axes.is_empty();
        combos
            .into_iter()
            .enumerate()
            .map(|(idx, (labels, value))| {
                let mut cfg: RunConfig = from_value_with_path(value)?;
                cfg.validate()?;
                if multi {
                    cfg.output_dir = self.output_dir.join(format!("cell_{idx:03}"));
                }
                let label = if labels.is_empty() {
                    "base".to_string()
                } else {
                    labels.join(",")
                };
                Ok((label, cfg))
            })
            .collect()
    }
}

fn merge(target: &mut Value, patch: Value) {
    match (target, patch) {
        // A tagged object names a whole variant; merging would keep fields of
        // the old one.
        (t, p @ Value::Object(_)) if p.get("kind").is_some() => *t = p,
        (Value::Object(t), Value::Object(p)) => {
            for (k, v) in p {
                match t.get_mut(&k) {
                    Some(existing) => merge(existing, v),
                    None => {
                        t.insert(k, v);
                    }
                }
            }
        }
        (t, p) => *t = p,
    }
}

fn set_path(root: &mut Value, path: &str, value: Value) -> std::result::Result<(), String> {
    if path.is_empty() {
        return Err("empty axis path".into());
    }
    let mut cur = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (depth, key) in keys.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| format!("`{}` is not an object", keys[..depth].join(".")))?;
        if depth + 1 == keys.len() {
            match obj.get_mut(*key) {
                Some(existing) => merge(existing, value),
                None => {
                    obj.insert((*key).to_string(), value);
                }
            }
            return Ok(());
        }
        cur = obj
            .entry((*key).to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("non-empty path")
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIXTURE: &str = r#"{
        "dataset": {"synthetic": {"num_users": 20, "num_items": 10, "num_clusters": 2, "seed": 7}},
        "loss": {"kind": "mmcl", "margins": [0.7, 0.8, 0.9], "margin_weights": [0.1, 0.15, 0.75]},
        "train": {"epochs": 2}
    }"#;

    #[test]
    fn defaults_are_filled() {
        let cfg = RunConfig::from_json_str(FIXTURE).unwrap();
        assert_eq!(cfg.eval_k, 20);
        assert_eq!(cfg.train.learning_rate, 1e-4);
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.encoder, EncoderConfig::default());
        assert_eq!(cfg.dataset.name(), "synthetic");
    }

    #[test]
    fn round_trip_is_identity() {
        let cfg = RunConfig::from_json_str(FIXTURE).unwrap();
        let again = RunConfig::from_json_str(&cfg.to_json_pretty()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.to_json_pretty(), again.to_json_pretty());
    }

    #[test]
    fn errors_carry_key_paths() {
        let bad = FIXTURE.replace(r#""epochs": 2"#, r#""epochs": 2, "learning_rate": -0.1"#);
        match RunConfig::from_json_str(&bad) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "train.learning_rate"),
            other => panic!("{other:?}"),
        }
        let bad = FIXTURE.replace(r#""epochs": 2"#, r#""epochs": "two""#);
        match RunConfig::from_json_str(&bad) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "train.epochs"),
            other => panic!("{other:?}"),
        }
        let bad = FIXTURE.replace(r#""epochs": 2"#, r#""epocs": 2"#);
        assert!(matches!(
            RunConfig::from_json_str(&bad),
            Err(Error::Config { .. })
        ));
        let bad = FIXTURE.replace("[0.7, 0.8, 0.9]", "[0.9, 0.8, 0.7]");
        match RunConfig::from_json_str(&bad) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "loss.margins"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn negatives_axis_expands() {
        let text = FIXTURE.replace(
            r#""train": {"epochs": 2}"#,
            r#""train": {"epochs": 2},
               "sweep": {"axes": [{"path": "train.num_negatives", "values": [10, 50, 100, 200, 400, 800]}]}"#,
        );
        let cfg = RunConfig::from_json_str(&text).unwrap();
        let cells = cfg.expand_sweep().unwrap();
        assert_eq!(cells.len(), 6);
        let ns: Vec<usize> = cells.iter().map(|(_, c)| c.train.num_negatives).collect();
        assert_eq!(ns, vec![10, 50, 100, 200, 400, 800]);
        assert!(cells.iter().all(|(_, c)| c.sweep.is_none()));
        assert_eq!(cells[3].0, "train.num_negatives=200");
        assert_eq!(cells[3].1.output_dir, cfg.output_dir.join("cell_003"));
    }

    #[test]
    fn object_axis_values_merge() {
        let text = FIXTURE.replace(
            r#""train": {"epochs": 2}"#,
            r#""train": {"epochs": 2},
               "sweep": {"axes": [
                 {"path": "loss", "values": [{"margins": [0.9], "margin_weights": [1.0]},
                                             {"margins": [0.8, 0.9], "margin_weights": [0.3, 0.7]}]},
                 {"path": "loss.neg_ratio", "values": [150, 200]}]}"#,
        );
        let cells = RunConfig::from_json_str(&text).unwrap().expand_sweep().unwrap();
        assert_eq!(cells.len(), 4);
        match &cells[3].1.loss {
            LossSpec::Mmcl {
                margins, neg_ratio, ..
            } => {
                assert_eq!(margins, &vec![0.8, 0.9]);
                assert_eq!(*neg_ratio, 200.0);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn tagged_axis_values_replace_the_loss() {
        let text = FIXTURE.replace(
            r#""train": {"epochs": 2}"#,
            r#""train": {"epochs": 2},
               "sweep": {"axes": [
                 {"path": "loss", "values": [{"kind": "ccl", "margin": 0.9, "neg_weight": 100}]}]}"#,
        );
        let cells = RunConfig::from_json_str(&text).unwrap().expand_sweep().unwrap();
        assert_eq!(cells[0].1.loss, LossSpec::ccl(0.9, 100.0));
    }

    #[test]
    fn malformed_axes_are_config_errors() {
        for axes in [
            r#"[{"path": "train.num_negatives", "values": []}]"#,
            r#"[{"path": "dataset.synthetic.seed", "values": [1]}]"#,
            r#"[{"path": "train.bogus", "values": [1]}]"#,
            r#"[{"path": "train.epochs.deeper", "values": [1]}]"#,
            r#"[{"path": "train.num_negatives", "values": ["ten"]}]"#,
            r#"[{"values": [1]}]"#,
        ] {
            let text = FIXTURE.replace(
                r#""train": {"epochs": 2}"#,
                &format!(r#""train": {{"epochs": 2}}, "sweep": {{"axes": {axes}}}"#),
            );
            let result = RunConfig::from_json_str(&text).and_then(|c| c.expand_sweep());
            assert!(matches!(result, Err(Error::Config { .. })), "{axes}: {result:?}");
        }
    }
}
