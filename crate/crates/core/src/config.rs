//! The run configuration document shared by every CLI subcommand.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autoencoder::AEConfig;
use crate::denoisers::{DenoiserConfig, DenoiserKind, LatentGeometry};
use crate::diffusion::{NoiseSchedule, ScheduleConfig};
use crate::error::Error;
use crate::pipeline::SampleSpec;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub seed: u64,
    pub count: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        let ae = AEConfig::default();
        Self {
            seed: 0,
            count: 64,
            frames: ae.frames,
            height: ae.height,
            width: ae.width,
            num_classes: DenoiserConfig::default().num_classes,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub autoencoder: TrainConfig,
    pub content: TrainConfig,
    pub motion: TrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            autoencoder: TrainConfig::autoencoder_default(),
            content: TrainConfig::default(),
            motion: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleSection {
    pub content: SampleSpec,
    pub motion: SampleSpec,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self {
            content: SampleSpec::content_default(),
            motion: SampleSpec::motion_default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub autoencoder: AEConfig,
    pub content: DenoiserConfig,
    pub motion: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainSection,
    pub sample: SampleSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            autoencoder: AEConfig::default(),
            content: DenoiserConfig::content_default(),
            motion: DenoiserConfig::default(),
            schedule: ScheduleConfig::default(),
            train: TrainSection::default(),
            sample: SampleSection::default(),
        }
    }
}

/// One configuration problem, addressed by its dotted key path.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigIssue {
    pub key: String,
    pub message: String,
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.key, self.message)
    }
}

/// Every problem found in a document, in document order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigErrors(pub Vec<ConfigIssue>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(ToString::to_string).collect();
        f.write_str(&parts.join("; "))
    }
}

impl std::error::Error for ConfigErrors {}

fn issue(key: &str, message: impl Into<String>) -> ConfigIssue {
    ConfigIssue {
        key: key.into(),
        message: message.into(),
    }
}

/// Turns a module validation error into an issue, recovering the key path
/// from messages of the form `section.field ...`.
fn from_error(section: &str, e: Error) -> ConfigIssue {
    match e {
        Error::Constraint { param, reason } => {
            let field = if param == "T" { "steps" } else { param.as_str() };
            issue(&format!("{section}.{field}"), reason)
        }
        Error::Config(msg) => {
            let first = msg.split_whitespace().next().unwrap_or_default();
            let stem = section.rsplit('.').next().unwrap_or(section);
            let rest = msg[first.len()..].trim_start();
            if first.starts_with(&format!("{section}.")) {
                issue(first, rest)
            } else if let Some(field) = first.strip_prefix(&format!("{stem}.")) {
                issue(&format!("{section}.{field}"), rest)
            } else {
                issue(section, msg)
            }
        }
        other => issue(section, other.to_string()),
    }
}

impl RunConfig {
    /// Parses JSON, reporting unknown keys and type errors with their key path.
    pub fn from_json(text: &str) -> Result<Self, ConfigErrors> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            let key = if key == "." { String::new() } else { key };
            ConfigErrors(vec![issue(&key, e.into_inner().to_string())])
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigErrors> {
        let text = fs::read_to_string(path).map_err(|e| ConfigErrors(vec![issue("", format!("{}: {e}", path.display()))]))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }

    pub fn geometry(&self) -> LatentGeometry {
        LatentGeometry::from(&self.autoencoder)
    }

    /// Checks every section and every cross-reference; collects all issues.
    pub fn validate(&self) -> Result<(), ConfigErrors> {
        let mut issues = Vec::new();
        let mut check = |section: &str, r: crate::Result<()>| {
            if let Err(e) = r {
                issues.push(from_error(section, e));
            }
        };
        let ae_ok = self.autoencoder.validate();
        let ae_valid = ae_ok.is_ok();
        check("autoencoder", ae_ok);
        if ae_valid {
            let geo = self.geometry();
            check("content", self.content.validate(DenoiserKind::Content, &geo));
            check("motion", self.motion.validate(DenoiserKind::Motion, &geo));
        }
        let sched = self.schedule.build();
        let schedule: Option<NoiseSchedule> = match sched {
            Ok(s) => Some(s),
            Err(e) => {
                check("schedule", Err(e));
                None
            }
        };
        check("train.autoencoder", self.train.autoencoder.validate("train.autoencoder"));
        check("train.content", self.train.content.validate("train.content"));
        check("train.motion", self.train.motion.validate("train.motion"));
        if let Some(s) = &schedule {
            check("sample.content", self.sample.content.validate("sample.content", s));
            check("sample.motion", self.sample.motion.validate("sample.motion", s));
        }

        let d = &self.data;
        if d.count == 0 {
            issues.push(issue("data.count", "must be positive"));
        }
        if d.num_classes == 0 {
            issues.push(issue("data.num_classes", "must be positive"));
        }
        let ae = &self.autoencoder;
        for (key, data, model) in [
            ("frames", d.frames, ae.frames),
            ("height", d.height, ae.height),
            ("width", d.width, ae.width),
        ] {
            if data != model {
                issues.push(issue(
                    &format!("data.{key}"),
                    format!("{data} differs from autoencoder.{key} = {model}"),
                ));
            }
        }
        if ae.channels != 3 {
            issues.push(issue("autoencoder.channels", "synthetic clips are RGB; must be 3"));
        }
        for (key, n) in [("content", self.content.num_classes), ("motion", self.motion.num_classes)] {
            if n != d.num_classes {
                issues.push(issue(
                    &format!("{key}.num_classes"),
                    format!("{n} differs from data.num_classes = {}", d.num_classes),
                ));
            }
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(ConfigErrors(issues))
        }
    }

    /// Applies `key=value` overrides given as dotted paths.
    pub fn with_overrides(&self, overrides: &[(String, serde_json::Value)]) -> Result<Self, ConfigErrors> {
        let mut tree = serde_json::to_value(self).expect("plain data serializes");
        for (key, value) in overrides {
            let mut node = &mut tree;
            for part in key.split('.') {
                node = match node.get_mut(part) {
                    Some(n) => n,
                    None => return Err(ConfigErrors(vec![issue(key, "unknown key")])),
                };
            }
            *node = value.clone();
        }
        Self::from_json(&tree.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
        assert_eq!(RunConfig::from_json("{}").unwrap(), c);
    }

    #[test]
    fn unknown_keys_name_their_path() {
        let e = RunConfig::from_json(r#"{"train": {"motion": {"lr": 1}}}"#).unwrap_err();
        assert_eq!(e.0[0].key, "train.motion.lr");
        assert!(e.0[0].message.contains("unknown field"));
        let e = RunConfig::from_json(r#"{"autoencoder": {"depth": "four"}}"#).unwrap_err();
        assert_eq!(e.0[0].key, "autoencoder.depth");
    }

    #[test]
    fn all_field_errors_are_collected() {
        let mut c = RunConfig::default();
        c.autoencoder.hidden_dim = 0;
        c.train.motion.batch_size = 0;
        c.sample.content.steps = 5000;
        c.data.frames = 4;
        c.motion.num_classes = 9;
        let keys: Vec<String> = c.validate().unwrap_err().0.into_iter().map(|i| i.key).collect();
        assert_eq!(
            keys,
            [
                "autoencoder.hidden_dim",
                "train.motion.batch_size",
                "sample.content.steps",
                "data.frames",
                "motion.num_classes"
            ]
        );
    }

    #[test]
    fn schedule_errors_use_field_names() {
        let mut c = RunConfig::default();
        c.schedule.steps = 0;
        assert_eq!(c.validate().unwrap_err().0[0].key, "schedule.steps");
    }

    #[test]
    fn overrides_replace_leaves() {
        let c = RunConfig::default()
            .with_overrides(&[("sample.motion.guidance".into(), json!(2.5))])
            .unwrap();
        assert_eq!(c.sample.motion.guidance, 2.5);
        assert!(RunConfig::default().with_overrides(&[("sample.nope".into(), json!(1))]).is_err());
    }
}
