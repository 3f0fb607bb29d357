//! Experiment specs: JSON documents checked against the published schema,
//! then deserialized field by field.

use std::path::{Path, PathBuf};

use msca::evalkit::MultiViewConfig;
use msca::train::{SyntheticTask, TrainConfig};
use msca::vit::ModelConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

/// The published JSON schema for [`ExperimentSpec`].
pub const SCHEMA: &str = include_str!("../schema/experiment.schema.json");

fn default_name() -> String {
    "run".into()
}

fn default_samples() -> usize {
    16
}

fn default_extra_frames() -> usize {
    4
}

fn default_extra_width() -> usize {
    8
}

/// Held-out evaluation: `samples` videos, longer and wider than a training
/// clip, scored with multi-view averaging.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Frames beyond the clip span.
    #[serde(default = "default_extra_frames")]
    pub extra_frames: usize,
    /// Pixels beyond the clip width, so crops differ.
    #[serde(default = "default_extra_width")]
    pub extra_width: usize,
    #[serde(default)]
    pub views: MultiViewConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            samples: default_samples(),
            extra_frames: default_extra_frames(),
            extra_width: default_extra_width(),
            views: MultiViewConfig::default(),
        }
    }
}

/// Everything one run needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    #[serde(default = "default_name")]
    pub name: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub task: SyntheticTask,
    #[serde(default)]
    pub eval: EvalConfig,
    pub output_dir: PathBuf,
}

fn schema_validator() -> jsonschema::Validator {
    let schema: Value = serde_json::from_str(SCHEMA).expect("schema is valid JSON");
    jsonschema::validator_for(&schema).expect("schema compiles")
}

fn dotted(pointer: &str) -> String {
    pointer.trim_start_matches('/').replace('/', ".")
}

fn join(base: &str, field: &str) -> String {
    if base.is_empty() {
        field.to_string()
    } else {
        format!("{base}.{field}")
    }
}

/// Checks `value` against [`SCHEMA`]. Reports the first violation in
/// document order, with the offending field's dotted path.
pub fn validate_against_schema(value: &Value) -> Result<(), CliError> {
    use jsonschema::error::ValidationErrorKind as Kind;
    let validator = schema_validator();
    let mut errors: Vec<(String, String)> = validator
        .iter_errors(value)
        .map(|e| {
            let base = dotted(e.instance_path.as_str());
            let path = match &e.kind {
                Kind::Required { property } => join(&base, property.as_str().unwrap_or_default()),
                Kind::AdditionalProperties { unexpected } if !unexpected.is_empty() => {
                    join(&base, &unexpected[0])
                }
                _ => base,
            };
            (path, e.to_string())
        })
        .collect();
    errors.sort();
    match errors.into_iter().next() {
        None => Ok(()),
        Some((path, message)) => Err(CliError::invalid(path, message)),
    }
}

impl ExperimentSpec {
    /// Parses, schema-checks and validates a spec document.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let value: Value = serde_json::from_str(text).map_err(|e| CliError::invalid("", e))?;
        validate_against_schema(&value)?;
        let spec: ExperimentSpec = serde_path_to_error::deserialize(value)
            .map_err(|e| CliError::invalid(e.path().to_string(), e.inner()))?;
        spec.check()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::invalid("", format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Cross-field checks the schema cannot express.
    pub fn check(&self) -> Result<(), CliError> {
        self.model
            .validate()
            .map_err(|e| CliError::invalid("model", e))?;
        self.train
            .validate()
            .map_err(|e| CliError::invalid("train", e))?;
        self.task
            .validate()
            .map_err(|e| CliError::invalid("task", e))?;
        self.eval
            .views
            .validate()
            .map_err(|e| CliError::invalid("eval.views", e))?;
        let m = &self.model;
        let t = &self.task;
        for (field, a, b) in [
            ("task.frames", t.frames, m.frames),
            ("task.height", t.height, m.height),
            ("task.width", t.width, m.width),
            ("task.classes", t.classes, m.classes),
        ] {
            if a != b {
                return Err(CliError::invalid(
                    field,
                    format!("{a} does not match the model's {b}"),
                ));
            }
        }
        Ok(())
    }

    /// Applies command-line overrides. `seed` replaces the model, training
    /// and view seeds; `views` replaces clips and crops.
    pub fn override_with(
        &mut self,
        out: Option<&Path>,
        seed: Option<u64>,
        views: Option<(usize, usize)>,
    ) -> Result<(), CliError> {
        if let Some(out) = out {
            self.output_dir = out.to_path_buf();
        }
        if let Some(seed) = seed {
            self.model.seed = seed;
            self.train.seed = seed;
            self.eval.views.seed = seed;
        }
        if let Some((clips, crops)) = views {
            self.eval.views.clips = clips;
            self.eval.views.crops = crops;
        }
        self.check()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("spec serializes");
        s.push('\n');
        s
    }
}

/// Parses `--views CxS`, e.g. `2x3`.
pub fn parse_views(s: &str) -> Result<(usize, usize), String> {
    let (c, v) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected CLIPSxCROPS, got {s:?}"))?;
    let parse = |x: &str| x.trim().parse::<usize>().map_err(|e| format!("{x:?}: {e}"));
    let (c, v) = (parse(c)?, parse(v)?);
    if c == 0 || !(1..=3).contains(&v) {
        return Err(format!(
            "need at least one clip and 1 to 3 crops, got {c}x{v}"
        ));
    }
    Ok((c, v))
}
