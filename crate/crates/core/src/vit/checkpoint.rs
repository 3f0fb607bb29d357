use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::layout;
use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor, Tensor};

/// Manifest file name inside a checkpoint directory.
pub const MANIFEST: &str = "manifest.json";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    config: ModelConfig,
    /// Parameter name → file name, relative to the checkpoint directory.
    tensors: BTreeMap<String, String>,
}

/// Writes `model` to `dir`: one tensor file per parameter plus
/// [`MANIFEST`]. Creates `dir` if needed.
pub fn save_checkpoint(model: &Model, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = BTreeMap::new();
    for (name, t) in model.params.named() {
        let file = format!("{name}.tensor");
        let path = dir.join(&file);
        let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        write_tensor(&mut BufWriter::new(f), t).map_err(|e| Error::io(&path, e))?;
        tensors.insert(name, file);
    }
    let manifest = Manifest {
        config: model.config.clone(),
        tensors,
    };
    let path = dir.join(MANIFEST);
    let js = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, js).map_err(|e| Error::io(&path, e))
}

/// Reads a checkpoint written by [`save_checkpoint`]. Every tensor must be
/// present with the shape the config implies.
pub fn load_checkpoint(dir: &Path) -> Result<Model> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    manifest.config.validate()?;
    let expected = layout(&manifest.config);
    let names: Vec<String> = expected.named().into_iter().map(|(n, _)| n).collect();
    if manifest.tensors.len() != names.len() {
        return Err(Error::Config(format!(
            "manifest lists {} tensors, config needs {}",
            manifest.tensors.len(),
            names.len()
        )));
    }
    let mut names = names.into_iter();
    let params = expected.try_map(&mut |(shape, _)| -> Result<Tensor> {
        let name = names.next().expect("layout and names agree");
        let file = manifest
            .tensors
            .get(&name)
            .ok_or_else(|| Error::Config(format!("manifest has no tensor {name}")))?;
        let path = dir.join(file);
        let mut f = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let t = read_tensor(&mut f).map_err(|e| match e {
            Error::Format { offset, detail } => Error::Format {
                offset,
                detail: format!("{file}: {detail}"),
            },
            other => other,
        })?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Dimension {
                op: "load_checkpoint",
                lhs: t.shape().to_vec(),
                rhs: shape.clone(),
            });
        }
        Ok(t)
    })?;
    Ok(Model {
        config: manifest.config,
        params,
    })
}
