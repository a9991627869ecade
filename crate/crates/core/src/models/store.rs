//! Model persistence: a one-line header `MLIOTRIM-MODEL v1 <kind> <hash>`
//! followed by the JSON-encoded parameters. The hash pins the 204-feature
//! canonical layout; loading refuses a file built against a different one.

use std::path::Path;

use super::{Model, ModelError};
use crate::features::layout_hash;

const MAGIC: &str = "MLIOTRIM-MODEL";
const VERSION: &str = "v1";

pub fn save_model(model: &Model, path: &Path) -> Result<(), ModelError> {
    let io_err = |source| ModelError::Io {
        path: path.display().to_string(),
        source,
    };
    let body = match model {
        Model::Forest(m) => serde_json::to_string(m),
        Model::Mlp(m) => serde_json::to_string(m),
    }
    .map_err(|e| io_err(e.into()))?;
    let contents = format!(
        "{MAGIC} {VERSION} {} {}\n{body}\n",
        model.kind(),
        layout_hash()
    );
    std::fs::write(path, contents).map_err(io_err)
}

pub fn load_model(path: &Path) -> Result<Model, ModelError> {
    let display = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
        path: display.clone(),
        source,
    })?;
    let (header, body) = text.split_once('\n').ok_or_else(|| ModelError::Malformed {
        path: display.clone(),
        reason: "missing header line".into(),
    })?;

    let fields: Vec<&str> = header.split(' ').collect();
    if fields.len() != 4 || fields[0] != MAGIC {
        return Err(ModelError::BadMagic { path: display });
    }
    if fields[1] != VERSION {
        return Err(ModelError::UnsupportedVersion {
            path: display,
            found: fields[1].to_string(),
        });
    }
    if fields[3] != layout_hash() {
        return Err(ModelError::LayoutHashMismatch { path: display });
    }

    let malformed = |reason: String| ModelError::Malformed {
        path: display.clone(),
        reason,
    };
    let model = match fields[2] {
        "forest" => Model::Forest(serde_json::from_str(body).map_err(|e| malformed(e.to_string()))?),
        "mlp" => {
            let mlp: super::MlpModel =
                serde_json::from_str(body).map_err(|e| malformed(e.to_string()))?;
            mlp.validate()?;
            Model::Mlp(mlp)
        }
        kind => {
            return Err(ModelError::UnknownModelKind {
                path: display,
                kind: kind.to_string(),
            })
        }
    };
    Ok(model)
}
