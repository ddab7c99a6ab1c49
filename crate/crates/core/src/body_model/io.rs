use std::fs;
use std::path::Path;

use super::{KinematicModel, ModelError};

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Write the model as pretty-printed JSON.
pub fn save_model(model: &KinematicModel, path: &Path) -> Result<(), ModelError> {
    let text = serde_json::to_string_pretty(model)?;
    fs::write(path, text)?;
    Ok(())
}

/// Read and validate a model file.
pub fn load_model(path: &Path) -> Result<KinematicModel, ModelError> {
    let text = fs::read_to_string(path)?;
    let version: VersionProbe = serde_json::from_str(&text)?;
    if version.format_version != MODEL_FORMAT_VERSION {
        return Err(ModelError::UnsupportedVersion(version.format_version));
    }
    let model: KinematicModel = serde_json::from_str(&text)?;
    model.validate()?;
    Ok(model)
}

#[derive(serde::Deserialize)]
struct VersionProbe {
    format_version: u32,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body_model::{toy_model, ToyModelConfig};

    #[test]
    fn round_trip_is_lossless() {
        let model = toy_model(&ToyModelConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_model(&model, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back, model);
        assert_eq!(back.digest(), model.digest());
    }

    #[test]
    fn rejects_future_version() {
        let mut model = toy_model(&ToyModelConfig::default()).unwrap();
        model.format_version = 99;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_model(&model, &path).unwrap();
        assert!(matches!(
            load_model(&path),
            Err(ModelError::UnsupportedVersion(99))
        ));
    }
}
