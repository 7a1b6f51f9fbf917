//! Location of large downloaded assets.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const ASSET_DIR_ENV: &str = "PASE_ASSET_DIR";

/// Pretrained 24-layer encoder in the reference parameter layout.
pub const LARGE_ENCODER_FILE: &str = "wavlm_large.safetensors";

/// Line-delimited manifest of clean test utterances (corpus manifest format).
pub const CLEAN_TEST_MANIFEST: &str = "clean_test.jsonl";

/// Asset directory from the environment, if set.
pub fn asset_dir_from_env() -> Option<PathBuf> {
    std::env::var_os(ASSET_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from)
}

pub fn download_instructions(file: &str) -> String {
    match file {
        LARGE_ENCODER_FILE => format!(
            "download the pretrained large encoder and convert it with\n  \
             python3 tools/fetch_large_encoder.py \"${ASSET_DIR_ENV}\"\n\
             (uses the `transformers` package to fetch microsoft/wavlm-large and writes {LARGE_ENCODER_FILE})"
        ),
        CLEAN_TEST_MANIFEST => format!(
            "write {CLEAN_TEST_MANIFEST} into ${ASSET_DIR_ENV}: one JSON object per line with \
             audio_path, duration_seconds and kind=\"clean\" for at least 100 clean 16 kHz test utterances"
        ),
        other => format!("place {other} in ${ASSET_DIR_ENV}"),
    }
}

/// Path of `file` inside `dir`, or a [`Error::MissingAsset`] explaining how
/// to obtain it.
pub fn require_asset(dir: Option<&Path>, file: &str) -> Result<PathBuf> {
    let Some(dir) = dir else {
        return Err(Error::MissingAsset(format!(
            "{file} needed but {ASSET_DIR_ENV} is not set; {}",
            download_instructions(file)
        )));
    };
    let path = dir.join(file);
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::MissingAsset(format!("{} not found; {}", path.display(), download_instructions(file))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_assets_explain_themselves() {
        let dir = tempfile::tempdir().unwrap();
        let err = require_asset(Some(dir.path()), LARGE_ENCODER_FILE).unwrap_err();
        assert!(matches!(err, Error::MissingAsset(ref m) if m.contains("fetch_large_encoder")));
        assert!(require_asset(None, CLEAN_TEST_MANIFEST).is_err());
        std::fs::write(dir.path().join(CLEAN_TEST_MANIFEST), "").unwrap();
        assert!(require_asset(Some(dir.path()), CLEAN_TEST_MANIFEST).is_ok());
    }
}
