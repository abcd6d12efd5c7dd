use std::path::Path;

use mtpslab::model::checkpoint::read_checkpoint_bytes;
use mtpslab::model::ModelConfig;
use mtpslab::{Error, Model32, Model64, Result};

use crate::manifest::io_err;

/// A checkpoint of either precision.
pub enum AnyModel {
    F32(Model32),
    F64(Model64),
}

/// Runs `$body` with `$m` bound to the concrete model.
macro_rules! with_model {
    ($any:expr, $m:ident => $body:expr) => {
        match $any {
            $crate::anymodel::AnyModel::F32($m) => $body,
            $crate::anymodel::AnyModel::F64($m) => $body,
        }
    };
}
pub(crate) use with_model;

impl AnyModel {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
        match read_checkpoint_bytes::<f32>(&bytes) {
            Err(Error::DtypeMismatch { .. }) => Ok(AnyModel::F64(read_checkpoint_bytes(&bytes)?)),
            other => other.map(AnyModel::F32),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        with_model!(self, m => m.config())
    }
}
