use serde::{Deserialize, Serialize};

use super::{Matrix, ParamSet};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

/// Self-describing parameter dump. `fingerprint` identifies the
/// architecture; `meta` carries whatever the owner wants to persist.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub fingerprint: serde_json::Value,
    #[serde(default)]
    pub meta: serde_json::Value,
    pub params: Vec<ParamRecord>,
}

impl Checkpoint {
    pub const FORMAT: &'static str = "mpgnn-checkpoint-v1";

    pub fn capture(
        params: &ParamSet,
        fingerprint: serde_json::Value,
        meta: serde_json::Value,
    ) -> Self {
        Self {
            format: Self::FORMAT.to_string(),
            fingerprint,
            meta,
            params: params
                .ids()
                .map(|id| {
                    let v = params.value(id);
                    ParamRecord {
                        name: params.name(id).to_string(),
                        rows: v.rows(),
                        cols: v.cols(),
                        values: v.data().to_vec(),
                    }
                })
                .collect(),
        }
    }

    /// Copies values into `params`, which must have exactly the same names
    /// and shapes in the same order.
    pub fn restore_into(&self, params: &mut ParamSet) -> Result<()> {
        if self.format != Self::FORMAT {
            return Err(Error::Checkpoint(format!(
                "unknown format `{}`",
                self.format
            )));
        }
        if self.params.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                params.len()
            )));
        }
        for (rec, id) in self.params.iter().zip(params.ids().collect::<Vec<_>>()) {
            let shape = params.value(id).shape();
            if rec.name != params.name(id) || (rec.rows, rec.cols) != shape {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` {}x{} does not match model `{}` {:?}",
                    rec.name,
                    rec.rows,
                    rec.cols,
                    params.name(id),
                    shape
                )));
            }
            *params.value_mut(id) = Matrix::from_vec(rec.rows, rec.cols, rec.values.clone())
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}
