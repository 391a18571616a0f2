use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Learned,
    Analytic,
}

/// An `N×N` spatial kernel mapping a forcing field to a state correction.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelEstimate {
    pub k: Tensor,
    pub provenance: Provenance,
}

impl KernelEstimate {
    pub fn new(k: Tensor, provenance: Provenance) -> Result<Self> {
        let (r, c) = k.dims2("KernelEstimate")?;
        if r != c {
            return Err(Error::dim("KernelEstimate", format!("kernel must be square, got {r}x{c}")));
        }
        if !k.all_finite() {
            return Err(Error::NonFinite { op: "KernelEstimate" });
        }
        Ok(Self { k, provenance })
    }

    pub fn size(&self) -> usize {
        self.k.shape()[0]
    }
}
