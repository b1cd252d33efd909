use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Regular,
    /// SparseGrad with the sparse-by-dense backward.
    SparsegradSd,
    /// SparseGrad with the dense backward followed by top-k.
    SparsegradReg,
    Meprop,
    Lora,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Regular,
        Method::SparsegradSd,
        Method::SparsegradReg,
        Method::Meprop,
        Method::Lora,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Regular => "regular",
            Method::SparsegradSd => "sparsegrad-sd",
            Method::SparsegradReg => "sparsegrad-reg",
            Method::Meprop => "meprop",
            Method::Lora => "lora",
        }
    }

    pub fn is_sparsegrad(self) -> bool {
        matches!(self, Method::SparsegradSd | Method::SparsegradReg)
    }

    pub fn tag(self) -> u8 {
        Method::ALL.iter().position(|m| *m == self).expect("listed") as u8
    }

    pub fn from_tag(tag: u8) -> Option<Method> {
        Method::ALL.get(tag as usize).copied()
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown method {s:?} (expected one of: regular, sparsegrad-sd, sparsegrad-reg, meprop, lora)"
                ))
            })
    }
}
