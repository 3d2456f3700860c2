// SPDX-License-Identifier: MIT OR Apache-2.0

//! Probe sites: one `(layer, module kind)` location in the toy transformer.

use std::fmt;
use std::str::FromStr;

use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModuleKind {
    Attention,
    Ffn,
}

/// A module whose output is added to the residual stream.
///
/// Ordering is computation order: by layer, attention before FFN.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ProbeSite {
    pub layer: usize,
    pub kind: ModuleKind,
}

impl ProbeSite {
    pub fn attn(layer: usize) -> Self {
        Self {
            layer,
            kind: ModuleKind::Attention,
        }
    }

    pub fn ffn(layer: usize) -> Self {
        Self {
            layer,
            kind: ModuleKind::Ffn,
        }
    }

    /// All `2 · n_layers` sites in computation order.
    pub fn all(n_layers: usize) -> Vec<Self> {
        (0..n_layers)
            .flat_map(|l| [Self::attn(l), Self::ffn(l)])
            .collect()
    }

    /// Position in computation order.
    pub fn index(&self) -> usize {
        2 * self.layer + usize::from(self.kind == ModuleKind::Ffn)
    }
}

impl fmt::Display for ProbeSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let k = match self.kind {
            ModuleKind::Attention => "attn",
            ModuleKind::Ffn => "ffn",
        };
        write!(f, "L{}.{k}", self.layer)
    }
}

impl FromStr for ProbeSite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || Error::Config(format!("invalid probe site `{s}` (expected e.g. L3.attn)"));
        let rest = s.strip_prefix('L').ok_or_else(bad)?;
        let (layer, kind) = rest.split_once('.').ok_or_else(bad)?;
        let layer = layer.parse().map_err(|_| bad())?;
        let kind = match kind {
            "attn" => ModuleKind::Attention,
            "ffn" => ModuleKind::Ffn,
            _ => return Err(bad()),
        };
        Ok(Self { layer, kind })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn display_parse_roundtrip() {
        for s in ProbeSite::all(3) {
            assert_eq!(s.to_string().parse::<ProbeSite>().unwrap(), s);
        }
        assert!("L1.mlp".parse::<ProbeSite>().is_err());
    }

    #[test]
    fn ordering_is_computation_order() {
        let sites = ProbeSite::all(4);
        assert_eq!(sites.len(), 8);
        assert!(sites.windows(2).all(|w| w[0] < w[1]));
        assert!(sites.iter().enumerate().all(|(i, s)| s.index() == i));
    }
}
