use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Conv3D layers that may be made deformable.
pub const DEFORMABLE_CONV_SLOTS: [usize; 3] = [4, 5, 6];
/// VoxRes blocks that may be made deformable (both of their convolutions).
pub const DEFORMABLE_VOXRES_SLOTS: [usize; 3] = [2, 3, 4];

fn default_in_channels() -> usize {
    1
}
fn default_widths() -> [usize; 6] {
    [16, 16, 32, 32, 64, 64]
}
fn default_kernel() -> [usize; 3] {
    [3, 3, 3]
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    /// Output channels of Conv1..Conv6. VoxRes blocks keep the width of the
    /// convolution preceding them.
    #[serde(default = "default_widths")]
    pub widths: [usize; 6],
    #[serde(default)]
    pub deform_conv_idx: BTreeSet<usize>,
    #[serde(default)]
    pub deform_voxres_idx: BTreeSet<usize>,
    #[serde(default = "default_kernel")]
    pub kernel: [usize; 3],
    /// Hidden units between pooling and the logit; 0 means a single linear layer.
    #[serde(default)]
    pub head_hidden: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: default_in_channels(),
            widths: default_widths(),
            deform_conv_idx: BTreeSet::new(),
            deform_voxres_idx: BTreeSet::new(),
            kernel: default_kernel(),
            head_hidden: 0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(bad) = self.deform_conv_idx.iter().find(|i| !DEFORMABLE_CONV_SLOTS.contains(i)) {
            return Err(Error::Config(format!(
                "deformable Conv3D index {bad} outside {{4, 5, 6}}"
            )));
        }
        if let Some(bad) = self
            .deform_voxres_idx
            .iter()
            .find(|i| !DEFORMABLE_VOXRES_SLOTS.contains(i))
        {
            return Err(Error::Config(format!(
                "deformable VoxRes index {bad} outside {{2, 3, 4}}"
            )));
        }
        if self.in_channels == 0 || self.widths.contains(&0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.kernel.iter().any(|&k| k == 0 || k % 2 == 0) {
            return Err(Error::Config(format!(
                "kernel {:?} must have odd positive extents",
                self.kernel
            )));
        }
        Ok(())
    }

    /// Placement label in the `"<conv idxs> ; <voxres idxs>"` form, e.g.
    /// `"4, 5 ; 2, 3"` or `"- ; -"`.
    pub fn placement_label(&self) -> String {
        format_placement(&self.deform_conv_idx, &self.deform_voxres_idx)
    }

    pub fn with_placement(mut self, label: &str) -> Result<Self> {
        let (conv, voxres) = parse_placement(label)?;
        self.deform_conv_idx = conv;
        self.deform_voxres_idx = voxres;
        Ok(self)
    }
}

fn format_set(set: &BTreeSet<usize>) -> String {
    if set.is_empty() {
        return "-".into();
    }
    let mut s = String::new();
    for (i, v) in set.iter().enumerate() {
        if i > 0 {
            s.push_str(", ");
        }
        write!(s, "{v}").unwrap();
    }
    s
}

pub fn format_placement(conv: &BTreeSet<usize>, voxres: &BTreeSet<usize>) -> String {
    format!("{} ; {}", format_set(conv), format_set(voxres))
}

fn parse_set(part: &str, allowed: &[usize; 3], what: &str) -> Result<BTreeSet<usize>> {
    let part = part.trim();
    if part == "-" {
        return Ok(BTreeSet::new());
    }
    let mut set = BTreeSet::new();
    for tok in part.split(',') {
        let tok = tok.trim();
        let v: usize = tok
            .parse()
            .map_err(|_| Error::Config(format!("bad {what} index `{tok}` in placement label")))?;
        if !allowed.contains(&v) {
            return Err(Error::Config(format!(
                "{what} index {v} outside {{{}, {}, {}}}",
                allowed[0], allowed[1], allowed[2]
            )));
        }
        if !set.insert(v) {
            return Err(Error::Config(format!("duplicate {what} index {v}")));
        }
    }
    Ok(set)
}

/// Parses `"4, 5 ; 2, 3"` into the Conv3D and VoxRes index sets.
pub fn parse_placement(label: &str) -> Result<(BTreeSet<usize>, BTreeSet<usize>)> {
    let parts: Vec<&str> = label.split(';').collect();
    if parts.len() != 2 {
        return Err(Error::Config(format!(
            "placement label `{label}` must look like `<conv idxs> ; <voxres idxs>`"
        )));
    }
    Ok((
        parse_set(parts[0], &DEFORMABLE_CONV_SLOTS, "Conv3D")?,
        parse_set(parts[1], &DEFORMABLE_VOXRES_SLOTS, "VoxRes")?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_table_labels() {
        let (c, v) = parse_placement("4, 5 ; 2, 3").unwrap();
        assert_eq!(c, BTreeSet::from([4, 5]));
        assert_eq!(v, BTreeSet::from([2, 3]));
        let (c, v) = parse_placement("- ; -").unwrap();
        assert!(c.is_empty() && v.is_empty());
        let (c, v) = parse_placement("6; -").unwrap();
        assert_eq!(c, BTreeSet::from([6]));
        assert!(v.is_empty());
    }

    #[test]
    fn rejects_out_of_range_and_malformed() {
        assert!(parse_placement("7 ; -").is_err());
        assert!(parse_placement("- ; 1").is_err());
        assert!(parse_placement("4 ; 2 ; 3").is_err());
        assert!(parse_placement("4,4 ; -").is_err());
        assert!(parse_placement("x ; -").is_err());
    }

    #[test]
    fn label_round_trip() {
        for label in ["- ; -", "4 ; 2", "4, 5 ; 2, 3", "5, 6 ; 3, 4", "6 ; -"] {
            let cfg = ModelConfig::default().with_placement(label).unwrap();
            assert_eq!(cfg.placement_label(), label);
        }
    }

    #[test]
    fn validate_rejects_bad_sets() {
        let mut cfg = ModelConfig::default();
        cfg.deform_conv_idx.insert(3);
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::default();
        cfg.deform_voxres_idx.insert(5);
        assert!(cfg.validate().is_err());
    }
}
