use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvPlan {
    pub k: usize,
    pub repeats: usize,
    pub stratified: bool,
    pub seed: u64,
}

impl Default for CvPlan {
    fn default() -> Self {
        Self {
            k: 3,
            repeats: 3,
            stratified: true,
            seed: 0,
        }
    }
}

impl CvPlan {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 || self.repeats == 0 {
            return Err(Error::Config(format!(
                "cross-validation needs k >= 2 and repeats >= 1, got k = {}, repeats = {}",
                self.k, self.repeats
            )));
        }
        Ok(())
    }
}

/// Folds for each repeat: `k` sorted, disjoint index lists covering
/// `0..labels.len()`. Stratified plans deal each shuffled class round-robin,
/// continuing from where the previous class stopped, so fold sizes and
/// per-class counts both differ by at most one.
pub fn make_folds(labels: &[u8], plan: &CvPlan) -> Result<Vec<Vec<Vec<usize>>>> {
    plan.validate()?;
    let k = plan.k;
    if labels.len() < k {
        return Err(Error::Stratification(format!("{} samples cannot fill {k} folds", labels.len())));
    }
    let groups: Vec<Vec<usize>> = if plan.stratified {
        let mut g = vec![Vec::new(), Vec::new()];
        for (i, &l) in labels.iter().enumerate() {
            let slot = g
                .get_mut(l as usize)
                .ok_or_else(|| Error::Data(format!("label {l} is not 0 or 1")))?;
            slot.push(i);
        }
        for (class, members) in g.iter().enumerate() {
            if members.len() < k {
                return Err(Error::Stratification(format!(
                    "class {class} has {} members, fewer than k = {k}",
                    members.len()
                )));
            }
        }
        g
    } else {
        vec![(0..labels.len()).collect()]
    };
    let root = Rng::new(plan.seed);
    Ok((0..plan.repeats)
        .map(|r| {
            let mut rng = root.split(r as u64);
            let mut folds = vec![Vec::new(); k];
            let mut next = 0;
            for group in &groups {
                let mut members = group.clone();
                rng.shuffle(&mut members);
                for idx in members {
                    folds[next].push(idx);
                    next = (next + 1) % k;
                }
            }
            folds.iter_mut().for_each(|f| f.sort_unstable());
            folds
        })
        .collect())
}
