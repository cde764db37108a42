use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ClassId;

/// Pixel tallies for one class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IouCounts {
    pub intersection: u64,
    pub union: u64,
}

impl IouCounts {
    pub fn iou(&self) -> Option<f64> {
        (self.union > 0).then(|| self.intersection as f64 / self.union as f64)
    }
}

/// Dataset-level intersection and union counts per class.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionAccumulator {
    counts: BTreeMap<ClassId, IouCounts>,
}

impl ConfusionAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one prediction/truth pair. Every class in `classes` is
    /// registered, even with zero counts.
    pub fn accumulate(&mut self, pred: &[ClassId], truth: &[ClassId], classes: &BTreeSet<ClassId>) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::ShapeMismatch(format!("prediction of {} pixels, truth of {}", pred.len(), truth.len())));
        }
        for &c in classes {
            let e = self.counts.entry(c).or_default();
            for (&p, &t) in pred.iter().zip(truth) {
                let (a, b) = (p == c, t == c);
                e.intersection += u64::from(a && b);
                e.union += u64::from(a || b);
            }
        }
        Ok(())
    }

    /// Integer addition, so merge order never matters.
    pub fn merge(&mut self, other: &ConfusionAccumulator) {
        for (&c, o) in &other.counts {
            let e = self.counts.entry(c).or_default();
            e.intersection += o.intersection;
            e.union += o.union;
        }
    }

    pub fn counts(&self, class: ClassId) -> Option<IouCounts> {
        self.counts.get(&class).copied()
    }

    pub fn iou(&self, class: ClassId) -> Option<f64> {
        self.counts.get(&class).and_then(IouCounts::iou)
    }

    pub fn classes(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.counts.keys().copied()
    }

    /// IoU of every registered class with a nonzero union.
    pub fn per_class_iou(&self) -> BTreeMap<ClassId, f64> {
        self.counts.iter().filter_map(|(&c, n)| n.iou().map(|v| (c, v))).collect()
    }
}

pub fn iou_accumulate(
    acc: &mut ConfusionAccumulator,
    pred: &[ClassId],
    truth: &[ClassId],
    classes: &BTreeSet<ClassId>,
) -> Result<()> {
    acc.accumulate(pred, truth, classes)
}

/// Mean IoU over a class subset plus the classes left out for having an
/// empty union.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetMiou {
    pub value: f64,
    pub excluded: Vec<ClassId>,
}

pub fn miou(acc: &ConfusionAccumulator, subset: &BTreeSet<ClassId>) -> Result<SubsetMiou> {
    let mut sum = 0.0;
    let mut n = 0usize;
    let mut excluded = Vec::new();
    for &c in subset {
        match acc.iou(c) {
            Some(v) => {
                sum += v;
                n += 1;
            }
            None => excluded.push(c),
        }
    }
    if n == 0 {
        return Err(Error::EmptySubset);
    }
    Ok(SubsetMiou { value: sum / n as f64, excluded })
}

/// `2su / (s + u)`, zero when both are zero.
pub fn harmonic(seen: f64, unseen: f64) -> f64 {
    if seen + unseen == 0.0 {
        0.0
    } else {
        2.0 * seen * unseen / (seen + unseen)
    }
}
