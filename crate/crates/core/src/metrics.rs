//! Intersection-over-union and per-class aggregation.

use alloc::collections::BTreeMap;
use alloc::format;

use crate::episode::Split;
use crate::error::{Error, Result};
use crate::image::Mask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

fn counts(pred: &Mask, gt: &Mask) -> Result<(u64, u64)> {
    if (pred.width, pred.height) != (gt.width, gt.height) || pred.data.len() != gt.data.len() {
        return Err(Error::Shape(format!(
            "prediction {}×{} vs ground truth {}×{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    let (mut inter, mut union) = (0u64, 0u64);
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        let (p, g) = (p != 0, g != 0);
        inter += u64::from(p && g);
        union += u64::from(p || g);
    }
    Ok((inter, union))
}

/// `|pred ∧ gt| / |pred ∨ gt|`, defined as 1 when both masks are empty.
pub fn compute_iou(pred: &Mask, gt: &Mask) -> Result<f64> {
    let (inter, union) = counts(pred, gt)?;
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Per-class intersection and union sums. Merging is associative and commutative,
/// so evaluation shards can be combined in any order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IouAccumulator {
    sums: BTreeMap<u32, (u64, u64)>,
    episodes: usize,
}

impl IouAccumulator {
    pub fn add(&mut self, class_id: u32, pred: &Mask, gt: &Mask) -> Result<()> {
        let (i, u) = counts(pred, gt)?;
        let e = self.sums.entry(class_id).or_default();
        e.0 += i;
        e.1 += u;
        self.episodes += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &IouAccumulator) {
        for (&c, &(i, u)) in &other.sums {
            let e = self.sums.entry(c).or_default();
            e.0 += i;
            e.1 += u;
        }
        self.episodes += other.episodes;
    }

    pub fn episodes(&self) -> usize {
        self.episodes
    }

    pub fn per_class_iou(&self) -> BTreeMap<u32, f64> {
        self.sums
            .iter()
            .map(|(&c, &(i, u))| (c, if u == 0 { 1.0 } else { i as f64 / u as f64 }))
            .collect()
    }

    pub fn report(&self, fold_index: usize, split: Split, domain: Domain) -> MetricsReport {
        let per_class_iou = self.per_class_iou();
        let miou = if per_class_iou.is_empty() {
            0.0
        } else {
            per_class_iou.values().sum::<f64>() / per_class_iou.len() as f64
        };
        MetricsReport { per_class_iou, miou, n_episodes: self.episodes, fold_index, split, domain }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub per_class_iou: BTreeMap<u32, f64>,
    pub miou: f64,
    pub n_episodes: usize,
    pub fold_index: usize,
    pub split: Split,
    pub domain: Domain,
}
