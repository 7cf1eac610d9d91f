//! Zero-shot episodes: disjoint class folds, dataset indexing and seeded episode sampling.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{binarize_mask, LabelMap, Mask, RgbImage};
use crate::tensor::Tensor;

/// Re-draws allowed when a drawn image turns out to hold no foreground pixel.
const MAX_REDRAWS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// Partition of class ids `1..=n_total_classes` into seen and unseen classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSpec {
    pub fold_index: usize,
    pub train_classes: BTreeSet<u32>,
    pub test_classes: BTreeSet<u32>,
    pub n_total_classes: u32,
}

impl FoldSpec {
    /// Fold whose test classes are given explicitly; every other class trains.
    pub fn with_test_classes(fold_index: usize, n_total_classes: u32, test: impl IntoIterator<Item = u32>) -> Result<Self> {
        let test_classes: BTreeSet<u32> = test.into_iter().collect();
        if let Some(&bad) = test_classes.iter().find(|&&c| c == 0 || c > n_total_classes) {
            return Err(Error::Range { what: "class id", detail: format!("{bad} not in 1..={n_total_classes}") });
        }
        let train_classes: BTreeSet<u32> = (1..=n_total_classes).filter(|c| !test_classes.contains(c)).collect();
        if test_classes.is_empty() || train_classes.is_empty() {
            return Err(Error::config("a fold needs at least one train and one test class"));
        }
        Ok(FoldSpec { fold_index, train_classes, test_classes, n_total_classes })
    }

    pub fn classes(&self, split: Split) -> &BTreeSet<u32> {
        match split {
            Split::Train => &self.train_classes,
            Split::Test => &self.test_classes,
        }
    }
}

/// Contiguous-block folds: fold `i` tests classes `i·k+1 ..= (i+1)·k`.
pub fn build_fold_spec(fold_index: usize, n_total_classes: u32, classes_per_fold: u32) -> Result<FoldSpec> {
    if classes_per_fold == 0 || n_total_classes % classes_per_fold != 0 {
        return Err(Error::config(format!(
            "{classes_per_fold} classes per fold does not partition {n_total_classes} classes"
        )));
    }
    let folds = (n_total_classes / classes_per_fold) as usize;
    if fold_index >= folds {
        return Err(Error::Range { what: "fold index", detail: format!("{fold_index} not below {folds}") });
    }
    let start = fold_index as u32 * classes_per_fold + 1;
    FoldSpec::with_test_classes(fold_index, n_total_classes, start..start + classes_per_fold)
}

/// One indexed image and the class ids present in its label map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexEntry {
    pub id: String,
    pub classes: Vec<u32>,
}

/// A dataset that can be sampled for episodes.
pub trait EpisodeSource {
    fn n_classes(&self) -> u32;
    fn entries(&self) -> &[IndexEntry];
    fn load(&self, index: usize) -> Result<(RgbImage, LabelMap)>;
}

/// Dataset held entirely in memory.
#[derive(Clone, Debug, Default)]
pub struct InMemoryDataset {
    n_classes: u32,
    entries: Vec<IndexEntry>,
    samples: Vec<(RgbImage, LabelMap)>,
}

impl InMemoryDataset {
    pub fn new(n_classes: u32) -> Self {
        InMemoryDataset { n_classes, entries: Vec::new(), samples: Vec::new() }
    }

    pub fn push(&mut self, id: impl Into<String>, image: RgbImage, labels: LabelMap) -> Result<()> {
        if (image.width, image.height) != (labels.width, labels.height) {
            return Err(Error::Dataset(format!(
                "image {}×{} and labels {}×{} differ",
                image.width, image.height, labels.width, labels.height
            )));
        }
        let classes = labels.classes();
        if let Some(&c) = classes.iter().find(|&&c| c > self.n_classes) {
            return Err(Error::Dataset(format!("class id {c} exceeds {}", self.n_classes)));
        }
        self.entries.push(IndexEntry { id: id.into(), classes });
        self.samples.push((image, labels));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

impl EpisodeSource for InMemoryDataset {
    fn n_classes(&self) -> u32 {
        self.n_classes
    }

    fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    fn load(&self, index: usize) -> Result<(RgbImage, LabelMap)> {
        self.samples.get(index).cloned().ok_or_else(|| Error::Dataset(format!("no sample {index}")))
    }
}

/// Query image, target class and binary ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    /// `3×H×W` in `[0, 1]`.
    pub query_image: Tensor<f32>,
    pub target_class_id: u32,
    pub gt_mask: Mask,
    pub split: Split,
    pub image_id: String,
}

/// Seeded episode stream over a class set.
///
/// Each draw picks a class uniformly among the requested classes present in the
/// index, then an image uniformly among those containing it. Independent streams
/// should use distinct seeds (for example `base_seed + worker_id`).
pub struct EpisodeSampler<'a, S: EpisodeSource + ?Sized> {
    source: &'a S,
    split: Split,
    candidates: Vec<(u32, Vec<usize>)>,
    rng: ChaCha8Rng,
}

impl<'a, S: EpisodeSource + ?Sized> EpisodeSampler<'a, S> {
    pub fn new(source: &'a S, classes: &BTreeSet<u32>, split: Split, seed: u64) -> Result<Self> {
        let candidates: Vec<(u32, Vec<usize>)> = classes
            .iter()
            .map(|&c| {
                let images = source
                    .entries()
                    .iter()
                    .enumerate()
                    .filter(|(_, e)| e.classes.contains(&c))
                    .map(|(i, _)| i)
                    .collect::<Vec<_>>();
                (c, images)
            })
            .filter(|(_, images)| !images.is_empty())
            .collect();
        if candidates.is_empty() {
            return Err(Error::Exhausted { classes: classes.iter().copied().collect() });
        }
        Ok(EpisodeSampler { source, split, candidates, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    pub fn for_fold(source: &'a S, fold: &FoldSpec, split: Split, seed: u64) -> Result<Self> {
        Self::new(source, fold.classes(split), split, seed)
    }

    /// Classes that can actually be drawn.
    pub fn classes(&self) -> impl Iterator<Item = u32> + '_ {
        self.candidates.iter().map(|(c, _)| *c)
    }

    /// Draws `(class id, image index)` without loading the image.
    pub fn draw(&mut self) -> (u32, usize) {
        let (class, images) = &self.candidates[self.rng.random_range(0..self.candidates.len())];
        (*class, images[self.rng.random_range(0..images.len())])
    }

    pub fn next_episode(&mut self) -> Result<Episode> {
        for _ in 0..MAX_REDRAWS {
            let (class, index) = self.draw();
            let (image, labels) = self.source.load(index)?;
            let gt_mask = binarize_mask(&labels, class);
            if gt_mask.count() == 0 {
                continue;
            }
            return Ok(Episode {
                query_image: image.to_tensor(),
                target_class_id: class,
                gt_mask,
                split: self.split,
                image_id: self.source.entries()[index].id.clone(),
            });
        }
        Err(Error::Exhausted { classes: self.classes().collect() })
    }
}

/// One episode of `split`, deterministic in `(source, fold, split, seed)`.
pub fn sample_episode<S: EpisodeSource + ?Sized>(source: &S, fold: &FoldSpec, split: Split, seed: u64) -> Result<Episode> {
    EpisodeSampler::for_fold(source, fold, split, seed)?.next_episode()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn tiny_image(class: u8) -> (RgbImage, LabelMap) {
        let img = RgbImage::new(2, 2, vec![10; 12]).unwrap();
        let lab = LabelMap::new(2, 2, vec![0, class, class, 0]).unwrap();
        (img, lab)
    }

    #[test]
    fn fold_examples() {
        let f = build_fold_spec(0, 20, 5).unwrap();
        assert_eq!(f.test_classes, (1..=5).collect());
        assert_eq!(f.train_classes, (6..=20).collect());
        let f = build_fold_spec(3, 20, 5).unwrap();
        assert_eq!(f.test_classes, (16..=20).collect());
        assert_eq!(f.train_classes, (1..=15).collect());
        let f = build_fold_spec(0, 4, 2).unwrap();
        assert_eq!(f.test_classes, [1, 2].into_iter().collect());
        assert_eq!(f.train_classes, [3, 4].into_iter().collect());
    }

    #[test]
    fn fold_errors() {
        assert!(matches!(build_fold_spec(4, 20, 5), Err(Error::Range { .. })));
        assert!(matches!(build_fold_spec(0, 20, 6), Err(Error::Config(_))));
        assert!(matches!(build_fold_spec(0, 20, 0), Err(Error::Config(_))));
        assert!(matches!(FoldSpec::with_test_classes(0, 4, [5]), Err(Error::Range { .. })));
        assert!(FoldSpec::with_test_classes(0, 2, [1, 2]).is_err());
    }

    #[test]
    fn only_present_class_is_sampled() {
        let mut ds = InMemoryDataset::new(4);
        let (i, l) = tiny_image(3);
        ds.push("a", i, l).unwrap();
        let fold = build_fold_spec(1, 4, 2).unwrap();
        let ep = sample_episode(&ds, &fold, Split::Test, 9).unwrap();
        assert_eq!(ep.target_class_id, 3);
        assert_eq!(ep.gt_mask.data, vec![0, 1, 1, 0]);
        assert_eq!(ep, sample_episode(&ds, &fold, Split::Test, 9).unwrap());
        assert!(matches!(sample_episode(&ds, &fold, Split::Train, 9), Err(Error::Exhausted { .. })));
    }

    #[test]
    fn push_rejects_out_of_range_classes() {
        let mut ds = InMemoryDataset::new(2);
        let (i, l) = tiny_image(3);
        assert!(matches!(ds.push("a", i, l), Err(Error::Dataset(_))));
    }
}
