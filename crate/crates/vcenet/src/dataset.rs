//! Dataset directories, fold files and class maps.
//!
//! A dataset directory holds
//!
//! ```text
//! meta.json          {"n_classes": K, "ids": ["000000", ...]}
//! images/<id>.png    RGB query images
//! labels/<id>.png    8-bit class ids, 0 = background
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use vcenet_core::episode::{EpisodeSource, FoldSpec, IndexEntry};
use vcenet_core::image::{LabelMap, RgbImage};
use vcenet_core::synth::{self, SynthSpec};
use vcenet_core::train::ClassMap;

use crate::error::{CliError, CliResult};
use crate::io;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Meta {
    pub n_classes: u32,
    pub ids: Vec<String>,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::user(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::user(format!("{}: {e}", path.display())))
}

fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s.into_bytes()
}

/// A dataset directory. The index (class ids per image) is built when opening;
/// images are read from disk on every load.
#[derive(Clone, Debug)]
pub struct DirDataset {
    root: PathBuf,
    n_classes: u32,
    entries: Vec<IndexEntry>,
    image_size: Option<usize>,
}

impl DirDataset {
    /// Opens `root`; with `image_size`, samples are resized to that square side
    /// (bilinear for images, nearest for labels).
    pub fn open(root: &Path, image_size: Option<usize>) -> CliResult<Self> {
        let meta: Meta = read_json(&root.join("meta.json"))?;
        if meta.n_classes == 0 || meta.n_classes > 255 {
            return Err(CliError::user(format!("{}: n_classes must be in 1..=255", root.display())));
        }
        let mut entries = Vec::with_capacity(meta.ids.len());
        for id in &meta.ids {
            let labels = io::read_labels(&Self::label_path(root, id))?;
            let classes = labels.classes();
            if let Some(c) = classes.iter().find(|&&c| c > meta.n_classes) {
                return Err(CliError::user(format!("{id}: class id {c} exceeds n_classes = {}", meta.n_classes)));
            }
            entries.push(IndexEntry { id: id.clone(), classes });
        }
        Ok(DirDataset { root: root.to_path_buf(), n_classes: meta.n_classes, entries, image_size })
    }

    pub fn image_path(root: &Path, id: &str) -> PathBuf {
        root.join("images").join(format!("{id}.png"))
    }

    pub fn label_path(root: &Path, id: &str) -> PathBuf {
        root.join("labels").join(format!("{id}.png"))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl EpisodeSource for DirDataset {
    fn n_classes(&self) -> u32 {
        self.n_classes
    }

    fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    fn load(&self, index: usize) -> vcenet_core::Result<(RgbImage, LabelMap)> {
        let err = |e: CliError| vcenet_core::Error::Dataset(e.to_string());
        let id = &self.entries[index].id;
        let image = io::read_rgb(&Self::image_path(&self.root, id)).map_err(err)?;
        let labels = io::read_labels(&Self::label_path(&self.root, id)).map_err(err)?;
        if (image.width, image.height) != (labels.width, labels.height) {
            return Err(vcenet_core::Error::Dataset(format!("{id}: image and label sizes differ")));
        }
        Ok(match self.image_size {
            Some(s) if (image.width, image.height) != (s, s) => (image.resized(s, s), labels.resized(s, s)),
            _ => (image, labels),
        })
    }
}

/// Writes samples as a dataset directory.
pub fn write_dataset(root: &Path, n_classes: u32, samples: &[(String, RgbImage, LabelMap)]) -> CliResult<()> {
    for (id, img, lab) in samples {
        io::write_rgb(&DirDataset::image_path(root, id), img)?;
        io::write_labels(&DirDataset::label_path(root, id), lab)?;
    }
    let meta = Meta { n_classes, ids: samples.iter().map(|(id, ..)| id.clone()).collect() };
    io::atomic_write(&root.join("meta.json"), &to_json(&meta))
}

/// Generates and writes a synthetic dataset.
pub fn write_synthetic(root: &Path, spec: &SynthSpec) -> CliResult<()> {
    let samples = synth::generate(spec)?;
    write_dataset(root, spec.n_classes, &samples)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FoldFile {
    pub fold: usize,
    pub test_classes: Vec<u32>,
}

pub fn read_fold_file(path: &Path, n_classes: u32) -> CliResult<FoldSpec> {
    let f: FoldFile = read_json(path)?;
    Ok(FoldSpec::with_test_classes(f.fold, n_classes, f.test_classes)?)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassMapFile {
    pub map: BTreeMap<u32, u32>,
}

pub fn read_class_map(path: &Path) -> CliResult<ClassMap> {
    let f: ClassMapFile = read_json(path)?;
    Ok(ClassMap { map: f.map })
}

pub fn write_class_map(path: &Path, map: &ClassMap) -> CliResult<()> {
    io::atomic_write(path, &to_json(&ClassMapFile { map: map.map.clone() }))
}
