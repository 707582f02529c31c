//! Labeled image ingestion, deterministic 60/20/20 splitting, split
//! manifests, and the synthetic three-class generator.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::warn;
use thiserror::Error;

use crate::image::{self, ImageError};
use crate::par::{self, Execution};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

/// Class directory names; the index is the label.
pub const CLASS_NAMES: [&str; 3] = ["lung_aca", "lung_scc", "lung_n"];

pub const MANIFEST_HEADER: &str = "source_id,class_name,split";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing class directory {0}")]
    MissingClass(String),
    #[error("class {0} has zero images")]
    EmptyClass(String),
    #[error("cannot decode {path}: {source}")]
    Decode {
        path: PathBuf,
        #[source]
        source: ImageError,
    },
    #[error("unknown class name {0:?}")]
    UnknownClass(String),
    #[error("split needs at least 5 items, got {0}")]
    TooFewItems(usize),
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("item {0} is not listed in the manifest")]
    NotInManifest(String),
    #[error("manifest lists {0}, which was not loaded")]
    MissingItem(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub fn class_index(name: &str) -> Result<usize, DataError> {
    CLASS_NAMES
        .iter()
        .position(|&c| c == name)
        .ok_or_else(|| DataError::UnknownClass(name.to_string()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    /// `3×H×W`, values in `[0, 1]`.
    pub pixels: Tensor,
    pub label: usize,
    pub class_name: String,
    /// `class_name/file_name`; stable across runs.
    pub source_id: String,
}

impl LabeledImage {
    pub fn new(pixels: Tensor, label: usize, file_name: &str) -> Self {
        let class_name = CLASS_NAMES[label].to_string();
        Self {
            source_id: format!("{class_name}/{file_name}"),
            pixels,
            label,
            class_name,
        }
    }

    pub fn size(&self) -> usize {
        self.pixels.shape()[1]
    }
}

/// Maps `[0, 1]` pixels to the model's input range: `(x − 0.5) / 0.5`.
pub fn normalize(pixels: &Tensor) -> Tensor {
    let mut t = pixels.clone();
    t.requires_grad = false;
    t.grad = None;
    t.data_mut().iter_mut().for_each(|v| *v = (*v - 0.5) / 0.5);
    t
}

fn is_image_file(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("ppm") | Some("bmp")
    )
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Loads `root/{lung_aca,lung_scc,lung_n}/*.{ppm,bmp}`, sorted by
/// `(class_name, file_name)`.
pub fn load_image_dir(root: &Path) -> Result<Vec<LabeledImage>, DataError> {
    for entry in std::fs::read_dir(root).map_err(io_err(root))? {
        let entry = entry.map_err(io_err(root))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if entry.path().is_dir() && !CLASS_NAMES.contains(&name.as_str()) {
            warn!("ignoring unknown class directory {name}");
        }
    }
    let mut jobs: Vec<(usize, String, PathBuf)> = Vec::new();
    let mut sorted_classes: Vec<(usize, &str)> = CLASS_NAMES.iter().copied().enumerate().collect();
    sorted_classes.sort_by_key(|&(_, n)| n);
    for (label, class) in sorted_classes {
        let dir = root.join(class);
        if !dir.is_dir() {
            return Err(DataError::MissingClass(class.to_string()));
        }
        let mut files = Vec::new();
        for entry in std::fs::read_dir(&dir).map_err(io_err(&dir))? {
            let path = entry.map_err(io_err(&dir))?.path();
            if !path.is_file() {
                continue;
            }
            if is_image_file(&path) {
                files.push(path);
            } else {
                warn!("skipping non-image file {}", path.display());
            }
        }
        if files.is_empty() {
            return Err(DataError::EmptyClass(class.to_string()));
        }
        files.sort();
        for path in files {
            let name = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
            jobs.push((label, name, path));
        }
    }
    par::map(Execution::default(), &jobs, |_, (label, name, path)| {
        image::load_image(path)
            .map(|pixels| LabeledImage::new(pixels, *label, name))
            .map_err(|source| DataError::Decode {
                path: path.clone(),
                source,
            })
    })
    .into_iter()
    .collect()
}

/// Bilinear resize to `target×target`; the image must be square.
pub fn resize_to_input(img: &LabeledImage, target: usize) -> Result<LabeledImage, DataError> {
    Ok(LabeledImage {
        pixels: image::resize_square(&img.pixels, target)?,
        ..img.clone()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub source_id: String,
    pub class_name: String,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SplitStrategy {
    /// One shuffle over all items.
    #[default]
    Random,
    /// Shuffle and split each class separately with one shared stream.
    Stratified,
}

#[derive(Debug, Clone)]
pub struct SplitDataset {
    pub train: Vec<LabeledImage>,
    pub validation: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
    pub seed: u64,
    /// Sorted by `source_id`.
    pub manifest: Vec<ManifestRecord>,
}

impl SplitDataset {
    pub fn get(&self, split: Split) -> &[LabeledImage] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `(train, validation)` counts; the remainder is test.
pub fn split_counts(n: usize) -> (usize, usize) {
    (n * 6 / 10, n * 2 / 10)
}

fn assign(order: &[usize], out: &mut [Split]) {
    let (n_train, n_val) = split_counts(order.len());
    for (pos, &i) in order.iter().enumerate() {
        out[i] = if pos < n_train {
            Split::Train
        } else if pos < n_train + n_val {
            Split::Validation
        } else {
            Split::Test
        };
    }
}

/// Fisher–Yates shuffle seeded with SplitMix64, then
/// `floor(0.6·N)` train, `floor(0.2·N)` validation, rest test.
pub fn split_dataset(items: Vec<LabeledImage>, seed: u64) -> Result<SplitDataset, DataError> {
    split_dataset_with(items, seed, SplitStrategy::Random)
}

pub fn split_dataset_with(
    items: Vec<LabeledImage>,
    seed: u64,
    strategy: SplitStrategy,
) -> Result<SplitDataset, DataError> {
    let n = items.len();
    if n < 5 {
        return Err(DataError::TooFewItems(n));
    }
    let mut rng = SplitMix64::new(seed);
    let mut which = vec![Split::Test; n];
    match strategy {
        SplitStrategy::Random => {
            let mut order: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut order);
            assign(&order, &mut which);
        }
        SplitStrategy::Stratified => {
            let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for (i, it) in items.iter().enumerate() {
                by_class.entry(it.label).or_default().push(i);
            }
            for order in by_class.values_mut() {
                rng.shuffle(order);
                assign(order, &mut which);
            }
        }
    }
    Ok(build_split(items, &which, seed))
}

fn build_split(items: Vec<LabeledImage>, which: &[Split], seed: u64) -> SplitDataset {
    let mut ds = SplitDataset {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
        seed,
        manifest: Vec::with_capacity(items.len()),
    };
    for (item, &split) in items.into_iter().zip(which) {
        ds.manifest.push(ManifestRecord {
            source_id: item.source_id.clone(),
            class_name: item.class_name.clone(),
            split,
        });
        match split {
            Split::Train => ds.train.push(item),
            Split::Validation => ds.validation.push(item),
            Split::Test => ds.test.push(item),
        }
    }
    ds.manifest.sort_by(|a, b| a.source_id.cmp(&b.source_id));
    ds
}

pub fn manifest_to_csv(records: &[ManifestRecord]) -> String {
    let mut sorted: Vec<&ManifestRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.source_id.cmp(&b.source_id));
    let mut out = String::from(MANIFEST_HEADER);
    out.push('\n');
    for r in sorted {
        out.push_str(&format!("{},{},{}\n", r.source_id, r.class_name, r.split));
    }
    out
}

pub fn manifest_from_csv(text: &str) -> Result<Vec<ManifestRecord>, DataError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == MANIFEST_HEADER => {}
        _ => {
            return Err(DataError::Manifest {
                line: 1,
                msg: format!("expected header {MANIFEST_HEADER:?}"),
            })
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| DataError::Manifest { line: i + 1, msg };
        let fields: Vec<&str> = line.split(',').collect();
        let &[source_id, class_name, split] = fields.as_slice() else {
            return Err(bad(format!("expected 3 fields, got {}", fields.len())));
        };
        class_index(class_name).map_err(|e| bad(e.to_string()))?;
        out.push(ManifestRecord {
            source_id: source_id.to_string(),
            class_name: class_name.to_string(),
            split: split.parse().map_err(bad)?,
        });
    }
    Ok(out)
}

/// Rebuilds a split from loaded items and a manifest; both sides must list
/// exactly the same `source_id`s.
pub fn apply_manifest(
    items: Vec<LabeledImage>,
    manifest: &[ManifestRecord],
    seed: u64,
) -> Result<SplitDataset, DataError> {
    let lookup: HashMap<&str, Split> = manifest.iter().map(|r| (r.source_id.as_str(), r.split)).collect();
    let mut which = Vec::with_capacity(items.len());
    for it in &items {
        match lookup.get(it.source_id.as_str()) {
            Some(&s) => which.push(s),
            None => return Err(DataError::NotInManifest(it.source_id.clone())),
        }
    }
    if lookup.len() != items.len() {
        let loaded: std::collections::HashSet<&str> = items.iter().map(|i| i.source_id.as_str()).collect();
        let missing = manifest
            .iter()
            .find(|r| !loaded.contains(r.source_id.as_str()))
            .map(|r| r.source_id.clone())
            .unwrap_or_default();
        return Err(DataError::MissingItem(missing));
    }
    Ok(build_split(items, &which, seed))
}

/// Generator settings for the synthetic stand-in dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub per_class: usize,
    pub image_size: usize,
    pub noise: f64,
}

pub const SYNTH_NOISE: f64 = 0.1;
const SYNTH_HIGH: f64 = 0.7;
const SYNTH_LOW: f64 = 0.3;
const SYNTH_STRIPE: f64 = 0.1;

/// Three textured classes: class `c` brightens channel `c` and carries
/// horizontal stripes at `c + 1` cycles per image, plus uniform noise of
/// amplitude 0.1.
pub fn gen_synthetic(per_class: usize, image_size: usize, seed: u64) -> Vec<LabeledImage> {
    gen_synthetic_with(
        SyntheticSpec {
            per_class,
            image_size,
            noise: SYNTH_NOISE,
        },
        seed,
    )
}

pub fn gen_synthetic_with(spec: SyntheticSpec, seed: u64) -> Vec<LabeledImage> {
    let mut rng = SplitMix64::new(seed);
    let s = spec.image_size;
    let mut out = Vec::with_capacity(spec.per_class * CLASS_NAMES.len());
    for label in 0..CLASS_NAMES.len() {
        let freq = (label + 1) as f64;
        for k in 0..spec.per_class {
            let phase = rng.next_f64() * std::f64::consts::TAU;
            let mut data = Vec::with_capacity(3 * s * s);
            for ch in 0..3 {
                let base = if ch == label { SYNTH_HIGH } else { SYNTH_LOW };
                for y in 0..s {
                    let stripe = SYNTH_STRIPE
                        * (std::f64::consts::TAU * freq * (y as f64 + 0.5) / s as f64 + phase).sin();
                    for _ in 0..s {
                        let noise = spec.noise * (2.0 * rng.next_f64() - 1.0);
                        data.push((base + stripe + noise).clamp(0.0, 1.0));
                    }
                }
            }
            let pixels = Tensor::new(vec![3, s, s], data).expect("shape matches");
            out.push(LabeledImage::new(pixels, label, &format!("synth_{k:05}.ppm")));
        }
    }
    out
}

/// Writes items as PPM files under `root/<class_name>/`.
pub fn write_image_dir(root: &Path, items: &[LabeledImage]) -> Result<(), DataError> {
    for class in CLASS_NAMES {
        let dir = root.join(class);
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    }
    for it in items {
        let path = root.join(&it.source_id);
        let bytes = image::encode_ppm(&it.pixels)?;
        std::fs::write(&path, bytes).map_err(io_err(&path))?;
    }
    Ok(())
}
