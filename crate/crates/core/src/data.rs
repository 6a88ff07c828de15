//! On-disk formats, dataset validation and synthetic compositional worlds.
//!
//! A dataset is a JSON manifest plus a binary feature file:
//!
//! ```text
//! "BMPF" | version: u32 | count: u32 | dim: u32 | count * dim f32, row-major
//! ```
//!
//! All integers and floats are little-endian.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use crate::universe::{Pair, PairUniverse};

pub const FEATURE_MAGIC: &[u8; 4] = b"BMPF";
pub const FEATURE_VERSION: u32 = 1;
pub const FEATURE_HEADER_BYTES: usize = 16;
pub const MANIFEST_VERSION: u32 = 1;

/// Dense `count x dim` matrix of backbone features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub count: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(count: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != count * dim {
            return Err(Error::Dataset {
                rule: "feature-size",
                detail: format!("{} values for {count} x {dim}", data.len()),
            });
        }
        Ok(FeatureMatrix { count, dim, data })
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Selected rows as an engine tensor.
    pub fn gather<T: Real>(&self, rows: &[usize]) -> Tensor<T> {
        let mut data = Vec::with_capacity(rows.len() * self.dim);
        for &r in rows {
            data.extend(self.row(r).iter().map(|&x| T::lit(x as f64)));
        }
        Tensor::new(vec![rows.len(), self.dim], data).expect("rows have dim entries")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(FEATURE_HEADER_BYTES + 4 * self.data.len());
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.count as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < FEATURE_HEADER_BYTES {
            return Err(fail(format!(
                "feature file is {} bytes, shorter than the {FEATURE_HEADER_BYTES}-byte header",
                bytes.len()
            )));
        }
        if &bytes[..4] != FEATURE_MAGIC {
            return Err(fail("missing BMPF magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let version = word(4);
        if version != FEATURE_VERSION {
            return Err(fail(format!(
                "feature file version {version}, expected {FEATURE_VERSION}"
            )));
        }
        let (count, dim) = (word(8) as usize, word(12) as usize);
        let expected = FEATURE_HEADER_BYTES + 4 * count * dim;
        if bytes.len() != expected {
            return Err(fail(format!(
                "expected {expected} bytes for {count} x {dim} features, found {}",
                bytes.len()
            )));
        }
        let data = bytes[FEATURE_HEADER_BYTES..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(FeatureMatrix { count, dim, data })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Reads comma-separated rows of numbers. With `has_header` the first
    /// line is skipped.
    pub fn from_csv(path: &Path, has_header: bool) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(has_header)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| Error::Format {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?;
        let mut data = Vec::new();
        let mut dim = None;
        let mut count = 0;
        for (line, record) in reader.records().enumerate() {
            let record = record.map_err(|e| Error::Format {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?;
            if *dim.get_or_insert(record.len()) != record.len() {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    reason: format!(
                        "row {line} has {} values, expected {}",
                        record.len(),
                        dim.unwrap_or(0)
                    ),
                });
            }
            for field in record.iter() {
                let v: f32 = field.parse().map_err(|_| Error::Format {
                    path: path.to_path_buf(),
                    reason: format!("row {line}: `{field}` is not a number"),
                })?;
                data.push(v);
            }
            count += 1;
        }
        FeatureMatrix::new(count, dim.unwrap_or(0), data)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// How the candidate set is formed from the manifest.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CandidateMode {
    /// Every pair listed in some split.
    #[default]
    Listed,
    /// Every attribute-object combination; unlisted ones count as unseen.
    Cartesian,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitPairs {
    pub train_seen: Vec<Pair>,
    pub val_seen: Vec<Pair>,
    pub val_unseen: Vec<Pair>,
    pub test_seen: Vec<Pair>,
    pub test_unseen: Vec<Pair>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    /// Row of the feature file.
    pub offset: usize,
    pub pair: Pair,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub attributes: Vec<String>,
    pub objects: Vec<String>,
    #[serde(default)]
    pub candidates: CandidateMode,
    pub pairs: SplitPairs,
    pub images: Vec<ImageRecord>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

/// A validated manifest with its features and the derived pair universe.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub features: FeatureMatrix,
    pub universe: PairUniverse,
}

fn violation(rule: &'static str, detail: impl Into<String>) -> Error {
    Error::Dataset {
        rule,
        detail: detail.into(),
    }
}

impl Dataset {
    /// Checks every manifest rule against the features.
    pub fn new(manifest: Manifest, features: FeatureMatrix) -> Result<Self> {
        if manifest.version != MANIFEST_VERSION {
            return Err(violation(
                "manifest-version",
                format!("version {}, expected {MANIFEST_VERSION}", manifest.version),
            ));
        }
        let (na, no) = (manifest.attributes.len(), manifest.objects.len());
        let p = &manifest.pairs;
        let lists: [(&str, &Vec<Pair>); 5] = [
            ("train_seen", &p.train_seen),
            ("val_seen", &p.val_seen),
            ("val_unseen", &p.val_unseen),
            ("test_seen", &p.test_seen),
            ("test_unseen", &p.test_unseen),
        ];
        for (name, list) in lists {
            if let Some(bad) = list.iter().find(|q| q.attr >= na || q.obj >= no) {
                return Err(violation(
                    "vocabulary",
                    format!("{name} pair {bad} is outside {na} attributes / {no} objects"),
                ));
            }
        }
        let train: HashSet<Pair> = p.train_seen.iter().copied().collect();
        if train.len() != p.train_seen.len() {
            return Err(violation("unique-pairs", "train_seen lists a pair twice"));
        }
        for (name, list) in [
            ("val_unseen", &p.val_unseen),
            ("test_unseen", &p.test_unseen),
        ] {
            if let Some(bad) = list.iter().find(|q| train.contains(q)) {
                return Err(violation(
                    "unseen-disjoint",
                    format!("{name} pair {bad} also appears in train_seen"),
                ));
            }
        }
        for (name, list) in [("val_seen", &p.val_seen), ("test_seen", &p.test_seen)] {
            if let Some(bad) = list.iter().find(|q| !train.contains(q)) {
                return Err(violation(
                    "seen-subset",
                    format!("{name} pair {bad} is not in train_seen"),
                ));
            }
        }
        if manifest.images.len() != features.count {
            return Err(violation(
                "feature-count",
                format!(
                    "manifest lists {} images, feature file holds {}",
                    manifest.images.len(),
                    features.count
                ),
            ));
        }
        if features.dim == 0 {
            return Err(violation("feature-count", "feature dimension is zero"));
        }
        let allowed = |split: Split| -> HashSet<Pair> {
            match split {
                Split::Train => train.clone(),
                Split::Val => p.val_seen.iter().chain(&p.val_unseen).copied().collect(),
                Split::Test => p.test_seen.iter().chain(&p.test_unseen).copied().collect(),
            }
        };
        let by_split: HashMap<Split, HashSet<Pair>> = [Split::Train, Split::Val, Split::Test]
            .into_iter()
            .map(|s| (s, allowed(s)))
            .collect();
        for (i, img) in manifest.images.iter().enumerate() {
            if img.offset >= features.count {
                return Err(violation(
                    "feature-offset",
                    format!(
                        "image {i} points at row {} of {}",
                        img.offset, features.count
                    ),
                ));
            }
            if !by_split[&img.split].contains(&img.pair) {
                return Err(violation(
                    "image-label",
                    format!(
                        "image {i} is labelled {} but that pair is not listed for the {} split",
                        img.pair,
                        img.split.name()
                    ),
                ));
            }
            if let Some(v) = features.row(img.offset).iter().find(|v| !v.is_finite()) {
                return Err(violation(
                    "finite-features",
                    format!("image {i} (row {}) has a non-finite value {v}", img.offset),
                ));
            }
        }

        let mut unseen = Vec::new();
        match manifest.candidates {
            CandidateMode::Listed => {
                let mut added = HashSet::new();
                for &q in p.val_unseen.iter().chain(&p.test_unseen) {
                    if added.insert(q) {
                        unseen.push(q);
                    }
                }
            }
            CandidateMode::Cartesian => {
                for a in 0..na {
                    for o in 0..no {
                        let q = Pair::new(a, o);
                        if !train.contains(&q) {
                            unseen.push(q);
                        }
                    }
                }
            }
        }
        let universe = PairUniverse::new(
            manifest.attributes.clone(),
            manifest.objects.clone(),
            p.train_seen.clone(),
            unseen,
        )
        .map_err(|e| violation("universe", e.to_string()))?;
        Ok(Dataset {
            manifest,
            features,
            universe,
        })
    }

    pub fn images(&self) -> &[ImageRecord] {
        &self.manifest.images
    }

    /// Indices into [`Dataset::images`] of one split.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.manifest
            .images
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Backbone features of the given images, `[images.len(), dim]`.
    pub fn image_features<T: Real>(&self, images: &[usize]) -> Tensor<T> {
        let rows: Vec<usize> = images
            .iter()
            .map(|&i| self.manifest.images[i].offset)
            .collect();
        self.features.gather(&rows)
    }

    pub fn input_dim(&self) -> usize {
        self.features.dim
    }

    /// Writes `manifest.json` and `features.bmpf` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(std::path::PathBuf, std::path::PathBuf)> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = dir.join("manifest.json");
        let features = dir.join("features.bmpf");
        fs::write(&manifest, self.manifest.to_json()).map_err(|e| Error::io(&manifest, e))?;
        self.features.write(&features)?;
        Ok((manifest, features))
    }
}

/// Loads and validates a dataset.
pub fn load_dataset(manifest_path: &Path, feature_path: &Path) -> Result<Dataset> {
    let manifest = Manifest::read(manifest_path)?;
    let features = FeatureMatrix::read(feature_path)?;
    Dataset::new(manifest, features)
}

fn default_attrs() -> usize {
    8
}
fn default_objs() -> usize {
    8
}
fn default_dim() -> usize {
    64
}
fn default_unseen() -> f64 {
    0.25
}
fn default_images() -> usize {
    20
}
fn default_noise() -> f64 {
    0.1
}
fn default_one() -> f64 {
    1.0
}
fn default_held_out() -> f64 {
    0.2
}

/// Parameters of a synthetic world. Missing JSON fields take the defaults:
/// 8 attributes, 8 objects, 64-d features, 25% unseen, 20 images per pair,
/// noise 0.1, seed 0, every combination a candidate, 20% of each seen pair's
/// images held out for validation and 20% for test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticWorldConfig {
    #[serde(default = "default_attrs")]
    pub n_attrs: usize,
    #[serde(default = "default_objs")]
    pub n_objs: usize,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_unseen")]
    pub unseen_fraction: f64,
    #[serde(default = "default_images")]
    pub images_per_pair: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
    /// Fraction of all combinations that are candidates at all.
    #[serde(default = "default_one")]
    pub candidate_fraction: f64,
    #[serde(default = "default_held_out")]
    pub val_fraction: f64,
    #[serde(default = "default_held_out")]
    pub test_fraction: f64,
}

impl Default for SyntheticWorldConfig {
    fn default() -> Self {
        SyntheticWorldConfig {
            n_attrs: default_attrs(),
            n_objs: default_objs(),
            dim: default_dim(),
            unseen_fraction: default_unseen(),
            images_per_pair: default_images(),
            noise: default_noise(),
            seed: 0,
            candidate_fraction: default_one(),
            val_fraction: default_held_out(),
            test_fraction: default_held_out(),
        }
    }
}

impl SyntheticWorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_attrs < 2 || self.n_objs < 2 {
            return Err(Error::config(
                "n_attrs/n_objs",
                "need at least 2 attributes and 2 objects",
            ));
        }
        if self.dim == 0 {
            return Err(Error::config("dim", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.unseen_fraction) {
            return Err(Error::config(
                "unseen_fraction",
                format!("must lie in [0, 1), got {}", self.unseen_fraction),
            ));
        }
        if !(self.candidate_fraction > 0.0 && self.candidate_fraction <= 1.0) {
            return Err(Error::config(
                "candidate_fraction",
                format!("must lie in (0, 1], got {}", self.candidate_fraction),
            ));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config(
                "noise",
                format!("must be finite and >= 0, got {}", self.noise),
            ));
        }
        for (name, v) in [
            ("val_fraction", self.val_fraction),
            ("test_fraction", self.test_fraction),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(name, format!("must lie in [0, 1), got {v}")));
            }
        }
        let held = self.held_out(self.images_per_pair);
        if held.0 + held.1 >= self.images_per_pair {
            return Err(Error::config(
                "images_per_pair",
                format!(
                    "{} images per pair leave no training image after holding out {} + {}",
                    self.images_per_pair, held.0, held.1
                ),
            ));
        }
        Ok(())
    }

    /// Validation and test images held out per seen pair.
    fn held_out(&self, n: usize) -> (usize, usize) {
        (
            (self.val_fraction * n as f64).round() as usize,
            (self.test_fraction * n as f64).round() as usize,
        )
    }
}

/// Removes `target` pairs from `pool` in random order while every attribute and
/// object keeps at least one remaining pair. Returns (kept, removed).
fn remove_with_coverage<R: Rng>(
    rng: &mut R,
    pool: &[Pair],
    target: usize,
    n_attrs: usize,
    n_objs: usize,
) -> Option<(Vec<Pair>, Vec<Pair>)> {
    for _ in 0..32 {
        let mut order = pool.to_vec();
        order.shuffle(rng);
        let mut attr_deg = vec![0usize; n_attrs];
        let mut obj_deg = vec![0usize; n_objs];
        for p in pool {
            attr_deg[p.attr] += 1;
            obj_deg[p.obj] += 1;
        }
        let mut removed = HashSet::new();
        for p in &order {
            if removed.len() == target {
                break;
            }
            if attr_deg[p.attr] > 1 && obj_deg[p.obj] > 1 {
                attr_deg[p.attr] -= 1;
                obj_deg[p.obj] -= 1;
                removed.insert(*p);
            }
        }
        if removed.len() == target {
            let kept = pool
                .iter()
                .copied()
                .filter(|p| !removed.contains(p))
                .collect();
            let mut gone: Vec<Pair> = removed.into_iter().collect();
            gone.sort();
            return Some((kept, gone));
        }
    }
    None
}

/// Generates a world whose image features factor through hidden primitive
/// embeddings: `x = tanh(M [e_a; e_o]) + noise`.
pub fn generate_synthetic(config: &SyntheticWorldConfig) -> Result<Dataset> {
    config.validate()?;
    let (na, no, dim) = (config.n_attrs, config.n_objs, config.dim);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = |rng: &mut ChaCha8Rng, std: f64| -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        z * std
    };

    let emb_std = (1.0 / dim as f64).sqrt();
    let attr_emb: Vec<Vec<f64>> = (0..na)
        .map(|_| (0..dim).map(|_| normal(&mut rng, emb_std)).collect())
        .collect();
    let obj_emb: Vec<Vec<f64>> = (0..no)
        .map(|_| (0..dim).map(|_| normal(&mut rng, emb_std)).collect())
        .collect();
    // [dim, 2 dim]; pre-activations have unit variance
    let mix_std = 0.5f64.sqrt();
    let mixer: Vec<f64> = (0..dim * 2 * dim)
        .map(|_| normal(&mut rng, mix_std))
        .collect();

    let all: Vec<Pair> = (0..na)
        .flat_map(|a| (0..no).map(move |o| Pair::new(a, o)))
        .collect();
    let n_candidates =
        ((config.candidate_fraction * all.len() as f64).round() as usize).max(na.max(no));
    let unsat = |what: &str| {
        Error::config(
            what,
            format!("cannot keep every attribute and object in a seen pair ({na} x {no} world)"),
        )
    };
    let (candidates, _) = remove_with_coverage(&mut rng, &all, all.len() - n_candidates, na, no)
        .ok_or_else(|| unsat("candidate_fraction"))?;
    let n_unseen = (config.unseen_fraction * candidates.len() as f64).round() as usize;
    let (seen, unseen) = remove_with_coverage(&mut rng, &candidates, n_unseen, na, no)
        .ok_or_else(|| unsat("unseen_fraction"))?;

    let mut shuffled_unseen = unseen.clone();
    shuffled_unseen.shuffle(&mut rng);
    let n_val_unseen = shuffled_unseen.len().div_ceil(2);
    let mut val_unseen = shuffled_unseen[..n_val_unseen].to_vec();
    let mut test_unseen = shuffled_unseen[n_val_unseen..].to_vec();
    val_unseen.sort();
    test_unseen.sort();

    let unseen_split: HashMap<Pair, Split> = val_unseen
        .iter()
        .map(|&p| (p, Split::Val))
        .chain(test_unseen.iter().map(|&p| (p, Split::Test)))
        .collect();
    let seen_set: HashSet<Pair> = seen.iter().copied().collect();

    let mut data = Vec::new();
    let mut images = Vec::new();
    let (n_val, n_test) = config.held_out(config.images_per_pair);
    let mut sorted_candidates = candidates.clone();
    sorted_candidates.sort();
    for &pair in &sorted_candidates {
        let mut z = attr_emb[pair.attr].clone();
        z.extend_from_slice(&obj_emb[pair.obj]);
        let clean: Vec<f64> = (0..dim)
            .map(|j| {
                let row = &mixer[j * 2 * dim..(j + 1) * 2 * dim];
                row.iter().zip(&z).map(|(m, v)| m * v).sum::<f64>().tanh()
            })
            .collect();
        for k in 0..config.images_per_pair {
            for &c in &clean {
                let eps = if config.noise > 0.0 {
                    normal(&mut rng, config.noise)
                } else {
                    0.0
                };
                data.push((c + eps) as f32);
            }
            let split = if seen_set.contains(&pair) {
                if k < n_val {
                    Split::Val
                } else if k < n_val + n_test {
                    Split::Test
                } else {
                    Split::Train
                }
            } else {
                unseen_split[&pair]
            };
            images.push(ImageRecord {
                offset: images.len(),
                pair,
                split,
            });
        }
    }

    let mut train_seen = seen.clone();
    train_seen.sort();
    let val_seen = if n_val > 0 {
        train_seen.clone()
    } else {
        Vec::new()
    };
    let test_seen = if n_test > 0 {
        train_seen.clone()
    } else {
        Vec::new()
    };
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        attributes: (0..na).map(|i| format!("attr{i}")).collect(),
        objects: (0..no).map(|i| format!("obj{i}")).collect(),
        candidates: CandidateMode::Listed,
        pairs: SplitPairs {
            train_seen,
            val_seen,
            val_unseen,
            test_seen,
            test_unseen,
        },
        images,
    };
    let count = manifest.images.len();
    Dataset::new(manifest, FeatureMatrix::new(count, dim, data)?)
}
