//! IDX image/label loading, normalization, domain splits and class pairings.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use latent_bridge_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const NUM_CLASSES: usize = 10;

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Idx(format!("truncated header at byte {at}")))
}

/// Parses an IDX3 image file into a `[n, 1, h, w]` tensor of raw 0–255 values.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor<f32>> {
    match be_u32(bytes, 0)? {
        IDX_IMAGES_MAGIC => {}
        IDX_LABELS_MAGIC => return Err(Error::Idx("label file passed as images".into())),
        m => return Err(Error::Idx(format!("bad image magic {m:#010x}"))),
    }
    let n = be_u32(bytes, 4)? as usize;
    let h = be_u32(bytes, 8)? as usize;
    let w = be_u32(bytes, 12)? as usize;
    let want = n * h * w;
    let payload = &bytes[16..];
    if payload.len() < want {
        return Err(Error::Idx(format!(
            "truncated payload: expected {want} bytes, found {}",
            payload.len()
        )));
    }
    if payload.len() > want {
        return Err(Error::Idx(format!(
            "{} trailing bytes after image payload",
            payload.len() - want
        )));
    }
    let data = payload.iter().map(|&b| b as f32).collect();
    Ok(Tensor::new(vec![n, 1, h, w], data)?)
}

/// Parses an IDX1 label file; every label must be a class id 0–9.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    match be_u32(bytes, 0)? {
        IDX_LABELS_MAGIC => {}
        IDX_IMAGES_MAGIC => return Err(Error::Idx("image file passed as labels".into())),
        m => return Err(Error::Idx(format!("bad label magic {m:#010x}"))),
    }
    let n = be_u32(bytes, 4)? as usize;
    let payload = &bytes[8..];
    if payload.len() != n {
        return Err(Error::Idx(format!(
            "label payload holds {} bytes, header says {n}",
            payload.len()
        )));
    }
    if let Some((i, &bad)) = payload
        .iter()
        .enumerate()
        .find(|(_, &l)| l as usize >= NUM_CLASSES)
    {
        return Err(Error::Idx(format!(
            "label {bad} at index {i} is not a class id"
        )));
    }
    Ok(payload.to_vec())
}

/// Reads a file, transparently gunzipping it when it carries the gzip magic.
pub fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Maps raw 0–255 intensities onto `[-1, 1]` via `v / 127.5 - 1`.
pub fn normalize(raw: &Tensor<f32>) -> Result<Tensor<f32>> {
    if let Some(bad) = raw.data().iter().find(|v| !(0.0..=255.0).contains(*v)) {
        return Err(Error::Data(format!("pixel value {bad} outside [0, 255]")));
    }
    Ok(raw.map(|v| v / 127.5 - 1.0))
}

/// Inverse of [`normalize`].
pub fn denormalize(x: &Tensor<f32>) -> Tensor<f32> {
    x.map(|v| (v + 1.0) * 127.5)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn prefix(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "t10k",
        }
    }
}

/// Normalized images with their class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImageSet {
    images: Tensor<f32>,
    labels: Vec<u8>,
}

impl LabeledImageSet {
    pub fn new(images: Tensor<f32>, labels: Vec<u8>) -> Result<Self> {
        if images.rank() != 4 || images.shape()[1] != 1 {
            return Err(Error::Data(format!(
                "images must be [n, 1, h, w], got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if images.data().iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::Data("pixel values must lie in [-1, 1]".into()));
        }
        Ok(Self { images, labels })
    }

    pub fn empty(h: usize, w: usize) -> Self {
        Self {
            images: Tensor::zeros(vec![0, 1, h, w]),
            labels: Vec::new(),
        }
    }

    /// Loads `{train,t10k}-images-idx3-ubyte` and the matching labels from
    /// `dir`, accepting an optional `.gz` suffix.
    pub fn load(dir: &Path, split: Split) -> Result<Self> {
        let find = |stem: String| {
            let plain = dir.join(&stem);
            let gz = dir.join(format!("{stem}.gz"));
            if plain.exists() {
                Ok(plain)
            } else if gz.exists() {
                Ok(gz)
            } else {
                Err(Error::MissingPrerequisite(format!(
                    "dataset file {} not found",
                    plain.display()
                )))
            }
        };
        let img = find(format!("{}-images-idx3-ubyte", split.prefix()))?;
        let lbl = find(format!("{}-labels-idx1-ubyte", split.prefix()))?;
        let images = normalize(&parse_idx_images(&read_maybe_gz(&img)?)?)?;
        let labels = parse_idx_labels(&read_maybe_gz(&lbl)?)?;
        Self::new(images, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn image_hw(&self) -> (usize, usize) {
        (self.images.shape()[2], self.images.shape()[3])
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            images: self.images.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn indices_of_class(&self, class: u8) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.labels[i] == class)
            .collect()
    }

    pub fn classes(&self) -> BTreeSet<u8> {
        self.labels.iter().copied().collect()
    }

    /// First `n` examples after a seeded shuffle (all of them if `n >= len`).
    pub fn seeded_subset(&self, n: usize, seed: u64) -> Self {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(n.min(self.len()));
        self.subset(&idx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DomainId {
    One,
    Two,
}

impl DomainId {
    pub fn number(self) -> u8 {
        match self {
            DomainId::One => 1,
            DomainId::Two => 2,
        }
    }

    pub fn other(self) -> Self {
        match self {
            DomainId::One => DomainId::Two,
            DomainId::Two => DomainId::One,
        }
    }
}

impl fmt::Display for DomainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

impl std::str::FromStr for DomainId {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "1" => Ok(DomainId::One),
            "2" => Ok(DomainId::Two),
            other => Err(format!("domain must be 1 or 2, got `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainSpec {
    pub id: DomainId,
    pub classes: BTreeSet<u8>,
}

impl DomainSpec {
    pub fn new(id: DomainId, classes: impl IntoIterator<Item = u8>) -> Self {
        Self {
            id,
            classes: classes.into_iter().collect(),
        }
    }

    /// Digits 0–4 as domain 1, digits 5–9 as domain 2.
    pub fn mnist_halves() -> (Self, Self) {
        (
            Self::new(DomainId::One, 0..5),
            Self::new(DomainId::Two, 5..10),
        )
    }
}

/// Images of `data` whose label is in `spec`'s class set, in original order.
pub fn select_domain(data: &LabeledImageSet, spec: &DomainSpec) -> LabeledImageSet {
    let idx: Vec<usize> = (0..data.len())
        .filter(|&i| spec.classes.contains(&data.labels[i]))
        .collect();
    data.subset(&idx)
}

/// Partitions one dataset into two domains by class.
///
/// With `strict`, a label belonging to neither class set is an error;
/// otherwise such images are dropped.
pub fn split_domains(
    data: &LabeledImageSet,
    spec1: &DomainSpec,
    spec2: &DomainSpec,
    strict: bool,
) -> Result<(LabeledImageSet, LabeledImageSet)> {
    if let Some(c) = spec1.classes.intersection(&spec2.classes).next() {
        return Err(Error::Data(format!("class {c} belongs to both domains")));
    }
    if strict {
        if let Some(&l) = data
            .labels
            .iter()
            .find(|l| !spec1.classes.contains(l) && !spec2.classes.contains(l))
        {
            return Err(Error::Data(format!("label {l} belongs to neither domain")));
        }
    }
    Ok((select_domain(data, spec1), select_domain(data, spec2)))
}

/// A bijection from source-domain classes to target-domain classes.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ConditionalMap {
    pairs: BTreeMap<u8, u8>,
}

impl ConditionalMap {
    pub fn new(pairs: impl IntoIterator<Item = (u8, u8)>) -> Result<Self> {
        let mut map = BTreeMap::new();
        let mut seen = BTreeSet::new();
        for (s, t) in pairs {
            if map.insert(s, t).is_some() {
                return Err(Error::Data(format!("source class {s} mapped twice")));
            }
            if !seen.insert(t) {
                return Err(Error::Data(format!("target class {t} mapped twice")));
            }
        }
        if map.is_empty() {
            return Err(Error::Data("conditional map is empty".into()));
        }
        Ok(Self { pairs: map })
    }

    pub fn get(&self, source: u8) -> Option<u8> {
        self.pairs.get(&source).copied()
    }

    pub fn inverse(&self) -> Self {
        Self {
            pairs: self.pairs.iter().map(|(&s, &t)| (t, s)).collect(),
        }
    }

    pub fn sources(&self) -> Vec<u8> {
        self.pairs.keys().copied().collect()
    }

    pub fn targets(&self) -> Vec<u8> {
        self.pairs.values().copied().collect()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (u8, u8)> + '_ {
        self.pairs.iter().map(|(&s, &t)| (s, t))
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Parses `"0:5,1:6"`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (s, t) = item
                .split_once(':')
                .ok_or_else(|| Error::Data(format!("pair `{item}` is not `src:dst`")))?;
            let parse = |v: &str| {
                v.trim()
                    .parse::<u8>()
                    .ok()
                    .filter(|&c| (c as usize) < NUM_CLASSES)
                    .ok_or_else(|| Error::Data(format!("`{v}` is not a class id")))
            };
            pairs.push((parse(s)?, parse(t)?));
        }
        Self::new(pairs)
    }

    /// Uniformly random bijection from `sources` onto `targets`, a pure
    /// function of `seed`.
    pub fn shuffled(sources: &[u8], targets: &[u8], seed: u64) -> Result<Self> {
        if sources.len() != targets.len() {
            return Err(Error::Data("source and target class counts differ".into()));
        }
        let mut t = targets.to_vec();
        t.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Self::new(sources.iter().copied().zip(t))
    }
}

impl fmt::Display for ConditionalMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.pairs().map(|(s, t)| format!("{s}:{t}")).collect();
        write!(f, "{}", parts.join(","))
    }
}

/// `{0→5, 1→6, 2→7, 3→8, 4→9}`
pub fn default_conditional_map() -> ConditionalMap {
    ConditionalMap::new((0..5).map(|i| (i, i + 5))).expect("fixed bijection")
}

/// Uniformly random bijection `{0–4} → {5–9}`.
pub fn shuffle_conditional_map(seed: u64) -> ConditionalMap {
    ConditionalMap::shuffled(&[0, 1, 2, 3, 4], &[5, 6, 7, 8, 9], seed).expect("equal sizes")
}

/// Indices of `batch` with-replacement draws from `class`.
pub fn sample_class_indices(
    set: &LabeledImageSet,
    class: u8,
    batch: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    let pool = set.indices_of_class(class);
    if pool.is_empty() {
        return Err(Error::Data(format!("class {class} has no examples")));
    }
    Ok((0..batch)
        .map(|_| pool[rng.gen_range(0..pool.len())])
        .collect())
}

/// `batch` uniform with-replacement draws of class `class`, shaped
/// `[batch, 1, h, w]`.
pub fn sample_class_batch(
    set: &LabeledImageSet,
    class: u8,
    batch: usize,
    seed: u64,
) -> Result<Tensor<f32>> {
    if batch == 0 {
        return Err(Error::Data("batch must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx = sample_class_indices(set, class, batch, &mut rng)?;
    Ok(set.images.select_rows(&idx))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image_bytes(magic: u32, n: u32, h: u32, w: u32, payload: usize) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [magic, n, h, w] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend((0..payload).map(|i| (i % 256) as u8));
        b
    }

    fn label_bytes(labels: &[u8]) -> Vec<u8> {
        let mut b = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
        b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        b.extend_from_slice(labels);
        b
    }

    #[test]
    fn parses_two_mnist_images() {
        let bytes = image_bytes(IDX_IMAGES_MAGIC, 2, 28, 28, 1568);
        let t = parse_idx_images(&bytes).unwrap();
        assert_eq!(t.shape(), &[2, 1, 28, 28]);
        // pixel (n, r, c) sits at 16 + n·784 + r·28 + c
        let (n, r, c) = (1, 3, 5);
        assert_eq!(
            t.data()[n * 784 + r * 28 + c],
            bytes[16 + n * 784 + r * 28 + c] as f32
        );
    }

    #[test]
    fn label_magic_on_image_parser() {
        let bytes = image_bytes(IDX_LABELS_MAGIC, 2, 28, 28, 1568);
        let e = parse_idx_images(&bytes).unwrap_err().to_string();
        assert!(e.contains("label file passed as images"), "{e}");
    }

    #[test]
    fn truncated_image_payload() {
        let bytes = image_bytes(IDX_IMAGES_MAGIC, 2, 28, 28, 1567);
        assert!(parse_idx_images(&bytes)
            .unwrap_err()
            .to_string()
            .contains("truncated"));
    }

    #[test]
    fn parses_labels() {
        assert_eq!(
            parse_idx_labels(&label_bytes(&[5, 0, 9])).unwrap(),
            vec![5, 0, 9]
        );
        assert!(parse_idx_labels(&label_bytes(&[])).unwrap().is_empty());
        assert!(parse_idx_labels(&label_bytes(&[3, 0x0a])).is_err());
    }

    #[test]
    fn normalize_endpoints_and_inverse() {
        let raw = Tensor::new(vec![3], vec![0.0, 127.5, 255.0]).unwrap();
        let n = normalize(&raw).unwrap();
        assert_eq!(n.data(), &[-1.0, 0.0, 1.0]);
        assert!(denormalize(&n).max_abs_diff(&raw) <= 1e-6);
        assert!(normalize(&Tensor::new(vec![1], vec![256.0]).unwrap()).is_err());
    }

    fn toy_set(labels: &[u8]) -> LabeledImageSet {
        let n = labels.len();
        let images = Tensor::from_fn(vec![n, 1, 2, 2], |i| {
            ((i / 4) as f32 / n as f32) * 2.0 - 1.0
        });
        LabeledImageSet::new(images, labels.to_vec()).unwrap()
    }

    #[test]
    fn split_preserves_order_and_partitions() {
        let data = toy_set(&[0, 5, 1, 9, 4, 6]);
        let (a, b) = DomainSpec::mnist_halves();
        let (d1, d2) = split_domains(&data, &a, &b, true).unwrap();
        assert_eq!(d1.labels(), &[0, 1, 4]);
        assert_eq!(d2.labels(), &[5, 9, 6]);
        assert_eq!(d1.images().row(1), data.images().row(2));
        let empty = DomainSpec::new(DomainId::One, []);
        assert!(select_domain(&data, &empty).is_empty());
    }

    #[test]
    fn split_rejects_overlap_and_strays() {
        let data = toy_set(&[0, 5, 7]);
        let a = DomainSpec::new(DomainId::One, [0, 5]);
        let b = DomainSpec::new(DomainId::Two, [5]);
        assert!(split_domains(&data, &a, &b, false).is_err());
        let a = DomainSpec::new(DomainId::One, [0]);
        assert!(split_domains(&data, &a, &b, true).is_err());
        let (d1, d2) = split_domains(&data, &a, &b, false).unwrap();
        assert_eq!(d1.len() + d2.len(), 2);
    }

    #[test]
    fn default_map_and_inverse() {
        let m = default_conditional_map();
        assert_eq!(m.get(0), Some(5));
        assert_eq!(m.get(4), Some(9));
        assert_eq!(m.inverse().get(6), Some(1));
        for i in 0..5 {
            assert_eq!(m.inverse().get(m.get(i).unwrap()), Some(i));
        }
        assert_eq!(ConditionalMap::parse(&m.to_string()).unwrap(), m);
    }

    #[test]
    fn map_must_be_bijective() {
        assert!(ConditionalMap::new([(0, 5), (1, 5)]).is_err());
        assert!(ConditionalMap::new([(0, 5), (0, 6)]).is_err());
        assert!(ConditionalMap::parse("0:5,1").is_err());
        assert!(ConditionalMap::parse("0:12").is_err());
    }

    #[test]
    fn shuffled_map_is_seeded_bijection() {
        assert_eq!(shuffle_conditional_map(3), shuffle_conditional_map(3));
        for seed in 0..50 {
            let m = shuffle_conditional_map(seed);
            let mut t = m.targets();
            t.sort();
            assert_eq!(t, vec![5, 6, 7, 8, 9]);
            assert_eq!(m.sources(), vec![0, 1, 2, 3, 4]);
        }
    }

    #[test]
    fn class_batch_draws_only_that_class() {
        let data = toy_set(&[0, 5, 1, 5, 4, 6]);
        let b = sample_class_batch(&data, 5, 16, 1).unwrap();
        assert_eq!(b.shape(), &[16, 1, 2, 2]);
        for i in 0..16 {
            assert!(b.row(i) == data.images().row(1) || b.row(i) == data.images().row(3));
        }
        assert!(sample_class_batch(&data, 8, 1, 0).is_err());
        let one = toy_set(&[2]);
        assert_eq!(
            sample_class_batch(&one, 2, 1, 9).unwrap().data(),
            one.images().data()
        );
    }

    #[test]
    fn seeded_subset_is_deterministic() {
        let data = toy_set(&[0, 1, 2, 3, 4, 5, 6, 7]);
        let a = data.seeded_subset(3, 11);
        assert_eq!(a, data.seeded_subset(3, 11));
        assert_eq!(a.len(), 3);
        assert_eq!(data.seeded_subset(100, 1).len(), 8);
    }
    /// Every bijection of five classes, in lexicographic order.
    fn all_bijections() -> Vec<Vec<u8>> {
        let mut out = Vec::new();
        let mut perm = vec![5u8, 6, 7, 8, 9];
        fn rec(k: usize, perm: &mut Vec<u8>, out: &mut Vec<Vec<u8>>) {
            if k == perm.len() {
                out.push(perm.clone());
                return;
            }
            for i in k..perm.len() {
                perm.swap(k, i);
                rec(k + 1, perm, out);
                perm.swap(k, i);
            }
        }
        rec(0, &mut perm, &mut out);
        out.sort();
        out
    }

    #[test]
    fn shuffled_maps_are_uniform_over_all_bijections() {
        let perms = all_bijections();
        assert_eq!(perms.len(), 120);
        let mut counts = vec![0usize; perms.len()];
        let trials = 10_000;
        for seed in 0..trials {
            let t = shuffle_conditional_map(seed).targets();
            counts[perms.binary_search(&t).unwrap()] += 1;
        }
        let p = 1.0 / 120.0;
        let mean = trials as f64 * p;
        let sd = (trials as f64 * p * (1.0 - p)).sqrt();
        // 120 cells at 3σ each: about 0.3 exceedances expected under uniformity,
        // so allow two and back it with a chi-square test (119 dof, p = 0.001).
        let outside: Vec<_> = perms
            .iter()
            .zip(&counts)
            .filter(|(_, &c)| (c as f64 - mean).abs() > 3.0 * sd)
            .collect();
        assert!(outside.len() <= 2, "{outside:?}");
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - mean).powi(2) / mean)
            .sum();
        assert!(chi2 < 172.4, "chi-square {chi2}");
    }

    #[test]
    fn class_batch_draws_are_uniform_over_the_class() {
        let data = toy_set(&[3; 10]);
        let draws = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut counts = [0usize; 10];
        for i in sample_class_indices(&data, 3, draws, &mut rng).unwrap() {
            counts[i] += 1;
        }
        let mean = draws as f64 / 10.0;
        let sd = (draws as f64 * 0.1 * 0.9).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() <= 3.0 * sd, "{counts:?}");
        }
    }
}
