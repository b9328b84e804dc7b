//! Classifier oracle, transfer-accuracy protocol, diversity metric and PGM
//! grids.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use latent_bridge_tensor::graph::softmax_rows;
use latent_bridge_tensor::{
    AdamConfig, AdamState, Conv2d, Element, Graph, Linear, Module, Param, Tensor, Var,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataio::{denormalize, sample_class_batch, ConditionalMap, LabeledImageSet};
use crate::error::{diverged, Error, Result};
use crate::transfer::TransferPair;
use crate::vae::Vae;

pub const SAMPLES_PER_CLASS: usize = 200;
const PREDICT_CHUNK: usize = 500;

/// Two stride-2 convolutions and two dense layers, `1×28×28 → 10` logits.
#[derive(Debug, Clone)]
pub struct Classifier<T: Element = f32> {
    conv1: Conv2d<T>,
    conv2: Conv2d<T>,
    fc1: Linear<T>,
    fc2: Linear<T>,
}

impl<T: Element> Classifier<T> {
    pub fn new(rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv1: Conv2d::new("cls.conv1", 1, 32, 4, 2, 1, true, rng),
            conv2: Conv2d::new("cls.conv2", 32, 64, 4, 2, 1, true, rng),
            fc1: Linear::new("cls.fc1", 64 * 7 * 7, 128, rng),
            fc2: Linear::new("cls.fc2", 128, 10, rng),
        }
    }

    pub fn logits_graph(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let b = g.shape(x)[0];
        let h = self.conv1.forward(g, x)?;
        let h = g.relu(h)?;
        let h = self.conv2.forward(g, h)?;
        let h = g.relu(h)?;
        let h = g.reshape(h, vec![b, 64 * 7 * 7])?;
        let h = self.fc1.forward(g, h)?;
        let h = g.relu(h)?;
        Ok(self.fc2.forward(g, h)?)
    }

    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let n = x.batch();
        let mut parts = Vec::new();
        for start in (0..n).step_by(PREDICT_CHUNK) {
            let mut g = Graph::new();
            let xv = g.constant(x.rows(start, (start + PREDICT_CHUNK).min(n)));
            let l = self.logits_graph(&mut g, xv)?;
            parts.push(g.value(l).clone().with_requires_grad(false));
        }
        if parts.is_empty() {
            return Ok(Tensor::zeros(vec![0, 10]));
        }
        Ok(Tensor::cat_rows(&parts)?)
    }

    pub fn probabilities(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let l = self.logits(x)?;
        Ok(Tensor::new(l.shape().to_vec(), softmax_rows(l.data(), 10))?)
    }

    /// Arg-max class per image.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<u8>> {
        let l = self.logits(x)?;
        Ok((0..l.batch())
            .map(|i| {
                let row = l.row(i);
                (0..10).fold(0, |best, c| if row[c] > row[best] { c } else { best }) as u8
            })
            .collect())
    }

    pub fn accuracy(&self, set: &LabeledImageSet) -> Result<f64> {
        if set.is_empty() {
            return Ok(0.0);
        }
        let x: Tensor<T> = set.images().cast();
        let pred = self.predict(&x)?;
        let hits = pred
            .iter()
            .zip(set.labels())
            .filter(|(a, b)| a == b)
            .count();
        Ok(hits as f64 / set.len() as f64)
    }
}

impl<T: Element> Module<T> for Classifier<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.conv1.visit_params(f);
        self.conv2.visit_params(f);
        self.fc1.visit_params(f);
        self.fc2.visit_params(f);
    }
}

pub const CLASSIFIER_PREFIX: &str = "classifier.";

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            batch_size: 64,
            adam: AdamConfig::DEFAULT,
            seed: 0,
        }
    }
}

/// Trains on `train`, returns the model and its accuracy on `test`.
pub fn train_classifier(
    train: &LabeledImageSet,
    test: &LabeledImageSet,
    cfg: &ClassifierTrainConfig,
    mut log: impl FnMut(&str),
) -> Result<(Classifier<f32>, f64)> {
    if train.is_empty() || cfg.batch_size == 0 {
        return Err(Error::Data(
            "classifier needs training data and a positive batch".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = Classifier::<f32>::new(&mut rng);
    let params = model.trainable_params();
    let mut adam = AdamState::new(&params, cfg.adam);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels()[i] as usize).collect();
            let mut g = Graph::new();
            let x = g.constant(train.images().select_rows(chunk));
            let logits = model
                .logits_graph(&mut g, x)
                .map_err(diverged("classifier", step))?;
            let loss = g
                .softmax_cross_entropy(logits, &labels)
                .map_err(Error::from)
                .map_err(diverged("classifier", step))?;
            total += g.value(loss).item() as f64;
            g.backward(loss)
                .map_err(Error::from)
                .map_err(diverged("classifier", step))?;
            adam.step(&params)?;
            batches += 1;
            step += 1;
        }
        log(&format!(
            "classifier epoch {} loss {:.4}",
            epoch + 1,
            total / batches.max(1) as f64
        ));
    }
    let acc = model.accuracy(test)?;
    log(&format!("classifier test accuracy {acc:.4}"));
    Ok((model, acc))
}

/// Anything that maps a batch of source images to target-domain images.
pub trait TransferPipeline {
    /// `cond_seed` drives the source encoding noise, `eps_seed` the prior
    /// noise fed to the generator.
    fn transfer(&self, x_src: &Tensor<f32>, cond_seed: u64, eps_seed: u64) -> Result<Tensor<f32>>;
}

impl<P: TransferPipeline + ?Sized> TransferPipeline for &P {
    fn transfer(&self, x_src: &Tensor<f32>, cond_seed: u64, eps_seed: u64) -> Result<Tensor<f32>> {
        (**self).transfer(x_src, cond_seed, eps_seed)
    }
}

/// Encoder, generator and decoder chained end to end.
#[derive(Debug, Clone, Copy)]
pub struct LatentTransferPipeline<'a> {
    pub pair: &'a TransferPair,
    pub vae_src: &'a Vae<f32>,
    pub vae_tgt: &'a Vae<f32>,
}

impl TransferPipeline for LatentTransferPipeline<'_> {
    fn transfer(&self, x_src: &Tensor<f32>, cond_seed: u64, eps_seed: u64) -> Result<Tensor<f32>> {
        self.pair
            .conditional_sample(self.vae_src, self.vae_tgt, x_src, cond_seed, eps_seed)
    }
}

/// Counts for one source → target class pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairAccuracy {
    pub source: u8,
    pub target: u8,
    pub correct: usize,
    pub total: usize,
}

impl PairAccuracy {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total.max(1) as f64
    }
}

/// Results for one conditional map.
#[derive(Debug, Clone, PartialEq)]
pub struct ShuffleResult {
    pub seed: Option<u64>,
    pub map: ConditionalMap,
    pub pairs: Vec<PairAccuracy>,
}

impl ShuffleResult {
    /// Count-weighted mean over the pairs.
    pub fn accuracy(&self) -> f64 {
        let c: usize = self.pairs.iter().map(|p| p.correct).sum();
        let t: usize = self.pairs.iter().map(|p| p.total).sum();
        c as f64 / t.max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub dataset: String,
    pub train_size: String,
    pub direction: String,
    pub samples_per_class: usize,
    pub shuffles: Vec<ShuffleResult>,
    pub diversity: Option<f64>,
    pub config: BTreeMap<String, String>,
}

impl EvalReport {
    /// Mean of the per-shuffle accuracies.
    pub fn mean_accuracy(&self) -> f64 {
        if self.shuffles.is_empty() {
            return 0.0;
        }
        self.shuffles
            .iter()
            .map(ShuffleResult::accuracy)
            .sum::<f64>()
            / self.shuffles.len() as f64
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "dataset={}", self.dataset);
        let _ = writeln!(s, "train_size={}", self.train_size);
        let _ = writeln!(s, "direction={}", self.direction);
        let _ = writeln!(s, "samples_per_class={}", self.samples_per_class);
        let _ = writeln!(s, "shuffles={}", self.shuffles.len());
        for (k, sh) in self.shuffles.iter().enumerate() {
            let _ = writeln!(s, "shuffle.{k}.seed={}", seed_text(sh.seed));
            let _ = writeln!(s, "shuffle.{k}.map={}", sh.map);
            for p in &sh.pairs {
                let _ = writeln!(
                    s,
                    "shuffle.{k}.pair.{}:{}={}/{}",
                    p.source, p.target, p.correct, p.total
                );
            }
            let _ = writeln!(s, "shuffle.{k}.accuracy={}", sh.accuracy());
        }
        let _ = writeln!(s, "mean_accuracy={}", self.mean_accuracy());
        if let Some(d) = self.diversity {
            let _ = writeln!(s, "diversity={d}");
        }
        for (k, v) in &self.config {
            let _ = writeln!(s, "config.{k}={v}");
        }
        s
    }

    /// Inverse of [`EvalReport::to_kv`]; derived accuracy lines are checked
    /// rather than stored.
    pub fn from_kv(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: String| Error::Config {
            line,
            key: None,
            msg,
        };
        let mut r = EvalReport::default();
        let mut seeds: BTreeMap<usize, Option<u64>> = BTreeMap::new();
        let mut maps: BTreeMap<usize, ConditionalMap> = BTreeMap::new();
        let mut pairs: BTreeMap<usize, Vec<PairAccuracy>> = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let n = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(n, format!("`{line}` is not key=value")))?;
            let num = |v: &str| v.parse::<usize>().map_err(|e| bad(n, format!("{k}: {e}")));
            match k {
                "dataset" => r.dataset = v.to_string(),
                "train_size" => r.train_size = v.to_string(),
                "direction" => r.direction = v.to_string(),
                "samples_per_class" => r.samples_per_class = num(v)?,
                "shuffles" | "mean_accuracy" => {}
                "diversity" => {
                    r.diversity = Some(v.parse().map_err(|e| bad(n, format!("diversity: {e}")))?)
                }
                _ if k.starts_with("config.") => {
                    r.config
                        .insert(k["config.".len()..].to_string(), v.to_string());
                }
                _ if k.starts_with("shuffle.") => {
                    let rest = &k["shuffle.".len()..];
                    let (idx, field) = rest
                        .split_once('.')
                        .ok_or_else(|| bad(n, format!("bad key `{k}`")))?;
                    let idx = num(idx)?;
                    match field {
                        "seed" => {
                            let s = if v == "default" {
                                None
                            } else {
                                Some(v.parse().map_err(|e| bad(n, format!("seed: {e}")))?)
                            };
                            seeds.insert(idx, s);
                        }
                        "map" => {
                            maps.insert(idx, ConditionalMap::parse(v)?);
                        }
                        "accuracy" => {}
                        _ if field.starts_with("pair.") => {
                            let (a, b) = field["pair.".len()..]
                                .split_once(':')
                                .ok_or_else(|| bad(n, format!("bad pair `{field}`")))?;
                            let (c, t) = v
                                .split_once('/')
                                .ok_or_else(|| bad(n, format!("bad count `{v}`")))?;
                            let class = |s: &str| {
                                s.parse::<u8>().map_err(|e| bad(n, format!("class: {e}")))
                            };
                            pairs.entry(idx).or_default().push(PairAccuracy {
                                source: class(a)?,
                                target: class(b)?,
                                correct: num(c)?,
                                total: num(t)?,
                            });
                        }
                        _ => return Err(bad(n, format!("unknown key `{k}`"))),
                    }
                }
                _ => return Err(bad(n, format!("unknown key `{k}`"))),
            }
        }
        for (idx, map) in maps {
            r.shuffles.push(ShuffleResult {
                seed: seeds.get(&idx).copied().flatten(),
                map,
                pairs: pairs.remove(&idx).unwrap_or_default(),
            });
        }
        Ok(r)
    }

    /// Rows `dataset,train_size,shuffle_seed,pair,accuracy`: one per class
    /// pair, one `all` row per shuffle and a final `mean` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("dataset,train_size,shuffle_seed,pair,accuracy\n");
        for sh in &self.shuffles {
            let seed = seed_text(sh.seed);
            for p in &sh.pairs {
                let _ = writeln!(
                    s,
                    "{},{},{seed},{}->{},{}",
                    self.dataset,
                    self.train_size,
                    p.source,
                    p.target,
                    p.accuracy()
                );
            }
            let _ = writeln!(
                s,
                "{},{},{seed},all,{}",
                self.dataset,
                self.train_size,
                sh.accuracy()
            );
        }
        let _ = writeln!(
            s,
            "{},{},mean,all,{}",
            self.dataset,
            self.train_size,
            self.mean_accuracy()
        );
        s
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (ext, body) in [("txt", self.to_kv()), ("csv", self.to_csv())] {
            let p = dir.join(format!("{stem}.{ext}"));
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

fn seed_text(seed: Option<u64>) -> String {
    seed.map_or_else(|| "default".into(), |s| s.to_string())
}

/// For each source class of `map`, transfers `samples_per_class` test images
/// and counts how many the classifier assigns to the mapped target class.
pub fn eval_transfer_accuracy(
    pipeline: &dyn TransferPipeline,
    map: &ConditionalMap,
    test_src: &LabeledImageSet,
    classifier: &Classifier<f32>,
    samples_per_class: usize,
    seed: u64,
) -> Result<Vec<PairAccuracy>> {
    let mut out = Vec::new();
    for (source, target) in map.pairs() {
        let s = seed.wrapping_add(1000 * source as u64);
        let x = sample_class_batch(test_src, source, samples_per_class, s)?;
        let y = pipeline.transfer(&x, s + 1, s + 2)?;
        let pred = classifier.predict(&y)?;
        out.push(PairAccuracy {
            source,
            target,
            correct: pred.iter().filter(|&&p| p == target).count(),
            total: pred.len(),
        });
    }
    Ok(out)
}

/// One conditional map per entry: `None` is the default map, `Some(seed)` a
/// seeded shuffle.
pub fn shuffle_maps(seeds: &[Option<u64>]) -> Vec<(Option<u64>, ConditionalMap)> {
    seeds
        .iter()
        .map(|&s| {
            let m = match s {
                None => crate::dataio::default_conditional_map(),
                Some(seed) => crate::dataio::shuffle_conditional_map(seed),
            };
            (s, m)
        })
        .collect()
}

/// Builds and evaluates one pipeline per map via `run`, collecting the
/// per-shuffle results.
pub fn shuffled_eval<F>(
    maps: &[(Option<u64>, ConditionalMap)],
    mut run: F,
) -> Result<Vec<ShuffleResult>>
where
    F: FnMut(Option<u64>, &ConditionalMap) -> Result<Vec<PairAccuracy>>,
{
    if maps.is_empty() {
        return Err(Error::Usage("need at least one shuffle".into()));
    }
    maps.iter()
        .map(|(seed, map)| {
            Ok(ShuffleResult {
                seed: *seed,
                map: map.clone(),
                pairs: run(*seed, map)?,
            })
        })
        .collect()
}

/// Mean pairwise per-pixel RMS distance between transfers of the same
/// conditionals under `n_eps` different prior draws, averaged over the batch.
pub fn diversity_score(
    pipeline: &dyn TransferPipeline,
    x_src: &Tensor<f32>,
    n_eps: usize,
    cond_seed: u64,
    eps_seed: u64,
) -> Result<f64> {
    if n_eps < 2 {
        return Err(Error::Usage(
            "diversity needs at least two noise draws".into(),
        ));
    }
    let outs: Vec<Tensor<f32>> = (0..n_eps as u64)
        .map(|k| pipeline.transfer(x_src, cond_seed, eps_seed.wrapping_add(k)))
        .collect::<Result<_>>()?;
    Ok(pairwise_rms(&outs))
}

/// Mean over unordered pairs `(a, b)` and batch rows of `√mean((a − b)²)`.
pub fn pairwise_rms(outs: &[Tensor<f32>]) -> f64 {
    let b = outs[0].batch();
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..outs.len() {
        for j in i + 1..outs.len() {
            for r in 0..b {
                let (x, y) = (outs[i].row(r), outs[j].row(r));
                let se: f64 = x.iter().zip(y).map(|(a, c)| ((a - c) as f64).powi(2)).sum();
                total += (se / x.len() as f64).sqrt();
                count += 1;
            }
        }
    }
    total / count.max(1) as f64
}

/// `[-1, 1] → 0..=255`, rounding and saturating.
pub fn to_byte(v: f32) -> u8 {
    ((v as f64 + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// A grayscale raster holding `images` tiled row-major, `cols` per row.
/// Unused cells are black.
pub fn tile(images: &Tensor<f32>, cols: usize) -> Result<(usize, usize, Vec<u8>)> {
    if images.rank() != 4 || images.shape()[1] != 1 || images.batch() == 0 {
        return Err(Error::Data(format!(
            "grid needs a nonempty [n, 1, h, w] batch, got {:?}",
            images.shape()
        )));
    }
    if cols == 0 {
        return Err(Error::Usage("grid needs at least one column".into()));
    }
    let (n, h, w) = (images.batch(), images.shape()[2], images.shape()[3]);
    let rows = n.div_ceil(cols);
    let (width, height) = (cols * w, rows * h);
    let mut px = vec![0u8; width * height];
    for i in 0..n {
        let (gr, gc) = (i / cols, i % cols);
        let img = images.row(i);
        for y in 0..h {
            for x in 0..w {
                px[(gr * h + y) * width + gc * w + x] = to_byte(img[y * w + x]);
            }
        }
    }
    Ok((width, height, px))
}

pub fn pgm_bytes(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Writes `images` as a binary PGM tiled `cols` per row.
pub fn emit_grid(images: &Tensor<f32>, cols: usize, path: &Path) -> Result<(usize, usize)> {
    let (w, h, px) = tile(images, cols)?;
    std::fs::write(path, pgm_bytes(w, h, &px)).map_err(|e| Error::io(path, e))?;
    Ok((w, h))
}

/// Conditionals on the top row, their transfers on the bottom row.
pub fn emit_panel(top: &Tensor<f32>, bottom: &Tensor<f32>, path: &Path) -> Result<(usize, usize)> {
    if top.shape() != bottom.shape() {
        return Err(Error::Data("panel rows must have equal shapes".into()));
    }
    let both = Tensor::cat_rows(&[top.clone(), bottom.clone()])?;
    emit_grid(&both, top.batch(), path)
}

/// Raw bytes of a single image after the `[-1,1] → 0..=255` map.
pub fn image_bytes(image: &Tensor<f32>) -> Vec<u8> {
    denormalize(image)
        .data()
        .iter()
        .map(|v| v.round().clamp(0.0, 255.0) as u8)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    struct Constant(f32);

    impl TransferPipeline for Constant {
        fn transfer(&self, x: &Tensor<f32>, _: u64, _: u64) -> Result<Tensor<f32>> {
            Ok(Tensor::full(x.shape().to_vec(), self.0))
        }
    }

    struct Noisy;

    impl TransferPipeline for Noisy {
        fn transfer(&self, x: &Tensor<f32>, _: u64, eps_seed: u64) -> Result<Tensor<f32>> {
            let mut rng = ChaCha8Rng::seed_from_u64(eps_seed);
            Ok(Tensor::from_fn(x.shape().to_vec(), |_| {
                rng.gen_range(-1.0..1.0)
            }))
        }
    }

    fn x(n: usize) -> Tensor<f32> {
        Tensor::zeros(vec![n, 1, 28, 28])
    }

    #[test]
    fn grid_dimensions_and_byte_map() {
        let imgs = Tensor::from_fn(vec![10, 1, 28, 28], |i| if i % 2 == 0 { -1.0 } else { 1.0 });
        let (w, h, px) = tile(&imgs, 5).unwrap();
        assert_eq!((w, h), (140, 56));
        assert_eq!((px[0], px[1]), (0, 255));
        assert!(tile(&Tensor::zeros(vec![0, 1, 28, 28]), 5).is_err());
    }

    #[test]
    fn single_image_file_is_header_plus_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Tensor::from_fn(vec![1, 1, 28, 28], |_| rng.gen_range(-1.0f32..1.0));
        let p = dir.path().join("one.pgm");
        emit_grid(&img, 3, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let mut want = b"P5\n84 28\n255\n".to_vec();
        let raw = image_bytes(&img);
        let mut row = vec![0u8; 84 * 28];
        for y in 0..28 {
            row[y * 84..y * 84 + 28].copy_from_slice(&raw[y * 28..(y + 1) * 28]);
        }
        want.extend(row);
        assert_eq!(bytes, want);
        let (w, _, px) = tile(&img, 1).unwrap();
        assert_eq!(w, 28);
        assert_eq!(px, raw);
    }

    #[test]
    fn identical_outputs_have_zero_diversity() {
        assert_eq!(
            diversity_score(&Constant(0.3), &x(2), 4, 0, 0).unwrap(),
            0.0
        );
        assert!(diversity_score(&Noisy, &x(2), 4, 0, 0).unwrap() > 0.0);
        assert!(diversity_score(&Noisy, &x(2), 1, 0, 0).is_err());
    }

    #[test]
    fn pairwise_rms_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let outs: Vec<Tensor<f32>> = (0..4)
            .map(|_| Tensor::from_fn(vec![2, 1, 4, 4], |_| rng.gen_range(-1.0..1.0)))
            .collect();
        let mut rev = outs.clone();
        rev.reverse();
        rev.swap(0, 2);
        assert!((pairwise_rms(&outs) - pairwise_rms(&rev)).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_predictions_are_classes() {
        let c = Classifier::<f32>::new(&mut ChaCha8Rng::seed_from_u64(2));
        let p = c.probabilities(&x(3)).unwrap();
        for r in 0..3 {
            assert!((p.row(r).iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
        assert!(c.predict(&x(1)).unwrap()[0] < 10);
    }

    fn report() -> EvalReport {
        let maps = shuffle_maps(&[None, Some(7)]);
        let shuffles = shuffled_eval(&maps, |_, m| {
            Ok(m.pairs()
                .map(|(s, t)| PairAccuracy {
                    source: s,
                    target: t,
                    correct: (s as usize * 37) % 200,
                    total: 200,
                })
                .collect())
        })
        .unwrap();
        EvalReport {
            dataset: "mnist".into(),
            train_size: "2000".into(),
            direction: "1to2".into(),
            samples_per_class: 200,
            shuffles,
            diversity: Some(0.123456789),
            config: [("lambda_reg".to_string(), "0.1".to_string())].into(),
        }
    }

    #[test]
    fn report_round_trips() {
        let r = report();
        assert_eq!(EvalReport::from_kv(&r.to_kv()).unwrap(), r);
        let csv = r.to_csv();
        assert!(csv.starts_with("dataset,train_size,shuffle_seed,pair,accuracy\n"));
        assert_eq!(csv.lines().count(), 1 + 2 * 6 + 1);
        assert!(EvalReport::from_kv("bogus=1").is_err());
    }

    #[test]
    fn mean_accuracy_is_mean_of_shuffles() {
        let r = report();
        let m = (r.shuffles[0].accuracy() + r.shuffles[1].accuracy()) / 2.0;
        assert!((r.mean_accuracy() - m).abs() < 1e-12);
        for sh in &r.shuffles {
            let w: f64 = sh.pairs.iter().map(|p| p.accuracy()).sum::<f64>() / sh.pairs.len() as f64;
            assert!((sh.accuracy() - w).abs() < 1e-12);
        }
    }
}
