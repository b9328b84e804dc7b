//! Staged runs over an output directory: VAEs, transfer pairs, classifier,
//! evaluation and grids, each stage reading its prerequisites from disk.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use latent_bridge_tensor::{checkpoint, AdamConfig, Module};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::config::{seeds, RunConfig, TargetDataset};
use crate::dataio::{
    sample_class_batch, select_domain, split_domains, ConditionalMap, DomainId, LabeledImageSet,
    Split,
};
use crate::error::{Error, Result};
use crate::evaluator::{
    diversity_score, emit_grid, emit_panel, eval_transfer_accuracy, shuffled_eval,
    train_classifier, Classifier, ClassifierTrainConfig, EvalReport, LatentTransferPipeline,
    CLASSIFIER_PREFIX,
};
use crate::transfer::{Direction, GanArch, GanHistory, GanTrainConfig, LatentBank, TransferPair};
use crate::vae::{
    checkpoint_prefix, fit_vae, LossWeights, Vae, VaeArch, VaeHistory, VaeTrainConfig,
};

pub const CONFIG_FILE: &str = "run.cfg";

/// Training, held-out and test images per domain.
#[derive(Debug, Clone)]
pub struct DomainData {
    pub train: LabeledImageSet,
    pub heldout: LabeledImageSet,
    pub test: LabeledImageSet,
}

#[derive(Debug, Clone)]
pub struct Data {
    pub domain1: DomainData,
    pub domain2: DomainData,
}

impl Data {
    pub fn domain(&self, d: DomainId) -> &DomainData {
        match d {
            DomainId::One => &self.domain1,
            DomainId::Two => &self.domain2,
        }
    }
}

fn load_split(dir: &Path, split: Split, env: &str) -> Result<LabeledImageSet> {
    LabeledImageSet::load(dir, split).map_err(|e| match e {
        Error::MissingPrerequisite(m) => {
            Error::MissingPrerequisite(format!("{m}; point `{env}` or the config at the IDX files"))
        }
        other => other,
    })
}

/// Loads both domains' data as configured, subsetting training sets to
/// `train_size` per domain.
pub fn load_data(cfg: &RunConfig) -> Result<Data> {
    let (s1, s2) = cfg.domain_specs()?;
    let mnist_train = load_split(&cfg.mnist_dir, Split::Train, "MNIST_DIR")?;
    let mnist_test = load_split(&cfg.mnist_dir, Split::Test, "MNIST_DIR")?;
    let (train1, train2, test1, test2) = match cfg.target_dataset {
        TargetDataset::Mnist => {
            let (a, b) = split_domains(&mnist_train, &s1, &s2, false)?;
            let (c, d) = split_domains(&mnist_test, &s1, &s2, false)?;
            (a, b, c, d)
        }
        TargetDataset::Fashion => {
            let f_train = load_split(&cfg.fashion_dir, Split::Train, "FASHION_MNIST_DIR")?;
            let f_test = load_split(&cfg.fashion_dir, Split::Test, "FASHION_MNIST_DIR")?;
            (
                select_domain(&mnist_train, &s1),
                select_domain(&f_train, &s2),
                select_domain(&mnist_test, &s1),
                select_domain(&f_test, &s2),
            )
        }
    };
    let pack = |train: LabeledImageSet, test: LabeledImageSet, subset: u64, held: u64| {
        let train = match cfg.train_size.limit() {
            Some(n) => train.seeded_subset(n, cfg.stage_seed(subset)),
            None => train,
        };
        DomainData {
            heldout: test.seeded_subset(cfg.heldout_size, cfg.stage_seed(held)),
            train,
            test,
        }
    };
    Ok(Data {
        domain1: pack(train1, test1, seeds::SUBSET_1, seeds::HELDOUT),
        domain2: pack(train2, test2, seeds::SUBSET_2, seeds::HELDOUT + 1),
    })
}

/// Hex SHA-256 of a file.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        }))
}

pub fn vae_train_config(cfg: &RunConfig, domain: DomainId) -> VaeTrainConfig {
    VaeTrainConfig {
        epochs: cfg.vae_epochs,
        batch_size: cfg.vae_batch,
        adam: AdamConfig::DEFAULT.with_lr(cfg.vae_lr),
        weights: LossWeights {
            lambda1: cfg.lambda1,
            lambda2: cfg.lambda2,
        },
        seed: cfg.stage_seed(match domain {
            DomainId::One => seeds::VAE_1,
            DomainId::Two => seeds::VAE_2,
        }),
    }
}

pub fn vae_arch(cfg: &RunConfig) -> VaeArch {
    VaeArch::default().with_latent_dim(cfg.latent_dim)
}

pub fn gan_train_config(cfg: &RunConfig, seed: u64) -> GanTrainConfig {
    GanTrainConfig {
        steps: cfg.gan_steps,
        batch_size: cfg.gan_batch,
        adam: AdamConfig::GAN.with_lr(cfg.gan_lr),
        lambda_reg: cfg.lambda_reg,
        mean_mode: cfg.mean_mode,
        seed,
    }
}

/// Builds a pair for `map` from `seed` and trains it on the two banks.
pub fn fit_pair(
    cfg: &RunConfig,
    direction: Direction,
    map: ConditionalMap,
    src: &LatentBank,
    tgt: &LatentBank,
    seed: u64,
    log: &mut dyn FnMut(&str),
) -> Result<(TransferPair, GanHistory)> {
    let arch = GanArch::new(cfg.latent_dim).with_width(cfg.gan_width);
    let pair = TransferPair::new(direction, map, arch, seed ^ 0x9a17);
    let hist = pair.train(src, tgt, &gan_train_config(cfg, seed), |s| log(s))?;
    Ok((pair, hist))
}

fn shuffled_map(cfg: &RunConfig, seed: u64) -> Result<ConditionalMap> {
    let (s1, s2) = cfg.domain_specs()?;
    let src: Vec<u8> = s1.classes.iter().copied().collect();
    let tgt: Vec<u8> = s2.classes.iter().copied().collect();
    ConditionalMap::shuffled(&src, &tgt, seed)
}

/// Seeds and maps used by `eval` with `shuffles > 0`.
pub fn shuffle_schedule(cfg: &RunConfig, n: usize) -> Result<Vec<(Option<u64>, ConditionalMap)>> {
    (0..n as u64)
        .map(|k| {
            let s = cfg.stage_seed(seeds::SHUFFLE + 100 * k);
            Ok((Some(s), shuffled_map(cfg, s)?))
        })
        .collect()
}

/// An output directory plus the configuration that governs it.
pub struct Workspace {
    pub cfg: RunConfig,
    data: Option<Data>,
}

impl Workspace {
    pub fn new(cfg: RunConfig) -> Self {
        Self { cfg, data: None }
    }

    pub fn dir(&self) -> &Path {
        &self.cfg.out_dir
    }

    pub fn vae_path(&self, d: DomainId) -> PathBuf {
        self.dir().join(format!("vae_{d}.lbck"))
    }

    pub fn generator_path(&self, dir: Direction) -> PathBuf {
        self.dir().join(format!("gen_{}.lbck", dir.tag()))
    }

    pub fn discriminator_path(&self, dir: Direction) -> PathBuf {
        self.dir().join(format!("disc_{}.lbck", dir.tag()))
    }

    pub fn classifier_path(&self, dataset: TargetDataset) -> PathBuf {
        self.dir()
            .join(format!("classifier_{}.lbck", dataset.name()))
    }

    pub fn report_stem(&self, dir: Direction) -> String {
        format!("report_{}", dir.tag())
    }

    /// Creates the output directory and writes the effective config beside
    /// the artifacts.
    pub fn prepare(&self) -> Result<()> {
        std::fs::create_dir_all(self.dir()).map_err(|e| Error::io(self.dir(), e))?;
        let p = self.dir().join(CONFIG_FILE);
        std::fs::write(&p, self.cfg.to_text()).map_err(|e| Error::io(&p, e))
    }

    pub fn data(&mut self) -> Result<&Data> {
        if self.data.is_none() {
            self.data = Some(load_data(&self.cfg)?);
        }
        Ok(self.data.as_ref().expect("loaded above"))
    }

    fn dataset_of(&self, d: DomainId) -> TargetDataset {
        match d {
            DomainId::One => TargetDataset::Mnist,
            DomainId::Two => self.cfg.target_dataset,
        }
    }

    /// Domain 1 → 2 law, reversed for the other direction.
    pub fn map_for(&self, direction: Direction) -> Result<ConditionalMap> {
        let m = self.cfg.conditional_map()?;
        Ok(match direction {
            Direction::OneToTwo => m,
            Direction::TwoToOne => m.inverse(),
        })
    }

    pub fn train_vae(&mut self, d: DomainId, log: &mut dyn FnMut(&str)) -> Result<VaeHistory> {
        self.prepare()?;
        let cfg = vae_train_config(&self.cfg, d);
        let (arch, alpha) = (vae_arch(&self.cfg), self.cfg.alpha);
        let data = self.data()?.domain(d).clone();
        log(&format!(
            "training VAE for domain {d} on {} images",
            data.train.len()
        ));
        let (vae, hist) = fit_vae(
            arch,
            alpha,
            data.train.images(),
            data.heldout.images(),
            &cfg,
            |s| log(&format!("[domain {d}] {s}")),
        )?;
        let path = self.vae_path(d);
        checkpoint::save(&path, &vae, &checkpoint_prefix(d.number()))?;
        let mut csv = String::from("epoch,loss,heldout_mse\n");
        let _ = writeln!(csv, "0,,{}", hist.heldout_mse[0]);
        for (i, l) in hist.epoch_loss.iter().enumerate() {
            let _ = writeln!(csv, "{},{l},{}", i + 1, hist.heldout_mse[i + 1]);
        }
        self.write_text(&format!("vae_{d}.history.csv"), &csv)?;
        log(&format!("wrote {}", path.display()));
        Ok(hist)
    }

    pub fn load_vae(&self, d: DomainId) -> Result<Vae<f32>> {
        let path = self.vae_path(d);
        if !path.exists() {
            return Err(Error::MissingPrerequisite(format!(
                "missing VAE checkpoint for domain {d} ({}); run `train-vae --domain {d}` first",
                path.display()
            )));
        }
        let vae = Vae::new(
            vae_arch(&self.cfg),
            self.cfg.alpha,
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        checkpoint::load(&path, &vae, &checkpoint_prefix(d.number()))?;
        vae.freeze();
        Ok(vae)
    }

    fn banks(
        &mut self,
        direction: Direction,
    ) -> Result<(Vae<f32>, Vae<f32>, LatentBank, LatentBank)> {
        let vae1 = self.load_vae(DomainId::One)?;
        let vae2 = self.load_vae(DomainId::Two)?;
        let (src, tgt) = match direction {
            Direction::OneToTwo => (vae1, vae2),
            Direction::TwoToOne => (vae2, vae1),
        };
        let data = self.data()?;
        let bs = LatentBank::encode(&src, &data.domain(direction.source()).train)?;
        let bt = LatentBank::encode(&tgt, &data.domain(direction.target()).train)?;
        Ok((src, tgt, bs, bt))
    }

    pub fn train_transfer(
        &mut self,
        direction: Direction,
        log: &mut dyn FnMut(&str),
    ) -> Result<GanHistory> {
        let (_, _, bs, bt) = self.banks(direction)?;
        self.prepare()?;
        let map = self.map_for(direction)?;
        let seed = self.cfg.stage_seed(match direction {
            Direction::OneToTwo => seeds::GAN_1TO2,
            Direction::TwoToOne => seeds::GAN_2TO1,
        });
        log(&format!("training transfer {direction} with map {map}"));
        let (pair, hist) = fit_pair(&self.cfg, direction, map, &bs, &bt, seed, log)?;
        checkpoint::save(
            &self.generator_path(direction),
            &pair.generator,
            &direction.generator_prefix(),
        )?;
        checkpoint::save(
            &self.discriminator_path(direction),
            &pair.discriminator,
            &direction.discriminator_prefix(),
        )?;
        let mut csv = String::from("step,d_loss,g_loss,d_fake\n");
        for i in 0..hist.d_loss.len() {
            let _ = writeln!(
                csv,
                "{},{},{},{}",
                i + 1,
                hist.d_loss[i],
                hist.g_loss[i],
                hist.d_fake[i]
            );
        }
        self.write_text(&format!("gan_{}.history.csv", direction.tag()), &csv)?;
        log(&format!(
            "transfer {direction}: mean D(cond, fake) over the last 10% of steps {:.3}",
            hist.tail_d_fake(hist.d_fake.len() / 10)
        ));
        Ok(hist)
    }

    pub fn load_pair(&self, direction: Direction) -> Result<TransferPair> {
        let (g, d) = (
            self.generator_path(direction),
            self.discriminator_path(direction),
        );
        for p in [&g, &d] {
            if !p.exists() {
                return Err(Error::MissingPrerequisite(format!(
                    "missing transfer checkpoint for direction {direction} ({}); run `train-transfer --direction {direction}` first",
                    p.display()
                )));
            }
        }
        let arch = GanArch::new(self.cfg.latent_dim).with_width(self.cfg.gan_width);
        let pair = TransferPair::new(direction, self.map_for(direction)?, arch, 0);
        checkpoint::load(&g, &pair.generator, &direction.generator_prefix())?;
        checkpoint::load(&d, &pair.discriminator, &direction.discriminator_prefix())?;
        Ok(pair)
    }

    /// Trains the classifier for `dataset` and saves it; returns test accuracy.
    pub fn train_classifier(
        &mut self,
        dataset: TargetDataset,
        log: &mut dyn FnMut(&str),
    ) -> Result<(Classifier<f32>, f64)> {
        self.prepare()?;
        let (dir, env) = match dataset {
            TargetDataset::Mnist => (self.cfg.mnist_dir.clone(), "MNIST_DIR"),
            TargetDataset::Fashion => (self.cfg.fashion_dir.clone(), "FASHION_MNIST_DIR"),
        };
        let mut train = load_split(&dir, Split::Train, env)?;
        let test = load_split(&dir, Split::Test, env)?;
        let seed = self.cfg.stage_seed(seeds::CLASSIFIER);
        if let Some(n) = self.cfg.classifier_train_size.limit() {
            train = train.seeded_subset(n, seed);
        }
        let cfg = ClassifierTrainConfig {
            epochs: self.cfg.classifier_epochs,
            batch_size: self.cfg.classifier_batch,
            adam: AdamConfig::DEFAULT.with_lr(self.cfg.classifier_lr),
            seed,
        };
        log(&format!(
            "training {} classifier on {} images",
            dataset.name(),
            train.len()
        ));
        let (model, acc) = train_classifier(&train, &test, &cfg, |s| log(s))?;
        checkpoint::save(&self.classifier_path(dataset), &model, CLASSIFIER_PREFIX)?;
        self.write_text(
            &format!("classifier_{}.txt", dataset.name()),
            &format!("test_accuracy={acc}\n"),
        )?;
        Ok((model, acc))
    }

    /// Loads the classifier, training it first when no checkpoint exists.
    pub fn classifier(
        &mut self,
        dataset: TargetDataset,
        log: &mut dyn FnMut(&str),
    ) -> Result<Classifier<f32>> {
        let path = self.classifier_path(dataset);
        if path.exists() {
            let c = Classifier::new(&mut ChaCha8Rng::seed_from_u64(0));
            checkpoint::load(&path, &c, CLASSIFIER_PREFIX)?;
            return Ok(c);
        }
        log(&format!(
            "no classifier at {}; training one",
            path.display()
        ));
        Ok(self.train_classifier(dataset, log)?.0)
    }

    /// Transfers `count` test images of source class `class` and writes them
    /// as a grid; returns the grid path.
    pub fn sample(
        &mut self,
        direction: Direction,
        class: u8,
        count: usize,
        seed: u64,
    ) -> Result<PathBuf> {
        let pair = self.load_pair(direction)?;
        let src = self.load_vae(direction.source())?;
        let tgt = self.load_vae(direction.target())?;
        if pair.map.get(class).is_none() {
            return Err(Error::Usage(format!(
                "class {class} is not a source class of map {}",
                pair.map
            )));
        }
        self.prepare()?;
        let test = &self.data()?.domain(direction.source()).test;
        let x = sample_class_batch(test, class, count, seed)?;
        let y =
            pair.conditional_sample(&src, &tgt, &x, seed.wrapping_add(1), seed.wrapping_add(2))?;
        let path = self.dir().join(format!(
            "sample_{}_class{class}_seed{seed}.pgm",
            direction.tag()
        ));
        emit_grid(&y, count.min(10), &path)?;
        Ok(path)
    }

    /// Accuracy report for `direction`. With `shuffles == 0` the trained
    /// checkpoints and configured map are used; otherwise one fresh pair is
    /// trained per shuffled map on the saved VAEs.
    pub fn eval(
        &mut self,
        direction: Direction,
        shuffles: usize,
        log: &mut dyn FnMut(&str),
    ) -> Result<EvalReport> {
        let (vae_src, vae_tgt, bs, bt) = if shuffles > 0 {
            let (a, b, c, d) = self.banks(direction)?;
            (a, b, Some(c), Some(d))
        } else {
            let pair = self.load_pair(direction)?;
            drop(pair);
            (
                self.load_vae(direction.source())?,
                self.load_vae(direction.target())?,
                None,
                None,
            )
        };
        let classifier = self.classifier(self.dataset_of(direction.target()), log)?;
        self.prepare()?;
        let cfg = self.cfg.clone();
        let test_src = self.data()?.domain(direction.source()).test.clone();
        let eval_seed = cfg.stage_seed(seeds::EVAL);
        let mut last_pair = None;
        let maps = if shuffles == 0 {
            vec![(cfg.shuffle_seed, self.map_for(direction)?)]
        } else {
            shuffle_schedule(&cfg, shuffles)?
                .into_iter()
                .map(|(s, m)| {
                    (
                        s,
                        match direction {
                            Direction::OneToTwo => m,
                            Direction::TwoToOne => m.inverse(),
                        },
                    )
                })
                .collect()
        };
        let results = shuffled_eval(&maps, |seed, map| {
            let pair = match (&bs, &bt) {
                (Some(bs), Some(bt)) => {
                    log(&format!(
                        "shuffle seed {seed:?}: training transfer {direction} with map {map}"
                    ));
                    let gan_seed = seed.unwrap_or(0).wrapping_add(7);
                    fit_pair(&cfg, direction, map.clone(), bs, bt, gan_seed, log)?.0
                }
                _ => self.load_pair(direction)?,
            };
            let p = LatentTransferPipeline {
                pair: &pair,
                vae_src: &vae_src,
                vae_tgt: &vae_tgt,
            };
            let r = eval_transfer_accuracy(
                &p,
                map,
                &test_src,
                &classifier,
                cfg.samples_per_class,
                eval_seed,
            )?;
            let acc = r.iter().map(|p| p.correct).sum::<usize>() as f64
                / r.iter().map(|p| p.total).sum::<usize>().max(1) as f64;
            log(&format!("map {map}: accuracy {acc:.4}"));
            last_pair = Some(pair);
            Ok(r)
        })?;
        let pair = last_pair.expect("at least one map");
        let diversity = if cfg.diversity_draws >= 2 {
            let x = mixed_conditionals(
                &test_src,
                &pair.map,
                cfg.diversity_conditionals,
                cfg.stage_seed(seeds::DIVERSITY),
            )?;
            let p = LatentTransferPipeline {
                pair: &pair,
                vae_src: &vae_src,
                vae_tgt: &vae_tgt,
            };
            Some(diversity_score(
                &p,
                &x,
                cfg.diversity_draws,
                1,
                cfg.stage_seed(seeds::DIVERSITY) + 1,
            )?)
        } else {
            None
        };
        let config: BTreeMap<String, String> = cfg
            .to_text()
            .lines()
            .filter_map(|l| l.split_once(" = "))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        let report = EvalReport {
            dataset: cfg.target_dataset.name().to_string(),
            train_size: cfg.train_size.to_string(),
            direction: direction.tag().to_string(),
            samples_per_class: cfg.samples_per_class,
            shuffles: results,
            diversity,
            config,
        };
        report.write(self.dir(), &self.report_stem(direction))?;
        log(&format!(
            "transfer {direction} accuracy {:.4} over {} map(s)",
            report.mean_accuracy(),
            report.shuffles.len()
        ));
        Ok(report)
    }

    /// Two-row panels per class pair: conditionals above, transfers below.
    pub fn grid(&mut self, direction: Direction, per_class: usize) -> Result<Vec<PathBuf>> {
        let pair = self.load_pair(direction)?;
        let src = self.load_vae(direction.source())?;
        let tgt = self.load_vae(direction.target())?;
        self.prepare()?;
        let seed = self.cfg.stage_seed(seeds::SAMPLE);
        let test = self.data()?.domain(direction.source()).test.clone();
        let mut out = Vec::new();
        for (i, j) in pair.map.pairs() {
            let s = seed.wrapping_add(i as u64);
            let x = sample_class_batch(&test, i, per_class, s)?;
            let y = pair.conditional_sample(&src, &tgt, &x, s + 1, s + 2)?;
            let path = self
                .dir()
                .join(format!("grid_{}_{i}to{j}.pgm", direction.tag()));
            emit_panel(&x, &y, &path)?;
            out.push(path);
        }
        Ok(out)
    }

    /// Every stage in order with the configured settings.
    pub fn run_all(&mut self, log: &mut dyn FnMut(&str)) -> Result<EvalReport> {
        self.train_vae(DomainId::One, log)?;
        self.train_vae(DomainId::Two, log)?;
        self.train_transfer(Direction::OneToTwo, log)?;
        self.train_transfer(Direction::TwoToOne, log)?;
        let report = self.eval(Direction::OneToTwo, self.cfg.shuffles, log)?;
        self.grid(Direction::OneToTwo, 8)?;
        Ok(report)
    }

    fn write_text(&self, name: &str, body: &str) -> Result<()> {
        let p = self.dir().join(name);
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))
    }
}

/// `n` test images spread evenly over the map's source classes.
pub fn mixed_conditionals(
    test: &LabeledImageSet,
    map: &ConditionalMap,
    n: usize,
    seed: u64,
) -> Result<latent_bridge_tensor::Tensor<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sources = map.sources();
    let mut idx = Vec::with_capacity(n);
    for k in 0..n {
        let pool = test.indices_of_class(sources[k % sources.len()]);
        idx.push(*pool.choose(&mut rng).ok_or_else(|| {
            Error::Data(format!(
                "class {} has no test images",
                sources[k % sources.len()]
            ))
        })?);
    }
    Ok(test.images().select_rows(&idx))
}

/// Hashes of every parameter and buffer, for frozen-model checks.
pub fn module_hash(m: &dyn Module<f32>, prefix: &str) -> String {
    let bytes = checkpoint::encode(&checkpoint::entries_of(m, prefix));
    Sha256::digest(&bytes)
        .iter()
        .fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;

    fn workspace(dir: &Path) -> Workspace {
        Workspace::new(RunConfig {
            out_dir: dir.to_path_buf(),
            ..RunConfig::default()
        })
    }

    #[test]
    fn reverse_direction_inverts_the_map() {
        let ws = workspace(Path::new("unused"));
        let fwd = ws.map_for(Direction::OneToTwo).unwrap();
        let back = ws.map_for(Direction::TwoToOne).unwrap();
        for (i, j) in fwd.pairs() {
            assert_eq!(back.get(j), Some(i));
        }
    }

    #[test]
    fn missing_checkpoints_are_missing_prerequisites() {
        let tmp = tempfile::tempdir().unwrap();
        let ws = workspace(tmp.path());
        let e = ws.load_vae(DomainId::One).unwrap_err();
        assert!(matches!(e, Error::MissingPrerequisite(_)));
        assert!(e
            .to_string()
            .contains("missing VAE checkpoint for domain 1"));
        assert_eq!(e.exit_code(), 2);
        let e = ws.load_pair(Direction::TwoToOne).unwrap_err();
        assert!(e.to_string().contains("2to1"));
    }

    #[test]
    fn shuffle_schedule_is_seeded_and_varies() {
        let cfg = RunConfig::default();
        let a = shuffle_schedule(&cfg, 3).unwrap();
        assert_eq!(a, shuffle_schedule(&cfg, 3).unwrap());
        let seeds: BTreeSet<_> = a.iter().map(|(s, _)| s.unwrap()).collect();
        assert_eq!(seeds.len(), 3);
        for (_, m) in &a {
            assert_eq!(m.sources(), vec![0, 1, 2, 3, 4]);
            assert_eq!(m.targets().len(), 5);
        }
    }

    #[test]
    fn module_hash_tracks_parameter_values() {
        let vae = Vae::<f32>::new(VaeArch::tiny(), 0.1, &mut ChaCha8Rng::seed_from_u64(1));
        let h0 = module_hash(&vae, "vae_1.");
        assert_eq!(h0, module_hash(&vae, "vae_1."));
        let p = &vae.trainable_params()[0];
        p.assign(&p.value().map(|v| v + 1.0)).unwrap();
        assert_ne!(h0, module_hash(&vae, "vae_1."));
    }

    #[test]
    fn prepare_writes_a_parsable_config_copy() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig {
            out_dir: tmp.path().join("nested"),
            ..RunConfig::default()
        };
        cfg.lambda_reg = 0.0;
        let ws = Workspace::new(cfg.clone());
        ws.prepare().unwrap();
        let text = std::fs::read_to_string(ws.dir().join(CONFIG_FILE)).unwrap();
        assert_eq!(RunConfig::parse(&text).unwrap().to_text(), cfg.to_text());
    }
}
