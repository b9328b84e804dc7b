//! Conditional GAN pairs acting on VAE latent codes.
//!
//! Per direction, a generator `G(ε, z_src)` proposes a target-domain code
//! and a discriminator `D(z_cond, z')` judges it against the target VAE's
//! encodings of the paired class.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use latent_bridge_tensor::{
    AdamConfig, AdamState, Element, Graph, Linear, Module, Param, Tensor, TensorError, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataio::{ConditionalMap, DomainId, LabeledImageSet};
use crate::error::{diverged, Error, Result};
use crate::vae::{reparameterize, Vae};

/// Probabilities are clamped into `[P_MIN, 1 - P_MIN]` before taking logs.
pub const P_MIN: f64 = 1e-7;
pub const LAMBDA_REG: f64 = 0.1;
pub const GAN_WIDTH: usize = 512;
pub const GAN_DEPTH: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    OneToTwo,
    TwoToOne,
}

impl Direction {
    pub fn source(self) -> DomainId {
        match self {
            Direction::OneToTwo => DomainId::One,
            Direction::TwoToOne => DomainId::Two,
        }
    }

    pub fn target(self) -> DomainId {
        self.source().other()
    }

    pub fn reverse(self) -> Self {
        match self {
            Direction::OneToTwo => Direction::TwoToOne,
            Direction::TwoToOne => Direction::OneToTwo,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Direction::OneToTwo => "1to2",
            Direction::TwoToOne => "2to1",
        }
    }

    pub fn generator_prefix(self) -> String {
        format!("gen_{}.", self.tag())
    }

    pub fn discriminator_prefix(self) -> String {
        format!("disc_{}.", self.tag())
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1to2" => Ok(Direction::OneToTwo),
            "2to1" => Ok(Direction::TwoToOne),
            other => Err(Error::Usage(format!(
                "direction must be `1to2` or `2to1`, got `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GanArch {
    pub latent_dim: usize,
    pub width: usize,
    pub depth: usize,
}

impl GanArch {
    pub fn new(latent_dim: usize) -> Self {
        Self {
            latent_dim,
            width: GAN_WIDTH,
            depth: GAN_DEPTH,
        }
    }

    pub fn with_width(self, width: usize) -> Self {
        Self { width, ..self }
    }
}

fn mlp<T: Element>(
    name: &str,
    input: usize,
    arch: GanArch,
    rng: &mut ChaCha8Rng,
) -> Vec<Linear<T>> {
    (0..arch.depth)
        .map(|i| {
            let fan_in = if i == 0 { input } else { arch.width };
            Linear::new(&format!("{name}.fc{}", i + 1), fan_in, arch.width, rng)
        })
        .collect()
}

fn run_mlp<T: Element>(
    g: &mut Graph<T>,
    layers: &[Linear<T>],
    x: Var,
    frozen: bool,
) -> Result<Var> {
    let mut h = x;
    for layer in layers {
        h = if frozen {
            layer.forward_frozen(g, h)?
        } else {
            layer.forward(g, h)?
        };
        h = g.relu(h)?;
    }
    Ok(h)
}

fn check_width<T: Element>(g: &Graph<T>, v: Var, want: usize, op: &'static str) -> Result<()> {
    let s = g.shape(v);
    if s.len() != 2 || s[1] != want {
        return Err(TensorError::InvalidShape {
            op,
            detail: format!("expected [B, {want}], got {s:?}"),
        }
        .into());
    }
    Ok(())
}

/// `G(ε, z) = s ⊙ t + (1 − s) ⊙ ε` with a sigmoid gate `s`.
#[derive(Debug, Clone)]
pub struct Generator<T: Element = f32> {
    pub arch: GanArch,
    hidden: Vec<Linear<T>>,
    pub transform: Linear<T>,
    pub gate: Linear<T>,
}

/// Generator outputs: the gated code plus its two heads.
#[derive(Debug, Clone, Copy)]
pub struct GenVars {
    pub out: Var,
    pub t: Var,
    pub s: Var,
}

impl<T: Element> Generator<T> {
    pub fn new(arch: GanArch, rng: &mut ChaCha8Rng) -> Self {
        Self {
            arch,
            hidden: mlp("gen", 2 * arch.latent_dim, arch, rng),
            transform: Linear::new("gen.t", arch.width, arch.latent_dim, rng),
            gate: Linear::new("gen.gate", arch.width, arch.latent_dim, rng),
        }
    }

    /// Input layout is `concat(z_cond, ε)` along the feature axis.
    pub fn forward(&self, g: &mut Graph<T>, z_cond: Var, eps: Var) -> Result<GenVars> {
        check_width(g, z_cond, self.arch.latent_dim, "generate")?;
        check_width(g, eps, self.arch.latent_dim, "generate")?;
        if g.shape(z_cond)[0] != g.shape(eps)[0] {
            return Err(TensorError::ShapeMismatch {
                op: "generate",
                left: g.shape(z_cond).to_vec(),
                right: g.shape(eps).to_vec(),
            }
            .into());
        }
        let x = g.concat(&[z_cond, eps], 1)?;
        let h = run_mlp(g, &self.hidden, x, false)?;
        let t = self.transform.forward(g, h)?;
        let gate = self.gate.forward(g, h)?;
        let s = g.sigmoid(gate)?;
        let diff = g.sub(t, eps)?;
        let step = g.mul(s, diff)?;
        let out = g.add(eps, step)?;
        Ok(GenVars { out, t, s })
    }

    /// Evaluates `G(ε, z_cond)` outside any training graph.
    pub fn generate(&self, eps: &Tensor<T>, z_cond: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let (zv, ev) = (g.constant(z_cond.clone()), g.constant(eps.clone()));
        let out = self.forward(&mut g, zv, ev)?;
        Ok(g.value(out.out).clone().with_requires_grad(false))
    }
}

impl<T: Element> Module<T> for Generator<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        for l in &self.hidden {
            l.visit_params(f);
        }
        self.transform.visit_params(f);
        self.gate.visit_params(f);
    }
}

/// `D(z_cond, z')`, a logit over `concat(z_cond, z')`.
#[derive(Debug, Clone)]
pub struct Discriminator<T: Element = f32> {
    pub arch: GanArch,
    hidden: Vec<Linear<T>>,
    pub output: Linear<T>,
}

impl<T: Element> Discriminator<T> {
    pub fn new(arch: GanArch, rng: &mut ChaCha8Rng) -> Self {
        Self {
            arch,
            hidden: mlp("disc", 2 * arch.latent_dim, arch, rng),
            output: Linear::new("disc.out", arch.width, 1, rng),
        }
    }

    /// Logits `[B, 1]`. With `frozen`, the weights are recorded as constants
    /// so only the inputs receive gradients.
    pub fn logits(&self, g: &mut Graph<T>, z_cond: Var, cand: Var, frozen: bool) -> Result<Var> {
        check_width(g, z_cond, self.arch.latent_dim, "discriminate")?;
        check_width(g, cand, self.arch.latent_dim, "discriminate")?;
        let x = g.concat(&[z_cond, cand], 1)?;
        let h = run_mlp(g, &self.hidden, x, frozen)?;
        if frozen {
            Ok(self.output.forward_frozen(g, h)?)
        } else {
            Ok(self.output.forward(g, h)?)
        }
    }

    /// `sigmoid(logit)` per row.
    pub fn discriminate(&self, z_cond: &Tensor<T>, cand: &Tensor<T>) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let (c, z) = (g.constant(z_cond.clone()), g.constant(cand.clone()));
        let l = self.logits(&mut g, c, z, true)?;
        let p = g.sigmoid(l)?;
        Ok(g.value(p).data().iter().map(|v| v.to_f64_lossy()).collect())
    }
}

impl<T: Element> Module<T> for Discriminator<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        for l in &self.hidden {
            l.visit_params(f);
        }
        self.output.visit_params(f);
    }
}

fn clamped_prob<T: Element>(g: &mut Graph<T>, logit: Var) -> Result<Var> {
    let p = g.sigmoid(logit)?;
    let lo = T::from_f64_lossy(P_MIN);
    Ok(g.clamp(p, lo, T::one() - lo)?)
}

/// `-mean log D`
fn nll_real<T: Element>(g: &mut Graph<T>, logit: Var) -> Result<Var> {
    let p = clamped_prob(g, logit)?;
    let l = g.log(p)?;
    let m = g.mean(l)?;
    Ok(g.scale(m, -T::one())?)
}

/// `-mean log(1 - D)`
fn nll_fake<T: Element>(g: &mut Graph<T>, logit: Var) -> Result<Var> {
    let p = clamped_prob(g, logit)?;
    let q = g.one_minus(p)?;
    let l = g.log(q)?;
    let m = g.mean(l)?;
    Ok(g.scale(m, -T::one())?)
}

/// Discriminator objective averaged over the batch:
/// `−log D(c, z_real) − log(1 − D(c, z_fake)) − log(1 − D(c, ε))`.
///
/// `z_fake` should enter as a constant; passing `z_cond == z_real` gives the
/// self-paired real term.
pub fn discriminator_loss_graph<T: Element>(
    g: &mut Graph<T>,
    disc: &Discriminator<T>,
    z_cond: Var,
    z_real: Var,
    z_fake: Var,
    eps: Var,
) -> Result<Var> {
    let real = disc.logits(g, z_cond, z_real, false)?;
    let fake = disc.logits(g, z_cond, z_fake, false)?;
    let noise = disc.logits(g, z_cond, eps, false)?;
    let a = nll_real(g, real)?;
    let b = nll_fake(g, fake)?;
    let c = nll_fake(g, noise)?;
    let ab = g.add(a, b)?;
    Ok(g.add(ab, c)?)
}

/// Graph handles for the generator objective.
#[derive(Debug, Clone, Copy)]
pub struct GenLossVars {
    pub total: Var,
    pub adversarial: Var,
    pub regularizer: Var,
    pub fake: Var,
    pub d_fake_logit: Var,
}

/// `mean[−log D(z_cond, G(ε, z_src)) + (λ_reg / n)·‖ε − G(ε, z_src)‖²]`,
/// with the discriminator's weights held fixed.
pub fn generator_loss_graph<T: Element>(
    g: &mut Graph<T>,
    gen: &Generator<T>,
    disc: &Discriminator<T>,
    z_src: Var,
    z_cond: Var,
    eps: Var,
    lambda_reg: f64,
) -> Result<GenLossVars> {
    let n = gen.arch.latent_dim as f64;
    let out = gen.forward(g, z_src, eps)?;
    let logit = disc.logits(g, z_cond, out.out, true)?;
    let adversarial = nll_real(g, logit)?;
    let d = g.sub(eps, out.out)?;
    let sq = g.square(d)?;
    let b = g.shape(d)[0].max(1) as f64;
    let s = g.sum(sq)?;
    let regularizer = g.scale(s, T::from_f64_lossy(1.0 / (n * b)))?;
    let weighted = g.scale(regularizer, T::from_f64_lossy(lambda_reg))?;
    let total = g.add(adversarial, weighted)?;
    Ok(GenLossVars {
        total,
        adversarial,
        regularizer,
        fake: out.out,
        d_fake_logit: logit,
    })
}

/// Tensor-level discriminator loss.
pub fn discriminator_loss<T: Element>(
    disc: &Discriminator<T>,
    z_cond: &Tensor<T>,
    z_real: &Tensor<T>,
    z_fake: &Tensor<T>,
    eps: &Tensor<T>,
) -> Result<f64> {
    let mut g = Graph::new();
    let vars = [z_cond, z_real, z_fake, eps].map(|t| g.constant(t.clone()));
    let l = discriminator_loss_graph(&mut g, disc, vars[0], vars[1], vars[2], vars[3])?;
    Ok(g.value(l).item().to_f64_lossy())
}

/// Tensor-level generator loss.
pub fn generator_loss<T: Element>(
    gen: &Generator<T>,
    disc: &Discriminator<T>,
    z_src: &Tensor<T>,
    z_cond: &Tensor<T>,
    eps: &Tensor<T>,
    lambda_reg: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let vars = [z_src, z_cond, eps].map(|t| g.constant(t.clone()));
    let l = generator_loss_graph(&mut g, gen, disc, vars[0], vars[1], vars[2], lambda_reg)?;
    Ok(g.value(l.total).item().to_f64_lossy())
}

/// Per-class encoder statistics `(μ, σ)` of one domain, computed once from
/// a frozen VAE.
#[derive(Debug, Clone)]
pub struct LatentBank {
    latent_dim: usize,
    alpha: f64,
    classes: BTreeMap<u8, (Tensor<f32>, Tensor<f32>)>,
}

impl LatentBank {
    pub fn encode(vae: &Vae<f32>, data: &LabeledImageSet) -> Result<Self> {
        let mut classes = BTreeMap::new();
        for c in data.classes() {
            let set = data.subset(&data.indices_of_class(c));
            classes.insert(c, vae.encode(set.images())?);
        }
        Ok(Self {
            latent_dim: vae.latent_dim(),
            alpha: vae.alpha,
            classes,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn classes(&self) -> Vec<u8> {
        self.classes.keys().copied().collect()
    }

    pub fn count(&self, class: u8) -> usize {
        self.classes.get(&class).map_or(0, |(m, _)| m.batch())
    }

    /// One code per entry of `classes`, each drawn uniformly from that class
    /// and reparameterized (`μ` only when `mean_mode`).
    pub fn sample(
        &self,
        classes: &[u8],
        rng: &mut impl Rng,
        mean_mode: bool,
    ) -> Result<Tensor<f32>> {
        let d = self.latent_dim;
        let mut data = Vec::with_capacity(classes.len() * d);
        for &c in classes {
            let (mu, sigma) = self
                .classes
                .get(&c)
                .filter(|(m, _)| m.batch() > 0)
                .ok_or_else(|| Error::Data(format!("no encodings for class {c}")))?;
            let i = rng.gen_range(0..mu.batch());
            if mean_mode {
                data.extend_from_slice(mu.row(i));
            } else {
                let a = self.alpha as f32;
                for (&m, &s) in mu.row(i).iter().zip(sigma.row(i)) {
                    let u: f32 = rng.sample(rand_distr::StandardNormal);
                    data.push(m + a * s * u);
                }
            }
        }
        Ok(Tensor::new(vec![classes.len(), d], data)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GanTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub lambda_reg: f64,
    pub mean_mode: bool,
    pub seed: u64,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 64,
            adam: AdamConfig::GAN,
            lambda_reg: LAMBDA_REG,
            mean_mode: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GanHistory {
    pub d_loss: Vec<f64>,
    pub g_loss: Vec<f64>,
    /// Mean `D(z_cond, G(ε, z_src))` seen by each generator step.
    pub d_fake: Vec<f64>,
}

impl GanHistory {
    pub fn is_finite(&self) -> bool {
        self.d_loss
            .iter()
            .chain(&self.g_loss)
            .all(|v| v.is_finite())
    }

    /// Mean of the last `k` entries of `d_fake`.
    pub fn tail_d_fake(&self, k: usize) -> f64 {
        let tail = &self.d_fake[self.d_fake.len().saturating_sub(k)..];
        tail.iter().sum::<f64>() / tail.len().max(1) as f64
    }
}

/// A trained (or trainable) generator/discriminator pair for one direction.
#[derive(Debug, Clone)]
pub struct TransferPair {
    pub direction: Direction,
    pub map: ConditionalMap,
    pub generator: Generator<f32>,
    pub discriminator: Discriminator<f32>,
}

impl TransferPair {
    pub fn new(direction: Direction, map: ConditionalMap, arch: GanArch, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            direction,
            map,
            generator: Generator::new(arch, &mut rng),
            discriminator: Discriminator::new(arch, &mut rng),
        }
    }

    fn batch_codes(
        &self,
        src: &LatentBank,
        tgt: &LatentBank,
        cfg: &GanTrainConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<[Tensor<f32>; 3]> {
        let sources = self.map.sources();
        let src_classes: Vec<u8> = (0..cfg.batch_size)
            .map(|_| sources[rng.gen_range(0..sources.len())])
            .collect();
        let tgt_classes: Vec<u8> = src_classes
            .iter()
            .map(|&c| self.map.get(c).expect("source class is mapped"))
            .collect();
        Ok([
            src.sample(&src_classes, rng, cfg.mean_mode)?,
            tgt.sample(&tgt_classes, rng, cfg.mean_mode)?,
            tgt.sample(&tgt_classes, rng, cfg.mean_mode)?,
        ])
    }

    /// Alternating updates, one discriminator step then one generator step.
    pub fn train(
        &self,
        src: &LatentBank,
        tgt: &LatentBank,
        cfg: &GanTrainConfig,
        mut log: impl FnMut(&str),
    ) -> Result<GanHistory> {
        if cfg.batch_size == 0 {
            return Err(Error::Usage("GAN batch size must be positive".into()));
        }
        let d = self.generator.arch.latent_dim;
        if src.latent_dim() != d || tgt.latent_dim() != d {
            return Err(Error::Data(format!(
                "latent widths differ: banks {} / {}, pair {d}",
                src.latent_dim(),
                tgt.latent_dim()
            )));
        }
        let g_params = self.generator.trainable_params();
        let d_params = self.discriminator.trainable_params();
        let mut g_adam = AdamState::new(&g_params, cfg.adam);
        let mut d_adam = AdamState::new(&d_params, cfg.adam);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut hist = GanHistory::default();
        let eps_shape = vec![cfg.batch_size, d];
        let every = (cfg.steps / 10).max(1);
        for step in 0..cfg.steps {
            let stage = format!("transfer {}", self.direction);
            let wrap = |e: Error| diverged(&stage, step)(e);

            let [z_src, z_cond, z_real] = self.batch_codes(src, tgt, cfg, &mut rng)?;
            let eps = Tensor::<f32>::randn(eps_shape.clone(), &mut rng);
            let eps_d = Tensor::<f32>::randn(eps_shape.clone(), &mut rng);
            let fake = self.generator.generate(&eps, &z_src).map_err(wrap)?;
            let mut g = Graph::new();
            let vars = [z_cond, z_real, fake, eps_d].map(|t| g.constant(t));
            let dl = discriminator_loss_graph(
                &mut g,
                &self.discriminator,
                vars[0],
                vars[1],
                vars[2],
                vars[3],
            )
            .map_err(wrap)?;
            let d_value = g.value(dl).item() as f64;
            g.backward(dl).map_err(Error::from).map_err(wrap)?;
            d_adam.step(&d_params)?;

            let [z_src, z_cond, _] = self.batch_codes(src, tgt, cfg, &mut rng)?;
            let eps = Tensor::<f32>::randn(eps_shape.clone(), &mut rng);
            let mut g = Graph::new();
            let vars = [z_src, z_cond, eps].map(|t| g.constant(t));
            let gl = generator_loss_graph(
                &mut g,
                &self.generator,
                &self.discriminator,
                vars[0],
                vars[1],
                vars[2],
                cfg.lambda_reg,
            )
            .map_err(wrap)?;
            let g_value = g.value(gl.total).item() as f64;
            let logits = g.value(gl.d_fake_logit);
            let d_fake = logits
                .data()
                .iter()
                .map(|&l| latent_bridge_tensor::graph::sigmoid(l) as f64)
                .sum::<f64>()
                / logits.len() as f64;
            g.backward(gl.total).map_err(Error::from).map_err(wrap)?;
            g_adam.step(&g_params)?;

            if !(d_value.is_finite() && g_value.is_finite()) {
                return Err(Error::Divergence(format!(
                    "transfer {}: non-finite loss at step {step}",
                    self.direction
                )));
            }
            hist.d_loss.push(d_value);
            hist.g_loss.push(g_value);
            hist.d_fake.push(d_fake);
            if (step + 1) % every == 0 {
                log(&format!(
                    "transfer {} step {} d_loss {d_value:.4} g_loss {g_value:.4} d_fake {:.3}",
                    self.direction,
                    step + 1,
                    hist.tail_d_fake(every)
                ));
            }
        }
        Ok(hist)
    }

    /// `g_tgt(G(ε, f_src(x_src)))`: the source code is reparameterized with
    /// noise from `cond_seed`, `ε` is drawn from `eps_seed`.
    pub fn conditional_sample(
        &self,
        vae_src: &Vae<f32>,
        vae_tgt: &Vae<f32>,
        x_src: &Tensor<f32>,
        cond_seed: u64,
        eps_seed: u64,
    ) -> Result<Tensor<f32>> {
        let (mu, sigma) = vae_src.encode(x_src)?;
        let z = reparameterize(&mu, &sigma, vae_src.alpha, cond_seed)?;
        let eps = Tensor::<f32>::randn(
            vec![x_src.batch(), self.generator.arch.latent_dim],
            &mut ChaCha8Rng::seed_from_u64(eps_seed),
        );
        let code = self.generator.generate(&eps, &z)?;
        vae_tgt.decode(&code)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(seed: u64) -> (Generator<f64>, Discriminator<f64>) {
        let arch = GanArch {
            latent_dim: 3,
            width: 8,
            depth: 4,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (
            Generator::new(arch, &mut rng),
            Discriminator::new(arch, &mut rng),
        )
    }

    fn zero_output(d: &Discriminator<f64>) {
        let w = d.output.weight.value().map(|_| 0.0);
        let b = d.output.bias.value().map(|_| 0.0);
        d.output.weight.assign(&w).unwrap();
        d.output.bias.assign(&b).unwrap();
    }

    fn codes(n: usize, seed: u64) -> Tensor<f64> {
        Tensor::randn(vec![n, 3], &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn direction_round_trip() {
        for d in [Direction::OneToTwo, Direction::TwoToOne] {
            assert_eq!(d.tag().parse::<Direction>().unwrap(), d);
            assert_eq!(d.reverse().reverse(), d);
        }
        assert_eq!(Direction::OneToTwo.generator_prefix(), "gen_1to2.");
        assert_eq!(Direction::TwoToOne.discriminator_prefix(), "disc_2to1.");
        assert!("3to1".parse::<Direction>().is_err());
    }

    #[test]
    fn zero_output_layer_gives_half() {
        let (_, d) = toy(1);
        zero_output(&d);
        let p = d.discriminate(&codes(4, 2), &codes(4, 3)).unwrap();
        assert!(p.iter().all(|&v| v == 0.5));
        let (_, d) = toy(1);
        let p = d.discriminate(&codes(4, 2), &codes(4, 3)).unwrap();
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(p, d.discriminate(&codes(4, 2), &codes(4, 3)).unwrap());
    }

    #[test]
    fn gate_endpoints() {
        let (gen, _) = toy(4);
        let (z, eps) = (codes(5, 5), codes(5, 6));
        let gb = gen.gate.bias.value();
        gen.gate
            .weight
            .assign(&gen.gate.weight.value().map(|_| 0.0))
            .unwrap();
        gen.gate.bias.assign(&gb.map(|_| -60.0)).unwrap();
        assert!(gen.generate(&eps, &z).unwrap().max_abs_diff(&eps) < 1e-12);

        gen.gate.bias.assign(&gb.map(|_| 60.0)).unwrap();
        let mut g = Graph::new();
        let (zv, ev) = (g.constant(z.clone()), g.constant(eps.clone()));
        let out = gen.forward(&mut g, zv, ev).unwrap();
        assert!(g.value(out.out).max_abs_diff(g.value(out.t)) < 1e-12);
    }

    #[test]
    fn output_is_between_transform_and_noise() {
        let (gen, _) = toy(7);
        let mut g = Graph::new();
        let (zv, ev) = (g.constant(codes(6, 1)), g.constant(codes(6, 2)));
        let out = gen.forward(&mut g, zv, ev).unwrap();
        let (o, t, s, e) = (
            g.value(out.out),
            g.value(out.t),
            g.value(out.s),
            g.value(ev),
        );
        for i in 0..o.len() {
            let (a, b) = (t.data()[i].min(e.data()[i]), t.data()[i].max(e.data()[i]));
            assert!(o.data()[i] >= a - 1e-12 && o.data()[i] <= b + 1e-12);
            assert!(s.data()[i] > 0.0 && s.data()[i] < 1.0);
        }
    }

    #[test]
    fn width_mismatch_rejected() {
        let (gen, d) = toy(1);
        let bad = Tensor::<f64>::zeros(vec![2, 4]);
        assert!(gen.generate(&bad, &codes(2, 1)).is_err());
        assert!(d.discriminate(&codes(2, 1), &bad).is_err());
        assert!(gen.generate(&codes(3, 1), &codes(2, 1)).is_err());
    }
}
