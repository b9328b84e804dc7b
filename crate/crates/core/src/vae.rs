//! Per-domain variational autoencoder: conv encoder to (μ, log σ), conv-transpose
//! decoder back to 1×28×28.

use latent_bridge_tensor::{
    AdamConfig, AdamState, BatchNorm, Conv2d, ConvTranspose2d, Element, Graph, Linear, Mode,
    Module, Param, Tensor, TensorError, Var,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{diverged, Error, Result};

pub const LATENT_DIM: usize = 100;
pub const ALPHA: f64 = 0.1;
const ENCODE_CHUNK: usize = 250;

/// Layer widths. The spatial geometry (28 → 14 → 7 → 3 in the encoder,
/// 4 → 7 → 14 → 28 in the decoder) is fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VaeArch {
    pub latent_dim: usize,
    pub enc_channels: [usize; 3],
    pub enc_hidden: usize,
    /// Channels after the decoder's linear layer and after each of the first
    /// three conv-transposes; the last one always emits 1 channel.
    pub dec_channels: [usize; 4],
}

impl Default for VaeArch {
    fn default() -> Self {
        Self {
            latent_dim: LATENT_DIM,
            enc_channels: [32, 64, 128],
            enc_hidden: 256,
            dec_channels: [128, 64, 32, 16],
        }
    }
}

impl VaeArch {
    /// Small configuration for gradient checks.
    pub fn tiny() -> Self {
        Self {
            latent_dim: 4,
            enc_channels: [2, 2, 2],
            enc_hidden: 8,
            dec_channels: [2, 2, 2, 2],
        }
    }

    pub fn with_latent_dim(self, latent_dim: usize) -> Self {
        Self { latent_dim, ..self }
    }

    fn flat(&self) -> usize {
        self.enc_channels[2] * 3 * 3
    }

    fn dec_linear(&self) -> usize {
        self.dec_channels[0] * 4 * 4
    }
}

#[derive(Debug, Clone)]
pub struct Vae<T: Element = f32> {
    pub arch: VaeArch,
    pub alpha: f64,
    enc_conv: [Conv2d<T>; 3],
    enc_bn: [BatchNorm<T>; 3],
    enc_fc: Linear<T>,
    mu_head: Linear<T>,
    log_sigma_head: Linear<T>,
    dec_fc: Linear<T>,
    dec_deconv: [ConvTranspose2d<T>; 4],
    dec_bn: [BatchNorm<T>; 3],
}

/// Graph handles for the pieces of the VAE objective.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub recon: Var,
    pub kl: Var,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.1,
        }
    }
}

impl<T: Element> Vae<T> {
    pub fn new(arch: VaeArch, alpha: f64, rng: &mut ChaCha8Rng) -> Self {
        let [c1, c2, c3] = arch.enc_channels;
        let [d0, d1, d2, d3] = arch.dec_channels;
        Self {
            arch,
            alpha,
            enc_conv: [
                Conv2d::new("enc.conv1", 1, c1, 4, 2, 1, false, rng),
                Conv2d::new("enc.conv2", c1, c2, 4, 2, 1, false, rng),
                Conv2d::new("enc.conv3", c2, c3, 4, 2, 1, false, rng),
            ],
            enc_bn: [
                BatchNorm::new("enc.bn1", c1),
                BatchNorm::new("enc.bn2", c2),
                BatchNorm::new("enc.bn3", c3),
            ],
            enc_fc: Linear::new("enc.fc", arch.flat(), arch.enc_hidden, rng),
            mu_head: Linear::new("enc.mu", arch.enc_hidden, arch.latent_dim, rng),
            log_sigma_head: Linear::new("enc.log_sigma", arch.enc_hidden, arch.latent_dim, rng),
            dec_fc: Linear::new("dec.fc", arch.latent_dim, arch.dec_linear(), rng),
            dec_deconv: [
                ConvTranspose2d::new("dec.deconv1", d0, d1, 4, 1, 0, false, rng),
                ConvTranspose2d::new("dec.deconv2", d1, d2, 4, 2, 1, false, rng),
                ConvTranspose2d::new("dec.deconv3", d2, d3, 4, 2, 1, false, rng),
                ConvTranspose2d::new("dec.deconv4", d3, 1, 3, 1, 1, true, rng),
            ],
            dec_bn: [
                BatchNorm::new("dec.bn1", d1),
                BatchNorm::new("dec.bn2", d2),
                BatchNorm::new("dec.bn3", d3),
            ],
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    /// Records the encoder; returns `(μ, log σ)`, each `[B, latent_dim]`.
    pub fn encode_graph(&self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<(Var, Var)> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[1..] != [1, 28, 28] {
            return Err(TensorError::InvalidShape {
                op: "encode",
                detail: format!("expected [B, 1, 28, 28], got {shape:?}"),
            }
            .into());
        }
        let mut h = x;
        for (conv, bn) in self.enc_conv.iter().zip(&self.enc_bn) {
            h = conv.forward(g, h)?;
            h = bn.forward(g, h, mode)?;
            h = g.relu(h)?;
        }
        let h = g.reshape(h, vec![shape[0], self.arch.flat()])?;
        let h = self.enc_fc.forward(g, h)?;
        let h = g.relu(h)?;
        let mu = self.mu_head.forward(g, h)?;
        let log_sigma = self.log_sigma_head.forward(g, h)?;
        Ok((mu, log_sigma))
    }

    /// Records the decoder; `z` is `[B, latent_dim]`, output `[B, 1, 28, 28]`.
    pub fn decode_graph(&self, g: &mut Graph<T>, z: Var, mode: Mode) -> Result<Var> {
        let shape = g.shape(z).to_vec();
        if shape.len() != 2 || shape[1] != self.arch.latent_dim {
            return Err(TensorError::InvalidShape {
                op: "decode",
                detail: format!("expected [B, {}], got {shape:?}", self.arch.latent_dim),
            }
            .into());
        }
        let h = self.dec_fc.forward(g, z)?;
        let h = g.relu(h)?;
        let mut h = g.reshape(h, vec![shape[0], self.arch.dec_channels[0], 4, 4])?;
        for (deconv, bn) in self.dec_deconv[..3].iter().zip(&self.dec_bn) {
            h = deconv.forward(g, h)?;
            h = bn.forward(g, h, mode)?;
            h = g.relu(h)?;
        }
        let h = self.dec_deconv[3].forward(g, h)?;
        Ok(g.tanh(h)?)
    }

    /// Records the full objective for a batch `x` with reparameterization
    /// noise `u` (same shape as μ).
    pub fn loss_graph(
        &self,
        g: &mut Graph<T>,
        x: &Tensor<T>,
        u: &Tensor<T>,
        weights: LossWeights,
        mode: Mode,
    ) -> Result<LossVars> {
        let xv = g.constant(x.clone());
        let (mu, log_sigma) = self.encode_graph(g, xv, mode)?;
        let uv = g.constant(u.clone());
        let z = reparameterize_graph(g, mu, log_sigma, uv, self.alpha)?;
        let xhat = self.decode_graph(g, z, mode)?;
        let recon = reconstruction_graph(g, xv, xhat)?;
        let kl = kl_graph(g, mu, log_sigma)?;
        let a = g.scale(recon, T::from_f64_lossy(weights.lambda1))?;
        let c = g.scale(kl, T::from_f64_lossy(weights.lambda2))?;
        let total = g.add(a, c)?;
        Ok(LossVars { total, recon, kl })
    }

    /// `(μ, σ)` in eval mode, computed in chunks.
    pub fn encode(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let n = x.batch();
        let mut mus = Vec::new();
        let mut sigmas = Vec::new();
        for start in (0..n).step_by(ENCODE_CHUNK) {
            let chunk = x.rows(start, (start + ENCODE_CHUNK).min(n));
            let mut g = Graph::new();
            let xv = g.constant(chunk);
            let (mu, ls) = self.encode_graph(&mut g, xv, Mode::Eval)?;
            let sigma = g.exp(ls)?;
            mus.push(g.value(mu).clone().with_requires_grad(false));
            sigmas.push(g.value(sigma).clone().with_requires_grad(false));
        }
        if mus.is_empty() {
            let z = Tensor::zeros(vec![0, self.arch.latent_dim]);
            return Ok((z.clone(), z));
        }
        Ok((Tensor::cat_rows(&mus)?, Tensor::cat_rows(&sigmas)?))
    }

    /// Decodes `[B, latent_dim]` codes in eval mode, in chunks.
    pub fn decode(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let n = z.batch();
        let mut out = Vec::new();
        for start in (0..n).step_by(ENCODE_CHUNK) {
            let chunk = z.rows(start, (start + ENCODE_CHUNK).min(n));
            let mut g = Graph::new();
            let zv = g.constant(chunk);
            let y = self.decode_graph(&mut g, zv, Mode::Eval)?;
            out.push(g.value(y).clone().with_requires_grad(false));
        }
        if out.is_empty() {
            return Ok(Tensor::zeros(vec![0, 1, 28, 28]));
        }
        Ok(Tensor::cat_rows(&out)?)
    }

    /// Per-pixel mean squared error of `decode(μ(x))` against `x`.
    pub fn reconstruction_mse(&self, x: &Tensor<T>) -> Result<f64> {
        let (mu, _) = self.encode(x)?;
        let xhat = self.decode(&mu)?;
        let se: f64 = x
            .data()
            .iter()
            .zip(xhat.data())
            .map(|(a, b)| (a.to_f64_lossy() - b.to_f64_lossy()).powi(2))
            .sum();
        Ok(se / x.len().max(1) as f64)
    }

    /// Stops every parameter from receiving gradients.
    pub fn freeze(&self) {
        self.visit_params(&mut |p| p.write().set_requires_grad(false));
    }

    pub fn is_frozen(&self) -> bool {
        self.trainable_params().is_empty()
    }
}

impl<T: Element> Module<T> for Vae<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        for (c, b) in self.enc_conv.iter().zip(&self.enc_bn) {
            c.visit_params(f);
            b.visit_params(f);
        }
        self.enc_fc.visit_params(f);
        self.mu_head.visit_params(f);
        self.log_sigma_head.visit_params(f);
        self.dec_fc.visit_params(f);
        for (i, d) in self.dec_deconv.iter().enumerate() {
            d.visit_params(f);
            if let Some(b) = self.dec_bn.get(i) {
                b.visit_params(f);
            }
        }
    }
}

/// Checkpoint name prefix for domain `d`'s VAE.
pub fn checkpoint_prefix(domain: u8) -> String {
    format!("vae_{domain}.")
}

/// `z = μ + α·σ⊙u` with `σ = exp(log σ)`.
pub fn reparameterize_graph<T: Element>(
    g: &mut Graph<T>,
    mu: Var,
    log_sigma: Var,
    u: Var,
    alpha: f64,
) -> Result<Var> {
    let sigma = g.exp(log_sigma)?;
    let noise = g.mul(sigma, u)?;
    let noise = g.scale(noise, T::from_f64_lossy(alpha))?;
    Ok(g.add(mu, noise)?)
}

/// `z = μ + α·σ⊙u`, `u ~ N(0, I)` drawn from `seed`.
pub fn reparameterize<T: Element>(
    mu: &Tensor<T>,
    sigma: &Tensor<T>,
    alpha: f64,
    seed: u64,
) -> Result<Tensor<T>> {
    if alpha < 0.0 {
        return Err(Error::Usage(format!(
            "alpha must be nonnegative, got {alpha}"
        )));
    }
    if mu.shape() != sigma.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "reparameterize",
            left: mu.shape().to_vec(),
            right: sigma.shape().to_vec(),
        }
        .into());
    }
    let u = Tensor::<T>::randn(mu.shape().to_vec(), &mut ChaCha8Rng::seed_from_u64(seed));
    let a = T::from_f64_lossy(alpha);
    let data = mu
        .data()
        .iter()
        .zip(sigma.data())
        .zip(u.data())
        .map(|((&m, &s), &e)| m + a * s * e)
        .collect();
    Ok(Tensor::new(mu.shape().to_vec(), data)?)
}

/// `½ Σ_d (μ² + σ² − 1 − 2 log σ)`, averaged over the batch.
pub fn kl_graph<T: Element>(g: &mut Graph<T>, mu: Var, log_sigma: Var) -> Result<Var> {
    let b = g.shape(mu)[0].max(1);
    let mu2 = g.square(mu)?;
    let two_ls = g.scale(log_sigma, T::from_f64_lossy(2.0))?;
    let var = g.exp(two_ls)?;
    let s = g.add(mu2, var)?;
    let s = g.sub(s, two_ls)?;
    let s = g.add_scalar(s, -T::one())?;
    let s = g.sum(s)?;
    Ok(g.scale(s, T::from_f64_lossy(0.5 / b as f64))?)
}

/// Tensor-level KL of `N(μ, σ²)` from `N(0, I)`, averaged over rows.
pub fn kl_divergence<T: Element>(mu: &Tensor<T>, sigma: &Tensor<T>) -> Result<f64> {
    if let Some(s) = sigma.data().iter().find(|s| {
        let v = s.to_f64_lossy();
        v.is_nan() || v <= 0.0
    }) {
        return Err(TensorError::LogNonPositive {
            value: s.to_f64_lossy(),
        }
        .into());
    }
    let b = mu.shape().first().copied().unwrap_or(1).max(1);
    let total: f64 = mu
        .data()
        .iter()
        .zip(sigma.data())
        .map(|(&m, &s)| {
            let (m, s) = (m.to_f64_lossy(), s.to_f64_lossy());
            0.5 * (m * m + s * s - 1.0 - 2.0 * s.ln())
        })
        .sum();
    Ok(total / b as f64)
}

/// Squared error summed over pixels, averaged over the batch.
pub fn reconstruction_graph<T: Element>(g: &mut Graph<T>, x: Var, xhat: Var) -> Result<Var> {
    let b = g.shape(x)[0].max(1);
    let d = g.sub(xhat, x)?;
    let d = g.square(d)?;
    let s = g.sum(d)?;
    Ok(g.scale(s, T::from_f64_lossy(1.0 / b as f64))?)
}

/// Tensor-level counterpart of [`reconstruction_graph`].
pub fn reconstruction_cost<T: Element>(x: &Tensor<T>, xhat: &Tensor<T>) -> f64 {
    let b = x.shape().first().copied().unwrap_or(1).max(1);
    let se: f64 = x
        .data()
        .iter()
        .zip(xhat.data())
        .map(|(a, c)| (a.to_f64_lossy() - c.to_f64_lossy()).powi(2))
        .sum();
    se / b as f64
}

/// `λ1·recon + λ2·KL` for a batch, with reparameterization noise from `seed`.
pub fn vae_loss<T: Element>(
    model: &Vae<T>,
    x: &Tensor<T>,
    weights: LossWeights,
    mode: Mode,
    seed: u64,
) -> Result<f64> {
    if weights.lambda1 < 0.0 || weights.lambda2 < 0.0 {
        return Err(Error::Usage("loss weights must be nonnegative".into()));
    }
    let u = Tensor::randn(
        vec![x.batch(), model.latent_dim()],
        &mut ChaCha8Rng::seed_from_u64(seed),
    );
    let mut g = Graph::new();
    let l = model.loss_graph(&mut g, x, &u, weights, mode)?;
    Ok(g.value(l.total).item().to_f64_lossy())
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub seed: u64,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            adam: AdamConfig::DEFAULT,
            weights: LossWeights::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct VaeHistory {
    /// Mean minibatch objective per epoch.
    pub epoch_loss: Vec<f64>,
    /// Held-out per-pixel reconstruction MSE; entry 0 is before any update.
    pub heldout_mse: Vec<f64>,
}

impl VaeHistory {
    pub fn initial_mse(&self) -> Option<f64> {
        self.heldout_mse.first().copied()
    }

    pub fn final_mse(&self) -> Option<f64> {
        self.heldout_mse.last().copied()
    }
}

/// Trains on `images` for a fixed epoch budget and records held-out
/// reconstruction error on `heldout` (skipped when empty).
pub fn train_vae(
    model: &Vae<f32>,
    images: &Tensor<f32>,
    heldout: &Tensor<f32>,
    cfg: &VaeTrainConfig,
    mut log: impl FnMut(&str),
) -> Result<VaeHistory> {
    let n = images.batch();
    if n < 2 {
        return Err(Error::Data(format!(
            "need at least 2 training images, got {n}"
        )));
    }
    if cfg.batch_size < 2 {
        return Err(Error::Usage("VAE batch size must be at least 2".into()));
    }
    let params = model.trainable_params();
    if params.is_empty() {
        return Err(Error::Usage("VAE is frozen".into()));
    }
    let mut adam = AdamState::new(&params, cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = VaeHistory::default();
    let eval = |m: &Vae<f32>| -> Result<f64> {
        if heldout.batch() == 0 {
            Ok(f64::NAN)
        } else {
            m.reconstruction_mse(heldout)
        }
    };
    history.heldout_mse.push(eval(model)?);
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let x = images.select_rows(chunk);
            let u = Tensor::randn(vec![chunk.len(), model.latent_dim()], &mut rng);
            let mut g = Graph::new();
            let l = model
                .loss_graph(&mut g, &x, &u, cfg.weights, Mode::Train)
                .map_err(diverged("vae", step))?;
            let value = g.value(l.total).item() as f64;
            g.backward(l.total)
                .map_err(Error::from)
                .map_err(diverged("vae", step))?;
            adam.step(&params)?;
            sum += value;
            batches += 1;
            step += 1;
        }
        let mean = sum / batches.max(1) as f64;
        if !mean.is_finite() {
            return Err(Error::Divergence(format!(
                "vae: epoch {epoch} mean loss {mean}"
            )));
        }
        history.epoch_loss.push(mean);
        let mse = eval(model)?;
        history.heldout_mse.push(mse);
        log(&format!(
            "vae epoch {} loss {mean:.4} heldout_mse {mse:.5}",
            epoch + 1
        ));
    }
    Ok(history)
}

/// Builds a fresh VAE from `seed` and trains it.
pub fn fit_vae(
    arch: VaeArch,
    alpha: f64,
    images: &Tensor<f32>,
    heldout: &Tensor<f32>,
    cfg: &VaeTrainConfig,
    log: impl FnMut(&str),
) -> Result<(Vae<f32>, VaeHistory)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0000);
    let vae = Vae::new(arch, alpha, &mut rng);
    let history = train_vae(&vae, images, heldout, cfg, log)?;
    vae.freeze();
    Ok((vae, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn images(n: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(vec![n, 1, 28, 28], |_| rng.gen_range(-1.0..1.0))
    }

    fn small() -> Vae<f32> {
        let arch = VaeArch {
            latent_dim: 6,
            enc_channels: [4, 4, 4],
            enc_hidden: 16,
            dec_channels: [4, 4, 4, 4],
        };
        Vae::new(arch, ALPHA, &mut ChaCha8Rng::seed_from_u64(1))
    }

    #[test]
    fn default_shapes() {
        let vae = Vae::<f32>::new(VaeArch::default(), ALPHA, &mut ChaCha8Rng::seed_from_u64(0));
        let x = images(3, 2);
        let (mu, sigma) = vae.encode(&x).unwrap();
        assert_eq!(mu.shape(), &[3, 100]);
        assert_eq!(sigma.shape(), &[3, 100]);
        assert!(sigma.data().iter().all(|&s| s > 0.0));
        let xhat = vae.decode(&mu).unwrap();
        assert_eq!(xhat.shape(), x.shape());
        assert!(xhat.data().iter().all(|&v| v > -1.0 && v < 1.0));
    }

    #[test]
    fn encode_is_deterministic_in_eval_mode() {
        let vae = small();
        let x = images(4, 3);
        assert_eq!(vae.encode(&x).unwrap(), vae.encode(&x).unwrap());
    }

    #[test]
    fn decode_any_batch_size() {
        let vae = small();
        for b in [1, 2, 7] {
            let z = Tensor::randn(vec![b, 6], &mut ChaCha8Rng::seed_from_u64(b as u64));
            assert_eq!(vae.decode(&z).unwrap().shape(), &[b, 1, 28, 28]);
        }
        assert!(vae.decode(&Tensor::zeros(vec![2, 5])).is_err());
    }

    #[test]
    fn alpha_zero_returns_mean() {
        let mu = Tensor::<f32>::randn(vec![2, 5], &mut ChaCha8Rng::seed_from_u64(4));
        let sigma = Tensor::full(vec![2, 5], 3.0);
        assert_eq!(reparameterize(&mu, &sigma, 0.0, 9).unwrap(), mu);
        assert!(reparameterize(&mu, &sigma, -0.1, 9).is_err());
    }

    #[test]
    fn reparameterized_moments_match_monte_carlo() {
        let mu = Tensor::<f64>::new(vec![1, 3], vec![0.5, -1.0, 2.0]).unwrap();
        let sigma = Tensor::new(vec![1, 3], vec![1.0, 2.0, 0.5]).unwrap();
        let k = 20_000;
        let mut sum = [0.0; 3];
        let mut sq = [0.0; 3];
        for seed in 0..k {
            let z = reparameterize(&mu, &sigma, ALPHA, seed).unwrap();
            for d in 0..3 {
                sum[d] += z.data()[d];
                sq[d] += z.data()[d] * z.data()[d];
            }
        }
        for d in 0..3 {
            let s = ALPHA * sigma.data()[d];
            let mean = sum[d] / k as f64;
            let var = sq[d] / k as f64 - mean * mean;
            assert!((mean - mu.data()[d]).abs() <= 3.0 * s / (k as f64).sqrt());
            // sample variance has standard error √2·s²/√K
            assert!((var - s * s).abs() <= 3.0 * 2f64.sqrt() * s * s / (k as f64).sqrt());
        }
    }

    #[test]
    fn kl_closed_form_cases() {
        let z = Tensor::<f64>::zeros(vec![2, 4]);
        let one = Tensor::full(vec![2, 4], 1.0);
        assert_eq!(kl_divergence(&z, &one).unwrap(), 0.0);
        let mut mu = Tensor::<f64>::zeros(vec![1, 4]);
        mu.data_mut()[0] = 1.0;
        assert!((kl_divergence(&mu, &Tensor::full(vec![1, 4], 1.0)).unwrap() - 0.5).abs() < 1e-12);
        assert!(kl_divergence(&mu, &Tensor::zeros(vec![1, 4])).is_err());
    }

    #[test]
    fn kl_matches_sampling_estimate() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mu = Tensor::<f64>::from_fn(vec![1, 3], |_| rng.gen_range(-1.0..1.0));
        let sigma = Tensor::<f64>::from_fn(vec![1, 3], |_| rng.gen_range(0.5..1.5));
        let k = 200_000;
        let mut acc = 0.0;
        let mut acc2 = 0.0;
        for _ in 0..k {
            let mut s = 0.0;
            for d in 0..3 {
                let (m, sd) = (mu.data()[d], sigma.data()[d]);
                let e: f64 =
                    rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
                let z = m + sd * e;
                let log_q = -0.5 * e * e - sd.ln();
                let log_p = -0.5 * z * z;
                s += log_q - log_p;
            }
            acc += s;
            acc2 += s * s;
        }
        let est = acc / k as f64;
        let se = ((acc2 / k as f64 - est * est) / k as f64).sqrt();
        let exact = kl_divergence(&mu, &sigma).unwrap();
        assert!(
            (est - exact).abs() <= 4.0 * se,
            "{est} vs {exact} (se {se})"
        );
    }

    #[test]
    fn kl_graph_matches_tensor_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mu = Tensor::<f64>::randn(vec![3, 4], &mut rng);
        let ls = Tensor::<f64>::randn(vec![3, 4], &mut rng).map(|v| 0.3 * v);
        let mut g = Graph::new();
        let (m, l) = (g.constant(mu.clone()), g.constant(ls.clone()));
        let kl = kl_graph(&mut g, m, l).unwrap();
        let want = kl_divergence(&mu, &ls.map(f64::exp)).unwrap();
        assert!((g.value(kl).item() - want).abs() < 1e-12);
    }

    #[test]
    fn loss_terms_isolate_linearly() {
        let vae = small();
        let x = images(4, 6);
        let w = |l1, l2| LossWeights {
            lambda1: l1,
            lambda2: l2,
        };
        let only_kl = vae_loss(&vae, &x, w(0.0, 0.1), Mode::Eval, 3).unwrap();
        let u = Tensor::randn(vec![4, 6], &mut ChaCha8Rng::seed_from_u64(3));
        let mut g = Graph::new();
        let l = vae
            .loss_graph(&mut g, &x, &u, w(1.0, 1.0), Mode::Eval)
            .unwrap();
        let kl = g.value(l.kl).item() as f64;
        assert!((only_kl - 0.1 * kl).abs() < 1e-5);
        let base = vae_loss(&vae, &x, w(1.0, 0.1), Mode::Eval, 3).unwrap();
        let doubled = vae_loss(&vae, &x, w(2.0, 0.1), Mode::Eval, 3).unwrap();
        assert!(((doubled - only_kl) - 2.0 * (base - only_kl)).abs() < 1e-3);
        assert_eq!(reconstruction_cost(&x, &x), 0.0);
    }

    #[test]
    fn training_is_deterministic_and_finite() {
        let x = images(12, 7);
        let held = images(4, 8);
        let cfg = VaeTrainConfig {
            epochs: 2,
            batch_size: 5,
            seed: 42,
            ..Default::default()
        };
        let run = || {
            let vae = small();
            train_vae(&vae, &x, &held, &cfg, |_| {}).unwrap()
        };
        let a = run();
        assert_eq!(a, run());
        assert_eq!(a.epoch_loss.len(), 2);
        assert_eq!(a.heldout_mse.len(), 3);
        assert!(a.epoch_loss.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn frozen_model_does_not_train() {
        let vae = small();
        vae.freeze();
        assert!(vae.is_frozen());
        let x = images(4, 1);
        assert!(train_vae(&vae, &x, &x, &VaeTrainConfig::default(), |_| {}).is_err());
    }
}
