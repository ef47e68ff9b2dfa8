//! Fully connected variational auto-encoder over flattened unit patches.
//!
//! The encoder is a stack of ReLU layers followed by two affine heads for
//! the posterior mean and log-variance; the decoder mirrors the hidden
//! stack and ends in a sigmoid so reconstructions stay in `(0, 1)`.
//! Gradients are derived by hand for the pathwise (reparameterized)
//! single-sample ELBO and verified against finite differences in tests.
//!
//! The network is generic over [`Real`] so the same code trains in `f32`
//! and is gradient-checked in `f64`.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
pub use crate::linalg::Real;
use crate::linalg::{gemm, FlushSubnormals, View};
use crate::seed;

/// Posterior log-variance is clamped to this symmetric range.
pub const LOGVAR_LIMIT: f64 = 10.0;

/// Layer widths of the encoder; the decoder mirrors them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VaeArch {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub latent: usize,
}

impl Default for VaeArch {
    /// 4096 → 1024 → 256 → (128, 128), mirrored.
    fn default() -> Self {
        Self {
            input: 4096,
            hidden: vec![1024, 256],
            latent: 128,
        }
    }
}

impl VaeArch {
    pub fn validate(&self) -> Result<()> {
        if self.input == 0 || self.latent == 0 || self.hidden.contains(&0) {
            return Err(Error::contract(format!(
                "layer widths must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    fn encoder_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input];
        widths.extend(&self.hidden);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    fn top_hidden(&self) -> usize {
        self.hidden.last().copied().unwrap_or(self.input)
    }

    fn decoder_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.latent];
        widths.extend(self.hidden.iter().rev());
        widths.push(self.input);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    /// `(name, fan_in, fan_out)` per dense layer, in [`Vae::layers`] order.
    pub fn layer_shapes(&self) -> Vec<(String, usize, usize)> {
        let mut out: Vec<(String, usize, usize)> = self
            .encoder_dims()
            .into_iter()
            .enumerate()
            .map(|(i, (a, b))| (format!("enc{i}"), a, b))
            .collect();
        out.push(("mu".into(), self.top_hidden(), self.latent));
        out.push(("logvar".into(), self.top_hidden(), self.latent));
        out.extend(
            self.decoder_dims()
                .into_iter()
                .enumerate()
                .map(|(i, (a, b))| (format!("dec{i}"), a, b)),
        );
        out
    }

    pub fn parameter_count(&self) -> usize {
        let dense = |(i, o): (usize, usize)| i * o + o;
        self.encoder_dims().into_iter().map(dense).sum::<usize>()
            + 2 * dense((self.top_hidden(), self.latent))
            + self.decoder_dims().into_iter().map(dense).sum::<usize>()
    }
}

/// Affine layer `y = x·W + b` with `W` stored `fan_in × fan_out` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub weights: Vec<T>,
    pub bias: Vec<T>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl<T: Real> Dense<T> {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weights: vec![T::zero(); fan_in * fan_out],
            bias: vec![T::zero(); fan_out],
            fan_in,
            fan_out,
        }
    }

    /// Glorot-uniform bound `√(6 / (fan_in + fan_out))`.
    pub fn init_bound(&self) -> f64 {
        (6.0 / (self.fan_in + self.fan_out) as f64).sqrt()
    }

    fn glorot(fan_in: usize, fan_out: usize, rng: &mut seed::Rng) -> Self {
        let mut layer = Self::zeros(fan_in, fan_out);
        let bound = layer.init_bound();
        for w in &mut layer.weights {
            *w = T::from_f64(rng.random_range(-bound..=bound));
        }
        layer
    }

    fn forward(&self, input: &[T], batch: usize, out: &mut Vec<T>) {
        out.clear();
        out.resize(batch * self.fan_out, T::zero());
        for row in out.chunks_exact_mut(self.fan_out) {
            row.copy_from_slice(&self.bias);
        }
        gemm(
            View::new(input, batch, self.fan_in),
            View::new(&self.weights, self.fan_in, self.fan_out),
            T::one(),
            out,
        );
    }

    /// Writes weight and bias gradients into `grad` and, when asked,
    /// returns the gradient with respect to the layer input.
    fn backward(
        &self,
        input: &[T],
        delta: &[T],
        batch: usize,
        grad: &mut Dense<T>,
        want_input_grad: bool,
    ) -> Option<Vec<T>> {
        gemm(
            View::new(input, batch, self.fan_in).t(),
            View::new(delta, batch, self.fan_out),
            T::zero(),
            &mut grad.weights,
        );
        grad.bias.iter_mut().for_each(|g| *g = T::zero());
        for row in delta.chunks_exact(self.fan_out) {
            for (g, &d) in grad.bias.iter_mut().zip(row) {
                *g = *g + d;
            }
        }
        want_input_grad.then(|| {
            let mut dx = vec![T::zero(); batch * self.fan_in];
            gemm(
                View::new(delta, batch, self.fan_out),
                View::new(&self.weights, self.fan_in, self.fan_out).t(),
                T::zero(),
                &mut dx,
            );
            dx
        })
    }

    fn all_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }
}

/// Network parameters (and, with the same shape, their gradients).
#[derive(Debug, Clone, PartialEq)]
pub struct Vae<T> {
    pub arch: VaeArch,
    pub encoder: Vec<Dense<T>>,
    pub mu_head: Dense<T>,
    pub logvar_head: Dense<T>,
    pub decoder: Vec<Dense<T>>,
}

/// Trained parameters in training precision.
pub type VaeParams = Vae<f32>;

/// Gradient of the loss, laid out like the parameters.
pub type Gradients<T> = Vae<T>;

/// Posterior parameters for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput<T> {
    pub mu: Vec<T>,
    pub logvar: Vec<T>,
}

/// Single-sample ELBO terms.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub recon: f64,
    pub kl: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn add(&mut self, other: LossBreakdown) {
        self.recon += other.recon;
        self.kl += other.kl;
        self.total += other.total;
    }

    fn scaled(self, s: f64) -> Self {
        Self {
            recon: self.recon * s,
            kl: self.kl * s,
            total: self.total * s,
        }
    }
}

/// `init_params` for the default architecture.
pub fn init_params(seed: u64) -> VaeParams {
    Vae::init(VaeArch::default(), seed).expect("default architecture is valid")
}

/// `z = mu + exp(logvar / 2) · noise`, elementwise.
pub fn reparameterize<T: Real>(out: &EncoderOutput<T>, noise: &[T]) -> Vec<T> {
    let half = T::from_f64(0.5);
    out.mu
        .iter()
        .zip(&out.logvar)
        .zip(noise)
        .map(|((&m, &lv), &e)| m + (half * lv).exp() * e)
        .collect()
}

/// KL divergence of `N(mu, exp(logvar))` from the standard normal.
pub fn kl_divergence<T: Real>(out: &EncoderOutput<T>) -> f64 {
    -0.5 * out
        .mu
        .iter()
        .zip(&out.logvar)
        .map(|(&m, &lv)| {
            let (m, lv) = (m.to_f64().unwrap(), lv.to_f64().unwrap());
            1.0 + lv - m * m - lv.exp()
        })
        .sum::<f64>()
}

/// Sum of squared pixel errors plus `kl_weight` times the KL term.
pub fn elbo_loss<T: Real>(
    x: &[T],
    xhat: &[T],
    out: &EncoderOutput<T>,
    kl_weight: f64,
) -> Result<LossBreakdown> {
    if x.len() != xhat.len() {
        return Err(Error::contract(format!(
            "input has {} values, reconstruction {}",
            x.len(),
            xhat.len()
        )));
    }
    let recon = x
        .iter()
        .zip(xhat)
        .map(|(&a, &b)| {
            let d = (a - b).to_f64().unwrap();
            d * d
        })
        .sum::<f64>();
    let kl = kl_divergence(out);
    Ok(LossBreakdown {
        recon,
        kl,
        total: recon + kl_weight * kl,
    })
}

fn relu_in_place<T: Real>(v: &mut [T]) {
    for x in v {
        if *x < T::zero() {
            *x = T::zero();
        }
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn check_finite<T: Real>(v: &[T], what: &str) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(Error::numeric(format!("non-finite {what} at index {i}"))),
        None => Ok(()),
    }
}

/// Activations retained from a batched forward pass.
struct Trace<T> {
    batch: usize,
    /// `encoder[0]` is the input; `encoder[i + 1]` is layer `i`'s ReLU output.
    encoder: Vec<Vec<T>>,
    mu: Vec<T>,
    /// Unclamped head output, kept to gate the clamp's gradient.
    logvar_raw: Vec<T>,
    logvar: Vec<T>,
    /// `decoder[0]` is `z`; the last entry is the sigmoid reconstruction.
    decoder: Vec<Vec<T>>,
}

impl<T: Real> Vae<T> {
    pub fn zeros(arch: VaeArch) -> Result<Self> {
        arch.validate()?;
        let encoder = arch
            .encoder_dims()
            .into_iter()
            .map(|(i, o)| Dense::zeros(i, o))
            .collect();
        let decoder = arch
            .decoder_dims()
            .into_iter()
            .map(|(i, o)| Dense::zeros(i, o))
            .collect();
        let top = arch.top_hidden();
        Ok(Self {
            encoder,
            mu_head: Dense::zeros(top, arch.latent),
            logvar_head: Dense::zeros(top, arch.latent),
            decoder,
            arch,
        })
    }

    /// Glorot-uniform weights and zero biases, deterministic per seed.
    pub fn init(arch: VaeArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = seed::rng(seed);
        let encoder = arch
            .encoder_dims()
            .into_iter()
            .map(|(i, o)| Dense::glorot(i, o, &mut rng))
            .collect();
        let top = arch.top_hidden();
        let mu_head = Dense::glorot(top, arch.latent, &mut rng);
        let logvar_head = Dense::glorot(top, arch.latent, &mut rng);
        let decoder = arch
            .decoder_dims()
            .into_iter()
            .map(|(i, o)| Dense::glorot(i, o, &mut rng))
            .collect();
        Ok(Self {
            arch,
            encoder,
            mu_head,
            logvar_head,
            decoder,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input
    }

    /// Layers in a fixed order with stable names.
    pub fn layers(&self) -> Vec<(String, &Dense<T>)> {
        let mut out: Vec<(String, &Dense<T>)> = Vec::new();
        for (i, l) in self.encoder.iter().enumerate() {
            out.push((format!("enc{i}"), l));
        }
        out.push(("mu".into(), &self.mu_head));
        out.push(("logvar".into(), &self.logvar_head));
        for (i, l) in self.decoder.iter().enumerate() {
            out.push((format!("dec{i}"), l));
        }
        out
    }

    pub fn layers_mut(&mut self) -> Vec<&mut Dense<T>> {
        let mut out: Vec<&mut Dense<T>> = self.encoder.iter_mut().collect();
        out.push(&mut self.mu_head);
        out.push(&mut self.logvar_head);
        out.extend(self.decoder.iter_mut());
        out
    }

    pub fn all_finite(&self) -> bool {
        self.layers().iter().all(|(_, l)| l.all_finite())
    }

    fn check_input(&self, xs: &[T], batch: usize) -> Result<()> {
        if xs.len() != batch * self.arch.input {
            return Err(Error::contract(format!(
                "expected {batch} inputs of {} values, got {} values",
                self.arch.input,
                xs.len()
            )));
        }
        Ok(())
    }

    fn encode_trace(&self, xs: &[T], batch: usize) -> Result<Trace<T>> {
        self.check_input(xs, batch)?;
        let mut encoder = vec![xs.to_vec()];
        for layer in &self.encoder {
            let mut out = Vec::new();
            layer.forward(encoder.last().unwrap(), batch, &mut out);
            relu_in_place(&mut out);
            encoder.push(out);
        }
        let top = encoder.last().unwrap();
        let mut mu = Vec::new();
        let mut logvar_raw = Vec::new();
        self.mu_head.forward(top, batch, &mut mu);
        self.logvar_head.forward(top, batch, &mut logvar_raw);
        check_finite(&mu, "posterior mean")?;
        check_finite(&logvar_raw, "posterior log-variance")?;
        let lim = T::from_f64(LOGVAR_LIMIT);
        let logvar = logvar_raw.iter().map(|&v| v.max(-lim).min(lim)).collect();
        Ok(Trace {
            batch,
            encoder,
            mu,
            logvar_raw,
            logvar,
            decoder: Vec::new(),
        })
    }

    fn decode_into(&self, z: Vec<T>, batch: usize, acts: &mut Vec<Vec<T>>) -> Result<()> {
        check_finite(&z, "latent code")?;
        acts.clear();
        acts.push(z);
        let last = self.decoder.len() - 1;
        for (i, layer) in self.decoder.iter().enumerate() {
            let mut out = Vec::new();
            layer.forward(acts.last().unwrap(), batch, &mut out);
            if i == last {
                for v in &mut out {
                    *v = sigmoid(*v);
                }
            } else {
                relu_in_place(&mut out);
            }
            acts.push(out);
        }
        check_finite(acts.last().unwrap(), "reconstruction")
    }

    /// Posterior parameters for one flattened input.
    pub fn encode(&self, x: &[T]) -> Result<EncoderOutput<T>> {
        let t = self.encode_trace(x, 1)?;
        Ok(EncoderOutput {
            mu: t.mu,
            logvar: t.logvar,
        })
    }

    /// Decodes one latent vector to a flattened reconstruction.
    pub fn decode(&self, z: &[T]) -> Result<Vec<T>> {
        if z.len() != self.arch.latent {
            return Err(Error::contract(format!(
                "latent vector has {} values, expected {}",
                z.len(),
                self.arch.latent
            )));
        }
        let mut acts = Vec::new();
        self.decode_into(z.to_vec(), 1, &mut acts)?;
        Ok(acts.pop().unwrap())
    }

    /// Deterministic reconstruction through the posterior mean.
    pub fn reconstruct(&self, x: &[T]) -> Result<Vec<T>> {
        self.reconstruct_batch(x, 1)
    }

    /// [`Vae::reconstruct`] over `batch` row-major inputs at once.
    pub fn reconstruct_batch(&self, xs: &[T], batch: usize) -> Result<Vec<T>> {
        let t = self.encode_trace(xs, batch)?;
        let mut acts = Vec::new();
        self.decode_into(t.mu, batch, &mut acts)?;
        Ok(acts.pop().unwrap())
    }

    fn forward_train(&self, xs: &[T], noise: &[T], batch: usize) -> Result<Trace<T>> {
        let mut t = self.encode_trace(xs, batch)?;
        if noise.len() != batch * self.arch.latent {
            return Err(Error::contract(format!(
                "noise has {} values, expected {}",
                noise.len(),
                batch * self.arch.latent
            )));
        }
        let half = T::from_f64(0.5);
        let z: Vec<T> =
            t.mu.iter()
                .zip(&t.logvar)
                .zip(noise)
                .map(|((&m, &lv), &e)| m + (half * lv).exp() * e)
                .collect();
        let mut acts = Vec::new();
        self.decode_into(z, batch, &mut acts)?;
        t.decoder = acts;
        Ok(t)
    }

    fn batch_loss(&self, t: &Trace<T>, xs: &[T], kl_weight: f64) -> LossBreakdown {
        let (d, l) = (self.arch.input, self.arch.latent);
        let xhat = t.decoder.last().unwrap();
        let mut sum = LossBreakdown::default();
        for b in 0..t.batch {
            let out = EncoderOutput {
                mu: t.mu[b * l..(b + 1) * l].to_vec(),
                logvar: t.logvar[b * l..(b + 1) * l].to_vec(),
            };
            let loss = elbo_loss(
                &xs[b * d..(b + 1) * d],
                &xhat[b * d..(b + 1) * d],
                &out,
                kl_weight,
            )
            .expect("shapes fixed by the trace");
            sum.add(loss);
        }
        sum
    }

    /// Gradient of the mean per-sample loss over a batch, written into
    /// `grads`. Returns the summed (not averaged) loss terms.
    pub fn batch_backward(
        &self,
        xs: &[T],
        noise: &[T],
        batch: usize,
        kl_weight: f64,
        grads: &mut Gradients<T>,
    ) -> Result<LossBreakdown> {
        let t = self.forward_train(xs, noise, batch)?;
        let loss = self.batch_loss(&t, xs, kl_weight);
        let scale = T::from_f64(1.0 / batch as f64);
        let two = T::from_f64(2.0);
        let half = T::from_f64(0.5);
        let beta = T::from_f64(kl_weight);

        // d(SSE)/d(pre-sigmoid) = 2 (xhat − x) · xhat (1 − xhat)
        let xhat = t.decoder.last().unwrap();
        let mut delta: Vec<T> = xhat
            .iter()
            .zip(xs)
            .map(|(&y, &x)| two * (y - x) * y * (T::one() - y) * scale)
            .collect();
        let n_dec = self.decoder.len();
        for i in (0..n_dec).rev() {
            let input = &t.decoder[i];
            let dx = self.decoder[i]
                .backward(input, &delta, batch, &mut grads.decoder[i], true)
                .unwrap();
            delta = if i > 0 {
                dx.iter()
                    .zip(input)
                    .map(|(&g, &a)| if a > T::zero() { g } else { T::zero() })
                    .collect()
            } else {
                dx
            };
        }
        let dz = delta;

        let lim = T::from_f64(LOGVAR_LIMIT);
        let l = self.arch.latent;
        let mut dmu = vec![T::zero(); batch * l];
        let mut dlv = vec![T::zero(); batch * l];
        for j in 0..batch * l {
            let (m, lv, raw) = (t.mu[j], t.logvar[j], t.logvar_raw[j]);
            let sigma = (half * lv).exp();
            let eps = noise[j];
            dmu[j] = dz[j] + beta * m * scale;
            dlv[j] = if raw > -lim && raw < lim {
                dz[j] * half * sigma * eps + beta * half * (lv.exp() - T::one()) * scale
            } else {
                T::zero()
            };
        }
        let top = t.encoder.last().unwrap();
        let want = !self.encoder.is_empty();
        let dh_mu = self.mu_head.backward(top, &dmu, batch, &mut grads.mu_head, want);
        let dh_lv = self
            .logvar_head
            .backward(top, &dlv, batch, &mut grads.logvar_head, want);
        if let (Some(a), Some(b)) = (dh_mu, dh_lv) {
            let mut delta: Vec<T> = a
                .iter()
                .zip(&b)
                .zip(top)
                .map(|((&ga, &gb), &h)| if h > T::zero() { ga + gb } else { T::zero() })
                .collect();
            for i in (0..self.encoder.len()).rev() {
                let input = &t.encoder[i];
                let dx = self.encoder[i].backward(input, &delta, batch, &mut grads.encoder[i], i > 0);
                if let Some(dx) = dx {
                    delta = dx
                        .iter()
                        .zip(input)
                        .map(|(&g, &a)| if a > T::zero() { g } else { T::zero() })
                        .collect();
                }
            }
        }
        Ok(loss)
    }

    /// Loss and its gradient for a single input with fixed noise.
    pub fn backward(&self, x: &[T], noise: &[T], kl_weight: f64) -> Result<(LossBreakdown, Gradients<T>)> {
        let mut grads = Self::zeros(self.arch.clone())?;
        let loss = self.batch_backward(x, noise, 1, kl_weight, &mut grads)?;
        if !grads.all_finite() {
            return Err(Error::numeric("non-finite gradient"));
        }
        Ok((loss, grads))
    }

    /// Forward loss for one input with fixed noise; the reference path for
    /// gradient checks.
    pub fn loss(&self, x: &[T], noise: &[T], kl_weight: f64) -> Result<LossBreakdown> {
        let out = self.encode(x)?;
        let z = reparameterize(&out, noise);
        let xhat = self.decode(&z)?;
        elbo_loss(x, &xhat, &out, kl_weight)
    }
}

/// Optimizer and schedule settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub arch: VaeArch,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub kl_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: VaeArch::default(),
            epochs: 400,
            batch_size: 128,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            kl_weight: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::contract("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::contract("batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::contract("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::contract("Adam betas must lie in [0, 1)"));
        }
        if !(self.kl_weight >= 0.0) {
            return Err(Error::contract("kl_weight must be non-negative"));
        }
        self.arch.validate()
    }
}

/// Mean per-patch loss terms for one epoch (epochs count from 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub recon: f64,
    pub kl: f64,
    pub total: f64,
}

pub struct TrainOutcome {
    pub params: VaeParams,
    pub trace: Vec<EpochLoss>,
}

struct Adam<T> {
    m: Gradients<T>,
    v: Gradients<T>,
    step: i32,
}

impl<T: Real> Adam<T> {
    fn new(arch: &VaeArch) -> Result<Self> {
        Ok(Self {
            m: Vae::zeros(arch.clone())?,
            v: Vae::zeros(arch.clone())?,
            step: 0,
        })
    }

    /// Applies one bias-corrected Adam step. Returns `false`, leaving the
    /// step incomplete, if any gradient entry is non-finite.
    fn update(&mut self, params: &mut Vae<T>, grads: &Gradients<T>, cfg: &TrainConfig) -> bool {
        self.step += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = T::from_f64(1.0 / (1.0 - b1.powi(self.step)));
        let c2 = T::from_f64(1.0 / (1.0 - b2.powi(self.step)));
        let (b1, b2) = (T::from_f64(b1), T::from_f64(b2));
        let (lr, eps) = (T::from_f64(cfg.learning_rate), T::from_f64(cfg.adam_eps));
        let one = T::one();
        let layers = params
            .layers_mut()
            .into_iter()
            .zip(grads.layers())
            .zip(self.m.layers_mut())
            .zip(self.v.layers_mut());
        for (((p, (_, g)), m), v) in layers {
            let slices = [
                (&mut p.weights, &g.weights, &mut m.weights, &mut v.weights),
                (&mut p.bias, &g.bias, &mut m.bias, &mut v.bias),
            ];
            for (p, g, m, v) in slices {
                let n = p.len();
                let (g, m, v) = (&g[..n], &mut m[..n], &mut v[..n]);
                let mut finite = true;
                for i in 0..n {
                    let gi = g[i];
                    finite &= gi.is_finite();
                    m[i] = b1 * m[i] + (one - b1) * gi;
                    v[i] = b2 * v[i] + (one - b2) * gi * gi;
                    p[i] = p[i] - lr * (m[i] * c1) / ((v[i] * c2).sqrt() + eps);
                }
                if !finite {
                    return false;
                }
            }
        }
        true
    }
}

/// Trains from a Glorot initialization seeded by `cfg.seed`.
pub fn train(patches: &[&[f32]], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(patches, cfg, |_| {})
}

/// [`train`] with a callback after each epoch.
pub fn train_with(
    patches: &[&[f32]],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLoss),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if patches.is_empty() {
        return Err(Error::contract("training needs at least one patch"));
    }
    let dim = cfg.arch.input;
    if let Some(p) = patches.iter().find(|p| p.len() != dim) {
        return Err(Error::contract(format!(
            "patch has {} values, network input is {dim}",
            p.len()
        )));
    }
    let latent = cfg.arch.latent;
    let _flush = FlushSubnormals::new();
    let mut params = Vae::<f32>::init(cfg.arch.clone(), cfg.seed)?;
    let mut grads = Vae::<f32>::zeros(cfg.arch.clone())?;
    let mut adam = Adam::new(&cfg.arch)?;
    let mut rng = seed::derived_rng(cfg.seed, 0x0074_7261_696e, 0);
    let mut order: Vec<usize> = (0..patches.len()).collect();
    let mut xs = Vec::with_capacity(cfg.batch_size * dim);
    let mut noise = Vec::with_capacity(cfg.batch_size * latent);
    let mut trace = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sum = LossBreakdown::default();
        for (batch_no, idx) in order.chunks(cfg.batch_size).enumerate() {
            xs.clear();
            for &i in idx {
                xs.extend_from_slice(patches[i]);
            }
            noise.clear();
            noise.extend((0..idx.len() * latent).map(|_| rng.sample::<f32, _>(StandardNormal)));
            let diverged = |message: String| Error::Diverged {
                epoch,
                batch: batch_no,
                message,
            };
            let loss = params
                .batch_backward(&xs, &noise, idx.len(), cfg.kl_weight, &mut grads)
                .map_err(|e| diverged(e.to_string()))?;
            if !loss.total.is_finite() {
                return Err(diverged("non-finite loss".into()));
            }
            if !adam.update(&mut params, &grads, cfg) {
                return Err(diverged("non-finite gradient".into()));
            }
            epoch_sum.add(loss);
        }
        let mean = epoch_sum.scaled(1.0 / patches.len() as f64);
        let record = EpochLoss {
            epoch,
            recon: mean.recon,
            kl: mean.kl,
            total: mean.total,
        };
        on_epoch(&record);
        trace.push(record);
    }
    if !params.all_finite() {
        return Err(Error::Diverged {
            epoch: cfg.epochs,
            batch: 0,
            message: "non-finite parameters after training".into(),
        });
    }
    Ok(TrainOutcome { params, trace })
}

/// Loss trace as CSV with header `epoch,recon,kl,total`.
pub fn trace_csv(trace: &[EpochLoss]) -> String {
    let mut s = String::from("epoch,recon,kl,total\n");
    for e in trace {
        s.push_str(&format!(
            "{},{:.9e},{:.9e},{:.9e}\n",
            e.epoch, e.recon, e.kl, e.total
        ));
    }
    s
}
