//! Residual encoder-decoder denoiser, convolutional critic, and their losses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, Init, Linear, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Cnn,
    Gan,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconMode {
    Mse,
    #[default]
    Mae,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    /// Channel width at full resolution; deeper levels use twice this.
    pub width: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self { width: 20 }
    }
}

#[derive(Clone, Debug)]
struct GenLayers {
    input: Conv2d,
    down: [Conv2d; 3],
    up: [Conv2d; 3],
    output: Conv2d,
}

/// Generator `G` (also `F` in the single-network variant). The output layer
/// starts at zero, so a fresh network is the identity map.
#[derive(Clone, Debug)]
pub struct Denoiser<T: Scalar> {
    pub config: DenoiserConfig,
    pub params: ParamSet<T>,
    layers: GenLayers,
}

/// Input side length must be a multiple of this.
pub const DENOISER_MULTIPLE: usize = 8;

impl<T: Scalar> Denoiser<T> {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        if config.width == 0 {
            return Err(Error::Config("denoiser width must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let (c, c2) = (config.width, 2 * config.width);
        let he = Init::He;
        let input = Conv2d::new(&mut p, "in", 1, c, 3, 1, he, &mut rng);
        let down = [
            Conv2d::new(&mut p, "down0", c, c, 3, 2, he, &mut rng),
            Conv2d::new(&mut p, "down1", c, c2, 3, 2, he, &mut rng),
            Conv2d::new(&mut p, "down2", c2, c2, 3, 2, he, &mut rng),
        ];
        let up = [
            Conv2d::new(&mut p, "up2", c2, c2, 3, 1, he, &mut rng),
            Conv2d::new(&mut p, "up1", c2, c, 3, 1, he, &mut rng),
            Conv2d::new(&mut p, "up0", c, c, 3, 1, he, &mut rng),
        ];
        let output = Conv2d::new(&mut p, "out", c, 1, 3, 1, Init::Zeros, &mut rng);
        Ok(Self {
            config,
            params: p,
            layers: GenLayers { input, down, up, output },
        })
    }

    pub fn cast<U: Scalar>(&self) -> Denoiser<U> {
        Denoiser {
            config: self.config.clone(),
            params: self.params.cast(),
            layers: self.layers.clone(),
        }
    }

    /// `[N, 1, H, W] -> [N, 1, H, W]`, computed as `x + residual(x)`.
    pub fn forward<'t>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != 1 || s[2] % DENOISER_MULTIPLE != 0 || s[3] % DENOISER_MULTIPLE != 0 || s[2] == 0 {
            return Err(Error::Contract(format!(
                "denoiser expects [N, 1, H, W] with H, W multiples of {DENOISER_MULTIPLE}, got {s:?}"
            )));
        }
        let l = &self.layers;
        let e0 = l.input.forward(p, x).relu();
        let e1 = l.down[0].forward(p, e0).relu();
        let e2 = l.down[1].forward(p, e1).relu();
        let e3 = l.down[2].forward(p, e2).relu();
        let d2 = l.up[0].forward(p, e3.upsample2()).add(e2).relu();
        let d1 = l.up[1].forward(p, d2.upsample2()).add(e1).relu();
        let d0 = l.up[2].forward(p, d1.upsample2()).add(e0).relu();
        Ok(x.add(l.output.forward(p, d0)))
    }

    /// Denoises a batch of 2-D images `[N, H, W]` without recording gradients.
    pub fn denoise(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape().to_vec();
        if s.len() != 3 {
            return Err(Error::Contract(format!("denoise expects [N, H, W], got {s:?}")));
        }
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let y = self.forward(&p, tape.constant(x.clone().reshape(&[s[0], 1, s[1], s[2]])))?;
        Ok((*y.value()).clone().reshape(&s))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CriticConfig {
    /// Widths of the four stride-2 convolutions.
    pub channels: [usize; 4],
    pub slope: f64,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self {
            channels: [16, 32, 64, 64],
            slope: 0.2,
        }
    }
}

/// A scalar-valued critic `D` of single-channel images.
pub trait Critic<T: Scalar> {
    fn params(&self) -> &ParamSet<T>;
    /// `[N, 1, H, W] -> [N]`.
    fn score<'t>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Var<'t, T>;
}

/// Four strided convolutions and a linear read-out, without normalisation.
#[derive(Clone, Debug)]
pub struct Discriminator<T: Scalar> {
    pub config: CriticConfig,
    pub params: ParamSet<T>,
    convs: Vec<Conv2d>,
    head: Linear,
    image_size: usize,
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(config: CriticConfig, image_size: usize, seed: u64) -> Result<Self> {
        if image_size == 0 {
            return Err(Error::Config("critic needs a positive image size".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let mut in_c = 1;
        let mut convs = Vec::new();
        for (i, &c) in config.channels.iter().enumerate() {
            convs.push(Conv2d::new(&mut p, &format!("conv{i}"), in_c, c, 3, 2, Init::He, &mut rng));
            in_c = c;
        }
        let side = (0..4).fold(image_size, |s, _| s.div_ceil(2));
        let head = Linear::new(&mut p, "head", in_c * side * side, 1, Init::Normal(0.01), &mut rng);
        Ok(Self { config, params: p, convs, head, image_size })
    }

    pub fn cast<U: Scalar>(&self) -> Discriminator<U> {
        Discriminator {
            config: self.config.clone(),
            params: self.params.cast(),
            convs: self.convs.clone(),
            head: self.head,
            image_size: self.image_size,
        }
    }
}

impl<T: Scalar> Critic<T> for Discriminator<T> {
    fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    fn score<'t>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        let mut h = x;
        for c in &self.convs {
            h = c.forward(p, h).leaky_relu(self.config.slope);
        }
        let s = h.shape();
        let flat = h.reshape(&[s[0], s[1] * s[2] * s[3]]);
        self.head.forward(p, flat).reshape(&[s[0]])
    }
}

fn check_pair<T: Scalar>(a: &Var<'_, T>, b: &Var<'_, T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Contract(format!(
            "shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Pixel-mean squared or absolute error.
pub fn reconstruction_loss<'t, T: Scalar>(x_hat: Var<'t, T>, y: Var<'t, T>, mode: ReconMode) -> Result<Var<'t, T>> {
    check_pair(&x_hat, &y)?;
    let d = x_hat.sub(y);
    Ok(match mode {
        ReconMode::Mse => d.square().mean(),
        ReconMode::Mae => d.abs().mean(),
    })
}

/// How the joint objective reduces the reconstruction error over a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconReduction {
    /// Sum over each image's pixels, mean over the batch: `(1/N) sum |F(x) - y|`.
    #[default]
    SampleSum,
    /// Mean over every pixel of the batch, as `reconstruction_loss`.
    PixelMean,
}

/// `reconstruction_loss` rescaled to the requested batch reduction.
pub fn reconstruction_loss_reduced<'t, T: Scalar>(
    x_hat: Var<'t, T>,
    y: Var<'t, T>,
    mode: ReconMode,
    reduction: ReconReduction,
) -> Result<Var<'t, T>> {
    let s = x_hat.shape();
    let l = reconstruction_loss(x_hat, y, mode)?;
    Ok(match reduction {
        ReconReduction::PixelMean => l,
        ReconReduction::SampleSum => l.scale(s[1..].iter().product::<usize>() as f64),
    })
}

/// `mean(-D(x_hat))`.
pub fn generator_adversarial_loss<'t, T: Scalar, C: Critic<T> + ?Sized>(
    critic: &C,
    p: &Bound<'t, T>,
    x_hat: Var<'t, T>,
) -> Var<'t, T> {
    critic.score(p, x_hat).mean().scale(-1.0)
}

/// Parts of the critic objective.
#[derive(Clone, Copy, Debug)]
pub struct CriticLoss<'t, T: Scalar> {
    pub wasserstein: Var<'t, T>,
    pub penalty: Var<'t, T>,
    pub total: Var<'t, T>,
}

/// `mean D(x_hat) - mean D(y) + lambda * mean (|grad_u D(u)|_2 - 1)^2` with
/// `u = eps y + (1 - eps) x_hat`, one `eps ~ U(0, 1)` per pair. `x_hat` and
/// `y` are plain values: nothing flows back into the generator.
pub fn discriminator_loss<'t, T: Scalar, C: Critic<T> + ?Sized, R: Rng>(
    tape: &'t Tape<T>,
    critic: &C,
    p: &Bound<'t, T>,
    x_hat: &Tensor<T>,
    y: &Tensor<T>,
    gp_weight: f64,
    rng: &mut R,
) -> Result<CriticLoss<'t, T>> {
    if !(gp_weight >= 0.0) {
        return Err(Error::Config(format!("gradient penalty weight must be non-negative, got {gp_weight}")));
    }
    if x_hat.shape() != y.shape() {
        return Err(Error::Contract(format!("shape mismatch {:?} vs {:?}", x_hat.shape(), y.shape())));
    }
    let eps: Vec<f64> = (0..x_hat.shape()[0]).map(|_| rng.random::<f64>()).collect();
    discriminator_loss_with(tape, critic, p, x_hat, y, gp_weight, &eps)
}

/// [`discriminator_loss`] with explicit interpolation weights.
pub fn discriminator_loss_with<'t, T: Scalar, C: Critic<T> + ?Sized>(
    tape: &'t Tape<T>,
    critic: &C,
    p: &Bound<'t, T>,
    x_hat: &Tensor<T>,
    y: &Tensor<T>,
    gp_weight: f64,
    eps: &[f64],
) -> Result<CriticLoss<'t, T>> {
    let s = x_hat.shape().to_vec();
    let n = s[0];
    assert_eq!(eps.len(), n, "one interpolation weight per pair");
    let per = x_hat.len() / n;
    let mut u = Tensor::zeros(&s);
    for (i, (o, (a, b))) in u.data_mut().iter_mut().zip(x_hat.data().iter().zip(y.data())).enumerate() {
        let e = T::lit(eps[i / per]);
        *o = e * *b + (T::one() - e) * *a;
    }
    let fake = critic.score(p, tape.constant(x_hat.clone())).mean();
    let real = critic.score(p, tape.constant(y.clone())).mean();
    let wasserstein = fake.sub(real);

    let u = tape.param(u);
    let du = tape.backward(critic.score(p, u).sum(), true);
    let grad = du.var(u).unwrap_or_else(|| tape.constant(Tensor::zeros(&s)));
    let norm = grad.square().reshape(&[n, per]).sum_trailing().sqrt();
    let penalty = norm.add_scalar(-1.0).square().mean();
    let total = wasserstein.add(penalty.scale(gp_weight));
    Ok(CriticLoss { wasserstein, penalty, total })
}
