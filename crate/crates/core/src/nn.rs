//! Parameter collections and the small set of layers the networks use.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::autograd::{Gradients, Tape, Var};
use crate::kernels::ConvGeom;
use crate::scalar::Scalar;
use crate::tensor::{hex, Tensor};

/// Ordered, named collection of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>) -> usize {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.tensors.push(value);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.tensors[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// Registers every tensor on `tape`; only `trainable` sets get gradients.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> Bound<'t, T> {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound { vars, trainable }
    }

    /// SHA-256 over names, shapes and bit patterns.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (n, t) in self.names.iter().zip(&self.tensors) {
            h.update(n.as_bytes());
            h.update(t.checksum().as_bytes());
        }
        hex(&h.finalize())
    }

    /// Flattened copy of all parameters, in declaration order.
    pub fn flatten(&self) -> Vec<T> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn unflatten(&mut self, flat: &[T]) {
        assert_eq!(flat.len(), self.count(), "flat parameter length mismatch");
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// A [`ParamSet`] registered on a tape.
pub struct Bound<'t, T: Scalar> {
    vars: Vec<Var<'t, T>>,
    trainable: bool,
}

impl<'t, T: Scalar> Bound<'t, T> {
    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn get(&self, i: usize) -> Var<'t, T> {
        self.vars[i]
    }

    /// Gradient per parameter; missing gradients are reported as zeros.
    pub fn grads(&self, g: &Gradients<'t, T>) -> Vec<Tensor<T>> {
        self.vars
            .iter()
            .map(|&v| g.tensor(v).unwrap_or_else(|| Tensor::zeros(&v.shape())))
            .collect()
    }

    /// True when no parameter received any gradient.
    pub fn untouched_by(&self, g: &Gradients<'t, T>) -> bool {
        self.vars.iter().all(|&v| g.var(v).is_none())
    }
}

/// Weight initialisation scheme.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Normal with `sqrt(2 / fan_in)` standard deviation.
    He,
    Normal(f64),
    Zeros,
}

pub fn init_tensor<T: Scalar, R: Rng>(shape: &[usize], fan_in: usize, init: Init, rng: &mut R) -> Tensor<T> {
    let std = match init {
        Init::He => (2.0 / fan_in as f64).sqrt(),
        Init::Normal(s) => s,
        Init::Zeros => return Tensor::zeros(shape),
    };
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| T::lit(dist.sample(rng)))
}

/// 2-D convolution with bias over NCHW input.
#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub weight: usize,
    pub bias: usize,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        params: &mut ParamSet<T>,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_c * kernel * kernel;
        let w = init_tensor(&[out_c, in_c, kernel, kernel], fan_in, init, rng);
        let weight = params.push(format!("{name}.weight"), w);
        let bias = params.push(format!("{name}.bias"), Tensor::zeros(&[out_c]));
        Self {
            weight,
            bias,
            in_c,
            out_c,
            kernel,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn geom(&self, h: usize, w: usize) -> ConvGeom {
        ConvGeom {
            in_c: self.in_c,
            out_c: self.out_c,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
            h,
            w,
        }
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        let s = x.shape();
        x.conv2d(p.get(self.weight), self.geom(s[2], s[3]))
            .add_channel_bias(p.get(self.bias))
    }
}

/// Fully connected layer: `[N, in] -> [N, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: usize,
    pub bias: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        params: &mut ParamSet<T>,
        name: &str,
        input: usize,
        output: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let w = init_tensor(&[input, output], input, init, rng);
        let weight = params.push(format!("{name}.weight"), w);
        let bias = params.push(format!("{name}.bias"), Tensor::zeros(&[output]));
        Self { weight, bias }
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        x.matmul(p.get(self.weight), false, false)
            .add_channel_bias(p.get(self.bias))
    }
}
