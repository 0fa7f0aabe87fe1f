//! Network families as pure functions of their parameters.
//!
//! Each network is described by an [`Architecture`]; the descriptor alone
//! determines the ordered list of parameter names and shapes
//! ([`Architecture::param_specs`]). [`NetworkParams`] owns the values and
//! [`NetworkParams::bind`] places them on a tape for a forward pass.

mod discriminator;
mod generator;
mod unet;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{self, Real, Tape, Tensor, TensorError, Var};

pub use discriminator::DiscriminatorConfig;
pub use generator::GeneratorConfig;
pub use unet::{OutputActivation, UNetConfig};

/// Standard deviation of the Normal initialiser for conv kernels.
pub const INIT_STD: f64 = 0.02;
pub const LEAKY_SLOPE: f64 = 0.2;

/// A network mapping one image batch to another tensor (generator,
/// discriminator logits, segmenter logits).
pub trait FrameMap<T: Real> {
    fn apply(&self, tape: &mut Tape<T>, x: Var) -> tensor::Result<Var>;
}

impl<T: Real, F> FrameMap<T> for F
where
    F: Fn(&mut Tape<T>, Var) -> tensor::Result<Var>,
{
    fn apply(&self, tape: &mut Tape<T>, x: Var) -> tensor::Result<Var> {
        self(tape, x)
    }
}

/// A next-frame predictor over the two most recent frames.
pub trait FramePredictor<T: Real> {
    fn predict(&self, tape: &mut Tape<T>, prev: Var, curr: Var) -> tensor::Result<Var>;
}

impl<T: Real, F> FramePredictor<T> for F
where
    F: Fn(&mut Tape<T>, Var, Var) -> tensor::Result<Var>,
{
    fn predict(&self, tape: &mut Tape<T>, prev: Var, curr: Var) -> tensor::Result<Var> {
        self(tape, prev, curr)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Kernel,
    Bias,
    NormGain,
    NormBias,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

impl ParamSpec {
    pub(crate) fn kernel(name: impl Into<String>, shape: [usize; 4]) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            kind: ParamKind::Kernel,
        }
    }

    pub(crate) fn bias(name: impl Into<String>, n: usize) -> Self {
        Self {
            name: name.into(),
            shape: vec![n],
            kind: ParamKind::Bias,
        }
    }

    /// Gain and bias of an instance norm over `n` channels.
    pub(crate) fn norm(prefix: &str, n: usize) -> [Self; 2] {
        [
            Self {
                name: format!("{prefix}.gain"),
                shape: vec![n],
                kind: ParamKind::NormGain,
            },
            Self {
                name: format!("{prefix}.bias"),
                shape: vec![n],
                kind: ParamKind::NormBias,
            },
        ]
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Architecture {
    Generator(GeneratorConfig),
    Discriminator(DiscriminatorConfig),
    UNet(UNetConfig),
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        match self {
            Architecture::Generator(c) => c.validate(),
            Architecture::Discriminator(c) => c.validate(),
            Architecture::UNet(c) => c.validate(),
        }
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        match self {
            Architecture::Generator(c) => c.param_specs(),
            Architecture::Discriminator(c) => c.param_specs(),
            Architecture::UNet(c) => c.param_specs(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_specs().iter().map(ParamSpec::numel).sum()
    }
}

/// Learnable parameters of one network, in descriptor order.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams<T> {
    arch: Architecture,
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Real> NetworkParams<T> {
    /// Assembles parameters, checking names, order and shapes against the descriptor.
    pub fn from_tensors(arch: Architecture, tensors: IndexMap<String, Tensor<T>>) -> Result<Self> {
        arch.validate()?;
        let specs = arch.param_specs();
        if specs.len() != tensors.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                tensors.len()
            )));
        }
        for (spec, (name, t)) in specs.iter().zip(&tensors) {
            if &spec.name != name || spec.shape != t.shape() {
                return Err(Error::Config(format!(
                    "parameter {name} {:?} does not match descriptor entry {} {:?}",
                    t.shape(),
                    spec.name,
                    spec.shape
                )));
            }
        }
        Ok(Self { arch, tensors })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> NetworkParams<U> {
        NetworkParams {
            arch: self.arch.clone(),
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Places every parameter on `tape`. With `trainable = false` the
    /// parameters are constants and receive no gradient.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundNet {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| (name.clone(), tape.leaf(t.clone(), trainable)))
            .collect();
        BoundNet {
            arch: self.arch.clone(),
            vars,
        }
    }
}

/// Draws parameters for `arch`: kernels ~ Normal(0, 0.02), biases 0,
/// norm gains 1, norm biases 0. Deterministic in `seed`.
pub fn init_params<T: Real>(arch: &Architecture, seed: u64) -> Result<NetworkParams<T>> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut tensors = IndexMap::new();
    for spec in arch.param_specs() {
        let t = match spec.kind {
            ParamKind::Kernel => Tensor::from_fn(&spec.shape, |_| T::lit(normal.sample(&mut rng)))?,
            ParamKind::Bias | ParamKind::NormBias => Tensor::zeros(&spec.shape)?,
            ParamKind::NormGain => Tensor::ones(&spec.shape)?,
        };
        tensors.insert(spec.name, t);
    }
    NetworkParams::from_tensors(arch.clone(), tensors)
}

/// Parameters of one network placed on a tape.
#[derive(Debug, Clone)]
pub struct BoundNet {
    arch: Architecture,
    vars: IndexMap<String, Var>,
}

impl BoundNet {
    /// Wraps tape variables already holding the parameters of `arch`.
    pub fn from_vars(arch: Architecture, vars: IndexMap<String, Var>) -> Self {
        Self { arch, vars }
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} missing from bound network"))
    }

    pub fn vars(&self) -> impl Iterator<Item = (&String, Var)> {
        self.vars.iter().map(|(k, &v)| (k, v))
    }

    fn opt_var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    fn norm<T: Real>(&self, tape: &mut Tape<T>, x: Var, prefix: &str) -> tensor::Result<Var> {
        let g = self.var(&format!("{prefix}.gain"));
        let b = self.var(&format!("{prefix}.bias"));
        tape.instance_norm(x, g, b)
    }
}

impl<T: Real> FrameMap<T> for BoundNet {
    fn apply(&self, tape: &mut Tape<T>, x: Var) -> tensor::Result<Var> {
        match &self.arch {
            Architecture::Generator(c) => generator::forward(tape, self, c, x),
            Architecture::Discriminator(c) => discriminator::forward(tape, self, c, x, true),
            Architecture::UNet(c) => unet::forward(tape, self, c, x, false),
        }
    }
}

impl<T: Real> FramePredictor<T> for BoundNet {
    fn predict(&self, tape: &mut Tape<T>, prev: Var, curr: Var) -> tensor::Result<Var> {
        match &self.arch {
            Architecture::UNet(c) => predictor_forward(tape, self, c, prev, curr, false),
            other => Err(TensorError::InvalidArgument {
                op: "predictor_forward",
                detail: format!("{} is not a frame predictor", arch_name(other)),
            }),
        }
    }
}

fn arch_name(a: &Architecture) -> &'static str {
    match a {
        Architecture::Generator(_) => "generator",
        Architecture::Discriminator(_) => "discriminator",
        Architecture::UNet(_) => "u-net",
    }
}

pub fn generator_forward<T: Real>(tape: &mut Tape<T>, net: &BoundNet, x: Var) -> tensor::Result<Var> {
    match &net.arch {
        Architecture::Generator(c) => generator::forward(tape, net, c, x),
        other => Err(wrong_arch("generator_forward", other)),
    }
}

pub fn discriminator_forward<T: Real>(tape: &mut Tape<T>, net: &BoundNet, x: Var) -> tensor::Result<Var> {
    match &net.arch {
        Architecture::Discriminator(c) => discriminator::forward(tape, net, c, x, true),
        other => Err(wrong_arch("discriminator_forward", other)),
    }
}

/// Two-frame predictor: the frames are concatenated along channels and
/// passed through the U-Net. `zero_bottleneck` multiplies the innermost
/// activations by zero (a probe for the skip connections).
pub fn predictor_forward<T: Real>(
    tape: &mut Tape<T>,
    net: &BoundNet,
    cfg: &UNetConfig,
    prev: Var,
    curr: Var,
    zero_bottleneck: bool,
) -> tensor::Result<Var> {
    if tape.shape(prev) != tape.shape(curr) {
        return Err(TensorError::ShapeMismatch {
            op: "predictor_forward",
            lhs: tape.shape(prev).to_vec(),
            rhs: tape.shape(curr).to_vec(),
        });
    }
    let x = tape.concat_channels(&[prev, curr])?;
    unet::forward(tape, net, cfg, x, zero_bottleneck)
}

/// Per-pixel class logits `[N, n_classes, H, W]`.
pub fn segmenter_forward<T: Real>(tape: &mut Tape<T>, net: &BoundNet, x: Var) -> tensor::Result<Var> {
    match &net.arch {
        Architecture::UNet(c) if c.output == OutputActivation::Identity => unet::forward(tape, net, c, x, false),
        other => Err(wrong_arch("segmenter_forward", other)),
    }
}

/// Discriminator logits with the instance norms skipped, leaving only the
/// local conv/activation path. Used to probe the patch size.
pub fn discriminator_local_forward<T: Real>(tape: &mut Tape<T>, net: &BoundNet, x: Var) -> tensor::Result<Var> {
    match &net.arch {
        Architecture::Discriminator(c) => discriminator::forward(tape, net, c, x, false),
        other => Err(wrong_arch("discriminator_local_forward", other)),
    }
}

fn wrong_arch(op: &'static str, arch: &Architecture) -> TensorError {
    TensorError::InvalidArgument {
        op,
        detail: format!("called with a {} descriptor", arch_name(arch)),
    }
}

pub(crate) fn check_image(
    tape: &Tape<impl Real>,
    op: &'static str,
    x: Var,
    channels: usize,
    size: Option<usize>,
) -> tensor::Result<()> {
    let [_, c, h, w] = tape.value(x).dims4(op)?;
    if c != channels {
        return Err(TensorError::InvalidArgument {
            op,
            detail: format!("expected {channels} input channels, got shape {:?}", tape.shape(x)),
        });
    }
    if let Some(s) = size {
        if h != s || w != s {
            return Err(TensorError::InvalidArgument {
                op,
                detail: format!("configured for {s}x{s} images, got shape {:?}", tape.shape(x)),
            });
        }
    }
    Ok(())
}
