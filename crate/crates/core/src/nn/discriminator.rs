//! PatchGAN discriminator. With the default three stride-2 layers each
//! output logit sees a 70×70 input patch.

use super::{check_image, BoundNet, ParamSpec, LEAKY_SLOPE};
use crate::error::{Error, Result};
use crate::tensor::{self, conv2d_output_size, Real, Tape, TensorError, Var};

const KERNEL: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiscriminatorConfig {
    pub input_channels: usize,
    pub base_width: usize,
    /// Number of stride-2 layers before the two stride-1 layers.
    pub n_layers: usize,
    /// Zero padding applied by every conv.
    pub padding: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            input_channels: 3,
            base_width: 64,
            n_layers: 3,
            padding: 0,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.base_width == 0 || self.n_layers == 0 {
            return Err(Error::Config(
                "discriminator channels, width and layer count must be positive".into(),
            ));
        }
        Ok(())
    }

    fn width(&self, layer: usize) -> usize {
        self.base_width << layer.min(3)
    }

    /// (kernel, stride) of every conv, input to output.
    pub fn layers(&self) -> Vec<(usize, usize)> {
        let mut v = vec![(KERNEL, 2); self.n_layers];
        v.push((KERNEL, 1));
        v.push((KERNEL, 1));
        v
    }

    /// Side of the input patch seen by one output logit:
    /// `r ← r + (k−1)·jump; jump ← jump·stride`.
    pub fn receptive_field(&self) -> usize {
        let (mut r, mut jump) = (1, 1);
        for (k, s) in self.layers() {
            r += (k - 1) * jump;
            jump *= s;
        }
        r
    }

    pub fn output_size(&self, input: usize) -> tensor::Result<usize> {
        self.layers()
            .into_iter()
            .try_fold(input, |size, (k, s)| conv2d_output_size(size, k, s, self.padding))
    }

    pub(crate) fn param_specs(&self) -> Vec<ParamSpec> {
        let n = self.n_layers;
        let mut specs = Vec::new();
        let mut cin = self.input_channels;
        for i in 0..=n {
            let cout = self.width(i);
            specs.push(ParamSpec::kernel(format!("layer{i}.weight"), [cout, cin, KERNEL, KERNEL]));
            if i == 0 {
                specs.push(ParamSpec::bias("layer0.bias", cout));
            } else {
                specs.extend(ParamSpec::norm(&format!("layer{i}.norm"), cout));
            }
            cin = cout;
        }
        let last = n + 1;
        specs.push(ParamSpec::kernel(format!("layer{last}.weight"), [1, cin, KERNEL, KERNEL]));
        specs.push(ParamSpec::bias(format!("layer{last}.bias"), 1));
        specs
    }
}

pub(super) fn forward<T: Real>(
    tape: &mut Tape<T>,
    net: &BoundNet,
    cfg: &DiscriminatorConfig,
    x: Var,
    normalise: bool,
) -> tensor::Result<Var> {
    check_image(tape, "discriminator_forward", x, cfg.input_channels, None)?;
    let [_, _, h, w] = tape.value(x).dims4("discriminator_forward")?;
    let rf = cfg.receptive_field();
    if h < rf || w < rf {
        return Err(TensorError::InvalidArgument {
            op: "discriminator_forward",
            detail: format!("input {h}x{w} is smaller than the {rf}x{rf} receptive field"),
        });
    }
    let slope = T::lit(LEAKY_SLOPE);
    let layers = cfg.layers();
    let last = layers.len() - 1;
    let mut h = x;
    for (i, (_, stride)) in layers.into_iter().enumerate() {
        let weight = net.var(&format!("layer{i}.weight"));
        let bias = net.opt_var(&format!("layer{i}.bias"));
        h = tape.conv2d(h, weight, bias, stride, cfg.padding)?;
        if i == last {
            break;
        }
        if i > 0 && normalise {
            h = net.norm(tape, h, &format!("layer{i}.norm"))?;
        }
        h = tape.leaky_relu(h, slope)?;
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::super::{init_params, Architecture, FrameMap};
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn default_receptive_field_is_70() {
        assert_eq!(DiscriminatorConfig::default().receptive_field(), 70);
    }

    #[test]
    fn logit_map_sizes() {
        let cfg = DiscriminatorConfig::default();
        assert_eq!(cfg.output_size(70).unwrap(), 1);
        assert!(cfg.output_size(69).is_err());
        // the padded variant reproduces the common 30×30 map on 256 inputs
        let padded = DiscriminatorConfig { padding: 1, ..cfg };
        assert_eq!(padded.output_size(256).unwrap(), 30);
        assert_eq!(padded.receptive_field(), 70);
    }

    #[test]
    fn forward_shapes() {
        let cfg = DiscriminatorConfig {
            input_channels: 3,
            base_width: 2,
            n_layers: 3,
            padding: 0,
        };
        let p = init_params::<f32>(&Architecture::Discriminator(cfg), 0).unwrap();
        let mut tape = Tape::new();
        let net = p.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros(&[2, 3, 70, 70]).unwrap());
        let y = net.apply(&mut tape, x).unwrap();
        assert_eq!(tape.shape(y), &[2, 1, 1, 1]);
        let small = tape.constant(Tensor::zeros(&[1, 3, 64, 64]).unwrap());
        assert!(net.apply(&mut tape, small).is_err());
    }

    #[test]
    fn widths_follow_the_patchgan_ladder() {
        let specs = DiscriminatorConfig::default().param_specs();
        let widths: Vec<usize> = specs
            .iter()
            .filter(|s| s.name.ends_with(".weight"))
            .map(|s| s.shape[0])
            .collect();
        assert_eq!(widths, vec![64, 128, 256, 512, 1]);
    }
}
