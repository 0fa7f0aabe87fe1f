//! Residual translation generator: 7×7 conv, two stride-2 downsampling
//! convs, residual blocks, two stride-2 transposed convs, 7×7 conv, tanh.

use super::{check_image, BoundNet, ParamSpec};
use crate::error::{Error, Result};
use crate::tensor::{self, Real, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeneratorConfig {
    pub input_channels: usize,
    pub base_width: usize,
    pub n_residual_blocks: usize,
    pub image_size: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            input_channels: 3,
            base_width: 64,
            n_residual_blocks: 6,
            image_size: 64,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.base_width == 0 {
            return Err(Error::Config("generator channels and width must be positive".into()));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "generator image_size {} must be a positive multiple of 4",
                self.image_size
            )));
        }
        Ok(())
    }

    pub(crate) fn param_specs(&self) -> Vec<ParamSpec> {
        let (c, b) = (self.input_channels, self.base_width);
        let mut specs = vec![ParamSpec::kernel("in.weight", [b, c, 7, 7])];
        specs.extend(ParamSpec::norm("in.norm", b));
        for i in 0..2 {
            let (cin, cout) = (b << i, b << (i + 1));
            specs.push(ParamSpec::kernel(format!("down{i}.weight"), [cout, cin, 3, 3]));
            specs.extend(ParamSpec::norm(&format!("down{i}.norm"), cout));
        }
        let w = 4 * b;
        for r in 0..self.n_residual_blocks {
            for j in 1..=2 {
                specs.push(ParamSpec::kernel(format!("res{r}.conv{j}.weight"), [w, w, 3, 3]));
                specs.extend(ParamSpec::norm(&format!("res{r}.norm{j}"), w));
            }
        }
        for i in 0..2 {
            // transposed-conv kernels are [in, out, kh, kw]
            let (cin, cout) = (w >> i, w >> (i + 1));
            specs.push(ParamSpec::kernel(format!("up{i}.weight"), [cin, cout, 4, 4]));
            specs.extend(ParamSpec::norm(&format!("up{i}.norm"), cout));
        }
        specs.push(ParamSpec::kernel("out.weight", [c, b, 7, 7]));
        specs.push(ParamSpec::bias("out.bias", c));
        specs
    }
}

pub(super) fn forward<T: Real>(tape: &mut Tape<T>, net: &BoundNet, cfg: &GeneratorConfig, x: Var) -> tensor::Result<Var> {
    check_image(tape, "generator_forward", x, cfg.input_channels, Some(cfg.image_size))?;
    let h = tape.conv2d(x, net.var("in.weight"), None, 1, 3)?;
    let h = net.norm(tape, h, "in.norm")?;
    let mut h = tape.relu(h)?;
    for i in 0..2 {
        let y = tape.conv2d(h, net.var(&format!("down{i}.weight")), None, 2, 1)?;
        let y = net.norm(tape, y, &format!("down{i}.norm"))?;
        h = tape.relu(y)?;
    }
    for r in 0..cfg.n_residual_blocks {
        let y = tape.conv2d(h, net.var(&format!("res{r}.conv1.weight")), None, 1, 1)?;
        let y = net.norm(tape, y, &format!("res{r}.norm1"))?;
        let y = tape.relu(y)?;
        let y = tape.conv2d(y, net.var(&format!("res{r}.conv2.weight")), None, 1, 1)?;
        let y = net.norm(tape, y, &format!("res{r}.norm2"))?;
        h = tape.add(h, y)?;
    }
    for i in 0..2 {
        let y = tape.conv_transpose2d(h, net.var(&format!("up{i}.weight")), None, 2, 1)?;
        let y = net.norm(tape, y, &format!("up{i}.norm"))?;
        h = tape.relu(y)?;
    }
    let y = tape.conv2d(h, net.var("out.weight"), net.opt_var("out.bias"), 1, 3)?;
    tape.tanh(y)
}

#[cfg(test)]
mod tests {
    use super::super::{init_params, Architecture, FrameMap};
    use super::*;
    use crate::tensor::Tensor;

    /// Independent per-layer count: conv kernels plus two affine values per
    /// normalised channel, plus the output bias.
    fn hand_count(c: usize, b: usize, blocks: usize) -> usize {
        let conv = |o: usize, i: usize, k: usize| o * i * k * k;
        let stem = conv(b, c, 7) + 2 * b;
        let down = conv(2 * b, b, 3) + 2 * 2 * b + conv(4 * b, 2 * b, 3) + 2 * 4 * b;
        let res = blocks * 2 * (conv(4 * b, 4 * b, 3) + 2 * 4 * b);
        let up = conv(4 * b, 2 * b, 4) + 2 * 2 * b + conv(2 * b, b, 4) + 2 * b;
        let head = conv(c, b, 7) + c;
        stem + down + res + up + head
    }

    #[test]
    fn default_parameter_count() {
        let arch = Architecture::Generator(GeneratorConfig::default());
        assert_eq!(hand_count(3, 64, 6), 8_128_131);
        assert_eq!(arch.param_count(), 8_128_131);
    }

    #[test]
    fn output_shape_matches_input_and_is_bounded() {
        for size in [32, 64, 128] {
            let cfg = GeneratorConfig {
                input_channels: 3,
                base_width: 2,
                n_residual_blocks: 1,
                image_size: size,
            };
            let p = init_params::<f32>(&Architecture::Generator(cfg), 0).unwrap();
            let mut tape = Tape::new();
            let net = p.bind(&mut tape, false);
            let x = tape.constant(Tensor::from_fn(&[1, 3, size, size], |i| ((i % 17) as f32 / 8.0) - 1.0).unwrap());
            let y = net.apply(&mut tape, x).unwrap();
            assert_eq!(tape.shape(y), &[1, 3, size, size]);
            assert!(tape.value(y).data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn image_size_mismatch_is_rejected() {
        let cfg = GeneratorConfig {
            input_channels: 3,
            base_width: 2,
            n_residual_blocks: 0,
            image_size: 16,
        };
        let p = init_params::<f32>(&Architecture::Generator(cfg), 0).unwrap();
        let mut tape = Tape::new();
        let net = p.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros(&[1, 3, 32, 32]).unwrap());
        assert!(net.apply(&mut tape, x).is_err());
    }

    #[test]
    fn image_size_must_divide_by_four() {
        let cfg = GeneratorConfig {
            image_size: 30,
            ..GeneratorConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
