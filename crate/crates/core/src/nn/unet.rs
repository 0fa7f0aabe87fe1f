//! Encoder-decoder with skip connections (4×4 stride-2 convs down,
//! 4×4 stride-2 transposed convs up). Depth is chosen so the bottleneck is
//! 2×2 at the configured image size.

use super::{check_image, BoundNet, ParamSpec, LEAKY_SLOPE};
use crate::error::{Error, Result};
use crate::tensor::{self, Real, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputActivation {
    Tanh,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    pub depth: usize,
    pub image_size: usize,
    pub output: OutputActivation,
}

impl UNetConfig {
    /// Largest depth whose bottleneck is still at least 2×2.
    pub fn auto_depth(image_size: usize) -> Result<usize> {
        let mut depth = 0;
        let mut size = image_size;
        while size.is_multiple_of(2) && size / 2 >= 2 {
            size /= 2;
            depth += 1;
        }
        if depth == 0 {
            return Err(Error::Config(format!("image size {image_size} is too small for a U-Net")));
        }
        Ok(depth)
    }

    /// Next-frame predictor over two `channels`-channel frames.
    pub fn predictor(channels: usize, base_width: usize, image_size: usize) -> Result<Self> {
        Ok(Self {
            in_channels: 2 * channels,
            out_channels: channels,
            base_width,
            depth: Self::auto_depth(image_size)?,
            image_size,
            output: OutputActivation::Tanh,
        })
    }

    /// Per-pixel classifier producing `n_classes` logits.
    pub fn segmenter(channels: usize, n_classes: usize, base_width: usize, image_size: usize) -> Result<Self> {
        Ok(Self {
            in_channels: channels,
            out_channels: n_classes,
            base_width,
            depth: Self::auto_depth(image_size)?,
            image_size,
            output: OutputActivation::Identity,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.base_width == 0 || self.depth == 0 {
            return Err(Error::Config("u-net channels, width and depth must be positive".into()));
        }
        if !self.image_size.is_multiple_of(1 << self.depth) {
            return Err(Error::Config(format!(
                "u-net depth {} needs image_size divisible by {}, got {}",
                self.depth,
                1 << self.depth,
                self.image_size
            )));
        }
        Ok(())
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_width << level.min(3)
    }

    pub(crate) fn param_specs(&self) -> Vec<ParamSpec> {
        let d = self.depth;
        let mut specs = Vec::new();
        for i in 0..d {
            let cin = if i == 0 { self.in_channels } else { self.width(i - 1) };
            let cout = self.width(i);
            specs.push(ParamSpec::kernel(format!("down{i}.weight"), [cout, cin, 4, 4]));
            if i == 0 || i == d - 1 {
                specs.push(ParamSpec::bias(format!("down{i}.bias"), cout));
            } else {
                specs.extend(ParamSpec::norm(&format!("down{i}.norm"), cout));
            }
        }
        for i in (0..d).rev() {
            let cin = if i == d - 1 { self.width(i) } else { 2 * self.width(i) };
            if i == 0 {
                specs.push(ParamSpec::kernel("up0.weight", [cin, self.out_channels, 4, 4]));
                specs.push(ParamSpec::bias("up0.bias", self.out_channels));
            } else {
                let cout = self.width(i - 1);
                specs.push(ParamSpec::kernel(format!("up{i}.weight"), [cin, cout, 4, 4]));
                specs.extend(ParamSpec::norm(&format!("up{i}.norm"), cout));
            }
        }
        specs
    }
}

pub(super) fn forward<T: Real>(
    tape: &mut Tape<T>,
    net: &BoundNet,
    cfg: &UNetConfig,
    x: Var,
    zero_bottleneck: bool,
) -> tensor::Result<Var> {
    check_image(tape, "unet_forward", x, cfg.in_channels, Some(cfg.image_size))?;
    let d = cfg.depth;
    let slope = T::lit(LEAKY_SLOPE);
    let mut skips = Vec::with_capacity(d);
    let mut h = x;
    for i in 0..d {
        let input = if i == 0 { h } else { tape.leaky_relu(h, slope)? };
        let mut y = tape.conv2d(input, net.var(&format!("down{i}.weight")), net.opt_var(&format!("down{i}.bias")), 2, 1)?;
        if i > 0 && i < d - 1 {
            y = net.norm(tape, y, &format!("down{i}.norm"))?;
        }
        skips.push(y);
        h = y;
    }
    if zero_bottleneck {
        h = tape.scale(h, T::zero())?;
    }
    for i in (0..d).rev() {
        let input = if i == d - 1 {
            h
        } else {
            tape.concat_channels(&[skips[i], h])?
        };
        let input = tape.relu(input)?;
        let y = tape.conv_transpose2d(input, net.var(&format!("up{i}.weight")), net.opt_var(&format!("up{i}.bias")), 2, 1)?;
        h = if i == 0 {
            y
        } else {
            net.norm(tape, y, &format!("up{i}.norm"))?
        };
    }
    match cfg.output {
        OutputActivation::Tanh => tape.tanh(h),
        OutputActivation::Identity => Ok(h),
    }
}

#[cfg(test)]
mod tests {
    use super::super::{init_params, predictor_forward, segmenter_forward, Architecture, FramePredictor};
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn depth_scales_with_image_size() {
        assert_eq!(UNetConfig::auto_depth(32).unwrap(), 4);
        assert_eq!(UNetConfig::auto_depth(64).unwrap(), 5);
        assert_eq!(UNetConfig::auto_depth(256).unwrap(), 7);
        assert_eq!(UNetConfig::auto_depth(4).unwrap(), 1);
        assert!(UNetConfig::auto_depth(3).is_err());
    }

    fn frames(tape: &mut Tape<f64>, size: usize, phase: f64) -> Var {
        tape.constant(Tensor::from_fn(&[1, 3, size, size], |i| ((i as f64 * 0.37 + phase).sin()) * 0.8).unwrap())
    }

    #[test]
    fn predictor_shapes_and_range() {
        let cfg = UNetConfig::predictor(3, 4, 16).unwrap();
        let p = init_params::<f64>(&Architecture::UNet(cfg), 2).unwrap();
        let mut tape = Tape::new();
        let net = p.bind(&mut tape, false);
        let a = frames(&mut tape, 16, 0.0);
        let b = frames(&mut tape, 16, 0.5);
        let y = net.predict(&mut tape, a, b).unwrap();
        assert_eq!(tape.shape(y), &[1, 3, 16, 16]);
        assert!(tape.value(y).data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let odd = tape.constant(Tensor::zeros(&[1, 3, 8, 8]).unwrap());
        assert!(net.predict(&mut tape, a, odd).is_err());
    }

    #[test]
    fn skips_carry_signal_past_a_zeroed_bottleneck() {
        let cfg = UNetConfig::predictor(3, 4, 16).unwrap();
        let p = init_params::<f64>(&Architecture::UNet(cfg), 5).unwrap();
        let mut tape = Tape::new();
        let net = p.bind(&mut tape, false);
        let a = tape.param(Tensor::from_fn(&[1, 3, 16, 16], |i| (i as f64 * 0.11).cos() * 0.5).unwrap());
        let b = frames(&mut tape, 16, 1.0);
        let y = predictor_forward(&mut tape, &net, &cfg, a, b, true).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        let g = tape.grad(a).unwrap();
        assert!(g.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn segmenter_logits_keep_spatial_shape() {
        let cfg = UNetConfig::segmenter(3, 3, 4, 16).unwrap();
        let p = init_params::<f32>(&Architecture::UNet(cfg), 0).unwrap();
        let mut tape = Tape::new();
        let net = p.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros(&[1, 3, 16, 16]).unwrap());
        let y = segmenter_forward(&mut tape, &net, x).unwrap();
        assert_eq!(tape.shape(y), &[1, 3, 16, 16]);
        assert!(tape.value(y).is_finite());
    }
}
