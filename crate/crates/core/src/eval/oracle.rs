use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{batched, ConfusionMatrix, FrameFn, SegMetrics};
use crate::data::{DataError, LabelMap, VideoStream};
use crate::error::{Error, Result};
use crate::nn::{init_params, segmenter_forward, Architecture, NetworkParams, UNetConfig};
use crate::tensor::{Real, Tape, Tensor};
use crate::train::{adam_update, collect_grads, AdamConfig, AdamState};

/// Mean IoU on real frames an oracle must reach before its scores are
/// trusted.
pub const ORACLE_QUALIFICATION: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleConfig {
    pub base_width: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            base_width: 8,
            steps: 1200,
            batch_size: 4,
            lr: 2e-3,
            seed: 0,
        }
    }
}

/// A segmenter trained on real frames and their labels, used as a fixed
/// judge of generated images.
#[derive(Debug, Clone, PartialEq)]
pub struct Oracle {
    pub params: NetworkParams<f32>,
    pub n_classes: usize,
    /// Mean IoU on the training stream after fitting.
    pub train_iou: f64,
}

impl Oracle {
    pub fn segment(&self, frame: &Tensor<f32>) -> Result<LabelMap> {
        let mut tape = Tape::new();
        let net = self.params.bind(&mut tape, false);
        let x = tape.constant(batched(frame)?);
        let logits = segmenter_forward(&mut tape, &net, x)?;
        argmax_labels(tape.value(logits))
    }

    pub fn confusion(&self, frames: &[Tensor<f32>], labels: &[LabelMap]) -> Result<ConfusionMatrix> {
        if frames.len() != labels.len() {
            return Err(DataError::Invalid(format!("{} frames for {} label maps", frames.len(), labels.len())).into());
        }
        let mut cm = ConfusionMatrix::new(self.n_classes);
        for (f, l) in frames.iter().zip(labels) {
            cm.add(&self.segment(f)?, l)?;
        }
        Ok(cm)
    }

    pub fn metrics(&self, stream: &VideoStream<f32>) -> Result<SegMetrics> {
        let labels = stream
            .labels()
            .ok_or_else(|| DataError::Invalid(format!("stream {} carries no labels", stream.stream_id)))?;
        Ok(self.confusion(stream.frames(), labels)?.metrics())
    }
}

/// Per-pixel argmax of `[1,K,H,W]` logits.
fn argmax_labels<T: Real>(logits: &Tensor<T>) -> Result<LabelMap> {
    let [_, k, h, w] = logits.dims4("argmax_labels")?;
    let d = logits.data();
    let ids = (0..h * w)
        .map(|p| {
            (0..k)
                .max_by(|&a, &b| d[a * h * w + p].as_f64().total_cmp(&d[b * h * w + p].as_f64()))
                .unwrap_or(0) as u8
        })
        .collect();
    LabelMap::new(h, w, ids)
}

/// Fits a segmenter to a labelled stream with per-pixel cross-entropy.
pub fn train_oracle(stream: &VideoStream<f32>, cfg: &OracleConfig) -> Result<Oracle> {
    let labels = stream
        .labels()
        .ok_or_else(|| DataError::Invalid(format!("stream {} carries no labels", stream.stream_id)))?;
    let shape = stream
        .frame_shape()
        .ok_or_else(|| DataError::Invalid("oracle training stream is empty".into()))?
        .to_vec();
    if shape[1] != shape[2] {
        return Err(Error::Config(format!("oracle needs square frames, got {}x{}", shape[1], shape[2])));
    }
    if cfg.steps == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("oracle steps and batch_size must be positive".into()));
    }
    let n_classes = stream.n_classes();
    let arch = Architecture::UNet(UNetConfig::segmenter(shape[0], n_classes, cfg.base_width, shape[1])?);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params: NetworkParams<f32> = init_params(&arch, rng.gen())?;
    let mut adam = AdamState::new(&params);
    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
    for _ in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.gen_range(0..stream.len())).collect();
        let refs: Vec<&Tensor<f32>> = idx.iter().map(|&i| stream.frame(i)).collect();
        let targets: Vec<usize> = idx
            .iter()
            .flat_map(|&i| labels[i].ids.iter().map(|&c| c as usize))
            .collect();
        let mut tape = Tape::new();
        let net = params.bind(&mut tape, true);
        let x = tape.constant(Tensor::stack(&refs)?);
        let logits = segmenter_forward(&mut tape, &net, x)?;
        let loss = tape.softmax_cross_entropy(logits, &targets)?;
        tape.backward(loss)?;
        let grads = collect_grads(&tape, &net);
        adam_update("oracle", &mut params, &grads, &mut adam, &adam_cfg)?;
    }
    let mut oracle = Oracle {
        params,
        n_classes,
        train_iou: 0.0,
    };
    oracle.train_iou = oracle.metrics(stream)?.mean_iou;
    Ok(oracle)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleScore {
    pub generated: SegMetrics,
    pub real: SegMetrics,
    /// Generated mean IoU divided by real mean IoU.
    pub normalized: f64,
}

/// Scores a labels-to-image generator: the oracle segments `G(input_t)` and
/// is compared with `targets[t]`, then normalised by the oracle's own IoU on
/// the real labelled frames of `real`.
pub fn oracle_image_score(
    g: &impl FrameFn<f32>,
    inputs: &VideoStream<f32>,
    targets: &[LabelMap],
    real: &VideoStream<f32>,
    oracle: &Oracle,
) -> Result<OracleScore> {
    let real_metrics = oracle.metrics(real)?;
    if real_metrics.mean_iou < ORACLE_QUALIFICATION {
        return Err(Error::Config(format!(
            "oracle reaches mean IoU {:.3} on real frames, below the qualification threshold {ORACLE_QUALIFICATION}",
            real_metrics.mean_iou
        )));
    }
    let generated = inputs.frames().iter().map(|f| g.map_frame(f)).collect::<Result<Vec<_>>>()?;
    let gen_metrics = oracle.confusion(&generated, targets)?.metrics();
    Ok(OracleScore {
        normalized: gen_metrics.mean_iou / real_metrics.mean_iou,
        generated: gen_metrics,
        real: real_metrics,
    })
}
