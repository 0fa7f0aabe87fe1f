//! Inference, segmentation metrics and the diagnostics computed on trained
//! generators.

mod metrics;
mod oracle;
mod report;

use crate::data::{DataError, GroundTruthMap, LabelMap, VideoStream};
use crate::error::Result;
use crate::nn::{FrameMap, FramePredictor, NetworkParams};
use crate::tensor::{Real, Tape, Tensor};

pub use metrics::{seg_metrics, ClassMetrics, ConfusionMatrix, SegMetrics};
pub use report::{comparison_table, evaluate, EvalOptions, EvalReport};
pub use oracle::{oracle_image_score, train_oracle, Oracle, OracleConfig, OracleScore, ORACLE_QUALIFICATION};

/// Floor on the input dispersion in [`DiversityReport::ratio`].
pub const DISPERSION_EPS: f64 = 1e-12;

/// A frame-to-frame map evaluated outside training: `[C,H,W]` in, `[C,H,W]`
/// out.
pub trait FrameFn<T> {
    fn map_frame(&self, frame: &Tensor<T>) -> Result<Tensor<T>>;
}

/// Next-frame prediction from two `[C,H,W]` frames.
pub trait PairFn<T> {
    fn predict_frame(&self, prev: &Tensor<T>, curr: &Tensor<T>) -> Result<Tensor<T>>;
}

impl<T, F> FrameFn<T> for F
where
    F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
{
    fn map_frame(&self, frame: &Tensor<T>) -> Result<Tensor<T>> {
        self(frame)
    }
}

impl<T, F> PairFn<T> for F
where
    F: Fn(&Tensor<T>, &Tensor<T>) -> Result<Tensor<T>>,
{
    fn predict_frame(&self, prev: &Tensor<T>, curr: &Tensor<T>) -> Result<Tensor<T>> {
        self(prev, curr)
    }
}

fn batched<T: Real>(frame: &Tensor<T>) -> Result<Tensor<T>> {
    let mut shape = vec![1];
    shape.extend_from_slice(frame.shape());
    Ok(frame.clone().reshape(&shape)?)
}

fn unbatched<T: Real>(out: &Tensor<T>) -> Tensor<T> {
    out.unstack().swap_remove(0)
}

impl<T: Real> FrameFn<T> for NetworkParams<T> {
    fn map_frame(&self, frame: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let net = self.bind(&mut tape, false);
        let x = tape.constant(batched(frame)?);
        let y = net.apply(&mut tape, x)?;
        Ok(unbatched(tape.value(y)))
    }
}

impl<T: Real> PairFn<T> for NetworkParams<T> {
    fn predict_frame(&self, prev: &Tensor<T>, curr: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let net = self.bind(&mut tape, false);
        let a = tape.constant(batched(prev)?);
        let b = tape.constant(batched(curr)?);
        let y = net.predict(&mut tape, a, b)?;
        Ok(unbatched(tape.value(y)))
    }
}

fn output_stream<T: Real>(input: &VideoStream<T>, frames: Vec<Tensor<T>>) -> Result<VideoStream<T>> {
    VideoStream::new(input.domain.other(), input.stream_id.clone(), frames)
}

/// `y_t = G(x_t)` for every frame.
pub fn infer_framewise<T: Real>(g: &impl FrameFn<T>, stream: &VideoStream<T>) -> Result<VideoStream<T>> {
    let frames = stream.frames().iter().map(|f| g.map_frame(f)).collect::<Result<Vec<_>>>()?;
    output_stream(stream, frames)
}

/// Framewise outputs averaged with the predictor's guess from the two
/// previous outputs; the first two frames are left framewise.
pub fn infer_smoothed<T: Real>(
    g: &impl FrameFn<T>,
    p: &impl PairFn<T>,
    stream: &VideoStream<T>,
) -> Result<VideoStream<T>> {
    if stream.len() < 3 {
        return Err(DataError::Invalid(format!(
            "smoothed inference needs at least 3 frames, stream {} has {}",
            stream.stream_id,
            stream.len()
        ))
        .into());
    }
    let framewise = infer_framewise(g, stream)?;
    let f = framewise.frames();
    let half = T::lit(0.5);
    let mut out = f[..2].to_vec();
    for t in 2..f.len() {
        let guess = p.predict_frame(&f[t - 2], &f[t - 1])?;
        out.push(f[t].zip_map(&guess, |a, b| (a + b) * half)?);
    }
    output_stream(stream, out)
}

fn mean_sq_diff<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let d = a.zip_map(b, |x, y| x - y)?;
    let ss: f64 = d.data().iter().map(|v| v.as_f64() * v.as_f64()).sum();
    Ok(ss / d.numel() as f64)
}

/// Mean over frames of the per-pixel squared error between `G(x_t)` and the
/// true counterpart `gt_map(x_t)`.
pub fn translation_mse<T: Real>(g: &impl FrameFn<T>, stream_x: &VideoStream<T>, gt_map: &GroundTruthMap) -> Result<f64> {
    if stream_x.is_empty() {
        return Err(DataError::Invalid("translation error of an empty stream".into()).into());
    }
    let mut total = 0.0;
    for x in stream_x.frames() {
        total += mean_sq_diff(&g.map_frame(x)?, &gt_map.apply(x)?)?;
    }
    Ok(total / stream_x.len() as f64)
}

/// Confusion matrix of decoded `G(x_t)` against the labels carried by the
/// stream.
pub fn label_confusion<T: Real>(
    g: &impl FrameFn<T>,
    stream: &VideoStream<T>,
    decode: impl Fn(&Tensor<T>) -> Result<LabelMap>,
) -> Result<ConfusionMatrix> {
    let labels = stream
        .labels()
        .ok_or_else(|| DataError::Invalid(format!("stream {} carries no labels", stream.stream_id)))?;
    let mut cm = ConfusionMatrix::new(stream.n_classes());
    for (x, gt) in stream.frames().iter().zip(labels) {
        cm.add(&decode(&g.map_frame(x)?)?, gt)?;
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiversityReport {
    pub input_dispersion: f64,
    pub output_dispersion: f64,
    pub ratio: f64,
}

/// `sample` uniformly spaced frame indices covering the whole stream.
pub fn spaced_indices(len: usize, sample: usize) -> Result<Vec<usize>> {
    if sample < 2 || sample > len {
        return Err(DataError::Invalid(format!("diversity sample of {sample} frames from a stream of {len}")).into());
    }
    Ok((0..sample)
        .map(|k| ((k * (len - 1)) as f64 / (sample - 1) as f64).round() as usize)
        .collect())
}

/// Mean pairwise L2 distance.
pub fn dispersion<T: Real>(frames: &[Tensor<T>]) -> Result<f64> {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..frames.len() {
        for j in i + 1..frames.len() {
            total += (mean_sq_diff(&frames[i], &frames[j])? * frames[i].numel() as f64).sqrt();
            pairs += 1;
        }
    }
    Ok(if pairs == 0 { 0.0 } else { total / pairs as f64 })
}

pub fn diversity_probe<T: Real>(g: &impl FrameFn<T>, stream: &VideoStream<T>, sample: usize) -> Result<DiversityReport> {
    let idx = spaced_indices(stream.len(), sample)?;
    let inputs: Vec<Tensor<T>> = idx.iter().map(|&i| stream.frame(i).clone()).collect();
    let outputs = inputs.iter().map(|x| g.map_frame(x)).collect::<Result<Vec<_>>>()?;
    let input_dispersion = dispersion(&inputs)?;
    let output_dispersion = dispersion(&outputs)?;
    Ok(DiversityReport {
        input_dispersion,
        output_dispersion,
        ratio: output_dispersion / input_dispersion.max(DISPERSION_EPS),
    })
}
