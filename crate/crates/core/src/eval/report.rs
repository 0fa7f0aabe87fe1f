use std::fmt::Write as _;

use super::{
    diversity_probe, label_confusion, FrameFn, oracle_image_score, translation_mse, DiversityReport, Oracle, OracleScore,
    SegMetrics,
};
use crate::data::{DataError, SceneTask, Scene, VideoStream};
use crate::error::Result;
use crate::train::ModelSet;

/// Everything measured for one trained model on one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub label: String,
    pub step: u64,
    pub task: SceneTask,
    /// Image-to-labels segmentation of decoded `G_Y(x_t)` (labels task).
    pub segmentation: Option<SegMetrics>,
    /// Labels-to-image quality of `G_X(y_t)` judged by the oracle (labels task).
    pub oracle: Option<OracleScore>,
    /// `G_Y(x_t)` against the true counterpart (images task).
    pub translation_mse: Option<f64>,
    pub diversity: DiversityReport,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub diversity_sample: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { diversity_sample: 8 }
    }
}

/// Evaluates the generators of `nets` on a synthetic dataset. The oracle is
/// only consulted for the labels task.
#[allow(clippy::too_many_arguments)]
pub fn evaluate<G: FrameFn<f32>>(
    label: &str,
    step: u64,
    nets: &ModelSet<G>,
    x: &VideoStream<f32>,
    y: &VideoStream<f32>,
    scene: &Scene,
    oracle: Option<&Oracle>,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let task = scene.config().task;
    let gt_map = scene.config().gt_map;
    let (mut segmentation, mut oracle_score, mut mse) = (None, None, None);
    match task {
        SceneTask::Labels => {
            if x.labels().is_none() {
                return Err(DataError::Invalid(format!(
                    "image-to-labels evaluation needs labels on stream {}/{}",
                    x.domain, x.stream_id
                ))
                .into());
            }
            segmentation = Some(label_confusion(&nets.g_y, x, |f| scene.decode_labels(f))?.metrics());
            if let Some(o) = oracle {
                let y_labels = y.labels().ok_or_else(|| {
                    DataError::Invalid(format!("labels-to-image evaluation needs labels on stream y/{}", y.stream_id))
                })?;
                let inverse = gt_map.inverse();
                let targets: Vec<_> = y_labels.iter().map(|l| inverse.apply_labels(l)).collect();
                oracle_score = Some(oracle_image_score(&nets.g_x, y, &targets, x, o)?);
            }
        }
        SceneTask::Images => mse = Some(translation_mse(&nets.g_y, x, &gt_map)?),
    }
    let sample = opts.diversity_sample.min(x.len());
    Ok(EvalReport {
        label: label.to_string(),
        step,
        task,
        segmentation,
        oracle: oracle_score,
        translation_mse: mse,
        diversity: diversity_probe(&nets.g_y, x, sample)?,
    })
}

fn num(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:.6}"))
}

impl EvalReport {
    /// Metric names and values in a fixed order; absent metrics are empty.
    pub fn fields(&self) -> Vec<(&'static str, String)> {
        let seg = self.segmentation.as_ref();
        let orc = self.oracle.as_ref();
        vec![
            ("step", self.step.to_string()),
            ("task", self.task.tag().to_string()),
            ("mean_pixel_accuracy", num(seg.map(|s| s.mean_pixel_accuracy))),
            ("average_class_accuracy", num(seg.map(|s| s.average_class_accuracy))),
            ("mean_iou", num(seg.map(|s| s.mean_iou))),
            ("oracle_score", num(orc.map(|o| o.normalized))),
            ("oracle_generated_iou", num(orc.map(|o| o.generated.mean_iou))),
            ("oracle_real_iou", num(orc.map(|o| o.real.mean_iou))),
            ("translation_mse", num(self.translation_mse)),
            ("input_dispersion", num(Some(self.diversity.input_dispersion))),
            ("output_dispersion", num(Some(self.diversity.output_dispersion))),
            ("diversity_ratio", num(Some(self.diversity.ratio))),
        ]
    }

    pub fn to_json_like(&self) -> String {
        let mut s = String::from("{\n");
        let _ = writeln!(s, "  \"label\": {:?},", self.label);
        let fields = self.fields();
        for (i, (k, v)) in fields.iter().enumerate() {
            let v = if v.is_empty() {
                "null".to_string()
            } else if v.parse::<f64>().is_ok() {
                v.clone()
            } else {
                format!("{v:?}")
            };
            let comma = if i + 1 < fields.len() { "," } else { "" };
            let _ = writeln!(s, "  \"{k}\": {v}{comma}");
        }
        if let Some(seg) = &self.segmentation {
            for c in &seg.per_class {
                let _ = writeln!(s, "  // class {}: support {} accuracy {} iou {}", c.class, c.support, num(c.accuracy), num(c.iou));
            }
        }
        s.push_str("}\n");
        s
    }

    pub fn csv_header() -> String {
        let names: Vec<&str> = Self::placeholder().fields().into_iter().map(|(k, _)| k).collect();
        format!("label,{}", names.join(","))
    }

    pub fn csv_row(&self) -> String {
        let vals: Vec<String> = self.fields().into_iter().map(|(_, v)| v).collect();
        format!("{},{}", self.label, vals.join(","))
    }

    fn placeholder() -> Self {
        Self {
            label: String::new(),
            step: 0,
            task: SceneTask::Images,
            segmentation: None,
            oracle: None,
            translation_mse: None,
            diversity: DiversityReport {
                input_dispersion: 0.0,
                output_dispersion: 0.0,
                ratio: 0.0,
            },
        }
    }
}

/// One row per metric, one column per report.
pub fn comparison_table(reports: &[EvalReport]) -> String {
    let widths: Vec<usize> = reports.iter().map(|r| r.label.len().max(16)).collect();
    let mut s = format!("{:<24}", "metric");
    for (r, w) in reports.iter().zip(&widths) {
        let _ = write!(s, " {:>w$}", r.label);
    }
    s.push('\n');
    let columns: Vec<_> = reports.iter().map(EvalReport::fields).collect();
    if let Some(first) = columns.first() {
        for (i, (name, _)) in first.iter().enumerate() {
            let _ = write!(s, "{name:<24}");
            for (c, w) in columns.iter().zip(&widths) {
                let v = if c[i].1.is_empty() { "-" } else { &c[i].1 };
                let _ = write!(s, " {v:>w$}");
            }
            s.push('\n');
        }
    }
    s
}
