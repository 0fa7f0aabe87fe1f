use std::sync::OnceLock;

use recyclegan::data::{generate_synthetic_domains, SceneTask, SyntheticDomains, SyntheticSceneConfig};
use recyclegan::eval::{oracle_image_score, train_oracle, Oracle, OracleConfig, ORACLE_QUALIFICATION};
use recyclegan::tensor::Tensor;

/// Frozen from a measurement of the default oracle on constant frames
/// (0.32 to 0.33 normalised mean IoU, about the score of all-background).
const CONSTANT_FRAME_BOUND: f64 = 0.36;
const TRUE_RENDER_TOLERANCE: f64 = 0.05;

fn setup() -> &'static (SyntheticDomains, Oracle) {
    static CELL: OnceLock<(SyntheticDomains, Oracle)> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = SyntheticSceneConfig {
            task: SceneTask::Labels,
            ..Default::default()
        };
        let d = generate_synthetic_domains(&cfg, 1, 2).unwrap();
        let o = train_oracle(&d.x, &OracleConfig::default()).unwrap();
        (d, o)
    })
}

fn targets(d: &SyntheticDomains) -> Vec<recyclegan::data::LabelMap> {
    let inv = d.gt_map.inverse();
    d.y.labels().unwrap().iter().map(|l| inv.apply_labels(l)).collect()
}

#[test]
fn oracle_generalises_to_a_held_out_stream() {
    let (d, o) = setup();
    assert!(o.train_iou >= ORACLE_QUALIFICATION, "{}", o.train_iou);
    let held = generate_synthetic_domains(d.scene.config(), 11, 12).unwrap();
    let iou = o.metrics(&held.x).unwrap().mean_iou;
    println!("held-out oracle IoU {iou:.4}");
    assert!(iou >= ORACLE_QUALIFICATION, "{iou}");
}

#[test]
fn true_rendering_scores_about_one() {
    let (d, o) = setup();
    let truth = |y: &Tensor<f32>| Ok(d.scene.render(&d.scene.decode_labels(y)?));
    let s = oracle_image_score(&truth, &d.y, &targets(d), &d.x, o).unwrap();
    println!("true render score {:.4} (generated IoU {:.4})", s.normalized, s.generated.mean_iou);
    assert!((s.normalized - 1.0).abs() <= TRUE_RENDER_TOLERANCE, "{}", s.normalized);
}

#[test]
fn constant_frames_score_near_chance() {
    let (d, o) = setup();
    let shape = d.x.frame_shape().unwrap().to_vec();
    let bg = d.scene.background().clone();
    for (name, frame) in [
        ("zero", Tensor::zeros(&shape).unwrap()),
        ("black", Tensor::full(&shape, -1.0f32).unwrap()),
        ("background", bg),
    ] {
        let g = |_: &Tensor<f32>| Ok(frame.clone());
        let s = oracle_image_score(&g, &d.y, &targets(d), &d.x, o).unwrap();
        println!("constant {name} score {:.4}", s.normalized);
        assert!(s.normalized <= CONSTANT_FRAME_BOUND, "{name}: {}", s.normalized);
    }
}
