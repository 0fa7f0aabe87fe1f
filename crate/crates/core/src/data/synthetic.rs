//! Procedural two-domain scenes with an exactly known cross-domain map.
//!
//! Domain X: a static textured background, a bright disc drifting rightward
//! with a sinusoidal vertical bob, and a dark shadow offset down-right. The
//! horizontal motion wraps on a period slightly shorter than screen plus
//! object, so the object re-enters on the left while leaving on the right. Domain Y is an independently
//! animated X-style scene passed through the ground-truth map, either as an
//! image (channel permutation + mirror) or as a palette-coloured label
//! rendering of the same kind.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{invalid, Domain, LabelMap, Result, VideoStream};
use crate::tensor::{Real, Tensor};

pub const BACKGROUND: u8 = 0;
pub const OBJECT: u8 = 1;
pub const SHADOW: u8 = 2;

/// Label colours: background black, object yellow, shadow blue.
pub const PALETTE: [[f64; 3]; 3] = [[-1.0, -1.0, -1.0], [1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]];

const OBJECT_COLOR: [f32; 3] = [0.85, 0.55, -0.45];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneTask {
    /// Y is an image of the same kind as X.
    Images,
    /// Y is the palette rendering of a scene's labels.
    Labels,
}

impl SceneTask {
    pub fn tag(self) -> &'static str {
        match self {
            SceneTask::Images => "images",
            SceneTask::Labels => "labels",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "images" => Some(SceneTask::Images),
            "labels" => Some(SceneTask::Labels),
            _ => None,
        }
    }
}

/// Frame-level map X → Y: output channel `c` is input channel
/// `permutation[c]`, optionally mirrored left-right.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroundTruthMap {
    pub permutation: [usize; 3],
    pub mirror: bool,
}

impl Default for GroundTruthMap {
    fn default() -> Self {
        Self {
            permutation: [2, 0, 1],
            mirror: false,
        }
    }
}

impl GroundTruthMap {
    pub fn identity() -> Self {
        Self {
            permutation: [0, 1, 2],
            mirror: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = [false; 3];
        for &p in &self.permutation {
            if p >= 3 || seen[p] {
                return Err(invalid(format!("{:?} is not a permutation of 0,1,2", self.permutation)));
            }
            seen[p] = true;
        }
        Ok(())
    }

    pub fn inverse(&self) -> Self {
        let mut inv = [0; 3];
        for (c, &p) in self.permutation.iter().enumerate() {
            inv[p] = c;
        }
        Self {
            permutation: inv,
            mirror: self.mirror,
        }
    }

    /// Applies the map to a `[3,H,W]` frame or a `[N,3,H,W]` batch.
    pub fn apply<T: Real>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, h, w) = match *x.shape() {
            [c, h, w] => (1, c, h, w),
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(invalid(format!("ground-truth map needs [3,H,W] frames, got {:?}", x.shape()))),
        };
        if c != 3 {
            return Err(invalid(format!("ground-truth map needs 3 channels, got {c}")));
        }
        let src = x.data();
        let mut out = vec![T::zero(); src.len()];
        for b in 0..n {
            for (oc, &ic) in self.permutation.iter().enumerate() {
                let (ob, ib) = ((b * 3 + oc) * h * w, (b * 3 + ic) * h * w);
                for r in 0..h {
                    for col in 0..w {
                        let sc = if self.mirror { w - 1 - col } else { col };
                        out[ob + r * w + col] = src[ib + r * w + sc];
                    }
                }
            }
        }
        Ok(Tensor::new(x.shape(), out)?)
    }

    pub fn apply_labels(&self, labels: &LabelMap) -> LabelMap {
        if self.mirror {
            labels.mirrored()
        } else {
            labels.clone()
        }
    }

    /// `"2,0,1;mirror"` or `"0,1,2;plain"`.
    pub fn describe(&self) -> String {
        let [a, b, c] = self.permutation;
        format!("{a},{b},{c};{}", if self.mirror { "mirror" } else { "plain" })
    }

    pub fn parse(s: &str) -> Result<Self> {
        let bad = || invalid(format!("bad ground-truth map descriptor {s:?}"));
        let (perm, flip) = s.split_once(';').ok_or_else(bad)?;
        let p: Vec<usize> = perm
            .split(',')
            .map(|v| v.trim().parse().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        let permutation: [usize; 3] = p.try_into().map_err(|_| bad())?;
        let mirror = match flip.trim() {
            "mirror" => true,
            "plain" => false,
            _ => return Err(bad()),
        };
        let m = Self { permutation, mirror };
        m.validate()?;
        Ok(m)
    }
}

/// Palette rendering of a label map as a `[3,H,W]` frame.
pub fn palette_frame<T: Real>(labels: &LabelMap) -> Tensor<T> {
    let hw = labels.height * labels.width;
    let mut data = vec![T::zero(); 3 * hw];
    for (i, &id) in labels.ids.iter().enumerate() {
        let color = PALETTE[id as usize % PALETTE.len()];
        for c in 0..3 {
            data[c * hw + i] = T::lit(color[c]);
        }
    }
    Tensor::new(&[3, labels.height, labels.width], data).expect("palette frame shape")
}

/// Nearest palette colour per pixel of a `[3,H,W]` frame.
pub fn decode_palette<T: Real>(frame: &Tensor<T>) -> Result<LabelMap> {
    let [c, h, w] = *frame.shape() else {
        return Err(invalid(format!("palette decoding needs a [3,H,W] frame, got {:?}", frame.shape())));
    };
    if c != 3 {
        return Err(invalid(format!("palette decoding needs 3 channels, got {c}")));
    }
    let hw = h * w;
    let d = frame.data();
    let ids = (0..hw)
        .map(|i| {
            let px = [d[i].as_f64(), d[hw + i].as_f64(), d[2 * hw + i].as_f64()];
            let dist = |p: &[f64; 3]| (0..3).map(|k| (px[k] - p[k]).powi(2)).sum::<f64>();
            let mut best = 0;
            for (k, p) in PALETTE.iter().enumerate().skip(1) {
                if dist(p) < dist(&PALETTE[best]) {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new(h, w, ids)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSceneConfig {
    pub image_size: usize,
    pub n_classes: usize,
    /// Inertia of the horizontal velocity in `[0, 1)`; higher is smoother.
    pub smoothness: f64,
    /// Mean horizontal drift in pixels per frame.
    pub speed: f64,
    pub texture_seed: u64,
    pub gt_map: GroundTruthMap,
    pub length: usize,
    pub task: SceneTask,
}

impl Default for SyntheticSceneConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            n_classes: 3,
            smoothness: 0.9,
            speed: 0.75,
            texture_seed: 7,
            gt_map: GroundTruthMap::default(),
            length: 500,
            task: SceneTask::Images,
        }
    }
}

impl SyntheticSceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.length < 3 {
            return Err(invalid(format!("stream length {} < 3", self.length)));
        }
        if self.image_size < 8 || !self.image_size.is_multiple_of(4) {
            return Err(invalid(format!(
                "image_size {} must be a multiple of 4 and at least 8",
                self.image_size
            )));
        }
        if self.n_classes != 3 {
            return Err(invalid(format!(
                "the synthetic scene has 3 classes (background, object, shadow), got n_classes={}",
                self.n_classes
            )));
        }
        if !(0.0..1.0).contains(&self.smoothness) {
            return Err(invalid(format!("smoothness {} outside [0, 1)", self.smoothness)));
        }
        if !(self.speed.is_finite() && self.speed > 0.0 && self.speed <= 4.0) {
            return Err(invalid(format!("speed {} outside (0, 4]", self.speed)));
        }
        self.gt_map.validate()
    }

    fn radius(&self) -> f64 {
        0.15 * self.image_size as f64
    }

    fn shadow_offset(&self) -> f64 {
        (0.5 * self.radius()).round().max(1.0)
    }

    /// Horizontal wrap period; copies of the object are drawn one period apart.
    fn period(&self) -> f64 {
        self.image_size as f64 + 2.0 * self.radius() + self.shadow_offset() - 3.0
    }

    fn max_amplitude(&self) -> f64 {
        0.25 * self.image_size as f64
    }

    const MAX_OMEGA: f64 = 0.12;

    /// Largest per-frame displacement of the object.
    pub fn max_step(&self) -> f64 {
        (1.6 * self.speed).hypot(self.max_amplitude() * Self::MAX_OMEGA)
    }

    /// Upper bound on the mean absolute difference between consecutive
    /// frames: two shapes sweep at most `2(2r+3)(d+3)` pixels each and
    /// every value changes by at most 2.
    pub fn frame_delta_bound(&self) -> f64 {
        let r = self.radius();
        let swept = 2.0 * (2.0 * r + 3.0) * (self.max_step() + 3.0);
        let area = (self.image_size * self.image_size) as f64;
        (2.0 * 2.0 * swept / area).min(2.0)
    }
}

/// Static parts of the scene: the background texture and the object
/// geometry shared by both domains.
#[derive(Debug, Clone)]
pub struct Scene {
    config: SyntheticSceneConfig,
    background: Tensor<f32>,
}

impl Scene {
    pub fn new(config: SyntheticSceneConfig) -> Result<Self> {
        config.validate()?;
        let s = config.image_size;
        let mut rng = ChaCha8Rng::seed_from_u64(config.texture_seed);
        let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.35..0.05));
        let waves: Vec<(f64, f64, f64, [f64; 3])> = (0..3)
            .map(|_| {
                let fx = rng.gen_range(1..=3) as f64;
                let fy = rng.gen_range(0..=3) as f64;
                let phase = rng.gen_range(0.0..TAU);
                let w: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.12..0.12));
                (fx, fy, phase, w)
            })
            .collect();
        let background = Tensor::from_fn(&[3, s, s], |i| {
            let (c, r, col) = (i / (s * s), (i / s) % s, i % s);
            let (u, v) = (col as f64 / s as f64, r as f64 / s as f64);
            let mut val = base[c];
            for (fx, fy, phase, w) in &waves {
                val += w[c] * (TAU * (fx * u + fy * v) + phase).sin();
            }
            val.clamp(-1.0, 1.0) as f32
        })
        .expect("background shape");
        Ok(Self { config, background })
    }

    pub fn config(&self) -> &SyntheticSceneConfig {
        &self.config
    }

    pub fn background(&self) -> &Tensor<f32> {
        &self.background
    }

    /// Label map with the object centred at `(cx, cy)` (pixel units).
    pub fn labels_at(&self, cx: f64, cy: f64) -> LabelMap {
        let s = self.config.image_size;
        let r2 = self.config.radius().powi(2);
        let off = self.config.shadow_offset();
        let period = self.config.period();
        let mut ids = vec![BACKGROUND; s * s];
        for row in 0..s {
            for col in 0..s {
                let (px, py) = (col as f64 + 0.5, row as f64 + 0.5);
                let mut id = BACKGROUND;
                for x in [cx - period, cx, cx + period] {
                    if (px - x).powi(2) + (py - cy).powi(2) <= r2 {
                        id = OBJECT;
                        break;
                    } else if (px - x - off).powi(2) + (py - cy - off).powi(2) <= r2 {
                        id = SHADOW;
                    }
                }
                ids[row * s + col] = id;
            }
        }
        LabelMap {
            height: s,
            width: s,
            ids,
        }
    }

    /// Hard-edged X-domain image of a label map.
    pub fn render(&self, labels: &LabelMap) -> Tensor<f32> {
        let hw = labels.height * labels.width;
        let alpha = |id: u8| labels.ids.iter().map(|&l| if l == id { 1.0 } else { 0.0 }).collect::<Vec<f32>>();
        self.compose(&alpha(OBJECT), &alpha(SHADOW), hw)
    }

    /// Anti-aliased X-domain frame with the object centred at `(cx, cy)`:
    /// coverage falls off linearly over one pixel around each edge.
    pub fn frame_at(&self, cx: f64, cy: f64) -> Tensor<f32> {
        let s = self.config.image_size;
        let r = self.config.radius();
        let off = self.config.shadow_offset();
        let period = self.config.period();
        let (mut obj, mut shadow) = (vec![0.0f32; s * s], vec![0.0f32; s * s]);
        for row in 0..s {
            for col in 0..s {
                let (px, py) = (col as f64 + 0.5, row as f64 + 0.5);
                let cover = |x: f64, y: f64| (r - (px - x).hypot(py - y) + 0.5).clamp(0.0, 1.0);
                let (mut a, mut b) = (0.0f64, 0.0f64);
                for x in [cx - period, cx, cx + period] {
                    a = a.max(cover(x, cy));
                    b = b.max(cover(x + off, cy + off));
                }
                obj[row * s + col] = a as f32;
                shadow[row * s + col] = b as f32;
            }
        }
        self.compose(&obj, &shadow, s * s)
    }

    fn compose(&self, obj: &[f32], shadow: &[f32], hw: usize) -> Tensor<f32> {
        let bg = self.background.data();
        let mut data = bg.to_vec();
        for c in 0..3 {
            for i in 0..hw {
                let under = bg[c * hw + i];
                let shaded = under + shadow[i] * (0.4 * under - 0.55 - under);
                data[c * hw + i] = shaded + obj[i] * (OBJECT_COLOR[c] - shaded);
            }
        }
        Tensor::new(self.background.shape(), data).expect("render shape")
    }

    /// The true Y counterpart of an X frame with the given labels.
    pub fn counterpart(&self, frame: &Tensor<f32>, labels: &LabelMap) -> Result<Tensor<f32>> {
        match self.config.task {
            SceneTask::Images => self.config.gt_map.apply(frame),
            SceneTask::Labels => self.config.gt_map.apply(&palette_frame::<f32>(labels)),
        }
    }

    /// Decodes a Y-domain frame of the labels task back to X-orientation
    /// class ids.
    pub fn decode_labels<T: Real>(&self, y: &Tensor<T>) -> Result<LabelMap> {
        decode_palette(&self.config.gt_map.inverse().apply(y)?)
    }

    /// Object centre per frame for one animation seed.
    pub fn trajectory(&self, seed: u64, length: usize) -> Vec<(f64, f64)> {
        let cfg = &self.config;
        let s = cfg.image_size as f64;
        let (r, off) = (cfg.radius(), cfg.shadow_offset());
        let period = cfg.period();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = rng.gen_range(0.0..period);
        let amp = rng.gen_range(0.1..0.25) * s;
        let omega = rng.gen_range(0.04..SyntheticSceneConfig::MAX_OMEGA);
        let phase = rng.gen_range(0.0..TAU);
        let mut v = cfg.speed;
        (0..length)
            .map(|t| {
                if t > 0 {
                    let target = rng.gen_range(0.4..1.6) * cfg.speed;
                    v = cfg.smoothness * v + (1.0 - cfg.smoothness) * target;
                    x = (x + v) % period;
                }
                let cx = x - (r + off);
                let cy = 0.5 * s - 0.5 * off + amp * (omega * t as f64 + phase).sin();
                (cx, cy)
            })
            .collect()
    }

    /// Renders the X-style scene for one animation seed.
    pub fn animate(&self, seed: u64, length: usize) -> (Vec<Tensor<f32>>, Vec<LabelMap>) {
        self.trajectory(seed, length)
            .into_iter()
            .map(|(cx, cy)| (self.frame_at(cx, cy), self.labels_at(cx, cy)))
            .unzip()
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDomains {
    pub x: VideoStream<f32>,
    pub y: VideoStream<f32>,
    pub gt_map: GroundTruthMap,
    pub scene: Scene,
}

/// Builds the two unpaired streams. X carries its labels; Y carries the
/// labels of its own underlying scene in Y orientation.
pub fn generate_synthetic_domains(config: &SyntheticSceneConfig, seed_x: u64, seed_y: u64) -> Result<SyntheticDomains> {
    if seed_x == seed_y {
        return Err(invalid(format!("seed_x and seed_y must differ (both {seed_x}) so the streams are unpaired")));
    }
    let scene = Scene::new(*config)?;
    let (frames_x, labels_x) = scene.animate(seed_x, config.length);
    let (frames_src, labels_src) = scene.animate(seed_y, config.length);
    let frames_y = frames_src
        .iter()
        .zip(&labels_src)
        .map(|(f, l)| scene.counterpart(f, l))
        .collect::<Result<Vec<_>>>()?;
    let labels_y = labels_src.iter().map(|l| config.gt_map.apply_labels(l)).collect();
    let x = VideoStream::new(Domain::X, format!("s{seed_x}"), frames_x)?.with_labels(labels_x, config.n_classes)?;
    let y = VideoStream::new(Domain::Y, format!("s{seed_y}"), frames_y)?.with_labels(labels_y, config.n_classes)?;
    Ok(SyntheticDomains {
        x,
        y,
        gt_map: config.gt_map,
        scene,
    })
}
