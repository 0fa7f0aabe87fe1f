//! Ordered frame streams, the synthetic two-domain scene generator, frame
//! I/O and triplet sampling.

mod io;
mod synthetic;

use std::fmt;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::losses::TripletVars;
use crate::tensor::{Real, Tape, Tensor};

pub use io::{
    load_stream, read_manifest, read_pgm, read_ppm, save_stream, write_manifest, write_pgm, write_ppm, Manifest,
    ManifestEntry, MANIFEST_FILE,
};
pub use synthetic::{
    decode_palette, generate_synthetic_domains, palette_frame, GroundTruthMap, Scene, SceneTask, SyntheticDomains,
    SyntheticSceneConfig, PALETTE,
};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("no frames found in {}", .0.display())]
    NoFrames(PathBuf),
    #[error("{}: missing frame index {index}", dir.display())]
    Gap { dir: PathBuf, index: usize },
    #[error("{}: {detail}", path.display())]
    Corrupt { path: PathBuf, detail: String },
    #[error("{0}")]
    Invalid(String),
}

type Result<T> = std::result::Result<T, crate::Error>;

fn invalid(msg: impl Into<String>) -> crate::Error {
    DataError::Invalid(msg.into()).into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Domain {
    X,
    Y,
}

impl Domain {
    pub fn tag(self) -> &'static str {
        match self {
            Domain::X => "x",
            Domain::Y => "y",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "x" | "X" => Some(Domain::X),
            "y" | "Y" => Some(Domain::Y),
            _ => None,
        }
    }

    pub fn other(self) -> Self {
        match self {
            Domain::X => Domain::Y,
            Domain::Y => Domain::X,
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Per-pixel class ids of one frame, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub ids: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, ids: Vec<u8>) -> Result<Self> {
        if ids.len() != height * width {
            return Err(invalid(format!(
                "label map {height}x{width} needs {} ids, got {}",
                height * width,
                ids.len()
            )));
        }
        Ok(Self { height, width, ids })
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.ids[row * self.width + col]
    }

    pub fn mirrored(&self) -> Self {
        let mut ids = Vec::with_capacity(self.ids.len());
        for row in self.ids.chunks(self.width) {
            ids.extend(row.iter().rev());
        }
        Self { ids, ..*self }
    }

    pub fn max_id(&self) -> Option<u8> {
        self.ids.iter().copied().max()
    }
}

/// An ordered sequence of `[C,H,W]` frames from one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoStream<T = f32> {
    pub domain: Domain,
    pub stream_id: String,
    frames: Vec<Tensor<T>>,
    labels: Option<Vec<LabelMap>>,
    n_classes: usize,
}

impl<T: Real> VideoStream<T> {
    pub fn new(domain: Domain, stream_id: impl Into<String>, frames: Vec<Tensor<T>>) -> Result<Self> {
        if let Some(first) = frames.first() {
            if first.rank() != 3 {
                return Err(invalid(format!("frames must be [C,H,W], got {:?}", first.shape())));
            }
            if let Some((i, f)) = frames.iter().enumerate().find(|(_, f)| f.shape() != first.shape()) {
                return Err(invalid(format!(
                    "frame {i} has shape {:?}, expected {:?}",
                    f.shape(),
                    first.shape()
                )));
            }
        }
        Ok(Self {
            domain,
            stream_id: stream_id.into(),
            frames,
            labels: None,
            n_classes: 0,
        })
    }

    pub fn with_labels(mut self, labels: Vec<LabelMap>, n_classes: usize) -> Result<Self> {
        if labels.len() != self.frames.len() {
            return Err(invalid(format!(
                "{} label maps for {} frames",
                labels.len(),
                self.frames.len()
            )));
        }
        if let Some(shape) = self.frame_shape() {
            let (h, w) = (shape[1], shape[2]);
            for (i, l) in labels.iter().enumerate() {
                if l.height != h || l.width != w {
                    return Err(invalid(format!(
                        "label map {i} is {}x{}, frames are {h}x{w}",
                        l.height, l.width
                    )));
                }
                if let Some(m) = l.max_id().filter(|&m| m as usize >= n_classes) {
                    return Err(invalid(format!("label map {i} has class id {m} >= {n_classes}")));
                }
            }
        }
        self.labels = Some(labels);
        self.n_classes = n_classes;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> &[Tensor<T>] {
        &self.frames
    }

    pub fn frame(&self, i: usize) -> &Tensor<T> {
        &self.frames[i]
    }

    pub fn labels(&self) -> Option<&[LabelMap]> {
        self.labels.as_deref()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn frame_shape(&self) -> Option<&[usize]> {
        self.frames.first().map(Tensor::shape)
    }

    pub fn cast<U: Real>(&self) -> VideoStream<U> {
        VideoStream {
            domain: self.domain,
            stream_id: self.stream_id.clone(),
            frames: self.frames.iter().map(Tensor::cast).collect(),
            labels: self.labels.clone(),
            n_classes: self.n_classes,
        }
    }

    /// Mean absolute per-element difference between frames `i` and `i+1`.
    pub fn frame_delta(&self, i: usize) -> f64 {
        let (a, b) = (self.frames[i].data(), self.frames[i + 1].data());
        a.iter().zip(b).map(|(p, q)| (p.as_f64() - q.as_f64()).abs()).sum::<f64>() / a.len() as f64
    }
}

/// Triplets `(x_{t−1}, x_t, x_{t+1})` stacked into `[N,C,H,W]` tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletBatch<T> {
    pub centers: Vec<usize>,
    pub prev: Tensor<T>,
    pub curr: Tensor<T>,
    pub next: Tensor<T>,
}

impl<T: Real> TripletBatch<T> {
    pub fn from_centers(stream: &VideoStream<T>, centers: &[usize]) -> Result<Self> {
        if centers.is_empty() {
            return Err(invalid("triplet batch must not be empty"));
        }
        if let Some(&t) = centers.iter().find(|&&t| t == 0 || t + 1 >= stream.len()) {
            return Err(invalid(format!(
                "triplet center {t} outside [1, {}]",
                stream.len().saturating_sub(2)
            )));
        }
        let pick = |off: isize| -> Result<Tensor<T>> {
            let items: Vec<&Tensor<T>> = centers
                .iter()
                .map(|&t| stream.frame((t as isize + off) as usize))
                .collect();
            Ok(Tensor::stack(&items)?)
        };
        Ok(Self {
            centers: centers.to_vec(),
            prev: pick(-1)?,
            curr: pick(0)?,
            next: pick(1)?,
        })
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    /// Places the three frames on the tape as constants.
    pub fn bind(&self, tape: &mut Tape<T>) -> TripletVars {
        TripletVars {
            prev: tape.constant(self.prev.clone()),
            curr: tape.constant(self.curr.clone()),
            next: tape.constant(self.next.clone()),
        }
    }
}

/// Uniform centre indices `t ∈ [1, len−2]`.
pub fn sample_triplet_centers<R: Rng + ?Sized>(len: usize, batch_size: usize, rng: &mut R) -> Result<Vec<usize>> {
    if batch_size == 0 {
        return Err(invalid("batch_size must be positive"));
    }
    if len < 3 {
        return Err(invalid(format!("stream of {len} frames is too short for triplets (need 3)")));
    }
    Ok((0..batch_size).map(|_| rng.gen_range(1..len - 1)).collect())
}

pub fn sample_triplets_with<T: Real, R: Rng + ?Sized>(
    stream: &VideoStream<T>,
    batch_size: usize,
    rng: &mut R,
) -> Result<TripletBatch<T>> {
    let centers = sample_triplet_centers(stream.len(), batch_size, rng)?;
    TripletBatch::from_centers(stream, &centers)
}

pub fn sample_triplets<T: Real>(stream: &VideoStream<T>, batch_size: usize, seed: u64) -> Result<TripletBatch<T>> {
    sample_triplets_with(stream, batch_size, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stream(len: usize) -> VideoStream<f32> {
        let frames = (0..len)
            .map(|t| Tensor::full(&[1, 2, 2], t as f32 / len as f32).unwrap())
            .collect();
        VideoStream::new(Domain::X, "s", frames).unwrap()
    }

    #[test]
    fn three_frames_allow_only_the_middle_center() {
        let b = sample_triplets(&stream(3), 5, 9).unwrap();
        assert_eq!(b.centers, vec![1; 5]);
        assert_eq!(b.prev.shape(), &[5, 1, 2, 2]);
        assert_eq!(b.prev.data()[0], 0.0);
        assert_eq!(b.next.data()[0], 2.0 / 3.0);
    }

    #[test]
    fn sampling_errors() {
        assert!(sample_triplets(&stream(2), 1, 0).is_err());
        assert!(sample_triplets(&stream(5), 0, 0).is_err());
        assert!(TripletBatch::from_centers(&stream(5), &[4]).is_err());
    }

    #[test]
    fn mixed_shapes_and_bad_labels_are_rejected() {
        let frames = vec![Tensor::<f32>::zeros(&[3, 4, 4]).unwrap(), Tensor::zeros(&[3, 4, 2]).unwrap()];
        assert!(VideoStream::new(Domain::Y, "s", frames).is_err());
        let s = VideoStream::new(Domain::X, "s", vec![Tensor::<f32>::zeros(&[3, 2, 2]).unwrap()]).unwrap();
        let l = LabelMap::new(2, 2, vec![0, 1, 2, 3]).unwrap();
        assert!(s.clone().with_labels(vec![l.clone()], 3).is_err());
        assert!(s.with_labels(vec![l], 4).is_ok());
    }

    #[test]
    fn mirror_reverses_rows() {
        let l = LabelMap::new(2, 3, vec![0, 1, 2, 2, 0, 1]).unwrap();
        assert_eq!(l.mirrored().ids, vec![2, 1, 0, 1, 0, 2]);
        assert_eq!(l.mirrored().mirrored(), l);
    }

    proptest! {
        #[test]
        fn centers_stay_in_bounds(len in 3usize..200, batch in 1usize..16, seed: u64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = sample_triplet_centers(len, batch, &mut rng).unwrap();
            prop_assert_eq!(c.len(), batch);
            prop_assert!(c.iter().all(|&t| 1 <= t && t + 2 <= len));
        }

        #[test]
        fn same_seed_same_centers(len in 3usize..200, seed: u64) {
            let a = sample_triplet_centers(len, 8, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let b = sample_triplet_centers(len, 8, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
