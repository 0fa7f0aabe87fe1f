//! 8-bit PPM/PGM frames and the on-disk stream layout
//! `<root>/<domain>/<stream_id>/frame_%06d.ppm` (+ `label_%06d.pgm`).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::{invalid, DataError, Domain, LabelMap, Result, VideoStream};
use crate::error::Error;
use crate::tensor::{Real, Tensor};

pub const MANIFEST_FILE: &str = "manifest.txt";

fn corrupt(path: &Path, detail: impl Into<String>) -> Error {
    DataError::Corrupt {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
    .into()
}

fn to_byte(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

fn from_byte<T: Real>(b: u8) -> T {
    T::lit(b as f64 / 127.5 - 1.0)
}

/// Parses a binary netpbm header, returning (width, height, body offset).
fn parse_header(bytes: &[u8], magic: &[u8; 2], path: &Path) -> Result<(usize, usize, usize)> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(corrupt(path, format!("expected {} header", String::from_utf8_lossy(magic))));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(corrupt(path, "truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| corrupt(path, "malformed header field"))?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(corrupt(path, format!("maxval {maxval} is not 255")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(corrupt(path, "missing whitespace after header"));
    }
    Ok((w, h, pos + 1))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes a `[3,H,W]` frame in `[−1,1]` as binary PPM.
pub fn write_ppm<T: Real>(path: &Path, frame: &Tensor<T>) -> Result<()> {
    let [3, h, w] = *frame.shape() else {
        return Err(invalid(format!("PPM frames must be [3,H,W], got {:?}", frame.shape())));
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = frame.data();
    let hw = h * w;
    out.reserve(3 * hw);
    for i in 0..hw {
        for c in 0..3 {
            out.push(to_byte(d[c * hw + i].as_f64()));
        }
    }
    write_file(path, &out)
}

pub fn read_ppm<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let bytes = read_file(path)?;
    let (w, h, start) = parse_header(&bytes, b"P6", path)?;
    let hw = h * w;
    let body = &bytes[start..];
    if body.len() != 3 * hw {
        return Err(corrupt(path, format!("expected {} pixel bytes, found {}", 3 * hw, body.len())));
    }
    let mut data = vec![T::zero(); 3 * hw];
    for i in 0..hw {
        for c in 0..3 {
            data[c * hw + i] = from_byte(body[3 * i + c]);
        }
    }
    Ok(Tensor::new(&[3, h, w], data)?)
}

/// Writes class ids as a binary PGM.
pub fn write_pgm(path: &Path, labels: &LabelMap) -> Result<()> {
    let mut out = format!("P5\n{} {}\n255\n", labels.width, labels.height).into_bytes();
    out.extend_from_slice(&labels.ids);
    write_file(path, &out)
}

pub fn read_pgm(path: &Path) -> Result<LabelMap> {
    let bytes = read_file(path)?;
    let (w, h, start) = parse_header(&bytes, b"P5", path)?;
    let body = &bytes[start..];
    if body.len() != h * w {
        return Err(corrupt(path, format!("expected {} label bytes, found {}", h * w, body.len())));
    }
    LabelMap::new(h, w, body.to_vec())
}

fn frame_name(i: usize) -> String {
    format!("frame_{i:06}.ppm")
}

fn label_name(i: usize) -> String {
    format!("label_{i:06}.pgm")
}

/// Index of a file named `<prefix><digits><suffix>`.
fn indexed(name: &str, prefix: &str, suffix: &str) -> Option<usize> {
    name.strip_prefix(prefix)?.strip_suffix(suffix)?.parse().ok()
}

/// Writes every frame (and label map, when present) into `dir`.
pub fn save_stream<T: Real>(stream: &VideoStream<T>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in stream.frames().iter().enumerate() {
        write_ppm(&dir.join(frame_name(i)), f)?;
    }
    if let Some(labels) = stream.labels() {
        for (i, l) in labels.iter().enumerate() {
            write_pgm(&dir.join(label_name(i)), l)?;
        }
    }
    Ok(())
}

fn contiguous(dir: &Path, indices: &BTreeMap<usize, PathBuf>) -> Result<()> {
    for (expected, &i) in indices.keys().enumerate() {
        if i != expected {
            return Err(DataError::Gap {
                dir: dir.to_path_buf(),
                index: expected,
            }
            .into());
        }
    }
    Ok(())
}

/// Loads the frames of one stream directory in index order. The domain
/// and id are taken from the two trailing path components when present.
pub fn load_stream<T: Real>(dir: &Path, n_classes: usize) -> Result<VideoStream<T>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let (mut frames, mut labels) = (BTreeMap::new(), BTreeMap::new());
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        if let Some(i) = indexed(name, "frame_", ".ppm") {
            frames.insert(i, entry.path());
        } else if let Some(i) = indexed(name, "label_", ".pgm") {
            labels.insert(i, entry.path());
        }
    }
    if frames.is_empty() {
        return Err(DataError::NoFrames(dir.to_path_buf()).into());
    }
    contiguous(dir, &frames)?;
    let domain = dir
        .parent()
        .and_then(|p| p.file_name())
        .and_then(|n| n.to_str())
        .and_then(Domain::parse)
        .unwrap_or(Domain::X);
    let id = dir.file_name().and_then(|n| n.to_str()).unwrap_or("stream").to_string();
    let tensors = frames.values().map(|p| read_ppm(p)).collect::<Result<Vec<_>>>()?;
    let stream = VideoStream::new(domain, id, tensors)?;
    if labels.is_empty() {
        return Ok(stream);
    }
    contiguous(dir, &labels)?;
    if labels.len() != frames.len() {
        return Err(invalid(format!(
            "{}: {} label maps for {} frames",
            dir.display(),
            labels.len(),
            frames.len()
        )));
    }
    let maps = labels.values().map(|p| read_pgm(p)).collect::<Result<Vec<_>>>()?;
    stream.with_labels(maps, n_classes)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub domain: Domain,
    pub stream_id: String,
    pub length: usize,
}

impl ManifestEntry {
    pub fn dir(&self, root: &Path) -> PathBuf {
        root.join(self.domain.tag()).join(&self.stream_id)
    }
}

/// Dataset index: free-form `key=value` settings and one line per stream
/// (`stream <domain> <id> <length>`).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub settings: Vec<(String, String)>,
    pub streams: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn setting(&self, key: &str) -> Option<&str> {
        self.settings.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn stream(&self, domain: Domain) -> Option<&ManifestEntry> {
        self.streams.iter().find(|e| e.domain == domain)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.settings {
            s.push_str(&format!("{k}={v}\n"));
        }
        for e in &self.streams {
            s.push_str(&format!("stream {} {} {}\n", e.domain, e.stream_id, e.length));
        }
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut m = Manifest::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || corrupt(path, format!("line {}: cannot parse {line:?}", n + 1));
            if let Some(rest) = line.strip_prefix("stream ") {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                let [d, id, len] = parts[..] else { return Err(bad()) };
                m.streams.push(ManifestEntry {
                    domain: Domain::parse(d).ok_or_else(bad)?,
                    stream_id: id.to_string(),
                    length: len.parse().map_err(|_| bad())?,
                });
            } else {
                let (k, v) = line.split_once('=').ok_or_else(bad)?;
                m.settings.push((k.trim().to_string(), v.trim().to_string()));
            }
        }
        Ok(m)
    }
}

pub fn write_manifest(root: &Path, manifest: &Manifest) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    write_file(&root.join(MANIFEST_FILE), manifest.render().as_bytes())
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Manifest::parse(&text, &path)
}
