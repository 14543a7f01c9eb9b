//! Synthetic camouflage dataset: procedural generation, PPM/PGM file
//! formats, and the versioned manifest.
//!
//! Foreground blobs are filled with band-limited noise drawn from the same
//! spectral band as the background; only a mean-intensity gap separates
//! them, and the gap shrinks as difficulty rises.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::rng;
use crate::tensor::{dft2_pair, Tensor};

/// Inclusive axis-aligned pixel box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BBox {
    pub r0: usize,
    pub c0: usize,
    pub r1: usize,
    pub c1: usize,
}

impl BBox {
    pub fn height(&self) -> usize {
        self.r1 - self.r0 + 1
    }

    pub fn width(&self) -> usize {
        self.c1 - self.c0 + 1
    }

    pub fn area(&self) -> usize {
        self.height() * self.width()
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        r >= self.r0 && r <= self.r1 && c >= self.c0 && c <= self.c1
    }

    pub fn intersects(&self, other: &BBox) -> bool {
        self.r0 <= other.r1 && other.r0 <= self.r1 && self.c0 <= other.c1 && other.c0 <= self.c1
    }

    pub fn encode(&self) -> String {
        format!("{}:{}:{}:{}", self.r0, self.c0, self.r1, self.c1)
    }

    pub fn decode(text: &str) -> Result<BBox> {
        let parts: Vec<&str> = text.split(':').collect();
        if parts.len() != 4 {
            return Err(CoreError::Invalid(format!("bad box '{text}'")));
        }
        let nums: Vec<usize> = parts
            .iter()
            .map(|p| p.parse::<usize>().map_err(|_| CoreError::Invalid(format!("bad box '{text}'"))))
            .collect::<Result<_>>()?;
        if nums[0] > nums[2] || nums[1] > nums[3] {
            return Err(CoreError::Invalid(format!("inverted box '{text}'")));
        }
        Ok(BBox { r0: nums[0], c0: nums[1], r1: nums[2], c1: nums[3] })
    }
}

/// Tight bounding box of a binary mask (positive means > 0.5).
pub fn bbox_from_mask(mask: &Tensor) -> Result<BBox> {
    let s = mask.shape();
    if s.len() != 2 {
        return Err(CoreError::shape("bbox_from_mask", format!("expected [H,W], got {s:?}")));
    }
    let (h, w) = (s[0], s[1]);
    let d = mask.data();
    let (mut r0, mut c0, mut r1, mut c1) = (usize::MAX, usize::MAX, 0usize, 0usize);
    let mut any = false;
    for r in 0..h {
        for c in 0..w {
            if d[r * w + c] > 0.5 {
                any = true;
                r0 = r0.min(r);
                c0 = c0.min(c);
                r1 = r1.max(r);
                c1 = c1.max(c);
            }
        }
    }
    if !any {
        return Err(CoreError::EmptyMask("bbox of an all-zero mask".into()));
    }
    Ok(BBox { r0, c0, r1, c1 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(CoreError::Invalid(format!("unknown split '{other}'"))),
        }
    }
}

/// One loaded sample: image, disjoint instance masks, and their tight boxes.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub split: Split,
    pub image: Tensor,
    pub masks: Vec<Tensor>,
    pub boxes: Vec<BBox>,
}

impl Sample {
    /// Pixelwise union of the instance masks.
    pub fn union_mask(&self) -> Tensor {
        union_of(&self.masks)
    }
}

pub fn union_of(masks: &[Tensor]) -> Tensor {
    let shape = masks[0].shape().to_vec();
    let mut data = vec![0.0; masks[0].len()];
    for m in masks {
        for (o, &v) in data.iter_mut().zip(m.data()) {
            if v > 0.5 {
                *o = 1.0;
            }
        }
    }
    Tensor::from_vec(shape, data).unwrap()
}

#[derive(Debug, Clone)]
pub struct SampleRecord {
    pub id: String,
    pub split: Split,
    pub image: String,
    pub gt: String,
    pub masks: Vec<String>,
    pub boxes: Vec<BBox>,
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub params_hash: String,
    pub size: usize,
    pub difficulty: f64,
    pub seed: u64,
    pub records: Vec<SampleRecord>,
    /// Directory the relative paths resolve against.
    pub root: PathBuf,
}

impl Manifest {
    pub fn records_in(&self, split: Split) -> Vec<&SampleRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn load_sample(&self, record: &SampleRecord) -> Result<Sample> {
        let image = read_ppm(&self.root.join(&record.image))?;
        let masks: Vec<Tensor> = record
            .masks
            .iter()
            .map(|m| read_pgm(&self.root.join(m)).map(|t| t.binarize_gt(0.5)))
            .collect::<Result<_>>()?;
        Ok(Sample {
            id: record.id.clone(),
            split: record.split,
            image,
            masks,
            boxes: record.boxes.clone(),
        })
    }
}

// ---- PPM / PGM ------------------------------------------------------------

fn write_netpbm(path: &Path, magic: &str, planes: &[&[f64]], h: usize, w: usize, comment: &str) -> Result<()> {
    let file = File::create(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let mut out = BufWriter::new(file);
    let io = |e: std::io::Error| CoreError::io(path.display().to_string(), e);
    write!(out, "{magic}\n# {comment}\n{w} {h}\n255\n").map_err(io)?;
    let mut bytes = Vec::with_capacity(h * w * planes.len());
    for i in 0..h * w {
        for p in planes {
            bytes.push((p[i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out.write_all(&bytes).map_err(io)?;
    out.flush().map_err(io)
}

/// Write a `[3,H,W]` image in `[0,1]` as binary PPM (P6).
pub fn write_ppm(path: &Path, image: &Tensor, comment: &str) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(CoreError::shape("write_ppm", format!("expected [3,H,W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let d = image.data();
    write_netpbm(path, "P6", &[&d[0..h * w], &d[h * w..2 * h * w], &d[2 * h * w..]], h, w, comment)
}

/// Write a `[H,W]` map in `[0,1]` as binary PGM (P5), value = round(255 * v).
pub fn write_pgm(path: &Path, map: &Tensor, comment: &str) -> Result<()> {
    let s = map.shape();
    if s.len() != 2 {
        return Err(CoreError::shape("write_pgm", format!("expected [H,W], got {s:?}")));
    }
    write_netpbm(path, "P5", &[map.data()], s[0], s[1], comment)
}

struct PbmHeader {
    h: usize,
    w: usize,
}

fn read_netpbm(path: &Path, want_magic: &str) -> Result<(PbmHeader, Vec<u8>)> {
    let file = File::open(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(file);
    let mut raw = Vec::new();
    r.read_to_end(&mut raw).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let parse = |detail: String| CoreError::Parse { path: path.display().to_string(), detail };

    // Header tokens, skipping '#' comments.
    let mut pos = 0usize;
    let mut tokens = Vec::new();
    while tokens.len() < 4 && pos < raw.len() {
        // Skip whitespace.
        while pos < raw.len() && raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < raw.len() && raw[pos] == b'#' {
            while pos < raw.len() && raw[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos > start {
            tokens.push(String::from_utf8_lossy(&raw[start..pos]).to_string());
        }
    }
    if tokens.len() < 4 {
        return Err(parse("truncated header".into()));
    }
    if tokens[0] != want_magic {
        return Err(parse(format!("expected {want_magic}, found {}", tokens[0])));
    }
    let w: usize = tokens[1].parse().map_err(|_| parse("bad width".into()))?;
    let h: usize = tokens[2].parse().map_err(|_| parse("bad height".into()))?;
    let maxval: usize = tokens[3].parse().map_err(|_| parse("bad maxval".into()))?;
    if maxval != 255 {
        return Err(parse(format!("unsupported maxval {maxval}")));
    }
    // Exactly one whitespace byte separates header and data.
    pos += 1;
    let channels = if want_magic == "P6" { 3 } else { 1 };
    let need = h * w * channels;
    if raw.len() < pos + need {
        return Err(parse("truncated pixel data".into()));
    }
    Ok((PbmHeader { h, w }, raw[pos..pos + need].to_vec()))
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let (hdr, bytes) = read_netpbm(path, "P6")?;
    let (h, w) = (hdr.h, hdr.w);
    let mut data = vec![0.0; 3 * h * w];
    for i in 0..h * w {
        for c in 0..3 {
            data[c * h * w + i] = bytes[i * 3 + c] as f64 / 255.0;
        }
    }
    Tensor::from_vec(vec![3, h, w], data)
}

pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let (hdr, bytes) = read_netpbm(path, "P5")?;
    let data: Vec<f64> = bytes.iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::from_vec(vec![hdr.h, hdr.w], data)
}

// ---- manifest ---------------------------------------------------------------

const MANIFEST_MAGIC: &str = "FCLCOD-MANIFEST v1";

pub fn write_manifest(path: &Path, m: &Manifest) -> Result<()> {
    let file = File::create(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let mut out = BufWriter::new(file);
    let io = |e: std::io::Error| CoreError::io(path.display().to_string(), e);
    writeln!(out, "{MANIFEST_MAGIC}").map_err(io)?;
    writeln!(out, "params_hash={}", m.params_hash).map_err(io)?;
    writeln!(out, "size={}", m.size).map_err(io)?;
    writeln!(out, "count={}", m.records.len()).map_err(io)?;
    writeln!(out, "difficulty={}", m.difficulty).map_err(io)?;
    writeln!(out, "seed={}", m.seed).map_err(io)?;
    for r in &m.records {
        let masks = r.masks.join(",");
        let boxes = r.boxes.iter().map(|b| b.encode()).collect::<Vec<_>>().join(",");
        writeln!(
            out,
            "sample id={} split={} image={} gt={} masks={} boxes={}",
            r.id,
            r.split.as_str(),
            r.image,
            r.gt,
            masks,
            boxes
        )
        .map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Parse a manifest validating only the image files. Stage 2 trains from
/// images and externally supplied pseudo-labels; ground-truth mask files
/// and prompt boxes may be absent from disk entirely.
pub fn load_manifest_images_only(path: &Path) -> Result<Manifest> {
    load_manifest_impl(path, false)
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    load_manifest_impl(path, true)
}

fn load_manifest_impl(path: &Path, require_annotations: bool) -> Result<Manifest> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let parse = |detail: String| CoreError::Parse { path: path.display().to_string(), detail };
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_MAGIC) {
        return Err(parse("missing manifest magic header".into()));
    }
    let mut params_hash = String::new();
    let mut size = 0usize;
    let mut difficulty = 0.0f64;
    let mut seed = 0u64;
    let mut declared_count = None;
    let mut records = Vec::new();
    for line in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("sample ") {
            let mut fields = std::collections::HashMap::new();
            for kv in rest.split_whitespace() {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| parse(format!("bad sample field '{kv}'")))?;
                fields.insert(k, v);
            }
            let get = |k: &str| -> Result<&str> {
                fields.get(k).copied().ok_or_else(|| parse(format!("sample missing '{k}'")))
            };
            let boxes: Vec<BBox> = get("boxes")?
                .split(',')
                .map(BBox::decode)
                .collect::<Result<_>>()?;
            records.push(SampleRecord {
                id: get("id")?.to_string(),
                split: Split::parse(get("split")?)?,
                image: get("image")?.to_string(),
                gt: get("gt")?.to_string(),
                masks: get("masks")?.split(',').map(str::to_string).collect(),
                boxes,
            });
        } else if let Some((k, v)) = line.split_once('=') {
            match k {
                "params_hash" => params_hash = v.to_string(),
                "size" => size = v.parse().map_err(|_| parse("bad size".into()))?,
                "count" => declared_count = Some(v.parse::<usize>().map_err(|_| parse("bad count".into()))?),
                "difficulty" => difficulty = v.parse().map_err(|_| parse("bad difficulty".into()))?,
                "seed" => seed = v.parse().map_err(|_| parse("bad seed".into()))?,
                other => return Err(parse(format!("unknown manifest key '{other}'"))),
            }
        } else {
            return Err(parse(format!("unparseable line '{line}'")));
        }
    }
    if let Some(c) = declared_count {
        if c != records.len() {
            return Err(parse(format!("declared count {c} != {} records", records.len())));
        }
    }
    let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    // Validate uniqueness and file existence.
    let mut seen = std::collections::HashSet::new();
    for r in &records {
        if !seen.insert(r.id.clone()) {
            return Err(parse(format!("duplicate sample id '{}'", r.id)));
        }
        let required: Vec<&String> = if require_annotations {
            std::iter::once(&r.image)
                .chain(std::iter::once(&r.gt))
                .chain(r.masks.iter())
                .collect()
        } else {
            vec![&r.image]
        };
        for f in required {
            let p = root.join(f);
            if !p.exists() {
                return Err(parse(format!("referenced file missing: {}", p.display())));
            }
        }
        if r.masks.len() != r.boxes.len() || r.masks.is_empty() {
            return Err(parse(format!("sample '{}' masks/boxes arity mismatch", r.id)));
        }
    }
    Ok(Manifest { params_hash, size, difficulty, seed, records, root })
}

// ---- array text format ---------------------------------------------------

const MATRIX_MAGIC: &str = "# fcl-matrix v1";

/// Write a rank-2 tensor as UTF-8 text: a magic header carrying the dims,
/// then one whitespace-separated row per line with full f64 precision.
pub fn write_matrix_text(path: &Path, m: &Tensor, comment: &str) -> Result<()> {
    let s = m.shape();
    if s.len() != 2 {
        return Err(CoreError::shape("write_matrix_text", format!("expected [R,C], got {s:?}")));
    }
    let file = File::create(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let mut out = BufWriter::new(file);
    let io = |e: std::io::Error| CoreError::io(path.display().to_string(), e);
    writeln!(out, "{MATRIX_MAGIC} rows={} cols={} {comment}", s[0], s[1]).map_err(io)?;
    for r in 0..s[0] {
        let row: Vec<String> = m.data()[r * s[1]..(r + 1) * s[1]]
            .iter()
            .map(|v| format!("{v:.17e}"))
            .collect();
        writeln!(out, "{}", row.join(" ")).map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn read_matrix_text(path: &Path) -> Result<Tensor> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let parse = |detail: String| CoreError::Parse { path: path.display().to_string(), detail };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| parse("empty file".into()))?;
    if !header.starts_with(MATRIX_MAGIC) {
        return Err(parse("missing matrix magic header".into()));
    }
    let mut rows = 0usize;
    let mut cols = 0usize;
    for tok in header.split_whitespace() {
        if let Some(v) = tok.strip_prefix("rows=") {
            rows = v.parse().map_err(|_| parse("bad rows".into()))?;
        }
        if let Some(v) = tok.strip_prefix("cols=") {
            cols = v.parse().map_err(|_| parse("bad cols".into()))?;
        }
    }
    let mut data = Vec::with_capacity(rows * cols);
    for line in lines {
        for tok in line.split_whitespace() {
            data.push(tok.parse::<f64>().map_err(|_| parse(format!("bad value '{tok}'")))?);
        }
    }
    if data.len() != rows * cols {
        return Err(parse(format!("expected {} values, got {}", rows * cols, data.len())));
    }
    Tensor::from_vec(vec![rows, cols], data)
}

// ---- generator ---------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GeneratorParams {
    pub count: usize,
    pub size: usize,
    pub difficulty: f64,
    pub seed: u64,
    pub test_fraction: f64,
    pub val_fraction: f64,
}

impl GeneratorParams {
    pub fn validate(&self) -> Result<()> {
        if !(32..=128).contains(&self.size) {
            return Err(CoreError::Invalid(format!("size {} outside [32,128]", self.size)));
        }
        if !(0.0..=1.0).contains(&self.difficulty) {
            return Err(CoreError::Invalid(format!("difficulty {} outside [0,1]", self.difficulty)));
        }
        if self.count == 0 {
            return Err(CoreError::Invalid("count must be >= 1".into()));
        }
        if self.test_fraction < 0.0
            || self.val_fraction < 0.0
            || self.test_fraction + self.val_fraction >= 1.0
        {
            return Err(CoreError::Invalid("split fractions must be >= 0 and sum below 1".into()));
        }
        Ok(())
    }

    pub fn hash_hex(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(format!(
            "gen count={} size={} difficulty={} seed={} test={} val={}",
            self.count, self.size, self.difficulty, self.seed, self.test_fraction, self.val_fraction
        ));
        crate::config::hex_of(&h.finalize())
    }
}

/// Mean foreground/background intensity gap at a given difficulty.
pub fn intensity_gap(difficulty: f64) -> f64 {
    0.05 + 0.35 * (1.0 - difficulty)
}

/// Zero-mean band-limited noise plane with unit peak amplitude.
fn band_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, f_lo: f64, f_hi: f64) -> Vec<f64> {
    let mut re: Vec<f64> = (0..h * w).map(|_| rng.gen::<f64>() - 0.5).collect();
    let mut im = vec![0.0; h * w];
    dft2_pair(&mut re, &mut im, h, w, -1.0);
    for y in 0..h {
        for x in 0..w {
            let fy = y.min(h - y) as f64;
            let fx = x.min(w - x) as f64;
            let f = (fy * fy + fx * fx).sqrt();
            if f < f_lo || f > f_hi {
                re[y * w + x] = 0.0;
                im[y * w + x] = 0.0;
            }
        }
    }
    dft2_pair(&mut re, &mut im, h, w, 1.0);
    let scale = 1.0 / (h * w) as f64;
    re.iter_mut().for_each(|v| *v *= scale);
    // Normalize to unit max amplitude.
    let peak = re.iter().fold(0.0f64, |m, &v| m.max(v.abs())).max(1e-9);
    re.iter_mut().for_each(|v| *v /= peak);
    re
}

struct Blob {
    mask: Vec<bool>,
}

fn rasterize_blob(rng: &mut ChaCha8Rng, size: usize) -> Option<(Blob, BBox)> {
    let s = size as f64;
    let r0 = rng::uniform(rng, 0.10, 0.20) * s;
    let elong = rng::uniform(rng, 0.6, 1.4);
    let (ax, ay) = (elong.sqrt(), 1.0 / elong.sqrt());
    let theta = rng::uniform(rng, 0.0, std::f64::consts::PI);
    let margin = (r0 * 1.45 * ax.max(ay)).ceil() + 5.0;
    if 2.0 * margin >= s {
        return None;
    }
    let cy = rng::uniform(rng, margin, s - margin);
    let cx = rng::uniform(rng, margin, s - margin);
    // Angular radius perturbation harmonics.
    let amps: Vec<f64> = (2..5).map(|k| rng::uniform(rng, 0.0, 0.25 / k as f64 * 2.0)).collect();
    let phases: Vec<f64> = (2..5).map(|_| rng::uniform(rng, 0.0, std::f64::consts::TAU)).collect();
    let (st, ct) = theta.sin_cos();
    let mut mask = vec![false; size * size];
    let mut any = false;
    for y in 0..size {
        for x in 0..size {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let u = (dx * ct + dy * st) / ax;
            let v = (-dx * st + dy * ct) / ay;
            let rho = (u * u + v * v).sqrt();
            let phi = v.atan2(u);
            let mut rr = 1.0;
            for (k, (&a, &p)) in amps.iter().zip(&phases).enumerate() {
                rr += a * ((k as f64 + 2.0) * phi + p).sin();
            }
            if rho <= r0 * rr.max(0.4) {
                mask[y * size + x] = true;
                any = true;
            }
        }
    }
    if !any {
        return None;
    }
    let t = Tensor::from_vec(
        vec![size, size],
        mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
    )
    .ok()?;
    let bb = bbox_from_mask(&t).ok()?;
    Some((Blob { mask }, bb))
}

/// One generated sample, fully determined by `(params, index)`.
pub fn generate_sample(params: &GeneratorParams, index: usize) -> Result<Sample> {
    params.validate()?;
    let size = params.size;
    let mut r = rng::stream(params.seed, &format!("gen/sample={index}"));
    let band_lo = 2.0;
    let band_hi = 10.0;
    let gap = intensity_gap(params.difficulty);
    let bg_amp = 0.13;
    let bg_mean = 0.35;

    let bg = band_noise(&mut r, size, size, band_lo, band_hi);

    // Place 1..=3 disjoint blobs (1 px separation).
    let want = 1 + (rng::uniform(&mut r, 0.0, 3.0) as usize).min(2);
    let mut placed: Vec<(Blob, BBox)> = Vec::new();
    let mut occupied = vec![false; size * size];
    let mut tries = 0;
    while placed.len() < want && tries < 40 {
        tries += 1;
        if let Some((blob, bb)) = rasterize_blob(&mut r, size) {
            let clear = blob.mask.iter().enumerate().all(|(i, &b)| {
                if !b {
                    return true;
                }
                let (y, x) = (i / size, i % size);
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                        if ny >= 0 && nx >= 0 && (ny as usize) < size && (nx as usize) < size
                            && occupied[ny as usize * size + nx as usize]
                        {
                            return false;
                        }
                    }
                }
                true
            });
            if clear {
                for (i, &b) in blob.mask.iter().enumerate() {
                    if b {
                        occupied[i] = true;
                    }
                }
                placed.push((blob, bb));
            }
        }
    }
    if placed.is_empty() {
        return Err(CoreError::Invalid(format!("sample {index}: no blob placement found")));
    }

    // Compose luminance: background plus per-instance foreground texture.
    let mut lum: Vec<f64> = bg.iter().map(|&v| bg_mean + bg_amp * v).collect();
    let mut masks = Vec::new();
    let mut boxes = Vec::new();
    for (k, (blob, bb)) in placed.iter().enumerate() {
        let mut fr = rng::stream(params.seed, &format!("gen/sample={index}/fg={k}"));
        let fg = band_noise(&mut fr, size, size, band_lo, band_hi);
        for (i, &inside) in blob.mask.iter().enumerate() {
            if inside {
                lum[i] = bg_mean + gap + bg_amp * fg[i];
            }
        }
        masks.push(Tensor::from_vec(
            vec![size, size],
            blob.mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )?);
        boxes.push(*bb);
    }

    // Fixed per-channel tints keep the camouflage a luminance phenomenon.
    let mut image = vec![0.0; 3 * size * size];
    for i in 0..size * size {
        let v = lum[i].clamp(0.0, 1.0);
        image[i] = (v * 1.03).clamp(0.0, 1.0);
        image[size * size + i] = v;
        image[2 * size * size + i] = (v * 0.97).clamp(0.0, 1.0);
    }

    let n = params.count;
    let n_test = (n as f64 * params.test_fraction).round() as usize;
    let n_val = (n as f64 * params.val_fraction).round() as usize;
    let split = if index < n - n_test - n_val {
        Split::Train
    } else if index < n - n_test {
        Split::Val
    } else {
        Split::Test
    };

    Ok(Sample {
        id: format!("{index:04}"),
        split,
        image: Tensor::from_vec(vec![3, size, size], image)?,
        masks,
        boxes,
    })
}

/// Generate the corpus under `out_dir` and write the manifest. Returns the
/// manifest path.
pub fn generate_synthetic_dataset(params: &GeneratorParams, out_dir: &Path) -> Result<PathBuf> {
    params.validate()?;
    let hash = params.hash_hex();
    for sub in ["images", "masks", "gt"] {
        std::fs::create_dir_all(out_dir.join(sub))
            .map_err(|e| CoreError::io(out_dir.join(sub).display().to_string(), e))?;
    }
    let comment = format!("cfg:{hash}");
    let mut records = Vec::with_capacity(params.count);
    for index in 0..params.count {
        let sample = generate_sample(params, index)?;
        let image_rel = format!("images/{}.ppm", sample.id);
        let gt_rel = format!("gt/{}.pgm", sample.id);
        write_ppm(&out_dir.join(&image_rel), &sample.image, &comment)?;
        write_pgm(&out_dir.join(&gt_rel), &sample.union_mask(), &comment)?;
        let mut mask_rels = Vec::new();
        for (k, m) in sample.masks.iter().enumerate() {
            let rel = format!("masks/{}_{k}.pgm", sample.id);
            write_pgm(&out_dir.join(&rel), m, &comment)?;
            mask_rels.push(rel);
        }
        records.push(SampleRecord {
            id: sample.id.clone(),
            split: sample.split,
            image: image_rel,
            gt: gt_rel,
            masks: mask_rels,
            boxes: sample.boxes.clone(),
        });
    }
    let manifest = Manifest {
        params_hash: hash,
        size: params.size,
        difficulty: params.difficulty,
        seed: params.seed,
        records,
        root: out_dir.to_path_buf(),
    };
    let path = out_dir.join("manifest.txt");
    write_manifest(&path, &manifest)?;
    Ok(path)
}
