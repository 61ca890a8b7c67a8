//! Synthetic lesion benchmark and the on-disk formats.
//!
//! Each image is a mid-gray noisy background carrying one class-shaped lesion
//! (disc, annulus or cross) and a bright 6×6 tag in one corner. In the
//! training pool the tag corner usually encodes the label, which makes the
//! tag an easier feature than the lesion; in the deconfounded test split the
//! tag corner is independent of the label.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::alignment::Mask;
use crate::error::{Error, Result};
use crate::fewshot::Sample;
use crate::tensor::Tensor;

pub const N_CLASSES: usize = 3;
pub const TAG_SIZE: usize = 6;
/// Lesion bounding boxes stay out of the `CORNER_ZONE × CORNER_ZONE` corners.
pub const CORNER_ZONE: usize = 8;
pub const BACKGROUND: f64 = 0.5;
pub const LESION_CONTRAST: f64 = 0.4;
pub const TAG_VALUE: f64 = 1.0;

pub mod pgm {
    //! Binary greyscale PGM (`P5`, maxval 255) with a plain header:
    //! magic, width, height and maxval separated by single whitespace bytes,
    //! no comments.

    use std::fs;
    use std::path::Path;

    use crate::error::{Error, Result};

    #[derive(Clone, Debug, PartialEq, Eq)]
    pub struct GrayImage {
        pub height: usize,
        pub width: usize,
        pub pixels: Vec<u8>,
    }

    pub fn header(height: usize, width: usize) -> String {
        format!("P5\n{width} {height}\n255\n")
    }

    pub fn encode(image: &GrayImage) -> Vec<u8> {
        let mut out = header(image.height, image.width).into_bytes();
        out.extend_from_slice(&image.pixels);
        out
    }

    fn err(offset: usize, message: impl Into<String>) -> Error {
        Error::Pgm {
            offset,
            message: message.into(),
        }
    }

    /// Reads a decimal field at `pos` and the single whitespace byte after it.
    fn field(bytes: &[u8], pos: &mut usize, name: &str) -> Result<usize> {
        let start = *pos;
        while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
            *pos += 1;
        }
        if *pos == start {
            return Err(err(start, format!("expected {name}")));
        }
        let text = std::str::from_utf8(&bytes[start..*pos]).expect("ascii digits");
        let value = text
            .parse::<usize>()
            .map_err(|_| err(start, format!("{name} {text} does not fit")))?;
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => return Err(err(*pos, format!("expected whitespace after {name}"))),
            None => return Err(err(*pos, format!("header truncated after {name}"))),
        }
        Ok(value)
    }

    pub fn decode(bytes: &[u8]) -> Result<GrayImage> {
        if bytes.len() < 3 || &bytes[..2] != b"P5" || !bytes[2].is_ascii_whitespace() {
            return Err(err(0, "missing P5 magic"));
        }
        let mut pos = 3;
        let width = field(bytes, &mut pos, "width")?;
        let height = field(bytes, &mut pos, "height")?;
        let maxval_at = pos;
        let maxval = field(bytes, &mut pos, "maxval")?;
        if maxval != 255 {
            return Err(err(maxval_at, format!("maxval {maxval} unsupported, only 255")));
        }
        if width == 0 || height == 0 {
            return Err(err(3, format!("empty {width}x{height} image")));
        }
        let n = width * height;
        let payload = &bytes[pos..];
        if payload.len() < n {
            return Err(err(
                bytes.len(),
                format!("payload truncated: {} of {n} bytes", payload.len()),
            ));
        }
        if payload.len() > n {
            return Err(err(pos + n, format!("{} trailing bytes", payload.len() - n)));
        }
        Ok(GrayImage {
            height,
            width,
            pixels: payload.to_vec(),
        })
    }

    pub fn read_pgm(path: &Path) -> Result<GrayImage> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        decode(&bytes)
    }

    pub fn write_pgm(path: &Path, image: &GrayImage) -> Result<()> {
        if image.pixels.len() != image.height * image.width {
            return Err(Error::Dimension {
                expected: image.height * image.width,
                actual: image.pixels.len(),
            });
        }
        fs::write(path, encode(image)).map_err(|e| Error::io(path, e))
    }

    /// `round(255 · v)` with `v` clamped to `[0, 1]`.
    pub fn quantize(v: f64) -> u8 {
        (v.clamp(0.0, 1.0) * 255.0).round() as u8
    }

    pub fn write_pgm_unit(path: &Path, height: usize, width: usize, values: &[f64]) -> Result<()> {
        let image = GrayImage {
            height,
            width,
            pixels: values.iter().map(|&v| quantize(v)).collect(),
        };
        write_pgm(path, &image)
    }
}

use pgm::GrayImage;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    TrainPool,
    TestConfounded,
    TestDeconfounded,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::TrainPool, Split::TestConfounded, Split::TestDeconfounded];

    pub fn name(self) -> &'static str {
        match self {
            Split::TrainPool => "train_pool",
            Split::TestConfounded => "test_confounded",
            Split::TestDeconfounded => "test_deconfounded",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub per_class_count: usize,
    /// Per-class size of each test split.
    pub test_per_class: usize,
    /// `(height, width)`; images are single-channel.
    pub image_size: (usize, usize),
    /// Inclusive lesion radius range in pixels.
    pub lesion_radius_range: (usize, usize),
    pub noise_sigma: f64,
    /// Probability that the tag sits in the corner indexed by the label, in
    /// the training pool and the confounded test split.
    pub spurious_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            per_class_count: 200,
            test_per_class: 100,
            image_size: (64, 64),
            lesion_radius_range: (6, 12),
            noise_sigma: 0.1,
            spurious_rate: 0.95,
            seed: 0,
        }
    }
}

/// Tag placement probability in the deconfounded split, which makes every
/// corner equally likely whatever the label.
pub const DECONFOUNDED_RATE: f64 = 0.25;

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        let (lo, hi) = self.lesion_radius_range;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("bad lesion radius range [{lo}, {hi}]")));
        }
        // the widest lesion box must lie within the band between the corner
        // zones along at least one axis
        let band = h.max(w).saturating_sub(2 * CORNER_ZONE);
        if 2 * hi + 1 > band || 2 * hi + 1 > h.min(w) {
            return Err(Error::Config(format!(
                "{h}x{w} images cannot hold a radius-{hi} lesion clear of the corner tags"
            )));
        }
        if !(0.0..=1.0).contains(&self.spurious_rate) {
            return Err(Error::Config(format!("spurious_rate {} outside [0, 1]", self.spurious_rate)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise_sigma {} must be >= 0", self.noise_sigma)));
        }
        Ok(())
    }

    fn split_size(&self, split: Split) -> usize {
        match split {
            Split::TrainPool => self.per_class_count,
            _ => self.test_per_class,
        }
    }

    fn split_rate(&self, split: Split) -> f64 {
        match split {
            Split::TestDeconfounded => DECONFOUNDED_RATE,
            _ => self.spurious_rate,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative to the manifest's directory.
    pub image_path: String,
    pub mask_path: String,
    pub label: usize,
    pub split: Split,
    /// 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right.
    pub tag_corner: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

/// One rasterized sample before quantization.
#[derive(Clone, Debug, PartialEq)]
pub struct Rendered {
    pub image: Vec<f64>,
    pub mask: Vec<bool>,
    pub tag_corner: usize,
}

fn lesion_contains(label: usize, radius: usize, dy: i64, dx: i64) -> bool {
    let r = radius as f64;
    let d = ((dy * dy + dx * dx) as f64).sqrt();
    match label {
        0 => d <= r,
        1 => d <= r && d >= 0.5 * r,
        _ => {
            let half = (radius / 3).max(1) as i64;
            let r = radius as i64;
            (dy.abs() <= half && dx.abs() <= r) || (dx.abs() <= half && dy.abs() <= r)
        }
    }
}

fn corner_origin(corner: usize, h: usize, w: usize, size: usize) -> (usize, usize) {
    match corner {
        0 => (0, 0),
        1 => (0, w - size),
        2 => (h - size, 0),
        _ => (h - size, w - size),
    }
}

fn in_corner_zone(r: usize, c: usize, h: usize, w: usize) -> bool {
    (r < CORNER_ZONE || r >= h - CORNER_ZONE) && (c < CORNER_ZONE || c >= w - CORNER_ZONE)
}

/// Tag corner: the label's corner with probability `rate`, otherwise one of
/// the other three uniformly.
fn draw_corner(rng: &mut ChaCha8Rng, label: usize, rate: f64) -> usize {
    if rng.random_bool(rate) {
        label
    } else {
        let k = rng.random_range(0..3);
        if k >= label {
            k + 1
        } else {
            k
        }
    }
}

/// Renders one sample of class `label`. `config` must pass `validate`,
/// otherwise the lesion placement may never terminate.
pub fn render_sample(config: &SynthConfig, label: usize, rate: f64, rng: &mut ChaCha8Rng) -> Rendered {
    let (h, w) = config.image_size;
    let (lo, hi) = config.lesion_radius_range;
    let radius = rng.random_range(lo..=hi);
    let (cy, cx) = loop {
        let cy = rng.random_range(radius..h - radius);
        let cx = rng.random_range(radius..w - radius);
        let box_corners = [
            (cy - radius, cx - radius),
            (cy - radius, cx + radius),
            (cy + radius, cx - radius),
            (cy + radius, cx + radius),
        ];
        // zones sit at the image corners, so a box meets one iff one of the
        // box's own corners lies inside it
        if !box_corners.iter().any(|&(r, c)| in_corner_zone(r, c, h, w)) {
            break (cy, cx);
        }
    };
    let noise = Normal::new(0.0, config.noise_sigma).expect("validated sigma");
    let mut image = vec![0.0; h * w];
    let mut mask = vec![false; h * w];
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let lesion = lesion_contains(label, radius, r as i64 - cy as i64, c as i64 - cx as i64);
            mask[i] = lesion;
            image[i] = BACKGROUND + noise.sample(rng) + if lesion { LESION_CONTRAST } else { 0.0 };
        }
    }
    let tag_corner = draw_corner(rng, label, rate);
    let (tr, tc) = corner_origin(tag_corner, h, w, TAG_SIZE);
    for r in tr..tr + TAG_SIZE {
        for c in tc..tc + TAG_SIZE {
            image[r * w + c] = TAG_VALUE;
        }
    }
    Rendered {
        image,
        mask,
        tag_corner,
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes `images/`, `masks/` and `manifest.jsonl` under `out_dir`.
pub fn generate(config: &SynthConfig, out_dir: &Path) -> Result<Manifest> {
    config.validate()?;
    let (h, w) = config.image_size;
    create_dir(&out_dir.join("images"))?;
    create_dir(&out_dir.join("masks"))?;
    let mut entries = Vec::new();
    for (stream, split) in Split::ALL.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(stream as u64);
        let rate = config.split_rate(split);
        for i in 0..config.split_size(split) * N_CLASSES {
            let label = i % N_CLASSES;
            let id = format!("{}_{i:05}", split.name());
            let sample = render_sample(config, label, rate, &mut rng);
            let image_path = format!("images/{id}.pgm");
            let mask_path = format!("masks/{id}.pgm");
            pgm::write_pgm_unit(&out_dir.join(&image_path), h, w, &sample.image)?;
            let mask = GrayImage {
                height: h,
                width: w,
                pixels: sample.mask.iter().map(|&m| if m { 255 } else { 0 }).collect(),
            };
            pgm::write_pgm(&out_dir.join(&mask_path), &mask)?;
            entries.push(ManifestEntry {
                id,
                image_path,
                mask_path,
                label,
                split,
                tag_corner: sample.tag_corner,
            });
        }
    }
    let path = out_dir.join("manifest.jsonl");
    let mut text = Vec::new();
    for e in &entries {
        serde_json::to_writer(&mut text, e)?;
        text.push(b'\n');
    }
    fs::File::create(&path)
        .and_then(|mut f| f.write_all(&text))
        .map_err(|e| Error::io(&path, e))?;
    Ok(Manifest {
        root: out_dir.to_path_buf(),
        entries,
    })
}

/// Parses and validates a manifest. Image files are only checked for
/// existence here; they are decoded by [`Manifest::load_sample`].
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let n = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| Error::Manifest { line: n, message };
        let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        if !seen.insert(entry.id.clone()) {
            return Err(bad(format!("duplicate id {}", entry.id)));
        }
        if entry.label >= N_CLASSES {
            return Err(bad(format!("label {} outside [0, {N_CLASSES})", entry.label)));
        }
        if entry.tag_corner >= 4 {
            return Err(bad(format!("tag_corner {} outside [0, 4)", entry.tag_corner)));
        }
        for rel in [&entry.image_path, &entry.mask_path] {
            if !root.join(rel).is_file() {
                return Err(bad(format!("missing file {rel}")));
            }
        }
        entries.push(entry);
    }
    Ok(Manifest { root, entries })
}

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn get(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn class_counts(&self, split: Split) -> BTreeMap<usize, usize> {
        let mut counts = BTreeMap::new();
        for e in self.split(split) {
            *counts.entry(e.label).or_default() += 1;
        }
        counts
    }

    /// Decodes an entry's image (scaled to `[0, 1]`) and mask.
    pub fn load_sample(&self, entry: &ManifestEntry) -> Result<Sample> {
        let img = pgm::read_pgm(&self.root.join(&entry.image_path))?;
        let mask = pgm::read_pgm(&self.root.join(&entry.mask_path))?;
        if (img.height, img.width) != (mask.height, mask.width) {
            return Err(Error::shape(
                format!("mask of {}", entry.id),
                &[img.height, img.width],
                &[mask.height, mask.width],
            ));
        }
        let bits = mask
            .pixels
            .iter()
            .map(|&p| match p {
                0 => Ok(0),
                255 => Ok(1),
                other => Err(Error::Config(format!("mask of {} has pixel value {other}", entry.id))),
            })
            .collect::<Result<Vec<u8>>>()?;
        let image = Tensor::new(
            &[1, img.height, img.width],
            img.pixels.iter().map(|&p| p as f64 / 255.0).collect(),
        )?;
        Sample::new(
            entry.id.clone(),
            image,
            Some(Mask::new(mask.height, mask.width, bits)?),
            entry.label,
        )
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<Sample>> {
        self.split(split).map(|e| self.load_sample(e)).collect()
    }
}

/// Pearson chi-square statistic of a contingency table.
pub fn chi_square(table: &[Vec<usize>]) -> f64 {
    let total: usize = table.iter().flatten().sum();
    if total == 0 {
        return 0.0;
    }
    let cols = table.first().map_or(0, Vec::len);
    let row_sums: Vec<f64> = table.iter().map(|r| r.iter().sum::<usize>() as f64).collect();
    let col_sums: Vec<f64> = (0..cols)
        .map(|c| table.iter().map(|r| r[c]).sum::<usize>() as f64)
        .collect();
    let mut stat = 0.0;
    for (r, row) in table.iter().enumerate() {
        for (c, &obs) in row.iter().enumerate() {
            let expected = row_sums[r] * col_sums[c] / total as f64;
            if expected > 0.0 {
                stat += (obs as f64 - expected).powi(2) / expected;
            }
        }
    }
    stat
}

/// Label × tag-corner counts for one split.
pub fn tag_contingency(manifest: &Manifest, split: Split) -> Vec<Vec<usize>> {
    let mut table = vec![vec![0; 4]; N_CLASSES];
    for e in manifest.split(split) {
        table[e.label][e.tag_corner] += 1;
    }
    table
}
