//! Multi-domain image data: a synthetic anterior-chamber-angle generator
//! with per-domain acquisition shifts, PGM dataset directories, and the
//! mixed-domain batch sampler.

use std::fs;
use std::path::{Path, PathBuf};

use m2dan_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::derive_seed;

/// Binary class of an angle. Index 0 (narrow) is the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassLabel {
    Narrow,
    Open,
}

impl ClassLabel {
    pub fn index(self) -> usize {
        match self {
            ClassLabel::Narrow => 0,
            ClassLabel::Open => 1,
        }
    }

    pub fn one_hot(self) -> [f64; 2] {
        match self {
            ClassLabel::Narrow => [1.0, 0.0],
            ClassLabel::Open => [0.0, 1.0],
        }
    }

    pub fn dir_name(self) -> &'static str {
        match self {
            ClassLabel::Narrow => "narrow",
            ClassLabel::Open => "open",
        }
    }
}

/// Acquisition characteristics of one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub noise_std: f64,
    pub salt_pepper_frac: f64,
    /// Number of 3×3 box blur passes.
    pub blur_radius: u32,
    pub contrast: f64,
    /// Downsample-then-upsample factor in `(0, 1]`.
    pub resolution_scale: f64,
    /// Fraction of narrow-angle training images.
    pub narrow_frac: f64,
    /// Fraction of narrow-angle test images; `None` reuses `narrow_frac`.
    pub test_narrow_frac: Option<f64>,
    pub n_train: usize,
    pub n_test: usize,
}

impl DomainSpec {
    pub fn clean(name: &str, n_train: usize, n_test: usize, narrow_frac: f64) -> Self {
        Self {
            name: name.to_string(),
            noise_std: 0.0,
            salt_pepper_frac: 0.0,
            blur_radius: 0,
            contrast: 1.0,
            resolution_scale: 1.0,
            narrow_frac,
            test_narrow_frac: None,
            n_train,
            n_test,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidSpec(format!("domain {}: {what}", self.name)));
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.salt_pepper_frac) {
            return bad("salt_pepper_frac must lie in [0, 1]");
        }
        if !(self.contrast > 0.0 && self.contrast.is_finite()) {
            return bad("contrast must be > 0");
        }
        if !(self.resolution_scale > 0.0 && self.resolution_scale <= 1.0) {
            return bad("resolution_scale must lie in (0, 1]");
        }
        for f in [Some(self.narrow_frac), self.test_narrow_frac].into_iter().flatten() {
            if !(f > 0.0 && f < 1.0) {
                return bad("narrow fractions must lie in (0, 1)");
            }
        }
        Ok(())
    }

    /// `(narrow, open)` counts of a split.
    pub fn class_counts(n: usize, narrow_frac: f64) -> (usize, usize) {
        let narrow = ((narrow_frac * n as f64).round() as usize).min(n);
        (narrow, n - narrow)
    }
}

/// One image with its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSample {
    /// `[1, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    /// Absent for unlabeled (target training) samples.
    pub class_label: Option<ClassLabel>,
    pub domain_index: usize,
    pub num_domains: usize,
}

impl DomainSample {
    pub fn domain_label(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.num_domains];
        d[self.domain_index] = 1.0;
        d
    }
}

/// Train and test splits of one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainData {
    pub name: String,
    pub index: usize,
    pub train: Vec<DomainSample>,
    pub test: Vec<DomainSample>,
}

impl DomainData {
    pub fn is_source(&self) -> bool {
        self.index == 0
    }
}

/// Geometry parameters of one rendered angle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Wedge {
    pub apex: (f64, f64),
    /// Direction of the bisector in radians (0 points right).
    pub heading: f64,
    /// Opening angle in radians.
    pub opening: f64,
}

pub const NARROW_DEGREES: (f64, f64) = (5.0, 15.0);
pub const OPEN_DEGREES: (f64, f64) = (25.0, 55.0);

fn sample_wedge(rng: &mut ChaCha8Rng, label: ClassLabel, size: usize) -> Wedge {
    let s = size as f64;
    let (lo, hi) = match label {
        ClassLabel::Narrow => NARROW_DEGREES,
        ClassLabel::Open => OPEN_DEGREES,
    };
    let opening = rng.random_range(lo..=hi).to_radians();
    let apex = (
        s * (0.3 + rng.random_range(-0.05..=0.05)),
        s * (0.5 + rng.random_range(-0.05..=0.05)),
    );
    let heading = rng.random_range(-5.0f64..=5.0).to_radians();
    Wedge {
        apex,
        heading,
        opening,
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

/// Renders the two rays of a wedge as anti-aliased 2-pixel lines on a black
/// background. Pixel `(x, y)` is sampled at its center `(x + 0.5, y + 0.5)`.
pub fn render_wedge(wedge: &Wedge, size: usize) -> Vec<f64> {
    let s = size as f64;
    let reach = 0.6 * s;
    let ray_end = |angle: f64| {
        (
            wedge.apex.0 + reach * angle.cos(),
            wedge.apex.1 - reach * angle.sin(),
        )
    };
    let upper = ray_end(wedge.heading + wedge.opening / 2.0);
    let lower = ray_end(wedge.heading - wedge.opening / 2.0);
    let mut img = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let p = (x as f64 + 0.5, y as f64 + 0.5);
            let d = segment_distance(p, wedge.apex, upper).min(segment_distance(p, wedge.apex, lower));
            img[y * size + x] = (1.5 - d).clamp(0.0, 1.0);
        }
    }
    img
}

fn box_blur(img: &[f64], size: usize) -> Vec<f64> {
    let mut out = vec![0.0; img.len()];
    for y in 0..size {
        for x in 0..size {
            let mut sum = 0.0;
            let mut count = 0.0;
            for yy in y.saturating_sub(1)..=(y + 1).min(size - 1) {
                for xx in x.saturating_sub(1)..=(x + 1).min(size - 1) {
                    sum += img[yy * size + xx];
                    count += 1.0;
                }
            }
            out[y * size + x] = sum / count;
        }
    }
    out
}

fn degrade_resolution(img: &[f64], size: usize, scale: f64) -> Vec<f64> {
    let low = ((size as f64 * scale).round() as usize).clamp(1, size);
    if low == size {
        return img.to_vec();
    }
    let cell = |i: usize| i * low / size;
    let mut sums = vec![0.0; low * low];
    let mut counts = vec![0.0; low * low];
    for y in 0..size {
        for x in 0..size {
            let c = cell(y) * low + cell(x);
            sums[c] += img[y * size + x];
            counts[c] += 1.0;
        }
    }
    (0..size * size)
        .map(|i| {
            let c = cell(i / size) * low + cell(i % size);
            sums[c] / counts[c]
        })
        .collect()
}

/// Quantizes to the 8-bit grid used by PGM files.
fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Applies a domain's acquisition chain to a clean rendering, in order:
/// contrast, blur, resolution loss, Gaussian noise, salt-and-pepper.
pub fn apply_domain_shift(clean: &[f64], size: usize, spec: &DomainSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut img: Vec<f64> = clean
        .iter()
        .map(|&v| (0.5 + spec.contrast * (v - 0.5)).clamp(0.0, 1.0))
        .collect();
    for _ in 0..spec.blur_radius {
        img = box_blur(&img, size);
    }
    img = degrade_resolution(&img, size, spec.resolution_scale);
    if spec.noise_std > 0.0 {
        let normal = Normal::new(0.0, spec.noise_std).expect("validated noise_std");
        for v in img.iter_mut() {
            *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
        }
    }
    if spec.salt_pepper_frac > 0.0 {
        for v in img.iter_mut() {
            if rng.random::<f64>() < spec.salt_pepper_frac {
                *v = if rng.random::<bool>() { 1.0 } else { 0.0 };
            }
        }
    }
    img.into_iter().map(quantize).collect()
}

fn generate_split(
    spec: &DomainSpec,
    split: &str,
    n: usize,
    narrow_frac: f64,
    size: usize,
    seed: u64,
) -> Vec<(ClassLabel, Tensor)> {
    let (narrow, _) = DomainSpec::class_counts(n, narrow_frac);
    (0..n)
        .map(|i| {
            let label = if i < narrow {
                ClassLabel::Narrow
            } else {
                ClassLabel::Open
            };
            let tag = format!("{}/{split}/{i}", spec.name);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &tag));
            let wedge = sample_wedge(&mut rng, label, size);
            let clean = render_wedge(&wedge, size);
            let img = apply_domain_shift(&clean, size, spec, &mut rng);
            let t = Tensor::new(&[1, size, size], img, false).expect("square image");
            (label, t)
        })
        .collect()
}

/// Labeled train and test images for one domain.
///
/// Each image depends only on `(seed, domain name, split, index)`, so
/// generation order does not matter. Narrow images come first in each split.
pub fn gen_synthetic_domain(
    spec: &DomainSpec,
    image_size: usize,
    seed: u64,
) -> Result<(Vec<(ClassLabel, Tensor)>, Vec<(ClassLabel, Tensor)>)> {
    spec.validate()?;
    if image_size == 0 {
        return Err(Error::InvalidSpec("image_size must be positive".into()));
    }
    let train = generate_split(spec, "train", spec.n_train, spec.narrow_frac, image_size, seed);
    let test_frac = spec.test_narrow_frac.unwrap_or(spec.narrow_frac);
    let test = generate_split(spec, "test", spec.n_test, test_frac, image_size, seed);
    Ok((train, test))
}

/// Narrow/open counts of one row of the clinical dataset statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TableRow {
    pub train_narrow: usize,
    pub train_open: usize,
    pub test_narrow: usize,
    pub test_open: usize,
}

pub const SOURCE_ROW: TableRow = TableRow {
    train_narrow: 3006,
    train_open: 6024,
    test_narrow: 790,
    test_open: 1412,
};
pub const TARGET1_ROW: TableRow = TableRow {
    train_narrow: 62,
    train_open: 464,
    test_narrow: 64,
    test_open: 464,
};
pub const TARGET2_ROW: TableRow = TableRow {
    train_narrow: 416,
    train_open: 1406,
    test_narrow: 418,
    test_open: 1406,
};

impl TableRow {
    fn scaled(&self, fraction: f64) -> (usize, f64, usize, f64) {
        let train = self.train_narrow + self.train_open;
        let test = self.test_narrow + self.test_open;
        (
            ((train as f64 * fraction).round() as usize).max(2),
            self.train_narrow as f64 / train as f64,
            ((test as f64 * fraction).round() as usize).max(2),
            self.test_narrow as f64 / test as f64,
        )
    }
}

pub const DEFAULT_FRACTION: f64 = 1.0 / 6.0;

/// Domain specs of the default benchmark at `fraction` of the clinical
/// dataset size: a clean source, a noisy low-resolution target, and a
/// blurred low-contrast target.
pub fn benchmark_specs(fraction: f64) -> Vec<DomainSpec> {
    let make = |name: &str, row: TableRow| {
        let (n_train, train_frac, n_test, test_frac) = row.scaled(fraction);
        let mut s = DomainSpec::clean(name, n_train, n_test, train_frac);
        s.test_narrow_frac = Some(test_frac);
        s
    };
    let source = make("source", SOURCE_ROW);
    let mut t1 = make("target1", TARGET1_ROW);
    t1.salt_pepper_frac = 0.08;
    t1.resolution_scale = 0.5;
    let mut t2 = make("target2", TARGET2_ROW);
    t2.blur_radius = 2;
    t2.contrast = 0.6;
    vec![source, t1, t2]
}

fn label_samples(
    samples: Vec<(ClassLabel, Tensor)>,
    index: usize,
    num_domains: usize,
    keep_labels: bool,
) -> Vec<DomainSample> {
    samples
        .into_iter()
        .map(|(label, image)| DomainSample {
            image,
            class_label: keep_labels.then_some(label),
            domain_index: index,
            num_domains,
        })
        .collect()
}

/// Builds datasets from domain specs; the first spec is the labeled source.
/// Target training samples are stripped of their class labels.
pub fn synthesize(specs: &[DomainSpec], image_size: usize, seed: u64) -> Result<Vec<DomainData>> {
    let num_domains = specs.len();
    specs
        .iter()
        .enumerate()
        .map(|(index, spec)| {
            let (train, test) = gen_synthetic_domain(spec, image_size, seed)?;
            Ok(DomainData {
                name: spec.name.clone(),
                index,
                train: label_samples(train, index, num_domains, index == 0),
                test: label_samples(test, index, num_domains, true),
            })
        })
        .collect()
}

/// The default three-domain benchmark.
pub fn default_benchmark(seed: u64, image_size: usize) -> Result<Vec<DomainData>> {
    synthesize(&benchmark_specs(DEFAULT_FRACTION), image_size, seed)
}

/// Keeps only the source domain, relabeled as a one-domain dataset.
pub fn source_only(datasets: &[DomainData]) -> Vec<DomainData> {
    datasets
        .iter()
        .filter(|d| d.is_source())
        .map(|d| {
            let relabel = |v: &[DomainSample]| -> Vec<DomainSample> {
                v.iter()
                    .map(|s| DomainSample {
                        num_domains: 1,
                        ..s.clone()
                    })
                    .collect()
            };
            DomainData {
                name: d.name.clone(),
                index: 0,
                train: relabel(&d.train),
                test: relabel(&d.test),
            }
        })
        .collect()
}

// ---------------------------------------------------------------- PGM I/O

/// Writes an 8-bit binary (P5) PGM.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[f64]) -> Result<()> {
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend(pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Reads an 8-bit binary PGM into `(width, height, pixels in [0, 1])`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_pgm(&bytes).map_err(|reason| Error::MalformedPgm {
        path: path.to_path_buf(),
        reason,
    })
}

fn parse_pgm(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<f64>), String> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err("missing P5 magic (only binary PGM is supported)".into());
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err("truncated header".into()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err("expected a decimal header field".into());
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or("header field out of range")?;
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err("zero image dimension".into());
    }
    if maxval == 0 || maxval > 255 {
        return Err(format!("maxval {maxval} unsupported (8-bit only)"));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("missing whitespace after maxval".into());
    }
    pos += 1;
    let need = width * height;
    let raster = &bytes[pos..];
    if raster.len() < need {
        return Err(format!("raster has {} bytes, expected {need}", raster.len()));
    }
    let scale = maxval as f64;
    Ok((width, height, raster[..need].iter().map(|&b| b as f64 / scale).collect()))
}

/// Which half of a (wide) scan becomes network input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Half {
    #[default]
    None,
    Left,
    Right,
    /// Both halves, as two samples.
    Both,
}

impl Half {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(Half::None),
            "left" => Some(Half::Left),
            "right" => Some(Half::Right),
            "both" => Some(Half::Both),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Half::None => "none",
            Half::Left => "left",
            Half::Right => "right",
            Half::Both => "both",
        }
    }
}

fn crop_columns(w: usize, h: usize, px: &[f64], from: usize, to: usize) -> Vec<f64> {
    (0..h)
        .flat_map(|y| px[y * w + from..y * w + to].iter().copied())
        .collect()
}

/// Bilinear resize with half-pixel centers; identity when sizes agree.
pub fn resize(w: usize, h: usize, px: &[f64], out_w: usize, out_h: usize) -> Vec<f64> {
    if w == out_w && h == out_h {
        return px.to_vec();
    }
    let sample = |coord: f64, len: usize| {
        let c = coord.clamp(0.0, (len - 1) as f64);
        let i0 = c.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, c - i0 as f64)
    };
    let mut out = Vec::with_capacity(out_w * out_h);
    for y in 0..out_h {
        let (y0, y1, fy) = sample((y as f64 + 0.5) * h as f64 / out_h as f64 - 0.5, h);
        for x in 0..out_w {
            let (x0, x1, fx) = sample((x as f64 + 0.5) * w as f64 / out_w as f64 - 0.5, w);
            let top = px[y0 * w + x0] * (1.0 - fx) + px[y0 * w + x1] * fx;
            let bottom = px[y1 * w + x0] * (1.0 - fx) + px[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

fn image_views(w: usize, h: usize, px: Vec<f64>, half: Half) -> Vec<(usize, usize, Vec<f64>)> {
    let mid = w / 2;
    let left = || (mid.max(1), h, crop_columns(w, h, &px, 0, mid.max(1)));
    let right = || (w - mid, h, crop_columns(w, h, &px, mid, w));
    match half {
        Half::None => vec![(w, h, px.clone())],
        Half::Left => vec![left()],
        Half::Right => vec![right()],
        Half::Both => vec![left(), right()],
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(format!("listing {}", dir.display()), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    Ok(entries)
}

fn load_class_dir(dir: &Path, half: Half, size: usize, labeled: bool) -> Result<Vec<Tensor>> {
    let files: Vec<PathBuf> = sorted_entries(dir)?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "pgm"))
        .collect();
    if labeled && files.is_empty() {
        return Err(Error::EmptyClassDir(dir.to_path_buf()));
    }
    let mut out = Vec::new();
    for f in files {
        let (w, h, px) = read_pgm(&f)?;
        for (vw, vh, view) in image_views(w, h, px, half) {
            let img = resize(vw, vh, &view, size, size);
            out.push(Tensor::new(&[1, size, size], img, false)?);
        }
    }
    Ok(out)
}

/// Loads `root/<domain>/{train,test}/{narrow,open,unlabeled}/*.pgm`.
///
/// The directory named `source` becomes domain 0; the others follow in
/// lexicographic order. Target training labels are discarded even when the
/// files sit in class directories.
pub fn load_dataset_dir(root: &Path, half: Half, image_size: usize) -> Result<Vec<DomainData>> {
    let mut names: Vec<String> = sorted_entries(root)?
        .into_iter()
        .filter(|p| p.is_dir())
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect();
    let Some(src) = names.iter().position(|n| n == "source") else {
        return Err(Error::MissingSource(root.to_path_buf()));
    };
    let source = names.remove(src);
    names.insert(0, source);
    let num_domains = names.len();

    names
        .iter()
        .enumerate()
        .map(|(index, name)| {
            let mut splits = [Vec::new(), Vec::new()];
            for (slot, split) in ["train", "test"].into_iter().enumerate() {
                let split_dir = root.join(name).join(split);
                if !split_dir.is_dir() {
                    continue;
                }
                for label in [ClassLabel::Narrow, ClassLabel::Open] {
                    let dir = split_dir.join(label.dir_name());
                    if dir.is_dir() {
                        let keep = index == 0 || split == "test";
                        for image in load_class_dir(&dir, half, image_size, true)? {
                            splits[slot].push(DomainSample {
                                image,
                                class_label: keep.then_some(label),
                                domain_index: index,
                                num_domains,
                            });
                        }
                    }
                }
                let unlabeled = split_dir.join("unlabeled");
                if unlabeled.is_dir() {
                    for image in load_class_dir(&unlabeled, half, image_size, false)? {
                        splits[slot].push(DomainSample {
                            image,
                            class_label: None,
                            domain_index: index,
                            num_domains,
                        });
                    }
                }
            }
            let [train, test] = splits;
            Ok(DomainData {
                name: name.clone(),
                index,
                train,
                test,
            })
        })
        .collect()
}

/// Writes datasets in the directory layout read by [`load_dataset_dir`].
/// Returns `(domain name, train count, test count)` per domain.
pub fn export_dataset_dir(datasets: &[DomainData], root: &Path) -> Result<Vec<(String, usize, usize)>> {
    let mut summary = Vec::new();
    for d in datasets {
        for (split, samples) in [("train", &d.train), ("test", &d.test)] {
            for (i, s) in samples.iter().enumerate() {
                let class = s.class_label.map_or("unlabeled", ClassLabel::dir_name);
                let dir = root.join(&d.name).join(split).join(class);
                fs::create_dir_all(&dir)
                    .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
                let shape = s.image.shape();
                let (h, w) = (shape[1], shape[2]);
                write_pgm(&dir.join(format!("{i:05}.pgm")), w, h, s.image.data())?;
            }
        }
        summary.push((d.name.clone(), d.train.len(), d.test.len()));
    }
    Ok(summary)
}

// ---------------------------------------------------------------- batching

/// A mixed-domain minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainBatch {
    /// `[N, 1, H, W]`.
    pub images: Tensor,
    /// One-hot class rows of the source samples, in batch order.
    pub class_labels: Tensor,
    /// `[N, num_domains]`.
    pub domain_labels: Tensor,
    pub source_mask: Vec<bool>,
}

impl DomainBatch {
    pub fn len(&self) -> usize {
        self.source_mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_mask.is_empty()
    }

    pub fn source_rows(&self) -> Vec<usize> {
        self.source_mask
            .iter()
            .enumerate()
            .filter_map(|(i, &s)| s.then_some(i))
            .collect()
    }
}

/// Draws equal numbers of training samples from every domain per batch.
///
/// Each domain is visited in a fresh permutation per epoch; smaller domains
/// are reshuffled whenever they run out. An epoch has
/// `max(1, largest / per_domain)` batches.
#[derive(Debug, Clone)]
pub struct BatchSampler<'a> {
    datasets: &'a [DomainData],
    per_domain: usize,
    seed: u64,
}

impl<'a> BatchSampler<'a> {
    pub fn new(datasets: &'a [DomainData], batch_size: usize, seed: u64) -> Result<Self> {
        let domains = datasets.len();
        if domains == 0 || batch_size == 0 || batch_size % domains != 0 {
            return Err(Error::IndivisibleBatch {
                batch_size,
                domains,
            });
        }
        if datasets.iter().any(|d| d.train.is_empty()) {
            return Err(Error::EmptyInput);
        }
        let source = &datasets[0];
        if source.train.iter().any(|s| s.class_label.is_none()) {
            return Err(Error::InvalidSpec("source training samples must be labeled".into()));
        }
        Ok(Self {
            datasets,
            per_domain: batch_size / domains,
            seed,
        })
    }

    pub fn per_domain(&self) -> usize {
        self.per_domain
    }

    pub fn batches_per_epoch(&self) -> usize {
        let largest = self.datasets.iter().map(|d| d.train.len()).max().unwrap_or(0);
        (largest / self.per_domain).max(1)
    }

    /// Sample indices `[batch][domain][k]` of one epoch.
    pub fn epoch_indices(&self, epoch: usize) -> Vec<Vec<Vec<usize>>> {
        let batches = self.batches_per_epoch();
        let mut plan = vec![Vec::with_capacity(self.datasets.len()); batches];
        for d in self.datasets {
            let tag = format!("sampler/{epoch}/{}", d.index);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &tag));
            let n = d.train.len();
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let mut cursor = 0;
            for batch in plan.iter_mut() {
                let mut picks = Vec::with_capacity(self.per_domain);
                for _ in 0..self.per_domain {
                    if cursor == n {
                        order.shuffle(&mut rng);
                        cursor = 0;
                    }
                    picks.push(order[cursor]);
                    cursor += 1;
                }
                batch.push(picks);
            }
        }
        plan
    }

    pub fn assemble(&self, picks: &[Vec<usize>]) -> Result<DomainBatch> {
        let num_domains = self.datasets.len();
        let mut images = Vec::new();
        let mut class_rows = Vec::new();
        let mut domain_rows = Vec::new();
        let mut source_mask = Vec::new();
        let mut shape: Option<Vec<usize>> = None;
        for (d, idx) in self.datasets.iter().zip(picks) {
            for &i in idx {
                let s = &d.train[i];
                match &shape {
                    None => shape = Some(s.image.shape().to_vec()),
                    Some(sh) if sh != s.image.shape() => {
                        return Err(Error::InvalidSpec("training images differ in shape".into()))
                    }
                    _ => {}
                }
                images.extend_from_slice(s.image.data());
                let mut onehot = vec![0.0; num_domains];
                onehot[d.index] = 1.0;
                domain_rows.extend(onehot);
                let is_source = d.is_source();
                source_mask.push(is_source);
                if is_source {
                    let label = s.class_label.ok_or_else(|| {
                        Error::InvalidSpec("source training sample without label".into())
                    })?;
                    class_rows.extend(label.one_hot());
                }
            }
        }
        let n = source_mask.len();
        let mut full = vec![n];
        full.extend(shape.ok_or(Error::EmptyInput)?);
        let n_s = class_rows.len() / 2;
        Ok(DomainBatch {
            images: Tensor::new(&full, images, false)?,
            class_labels: Tensor::new(&[n_s.max(1), 2], if n_s == 0 { vec![0.0; 2] } else { class_rows }, false)?,
            domain_labels: Tensor::new(&[n, num_domains], domain_rows, false)?,
            source_mask,
        })
    }

    pub fn epoch(&self, epoch: usize) -> impl Iterator<Item = Result<DomainBatch>> + '_ {
        self.epoch_indices(epoch)
            .into_iter()
            .map(move |picks| self.assemble(&picks))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_specs() -> Vec<DomainSpec> {
        let mut specs = benchmark_specs(0.004);
        for s in &mut specs {
            s.n_train = s.n_train.max(5);
            s.n_test = s.n_test.max(4);
        }
        specs
    }

    #[test]
    fn clean_chain_is_identity_and_apex_is_lit() {
        let spec = DomainSpec::clean("c", 1, 1, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let wedge = sample_wedge(&mut rng, ClassLabel::Open, 32);
        let clean = render_wedge(&wedge, 32);
        let shifted = apply_domain_shift(&clean, 32, &spec, &mut rng);
        let expect: Vec<f64> = clean.iter().map(|&v| quantize(v)).collect();
        assert_eq!(shifted, expect);
        let (ax, ay) = (wedge.apex.0 as usize, wedge.apex.1 as usize);
        assert!(shifted[ay * 32 + ax] > 0.5, "apex pixel should be foreground");
    }

    #[test]
    fn class_counts_follow_fraction() {
        assert_eq!(DomainSpec::class_counts(526, 0.118), (62, 464));
        let spec = DomainSpec::clean("t", 526, 0, 0.118);
        let (train, _) = gen_synthetic_domain(&spec, 8, 1).unwrap();
        let narrow = train.iter().filter(|(l, _)| *l == ClassLabel::Narrow).count();
        assert_eq!((narrow, train.len() - narrow), (62, 464));
    }

    #[test]
    fn benchmark_counts_mirror_table_ratios() {
        let specs = benchmark_specs(DEFAULT_FRACTION);
        let counts: Vec<_> = specs
            .iter()
            .map(|s| {
                (
                    DomainSpec::class_counts(s.n_train, s.narrow_frac),
                    DomainSpec::class_counts(s.n_test, s.test_narrow_frac.unwrap()),
                )
            })
            .collect();
        assert_eq!(counts[0], ((501, 1004), (132, 235)));
        assert_eq!(counts[1], ((10, 78), (11, 77)));
        assert_eq!(counts[2], ((69, 235), (70, 234)));
        assert_eq!(specs.len(), 3);
    }

    #[test]
    fn generation_is_deterministic_and_bounded() {
        let specs = tiny_specs();
        let a = synthesize(&specs, 16, 5).unwrap();
        let b = synthesize(&specs, 16, 5).unwrap();
        assert_eq!(a, b);
        for d in &a {
            for s in d.train.iter().chain(&d.test) {
                assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
                assert_eq!(s.domain_label()[d.index], 1.0);
            }
            if d.index > 0 {
                assert!(d.train.iter().all(|s| s.class_label.is_none()));
                assert!(d.test.iter().all(|s| s.class_label.is_some()));
            }
        }
    }

    #[test]
    fn rejects_invalid_domain_spec() {
        let mut s = DomainSpec::clean("x", 2, 2, 0.5);
        s.resolution_scale = 0.0;
        assert!(gen_synthetic_domain(&s, 8, 0).is_err());
        let mut s = DomainSpec::clean("x", 2, 2, 0.5);
        s.salt_pepper_frac = 1.5;
        assert!(gen_synthetic_domain(&s, 8, 0).is_err());
    }

    #[test]
    fn pgm_parsing() {
        let ok = b"P5\n# comment\n2 1\n255\n\x00\xff";
        assert_eq!(parse_pgm(ok).unwrap(), (2, 1, vec![0.0, 1.0]));
        assert!(parse_pgm(b"P2\n2 1\n255\n0 255\n").is_err());
        assert!(parse_pgm(b"P5\n2 2\n255\n\x00").is_err());
        assert!(parse_pgm(b"P5\n2 2\n65535\n").is_err());
    }

    #[test]
    fn resize_and_halves() {
        let px: Vec<f64> = (0..128 * 64).map(|i| (i % 128) as f64 / 127.0).collect();
        let views = image_views(128, 64, px.clone(), Half::None);
        assert_eq!(views.len(), 1);
        let r = resize(128, 64, &views[0].2, 64, 64);
        assert_eq!(r.len(), 64 * 64);
        assert_eq!(image_views(128, 64, px.clone(), Half::Both).len(), 2);
        let (w, _, left) = image_views(128, 64, px, Half::Left).remove(0);
        assert_eq!(w, 64);
        assert!(left.iter().all(|&v| v <= 63.0 / 127.0));
    }

    #[test]
    fn sampler_composition_and_determinism() {
        let data = synthesize(&tiny_specs(), 8, 3).unwrap();
        let sampler = BatchSampler::new(&data, 12, 7).unwrap();
        assert_eq!(sampler.per_domain(), 4);
        let a: Vec<DomainBatch> = sampler.epoch(0).collect::<Result<_>>().unwrap();
        let b: Vec<DomainBatch> = BatchSampler::new(&data, 12, 7)
            .unwrap()
            .epoch(0)
            .collect::<Result<_>>()
            .unwrap();
        assert_eq!(a, b);
        for batch in &a {
            assert_eq!(batch.len(), 12);
            assert_eq!(batch.source_rows().len(), 4);
            assert_eq!(batch.class_labels.shape(), &[4, 2]);
            for (i, row) in batch.domain_labels.data().chunks(3).enumerate() {
                assert_eq!(row.iter().filter(|&&v| v == 1.0).count(), 1);
                assert_eq!(row.iter().sum::<f64>(), 1.0);
                assert_eq!(row[0] == 1.0, batch.source_mask[i]);
            }
        }
        let next: Vec<DomainBatch> = sampler.epoch(1).collect::<Result<_>>().unwrap();
        assert_ne!(a, next);
        assert!(matches!(
            BatchSampler::new(&data, 10, 0),
            Err(Error::IndivisibleBatch { .. })
        ));
    }
}
