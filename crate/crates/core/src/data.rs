//! Files on disk: images, scribbles, masks, the manifest, the training
//! augmentation, and a synthetic dataset generator.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! images/<id>.png     RGB
//! scribbles/<id>.png  8-bit indexed (0 unlabeled, 1 fg, 2 bg) or RGB strokes
//! masks/<id>.png      8-bit, foreground >= 128 (optional)
//! manifest.csv        id,image,scribble,mask,split
//! ```

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::map::{nearest_source, Label, Map, ScribbleMap};
use crate::tensor::{self, Tensor};

/// Independent stream seed for `(seed, a, b)` (SplitMix64 finaliser).
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleRecord {
    pub id: String,
    pub image: PathBuf,
    pub scribble: Option<PathBuf>,
    pub mask: Option<PathBuf>,
    pub split: Split,
}

impl SampleRecord {
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::InvalidArgument("manifest record with empty id".into()));
        }
        if self.split == Split::Train && self.scribble.is_none() {
            return Err(Error::InvalidArgument(format!(
                "training record `{}` has no scribble",
                self.id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct ManifestRow {
    id: String,
    image: String,
    scribble: String,
    mask: String,
    split: String,
}

/// Parses manifest CSV text; relative paths are resolved against `base`.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<SampleRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Data(format!("manifest header: {e}")))?
        .clone();
    let expected = ["id", "image", "scribble", "mask", "split"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Data(format!(
            "manifest header must be `{}`",
            expected.join(",")
        )));
    }
    let resolve = |p: &str| -> Option<PathBuf> {
        if p.is_empty() {
            None
        } else {
            Some(base.join(p))
        }
    };
    let mut out = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (line, row) in reader.deserialize::<ManifestRow>().enumerate() {
        let row = row.map_err(|e| Error::Data(format!("manifest row {}: {e}", line + 1)))?;
        let record = SampleRecord {
            id: row.id.clone(),
            image: resolve(&row.image).ok_or_else(|| {
                Error::Data(format!("manifest row {}: empty image path", line + 1))
            })?,
            scribble: resolve(&row.scribble),
            mask: resolve(&row.mask),
            split: row.split.parse()?,
        };
        record.validate()?;
        if !seen.insert(row.id.clone()) {
            return Err(Error::Data(format!("duplicate id `{}` in manifest", row.id)));
        }
        out.push(record);
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<SampleRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    parse_manifest(&text, base).map_err(|e| match e {
        Error::Data(reason) | Error::InvalidArgument(reason) => Error::format(path, reason),
        other => other,
    })
}

/// Writes paths relative to the manifest's directory when possible.
pub fn write_manifest(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    let rel = |p: &Path| {
        p.strip_prefix(base)
            .unwrap_or(p)
            .to_string_lossy()
            .replace('\\', "/")
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(ManifestRow {
            id: r.id.clone(),
            image: rel(&r.image),
            scribble: r.scribble.as_deref().map(rel).unwrap_or_default(),
            mask: r.mask.as_deref().map(rel).unwrap_or_default(),
            split: r.split.to_string(),
        })
        .map_err(|e| Error::Data(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_image(path: &Path) -> Result<DynamicImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    image::load_from_memory(&bytes).map_err(|e| Error::format(path, e.to_string()))
}

/// Decodes an encoded scribble image. Single-channel files must hold only
/// `{0, 1, 2}`; colour files map pure blue to foreground, pure green to
/// background and everything else to unlabeled.
pub fn decode_scribble(bytes: &[u8]) -> Result<ScribbleMap> {
    let img = image::load_from_memory(bytes).map_err(|e| Error::Data(e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma8(g) => ScribbleMap::from_indices(h, w, g.as_raw()),
        DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA8(_) | DynamicImage::ImageLumaA16(_) => {
            Err(Error::Data("scribbles must be 8-bit single-channel or RGB".into()))
        }
        other => {
            let rgb = other.to_rgb8();
            let labels = rgb
                .pixels()
                .map(|p| match p.0 {
                    [0, 0, 255] => Label::Foreground,
                    [0, 255, 0] => Label::Background,
                    _ => Label::Unlabeled,
                })
                .collect();
            ScribbleMap::new(h, w, labels)
        }
    }
}

pub fn load_scribble(path: &Path) -> Result<ScribbleMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_scribble(&bytes).map_err(|e| match e {
        Error::Data(reason) | Error::InvalidArgument(reason) => Error::format(path, reason),
        other => other,
    })
}

/// Encodes as an 8-bit indexed PNG.
pub fn encode_scribble(scribble: &ScribbleMap) -> Result<Vec<u8>> {
    let (h, w) = scribble.dims();
    let img = GrayImage::from_raw(w as u32, h as u32, scribble.to_indices())
        .ok_or_else(|| Error::shape("scribble buffer size"))?;
    encode_png(DynamicImage::ImageLuma8(img))
}

pub fn save_scribble(path: &Path, scribble: &ScribbleMap) -> Result<()> {
    write_file(path, &encode_scribble(scribble)?)
}

fn encode_png(img: DynamicImage) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| Error::Data(e.to_string()))?;
    Ok(out.into_inner())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// RGB image as `[1, 3, H, W]` in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor> {
    Ok(rgb_to_tensor(&read_image(path)?.to_rgb8()))
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros([1, 3, h, w]);
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            let i = t.index(0, c, y as usize, x as usize);
            t.data_mut()[i] = f64::from(p.0[c]) / 255.0;
        }
    }
    t
}

pub fn tensor_to_rgb(t: &Tensor) -> RgbImage {
    let (h, w) = (t.h(), t.w());
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c| to_u8(t.at(0, c, y as usize, x as usize));
        image::Rgb([px(0), px(1), px(2)])
    })
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_image(path: &Path, image: &Tensor) -> Result<()> {
    write_file(path, &encode_png(DynamicImage::ImageRgb8(tensor_to_rgb(image)))?)
}

/// Ground-truth mask, binarised at 128.
pub fn load_mask(path: &Path) -> Result<Map> {
    let g = read_image(path)?.to_luma8();
    let (w, h) = (g.width() as usize, g.height() as usize);
    Map::new(
        h,
        w,
        g.as_raw().iter().map(|&v| f64::from(u8::from(v >= 128))).collect(),
    )
}

/// Grey-scale map (probability or mask) scaled to `0..=255`.
pub fn save_map(path: &Path, map: &Map) -> Result<()> {
    let (h, w) = map.dims();
    let img = GrayImage::from_raw(
        w as u32,
        h as u32,
        map.data().iter().map(|&v| to_u8(v)).collect(),
    )
    .ok_or_else(|| Error::shape("map buffer size"))?;
    write_file(path, &encode_png(DynamicImage::ImageLuma8(img))?)
}

/// Grey-scale image read back as values in `[0, 1]`.
pub fn load_map(path: &Path) -> Result<Map> {
    let g = read_image(path)?.to_luma8();
    let (w, h) = (g.width() as usize, g.height() as usize);
    Map::new(h, w, g.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect())
}

/// Blends the boundary of `prob >= threshold` into the image in red.
/// Boundary pixels are foreground pixels with a 4-neighbour outside the
/// mask or on the image edge.
pub fn overlay_boundary(image: &Tensor, prob: &Map, threshold: f64) -> Result<Tensor> {
    if (image.h(), image.w()) != prob.dims() || image.c() != 3 || image.n() != 1 {
        return Err(Error::shape("overlay needs a [1, 3, H, W] image matching the map"));
    }
    let (h, w) = prob.dims();
    let fg = |y: usize, x: usize| prob.get(y, x) >= threshold;
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            if !fg(y, x) {
                continue;
            }
            let edge = y == 0
                || x == 0
                || y + 1 == h
                || x + 1 == w
                || !fg(y - 1, x)
                || !fg(y + 1, x)
                || !fg(y, x - 1)
                || !fg(y, x + 1);
            if edge {
                for (c, target) in [1.0, 0.0, 0.0].into_iter().enumerate() {
                    let i = out.index(0, c, y, x);
                    out.data_mut()[i] = 0.5 * out.data()[i] + 0.5 * target;
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[1, 3, H, W]` in `[0, 1]`.
    pub image: Tensor,
    pub scribble: Option<ScribbleMap>,
    pub gt: Option<Map>,
}

impl Sample {
    /// Resizes everything to `size × size` (image and mask bilinear, the
    /// mask re-binarised; scribble nearest-neighbour).
    pub fn resized(&self, size: usize) -> Sample {
        Sample {
            id: self.id.clone(),
            image: tensor::resize(&self.image, size, size),
            scribble: self.scribble.as_ref().map(|s| s.resize_nearest(size, size)),
            gt: self
                .gt
                .as_ref()
                .map(|g| g.resize_bilinear(size, size).threshold(0.5)),
        }
    }
}

pub fn load_sample(record: &SampleRecord) -> Result<Sample> {
    let image = load_image(&record.image)?;
    let dims = (image.h(), image.w());
    let check = |what: &str, path: &Path, got: (usize, usize)| {
        if got != dims {
            Err(Error::format(
                path,
                format!("{what} is {got:?} but the image is {dims:?}"),
            ))
        } else {
            Ok(())
        }
    };
    let scribble = match &record.scribble {
        Some(p) => {
            let s = load_scribble(p)?;
            check("scribble", p, s.dims())?;
            Some(s)
        }
        None => None,
    };
    let gt = match &record.mask {
        Some(p) => {
            let m = load_mask(p)?;
            check("mask", p, m.dims())?;
            Some(m)
        }
        None => None,
    };
    Ok(Sample {
        id: record.id.clone(),
        image,
        scribble,
        gt,
    })
}

/// Square crop window in a `size × size` frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropWindow {
    pub x0: usize,
    pub y0: usize,
    pub side: usize,
}

impl CropWindow {
    pub fn full(size: usize) -> Self {
        CropWindow {
            x0: 0,
            y0: 0,
            side: size,
        }
    }

    pub fn center(size: usize, side: usize) -> Self {
        CropWindow {
            x0: (size - side) / 2,
            y0: (size - side) / 2,
            side,
        }
    }

    fn keeps_foreground(&self, scribble: &ScribbleMap) -> bool {
        (self.y0..self.y0 + self.side)
            .any(|y| (self.x0..self.x0 + self.side).any(|x| scribble.get(y, x) == Label::Foreground))
    }

    /// Crops a `[1, C, size, size]` tensor and resizes back (bilinear).
    pub fn apply_image(&self, image: &Tensor) -> Tensor {
        let size = image.h();
        if self.side == size {
            return image.clone();
        }
        let c = image.c();
        let mut crop = Tensor::zeros([1, c, self.side, self.side]);
        for ch in 0..c {
            for y in 0..self.side {
                for x in 0..self.side {
                    let i = crop.index(0, ch, y, x);
                    crop.data_mut()[i] = image.at(0, ch, self.y0 + y, self.x0 + x);
                }
            }
        }
        tensor::resize(&crop, size, size)
    }

    /// Crop plus bilinear resize, re-binarised at `0.5`.
    pub fn apply_mask(&self, mask: &Map) -> Map {
        let size = mask.height();
        if self.side == size {
            return mask.clone();
        }
        let crop = Map::from_fn(self.side, self.side, |y, x| mask.get(self.y0 + y, self.x0 + x));
        crop.resize_bilinear(size, size).threshold(0.5)
    }

    /// Crop plus nearest-neighbour resize.
    pub fn apply_scribble(&self, scribble: &ScribbleMap) -> ScribbleMap {
        let size = scribble.height();
        let mut out = ScribbleMap::unlabeled(size, size);
        for y in 0..size {
            let sy = self.y0 + nearest_source(y, self.side, size);
            for x in 0..size {
                let sx = self.x0 + nearest_source(x, self.side, size);
                out.set(y, x, scribble.get(sy, sx));
            }
        }
        out
    }
}

/// Draws a crop with side ratio in `crop_range` that keeps at least one
/// foreground scribble pixel; after 10 rejected draws, the centred crop of
/// the smallest allowed side.
pub fn sample_crop(scribble: &ScribbleMap, crop_range: (f64, f64), rng: &mut impl Rng) -> CropWindow {
    let size = scribble.height();
    let (lo, hi) = crop_range;
    let side_of = |r: f64| ((r * size as f64).round() as usize).clamp(1, size);
    for _ in 0..10 {
        let r = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let side = side_of(r);
        let window = CropWindow {
            x0: rng.random_range(0..=size - side),
            y0: rng.random_range(0..=size - side),
            side,
        };
        if window.keeps_foreground(scribble) {
            return window;
        }
    }
    CropWindow::center(size, side_of(lo))
}

pub fn validate_crop_range(range: (f64, f64)) -> Result<()> {
    let (lo, hi) = range;
    if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
        return Err(Error::Config(format!(
            "crop ratio range [{lo}, {hi}] must satisfy 0 < min <= max <= 1"
        )));
    }
    Ok(())
}

/// Resize to `size × size`, random crop, resize back. Deterministic in
/// `seed`.
pub fn train_transform(
    image: &Tensor,
    scribble: &ScribbleMap,
    size: usize,
    crop_range: (f64, f64),
    seed: u64,
) -> Result<(Tensor, ScribbleMap)> {
    validate_crop_range(crop_range)?;
    if (image.h(), image.w()) != scribble.dims() {
        return Err(Error::shape("image and scribble differ in size"));
    }
    let image = tensor::resize(image, size, size);
    let scribble = scribble.resize_nearest(size, size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let window = sample_crop(&scribble, crop_range, &mut rng);
    Ok((window.apply_image(&image), window.apply_scribble(&scribble)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScribbleStyle {
    /// One-pixel strokes: thinned foreground, a curve through the background.
    Thin,
    /// Eroded foreground and eroded background (most pixels labelled).
    Dense,
}

impl FromStr for ScribbleStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "thin" => Ok(ScribbleStyle::Thin),
            "dense" => Ok(ScribbleStyle::Dense),
            other => Err(Error::InvalidArgument(format!(
                "unknown scribble style `{other}` (expected thin or dense)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthOptions {
    pub n: usize,
    pub size: usize,
    pub seed: u64,
    pub style: ScribbleStyle,
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }
}

/// Generated sample in memory (before being written to disk).
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub image: Tensor,
    pub gt: Map,
    pub scribble: ScribbleMap,
}

/// One synthetic sample: one or two ellipses inside a margin that keeps
/// the image border in the background.
pub fn synth_sample(size: usize, seed: u64, style: ScribbleStyle) -> SynthSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let count = rng.random_range(1..=2);
    let ellipses: Vec<Ellipse> = (0..count)
        .map(|_| {
            let ry = rng.random_range(0.12..0.24) * s;
            let rx = rng.random_range(0.12..0.24) * s;
            let r = ry.max(rx);
            let lo = r + 0.1 * s;
            Ellipse {
                cy: rng.random_range(lo..(s - lo).max(lo + 1e-9)),
                cx: rng.random_range(lo..(s - lo).max(lo + 1e-9)),
                ry,
                rx,
                angle: rng.random_range(0.0..std::f64::consts::PI),
            }
        })
        .collect();
    let gt = Map::from_fn(size, size, |y, x| {
        let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
        f64::from(u8::from(ellipses.iter().any(|e| e.contains(py, px))))
    });

    let bg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.15..0.45));
    let fg: [f64; 3] = std::array::from_fn(|c| (bg[c] + rng.random_range(0.3..0.5)).min(1.0));
    let noise = Normal::new(0.0, 0.04).expect("valid sigma");
    let mut image = Tensor::zeros([1, 3, size, size]);
    for y in 0..size {
        for x in 0..size {
            let base = if gt.get(y, x) > 0.5 { fg } else { bg };
            for c in 0..3 {
                let v: f64 = base[c] + noise.sample(&mut rng);
                let i = image.index(0, c, y, x);
                // Quantise so the in-memory sample equals its PNG.
                image.data_mut()[i] = f64::from(to_u8(v)) / 255.0;
            }
        }
    }

    let fg_mask: Vec<bool> = gt.data().iter().map(|&v| v > 0.5).collect();
    let scribble = match style {
        ScribbleStyle::Dense => dense_scribble(&fg_mask, size),
        ScribbleStyle::Thin => thin_scribble(&fg_mask, size, &mut rng),
    };
    SynthSample {
        image,
        gt,
        scribble,
    }
}

fn erode(mask: &[bool], size: usize, radius: usize) -> Vec<bool> {
    let r = radius as isize;
    (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as isize, (i % size) as isize);
            (-r..=r).all(|dy| {
                (-r..=r).all(|dx| {
                    let (yy, xx) = (y + dy, x + dx);
                    yy >= 0
                        && xx >= 0
                        && (yy as usize) < size
                        && (xx as usize) < size
                        && mask[yy as usize * size + xx as usize]
                })
            })
        })
        .collect()
}

fn nearest_to_centroid(mask: &[bool], size: usize) -> usize {
    let idx: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    let n = idx.len() as f64;
    let cy = idx.iter().map(|&i| (i / size) as f64).sum::<f64>() / n;
    let cx = idx.iter().map(|&i| (i % size) as f64).sum::<f64>() / n;
    *idx.iter()
        .min_by(|&&a, &&b| {
            let d = |i: usize| ((i / size) as f64 - cy).powi(2) + ((i % size) as f64 - cx).powi(2);
            d(a).total_cmp(&d(b))
        })
        .expect("non-empty mask")
}

fn dense_scribble(fg: &[bool], size: usize) -> ScribbleMap {
    let inner = erode(fg, size, 2);
    let not_fg: Vec<bool> = fg.iter().map(|&b| !b).collect();
    let outer = erode(&not_fg, size, 2);
    let mut s = ScribbleMap::unlabeled(size, size);
    for i in 0..size * size {
        let (y, x) = (i / size, i % size);
        if inner[i] {
            s.set(y, x, Label::Foreground);
        } else if outer[i] {
            s.set(y, x, Label::Background);
        }
    }
    if s.count(Label::Foreground) == 0 {
        let i = nearest_to_centroid(fg, size);
        s.set(i / size, i % size, Label::Foreground);
    }
    s
}

/// Zhang–Suen thinning.
fn thin(mask: &[bool], size: usize) -> Vec<bool> {
    let mut m = mask.to_vec();
    let at = |m: &[bool], y: isize, x: isize| -> bool {
        y >= 0 && x >= 0 && (y as usize) < size && (x as usize) < size && m[y as usize * size + x as usize]
    };
    loop {
        let mut changed = false;
        for pass in 0..2 {
            let mut remove = Vec::new();
            for i in 0..size * size {
                if !m[i] {
                    continue;
                }
                let (y, x) = ((i / size) as isize, (i % size) as isize);
                // P2..P9 clockwise from north.
                let p = [
                    at(&m, y - 1, x),
                    at(&m, y - 1, x + 1),
                    at(&m, y, x + 1),
                    at(&m, y + 1, x + 1),
                    at(&m, y + 1, x),
                    at(&m, y + 1, x - 1),
                    at(&m, y, x - 1),
                    at(&m, y - 1, x - 1),
                ];
                let b = p.iter().filter(|&&v| v).count();
                let a = (0..8).filter(|&k| !p[k] && p[(k + 1) % 8]).count();
                let (c1, c2) = if pass == 0 {
                    (p[0] && p[2] && p[4], p[2] && p[4] && p[6])
                } else {
                    (p[0] && p[2] && p[6], p[0] && p[4] && p[6])
                };
                if (2..=6).contains(&b) && a == 1 && !c1 && !c2 {
                    remove.push(i);
                }
            }
            changed |= !remove.is_empty();
            for i in remove {
                m[i] = false;
            }
        }
        if !changed {
            return m;
        }
    }
}

fn thin_scribble(fg: &[bool], size: usize, rng: &mut impl Rng) -> ScribbleMap {
    let mut s = ScribbleMap::unlabeled(size, size);
    let skeleton = thin(&erode(fg, size, 1), size);
    let mut any = false;
    for (i, &on) in skeleton.iter().enumerate() {
        if on {
            s.set(i / size, i % size, Label::Foreground);
            any = true;
        }
    }
    if !any {
        let i = nearest_to_centroid(fg, size);
        s.set(i / size, i % size, Label::Foreground);
    }

    // Background: a sinusoid across the image, kept only where it stays
    // at least 3 px away from the foreground; the border frame backs it up.
    let not_fg: Vec<bool> = fg.iter().map(|&b| !b).collect();
    let safe = erode(&not_fg, size, 3);
    let s_f = size as f64;
    let amp = rng.random_range(0.03..0.08) * s_f;
    let freq = rng.random_range(1.0..3.0);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let band = if rng.random::<bool>() { 0.1 } else { 0.9 };
    let mut candidates: Vec<(usize, usize)> = (0..size)
        .map(|x| {
            let t = x as f64 / s_f;
            let y = band * s_f + amp * (std::f64::consts::TAU * freq * t + phase).sin();
            ((y.round().max(0.0) as usize).min(size - 1), x)
        })
        .collect();
    candidates.shuffle(rng);
    let mut placed = 0;
    for (y, x) in candidates {
        if safe[y * size + x] {
            s.set(y, x, Label::Background);
            placed += 1;
        }
    }
    if placed == 0 {
        for i in 0..size {
            for (y, x) in [(0, i), (size - 1, i), (i, 0), (i, size - 1)] {
                if !fg[y * size + x] {
                    s.set(y, x, Label::Background);
                }
            }
        }
    }
    s
}

/// Writes `n` synthetic training samples plus `manifest.csv` under `out`.
pub fn make_synthetic_dataset(out: &Path, opts: &SynthOptions) -> Result<Vec<SampleRecord>> {
    if opts.n == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    if opts.size < 8 {
        return Err(Error::InvalidArgument("synthetic images need size >= 8".into()));
    }
    let mut records = Vec::with_capacity(opts.n);
    for k in 0..opts.n {
        let id = format!("synth_{k:04}");
        let sample = synth_sample(opts.size, derive_seed(opts.seed, k as u64, 0), opts.style);
        let image = out.join("images").join(format!("{id}.png"));
        let scribble = out.join("scribbles").join(format!("{id}.png"));
        let mask = out.join("masks").join(format!("{id}.png"));
        save_image(&image, &sample.image)?;
        save_scribble(&scribble, &sample.scribble)?;
        save_map(&mask, &sample.gt)?;
        records.push(SampleRecord {
            id,
            image,
            scribble: Some(scribble),
            mask: Some(mask),
            split: Split::Train,
        });
    }
    write_manifest(&out.join("manifest.csv"), &records)?;
    Ok(records)
}
