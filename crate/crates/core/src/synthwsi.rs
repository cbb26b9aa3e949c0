//! Synthetic slides with exact lesion masks.
//!
//! A slide is a smooth value-noise texture per channel. Malign slides carry
//! one or more elliptical lesions whose pixels are brightened by the lesion
//! contrast on a single channel; the mask marks those pixels exactly. Patches
//! cut from a slide inherit its label regardless of what they contain, which
//! is where the label noise comes from.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::io;
use crate::rng::{self, Rng};
use crate::sampler::PatchDistribution;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Benign,
    Malign,
}

impl Label {
    pub fn class(self) -> usize {
        match self {
            Label::Benign => 0,
            Label::Malign => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Benign => "benign",
            Label::Malign => "malign",
        }
    }
}

/// Generator parameters. Every field has a default so configs may be partial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub slide_count: usize,
    /// Fraction of benign slides; assigned by count.
    pub r: f64,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub lesion_fraction_min: f64,
    pub lesion_fraction_max: f64,
    pub blob_count_min: usize,
    pub blob_count_max: usize,
    /// Amplitude of the smooth background texture.
    pub noise_scale: f64,
    /// Lattice spacing of the texture, in pixels.
    pub correlation_length: f64,
    /// Amplitude of independent per-pixel grain.
    pub grain: f64,
    /// Mean shift of lesion pixels on `lesion_channel`.
    pub lesion_contrast: f64,
    pub lesion_channel: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            slide_count: 20,
            r: 0.5,
            height: 128,
            width: 128,
            channels: 3,
            lesion_fraction_min: 0.02,
            lesion_fraction_max: 0.02,
            blob_count_min: 1,
            blob_count_max: 2,
            noise_scale: 0.15,
            correlation_length: 6.0,
            grain: 0.05,
            lesion_contrast: 0.25,
            lesion_channel: 0,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Infeasible(msg));
        if self.slide_count == 0 || self.height == 0 || self.width == 0 || self.channels == 0 {
            return bad("slide count, size and channels must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.r) {
            return bad(format!("benign fraction r = {} outside [0, 1]", self.r));
        }
        if !(self.lesion_fraction_min > 0.0 && self.lesion_fraction_min <= self.lesion_fraction_max)
        {
            return bad(format!(
                "lesion fraction range [{}, {}] is empty or non-positive",
                self.lesion_fraction_min, self.lesion_fraction_max
            ));
        }
        if self.lesion_fraction_max > 1.0 {
            return bad(format!(
                "lesion fraction {} exceeds the slide area",
                self.lesion_fraction_max
            ));
        }
        if self.blob_count_min == 0 || self.blob_count_min > self.blob_count_max {
            return bad("blob count range must satisfy 1 <= min <= max".into());
        }
        if self.lesion_contrast <= 0.0 {
            return bad("lesion contrast must be positive".into());
        }
        if self.lesion_channel >= self.channels {
            return bad(format!(
                "lesion channel {} out of range for {} channels",
                self.lesion_channel, self.channels
            ));
        }
        if self.correlation_length < 1.0 {
            return bad("correlation length must be at least one pixel".into());
        }
        Ok(())
    }

    pub fn benign_count(&self) -> usize {
        (self.r * self.slide_count as f64).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSlide {
    pub id: usize,
    pub seed: u64,
    pub label: Label,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Channel-major `channels x height x width`, values in [0, 1].
    pub pixels: Vec<f32>,
    /// Row-major, 1 on lesion pixels.
    pub truth_mask: Vec<u8>,
}

impl SyntheticSlide {
    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn lesion_pixels(&self) -> usize {
        self.truth_mask.iter().filter(|&&m| m != 0).count()
    }

    pub fn lesion_fraction(&self) -> f64 {
        self.lesion_pixels() as f64 / self.pixel_count() as f64
    }

    pub fn pixel(&self, channel: usize, row: usize, col: usize) -> f32 {
        self.pixels[(channel * self.height + row) * self.width + col]
    }

    fn mask_integral(&self) -> MaskIntegral {
        MaskIntegral::new(&self.truth_mask, self.height, self.width)
    }
}

/// Summed-area table of a binary mask.
struct MaskIntegral {
    width: usize,
    table: Vec<u32>,
}

impl MaskIntegral {
    fn new(mask: &[u8], height: usize, width: usize) -> Self {
        let stride = width + 1;
        let mut table = vec![0u32; (height + 1) * stride];
        for y in 0..height {
            let mut row = 0u32;
            for x in 0..width {
                row += (mask[y * width + x] != 0) as u32;
                table[(y + 1) * stride + x + 1] = table[y * stride + x + 1] + row;
            }
        }
        MaskIntegral { width, table }
    }

    fn count(&self, top: usize, left: usize, size: usize) -> u32 {
        let s = self.width + 1;
        let (b, r) = (top + size, left + size);
        self.table[b * s + r] + self.table[top * s + left]
            - self.table[top * s + r]
            - self.table[b * s + left]
    }
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Smooth noise in [-1, 1] on a lattice of the given spacing.
fn value_noise(height: usize, width: usize, spacing: f64, rng: &mut Rng) -> Vec<f64> {
    let gh = (height as f64 / spacing).ceil() as usize + 2;
    let gw = (width as f64 / spacing).ceil() as usize + 2;
    let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        let gy = y as f64 / spacing;
        let (iy, fy) = (gy.floor() as usize, smoothstep(gy.fract()));
        for x in 0..width {
            let gx = x as f64 / spacing;
            let (ix, fx) = (gx.floor() as usize, smoothstep(gx.fract()));
            let at = |r: usize, c: usize| lattice[r * gw + c];
            let top = at(iy, ix) * (1.0 - fx) + at(iy, ix + 1) * fx;
            let bottom = at(iy + 1, ix) * (1.0 - fx) + at(iy + 1, ix + 1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    angle: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.angle.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }

    fn pixels(&self, height: usize, width: usize) -> Vec<usize> {
        let y0 = (self.cy - self.a).floor().max(0.0) as usize;
        let y1 = ((self.cy + self.a).ceil() as usize).min(height);
        let x0 = (self.cx - self.a).floor().max(0.0) as usize;
        let x1 = ((self.cx + self.a).ceil() as usize).min(width);
        let mut out = Vec::new();
        for y in y0..y1 {
            for x in x0..x1 {
                if self.contains(y as f64 + 0.5, x as f64 + 0.5) {
                    out.push(y * width + x);
                }
            }
        }
        out
    }
}

fn lesion_mask(spec: &DatasetSpec, rng: &mut Rng) -> Vec<u8> {
    let (h, w) = (spec.height, spec.width);
    let n = h * w;
    let fraction = if spec.lesion_fraction_max > spec.lesion_fraction_min {
        rng.gen_range(spec.lesion_fraction_min..=spec.lesion_fraction_max)
    } else {
        spec.lesion_fraction_min
    };
    let target = (fraction * n as f64).round();
    if target >= n as f64 {
        return vec![1; n];
    }
    let blobs = rng.gen_range(spec.blob_count_min..=spec.blob_count_max);
    let shares: Vec<f64> = (0..blobs).map(|_| rng.gen_range(0.5..1.5)).collect();
    let share_total: f64 = shares.iter().sum();

    let mut mask = vec![0u8; n];
    for share in shares {
        let area = target * share / share_total;
        let ratio = rng.gen_range(0.6..1.0);
        let a = (area / (std::f64::consts::PI * ratio)).sqrt();
        let b = ratio * a;
        let angle = rng.gen_range(0.0..std::f64::consts::PI);
        let fit = |extent: usize| {
            let lo = a.min(extent as f64 / 2.0);
            (lo, (extent as f64 - lo).max(lo))
        };
        let (ylo, yhi) = fit(h);
        let (xlo, xhi) = fit(w);
        let mut placed = None;
        for _ in 0..100 {
            let e = Ellipse {
                cy: if yhi > ylo {
                    rng.gen_range(ylo..yhi)
                } else {
                    ylo
                },
                cx: if xhi > xlo {
                    rng.gen_range(xlo..xhi)
                } else {
                    xlo
                },
                a,
                b,
                angle,
            };
            let px = e.pixels(h, w);
            let clear = px.iter().all(|&i| mask[i] == 0);
            placed = Some(px);
            if clear {
                break;
            }
        }
        for i in placed.unwrap_or_default() {
            mask[i] = 1;
        }
    }
    mask
}

fn generate_slide(spec: &DatasetSpec, id: usize, seed: u64, label: Label) -> SyntheticSlide {
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    let mut rng = rng::rng_from(seed);
    let truth_mask = match label {
        Label::Benign => vec![0u8; h * w],
        Label::Malign => lesion_mask(spec, &mut rng),
    };
    let mut pixels = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        let base = 0.45 + 0.1 * ch as f64 / c as f64;
        let texture = value_noise(h, w, spec.correlation_length, &mut rng);
        for (i, t) in texture.into_iter().enumerate() {
            let mut v = base + spec.noise_scale * t + spec.grain * rng.gen_range(-1.0..1.0);
            if ch == spec.lesion_channel && truth_mask[i] != 0 {
                v += spec.lesion_contrast;
            }
            pixels.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    SyntheticSlide {
        id,
        seed,
        label,
        height: h,
        width: w,
        channels: c,
        pixels,
        truth_mask,
    }
}

/// Generates the dataset described by `spec`; slides are independent given
/// their derived seeds.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<SyntheticSlide>> {
    spec.validate()?;
    let mut labels: Vec<Label> = (0..spec.slide_count)
        .map(|i| {
            if i < spec.benign_count() {
                Label::Benign
            } else {
                Label::Malign
            }
        })
        .collect();
    labels.shuffle(&mut rng::rng_from(rng::derive(spec.seed, u64::MAX)));
    Ok(labels
        .into_iter()
        .enumerate()
        .map(|(id, label)| generate_slide(spec, id, rng::derive(spec.seed, id as u64), label))
        .collect())
}

/// A square patch cut from a slide.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub size: usize,
    pub channels: usize,
    /// Channel-major `channels x size x size`.
    pub pixels: Vec<f32>,
    pub inherited_label: Label,
    /// Evaluation only: the slide mask under the patch.
    pub truth_window: Vec<u8>,
    pub slide_id: usize,
    pub center: (usize, usize),
}

impl Patch {
    pub fn is_lesion_free(&self) -> bool {
        self.truth_window.iter().all(|&m| m == 0)
    }
}

/// Top-left corner of the `size` window around `center`, shifted inward so the
/// window lies inside a `height x width` slide.
pub fn window_origin(
    center: (usize, usize),
    size: usize,
    height: usize,
    width: usize,
) -> (usize, usize) {
    let half = size / 2;
    let top = center.0.saturating_sub(half).min(height - size);
    let left = center.1.saturating_sub(half).min(width - size);
    (top, left)
}

pub fn extract_patch(slide: &SyntheticSlide, center: (usize, usize), size: usize) -> Result<Patch> {
    if size == 0 || size > slide.height || size > slide.width {
        return Err(Error::InvalidArgument(format!(
            "patch size {size} does not fit a {}x{} slide",
            slide.height, slide.width
        )));
    }
    if center.0 >= slide.height || center.1 >= slide.width {
        return Err(Error::InvalidArgument(format!(
            "centre {center:?} outside slide"
        )));
    }
    let (top, left) = window_origin(center, size, slide.height, slide.width);
    let mut pixels = Vec::with_capacity(slide.channels * size * size);
    for ch in 0..slide.channels {
        for y in top..top + size {
            let row = (ch * slide.height + y) * slide.width;
            pixels.extend_from_slice(&slide.pixels[row + left..row + left + size]);
        }
    }
    let mut truth_window = Vec::with_capacity(size * size);
    for y in top..top + size {
        truth_window.extend_from_slice(
            &slide.truth_mask[y * slide.width + left..y * slide.width + left + size],
        );
    }
    Ok(Patch {
        size,
        channels: slide.channels,
        pixels,
        inherited_label: slide.label,
        truth_window,
        slide_id: slide.id,
        center,
    })
}

/// Monte-Carlo estimate of the label-noise rate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaEstimate {
    pub gamma: f64,
    pub std_error: f64,
    pub draws: usize,
}

/// Fraction of `n` patches drawn from `dist` whose window holds no lesion.
pub fn empirical_gamma(
    slide: &SyntheticSlide,
    size: usize,
    dist: &PatchDistribution,
    n: usize,
    rng: &mut Rng,
) -> Result<GammaEstimate> {
    check_gamma_inputs(slide, size, dist)?;
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one draw".into()));
    }
    let integral = slide.mask_integral();
    let empty = (0..n)
        .filter(|_| {
            let (top, left) = window_origin(dist.draw(rng), size, slide.height, slide.width);
            integral.count(top, left, size) == 0
        })
        .count();
    let gamma = empty as f64 / n as f64;
    Ok(GammaEstimate {
        gamma,
        std_error: (gamma * (1.0 - gamma) / n as f64).sqrt(),
        draws: n,
    })
}

/// Exact probability that a patch drawn from `dist` holds no lesion.
pub fn exact_gamma(slide: &SyntheticSlide, size: usize, dist: &PatchDistribution) -> Result<f64> {
    check_gamma_inputs(slide, size, dist)?;
    let integral = slide.mask_integral();
    let mut gamma = 0.0;
    for y in 0..slide.height {
        for x in 0..slide.width {
            let (top, left) = window_origin((y, x), size, slide.height, slide.width);
            if integral.count(top, left, size) == 0 {
                gamma += dist.weight(y, x);
            }
        }
    }
    Ok(gamma)
}

fn check_gamma_inputs(slide: &SyntheticSlide, size: usize, dist: &PatchDistribution) -> Result<()> {
    if slide.label != Label::Malign {
        return Err(Error::InvalidArgument(format!(
            "label noise is defined on malign slides; slide {} is benign",
            slide.id
        )));
    }
    if size == 0 || size > slide.height || size > slide.width {
        return Err(Error::InvalidArgument(format!(
            "patch size {size} does not fit the slide"
        )));
    }
    if (dist.height(), dist.width()) != (slide.height, slide.width) {
        return Err(Error::ShapeMismatch {
            expected: (slide.height, slide.width),
            actual: (dist.height(), dist.width()),
        });
    }
    Ok(())
}

/// Source coordinate of output pixel `(y, x)` under dihedral element
/// `transform` (0..8): `transform % 4` quarter turns, then a horizontal
/// mirror when `transform >= 4`.
pub fn dihedral_source(transform: usize, size: usize, y: usize, x: usize) -> (usize, usize) {
    let last = size - 1;
    let (mut y, mut x) = if transform >= 4 {
        (y, last - x)
    } else {
        (y, x)
    };
    for _ in 0..transform % 4 {
        // output of a clockwise quarter turn at (y, x) reads input (last - x, y)
        (y, x) = (last - x, y);
    }
    (y, x)
}

/// Applies dihedral element `transform` to pixels and truth window alike.
pub fn apply_dihedral(patch: &Patch, transform: usize) -> Result<Patch> {
    if patch.pixels.len() != patch.channels * patch.size * patch.size {
        return Err(Error::InvalidArgument("patch is not square".into()));
    }
    let s = patch.size;
    let mut out = patch.clone();
    for y in 0..s {
        for x in 0..s {
            let (sy, sx) = dihedral_source(transform % 8, s, y, x);
            out.truth_window[y * s + x] = patch.truth_window[sy * s + sx];
            for ch in 0..patch.channels {
                out.pixels[(ch * s + y) * s + x] = patch.pixels[(ch * s + sy) * s + sx];
            }
        }
    }
    Ok(out)
}

/// Random rotation / mirroring, uniform over the eight dihedral elements.
pub fn augment(patch: &Patch, rng: &mut Rng) -> Result<Patch> {
    apply_dihedral(patch, rng.gen_range(0..8))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SlideRecord {
    id: usize,
    label: Label,
    seed: u64,
    pixels: String,
    mask: String,
    lesion_pixels: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetIndex {
    spec: DatasetSpec,
    /// Raw tensor layout of the pixel files.
    layout: String,
    slides: Vec<SlideRecord>,
}

pub const INDEX_FILE: &str = "index.json";

/// Writes `index.json`, one `slide_XXXX.f32` (little-endian, height x width x
/// channels interleaved) and one `mask_XXXX.pgm` per slide.
pub fn save_dataset(dir: &Path, spec: &DatasetSpec, slides: &[SyntheticSlide]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut records = Vec::with_capacity(slides.len());
    for slide in slides {
        let pixels = format!("slide_{:04}.f32", slide.id);
        let mask = format!("mask_{:04}.pgm", slide.id);
        let (h, w, c) = (slide.height, slide.width, slide.channels);
        io::write_f32_le(
            &dir.join(&pixels),
            (0..h * w)
                .flat_map(|i| (0..c).map(move |ch| (ch, i)))
                .map(|(ch, i)| slide.pixels[ch * h * w + i]),
        )?;
        let mask_bytes: Vec<u8> = slide
            .truth_mask
            .iter()
            .map(|&m| if m != 0 { 255 } else { 0 })
            .collect();
        io::write_pgm(&dir.join(&mask), w, h, &mask_bytes)?;
        records.push(SlideRecord {
            id: slide.id,
            label: slide.label,
            seed: slide.seed,
            pixels,
            mask,
            lesion_pixels: slide.lesion_pixels(),
        });
    }
    let index = DatasetIndex {
        spec: spec.clone(),
        layout: "hwc".into(),
        slides: records,
    };
    fs::write(dir.join(INDEX_FILE), serde_json::to_string_pretty(&index)?)?;
    Ok(())
}

/// Loads a dataset written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<(DatasetSpec, Vec<SyntheticSlide>)> {
    let index_path: PathBuf = dir.join(INDEX_FILE);
    let index: DatasetIndex = serde_json::from_slice(&fs::read(&index_path)?)?;
    if index.layout != "hwc" {
        return Err(Error::Format(format!(
            "unsupported layout {}",
            index.layout
        )));
    }
    let spec = index.spec;
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    let mut slides = Vec::with_capacity(index.slides.len());
    for rec in index.slides {
        let raw = io::read_f32_le(&dir.join(&rec.pixels))?;
        if raw.len() != h * w * c {
            return Err(Error::LengthMismatch {
                expected: h * w * c,
                actual: raw.len(),
            });
        }
        let mut pixels = vec![0f32; h * w * c];
        for i in 0..h * w {
            for ch in 0..c {
                pixels[ch * h * w + i] = raw[i * c + ch];
            }
        }
        let (mw, mh, mask) = io::read_pgm(&dir.join(&rec.mask))?;
        if (mh, mw) != (h, w) {
            return Err(Error::ShapeMismatch {
                expected: (h, w),
                actual: (mh, mw),
            });
        }
        slides.push(SyntheticSlide {
            id: rec.id,
            seed: rec.seed,
            label: rec.label,
            height: h,
            width: w,
            channels: c,
            pixels,
            truth_mask: mask.into_iter().map(|m| (m != 0) as u8).collect(),
        });
    }
    Ok((spec, slides))
}
