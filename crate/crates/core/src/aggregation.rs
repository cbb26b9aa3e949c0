//! Pixel softmax and pooling of pixel logits into slide logits.
//!
//! The benign slide logit is the mean benign pixel logit. The malign slide
//! logit is the mean of the `k` largest malign pixel logits, with
//! `k = max(1, round(eta / 100 * h * w))`: `eta = 100` recovers the mean and a
//! small `eta` recovers the max.

use std::cmp::Ordering;
use std::path::Path;

use crate::io;
use crate::{Error, Result};

/// Two-class pixel logits, stored channel-major: the benign plane followed by
/// the malign plane, each row-major `height x width`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl LogitMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument("logit map must be non-empty".into()));
        }
        if values.len() != 2 * height * width {
            return Err(Error::LengthMismatch {
                expected: 2 * height * width,
                actual: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("logits must be finite".into()));
        }
        Ok(LogitMap {
            height,
            width,
            values,
        })
    }

    /// Builds a map from separate benign and malign planes.
    pub fn from_planes(
        height: usize,
        width: usize,
        benign: &[f64],
        malign: &[f64],
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(2 * height * width);
        values.extend_from_slice(benign);
        values.extend_from_slice(malign);
        Self::new(height, width, values)
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        LogitMap {
            height,
            width,
            values: vec![0.0; 2 * height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn benign(&self) -> &[f64] {
        &self.values[..self.height * self.width]
    }

    pub fn malign(&self) -> &[f64] {
        &self.values[self.height * self.width..]
    }

    pub fn get(&self, class: usize, row: usize, col: usize) -> f64 {
        self.values[(class * self.height + row) * self.width + col]
    }

    pub fn set(&mut self, class: usize, row: usize, col: usize, value: f64) {
        self.values[(class * self.height + row) * self.width + col] = value;
    }
}

/// Per-pixel malign probability.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl ProbMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::LengthMismatch {
                expected: height * width,
                actual: values.len(),
            });
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "probability {v} outside [0, 1]"
            )));
        }
        Ok(ProbMap {
            height,
            width,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        ProbMap {
            height,
            width,
            values: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// FNV-1a over the bit patterns of the values and the shape.
    pub fn checksum(&self) -> u64 {
        let mut hash = 0xcbf2_9ce4_8422_2325u64;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                hash ^= b as u64;
                hash = hash.wrapping_mul(0x0100_0000_01b3);
            }
        };
        feed(&(self.height as u64).to_le_bytes());
        feed(&(self.width as u64).to_le_bytes());
        for v in &self.values {
            feed(&v.to_bits().to_le_bytes());
        }
        hash
    }

    /// Writes `<stem>.pgm` (values `round(255 q)`) and the `<stem>.f32` sidecar.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let bytes: Vec<u8> = self
            .values
            .iter()
            .map(|v| (255.0 * v).round().clamp(0.0, 255.0) as u8)
            .collect();
        io::write_pgm(
            &dir.join(format!("{stem}.pgm")),
            self.width,
            self.height,
            &bytes,
        )?;
        io::write_f32_le(
            &dir.join(format!("{stem}.f32")),
            self.values.iter().map(|&v| v as f32),
        )
    }

    /// Loads the float sidecar written by [`ProbMap::save`]; the shape is taken
    /// from the PGM header.
    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let (width, height, _) = io::read_pgm(&dir.join(format!("{stem}.pgm")))?;
        let values = io::read_f32_le(&dir.join(format!("{stem}.f32")))?;
        Self::new(height, width, values.into_iter().map(f64::from).collect())
    }
}

/// Slide (or patch) level logits and the malign pixels that produced `l1`.
#[derive(Debug, Clone, PartialEq)]
pub struct SlideLogits {
    pub l0: f64,
    pub l1: f64,
    pub eta: f64,
    /// Row-major flat indices of the pixels averaged into `l1`, ascending.
    pub top_set: Vec<usize>,
}

impl SlideLogits {
    pub fn top_coordinates(&self, width: usize) -> Vec<(usize, usize)> {
        self.top_set
            .iter()
            .map(|&i| (i / width, i % width))
            .collect()
    }
}

/// Malign probability `e^{l1} / (e^{l0} + e^{l1})` of a single logit pair.
pub fn sigmoid_pair(l0: f64, l1: f64) -> f64 {
    let d = l1 - l0;
    if d >= 0.0 {
        1.0 / (1.0 + (-d).exp())
    } else {
        let e = d.exp();
        e / (1.0 + e)
    }
}

pub fn pixel_softmax(logits: &LogitMap) -> ProbMap {
    let values = logits
        .benign()
        .iter()
        .zip(logits.malign())
        .map(|(&l0, &l1)| sigmoid_pair(l0, l1))
        .collect();
    ProbMap {
        height: logits.height,
        width: logits.width,
        values,
    }
}

/// Number of pixels pooled into `l1` for a map of `pixels` pixels.
pub fn top_k_count(eta: f64, pixels: usize) -> usize {
    ((eta / 100.0 * pixels as f64).round() as usize).clamp(1, pixels)
}

fn check_eta(eta: f64) -> Result<()> {
    if eta > 0.0 && eta <= 100.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "eta = {eta} outside (0, 100]"
        )))
    }
}

/// Pools a logit map into slide logits. Ties at the top-k cutoff go to the
/// pixel that comes first in row-major order.
pub fn aggregate(logits: &LogitMap, eta: f64) -> Result<SlideLogits> {
    check_eta(eta)?;
    let n = logits.height * logits.width;
    let l0 = logits.benign().iter().sum::<f64>() / n as f64;

    let malign = logits.malign();
    let k = top_k_count(eta, n);
    let mut order: Vec<usize> = (0..n).collect();
    let by_rank = |&a: &usize, &b: &usize| match malign[b].partial_cmp(&malign[a]) {
        Some(Ordering::Equal) | None => a.cmp(&b),
        Some(o) => o,
    };
    if k < n {
        order.select_nth_unstable_by(k - 1, by_rank);
        order.truncate(k);
    }
    order.sort_unstable();
    let l1 = order.iter().map(|&i| malign[i]).sum::<f64>() / k as f64;

    Ok(SlideLogits {
        l0,
        l1,
        eta,
        top_set: order,
    })
}

/// Routes slide-logit gradients `(dl0, dl1)` back to pixel logits, treating
/// the top set as fixed.
pub fn aggregate_backward(
    slide_grad: (f64, f64),
    slide_logits: &SlideLogits,
    shape: (usize, usize),
) -> Result<LogitMap> {
    let (height, width) = shape;
    let n = height * width;
    let k = slide_logits.top_set.len();
    if n == 0 || k == 0 || k > n || slide_logits.top_set.iter().any(|&i| i >= n) {
        return Err(Error::ShapeMismatch {
            expected: shape,
            actual: (k, n),
        });
    }
    let (dl0, dl1) = slide_grad;
    let mut grad = LogitMap::zeros(height, width);
    grad.values[..n].fill(dl0 / n as f64);
    let share = dl1 / k as f64;
    for &i in &slide_logits.top_set {
        grad.values[n + i] = share;
    }
    Ok(grad)
}

/// Slide class probabilities `(q0, q1)`.
pub fn slide_class_probs(slide_logits: &SlideLogits) -> (f64, f64) {
    let q1 = sigmoid_pair(slide_logits.l0, slide_logits.l1);
    (1.0 - q1, q1)
}
