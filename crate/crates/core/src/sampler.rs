//! Patch sampling inside a slide, slide scheduling across slides, and the
//! shuffle buffer between sampling and batch construction.

use std::fmt::Write as _;

use rand::Rng as _;

use crate::aggregation::ProbMap;
use crate::rng::Rng;
use crate::synthwsi::Label;
use crate::{Error, Result};

/// Sampling distribution over patch centres, `P(i, j) ∝ Q(i, j)^alpha`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchDistribution {
    pub slide_id: usize,
    pub alpha: f64,
    height: usize,
    width: usize,
    weights: Vec<f64>,
    cumulative: Vec<f64>,
}

impl PatchDistribution {
    pub fn uniform(slide_id: usize, height: usize, width: usize) -> Self {
        let n = height * width;
        Self::from_weights(slide_id, 0.0, height, width, vec![1.0 / n as f64; n])
    }

    fn from_weights(
        slide_id: usize,
        alpha: f64,
        height: usize,
        width: usize,
        weights: Vec<f64>,
    ) -> Self {
        let cumulative = weights
            .iter()
            .scan(0.0, |acc, &w| {
                *acc += w;
                Some(*acc)
            })
            .collect();
        PatchDistribution {
            slide_id,
            alpha,
            height,
            width,
            weights,
            cumulative,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Row-major weights, summing to one.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.width + col]
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self
            .weights
            .iter()
            .filter(|&&w| w > 0.0)
            .map(|&w| w * w.ln())
            .sum::<f64>()
    }

    /// One inverse-CDF draw over the row-major weights.
    pub fn draw(&self, rng: &mut Rng) -> (usize, usize) {
        let total = *self.cumulative.last().expect("non-empty distribution");
        let u = rng.gen::<f64>() * total;
        let idx = self
            .cumulative
            .partition_point(|&c| c <= u)
            .min(self.weights.len() - 1);
        (idx / self.width, idx % self.width)
    }
}

/// Builds `P(i, j) = Q^alpha / sum Q^alpha` with `0^0 = 1`; an all-zero map
/// under `alpha > 0` falls back to uniform.
pub fn patch_distribution(
    slide_id: usize,
    prob_map: &ProbMap,
    alpha: f64,
) -> Result<PatchDistribution> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "alpha = {alpha} must be >= 0"
        )));
    }
    let (h, w) = prob_map.shape();
    if alpha == 0.0 {
        return Ok(PatchDistribution::uniform(slide_id, h, w));
    }
    let mut weights: Vec<f64> = prob_map.values().iter().map(|q| q.powf(alpha)).collect();
    let total: f64 = weights.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        return Ok(PatchDistribution::uniform(slide_id, h, w));
    }
    weights.iter_mut().for_each(|v| *v /= total);
    Ok(PatchDistribution::from_weights(
        slide_id, alpha, h, w, weights,
    ))
}

/// `n` i.i.d. patch centres drawn from `dist`.
pub fn sample_patch_centers(
    dist: &PatchDistribution,
    n: usize,
    rng: &mut Rng,
) -> Vec<(usize, usize)> {
    (0..n).map(|_| dist.draw(rng)).collect()
}

/// Slide scheduling state of the mapping worker.
///
/// An epoch is `slide_count` consecutive selections. A slide not visited
/// during the last `N - 1` complete epochs is overdue and is scheduled ahead
/// of the random draw, oldest first, which bounds the gap between two visits
/// of any slide to `N` epochs.
#[derive(Debug, Clone)]
pub struct SlideSelectionState {
    labels: Vec<Label>,
    pixel_counts: Vec<usize>,
    map_sums: Vec<Option<f64>>,
    last_visit: Vec<Option<u64>>,
    visits: Vec<u64>,
    staleness_bound: u64,
    processed: u64,
    malign_ids: Vec<usize>,
    benign_ids: Vec<usize>,
}

/// Default probability assumed for slides without a computed map.
pub const DEFAULT_MAP_VALUE: f64 = 0.5;

impl SlideSelectionState {
    pub fn new(labels: Vec<Label>, pixel_counts: Vec<usize>, staleness_bound: u64) -> Result<Self> {
        if labels.len() != pixel_counts.len() {
            return Err(Error::LengthMismatch {
                expected: labels.len(),
                actual: pixel_counts.len(),
            });
        }
        if staleness_bound == 0 {
            return Err(Error::InvalidArgument(
                "staleness bound N must be >= 1".into(),
            ));
        }
        let ids_with = |label| {
            labels
                .iter()
                .enumerate()
                .filter(|(_, &l)| l == label)
                .map(|(i, _)| i)
                .collect::<Vec<_>>()
        };
        let malign_ids = ids_with(Label::Malign);
        let benign_ids = ids_with(Label::Benign);
        if malign_ids.is_empty() {
            return Err(Error::EmptyClass("malign"));
        }
        if benign_ids.is_empty() {
            return Err(Error::EmptyClass("benign"));
        }
        let n = labels.len();
        Ok(SlideSelectionState {
            labels,
            pixel_counts,
            map_sums: vec![None; n],
            last_visit: vec![None; n],
            visits: vec![0; n],
            staleness_bound,
            processed: 0,
            malign_ids,
            benign_ids,
        })
    }

    pub fn slide_count(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn staleness_bound(&self) -> u64 {
        self.staleness_bound
    }

    pub fn epoch(&self) -> u64 {
        self.processed / self.labels.len() as u64
    }

    pub fn processed(&self) -> u64 {
        self.processed
    }

    pub fn visits(&self) -> &[u64] {
        &self.visits
    }

    pub fn last_visit(&self) -> &[Option<u64>] {
        &self.last_visit
    }

    /// Stores the latest map sum of `slide` for benign-slide weighting.
    pub fn record_map(&mut self, slide: usize, map: &ProbMap) {
        self.map_sums[slide] = Some(map.sum());
    }

    fn map_sum(&self, slide: usize) -> f64 {
        self.map_sums[slide].unwrap_or(DEFAULT_MAP_VALUE * self.pixel_counts[slide] as f64)
    }

    /// `P(s | benign) ∝ sum_ij Q(s)_ij` over benign slides, as `(slide, p)`.
    pub fn benign_slide_distribution(&self) -> Vec<(usize, f64)> {
        let sums: Vec<f64> = self.benign_ids.iter().map(|&s| self.map_sum(s)).collect();
        let total: f64 = sums.iter().sum();
        if total <= 0.0 {
            let p = 1.0 / self.benign_ids.len() as f64;
            return self.benign_ids.iter().map(|&s| (s, p)).collect();
        }
        self.benign_ids
            .iter()
            .zip(sums)
            .map(|(&s, v)| (s, v / total))
            .collect()
    }

    /// Slides currently overdue, oldest visit first (never visited first of
    /// all), ties by id.
    pub fn overdue(&self) -> Vec<usize> {
        let epoch = self.epoch();
        let mut due: Vec<usize> = (0..self.labels.len())
            .filter(|&s| match self.last_visit[s] {
                None => true,
                Some(last) => last + self.staleness_bound <= epoch,
            })
            .collect();
        due.sort_by_key(|&s| (self.last_visit[s].map_or(0, |v| v + 1), s));
        due
    }

    /// Picks the next slide to map and records the visit.
    ///
    /// Overdue slides come first; otherwise a fair coin chooses between a
    /// uniformly drawn malign slide and a benign slide drawn from
    /// [`Self::benign_slide_distribution`].
    pub fn next_slide(&mut self, rng: &mut Rng) -> usize {
        let slide = match self.overdue().first() {
            Some(&s) => s,
            None => {
                if rng.gen::<f64>() < 0.5 {
                    self.malign_ids[rng.gen_range(0..self.malign_ids.len())]
                } else {
                    let dist = self.benign_slide_distribution();
                    let u = rng.gen::<f64>();
                    let mut acc = 0.0;
                    let mut chosen = dist.last().expect("benign slides").0;
                    for (s, p) in dist {
                        acc += p;
                        if u < acc {
                            chosen = s;
                            break;
                        }
                    }
                    chosen
                }
            }
        };
        self.last_visit[slide] = Some(self.epoch());
        self.visits[slide] += 1;
        self.processed += 1;
        slide
    }

    /// CSV rows `slide_id,label,visits,last_visit_epoch,buffer_fill`.
    pub fn stats_csv(&self, buffer_fill: usize) -> String {
        let mut out = String::from("slide_id,label,visits,last_visit_epoch,buffer_fill\n");
        for s in 0..self.labels.len() {
            let last = self.last_visit[s]
                .map(|v| v.to_string())
                .unwrap_or_default();
            let _ = writeln!(
                out,
                "{s},{},{},{last},{buffer_fill}",
                self.labels[s].as_str(),
                self.visits[s]
            );
        }
        out
    }
}

/// Bounded pool of entries; pops are uniform over the current contents.
#[derive(Debug, Clone)]
pub struct ShuffleBuffer<T> {
    capacity: usize,
    min_fill: usize,
    entries: Vec<T>,
}

impl<T> ShuffleBuffer<T> {
    /// `min_fill_fraction` of the capacity must be present before a batch pops.
    pub fn new(capacity: usize, min_fill_fraction: f64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument(
                "buffer capacity must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&min_fill_fraction) {
            return Err(Error::InvalidArgument(format!(
                "minimum fill fraction {min_fill_fraction} outside [0, 1]"
            )));
        }
        Ok(ShuffleBuffer {
            capacity,
            min_fill: (min_fill_fraction * capacity as f64).ceil() as usize,
            entries: Vec::with_capacity(capacity),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn is_ready(&self, batch_size: usize) -> bool {
        self.entries.len() >= batch_size.max(self.min_fill)
    }

    /// Inserts `entry`; at capacity a uniformly chosen resident is evicted
    /// and returned.
    pub fn push(&mut self, entry: T, rng: &mut Rng) -> Option<T> {
        if self.entries.len() < self.capacity {
            self.entries.push(entry);
            None
        } else {
            let slot = rng.gen_range(0..self.entries.len());
            Some(std::mem::replace(&mut self.entries[slot], entry))
        }
    }

    /// Removes `batch_size` entries uniformly without replacement.
    pub fn pop_batch(&mut self, batch_size: usize, rng: &mut Rng) -> Result<Vec<T>> {
        if batch_size == 0 || !self.is_ready(batch_size) {
            return Err(Error::NotReady {
                len: self.entries.len(),
                required: batch_size.max(self.min_fill).max(1),
            });
        }
        Ok((0..batch_size)
            .map(|_| {
                let i = rng.gen_range(0..self.entries.len());
                self.entries.swap_remove(i)
            })
            .collect())
    }
}
