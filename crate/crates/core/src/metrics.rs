//! Slide-level ROC, lesion-level FROC and pixel overlap scores.

use std::collections::{HashSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::aggregation::ProbMap;
use crate::synthwsi::{Label, SyntheticSlide};
use crate::{Error, Result};

/// Mean false positives per slide at which FROC sensitivity is read off.
pub const FROC_RATES: [f64; 6] = [0.25, 0.5, 1.0, 2.0, 4.0, 8.0];

/// Probability above which a pixel counts as lesion.
pub const DETECTION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlideScore {
    pub slide_id: usize,
    /// Maximum pixel probability.
    pub score: f64,
    pub label: Label,
}

impl SlideScore {
    pub fn from_map(slide_id: usize, map: &ProbMap, label: Label) -> Self {
        SlideScore {
            slide_id,
            score: map.max(),
            label,
        }
    }
}

fn split_scores(scores: &[SlideScore]) -> Result<(Vec<f64>, Vec<f64>)> {
    if let Some(s) = scores.iter().find(|s| !s.score.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "slide {} has non-finite score",
            s.slide_id
        )));
    }
    let pos: Vec<f64> = scores
        .iter()
        .filter(|s| s.label == Label::Malign)
        .map(|s| s.score)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .filter(|s| s.label == Label::Benign)
        .map(|s| s.score)
        .collect();
    if pos.is_empty() {
        return Err(Error::EmptyClass("malign"));
    }
    if neg.is_empty() {
        return Err(Error::EmptyClass("benign"));
    }
    Ok((pos, neg))
}

/// Mann-Whitney estimate of `P(malign score > benign score)`, ties counting 1/2.
pub fn roc_auc(scores: &[SlideScore]) -> Result<f64> {
    let (pos, neg) = split_scores(scores)?;
    let mut wins = 0.0;
    for &p in &pos {
        for &n in &neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(wins / (pos.len() * neg.len()) as f64)
}

/// `(false positive rate, true positive rate)` points from the strictest
/// threshold down, starting at `(0, 0)` and ending at `(1, 1)`.
pub fn roc_curve(scores: &[SlideScore]) -> Result<Vec<(f64, f64)>> {
    let (pos, neg) = split_scores(scores)?;
    let mut thresholds: Vec<f64> = scores.iter().map(|s| s.score).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut curve = vec![(0.0, 0.0)];
    for t in thresholds {
        let tp = pos.iter().filter(|&&s| s >= t).count() as f64 / pos.len() as f64;
        let fp = neg.iter().filter(|&&s| s >= t).count() as f64 / neg.len() as f64;
        curve.push((fp, tp));
    }
    Ok(curve)
}

/// 8-connected components of `mask`; returns per-pixel labels (0 for
/// background, components numbered from 1 in row-major discovery order) and
/// the component count.
pub fn connected_components(mask: &[bool], height: usize, width: usize) -> (Vec<u32>, usize) {
    let mut labels = vec![0u32; mask.len()];
    let mut count = 0;
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        count += 1;
        labels[start] = count as u32;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let (y, x) = (i / width, i % width);
            for ny in y.saturating_sub(1)..=(y + 1).min(height - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(width - 1) {
                    let j = ny * width + nx;
                    if mask[j] && labels[j] == 0 {
                        labels[j] = count as u32;
                        queue.push_back(j);
                    }
                }
            }
        }
    }
    (labels, count)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub row: f64,
    pub col: f64,
    pub confidence: f64,
}

/// Candidate detections of one slide, most confident first.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DetectionList {
    pub detections: Vec<Detection>,
}

impl DetectionList {
    pub fn new(mut detections: Vec<Detection>) -> Result<Self> {
        if let Some(d) = detections
            .iter()
            .find(|d| !(0.0..=1.0).contains(&d.confidence))
        {
            return Err(Error::InvalidArgument(format!(
                "confidence {} outside [0, 1]",
                d.confidence
            )));
        }
        detections.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
        Ok(DetectionList { detections })
    }

    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }
}

/// One detection per 8-connected component of `map > threshold`, placed at
/// the probability-weighted centroid with the component maximum as confidence.
pub fn detections_from_map(map: &ProbMap, threshold: f64) -> DetectionList {
    let (h, w) = map.shape();
    let values = map.values();
    let mask: Vec<bool> = values.iter().map(|&v| v > threshold).collect();
    let (labels, count) = connected_components(&mask, h, w);
    // (weight, weighted row, weighted col, max)
    let mut acc = vec![(0.0, 0.0, 0.0, 0.0f64); count];
    for (i, &l) in labels.iter().enumerate() {
        if l == 0 {
            continue;
        }
        let v = values[i];
        let a = &mut acc[l as usize - 1];
        a.0 += v;
        a.1 += v * (i / w) as f64;
        a.2 += v * (i % w) as f64;
        a.3 = a.3.max(v);
    }
    let detections = acc
        .into_iter()
        .map(|(m, r, c, max)| Detection {
            row: r / m,
            col: c / m,
            confidence: max,
        })
        .collect();
    DetectionList::new(detections).expect("map probabilities lie in [0, 1]")
}

/// Binary lesion mask of one slide.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthMask {
    pub height: usize,
    pub width: usize,
    pub mask: Vec<u8>,
}

impl TruthMask {
    pub fn new(height: usize, width: usize, mask: Vec<u8>) -> Result<Self> {
        if mask.len() != height * width {
            return Err(Error::LengthMismatch {
                expected: height * width,
                actual: mask.len(),
            });
        }
        Ok(TruthMask {
            height,
            width,
            mask,
        })
    }

    fn components(&self) -> (Vec<u32>, usize) {
        let m: Vec<bool> = self.mask.iter().map(|&v| v != 0).collect();
        connected_components(&m, self.height, self.width)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrocResult {
    /// Sensitivity at each entry of [`FROC_RATES`].
    pub sensitivities: [f64; 6],
    pub average: f64,
    /// `(mean false positives per slide, sensitivity)` from the strictest
    /// confidence threshold down, starting at `(0, 0)`.
    pub curve: Vec<(f64, f64)>,
}

/// Lesion-level FROC. A detection whose rounded coordinate falls inside a
/// lesion credits that lesion once; further hits on a credited lesion are
/// ignored; detections outside lesions are false positives.
pub fn froc(detections: &[DetectionList], truths: &[TruthMask]) -> Result<FrocResult> {
    if detections.len() != truths.len() {
        return Err(Error::LengthMismatch {
            expected: truths.len(),
            actual: detections.len(),
        });
    }
    if truths.is_empty() {
        return Err(Error::InvalidArgument("no slides".into()));
    }
    // (confidence, Some((slide, lesion)) for hits)
    let mut events: Vec<(f64, Option<(usize, u32)>)> = Vec::new();
    let mut lesion_total = 0;
    for (s, (list, truth)) in detections.iter().zip(truths).enumerate() {
        let (labels, count) = truth.components();
        lesion_total += count;
        for d in &list.detections {
            let r = d.row.round().clamp(0.0, (truth.height - 1) as f64) as usize;
            let c = d.col.round().clamp(0.0, (truth.width - 1) as f64) as usize;
            let lesion = labels[r * truth.width + c];
            events.push((d.confidence, (lesion != 0).then_some((s, lesion))));
        }
    }
    if lesion_total == 0 {
        return Err(Error::EmptyClass("malign"));
    }
    events.sort_by(|a, b| b.0.total_cmp(&a.0));

    let slides = truths.len() as f64;
    let mut credited = HashSet::new();
    let mut false_positives = 0usize;
    let mut curve = vec![(0.0, 0.0)];
    let mut i = 0;
    while i < events.len() {
        let t = events[i].0;
        while i < events.len() && events[i].0 == t {
            match events[i].1 {
                Some(key) => {
                    credited.insert(key);
                }
                None => false_positives += 1,
            }
            i += 1;
        }
        curve.push((
            false_positives as f64 / slides,
            credited.len() as f64 / lesion_total as f64,
        ));
    }

    let mut sensitivities = [0.0; 6];
    for (s, &rate) in sensitivities.iter_mut().zip(&FROC_RATES) {
        *s = curve
            .iter()
            .filter(|(fp, _)| *fp <= rate)
            .map(|&(_, sens)| sens)
            .fold(0.0, f64::max);
    }
    let average = sensitivities.iter().sum::<f64>() / sensitivities.len() as f64;
    Ok(FrocResult {
        sensitivities,
        average,
        curve,
    })
}

/// `(dice, iou)` of `map > threshold` against `truth`; both are 1 when the
/// prediction and the mask are empty.
pub fn pixel_overlap(map: &ProbMap, truth: &TruthMask, threshold: f64) -> Result<(f64, f64)> {
    if map.shape() != (truth.height, truth.width) {
        return Err(Error::ShapeMismatch {
            expected: (truth.height, truth.width),
            actual: map.shape(),
        });
    }
    let (mut inter, mut pred, mut gt) = (0usize, 0usize, 0usize);
    for (&v, &m) in map.values().iter().zip(&truth.mask) {
        let p = v > threshold;
        let g = m != 0;
        inter += (p && g) as usize;
        pred += p as usize;
        gt += g as usize;
    }
    let union = pred + gt - inter;
    if union == 0 {
        return Ok((1.0, 1.0));
    }
    Ok((
        2.0 * inter as f64 / (pred + gt) as f64,
        inter as f64 / union as f64,
    ))
}

/// Two-column CSV with a header line.
pub fn curve_csv(x_name: &str, y_name: &str, points: &[(f64, f64)]) -> String {
    let mut out = format!("{x_name},{y_name}\n");
    for (x, y) in points {
        out.push_str(&format!("{x},{y}\n"));
    }
    out
}

/// Per-slide evaluation row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideEval {
    pub slide_id: usize,
    pub label: Label,
    pub score: f64,
    pub dice: f64,
    pub iou: f64,
    pub detections: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub roc_auc: f64,
    pub froc: FrocResult,
    /// Mean Dice over malign slides.
    pub mean_dice_malign: f64,
    pub slides: Vec<SlideEval>,
    pub roc: Vec<(f64, f64)>,
}

impl EvalReport {
    /// `metric,value` summary rows.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        out.push_str(&format!("roc_auc,{}\n", self.roc_auc));
        out.push_str(&format!("froc_average_sensitivity,{}\n", self.froc.average));
        for (rate, s) in FROC_RATES.iter().zip(&self.froc.sensitivities) {
            out.push_str(&format!("sensitivity_at_{rate}_fp,{s}\n"));
        }
        out.push_str(&format!("mean_dice_malign,{}\n", self.mean_dice_malign));
        out
    }

    pub fn slides_csv(&self) -> String {
        let mut out = String::from("slide_id,label,score,dice,iou,detections\n");
        for s in &self.slides {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                s.slide_id,
                s.label.as_str(),
                s.score,
                s.dice,
                s.iou,
                s.detections
            ));
        }
        out
    }
}

/// Scores maps against slide labels and masks.
pub fn evaluate(maps: &[ProbMap], slides: &[SyntheticSlide]) -> Result<EvalReport> {
    if maps.len() != slides.len() {
        return Err(Error::LengthMismatch {
            expected: slides.len(),
            actual: maps.len(),
        });
    }
    let mut rows = Vec::with_capacity(maps.len());
    let mut scores = Vec::with_capacity(maps.len());
    let mut detections = Vec::with_capacity(maps.len());
    let mut truths = Vec::with_capacity(maps.len());
    for (map, slide) in maps.iter().zip(slides) {
        let truth = TruthMask::new(slide.height, slide.width, slide.truth_mask.clone())?;
        let (dice, iou) = pixel_overlap(map, &truth, DETECTION_THRESHOLD)?;
        let score = SlideScore::from_map(slide.id, map, slide.label);
        let dets = detections_from_map(map, DETECTION_THRESHOLD);
        rows.push(SlideEval {
            slide_id: slide.id,
            label: slide.label,
            score: score.score,
            dice,
            iou,
            detections: dets.len(),
        });
        scores.push(score);
        detections.push(dets);
        truths.push(truth);
    }
    let malign: Vec<f64> = rows
        .iter()
        .filter(|r| r.label == Label::Malign)
        .map(|r| r.dice)
        .collect();
    if malign.is_empty() {
        return Err(Error::EmptyClass("malign"));
    }
    Ok(EvalReport {
        roc_auc: roc_auc(&scores)?,
        froc: froc(&detections, &truths)?,
        mean_dice_malign: malign.iter().sum::<f64>() / malign.len() as f64,
        roc: roc_curve(&scores)?,
        slides: rows,
    })
}
