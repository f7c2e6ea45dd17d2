//! Detection scores and equal error rate.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::datakit::{Label, Manifest};
use crate::error::{Error, Result};
use crate::model::{score, ModelParams};
use crate::numerics::Real;
use crate::stacks::StackSource;

#[derive(Debug, Clone, PartialEq)]
pub struct TrialScore {
    pub trial_id: String,
    /// Higher means more likely bona fide.
    pub score: f64,
    pub label: Option<Label>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EerResult {
    /// Fraction in `[0, 1]`.
    pub eer: f64,
    pub threshold: f64,
    pub n_bona: usize,
    pub n_spoof: usize,
}

impl fmt::Display for EerResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "eer={:.6} threshold={:.6} n_bona={} n_spoof={}",
            self.eer, self.threshold, self.n_bona, self.n_spoof
        )
    }
}

fn split_classes(scores: &[TrialScore]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut bona = Vec::new();
    let mut spoof = Vec::new();
    for s in scores {
        if !s.score.is_finite() {
            return Err(Error::numeric(format!("trial {} has a non-finite score", s.trial_id)));
        }
        match s.label {
            Some(Label::Bona) => bona.push(s.score),
            Some(Label::Spoof) => spoof.push(s.score),
            None => return Err(Error::param(format!("trial {} has no label", s.trial_id))),
        }
    }
    if bona.is_empty() || spoof.is_empty() {
        return Err(Error::param(format!(
            "EER needs both classes (bona {}, spoof {})",
            bona.len(),
            spoof.len()
        )));
    }
    Ok((bona, spoof))
}

/// Threshold sweep over the sorted unique scores with ±∞ sentinels.
/// FAR(θ) counts spoof scores ≥ θ, FRR(θ) bona scores < θ. The EER is the
/// first FAR = FRR crossing, linearly interpolated between the bracketing
/// operating points.
pub fn compute_eer(scores: &[TrialScore]) -> Result<EerResult> {
    let (mut bona, mut spoof) = split_classes(scores)?;
    bona.sort_by(f64::total_cmp);
    spoof.sort_by(f64::total_cmp);
    let (nb, ns) = (bona.len() as f64, spoof.len() as f64);

    let mut thresholds: Vec<f64> = bona.iter().chain(&spoof).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.insert(0, f64::NEG_INFINITY);
    thresholds.push(f64::INFINITY);

    // both lists are sorted, so the counts advance monotonically with θ
    let (mut below_bona, mut below_spoof) = (0usize, 0usize);
    let mut prev: Option<(f64, f64, f64)> = None;
    for &theta in &thresholds {
        while below_bona < bona.len() && bona[below_bona] < theta {
            below_bona += 1;
        }
        while below_spoof < spoof.len() && spoof[below_spoof] < theta {
            below_spoof += 1;
        }
        let far = (spoof.len() - below_spoof) as f64 / ns;
        let frr = below_bona as f64 / nb;
        if frr >= far {
            let (eer, threshold) = match prev {
                Some((t0, far0, frr0)) if frr > far => {
                    let (d0, d1) = (far0 - frr0, far - frr);
                    let lambda = d0 / (d0 - d1);
                    let t = match (t0.is_finite(), theta.is_finite()) {
                        (true, true) => t0 + lambda * (theta - t0),
                        (true, false) => t0,
                        _ => theta,
                    };
                    (far0 + lambda * (far - far0), t)
                }
                _ => (far, theta),
            };
            let threshold = if threshold.is_finite() {
                threshold
            } else {
                *thresholds.iter().find(|t| t.is_finite()).expect("at least one score")
            };
            return Ok(EerResult { eer: eer.clamp(0.0, 1.0), threshold, n_bona: bona.len(), n_spoof: spoof.len() });
        }
        prev = Some((theta, far, frr));
    }
    unreachable!("FRR reaches 1 at the +inf sentinel")
}

/// Brute-force reference for [`compute_eer`]: operating points at every
/// distinct score (accept when `s >= θ`) plus both sentinels, each counted
/// directly, then the minimum of `max(FAR, FRR)` along the
/// piecewise-linear path joining consecutive points.
pub fn eer_oracle(scores: &[TrialScore]) -> Result<EerResult> {
    let (bona, spoof) = split_classes(scores)?;
    let mut all: Vec<f64> = bona.iter().chain(&spoof).copied().collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    // probing at the scores themselves rather than midpoints: the midpoint of
    // two adjacent floats rounds onto one of them
    let mut probes = vec![f64::NEG_INFINITY];
    probes.extend(all.iter().skip(1).copied());
    probes.push(f64::INFINITY);
    let point = |theta: f64| {
        let far = spoof.iter().filter(|&&s| s >= theta).count() as f64 / spoof.len() as f64;
        let frr = bona.iter().filter(|&&s| s < theta).count() as f64 / bona.len() as f64;
        (far, frr)
    };
    let points: Vec<(f64, f64)> = probes.iter().map(|&t| point(t)).collect();
    let mut best = (f64::INFINITY, 0.0);
    for (i, w) in points.windows(2).enumerate() {
        let ((a0, r0), (a1, r1)) = (w[0], w[1]);
        // max of two lines on [0, 1]: an endpoint or the crossing
        let mut cands = vec![(0.0, a0.max(r0)), (1.0, a1.max(r1))];
        let denom = (a0 - r0) - (a1 - r1);
        if denom != 0.0 {
            let l = (a0 - r0) / denom;
            if (0.0..=1.0).contains(&l) {
                cands.push((l, (a0 + l * (a1 - a0)).max(r0 + l * (r1 - r0))));
            }
        }
        for (l, v) in cands {
            if v < best.0 {
                let (t0, t1) = (probes[i], probes[i + 1]);
                let t = if t0.is_finite() && t1.is_finite() {
                    t0 + l * (t1 - t0)
                } else if t0.is_finite() {
                    t0
                } else {
                    t1
                };
                best = (v, t);
            }
        }
    }
    let threshold = if best.1.is_finite() { best.1 } else { all[0] };
    Ok(EerResult { eer: best.0, threshold, n_bona: bona.len(), n_spoof: spoof.len() })
}

/// `trial_id<TAB>score` lines with six decimals.
pub fn scores_to_text(scores: &[TrialScore]) -> String {
    scores.iter().map(|s| format!("{}\t{:.6}\n", s.trial_id, s.score)).collect()
}

pub fn write_scores(scores: &[TrialScore], path: &Path) -> Result<()> {
    fs::write(path, scores_to_text(scores)).map_err(|e| Error::io_at(path.display(), e))
}

/// Unlabeled scores; duplicate trial ids are a format error.
pub fn read_scores(path: &Path) -> Result<Vec<TrialScore>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io_at(path.display(), e))?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::format(format!("{}:{}: expected trial_id<TAB>score", path.display(), n + 1));
        let (id, value) = line.split_once('\t').ok_or_else(bad)?;
        let score: f64 = value.trim().parse().map_err(|_| bad())?;
        if !seen.insert(id.to_string()) {
            return Err(Error::format(format!("{}: duplicate trial id {id:?}", path.display())));
        }
        out.push(TrialScore { trial_id: id.to_string(), score, label: None });
    }
    Ok(out)
}

/// Fills labels from a manifest; trials it does not list stay unlabeled.
pub fn attach_labels(scores: &mut [TrialScore], labels: &Manifest) {
    let map: HashMap<&str, Label> = labels.entries.iter().map(|e| (e.trial_id.as_str(), e.label)).collect();
    for s in scores {
        s.label = map.get(s.trial_id.as_str()).copied();
    }
}

/// Eval-mode score for every item of `source`, in order.
pub fn score_source<T: Real>(
    params: &ModelParams<T>,
    ids: &[String],
    labels: &[Option<Label>],
    source: &dyn StackSource,
) -> Result<Vec<TrialScore>> {
    if ids.len() != source.len() || labels.len() != ids.len() {
        return Err(Error::dim("ids, labels and source differ in length"));
    }
    (0..ids.len())
        .into_par_iter()
        .map(|i| {
            let stack = source.stack(i, None)?;
            let s = score(&stack, params).map_err(|e| match e {
                Error::Dimension(m) => Error::Dimension(format!("trial {}: {m}", ids[i])),
                other => other,
            })?;
            Ok(TrialScore { trial_id: ids[i].clone(), score: s.as_f64(), label: labels[i] })
        })
        .collect()
}

/// Scores every manifest entry; `source` must follow manifest order.
pub fn score_manifest(manifest: &Manifest, params: &ModelParams<f32>, source: &dyn StackSource) -> Result<Vec<TrialScore>> {
    let labels: Vec<Option<Label>> = manifest.entries.iter().map(|e| Some(e.label)).collect();
    score_source(params, &manifest.ids(), &labels, source)
}
