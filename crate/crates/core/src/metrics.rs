//! Evaluation metrics: Dice and IoU for segmentation, RMSE for depth,
//! the signed mean relative improvement Δm against a local-training
//! baseline, and multi-seed summaries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Metric direction: +1 when higher is better, -1 when lower is better.
pub type Direction = i8;

pub fn direction_for(metric: &str) -> Option<Direction> {
    match metric {
        "dice" | "iou" => Some(1),
        "rmse" => Some(-1),
        _ => None,
    }
}

/// A named metric value with its direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricEntry {
    pub name: String,
    pub value: f64,
    pub direction: Direction,
}

/// An ordered list of metric entries; the entry count is the `K` of the
/// Δm average (number of evaluation metrics, not the site count).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub entries: Vec<MetricEntry>,
}

impl MetricSet {
    pub fn push(&mut self, name: &str, value: f64, direction: Direction) {
        self.entries.push(MetricEntry {
            name: name.to_string(),
            value,
            direction,
        });
    }
}

/// Per-image Dice and IoU over foreground classes, in percent.
///
/// For each class `c >= 1` present in the prediction or the target:
/// `Dice = 2|P∩G| / (|P|+|G|)`, `IoU = |P∩G| / |P∪G|`; classes absent
/// from both maps are skipped, and the per-class values are averaged.
/// Returns `None` when no foreground class appears in either map.
pub fn dice_iou(prediction: &Tensor, target: &Tensor, classes: usize) -> Result<Option<(f64, f64)>> {
    if prediction.len() != target.len() {
        return Err(Error::Dimension(format!(
            "prediction has {} pixels, target {}",
            prediction.len(),
            target.len()
        )));
    }
    let as_class = |v: f64, what: &str| -> Result<usize> {
        if v < 0.0 || v.fract() != 0.0 || v as usize >= classes {
            return Err(Error::Input(format!("{} value {} outside 0..{}", what, v, classes)));
        }
        Ok(v as usize)
    };
    let mut inter = vec![0usize; classes];
    let mut pred_count = vec![0usize; classes];
    let mut targ_count = vec![0usize; classes];
    for (&p, &t) in prediction.data().iter().zip(target.data().iter()) {
        let p = as_class(p, "prediction")?;
        let t = as_class(t, "target")?;
        pred_count[p] += 1;
        targ_count[t] += 1;
        if p == t {
            inter[p] += 1;
        }
    }
    let mut dice_sum = 0.0;
    let mut iou_sum = 0.0;
    let mut counted = 0usize;
    for c in 1..classes {
        let (i, p, t) = (inter[c] as f64, pred_count[c] as f64, targ_count[c] as f64);
        if p + t == 0.0 {
            continue; // class absent from both maps
        }
        dice_sum += 2.0 * i / (p + t);
        iou_sum += i / (p + t - i);
        counted += 1;
    }
    if counted == 0 {
        return Ok(None);
    }
    Ok(Some((
        dice_sum / counted as f64 * 100.0,
        iou_sum / counted as f64 * 100.0,
    )))
}

/// Root mean squared error over all values.
pub fn rmse(prediction: &Tensor, target: &Tensor) -> Result<f64> {
    if prediction.shape() != target.shape() {
        return Err(Error::Dimension(format!(
            "rmse shapes disagree: {:?} vs {:?}",
            prediction.shape(),
            target.shape()
        )));
    }
    let mut acc = 0.0;
    for (&p, &t) in prediction.data().iter().zip(target.data().iter()) {
        acc += (p - t) * (p - t);
    }
    Ok((acc / prediction.len() as f64).sqrt())
}

/// Signed mean relative change in percent:
/// `Δm = (1/K) Σ s_k (M_k − M_k_baseline) / M_k_baseline × 100`.
///
/// Entry names and directions must match pairwise and every baseline
/// value must be positive.
pub fn delta_m(run: &MetricSet, baseline: &MetricSet) -> Result<f64> {
    if run.entries.len() != baseline.entries.len() || run.entries.is_empty() {
        return Err(Error::Input(format!(
            "metric sets disagree: {} vs {} entries",
            run.entries.len(),
            baseline.entries.len()
        )));
    }
    let mut acc = 0.0;
    for (r, b) in run.entries.iter().zip(baseline.entries.iter()) {
        if r.name != b.name || r.direction != b.direction {
            return Err(Error::Input(format!(
                "metric mismatch: {}({:+}) vs {}({:+})",
                r.name, r.direction, b.name, b.direction
            )));
        }
        if b.value <= 0.0 {
            return Err(Error::Input(format!(
                "baseline {} must be positive, got {}",
                b.name, b.value
            )));
        }
        acc += r.direction as f64 * (r.value - b.value) / b.value;
    }
    Ok(acc / run.entries.len() as f64 * 100.0)
}

/// Mean and sample standard deviation (n-1 denominator, 0 for n = 1).
pub fn summarize(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Input("summarize needs at least one value".into()));
    }
    let n = values.len() as f64;
    let mut sum = 0.0;
    for &v in values {
        sum += v;
    }
    let mean = sum / n;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    let mut sq = 0.0;
    for &v in values {
        sq += (v - mean) * (v - mean);
    }
    Ok((mean, (sq / (n - 1.0)).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Xoshiro256StarStar;

    fn seg_pair(run: &[(f64, f64)]) -> (MetricSet, MetricSet) {
        // run entries: (run value, baseline value) for iou then dice
        let mut r = MetricSet::default();
        let mut b = MetricSet::default();
        r.push("iou", run[0].0, 1);
        b.push("iou", run[0].1, 1);
        r.push("dice", run[1].0, 1);
        b.push("dice", run[1].1, 1);
        (r, b)
    }

    #[test]
    fn dice_iou_perfect_and_disjoint() {
        let a = Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(dice_iou(&a, &a, 2).unwrap(), Some((100.0, 100.0)));

        let p = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let t = Tensor::new(vec![2, 2], vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(dice_iou(&p, &t, 2).unwrap(), Some((0.0, 0.0)));
    }

    #[test]
    fn dice_iou_analytic_case() {
        // |P∩G| = 2, |P| = |G| = 4 -> Dice 50, IoU 33.333
        let p = Tensor::new(vec![1, 8], vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let t = Tensor::new(vec![1, 8], vec![1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        let (dice, iou) = dice_iou(&p, &t, 2).unwrap().unwrap();
        assert!((dice - 50.0).abs() < 1e-12);
        assert!((iou - 100.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn dice_iou_skips_absent_classes_and_reports_none() {
        // class 2 absent from both maps: average covers class 1 only
        let p = Tensor::new(vec![1, 4], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let t = Tensor::new(vec![1, 4], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let (dice, iou) = dice_iou(&p, &t, 3).unwrap().unwrap();
        assert!((dice - 2.0 / 3.0 * 100.0).abs() < 1e-9);
        assert!((iou - 50.0).abs() < 1e-12);

        // all-background maps have no foreground to score
        let z = Tensor::zeros(&[2, 2]);
        assert_eq!(dice_iou(&z, &z, 3).unwrap(), None);
    }

    #[test]
    fn dice_equals_two_iou_over_one_plus_iou() {
        let mut rng = Xoshiro256StarStar::seed_from_u64(50);
        for _ in 0..30 {
            let n = 64;
            let p = Tensor::new(vec![n], (0..n).map(|_| rng.below(2) as f64).collect()).unwrap();
            let t = Tensor::new(vec![n], (0..n).map(|_| rng.below(2) as f64).collect()).unwrap();
            if let Some((dice, iou)) = dice_iou(&p, &t, 2).unwrap() {
                let (d, i) = (dice / 100.0, iou / 100.0);
                assert!((d - 2.0 * i / (1.0 + i)).abs() < 1e-9, "{} vs {}", d, i);
                assert!(iou <= dice + 1e-12);
            }
        }
    }

    #[test]
    fn rmse_cases_and_loop_oracle() {
        let a = Tensor::vector(&[1.0, 2.0, 3.0]);
        assert_eq!(rmse(&a, &a).unwrap(), 0.0);
        let b = a.map(|v| v - 1.5);
        assert!((rmse(&a, &b).unwrap() - 1.5).abs() < 1e-15);

        let mut rng = Xoshiro256StarStar::seed_from_u64(51);
        let p = Tensor::new(vec![10], (0..10).map(|_| rng.normal()).collect()).unwrap();
        let t = Tensor::new(vec![10], (0..10).map(|_| rng.normal()).collect()).unwrap();
        let mut acc = 0.0;
        for i in 0..10 {
            let d = p.data()[i] - t.data()[i];
            acc += d * d;
        }
        let want = (acc / 10.0).sqrt();
        assert!((rmse(&p, &t).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn delta_m_matches_published_rows() {
        // FedAvg vs Local Train on the first segmentation site
        let (r, b) = seg_pair(&[(54.59, 58.77), (66.38, 70.47)]);
        assert!((delta_m(&r, &b).unwrap() - -6.46).abs() < 0.01);

        // FedRep vs Local Train
        let (r, b) = seg_pair(&[(58.59, 58.77), (70.58, 70.47)]);
        assert!((delta_m(&r, &b).unwrap() - -0.08).abs() < 0.01);

        // RMSE row: run 28.61 vs baseline 10.76, lower is better.
        // The published table prints -165.75 from unrounded inputs; the
        // rounded inputs give -165.89.
        let mut r = MetricSet::default();
        r.push("rmse", 28.61, -1);
        let mut b = MetricSet::default();
        b.push("rmse", 10.76, -1);
        let dm = delta_m(&r, &b).unwrap();
        assert!((dm - -165.9).abs() < 0.3);
    }

    #[test]
    fn delta_m_of_a_run_against_itself_is_zero() {
        let (r, _) = seg_pair(&[(54.59, 0.0), (66.38, 0.0)]);
        assert_eq!(delta_m(&r, &r).unwrap(), 0.0);
    }

    #[test]
    fn delta_m_rejects_bad_inputs() {
        let (r, mut b) = seg_pair(&[(54.59, 58.77), (66.38, 70.47)]);
        b.entries[0].value = 0.0;
        assert!(matches!(delta_m(&r, &b), Err(Error::Input(_))));

        let (r2, _) = seg_pair(&[(1.0, 1.0), (1.0, 1.0)]);
        let mut renamed = r2.clone();
        renamed.entries[0].name = "other".into();
        assert!(matches!(delta_m(&r2, &renamed), Err(Error::Input(_))));
    }

    #[test]
    fn delta_m_moves_with_the_metric_direction() {
        let (r, b) = seg_pair(&[(50.0, 50.0), (50.0, 50.0)]);
        assert_eq!(delta_m(&r, &b).unwrap(), 0.0);
        let (doubled, b2) = seg_pair(&[(100.0, 50.0), (50.0, 50.0)]);
        assert!(delta_m(&doubled, &b2).unwrap() > 0.0);
    }

    #[test]
    fn summarize_cases() {
        assert_eq!(summarize(&[4.2]).unwrap(), (4.2, 0.0));
        let (mean, std) = summarize(&[1.0, 3.0]).unwrap();
        assert_eq!(mean, 2.0);
        assert!((std - 2.0_f64.sqrt()).abs() < 1e-15);

        // loop oracle over 5 random values
        let mut rng = Xoshiro256StarStar::seed_from_u64(52);
        let vals: Vec<f64> = (0..5).map(|_| rng.normal() * 3.0).collect();
        let (mean, std) = summarize(&vals).unwrap();
        let m: f64 = vals.iter().sum::<f64>() / 5.0;
        let s: f64 = (vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 4.0).sqrt();
        assert!((mean - m).abs() < 1e-12);
        assert!((std - s).abs() < 1e-12);
    }
}
