//! Evaluation metrics: rank correlation, relative L2, uncertainty calibration
//! and pointing-game localization.

use std::cmp::Ordering;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

pub const CALIBRATION_BINS: usize = 10;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("correlation undefined: {0}")]
    Undefined(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

/// Per-sample evaluation output.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub sample_id: String,
    pub predicted: f64,
    pub truth: f64,
    pub uncertainty: Option<f64>,
    /// 1-indexed attention peak per step.
    pub peaks: Option<Vec<usize>>,
    /// Inclusive, 1-indexed annotated interval per step.
    pub intervals: Option<Vec<(usize, usize)>>,
    /// Clip count, needed to validate intervals.
    pub clips: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub srcc: f64,
    pub r_l2: f64,
    pub bin_mae: Option<Vec<f64>>,
    pub kendall_tau: Option<f64>,
    pub pointing_accuracy: Option<f64>,
    pub pointing_chance: Option<f64>,
    pub n: usize,
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(MetricsError::Contract("pearson needs two equal-length vectors of length >= 2".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricsError::Undefined("constant input".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's rank correlation: Pearson correlation of average ranks.
pub fn spearman_srcc(pred: &[f64], truth: &[f64]) -> Result<f64, MetricsError> {
    if pred.len() != truth.len() || pred.len() < 2 {
        return Err(MetricsError::Contract("spearman needs n >= 2 paired values".into()));
    }
    pearson(&average_ranks(pred), &average_ranks(truth))
}

/// `(100/N) Σ (|ŷ − y| / (y_max − y_min))²`.
pub fn relative_l2(pred: &[f64], truth: &[f64], y_min: f64, y_max: f64) -> Result<f64, MetricsError> {
    if y_max <= y_min {
        return Err(MetricsError::Contract(format!("degenerate label range [{y_min}, {y_max}]")));
    }
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(MetricsError::Contract("relative_l2 needs equal non-empty inputs".into()));
    }
    let range = y_max - y_min;
    let sum: f64 = pred.iter().zip(truth).map(|(p, t)| ((p - t).abs() / range).powi(2)).sum();
    Ok(100.0 * sum / pred.len() as f64)
}

/// Ten ascending-uncertainty bins with their mean uncertainty and MAE.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationCurve {
    pub mean_uncertainty: Vec<f64>,
    pub mae: Vec<f64>,
}

/// Sort by uncertainty (ties by sample id), split into ten contiguous bins
/// whose sizes differ by at most one (larger bins first), MAE per bin.
pub fn calibration_curve(records: &[EvalRecord]) -> Result<CalibrationCurve, MetricsError> {
    if records.len() < CALIBRATION_BINS {
        return Err(MetricsError::Contract(format!("calibration needs at least {CALIBRATION_BINS} samples")));
    }
    let mut rows = Vec::with_capacity(records.len());
    for r in records {
        let u = r
            .uncertainty
            .ok_or_else(|| MetricsError::Contract(format!("sample {} has no uncertainty", r.sample_id)))?;
        rows.push((u, r.sample_id.as_str(), (r.predicted - r.truth).abs()));
    }
    rows.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));

    let n = rows.len();
    let (base, extra) = (n / CALIBRATION_BINS, n % CALIBRATION_BINS);
    let mut curve = CalibrationCurve { mean_uncertainty: Vec::new(), mae: Vec::new() };
    let mut start = 0;
    for b in 0..CALIBRATION_BINS {
        let len = base + usize::from(b < extra);
        let bin = &rows[start..start + len];
        curve.mean_uncertainty.push(bin.iter().map(|r| r.0).sum::<f64>() / len as f64);
        curve.mae.push(bin.iter().map(|r| r.2).sum::<f64>() / len as f64);
        start += len;
    }
    Ok(curve)
}

/// Kendall τ-a numerator `concordant − discordant` in O(n log n) (Knight's
/// merge-sort method); tied pairs count as neither.
pub fn kendall_numerator(x: &[f64], y: &[f64]) -> i64 {
    let n = x.len();
    assert_eq!(n, y.len());
    if n < 2 {
        return 0;
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(y[a].total_cmp(&y[b])));

    let pairs = |counts: &mut dyn Iterator<Item = usize>| -> i64 {
        counts.map(|c| (c * (c.saturating_sub(1)) / 2) as i64).sum()
    };
    let runs = |seq: &[usize], eq: &dyn Fn(usize, usize) -> bool| -> Vec<usize> {
        let mut out = Vec::new();
        let mut len = 1;
        for w in seq.windows(2) {
            if eq(w[0], w[1]) {
                len += 1;
            } else {
                out.push(len);
                len = 1;
            }
        }
        out.push(len);
        out
    };
    let tied_x = pairs(&mut runs(&idx, &|a, b| x[a] == x[b]).into_iter());
    let tied_xy = pairs(&mut runs(&idx, &|a, b| x[a] == x[b] && y[a] == y[b]).into_iter());

    let mut buf = idx.clone();
    let swaps = merge_count(&mut idx, &mut buf, y);
    let tied_y = pairs(&mut runs(&idx, &|a, b| y[a] == y[b]).into_iter());

    let total = (n * (n - 1) / 2) as i64;
    total - tied_x - tied_y + tied_xy - 2 * swaps
}

fn merge_count(v: &mut [usize], buf: &mut [usize], key: &[f64]) -> i64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = merge_count(&mut v[..mid], &mut buf[..mid], key);
    swaps += merge_count(&mut v[mid..], &mut buf[mid..], key);
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if key[v[j]].total_cmp(&key[v[i]]) == Ordering::Less {
            buf[k] = v[j];
            swaps += (mid - i) as i64;
            j += 1;
        } else {
            buf[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    k += mid - i;
    buf[k..k + n - j].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    swaps
}

/// Kendall τ-a between two vectors.
pub fn kendall_tau_a(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len();
    if n < 2 {
        return 0.0;
    }
    kendall_numerator(x, y) as f64 / (n * (n - 1) / 2) as f64
}

/// τ-a between bin index and bin MAE; always a multiple of 1/45 for ten bins.
pub fn kendall_tau(bin_mae: &[f64]) -> Result<f64, MetricsError> {
    if bin_mae.len() != CALIBRATION_BINS {
        return Err(MetricsError::Contract(format!("expected {CALIBRATION_BINS} bins, got {}", bin_mae.len())));
    }
    let index: Vec<f64> = (0..bin_mae.len()).map(|i| i as f64).collect();
    Ok(kendall_tau_a(&index, bin_mae))
}

/// Fraction of (sample, step) pairs whose attention peak lies in the annotated interval.
pub fn pointing_game_accuracy(records: &[EvalRecord]) -> Result<f64, MetricsError> {
    let (mut hits, mut total) = (0usize, 0usize);
    for r in records {
        let (peaks, intervals) = match (&r.peaks, &r.intervals) {
            (Some(p), Some(i)) => (p, i),
            _ => return Err(MetricsError::Contract(format!("sample {} lacks peaks or intervals", r.sample_id))),
        };
        if peaks.len() != intervals.len() {
            return Err(MetricsError::Data(format!("sample {}: {} peaks for {} steps", r.sample_id, peaks.len(), intervals.len())));
        }
        for (&p, &(lo, hi)) in peaks.iter().zip(intervals) {
            if lo < 1 || hi > r.clips || lo > hi {
                return Err(MetricsError::Data(format!("interval [{lo}, {hi}] outside [1, {}]", r.clips)));
            }
            hits += usize::from(p >= lo && p <= hi);
            total += 1;
        }
    }
    if total == 0 {
        return Err(MetricsError::Contract("no steps to score".into()));
    }
    Ok(hits as f64 / total as f64)
}

/// Expected pointing accuracy of a uniformly random peak for the same intervals.
pub fn pointing_chance(records: &[EvalRecord]) -> Result<f64, MetricsError> {
    let (mut sum, mut total) = (0.0, 0usize);
    for r in records {
        let intervals = r
            .intervals
            .as_ref()
            .ok_or_else(|| MetricsError::Contract(format!("sample {} lacks intervals", r.sample_id)))?;
        for &(lo, hi) in intervals {
            sum += (hi + 1 - lo) as f64 / r.clips as f64;
            total += 1;
        }
    }
    if total == 0 {
        return Err(MetricsError::Contract("no steps to score".into()));
    }
    Ok(sum / total as f64)
}

/// All metrics over normalized scores in `[y_min, y_max]`.
pub fn report(records: &[EvalRecord], y_min: f64, y_max: f64) -> Result<MetricsReport, MetricsError> {
    let pred: Vec<f64> = records.iter().map(|r| r.predicted).collect();
    let truth: Vec<f64> = records.iter().map(|r| r.truth).collect();
    let srcc = spearman_srcc(&pred, &truth)?;
    let r_l2 = relative_l2(&pred, &truth, y_min, y_max)?;
    let (bin_mae, kendall_tau) = if records.iter().all(|r| r.uncertainty.is_some()) {
        let curve = calibration_curve(records)?;
        let tau = kendall_tau(&curve.mae)?;
        (Some(curve.mae), Some(tau))
    } else {
        (None, None)
    };
    let localized = records.iter().all(|r| r.peaks.is_some() && r.intervals.is_some());
    let (pointing_accuracy, pointing_chance) = if localized {
        (Some(pointing_game_accuracy(records)?), Some(pointing_chance(records)?))
    } else {
        (None, None)
    };
    Ok(MetricsReport { srcc, r_l2, bin_mae, kendall_tau, pointing_accuracy, pointing_chance, n: records.len() })
}

/// Calibration CSV: a `# kendall_tau=` comment line, a header, then ten rows.
pub fn write_calibration_csv(mut out: impl Write, curve: &CalibrationCurve) -> Result<f64, MetricsError> {
    let tau = kendall_tau(&curve.mae)?;
    writeln!(out, "# kendall_tau={tau}")?;
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    let io = |e: csv::Error| MetricsError::Data(e.to_string());
    w.write_record(["bin", "mean_uncertainty", "mae"]).map_err(io)?;
    for (i, (u, m)) in curve.mean_uncertainty.iter().zip(&curve.mae).enumerate() {
        w.write_record([i.to_string(), u.to_string(), m.to_string()]).map_err(io)?;
    }
    w.flush()?;
    Ok(tau)
}

/// Parse a calibration CSV; returns the curve and the τ stated in its header.
pub fn read_calibration_csv(input: impl BufRead) -> Result<(CalibrationCurve, f64), MetricsError> {
    let mut lines = input.lines();
    let first = lines.next().ok_or_else(|| MetricsError::Data("empty calibration file".into()))??;
    let tau: f64 = first
        .strip_prefix("# kendall_tau=")
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| MetricsError::Data(format!("bad header comment {first:?}")))?;
    let rest: Vec<String> = lines.collect::<Result<_, _>>()?;
    let body = rest.join("\n");
    let mut rdr = csv::Reader::from_reader(body.as_bytes());
    let mut curve = CalibrationCurve { mean_uncertainty: Vec::new(), mae: Vec::new() };
    for rec in rdr.records() {
        let rec = rec.map_err(|e| MetricsError::Data(e.to_string()))?;
        let field = |i: usize| -> Result<f64, MetricsError> {
            rec.get(i)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| MetricsError::Data(format!("bad calibration row {rec:?}")))
        };
        curve.mean_uncertainty.push(field(1)?);
        curve.mae.push(field(2)?);
    }
    if curve.mae.len() != CALIBRATION_BINS {
        return Err(MetricsError::Data(format!("expected {CALIBRATION_BINS} rows, got {}", curve.mae.len())));
    }
    Ok((curve, tau))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, pred: f64, truth: f64, u: Option<f64>) -> EvalRecord {
        EvalRecord { sample_id: id.into(), predicted: pred, truth, uncertainty: u, peaks: None, intervals: None, clips: 10 }
    }

    #[test]
    fn srcc_examples() {
        assert!((spearman_srcc(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman_srcc(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!((spearman_srcc(&[1.0, 2.0, 3.0], &[3.0, 1.0, 2.0]).unwrap() + 0.5).abs() < 1e-12);
        assert!(matches!(spearman_srcc(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(MetricsError::Undefined(_))));
    }

    #[test]
    fn ties_get_average_ranks() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn relative_l2_examples() {
        assert_eq!(relative_l2(&[1.0, 2.0], &[1.0, 2.0], 0.0, 10.0).unwrap(), 0.0);
        assert!((relative_l2(&[1.0, 5.0, 8.0], &[2.0, 4.0, 9.0], 0.0, 10.0).unwrap() - 1.0).abs() < 1e-12);
        let a = relative_l2(&[1.0, 5.0], &[2.0, 3.0], 0.0, 10.0).unwrap();
        let b = relative_l2(&[5.0, 13.0], &[7.0, 9.0], 3.0, 23.0).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(relative_l2(&[1.0], &[1.0], 2.0, 2.0).is_err());
    }

    #[test]
    fn calibration_examples() {
        let constant: Vec<EvalRecord> = (0..23).map(|i| rec(&format!("{i}"), 1.0, 1.25, Some(i as f64))).collect();
        let c = calibration_curve(&constant).unwrap();
        assert!(c.mae.iter().all(|m| (m - 0.25).abs() < 1e-12));

        // errors equal to rank after sorting by uncertainty
        let ranked: Vec<EvalRecord> = (0..10)
            .map(|i| rec(&format!("s{i}"), (i + 1) as f64, 0.0, Some(100.0 - (9 - i) as f64)))
            .collect();
        let c = calibration_curve(&ranked).unwrap();
        assert_eq!(c.mae, (1..=10).map(f64::from).collect::<Vec<_>>());
        assert_eq!(kendall_tau(&c.mae).unwrap(), 1.0);

        let missing = vec![rec("a", 0.0, 0.0, None); 10];
        assert!(matches!(calibration_curve(&missing), Err(MetricsError::Contract(_))));
    }

    #[test]
    fn calibration_ties_break_by_id() {
        let mut recs: Vec<EvalRecord> = (0..10).map(|i| rec(&format!("id{i}"), i as f64, 0.0, Some(1.0))).collect();
        recs.reverse();
        let c = calibration_curve(&recs).unwrap();
        assert_eq!(c.mae, (0..10).map(f64::from).collect::<Vec<_>>());
    }

    #[test]
    fn bin_sizes_spread_remainder_first() {
        // 13 records: bins of 2,2,2,1,... ; error = 1 for the first 6 sorted records
        let recs: Vec<EvalRecord> = (0..13)
            .map(|i| rec(&format!("{i:02}"), if i < 6 { 1.0 } else { 0.0 }, 0.0, Some(i as f64)))
            .collect();
        let c = calibration_curve(&recs).unwrap();
        assert_eq!(&c.mae[..4], &[1.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn kendall_examples() {
        let inc: Vec<f64> = (0..10).map(f64::from).collect();
        let dec: Vec<f64> = inc.iter().rev().copied().collect();
        assert_eq!(kendall_tau(&inc).unwrap(), 1.0);
        assert_eq!(kendall_tau(&dec).unwrap(), -1.0);
        // 29/45 as reported granularity
        assert!((29.0f64 / 45.0 - 0.6444).abs() < 5e-5);
    }

    #[test]
    fn pointing_game() {
        let mut r = rec("a", 0.0, 0.0, None);
        r.peaks = Some(vec![3, 6]);
        r.intervals = Some(vec![(1, 3), (4, 5)]);
        assert_eq!(pointing_game_accuracy(&[r.clone()]).unwrap(), 0.5);
        assert!((pointing_chance(&[r.clone()]).unwrap() - (0.3 + 0.2) / 2.0).abs() < 1e-12);
        r.intervals = Some(vec![(1, 3), (4, 11)]);
        assert!(matches!(pointing_game_accuracy(&[r]), Err(MetricsError::Data(_))));
    }

    #[test]
    fn calibration_csv_round_trip() {
        let curve = CalibrationCurve {
            mean_uncertainty: (0..10).map(|i| 0.1 * i as f64).collect(),
            mae: vec![0.1, 0.3, 0.2, 0.4, 0.5, 0.45, 0.6, 0.7, 0.65, 0.9],
        };
        let mut buf = Vec::new();
        let tau = write_calibration_csv(&mut buf, &curve).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 12);
        assert!(!text.contains('\r'));
        let (back, header_tau) = read_calibration_csv(buf.as_slice()).unwrap();
        assert_eq!(back, curve);
        assert_eq!(header_tau, tau);
        assert_eq!(kendall_tau(&back.mae).unwrap(), tau);
    }
}
