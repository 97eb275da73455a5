//! Equal error rate, precision/recall/F-score and fold-level reporting.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tags::{Tag, TagSet, NUM_TAGS};

/// Default decision threshold on tag posteriors.
pub const DEFAULT_THRESHOLD: f64 = 0.4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredEntry {
    pub chunk_id: String,
    pub tag: Tag,
    pub score: f64,
    pub truth: bool,
}

/// One (chunk, tag) score with its ground truth, for every chunk × tag.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoredSet {
    entries: Vec<ScoredEntry>,
}

impl ScoredSet {
    /// Builds the set from per-chunk score vectors and reference tags.
    pub fn from_chunks<'a, I>(chunks: I) -> Result<ScoredSet>
    where
        I: IntoIterator<Item = (&'a str, [f64; NUM_TAGS], TagSet)>,
    {
        let mut entries = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (chunk_id, scores, truth) in chunks {
            if !seen.insert(chunk_id.to_string()) {
                return Err(Error::Shape(format!("chunk {chunk_id} scored twice")));
            }
            for tag in Tag::ALL {
                let score = scores[tag.index()];
                if !score.is_finite() {
                    return Err(Error::Numeric(format!("non-finite score for {chunk_id}/{tag}")));
                }
                entries.push(ScoredEntry {
                    chunk_id: chunk_id.to_string(),
                    tag,
                    score,
                    truth: truth.contains(tag),
                });
            }
        }
        Ok(ScoredSet { entries })
    }

    pub fn entries(&self) -> &[ScoredEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Scores and truths for a single tag, in chunk order.
    pub fn for_tag(&self, tag: Tag) -> (Vec<f64>, Vec<bool>) {
        self.entries
            .iter()
            .filter(|e| e.tag == tag)
            .map(|e| (e.score, e.truth))
            .unzip()
    }
}

/// A point on the detection-error trade-off curve. Chunks scoring at or above
/// `threshold` are called positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub fnr: f64,
}

fn class_counts(truth: &[bool]) -> (usize, usize) {
    let pos = truth.iter().filter(|&&t| t).count();
    (pos, truth.len() - pos)
}

/// Operating points from the strictest threshold down, one per distinct score.
pub fn roc_points(scores: &[f64], truth: &[bool]) -> Result<Vec<RocPoint>> {
    if scores.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} scores but {} truth labels",
            scores.len(),
            truth.len()
        )));
    }
    let (pos, neg) = class_counts(truth);
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "EER needs both classes ({pos} positive, {neg} negative)"
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("non-finite score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        fnr: 1.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        // Tied scores move together as one threshold step.
        while i < order.len() && scores[order[i]] == s {
            if truth[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: s,
            fpr: fp as f64 / neg as f64,
            fnr: 1.0 - tp as f64 / pos as f64,
        });
    }
    Ok(points)
}

/// Equal error rate: the false-negative rate where it crosses the
/// false-positive rate, linearly interpolated between adjacent operating
/// points.
pub fn compute_eer(scores: &[f64], truth: &[bool]) -> Result<f64> {
    let points = roc_points(scores, truth)?;
    let mut prev = points[0];
    for &p in &points[1..] {
        let d_prev = prev.fnr - prev.fpr;
        let d = p.fnr - p.fpr;
        if d == 0.0 {
            return Ok(p.fnr);
        }
        if d < 0.0 {
            let alpha = d_prev / (d_prev - d);
            return Ok(prev.fnr + alpha * (p.fnr - prev.fnr));
        }
        prev = p;
    }
    unreachable!("the last operating point always has fnr = 0 <= fpr = 1")
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// Set when `TP + FP == 0` and precision was reported as 0.
    pub precision_undefined: bool,
    /// Set when `TP + FN == 0` and recall was reported as 0.
    pub recall_undefined: bool,
}

impl Prf {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Prf {
        let precision_undefined = tp + fp == 0;
        let recall_undefined = tp + fn_ == 0;
        let precision = if precision_undefined { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = if recall_undefined { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
        Prf {
            precision,
            recall,
            f_score: harmonic(precision, recall),
            tp,
            fp,
            fn_,
            precision_undefined,
            recall_undefined,
        }
    }
}

pub fn harmonic(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Precision, recall and F-score with decisions `score > threshold`.
pub fn compute_prf(scores: &[f64], truth: &[bool], threshold: f64) -> Prf {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&s, &t) in scores.iter().zip(truth) {
        match (s > threshold, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    Prf::from_counts(tp, fp, fn_)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TagMetrics {
    /// `None` when the fold lacks positives or negatives for the tag.
    pub eer: Option<f64>,
    pub prf: Prf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: String,
    pub tags: Vec<TagMetrics>,
}

impl FoldReport {
    pub fn eer(&self, tag: Tag) -> Option<f64> {
        self.tags[tag.index()].eer
    }

    pub fn average_eer(&self) -> Option<f64> {
        let eers: Option<Vec<f64>> = self.tags.iter().map(|t| t.eer).collect();
        eers.map(|v| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Per-tag EER and P/R/F for one fold.
pub fn evaluate_fold(fold: &str, scored: &ScoredSet, threshold: f64) -> Result<FoldReport> {
    let mut tags = Vec::with_capacity(NUM_TAGS);
    for tag in Tag::ALL {
        let (scores, truth) = scored.for_tag(tag);
        let eer = match compute_eer(&scores, &truth) {
            Ok(e) => Some(e),
            Err(Error::UndefinedMetric(why)) => {
                log::warn!("fold {fold}, tag {tag}: EER reported as N/A ({why})");
                None
            }
            Err(e) => return Err(e),
        };
        tags.push(TagMetrics {
            eer,
            prf: compute_prf(&scores, &truth, threshold),
        });
    }
    Ok(FoldReport {
        fold: fold.to_string(),
        tags,
    })
}

/// Fold-averaged report. Missing folds stay visible as gaps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub folds: Vec<(String, Option<FoldReport>)>,
    /// Unweighted mean over folds where the tag's EER is defined.
    pub tag_eer: Vec<Option<f64>>,
    /// Mean of `tag_eer` over tags.
    pub average_eer: Option<f64>,
    /// P/R/F from counts pooled over folds.
    pub tag_prf: Vec<Prf>,
    pub average_precision: f64,
    pub average_recall: f64,
    /// Harmonic mean of the averaged precision and recall.
    pub average_f_score: f64,
    /// Mean of the per-tag F-scores.
    pub macro_f_score: f64,
    /// True when every fold is present and every fold × tag EER is defined.
    pub complete: bool,
}

pub fn aggregate_folds(folds: Vec<(String, Option<FoldReport>)>) -> Result<EvalReport> {
    if folds.iter().all(|(_, r)| r.is_none()) {
        return Err(Error::Degenerate("no fold reports to aggregate".into()));
    }
    let mut complete = true;
    let mut tag_eer = Vec::with_capacity(NUM_TAGS);
    let mut tag_prf = Vec::with_capacity(NUM_TAGS);
    for tag in Tag::ALL {
        let mut sum = 0.0;
        let mut n = 0usize;
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for (name, report) in &folds {
            match report {
                Some(r) => {
                    if r.tags.len() != NUM_TAGS {
                        return Err(Error::Shape(format!("fold {name} does not cover all tags")));
                    }
                    let m = &r.tags[tag.index()];
                    match m.eer {
                        Some(e) => {
                            sum += e;
                            n += 1;
                        }
                        None => complete = false,
                    }
                    tp += m.prf.tp;
                    fp += m.prf.fp;
                    fn_ += m.prf.fn_;
                }
                None => complete = false,
            }
        }
        tag_eer.push((n > 0).then(|| sum / n as f64));
        tag_prf.push(Prf::from_counts(tp, fp, fn_));
    }
    let defined: Vec<f64> = tag_eer.iter().flatten().copied().collect();
    let average_eer = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    if defined.len() != NUM_TAGS {
        complete = false;
    }
    if !complete {
        log::warn!("fold × tag grid is incomplete; averages cover the available entries only");
    }
    let k = NUM_TAGS as f64;
    let average_precision = tag_prf.iter().map(|p| p.precision).sum::<f64>() / k;
    let average_recall = tag_prf.iter().map(|p| p.recall).sum::<f64>() / k;
    Ok(EvalReport {
        folds,
        tag_eer,
        average_eer,
        average_f_score: harmonic(average_precision, average_recall),
        macro_f_score: tag_prf.iter().map(|p| p.f_score).sum::<f64>() / k,
        average_precision,
        average_recall,
        tag_prf,
        complete,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"))
}

impl EvalReport {
    /// `tag,eer,precision,recall,f_score,macro_f_score,tp,fp,fn`, one row per
    /// tag plus an `average` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("tag,eer,precision,recall,f_score,macro_f_score,tp,fp,fn\n");
        for tag in Tag::ALL {
            let p = &self.tag_prf[tag.index()];
            let _ = writeln!(
                out,
                "{tag},{},{:.6},{:.6},{:.6},{:.6},{},{},{}",
                fmt_opt(self.tag_eer[tag.index()]),
                p.precision,
                p.recall,
                p.f_score,
                p.f_score,
                p.tp,
                p.fp,
                p.fn_
            );
        }
        let (tp, fp, fn_) = self.tag_prf.iter().fold((0, 0, 0), |a, p| (a.0 + p.tp, a.1 + p.fp, a.2 + p.fn_));
        let _ = writeln!(
            out,
            "average,{},{:.6},{:.6},{:.6},{:.6},{tp},{fp},{fn_}",
            fmt_opt(self.average_eer),
            self.average_precision,
            self.average_recall,
            self.average_f_score,
            self.macro_f_score
        );
        out
    }

    /// `fold,b,c,f,m,o,p,v,average` with `NA` marking gaps.
    pub fn fold_csv(&self) -> String {
        let mut out = String::from("fold");
        for tag in Tag::ALL {
            let _ = write!(out, ",{tag}");
        }
        out.push_str(",average\n");
        for (name, report) in &self.folds {
            out.push_str(name);
            for tag in Tag::ALL {
                let _ = write!(out, ",{}", fmt_opt(report.as_ref().and_then(|r| r.eer(tag))));
            }
            let _ = writeln!(out, ",{}", fmt_opt(report.as_ref().and_then(|r| r.average_eer())));
        }
        out.push_str("mean");
        for tag in Tag::ALL {
            let _ = write!(out, ",{}", fmt_opt(self.tag_eer[tag.index()]));
        }
        let _ = writeln!(out, ",{}", fmt_opt(self.average_eer));
        out
    }

    /// EER table with tags b..v and an Average column.
    pub fn to_markdown(&self, system: &str) -> String {
        let mut out = String::from("| System |");
        for tag in Tag::ALL {
            let _ = write!(out, " {tag} |");
        }
        out.push_str(" Average |\n|---|");
        out.push_str(&"---|".repeat(NUM_TAGS + 1));
        let _ = write!(out, "\n| {system} |");
        for tag in Tag::ALL {
            let _ = write!(out, " {} |", fmt_md(self.tag_eer[tag.index()]));
        }
        let _ = writeln!(out, " {} |", fmt_md(self.average_eer));
        out
    }
}

fn fmt_md(v: Option<f64>) -> String {
    v.map_or_else(|| "N/A".to_string(), |v| format!("{v:.3}"))
}

/// `threshold,fpr,fnr` rows for external ROC/DET plotting.
pub fn roc_csv(points: &[RocPoint]) -> String {
    let mut out = String::from("threshold,fpr,fnr\n");
    for p in points {
        let _ = writeln!(out, "{},{:.6},{:.6}", p.threshold, p.fpr, p.fnr);
    }
    out
}

/// Per-tag EERs read back from a report CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportTable {
    pub name: String,
    pub tag_eer: Vec<Option<f64>>,
    pub average_eer: Option<f64>,
}

impl ReportTable {
    pub fn from_report(name: &str, report: &EvalReport) -> Self {
        ReportTable {
            name: name.to_string(),
            tag_eer: report.tag_eer.clone(),
            average_eer: report.average_eer,
        }
    }

    pub fn parse(name: &str, csv_text: &str) -> Result<Self> {
        let path = Path::new(name);
        let mut rows: Vec<(String, Option<f64>)> = Vec::new();
        for (i, line) in csv_text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            let tag = fields.next().unwrap_or("").trim().to_string();
            let eer = fields.next().ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: "missing eer column".into(),
            })?;
            let eer = match eer.trim() {
                "NA" => None,
                v => Some(v.parse::<f64>().map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: format!("bad eer value {v:?}: {e}"),
                })?),
            };
            rows.push((tag, eer));
        }
        let tags: Vec<&str> = rows.iter().map(|(t, _)| t.as_str()).filter(|t| *t != "average").collect();
        let expected: Vec<String> = Tag::ALL.iter().map(|t| t.to_string()).collect();
        if tags != expected.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::Shape(format!(
                "report {name} covers tags {tags:?}, expected {expected:?}"
            )));
        }
        let tag_eer = rows.iter().filter(|(t, _)| t != "average").map(|(_, e)| *e).collect();
        let average_eer = rows.iter().find(|(t, _)| t == "average").and_then(|(_, e)| *e);
        Ok(ReportTable {
            name: name.to_string(),
            tag_eer,
            average_eer,
        })
    }

    fn row(&self) -> Vec<Option<f64>> {
        let mut v = self.tag_eer.clone();
        v.push(self.average_eer);
        v
    }
}

/// Side-by-side EER table; every report after the first gets a delta column
/// relative to the first.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub names: Vec<String>,
    /// `[report][tag..., average]`.
    pub values: Vec<Vec<Option<f64>>>,
    /// `[report - 1][tag..., average]`, value minus the first report's value.
    pub deltas: Vec<Vec<Option<f64>>>,
}

pub fn compare_runs(reports: &[ReportTable]) -> Result<Comparison> {
    if reports.len() < 2 {
        return Err(Error::Config("comparison needs at least two reports".into()));
    }
    for r in reports {
        if r.tag_eer.len() != NUM_TAGS {
            return Err(Error::Shape(format!("report {} has a mismatched tag set", r.name)));
        }
    }
    let values: Vec<Vec<Option<f64>>> = reports.iter().map(ReportTable::row).collect();
    let base = &values[0];
    let deltas = values[1..]
        .iter()
        .map(|row| {
            row.iter()
                .zip(base)
                .map(|(v, b)| match (v, b) {
                    (Some(v), Some(b)) => Some(v - b),
                    _ => None,
                })
                .collect()
        })
        .collect();
    Ok(Comparison {
        names: reports.iter().map(|r| r.name.clone()).collect(),
        values,
        deltas,
    })
}

impl Comparison {
    pub fn to_markdown(&self) -> String {
        let mut header = String::from("| Tag |");
        for (i, n) in self.names.iter().enumerate() {
            let _ = write!(header, " {n} |");
            if i > 0 {
                let _ = write!(header, " Δ {n} |");
            }
        }
        let cols = 2 * self.names.len() - 1;
        let mut out = header;
        out.push_str("\n|---|");
        out.push_str(&"---|".repeat(cols));
        out.push('\n');
        let labels: Vec<String> = Tag::ALL
            .iter()
            .map(|t| t.to_string())
            .chain(std::iter::once("Average".to_string()))
            .collect();
        for (row, label) in labels.iter().enumerate() {
            let _ = write!(out, "| {label} |");
            for (i, vals) in self.values.iter().enumerate() {
                let _ = write!(out, " {} |", fmt_md(vals[row]));
                if i > 0 {
                    let d = self.deltas[i - 1][row];
                    let _ = write!(out, " {} |", d.map_or("N/A".into(), |d| format!("{d:+.3}")));
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("tag");
        for (i, n) in self.names.iter().enumerate() {
            let _ = write!(out, ",{n}");
            if i > 0 {
                let _ = write!(out, ",delta_{n}");
            }
        }
        out.push('\n');
        let labels: Vec<String> = Tag::ALL
            .iter()
            .map(|t| t.to_string())
            .chain(std::iter::once("average".to_string()))
            .collect();
        for (row, label) in labels.iter().enumerate() {
            out.push_str(label);
            for (i, vals) in self.values.iter().enumerate() {
                let _ = write!(out, ",{}", fmt_opt(vals[row]));
                if i > 0 {
                    let _ = write!(out, ",{}", fmt_opt(self.deltas[i - 1][row]));
                }
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn separable_scores_give_zero() {
        let scores = [0.9, 0.8, 0.3, 0.1];
        let truth = [true, true, false, false];
        assert_eq!(compute_eer(&scores, &truth).unwrap(), 0.0);
    }

    #[test]
    fn constant_scores_give_half() {
        let scores = [0.5; 6];
        let truth = [true, false, true, false, false, true];
        assert_eq!(compute_eer(&scores, &truth).unwrap(), 0.5);
    }

    #[test]
    fn inverted_scores_give_one() {
        let scores = [0.1, 0.2, 0.8, 0.9];
        let truth = [true, true, false, false];
        assert_eq!(compute_eer(&scores, &truth).unwrap(), 1.0);
    }

    #[test]
    fn single_class_is_undefined() {
        assert!(matches!(
            compute_eer(&[0.1, 0.2], &[true, true]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn hand_counted_prf() {
        // TP=2, FP=1, FN=2.
        let scores = [0.9, 0.8, 0.7, 0.1, 0.2, 0.0];
        let truth = [true, true, false, true, true, false];
        let p = compute_prf(&scores, &truth, 0.4);
        assert_eq!((p.tp, p.fp, p.fn_), (2, 1, 2));
        assert_abs_diff_eq!(p.precision, 2.0 / 3.0, epsilon = 1e-9);
        assert_abs_diff_eq!(p.recall, 0.5, epsilon = 1e-9);
        assert_abs_diff_eq!(p.f_score, 4.0 / 7.0, epsilon = 1e-9);
    }

    #[test]
    fn perfect_and_empty_predictions() {
        let p = compute_prf(&[0.9, 0.1], &[true, false], 0.4);
        assert_eq!((p.precision, p.recall, p.f_score), (1.0, 1.0, 1.0));
        let p = compute_prf(&[0.1, 0.4], &[true, false], 0.4);
        assert!(p.precision_undefined);
        assert_eq!((p.precision, p.recall, p.f_score), (0.0, 0.0, 0.0));
    }

    fn fold_with(eer: f64) -> FoldReport {
        FoldReport {
            fold: "x".into(),
            tags: vec![
                TagMetrics {
                    eer: Some(eer),
                    prf: Prf::from_counts(1, 1, 1),
                };
                NUM_TAGS
            ],
        }
    }

    #[test]
    fn fold_means() {
        let r = aggregate_folds(vec![("0".into(), Some(fold_with(0.1))), ("1".into(), Some(fold_with(0.2)))]).unwrap();
        assert_abs_diff_eq!(r.average_eer.unwrap(), 0.15, epsilon = 1e-12);
        assert!(r.complete);
        let same = aggregate_folds(vec![("0".into(), Some(fold_with(0.3))), ("1".into(), Some(fold_with(0.3)))]).unwrap();
        assert_abs_diff_eq!(same.tag_eer[2].unwrap(), 0.3, epsilon = 1e-12);
    }

    #[test]
    fn missing_fold_is_a_gap() {
        let r = aggregate_folds(vec![("0".into(), Some(fold_with(0.1))), ("1".into(), None)]).unwrap();
        assert!(!r.complete);
        assert!(r.fold_csv().contains("1,NA,NA"));
    }

    #[test]
    fn comparison_deltas_and_order() {
        let a = ReportTable {
            name: "a".into(),
            tag_eer: vec![Some(0.2); NUM_TAGS],
            average_eer: Some(0.2),
        };
        let mut b = a.clone();
        b.name = "b".into();
        b.tag_eer[0] = Some(0.1);
        let mut c = a.clone();
        c.name = "c".into();
        let cmp = compare_runs(&[a.clone(), b, c]).unwrap();
        assert_eq!(cmp.names, vec!["a", "b", "c"]);
        assert_abs_diff_eq!(cmp.deltas[0][0].unwrap(), -0.1, epsilon = 1e-12);
        assert_eq!(cmp.deltas[1][0], Some(0.0));
        let self_cmp = compare_runs(&[a.clone(), a]).unwrap();
        assert!(self_cmp.deltas[0].iter().all(|d| *d == Some(0.0)));
    }

    #[test]
    fn report_csv_round_trip_and_tag_mismatch() {
        let r = aggregate_folds(vec![("0".into(), Some(fold_with(0.1)))]).unwrap();
        let t = ReportTable::parse("r", &r.to_csv()).unwrap();
        assert_abs_diff_eq!(t.tag_eer[6].unwrap(), 0.1, epsilon = 1e-6);
        let broken = r.to_csv().replace("\nv,", "\nx,");
        assert!(ReportTable::parse("r", &broken).is_err());
    }
}
