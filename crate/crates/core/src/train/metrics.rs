//! F1 bookkeeping, raw prediction records and the metrics report.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::model::ModelKind;
use crate::saliency::Method;
use crate::views::View;
use crate::{Error, Result};

pub const REPORT_FORMAT: &str = "stan-report";
pub const REPORT_VERSION: u32 = 1;

/// `2 TP / (2 TP + FP + FN)`, zero when nothing is predicted or labeled.
pub fn f1(predictions: &[bool], labels: &[bool]) -> f64 {
    let mut c = Counts::default();
    for (&p, &l) in predictions.iter().zip(labels) {
        c.add(p, l);
    }
    c.f1()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl Counts {
    pub fn add(&mut self, predicted: bool, label: bool) {
        match (predicted, label) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn merge(&mut self, o: &Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }

    pub fn f1(&self) -> f64 {
        crate::saliency::f1_counts(self.tp, self.fp, self.fn_)
    }
}

/// Per-class and pooled F1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Summary {
    pub per_class: Vec<f64>,
    /// Micro F1 from counts pooled over every class.
    pub overall: f64,
    pub macro_avg: f64,
}

impl F1Summary {
    pub fn from_counts(per_class: &[Counts], pooled: &Counts) -> Self {
        let f: Vec<f64> = per_class.iter().map(Counts::f1).collect();
        let macro_avg = if f.is_empty() { 0.0 } else { f.iter().sum::<f64>() / f.len() as f64 };
        Self {
            per_class: f,
            overall: pooled.f1(),
            macro_avg,
        }
    }
}

/// One-vs-rest video classification F1. The pooled counts make `overall`
/// the micro average, which equals accuracy for single-label data.
pub fn video_f1(records: &[VideoRecord], num_classes: usize) -> F1Summary {
    let mut per = vec![Counts::default(); num_classes];
    for r in records {
        for (c, cnt) in per.iter_mut().enumerate() {
            cnt.add(r.predicted == c, r.label == c);
        }
    }
    let mut pooled = Counts::default();
    per.iter().for_each(|c| pooled.merge(c));
    F1Summary::from_counts(&per, &pooled)
}

/// Frame-identification F1, per class of the clip and pooled over all frames.
pub fn frame_f1<'a>(records: impl IntoIterator<Item = &'a FrameRecord>, num_classes: usize) -> F1Summary {
    let mut per = vec![Counts::default(); num_classes];
    let mut pooled = Counts::default();
    for r in records {
        per[r.label].add(r.predicted, r.important);
        pooled.add(r.predicted, r.important);
    }
    F1Summary::from_counts(&per, &pooled)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub model: ModelKind,
    pub view: View,
    pub fold: usize,
    pub clip: String,
    pub label: usize,
    pub predicted: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub model: ModelKind,
    pub view: View,
    pub method: Method,
    pub fold: usize,
    pub clip: String,
    /// True video class of the clip.
    pub label: usize,
    pub frame: usize,
    pub important: bool,
    pub score: f64,
    pub threshold: f64,
    pub predicted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMethodReport {
    pub method: Method,
    pub f1: F1Summary,
    /// F1 of predicting every frame important.
    pub always_positive: f64,
    /// Calibrated threshold of each fold.
    pub thresholds: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldAudit {
    pub fold: usize,
    pub train_clips: usize,
    pub test_clips: usize,
    /// Clip ids present in both train and test portions.
    pub overlap: usize,
    pub final_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub model: ModelKind,
    pub view: View,
    /// Frames per model input (sampled length for STAN on long clips).
    pub input_frames: usize,
    pub video: F1Summary,
    pub frames: Vec<FrameMethodReport>,
    pub folds: Vec<FoldAudit>,
}

impl CellReport {
    pub fn method(&self, m: Method) -> Option<&FrameMethodReport> {
        self.frames.iter().find(|f| f.method == m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub format: String,
    pub version: u32,
    pub dataset_id: String,
    pub sequence_length: usize,
    pub num_classes: usize,
    pub protocol: String,
    pub cells: Vec<CellReport>,
}

impl MetricsReport {
    pub fn cell(&self, model: ModelKind, view: View) -> Option<&CellReport> {
        self.cells.iter().find(|c| c.model == model && c.view == view)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text).map_err(|e| Error::Argument(format!("malformed report: {e}")))?;
        if r.format != REPORT_FORMAT || r.version != REPORT_VERSION {
            return Err(Error::Argument(format!(
                "unsupported report {} v{}",
                r.format, r.version
            )));
        }
        Ok(r)
    }
}

/// Delimited rows with a header line.
pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Argument(format!("csv: {e}")))?;
    }
    w.into_inner().map_err(|e| Error::Argument(format!("csv: {e}")))
}

pub fn from_csv<T: serde::de::DeserializeOwned>(bytes: &[u8]) -> Result<Vec<T>> {
    csv::Reader::from_reader(bytes)
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Argument(format!("csv: {e}")))
}

/// Long-format metrics of one cell: `metric,method,class,value`.
pub fn cell_csv(cell: &CellReport) -> Result<Vec<u8>> {
    #[derive(Serialize)]
    struct Row<'a> {
        metric: &'a str,
        method: &'a str,
        class: String,
        value: f64,
    }
    let mut rows = Vec::new();
    let mut push = |metric, method, f: &F1Summary| {
        for (c, &v) in f.per_class.iter().enumerate() {
            rows.push(Row { metric, method, class: c.to_string(), value: v });
        }
        rows.push(Row { metric, method, class: "overall".into(), value: f.overall });
        rows.push(Row { metric, method, class: "macro".into(), value: f.macro_avg });
    };
    push("video_f1", "-", &cell.video);
    for m in &cell.frames {
        push("frame_f1", m.method.as_str(), &m.f1);
    }
    for m in &cell.frames {
        rows.push(Row {
            metric: "always_positive_f1",
            method: m.method.as_str(),
            class: "overall".into(),
            value: m.always_positive,
        });
    }
    to_csv(&rows)
}

fn row(out: &mut String, label: &str, values: &[f64]) {
    let _ = write!(out, "{label:<34}");
    for v in values {
        let _ = write!(out, " {:>8.2}", 100.0 * v);
    }
    out.push('\n');
}

fn header(out: &mut String, title: &str, num_classes: usize, extra: &[&str]) {
    let _ = writeln!(out, "{title}");
    let _ = write!(out, "{:<34}", "");
    for c in 0..num_classes {
        let _ = write!(out, " {:>8}", format!("class {c}"));
    }
    let _ = write!(out, " {:>8}", "overall");
    for e in extra {
        let _ = write!(out, " {e:>8}");
    }
    out.push('\n');
}

/// Plain-text tables: video classification F1 per model and view, then frame
/// identification F1 per method for every report. Values are percentages.
pub fn render_tables(reports: &[MetricsReport]) -> String {
    let mut out = String::new();
    for r in reports {
        let _ = writeln!(
            out,
            "dataset {} | {} frames | {} classes | {}\n",
            r.dataset_id, r.sequence_length, r.num_classes, r.protocol
        );
        header(&mut out, "Video classification F1", r.num_classes, &[]);
        for c in &r.cells {
            let mut v = c.video.per_class.clone();
            v.push(c.video.overall);
            row(&mut out, &format!("{} {}", c.model, c.view), &v);
        }
        out.push('\n');
        let methods: Vec<Method> = crate::saliency::METHODS
            .into_iter()
            .filter(|m| r.cells.iter().any(|c| c.method(*m).is_some()))
            .collect();
        for m in methods {
            header(
                &mut out,
                &format!("Frame identification F1 ({m})"),
                r.num_classes,
                &["all-pos", "theta%"],
            );
            for c in &r.cells {
                if let Some(f) = c.method(m) {
                    let mut v = f.f1.per_class.clone();
                    v.push(f.f1.overall);
                    v.push(f.always_positive);
                    let theta = f.thresholds.iter().sum::<f64>() / f.thresholds.len().max(1) as f64;
                    v.push(theta);
                    row(&mut out, &format!("{} {}", c.model, c.view), &v);
                }
            }
            out.push('\n');
        }
    }
    out
}
