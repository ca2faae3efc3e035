//! Result tables (per-magnification metrics, method comparison) in text,
//! CSV and JSON form, plus simple SVG charts.
//!
//! Everything here is a pure function of stored artifacts; nothing
//! re-runs a model.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::Magnification;
use crate::error::{Error, Result};
use crate::metrics::{f1, round2, LatencyReport, MetricsReport};
use crate::training::EpochStats;

pub const F1_TOLERANCE: f64 = 0.01;

const ROW_NAMES: [&str; 5] = [
    "Accuracy (%)",
    "Precision (%)",
    "Recall (%)",
    "F1 (%)",
    "Test time (ms)",
];

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"))
}

fn parse_cell(s: &str) -> Result<Option<f64>> {
    match s.trim() {
        "" | "-" | "--" => Ok(None),
        t => t
            .parse::<f64>()
            .map(Some)
            .map_err(|_| Error::Validation(format!("`{t}` is not a number"))),
    }
}

fn parse_header_mags(header: &csv::StringRecord, skip: usize) -> Result<Vec<Magnification>> {
    let mags = header
        .iter()
        .skip(skip)
        .map(str::parse::<Magnification>)
        .collect::<Result<Vec<_>>>()?;
    if mags != Magnification::ALL {
        return Err(Error::Validation(format!(
            "expected magnification columns 40X,100X,200X,400X, got {:?}",
            header.iter().skip(skip).collect::<Vec<_>>()
        )));
    }
    Ok(mags)
}

/// One column of the per-magnification table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MagnificationColumn {
    pub magnification: Magnification,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub test_time_ms: Option<f64>,
}

impl MagnificationColumn {
    pub fn from_reports(metrics: &MetricsReport, latency: Option<&LatencyReport>) -> Self {
        Self {
            magnification: metrics.magnification,
            accuracy: metrics.accuracy,
            precision: metrics.precision,
            recall: metrics.recall,
            f1: metrics.f1,
            test_time_ms: latency.map(|l| round2(l.per_image_ms)),
        }
    }

    fn values(&self) -> [Option<f64>; 5] {
        [
            Some(self.accuracy),
            Some(self.precision),
            Some(self.recall),
            Some(self.f1),
            self.test_time_ms,
        ]
    }
}

/// Accuracy, precision, recall, F1 and test time for 40X..400X.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MagnificationTable {
    pub columns: Vec<MagnificationColumn>,
}

impl MagnificationTable {
    /// Requires exactly one column per magnification; sorts them.
    pub fn new(columns: Vec<MagnificationColumn>) -> Result<Self> {
        let mut by_mag = BTreeMap::new();
        for c in columns {
            let mag = c.magnification;
            if by_mag.insert(mag, c).is_some() {
                return Err(Error::Validation(format!("two results for {mag}")));
            }
        }
        let missing: Vec<String> = Magnification::ALL
            .iter()
            .filter(|m| !by_mag.contains_key(m))
            .map(ToString::to_string)
            .collect();
        if !missing.is_empty() {
            return Err(Error::IncompleteReport(format!(
                "no results for {}",
                missing.join(", ")
            )));
        }
        for c in by_mag.values() {
            for v in c.values()[..4].iter().flatten() {
                if !(0.0..=100.0).contains(v) {
                    return Err(Error::Validation(format!(
                        "{} percentage {v} outside [0, 100]",
                        c.magnification
                    )));
                }
            }
        }
        Ok(Self {
            columns: by_mag.into_values().collect(),
        })
    }

    pub fn from_reports(reports: &[(MetricsReport, Option<LatencyReport>)]) -> Result<Self> {
        Self::new(
            reports
                .iter()
                .map(|(m, l)| MagnificationColumn::from_reports(m, l.as_ref()))
                .collect(),
        )
    }

    /// Columns whose F1 disagrees with the harmonic mean of its precision
    /// and recall by more than [`F1_TOLERANCE`].
    pub fn f1_inconsistencies(&self) -> Vec<String> {
        self.columns
            .iter()
            .filter_map(|c| {
                let want = f1(c.precision, c.recall);
                ((want - c.f1).abs() > F1_TOLERANCE).then(|| {
                    format!(
                        "{}: F1 {:.2} differs from 2PR/(P+R) = {want:.4} by more than {F1_TOLERANCE}",
                        c.magnification, c.f1
                    )
                })
            })
            .collect()
    }

    /// Logs a warning for every inconsistent F1 and returns their count.
    pub fn warn_inconsistencies(&self) -> usize {
        let issues = self.f1_inconsistencies();
        for w in &issues {
            warn!("{w}");
        }
        issues.len()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{:<16}", "Metric");
        for c in &self.columns {
            let _ = write!(out, "{:>10}", c.magnification.to_string());
        }
        out.push('\n');
        for (i, name) in ROW_NAMES.iter().enumerate() {
            let _ = write!(out, "{name:<16}");
            for c in &self.columns {
                let _ = write!(out, "{:>10}", cell(c.values()[i]));
            }
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["metric".to_string()];
        header.extend(self.columns.iter().map(|c| c.magnification.to_string()));
        w.write_record(&header)?;
        for (i, name) in ROW_NAMES.iter().enumerate() {
            let mut row = vec![name.to_string()];
            row.extend(self.columns.iter().map(|c| cell(c.values()[i])));
            w.write_record(&row)?;
        }
        csv_string(w)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let mags = parse_header_mags(r.headers()?, 1)?;
        let mut rows: BTreeMap<String, Vec<Option<f64>>> = BTreeMap::new();
        for rec in r.records() {
            let rec = rec?;
            let name = rec.get(0).unwrap_or_default().to_string();
            let vals = rec
                .iter()
                .skip(1)
                .map(parse_cell)
                .collect::<Result<Vec<_>>>()?;
            if vals.len() != mags.len() {
                return Err(Error::Validation(format!(
                    "row `{name}` has {} cells",
                    vals.len()
                )));
            }
            rows.insert(name, vals);
        }
        let get = |name: &str, j: usize| -> Result<Option<f64>> {
            rows.get(name)
                .map(|v| v[j])
                .ok_or_else(|| Error::Validation(format!("missing row `{name}`")))
        };
        let required = |name: &str, j: usize| -> Result<f64> {
            get(name, j)?.ok_or_else(|| {
                Error::Validation(format!("row `{name}` lacks a value for {}", mags[j]))
            })
        };
        let columns = mags
            .iter()
            .enumerate()
            .map(|(j, &magnification)| {
                Ok(MagnificationColumn {
                    magnification,
                    accuracy: required(ROW_NAMES[0], j)?,
                    precision: required(ROW_NAMES[1], j)?,
                    recall: required(ROW_NAMES[2], j)?,
                    f1: required(ROW_NAMES[3], j)?,
                    test_time_ms: get(ROW_NAMES[4], j)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(columns)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let t: Self = serde_json::from_str(text)?;
        Self::new(t.columns)
    }
}

fn csv_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Validation(format!("csv writer: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ComparisonMetric {
    Acc,
    Pre,
    Recall,
    F1,
}

impl ComparisonMetric {
    pub const ALL: [ComparisonMetric; 4] = [
        ComparisonMetric::Acc,
        ComparisonMetric::Pre,
        ComparisonMetric::Recall,
        ComparisonMetric::F1,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ComparisonMetric::Acc => "Acc",
            ComparisonMetric::Pre => "Pre",
            ComparisonMetric::Recall => "Recall",
            ComparisonMetric::F1 => "F1",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s.trim())
            .ok_or_else(|| {
                Error::Validation(format!(
                    "unknown metric `{s}` (expected Acc, Pre, Recall or F1)"
                ))
            })
    }
}

/// One metric of one method across the four magnifications.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model_name: String,
    pub metric: ComparisonMetric,
    /// Percentages for 40X, 100X, 200X, 400X; `None` when not reported.
    pub values: [Option<f64>; 4],
}

impl ComparisonRow {
    pub fn validate(&self) -> Result<()> {
        if self.model_name.trim().is_empty() {
            return Err(Error::Validation(
                "comparison row without a model name".into(),
            ));
        }
        for v in self.values.iter().flatten() {
            if !v.is_finite() || !(0.0..=100.0).contains(v) {
                return Err(Error::Validation(format!(
                    "{} {}: value {v} outside [0, 100]",
                    self.model_name,
                    self.metric.as_str()
                )));
            }
        }
        Ok(())
    }
}

/// Four rows (Acc, Pre, Recall, F1) for a freshly evaluated method.
pub fn rows_from_table(model_name: &str, table: &MagnificationTable) -> Vec<ComparisonRow> {
    let pick = |f: fn(&MagnificationColumn) -> f64| -> [Option<f64>; 4] {
        let mut out = [None; 4];
        for (slot, c) in out.iter_mut().zip(&table.columns) {
            *slot = Some(f(c));
        }
        out
    };
    vec![
        ComparisonRow {
            model_name: model_name.into(),
            metric: ComparisonMetric::Acc,
            values: pick(|c| c.accuracy),
        },
        ComparisonRow {
            model_name: model_name.into(),
            metric: ComparisonMetric::Pre,
            values: pick(|c| c.precision),
        },
        ComparisonRow {
            model_name: model_name.into(),
            metric: ComparisonMetric::Recall,
            values: pick(|c| c.recall),
        },
        ComparisonRow {
            model_name: model_name.into(),
            metric: ComparisonMetric::F1,
            values: pick(|c| c.f1),
        },
    ]
}

/// Parses `model,metric,40X,100X,200X,400X` rows; `#` starts a comment and
/// `-`/`--`/empty cells mean "not reported".
pub fn parse_comparison_csv(text: &str) -> Result<Vec<ComparisonRow>> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    parse_header_mags(r.headers()?, 2)?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != 6 {
            return Err(Error::Validation(format!(
                "comparison row has {} fields, expected 6",
                rec.len()
            )));
        }
        let mut values = [None; 4];
        for (slot, s) in values.iter_mut().zip(rec.iter().skip(2)) {
            *slot = parse_cell(s)?;
        }
        let row = ComparisonRow {
            model_name: rec[0].trim().to_string(),
            metric: ComparisonMetric::parse(&rec[1])?,
            values,
        };
        row.validate()?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn load_comparison_fixture(path: &Path) -> Result<Vec<ComparisonRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_comparison_csv(&text)
}

fn check_rows(rows: &[ComparisonRow]) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::Validation(
            "comparison table needs at least one row".into(),
        ));
    }
    rows.iter().try_for_each(ComparisonRow::validate)
}

/// Grid with one block of metric rows per method; the method name is shown
/// on its first row only.
pub fn emit_comparison_table(rows: &[ComparisonRow]) -> Result<String> {
    check_rows(rows)?;
    let width = rows
        .iter()
        .map(|r| r.model_name.len())
        .max()
        .unwrap_or(5)
        .max(5)
        + 2;
    let mut out = format!("{:<width$}{:<8}", "Model", "Metric");
    for m in Magnification::ALL {
        let _ = write!(out, "{:>10}", m.to_string());
    }
    out.push('\n');
    let mut prev: Option<&str> = None;
    for r in rows {
        let name = if prev == Some(r.model_name.as_str()) {
            ""
        } else {
            r.model_name.as_str()
        };
        prev = Some(&r.model_name);
        let _ = write!(out, "{name:<width$}{:<8}", r.metric.as_str());
        for v in r.values {
            let _ = write!(out, "{:>10}", cell(v));
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn comparison_to_csv(rows: &[ComparisonRow]) -> Result<String> {
    check_rows(rows)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["model", "metric", "40X", "100X", "200X", "400X"])?;
    for r in rows {
        let mut rec = vec![r.model_name.clone(), r.metric.as_str().to_string()];
        rec.extend(r.values.iter().map(|v| cell(*v)));
        w.write_record(&rec)?;
    }
    csv_string(w)
}

pub fn comparison_to_json(rows: &[ComparisonRow]) -> Result<String> {
    check_rows(rows)?;
    Ok(serde_json::to_string_pretty(rows)?)
}

fn svg_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

const PALETTE: [&str; 4] = ["#4e79a7", "#f28e2b", "#59a14f", "#e15759"];

/// Grouped bar chart: one group per magnification, one bar per metric.
pub fn metrics_bar_chart_svg(table: &MagnificationTable) -> String {
    let (w, h) = (640.0, 360.0);
    let (left, right, top, bottom) = (50.0, 20.0, 30.0, 50.0);
    let plot_w = w - left - right;
    let plot_h = h - top - bottom;
    let group_w = plot_w / table.columns.len().max(1) as f64;
    let bar_w = group_w * 0.8 / 4.0;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    let _ = writeln!(s, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
    for tick in (0..=100).step_by(20) {
        let y = top + plot_h * (1.0 - tick as f64 / 100.0);
        let _ = writeln!(
            s,
            "<line x1=\"{left}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#ddd\"/><text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{tick}</text>",
            w - right,
            left - 6.0,
            y + 4.0
        );
    }
    for (gi, c) in table.columns.iter().enumerate() {
        let gx = left + gi as f64 * group_w + group_w * 0.1;
        for (bi, v) in [c.accuracy, c.precision, c.recall, c.f1]
            .into_iter()
            .enumerate()
        {
            let bh = plot_h * v / 100.0;
            let _ = writeln!(
                s,
                "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{bar_w:.1}\" height=\"{bh:.1}\" fill=\"{}\"><title>{v:.2}</title></rect>",
                gx + bi as f64 * bar_w,
                top + plot_h - bh,
                PALETTE[bi]
            );
        }
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
            gx + 2.0 * bar_w,
            top + plot_h + 18.0,
            c.magnification
        );
    }
    for (i, name) in ["Accuracy", "Precision", "Recall", "F1"].iter().enumerate() {
        let x = left + i as f64 * 110.0;
        let _ = writeln!(
            s,
            "<rect x=\"{x:.1}\" y=\"{:.1}\" width=\"10\" height=\"10\" fill=\"{}\"/><text x=\"{:.1}\" y=\"{:.1}\">{name}</text>",
            h - 22.0,
            PALETTE[i],
            x + 14.0,
            h - 13.0
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Training and validation loss per epoch plus validation accuracy (on a
/// 0..1 scale) as polylines.
pub fn training_curves_svg(history: &[EpochStats], title: &str) -> String {
    let (w, h) = (640.0, 360.0);
    let (left, right, top, bottom) = (50.0, 20.0, 30.0, 50.0);
    let plot_w = w - left - right;
    let plot_h = h - top - bottom;
    let max_loss = history
        .iter()
        .flat_map(|e| [e.train_loss, e.val_loss])
        .filter(|v| v.is_finite())
        .fold(1.0f64, f64::max);
    let n = history.len().max(2) as f64;
    let x_of = |i: usize| left + plot_w * i as f64 / (n - 1.0);
    let y_of = |v: f64, max: f64| top + plot_h * (1.0 - (v / max).clamp(0.0, 1.0));
    let line = |vals: Vec<f64>, max: f64| -> String {
        vals.iter()
            .enumerate()
            .map(|(i, &v)| format!("{:.1},{:.1}", x_of(i), y_of(v, max)))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    let _ = writeln!(s, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
    let _ = writeln!(
        s,
        "<text x=\"{left}\" y=\"18\">{}</text>",
        svg_escape(title)
    );
    let _ = writeln!(
        s,
        "<line x1=\"{left}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>",
        top + plot_h,
        w - right,
        top + plot_h
    );
    let series = [
        (
            "train loss",
            line(history.iter().map(|e| e.train_loss).collect(), max_loss),
        ),
        (
            "val loss",
            line(history.iter().map(|e| e.val_loss).collect(), max_loss),
        ),
        (
            "val accuracy",
            line(history.iter().map(|e| e.val_accuracy).collect(), 100.0),
        ),
    ];
    for (i, (name, pts)) in series.iter().enumerate() {
        let _ = writeln!(
            s,
            "<polyline points=\"{pts}\" fill=\"none\" stroke=\"{}\" stroke-width=\"2\"/>",
            PALETTE[i]
        );
        let x = left + i as f64 * 140.0;
        let _ = writeln!(
            s,
            "<rect x=\"{x:.1}\" y=\"{:.1}\" width=\"10\" height=\"10\" fill=\"{}\"/><text x=\"{:.1}\" y=\"{:.1}\">{name}</text>",
            h - 22.0,
            PALETTE[i],
            x + 14.0,
            h - 13.0
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn column(m: Magnification, v: f64) -> MagnificationColumn {
        MagnificationColumn {
            magnification: m,
            accuracy: v,
            precision: v,
            recall: v,
            f1: v,
            test_time_ms: Some(1.5),
        }
    }

    #[test]
    fn missing_magnification_is_incomplete() {
        let cols = vec![
            column(Magnification::X40, 90.0),
            column(Magnification::X100, 90.0),
        ];
        assert!(matches!(
            MagnificationTable::new(cols),
            Err(Error::IncompleteReport(_))
        ));
    }

    #[test]
    fn all_hundred_cells() {
        let t =
            MagnificationTable::new(Magnification::ALL.map(|m| column(m, 100.0)).to_vec()).unwrap();
        let text = t.to_text();
        assert_eq!(text.matches("100.00").count(), 16);
        assert!(t.f1_inconsistencies().is_empty());
    }

    #[test]
    fn absent_values_render_as_dash() {
        let row = ComparisonRow {
            model_name: "X".into(),
            metric: ComparisonMetric::Pre,
            values: [None, Some(1.0), None, None],
        };
        let text = emit_comparison_table(&[row]).unwrap();
        assert_eq!(text.lines().nth(1).unwrap().matches(" -").count(), 3);
    }

    #[test]
    fn malformed_rows_rejected() {
        let bad = "model,metric,40X,100X,200X,400X\nA,Acc,101,1,1,1\n";
        assert!(matches!(
            parse_comparison_csv(bad),
            Err(Error::Validation(_))
        ));
        let bad = "model,metric,40X,100X,200X,400X\nA,Speed,1,1,1,1\n";
        assert!(matches!(
            parse_comparison_csv(bad),
            Err(Error::Validation(_))
        ));
        assert!(emit_comparison_table(&[]).is_err());
    }

    #[test]
    fn svg_is_well_formed_enough() {
        let t =
            MagnificationTable::new(Magnification::ALL.map(|m| column(m, 80.0)).to_vec()).unwrap();
        let svg = metrics_bar_chart_svg(&t);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<rect x=").count(), 16 + 4);
        let hist = vec![
            EpochStats {
                epoch: 1,
                train_loss: 0.7,
                val_loss: 0.8,
                val_accuracy: 50.0,
            },
            EpochStats {
                epoch: 2,
                train_loss: 0.3,
                val_loss: 0.4,
                val_accuracy: 90.0,
            },
        ];
        let svg = training_curves_svg(&hist, "run <a>");
        assert_eq!(svg.matches("<polyline").count(), 3);
        assert!(svg.contains("run &lt;a&gt;"));
    }
}
