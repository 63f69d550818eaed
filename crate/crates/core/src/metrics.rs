//! Event-log analysis: exponential smoothing, SVG curve plots and confusion matrices.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SplitTag};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::trainer::{read_event_log, run_eval, FeatureCache, TrainConfig, TrainEvent};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Loss,
    Accuracy,
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "loss" => Ok(Self::Loss),
            "accuracy" => Ok(Self::Accuracy),
            _ => Err(Error::Param(format!("unknown metric {s:?} (loss, accuracy)"))),
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Loss => "loss",
            Self::Accuracy => "accuracy",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub run: String,
    pub metric: Metric,
    pub split: SplitTag,
    /// `(epoch, value)`, epochs strictly increasing.
    pub points: Vec<(usize, f64)>,
}

impl Series {
    pub fn from_events(run: &str, events: &[TrainEvent], metric: Metric, split: SplitTag) -> Result<Self> {
        let points: Vec<(usize, f64)> = events
            .iter()
            .filter(|e| e.split == split)
            .map(|e| {
                let v = match metric {
                    Metric::Loss => e.loss,
                    Metric::Accuracy => e.accuracy,
                };
                (e.epoch, v)
            })
            .collect();
        let s = Self {
            run: run.to_string(),
            metric,
            split,
            points,
        };
        s.validate()?;
        Ok(s)
    }

    /// Series for one split of an event log; the run is named after the file stem.
    pub fn from_log(path: &Path, metric: Metric, split: SplitTag) -> Result<Self> {
        let events = read_event_log(path)?;
        let run = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        Self::from_events(&run, &events, metric, split)
            .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::Param(format!("series {:?} is empty", self.run)));
        }
        if self.points.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::Param(format!("series {:?}: epochs not increasing", self.run)));
        }
        if self.points.iter().any(|p| !p.1.is_finite()) {
            return Err(Error::Param(format!("series {:?}: non-finite value", self.run)));
        }
        Ok(())
    }
}

/// Exponential moving average seeded with the first raw value.
pub fn smooth(s: &Series, alpha: f64) -> Result<Series> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::Param(format!("smoothing must be in [0, 1), got {alpha}")));
    }
    let Some(&(_, first)) = s.points.first() else {
        return Err(Error::Param(format!("series {:?} is empty", s.run)));
    };
    let mut prev = first;
    let points = s
        .points
        .iter()
        .map(|&(epoch, y)| {
            if alpha > 0.0 {
                // interpolated form, clamped: the two-product form drifts by an ulp on flat runs
                let next = prev + (1.0 - alpha) * (y - prev);
                prev = next.clamp(prev.min(y), prev.max(y));
            } else {
                prev = y;
            }
            (epoch, prev)
        })
        .collect();
    Ok(Series { points, ..s.clone() })
}

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

fn xml_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

fn nice_ticks(lo: f64, hi: f64, target: usize) -> Vec<f64> {
    let span = (hi - lo).max(f64::EPSILON);
    let raw = span / target as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|&s| s >= raw)
        .unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut ticks = Vec::new();
    while t <= hi + step * 1e-9 {
        ticks.push(if t.abs() < step * 1e-9 { 0.0 } else { t });
        t += step;
    }
    ticks
}

/// Renders raw curves (faded) with a smoothed overlay and a legend, one entry per series.
pub fn render_svg(series: &[Series], alpha: f64) -> Result<String> {
    let Some(first) = series.first() else {
        return Err(Error::Param("nothing to plot".into()));
    };
    if let Some(s) = series.iter().find(|s| s.metric != first.metric) {
        return Err(Error::Param(format!(
            "cannot mix metrics in one plot ({} and {})",
            first.metric, s.metric
        )));
    }
    for s in series {
        s.validate()?;
    }
    let smoothed = series.iter().map(|s| smooth(s, alpha)).collect::<Result<Vec<_>>>()?;

    let (width, height) = (800.0, 480.0);
    let (left, right, top, bottom) = (70.0, 180.0, 30.0, 50.0);
    let (pw, ph) = (width - left - right, height - top - bottom);
    let all = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(e, v) in all {
        x0 = x0.min(e as f64);
        x1 = x1.max(e as f64);
        y0 = y0.min(v);
        y1 = y1.max(v);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let sx = |e: f64| left + (e - x0) / (x1 - x0) * pw;
    let sy = |v: f64| top + (1.0 - (v - y0) / (y1 - y0)) * ph;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">
<rect width="100%" height="100%" fill="white"/>"#
    );
    let _ = writeln!(svg, r#"<g class="axes" stroke="black" fill="none">"#);
    let _ = writeln!(
        svg,
        r#"<line x1="{left}" y1="{}" x2="{}" y2="{}"/>"#,
        top + ph,
        left + pw,
        top + ph
    );
    let _ = writeln!(svg, r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{}"/>"#, top + ph);
    let _ = writeln!(svg, "</g>");

    let _ = writeln!(svg, r#"<g class="ticks">"#);
    for t in nice_ticks(x0, x1, 8) {
        let x = sx(t);
        let _ = writeln!(
            svg,
            r#"<line x1="{x:.2}" y1="{}" x2="{x:.2}" y2="{}" stroke="black"/><text x="{x:.2}" y="{}" text-anchor="middle">{t}</text>"#,
            top + ph,
            top + ph + 5.0,
            top + ph + 18.0
        );
    }
    for t in nice_ticks(y0, y1, 6) {
        let y = sy(t);
        let _ = writeln!(
            svg,
            r##"<line x1="{left}" y1="{y:.2}" x2="{}" y2="{y:.2}" stroke="#dddddd"/><text x="{}" y="{:.2}" text-anchor="end">{}</text>"##,
            left + pw,
            left - 6.0,
            y + 4.0,
            (t * 1e6).round() / 1e6
        );
    }
    let _ = writeln!(svg, "</g>");
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">epoch</text>"#,
        left + pw / 2.0,
        height - 10.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        first.metric
    );

    let polyline = |s: &Series| {
        s.points
            .iter()
            .map(|&(e, v)| format!("{:.2},{:.2}", sx(e as f64), sy(v)))
            .collect::<Vec<_>>()
            .join(" ")
    };
    for (i, (raw, sm)) in series.iter().zip(&smoothed).enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(
            svg,
            r#"<g class="series" data-run="{}">
<polyline class="raw" points="{}" fill="none" stroke="{color}" stroke-opacity="0.3" stroke-width="1.5"/>
<polyline class="smoothed" points="{}" fill="none" stroke="{color}" stroke-width="2"/>
</g>"#,
            xml_escape(&raw.run),
            polyline(raw),
            polyline(sm)
        );
    }

    let _ = writeln!(svg, r#"<g class="legend">"#);
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let y = top + 10.0 + 20.0 * i as f64;
        let x = left + pw + 15.0;
        let _ = writeln!(
            svg,
            r#"<g class="legend-entry"><line x1="{x}" y1="{y}" x2="{}" y2="{y}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text></g>"#,
            x + 20.0,
            x + 26.0,
            y + 4.0,
            xml_escape(&s.run)
        );
    }
    let _ = writeln!(svg, "</g>\n</svg>");
    Ok(svg)
}

pub fn plot(series: &[Series], alpha: f64, out: &Path) -> Result<()> {
    let svg = render_svg(series, alpha)?;
    std::fs::write(out, svg).map_err(|e| Error::io(out, e))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    /// `counts[true][predicted]`.
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn from_predictions(classes: &[String], labels: &[usize], predicted: &[usize]) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Dataset("no samples to tabulate".into()));
        }
        if labels.len() != predicted.len() {
            return Err(Error::shape(format!(
                "{} labels but {} predictions",
                labels.len(),
                predicted.len()
            )));
        }
        let k = classes.len();
        let mut counts = vec![vec![0; k]; k];
        for (&t, &p) in labels.iter().zip(predicted) {
            if t >= k || p >= k {
                return Err(Error::Param(format!("class index out of range for {k} classes")));
            }
            counts[t][p] += 1;
        }
        Ok(Self {
            classes: classes.to_vec(),
            counts,
        })
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> usize {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        self.trace() as f64 / self.total() as f64
    }

    /// Per-class recall; `None` for classes without samples.
    pub fn per_class_accuracy(&self) -> Vec<Option<f64>> {
        self.counts
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let n: usize = row.iter().sum();
                (n > 0).then(|| row[i] as f64 / n as f64)
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        let name_w = self.classes.iter().map(String::len).max().unwrap_or(0).max(4);
        let cell_w = self
            .counts
            .iter()
            .flatten()
            .map(|c| c.to_string().len())
            .max()
            .unwrap_or(1)
            .max(3);
        let mut out = String::new();
        let _ = write!(out, "{:>name_w$}", "true");
        for j in 0..self.classes.len() {
            let _ = write!(out, " {:>cell_w$}", j);
        }
        let _ = writeln!(out, "  accuracy");
        for (i, row) in self.counts.iter().enumerate() {
            let _ = write!(out, "{:>name_w$}", self.classes[i]);
            for c in row {
                let _ = write!(out, " {c:>cell_w$}");
            }
            match self.per_class_accuracy()[i] {
                Some(a) => writeln!(out, "  {a:.4}"),
                None => writeln!(out, "  -"),
            }
            .ok();
        }
        let _ = writeln!(
            out,
            "columns: predicted class index; overall accuracy {:.4} ({}/{})",
            self.accuracy(),
            self.trace(),
            self.total()
        );
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("true\\predicted");
        for c in &self.classes {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (name, row) in self.classes.iter().zip(&self.counts) {
            out.push_str(name);
            for c in row {
                let _ = write!(out, ",{c}");
            }
            out.push('\n');
        }
        out
    }
}

/// Confusion matrix of a split under the same inference pass `evaluate` uses.
pub fn confusion(model: &mut Model, data: &Dataset, split: SplitTag, cfg: &TrainConfig) -> Result<ConfusionMatrix> {
    let out = run_eval(model, data, split, cfg, 0, &mut FeatureCache::disabled(), None)?;
    ConfusionMatrix::from_predictions(&data.index.classes, &out.labels, &out.predicted)
}
