//! Plain-text tables, CSV and SVG bar charts for every report type.
//!
//! CSV files carry one header row; column names match the text tables.

use super::analysis::{FovRow, HeadingHistogram, OracleTable};
use super::eval::{EvalReport, SplitReports, TurnSplit};
use super::HarnessError;
use crate::evaluator::{Metric, MetricVersion};

/// A report that renders as a single table.
pub trait Tabular {
    fn title(&self) -> String;
    fn header(&self) -> Vec<String>;
    fn records(&self) -> Vec<Vec<String>>;

    /// Right-aligned columns under a title line.
    fn to_text(&self) -> String {
        let header = self.header();
        let records = self.records();
        let mut widths: Vec<usize> = header.iter().map(String::len).collect();
        for r in &records {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.len());
            }
        }
        let line = |cells: &[String]| {
            cells.iter().zip(&widths).map(|(c, &w)| format!("{c:>w$}")).collect::<Vec<_>>().join("  ")
        };
        let mut out = format!("{}\n{}\n", self.title(), line(&header));
        for r in &records {
            out.push_str(&line(r));
            out.push('\n');
        }
        out
    }

    fn to_csv(&self) -> Result<String, HarnessError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(self.header()).map_err(csv_err)?;
        for r in self.records() {
            w.write_record(r).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| HarnessError::Report(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| HarnessError::Report(e.to_string()))
    }
}

fn csv_err(e: csv::Error) -> HarnessError {
    HarnessError::Report(e.to_string())
}

fn num(v: f64) -> String {
    format!("{v:.3}")
}

fn aggregate_name(v: MetricVersion) -> &'static str {
    match v {
        MetricVersion::V1 => "PDMS",
        MetricVersion::V2 => "EPDMS",
    }
}

fn summary_header(version: MetricVersion) -> Vec<String> {
    let mut h = vec!["scenarios".to_string()];
    h.extend(Metric::ALL.iter().map(|m| m.name().to_string()));
    h.push(aggregate_name(version).to_string());
    h
}

fn summary_record(r: &EvalReport) -> Vec<String> {
    let mut rec = vec![r.scenarios().to_string()];
    rec.extend(r.subscore_means.iter().map(|&(_, v)| num(v)));
    rec.push(num(r.aggregate));
    rec
}

impl Tabular for EvalReport {
    fn title(&self) -> String {
        format!("evaluation (config {}, checkpoint {})", short(&self.config_hash), self.checkpoint_id)
    }

    fn header(&self) -> Vec<String> {
        summary_header(self.version)
    }

    fn records(&self) -> Vec<Vec<String>> {
        vec![summary_record(self)]
    }
}

fn short(hash: &str) -> &str {
    &hash[..hash.len().min(12)]
}

/// Per-scenario view of an [`EvalReport`].
pub struct ScenarioRows<'a>(pub &'a EvalReport);

impl Tabular for ScenarioRows<'_> {
    fn title(&self) -> String {
        "per-scenario results".to_string()
    }

    fn header(&self) -> Vec<String> {
        let mut h = vec!["seed".to_string(), "split".to_string(), "selected".to_string()];
        h.extend(Metric::ALL.iter().map(|m| m.name().to_string()));
        h.push(aggregate_name(self.0.version).to_string());
        h
    }

    fn records(&self) -> Vec<Vec<String>> {
        self.0
            .rows
            .iter()
            .map(|r| {
                let mut rec = vec![r.seed.to_string(), r.split.name().to_string(), r.selected.to_string()];
                rec.extend(r.subscores.as_array().iter().map(|&v| num(v)));
                rec.push(num(r.aggregate));
                rec
            })
            .collect()
    }
}

impl Tabular for SplitReports {
    fn title(&self) -> String {
        "turn splits".to_string()
    }

    fn header(&self) -> Vec<String> {
        let version = TurnSplit::ALL.iter().find_map(|&s| self.get(s)).map_or(MetricVersion::V2, |r| r.version);
        let mut h = vec!["split".to_string()];
        h.extend(summary_header(version));
        h
    }

    fn records(&self) -> Vec<Vec<String>> {
        TurnSplit::ALL
            .iter()
            .map(|&s| {
                let mut rec = vec![s.name().to_string()];
                match self.get(s) {
                    Some(r) => rec.extend(summary_record(r)),
                    None => {
                        rec.push("0".to_string());
                        rec.extend(std::iter::repeat_n("-".to_string(), Metric::ALL.len() + 1));
                    }
                }
                rec
            })
            .collect()
    }
}

impl Tabular for OracleTable {
    fn title(&self) -> String {
        format!("best {} among the top-K ranked entries", aggregate_name(self.version))
    }

    fn header(&self) -> Vec<String> {
        vec!["K".to_string(), aggregate_name(self.version).to_string()]
    }

    fn records(&self) -> Vec<Vec<String>> {
        let mut rows: Vec<Vec<String>> =
            self.ks.iter().zip(&self.values).map(|(k, v)| vec![k.to_string(), num(*v)]).collect();
        rows.push(vec!["all".to_string(), num(self.ceiling)]);
        rows
    }
}

impl Tabular for HeadingHistogram {
    fn title(&self) -> String {
        format!("final heading of high-scoring entries (KL to uniform {:.4})", self.kl_to_uniform())
    }

    fn header(&self) -> Vec<String> {
        vec!["heading_deg".to_string(), "count".to_string(), "normalized".to_string()]
    }

    fn records(&self) -> Vec<Vec<String>> {
        self.bin_centers()
            .iter()
            .zip(&self.counts)
            .zip(&self.normalized)
            .map(|((c, n), f)| vec![format!("{:.1}", c.to_degrees()), n.to_string(), num(*f)])
            .collect()
    }
}

/// Rows of an observation-mask sweep.
pub struct FovTable<'a>(pub &'a [FovRow]);

impl Tabular for FovTable<'_> {
    fn title(&self) -> String {
        "observation field of view".to_string()
    }

    fn header(&self) -> Vec<String> {
        ["setting", "halfangle_deg", "mean_tokens", "aggregate"].iter().map(|s| s.to_string()).collect()
    }

    fn records(&self) -> Vec<Vec<String>> {
        self.0
            .iter()
            .map(|r| vec![r.name.clone(), format!("{:.1}", r.fov_halfangle.to_degrees()), num(r.mean_tokens), num(r.aggregate)])
            .collect()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Vertical bar chart; bars start at zero and share one linear axis.
pub fn bar_chart_svg(title: &str, labels: &[String], values: &[f64], y_label: &str) -> String {
    const W: f64 = 640.0;
    const H: f64 = 360.0;
    const LEFT: f64 = 60.0;
    const BOTTOM: f64 = 50.0;
    const TOP: f64 = 40.0;
    let plot_w = W - LEFT - 20.0;
    let plot_h = H - TOP - BOTTOM;
    let max = values.iter().copied().filter(|v| v.is_finite()).fold(0.0, f64::max);
    let max = if max > 0.0 { max } else { 1.0 };
    let n = values.len().max(1) as f64;
    let slot = plot_w / n;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        W / 2.0,
        escape(title)
    );
    let base = TOP + plot_h;
    svg.push_str(&format!(
        "<line x1=\"{LEFT}\" y1=\"{base}\" x2=\"{}\" y2=\"{base}\" stroke=\"black\"/>\n\
         <line x1=\"{LEFT}\" y1=\"{TOP}\" x2=\"{LEFT}\" y2=\"{base}\" stroke=\"black\"/>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"end\">{:.3}</text>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"end\">0</text>\n\
         <text x=\"14\" y=\"{}\" transform=\"rotate(-90 14 {})\" text-anchor=\"middle\">{}</text>\n",
        LEFT + plot_w,
        LEFT - 4.0,
        TOP + 4.0,
        max,
        LEFT - 4.0,
        base,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0,
        escape(y_label)
    ));
    let label_every = (values.len() / 12).max(1);
    for (i, (&v, label)) in values.iter().zip(labels).enumerate() {
        let h = if v.is_finite() { (v.max(0.0) / max) * plot_h } else { 0.0 };
        let x = LEFT + i as f64 * slot + 0.1 * slot;
        svg.push_str(&format!(
            "<rect x=\"{x:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{h:.2}\" fill=\"#4a78b5\"/>\n",
            base - h,
            0.8 * slot
        ));
        if i % label_every == 0 {
            svg.push_str(&format!(
                "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>\n",
                x + 0.4 * slot,
                base + 16.0,
                escape(label)
            ));
        }
    }
    svg.push_str("</svg>\n");
    svg
}

/// A report that also renders as a bar chart.
pub trait Plot {
    fn to_svg(&self) -> String;
}

impl Plot for OracleTable {
    fn to_svg(&self) -> String {
        let labels: Vec<String> = self.ks.iter().map(|k| format!("K={k}")).collect();
        bar_chart_svg(&self.title(), &labels, &self.values, aggregate_name(self.version))
    }
}

impl Plot for HeadingHistogram {
    fn to_svg(&self) -> String {
        let labels: Vec<String> = self.bin_centers().iter().map(|c| format!("{:.0}", c.to_degrees())).collect();
        bar_chart_svg("final heading of high-scoring entries", &labels, &self.normalized, "normalized frequency")
    }
}

impl Plot for SplitReports {
    fn to_svg(&self) -> String {
        let labels: Vec<String> = TurnSplit::ALL.iter().map(|s| s.name().to_string()).collect();
        let values: Vec<f64> = TurnSplit::ALL.iter().map(|&s| self.get(s).map_or(f64::NAN, |r| r.aggregate)).collect();
        bar_chart_svg("turn splits", &labels, &values, "aggregate")
    }
}

impl Plot for FovTable<'_> {
    fn to_svg(&self) -> String {
        let labels: Vec<String> = self.0.iter().map(|r| r.name.clone()).collect();
        let values: Vec<f64> = self.0.iter().map(|r| r.aggregate).collect();
        bar_chart_svg("observation field of view", &labels, &values, "aggregate")
    }
}
