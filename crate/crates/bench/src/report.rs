//! CSV tables, a fixed-width summary and SVG curve plots.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};

use crate::metrics::{precision_threshold, success_threshold, MetricCurves};
use crate::protocol::EvalReport;

/// Writes `per_sequence.csv`, `per_attribute.csv`, `aggregate.csv`,
/// `curves.csv`, `summary.txt`, `precision.svg` and `success.svg`. Every
/// curve is checked for monotonicity first; nothing is written if one fails.
pub fn emit_report(report: &EvalReport, out_dir: &Path) -> Result<()> {
    for s in &report.sequences {
        s.curves.check().with_context(|| format!("sequence {}", s.name))?;
    }
    for a in &report.attributes {
        a.curves.check().with_context(|| format!("attribute {}", a.attribute))?;
    }
    report.overall.check().context("overall curves")?;
    std::fs::create_dir_all(out_dir)?;

    let mut seq = String::from("sequence,attributes,variants,prec_at_20,auc\n");
    for s in &report.sequences {
        writeln!(seq, "{},{},{},{},{}", s.name, s.attributes.join(";"), s.variants, s.curves.prec_at_20, s.curves.auc)?;
    }
    std::fs::write(out_dir.join("per_sequence.csv"), seq)?;

    let mut attr = String::from("attribute,sequences,prec_at_20,auc\n");
    for a in &report.attributes {
        writeln!(attr, "{},{},{},{}", a.attribute, a.sequences, a.curves.prec_at_20, a.curves.auc)?;
    }
    std::fs::write(out_dir.join("per_attribute.csv"), attr)?;

    std::fs::write(
        out_dir.join("aggregate.csv"),
        format!(
            "protocol,sequences,prec_at_20,auc\n{},{},{},{}\n",
            report.protocol,
            report.sequences.len(),
            report.overall.prec_at_20,
            report.overall.auc
        ),
    )?;

    let mut curves = String::from("curve,threshold,overall");
    for s in &report.sequences {
        write!(curves, ",{}", s.name)?;
    }
    curves.push('\n');
    let rows = |out: &mut String, kind: &str, n: usize, thr: fn(usize) -> f64, pick: fn(&MetricCurves) -> &[f64]| {
        for i in 0..n {
            let _ = write!(out, "{kind},{},{}", thr(i), pick(&report.overall)[i]);
            for s in &report.sequences {
                let _ = write!(out, ",{}", pick(&s.curves)[i]);
            }
            out.push('\n');
        }
    };
    rows(&mut curves, "precision", report.overall.precision.len(), precision_threshold, |c| &c.precision);
    rows(&mut curves, "success", report.overall.success.len(), success_threshold, |c| &c.success);
    std::fs::write(out_dir.join("curves.csv"), curves)?;

    std::fs::write(out_dir.join("summary.txt"), summary(report))?;
    std::fs::write(out_dir.join("precision.svg"), plot(report, true))?;
    std::fs::write(out_dir.join("success.svg"), plot(report, false))?;
    Ok(())
}

/// Fixed-width table with three decimals.
pub fn summary(report: &EvalReport) -> String {
    let mut s = format!("{} over {} sequences\n\n", report.protocol.to_string().to_uppercase(), report.sequences.len());
    let _ = writeln!(s, "{:<24} {:>9} {:>7}", "", "prec@20", "AUC");
    let _ = writeln!(s, "{:<24} {:>9.3} {:>7.3}", "overall", report.overall.prec_at_20, report.overall.auc);
    for a in &report.attributes {
        let label = format!("{} ({})", a.attribute, a.sequences);
        let _ = writeln!(s, "{:<24} {:>9.3} {:>7.3}", label, a.curves.prec_at_20, a.curves.auc);
    }
    s.push('\n');
    for q in &report.sequences {
        let _ = writeln!(s, "{:<24} {:>9.3} {:>7.3}", q.name, q.curves.prec_at_20, q.curves.auc);
    }
    s
}

const W: f64 = 480.0;
const H: f64 = 360.0;
const MARGIN: f64 = 50.0;

fn polyline(xs: &[f64], ys: &[f64], x_max: f64, style: &str) -> String {
    let pts: Vec<String> = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let px = MARGIN + x / x_max * (W - 2.0 * MARGIN);
            let py = H - MARGIN - y * (H - 2.0 * MARGIN);
            format!("{px:.1},{py:.1}")
        })
        .collect();
    format!("<polyline fill=\"none\" {style} points=\"{}\"/>\n", pts.join(" "))
}

fn plot(report: &EvalReport, precision: bool) -> String {
    let (title, xlabel, x_max) = if precision {
        ("Precision", "location error threshold (px)", 50.0)
    } else {
        ("Success", "overlap threshold", 1.0)
    };
    let curve = |c: &MetricCurves| -> (Vec<f64>, Vec<f64>) {
        if precision {
            ((0..c.precision.len()).map(precision_threshold).collect(), c.precision.clone())
        } else {
            ((0..c.success.len()).map(success_threshold).collect(), c.success.clone())
        }
    };
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    let (x0, y0, x1, y1) = (MARGIN, H - MARGIN, W - MARGIN, MARGIN);
    let _ = writeln!(svg, "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>");
    let _ = writeln!(svg, "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>");
    for k in 0..=5 {
        let f = k as f64 / 5.0;
        let py = y0 - f * (y0 - y1);
        let px = x0 + f * (x1 - x0);
        let _ = writeln!(svg, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{f:.1}</text>", x0 - 6.0, py + 4.0);
        let _ = writeln!(svg, "<text x=\"{px:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>", y0 + 16.0, f * x_max);
    }
    let _ = writeln!(svg, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{xlabel}</text>", W / 2.0, H - 12.0);
    let _ = writeln!(svg, "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">{title} ({})</text>", W / 2.0, report.protocol);
    for s in &report.sequences {
        let (xs, ys) = curve(&s.curves);
        svg.push_str(&polyline(&xs, &ys, x_max, "stroke=\"#bbbbbb\" stroke-width=\"1\""));
    }
    let (xs, ys) = curve(&report.overall);
    svg.push_str(&polyline(&xs, &ys, x_max, "stroke=\"#c0392b\" stroke-width=\"2\""));
    let score = if precision { report.overall.prec_at_20 } else { report.overall.auc };
    let _ = writeln!(svg, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" fill=\"#c0392b\">overall [{score:.3}]</text>", x1, y1 + 14.0);
    svg.push_str("</svg>\n");
    svg
}
