use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;

use super::protocols::{AblationRow, BaseToNew, SweepRow};

pub const RESULTS_HEADER: [&str; 9] = [
    "method", "family", "axis", "value", "seed", "base", "new", "h", "tokens",
];

/// One line of a results CSV. `family` is a family id or `all`; `seed` is a
/// seed or `mean`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub family: String,
    pub axis: String,
    pub value: String,
    pub seed: String,
    pub base: f64,
    pub new: f64,
    pub h: f64,
    pub tokens: u64,
}

fn seed_label(seed: Option<u64>) -> String {
    seed.map_or_else(|| "mean".to_string(), |s| s.to_string())
}

/// Per-family and suite rows for every seed and for the seed mean.
pub fn base_to_new_rows(b: &BaseToNew, axis: &str, value: &str) -> Vec<ResultRow> {
    let mut rows = Vec::new();
    for rec in b.per_seed.iter().chain(std::iter::once(&b.mean)) {
        for f in &rec.per_family {
            rows.push(ResultRow {
                method: rec.method.clone(),
                family: f.family.to_string(),
                axis: axis.to_string(),
                value: value.to_string(),
                seed: seed_label(f.seed),
                base: f.base_acc,
                new: f.new_acc,
                h: f.h,
                tokens: f.tokens_processed,
            });
        }
        rows.push(ResultRow {
            method: rec.method.clone(),
            family: "all".to_string(),
            axis: axis.to_string(),
            value: value.to_string(),
            seed: seed_label(rec.seed),
            base: rec.base_acc,
            new: rec.new_acc,
            h: rec.h,
            tokens: rec.tokens_processed,
        });
    }
    rows
}

fn suite_mean_row(b: &BaseToNew, method: &str, axis: &str, value: &str) -> ResultRow {
    ResultRow {
        method: method.to_string(),
        family: "all".to_string(),
        axis: axis.to_string(),
        value: value.to_string(),
        seed: "mean".to_string(),
        base: b.mean.base_acc,
        new: b.mean.new_acc,
        h: b.mean.h,
        tokens: b.mean.tokens_processed,
    }
}

/// One suite-mean row per grid value.
pub fn sweep_rows(rows: &[SweepRow]) -> Vec<ResultRow> {
    rows.iter()
        .map(|r| suite_mean_row(&r.result, &r.result.mean.method, r.axis.as_str(), &r.value))
        .collect()
}

/// One suite-mean row per ablation cell, labelled by cell.
pub fn ablation_rows(rows: &[AblationRow]) -> Vec<ResultRow> {
    let on = |b: bool| if b { "on" } else { "off" };
    rows.iter()
        .map(|r| {
            let value = format!("mim_{}_kg_{}", on(r.mim_context), on(r.kg));
            suite_mean_row(&r.result, &r.label, "ablation", &value)
        })
        .collect()
}

pub fn write_results_csv<W: Write>(w: W, rows: &[ResultRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(RESULTS_HEADER)?;
    for r in rows {
        out.write_record([
            r.method.clone(),
            r.family.clone(),
            r.axis.clone(),
            r.value.clone(),
            r.seed.clone(),
            format!("{:.4}", r.base),
            format!("{:.4}", r.new),
            format!("{:.4}", r.h),
            r.tokens.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub const ACCURACY_HEADER: [&str; 4] = ["method", "protocol", "target", "accuracy"];

/// Single-accuracy result, used by the cross-dataset and domain-shift protocols.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub method: String,
    pub protocol: String,
    pub target: String,
    pub accuracy: f64,
}

pub fn write_accuracy_csv<W: Write>(w: W, rows: &[AccuracyRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(ACCURACY_HEADER)?;
    for r in rows {
        out.write_record([
            r.method.clone(),
            r.protocol.clone(),
            r.target.clone(),
            format!("{:.4}", r.accuracy),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_accuracy_csv<R: std::io::Read>(r: R) -> Result<Vec<AccuracyRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut rows = Vec::new();
    for rec in rdr.deserialize() {
        rows.push(rec?);
    }
    Ok(rows)
}

pub fn read_results_csv<R: std::io::Read>(r: R) -> Result<Vec<ResultRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut rows = Vec::new();
    for rec in rdr.deserialize() {
        rows.push(rec?);
    }
    Ok(rows)
}

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;
const PALETTE: [&str; 6] = [
    "#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn frame(title: &str, y_max: f64) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" font-size="14" text-anchor="middle" font-family="sans-serif">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let (x0, y0, y1) = (PAD, H - PAD, PAD);
    let _ = writeln!(
        s,
        r#"<line x1="{x0}" y1="{y0}" x2="{}" y2="{y0}" stroke="black"/>"#,
        W - PAD
    );
    let _ = writeln!(
        s,
        r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#
    );
    for i in 0..=4 {
        let v = y_max * i as f64 / 4.0;
        let y = y0 - (y0 - y1) * i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="10" text-anchor="end" font-family="sans-serif">{:.1}</text>"#,
            x0 - 4.0,
            y + 3.0,
            v
        );
    }
    s
}

fn legend(s: &mut String, names: &[&str]) {
    for (i, name) in names.iter().enumerate() {
        let y = PAD + 14.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{:.2}" y="{:.2}" width="10" height="10" fill="{}"/>"#,
            W - PAD - 110.0,
            y - 9.0,
            PALETTE[i % PALETTE.len()]
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="10" font-family="sans-serif">{}</text>"#,
            W - PAD - 96.0,
            y,
            escape(name)
        );
    }
}

fn y_max(series: &[(String, Vec<f64>)]) -> f64 {
    let m = series
        .iter()
        .flat_map(|s| s.1.iter().copied())
        .fold(0.0f64, f64::max);
    if m <= 0.0 {
        1.0
    } else {
        (m / 10.0).ceil() * 10.0
    }
}

/// Grouped bar chart, one group per category and one bar per series.
pub fn svg_bar_chart(title: &str, categories: &[String], series: &[(String, Vec<f64>)]) -> String {
    let ymax = y_max(series);
    let mut s = frame(title, ymax);
    let plot_w = W - 2.0 * PAD;
    let plot_h = H - 2.0 * PAD;
    let group = plot_w / categories.len().max(1) as f64;
    let bar = group * 0.8 / series.len().max(1) as f64;
    for (c, cat) in categories.iter().enumerate() {
        let gx = PAD + group * c as f64 + group * 0.1;
        for (k, (_, vals)) in series.iter().enumerate() {
            let v = vals.get(c).copied().unwrap_or(0.0);
            let h = plot_h * v / ymax;
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                gx + bar * k as f64,
                H - PAD - h,
                bar,
                h,
                PALETTE[k % PALETTE.len()]
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="10" text-anchor="middle" font-family="sans-serif">{}</text>"#,
            PAD + group * (c as f64 + 0.5),
            H - PAD + 14.0,
            escape(cat)
        );
    }
    let names: Vec<&str> = series.iter().map(|s| s.0.as_str()).collect();
    legend(&mut s, &names);
    s.push_str("</svg>\n");
    s
}

/// Line chart over evenly spaced x labels.
pub fn svg_line_chart(title: &str, x_labels: &[String], series: &[(String, Vec<f64>)]) -> String {
    let ymax = y_max(series);
    let mut s = frame(title, ymax);
    let plot_w = W - 2.0 * PAD;
    let plot_h = H - 2.0 * PAD;
    let step = if x_labels.len() > 1 {
        plot_w / (x_labels.len() - 1) as f64
    } else {
        0.0
    };
    let xpos = |i: usize| {
        if x_labels.len() > 1 {
            PAD + step * i as f64
        } else {
            PAD + plot_w / 2.0
        }
    };
    for (i, label) in x_labels.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="10" text-anchor="middle" font-family="sans-serif">{}</text>"#,
            xpos(i),
            H - PAD + 14.0,
            escape(label)
        );
    }
    for (k, (_, vals)) in series.iter().enumerate() {
        let pts: Vec<String> = vals
            .iter()
            .enumerate()
            .map(|(i, v)| format!("{:.2},{:.2}", xpos(i), H - PAD - plot_h * v / ymax))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{}" stroke-width="2" points="{}"/>"#,
            PALETTE[k % PALETTE.len()],
            pts.join(" ")
        );
    }
    let names: Vec<&str> = series.iter().map(|s| s.0.as_str()).collect();
    legend(&mut s, &names);
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let rows = vec![ResultRow {
            method: "promim".into(),
            family: "all".into(),
            axis: "lambda".into(),
            value: "2".into(),
            seed: "mean".into(),
            base: 81.25,
            new: 62.5,
            h: 70.6522,
            tokens: 123,
        }];
        let mut buf = Vec::new();
        write_results_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("method,family,axis,value,seed,base,new,h,tokens\n"));
        assert!(text.contains("promim,all,lambda,2,mean,81.2500,62.5000,70.6522,123"));
        assert_eq!(read_results_csv(buf.as_slice()).unwrap(), rows);
    }

    #[test]
    fn svg_is_deterministic_and_well_formed() {
        let cats = vec!["a".to_string(), "b<c".to_string()];
        let series = vec![
            ("x".to_string(), vec![10.0, 20.0]),
            ("y".to_string(), vec![5.0, 0.0]),
        ];
        let a = svg_bar_chart("gain", &cats, &series);
        assert_eq!(a, svg_bar_chart("gain", &cats, &series));
        assert!(a.starts_with("<svg") && a.trim_end().ends_with("</svg>"));
        assert!(a.contains("b&lt;c"));
        assert_eq!(a.matches("<rect").count(), 1 + 4 + 2);
        let l = svg_line_chart("h", &cats, &series);
        assert_eq!(l.matches("<polyline").count(), 2);
    }
}
