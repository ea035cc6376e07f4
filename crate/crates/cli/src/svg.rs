//! Training-curve plots rendered straight to SVG text.

use std::fmt::Write as _;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PlotError {
    #[error("malformed history CSV: {0}")]
    MalformedCsv(String),
}

/// Parsed history: one x value per epoch and named y series.
#[derive(Debug, Clone, PartialEq)]
pub struct History {
    pub epochs: Vec<f64>,
    pub losses: Vec<(String, Vec<f64>)>,
    pub aucs: Vec<(String, Vec<f64>)>,
}

impl History {
    pub fn curve_count(&self) -> usize {
        self.losses.len() + self.aucs.len()
    }
}

const LEAD: [&str; 4] = ["epoch", "l_fo", "l_en", "l_d"];

pub fn parse_history(csv: &str) -> Result<History, PlotError> {
    let bad = |m: String| PlotError::MalformedCsv(m);
    let mut lines = csv.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| bad("empty input".into()))?
        .split(',')
        .map(str::trim)
        .collect();
    if header.len() < LEAD.len() || header[..LEAD.len()] != LEAD {
        return Err(bad(format!("header must start with {}", LEAD.join(","))));
    }
    let tail = &header[LEAD.len()..];
    if tail.len() % 2 != 0 {
        return Err(bad("per-domain columns must come in acc/auc pairs".into()));
    }
    let mut domains = Vec::new();
    for pair in tail.chunks(2) {
        let name = pair[0]
            .strip_prefix("acc_")
            .filter(|n| pair[1].strip_prefix("auc_") == Some(n))
            .ok_or_else(|| bad(format!("expected acc_<d>,auc_<d>, found {},{}", pair[0], pair[1])))?;
        domains.push(name.to_string());
    }

    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); header.len()];
    for (row, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != header.len() {
            return Err(bad(format!(
                "row {} has {} fields, header has {}",
                row + 1,
                fields.len(),
                header.len()
            )));
        }
        for (col, f) in fields.iter().enumerate() {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|_| bad(format!("row {} column {}: `{f}` is not a number", row + 1, header[col])))?;
            if !v.is_finite() {
                return Err(bad(format!("row {} column {} is not finite", row + 1, header[col])));
            }
            columns[col].push(v);
        }
    }
    if columns[0].is_empty() {
        return Err(bad("no data rows".into()));
    }
    let mut columns = columns.into_iter();
    let epochs = columns.next().expect("epoch column");
    let losses = LEAD[1..]
        .iter()
        .map(|n| (n.to_string(), columns.next().expect("loss column")))
        .collect();
    let aucs = domains
        .into_iter()
        .map(|d| {
            columns.next();
            (d, columns.next().expect("auc column"))
        })
        .collect();
    Ok(History { epochs, losses, aucs })
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2",
];
const PANEL_W: f64 = 380.0;
const PANEL_H: f64 = 240.0;
const MARGIN: f64 = 60.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn panel(
    out: &mut String,
    x0: f64,
    title: &str,
    y_label: &str,
    epochs: &[f64],
    series: &[(String, Vec<f64>)],
    y_range: (f64, f64),
    color_offset: usize,
) {
    let y0 = MARGIN;
    let (ex_lo, ex_hi) = range(epochs.iter().copied());
    let (y_lo, y_hi) = y_range;
    let px = |e: f64| x0 + (e - ex_lo) / (ex_hi - ex_lo) * PANEL_W;
    let py = |v: f64| y0 + PANEL_H - (v - y_lo) / (y_hi - y_lo) * PANEL_H;

    let _ = writeln!(
        out,
        r#"<rect x="{x0:.1}" y="{y0:.1}" width="{PANEL_W:.1}" height="{PANEL_H:.1}" fill="none" stroke="gray"/>"#
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="14">{}</text>"#,
        x0 + PANEL_W / 2.0,
        y0 - 12.0,
        escape(title)
    );
    let _ = writeln!(
        out,
        r#"<text class="axis-label" x="{:.1}" y="{:.1}" text-anchor="middle" font-size="12">epoch</text>"#,
        x0 + PANEL_W / 2.0,
        y0 + PANEL_H + 36.0
    );
    let _ = writeln!(
        out,
        r#"<text class="axis-label" x="{:.1}" y="{:.1}" text-anchor="middle" font-size="12" transform="rotate(-90 {:.1} {:.1})">{}</text>"#,
        x0 - 42.0,
        y0 + PANEL_H / 2.0,
        x0 - 42.0,
        y0 + PANEL_H / 2.0,
        escape(y_label)
    );
    for (i, t) in [0.0, 0.25, 0.5, 0.75, 1.0].iter().enumerate() {
        let v = y_lo + t * (y_hi - y_lo);
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end" font-size="10">{v:.3}</text>"#,
            x0 - 4.0,
            py(v) + 3.0
        );
        let e = ex_lo + t * (ex_hi - ex_lo);
        let anchor = if i == 0 { "start" } else if i == 4 { "end" } else { "middle" };
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="{anchor}" font-size="10">{e:.0}</text>"#,
            px(e),
            y0 + PANEL_H + 14.0
        );
    }
    for (i, (name, ys)) in series.iter().enumerate() {
        let color = PALETTE[(i + color_offset) % PALETTE.len()];
        let points: Vec<String> = epochs
            .iter()
            .zip(ys)
            .map(|(&e, &v)| format!("{:.2},{:.2}", px(e), py(v)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline class="curve" data-series="{}" fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            escape(name),
            points.join(" ")
        );
        let ly = y0 + 14.0 + 14.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{ly:.1}" text-anchor="end" font-size="10" fill="{color}">{}</text>"#,
            x0 + PANEL_W - 6.0,
            escape(name)
        );
    }
}

/// Loss curves on the left, per-domain AUC on the right.
pub fn render_svg(h: &History) -> String {
    let width = 2.0 * (PANEL_W + 2.0 * MARGIN);
    let height = PANEL_H + 2.0 * MARGIN;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let loss_range = range(h.losses.iter().flat_map(|(_, v)| v.iter().copied()));
    let loss_range = (loss_range.0.min(0.0), loss_range.1);
    panel(&mut out, MARGIN, "training losses", "loss", &h.epochs, &h.losses, loss_range, 0);
    panel(
        &mut out,
        PANEL_W + 3.0 * MARGIN,
        "validation AUC",
        "AUC",
        &h.epochs,
        &h.aucs,
        (0.0, 1.0),
        h.losses.len(),
    );
    out.push_str("</svg>\n");
    out
}

pub fn plot_history(csv: &str) -> Result<String, PlotError> {
    Ok(render_svg(&parse_history(csv)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    const CSV: &str = "epoch,l_fo,l_en,l_d,acc_source,auc_source,acc_t,auc_t\n\
                       1,0.5,0.6,1.1,0.7,0.8,0.6,0.7\n\
                       2,0.4,0.5,1.0,0.8,0.9,0.7,0.75\n";

    #[test]
    fn parses_columns_by_name() {
        let h = parse_history(CSV).unwrap();
        assert_eq!(h.epochs, vec![1.0, 2.0]);
        assert_eq!(h.losses[2], ("l_d".to_string(), vec![1.1, 1.0]));
        assert_eq!(h.aucs[1], ("t".to_string(), vec![0.7, 0.75]));
        assert_eq!(h.curve_count(), 5);
    }

    #[test]
    fn rejects_malformed_history() {
        for csv in [
            "",
            "epoch,l_fo,l_en,l_d\n",
            "epoch,l_fo,l_d\n1,2,3\n",
            "epoch,l_fo,l_en,l_d,acc_a\n1,1,1,1,1\n",
            "epoch,l_fo,l_en,l_d,acc_a,auc_b\n1,1,1,1,1,1\n",
            "epoch,l_fo,l_en,l_d\n1,1,1\n",
            "epoch,l_fo,l_en,l_d\n1,x,1,1\n",
            "epoch,l_fo,l_en,l_d\n1,NaN,1,1\n",
        ] {
            assert!(matches!(parse_history(csv), Err(PlotError::MalformedCsv(_))), "{csv:?}");
        }
    }

    #[test]
    fn one_polyline_per_curve() {
        let svg = plot_history(CSV).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 5);
        assert_eq!(plot_history(CSV).unwrap(), svg);
    }

    #[test]
    fn single_epoch_does_not_divide_by_zero() {
        let svg = plot_history("epoch,l_fo,l_en,l_d\n1,0.5,0.5,0.5\n").unwrap();
        assert!(!svg.contains("NaN") && !svg.contains("inf"));
    }
}
