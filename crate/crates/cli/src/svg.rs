//! Minimal line plots of information curves.

use std::fmt::Write as _;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 20.0;
const BOTTOM: f64 = 50.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
        .replace("--", "- -")
}

/// One polyline per `(label, errors by step)`, with labelled axes.
pub fn render(curves: &[(String, Vec<f64>)], comment: &str) -> String {
    let steps = curves.iter().map(|c| c.1.len()).max().unwrap_or(1).max(2) - 1;
    let ymax = curves
        .iter()
        .flat_map(|c| c.1.iter().copied())
        .filter(|v| v.is_finite())
        .fold(0.0, f64::max);
    let ymax = if ymax > 0.0 { ymax * 1.05 } else { 1.0 };
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let px = |s: usize| LEFT + pw * s as f64 / steps as f64;
    let py = |v: f64| TOP + ph * (1.0 - v / ymax);

    let mut out = String::new();
    let _ = writeln!(out, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(out, "<!-- {} -->", escape(comment));
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let (x0, y0) = (LEFT, TOP + ph);
    let _ = writeln!(
        out,
        r#"<path d="M{x0},{TOP} L{x0},{y0} L{},{y0}" fill="none" stroke="black"/>"#,
        LEFT + pw
    );
    for s in 0..=steps {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{s}</text>"#,
            px(s),
            y0 + 16.0
        );
    }
    for k in 0..=4 {
        let v = ymax * k as f64 / 4.0;
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.3}</text>"#,
            LEFT - 6.0,
            py(v) + 4.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">steps</text>"#,
        LEFT + pw / 2.0,
        H - 10.0
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">error</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0
    );
    for (i, (label, ys)) in curves.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let points: Vec<String> = ys
            .iter()
            .enumerate()
            .map(|(s, &v)| format!("{:.2},{:.2}", px(s), py(v)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"><title>{}</title></polyline>"#,
            points.join(" "),
            escape(label)
        );
        let ly = TOP + 16.0 * (i as f64 + 1.0);
        let lx = LEFT + pw + 12.0;
        let _ = writeln!(
            out,
            r#"<line x1="{lx}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="{color}" stroke-width="2"/>"#,
            ly - 4.0,
            lx + 20.0,
            ly - 4.0
        );
        let _ = writeln!(out, r#"<text x="{:.1}" y="{ly:.1}">{}</text>"#, lx + 26.0, escape(label));
    }
    out.push_str("</svg>\n");
    out
}

/// The `mse` column of an IC CSV.
pub fn read_curve(text: &str) -> Result<Vec<f64>, String> {
    let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
    let header = lines.next().ok_or("empty curve file")?;
    let col = header
        .split(',')
        .position(|h| h.trim() == "mse")
        .ok_or("curve file has no mse column")?;
    lines
        .map(|l| {
            l.split(',')
                .nth(col)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| format!("bad curve row {l:?}"))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_polyline_per_curve() {
        let svg = render(&[("a".into(), vec![0.3, 0.2, 0.1]), ("b<c".into(), vec![0.4, 0.1])], "x -- y");
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("b&lt;c"));
        assert!(!svg.contains("x -- y"));
    }

    #[test]
    fn reads_the_mse_column() {
        let c = read_curve("# hash\nstep,mse,std_err,rmse\n0,0.25,0.1,0.5\n1,0.04,0.01,0.2\n").unwrap();
        assert_eq!(c, vec![0.25, 0.04]);
    }
}
