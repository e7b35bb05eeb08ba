//! Small deterministic SVG charts. Each chart embeds its data as CSV in a comment.

use std::fmt::Write;

const PALETTE: [&str; 8] = [
    "#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#76b7b2", "#edc948", "#b07aa1", "#9c755f",
];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |x| format!("{x:.6}"))
}

fn open(out: &mut String, w: u32, h: u32, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="18" text-anchor="middle" font-size="14">{}</text>"#,
        w / 2,
        esc(title)
    );
}

fn data_comment(out: &mut String, csv: &str) {
    // "--" is not allowed inside comments
    let _ = writeln!(out, "<!-- data\n{}-->", csv.replace("--", "- -"));
}

/// Bars grouped along x; one colour per series. Values are assumed in [0, 1].
pub fn grouped_bars(
    title: &str,
    y_label: &str,
    groups: &[String],
    series: &[String],
    values: &[Vec<Option<f64>>],
) -> String {
    let (w, h) = (120 + 90 * groups.len().max(1) as u32, 340u32);
    let (left, top, bottom) = (60.0, 40.0, 270.0);
    let plot_h = bottom - top;
    let mut out = String::new();
    open(&mut out, w, h, title);
    let mut csv = String::from("group,series,value\n");

    for tick in 0..=5 {
        let v = tick as f64 / 5.0;
        let y = bottom - v * plot_h;
        let _ = writeln!(
            out,
            r##"<line x1="{left}" y1="{y:.2}" x2="{}" y2="{y:.2}" stroke="#ddd"/><text x="{}" y="{:.2}" text-anchor="end">{v:.1}</text>"##,
            w as f64 - 20.0,
            left - 5.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="14" y="{:.2}" transform="rotate(-90 14 {:.2})" text-anchor="middle">{}</text>"#,
        (top + bottom) / 2.0,
        (top + bottom) / 2.0,
        esc(y_label)
    );

    let group_w = 90.0;
    let bar_w = (group_w - 20.0) / series.len().max(1) as f64;
    for (g, name) in groups.iter().enumerate() {
        let x0 = left + 10.0 + g as f64 * group_w;
        for (s, sname) in series.iter().enumerate() {
            let v = values.get(g).and_then(|row| row.get(s)).copied().flatten();
            let _ = writeln!(csv, "{},{},{}", name, sname, fmt_opt(v));
            let Some(v) = v else { continue };
            let bh = v.clamp(0.0, 1.0) * plot_h;
            let _ = writeln!(
                out,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"><title>{}: {v:.4}</title></rect>"#,
                x0 + s as f64 * bar_w,
                bottom - bh,
                bar_w - 2.0,
                bh,
                PALETTE[s % PALETTE.len()],
                esc(sname)
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            x0 + (group_w - 20.0) / 2.0,
            bottom + 15.0,
            esc(name)
        );
    }
    legend(&mut out, series, left, bottom + 35.0);
    data_comment(&mut out, &csv);
    out.push_str("</svg>\n");
    out
}

/// One polyline per series across the x categories; gaps where a value is missing.
pub fn lines(
    title: &str,
    y_label: &str,
    xs: &[String],
    series: &[String],
    values: &[Vec<Option<f64>>],
) -> String {
    let (w, h) = (140 + 110 * xs.len().max(1) as u32, 340u32);
    let (left, top, bottom) = (60.0, 40.0, 270.0);
    let plot_h = bottom - top;
    let step = 110.0;
    let mut out = String::new();
    open(&mut out, w, h, title);
    let mut csv = String::from("x,series,value\n");
    for tick in 0..=5 {
        let v = tick as f64 / 5.0;
        let y = bottom - v * plot_h;
        let _ = writeln!(
            out,
            r##"<line x1="{left}" y1="{y:.2}" x2="{}" y2="{y:.2}" stroke="#ddd"/><text x="{}" y="{:.2}" text-anchor="end">{v:.1}</text>"##,
            w as f64 - 20.0,
            left - 5.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="14" y="{:.2}" transform="rotate(-90 14 {:.2})" text-anchor="middle">{}</text>"#,
        (top + bottom) / 2.0,
        (top + bottom) / 2.0,
        esc(y_label)
    );
    let x_at = |i: usize| left + 40.0 + i as f64 * step;
    for (i, name) in xs.iter().enumerate() {
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            x_at(i),
            bottom + 15.0,
            esc(name)
        );
    }
    for (s, sname) in series.iter().enumerate() {
        let colour = PALETTE[s % PALETTE.len()];
        let mut segment: Vec<String> = Vec::new();
        let flush = |segment: &mut Vec<String>, out: &mut String| {
            if segment.len() > 1 {
                let _ = writeln!(
                    out,
                    r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="2"/>"#,
                    segment.join(" ")
                );
            }
            segment.clear();
        };
        for (i, xname) in xs.iter().enumerate() {
            let v = values.get(i).and_then(|row| row.get(s)).copied().flatten();
            let _ = writeln!(csv, "{},{},{}", xname, sname, fmt_opt(v));
            match v {
                Some(v) => {
                    let (px, py) = (x_at(i), bottom - v.clamp(0.0, 1.0) * plot_h);
                    segment.push(format!("{px:.2},{py:.2}"));
                    let _ = writeln!(
                        out,
                        r#"<circle cx="{px:.2}" cy="{py:.2}" r="3" fill="{colour}"><title>{}: {v:.4}</title></circle>"#,
                        esc(sname)
                    );
                }
                None => flush(&mut segment, &mut out),
            }
        }
        flush(&mut segment, &mut out);
    }
    legend(&mut out, series, left, bottom + 35.0);
    data_comment(&mut out, &csv);
    out.push_str("</svg>\n");
    out
}

fn legend(out: &mut String, series: &[String], x: f64, y: f64) {
    for (s, name) in series.iter().enumerate() {
        let lx = x + s as f64 * 110.0;
        let _ = writeln!(
            out,
            r#"<rect x="{lx:.2}" y="{:.2}" width="10" height="10" fill="{}"/><text x="{:.2}" y="{y:.2}">{}</text>"#,
            y - 9.0,
            PALETTE[s % PALETTE.len()],
            lx + 14.0,
            esc(name)
        );
    }
}

/// Row-by-column grid of values in [0, 1], shaded and labelled.
pub fn heatmap(title: &str, rows: &[String], cols: &[String], values: &[Vec<Option<f64>>]) -> String {
    let cell = 70.0;
    let (left, top) = (110.0, 60.0);
    let w = (left + cell * cols.len() as f64 + 20.0) as u32;
    let h = (top + cell * rows.len() as f64 + 20.0) as u32;
    let mut out = String::new();
    open(&mut out, w, h, title);
    let mut csv = String::from("row,col,value\n");
    for (c, name) in cols.iter().enumerate() {
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            left + (c as f64 + 0.5) * cell,
            top - 8.0,
            esc(name)
        );
    }
    for (r, rname) in rows.iter().enumerate() {
        let y = top + r as f64 * cell;
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            left - 6.0,
            y + cell / 2.0 + 4.0,
            esc(rname)
        );
        for (c, cname) in cols.iter().enumerate() {
            let v = values.get(r).and_then(|row| row.get(c)).copied().flatten();
            let _ = writeln!(csv, "{},{},{}", rname, cname, fmt_opt(v));
            let x = left + c as f64 * cell;
            let (fill, label) = match v {
                Some(v) => {
                    let t = v.clamp(0.0, 1.0);
                    let shade = (255.0 - 180.0 * t).round() as u8;
                    (format!("rgb({shade},{shade},255)"), format!("{v:.3}"))
                }
                None => ("#eee".to_string(), "NA".to_string()),
            };
            let _ = writeln!(
                out,
                r##"<rect x="{x:.2}" y="{y:.2}" width="{cell}" height="{cell}" fill="{fill}" stroke="#fff"/><text x="{:.2}" y="{:.2}" text-anchor="middle">{label}</text>"##,
                x + cell / 2.0,
                y + cell / 2.0 + 4.0
            );
        }
    }
    data_comment(&mut out, &csv);
    out.push_str("</svg>\n");
    out
}

/// 2-D scatter coloured by label.
pub fn scatter(title: &str, points: &[(f64, f64)], labels: &[String]) -> String {
    let (w, h) = (560u32, 600u32);
    let (left, top, size) = (30.0, 40.0, 500.0);
    let mut out = String::new();
    open(&mut out, w, h, title);
    let mut classes: Vec<String> = labels.to_vec();
    classes.sort();
    classes.dedup();

    let bounds = points.iter().fold(
        (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY),
        |(a, b, c, d), &(x, y)| (a.min(x), b.max(x), c.min(y), d.max(y)),
    );
    let span = (bounds.1 - bounds.0).max(bounds.3 - bounds.2).max(1e-12);
    let mut csv = String::from("label,x,y\n");
    for (&(x, y), label) in points.iter().zip(labels) {
        let class = classes.binary_search(label).unwrap_or(0);
        let px = left + (x - bounds.0) / span * size;
        let py = top + size - (y - bounds.2) / span * size;
        let _ = writeln!(
            out,
            r#"<circle cx="{px:.2}" cy="{py:.2}" r="3" fill="{}" fill-opacity="0.7"/>"#,
            PALETTE[class % PALETTE.len()]
        );
        let _ = writeln!(csv, "{label},{x:.6},{y:.6}");
    }
    legend(&mut out, &classes, left, top + size + 30.0);
    data_comment(&mut out, &csv);
    out.push_str("</svg>\n");
    out
}
