//! Standalone SVG line charts from a metrics file.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use avt_core::metrics::MetricRow;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 160.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 50.0;
const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Bounds {
    /// Data extrema widened by 5% (or by 1 when the span is zero).
    pub fn covering(series: &[Series]) -> Option<Bounds> {
        let pts = series.iter().flat_map(|s| s.points.iter());
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y) in pts.filter(|(x, y)| x.is_finite() && y.is_finite()) {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if !x0.is_finite() {
            return None;
        }
        let pad = |lo: f64, hi: f64| if hi > lo { 0.05 * (hi - lo) } else { 1.0 };
        let (px, py) = (pad(x0, x1), pad(y0, y1));
        Some(Bounds {
            x_min: x0 - px,
            x_max: x1 + px,
            y_min: y0 - py,
            y_max: y1 + py,
        })
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// A complete SVG document, or `None` when there is nothing finite to draw.
pub fn svg_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> Option<String> {
    let b = Bounds::covering(series)?;
    let (pw, ph) = (WIDTH - MARGIN_LEFT - MARGIN_RIGHT, HEIGHT - MARGIN_TOP - MARGIN_BOTTOM);
    let sx = |x: f64| MARGIN_LEFT + (x - b.x_min) / (b.x_max - b.x_min) * pw;
    let sy = |y: f64| MARGIN_TOP + (b.y_max - y) / (b.y_max - b.y_min) * ph;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, WIDTH / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<g class="plot" data-x-min="{}" data-x-max="{}" data-y-min="{}" data-y-max="{}">"#,
        b.x_min, b.x_max, b.y_min, b.y_max
    );
    let _ = writeln!(
        s,
        r##"<rect class="frame" x="{MARGIN_LEFT}" y="{MARGIN_TOP}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>"##
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (b.x_min + f * (b.x_max - b.x_min), b.y_min + f * (b.y_max - b.y_min));
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            sx(xv),
            MARGIN_TOP + ph + 18.0,
            fmt_tick(xv)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            MARGIN_LEFT - 6.0,
            sy(yv) + 4.0,
            fmt_tick(yv)
        );
    }
    for (i, ser) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = ser
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline class="series" data-name="{}" fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            escape(&ser.name),
            pts.join(" ")
        );
        let ly = MARGIN_TOP + 14.0 + 16.0 * i as f64;
        let lx = MARGIN_LEFT + pw + 10.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{}" x2="{}" y2="{}" stroke="{color}" stroke-width="2"/><text x="{}" y="{ly}">{}</text>"#,
            ly - 4.0,
            lx + 16.0,
            ly - 4.0,
            lx + 20.0,
            escape(&ser.name)
        );
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        MARGIN_LEFT + pw / 2.0,
        HEIGHT - 10.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        MARGIN_TOP + ph / 2.0,
        MARGIN_TOP + ph / 2.0,
        escape(y_label)
    );
    s.push_str("</svg>\n");
    Some(s)
}

fn fmt_tick(v: f64) -> String {
    if v.abs() >= 1000.0 || (v != 0.0 && v.abs() < 0.01) {
        format!("{v:.1e}")
    } else {
        format!("{v:.2}")
    }
}

const LOSS_METRICS: [&str; 3] = ["train_nll", "heldout_nll", "const_nll"];
const KNN_METRICS: [&str; 2] = ["knn_error", "knn_error_random"];

/// One series per (loss metric, seed), over epochs.
pub fn loss_series(rows: &[MetricRow]) -> Vec<Series> {
    let mut groups: BTreeMap<(usize, u64), BTreeMap<usize, f64>> = BTreeMap::new();
    for r in rows {
        if let Some(i) = LOSS_METRICS.iter().position(|m| *m == r.metric) {
            groups.entry((i, r.seed)).or_default().insert(r.epoch, r.value);
        }
    }
    let multi_seed = groups.keys().map(|k| k.1).collect::<std::collections::BTreeSet<_>>().len() > 1;
    groups
        .into_iter()
        .map(|((i, seed), pts)| Series {
            name: if multi_seed {
                format!("{} (seed {seed})", LOSS_METRICS[i])
            } else {
                LOSS_METRICS[i].to_string()
            },
            points: pts.into_iter().map(|(e, v)| (e as f64, v)).collect(),
        })
        .collect()
}

fn param_value<'a>(param: &'a str, key: &str) -> Option<&'a str> {
    param.split(';').find_map(|kv| kv.strip_prefix(key)?.strip_prefix('='))
}

/// One series per (KNN metric, sample count, seed), over K, taken from
/// the latest epoch evaluated.
pub fn knn_series(rows: &[MetricRow]) -> Vec<Series> {
    // (metric, k_samples, seed) -> K -> (epoch, value)
    type Groups = BTreeMap<(usize, String, u64), BTreeMap<u64, (usize, f64)>>;
    let mut groups = Groups::new();
    for r in rows {
        let Some(i) = KNN_METRICS.iter().position(|m| *m == r.metric) else {
            continue;
        };
        let Some(k) = param_value(&r.param, "K").and_then(|v| v.parse::<u64>().ok()) else {
            continue;
        };
        let ks = param_value(&r.param, "k_samples").unwrap_or("").to_string();
        let slot = groups.entry((i, ks, r.seed)).or_default().entry(k).or_insert((r.epoch, r.value));
        if r.epoch >= slot.0 {
            *slot = (r.epoch, r.value);
        }
    }
    groups
        .into_iter()
        .map(|((i, ks, seed), pts)| Series {
            name: format!("{} k={ks} s={seed}", KNN_METRICS[i]),
            points: pts.into_iter().map(|(k, (_, v))| (k as f64, v)).collect(),
        })
        .collect()
}

/// `(file name, SVG)` for each chart the rows support.
pub fn charts(rows: &[MetricRow]) -> Vec<(&'static str, String)> {
    let mut out = Vec::new();
    if let Some(svg) = svg_chart("Transformation NLL", "epoch", "nats", &loss_series(rows)) {
        out.push(("loss.svg", svg));
    }
    if let Some(svg) = svg_chart("KNN error on frozen features", "K", "error rate", &knn_series(rows)) {
        out.push(("knn.svg", svg));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bounds_pad_degenerate_spans() {
        let s = [Series {
            name: "a".into(),
            points: vec![(2.0, 5.0)],
        }];
        let b = Bounds::covering(&s).unwrap();
        assert_eq!((b.x_min, b.x_max, b.y_min, b.y_max), (1.0, 3.0, 4.0, 6.0));
        assert!(Bounds::covering(&[]).is_none());
    }

    #[test]
    fn knn_series_keeps_latest_epoch() {
        let rows = vec![
            MetricRow::new("knn_error", "K=5;k_samples=5", 0.4, 1, 1),
            MetricRow::new("knn_error", "K=5;k_samples=5", 0.3, 1, 7),
            MetricRow::new("knn_error", "K=3;k_samples=5", 0.2, 1, 7),
        ];
        let s = knn_series(&rows);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].points, vec![(3.0, 0.2), (5.0, 0.3)]);
    }

    #[test]
    fn names_are_escaped() {
        let s = [Series {
            name: "a<b&c".into(),
            points: vec![(0.0, 0.0), (1.0, 1.0)],
        }];
        let svg = svg_chart("t", "x", "y", &s).unwrap();
        assert!(svg.contains("a&lt;b&amp;c") && !svg.contains("a<b"));
    }
}
