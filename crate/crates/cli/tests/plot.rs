use avt_cli::plot::{charts, knn_series, loss_series, svg_chart, Bounds, Series};
use avt_core::metrics::{parse_metrics, MetricRow};

fn parse_points(attr: &str) -> Vec<(f64, f64)> {
    attr.split_whitespace()
        .map(|p| {
            let (x, y) = p.split_once(',').unwrap();
            (x.parse().unwrap(), y.parse().unwrap())
        })
        .collect()
}

fn attr_f64(node: roxmltree::Node, name: &str) -> f64 {
    node.attribute(name).unwrap().parse().unwrap()
}

#[test]
fn two_rows_give_one_polyline_with_two_points() {
    let text = "metric,param,value,seed,epoch\ntrain_nll,,11.2,1,0\ntrain_nll,,10.5,1,1\n";
    let rows = parse_metrics(text, "m.csv").unwrap();
    let out = charts(&rows);
    assert_eq!(out.len(), 1);
    assert_eq!(out[0].0, "loss.svg");
    let doc = roxmltree::Document::parse(&out[0].1).unwrap();
    let lines: Vec<_> = doc.descendants().filter(|n| n.has_tag_name("polyline")).collect();
    assert_eq!(lines.len(), 1);
    assert_eq!(parse_points(lines[0].attribute("points").unwrap()).len(), 2);
}

#[test]
fn output_is_standalone_svg() {
    let rows = vec![
        MetricRow::new("train_nll", "", 3.0, 1, 0),
        MetricRow::new("heldout_nll", "", 4.0, 1, 0),
        MetricRow::new("knn_error", "K=3;k_samples=5", 0.4, 1, 2),
        MetricRow::new("knn_error", "K=5;k_samples=5", 0.3, 1, 2),
    ];
    let out = charts(&rows);
    assert_eq!(out.iter().map(|c| c.0).collect::<Vec<_>>(), ["loss.svg", "knn.svg"]);
    for (_, svg) in out {
        let doc = roxmltree::Document::parse(&svg).unwrap();
        let root = doc.root_element();
        assert!(root.has_tag_name(("http://www.w3.org/2000/svg", "svg")));
        assert!(root.attribute("viewBox").is_some());
    }
}

#[test]
fn axis_ranges_cover_data_extrema() {
    let series = vec![
        Series {
            name: "a".into(),
            points: vec![(0.0, -3.5), (1.0, 2.0), (2.0, 11.25)],
        },
        Series {
            name: "b".into(),
            points: vec![(-4.0, 0.0), (7.5, 1.0)],
        },
    ];
    let svg = svg_chart("t", "x", "y", &series).unwrap();
    let doc = roxmltree::Document::parse(&svg).unwrap();
    let g = doc.descendants().find(|n| n.attribute("class") == Some("plot")).unwrap();
    let (x0, x1, y0, y1) = (attr_f64(g, "data-x-min"), attr_f64(g, "data-x-max"), attr_f64(g, "data-y-min"), attr_f64(g, "data-y-max"));
    // Independent scan of the inputs.
    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.clone()).collect();
    let fold = |f: fn(&(f64, f64)) -> f64, init: f64, pick: fn(f64, f64) -> f64| all.iter().map(f).fold(init, pick);
    assert!(x0 <= fold(|p| p.0, f64::INFINITY, f64::min));
    assert!(x1 >= fold(|p| p.0, f64::NEG_INFINITY, f64::max));
    assert!(y0 <= fold(|p| p.1, f64::INFINITY, f64::min));
    assert!(y1 >= fold(|p| p.1, f64::NEG_INFINITY, f64::max));

    let frame = doc.descendants().find(|n| n.attribute("class") == Some("frame")).unwrap();
    let (fx, fy) = (attr_f64(frame, "x"), attr_f64(frame, "y"));
    let (fw, fh) = (attr_f64(frame, "width"), attr_f64(frame, "height"));
    for line in doc.descendants().filter(|n| n.has_tag_name("polyline")) {
        for (px, py) in parse_points(line.attribute("points").unwrap()) {
            assert!(px >= fx && px <= fx + fw && py >= fy && py <= fy + fh, "({px},{py}) outside frame");
        }
    }
    assert_eq!(Bounds::covering(&series).unwrap().x_min, x0);
}

#[test]
fn series_grouping() {
    let rows = vec![
        MetricRow::new("train_nll", "", 3.0, 1, 0),
        MetricRow::new("train_nll", "", 2.0, 2, 0),
        MetricRow::new("lr", "", 0.1, 1, 0),
        MetricRow::new("knn_error", "K=5;k_samples=1", 0.5, 1, 0),
        MetricRow::new("knn_error", "K=5;k_samples=5", 0.4, 1, 0),
        MetricRow::new("knn_error_random", "K=5;k_samples=5", 0.8, 1, 0),
    ];
    assert_eq!(loss_series(&rows).len(), 2);
    assert_eq!(knn_series(&rows).len(), 3);
}

#[test]
fn malformed_metrics_name_the_line() {
    let err = parse_metrics("metric,param,value,seed,epoch\ntrain_nll,,1,1,0\ntrain_nll,,oops,1,1\n", "m.csv").unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("m.csv") && msg.contains('3'), "{msg}");
}
