use std::collections::BTreeMap;
use std::fmt::Write;

use crate::report::SummaryRow;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotMetric {
    LatencyP50,
    NormalizedThroughput,
}

impl PlotMetric {
    fn value(&self, r: &SummaryRow) -> f64 {
        match self {
            PlotMetric::LatencyP50 => r.p50_ms,
            PlotMetric::NormalizedThroughput => r.normalized_throughput,
        }
    }

    fn axis_label(&self) -> &'static str {
        match self {
            PlotMetric::LatencyP50 => "median latency (ms)",
            PlotMetric::NormalizedThroughput => "throughput (entities/s)",
        }
    }
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 180.0;
const TOP: f64 = 20.0;
const BOTTOM: f64 = 50.0;
const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

/// Line chart of `metric` over total entity count, one line per
/// topology and client count. Excluded runs are left out.
pub fn render_svg(rows: &[SummaryRow], metric: PlotMetric) -> String {
    let rows: Vec<&SummaryRow> = rows.iter().filter(|r| !r.excluded).collect();
    let mut xs: Vec<usize> = rows.iter().map(|r| r.total_entities).collect();
    xs.sort_unstable();
    xs.dedup();
    let mut series: BTreeMap<String, Vec<(usize, f64)>> = BTreeMap::new();
    for r in &rows {
        series
            .entry(format!("{} ({} clients)", r.topology, r.clients))
            .or_default()
            .push((r.total_entities, metric.value(r)));
    }
    let y_max = rows.iter().map(|r| metric.value(r)).fold(0.0, f64::max).max(1e-9) * 1.1;
    let plot_w = W - LEFT - RIGHT;
    let plot_h = H - TOP - BOTTOM;
    let x_of = |x: usize| {
        let i = xs.iter().position(|&v| v == x).unwrap_or(0) as f64;
        let n = (xs.len().max(2) - 1) as f64;
        LEFT + plot_w * i / n
    };
    let y_of = |y: f64| TOP + plot_h * (1.0 - y / y_max);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<line x1="{LEFT}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        TOP + plot_h,
        LEFT + plot_w,
        TOP + plot_h
    );
    let _ = writeln!(svg, r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{}" stroke="black"/>"#, TOP + plot_h);
    for &x in &xs {
        let px = x_of(x);
        let _ = writeln!(
            svg,
            r#"<text x="{px:.1}" y="{:.1}" text-anchor="middle">{x}</text>"#,
            TOP + plot_h + 16.0
        );
    }
    for i in 0..=4 {
        let v = y_max * i as f64 / 4.0;
        let py = y_of(v);
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.1}</text>"#,
            LEFT - 6.0,
            py + 4.0
        );
        let _ = writeln!(
            svg,
            r##"<line x1="{LEFT}" y1="{py:.1}" x2="{:.1}" y2="{py:.1}" stroke="#ddd"/>"##,
            LEFT + plot_w
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">total entities</text>"#,
        LEFT + plot_w / 2.0,
        H - 12.0
    );
    let _ = writeln!(
        svg,
        r#"<text transform="translate(16 {:.1}) rotate(-90)" text-anchor="middle">{}</text>"#,
        TOP + plot_h / 2.0,
        metric.axis_label()
    );
    for (i, (name, mut points)) in series.into_iter().enumerate() {
        points.sort_by_key(|p| p.0);
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = points
            .iter()
            .map(|&(x, y)| format!("{:.1},{:.1}", x_of(x), y_of(y)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            path.join(" ")
        );
        for &(x, y) in &points {
            let _ = writeln!(
                svg,
                r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#,
                x_of(x),
                y_of(y)
            );
        }
        let ly = TOP + 14.0 * i as f64 + 6.0;
        let lx = W - RIGHT + 12.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#,
            lx + 16.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}">{}</text>"#,
            lx + 20.0,
            ly + 4.0,
            escape(&name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
