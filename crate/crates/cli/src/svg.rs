//! Deterministic SVG figures: dendrograms, 2D scatter plots with mixture
//! ellipses, heatmaps and line charts. Coordinates are printed with fixed
//! precision so identical inputs give identical bytes.

use std::fmt::Write;

use loce::clustering::{ClusterPartition, LinkageTable};
use loce::density::SigmaEllipse;
use loce::metrics::ConceptMatrix;
use ndarray::ArrayView2;

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];
const NEUTRAL: &str = "#999999";

pub fn color(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

fn num(x: f64) -> String {
    let s = format!("{x:.2}");
    if s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

struct Doc {
    out: String,
}

impl Doc {
    fn new(width: f64, height: f64, title: &str) -> Self {
        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#,
            w = num(width),
            h = num(height)
        );
        let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            out,
            r#"<text class="title" x="{}" y="16" text-anchor="middle" font-size="13">{}</text>"#,
            num(width / 2.0),
            escape(title)
        );
        Self { out }
    }

    fn line(&mut self, s: String) {
        self.out.push_str(&s);
        self.out.push('\n');
    }

    fn text(&mut self, x: f64, y: f64, anchor: &str, s: &str) {
        self.line(format!(
            r#"<text x="{}" y="{}" text-anchor="{anchor}">{}</text>"#,
            num(x),
            num(y),
            escape(s)
        ));
    }

    fn finish(mut self) -> String {
        self.out.push_str("</svg>\n");
        self.out
    }
}

/// Dendrogram with links colored by cluster and one bracket per cluster
/// under the leaves it spans.
pub fn dendrogram(table: &LinkageTable, leaf_labels: &[String], clusters: &ClusterPartition, title: &str) -> String {
    let n = table.n_leaves;
    let step = if n > 200 { 4.0 } else { 14.0 };
    let (left, top, plot_h) = (60.0, 30.0, 300.0);
    let width = left + step * n as f64 + 20.0;
    let show_labels = n <= 200;
    let height = top + plot_h + if show_labels { 140.0 } else { 40.0 };
    let mut doc = Doc::new(width.max(300.0), height, title);

    let max_h = table.rows.last().map_or(1.0, |r| r.height).max(f64::MIN_POSITIVE);
    let y_of = |h: f64| top + plot_h * (1.0 - h / max_h);
    let baseline = top + plot_h;
    let mut x = vec![0.0; 2 * n - 1];
    let order = table.leaf_order();
    let mut position = vec![0; n];
    for (pos, &leaf) in order.iter().enumerate() {
        position[leaf] = pos;
        x[leaf] = left + (pos as f64 + 0.5) * step;
    }
    // cluster of every node whose leaves all share one cluster
    let mut owner: Vec<Option<usize>> = clusters.assignments.iter().map(|&c| Some(c)).collect();
    owner.resize(2 * n - 1, None);
    for (i, m) in table.rows.iter().enumerate() {
        let id = n + i;
        x[id] = (x[m.left] + x[m.right]) / 2.0;
        owner[id] = if owner[m.left] == owner[m.right] { owner[m.left] } else { None };
    }

    doc.line(format!(
        r#"<line class="axis" x1="{l}" y1="{t}" x2="{l}" y2="{b}" stroke="black"/>"#,
        l = num(left - 10.0),
        t = num(top),
        b = num(baseline)
    ));
    for tick in 0..=4 {
        let h = max_h * tick as f64 / 4.0;
        let y = y_of(h);
        doc.line(format!(
            r#"<line x1="{}" y1="{y}" x2="{}" y2="{y}" stroke="black"/>"#,
            num(left - 14.0),
            num(left - 10.0),
            y = num(y)
        ));
        doc.text(left - 16.0, y + 4.0, "end", &format!("{h:.2}"));
    }

    for (i, m) in table.rows.iter().enumerate() {
        let id = n + i;
        let stroke = owner[id].map_or(NEUTRAL, color);
        doc.line(format!(
            r#"<path class="link" d="M{} {} V{} H{} V{}" fill="none" stroke="{stroke}"/>"#,
            num(x[m.left]),
            num(y_of(table.height(m.left))),
            num(y_of(m.height)),
            num(x[m.right]),
            num(y_of(table.height(m.right)))
        ));
    }

    for (c, members) in clusters.clusters().iter().enumerate() {
        let lo = members.iter().map(|&l| position[l]).min().unwrap_or(0);
        let hi = members.iter().map(|&l| position[l]).max().unwrap_or(0);
        let (x0, x1) = (left + lo as f64 * step + 2.0, left + (hi + 1) as f64 * step - 2.0);
        doc.line(format!(
            r#"<path class="cluster-bracket" data-cluster="{c}" d="M{x0} {y0} V{y1} H{x1} V{y0}" fill="none" stroke="{col}" stroke-width="3"/>"#,
            x0 = num(x0),
            x1 = num(x1),
            y0 = num(baseline + 4.0),
            y1 = num(baseline + 12.0),
            col = color(c)
        ));
    }

    if show_labels {
        for (leaf, label) in leaf_labels.iter().enumerate() {
            doc.line(format!(
                r#"<text class="leaf-label" transform="translate({},{}) rotate(-90)" text-anchor="end" font-size="9">{}</text>"#,
                num(x[leaf] + 3.0),
                num(baseline + 18.0),
                escape(label)
            ));
        }
    }
    doc.finish()
}

struct Frame {
    x0: f64,
    y0: f64,
    scale: f64,
    left: f64,
    bottom: f64,
}

impl Frame {
    fn map(&self, p: [f64; 2]) -> (f64, f64) {
        (self.left + (p[0] - self.x0) * self.scale, self.bottom - (p[1] - self.y0) * self.scale)
    }
}

/// Points colored by label with one 1-sigma ellipse per mixture component.
/// Axes share a scale so ellipse orientation is preserved.
pub fn scatter(points: ArrayView2<f64>, labels: &[String], ellipses: &[SigmaEllipse], title: &str) -> String {
    let (size, margin) = (480.0, 40.0);
    let mut xs: Vec<f64> = points.column(0).to_vec();
    let mut ys: Vec<f64> = points.column(1).to_vec();
    for e in ellipses {
        let r = e.radii[0].max(e.radii[1]);
        xs.extend([e.center[0] - r, e.center[0] + r]);
        ys.extend([e.center[1] - r, e.center[1] + r]);
    }
    let lo = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (x0, x1, y0, y1) = (lo(&xs), hi(&xs), lo(&ys), hi(&ys));
    let span = (x1 - x0).max(y1 - y0).max(1e-12);
    let frame = Frame {
        x0,
        y0,
        scale: size / span,
        left: margin,
        bottom: margin + size,
    };

    let mut concepts: Vec<&String> = labels.iter().collect();
    concepts.sort();
    concepts.dedup();
    let width = 2.0 * margin + size + 140.0;
    let mut doc = Doc::new(width, 2.0 * margin + size, title);
    doc.line(format!(
        r#"<rect class="frame" x="{m}" y="{m}" width="{s}" height="{s}" fill="none" stroke="black"/>"#,
        m = num(margin),
        s = num(size)
    ));
    for (i, label) in labels.iter().enumerate() {
        let c = concepts.binary_search(&label).unwrap_or(0);
        let (px, py) = frame.map([points[[i, 0]], points[[i, 1]]]);
        doc.line(format!(
            r#"<circle class="point" cx="{}" cy="{}" r="3" fill="{}" fill-opacity="0.7"/>"#,
            num(px),
            num(py),
            color(c)
        ));
    }
    for e in ellipses {
        let (cx, cy) = frame.map(e.center);
        doc.line(format!(
            r#"<ellipse class="gmm-sigma" cx="{cx}" cy="{cy}" rx="{}" ry="{}" transform="rotate({} {cx} {cy})" fill="none" stroke="black" stroke-dasharray="4 2"/>"#,
            num(e.radii[0] * frame.scale),
            num(e.radii[1] * frame.scale),
            num(-e.angle_deg),
            cx = num(cx),
            cy = num(cy)
        ));
    }
    for (c, label) in concepts.iter().enumerate() {
        let y = margin + 14.0 * c as f64 + 6.0;
        doc.line(format!(
            r#"<circle cx="{}" cy="{}" r="4" fill="{}"/>"#,
            num(2.0 * margin + size - 20.0),
            num(y - 4.0),
            color(c)
        ));
        doc.text(2.0 * margin + size - 10.0, y, "start", label);
    }
    doc.finish()
}

/// Concept-by-concept matrix; undefined cells are hatched gray.
pub fn heatmap(m: &ConceptMatrix, title: &str) -> String {
    let n = m.concepts.len();
    let cell = 48.0;
    let (left, top) = (110.0, 40.0);
    let size = cell * n as f64;
    let mut doc = Doc::new(left + size + 20.0, top + size + 90.0, title);
    let finite: Vec<f64> = m.values.iter().flatten().flatten().copied().collect();
    let vmax = finite.iter().copied().fold(0.0f64, f64::max).max(1e-12);
    for i in 0..n {
        for j in 0..n {
            let (x, y) = (left + cell * j as f64, top + cell * i as f64);
            let (fill, label) = match m.values[i][j] {
                Some(v) => {
                    let t = (v / vmax).clamp(0.0, 1.0);
                    // white to dark blue
                    let r = (255.0 * (1.0 - 0.85 * t)).round() as u8;
                    let g = (255.0 * (1.0 - 0.65 * t)).round() as u8;
                    let b = (255.0 * (1.0 - 0.25 * t)).round() as u8;
                    (format!("#{r:02x}{g:02x}{b:02x}"), format!("{v:.2}"))
                }
                None => ("#dddddd".to_string(), "n/a".to_string()),
            };
            doc.line(format!(
                r#"<rect class="cell" data-row="{i}" data-col="{j}" x="{}" y="{}" width="{c}" height="{c}" fill="{fill}" stroke="white"/>"#,
                num(x),
                num(y),
                c = num(cell)
            ));
            doc.text(x + cell / 2.0, y + cell / 2.0 + 4.0, "middle", &label);
        }
    }
    for (i, c) in m.concepts.iter().enumerate() {
        doc.text(left - 6.0, top + cell * (i as f64 + 0.5) + 4.0, "end", c);
        doc.line(format!(
            r#"<text transform="translate({},{}) rotate(-45)" text-anchor="end">{}</text>"#,
            num(left + cell * (i as f64 + 0.5)),
            num(top + size + 12.0),
            escape(c)
        ));
    }
    doc.finish()
}

/// Line chart with `y` fixed to `[0, 1]`.
pub fn line_chart(series: &[(String, Vec<(f64, f64)>)], title: &str, x_label: &str, y_label: &str) -> String {
    let (left, top, w, h) = (60.0, 30.0, 420.0, 260.0);
    let mut doc = Doc::new(left + w + 150.0, top + h + 50.0, title);
    let xs: Vec<f64> = series.iter().flat_map(|s| s.1.iter().map(|p| p.0)).collect();
    let x0 = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let x1 = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let xspan = if x1 > x0 { x1 - x0 } else { 1.0 };
    let map = |(x, y): (f64, f64)| (left + (x - x0) / xspan * w, top + h * (1.0 - y.clamp(0.0, 1.0)));
    doc.line(format!(
        r#"<path class="axes" d="M{l} {t} V{b} H{r}" fill="none" stroke="black"/>"#,
        l = num(left),
        t = num(top),
        b = num(top + h),
        r = num(left + w)
    ));
    for tick in 0..=4 {
        let v = tick as f64 / 4.0;
        let (_, y) = map((x0, v));
        doc.text(left - 6.0, y + 4.0, "end", &format!("{v:.2}"));
    }
    if xs.is_empty() {
        return doc.finish();
    }
    doc.text(left + w / 2.0, top + h + 34.0, "middle", x_label);
    doc.line(format!(
        r#"<text transform="translate(16,{}) rotate(-90)" text-anchor="middle">{}</text>"#,
        num(top + h / 2.0),
        escape(y_label)
    ));
    doc.text(left, top + h + 16.0, "middle", &format!("{x0}"));
    doc.text(left + w, top + h + 16.0, "middle", &format!("{x1}"));
    for (i, (name, pts)) in series.iter().enumerate() {
        let coords: Vec<String> = pts
            .iter()
            .map(|&p| {
                let (x, y) = map(p);
                format!("{},{}", num(x), num(y))
            })
            .collect();
        doc.line(format!(
            r#"<polyline class="series" data-name="{}" points="{}" fill="none" stroke="{}" stroke-width="2"/>"#,
            escape(name),
            coords.join(" "),
            color(i)
        ));
        let y = top + 14.0 * i as f64 + 6.0;
        doc.line(format!(
            r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="{}" stroke-width="2"/>"#,
            num(left + w + 16.0),
            num(y - 4.0),
            num(left + w + 32.0),
            num(y - 4.0),
            color(i)
        ));
        doc.text(left + w + 38.0, y, "start", name);
    }
    doc.finish()
}
