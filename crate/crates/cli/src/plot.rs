//! Minimal SVG emitters for ROC curves, sweep tables, and per-clip
//! detection timelines. No raster dependencies; output is plain markup.

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn nice_range(lo: f64, hi: f64) -> (f64, f64) {
    if (hi - lo).abs() < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = (hi - lo) * 0.05;
        (lo - pad, hi + pad)
    }
}

/// Line chart over arbitrary series; axes are linear with five ticks.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h) = (640.0, 420.0);
    let (ml, mr, mt, mb) = (62.0, 20.0, 40.0, 52.0);
    let (pw, ph) = (w - ml - mr, h - mt - mb);

    let pts: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    let (x_lo, x_hi) = nice_range(
        pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min),
        pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max),
    );
    let (y_lo, y_hi) = nice_range(
        pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min),
        pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max),
    );
    let sx = move |x: f64| ml + (x - x_lo) / (x_hi - x_lo) * pw;
    let sy = move |y: f64| mt + ph - (y - y_lo) / (y_hi - y_lo) * ph;

    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    ));
    out.push_str(&format!(
        "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        w / 2.0,
        esc(title)
    ));
    for k in 0..=4 {
        let fx = x_lo + (x_hi - x_lo) * k as f64 / 4.0;
        let fy = y_lo + (y_hi - y_lo) * k as f64 / 4.0;
        let (px, py) = (sx(fx), sy(fy));
        out.push_str(&format!(
            "<line x1=\"{px:.1}\" y1=\"{mt}\" x2=\"{px:.1}\" y2=\"{:.1}\" stroke=\"#ddd\"/>\n\
             <line x1=\"{ml}\" y1=\"{py:.1}\" x2=\"{:.1}\" y2=\"{py:.1}\" stroke=\"#ddd\"/>\n\
             <text x=\"{px:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{fx:.3}</text>\n\
             <text x=\"{:.1}\" y=\"{py:.1}\" text-anchor=\"end\" dy=\"4\">{fy:.3}</text>\n",
            mt + ph,
            ml + pw,
            mt + ph + 16.0,
            ml - 6.0
        ));
    }
    out.push_str(&format!(
        "<rect x=\"{ml}\" y=\"{mt}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"#333\"/>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n\
         <text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>\n",
        ml + pw / 2.0,
        h - 12.0,
        esc(x_label),
        mt + ph / 2.0,
        mt + ph / 2.0,
        esc(y_label)
    ));
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y)))
            .collect();
        out.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.8\"/>\n",
            path.join(" ")
        ));
        for &(x, y) in &s.points {
            out.push_str(&format!(
                "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"2.4\" fill=\"{color}\"/>\n",
                sx(x),
                sy(y)
            ));
        }
        let ly = mt + 16.0 + 16.0 * i as f64;
        out.push_str(&format!(
            "<line x1=\"{:.1}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" stroke=\"{color}\" stroke-width=\"2\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\">{}</text>\n",
            ml + pw - 150.0,
            ml + pw - 126.0,
            ml + pw - 120.0,
            ly + 4.0,
            esc(&s.name)
        ));
    }
    out.push_str("</svg>\n");
    out
}

pub struct TimelineRow {
    pub label: String,
    pub ref_spans: Vec<(f64, f64)>,
    pub det_spans: Vec<(f64, f64)>,
}

/// Reference spans as filled gray bars, detections as colored outlines on
/// the same lane, one lane per clip/class row.
pub fn timeline_chart(title: &str, total_seconds: f64, rows: &[TimelineRow]) -> String {
    let row_h = 26.0;
    let (ml, mr, mt, mb) = (170.0, 20.0, 46.0, 30.0);
    let w = 760.0;
    let h = mt + mb + row_h * rows.len() as f64;
    let pw = w - ml - mr;
    let sx = move |t: f64| ml + t / total_seconds.max(1e-9) * pw;

    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        w / 2.0,
        esc(title)
    ));
    for (i, row) in rows.iter().enumerate() {
        let y = mt + row_h * i as f64;
        out.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>\n",
            ml - 8.0,
            y + row_h * 0.65,
            esc(&row.label)
        ));
        for &(on, off) in &row.ref_spans {
            out.push_str(&format!(
                "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"#bbb\"/>\n",
                sx(on),
                y + row_h * 0.25,
                (sx(off) - sx(on)).max(1.0),
                row_h * 0.5
            ));
        }
        for &(on, off) in &row.det_spans {
            out.push_str(&format!(
                "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"none\" \
                 stroke=\"{}\" stroke-width=\"2\"/>\n",
                sx(on),
                y + row_h * 0.15,
                (sx(off) - sx(on)).max(1.0),
                row_h * 0.7,
                PALETTE[0]
            ));
        }
    }
    out.push_str(&format!(
        "<text x=\"{ml}\" y=\"{:.1}\">0 s</text>\n\
         <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{total_seconds:.2} s</text>\n</svg>\n",
        h - 10.0,
        w - mr,
        h - 10.0
    ));
    out
}
