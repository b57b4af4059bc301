//! SVG renderings of depth maps and loss curves.

use std::fmt::Write;

use sarcd_core::DepthMap;

/// Largest number of cells drawn along either axis; bigger maps are
/// subsampled.
const MAX_CELLS: usize = 200;

fn ramp(t: f64) -> (u8, u8, u8) {
    // dark blue (near) through green to yellow (far)
    let stops = [(0.0, (68.0, 1.0, 84.0)), (0.5, (33.0, 145.0, 140.0)), (1.0, (253.0, 231.0, 37.0))];
    let t = t.clamp(0.0, 1.0);
    let (a, b) = if t <= 0.5 { (stops[0], stops[1]) } else { (stops[1], stops[2]) };
    let u = (t - a.0) / (b.0 - a.0);
    let mix = |x: f64, y: f64| (x + (y - x) * u).round() as u8;
    (mix(a.1 .0, b.1 .0), mix(a.1 .1, b.1 .1), mix(a.1 .2, b.1 .2))
}

pub fn depth_svg(map: &DepthMap, max_depth: Option<f64>, title: &str) -> String {
    let (w, h) = map.dims();
    let step = w.max(h).div_ceil(MAX_CELLS).max(1);
    let cell = 4;
    let (cw, ch) = (w.div_ceil(step), h.div_ceil(step));
    let top = map.valid_range().map(|(_, hi)| f64::from(hi)).unwrap_or(1.0);
    let scale = max_depth.unwrap_or(top).max(f64::MIN_POSITIVE);
    let (sw, sh) = (cw * cell, ch * cell + 20);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{sw}" height="{sh}" viewBox="0 0 {sw} {sh}">"#);
    let _ = writeln!(s, r##"<rect width="{sw}" height="{sh}" fill="#202020"/>"##);
    let _ = writeln!(s, r##"<text x="4" y="14" font-family="monospace" font-size="12" fill="#e0e0e0">{}</text>"##, escape(title));
    for r in (0..h).step_by(step) {
        for c in (0..w).step_by(step) {
            let d = map.get(r, c);
            if d <= 0.0 {
                continue;
            }
            let (cr, cg, cb) = ramp(f64::from(d) / scale);
            let _ = writeln!(
                s,
                r##"<rect x="{}" y="{}" width="{cell}" height="{cell}" fill="#{cr:02x}{cg:02x}{cb:02x}"/>"##,
                (c / step) * cell,
                (r / step) * cell + 20
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

pub fn loss_svg(losses: &[f64], title: &str) -> String {
    let (w, h, pad) = (640.0, 360.0, 40.0);
    let finite: Vec<f64> = losses.iter().copied().filter(|v| v.is_finite() && *v > 0.0).collect();
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min).max(f64::MIN_POSITIVE);
    let hi = finite.iter().copied().fold(0.0, f64::max).max(lo * 1.0001);
    let (llo, lhi) = (lo.log10(), hi.log10());
    let n = losses.len().max(2) - 1;

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r##"<rect width="{w}" height="{h}" fill="#ffffff"/>"##);
    let _ = writeln!(
        s,
        r##"<text x="{pad}" y="20" font-family="monospace" font-size="12">{} (log scale, {:.4e} .. {:.4e})</text>"##,
        escape(title),
        lo,
        hi
    );
    let _ = writeln!(
        s,
        r##"<polyline fill="none" stroke="#999" points="{pad},{pad} {pad},{} {},{}"/>"##,
        h - pad,
        w - pad,
        h - pad
    );
    let pts: Vec<String> = losses
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_finite() && **v > 0.0)
        .map(|(k, v)| {
            let x = pad + (w - 2.0 * pad) * k as f64 / n as f64;
            let y = h - pad - (h - 2.0 * pad) * (v.log10() - llo) / (lhi - llo);
            format!("{x:.2},{y:.2}")
        })
        .collect();
    let _ = writeln!(s, r##"<polyline fill="none" stroke="#1f77b4" stroke-width="1.5" points="{}"/>"##, pts.join(" "));
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
