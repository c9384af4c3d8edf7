//! Minimal static SVG line plots (log-scale y). Output is deterministic
//! byte-for-byte for identical input series: fixed canvas, fixed precision
//! formatting, no timestamps or random ids.

use crate::error::{Error, Result};

const W: f64 = 800.0;
const H: f64 = 500.0;
const ML: f64 = 70.0; // margins: left, right, top, bottom
const MR: f64 = 20.0;
const MT: f64 = 30.0;
const MB: f64 = 50.0;

fn fmt(v: f64) -> String {
    format!("{v:.2}")
}

/// Writes a log-y plot of `series` (t, value) to `path`. Non-positive
/// values are clamped to the smallest positive value in the series so the
/// log axis stays defined.
pub fn log_plot(
    path: &std::path::Path,
    title: &str,
    y_label: &str,
    series: &[(f64, f64)],
) -> Result<()> {
    if series.len() < 2 {
        return Err(Error::InvalidInput("plot needs at least two samples"));
    }
    let t0 = series.first().unwrap().0;
    let t1 = series.last().unwrap().0;
    if t1 <= t0 {
        return Err(Error::InvalidInput("plot needs an increasing time axis"));
    }
    let min_pos = series
        .iter()
        .map(|&(_, v)| v)
        .filter(|v| *v > 0.0 && v.is_finite())
        .fold(f64::INFINITY, f64::min);
    if !min_pos.is_finite() {
        return Err(Error::InvalidInput("plot series has no positive values"));
    }
    let mut lo = min_pos.log10().floor();
    let hi_val = series
        .iter()
        .map(|&(_, v)| v)
        .filter(|v| v.is_finite())
        .fold(min_pos, f64::max);
    let mut hi = hi_val.log10().ceil();
    if hi <= lo {
        hi = lo + 1.0;
    }
    // Cap the span so a single outlier decade cannot flatten the curve.
    if hi - lo > 16.0 {
        lo = hi - 16.0;
    }

    let x = |t: f64| ML + (t - t0) / (t1 - t0) * (W - ML - MR);
    let y = |v: f64| {
        let lv = v.max(min_pos).log10().clamp(lo, hi);
        H - MB - (lv - lo) / (hi - lo) * (H - MT - MB)
    };

    let mut svg = String::with_capacity(series.len() * 16 + 2048);
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\">\n<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"20\" font-family=\"monospace\" font-size=\"14\" \
         text-anchor=\"middle\">{title}</text>\n",
        W / 2.0
    ));

    // Axes box.
    svg.push_str(&format!(
        "<rect x=\"{ML}\" y=\"{MT}\" width=\"{}\" height=\"{}\" fill=\"none\" \
         stroke=\"black\" stroke-width=\"1\"/>\n",
        W - ML - MR,
        H - MT - MB
    ));

    // Decade grid lines + labels.
    let mut d = lo as i64;
    while d <= hi as i64 {
        let yy = y(10f64.powi(d as i32));
        svg.push_str(&format!(
            "<line x1=\"{ML}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#cccccc\" \
             stroke-width=\"0.5\"/>\n",
            fmt(yy),
            W - MR,
            fmt(yy)
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"11\" \
             text-anchor=\"end\">1e{d}</text>\n",
            ML - 6.0,
            fmt(yy + 4.0)
        ));
        d += 1;
    }
    // Time ticks: five uniform divisions.
    for i in 0..=5 {
        let tt = t0 + (t1 - t0) * i as f64 / 5.0;
        let xx = x(tt);
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\" \
             stroke-width=\"1\"/>\n",
            fmt(xx),
            H - MB,
            fmt(xx),
            H - MB + 5.0
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"11\" \
             text-anchor=\"middle\">{:.1}</text>\n",
            fmt(xx),
            H - MB + 18.0,
            tt
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"12\" \
         text-anchor=\"middle\">t [s]</text>\n",
        W / 2.0,
        H - 12.0
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{}\" font-family=\"monospace\" font-size=\"12\" \
         text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{y_label}</text>\n",
        H / 2.0,
        H / 2.0
    ));

    // The curve. Decimate to at most ~4000 points to keep files small.
    let stride = (series.len() / 4000).max(1);
    let mut pts = String::new();
    for (i, &(t, v)) in series.iter().enumerate() {
        if i % stride == 0 || i == series.len() - 1 {
            pts.push_str(&format!("{},{} ", fmt(x(t)), fmt(y(v))));
        }
    }
    svg.push_str(&format!(
        "<polyline points=\"{}\" fill=\"none\" stroke=\"#1f6fb2\" stroke-width=\"1.5\"/>\n",
        pts.trim_end()
    ));
    svg.push_str("</svg>\n");

    std::fs::write(path, svg)?;
    Ok(())
}
