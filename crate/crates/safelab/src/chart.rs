//! Minimal deterministic SVG chart rendering for report emission.
//!
//! Output depends only on the input data: fixed canvas geometry, fixed float
//! formatting, and no timestamps, so emitted files are byte-stable across
//! reruns.

use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN_L: f64 = 62.0;
const MARGIN_R: f64 = 150.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 52.0;

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

pub(crate) struct Series {
    pub name: String,
    /// (x, y) points in data coordinates, drawn in order.
    pub points: Vec<(f64, f64)>,
    /// Optional symmetric error-bar half-heights, one per point.
    pub err: Option<Vec<f64>>,
}

pub(crate) struct LineChart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    /// Fixed y range; derived from the data when `None`.
    pub y_range: Option<(f64, f64)>,
    /// Explicit x tick positions; evenly spaced over the range when `None`.
    pub x_ticks: Option<Vec<f64>>,
}

pub(crate) struct BarChart {
    pub title: String,
    pub y_label: String,
    /// (category label, value) pairs in display order.
    pub bars: Vec<(String, f64)>,
    pub y_range: Option<(f64, f64)>,
}

fn fmt2(v: f64) -> String {
    format!("{v:.2}")
}

fn data_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if lo == hi {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = (hi - lo) * 0.06;
    (lo - pad, hi + pad)
}

fn svg_header(out: &mut String, title: &str) {
    let _ = write!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n\
         <text x=\"{:.2}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        (MARGIN_L + WIDTH - MARGIN_R) / 2.0,
        escape(title),
    );
}

fn axes(out: &mut String, x_label: &str, y_label: &str) {
    let (x0, x1) = (MARGIN_L, WIDTH - MARGIN_R);
    let (y0, y1) = (HEIGHT - MARGIN_B, MARGIN_T);
    let _ = write!(
        out,
        "<line x1=\"{x0:.2}\" y1=\"{y0:.2}\" x2=\"{x1:.2}\" y2=\"{y0:.2}\" stroke=\"black\"/>\n\
         <line x1=\"{x0:.2}\" y1=\"{y0:.2}\" x2=\"{x0:.2}\" y2=\"{y1:.2}\" stroke=\"black\"/>\n\
         <text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>\n\
         <text x=\"16\" y=\"{:.2}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.2})\">{}</text>\n",
        (x0 + x1) / 2.0,
        HEIGHT - 12.0,
        escape(x_label),
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(y_label),
    );
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Scale {
    lo: f64,
    hi: f64,
    px_lo: f64,
    px_hi: f64,
}

impl Scale {
    fn map(&self, v: f64) -> f64 {
        let t = (v - self.lo) / (self.hi - self.lo);
        self.px_lo + t * (self.px_hi - self.px_lo)
    }
}

fn ticks(out: &mut String, scale: &Scale, vertical: bool) {
    let values: Vec<f64> =
        (0..=4).map(|i| scale.lo + (scale.hi - scale.lo) * f64::from(i) / 4.0).collect();
    ticks_at(out, scale, vertical, &values);
}

fn ticks_at(out: &mut String, scale: &Scale, vertical: bool, values: &[f64]) {
    for &v in values {
        let px = scale.map(v);
        if vertical {
            let x0 = MARGIN_L;
            let _ = write!(
                out,
                "<line x1=\"{:.2}\" y1=\"{px:.2}\" x2=\"{x0:.2}\" y2=\"{px:.2}\" stroke=\"black\"/>\n\
                 <text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{}</text>\n",
                x0 - 5.0,
                x0 - 8.0,
                px + 4.0,
                fmt2(v),
            );
        } else {
            let y0 = HEIGHT - MARGIN_B;
            let _ = write!(
                out,
                "<line x1=\"{px:.2}\" y1=\"{y0:.2}\" x2=\"{px:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n\
                 <text x=\"{px:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>\n",
                y0 + 5.0,
                y0 + 20.0,
                fmt2(v),
            );
        }
    }
}

impl LineChart {
    pub fn to_svg(&self) -> String {
        let mut out = String::new();
        svg_header(&mut out, &self.title);
        axes(&mut out, &self.x_label, &self.y_label);

        let (xlo, xhi) = data_range(
            self.series
                .iter()
                .flat_map(|s| s.points.iter().map(|p| p.0))
                .chain(self.x_ticks.iter().flatten().copied()),
        );
        let (ylo, yhi) = self.y_range.unwrap_or_else(|| {
            data_range(self.series.iter().flat_map(|s| {
                s.points.iter().enumerate().flat_map(|(i, p)| {
                    let e = s.err.as_ref().map_or(0.0, |e| e[i]);
                    [p.1 - e, p.1 + e]
                })
            }))
        });
        let xs = Scale { lo: xlo, hi: xhi, px_lo: MARGIN_L, px_hi: WIDTH - MARGIN_R };
        let ys = Scale { lo: ylo, hi: yhi, px_lo: HEIGHT - MARGIN_B, px_hi: MARGIN_T };
        match &self.x_ticks {
            Some(values) => ticks_at(&mut out, &xs, false, values),
            None => ticks(&mut out, &xs, false),
        }
        ticks(&mut out, &ys, true);

        for (si, series) in self.series.iter().enumerate() {
            let color = PALETTE[si % PALETTE.len()];
            if let Some(err) = &series.err {
                for (&(x, y), &e) in series.points.iter().zip(err) {
                    let px = xs.map(x);
                    let _ = writeln!(
                        out,
                        "<line x1=\"{px:.2}\" y1=\"{:.2}\" x2=\"{px:.2}\" y2=\"{:.2}\" \
                         stroke=\"{color}\" stroke-width=\"1\"/>",
                        ys.map(y - e),
                        ys.map(y + e),
                    );
                }
            }
            let pts: Vec<String> = series
                .points
                .iter()
                .map(|&(x, y)| format!("{:.2},{:.2}", xs.map(x), ys.map(y)))
                .collect();
            let _ = writeln!(
                out,
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>",
                pts.join(" "),
            );
            for &(x, y) in &series.points {
                let _ = writeln!(
                    out,
                    "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>",
                    xs.map(x),
                    ys.map(y),
                );
            }
            let ly = MARGIN_T + 16.0 * si as f64;
            let lx = WIDTH - MARGIN_R + 12.0;
            let _ = write!(
                out,
                "<rect x=\"{lx:.2}\" y=\"{:.2}\" width=\"10\" height=\"10\" fill=\"{color}\"/>\n\
                 <text x=\"{:.2}\" y=\"{:.2}\">{}</text>\n",
                ly - 9.0,
                lx + 14.0,
                ly,
                escape(&series.name),
            );
        }
        out.push_str("</svg>\n");
        out
    }
}

impl BarChart {
    pub fn to_svg(&self) -> String {
        let mut out = String::new();
        svg_header(&mut out, &self.title);
        axes(&mut out, "", &self.y_label);

        let (ylo, yhi) = self
            .y_range
            .unwrap_or_else(|| (0.0, data_range(self.bars.iter().map(|b| b.1)).1.max(1.0)));
        let ys = Scale { lo: ylo, hi: yhi, px_lo: HEIGHT - MARGIN_B, px_hi: MARGIN_T };
        ticks(&mut out, &ys, true);

        let n = self.bars.len().max(1) as f64;
        let span = WIDTH - MARGIN_R - MARGIN_L;
        let slot = span / n;
        let bar_w = slot * 0.6;
        for (i, (label, value)) in self.bars.iter().enumerate() {
            let cx = MARGIN_L + slot * (i as f64 + 0.5);
            let top = ys.map(*value);
            let color = PALETTE[i % PALETTE.len()];
            let _ = write!(
                out,
                "<rect x=\"{:.2}\" y=\"{top:.2}\" width=\"{bar_w:.2}\" height=\"{:.2}\" fill=\"{color}\"/>\n\
                 <text x=\"{cx:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>\n\
                 <text x=\"{cx:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>\n",
                cx - bar_w / 2.0,
                (HEIGHT - MARGIN_B - top).max(0.0),
                HEIGHT - MARGIN_B + 20.0,
                escape(label),
                top - 6.0,
                fmt2(*value),
            );
        }
        out.push_str("</svg>\n");
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_chart_is_byte_stable() {
        let chart = LineChart {
            title: "t".into(),
            x_label: "x".into(),
            y_label: "y".into(),
            series: vec![Series {
                name: "a".into(),
                points: vec![(0.0, 0.1), (0.5, 0.4), (1.0, 0.2)],
                err: Some(vec![0.05, 0.02, 0.07]),
            }],
            y_range: Some((0.0, 1.0)),
            x_ticks: None,
        };
        assert_eq!(chart.to_svg(), chart.to_svg());
        assert!(chart.to_svg().starts_with("<svg "));
        assert!(chart.to_svg().ends_with("</svg>\n"));
    }

    #[test]
    fn explicit_x_ticks_appear_once_each() {
        let chart = LineChart {
            title: "t".into(),
            x_label: "x".into(),
            y_label: "y".into(),
            series: vec![Series {
                name: "a".into(),
                points: vec![(0.0, 0.1), (20.0, 0.4), (60.0, 0.2), (100.0, 0.9)],
                err: None,
            }],
            y_range: Some((0.0, 1.0)),
            x_ticks: Some(vec![0.0, 20.0, 60.0, 100.0]),
        };
        let svg = chart.to_svg();
        assert_eq!(svg.matches(">20.00</text>").count(), 1);
        assert_eq!(svg.matches(">60.00</text>").count(), 1);
    }

    #[test]
    fn bar_chart_is_byte_stable() {
        let chart = BarChart {
            title: "counts".into(),
            y_label: "n".into(),
            bars: vec![("one".into(), 3.0), ("two".into(), 5.0)],
            y_range: None,
        };
        assert_eq!(chart.to_svg(), chart.to_svg());
        assert!(chart.to_svg().contains("<rect"));
    }

    #[test]
    fn escapes_markup() {
        assert_eq!(escape("a<b&c>"), "a&lt;b&amp;c&gt;");
    }
}
