//! Minimal self-contained SVG line charts.
//!
//! Renders time series with optional quantile bands, event markers, and a
//! legend into standalone SVG documents — no external plotting dependency,
//! so the output is identical on every platform.

/// Lower/upper quantile band around a series, same length as the medians.
#[derive(Debug, Clone)]
pub struct Band {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

/// One plotted line, sampled at consecutive integer abscissas starting at 0.
#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    /// CSS color, e.g. `#d62728`.
    pub color: String,
    pub values: Vec<f64>,
    pub band: Option<Band>,
    pub dashed: bool,
}

/// A complete chart.
#[derive(Debug, Clone, Default)]
pub struct Plot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    /// Vertical dashed markers at given abscissas, with short labels.
    pub vlines: Vec<(f64, String)>,
    /// Horizontal dashed markers at given ordinates, with short labels.
    pub hlines: Vec<(f64, String)>,
}

const WIDTH: f64 = 900.0;
const HEIGHT: f64 = 520.0;
const MARGIN_LEFT: f64 = 72.0;
const MARGIN_RIGHT: f64 = 24.0;
const MARGIN_TOP: f64 = 58.0;
const MARGIN_BOTTOM: f64 = 58.0;

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Tick positions covering `[min, max]` with a 1/2/5-decade step.
fn ticks(min: f64, max: f64) -> Vec<f64> {
    let span = (max - min).max(1e-12);
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| span / s <= 6.0)
        .unwrap_or(10.0 * mag);
    let first = (min / step).ceil() * step;
    let mut out = Vec::new();
    let mut t = first;
    while t <= max + 1e-9 * span {
        // Snap values like 0.30000000000000004 back onto the grid.
        out.push((t / step).round() * step);
        t += step;
    }
    out
}

fn tick_label(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if (1e-3..1e5).contains(&a) {
        let s = format!("{v:.4}");
        let s = s.trim_end_matches('0').trim_end_matches('.');
        s.to_string()
    } else {
        format!("{v:.1e}")
    }
}

impl Plot {
    /// Render to a standalone SVG document.
    pub fn render(&self) -> String {
        let mut x_max: f64 = 1.0;
        let mut y_min = f64::INFINITY;
        let mut y_max = f64::NEG_INFINITY;
        for s in &self.series {
            x_max = x_max.max(s.values.len().saturating_sub(1) as f64);
            for v in &s.values {
                y_min = y_min.min(*v);
                y_max = y_max.max(*v);
            }
            if let Some(band) = &s.band {
                for v in band.lo.iter().chain(&band.hi) {
                    y_min = y_min.min(*v);
                    y_max = y_max.max(*v);
                }
            }
        }
        for (y, _) in &self.hlines {
            y_min = y_min.min(*y);
            y_max = y_max.max(*y);
        }
        if !y_min.is_finite() || !y_max.is_finite() {
            y_min = 0.0;
            y_max = 1.0;
        }
        if y_max - y_min < 1e-12 {
            y_min -= 1.0;
            y_max += 1.0;
        }
        let pad = 0.06 * (y_max - y_min);
        y_min -= pad;
        y_max += pad;
        let x_min = 0.0;

        let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
        let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
        let px = |x: f64| MARGIN_LEFT + (x - x_min) / (x_max - x_min).max(1e-12) * plot_w;
        let py = |y: f64| MARGIN_TOP + (y_max - y) / (y_max - y_min) * plot_h;

        let mut out = String::with_capacity(16 * 1024);
        out.push_str(&format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
             viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"Helvetica, Arial, sans-serif\">\n"
        ));
        out.push_str(&format!(
            "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n"
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"26\" font-size=\"17\" font-weight=\"bold\">{}</text>\n",
            MARGIN_LEFT,
            escape(&self.title)
        ));

        // Gridlines and axis ticks.
        for t in ticks(y_min, y_max) {
            let y = py(t);
            out.push_str(&format!(
                "<line x1=\"{:.2}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" \
                 stroke=\"#dddddd\" stroke-width=\"1\"/>\n",
                MARGIN_LEFT,
                WIDTH - MARGIN_RIGHT
            ));
            out.push_str(&format!(
                "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"12\" text-anchor=\"end\">{}</text>\n",
                MARGIN_LEFT - 8.0,
                y + 4.0,
                tick_label(t)
            ));
        }
        for t in ticks(x_min, x_max) {
            let x = px(t);
            out.push_str(&format!(
                "<line x1=\"{x:.2}\" y1=\"{:.2}\" x2=\"{x:.2}\" y2=\"{:.2}\" \
                 stroke=\"#eeeeee\" stroke-width=\"1\"/>\n",
                MARGIN_TOP,
                HEIGHT - MARGIN_BOTTOM
            ));
            out.push_str(&format!(
                "<text x=\"{x:.2}\" y=\"{:.2}\" font-size=\"12\" text-anchor=\"middle\">{}</text>\n",
                HEIGHT - MARGIN_BOTTOM + 18.0,
                tick_label(t)
            ));
        }

        // Event markers.
        for (x, label) in &self.vlines {
            let xp = px(*x);
            out.push_str(&format!(
                "<line x1=\"{xp:.2}\" y1=\"{:.2}\" x2=\"{xp:.2}\" y2=\"{:.2}\" \
                 stroke=\"#888888\" stroke-width=\"1\" stroke-dasharray=\"5 4\"/>\n",
                MARGIN_TOP,
                HEIGHT - MARGIN_BOTTOM
            ));
            out.push_str(&format!(
                "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\" fill=\"#555555\">{}</text>\n",
                xp + 4.0,
                MARGIN_TOP + 12.0,
                escape(label)
            ));
        }
        for (y, label) in &self.hlines {
            let yp = py(*y);
            out.push_str(&format!(
                "<line x1=\"{:.2}\" y1=\"{yp:.2}\" x2=\"{:.2}\" y2=\"{yp:.2}\" \
                 stroke=\"#888888\" stroke-width=\"1\" stroke-dasharray=\"5 4\"/>\n",
                MARGIN_LEFT,
                WIDTH - MARGIN_RIGHT
            ));
            out.push_str(&format!(
                "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\" fill=\"#555555\" \
                 text-anchor=\"end\">{}</text>\n",
                WIDTH - MARGIN_RIGHT - 4.0,
                yp - 4.0,
                escape(label)
            ));
        }

        // Quantile bands first so every median line stays on top.
        for s in &self.series {
            if let Some(band) = &s.band {
                let n = s.values.len().min(band.lo.len()).min(band.hi.len());
                if n >= 2 {
                    let mut points = String::new();
                    for (i, hi) in band.hi.iter().enumerate().take(n) {
                        points.push_str(&format!("{:.2},{:.2} ", px(i as f64), py(*hi)));
                    }
                    for i in (0..n).rev() {
                        points.push_str(&format!("{:.2},{:.2} ", px(i as f64), py(band.lo[i])));
                    }
                    out.push_str(&format!(
                        "<polygon points=\"{}\" fill=\"{}\" fill-opacity=\"0.15\" stroke=\"none\"/>\n",
                        points.trim_end(),
                        s.color
                    ));
                }
            }
        }
        for s in &self.series {
            if s.values.len() < 2 {
                continue;
            }
            let mut points = String::new();
            for (i, v) in s.values.iter().enumerate() {
                points.push_str(&format!("{:.2},{:.2} ", px(i as f64), py(*v)));
            }
            let dash = if s.dashed { " stroke-dasharray=\"6 4\"" } else { "" };
            out.push_str(&format!(
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"2\"{dash}/>\n",
                points.trim_end(),
                s.color
            ));
        }

        // Axes frame.
        out.push_str(&format!(
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{plot_w:.2}\" height=\"{plot_h:.2}\" \
             fill=\"none\" stroke=\"#333333\" stroke-width=\"1\"/>\n",
            MARGIN_LEFT, MARGIN_TOP
        ));
        out.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"13\" text-anchor=\"middle\">{}</text>\n",
            MARGIN_LEFT + plot_w / 2.0,
            HEIGHT - 14.0,
            escape(&self.x_label)
        ));
        out.push_str(&format!(
            "<text x=\"18\" y=\"{:.2}\" font-size=\"13\" text-anchor=\"middle\" \
             transform=\"rotate(-90 18 {:.2})\">{}</text>\n",
            MARGIN_TOP + plot_h / 2.0,
            MARGIN_TOP + plot_h / 2.0,
            escape(&self.y_label)
        ));

        // Legend, right-aligned above the frame.
        let mut legend_x = WIDTH - MARGIN_RIGHT;
        for s in self.series.iter().rev() {
            let width = 30.0 + 7.5 * s.label.len() as f64;
            legend_x -= width;
            let y = 40.0;
            out.push_str(&format!(
                "<line x1=\"{legend_x:.2}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" \
                 stroke=\"{}\" stroke-width=\"3\"/>\n",
                legend_x + 22.0,
                s.color
            ));
            out.push_str(&format!(
                "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"12\">{}</text>\n",
                legend_x + 27.0,
                y + 4.0,
                escape(&s.label)
            ));
        }

        out.push_str("</svg>\n");
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_plot() -> Plot {
        Plot {
            title: "response".into(),
            x_label: "step".into(),
            y_label: "value".into(),
            series: vec![
                Series {
                    label: "planner".into(),
                    color: "#d62728".into(),
                    values: vec![0.0, 1.0, 4.0, 2.0],
                    band: Some(Band { lo: vec![-0.5, 0.5, 3.0, 1.0], hi: vec![0.5, 1.5, 5.0, 3.0] }),
                    dashed: false,
                },
                Series {
                    label: "baseline".into(),
                    color: "#1f77b4".into(),
                    values: vec![0.0, 2.0, 3.0, 1.0],
                    band: None,
                    dashed: false,
                },
            ],
            vlines: vec![(2.0, "fault".into())],
            hlines: vec![(4.5, "limit".into())],
        }
    }

    #[test]
    fn rendered_chart_contains_each_series_and_marker() {
        let svg = sample_plot().render();
        assert!(svg.starts_with("<svg"));
        assert!(svg.ends_with("</svg>\n"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert_eq!(svg.matches("<polygon").count(), 1);
        assert!(svg.contains("#d62728"));
        assert!(svg.contains("#1f77b4"));
        assert!(svg.contains("fault"));
        assert!(svg.contains("limit"));
        assert!(svg.contains("stroke-dasharray"));
    }

    #[test]
    fn flat_series_still_produces_a_usable_y_range() {
        let plot = Plot {
            title: "constant".into(),
            series: vec![Series {
                label: "c".into(),
                color: "#000000".into(),
                values: vec![2.0; 5],
                band: None,
                dashed: false,
            }],
            ..Plot::default()
        };
        let svg = plot.render();
        assert!(svg.contains("<polyline"));
        // The padded range around a constant series brackets it by ±1.
        assert!(svg.contains(">1<") || svg.contains(">1.5<"));
        assert!(svg.contains(">3<") || svg.contains(">2.5<"));
    }

    #[test]
    fn labels_are_xml_escaped() {
        let plot = Plot {
            title: "a < b & c".into(),
            series: vec![],
            ..Plot::default()
        };
        let svg = plot.render();
        assert!(svg.contains("a &lt; b &amp; c"));
        assert!(!svg.contains("a < b"));
    }

    #[test]
    fn tick_steps_use_round_decades() {
        let t = ticks(0.0, 100.0);
        assert!(t.contains(&0.0) && t.contains(&20.0) && t.contains(&100.0));
        let t = ticks(-0.25, 0.25);
        assert!(t.iter().any(|v| (v - 0.1).abs() < 1e-12));
        assert!(t.len() >= 3 && t.len() <= 7);
    }
}
