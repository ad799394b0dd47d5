//! Bare-bones SVG charts: axes, polylines, bars, horizontal rules, a legend.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 45.0;

pub const PALETTE: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#7f7f7f"];

pub struct Chart {
    x: (f64, f64),
    y: (f64, f64),
    body: String,
    legend: Vec<(String, String)>,
    title: String,
    x_label: String,
    y_label: String,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn widen(lo: f64, hi: f64) -> (f64, f64) {
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, lo + 0.5)
    }
}

impl Chart {
    pub fn new(title: &str, x: (f64, f64), y: (f64, f64)) -> Self {
        Chart {
            x: widen(x.0, x.1),
            y: widen(y.0, y.1),
            body: String::new(),
            legend: Vec::new(),
            title: title.to_string(),
            x_label: String::new(),
            y_label: String::new(),
        }
    }

    pub fn labels(mut self, x: &str, y: &str) -> Self {
        self.x_label = x.to_string();
        self.y_label = y.to_string();
        self
    }

    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x.0) / (self.x.1 - self.x.0) * (W - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        H - BOTTOM - (y - self.y.0) / (self.y.1 - self.y.0) * (H - TOP - BOTTOM)
    }

    pub fn line(&mut self, pts: &[(f64, f64)], color: &str, dashed: bool, label: Option<&str>) {
        if pts.is_empty() {
            return;
        }
        let coords: Vec<String> = pts
            .iter()
            .map(|&(x, y)| format!("{:.1},{:.1}", self.px(x), self.py(y)))
            .collect();
        let dash = if dashed { " stroke-dasharray=\"6 4\"" } else { "" };
        let _ = writeln!(
            self.body,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"{dash} points=\"{}\"/>",
            coords.join(" ")
        );
        if let Some(l) = label {
            self.legend.push((l.to_string(), color.to_string()));
        }
    }

    pub fn hline(&mut self, y: f64, color: &str, label: Option<&str>) {
        self.line(&[(self.x.0, y), (self.x.1, y)], color, true, label);
    }

    /// Bars spanning `[lo, hi)` on x with the given heights, half-transparent
    /// so two series can overlap.
    pub fn bars(&mut self, bins: &[(f64, f64, f64)], color: &str, label: Option<&str>) {
        for &(lo, hi, h) in bins {
            let (x0, x1) = (self.px(lo), self.px(hi));
            let (y0, y1) = (self.py(h), self.py(self.y.0));
            let _ = writeln!(
                self.body,
                "<rect x=\"{x0:.1}\" y=\"{y0:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"{color}\" fill-opacity=\"0.45\"/>",
                (x1 - x0).max(0.0),
                (y1 - y0).max(0.0)
            );
        }
        if let Some(l) = label {
            self.legend.push((l.to_string(), color.to_string()));
        }
    }

    fn ticks(lo: f64, hi: f64) -> Vec<f64> {
        (0..=4).map(|i| lo + (hi - lo) * i as f64 / 4.0).collect()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"11\">"
        );
        let _ = writeln!(s, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
        let _ = writeln!(s, "<text x=\"{}\" y=\"18\" text-anchor=\"middle\" font-size=\"13\">{}</text>", W / 2.0, esc(&self.title));
        let (x0, x1, y0, y1) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
        let _ = writeln!(s, "<path d=\"M{x0},{y0} L{x0},{y1} L{x1},{y1}\" fill=\"none\" stroke=\"black\"/>");
        for t in Self::ticks(self.x.0, self.x.1) {
            let p = self.px(t);
            let _ = writeln!(s, "<text x=\"{p:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>", y1 + 15.0, crate::util::fmt_sig(t, 3));
        }
        for t in Self::ticks(self.y.0, self.y.1) {
            let p = self.py(t);
            let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>", x0 - 5.0, p + 4.0, crate::util::fmt_sig(t, 3));
        }
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>", (x0 + x1) / 2.0, H - 8.0, esc(&self.x_label));
        let _ = writeln!(
            s,
            "<text transform=\"translate(14,{}) rotate(-90)\" text-anchor=\"middle\">{}</text>",
            (y0 + y1) / 2.0,
            esc(&self.y_label)
        );
        s.push_str(&self.body);
        for (i, (label, color)) in self.legend.iter().enumerate() {
            let y = y0 + 8.0 + 16.0 * i as f64;
            let _ = writeln!(s, "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"12\" height=\"8\" fill=\"{color}\"/>", x1 - 170.0, y - 7.0);
            let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{y:.1}\">{}</text>", x1 - 152.0, esc(label));
        }
        s.push_str("</svg>\n");
        s
    }
}
