//! Minimal static SVG charts.

use std::fmt::Write;

use fedbench_core::metrics::mean;

use crate::experiment::Results;

const W: f64 = 640.0;
const H: f64 = 480.0;
const MARGIN: f64 = 60.0;
const LEGEND_W: f64 = 180.0;

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

struct Canvas {
    body: String,
    x: (f64, f64),
    y: (f64, f64),
}

impl Canvas {
    fn new(title: &str, x: (f64, f64), y: (f64, f64), x_label: &str, y_label: &str) -> Self {
        let mut c = Self {
            body: String::new(),
            x,
            y,
        };
        let (l, r, t, b) = (MARGIN, W - LEGEND_W, MARGIN, H - MARGIN);
        let _ = write!(
            c.body,
            r##"<rect x="{l}" y="{t}" width="{}" height="{}" fill="none" stroke="#333"/>"##,
            r - l,
            b - t
        );
        let _ = write!(
            c.body,
            r#"<text x="{}" y="30" text-anchor="middle" font-size="16">{}</text>"#,
            (l + r) / 2.0,
            escape(title)
        );
        let _ = write!(
            c.body,
            r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{}</text>"#,
            (l + r) / 2.0,
            H - 15.0,
            escape(x_label)
        );
        let _ = write!(
            c.body,
            r#"<text x="18" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 18 {})">{}</text>"#,
            (t + b) / 2.0,
            (t + b) / 2.0,
            escape(y_label)
        );
        for i in 0..=4 {
            let f = i as f64 / 4.0;
            let yv = y.0 + f * (y.1 - y.0);
            let _ = write!(
                c.body,
                r#"<text x="{}" y="{:.2}" text-anchor="end" font-size="10">{}</text>"#,
                l - 4.0,
                c.py(yv) + 3.0,
                tick(yv)
            );
        }
        c
    }

    fn px(&self, v: f64) -> f64 {
        MARGIN + (v - self.x.0) / (self.x.1 - self.x.0) * (W - LEGEND_W - MARGIN)
    }

    fn py(&self, v: f64) -> f64 {
        H - MARGIN - (v - self.y.0) / (self.y.1 - self.y.0) * (H - 2.0 * MARGIN)
    }

    fn polyline(&mut self, pts: &[(f64, f64)], color: &str, dash: bool) {
        let mut d = String::new();
        for &(x, y) in pts {
            let _ = write!(d, "{:.2},{:.2} ", self.px(x), self.py(y));
        }
        let _ = write!(
            self.body,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"{}/>"#,
            d.trim_end(),
            if dash { r#" stroke-dasharray="4 3""# } else { "" }
        );
    }

    fn legend(&mut self, entries: &[(String, &str)]) {
        let x = W - LEGEND_W + 10.0;
        for (i, (label, color)) in entries.iter().enumerate() {
            let y = MARGIN + 14.0 * i as f64;
            let _ = write!(
                self.body,
                r#"<rect x="{x}" y="{}" width="10" height="10" fill="{color}"/><text x="{}" y="{}" font-size="10">{}</text>"#,
                y,
                x + 14.0,
                y + 9.0,
                escape(label)
            );
        }
    }

    fn finish(self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\">\n{}\n</svg>\n",
            self.body
        )
    }
}

fn tick(v: f64) -> String {
    format!("{v:.2}")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// ROC curve of run 0 on one test site, one line per model.
pub fn roc_overlay(results: &Results, site: usize) -> Option<String> {
    let mut c = Canvas::new(
        &format!("ROC, test set of site {}", site + 1),
        (0.0, 1.0),
        (0.0, 1.0),
        "false positive rate",
        "true positive rate",
    );
    c.polyline(&[(0.0, 0.0), (1.0, 1.0)], "#bbbbbb", true);
    let mut legend = Vec::new();
    for (m, model) in results.models.iter().enumerate() {
        let Some(Ok(e)) = results.outcomes.first().map(|row| &row[m]) else {
            continue;
        };
        let Some(curve) = e.roc.as_ref().and_then(|r| r.get(site)).filter(|c| !c.is_empty()) else {
            continue;
        };
        let color = PALETTE[m % PALETTE.len()];
        c.polyline(curve, color, !model.is_protocol());
        let label = match e.auc[site] {
            Some(a) => format!("{} ({a:.3})", model.label),
            None => model.label.clone(),
        };
        legend.push((label, color));
    }
    if legend.is_empty() {
        return None;
    }
    c.legend(&legend);
    Some(c.finish())
}

/// Mean relative bias per informative coefficient, one marker series per
/// model, with a bar spanning ±1 SD over runs.
pub fn bias_summary(results: &Results) -> Option<String> {
    let s = results.truth.as_ref()?.len();
    let mut series = Vec::new();
    for m in 0..results.models.len() {
        let runs = results.relative_bias(m);
        if runs.is_empty() {
            continue;
        }
        let stats: Vec<(f64, f64)> = (0..s)
            .map(|j| {
                let v: Vec<f64> = runs.iter().map(|(_, b)| b[j]).collect();
                let mu = mean(&v);
                let sd = if v.len() > 1 {
                    (v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
                } else {
                    0.0
                };
                (mu, sd)
            })
            .collect();
        series.push((m, stats));
    }
    if series.is_empty() {
        return None;
    }
    let (mut lo, mut hi) = (0.0f64, 0.0f64);
    for (_, st) in &series {
        for &(mu, sd) in st {
            lo = lo.min(mu - sd);
            hi = hi.max(mu + sd);
        }
    }
    if !(lo.is_finite() && hi.is_finite()) {
        return None;
    }
    let pad = ((hi - lo) * 0.05).max(1e-3);
    let mut c = Canvas::new(
        "Relative bias of informative coefficients",
        (0.0, s as f64),
        (lo - pad, hi + pad),
        "coefficient",
        "relative bias",
    );
    c.polyline(&[(0.0, 0.0), (s as f64, 0.0)], "#bbbbbb", true);
    for j in 0..s {
        let _ = write!(
            c.body,
            r#"<text x="{:.2}" y="{}" text-anchor="middle" font-size="10">{}</text>"#,
            c.px(j as f64 + 0.5),
            H - MARGIN + 14.0,
            escape(&results.coefficient_names[j + 1])
        );
    }
    let k = series.len() as f64;
    let mut legend = Vec::new();
    for (i, (m, stats)) in series.iter().enumerate() {
        let color = PALETTE[m % PALETTE.len()];
        for (j, &(mu, sd)) in stats.iter().enumerate() {
            let x = c.px(j as f64 + (i as f64 + 1.0) / (k + 1.0));
            let _ = write!(
                c.body,
                r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="{color}"/><circle cx="{x:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                c.py(mu - sd),
                c.py(mu + sd),
                c.py(mu)
            );
        }
        legend.push((results.models[*m].label.clone(), color));
    }
    c.legend(&legend);
    Some(c.finish())
}

/// Every figure that has data, as `(file name, svg)`.
pub fn figures(results: &Results) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = (0..results.n_sites)
        .filter_map(|j| roc_overlay(results, j).map(|svg| (format!("roc_site{}.svg", j + 1), svg)))
        .collect();
    if let Some(svg) = bias_summary(results) {
        out.push(("bias.svg".into(), svg));
    }
    out
}
