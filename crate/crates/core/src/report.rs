//! Results table (CSV) and faceted metric plots (SVG).

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{round3, ParamFamily, RecoveryMetrics};

pub const RESULTS_HEADER: [&str; 5] = ["Test_Length", "Dimension", "Parameters", "Bias", "RMSE"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub test_length: usize,
    /// Interdimensional correlation level.
    pub rho: f64,
    pub family: ParamFamily,
    pub bias: f64,
    pub rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ResultsTable {
    pub rows: Vec<ResultRow>,
}

impl ResultsTable {
    /// One row per family per condition, values rounded to three decimals.
    /// `conditions` pairs each condition's `(test_length, rho)` with its
    /// aggregated metrics, in report order.
    pub fn from_metrics<'a>(conditions: impl IntoIterator<Item = ((usize, f64), &'a RecoveryMetrics)>) -> Self {
        let rows = conditions
            .into_iter()
            .flat_map(|((test_length, rho), metrics)| {
                metrics.families.iter().map(move |f| ResultRow {
                    test_length,
                    rho,
                    family: f.family,
                    bias: f.reported_bias(),
                    rmse: f.reported_rmse(),
                })
            })
            .collect();
        ResultsTable { rows }
    }

    pub fn test_lengths(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.test_length).collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn rhos(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.rows.iter().map(|r| r.rho).collect();
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    }

    pub fn families(&self) -> Vec<ParamFamily> {
        self.rows.iter().map(|r| r.family).collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn get(&self, test_length: usize, rho: f64, family: ParamFamily) -> Option<&ResultRow> {
        self.rows
            .iter()
            .find(|r| r.test_length == test_length && r.rho == rho && r.family == family)
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = RESULTS_HEADER.join(",");
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{:.3},{:.3}",
                r.test_length,
                r.rho,
                r.family,
                round3(r.bias),
                round3(r.rmse)
            );
        }
        out
    }

    pub fn parse_csv(text: &str) -> std::result::Result<Self, String> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let header = reader.headers().map_err(|e| e.to_string())?;
        if header.iter().ne(RESULTS_HEADER.iter().copied()) {
            return Err(format!("unexpected header {:?}", header.iter().collect::<Vec<_>>()));
        }
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| e.to_string())?;
            let field = |i: usize| record.get(i).ok_or_else(|| format!("missing column {}", RESULTS_HEADER[i]));
            let num = |i: usize| -> std::result::Result<f64, String> {
                field(i)?.parse().map_err(|_| format!("bad {} value", RESULTS_HEADER[i]))
            };
            rows.push(ResultRow {
                test_length: field(0)?.parse().map_err(|_| "bad Test_Length".to_string())?,
                rho: num(1)?,
                family: ParamFamily::parse(field(2)?).ok_or_else(|| format!("bad parameter `{}`", record.get(2).unwrap_or("")))?,
                bias: num(3)?,
                rmse: num(4)?,
            });
        }
        Ok(ResultsTable { rows })
    }
}

pub fn write_results_csv(table: &ResultsTable, path: &Path) -> Result<()> {
    fs::write(path, table.to_csv_string()).map_err(|e| Error::io(path, e))
}

pub fn read_results_csv(path: &Path) -> Result<ResultsTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ResultsTable::parse_csv(&text).map_err(|e| Error::format(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    Bias,
    Rmse,
}

impl Metric {
    pub fn label(&self) -> &'static str {
        match self {
            Metric::Bias => "Bias",
            Metric::Rmse => "RMSE",
        }
    }

    fn value(&self, row: &ResultRow) -> f64 {
        match self {
            Metric::Bias => row.bias,
            Metric::Rmse => row.rmse,
        }
    }

    fn caption(&self) -> &'static str {
        match self {
            Metric::Bias => "Average bias for item parameters",
            Metric::Rmse => "Average RMSE for item parameters",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Marker {
    Square,
    Circle,
    Triangle,
    Diamond,
    OpenSquare,
    OpenDiamond,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotSpec {
    pub metric: Metric,
    /// Fixed y-range; `None` pads the data range by 10%.
    pub y_limits: Option<(f64, f64)>,
    pub width_cm: f64,
    pub height_cm: f64,
    pub dpi: f64,
    /// Series colors, cycled in family order.
    pub colors: Vec<String>,
    pub markers: Vec<Marker>,
}

impl PlotSpec {
    fn base(metric: Metric, y_limits: Option<(f64, f64)>) -> Self {
        PlotSpec {
            metric,
            y_limits,
            width_cm: 25.0,
            height_cm: 12.0,
            dpi: 300.0,
            colors: ["black", "red", "green", "blue", "purple", "cyan"]
                .into_iter()
                .map(String::from)
                .collect(),
            markers: vec![
                Marker::Square,
                Marker::Circle,
                Marker::Triangle,
                Marker::Diamond,
                Marker::OpenSquare,
                Marker::OpenDiamond,
            ],
        }
    }

    /// Bias figure with the y-range fixed to [-0.01, 0.01].
    pub fn bias() -> Self {
        Self::base(Metric::Bias, Some((-0.01, 0.01)))
    }

    /// RMSE figure with a padded data-driven y-range.
    pub fn rmse() -> Self {
        Self::base(Metric::Rmse, None)
    }

    /// Canvas size in pixels.
    pub fn canvas(&self) -> (u32, u32) {
        let px = |cm: f64| (cm / 2.54 * self.dpi).round() as u32;
        (px(self.width_cm), px(self.height_cm))
    }
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn nice_step(range: f64, target: usize) -> f64 {
    let raw = range / target as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let norm = raw / mag;
    let nice = if norm < 1.5 {
        1.0
    } else if norm < 3.0 {
        2.0
    } else if norm < 7.0 {
        5.0
    } else {
        10.0
    };
    nice * mag
}

fn marker_path(marker: Marker, size: f64) -> (String, bool) {
    let h = size / 2.0;
    match marker {
        Marker::Square | Marker::OpenSquare => (
            format!("M{:.2},{:.2}h{:.2}v{:.2}h{:.2}Z", -h, -h, size, size, -size),
            marker == Marker::Square,
        ),
        Marker::Circle => (
            format!("M{:.2},0a{h:.2},{h:.2} 0 1,0 {:.2},0a{h:.2},{h:.2} 0 1,0 {:.2},0Z", -h, size, -size),
            true,
        ),
        Marker::Triangle => (
            format!("M0,{:.2}L{:.2},{:.2}L{:.2},{:.2}Z", -h * 1.15, h * 1.15, h * 0.85, -h * 1.15, h * 0.85),
            true,
        ),
        Marker::Diamond | Marker::OpenDiamond => (
            format!("M0,{:.2}L{:.2},0L0,{:.2}L{:.2},0Z", -h * 1.2, h * 1.2, h * 1.2, -h * 1.2),
            marker == Marker::Diamond,
        ),
    }
}

/// Renders one panel per test length, correlation levels on the x axis and
/// one point-and-line series per parameter family.
pub fn render_metric_plot(table: &ResultsTable, spec: &PlotSpec) -> Result<String> {
    let facets = table.test_lengths();
    let levels = table.rhos();
    let families = table.families();
    if facets.is_empty() {
        return Err(Error::arg("results table is empty"));
    }
    let mut missing = Vec::new();
    for &tl in &facets {
        for &rho in &levels {
            for &f in &families {
                if table.get(tl, rho, f).is_none() {
                    missing.push(format!("(Test_Length={tl}, Dimension={rho}, Parameters={f})"));
                }
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::arg(format!("results table lacks {}", missing.join(", "))));
    }
    if spec.colors.is_empty() || spec.markers.is_empty() {
        return Err(Error::arg("plot needs at least one color and one marker"));
    }

    let (y_lo, y_hi) = match spec.y_limits {
        Some(lim) => lim,
        None => {
            let vals = table.rows.iter().map(|r| spec.metric.value(r));
            let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            let pad = if hi > lo { 0.1 * (hi - lo) } else { 0.1 * hi.abs().max(1e-3) };
            (lo - pad, hi + pad)
        }
    };
    if !(y_lo.is_finite() && y_hi.is_finite() && y_lo < y_hi) {
        return Err(Error::arg(format!("invalid y-limits ({y_lo}, {y_hi})")));
    }

    let (width, height) = spec.canvas();
    let (w, h) = (width as f64, height as f64);
    let scale = h / 1417.0;
    let font = |pt: f64| pt * 4.1 * scale;
    let left = 260.0 * scale;
    let right = 420.0 * scale;
    let top = 40.0 * scale;
    let strip = 90.0 * scale;
    let bottom = 200.0 * scale;
    let gap = 40.0 * scale;
    let n_panels = facets.len() as f64;
    let panel_w = (w - left - right - gap * (n_panels - 1.0)) / n_panels;
    let panel_top = top + strip;
    let panel_h = h - panel_top - bottom;

    let y_px = |v: f64| panel_top + panel_h * (y_hi - v) / (y_hi - y_lo);
    // Discrete x scale with 0.6 units of padding either side.
    let n_levels = levels.len() as f64;
    let x_px = |panel_x: f64, i: usize| panel_x + panel_w * (i as f64 + 0.6) / (n_levels - 1.0 + 1.2);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="Helvetica, Arial, sans-serif">"#
    );
    let _ = writeln!(svg, "<title>{}</title>", escape(spec.metric.caption()));
    let _ = writeln!(svg, r#"<rect width="{width}" height="{height}" fill="white"/>"#);

    let step = nice_step(y_hi - y_lo, 5);
    let first_tick = (y_lo / step).ceil() as i64;
    let last_tick = (y_hi / step).floor() as i64;
    let decimals = (-step.log10().floor()).max(0.0) as usize;

    let mut defs = String::from("<defs>\n");
    for p in 0..facets.len() {
        let px = left + p as f64 * (panel_w + gap);
        let _ = writeln!(
            defs,
            r#"<clipPath id="clip-{p}"><rect x="{px:.2}" y="{panel_top:.2}" width="{panel_w:.2}" height="{panel_h:.2}"/></clipPath>"#
        );
    }
    defs.push_str("</defs>\n");
    svg.push_str(&defs);

    for (p, &tl) in facets.iter().enumerate() {
        let px = left + p as f64 * (panel_w + gap);
        let _ = writeln!(svg, r#"<g class="panel" data-test-length="{tl}">"#);
        let _ = writeln!(
            svg,
            r##"<rect class="strip" x="{px:.2}" y="{top:.2}" width="{panel_w:.2}" height="{strip:.2}" fill="#d9d9d9"/>"##
        );
        let _ = writeln!(
            svg,
            r#"<text class="facet-label" x="{:.2}" y="{:.2}" font-size="{:.1}" font-weight="bold" text-anchor="middle" dominant-baseline="middle">Test Length = {tl}</text>"#,
            px + panel_w / 2.0,
            top + strip / 2.0,
            font(16.0)
        );
        let _ = writeln!(
            svg,
            r##"<rect class="panel-background" x="{px:.2}" y="{panel_top:.2}" width="{panel_w:.2}" height="{panel_h:.2}" fill="#ebebeb"/>"##
        );
        for t in first_tick..=last_tick {
            let v = t as f64 * step;
            let y = y_px(v);
            let _ = writeln!(
                svg,
                r#"<line class="grid" x1="{px:.2}" x2="{:.2}" y1="{y:.2}" y2="{y:.2}" stroke="white" stroke-width="{:.2}"/>"#,
                px + panel_w,
                2.0 * scale
            );
            if p == 0 {
                let label = format!("{:.*}", decimals, v);
                let label = if label.trim_start_matches('-').chars().all(|c| c == '0' || c == '.') {
                    label.trim_start_matches('-').to_string()
                } else {
                    label
                };
                let _ = writeln!(
                    svg,
                    r#"<text class="y-tick" x="{:.2}" y="{y:.2}" font-size="{:.1}" text-anchor="end" dominant-baseline="middle">{label}</text>"#,
                    px - 12.0 * scale,
                    font(16.0)
                );
            }
        }
        for (i, rho) in levels.iter().enumerate() {
            let x = x_px(px, i);
            let _ = writeln!(
                svg,
                r#"<line class="grid" x1="{x:.2}" x2="{x:.2}" y1="{panel_top:.2}" y2="{:.2}" stroke="white" stroke-width="{:.2}"/>"#,
                panel_top + panel_h,
                2.0 * scale
            );
            let _ = writeln!(
                svg,
                r#"<text class="x-tick" x="{x:.2}" y="{:.2}" font-size="{:.1}" text-anchor="middle">{rho}</text>"#,
                panel_top + panel_h + 60.0 * scale,
                font(16.0)
            );
        }

        let _ = writeln!(svg, r#"<g clip-path="url(#clip-{p})">"#);
        for (s, &family) in families.iter().enumerate() {
            let color = &spec.colors[s % spec.colors.len()];
            let marker = spec.markers[s % spec.markers.len()];
            let pts: Vec<(f64, f64, f64)> = levels
                .iter()
                .enumerate()
                .map(|(i, &rho)| {
                    let v = spec.metric.value(table.get(tl, rho, family).expect("checked above"));
                    (x_px(px, i), y_px(v), v)
                })
                .collect();
            let _ = writeln!(svg, r#"<g class="series" data-series="{family}">"#);
            if pts.len() > 1 {
                let d: Vec<String> = pts.iter().map(|(x, y, _)| format!("{x:.3},{y:.3}")).collect();
                let _ = writeln!(
                    svg,
                    r#"<polyline fill="none" stroke="{}" stroke-width="{:.2}" points="{}"/>"#,
                    escape(color),
                    4.0 * scale,
                    d.join(" ")
                );
            }
            let (path, filled) = marker_path(marker, 36.0 * scale);
            for (x, y, v) in &pts {
                let fill = if filled { escape(color) } else { "white".to_string() };
                let _ = writeln!(
                    svg,
                    r#"<path class="point" data-value="{v}" transform="translate({x:.3},{y:.3})" d="{path}" fill="{fill}" stroke="{}" stroke-width="{:.2}"/>"#,
                    escape(color),
                    3.0 * scale
                );
            }
            svg.push_str("</g>\n");
        }
        svg.push_str("</g>\n</g>\n");
    }

    // Axis titles.
    let plot_mid = left + (w - left - right) / 2.0;
    let _ = writeln!(
        svg,
        r#"<text class="axis-title" x="{plot_mid:.2}" y="{:.2}" font-size="{:.1}" text-anchor="middle">Interdimensional Correlation</text>"#,
        h - 50.0 * scale,
        font(18.0)
    );
    let y_mid = panel_top + panel_h / 2.0;
    let _ = writeln!(
        svg,
        r#"<text class="axis-title" x="{:.2}" y="{y_mid:.2}" font-size="{:.1}" text-anchor="middle" transform="rotate(-90 {:.2} {y_mid:.2})">{}</text>"#,
        60.0 * scale,
        font(18.0),
        60.0 * scale,
        spec.metric.label()
    );

    // Legend.
    let lx = w - right + 50.0 * scale;
    let ly = panel_top + panel_h / 2.0 - (families.len() as f64 * 90.0 * scale) / 2.0;
    let _ = writeln!(svg, r#"<g class="legend">"#);
    let _ = writeln!(
        svg,
        r#"<text class="legend-title" x="{lx:.2}" y="{:.2}" font-size="{:.1}">Parameters</text>"#,
        ly - 30.0 * scale,
        font(18.0)
    );
    for (s, family) in families.iter().enumerate() {
        let color = escape(&spec.colors[s % spec.colors.len()]);
        let marker = spec.markers[s % spec.markers.len()];
        let (path, filled) = marker_path(marker, 36.0 * scale);
        let cy = ly + (s as f64 + 0.5) * 90.0 * scale;
        let fill = if filled { color.clone() } else { "white".to_string() };
        let _ = writeln!(svg, r#"<g class="legend-entry" data-series="{family}">"#);
        let _ = writeln!(
            svg,
            r#"<line x1="{lx:.2}" x2="{:.2}" y1="{cy:.2}" y2="{cy:.2}" stroke="{color}" stroke-width="{:.2}"/>"#,
            lx + 80.0 * scale,
            4.0 * scale
        );
        let _ = writeln!(
            svg,
            r#"<path transform="translate({:.2},{cy:.2})" d="{path}" fill="{fill}" stroke="{color}" stroke-width="{:.2}"/>"#,
            lx + 40.0 * scale,
            3.0 * scale
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{cy:.2}" font-size="{:.1}" dominant-baseline="middle">{family}</text>"#,
            lx + 110.0 * scale,
            font(16.0)
        );
        svg.push_str("</g>\n");
    }
    svg.push_str("</g>\n</svg>\n");
    Ok(svg)
}
