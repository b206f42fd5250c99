//! Predictive-distribution plots: Gaussian KDE curves with vertical markers
//! for the predicted and actual values, rendered as standalone SVG.

use std::fmt::{self, Write as _};
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mdn::{mdn_forward, mdn_sample, predict, MdnParams, PredictionStrategy};
use crate::numerics::{Matrix, RngStream};
use crate::svgp::{SvgpPredictor, SvgpState};

pub const DEFAULT_GRID_POINTS: usize = 200;
pub const DEFAULT_PLOT_SAMPLES: usize = 1000;
pub const PANEL_WIDTH: u32 = 640;
pub const PANEL_HEIGHT: u32 = 480;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    /// `h = sample_std · n^(−1/5)`
    Scott,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KdeConfig {
    pub bandwidth: Bandwidth,
    pub grid_points: usize,
}

impl Default for KdeConfig {
    fn default() -> Self {
        Self { bandwidth: Bandwidth::Scott, grid_points: DEFAULT_GRID_POINTS }
    }
}

/// Gaussian kernel density estimate evaluated on a uniform grid spanning
/// `[min − 3h, max + 3h]`.
///
/// A zero sample spread falls back to a fixed bandwidth of
/// `1e-3 · max(1, |mean|)`.
pub fn gaussian_kde(samples: &[f64], config: &KdeConfig) -> Result<Vec<(f64, f64)>> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::BadConfig(format!("KDE needs at least 2 samples, got {n}")));
    }
    if config.grid_points < 2 {
        return Err(Error::BadConfig("KDE grid needs at least 2 points".into()));
    }
    if samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::BadConfig("KDE samples must be finite".into()));
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let std = (samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt();
    let h = match config.bandwidth {
        Bandwidth::Fixed(h) if h > 0.0 && h.is_finite() => h,
        Bandwidth::Fixed(h) => return Err(Error::BadConfig(format!("bandwidth {h} must be positive"))),
        Bandwidth::Scott if std > 0.0 => std * (n as f64).powf(-0.2),
        Bandwidth::Scott => 1e-3 * mean.abs().max(1.0),
    };
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min) - 3.0 * h;
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 3.0 * h;
    let step = (hi - lo) / (config.grid_points - 1) as f64;
    let norm = 1.0 / (n as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    // kernels beyond 9h contribute less than 1e-17 of their peak
    let cutoff = 9.0 * h;
    let curve = (0..config.grid_points)
        .map(|i| {
            let x = if i + 1 == config.grid_points { hi } else { lo + step * i as f64 };
            let start = sorted.partition_point(|&s| s < x - cutoff);
            let end = sorted.partition_point(|&s| s <= x + cutoff);
            let density: f64 =
                sorted[start..end].iter().map(|s| (-0.5 * ((x - s) / h).powi(2)).exp()).sum();
            (x, density * norm)
        })
        .collect();
    Ok(curve)
}

/// Trapezoidal integral of a curve.
pub fn trapezoid(curve: &[(f64, f64)]) -> f64 {
    curve.windows(2).map(|w| 0.5 * (w[1].0 - w[0].0) * (w[0].1 + w[1].1)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VLineLabel {
    Predicted,
    Actual,
}

impl fmt::Display for VLineLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VLineLabel::Predicted => "predicted",
            VLineLabel::Actual => "actual",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VLine {
    pub x: f64,
    pub label: VLineLabel,
}

/// A single density panel.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotSpec {
    density_curve: Vec<(f64, f64)>,
    vlines: Vec<VLine>,
    title: String,
    width: u32,
    height: u32,
}

impl PlotSpec {
    pub fn new(density_curve: Vec<(f64, f64)>, vlines: Vec<VLine>, title: impl Into<String>) -> Result<Self> {
        if density_curve.len() < 2 {
            return Err(Error::BadPlot("density curve needs at least 2 points".into()));
        }
        if density_curve.iter().any(|(x, y)| !x.is_finite() || !y.is_finite() || *y < 0.0) {
            return Err(Error::BadPlot("density values must be finite and nonnegative".into()));
        }
        if density_curve.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            return Err(Error::BadPlot("curve x values must be strictly increasing".into()));
        }
        if vlines.iter().any(|v| !v.x.is_finite()) {
            return Err(Error::BadPlot("vertical line positions must be finite".into()));
        }
        Ok(Self { density_curve, vlines, title: title.into(), width: PANEL_WIDTH, height: PANEL_HEIGHT })
    }

    pub fn with_size(mut self, width: u32, height: u32) -> Self {
        self.width = width.max(100);
        self.height = height.max(100);
        self
    }

    pub fn density_curve(&self) -> &[(f64, f64)] {
        &self.density_curve
    }

    pub fn vlines(&self) -> &[VLine] {
        &self.vlines
    }

    pub fn title(&self) -> &str {
        &self.title
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }
}

/// Panels laid out row-major; trailing cells may be empty.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPlot {
    pub nrows: usize,
    pub ncols: usize,
    pub panels: Vec<PlotSpec>,
}

impl GridPlot {
    /// `(row, col)` of panel `i`.
    pub fn cell(&self, i: usize) -> (usize, usize) {
        (i / self.ncols, i % self.ncols)
    }
}

/// Per-component summary printed alongside MDN plots.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureReport {
    /// `(weight, mean, variance)` per component.
    pub components: Vec<(f64, f64, f64)>,
}

impl fmt::Display for MixtureReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, (w, m, v)) in self.components.iter().enumerate() {
            writeln!(f, "Component {}: weight={w:.4}, mean={m:.4}, variance={v:.4}", k + 1)?;
        }
        Ok(())
    }
}

fn with_markers(predicted: f64, actual: Option<f64>) -> Vec<VLine> {
    let mut v = vec![VLine { x: predicted, label: VLineLabel::Predicted }];
    if let Some(a) = actual {
        v.push(VLine { x: a, label: VLineLabel::Actual });
    }
    v
}

/// Density of the observation-level SVGP prediction at `x`, drawn by sampling
/// and KDE, with a marker at the predictive mean.
pub fn compare_distributions_svgpr(
    state: &SvgpState,
    x: &[f64],
    y_actual: Option<f64>,
    rng: &mut RngStream,
    n_samples: usize,
) -> Result<PlotSpec> {
    if x.len() != state.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "instance has {} features, model expects {}",
            x.len(),
            state.input_dim()
        )));
    }
    let pred = SvgpPredictor::new(state)?.predict_observed(x);
    let sd = pred.std_dev();
    let samples: Vec<f64> = (0..n_samples).map(|_| pred.mean + sd * rng.next_normal()).collect();
    let curve = gaussian_kde(&samples, &KdeConfig::default())?;
    PlotSpec::new(curve, with_markers(pred.mean, y_actual), "SVGP predictive distribution")
}

/// KDE of MDN mixture draws at `x`, with a marker at the strategy's scalar
/// prediction. The mixture components are printed to stdout and returned.
pub fn compare_distributions_mdn(
    params: &MdnParams,
    x: &[f64],
    y_actual: Option<f64>,
    rng: &mut RngStream,
    n_samples: usize,
    strategy: PredictionStrategy,
) -> Result<(PlotSpec, MixtureReport)> {
    if x.len() != params.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "instance has {} features, network expects {}",
            x.len(),
            params.input_dim()
        )));
    }
    let mix = mdn_forward(params, x);
    let report = MixtureReport {
        components: (0..mix.n_components()).map(|k| (mix.pi[k], mix.mu[k], mix.sigma[k].powi(2))).collect(),
    };
    // a closed stdout must not abort plotting
    let _ = write!(std::io::stdout().lock(), "{report}");
    let samples = mdn_sample(&mix, rng, n_samples);
    let curve = gaussian_kde(&samples, &KdeConfig::default())?;
    let predicted = predict(&mix, strategy, rng);
    let spec = PlotSpec::new(curve, with_markers(predicted, y_actual), "MDN predictive distribution")?;
    Ok((spec, report))
}

/// One panel per index, produced by `compare` with the matching actual value.
pub fn plot_results_grid(
    mut compare: impl FnMut(&[f64], Option<f64>) -> Result<PlotSpec>,
    xs: &Matrix,
    ys: &[f64],
    indices: &[usize],
    ncols: usize,
) -> Result<GridPlot> {
    if ncols == 0 {
        return Err(Error::BadConfig("ncols must be at least 1".into()));
    }
    if indices.is_empty() {
        return Err(Error::BadConfig("no instances to plot".into()));
    }
    if ys.len() != xs.rows() {
        return Err(Error::LengthMismatch { left: xs.rows(), right: ys.len() });
    }
    if let Some(&index) = indices.iter().find(|&&i| i >= xs.rows()) {
        return Err(Error::IndexOutOfRange { index, len: xs.rows() });
    }
    let panels = indices
        .iter()
        .map(|&i| {
            compare(xs.row(i), Some(ys[i])).map(|p| {
                let title = format!("{} (instance {i})", p.title);
                PlotSpec { title, ..p }
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GridPlot { nrows: indices.len().div_ceil(ncols), ncols, panels })
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 25.0;
const MARGIN_TOP: f64 = 45.0;
const MARGIN_BOTTOM: f64 = 50.0;

fn write_panel(out: &mut String, spec: &PlotSpec, ox: f64, oy: f64) {
    let (w, h) = (spec.width as f64, spec.height as f64);
    let curve = &spec.density_curve;
    let mut x_min = curve[0].0;
    let mut x_max = curve[curve.len() - 1].0;
    for v in &spec.vlines {
        x_min = x_min.min(v.x);
        x_max = x_max.max(v.x);
    }
    let pad = 0.02 * (x_max - x_min);
    let (x_min, x_max) = (x_min - pad, x_max + pad);
    let y_max = curve.iter().map(|p| p.1).fold(0.0, f64::max).max(f64::MIN_POSITIVE) * 1.05;
    let left = ox + MARGIN_LEFT;
    let right = ox + w - MARGIN_RIGHT;
    let top = oy + MARGIN_TOP;
    let bottom = oy + h - MARGIN_BOTTOM;
    let sx = |x: f64| left + (x - x_min) / (x_max - x_min) * (right - left);
    let sy = |y: f64| bottom - y / y_max * (bottom - top);

    let _ = writeln!(out, r#"<g class="panel" transform="translate({ox:.0},{oy:.0})">"#);
    let _ = writeln!(
        out,
        r#"<text class="title" x="{:.2}" y="{:.2}" text-anchor="middle" font-size="16">{}</text>"#,
        ox + w / 2.0 - ox,
        MARGIN_TOP / 2.0,
        escape(&spec.title)
    );
    // coordinates below are absolute; undo the group translation
    let _ = writeln!(out, r#"<g transform="translate({:.0},{:.0})">"#, -ox, -oy);
    let _ = writeln!(
        out,
        r#"<line class="axis x-axis" x1="{left:.2}" y1="{bottom:.2}" x2="{right:.2}" y2="{bottom:.2}" stroke="black"/>"#
    );
    let _ = writeln!(
        out,
        r#"<line class="axis y-axis" x1="{left:.2}" y1="{top:.2}" x2="{left:.2}" y2="{bottom:.2}" stroke="black"/>"#
    );
    let _ = writeln!(
        out,
        r#"<text class="tick x-tick" x="{left:.2}" y="{:.2}" text-anchor="middle" font-size="12">{x_min:.3}</text>"#,
        bottom + 18.0
    );
    let _ = writeln!(
        out,
        r#"<text class="tick x-tick" x="{right:.2}" y="{:.2}" text-anchor="middle" font-size="12">{x_max:.3}</text>"#,
        bottom + 18.0
    );
    let _ = writeln!(
        out,
        r#"<text class="tick y-tick" x="{:.2}" y="{bottom:.2}" text-anchor="end" font-size="12">0</text>"#,
        left - 6.0
    );
    let _ = writeln!(
        out,
        r#"<text class="tick y-tick" x="{:.2}" y="{top:.2}" text-anchor="end" font-size="12">{y_max:.3}</text>"#,
        left - 6.0
    );
    let points: Vec<String> = curve.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
    let _ = writeln!(
        out,
        r#"<polyline class="density" fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#,
        points.join(" ")
    );
    for v in &spec.vlines {
        let (color, dash) = match v.label {
            VLineLabel::Predicted => ("crimson", ""),
            VLineLabel::Actual => ("seagreen", r#" stroke-dasharray="6,4""#),
        };
        let x = sx(v.x);
        let _ = writeln!(
            out,
            r#"<line class="vline {}" x1="{x:.2}" y1="{top:.2}" x2="{x:.2}" y2="{bottom:.2}" stroke="{color}" stroke-width="2"{dash}/>"#,
            v.label
        );
        let label_y = match v.label {
            VLineLabel::Predicted => top + 12.0,
            VLineLabel::Actual => top + 28.0,
        };
        let _ = writeln!(
            out,
            r#"<text class="vline-label" x="{:.2}" y="{label_y:.2}" font-size="12" fill="{color}">{}</text>"#,
            x + 4.0,
            v.label
        );
    }
    out.push_str("</g>\n</g>\n");
}

fn document(width: u32, height: u32, body: &str) -> String {
    format!(
        concat!(
            "<?xml version=\"1.0\" encoding=\"UTF-8\" standalone=\"yes\"?>\n",
            "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n",
            "<rect x=\"0\" y=\"0\" width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n",
            "{body}</svg>\n"
        ),
        w = width,
        h = height,
        body = body
    )
}

/// Standalone SVG for a single panel.
pub fn svg_string(spec: &PlotSpec) -> String {
    let mut body = String::new();
    write_panel(&mut body, spec, 0.0, 0.0);
    document(spec.width, spec.height, &body)
}

/// Standalone SVG for a grid; every cell is one panel in size.
pub fn grid_svg_string(grid: &GridPlot) -> String {
    let cell_w = grid.panels.iter().map(|p| p.width).max().unwrap_or(PANEL_WIDTH);
    let cell_h = grid.panels.iter().map(|p| p.height).max().unwrap_or(PANEL_HEIGHT);
    let mut body = String::new();
    for (i, panel) in grid.panels.iter().enumerate() {
        let (r, c) = grid.cell(i);
        write_panel(&mut body, panel, (c as u32 * cell_w) as f64, (r as u32 * cell_h) as f64);
    }
    document(cell_w * grid.ncols as u32, cell_h * grid.nrows as u32, &body)
}

pub fn render_svg(spec: &PlotSpec, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, svg_string(spec))?;
    Ok(())
}

pub fn render_grid_svg(grid: &GridPlot, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, grid_svg_string(grid))?;
    Ok(())
}
