//! Deterministic SVG 1.1 output: training curves, pseudo-label quality and a
//! 2-D scatter of target features with prototype markers.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22",
    "#17becf",
];

/// Minimal header-plus-rows CSV table.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    /// A zero-byte input yields a table with no columns and no rows.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let headers: Vec<String> = match lines.next() {
            Some(h) => h.trim().split(',').map(|s| s.trim().to_string()).collect(),
            None => Vec::new(),
        };
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let fields: Vec<String> = line.trim().split(',').map(|s| s.trim().to_string()).collect();
            if fields.len() != headers.len() {
                return Err(Error::Schema(format!(
                    "row {} has {} fields, header has {}",
                    i + 2,
                    fields.len(),
                    headers.len()
                )));
            }
            rows.push(fields);
        }
        Ok(Self { headers, rows })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.headers.iter().position(|h| h == name)
    }

    /// Numeric column; empty or `nan` cells become NaN.
    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let j = self
            .index_of(name)
            .ok_or_else(|| Error::Schema(format!("missing column {name:?}")))?;
        self.rows
            .iter()
            .map(|r| parse_cell(&r[j]))
            .collect()
    }

    /// Checks presence of `names` unless the table is entirely empty.
    pub fn require(&self, names: &[&str]) -> Result<()> {
        if self.headers.is_empty() && self.rows.is_empty() {
            return Ok(());
        }
        for n in names {
            if self.index_of(n).is_none() {
                return Err(Error::Schema(format!("missing column {n:?}")));
            }
        }
        Ok(())
    }
}

fn parse_cell(s: &str) -> Result<f64> {
    if s.is_empty() || s.eq_ignore_ascii_case("nan") {
        return Ok(f64::NAN);
    }
    s.parse::<f64>()
        .map_err(|e| Error::Parse(format!("{s:?}: {e}")))
}

#[derive(Debug, Clone)]
struct Series {
    name: String,
    points: Vec<(f64, f64)>,
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

const W: f64 = 640.0;
const H: f64 = 420.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 48.0;

impl Frame {
    fn fit<'a>(points: impl Iterator<Item = &'a (f64, f64)>) -> Self {
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y) in points {
            if !(x.is_finite() && y.is_finite()) {
                continue;
            }
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if !x0.is_finite() {
            return Self { x0: 0.0, x1: 1.0, y0: 0.0, y1: 1.0 };
        }
        let pad = |a: f64, b: f64| {
            if (b - a).abs() < 1e-12 {
                (a - 0.5, b + 0.5)
            } else {
                let m = 0.04 * (b - a);
                (a - m, b + m)
            }
        };
        let (x0, x1) = pad(x0, x1);
        let (y0, y1) = pad(y0, y1);
        Self { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x0) / (self.x1 - self.x0) * (W - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        H - BOTTOM - (y - self.y0) / (self.y1 - self.y0) * (H - TOP - BOTTOM)
    }
}

fn svg_open(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8" standalone="no"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="22" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#,
        (W - RIGHT + LEFT) / 2.0,
        escape(title)
    );
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn draw_axes(s: &mut String, f: &Frame, xlabel: &str, ylabel: &str) {
    let (l, r, t, b) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
    let _ = writeln!(
        s,
        r#"<g class="axes" stroke="black" stroke-width="1"><line x1="{l:.2}" y1="{b:.2}" x2="{r:.2}" y2="{b:.2}"/><line x1="{l:.2}" y1="{t:.2}" x2="{l:.2}" y2="{b:.2}"/></g>"#
    );
    for i in 0..=4 {
        let fx = f.x0 + (f.x1 - f.x0) * i as f64 / 4.0;
        let fy = f.y0 + (f.y1 - f.y0) * i as f64 / 4.0;
        let (px, py) = (f.px(fx), f.py(fy));
        let _ = writeln!(
            s,
            r#"<text x="{px:.2}" y="{:.2}" font-family="sans-serif" font-size="10" text-anchor="middle">{}</text>"#,
            b + 14.0,
            tick(fx)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="10" text-anchor="end">{}</text>"#,
            l - 4.0,
            py + 3.0,
            tick(fy)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="12" text-anchor="middle">{}</text>"#,
        (l + r) / 2.0,
        H - 12.0,
        escape(xlabel)
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.2}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 14 {:.2})">{}</text>"#,
        (t + b) / 2.0,
        (t + b) / 2.0,
        escape(ylabel)
    );
}

fn tick(v: f64) -> String {
    let s = format!("{v:.3}");
    if s == "-0.000" {
        "0.000".into()
    } else {
        s
    }
}

fn legend(s: &mut String, names: &[String]) {
    for (i, n) in names.iter().enumerate() {
        let y = TOP + 14.0 + 16.0 * i as f64;
        let x = W - RIGHT + 12.0;
        let _ = writeln!(
            s,
            r#"<rect x="{x:.2}" y="{:.2}" width="10" height="10" fill="{}"/><text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11">{}</text>"#,
            y - 9.0,
            PALETTE[i % PALETTE.len()],
            x + 14.0,
            y,
            escape(n)
        );
    }
}

fn line_chart(title: &str, ylabel: &str, series: &[Series]) -> String {
    let frame = Frame::fit(series.iter().flat_map(|s| s.points.iter()));
    let mut s = svg_open(title);
    draw_axes(&mut s, &frame, "iteration", ylabel);
    for (i, ser) in series.iter().enumerate() {
        let pts: Vec<String> = ser
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", frame.px(x), frame.py(y)))
            .collect();
        if pts.is_empty() {
            continue;
        }
        let _ = writeln!(
            s,
            r#"<polyline class="series" fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
            PALETTE[i % PALETTE.len()],
            pts.join(" ")
        );
    }
    legend(&mut s, &series.iter().map(|x| x.name.clone()).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}

fn series_from(table: &CsvTable, x: &[f64], names: &[&str]) -> Result<Vec<Series>> {
    names
        .iter()
        .map(|&n| {
            let y = if table.rows.is_empty() { Vec::new() } else { table.column(n)? };
            Ok(Series {
                name: n.to_string(),
                points: x.iter().copied().zip(y).collect(),
            })
        })
        .collect()
}

pub const LOSS_COLUMNS: [&str; 5] = ["ce_s", "sce_t", "kl", "reg", "total"];
pub const ACCURACY_COLUMNS: [&str; 3] = ["source_acc", "target_acc", "pseudo_acc"];

/// Loss and accuracy curves from a metrics table.
pub fn learning_curves(metrics: &CsvTable) -> Result<(String, String)> {
    let mut required = vec!["iter"];
    required.extend(LOSS_COLUMNS);
    required.extend(ACCURACY_COLUMNS);
    metrics.require(&required)?;
    let x = if metrics.rows.is_empty() { Vec::new() } else { metrics.column("iter")? };
    let losses = series_from(metrics, &x, &LOSS_COLUMNS)?;
    let accs = series_from(metrics, &x, &ACCURACY_COLUMNS)?;
    Ok((
        line_chart("training losses", "loss", &losses),
        line_chart("accuracy", "accuracy", &accs),
    ))
}

/// Pseudo-label accuracy and mIoU against the hidden target labels.
pub fn pseudo_quality(metrics: &CsvTable) -> Result<String> {
    metrics.require(&["iter", "pseudo_acc", "pseudo_miou"])?;
    let x = if metrics.rows.is_empty() { Vec::new() } else { metrics.column("iter")? };
    let s = series_from(metrics, &x, &["pseudo_acc", "pseudo_miou"])?;
    Ok(line_chart("pseudo-label quality", "score", &s))
}

/// Top-2 principal directions of row vectors via cyclic Jacobi on the
/// covariance. Each direction's sign makes its largest-magnitude component
/// positive.
pub fn principal_axes(points: &[Vec<f64>]) -> (Vec<f64>, [Vec<f64>; 2]) {
    let d = points.first().map_or(0, Vec::len);
    let n = points.len().max(1) as f64;
    let mut mean = vec![0.0; d];
    for p in points {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v / n;
        }
    }
    let mut cov = vec![vec![0.0; d]; d];
    for p in points {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += (p[i] - mean[i]) * (p[j] - mean[j]) / n;
            }
        }
    }
    let (vals, vecs) = jacobi_eigen(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| vals[b].partial_cmp(&vals[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    let pick = |k: usize| -> Vec<f64> {
        let Some(&c) = order.get(k) else {
            return vec![0.0; d];
        };
        let mut v: Vec<f64> = (0..d).map(|i| vecs[i][c]).collect();
        let big = v
            .iter()
            .enumerate()
            .fold(0, |b, (i, x)| if x.abs() > v[b].abs() { i } else { b });
        if v[big] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        v
    };
    (mean, [pick(0), pick(1)])
}

/// Eigen-decomposition of a symmetric matrix; eigenvectors are columns.
fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v = vec![vec![0.0; n]; n];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-22 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vkp, vkq) = (row[p], row[q]);
                    row[p] = c * vkp - s * vkq;
                    row[q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i][i]).collect(), v)
}

fn project(p: &[f64], mean: &[f64], axes: &[Vec<f64>; 2]) -> (f64, f64) {
    let dot = |ax: &Vec<f64>| p.iter().zip(mean).zip(ax).map(|((x, m), a)| (x - m) * a).sum::<f64>();
    (dot(&axes[0]), dot(&axes[1]))
}

/// Scatter of dataset rows coloured by the `y` column. Raw coordinates are
/// used in 2-D, the top-2 principal directions otherwise. Prototypes (a table
/// with `class`, `seen`, `c*` columns) are drawn as crosses.
pub fn feature_scatter(dataset: &CsvTable, prototypes: Option<&CsvTable>) -> Result<String> {
    let (coords, labels) = if dataset.headers.is_empty() {
        (Vec::new(), Vec::new())
    } else {
        let yj = dataset
            .index_of("y")
            .ok_or_else(|| Error::Schema("dataset needs a y column".into()))?;
        let mut coords = Vec::with_capacity(dataset.rows.len());
        let mut labels = Vec::with_capacity(dataset.rows.len());
        for r in &dataset.rows {
            let mut p = Vec::with_capacity(r.len() - 1);
            for (j, cell) in r.iter().enumerate() {
                if j != yj {
                    p.push(parse_cell(cell)?);
                }
            }
            coords.push(p);
            labels.push(
                r[yj]
                    .parse::<i64>()
                    .map_err(|e| Error::Parse(format!("label {:?}: {e}", r[yj])))?,
            );
        }
        (coords, labels)
    };
    let d = coords.first().map_or(2, Vec::len);
    let (mean, axes) = if d == 2 {
        (vec![0.0, 0.0], [vec![1.0, 0.0], vec![0.0, 1.0]])
    } else {
        principal_axes(&coords)
    };
    let pts: Vec<(f64, f64)> = coords.iter().map(|p| project(p, &mean, &axes)).collect();

    let mut protos = Vec::new();
    if let Some(t) = prototypes {
        if !t.rows.is_empty() {
            let cls = t.column("class")?;
            let seen = t.column("seen")?;
            let cols: Vec<Vec<f64>> = (0..d).map(|j| t.column(&format!("c{j}"))).collect::<Result<_>>()?;
            for i in 0..t.rows.len() {
                if seen[i] == 0.0 {
                    continue;
                }
                let p: Vec<f64> = cols.iter().map(|c| c[i]).collect();
                protos.push((cls[i] as i64, project(&p, &mean, &axes)));
            }
        }
    }

    let frame = Frame::fit(pts.iter().chain(protos.iter().map(|(_, p)| p)));
    let mut s = svg_open("target features");
    let (xl, yl) = if d == 2 { ("dim 0", "dim 1") } else { ("PC 1", "PC 2") };
    draw_axes(&mut s, &frame, xl, yl);
    for (&(x, y), &k) in pts.iter().zip(&labels) {
        let colour = if k < 0 { "#000000" } else { PALETTE[k as usize % PALETTE.len()] };
        let _ = writeln!(
            s,
            r#"<circle class="pt" cx="{:.2}" cy="{:.2}" r="2" fill="{colour}" fill-opacity="0.6"/>"#,
            frame.px(x),
            frame.py(y)
        );
    }
    for (k, (x, y)) in &protos {
        let (cx, cy) = (frame.px(*x), frame.py(*y));
        let _ = writeln!(
            s,
            r#"<path class="proto" d="M{:.2},{:.2}L{:.2},{:.2}M{:.2},{:.2}L{:.2},{:.2}" stroke="{}" stroke-width="3"/>"#,
            cx - 7.0,
            cy - 7.0,
            cx + 7.0,
            cy + 7.0,
            cx - 7.0,
            cy + 7.0,
            cx + 7.0,
            cy - 7.0,
            PALETTE[(*k).max(0) as usize % PALETTE.len()]
        );
    }
    let mut classes: Vec<i64> = labels.iter().copied().filter(|&k| k >= 0).collect();
    classes.sort_unstable();
    classes.dedup();
    if let Some(&max) = classes.last() {
        legend(&mut s, &(0..=max).map(|k| format!("class {k}")).collect::<Vec<_>>());
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Writes `losses.svg`, `accuracy.svg`, `pseudo_labels.svg` and
/// `features.svg` into `out_dir`.
pub fn emit_plots(
    metrics_csv: &Path,
    dataset_csv: &Path,
    prototypes_csv: Option<&Path>,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let metrics = CsvTable::read(metrics_csv)?;
    let dataset = CsvTable::read(dataset_csv)?;
    let protos = prototypes_csv.map(CsvTable::read).transpose()?;
    let (losses, accs) = learning_curves(&metrics)?;
    let pseudo = pseudo_quality(&metrics)?;
    let scatter = feature_scatter(&dataset, protos.as_ref())?;
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for (name, body) in [
        ("losses.svg", losses),
        ("accuracy.svg", accs),
        ("pseudo_labels.svg", pseudo),
        ("features.svg", scatter),
    ] {
        let p = out_dir.join(name);
        fs::write(&p, body)?;
        written.push(p);
    }
    Ok(written)
}
