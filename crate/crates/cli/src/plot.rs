//! Static SVG plots rendered from the artifacts on disk. Output depends only on
//! the artifact files, so equal inputs give byte-identical SVG.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::artifacts::{META_JSON, SNAPSHOTS_CSV, TRAJECTORY_CSV};
use crate::CliError;

pub const PHASE_SVG: &str = "phase_space.svg";
pub const TRAJECTORIES_SVG: &str = "trajectories.svg";

#[derive(Clone, Debug, Default)]
pub struct PlotOptions {
    /// Overrides the value recorded in `meta.json`.
    pub snapshot_k: Option<usize>,
    pub zscore: Option<f64>,
}

struct Case {
    name: String,
    dir: PathBuf,
    color: &'static str,
    dashed: bool,
    columns: Vec<String>,
    /// Column-major; missing cells are NaN.
    data: Vec<Vec<f64>>,
}

fn color_for(name: &str) -> &'static str {
    match name {
        "corrected" => "#ff7f0e",
        "uncorrected" => "#17becf",
        _ => "#1f77b4",
    }
}

/// Single-run directories hold `trajectory.csv`; comparison directories hold
/// `corrected/` and `uncorrected/`.
fn discover(dir: &Path) -> Result<Vec<(String, PathBuf)>, CliError> {
    if dir.join(TRAJECTORY_CSV).is_file() {
        return Ok(vec![(String::new(), dir.to_path_buf())]);
    }
    let cases: Vec<_> = ["corrected", "uncorrected"]
        .iter()
        .map(|n| (n.to_string(), dir.join(n)))
        .filter(|(_, d)| d.join(TRAJECTORY_CSV).is_file())
        .collect();
    if cases.is_empty() {
        return Err(CliError::Input(format!("no {TRAJECTORY_CSV} under {}", dir.display())));
    }
    Ok(cases)
}

fn parse_cell(s: &str) -> f64 {
    s.parse().unwrap_or(f64::NAN)
}

fn load_case(name: String, dir: PathBuf) -> Result<Case, CliError> {
    let path = dir.join(TRAJECTORY_CSV);
    let mut reader = csv::Reader::from_path(&path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let columns: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if columns.len() < 4 || columns[0] != "k" || columns[1] != "t" {
        return Err(CliError::Input(format!("{}: unexpected header", path.display())));
    }
    let mut data = vec![Vec::new(); columns.len()];
    for rec in reader.records() {
        let rec = rec?;
        for (c, cell) in rec.iter().enumerate().take(columns.len()) {
            data[c].push(parse_cell(cell));
        }
    }
    Ok(Case { color: color_for(&name), dashed: name == "uncorrected", name, dir, columns, data })
}

fn meta_value(dir: &Path, key: &str) -> Option<serde_json::Value> {
    let text = fs::read_to_string(dir.join(META_JSON)).ok()?;
    let v: serde_json::Value = serde_json::from_str(&text).ok()?;
    v.get(key).cloned()
}

struct Svg {
    out: String,
}

impl Svg {
    fn new(w: f64, h: f64) -> Self {
        let mut out = String::new();
        writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
        )
        .unwrap();
        writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
        Self { out }
    }

    fn text(&mut self, x: f64, y: f64, anchor: &str, s: &str) {
        let s = s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");
        writeln!(self.out, r#"<text x="{x:.2}" y="{y:.2}" text-anchor="{anchor}">{s}</text>"#).unwrap();
    }

    fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, stroke: &str, width: f64) {
        writeln!(
            self.out,
            r#"<line x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" stroke="{stroke}" stroke-width="{width}"/>"#
        )
        .unwrap();
    }

    fn frame(&mut self, f: &Frame) {
        writeln!(
            self.out,
            r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="#444"/>"##,
            f.x, f.y, f.w, f.h
        )
        .unwrap();
    }

    /// Polyline broken at non-finite points.
    fn polyline(&mut self, pts: &[(f64, f64)], stroke: &str, dashed: bool) {
        let dash = if dashed { r#" stroke-dasharray="6 4""# } else { "" };
        for run in pts.split(|(x, y)| !x.is_finite() || !y.is_finite()) {
            if run.len() < 2 {
                continue;
            }
            let mut d = String::new();
            for (x, y) in run {
                write!(d, "{x:.2},{y:.2} ").unwrap();
            }
            writeln!(self.out, r#"<polyline points="{}" fill="none" stroke="{stroke}" stroke-width="1.5"{dash}/>"#, d.trim_end()).unwrap();
        }
    }

    fn circle(&mut self, x: f64, y: f64, r: f64, fill: &str) {
        writeln!(self.out, r#"<circle cx="{x:.2}" cy="{y:.2}" r="{r}" fill="{fill}"/>"#).unwrap();
    }

    fn finish(mut self) -> String {
        self.out.push_str("</svg>\n");
        self.out
    }
}

/// Plot area in pixels plus the data range it shows.
struct Frame {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    xr: (f64, f64),
    yr: (f64, f64),
}

impl Frame {
    fn px(&self, v: f64) -> f64 {
        self.x + (v - self.xr.0) / (self.xr.1 - self.xr.0) * self.w
    }

    fn py(&self, v: f64) -> f64 {
        self.y + self.h - (v - self.yr.0) / (self.yr.1 - self.yr.0) * self.h
    }

    fn map(&self, xs: &[f64], ys: &[f64]) -> Vec<(f64, f64)> {
        xs.iter().zip(ys).map(|(x, y)| (self.px(*x), self.py(*y))).collect()
    }

    fn axes(&self, svg: &mut Svg, xlabel: &str, ylabel: &str) {
        svg.frame(self);
        if self.yr.0 < 0.0 && self.yr.1 > 0.0 {
            svg.line(self.x, self.py(0.0), self.x + self.w, self.py(0.0), "#bbb", 0.5);
        }
        svg.text(self.x - 4.0, self.y + 10.0, "end", &format!("{:.3}", self.yr.1));
        svg.text(self.x - 4.0, self.y + self.h, "end", &format!("{:.3}", self.yr.0));
        svg.text(self.x, self.y + self.h + 13.0, "start", &format!("{:.3}", self.xr.0));
        svg.text(self.x + self.w, self.y + self.h + 13.0, "end", &format!("{:.3}", self.xr.1));
        svg.text(self.x + self.w / 2.0, self.y + self.h + 13.0, "middle", xlabel);
        svg.text(self.x + 6.0, self.y + 13.0, "start", ylabel);
    }
}

fn range<'a>(values: impl Iterator<Item = &'a f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    if !lo.is_finite() {
        return (-1.0, 1.0);
    }
    let pad = if hi > lo { 0.05 * (hi - lo) } else { 0.5 * lo.abs().max(1.0) };
    (lo - pad, hi + pad)
}

fn legend(svg: &mut Svg, cases: &[Case], x: f64, y: f64) {
    for (j, c) in cases.iter().enumerate() {
        let yy = y + 14.0 * j as f64;
        let dash = if c.dashed { r#" stroke-dasharray="6 4""# } else { "" };
        writeln!(
            svg.out,
            r#"<line x1="{x:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{}" stroke-width="2"{dash}/>"#,
            yy - 4.0,
            x + 20.0,
            yy - 4.0,
            c.color
        )
        .unwrap();
        let label = if c.name.is_empty() { "closed loop" } else { c.name.as_str() };
        svg.text(x + 26.0, yy, "start", label);
    }
}

fn render_trajectories(cases: &[Case]) -> String {
    let n_panels = cases[0].columns.len() - 2;
    let (w, ph, top, left) = (760.0, 130.0, 40.0, 70.0);
    let h = top + n_panels as f64 * (ph + 30.0) + 10.0;
    let mut svg = Svg::new(w, h);
    legend(&mut svg, cases, left, 18.0);
    let t_range = range(cases.iter().flat_map(|c| c.data[1].iter()));
    for p in 0..n_panels {
        let col = p + 2;
        let frame = Frame {
            x: left,
            y: top + p as f64 * (ph + 30.0),
            w: w - left - 20.0,
            h: ph,
            xr: t_range,
            yr: range(cases.iter().flat_map(|c| c.data.get(col).into_iter().flatten())),
        };
        frame.axes(&mut svg, "t [s]", &cases[0].columns[col]);
        for c in cases {
            if let Some(ys) = c.data.get(col) {
                svg.polyline(&frame.map(&c.data[1], ys), c.color, c.dashed);
            }
        }
    }
    svg.finish()
}

struct HorizonPoint {
    truth: [f64; 2],
    predicted: [f64; 2],
    half_width: [Option<f64>; 2],
}

fn snapshot(dir: &Path, k: usize, z: f64) -> Result<Vec<HorizonPoint>, CliError> {
    let path = dir.join(SNAPSHOTS_CSV);
    if !path.is_file() {
        return Ok(Vec::new());
    }
    let mut reader = csv::Reader::from_path(&path)?;
    let mut pts: Vec<HorizonPoint> = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        if rec[0].parse::<usize>().ok() != Some(k) {
            continue;
        }
        let i: usize = rec[1].parse().unwrap_or(0);
        let n: usize = rec[2].parse().unwrap_or(usize::MAX);
        let x_bar = parse_cell(&rec[5]);
        if i == 0 || n > 1 || !x_bar.is_finite() {
            continue;
        }
        while pts.len() < i {
            pts.push(HorizonPoint { truth: [f64::NAN; 2], predicted: [f64::NAN; 2], half_width: [None; 2] });
        }
        let p = &mut pts[i - 1];
        p.truth[n] = parse_cell(&rec[3]);
        p.predicted[n] = x_bar;
        let std = parse_cell(&rec[8]);
        p.half_width[n] = std.is_finite().then_some(z * std);
    }
    Ok(pts)
}

fn render_phase(cases: &[Case], snap: &[HorizonPoint], k: usize, z: f64) -> String {
    let (w, h, left, top) = (620.0, 520.0, 70.0, 50.0);
    let mut svg = Svg::new(w, h);
    let xs = |c: &Case| c.data[2].clone();
    let ys = |c: &Case| c.data[3].clone();
    let all_x: Vec<f64> = cases.iter().flat_map(xs).chain(snap.iter().flat_map(|p| [p.truth[0], p.predicted[0]])).collect();
    let all_y: Vec<f64> = cases.iter().flat_map(ys).chain(snap.iter().flat_map(|p| [p.truth[1], p.predicted[1]])).collect();
    let frame = Frame { x: left, y: top, w: w - left - 20.0, h: h - top - 50.0, xr: range(all_x.iter()), yr: range(all_y.iter()) };
    frame.axes(&mut svg, &cases[0].columns[2], &cases[0].columns[3]);
    legend(&mut svg, cases, left, 16.0);
    for c in cases {
        svg.polyline(&frame.map(&xs(c), &ys(c)), c.color, c.dashed);
    }
    for p in snap {
        let (tx, ty) = (frame.px(p.truth[0]), frame.py(p.truth[1]));
        let (cx, cy) = (frame.px(p.predicted[0]), frame.py(p.predicted[1]));
        if let Some(hw) = p.half_width[0] {
            svg.line(frame.px(p.predicted[0] - hw), cy, frame.px(p.predicted[0] + hw), cy, "#555", 1.0);
        }
        if let Some(hw) = p.half_width[1] {
            svg.line(cx, frame.py(p.predicted[1] - hw), cx, frame.py(p.predicted[1] + hw), "#555", 1.0);
        }
        if tx.is_finite() && ty.is_finite() {
            svg.circle(tx, ty, 2.5, "#2ca02c");
        }
        if cx.is_finite() && cy.is_finite() {
            svg.circle(cx, cy, 2.5, "#d62728");
        }
    }
    let note = format!("k = {k}, i = 1..{}: green true horizon states, red predicted x_bar with +-{z} sigma bars", snap.len());
    svg.text(left, h - 22.0, "start", &note);
    svg.text(left, h - 8.0, "start", "deterministic reachable-set polytopes are not drawn");
    svg.finish()
}

/// Writes `phase_space.svg` and `trajectories.svg` into `dir`.
pub fn plot_dir(dir: &Path, opts: &PlotOptions) -> Result<Vec<PathBuf>, CliError> {
    let cases = discover(dir)?
        .into_iter()
        .map(|(n, d)| load_case(n, d))
        .collect::<Result<Vec<_>, _>>()?;
    // the horizon snapshot comes from the error-corrected case when there is one
    let snap_case = cases.iter().find(|c| c.name == "corrected").unwrap_or(&cases[0]);
    let k = opts
        .snapshot_k
        .or_else(|| meta_value(&snap_case.dir, "snapshot_k").and_then(|v| v.as_u64()).map(|v| v as usize))
        .unwrap_or(15);
    let z = opts
        .zscore
        .or_else(|| meta_value(&snap_case.dir, "zscore").and_then(|v| v.as_f64()))
        .unwrap_or(2.576);
    let snap = snapshot(&snap_case.dir, k, z)?;

    let phase = dir.join(PHASE_SVG);
    fs::write(&phase, render_phase(&cases, &snap, k, z))?;
    let traj = dir.join(TRAJECTORIES_SVG);
    fs::write(&traj, render_trajectories(&cases))?;
    Ok(vec![phase, traj])
}
