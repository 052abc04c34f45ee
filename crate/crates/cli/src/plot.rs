//! Static SVG rendering of the exported CSV files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use eomshape::analyze::FitResult;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("{path}: line {line}: {reason}")]
    Malformed { path: String, line: usize, reason: String },
    #[error("{path}: unrecognized header {header:?}")]
    UnknownFormat { path: String, header: Vec<String> },
    #[error("{path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A numeric CSV table.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn column(&self, i: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r[i]).collect()
    }
}

pub fn read_table(path: &Path) -> Result<Table, PlotError> {
    let name = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| PlotError::Io {
        path: name.clone(),
        source,
    })?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let malformed = |line: usize, reason: String| PlotError::Malformed {
        path: name.clone(),
        line,
        reason,
    };
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| malformed(1, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.iter().all(|h| h.is_empty()) {
        return Err(malformed(1, "missing header".into()));
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| malformed(line, e.to_string()))?;
        if rec.len() != header.len() {
            return Err(malformed(
                line,
                format!("expected {} fields, found {}", header.len(), rec.len()),
            ));
        }
        let row = rec
            .iter()
            .map(|f| {
                let f = f.trim();
                match f {
                    "inf" => Ok(f64::INFINITY),
                    _ => f.parse::<f64>(),
                }
            })
            .collect::<Result<Vec<f64>, _>>()
            .map_err(|e| malformed(line, format!("not a number ({e})")))?;
        rows.push(row);
    }
    Ok(Table { header, rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CsvKind {
    Histogram,
    Expected,
    Envelope,
    Timestamps,
    Tradeoff,
    Wavepacket,
}

pub fn classify(header: &[String]) -> Option<CsvKind> {
    let h: Vec<&str> = header.iter().map(String::as_str).collect();
    Some(match h.as_slice() {
        ["bin_start_ns", "count"] => CsvKind::Histogram,
        ["bin_start_ns", "expected"] => CsvKind::Expected,
        ["t_ns", "transmission"] => CsvKind::Envelope,
        ["cycle_index", "t_ns"] => CsvKind::Timestamps,
        ["t_ns", "re", "im"] => CsvKind::Wavepacket,
        ["tau_mod_ns", "delay_ns", "indist_exact", "indist_simple", "fraction", "rate_hz"] => CsvKind::Tradeoff,
        _ => return None,
    })
}

const W: f64 = 720.0;
const H: f64 = 440.0;
const LEFT: f64 = 78.0;
const RIGHT: f64 = 78.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 56.0;
const COLORS: [&str; 8] = [
    "#1f4e9c", "#c0392b", "#27864a", "#8e44ad", "#d68910", "#17808a", "#7f8c8d", "#a04000",
];

#[derive(Debug, Clone, Copy)]
struct Axis {
    lo: f64,
    hi: f64,
    log: bool,
}

impl Axis {
    fn new(values: impl Iterator<Item = f64>, log: bool, zero: bool) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values.filter(|v| v.is_finite() && (!log || *v > 0.0)) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            return Self {
                lo: if log { 1.0 } else { 0.0 },
                hi: if log { 10.0 } else { 1.0 },
                log,
            };
        }
        if log {
            return Self {
                lo: 10f64.powf(lo.log10().floor()),
                hi: 10f64.powf(hi.log10().ceil().max(lo.log10().floor() + 1.0)),
                log,
            };
        }
        if zero {
            lo = lo.min(0.0);
        }
        if hi <= lo {
            hi = lo + 1.0;
        }
        let pad = 0.05 * (hi - lo);
        Self {
            lo: if zero && lo == 0.0 { 0.0 } else { lo - pad },
            hi: hi + pad,
            log,
        }
    }

    fn frac(&self, v: f64) -> f64 {
        if self.log {
            (v.max(self.lo * 1e-3).log10() - self.lo.log10()) / (self.hi.log10() - self.lo.log10())
        } else {
            (v - self.lo) / (self.hi - self.lo)
        }
    }

    fn ticks(&self) -> Vec<f64> {
        if self.log {
            let (a, b) = (self.lo.log10().round() as i32, self.hi.log10().round() as i32);
            return (a..=b).map(|e| 10f64.powi(e)).collect();
        }
        let raw = (self.hi - self.lo) / 6.0;
        let mag = 10f64.powf(raw.log10().floor());
        let step = [1.0, 2.0, 5.0, 10.0]
            .iter()
            .map(|m| m * mag)
            .find(|s| *s >= raw)
            .unwrap_or(10.0 * mag);
        let mut t = (self.lo / step).ceil() * step;
        let mut out = Vec::new();
        while t <= self.hi + 1e-9 * step {
            out.push(if t.abs() < 1e-12 * step { 0.0 } else { t });
            t += step;
        }
        out
    }
}

fn fmt_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e5 || v.abs() < 1e-3) {
        format!("{v:.0e}")
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// A single plot panel with a left axis and an optional right axis.
struct Canvas {
    body: String,
    x: Axis,
    y: Axis,
    y2: Option<Axis>,
    legend: Vec<(String, &'static str, bool)>,
}

impl Canvas {
    fn new(x: Axis, y: Axis, y2: Option<Axis>) -> Self {
        Self {
            body: String::new(),
            x,
            y,
            y2,
            legend: Vec::new(),
        }
    }

    fn px(&self, v: f64) -> f64 {
        LEFT + self.x.frac(v).clamp(-0.02, 1.02) * (W - LEFT - RIGHT)
    }

    fn py(&self, axis: &Axis, v: f64) -> f64 {
        H - BOTTOM - axis.frac(v).clamp(-0.02, 1.02) * (H - TOP - BOTTOM)
    }

    fn path(&mut self, pts: &[(f64, f64)], right: bool, color: &'static str, dashed: bool, label: &str) {
        let axis = if right { self.y2.unwrap_or(self.y) } else { self.y };
        // Non-finite points and points off the x range break the line.
        let mut d = String::new();
        let mut pen_down = false;
        for &(x, y) in pts {
            if !(x.is_finite() && y.is_finite()) || x < self.x.lo || x > self.x.hi {
                pen_down = false;
                continue;
            }
            let _ = write!(
                d,
                "{}{:.2},{:.2} ",
                if pen_down { "L" } else { "M" },
                self.px(x),
                self.py(&axis, y)
            );
            pen_down = true;
        }
        if !d.is_empty() {
            let dash = if dashed { " stroke-dasharray=\"6,4\"" } else { "" };
            let _ = writeln!(
                self.body,
                "<path d=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.4\"{dash}/>",
                d.trim_end()
            );
        }
        if !label.is_empty() {
            self.legend.push((label.to_string(), color, dashed));
        }
    }

    /// Histogram outline from bin starts and contents.
    fn steps(&mut self, starts: &[f64], counts: &[f64], width: f64, color: &'static str, label: &str) {
        let mut pts = Vec::with_capacity(2 * starts.len());
        for (&s, &c) in starts.iter().zip(counts) {
            pts.push((s, c));
            pts.push((s + width, c));
        }
        self.path(&pts, false, color, false, label);
    }

    fn finish(self, title: &str, xlabel: &str, ylabel: &str, y2label: Option<&str>) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" \
             font-family=\"Helvetica, Arial, sans-serif\" font-size=\"12\">"
        );
        let _ = writeln!(s, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
        let (x0, x1, y0, y1) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
        let _ = writeln!(
            s,
            "<rect x=\"{x0}\" y=\"{y0}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#333\"/>",
            x1 - x0,
            y1 - y0
        );
        for t in self.x.ticks() {
            let x = self.px(t);
            let _ = writeln!(
                s,
                "<line x1=\"{x:.2}\" y1=\"{y1}\" x2=\"{x:.2}\" y2=\"{}\" stroke=\"#333\"/><text x=\"{x:.2}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
                y1 + 5.0,
                y1 + 19.0,
                fmt_tick(t)
            );
        }
        for t in self.y.ticks() {
            let y = self.py(&self.y, t);
            let _ = writeln!(
                s,
                "<line x1=\"{}\" y1=\"{y:.2}\" x2=\"{x0}\" y2=\"{y:.2}\" stroke=\"#333\"/><text x=\"{}\" y=\"{:.2}\" text-anchor=\"end\">{}</text>",
                x0 - 5.0,
                x0 - 8.0,
                y + 4.0,
                fmt_tick(t)
            );
        }
        if let Some(a2) = self.y2 {
            for t in a2.ticks() {
                let y = self.py(&a2, t);
                let _ = writeln!(
                    s,
                    "<line x1=\"{x1}\" y1=\"{y:.2}\" x2=\"{}\" y2=\"{y:.2}\" stroke=\"#333\"/><text x=\"{}\" y=\"{:.2}\">{}</text>",
                    x1 + 5.0,
                    x1 + 8.0,
                    y + 4.0,
                    fmt_tick(t)
                );
            }
        }
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">{}</text>",
            0.5 * (x0 + x1),
            escape(title)
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
            0.5 * (x0 + x1),
            H - 14.0,
            escape(xlabel)
        );
        let _ = writeln!(
            s,
            "<text transform=\"translate(18,{:.1}) rotate(-90)\" text-anchor=\"middle\">{}</text>",
            0.5 * (y0 + y1),
            escape(ylabel)
        );
        if let Some(l) = y2label {
            let _ = writeln!(
                s,
                "<text transform=\"translate({},{:.1}) rotate(90)\" text-anchor=\"middle\">{}</text>",
                W - 16.0,
                0.5 * (y0 + y1),
                escape(l)
            );
        }
        let _ = writeln!(s, "<g clip-path=\"none\">\n{}</g>", self.body);
        for (i, (label, color, dashed)) in self.legend.iter().enumerate() {
            let y = y0 + 16.0 + 16.0 * i as f64;
            let dash = if *dashed { " stroke-dasharray=\"6,4\"" } else { "" };
            let _ = writeln!(
                s,
                "<line x1=\"{}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"{color}\" stroke-width=\"2\"{dash}/><text x=\"{}\" y=\"{}\">{}</text>",
                x1 - 170.0,
                x1 - 148.0,
                x1 - 142.0,
                y + 4.0,
                escape(label)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| "plot".into(), |s| s.to_string_lossy().into_owned())
}

/// Sibling file `<prefix><label>.<ext>` for a `hist_<label>.csv` input.
fn sibling(path: &Path, prefix: &str, ext: &str) -> Option<PathBuf> {
    let label = stem(path).strip_prefix("hist_")?.to_string();
    let p = path.with_file_name(format!("{prefix}{label}.{ext}"));
    p.exists().then_some(p)
}

/// End of the populated part of a histogram, with a little margin.
fn populated_end(starts: &[f64], counts: &[f64], bw: f64) -> f64 {
    let end = starts.last().map_or(1.0, |s| s + bw);
    match counts.iter().rposition(|&c| c > 0.0) {
        Some(j) => (starts[j] + bw + 0.1 * (starts[j] + bw - starts[0])).min(end),
        None => end,
    }
}

fn bin_width(starts: &[f64]) -> f64 {
    if starts.len() >= 2 {
        starts[1] - starts[0]
    } else {
        1.0
    }
}

fn histogram_svg(path: &Path, t: &Table) -> Result<String, PlotError> {
    let starts = t.column(0);
    let counts = t.column(1);
    let bw = bin_width(&starts);
    let expected = match sibling(path, "expected_", "csv") {
        Some(p) => Some(read_table(&p)?),
        None => None,
    };
    let fit = sibling(path, "fit_", "txt")
        .and_then(|p| std::fs::read_to_string(p).ok())
        .and_then(|s| FitResult::read_text(&s).ok());
    let x_end = populated_end(&starts, &counts, bw);
    let x = Axis::new(starts.first().copied().into_iter().chain([x_end]), false, false);
    let y = Axis::new(
        counts.iter().copied().chain(expected.iter().flat_map(|e| e.column(1))),
        false,
        true,
    );
    let mut c = Canvas::new(x, y, None);
    c.steps(&starts, &counts, bw, COLORS[0], "counts");
    if let Some(e) = &expected {
        let pts: Vec<(f64, f64)> = e.rows.iter().map(|r| (r[0] + 0.5 * bw, r[1])).collect();
        c.path(&pts, false, COLORS[6], true, "expected");
    }
    if let Some(f) = &fit {
        let (a, b) = f.range;
        let n = 400;
        let pts: Vec<(f64, f64)> = (0..=n)
            .map(|i| a + (b - a) * i as f64 / n as f64)
            .map(|t| (t, f.evaluate(t)))
            .collect();
        c.path(&pts, false, COLORS[1], false, &format!("{} fit", f.model));
    }
    Ok(c.finish(&stem(path), "time in gate (ns)", "counts per bin", None))
}

fn tradeoff_svg(path: &Path, t: &Table) -> String {
    let finite: Vec<&Vec<f64>> = t.rows.iter().filter(|r| r[0].is_finite()).collect();
    let x = Axis::new(finite.iter().map(|r| r[0]), true, false);
    let y = Axis {
        lo: 0.0,
        hi: 1.05,
        log: false,
    };
    let y2 = Axis::new(finite.iter().map(|r| r[5]), false, true);
    let mut c = Canvas::new(x, y, Some(y2));
    let col = |i: usize| finite.iter().map(|r| (r[0], r[i])).collect::<Vec<_>>();
    c.path(&col(2), false, COLORS[0], false, "indist (exact)");
    c.path(&col(3), false, COLORS[0], true, "indist (simple)");
    c.path(&col(4), false, COLORS[2], false, "fraction");
    c.path(&col(5), true, COLORS[1], false, "rate (right)");
    c.finish(
        &stem(path),
        "window FWHM (ns)",
        "indistinguishability / fraction",
        Some("rate (counts/s)"),
    )
}

fn xy_svg(path: &Path, t: &Table, xi: usize, yi: usize, xlabel: &str, ylabel: &str, step: bool) -> String {
    let xs = t.column(xi);
    let ys = t.column(yi);
    let c0 = Axis::new(xs.iter().copied(), false, false);
    let mut c = Canvas::new(c0, Axis::new(ys.iter().copied(), false, true), None);
    if step {
        c.steps(&xs, &ys, bin_width(&xs), COLORS[0], "");
    } else {
        let pts: Vec<(f64, f64)> = xs.into_iter().zip(ys).collect();
        c.path(&pts, false, COLORS[0], false, "");
    }
    c.finish(&stem(path), xlabel, ylabel, None)
}

fn timestamps_svg(path: &Path, t: &Table) -> String {
    let times = t.column(1);
    let bw = 0.05;
    let hi = times.iter().copied().fold(0.0f64, f64::max);
    let n = ((hi / bw).ceil() as usize).max(1);
    let mut counts = vec![0.0; n + 1];
    for v in times.iter().filter(|v| **v >= 0.0) {
        counts[((v / bw) as usize).min(n)] += 1.0;
    }
    let starts: Vec<f64> = (0..=n).map(|j| j as f64 * bw).collect();
    let x = Axis::new(starts.iter().copied(), false, false);
    let mut c = Canvas::new(x, Axis::new(counts.iter().copied(), false, true), None);
    c.steps(&starts, &counts, bw, COLORS[0], "");
    c.finish(&stem(path), "time in gate (ns)", "counts per 50 ps", None)
}

/// Renders one CSV into an SVG document.
pub fn render(path: &Path) -> Result<String, PlotError> {
    let t = read_table(path)?;
    let kind = classify(&t.header).ok_or_else(|| PlotError::UnknownFormat {
        path: path.display().to_string(),
        header: t.header.clone(),
    })?;
    Ok(match kind {
        CsvKind::Histogram => histogram_svg(path, &t)?,
        CsvKind::Expected => xy_svg(path, &t, 0, 1, "time in gate (ns)", "expected counts", true),
        CsvKind::Envelope => xy_svg(path, &t, 0, 1, "time (ns)", "transmission", false),
        CsvKind::Wavepacket => xy_svg(path, &t, 0, 1, "time (ns)", "Re amplitude", false),
        CsvKind::Timestamps => timestamps_svg(path, &t),
        CsvKind::Tradeoff => tradeoff_svg(path, &t),
    })
}

fn write_svg(out: &Path, svg: &str) -> Result<(), PlotError> {
    std::fs::write(out, svg).map_err(|source| PlotError::Io {
        path: out.display().to_string(),
        source,
    })
}

/// One SVG per input CSV, named after it, in `out_dir`.
pub fn emit_plots(csv_paths: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>, PlotError> {
    std::fs::create_dir_all(out_dir).map_err(|source| PlotError::Io {
        path: out_dir.display().to_string(),
        source,
    })?;
    let mut written = Vec::new();
    for p in csv_paths {
        let svg = render(p)?;
        let out = out_dir.join(format!("{}.svg", stem(p)));
        write_svg(&out, &svg)?;
        written.push(out);
    }
    Ok(written)
}

/// All histograms of a run on one set of axes (log counts).
pub fn overlay_plot(csv_paths: &[PathBuf], out: &Path, title: &str) -> Result<PathBuf, PlotError> {
    let mut series = Vec::new();
    for p in csv_paths {
        let t = read_table(p)?;
        if classify(&t.header) != Some(CsvKind::Histogram) {
            return Err(PlotError::UnknownFormat {
                path: p.display().to_string(),
                header: t.header,
            });
        }
        series.push((
            stem(p).trim_start_matches("hist_").to_string(),
            t.column(0),
            t.column(1),
        ));
    }
    let x_end = series
        .iter()
        .map(|s| populated_end(&s.1, &s.2, bin_width(&s.1)))
        .fold(f64::NEG_INFINITY, f64::max);
    let x = Axis::new(
        series.iter().filter_map(|s| s.1.first().copied()).chain([x_end]),
        false,
        false,
    );
    let y = Axis::new(series.iter().flat_map(|s| s.2.iter().copied()), true, false);
    let mut c = Canvas::new(x, y, None);
    for (i, (label, starts, counts)) in series.iter().enumerate() {
        // Empty bins break the line rather than dropping to the log floor.
        let bw = bin_width(starts);
        let pts: Vec<(f64, f64)> = starts
            .iter()
            .zip(counts)
            .map(|(&s, &c)| (s + 0.5 * bw, if c > 0.0 { c } else { f64::NAN }))
            .collect();
        c.path(&pts, false, COLORS[i % COLORS.len()], false, label);
    }
    let svg = c.finish(title, "time in gate (ns)", "counts per bin", None);
    write_svg(out, &svg)?;
    Ok(out.to_path_buf())
}
