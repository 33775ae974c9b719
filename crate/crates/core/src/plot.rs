//! Deterministic SVG charts rendered from `metrics.csv` files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{AmssError, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// A parsed `metrics.csv`.
#[derive(Clone, Debug)]
pub struct MetricsTable {
    pub source: PathBuf,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl MetricsTable {
    pub fn parse(text: &str, source: &Path) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| AmssError::Plot(format!("{}: empty metrics file", source.display())))?;
        let columns: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let row: Vec<String> = line.split(',').map(|s| s.trim().to_string()).collect();
            if row.len() != columns.len() {
                return Err(AmssError::Parse {
                    path: source.to_path_buf(),
                    line: i + 2,
                    msg: format!("{} fields, header has {}", row.len(), columns.len()),
                });
            }
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(AmssError::Plot(format!("{}: metrics file has no rows", source.display())));
        }
        Ok(Self {
            source: source.to_path_buf(),
            columns,
            rows,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?, path)
    }

    fn index(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| AmssError::Plot(format!("{}: missing column `{name}`", self.source.display())))
    }

    pub fn numeric(&self, name: &str) -> Result<Vec<f64>> {
        let j = self.index(name)?;
        self.rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                r[j].parse::<f64>().map_err(|_| AmssError::Parse {
                    path: self.source.clone(),
                    line: i + 2,
                    msg: format!("column `{name}` holds {:?}", r[j]),
                })
            })
            .collect()
    }

    pub fn text(&self, name: &str) -> Option<&str> {
        let j = self.columns.iter().position(|c| c == name)?;
        Some(&self.rows[0][j])
    }

    /// Columns named `{prefix}_0`, `{prefix}_1`, … in order.
    pub fn indexed(&self, prefix: &str) -> Vec<String> {
        (0..)
            .map(|k| format!("{prefix}_{k}"))
            .take_while(|c| self.columns.contains(c))
            .collect()
    }
}

pub type Series = (String, Vec<(f64, f64)>);

fn fmt(v: f64) -> String {
    format!("{v:.2}")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Renders a line chart with one `<polyline>` per series.
pub fn line_chart(title: &str, y_label: &str, series: &[Series]) -> Result<String> {
    let points: Vec<(f64, f64)> = series.iter().flat_map(|(_, p)| p.iter().copied()).collect();
    if points.is_empty() {
        return Err(AmssError::Plot(format!("{title}: nothing to plot")));
    }
    if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(AmssError::Plot(format!("{title}: non-finite value")));
    }
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let sy = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#,
        w = WIDTH,
        h = HEIGHT
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{}</text>"#,
        fmt(WIDTH / 2.0),
        escape(title)
    );
    let (left, right, top, bottom) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(
        s,
        r#"<path d="M{l} {t} L{l} {b} L{r} {b}" fill="none" stroke="black" stroke-width="1"/>"#,
        l = fmt(left),
        t = fmt(top),
        b = fmt(bottom),
        r = fmt(right)
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let yv = y0 + f * (y1 - y0);
        let xv = x0 + f * (x1 - x0);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="end">{}</text>"#,
            fmt(left - 6.0),
            fmt(sy(yv) + 4.0),
            format_tick(yv)
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">{}</text>"#,
            fmt(sx(xv)),
            fmt(bottom + 16.0),
            format_tick(xv)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">epoch</text>"#,
        fmt(WIDTH / 2.0),
        fmt(HEIGHT - 12.0)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{y}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 16 {y})">{}</text>"#,
        escape(y_label),
        y = fmt(HEIGHT / 2.0)
    );
    for (i, (name, pts)) in series.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = pts.iter().map(|&(x, y)| format!("{},{}", fmt(sx(x)), fmt(sy(y)))).collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{colour}" stroke-width="2" points="{}"><title>{}</title></polyline>"#,
            coords.join(" "),
            escape(name)
        );
        let ly = top + 4.0 + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{y}" x2="{}" y2="{y}" stroke="{colour}" stroke-width="2"/>"#,
            fmt(right - 150.0),
            fmt(right - 130.0),
            y = fmt(ly)
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11">{}</text>"#,
            fmt(right - 124.0),
            fmt(ly + 4.0),
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn format_tick(v: f64) -> String {
    if v.abs() >= 100.0 || v == v.trunc() {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

fn label(table: &MetricsTable, dir: &Path, taken: &mut Vec<String>) -> String {
    let base = table
        .text("strategy")
        .map(str::to_string)
        .unwrap_or_else(|| dir.file_name().map_or("run".into(), |n| n.to_string_lossy().into_owned()));
    let mut name = base.clone();
    let mut i = 2;
    while taken.contains(&name) {
        name = format!("{base} ({i})");
        i += 1;
    }
    taken.push(name.clone());
    name
}

/// The three charts as `(file name, svg)` pairs, one series per run.
pub fn render_plots(tables: &[(PathBuf, MetricsTable)]) -> Result<Vec<(&'static str, String)>> {
    if tables.is_empty() {
        return Err(AmssError::Plot("no runs given".into()));
    }
    let mut loss = Vec::new();
    let mut imbalance = Vec::new();
    let mut branches = Vec::new();
    let mut taken = Vec::new();
    for (dir, t) in tables {
        let name = label(t, dir, &mut taken);
        let epochs = t.numeric("epoch")?;
        let pair = |ys: Vec<f64>| epochs.iter().copied().zip(ys).collect::<Vec<_>>();
        loss.push((name.clone(), pair(t.numeric("train_loss")?)));
        imbalance.push((name.clone(), pair(t.numeric("imbalance")?)));
        let cols = t.indexed("branch_accuracy");
        if cols.is_empty() {
            return Err(AmssError::Plot(format!(
                "{}: missing column `branch_accuracy_0`",
                t.source.display()
            )));
        }
        for (k, c) in cols.iter().enumerate() {
            branches.push((format!("{name} m{k}"), pair(t.numeric(c)?)));
        }
    }
    Ok(vec![
        ("loss.svg", line_chart("Training loss", "loss", &loss)?),
        ("imbalance.svg", line_chart("Imbalance degree u1/u2", "u1 / u2", &imbalance)?),
        ("branches.svg", line_chart("Unimodal branch accuracy", "test accuracy", &branches)?),
    ])
}

/// Reads `metrics.csv` from each run directory and writes the charts into
/// `out_dir`. Nothing is written unless every input parses.
pub fn emit_plots(run_dirs: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>> {
    let tables = run_dirs
        .iter()
        .map(|d| Ok((d.clone(), MetricsTable::load(&d.join("metrics.csv"))?)))
        .collect::<Result<Vec<_>>>()?;
    let charts = render_plots(&tables)?;
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for (name, svg) in charts {
        let p = out_dir.join(name);
        fs::write(&p, svg)?;
        written.push(p);
    }
    Ok(written)
}
