//! Static SVG line charts of metrics CSVs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use decom::Error;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 160.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 44.0;
const COLORS: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#17becf"];

/// Mean over seeds of one metric per episode, keyed by series label.
pub type Series = BTreeMap<String, BTreeMap<u64, Vec<f64>>>;

pub struct Table {
    pub metrics: Vec<String>,
    pub series: BTreeMap<String, Series>,
}

const REQUIRED: [&str; 5] = ["episode", "seed", "variant", "reward_mean", "reward_std"];

/// Reads and merges metrics files. Series are labelled by variant, prefixed
/// with the file stem when several files are given.
pub fn read_tables(paths: &[PathBuf]) -> Result<Table, Error> {
    let mut metrics: Vec<String> = vec!["reward_mean".into()];
    let mut series: BTreeMap<String, Series> = BTreeMap::new();
    for path in paths {
        let mut r = csv::Reader::from_path(path)?;
        let headers = r.headers()?.clone();
        let names: Vec<&str> = headers.iter().collect();
        let missing: Vec<&str> = REQUIRED.iter().copied().filter(|c| !names.contains(c)).collect();
        if !missing.is_empty() {
            return Err(Error::Schema(format!("{} is missing columns: {}", path.display(), missing.join(", "))));
        }
        for name in &names {
            if name.starts_with("cost_") && !metrics.iter().any(|m| m == name) {
                metrics.push(name.to_string());
            }
        }
        let col = |c: &str| names.iter().position(|n| *n == c).expect("checked above");
        let stem = path.file_stem().map_or(String::new(), |s| s.to_string_lossy().into_owned());
        for rec in r.records() {
            let rec = rec?;
            let episode: u64 = rec[col("episode")]
                .parse()
                .map_err(|_| Error::Schema(format!("bad episode value `{}`", &rec[col("episode")])))?;
            let label = if paths.len() > 1 {
                format!("{stem}: {}", &rec[col("variant")])
            } else {
                rec[col("variant")].to_string()
            };
            for m in &metrics {
                if let Some(k) = names.iter().position(|n| n == m) {
                    let v: f64 = rec[k].parse().map_err(|_| Error::Schema(format!("bad {m} value `{}`", &rec[k])))?;
                    series
                        .entry(m.clone())
                        .or_default()
                        .entry(label.clone())
                        .or_default()
                        .entry(episode)
                        .or_default()
                        .push(v);
                }
            }
        }
    }
    metrics.sort_by_key(|m| (m != "reward_mean", m.clone()));
    Ok(Table { metrics, series })
}

fn nice_step(span: f64) -> f64 {
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let r = raw / mag;
    mag * if r <= 1.0 {
        1.0
    } else if r <= 2.0 {
        2.0
    } else if r <= 5.0 {
        5.0
    } else {
        10.0
    }
}

fn fmt_tick(v: f64, step: f64) -> String {
    let digits = if step >= 1.0 { 0 } else { (-step.log10().floor()) as usize };
    let s = format!("{v:.digits$}");
    if s.starts_with('-') && s[1..].chars().all(|c| c == '0' || c == '.') {
        s[1..].to_string()
    } else {
        s
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// One chart; `bound` adds a dashed horizontal line.
pub fn render(title: &str, series: &Series, bound: Option<f64>) -> String {
    let points: Vec<(String, Vec<(f64, f64)>)> = series
        .iter()
        .map(|(label, by_ep)| {
            let pts = by_ep
                .iter()
                .map(|(&ep, vs)| (ep as f64, vs.iter().sum::<f64>() / vs.len() as f64))
                .collect();
            (label.clone(), pts)
        })
        .collect();
    let xs = points.iter().flat_map(|(_, p)| p.iter().map(|q| q.0));
    let ys = points.iter().flat_map(|(_, p)| p.iter().map(|q| q.1)).filter(|v| v.is_finite()).chain(bound);
    let (mut x0, mut x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    let (mut y0, mut y1) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), y| (a.min(y), b.max(y)));
    if !x0.is_finite() {
        (x0, x1) = (0.0, 1.0);
    }
    if !y0.is_finite() {
        (y0, y1) = (0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if y1 - y0 < 1e-12 {
        let pad = (y0.abs() * 0.1).max(0.5);
        y0 -= pad;
        y1 += pad;
    }
    let step = nice_step(y1 - y0);
    y0 = (y0 / step).floor() * step;
    y1 = (y1 / step).ceil() * step;
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" font-size="14" text-anchor="middle">{}</text>"#, LEFT + pw / 2.0, esc(title));
    let ticks = ((y1 - y0) / step).round() as usize;
    for k in 0..=ticks {
        let y = y0 + k as f64 * step;
        let py = sy(y);
        let _ = writeln!(s, r##"<line x1="{LEFT}" y1="{py:.2}" x2="{:.2}" y2="{py:.2}" stroke="#e0e0e0"/>"##, LEFT + pw);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#, LEFT - 6.0, py + 4.0, fmt_tick(y, step));
    }
    let xstep = nice_step(x1 - x0);
    let mut x = (x0 / xstep).ceil() * xstep;
    while x <= x1 + 1e-9 {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            sx(x),
            TOP + ph + 16.0,
            fmt_tick(x, xstep)
        );
        x += xstep;
    }
    let _ = writeln!(
        s,
        r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">episode</text>"#, LEFT + pw / 2.0, HEIGHT - 8.0);
    if let Some(d) = bound {
        let py = sy(d);
        let _ = writeln!(
            s,
            r##"<line class="bound" x1="{LEFT}" y1="{py:.2}" x2="{:.2}" y2="{py:.2}" stroke="#d62728" stroke-dasharray="6 4"/>"##,
            LEFT + pw
        );
        let _ = writeln!(s, r##"<text x="{:.2}" y="{:.2}" fill="#d62728">D = {d}</text>"##, LEFT + pw + 6.0, py + 4.0);
    }
    for (k, (label, pts)) in points.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let path: Vec<String> = pts
            .iter()
            .filter(|p| p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, path.join(" "));
        if path.len() == 1 {
            let (px, py) = path[0].split_once(',').expect("formatted as x,y");
            let _ = writeln!(s, r#"<circle cx="{px}" cy="{py}" r="2.5" fill="{color}"/>"#);
        }
        let ly = TOP + 20.0 + 16.0 * k as f64 + if bound.is_some() { 16.0 } else { 0.0 };
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/>"#,
            LEFT + pw + 6.0,
            LEFT + pw + 22.0
        );
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}">{}</text>"#, LEFT + pw + 26.0, ly + 4.0, esc(label));
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `reward.svg` and one `cost_j.svg` per cost column into `out`.
pub fn plot_files(paths: &[PathBuf], bounds: &[f64], out: &Path) -> Result<Vec<PathBuf>, Error> {
    let table = read_tables(paths)?;
    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    for m in &table.metrics {
        let empty = Series::new();
        let series = table.series.get(m).unwrap_or(&empty);
        let (file, title, bound) = if m == "reward_mean" {
            ("reward".to_string(), "reward".to_string(), None)
        } else {
            let j: usize = m["cost_".len()..].parse().unwrap_or(0);
            (m.clone(), format!("cost {j}"), j.checked_sub(1).and_then(|k| bounds.get(k).copied()))
        };
        let path = out.join(format!("{file}.svg"));
        fs::write(&path, render(&title, series, bound))?;
        written.push(path);
    }
    Ok(written)
}
