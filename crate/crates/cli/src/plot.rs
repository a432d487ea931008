//! SVG figures from report files: loss curves, metric bars with min–max
//! whiskers, and actor/reactor trajectory overlays with error shading.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde_json::Value;

use hoi_core::archive::write_atomic;

use crate::error::{CliError, CliResult};
use crate::report::out_root;

const TRUTH: RGBColor = RGBColor(40, 90, 170);
const MODEL: RGBColor = RGBColor(200, 70, 40);
const BAND: RGBColor = RGBColor(240, 160, 120);
const BAR: RGBColor = RGBColor(90, 140, 200);

pub struct Figure {
    pub name: String,
    pub svg: String,
}

fn plot_err(e: impl std::fmt::Display) -> CliError {
    CliError::Other(format!("plot: {e}"))
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    let span = hi - lo;
    let pad = if span > 0.0 { 0.08 * span } else { 0.5 * lo.abs().max(1.0) };
    (lo - pad, hi + pad)
}

/// Puts a provenance comment right after the root element's start tag.
fn stamp(svg: String, provenance: &str) -> String {
    let safe = provenance.replace("--", "- -");
    match svg.find('>') {
        Some(i) => format!("{}\n<!-- {safe} -->{}", &svg[..=i], &svg[i + 1..]),
        None => svg,
    }
}

/// Shaded band label and `(x, lo, hi)` points.
type Band<'a> = (&'a str, Vec<(f64, f64, f64)>);

/// Bar label, height and optional `(min, max)` whisker.
type Bar = (String, f64, Option<(f64, f64)>);

struct Series {
    label: String,
    points: Vec<(f64, f64)>,
    color: RGBColor,
}

/// Line chart; `band` is `(x, lo, hi)` shaded behind the lines.
fn line_chart(title: &str, x_desc: &str, y_desc: &str, series: &[Series], band: Option<Band>) -> CliResult<String> {
    let xs = series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
    let mut ys: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.1)).collect();
    if let Some((_, b)) = &band {
        ys.extend(b.iter().flat_map(|&(_, lo, hi)| [lo, hi]));
    }
    let (x0, x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    let (y0, y1) = ys.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &y| (a.min(y), b.max(y)));
    let (y0, y1) = padded(y0, y1);
    let x1 = if x1 > x0 { x1 } else { x0 + 1.0 };
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, (720, 420)).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 18))
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(64)
            .build_cartesian_2d(x0..x1, y0..y1)
            .map_err(plot_err)?;
        chart.configure_mesh().x_desc(x_desc).y_desc(y_desc).draw().map_err(plot_err)?;
        if let Some((label, b)) = band {
            let mut poly: Vec<(f64, f64)> = b.iter().map(|&(x, _, hi)| (x, hi)).collect();
            poly.extend(b.iter().rev().map(|&(x, lo, _)| (x, lo)));
            chart
                .draw_series(std::iter::once(Polygon::new(poly, BAND.mix(0.5).filled())))
                .map_err(plot_err)?
                .label(label)
                .legend(|(x, y)| Rectangle::new([(x, y - 5), (x + 16, y + 5)], BAND.mix(0.5).filled()));
        }
        for s in series {
            let color = s.color;
            chart
                .draw_series(LineSeries::new(s.points.iter().copied(), color.stroke_width(2)))
                .map_err(plot_err)?
                .label(s.label.as_str())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(plot_err)?;
        root.present().map_err(plot_err)?;
    }
    Ok(svg)
}

/// Bars at the mean with optional `(min, max)` whiskers.
fn bar_chart(title: &str, y_desc: &str, bars: &[Bar]) -> CliResult<String> {
    let n = bars.len();
    let vals = bars.iter().flat_map(|(_, m, s)| {
        let (lo, hi) = s.unwrap_or((*m, *m));
        [*m, lo, hi]
    });
    let (lo, hi) = vals.fold((0.0f64, 0.0f64), |(a, b), v| (a.min(v), b.max(v)));
    let (y0, y1) = padded(lo, hi);
    let labels: Vec<String> = bars.iter().map(|b| b.0.clone()).collect();
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, (720, 420)).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 18))
            .margin(12)
            .x_label_area_size(48)
            .y_label_area_size(64)
            .build_cartesian_2d(-0.5f64..n as f64 - 0.5, y0.min(0.0)..y1)
            .map_err(plot_err)?;
        chart
            .configure_mesh()
            .disable_x_mesh()
            .x_labels(n)
            .x_label_formatter(&|x| {
                let i = x.round();
                if (x - i).abs() < 1e-6 && i >= 0.0 {
                    labels.get(i as usize).cloned().unwrap_or_default()
                } else {
                    String::new()
                }
            })
            .y_desc(y_desc)
            .draw()
            .map_err(plot_err)?;
        chart
            .draw_series(bars.iter().enumerate().map(|(i, (_, m, _))| {
                let x = i as f64;
                Rectangle::new([(x - 0.3, 0.0), (x + 0.3, *m)], BAR.filled())
            }))
            .map_err(plot_err)?;
        for (i, (_, _, s)) in bars.iter().enumerate() {
            if let Some((lo, hi)) = s {
                let x = i as f64;
                let whisker = vec![
                    vec![(x, *lo), (x, *hi)],
                    vec![(x - 0.1, *lo), (x + 0.1, *lo)],
                    vec![(x - 0.1, *hi), (x + 0.1, *hi)],
                ];
                chart
                    .draw_series(whisker.into_iter().map(|p| PathElement::new(p, BLACK.stroke_width(2))))
                    .map_err(plot_err)?;
            }
        }
        root.present().map_err(plot_err)?;
    }
    Ok(svg)
}

fn slug(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect()
}

fn provenance(rows: &[&Value]) -> String {
    let mut hashes: Vec<String> = rows.iter().filter_map(|r| r["config_hash"].as_str().map(String::from)).collect();
    hashes.sort();
    hashes.dedup();
    let mut seeds: Vec<u64> = rows
        .iter()
        .flat_map(|r| {
            let one = r["seed"].as_u64().into_iter();
            let many = r["seeds"].as_array().into_iter().flatten().filter_map(Value::as_u64);
            one.chain(many).collect::<Vec<_>>()
        })
        .collect();
    seeds.sort_unstable();
    seeds.dedup();
    let version = rows.iter().find_map(|r| r["version"].as_str()).unwrap_or("unknown");
    format!("config_hash: {} seed: {seeds:?} version: {version}", hashes.join(","))
}

fn loss_figure(stem: &str, rows: &[&Value]) -> CliResult<Option<Figure>> {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|r| Some((r["step"].as_f64()?, r["loss"].as_f64()?)))
        .filter(|p| p.1.is_finite())
        .collect();
    if pts.is_empty() {
        return Ok(None);
    }
    let s = [Series {
        label: "training loss".into(),
        points: pts,
        color: MODEL,
    }];
    let svg = line_chart(&format!("{stem}: training loss"), "step", "loss", &s, None)?;
    Ok(Some(Figure {
        name: format!("{stem}_loss"),
        svg: stamp(svg, &provenance(rows)),
    }))
}

fn eval_figures(stem: &str, rows: &[&Value], warn: &mut Vec<String>) -> CliResult<Vec<Figure>> {
    let mut names: Vec<String> = rows
        .iter()
        .flat_map(|r| r["metrics"].as_object().into_iter().flat_map(|m| m.keys().cloned()))
        .collect();
    names.sort();
    names.dedup();
    let mut out = Vec::new();
    for name in names {
        let bars: Vec<Bar> = rows
            .iter()
            .filter_map(|r| Some((format!("seed {}", r["seed"].as_u64()?), r["metrics"][&name].as_f64()?, None)))
            .collect();
        if bars.is_empty() {
            warn.push(format!("{stem}: no values for {name}, skipped"));
            continue;
        }
        let svg = bar_chart(&format!("{stem}: {name}"), &name, &bars)?;
        out.push(Figure {
            name: format!("{stem}_{}", slug(&name)),
            svg: stamp(svg, &provenance(rows)),
        });
    }
    Ok(out)
}

fn ablate_figures(stem: &str, rows: &[&Value], warn: &mut Vec<String>) -> CliResult<Vec<Figure>> {
    let mut sections: BTreeMap<(String, String), Vec<&Value>> = BTreeMap::new();
    for r in rows {
        let fam = r["family"].as_str().unwrap_or("grid").to_string();
        for name in r["metrics"].as_object().into_iter().flat_map(|m| m.keys()) {
            sections.entry((fam.clone(), name.clone())).or_default().push(r);
        }
        if r["metrics"].as_object().is_none_or(|m| m.is_empty()) {
            warn.push(format!("{stem}: cell {} has no metrics, skipped", r["cell"]));
        }
    }
    let mut out = Vec::new();
    for ((fam, name), cells) in sections {
        let bars: Vec<Bar> = cells
            .iter()
            .filter_map(|r| {
                let s = &r["metrics"][&name];
                Some((r["cell"].as_str()?.to_string(), s["mean"].as_f64()?, Some((s["min"].as_f64()?, s["max"].as_f64()?))))
            })
            .collect();
        let svg = bar_chart(&format!("{fam}: {name} (mean, min-max)"), &name, &bars)?;
        out.push(Figure {
            name: format!("{stem}_{}_{}", slug(&fam), slug(&name)),
            svg: stamp(svg, &provenance(&cells)),
        });
    }
    Ok(out)
}

fn trajectory_figure(stem: &str, row: &Value, idx: usize) -> CliResult<Option<Figure>> {
    let read = |k: &str| -> Option<Vec<Vec<f64>>> {
        row[k]
            .as_array()?
            .iter()
            .map(|r| r.as_array()?.iter().map(Value::as_f64).collect())
            .collect()
    };
    let (Some(truth), Some(gen)) = (read("truth"), read("generated")) else {
        return Ok(None);
    };
    if truth.is_empty() || truth.len() != gen.len() || truth[0].is_empty() {
        return Ok(None);
    }
    let err: Vec<f64> = truth
        .iter()
        .zip(&gen)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
        .collect();
    let pts = |m: &[Vec<f64>]| m.iter().enumerate().map(|(t, r)| (t as f64, r[0])).collect::<Vec<_>>();
    let band: Vec<(f64, f64, f64)> = gen.iter().zip(&err).enumerate().map(|(t, (r, e))| (t as f64, r[0] - e, r[0] + e)).collect();
    let s = [
        Series {
            label: "ground truth".into(),
            points: pts(&truth),
            color: TRUTH,
        },
        Series {
            label: "generated".into(),
            points: pts(&gen),
            color: MODEL,
        },
    ];
    let svg = line_chart(&format!("{stem}: reactor channel 0"), "frame", "value", &s, Some(("per-frame error", band)))?;
    Ok(Some(Figure {
        name: format!("{stem}_trajectory{idx}"),
        svg: stamp(svg, &provenance(&[row])),
    }))
}

/// Report path relative to the output root (or its last three components),
/// without extension, so figures from different runs do not collide.
fn report_stem(path: &Path) -> String {
    let root = out_root();
    let rel = path.strip_prefix(&root).ok().map(Path::to_path_buf).unwrap_or_else(|| {
        let parts: Vec<_> = path.components().collect();
        parts[parts.len().saturating_sub(3)..].iter().collect()
    });
    rel.with_extension("").to_string_lossy().to_string()
}

/// Figures for one report file; problems that only lose a figure are
/// returned as warnings.
pub fn figures_for(path: &Path) -> CliResult<(Vec<Figure>, Vec<String>)> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let stem = slug(&report_stem(path));
    let mut warn = Vec::new();
    let mut by_kind: BTreeMap<String, Vec<Value>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        match serde_json::from_str::<Value>(line) {
            Ok(v) => by_kind.entry(v["kind"].as_str().unwrap_or("").to_string()).or_default().push(v),
            Err(e) => warn.push(format!("{}:{}: {e}", path.display(), i + 1)),
        }
    }
    let mut figs = Vec::new();
    for (kind, rows) in &by_kind {
        let refs: Vec<&Value> = rows.iter().collect();
        match kind.as_str() {
            "train_log" => match loss_figure(&stem, &refs)? {
                Some(f) => figs.push(f),
                None => warn.push(format!("{stem}: no loss series, skipped")),
            },
            "eval" => figs.extend(eval_figures(&stem, &refs, &mut warn)?),
            "ablate_cell" => figs.extend(ablate_figures(&stem, &refs, &mut warn)?),
            "trajectory" => {
                for (i, r) in rows.iter().enumerate() {
                    match trajectory_figure(&stem, r, i)? {
                        Some(f) => figs.push(f),
                        None => warn.push(format!("{stem}: trajectory {i} lacks matching series, skipped")),
                    }
                }
            }
            "ablate_run" => {}
            other => warn.push(format!("{stem}: unknown record kind {other:?}, skipped")),
        }
    }
    Ok((figs, warn))
}

/// Writes every figure as `<out>/<name>.svg`.
pub fn plot_reports(paths: &[PathBuf], out: &Path) -> CliResult<(Vec<PathBuf>, Vec<String>)> {
    let mut written = Vec::new();
    let mut warnings = Vec::new();
    for p in paths {
        let (figs, warn) = figures_for(p)?;
        warnings.extend(warn);
        for f in figs {
            let path = out.join(format!("{}.svg", f.name));
            write_atomic(&path, f.svg.as_bytes())?;
            written.push(path);
        }
    }
    Ok((written, warnings))
}
