//! Convergence-curve plotting: overlays a metric across runs as an SVG and
//! merges the metrics into one tidy CSV.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};

use crate::trainer::METRICS_FORMAT;

#[derive(Clone, Debug)]
pub struct MetricsTable {
    pub run: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

/// Read a metrics CSV produced by training (format line + header + rows).
pub fn read_metrics(path: &Path) -> Result<MetricsTable> {
    let text = fs::read_to_string(path).with_context(|| format!("read {}", path.display()))?;
    let mut lines = text.lines();
    let format_line = lines.next().unwrap_or_default();
    if format_line.trim() != format!("#format={METRICS_FORMAT}") {
        bail!(
            "{}: unsupported metrics format line {format_line:?}",
            path.display()
        );
    }
    let header = lines
        .next()
        .with_context(|| format!("{}: missing header", path.display()))?;
    let columns: Vec<String> = header.split(',').map(str::to_string).collect();
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split(',')
            .map(|v| {
                if v == "NaN" || v.is_empty() {
                    Ok(f64::NAN)
                } else {
                    v.parse::<f64>()
                        .with_context(|| format!("{}:{}: bad number {v:?}", path.display(), n + 3))
                }
            })
            .collect::<Result<_>>()?;
        if vals.len() != columns.len() {
            bail!(
                "{}:{}: {} columns, expected {}",
                path.display(),
                n + 3,
                vals.len(),
                columns.len()
            );
        }
        rows.push(vals);
    }
    let run = path
        .parent()
        .and_then(|p| p.file_name())
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| path.display().to_string());
    Ok(MetricsTable { run, columns, rows })
}

/// Merge tables into tidy rows (run, epoch, metric, value). Every non-epoch
/// column of every row appears exactly once.
pub fn tidy_rows(tables: &[MetricsTable]) -> Vec<(String, usize, String, f64)> {
    let mut out = Vec::new();
    for t in tables {
        let epoch_col = t.columns.iter().position(|c| c == "epoch").unwrap_or(0);
        for row in &t.rows {
            let epoch = row[epoch_col] as usize;
            for (c, v) in row.iter().enumerate() {
                if c == epoch_col {
                    continue;
                }
                out.push((t.run.clone(), epoch, t.columns[c].clone(), *v));
            }
        }
    }
    out
}

pub fn write_tidy_csv(path: &Path, tables: &[MetricsTable]) -> Result<()> {
    let mut csv = String::from("run,epoch,metric,value\n");
    for (run, epoch, metric, value) in tidy_rows(tables) {
        let v = if value.is_nan() {
            "NaN".to_string()
        } else {
            format!("{value:.6}")
        };
        csv.push_str(&format!("{run},{epoch},{metric},{v}\n"));
    }
    fs::write(path, csv).with_context(|| format!("write {}", path.display()))
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
];

/// Render one metric against epochs for every run as an SVG line chart.
pub fn render_svg(tables: &[MetricsTable], metric: &str) -> Result<String> {
    let (width, height) = (720.0, 440.0);
    let (ml, mr, mt, mb) = (64.0, 16.0, 24.0, 48.0);
    let mut series: Vec<(&str, Vec<(f64, f64)>)> = Vec::new();
    let mut max_epoch: f64 = 1.0;
    let mut max_val: f64 = 1e-9;
    for t in tables {
        let epoch_col = t
            .columns
            .iter()
            .position(|c| c == "epoch")
            .with_context(|| format!("{}: no epoch column", t.run))?;
        let col = t
            .columns
            .iter()
            .position(|c| c == metric)
            .with_context(|| format!("{}: no column {metric:?}", t.run))?;
        let points: Vec<(f64, f64)> = t
            .rows
            .iter()
            .filter(|r| r[col].is_finite())
            .map(|r| (r[epoch_col], r[col]))
            .collect();
        for &(e, v) in &points {
            max_epoch = max_epoch.max(e);
            max_val = max_val.max(v);
        }
        series.push((&t.run, points));
    }
    let max_val = if metric.starts_with("map") {
        1.0
    } else {
        max_val * 1.05
    };
    let sx = |e: f64| ml + (e / max_epoch) * (width - ml - mr);
    let sy = |v: f64| height - mb - (v / max_val) * (height - mt - mb);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {width} {height}\" \
font-family=\"sans-serif\" font-size=\"12\">\n<rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n"
    ));
    // axes
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        height - mb,
        width - mr,
        height - mb
    ));
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{}\" stroke=\"black\"/>\n",
        height - mb
    ));
    for i in 0..=5 {
        let v = max_val * i as f64 / 5.0;
        let y = sy(v);
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{y}\" x2=\"{ml}\" y2=\"{y}\" stroke=\"black\"/>\
<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{v:.2}</text>\n",
            ml - 4.0,
            ml - 8.0,
            y + 4.0
        ));
        let e = (max_epoch * i as f64 / 5.0).round();
        let x = sx(e);
        svg.push_str(&format!(
            "<line x1=\"{x}\" y1=\"{}\" x2=\"{x}\" y2=\"{}\" stroke=\"black\"/>\
<text x=\"{x}\" y=\"{}\" text-anchor=\"middle\">{e:.0}</text>\n",
            height - mb,
            height - mb + 4.0,
            height - mb + 18.0
        ));
    }
    // axis labels
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">epoch</text>\n",
        (ml + width - mr) / 2.0,
        height - 10.0
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{metric}</text>\n",
        (mt + height - mb) / 2.0,
        (mt + height - mb) / 2.0
    ));
    // curves + legend
    for (i, (run, points)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if !points.is_empty() {
            let path: Vec<String> = points
                .iter()
                .map(|&(e, v)| format!("{:.2},{:.2}", sx(e), sy(v)))
                .collect();
            svg.push_str(&format!(
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
                path.join(" ")
            ));
        }
        let ly = mt + 16.0 * i as f64;
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"3\"/>\
<text x=\"{}\" y=\"{}\">{run}</text>\n",
            ml + 10.0,
            ml + 34.0,
            ml + 40.0,
            ly + 4.0
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// The `plot` command: SVG chart plus tidy CSV.
pub fn emit_curves(
    run_csvs: &[std::path::PathBuf],
    metric: &str,
    svg_out: &Path,
    tidy_out: Option<&Path>,
) -> Result<()> {
    if run_csvs.is_empty() {
        bail!("no metrics CSVs given");
    }
    let tables: Vec<MetricsTable> = run_csvs
        .iter()
        .map(|p| read_metrics(p))
        .collect::<Result<_>>()?;
    let svg = render_svg(&tables, metric)?;
    fs::write(svg_out, svg).with_context(|| format!("write {}", svg_out.display()))?;
    if let Some(tidy) = tidy_out {
        write_tidy_csv(tidy, &tables)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_csv(dir: &Path, run: &str) -> std::path::PathBuf {
        let d = dir.join(run);
        fs::create_dir_all(&d).unwrap();
        let p = d.join("metrics.csv");
        fs::write(
            &p,
            format!(
                "#format={METRICS_FORMAT}\nepoch,total,map_full\n1,2.5,0.1\n2,1.5,NaN\n3,1.0,0.6\n"
            ),
        )
        .unwrap();
        p
    }

    #[test]
    fn metrics_round_trip_and_tidy_count() {
        let dir = std::env::temp_dir().join(format!("sovstg-plot-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        let p1 = sample_csv(&dir, "run-a");
        let p2 = sample_csv(&dir, "run-b");
        let t1 = read_metrics(&p1).unwrap();
        assert_eq!(t1.run, "run-a");
        assert_eq!(t1.rows.len(), 3);
        assert!(t1.rows[1][2].is_nan());
        let tables = vec![t1, read_metrics(&p2).unwrap()];
        // tidy rows = runs × epochs × non-epoch metrics
        assert_eq!(tidy_rows(&tables).len(), 2 * 3 * 2);
        let svg = render_svg(&tables, "map_full").unwrap();
        assert!(svg.contains("<polyline"));
        assert!(svg.contains("run-a") && svg.contains("run-b"));
        assert!(svg.contains("epoch"));
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn missing_metric_is_an_error_naming_the_column() {
        let dir = std::env::temp_dir().join(format!("sovstg-plot2-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        let p = sample_csv(&dir, "run-a");
        let t = read_metrics(&p).unwrap();
        let err = render_svg(&[t], "nonexistent").unwrap_err();
        assert!(err.to_string().contains("nonexistent"));
        fs::remove_dir_all(&dir).unwrap();
    }
}
