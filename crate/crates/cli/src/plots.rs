//! Benchmark figures: mean Disc and context-FID against subset size, one line per model.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Result;
use fewgen_core::data::SubsetMode;
use fewgen_core::metrics::benchmark::{read_results_csv, ResultRow};
use plotters::prelude::*;

pub const DISC_PLOT: &str = "disc_vs_subset.svg";
pub const CFID_PLOT: &str = "cfid_vs_subset.svg";

#[derive(Debug, Clone, PartialEq)]
pub struct PlotFile {
    pub path: PathBuf,
    /// Model names, one per drawn line.
    pub lines: Vec<String>,
}

/// Subset labels in axis order: fixed counts, then percentages, then 100%.
pub fn subset_axis(rows: &[ResultRow]) -> Vec<String> {
    let mut labels: Vec<(Option<(u8, u64)>, String)> = rows
        .iter()
        .map(|r| (r.subset.parse::<SubsetMode>().ok().map(|m| m.order_key()), r.subset.clone()))
        .collect();
    labels.sort_by(|a, b| match (a.0, b.0) {
        (Some(x), Some(y)) => x.cmp(&y),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.1.cmp(&b.1),
    });
    labels.dedup_by(|a, b| a.1 == b.1);
    labels.into_iter().map(|(_, l)| l).collect()
}

type Metric = fn(&ResultRow) -> Option<f64>;

/// Per model, the metric averaged over datasets at each axis position.
fn series(
    rows: &[ResultRow],
    axis: &[String],
    metric: Metric,
) -> BTreeMap<String, Vec<(usize, f64)>> {
    let mut acc: BTreeMap<String, BTreeMap<usize, (f64, usize)>> = BTreeMap::new();
    for r in rows {
        let (Some(v), Some(x)) = (metric(r), axis.iter().position(|a| *a == r.subset)) else {
            continue;
        };
        if !v.is_finite() {
            continue;
        }
        let slot = acc.entry(r.model.clone()).or_default().entry(x).or_insert((0.0, 0));
        slot.0 += v;
        slot.1 += 1;
    }
    acc.into_iter()
        .map(|(m, pts)| (m, pts.into_iter().map(|(x, (s, n))| (x, s / n as f64)).collect()))
        .collect()
}

fn draw(path: &Path, title: &str, y_label: &str, axis: &[String], lines: &BTreeMap<String, Vec<(usize, f64)>>) -> Result<()> {
    let ymax = lines
        .values()
        .flatten()
        .map(|p| p.1)
        .fold(0.0f64, f64::max)
        .max(1e-6)
        * 1.1;
    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(-0.5f64..(axis.len() as f64 - 0.5), 0.0..ymax)?;
    let labels = axis.to_vec();
    chart
        .configure_mesh()
        .x_labels(axis.len())
        .x_label_formatter(&move |x| {
            let i = x.round();
            if (x - i).abs() < 1e-9 && i >= 0.0 {
                labels.get(i as usize).cloned().unwrap_or_default()
            } else {
                String::new()
            }
        })
        .x_desc("training subset")
        .y_desc(y_label)
        .draw()?;
    for (i, (model, pts)) in lines.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let data: Vec<(f64, f64)> = pts.iter().map(|&(x, y)| (x as f64, y)).collect();
        chart
            .draw_series(LineSeries::new(data.clone(), color.stroke_width(2)))?
            .label(model.as_str())
            .legend(move |(x, y)| Rectangle::new([(x, y - 4), (x + 14, y + 4)], color.filled()));
        chart.draw_series(data.into_iter().map(|p| Circle::new(p, 3, color.filled())))?;
    }
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE.mix(0.8))
        .draw()?;
    root.present()?;
    Ok(())
}

/// Reads a results table and writes the two subset plots into `out`. An empty
/// table writes nothing and logs a warning.
pub fn emit_plots(results: &Path, out: &Path) -> Result<Vec<PlotFile>> {
    let rows = read_results_csv(results)?;
    if rows.is_empty() {
        log::warn!("{} has no results; no plots written", results.display());
        return Ok(Vec::new());
    }
    let axis = subset_axis(&rows);
    let mut files = Vec::new();
    let plots: [(&str, &str, &str, Metric); 2] = [
        (DISC_PLOT, "Mean discriminative score by subset", "disc", |r| r.disc_mean),
        (CFID_PLOT, "Context-FID by subset", "context-FID", |r| r.cfid),
    ];
    for (name, title, y_label, metric) in plots {
        let lines = series(&rows, &axis, metric);
        let path = out.join(name);
        draw(&path, title, y_label, &axis, &lines)?;
        files.push(PlotFile {
            path,
            lines: lines.into_keys().collect(),
        });
    }
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use fewgen_core::metrics::benchmark::write_results_csv;

    fn row(model: &str, subset: &str, v: f64) -> ResultRow {
        ResultRow {
            model: model.into(),
            dataset: "d".into(),
            subset: subset.into(),
            disc_mean: Some(v),
            disc_std: Some(0.01),
            pred_mean: Some(v),
            pred_std: Some(0.01),
            cfid: Some(2.0 * v),
            error: String::new(),
        }
    }

    #[test]
    fn two_models_six_subsets() {
        let dir = tempfile::tempdir().unwrap();
        let subsets = ["100%", "5%", "#50", "#10", "15%", "#25"];
        let mut rows = Vec::new();
        for m in ["pretrained", "scratch"] {
            for (i, s) in subsets.iter().enumerate() {
                rows.push(row(m, s, 0.1 * i as f64));
            }
        }
        let csv = dir.path().join("results.csv");
        write_results_csv(&rows, &csv).unwrap();
        let files = emit_plots(&csv, dir.path()).unwrap();
        assert_eq!(files.len(), 2);
        for f in &files {
            assert!(f.path.exists());
            assert_eq!(f.lines, ["pretrained", "scratch"]);
            let svg = std::fs::read_to_string(&f.path).unwrap();
            assert!(svg.contains("#25") && svg.contains("pretrained"));
        }
        assert_eq!(files[0].path.file_name().unwrap(), DISC_PLOT);
        assert_eq!(files[1].path.file_name().unwrap(), CFID_PLOT);
        assert_eq!(subset_axis(&rows), ["#10", "#25", "#50", "5%", "15%", "100%"]);
    }

    #[test]
    fn full_axis_order() {
        let rows: Vec<ResultRow> = ["100%", "10%", "#50", "15%", "#10", "5%", "#25"]
            .iter()
            .map(|s| row("m", s, 0.1))
            .collect();
        assert_eq!(subset_axis(&rows), ["#10", "#25", "#50", "5%", "10%", "15%", "100%"]);
    }

    #[test]
    fn empty_results_write_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("results.csv");
        write_results_csv(&[], &csv).unwrap();
        assert!(emit_plots(&csv, dir.path()).unwrap().is_empty());
        assert!(!dir.path().join(DISC_PLOT).exists());
        assert!(!dir.path().join(CFID_PLOT).exists());
    }

    #[test]
    fn bad_schema_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("results.csv");
        std::fs::write(&csv, "model,score\nm,1\n").unwrap();
        let err = emit_plots(&csv, dir.path()).unwrap_err();
        assert!(matches!(err.downcast_ref(), Some(fewgen_core::Error::Schema(_))));
    }

    #[test]
    fn plots_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![row("a", "#10", 0.2), row("a", "#25", 0.1)];
        let csv = dir.path().join("results.csv");
        write_results_csv(&rows, &csv).unwrap();
        emit_plots(&csv, dir.path()).unwrap();
        let first = std::fs::read(dir.path().join(DISC_PLOT)).unwrap();
        emit_plots(&csv, dir.path()).unwrap();
        assert_eq!(first, std::fs::read(dir.path().join(DISC_PLOT)).unwrap());
    }
}
