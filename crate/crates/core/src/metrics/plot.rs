use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use super::{deviation_series, OutputError, RunArtifacts, DEVIATION_BAND_MPS};

pub const PLOT_FILES: [&str; 3] = [
    "deviation_vs_time.svg",
    "step_time_breakdown.svg",
    "edge_runtime.svg",
];

const SIZE: (u32, u32) = (800, 500);
const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

type PlotResult = Result<(), Box<dyn std::error::Error>>;

fn label(run: &RunArtifacts) -> String {
    if run.summary.run_id.is_empty() {
        run.summary.algorithm.clone()
    } else {
        run.summary.run_id.clone()
    }
}

fn deviation_plot(runs: &[RunArtifacts], svg: &mut String) -> PlotResult {
    let series: Vec<(String, Vec<(f64, f64)>)> = runs
        .iter()
        .map(|r| {
            let dt = r.summary.world_dt_s;
            let pts = deviation_series(&r.traffic)
                .into_iter()
                .map(|(t, d)| (t as f64 * dt, d))
                .collect();
            (label(r), pts)
        })
        .collect();
    let x_max = series
        .iter()
        .flat_map(|(_, p)| p.iter().map(|(x, _)| *x))
        .fold(1.0, f64::max);
    let y_max = series
        .iter()
        .flat_map(|(_, p)| p.iter().map(|(_, y)| *y))
        .fold(1.0, f64::max)
        * 1.05;

    let root = SVGBackend::with_string(svg, SIZE).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Deviation from target velocity vs simulation time", ("sans-serif", 20))
        .margin(15)
        .x_label_area_size(40)
        .y_label_area_size(55)
        .build_cartesian_2d(0f64..x_max, 0f64..y_max)?;
    chart
        .configure_mesh()
        .x_desc("simulation time (s)")
        .y_desc("mean |v - v_target| (m/s)")
        .draw()?;
    chart.draw_series(LineSeries::new(
        [(0.0, DEVIATION_BAND_MPS), (x_max, DEVIATION_BAND_MPS)],
        BLACK.mix(0.4),
    ))?;
    for (i, (name, pts)) in series.into_iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        chart
            .draw_series(LineSeries::new(pts, color.stroke_width(2)))?
            .label(name)
            .legend(move |(x, y)| PathElement::new([(x, y), (x + 20, y)], color.stroke_width(2)));
    }
    if !runs.is_empty() {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()?;
    }
    root.present()?;
    Ok(())
}

fn breakdown_plot(runs: &[RunArtifacts], svg: &mut String) -> PlotResult {
    // Mean per-client decomposition, grouped by client count.
    let mut by_n: BTreeMap<usize, (f64, f64, f64, u64)> = BTreeMap::new();
    for r in runs {
        let n = r.summary.n_clients.max(r.summary.n_vehicles);
        let e = by_n.entry(n).or_default();
        for t in &r.timings {
            e.0 += t.processing_ms;
            e.1 += t.network_ms;
            e.2 += t.barrier_ms;
            e.3 += 1;
        }
    }
    let bars: Vec<(usize, [f64; 3])> = by_n
        .into_iter()
        .map(|(n, (p, net, b, count))| {
            let c = count.max(1) as f64;
            (n, [p / c, net / c, b / c])
        })
        .collect();
    let y_max = bars
        .iter()
        .map(|(_, parts)| parts.iter().sum::<f64>())
        .fold(0.0, f64::max)
        .max(1e-3)
        * 1.1;
    let slots = bars.len().max(1);

    let root = SVGBackend::with_string(svg, SIZE).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Client step time breakdown vs number of clients", ("sans-serif", 20))
        .margin(15)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(0f64..slots as f64, 0f64..y_max)?;
    let names: Vec<String> = bars.iter().map(|(n, _)| n.to_string()).collect();
    chart
        .configure_mesh()
        .x_desc("clients")
        .y_desc("mean step time per client (ms)")
        .x_labels(slots + 1)
        .x_label_formatter(&|x| {
            let i = (x - 0.5).round();
            if (x - 0.5 - i).abs() < 1e-6 && i >= 0.0 {
                names.get(i as usize).cloned().unwrap_or_default()
            } else {
                String::new()
            }
        })
        .disable_x_mesh()
        .draw()?;
    let parts = ["processing", "network", "barrier"];
    for (k, part) in parts.iter().enumerate() {
        let color = PALETTE[k];
        chart
            .draw_series(bars.iter().enumerate().map(|(i, (_, vals))| {
                let base: f64 = vals[..k].iter().sum();
                Rectangle::new(
                    [(i as f64 + 0.2, base), (i as f64 + 0.8, base + vals[k])],
                    color.filled(),
                )
            }))?
            .label(*part)
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 12, y + 5)], color.filled()));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()?;
    root.present()?;
    Ok(())
}

fn runtime_plot(runs: &[RunArtifacts], svg: &mut String) -> PlotResult {
    let runtimes: Vec<f64> = runs
        .iter()
        .flat_map(|r| r.edge.iter().map(|e| e.runtime_ms))
        .collect();
    let deadline = runs
        .iter()
        .map(|r| r.summary.edge.deadline_ms)
        .fold(0.0, f64::max);
    let x_max = runtimes.iter().copied().fold(deadline, f64::max).max(1.0) * 1.05;
    const BINS: usize = 40;
    let width = x_max / BINS as f64;
    let mut counts = [0u64; BINS];
    for r in &runtimes {
        let b = ((r / width) as usize).min(BINS - 1);
        counts[b] += 1;
    }
    let y_max = counts.iter().copied().max().unwrap_or(0).max(1) as f64 * 1.1;

    let root = SVGBackend::with_string(svg, SIZE).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Edge algorithm runtime distribution", ("sans-serif", 20))
        .margin(15)
        .x_label_area_size(40)
        .y_label_area_size(55)
        .build_cartesian_2d(0f64..x_max, 0f64..y_max)?;
    chart
        .configure_mesh()
        .x_desc("runtime (ms)")
        .y_desc("invocations")
        .draw()?;
    chart.draw_series(counts.iter().enumerate().filter(|(_, c)| **c > 0).map(|(i, c)| {
        Rectangle::new(
            [(i as f64 * width, 0.0), ((i + 1) as f64 * width, *c as f64)],
            PALETTE[0].filled(),
        )
    }))?;
    if deadline > 0.0 {
        chart
            .draw_series(LineSeries::new(
                [(deadline, 0.0), (deadline, y_max)],
                PALETTE[3].stroke_width(2),
            ))?
            .label(format!("deadline {deadline} ms"))
            .legend(|(x, y)| PathElement::new([(x, y), (x + 20, y)], PALETTE[3].stroke_width(2)));
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()?;
    }
    root.present()?;
    Ok(())
}

/// Renders the standard plots for one or more runs into `out_dir/plots`.
pub fn emit_plots(runs: &[RunArtifacts], out_dir: &Path) -> Result<Vec<PathBuf>, OutputError> {
    let dir = out_dir.join("plots");
    fs::create_dir_all(&dir).map_err(|source| OutputError::Write {
        path: dir.clone(),
        source,
    })?;
    let renderers: [fn(&[RunArtifacts], &mut String) -> PlotResult; 3] =
        [deviation_plot, breakdown_plot, runtime_plot];
    let mut written = Vec::new();
    for (name, render) in PLOT_FILES.iter().zip(renderers) {
        let path = dir.join(name);
        let mut svg = String::new();
        render(runs, &mut svg).map_err(|e| OutputError::Plot {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        fs::write(&path, svg).map_err(|source| OutputError::Write {
            path: path.clone(),
            source,
        })?;
        written.push(path);
    }
    Ok(written)
}
