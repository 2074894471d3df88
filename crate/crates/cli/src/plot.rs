use std::path::PathBuf;

use clap::Args;
use plotters::prelude::*;

use crate::CliError;

#[derive(Args, Debug)]
pub struct PlotArgs {
    /// One or more metrics CSV files; each gets its own line per column.
    #[arg(required = true)]
    metrics: Vec<PathBuf>,
    /// Comma-separated columns to plot.
    #[arg(long, default_value = "eval_return_mean")]
    columns: String,
    /// Column for the x axis.
    #[arg(long, default_value = "env_step")]
    x: String,
    /// Only rows of this kind (`update`, `episode`, `eval`); all if absent.
    #[arg(long)]
    kind: Option<String>,
    #[arg(long, default_value = "plot.svg")]
    out: PathBuf,
    #[arg(long, default_value_t = 900)]
    width: u32,
    #[arg(long, default_value_t = 540)]
    height: u32,
}

type Series = (String, Vec<(f64, f64)>);

fn load_series(a: &PlotArgs, columns: &[&str]) -> Result<Vec<Series>, CliError> {
    let mut out = Vec::new();
    for path in &a.metrics {
        if !path.exists() {
            return Err(CliError::Usage(format!("metrics file {} not found", path.display())));
        }
        let mut r = csv::Reader::from_path(path).map_err(|e| CliError::Runtime(e.to_string()))?;
        let headers = r.headers().map_err(|e| CliError::Runtime(e.to_string()))?.clone();
        let idx = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| CliError::Usage(format!("{} has no column `{name}`", path.display())))
        };
        let xi = idx(&a.x)?;
        let ki = headers.iter().position(|h| h == "kind");
        let yis = columns.iter().map(|c| idx(c)).collect::<Result<Vec<_>, _>>()?;
        let mut pts = vec![Vec::new(); columns.len()];
        for rec in r.records() {
            let rec = rec.map_err(|e| CliError::Runtime(e.to_string()))?;
            if let (Some(k), Some(ki)) = (&a.kind, ki) {
                if rec.get(ki) != Some(k.as_str()) {
                    continue;
                }
            }
            let Some(x) = rec.get(xi).and_then(|s| s.parse::<f64>().ok()) else { continue };
            for (p, &yi) in pts.iter_mut().zip(&yis) {
                if let Some(y) = rec.get(yi).and_then(|s| s.parse::<f64>().ok()).filter(|y| y.is_finite()) {
                    p.push((x, y));
                }
            }
        }
        let stem = path.parent().and_then(|p| p.file_name()).map(|s| s.to_string_lossy().into_owned());
        for (c, p) in columns.iter().zip(pts) {
            let label = match &stem {
                Some(s) if a.metrics.len() > 1 => format!("{s}: {c}"),
                _ => c.to_string(),
            };
            out.push((label, p));
        }
    }
    Ok(out)
}

pub fn plot(a: PlotArgs) -> Result<(), CliError> {
    let columns: Vec<&str> = a.columns.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if columns.is_empty() {
        return Err(CliError::Usage("--columns is empty".into()));
    }
    let series = load_series(&a, &columns)?;
    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.1.iter().copied()).collect();
    if all.is_empty() {
        return Err(CliError::Runtime("no finite points to plot".into()));
    }
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    // Degenerate ranges still need a visible span.
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let pad = ((y1 - y0) * 0.05).max(1e-9);
    let (y0, y1) = (y0 - pad, y1 + pad);

    let render = || -> Result<(), Box<dyn std::error::Error>> {
        let root = SVGBackend::new(&a.out, (a.width, a.height)).into_drawing_area();
        root.fill(&WHITE)?;
        let mut chart = ChartBuilder::on(&root)
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(60)
            .build_cartesian_2d(x0..x1, y0..y1)?;
        chart.configure_mesh().x_desc(a.x.as_str()).draw()?;
        for (i, (label, pts)) in series.iter().enumerate() {
            let color = Palette99::pick(i).to_rgba();
            chart
                .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))?
                .label(label.as_str())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
        }
        chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw()?;
        root.present()?;
        Ok(())
    };
    render().map_err(|e| CliError::Runtime(format!("plot failed: {e}")))?;
    println!("wrote {}", a.out.display());
    Ok(())
}
