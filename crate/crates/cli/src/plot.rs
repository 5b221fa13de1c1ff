//! Per-epoch curves from saved reports, drawn as SVG line charts.

use std::path::Path;

use anyhow::{anyhow, bail};
use plotters::prelude::*;
use serde_json::Value;

#[derive(Clone, Debug, PartialEq)]
pub struct Chart {
    pub title: String,
    pub y_label: String,
    pub series: Vec<(String, Vec<f64>)>,
}

fn numbers(items: &Value, field: impl Fn(&Value) -> Option<f64>) -> anyhow::Result<Vec<f64>> {
    items
        .as_array()
        .ok_or_else(|| anyhow!("expected an array of epochs"))?
        .iter()
        .map(|e| field(e).ok_or_else(|| anyhow!("epoch record without the plotted field")))
        .collect()
}

/// Picks the curves of a `report/1` file by its kind.
pub fn chart_for_report(report: &Value) -> anyhow::Result<Chart> {
    let body = &report["body"];
    let kind = report["kind"].as_str().unwrap_or_default();
    let success = |e: &Value| e["success_rate"].as_f64();
    let dev_acc = |e: &Value| e["dev"]["turn_accuracy"].as_f64();
    let (title, y_label, series) = match kind {
        "train-policy" => {
            let label = format!(
                "{} seed {}",
                body["user"].as_str().unwrap_or("?"),
                body["seed"]
            );
            (
                "policy training",
                "success rate",
                vec![(label, numbers(&body["curve"], success)?)],
            )
        }
        "cross-eval" => {
            let curves = body["curves"]
                .as_array()
                .ok_or_else(|| anyhow!("report has no curves"))?;
            let series = curves
                .iter()
                .map(|c| {
                    let label =
                        format!("{} seed {}", c["train"].as_str().unwrap_or("?"), c["seed"]);
                    Ok((label, numbers(&c["epochs"], success)?))
                })
                .collect::<anyhow::Result<Vec<_>>>()?;
            ("policy training", "success rate", series)
        }
        "train-us" => (
            "user simulator training",
            "dev turn accuracy",
            vec![("tus".to_string(), numbers(&body["history"], dev_acc)?)],
        ),
        "ablation" => {
            let rows = body["rows"]
                .as_array()
                .ok_or_else(|| anyhow!("report has no rows"))?;
            let series = rows
                .iter()
                .map(|r| {
                    Ok((
                        r["name"].as_str().unwrap_or("?").to_string(),
                        numbers(&r["history"], dev_acc)?,
                    ))
                })
                .collect::<anyhow::Result<Vec<_>>>()?;
            ("ablation", "dev turn accuracy", series)
        }
        other => bail!(crate::exit::ConfigError(format!(
            "report kind {other:?} has no per-epoch curves"
        ))),
    };
    Ok(Chart {
        title: title.to_string(),
        y_label: y_label.to_string(),
        series,
    })
}

pub fn write_svg(path: &Path, chart: &Chart) -> anyhow::Result<()> {
    let n_epochs = chart
        .series
        .iter()
        .map(|(_, v)| v.len())
        .max()
        .unwrap_or(0)
        .max(2);
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| anyhow!("{e}"))?;
    let mut ctx = ChartBuilder::on(&root)
        .caption(&chart.title, ("sans-serif", 22))
        .margin(15)
        .x_label_area_size(40)
        .y_label_area_size(55)
        .build_cartesian_2d(0f64..(n_epochs - 1) as f64, 0f64..1f64)
        .map_err(|e| anyhow!("{e}"))?;
    ctx.configure_mesh()
        .x_desc("epoch")
        .y_desc(chart.y_label.as_str())
        .draw()
        .map_err(|e| anyhow!("{e}"))?;
    for (i, (label, values)) in chart.series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        ctx.draw_series(LineSeries::new(
            values.iter().enumerate().map(|(x, &y)| (x as f64, y)),
            color.stroke_width(2),
        ))
        .map_err(|e| anyhow!("{e}"))?
        .label(label.as_str())
        .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
    }
    ctx.configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .position(SeriesLabelPosition::LowerRight)
        .draw()
        .map_err(|e| anyhow!("{e}"))?;
    root.present().map_err(|e| anyhow!("{e}"))?;
    Ok(())
}
