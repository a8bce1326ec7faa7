//! Training-metrics reporting: a text summary table plus static PNG plots of
//! the loss curves and temperature.

use super::EvalError;
use crate::image::Image;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone)]
pub struct ReportSummary {
    pub columns: Vec<ColumnSummary>,
    pub steps: usize,
    pub table: String,
}

#[derive(Debug, Clone)]
pub struct ColumnSummary {
    pub name: String,
    pub first: f64,
    pub last: f64,
    pub min: f64,
    pub max: f64,
}

/// Read the metrics CSV, write `report.txt`, `report_losses.png`, and
/// `report_tau.png` under `out_dir`, and return the summary.
pub fn write_report(metrics_path: &Path, out_dir: &Path) -> Result<ReportSummary, EvalError> {
    let io_err = |path: &Path| {
        let p = path.to_path_buf();
        move |source| EvalError::Io {
            path: p.clone(),
            source,
        }
    };
    let mut reader = csv::Reader::from_path(metrics_path).map_err(|e| EvalError::Archive {
        path: metrics_path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| EvalError::Archive {
            path: metrics_path.to_path_buf(),
            msg: e.to_string(),
        })?
        .iter()
        .map(String::from)
        .collect();
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); headers.len()];
    for record in reader.records() {
        let record = record.map_err(|e| EvalError::Archive {
            path: metrics_path.to_path_buf(),
            msg: e.to_string(),
        })?;
        for (i, field) in record.iter().enumerate() {
            columns[i].push(field.parse::<f64>().unwrap_or(f64::NAN));
        }
    }
    let steps = columns.first().map(Vec::len).unwrap_or(0);

    let mut summaries = Vec::new();
    let mut table = format!("{:<12} {:>12} {:>12} {:>12} {:>12}\n", "column", "first", "last", "min", "max");
    for (name, values) in headers.iter().zip(columns.iter()).skip(1) {
        if values.is_empty() {
            continue;
        }
        let summary = ColumnSummary {
            name: name.clone(),
            first: values[0],
            last: *values.last().unwrap(),
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        };
        table.push_str(&format!(
            "{:<12} {:>12.5} {:>12.5} {:>12.5} {:>12.5}\n",
            summary.name, summary.first, summary.last, summary.min, summary.max
        ));
        summaries.push(summary);
    }

    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let txt = out_dir.join("report.txt");
    std::fs::write(&txt, &table).map_err(io_err(&txt))?;

    let loss_series: Vec<(&str, &[f64])> = headers
        .iter()
        .zip(columns.iter())
        .filter(|(name, _)| name.starts_with("l_"))
        .map(|(name, values)| (name.as_str(), values.as_slice()))
        .collect();
    if steps > 0 {
        line_chart(&loss_series)
            .save_png(&out_dir.join("report_losses.png"))
            .map_err(|e| EvalError::Archive {
                path: out_dir.join("report_losses.png"),
                msg: e.to_string(),
            })?;
        if let Some(tau_idx) = headers.iter().position(|h| h == "tau") {
            line_chart(&[("tau", &columns[tau_idx])])
                .save_png(&out_dir.join("report_tau.png"))
                .map_err(|e| EvalError::Archive {
                    path: out_dir.join("report_tau.png"),
                    msg: e.to_string(),
                })?;
        }
    }

    Ok(ReportSummary {
        columns: summaries,
        steps,
        table,
    })
}

const SERIES_COLORS: [[f64; 3]; 6] = [
    [0.85, 0.20, 0.20],
    [0.20, 0.45, 0.85],
    [0.15, 0.65, 0.30],
    [0.80, 0.60, 0.10],
    [0.55, 0.25, 0.70],
    [0.20, 0.65, 0.65],
];

/// Minimal line chart over a white canvas with axis box; one polyline per
/// series in a fixed palette.
fn line_chart(series: &[(&str, &[f64])]) -> Image {
    let (h, w) = (360usize, 640usize);
    let margin = 24usize;
    let mut img = Image::filled(h, w, [1.0, 1.0, 1.0]);
    for x in margin..w - margin {
        img.put(margin, x, [0.0, 0.0, 0.0]);
        img.put(h - margin, x, [0.0, 0.0, 0.0]);
    }
    for y in margin..=h - margin {
        img.put(y, margin, [0.0, 0.0, 0.0]);
        img.put(y, w - margin, [0.0, 0.0, 0.0]);
    }
    let finite: Vec<f64> = series
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .filter(|v| v.is_finite())
        .collect();
    if finite.is_empty() {
        return img;
    }
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if (hi - lo).abs() < 1e-12 { 1.0 } else { hi - lo };
    let n_max = series.iter().map(|(_, v)| v.len()).max().unwrap_or(1);

    for (si, (_, values)) in series.iter().enumerate() {
        let color = SERIES_COLORS[si % SERIES_COLORS.len()];
        let mut prev: Option<(usize, usize)> = None;
        for (i, &v) in values.iter().enumerate() {
            if !v.is_finite() {
                prev = None;
                continue;
            }
            let x = margin
                + ((w - 2 * margin - 1) as f64 * i as f64 / (n_max.max(2) - 1) as f64) as usize;
            let y = (h - margin)
                - (((h - 2 * margin - 1) as f64) * (v - lo) / span) as usize
                - 1;
            if let Some((px, py)) = prev {
                draw_segment(&mut img, px, py, x, y, color);
            }
            prev = Some((x, y));
        }
    }
    img
}

fn draw_segment(img: &mut Image, x0: usize, y0: usize, x1: usize, y1: usize, rgb: [f64; 3]) {
    let steps = x1.abs_diff(x0).max(y1.abs_diff(y0)).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = (x0 as f64 + t * (x1 as f64 - x0 as f64)).round() as usize;
        let y = (y0 as f64 + t * (y1 as f64 - y0 as f64)).round() as usize;
        if y < img.height() && x < img.width() {
            img.put(y, x, rgb);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_from_metrics_csv() {
        let dir = tempfile::tempdir().unwrap();
        let metrics = dir.path().join("metrics.csv");
        std::fs::write(
            &metrics,
            "step,l_local,l_global,l_fusion,l_instance,l_barlow,tau\n\
             0,2.0,2.1,2.2,3.0,0,1\n\
             1,1.5,1.6,1.7,2.5,0,0.9\n\
             2,1.0,1.1,1.2,2.0,0,0.8\n",
        )
        .unwrap();
        let out = dir.path().join("report");
        let summary = write_report(&metrics, &out).unwrap();
        assert_eq!(summary.steps, 3);
        let local = summary.columns.iter().find(|c| c.name == "l_local").unwrap();
        assert_eq!(local.first, 2.0);
        assert_eq!(local.last, 1.0);
        assert!(out.join("report.txt").exists());
        assert!(out.join("report_losses.png").exists());
        assert!(out.join("report_tau.png").exists());
    }
}
