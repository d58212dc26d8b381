//! Report emission over one or more pipeline runs: per-seed and aggregated
//! CSV tables, a combined JSON summary, and SVG tradeoff curves of final
//! accuracy against the number of selected features and against the
//! per-class sparsity budget.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::error::{Result, SlddError};
use crate::io;
use crate::pipeline::{MeanStd, PipelineSummary, SeedRecord};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunDigest {
    pub run_dir: String,
    pub n_target: usize,
    pub budget_final: f64,
    pub beta: f64,
    pub aggregate: std::collections::BTreeMap<String, MeanStd>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportSummary {
    pub runs: Vec<RunDigest>,
}

#[derive(Debug, Clone)]
pub struct ReportFiles {
    pub per_seed_csv: PathBuf,
    pub aggregate_csv: PathBuf,
    pub summary_json: PathBuf,
    pub accuracy_vs_n_target_svg: PathBuf,
    pub accuracy_vs_n_per_class_svg: PathBuf,
}

/// Reads each run's `summary.json` and writes the report files into
/// `out_dir`.
pub fn report(run_dirs: &[PathBuf], out_dir: &Path) -> Result<ReportFiles> {
    if run_dirs.is_empty() {
        return Err(SlddError::Config("report needs at least one run".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut summaries = Vec::with_capacity(run_dirs.len());
    for dir in run_dirs {
        let summary: PipelineSummary = io::read_json(&dir.join("summary.json"))?;
        summaries.push((dir.clone(), summary));
    }

    use std::io::Write;
    let per_seed_csv = out_dir.join("per_seed.csv");
    {
        let mut out = std::io::BufWriter::new(std::fs::File::create(&per_seed_csv)?);
        writeln!(
            out,
            "run,seed,status,dense_test_accuracy,sparse_test_accuracy,final_test_accuracy,final_loc_k,n_w,n_per_class,total_features_used"
        )?;
        for (dir, summary) in &summaries {
            for record in &summary.seeds {
                match record {
                    SeedRecord::Ok { metrics } => writeln!(
                        out,
                        "{},{},ok,{},{},{},{},{},{},{}",
                        dir.display(),
                        metrics.seed,
                        metrics.dense_test_accuracy,
                        metrics.sparse_test_accuracy,
                        metrics.final_test_accuracy,
                        metrics
                            .final_loc_k
                            .map(|v| v.to_string())
                            .unwrap_or_default(),
                        metrics.n_w,
                        metrics.n_per_class,
                        metrics.total_features_used,
                    )?,
                    SeedRecord::Failed { seed, error } => writeln!(
                        out,
                        "{},{},failed:{},,,,,,,",
                        dir.display(),
                        seed,
                        error.replace(',', ";"),
                    )?,
                }
            }
        }
        out.flush()?;
    }

    let aggregate_csv = out_dir.join("aggregate.csv");
    {
        let mut out = std::io::BufWriter::new(std::fs::File::create(&aggregate_csv)?);
        writeln!(out, "run,n_target,budget_final,metric,mean,std,count")?;
        for (dir, summary) in &summaries {
            for (metric, agg) in &summary.aggregate {
                writeln!(
                    out,
                    "{},{},{},{},{},{},{}",
                    dir.display(),
                    summary.config.n_target,
                    summary.config.budget_final,
                    metric,
                    agg.mean,
                    agg.std,
                    agg.count,
                )?;
            }
        }
        out.flush()?;
    }

    let digest = ReportSummary {
        runs: summaries
            .iter()
            .map(|(dir, summary)| RunDigest {
                run_dir: dir.display().to_string(),
                n_target: summary.config.n_target,
                budget_final: summary.config.budget_final,
                beta: summary.config.beta,
                aggregate: summary.aggregate.clone(),
            })
            .collect(),
    };
    let summary_json = out_dir.join("report_summary.json");
    io::write_json(&summary_json, &digest)?;

    let accuracy_points = |key: fn(&PipelineSummary) -> f64| -> Vec<(f64, f64, f64)> {
        let mut points: Vec<(f64, f64, f64)> = summaries
            .iter()
            .filter_map(|(_, summary)| {
                summary.aggregate.get("final_test_accuracy").map(|agg| {
                    (key(summary), agg.mean, agg.std)
                })
            })
            .collect();
        points.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite x"));
        points
    };

    let accuracy_vs_n_target_svg = out_dir.join("accuracy_vs_n_target.svg");
    std::fs::write(
        &accuracy_vs_n_target_svg,
        svg_line_plot(
            "final test accuracy vs number of selected features",
            "n_target",
            "accuracy",
            &accuracy_points(|s| s.config.n_target as f64),
        ),
    )?;
    let accuracy_vs_n_per_class_svg = out_dir.join("accuracy_vs_n_per_class.svg");
    std::fs::write(
        &accuracy_vs_n_per_class_svg,
        svg_line_plot(
            "final test accuracy vs per-class budget",
            "n_per_class",
            "accuracy",
            &accuracy_points(|s| s.config.budget_final),
        ),
    )?;

    Ok(ReportFiles {
        per_seed_csv,
        aggregate_csv,
        summary_json,
        accuracy_vs_n_target_svg,
        accuracy_vs_n_per_class_svg,
    })
}

/// Minimal SVG line plot: one polyline with error bars, axis ticks at the
/// data points.
pub fn svg_line_plot(
    title: &str,
    x_label: &str,
    y_label: &str,
    points: &[(f64, f64, f64)],
) -> String {
    let (width, height) = (640.0, 420.0);
    let (left, right, top, bottom) = (70.0, 20.0, 40.0, 50.0);
    let plot_w = width - left - right;
    let plot_h = height - top - bottom;

    let (x_min, x_max) = bounds(points.iter().map(|p| p.0));
    let (y_lo, y_hi) = bounds(
        points
            .iter()
            .flat_map(|p| [p.1 - p.2, p.1 + p.2]),
    );
    let pad = ((y_hi - y_lo) * 0.1).max(1e-6);
    let (y_min, y_max) = (y_lo - pad, y_hi + pad);
    let x_span = (x_max - x_min).max(1e-9);
    let y_span = (y_max - y_min).max(1e-9);
    let to_x = |x: f64| left + (x - x_min) / x_span * plot_w;
    let to_y = |y: f64| top + (1.0 - (y - y_min) / y_span) * plot_h;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">{title}</text>\n",
        width / 2.0
    ));
    // axes
    svg.push_str(&format!(
        "<line x1=\"{left}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        top + plot_h,
        left + plot_w,
        top + plot_h
    ));
    svg.push_str(&format!(
        "<line x1=\"{left}\" y1=\"{top}\" x2=\"{left}\" y2=\"{}\" stroke=\"black\"/>\n",
        top + plot_h
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">{x_label}</text>\n",
        left + plot_w / 2.0,
        height - 12.0
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" transform=\"rotate(-90 16 {})\">{y_label}</text>\n",
        top + plot_h / 2.0,
        top + plot_h / 2.0
    ));

    for &(x, y, std) in points {
        let (px, py) = (to_x(x), to_y(y));
        if std > 0.0 {
            let (y_up, y_dn) = (to_y(y + std), to_y(y - std));
            svg.push_str(&format!(
                "<line x1=\"{px}\" y1=\"{y_up}\" x2=\"{px}\" y2=\"{y_dn}\" stroke=\"steelblue\" stroke-width=\"1\"/>\n"
            ));
        }
        svg.push_str(&format!(
            "<circle cx=\"{px}\" cy=\"{py}\" r=\"3.5\" fill=\"steelblue\"/>\n"
        ));
        svg.push_str(&format!(
            "<text x=\"{px}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">{x}</text>\n",
            top + plot_h + 16.0
        ));
    }
    if points.len() > 1 {
        let path: Vec<String> = points
            .iter()
            .map(|&(x, y, _)| format!("{},{}", to_x(x), to_y(y)))
            .collect();
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"steelblue\" stroke-width=\"1.5\"/>\n",
            path.join(" ")
        ));
    }
    // y ticks at min/max
    for value in [y_lo, y_hi] {
        let py = to_y(value);
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">{value:.3}</text>\n",
            left - 6.0,
            py + 3.0
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        (0.0, 1.0)
    } else {
        (lo, hi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{mean_std, PipelineConfig, SeedMetrics};
    use tempfile::tempdir;

    fn fake_summary(n_target: usize, budget_final: f64, accuracies: &[f64]) -> PipelineSummary {
        let mut config = PipelineConfig::default();
        config.n_target = n_target;
        config.budget_final = budget_final;
        let seeds: Vec<SeedRecord> = accuracies
            .iter()
            .enumerate()
            .map(|(i, &acc)| SeedRecord::Ok {
                metrics: SeedMetrics {
                    seed: i as u64,
                    dense_test_accuracy: 0.99,
                    dense_loc_k: Some(0.9),
                    sparse_test_accuracy: acc - 0.01,
                    final_test_accuracy: acc,
                    final_loc_k: Some(0.8),
                    final_loc_k_per_class: Some(0.79),
                    n_w: 15,
                    n_per_class: 5.0,
                    total_features_used: 6,
                    selected_features: vec![0, 1, 2],
                    accuracy_ratio_vs_dense: acc / 0.99,
                },
            })
            .collect();
        let mut aggregate = std::collections::BTreeMap::new();
        aggregate.insert("final_test_accuracy".to_string(), mean_std(accuracies));
        PipelineSummary {
            config,
            seeds,
            aggregate,
        }
    }

    #[test]
    fn report_emits_all_files() {
        let dir = tempdir().unwrap();
        let mut run_dirs = Vec::new();
        for (i, n_target) in [5usize, 20].into_iter().enumerate() {
            let run = dir.path().join(format!("run_{i}"));
            std::fs::create_dir_all(&run).unwrap();
            crate::io::write_json(
                &run.join("summary.json"),
                &fake_summary(n_target, 5.0, &[0.8 + 0.05 * i as f64, 0.82 + 0.05 * i as f64]),
            )
            .unwrap();
            run_dirs.push(run);
        }
        let out = dir.path().join("report");
        let files = report(&run_dirs, &out).unwrap();
        for file in [
            &files.per_seed_csv,
            &files.aggregate_csv,
            &files.summary_json,
            &files.accuracy_vs_n_target_svg,
            &files.accuracy_vs_n_per_class_svg,
        ] {
            assert!(file.exists(), "missing {}", file.display());
        }
        let svg = std::fs::read_to_string(&files.accuracy_vs_n_target_svg).unwrap();
        assert!(svg.contains("<polyline"));
        assert!(svg.contains("</svg>"));
        let csv = std::fs::read_to_string(&files.per_seed_csv).unwrap();
        assert_eq!(csv.lines().count(), 1 + 4, "header plus four seed rows");
    }

    #[test]
    fn single_seed_std_is_zero_in_aggregate_csv() {
        let dir = tempdir().unwrap();
        let run = dir.path().join("run");
        std::fs::create_dir_all(&run).unwrap();
        crate::io::write_json(&run.join("summary.json"), &fake_summary(10, 5.0, &[0.9]))
            .unwrap();
        let out = dir.path().join("report");
        let files = report(&[run], &out).unwrap();
        let csv = std::fs::read_to_string(&files.aggregate_csv).unwrap();
        let line = csv
            .lines()
            .find(|l| l.contains("final_test_accuracy"))
            .unwrap();
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields[5], "0", "std column");
    }

    #[test]
    fn svg_plot_handles_single_point() {
        let svg = svg_line_plot("t", "x", "y", &[(5.0, 0.9, 0.0)]);
        assert!(svg.contains("<circle"));
        assert!(!svg.contains("<polyline"));
    }
}
