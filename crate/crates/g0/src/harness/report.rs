//! Report emission: per-cell CSV, a single JSON summary, and standalone SVG
//! bar charts (per-task means by provenance, per-skill bars for bed making).

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::{MatrixReport, TaskReport};

pub fn emit_matrix(report: &MatrixReport, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let csv_path = out_dir.join("matrix.csv");
    let mut csv = String::from(
        "provenance,protocol,task,trajectories,epochs,train_seed,mean,max_points,seed_hash\n",
    );
    for c in &report.cells {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{:.4},{},{}\n",
            c.provenance,
            c.protocol,
            c.task,
            c.trajectories,
            c.epochs,
            c.train_seed,
            c.report.mean,
            c.report.max_points,
            c.report.seed_hash,
        ));
    }
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;

    let json_path = out_dir.join("matrix.json");
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::contract(format!("report serialization: {e}")))?;
    std::fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;

    if !report.failures.is_empty() {
        let fail_path = out_dir.join("failures.txt");
        std::fs::write(&fail_path, report.failures.join("\n"))
            .map_err(|e| Error::io(&fail_path, e))?;
    }

    // Score bars per task, grouped by provenance, one chart per protocol.
    for protocol in ["posttrain", "fewshot"] {
        let cells: Vec<_> = report
            .cells
            .iter()
            .filter(|c| c.protocol == protocol)
            .collect();
        if cells.is_empty() {
            continue;
        }
        let mut groups: BTreeMap<String, Vec<(String, f64, f64)>> = BTreeMap::new();
        for c in &cells {
            groups.entry(c.task.clone()).or_default().push((
                c.provenance.clone(),
                c.report.mean,
                c.report.max_points as f64,
            ));
        }
        let svg = grouped_bars(&format!("progress by provenance ({protocol})"), &groups);
        let path = out_dir.join(format!("scores_{protocol}.svg"));
        std::fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
    }

    // Per-skill chart for bed_making cells.
    let mut skill_groups: BTreeMap<String, Vec<(String, f64, f64)>> = BTreeMap::new();
    for c in report.cells.iter().filter(|c| c.task == "bed_making") {
        for (skill, pts) in &c.report.per_skill {
            skill_groups.entry(skill.clone()).or_default().push((
                format!("{}-{}", c.provenance, c.protocol),
                *pts,
                c.report.max_points as f64,
            ));
        }
    }
    if !skill_groups.is_empty() {
        let svg = grouped_bars("bed_making per-skill points", &skill_groups);
        let path = out_dir.join("per_skill_bed_making.svg");
        std::fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn emit_task_report(report: &TaskReport, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let csv_path = out_dir.join(format!("eval_{}.csv", report.task));
    let mut csv = String::from("task,seed,score,max_points,provenance,seed_hash\n");
    for (seed, score) in &report.runs {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            report.task, seed, score, report.max_points, report.provenance, report.seed_hash
        ));
    }
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    let json_path = out_dir.join(format!("eval_{}.json", report.task));
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::contract(format!("report serialization: {e}")))?;
    std::fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))
}

/// Minimal grouped-bar SVG: groups on the x axis, one bar per (label, value)
/// inside each group, values normalized by their own max.
fn grouped_bars(title: &str, groups: &BTreeMap<String, Vec<(String, f64, f64)>>) -> String {
    let bar_w = 26.0f64;
    let gap = 14.0;
    let group_pad = 30.0;
    let chart_h = 220.0;
    let base_y = 260.0;
    let mut x = 40.0;
    let mut bars = String::new();
    let palette = ["#4878cf", "#ee854a", "#6acc65", "#d65f5f", "#956cb4", "#8c613c"];
    let mut legend: Vec<String> = Vec::new();
    for (group, entries) in groups {
        let group_start = x;
        for (i, (label, value, max)) in entries.iter().enumerate() {
            if !legend.contains(label) {
                legend.push(label.clone());
            }
            let frac = if *max > 0.0 { value / max } else { 0.0 };
            let h = chart_h * frac.clamp(0.0, 1.0);
            let color = palette[legend.iter().position(|l| l == label).unwrap() % palette.len()];
            bars.push_str(&format!(
                "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{bar_w}\" height=\"{h:.1}\" fill=\"{color}\"/>\
                 <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"9\" text-anchor=\"middle\">{value:.2}</text>",
                x,
                base_y - h,
                x + bar_w / 2.0,
                base_y - h - 4.0,
            ));
            let _ = i;
            x += bar_w + 4.0;
        }
        let center = (group_start + x - 4.0) / 2.0;
        bars.push_str(&format!(
            "<text x=\"{center:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"middle\">{group}</text>",
            base_y + 16.0
        ));
        x += group_pad - 4.0 + gap;
    }
    let mut legend_svg = String::new();
    for (i, label) in legend.iter().enumerate() {
        let color = palette[i % palette.len()];
        legend_svg.push_str(&format!(
            "<rect x=\"{}\" y=\"20\" width=\"10\" height=\"10\" fill=\"{color}\"/>\
             <text x=\"{}\" y=\"29\" font-size=\"10\">{label}</text>",
            40 + i * 110,
            54 + i * 110
        ));
    }
    let width = (x + 60.0).max(420.0);
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"300\">\
         <text x=\"40\" y=\"14\" font-size=\"13\">{title}</text>\
         <line x1=\"36\" y1=\"{base_y}\" x2=\"{width:.0}\" y2=\"{base_y}\" stroke=\"#444\"/>\
         {legend_svg}{bars}</svg>"
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svg_has_bars_for_every_entry() {
        let mut groups = BTreeMap::new();
        groups.insert(
            "task_a".to_string(),
            vec![
                ("scratch".to_string(), 2.0, 6.0),
                ("full".to_string(), 5.5, 6.0),
            ],
        );
        let svg = grouped_bars("test", &groups);
        assert_eq!(svg.matches("<rect").count(), 2 + 2); // bars + legend swatches
        assert!(svg.contains("task_a"));
        assert!(svg.starts_with("<svg"));
    }
}
