//! Report emission: byte-stable CSV tables and SVG charts from an
//! [`EvalReport`](super::EvalReport).

use super::run::EvalReport;
use super::EvalError;
use crate::chart::{BarChart, LineChart, Series};
use crate::probe::{write_probe_csv, write_probe_svg};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

/// Quote a CSV field if it contains a delimiter, quote, or newline.
fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn safety_csv(report: &EvalReport) -> String {
    let mut out = String::from(
        "checkpoint_id,curriculum_fraction,stage,decoder,prompt_set,n_prompts,seed_index,asr,asr_mean,asr_std\n",
    );
    for row in &report.rows {
        for section in &row.safety {
            for (i, asr) in section.per_seed.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{},{:.6},{},{},{},{},{i},{asr:.6},{:.6},{:.6}",
                    csv_field(&row.checkpoint_id),
                    row.curriculum_fraction,
                    row.stage.label(),
                    row.decoder,
                    csv_field(&section.prompt_set),
                    section.n_prompts,
                    section.asr_mean,
                    section.asr_std,
                );
            }
        }
    }
    out
}

fn overrefusal_csv(report: &EvalReport) -> String {
    let mut out = String::from(
        "checkpoint_id,curriculum_fraction,stage,decoder,prompt_set,n_prompts,\
         compliant_helpful,compliant_unhelpful,partial_refusal,full_refusal,shortcircuit,\
         overrefusal_rate\n",
    );
    for row in &report.rows {
        let Some(o) = &row.overrefusal else { continue };
        let h = &o.histogram;
        let _ = writeln!(
            out,
            "{},{:.6},{},{},{},{},{},{},{},{},{},{:.6}",
            csv_field(&row.checkpoint_id),
            row.curriculum_fraction,
            row.stage.label(),
            row.decoder,
            csv_field(&o.prompt_set),
            o.n_prompts,
            h.compliant_helpful,
            h.compliant_unhelpful,
            h.partial_refusal,
            h.full_refusal,
            h.shortcircuit,
            o.rate,
        );
    }
    out
}

fn attacks_csv(report: &EvalReport) -> String {
    let mut out = String::from(
        "checkpoint_id,curriculum_fraction,final_loss,steps,success_greedy,success_safebeam,suffix\n",
    );
    for a in &report.attacks {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{},{},{},{}",
            csv_field(&a.checkpoint_id),
            a.curriculum_fraction,
            a.final_loss,
            a.steps,
            a.success_greedy,
            a.success_safebeam,
            csv_field(&a.suffix_text),
        );
    }
    out
}

fn asr_chart(report: &EvalReport) -> Option<LineChart> {
    // One series per (stage, decoder, prompt set); x = intervention start as
    // a percentage of the token budget.
    let mut grouped: BTreeMap<String, Vec<(f64, f64, f64)>> = BTreeMap::new();
    for row in &report.rows {
        for section in &row.safety {
            grouped
                .entry(format!("{}/{}/{}", row.stage.label(), row.decoder, section.prompt_set))
                .or_default()
                .push((row.curriculum_fraction * 100.0, section.asr_mean, section.asr_std));
        }
    }
    if grouped.is_empty() {
        return None;
    }
    let mut percents: Vec<f64> =
        report.rows.iter().map(|r| r.curriculum_fraction * 100.0).collect();
    percents.sort_by(f64::total_cmp);
    percents.dedup();
    let series = grouped
        .into_iter()
        .map(|(name, mut pts)| {
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            Series {
                name,
                points: pts.iter().map(|p| (p.0, p.1)).collect(),
                err: Some(pts.iter().map(|p| p.2).collect()),
            }
        })
        .collect();
    Some(LineChart {
        title: "Attack success rate by intervention timing".into(),
        x_label: "intervention start (% of token budget)".into(),
        y_label: "attack success rate".into(),
        series,
        y_range: Some((0.0, 1.0)),
        x_ticks: Some(percents),
    })
}

fn overrefusal_chart(report: &EvalReport) -> Option<BarChart> {
    let bars: Vec<(String, f64)> = report
        .rows
        .iter()
        .filter_map(|row| {
            row.overrefusal.as_ref().map(|o| {
                (
                    format!("{} {} {}", row.checkpoint_id, row.stage.label(), row.decoder),
                    o.rate,
                )
            })
        })
        .collect();
    if bars.is_empty() {
        return None;
    }
    Some(BarChart {
        title: "Overrefusal on benign prompts".into(),
        y_label: "overrefusal rate".into(),
        bars,
        y_range: Some((0.0, 1.0)),
    })
}

/// Write the full report artifact set into `out_dir`: `report.json`,
/// `safety.csv`, `overrefusal.csv`, `probes.csv`, `attacks.csv`, and — when
/// the corresponding sections are nonempty — `asr_vs_fraction.svg`,
/// `overrefusal.svg`, and `probe_auc.svg`. Output is a pure function of the
/// report: reruns produce byte-identical files.
pub fn emit_report(report: &EvalReport, out_dir: &Path) -> Result<(), EvalError> {
    std::fs::create_dir_all(out_dir)?;
    let mut json = serde_json::to_string_pretty(report).expect("report serializes");
    json.push('\n');
    std::fs::write(out_dir.join("report.json"), json)?;
    std::fs::write(out_dir.join("safety.csv"), safety_csv(report))?;
    std::fs::write(out_dir.join("overrefusal.csv"), overrefusal_csv(report))?;
    std::fs::write(out_dir.join("attacks.csv"), attacks_csv(report))?;
    write_probe_csv(&report.probes, &out_dir.join("probes.csv"))?;
    if !report.probes.is_empty() {
        write_probe_svg(&report.probes, &out_dir.join("probe_auc.svg"))?;
    }
    if let Some(chart) = asr_chart(report) {
        std::fs::write(out_dir.join("asr_vs_fraction.svg"), chart.to_svg())?;
    }
    if let Some(chart) = overrefusal_chart(report) {
        std::fs::write(out_dir.join("overrefusal.svg"), chart.to_svg())?;
    }
    Ok(())
}
