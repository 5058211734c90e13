use std::fmt::Write as _;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{HarnessError, TrialResult};
use crate::stats::percentile;

pub const PERCENTILE_NOTE: &str =
    "# percentiles use linear interpolation at rank p/100*(n-1) over the sorted per-seed minimum distances";

/// Per (task, controller) summary over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub task: String,
    pub controller: String,
    pub n: usize,
    pub successes: usize,
    pub median: f64,
    pub p20: f64,
    pub p80: f64,
    pub threshold: f64,
}

/// Groups results by (task, controller) in order of first appearance.
pub fn aggregate(results: &[TrialResult]) -> Vec<Summary> {
    let mut keys: Vec<(&str, &str)> = Vec::new();
    for r in results {
        let k = (r.task.as_str(), r.controller.as_str());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(task, controller)| {
            let group: Vec<&TrialResult> = results.iter().filter(|r| r.task == task && r.controller == controller).collect();
            let d: Vec<f64> = group.iter().map(|r| r.min_distance).collect();
            Summary {
                task: task.to_string(),
                controller: controller.to_string(),
                n: group.len(),
                successes: group.iter().filter(|r| r.success).count(),
                median: percentile(&d, 50.0).unwrap_or(f64::NAN),
                p20: percentile(&d, 20.0).unwrap_or(f64::NAN),
                p80: percentile(&d, 80.0).unwrap_or(f64::NAN),
                threshold: group[0].success_threshold,
            }
        })
        .collect()
}

/// One line of the results table. Trial rows carry a seed; summary rows carry
/// the success count in `success`, the median in `min_distance` and the
/// percentile band.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub kind: String,
    pub task: String,
    pub controller: String,
    pub seed: Option<u64>,
    pub n: usize,
    pub success: usize,
    pub min_distance: f64,
    pub p20: Option<f64>,
    pub p80: Option<f64>,
    pub threshold: f64,
    pub steps: Option<usize>,
    pub steps_to_success: Option<usize>,
    pub nominal_steps: Option<usize>,
    pub nonnominal_steps: Option<usize>,
    pub recovery_steps: Option<usize>,
    pub wall_clock_s: Option<f64>,
}

impl ResultRow {
    pub fn trial(r: &TrialResult) -> Self {
        Self {
            kind: "trial".into(),
            task: r.task.clone(),
            controller: r.controller.clone(),
            seed: Some(r.seed),
            n: 1,
            success: r.success as usize,
            min_distance: r.min_distance,
            p20: None,
            p80: None,
            threshold: r.success_threshold,
            steps: Some(r.steps),
            steps_to_success: r.steps_to_success,
            nominal_steps: Some(r.mode_counts[0]),
            nonnominal_steps: Some(r.mode_counts[1]),
            recovery_steps: Some(r.mode_counts[2]),
            wall_clock_s: Some(r.wall_clock_s),
        }
    }

    pub fn summary(s: &Summary) -> Self {
        Self {
            kind: "summary".into(),
            task: s.task.clone(),
            controller: s.controller.clone(),
            seed: None,
            n: s.n,
            success: s.successes,
            min_distance: s.median,
            p20: Some(s.p20),
            p80: Some(s.p80),
            threshold: s.threshold,
            steps: None,
            steps_to_success: None,
            nominal_steps: None,
            nonnominal_steps: None,
            recovery_steps: None,
            wall_clock_s: None,
        }
    }

    pub fn is_summary(&self) -> bool {
        self.kind == "summary"
    }

    pub fn as_summary(&self) -> Option<Summary> {
        self.is_summary().then(|| Summary {
            task: self.task.clone(),
            controller: self.controller.clone(),
            n: self.n,
            successes: self.success,
            median: self.min_distance,
            p20: self.p20.unwrap_or(f64::NAN),
            p80: self.p80.unwrap_or(f64::NAN),
            threshold: self.threshold,
        })
    }
}

/// Trial rows followed by one summary row per group, under a comment line
/// documenting the percentile convention.
pub fn write_results_csv<W: Write>(results: &[TrialResult], mut out: W) -> Result<(), HarnessError> {
    let csv_err = |e: csv::Error| HarnessError::Csv(e.to_string());
    writeln!(out, "{PERCENTILE_NOTE}").map_err(|e| HarnessError::Csv(e.to_string()))?;
    let mut w = csv::Writer::from_writer(out);
    for r in results {
        w.serialize(ResultRow::trial(r)).map_err(csv_err)?;
    }
    for s in aggregate(results) {
        w.serialize(ResultRow::summary(&s)).map_err(csv_err)?;
    }
    w.flush().map_err(|e| HarnessError::Csv(e.to_string()))
}

pub fn read_results_csv<R: Read>(input: R) -> Result<Vec<ResultRow>, HarnessError> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
    r.deserialize()
        .collect::<Result<Vec<ResultRow>, _>>()
        .map_err(|e| HarnessError::Csv(e.to_string()))
}

const PANEL_W: f64 = 260.0;
const PANEL_H: f64 = 260.0;
const MARGIN: f64 = 50.0;

/// Minimum-distance chart with one panel per task, controllers along the x
/// axis, the median as a dot with a 20-80 percentile bar, the individual
/// trials as faint dots and the success threshold as a dotted red line.
pub fn plot_svg(rows: &[ResultRow]) -> String {
    let mut tasks: Vec<&str> = Vec::new();
    for r in rows {
        if !tasks.contains(&r.task.as_str()) {
            tasks.push(&r.task);
        }
    }
    let width = MARGIN + tasks.len().max(1) as f64 * (PANEL_W + MARGIN);
    let height = PANEL_H + 2.5 * MARGIN;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (pi, task) in tasks.iter().enumerate() {
        let group: Vec<&ResultRow> = rows.iter().filter(|r| r.task == *task).collect();
        let mut controllers: Vec<&str> = Vec::new();
        for r in &group {
            if !controllers.contains(&r.controller.as_str()) {
                controllers.push(&r.controller);
            }
        }
        let top = group
            .iter()
            .flat_map(|r| [Some(r.min_distance), r.p80, Some(r.threshold)])
            .flatten()
            .filter(|v| v.is_finite())
            .fold(0.0, f64::max)
            .max(1e-6)
            * 1.1;
        let x0 = MARGIN + pi as f64 * (PANEL_W + MARGIN);
        let y0 = MARGIN;
        let y_of = |v: f64| y0 + PANEL_H * (1.0 - v / top);
        let slot = PANEL_W / controllers.len().max(1) as f64;
        let x_of = |c: &str| x0 + slot * (controllers.iter().position(|k| *k == c).unwrap_or(0) as f64 + 0.5);

        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-size="13">{}</text>"#, x0 + PANEL_W / 2.0, y0 - 15.0, escape(task));
        let _ = writeln!(
            s,
            r#"<rect x="{x0}" y="{y0}" width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="black"/>"#
        );
        for k in 0..=4 {
            let v = top * k as f64 / 4.0;
            let y = y_of(v);
            let _ = writeln!(s, r#"<line x1="{}" y1="{y}" x2="{x0}" y2="{y}" stroke="black"/>"#, x0 - 4.0);
            let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{v:.3}</text>"#, x0 - 6.0, y + 4.0);
        }
        if pi == 0 {
            let _ = writeln!(
                s,
                r#"<text transform="translate(12,{}) rotate(-90)" text-anchor="middle">min distance to goal</text>"#,
                y0 + PANEL_H / 2.0
            );
        }
        if let Some(th) = group.first().map(|r| r.threshold) {
            let y = y_of(th);
            let _ = writeln!(
                s,
                r#"<line x1="{x0}" y1="{y}" x2="{}" y2="{y}" stroke="red" stroke-dasharray="4,3"/>"#,
                x0 + PANEL_W
            );
        }
        for r in group.iter().filter(|r| !r.is_summary()) {
            let _ = writeln!(
                s,
                r#"<circle cx="{}" cy="{}" r="2.5" fill="gray" fill-opacity="0.4"/>"#,
                x_of(&r.controller) + slot * 0.18,
                y_of(r.min_distance)
            );
        }
        for r in group.iter().filter(|r| r.is_summary()) {
            let x = x_of(&r.controller);
            if let (Some(lo), Some(hi)) = (r.p20, r.p80) {
                let _ = writeln!(s, r#"<line x1="{x}" y1="{}" x2="{x}" y2="{}" stroke="black" stroke-width="2"/>"#, y_of(lo), y_of(hi));
            }
            let _ = writeln!(s, r#"<circle cx="{x}" cy="{}" r="4" fill="black"/>"#, y_of(r.min_distance));
        }
        for c in &controllers {
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="end" transform="rotate(-35 {} {})">{}</text>"#,
                x_of(c),
                y0 + PANEL_H + 14.0,
                x_of(c),
                y0 + PANEL_H + 14.0,
                escape(c)
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
