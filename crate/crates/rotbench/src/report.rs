//! Aggregate scored records into the results document and its text table.

use std::collections::BTreeMap;
use std::fmt::Write;

use rotbench_core::stats::{
    delta_vs_clean, diagnostic_counts, extreme_difference, round2, score_groups, stage_means,
    stage_means_by_scenario, welch_anova, AnovaResult, DiagnosticCounts, StagePercentages,
};
use rotbench_core::{EvalRecord, NoiseLevel, Stage};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnovaOutcome {
    pub stage: Stage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<AnovaResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// How much a stage's mean moves across levels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    /// Sample standard deviation of the per-level means.
    pub std_dev: f64,
    pub extreme_difference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub model: String,
    /// Per level and stage, percent, two decimals.
    pub means: BTreeMap<NoiseLevel, StagePercentages>,
    pub by_scenario: BTreeMap<String, BTreeMap<NoiseLevel, StagePercentages>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deltas_vs_clean: Option<BTreeMap<NoiseLevel, StagePercentages>>,
    pub spread: BTreeMap<Stage, Spread>,
    pub anova: AnovaOutcome,
    pub diagnostics: BTreeMap<NoiseLevel, DiagnosticCounts>,
    pub hallucinations: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// The document `score` writes: every per-case record plus the aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Results {
    pub records: Vec<EvalRecord>,
    pub report: Report,
}

fn round_map(m: BTreeMap<NoiseLevel, StagePercentages>) -> BTreeMap<NoiseLevel, StagePercentages> {
    m.into_iter().map(|(l, p)| (l, p.rounded())).collect()
}

fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

pub fn build_report(model: &str, records: &[EvalRecord], anova_stage: Stage) -> Report {
    let mut warnings = Vec::new();
    if records.is_empty() {
        warnings.push("no scored records; the report is empty".to_string());
    }
    let raw_means = stage_means(records);
    for level in NoiseLevel::ALL {
        if !raw_means.contains_key(&level) && !records.is_empty() {
            warnings.push(format!("no records for level {level}; omitted"));
        }
    }

    let spread = Stage::ALL
        .into_iter()
        .filter_map(|stage| {
            let values: Vec<f64> = raw_means.values().map(|m| m.get(stage)).collect();
            let extreme = extreme_difference(&values)?;
            Some((
                stage,
                Spread {
                    mean: round2(values.iter().sum::<f64>() / values.len() as f64),
                    std_dev: round2(sample_std(&values)),
                    extreme_difference: round2(extreme),
                },
            ))
        })
        .collect();

    let anova = match welch_anova(&score_groups(records, anova_stage)) {
        Ok(result) => AnovaOutcome {
            stage: anova_stage,
            result: Some(result),
            error: None,
        },
        Err(e) => AnovaOutcome {
            stage: anova_stage,
            result: None,
            error: Some(e.to_string()),
        },
    };

    let diagnostics = diagnostic_counts(records);
    Report {
        model: model.to_string(),
        deltas_vs_clean: delta_vs_clean(&raw_means).map(round_map),
        means: round_map(raw_means),
        by_scenario: stage_means_by_scenario(records)
            .into_iter()
            .map(|(s, m)| (s, round_map(m)))
            .collect(),
        spread,
        anova,
        hallucinations: diagnostics.values().map(|d| d.hallucinations).sum(),
        diagnostics,
        warnings,
    }
}

fn level_table(out: &mut String, means: &BTreeMap<NoiseLevel, StagePercentages>) {
    let levels: Vec<NoiseLevel> = means.keys().copied().collect();
    let _ = write!(out, "{:<26}", "Stage");
    for l in &levels {
        let _ = write!(out, "{:>9}", l.label());
    }
    out.push('\n');
    for stage in Stage::ALL {
        let _ = write!(out, "{:<26}", stage.label());
        for l in &levels {
            let _ = write!(out, "{:>9.2}", means[l].get(stage));
        }
        out.push('\n');
    }
}

/// Human-readable rendering: one row per stage, one column per level.
pub fn render_report(report: &Report) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Model: {}", if report.model.is_empty() { "-" } else { &report.model });
    for w in &report.warnings {
        let _ = writeln!(out, "warning: {w}");
    }
    if report.means.is_empty() {
        return out;
    }
    out.push('\n');
    level_table(&mut out, &report.means);

    if let Some(deltas) = &report.deltas_vs_clean {
        out.push_str("\nAbsolute difference vs Clean\n");
        level_table(&mut out, deltas);
    }

    if !report.spread.is_empty() {
        out.push_str("\nAcross levels               mean   std dev   max-min\n");
        for (stage, s) in &report.spread {
            let _ = writeln!(
                out,
                "{:<26}{:>7.2}{:>10.2}{:>10.2}",
                stage.label(),
                s.mean,
                s.std_dev,
                s.extreme_difference
            );
        }
    }

    let _ = write!(out, "\nWelch's ANOVA ({}): ", report.anova.stage.label());
    match (&report.anova.result, &report.anova.error) {
        (Some(r), _) => {
            let _ = writeln!(
                out,
                "F = {:.4}, p = {:.4}, df = ({:.0}, {:.2})",
                r.f_statistic, r.p_value, r.df1, r.df2
            );
        }
        (None, Some(e)) => {
            let _ = writeln!(out, "not computed: {e}");
        }
        (None, None) => out.push_str("not computed\n"),
    }

    out.push_str("\nLevel      cases  hallucinated  noise-corrected  param-noise-corrected  parse-failed\n");
    for (level, d) in &report.diagnostics {
        let _ = writeln!(
            out,
            "{:<9}{:>7}{:>14}{:>17}{:>23}{:>14}",
            level.label(),
            d.cases,
            d.hallucinations,
            d.noise_corrections,
            d.param_noise_corrections,
            d.parse_failures
        );
    }
    let _ = writeln!(out, "Total hallucinations: {}", report.hallucinations);

    if report.by_scenario.len() > 1 {
        for (scenario, means) in &report.by_scenario {
            let _ = writeln!(out, "\nScenario: {scenario}");
            level_table(&mut out, means);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rotbench_core::StageScores;

    fn record(level: NoiseLevel, s: (u8, u8, u8), hallucinated: bool) -> EvalRecord {
        EvalRecord {
            case_id: "c".into(),
            base: "c".into(),
            scenario: "s".into(),
            level,
            scores: StageScores {
                s_ts: s.0,
                s_pi: s.1,
                s_cf: s.2,
            },
            hallucinated,
            noise_corrected: false,
            param_noise_corrected: false,
            parse_failed: false,
        }
    }

    #[test]
    fn empty_records_give_empty_report_with_warning() {
        let r = build_report("m", &[], Stage::ContentFilling);
        assert!(r.means.is_empty());
        assert_eq!(r.warnings.len(), 1);
        assert!(r.anova.error.is_some());
        assert!(render_report(&r).contains("warning: no scored records"));
    }

    #[test]
    fn constant_scores_give_p_one() {
        let records: Vec<_> = NoiseLevel::ALL
            .into_iter()
            .flat_map(|l| [record(l, (1, 1, 1), false), record(l, (1, 1, 1), false)])
            .collect();
        let r = build_report("human", &records, Stage::ContentFilling);
        let a = r.anova.result.unwrap();
        assert_eq!((a.f_statistic, a.p_value), (0.0, 1.0));
        assert_eq!(r.spread[&Stage::ContentFilling].extreme_difference, 0.0);
    }

    #[test]
    fn deltas_and_hallucinations() {
        let records = vec![
            record(NoiseLevel::Clean, (1, 1, 1), false),
            record(NoiseLevel::Clean, (1, 1, 0), false),
            record(NoiseLevel::Heavy, (0, 0, 0), true),
            record(NoiseLevel::Heavy, (1, 0, 0), false),
        ];
        let r = build_report("m", &records, Stage::ToolSelection);
        let d = r.deltas_vs_clean.as_ref().unwrap();
        assert_eq!(d[&NoiseLevel::Heavy].ts, 50.0);
        assert_eq!(d[&NoiseLevel::Heavy].cf, 50.0);
        assert_eq!(d[&NoiseLevel::Clean].ts, 0.0);
        assert_eq!(r.hallucinations, 1);
        assert_eq!(r.warnings.len(), 3);
        let text = render_report(&r);
        assert!(text.contains("Tool Selection               100.00    50.00"), "{text}");
    }
}
