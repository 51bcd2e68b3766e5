//! Study digest (the JSON report) and its plain-text rendering.

use std::fmt::Write as _;

use crowdcal::aggregation::{MetricSummary, SweepPoint};
use crowdcal::downstream::VariantSummary;
use crowdcal::metrics::Confusion;
use crowdcal::study::{ConditionReport, StudyReport, VariantMetrics};
use crowdcal::{classify, ItemSet, JudgmentTable, WocVariant};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepDigest {
    pub variant: WocVariant,
    pub points: Vec<SweepPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionDigest {
    pub gs_prevalence: f64,
    pub annotators: usize,
    /// Per-annotator binary miss and false-alarm rates on QA items.
    pub individual_miss: Option<MetricSummary>,
    pub individual_fa: Option<MetricSummary>,
    pub passed_through: usize,
    pub crowd_fit_failures: usize,
    pub variants: Vec<VariantMetrics>,
    pub sweeps: Vec<SweepDigest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyDigest {
    pub seed: u64,
    pub config_hash: String,
    pub conditions: Vec<ConditionDigest>,
    pub downstream: Option<Vec<VariantSummary>>,
}

fn annotator_rates(table: &JudgmentTable, level: f64) -> (Option<MetricSummary>, Option<MetricSummary>) {
    let mut miss = Vec::new();
    let mut fa = Vec::new();
    for id in table.annotator_ids() {
        let c = Confusion::from_pairs(
            table
                .for_annotator(id)
                .filter(|j| j.set == ItemSet::Qa)
                .map(|j| (classify(j.value, 0.5), j.true_label)),
        );
        if c.hits + c.misses > 0 {
            miss.push(c.misses as f64 / (c.hits + c.misses) as f64);
        }
        if c.false_alarms + c.correct_rejections > 0 {
            fa.push(c.false_alarms as f64 / (c.false_alarms + c.correct_rejections) as f64);
        }
    }
    (MetricSummary::from_values(&miss, level), MetricSummary::from_values(&fa, level))
}

pub fn condition_digest(c: &ConditionReport, ci_level: f64) -> ConditionDigest {
    let (individual_miss, individual_fa) = annotator_rates(&c.run.binary, ci_level);
    ConditionDigest {
        gs_prevalence: c.run.gs_prevalence,
        annotators: c.run.binary.annotator_ids().count(),
        individual_miss,
        individual_fa,
        passed_through: c.datasets.individual.passed_through.len(),
        crowd_fit_failures: c.datasets.crowd_failures.len(),
        variants: c.summaries.clone(),
        sweeps: c
            .sweeps
            .iter()
            .map(|(variant, points)| SweepDigest {
                variant: *variant,
                points: points.clone(),
            })
            .collect(),
    }
}

pub fn digest(report: &StudyReport, seed: u64, config_hash: String, ci_level: f64) -> StudyDigest {
    StudyDigest {
        seed,
        config_hash,
        conditions: report.conditions.iter().map(|c| condition_digest(c, ci_level)).collect(),
        downstream: report.downstream.as_ref().map(|d| d.summaries.clone()),
    }
}

fn cell(s: &Option<MetricSummary>) -> String {
    match s {
        Some(MetricSummary { mean, ci: Some(ci), .. }) => format!("{mean:.3} [{:.3}, {:.3}]", ci.lower, ci.upper),
        Some(s) => format!("{:.3}", s.mean),
        None => "n/a".into(),
    }
}

pub fn render(d: &StudyDigest) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "crowdcal study report (seed {}, config {})", d.seed, &d.config_hash[..12.min(d.config_hash.len())]);
    for c in &d.conditions {
        let pct = c.gs_prevalence * 100.0;
        let _ = writeln!(out, "\n== GS prevalence {pct:.0}% ==");
        let _ = writeln!(
            out,
            "individual annotators ({}): miss {}  FA {}",
            c.annotators,
            cell(&c.individual_miss),
            cell(&c.individual_fa)
        );
        if c.passed_through > 0 || c.crowd_fit_failures > 0 {
            let _ = writeln!(
                out,
                "annotators left unrecalibrated: {}; failed crowd fits: {}",
                c.passed_through, c.crowd_fit_failures
            );
        }
        let _ = writeln!(out, "\n{:<10} {:<24} {:<24} {:<24}", "variant", "miss", "FA", "ECE");
        for v in &c.variants {
            let _ = writeln!(out, "{:<10} {:<24} {:<24} {:<24}", v.variant.as_str(), cell(&v.miss), cell(&v.fa), cell(&v.ece));
        }
        for s in &c.sweeps {
            let mut keys: Vec<&String> = s.points.iter().flat_map(|p| p.metrics.keys()).collect();
            keys.sort();
            keys.dedup();
            for key in keys.into_iter().filter(|k| k.ends_with(".miss")) {
                let series: Vec<String> = s
                    .points
                    .iter()
                    .filter_map(|p| p.metrics.get(key).map(|m| format!("{}:{:.3}", p.size, m.mean)))
                    .collect();
                let _ = writeln!(out, "crowd-size sweep {key}: {}", series.join(" "));
            }
        }
    }
    if let Some(rows) = &d.downstream {
        let _ = writeln!(out, "\n== downstream models ==");
        let _ = writeln!(out, "{:<10} {:<6} {:<24} {:<24} {:<24} best config", "variant", "GS", "miss", "FA", "ECE");
        for r in rows {
            let c = &r.best_config;
            let _ = writeln!(
                out,
                "{:<10} {:<6} {:<24} {:<24} {:<24} epochs {} lr {} l2 {} batch {}",
                r.variant.as_str(),
                format!("{:.0}%", r.gs_prevalence * 100.0),
                cell(&r.miss),
                cell(&r.fa),
                cell(&r.ece),
                c.epochs,
                c.learning_rate,
                c.l2_strength,
                c.batch_size
            );
        }
    }
    out
}
