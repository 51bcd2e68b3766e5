//! One function per subcommand. Each recomputes what it needs from the config
//! (every stage is seeded, so upstream results are identical across commands)
//! and writes only its own artifacts.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::Path;

use anyhow::{bail, Context, Result};
use crowdcal::aggregation::{read_woc_csv, write_woc_csv, MetricSummary, SweepPoint};
use crowdcal::downstream::PipelineReport;
use crowdcal::metrics::{calibration_curve_pairs, write_curve_csv};
use crowdcal::recalibration::write_fit_csv;
use crowdcal::study::{
    build_variants, evaluate_condition, run_downstream, simulate_condition, sweep_condition, ConditionReport,
    DatasetMetrics, ExperimentConfig, StudyReport, VariantMetrics,
};
use crowdcal::{classify, ece, error_rates, ItemId, WocVariant};
use serde::Deserialize;

use crate::report::{self, StudyDigest};
use crate::rundir::RunDir;

type CsvOut<'a> = csv::Writer<&'a mut Vec<u8>>;

fn tag(gs_prevalence: f64) -> String {
    format!("gs{:02.0}", gs_prevalence * 100.0)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn summary_header(w: &mut CsvOut) -> csv::Result<()> {
    w.write_record(["variant", "gs_prevalence", "metric", "mean", "lower", "upper", "n"])
}

fn summary_row(w: &mut CsvOut, variant: WocVariant, gs: f64, metric: &str, s: &Option<MetricSummary>) -> csv::Result<()> {
    let Some(s) = s else { return Ok(()) };
    w.write_record([
        variant.as_str().to_string(),
        gs.to_string(),
        metric.to_string(),
        s.mean.to_string(),
        opt(s.ci.map(|c| c.lower)),
        opt(s.ci.map(|c| c.upper)),
        s.n.to_string(),
    ])
}

/// Simulate, aggregate and recalibrate every condition; optionally score and sweep.
fn conditions(cfg: &ExperimentConfig, evaluate: bool, sweep: bool) -> Result<Vec<ConditionReport>> {
    let mut out = Vec::new();
    for &level in &cfg.corpus.gs_augmentation_levels {
        let run = simulate_condition(cfg, level)?;
        let datasets = build_variants(cfg, &run)?;
        let (metrics, summaries, curves) = if evaluate {
            evaluate_condition(cfg, &run, &datasets)?
        } else {
            Default::default()
        };
        let sweeps = if sweep {
            sweep_condition(cfg, &run, &datasets.individual)?
        } else {
            Vec::new()
        };
        out.push(ConditionReport {
            run,
            datasets,
            metrics,
            summaries,
            curves,
            sweeps,
        });
    }
    Ok(out)
}

fn write_simulation(dir: &mut RunDir, c: &ConditionReport) -> Result<()> {
    let t = tag(c.run.gs_prevalence);
    dir.write_with(&format!("corpus_{t}.csv"), |b| c.run.corpus.write_csv(b))?;
    dir.write_with(&format!("judgments_{t}_binary.csv"), |b| c.run.binary.write_csv(b))?;
    dir.write_with(&format!("judgments_{t}_belief.csv"), |b| c.run.belief.write_csv(b))
}

fn write_variants(dir: &mut RunDir, c: &ConditionReport, name: &str, variants: &[WocVariant]) -> Result<()> {
    let sets = variants.iter().filter_map(|v| c.datasets.variants.get(v)).flatten();
    dir.write_with(name, |b| write_woc_csv(b, sets))
}

fn write_aggregation(dir: &mut RunDir, c: &ConditionReport) -> Result<()> {
    write_variants(dir, c, &format!("woc_{}.csv", tag(c.run.gs_prevalence)), &[WocVariant::Bc, WocVariant::Eb])
}

fn write_recalibration(dir: &mut RunDir, c: &ConditionReport) -> Result<()> {
    let t = tag(c.run.gs_prevalence);
    dir.write_with(&format!("judgments_{t}_reb.csv"), |b| c.datasets.individual.table.write_csv(b))?;
    write_variants(dir, c, &format!("woc_{t}_reb.csv"), &[WocVariant::RebNoCr, WocVariant::RebCr])?;
    let fits: Vec<_> = c
        .datasets
        .individual
        .fits
        .iter()
        .chain(&c.datasets.crowd_fits)
        .cloned()
        .collect();
    dir.write_with(&format!("llo_params_{t}.csv"), |b| write_fit_csv(b, &fits))
}

fn metric_rows(w: &mut CsvOut, rows: &[DatasetMetrics]) -> csv::Result<()> {
    w.write_record(["variant", "gs_prevalence", "replicate", "miss", "fa", "ece"])?;
    for r in rows {
        w.write_record([
            r.variant.as_str().to_string(),
            r.gs_prevalence.to_string(),
            r.replicate.to_string(),
            opt(r.miss),
            opt(r.fa),
            r.ece.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn summary_rows(w: &mut CsvOut, rows: &[VariantMetrics]) -> csv::Result<()> {
    for s in rows {
        summary_row(w, s.variant, s.gs_prevalence, "miss", &s.miss)?;
        summary_row(w, s.variant, s.gs_prevalence, "fa", &s.fa)?;
        summary_row(w, s.variant, s.gs_prevalence, "ece", &s.ece)?;
    }
    Ok(())
}

fn write_evaluation(dir: &mut RunDir, conditions: &[ConditionReport]) -> Result<()> {
    for c in conditions {
        let t = tag(c.run.gs_prevalence);
        dir.write_with(&format!("metrics_{t}.csv"), |b| metric_rows(&mut csv::Writer::from_writer(b), &c.metrics))?;
        let curves: Vec<(&str, _)> = c.curves.iter().map(|(v, curve)| (v.as_str(), curve)).collect();
        dir.write_with(&format!("curves_{t}.csv"), |b| write_curve_csv(b, &curves))?;
    }
    dir.write_with("metrics_summary.csv", |b| {
        let mut w = csv::Writer::from_writer(b);
        summary_header(&mut w)?;
        for c in conditions {
            summary_rows(&mut w, &c.summaries)?;
        }
        w.flush()
    })
}

fn sweep_rows(w: &mut CsvOut, points: &[SweepPoint]) -> csv::Result<()> {
    for p in points {
        for (key, s) in &p.metrics {
            let (variant, metric) = key.split_once('.').unwrap_or(("", key));
            w.write_record([
                variant.to_string(),
                p.size.to_string(),
                metric.to_string(),
                s.mean.to_string(),
                opt(s.ci.map(|c| c.lower)),
                opt(s.ci.map(|c| c.upper)),
                s.n.to_string(),
            ])?;
        }
    }
    Ok(())
}

fn write_sweeps(dir: &mut RunDir, conditions: &[ConditionReport]) -> Result<()> {
    for c in conditions {
        dir.write_with(&format!("sweep_{}.csv", tag(c.run.gs_prevalence)), |b| {
            let mut w = csv::Writer::from_writer(b);
            w.write_record(["variant", "k", "metric", "mean", "lower", "upper", "n"])?;
            for (_, points) in &c.sweeps {
                sweep_rows(&mut w, points)?;
            }
            w.flush()
        })?;
    }
    Ok(())
}

fn write_downstream(dir: &mut RunDir, report: &PipelineReport) -> Result<()> {
    dir.write_with("model_metrics.csv", |b| {
        let mut w = csv::Writer::from_writer(b);
        w.write_record(["variant", "gs_prevalence", "split", "replicate", "miss", "fa", "ece"])?;
        for j in &report.jobs {
            w.write_record([
                j.variant.as_str().to_string(),
                j.gs_prevalence.to_string(),
                j.split.to_string(),
                j.replicate.to_string(),
                opt(j.miss),
                opt(j.fa),
                j.ece.to_string(),
            ])?;
        }
        w.flush()
    })?;
    dir.write_with("model_summary.csv", |b| {
        let mut w = csv::Writer::from_writer(b);
        summary_header(&mut w)?;
        for s in &report.summaries {
            summary_row(&mut w, s.variant, s.gs_prevalence, "miss", &s.miss)?;
            summary_row(&mut w, s.variant, s.gs_prevalence, "fa", &s.fa)?;
            summary_row(&mut w, s.variant, s.gs_prevalence, "ece", &s.ece)?;
        }
        w.flush()
    })?;
    dir.write_with("model_configs.csv", |b| {
        let mut w = csv::Writer::from_writer(b);
        w.write_record(["variant", "gs_prevalence", "epochs", "learning_rate", "l2_strength", "batch_size"])?;
        for s in &report.summaries {
            let c = &s.best_config;
            w.write_record([
                s.variant.as_str().to_string(),
                s.gs_prevalence.to_string(),
                c.epochs.to_string(),
                c.learning_rate.to_string(),
                c.l2_strength.to_string(),
                c.batch_size.to_string(),
            ])?;
        }
        w.flush()
    })?;
    dir.write_with("model_weights.csv", |b| {
        let mut w = csv::Writer::from_writer(b);
        let dim = report.weights.first().map_or(0, |(_, m)| m.weights.len());
        let mut header: Vec<String> = ["variant", "gs_prevalence", "split", "replicate", "bias"].map(String::from).to_vec();
        header.extend((0..dim).map(|i| format!("w{i}")));
        w.write_record(&header)?;
        for (j, m) in &report.weights {
            let mut row = vec![
                j.variant.as_str().to_string(),
                j.gs_prevalence.to_string(),
                j.split.to_string(),
                j.replicate.to_string(),
                m.bias.to_string(),
            ];
            row.extend(m.weights.iter().map(f64::to_string));
            w.write_record(&row)?;
        }
        w.flush()
    })
}

fn write_report(dir: &mut RunDir, digest: &StudyDigest) -> Result<()> {
    dir.write("report.txt", report::render(digest).as_bytes())?;
    let json = serde_json::to_string_pretty(digest)? + "\n";
    dir.write("report.json", json.as_bytes())
}

pub fn simulate(cfg: &ExperimentConfig, dir: &mut RunDir) -> Result<()> {
    for &level in &cfg.corpus.gs_augmentation_levels {
        let run = simulate_condition(cfg, level)?;
        let t = tag(run.gs_prevalence);
        dir.write_with(&format!("corpus_{t}.csv"), |b| run.corpus.write_csv(b))?;
        dir.write_with(&format!("judgments_{t}_binary.csv"), |b| run.binary.write_csv(b))?;
        dir.write_with(&format!("judgments_{t}_belief.csv"), |b| run.belief.write_csv(b))?;
    }
    Ok(())
}

pub fn aggregate(cfg: &ExperimentConfig, dir: &mut RunDir) -> Result<()> {
    for c in conditions(cfg, false, false)? {
        write_aggregation(dir, &c)?;
    }
    Ok(())
}

pub fn recalibrate(cfg: &ExperimentConfig, dir: &mut RunDir) -> Result<()> {
    for c in conditions(cfg, false, false)? {
        write_recalibration(dir, &c)?;
    }
    Ok(())
}

pub fn evaluate(cfg: &ExperimentConfig, dir: &mut RunDir) -> Result<()> {
    write_evaluation(dir, &conditions(cfg, true, false)?)
}

pub fn sweep(cfg: &ExperimentConfig, dir: &mut RunDir) -> Result<()> {
    write_sweeps(dir, &conditions(cfg, false, true)?)
}

pub fn train(cfg: &ExperimentConfig, dir: &mut RunDir) -> Result<()> {
    let conditions = conditions(cfg, false, false)?;
    write_downstream(dir, &run_downstream(cfg, &conditions)?)
}

/// Every stage and every artifact, plus the report.
pub fn reproduce(cfg: &ExperimentConfig, config_hash: &str, dir: &mut RunDir) -> Result<()> {
    let conditions = conditions(cfg, true, true)?;
    let downstream = if cfg.downstream.enabled {
        Some(run_downstream(cfg, &conditions)?)
    } else {
        None
    };
    for c in &conditions {
        write_simulation(dir, c)?;
        write_aggregation(dir, c)?;
        write_recalibration(dir, c)?;
    }
    write_evaluation(dir, &conditions)?;
    write_sweeps(dir, &conditions)?;
    if let Some(d) = &downstream {
        write_downstream(dir, d)?;
    }
    let study = StudyReport { conditions, downstream };
    write_report(dir, &report::digest(&study, cfg.seed, config_hash.to_string(), cfg.metrics.ci_level))
}

pub fn report(cfg: &ExperimentConfig, config_hash: &str, from: Option<&Path>, dir: &mut RunDir) -> Result<()> {
    let digest = match from {
        Some(prev) => {
            let path = prev.join("report.json");
            let file = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
            serde_json::from_reader(file).with_context(|| format!("parsing {}", path.display()))?
        }
        None => {
            let conditions = conditions(cfg, true, true)?;
            let downstream = if cfg.downstream.enabled {
                Some(run_downstream(cfg, &conditions)?)
            } else {
                None
            };
            report::digest(&StudyReport { conditions, downstream }, cfg.seed, config_hash.to_string(), cfg.metrics.ci_level)
        }
    };
    write_report(dir, &digest)
}

#[derive(Deserialize)]
struct TruthRow {
    item_id: String,
    true_label: u8,
    #[serde(default)]
    set: Option<String>,
}

/// Truth from `item_id,true_label` rows. A corpus CSV also works; its GS rows
/// are skipped because labels are scored on QA items only.
pub fn read_truth(path: &Path) -> Result<BTreeMap<ItemId, bool>> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let mut truth = BTreeMap::new();
    for (i, row) in rdr.deserialize::<TruthRow>().enumerate() {
        let line = i + 2;
        let row = row.with_context(|| format!("{} line {line}", path.display()))?;
        if row.set.as_deref().is_some_and(|s| s != "QA") {
            continue;
        }
        let label = match row.true_label {
            0 => false,
            1 => true,
            other => bail!("{} line {line}: true_label must be 0 or 1, got {other}", path.display()),
        };
        if truth.insert(ItemId(row.item_id.clone()), label).is_some() {
            bail!("{} line {line}: duplicate item {}", path.display(), row.item_id);
        }
    }
    Ok(truth)
}

/// Score an existing WoC CSV against a truth table.
pub fn evaluate_external(cfg: &ExperimentConfig, woc: &Path, truth: &Path, dir: &mut RunDir) -> Result<()> {
    let file = File::open(woc).with_context(|| format!("opening {}", woc.display()))?;
    let table = read_woc_csv(file).map_err(|e| anyhow::anyhow!("{}: {e}", woc.display()))?;
    let truth = read_truth(truth)?;
    if table.is_empty() {
        bail!("{} holds no labels", woc.display());
    }
    let mut rows = Vec::new();
    let mut pooled: BTreeMap<WocVariant, Vec<(f64, bool)>> = BTreeMap::new();
    for (&(variant, replicate), labels) in &table {
        let hard: BTreeMap<ItemId, bool> = labels.iter().map(|(id, &p)| (id.clone(), classify(p, 0.5))).collect();
        let rates = error_rates(&hard, &truth).with_context(|| format!("{variant} replicate {replicate}"))?;
        let e = ece(labels, &truth, cfg.ece_config())?;
        rows.push([
            variant.as_str().to_string(),
            replicate.to_string(),
            opt(rates.miss_rate),
            opt(rates.false_alarm_rate),
            e.to_string(),
        ]);
        pooled.entry(variant).or_default().extend(labels.iter().map(|(id, &p)| (p, truth[id])));
    }
    dir.write_with("metrics.csv", |b| {
        let mut w = csv::Writer::from_writer(b);
        w.write_record(["variant", "replicate", "miss", "fa", "ece"])?;
        for r in &rows {
            w.write_record(r)?;
        }
        w.flush()
    })?;
    let curves = pooled
        .iter()
        .map(|(v, pairs)| Ok((v.as_str(), calibration_curve_pairs(pairs, cfg.metrics.curve_bins)?)))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<(&str, _)> = curves.iter().map(|(n, c)| (*n, c)).collect();
    dir.write_with("curves.csv", |b| write_curve_csv(b, &refs))
}
