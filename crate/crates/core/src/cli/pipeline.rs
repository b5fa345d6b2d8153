//! Analysis, selection and evaluation commands and the files they write.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernels::{MethodId, OpKind};
use crate::model::{ActivationTrace, AssignmentMap, LayerCounts, LayerId, Model};
use crate::quant::Tensor;
use crate::sensitivity::{
    analyze, asqnr, concat_traces, evaluation_count, search_space_size, select_assignment,
    DecisionRule, SensitivityTable,
};

use super::config::RunConfig;

/// Margin below the worst uniform baseline tolerated for the mixed map's logit SQNR.
pub const SOFT_CHECK_MARGIN_DB: f64 = 1.0;

/// Layer counts of a ViT-Base-sized encoder (12 blocks).
pub const VIT_BASE_COUNTS: LayerCounts = LayerCounts {
    softmax: 12,
    gelu: 12,
    layernorm: 25,
};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Provenance {
    pub tool: &'static str,
    pub version: &'static str,
    pub seed: u64,
    pub config_sha256: String,
    /// Canonical TOML; feeding it back through `--config` reproduces the run.
    pub config: String,
}

impl Provenance {
    pub fn new(cfg: &RunConfig) -> Self {
        Provenance {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            seed: cfg.seed,
            config_sha256: cfg.sha256(),
            config: cfg.to_toml(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchSpaceFigures {
    pub softmax: usize,
    pub gelu: usize,
    pub layernorm: usize,
    /// Exact decimal value.
    pub combinations: String,
    pub evaluations: u64,
}

impl SearchSpaceFigures {
    pub fn new(c: LayerCounts) -> Self {
        SearchSpaceFigures {
            softmax: c.softmax,
            gelu: c.gelu,
            layernorm: c.layernorm,
            combinations: search_space_size(c).to_string(),
            evaluations: evaluation_count(c),
        }
    }
}

/// Exact figures for a 12-block encoder next to the commonly quoted ones.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReferenceFigures {
    pub exact: SearchSpaceFigures,
    pub quoted_combinations: &'static str,
    pub quoted_evaluations: u64,
    pub note: &'static str,
}

impl ReferenceFigures {
    pub fn vit_base() -> Self {
        ReferenceFigures {
            exact: SearchSpaceFigures::new(VIT_BASE_COUNTS),
            quoted_combinations: "approximately 9.47e18",
            quoted_evaluations: 122,
            note: "the quoted figures differ from 3^12 * 3^25 * 2^12 and from \
                   3*12 + 2*12 + 3*25 = 135; the exact values are reported",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerEval {
    pub layer: LayerId,
    pub op_kind: OpKind,
    pub mixed_method: MethodId,
    pub mixed_db: f64,
    pub ibert_db: f64,
    pub fqvit_db: f64,
    pub ivit_db: f64,
}

impl LayerEval {
    pub fn baseline(&self, m: MethodId) -> f64 {
        match m {
            MethodId::IBert => self.ibert_db,
            MethodId::FqVit => self.fqvit_db,
            MethodId::IVit => self.ivit_db,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckStatus {
    Pass,
    Warn,
}

/// Per-layer output ASQNR and final-logit SQNR for a map and the uniform baselines.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub layers: Vec<LayerEval>,
    pub logit_sqnr_db: BTreeMap<String, f64>,
    pub threshold_db: f64,
    pub status: CheckStatus,
}

impl Evaluation {
    pub fn mixed_logit_db(&self) -> f64 {
        self.logit_sqnr_db["mixed"]
    }

    pub fn series_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "layer_id",
            "op_kind",
            "mixed_method",
            "mixed",
            "ibert",
            "fqvit",
            "ivit",
        ])
        .map_err(csv_err)?;
        for l in &self.layers {
            w.write_record([
                l.layer.to_string(),
                l.op_kind.to_string(),
                l.mixed_method.to_string(),
                l.mixed_db.to_string(),
                l.ibert_db.to_string(),
                l.fqvit_db.to_string(),
                l.ivit_db.to_string(),
            ])
            .map_err(csv_err)?;
        }
        finish_csv(w)
    }

    /// Layers where the mixed map falls below the best uniform baseline.
    pub fn diff_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "layer_id",
            "mixed_db",
            "best_baseline",
            "best_baseline_db",
            "gap_db",
        ])
        .map_err(csv_err)?;
        for l in &self.layers {
            let (bm, bv) = MethodId::ALL.iter().map(|&m| (m, l.baseline(m))).fold(
                (MethodId::IBert, f64::NEG_INFINITY),
                |a, b| if b.1 > a.1 { b } else { a },
            );
            if l.mixed_db < bv {
                w.write_record([
                    l.layer.to_string(),
                    l.mixed_db.to_string(),
                    bm.to_string(),
                    bv.to_string(),
                    (l.mixed_db - bv).to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
        finish_csv(w)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(e.to_string())
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

fn logit_rows(logits: &[Tensor]) -> Result<Vec<Tensor>> {
    let mut rows = Vec::new();
    for t in logits {
        let c = t.last_dim();
        for r in t.data().chunks(c) {
            rows.push(Tensor::from_vec(r.to_vec())?);
        }
    }
    Ok(rows)
}

fn run_quant(
    m: &Model,
    data: &[Tensor],
    a: &AssignmentMap,
) -> Result<(Vec<Tensor>, ActivationTrace)> {
    let mut logits = Vec::new();
    let mut traces = Vec::new();
    for x in data {
        let (l, t) = m.forward_quant(x, a)?;
        logits.push(l);
        traces.push(t);
    }
    Ok((logits, concat_traces(traces)))
}

/// Fresh integer runs of `mixed` and of each uniform map against the float model.
pub fn evaluate(m: &Model, data: &[Tensor], mixed: &AssignmentMap) -> Result<Evaluation> {
    let layers = m.enumerate_nonlinear_layers();
    mixed.validate(layers)?;
    let mut fp_logits = Vec::new();
    let mut fp_traces = Vec::new();
    for x in data {
        let (l, t) = m.forward_fp(x)?;
        fp_logits.push(l);
        fp_traces.push(t);
    }
    m.calibrate_from_trace(&fp_traces[0])?;
    let fp = concat_traces(fp_traces);
    let fp_rows = logit_rows(&fp_logits)?;

    let mut runs: Vec<(String, AssignmentMap)> = vec![("mixed".into(), mixed.clone())];
    for method in MethodId::ALL {
        runs.push((method.to_string(), AssignmentMap::uniform(layers, method)));
    }
    let mut per_layer: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut logit_sqnr_db = BTreeMap::new();
    for (name, map) in &runs {
        let (logits, trace) = run_quant(m, data, map)?;
        logit_sqnr_db.insert(name.clone(), asqnr(&fp_rows, &logit_rows(&logits)?)?);
        let v = fp
            .layers
            .iter()
            .zip(&trace.layers)
            .map(|(f, q)| asqnr(&f.outputs, &q.outputs))
            .collect::<Result<Vec<_>>>()?;
        per_layer.insert(name.clone(), v);
    }
    let layers = layers
        .iter()
        .enumerate()
        .map(|(i, &l)| LayerEval {
            layer: l,
            op_kind: l.kind,
            mixed_method: mixed.get(l).expect("validated"),
            mixed_db: per_layer["mixed"][i],
            ibert_db: per_layer["ibert"][i],
            fqvit_db: per_layer["fqvit"][i],
            ivit_db: per_layer["ivit"][i],
        })
        .collect();
    let worst = MethodId::ALL
        .iter()
        .map(|m| logit_sqnr_db[m.as_str()])
        .fold(f64::INFINITY, f64::min);
    let threshold_db = worst - SOFT_CHECK_MARGIN_DB;
    let status = if logit_sqnr_db["mixed"] >= threshold_db {
        CheckStatus::Pass
    } else {
        CheckStatus::Warn
    };
    Ok(Evaluation {
        layers,
        logit_sqnr_db,
        threshold_db,
        status,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RuleComparison {
    pub rule: DecisionRule,
    pub assignment: AssignmentMap,
    /// Layers on which the two rules pick different methods.
    pub differing_layers: Vec<LayerId>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisReport {
    pub provenance: Provenance,
    pub rule: DecisionRule,
    pub layer_counts: SearchSpaceFigures,
    pub reference_search_space: ReferenceFigures,
    pub sensitivity: SensitivityTable,
    pub assignment: AssignmentMap,
    pub histogram: BTreeMap<OpKind, BTreeMap<MethodId, usize>>,
    pub other_rule: RuleComparison,
    pub evaluation: Evaluation,
}

/// Wide per-layer series of one column per method.
fn sqnr_diff_series(t: &SensitivityTable, a: &AssignmentMap) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["layer_id", "op_kind", "ibert", "fqvit", "ivit", "selected"])
        .map_err(csv_err)?;
    for l in t.layers() {
        let mut rec = vec![l.to_string(), l.kind.to_string()];
        for m in MethodId::ALL {
            rec.push(
                t.get(l, m)
                    .map(|r| r.sqnr_diff.to_string())
                    .unwrap_or_default(),
            );
        }
        rec.push(a.get(l).map(|m| m.to_string()).unwrap_or_default());
        w.write_record(&rec).map_err(csv_err)?;
    }
    finish_csv(w)
}

fn json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable report");
    s.push('\n');
    s
}

pub(crate) fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let p = dir.join(name);
    fs::write(&p, contents).map_err(|e| Error::io(&p, e))
}

pub(crate) fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn model_and_data(cfg: &RunConfig) -> Result<(Model, Vec<Tensor>)> {
    let model = Model::build(cfg.model_config())?;
    let data = cfg.batches()?;
    Ok((model, data))
}

/// Runs the full analysis and writes its files into `cfg.output_dir`.
pub fn cmd_analyze(cfg: &RunConfig) -> Result<AnalysisReport> {
    let (model, data) = model_and_data(cfg)?;
    let table = analyze(&model, &data)?;
    let assignment = select_assignment(&table, cfg.rule)?;
    let other = match cfg.rule {
        DecisionRule::SqnrDiff => DecisionRule::SqnrOutput,
        DecisionRule::SqnrOutput => DecisionRule::SqnrDiff,
    };
    let other_map = select_assignment(&table, other)?;
    let differing_layers = assignment
        .iter()
        .filter(|&(l, m)| other_map.get(l) != Some(m))
        .map(|(l, _)| l)
        .collect();
    let evaluation = evaluate(&model, &data, &assignment)?;
    let report = AnalysisReport {
        provenance: Provenance::new(cfg),
        rule: cfg.rule,
        layer_counts: SearchSpaceFigures::new(model.config().layer_counts()),
        reference_search_space: ReferenceFigures::vit_base(),
        histogram: assignment.histogram(),
        sensitivity: table,
        assignment,
        other_rule: RuleComparison {
            rule: other,
            assignment: other_map,
            differing_layers,
        },
        evaluation,
    };

    let dir = &cfg.output_dir;
    create_dir(dir)?;
    write(dir, "sensitivity.csv", &report.sensitivity.to_csv()?)?;
    write(dir, "sensitivity.json", &json(&report.sensitivity))?;
    write(dir, "assignment.json", &json(&report.assignment))?;
    write(dir, "histogram.json", &json(&report.histogram))?;
    write(
        dir,
        "series_sqnr_diff.csv",
        &sqnr_diff_series(&report.sensitivity, &report.assignment)?,
    )?;
    write(
        dir,
        "series_post_selection.csv",
        &report.evaluation.series_csv()?,
    )?;
    if report.evaluation.status == CheckStatus::Warn {
        write(dir, "eval_diff.csv", &report.evaluation.diff_csv()?)?;
    }
    write(dir, "report.json", &json(&report))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub provenance: Provenance,
    pub assignment: AssignmentMap,
    pub evaluation: Evaluation,
}

/// Evaluates the map in `assignment` against the configured model.
pub fn cmd_eval(cfg: &RunConfig, assignment: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(assignment).map_err(|e| Error::io(assignment, e))?;
    let map = AssignmentMap::from_json(&text)?;
    let (model, data) = model_and_data(cfg)?;
    map.validate(model.enumerate_nonlinear_layers())
        .map_err(|e| {
            Error::InvalidInput(format!(
                "{} does not match the configured model: {e}",
                assignment.display()
            ))
        })?;
    let evaluation = evaluate(&model, &data, &map)?;
    let report = EvalReport {
        provenance: Provenance::new(cfg),
        assignment: map,
        evaluation,
    };
    let dir = &cfg.output_dir;
    create_dir(dir)?;
    write(
        dir,
        "series_post_selection.csv",
        &report.evaluation.series_csv()?,
    )?;
    if report.evaluation.status == CheckStatus::Warn {
        write(dir, "eval_diff.csv", &report.evaluation.diff_csv()?)?;
    }
    write(dir, "eval.json", &json(&report))?;
    Ok(report)
}

/// Re-runs selection on a stored table; writes `assignment.json` and `histogram.json`.
pub fn cmd_select(table: &Path, rule: DecisionRule, out: &Path) -> Result<AssignmentMap> {
    let text = fs::read_to_string(table).map_err(|e| Error::io(table, e))?;
    let t = SensitivityTable::from_csv(&text)?;
    let a = select_assignment(&t, rule)?;
    create_dir(out)?;
    write(out, "assignment.json", &json(&a))?;
    write(out, "histogram.json", &json(&a.histogram()))?;
    Ok(a)
}
