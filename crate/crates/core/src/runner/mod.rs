// SPDX-License-Identifier: MIT OR Apache-2.0

//! Plan execution, per-condition statistics and report output.
//!
//! Every `(prompt, replicate, condition)` cell is executed at most once
//! per output directory; results are appended to `manifest.jsonl`, which
//! is also the sole input for [`build_report`]. Full-condition cells are
//! always part of a run because they are the KID and image-reference
//! baseline.

pub mod manifest;
pub mod plots;

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backends::BackendHandle;
use crate::dataset::ExperimentPlan;
use crate::error::{Error, Result};
use crate::idp::{idp_generate, IdpPlan, LatentPolicy};
use crate::ite::ite_generate;
use crate::metrics::{
    aggregate, clip_score, clip_score_image_ref, kid, FeatureExtractor, FeatureSet, KidConfig,
    Normalizer,
};
use crate::reptypes::{make_keep_mask, Condition, Method};

pub use manifest::{
    cell_id, read_manifest, CellRecord, CellStatus, Manifest, ManifestHeader, MANIFEST_FILE,
};

pub const WORKERS_ENV: &str = "PADPROBE_WORKERS";
pub const REPORT_FILE: &str = "report.json";
pub const SUMMARY_FILE: &str = "run_summary.json";

/// `PADPROBE_WORKERS` wins over the flag; the fallback is 1.
pub fn resolve_workers(flag: Option<usize>, env: &dyn Fn(&str) -> Option<String>) -> Result<usize> {
    let w = match env(WORKERS_ENV) {
        Some(v) if !v.trim().is_empty() => v
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::InvalidConfig(format!("{WORKERS_ENV}=`{v}` is not a count")))?,
        _ => flag.unwrap_or(1),
    };
    if w == 0 {
        return Err(Error::InvalidConfig("worker count must be >= 1".into()));
    }
    Ok(w)
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub workers: usize,
    /// Stop after executing this many pending cells.
    pub max_cells: Option<usize>,
    pub latent_policy: LatentPolicy,
    pub kid: KidConfig,
}

impl RunOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Self {
            out_dir: out_dir.into(),
            workers: 1,
            max_cells: None,
            latent_policy: LatentPolicy::default(),
            kid: KidConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionRow {
    pub condition: Condition,
    pub mean_clip_text: Option<f64>,
    pub std_clip_text: Option<f64>,
    pub mean_clip_image_ref: Option<f64>,
    pub kid_vs_full: Option<f64>,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub plan_hash: String,
    pub method: Method,
    pub backend_id: String,
    pub config_hash: String,
    pub extractor_id: String,
    pub toolkit_version: String,
    pub prompt_ids: Vec<String>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub rows: Vec<ConditionRow>,
    pub provenance: Provenance,
    /// Cells expected per condition.
    pub expected_n: usize,
    pub failed_cells: Vec<String>,
    pub complete: bool,
}

impl ExperimentReport {
    pub fn row(&self, condition: Condition) -> Option<&ConditionRow> {
        self.rows.iter().find(|r| r.condition == condition)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("report: {e}")))
    }
}

/// Timing and bookkeeping for one invocation; kept out of the report so
/// resumed runs produce byte-identical reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub wall_time_secs: f64,
    pub workers: usize,
    pub cells_total: usize,
    pub cells_skipped: usize,
    pub cells_executed: usize,
    pub cells_failed: usize,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: ExperimentReport,
    pub summary: RunSummary,
    pub manifest_path: PathBuf,
}

#[derive(Debug, Clone)]
struct CellSpec {
    index: usize,
    prompt: usize,
    replicate: u32,
    condition: Condition,
    seed: u64,
    id: String,
}

/// Plan conditions with `full` prepended when absent.
pub fn run_conditions(plan: &ExperimentPlan) -> Vec<Condition> {
    let mut out = Vec::with_capacity(plan.conditions.len() + 1);
    if !plan.conditions.contains(&Condition::Full) {
        out.push(Condition::Full);
    }
    for c in &plan.conditions {
        if !out.contains(c) {
            out.push(*c);
        }
    }
    out
}

fn plan_cells(plan: &ExperimentPlan, conditions: &[Condition]) -> Result<Vec<CellSpec>> {
    let mut cells = Vec::new();
    for (pi, p) in plan.prompts.iter().enumerate() {
        for r in 0..plan.seeds_per_prompt {
            let seed = plan
                .seed_for(&p.id, r)
                .ok_or_else(|| Error::Integrity(format!("no seed for `{}` replicate {r}", p.id)))?;
            for &c in conditions {
                cells.push(CellSpec {
                    index: cells.len(),
                    prompt: pi,
                    replicate: r,
                    condition: c,
                    seed,
                    id: cell_id(&p.id, r, c),
                });
            }
        }
    }
    Ok(cells)
}

fn check_method(handle: &BackendHandle, method: Method) -> Result<()> {
    let caps = handle.capabilities();
    match method {
        Method::Ite if !caps.encoder_output_conditioning => Err(Error::UnsupportedCapability(
            "encoder_output_conditioning".into(),
        )),
        Method::Idp if !caps.per_layer_text_stream => Err(Error::UnsupportedPlan(format!(
            "backend `{}` exposes no per-layer text stream",
            handle.id()
        ))),
        _ => Ok(()),
    }
}

fn execute_cell(
    plan: &ExperimentPlan,
    plan_hash: &str,
    method: Method,
    handle: &BackendHandle,
    extractor: &dyn FeatureExtractor,
    policy: LatentPolicy,
    cell: &CellSpec,
) -> Result<CellRecord> {
    let record = &plan.prompts[cell.prompt];
    let mut out = CellRecord {
        plan_hash: plan_hash.to_string(),
        cell_id: cell.id.clone(),
        index: cell.index,
        prompt_id: record.id.clone(),
        replicate: cell.replicate,
        condition: cell.condition,
        seed: cell.seed,
        status: CellStatus::Ok,
        clip_text: None,
        image_features: Vec::new(),
        error: None,
    };
    let generated = (|| {
        let prompt = handle.tokenize(&record.text)?;
        let generation = match method {
            Method::Ite => ite_generate(handle, &prompt, cell.condition, cell.seed)?.generation,
            Method::Idp => {
                let mut idp = IdpPlan::new(make_keep_mask(&prompt, cell.condition)?);
                idp.latent_policy = policy;
                idp_generate(handle, &prompt, &idp, cell.seed)?
            }
        };
        Ok::<_, Error>((prompt, generation))
    })();
    let (prompt, generation) = match generated {
        Ok(v) => v,
        Err(e) => {
            log::warn!("cell {} failed: {e}", cell.id);
            out.status = CellStatus::Failed;
            out.error = Some(format!("error[{}]: {e}", e.code()));
            return Ok(out);
        }
    };
    let image = extractor.image_features(&generation)?;
    let text = extractor.text_features(handle, &prompt)?;
    out.clip_text =
        Some(clip_score(&image, &text, 1.0).map_err(|e| Error::Extractor(e.to_string()))?);
    out.image_features = image;
    Ok(out)
}

/// Executes every pending cell of `plan` and rebuilds the report from the
/// manifest in `opts.out_dir`.
pub fn run_plan(
    plan: &ExperimentPlan,
    method: Method,
    handle: &BackendHandle,
    extractor: &dyn FeatureExtractor,
    opts: &RunOptions,
) -> Result<RunOutcome> {
    let started = Instant::now();
    plan.validate()?;
    if plan.backend_id != handle.id() {
        return Err(Error::InvalidConfig(format!(
            "plan targets backend `{}` but `{}` was given",
            plan.backend_id,
            handle.id()
        )));
    }
    if let Some(h) = &plan.config_hash {
        if *h != handle.config_hash() {
            return Err(Error::InvalidConfig(format!(
                "plan was built for config {h}, backend has {}",
                handle.config_hash()
            )));
        }
    }
    check_method(handle, method)?;
    if opts.workers == 0 {
        return Err(Error::InvalidConfig("worker count must be >= 1".into()));
    }

    let conditions = run_conditions(plan);
    let plan_hash = plan.plan_hash();
    let header = ManifestHeader {
        plan_hash: plan_hash.clone(),
        method,
        backend_id: handle.id().to_string(),
        config_hash: handle.config_hash(),
        extractor_id: extractor.id().to_string(),
        toolkit_version: crate::VERSION.to_string(),
        latent_policy: (method == Method::Idp).then_some(opts.latent_policy),
        conditions: conditions.clone(),
        plan: plan.clone(),
    };
    std::fs::create_dir_all(&opts.out_dir).map_err(|e| Error::io(&opts.out_dir, e))?;
    let manifest_path = opts.out_dir.join(MANIFEST_FILE);
    let (writer, done) = manifest::ManifestWriter::open(&manifest_path, &header)?;
    let done: std::collections::HashSet<String> = done.into_iter().map(|c| c.cell_id).collect();

    let cells = plan_cells(plan, &conditions)?;
    let mut pending: Vec<&CellSpec> = cells.iter().filter(|c| !done.contains(&c.id)).collect();
    let skipped = cells.len() - pending.len();
    if let Some(max) = opts.max_cells {
        pending.truncate(max);
    }

    let writer = Mutex::new(writer);
    let next = AtomicUsize::new(0);
    let failed = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let fatal: Mutex<Option<Error>> = Mutex::new(None);
    let workers = opts.workers.min(pending.len()).max(1);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            let worker_handle = handle.fork();
            let (pending, writer, next, failed, stop, fatal, plan_hash) =
                (&pending, &writer, &next, &failed, &stop, &fatal, &plan_hash);
            scope.spawn(move || loop {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cell) = pending.get(i) else { break };
                let res = execute_cell(
                    plan,
                    plan_hash,
                    method,
                    &worker_handle,
                    extractor,
                    opts.latent_policy,
                    cell,
                )
                .and_then(|rec| {
                    if rec.status == CellStatus::Failed {
                        failed.fetch_add(1, Ordering::SeqCst);
                    }
                    writer
                        .lock()
                        .unwrap_or_else(|p| p.into_inner())
                        .append(&rec)
                });
                if let Err(e) = res {
                    stop.store(true, Ordering::SeqCst);
                    fatal
                        .lock()
                        .unwrap_or_else(|p| p.into_inner())
                        .get_or_insert(e);
                    break;
                }
            });
        }
    });
    if let Some(e) = fatal.into_inner().unwrap_or_else(|p| p.into_inner()) {
        return Err(e);
    }
    drop(writer);

    let manifest = read_manifest(&manifest_path)?;
    let report = build_report(&manifest, &opts.kid)?;
    let report_path = opts.out_dir.join(REPORT_FILE);
    std::fs::write(&report_path, report.to_json()?).map_err(|e| Error::io(&report_path, e))?;
    let executed = pending.len().min(next.load(Ordering::SeqCst));
    let summary = RunSummary {
        wall_time_secs: started.elapsed().as_secs_f64(),
        workers,
        cells_total: cells.len(),
        cells_skipped: skipped,
        cells_executed: executed,
        cells_failed: failed.load(Ordering::SeqCst),
    };
    let summary_path = opts.out_dir.join(SUMMARY_FILE);
    std::fs::write(
        &summary_path,
        serde_json::to_string_pretty(&summary)? + "\n",
    )
    .map_err(|e| Error::io(&summary_path, e))?;
    Ok(RunOutcome {
        report,
        summary,
        manifest_path,
    })
}

/// Per-condition statistics from a manifest. Cells are visited in plan
/// order, so the result does not depend on execution order.
pub fn build_report(manifest: &Manifest, kid_cfg: &KidConfig) -> Result<ExperimentReport> {
    let h = &manifest.header;
    let mut cells: Vec<&CellRecord> = manifest.cells.iter().collect();
    cells.sort_by_key(|c| c.index);
    let ok = |c: &&&CellRecord| c.status == CellStatus::Ok;
    let full: HashMap<(&str, u32), &CellRecord> = cells
        .iter()
        .filter(ok)
        .filter(|c| c.condition == Condition::Full)
        .map(|c| ((c.prompt_id.as_str(), c.replicate), *c))
        .collect();

    let mut rows = Vec::new();
    for &cond in &h.conditions {
        let mine: Vec<&CellRecord> = cells
            .iter()
            .filter(ok)
            .filter(|c| c.condition == cond)
            .copied()
            .collect();
        let scores: Vec<f64> = mine.iter().filter_map(|c| c.clip_text).collect();
        let agg = aggregate(&scores).ok();
        let mut refs = Vec::new();
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for c in &mine {
            if let Some(f) = full.get(&(c.prompt_id.as_str(), c.replicate)) {
                refs.push(clip_score_image_ref(&c.image_features, &f.image_features)?);
                xs.push(f.image_features.clone());
                ys.push(c.image_features.clone());
            }
        }
        let mean_ref = aggregate(&refs).ok().map(|a| a.mean);
        let kid_vs_full = if xs.len() >= 2 {
            let x = FeatureSet::new(xs, Normalizer::L2, h.extractor_id.clone())?;
            let y = FeatureSet::new(ys, Normalizer::L2, h.extractor_id.clone())?;
            Some(kid(&x, &y, kid_cfg)?)
        } else {
            None
        };
        rows.push(ConditionRow {
            condition: cond,
            mean_clip_text: agg.map(|a| a.mean),
            std_clip_text: agg.map(|a| a.std),
            mean_clip_image_ref: mean_ref,
            kid_vs_full,
            n: scores.len(),
        });
    }

    let plan = &h.plan;
    let expected_n = plan.prompts.len() * plan.seeds_per_prompt as usize;
    let failed_cells: Vec<String> = cells
        .iter()
        .filter(|c| c.status == CellStatus::Failed)
        .map(|c| c.cell_id.clone())
        .collect();
    let complete = cells.len() == expected_n * h.conditions.len();
    Ok(ExperimentReport {
        rows,
        provenance: Provenance {
            plan_hash: h.plan_hash.clone(),
            method: h.method,
            backend_id: h.backend_id.clone(),
            config_hash: h.config_hash.clone(),
            extractor_id: h.extractor_id.clone(),
            toolkit_version: h.toolkit_version.clone(),
            prompt_ids: plan.prompts.iter().map(|p| p.id.clone()).collect(),
            seeds: plan.seed_table.iter().map(|e| e.seed).collect(),
        },
        expected_n,
        failed_cells,
        complete,
    })
}

// ---------------------------------------------------------------------------
// Segment analysis
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRow {
    pub condition: Condition,
    pub mean_clip_text: f64,
    pub std_clip_text: f64,
    pub n: usize,
}

/// ITE CLIP statistics for `pads_seg(i, n)`, `i` ascending.
pub fn segment_report(
    plan: &ExperimentPlan,
    n_segments: usize,
    handle: &BackendHandle,
    extractor: &dyn FeatureExtractor,
) -> Result<Vec<SegmentRow>> {
    if n_segments == 0 {
        return Err(Error::UnknownCondition("pads_seg(_,0)".into()));
    }
    let prompts = plan
        .prompts
        .iter()
        .map(|p| handle.tokenize(&p.text).map(|t| (p, t)))
        .collect::<Result<Vec<_>>>()?;
    for (p, t) in &prompts {
        let pads = t.pad_indices().len();
        if pads < n_segments {
            return Err(Error::NoPadsAvailable(format!(
                "prompt `{}` has {pads} pads, fewer than {n_segments} segments",
                p.id
            )));
        }
    }
    let mut rows = Vec::with_capacity(n_segments);
    for index in 0..n_segments {
        let condition = Condition::PadsSeg {
            index,
            count: n_segments,
        };
        let mut scores = Vec::new();
        for (p, t) in &prompts {
            let text = extractor.text_features(handle, t)?;
            for r in 0..plan.seeds_per_prompt {
                let seed = plan.seed_for(&p.id, r).ok_or_else(|| {
                    Error::Integrity(format!("no seed for `{}` replicate {r}", p.id))
                })?;
                let g = ite_generate(handle, t, condition, seed)?.generation;
                let image = extractor.image_features(&g)?;
                scores.push(clip_score(&image, &text, 1.0)?);
            }
        }
        let a = aggregate(&scores)?;
        rows.push(SegmentRow {
            condition,
            mean_clip_text: a.mean,
            std_clip_text: a.std,
            n: a.n,
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Output
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    Plots,
}

impl fmt::Display for ReportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Json => "json",
            Self::Csv => "csv",
            Self::Plots => "plots",
        })
    }
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            "plots" => Ok(Self::Plots),
            other => Err(Error::Parse(format!("unknown report format `{other}`"))),
        }
    }
}

pub const CSV_COLUMNS: [&str; 6] = [
    "condition",
    "mean_clip_text",
    "std_clip_text",
    "mean_clip_image_ref",
    "kid_vs_full",
    "n",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmitOptions {
    /// Multiplier applied to KID in CSV and plots only. JSON stays raw and
    /// records the multiplier next to the rows.
    pub kid_display_scale: f64,
}

impl Default for EmitOptions {
    fn default() -> Self {
        Self {
            kid_display_scale: 1.0,
        }
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.9}")).unwrap_or_default()
}

pub fn report_csv(report: &ExperimentReport, opts: &EmitOptions) -> String {
    let mut s = CSV_COLUMNS.join(",");
    s.push('\n');
    for r in &report.rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.condition,
            opt(r.mean_clip_text),
            opt(r.std_clip_text),
            opt(r.mean_clip_image_ref),
            opt(r.kid_vs_full.map(|k| k * opts.kid_display_scale)),
            r.n
        ));
    }
    s
}

fn report_json(report: &ExperimentReport, opts: &EmitOptions) -> Result<String> {
    if opts.kid_display_scale == 1.0 {
        return report.to_json();
    }
    let mut v = serde_json::to_value(report)?;
    v["kid_display_scale"] = serde_json::json!(opts.kid_display_scale);
    Ok(serde_json::to_string_pretty(&v)? + "\n")
}

/// Writes the report in `format` under `out_dir`; returns the paths.
pub fn emit_report(
    report: &ExperimentReport,
    format: ReportFormat,
    out_dir: &Path,
    opts: &EmitOptions,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let write = |name: &str, body: String| -> Result<PathBuf> {
        let p = out_dir.join(name);
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    };
    match format {
        ReportFormat::Json => Ok(vec![write(REPORT_FILE, report_json(report, opts)?)?]),
        ReportFormat::Csv => Ok(vec![write("report.csv", report_csv(report, opts))?]),
        ReportFormat::Plots => {
            if report.rows.iter().all(|r| r.n == 0) {
                return Err(Error::IoMessage(
                    "cannot plot an empty report: no completed cells".into(),
                ));
            }
            let labels: Vec<String> = report
                .rows
                .iter()
                .map(|r| r.condition.to_string())
                .collect();
            let clip: Vec<f64> = report
                .rows
                .iter()
                .map(|r| r.mean_clip_text.unwrap_or(0.0))
                .collect();
            let kid_vals: Vec<f64> = report
                .rows
                .iter()
                .map(|r| r.kid_vs_full.map_or(0.0, |k| k * opts.kid_display_scale))
                .collect();
            Ok(vec![
                write(
                    "clip_by_condition.svg",
                    plots::bar_chart_svg("Mean CLIP score", &labels, &clip),
                )?,
                write(
                    "kid_by_condition.svg",
                    plots::bar_chart_svg("KID vs full", &labels, &kid_vals),
                )?,
            ])
        }
    }
}
