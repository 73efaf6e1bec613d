//! Subcommand implementations behind the `lungfuse` binary.
//!
//! A run directory is laid out as `data/`, `train/`, `eval/` and `explain/`;
//! `report` reads `eval/` and `explain/` and writes `report.md` and
//! `report.json` at the top level.

pub mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attribution::export::{write_heatmap_pgm, write_overlay_png};
use crate::attribution::{
    explain, gaussian_blur, insertion_auc, localization_iou, AttributionConfig, BaselineMode, CtExplainer, Explainable,
    Method, Target, TileExplainer,
};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::evaluation::{assemble_report, MetricsReport};
use crate::model::checkpoint::sidecar_path;
use crate::model::{load_checkpoint, save_checkpoint, CheckpointMeta, DualModalModel, Stage, CLASS_NAMES};
use crate::preprocess::{Split, StainReference};
use crate::seed;
use crate::synthdata::io::{read_dataset, write_dataset};
use crate::synthdata::{generate_dataset, Dataset};
use crate::training::{
    predict_all, prepare_dataset, prepare_with_stats, train_branch, train_fusion, Branch, PreparedDataset,
    PreparedPatient, TrainOutcome,
};

pub use config::RunConfig;

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } | Error::Format { .. } | Error::Json(_) | Error::Image(_) => 2,
        Error::Config { .. } | Error::InvalidArgument(_) => 3,
        Error::MissingFile(_) => 4,
        Error::NonFinite(_) => 5,
        _ => 1,
    }
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingFile(path.to_path_buf()))
    }
}

/// Generate the dataset and write it under `out`; returns the manifest path.
pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let ds = generate_dataset(&cfg.generator)?;
    write_dataset(out, &ds)?;
    write(&out.join("config.txt"), cfg.to_text())?;
    Ok(out.join("manifest.csv"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainStage {
    Ct,
    He,
    Fusion,
    All,
}

impl std::str::FromStr for TrainStage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ct" => Ok(TrainStage::Ct),
            "he" => Ok(TrainStage::He),
            "fusion" => Ok(TrainStage::Fusion),
            "all" => Ok(TrainStage::All),
            _ => Err(Error::invalid(format!(
                "unknown stage `{s}` (expected ct, he, fusion or all)"
            ))),
        }
    }
}

fn load_data(data: &Path) -> Result<Dataset> {
    require(&data.join("manifest.csv"))?;
    read_dataset(data)
}

fn save_stage(
    out: &Path,
    name: &str,
    stage: Stage,
    o: &TrainOutcome,
    cfg: &RunConfig,
    data: &PreparedDataset,
) -> Result<PathBuf> {
    let path = out.join(format!("{name}.dsm"));
    let mut meta = CheckpointMeta::new(stage, o.model.config.clone(), cfg.seed);
    meta.metadata_stats = Some(data.stats);
    meta.best_epoch = o.best_epoch;
    save_checkpoint(&path, &o.model, &meta)?;
    write(&out.join(format!("history_{name}.csv")), o.history.to_csv())?;
    Ok(path)
}

/// Outcomes of the three training stages.
#[derive(Clone, Debug)]
pub struct StagedModels {
    pub ct: TrainOutcome,
    pub he: TrainOutcome,
    pub fusion: TrainOutcome,
}

/// Train both branches and then the gate in memory, seeded as `train`
/// seeds them.
pub fn train_all(cfg: &RunConfig, prepared: &PreparedDataset) -> Result<StagedModels> {
    let init = DualModalModel::<f32>::init(cfg.model_config(), seed::derive(cfg.seed, "init"))?;
    let ct = train_branch(Branch::Ct, init.clone(), prepared, &cfg.train)?;
    let he = train_branch(Branch::He, init.clone(), prepared, &cfg.train)?;
    let fusion = train_fusion(&ct.model, &he.model, init, prepared, &cfg.train)?;
    Ok(StagedModels { ct, he, fusion })
}

/// Train the requested stages; returns the checkpoints written.
pub fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path, stage: TrainStage) -> Result<Vec<PathBuf>> {
    let ds = load_data(data)?;
    let (ct_path, he_path) = (out.join("ct.dsm"), out.join("he.dsm"));
    if stage == TrainStage::Fusion {
        require(&ct_path)?;
        require(&he_path)?;
    }
    let prepared = prepare_dataset(&ds, &StainReference::standard())?;
    mkdir(out)?;
    let init = DualModalModel::<f32>::init(cfg.model_config(), seed::derive(cfg.seed, "init"))?;
    let mut written = Vec::new();
    let branch = |b: Branch, stage: Stage, written: &mut Vec<PathBuf>| -> Result<DualModalModel<f32>> {
        let o = train_branch(b, init.clone(), &prepared, &cfg.train)?;
        written.push(save_stage(out, b.prefix(), stage, &o, cfg, &prepared)?);
        Ok(o.model)
    };
    let (ct, he) = match stage {
        TrainStage::Ct => {
            branch(Branch::Ct, Stage::Ct, &mut written)?;
            return Ok(written);
        }
        TrainStage::He => {
            branch(Branch::He, Stage::He, &mut written)?;
            return Ok(written);
        }
        TrainStage::All => (
            branch(Branch::Ct, Stage::Ct, &mut written)?,
            branch(Branch::He, Stage::He, &mut written)?,
        ),
        TrainStage::Fusion => (load_checkpoint(&ct_path)?.0, load_checkpoint(&he_path)?.0),
    };
    let fused = train_fusion(&ct, &he, init.clone(), &prepared, &cfg.train)?;
    written.push(save_stage(out, "fusion", Stage::Fusion, &fused, cfg, &prepared)?);
    Ok(written)
}

/// Prepare a dataset with the metadata statistics stored in a checkpoint.
fn prepare_for(checkpoint: &Path, ds: &Dataset) -> Result<(DualModalModel<f32>, CheckpointMeta, PreparedDataset)> {
    let (model, meta) = load_checkpoint(checkpoint)?;
    let reference = StainReference::standard();
    let prepared = match &meta.metadata_stats {
        Some(stats) => prepare_with_stats(ds, &reference, *stats)?,
        None => prepare_dataset(ds, &reference)?,
    };
    Ok((model, meta, prepared))
}

/// Score the test split; writes `metrics.json` and `confusion.csv`.
pub fn cmd_eval(checkpoint: &Path, data: &Path, baselines: &[PathBuf], out: &Path) -> Result<MetricsReport> {
    require(checkpoint)?;
    require(&sidecar_path(checkpoint))?;
    for b in baselines {
        require(b)?;
    }
    let ds = load_data(data)?;
    let (_, _, prepared) = prepare_for(checkpoint, &ds)?;
    let refs: Vec<&Path> = baselines.iter().map(PathBuf::as_path).collect();
    let report = assemble_report(checkpoint, &prepared.test, &refs)?;
    mkdir(out)?;
    write(&out.join("metrics.json"), report.to_json()?)?;
    let mut m = crate::evaluation::ConfusionMatrix([[0; 5]; 5]);
    for (row, r) in m.0.iter_mut().zip(&report.confusion) {
        row.copy_from_slice(r);
    }
    write(&out.join("confusion.csv"), m.to_csv(&CLASS_NAMES))?;
    Ok(report)
}

/// Which patients to explain.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Selection {
    Patient(String),
    Split(Split),
}

/// Per-image explanation record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplanationRow {
    pub patient_id: String,
    pub modality: String,
    pub class: String,
    pub method: String,
    pub insertion_auc: f64,
    /// `None` for an empty lesion mask.
    pub iou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub mean_insertion_auc: f64,
    pub mean_iou: Option<f64>,
    pub images: usize,
    pub iou_images: usize,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| x.to_string())
}

pub fn parse_methods(list: &str) -> Result<Vec<Method>> {
    if list.trim() == "all" {
        return Ok(Method::ALL.to_vec());
    }
    let mut out = Vec::new();
    for id in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let m: Method = id.parse()?;
        if !out.contains(&m) {
            out.push(m);
        }
    }
    if out.is_empty() {
        return Err(Error::invalid("no attribution methods requested"));
    }
    Ok(out)
}

struct ImageJob<'a, M> {
    explainer: &'a M,
    input: Tensor<f64>,
    baseline: Tensor<f64>,
    mask: &'a [bool],
    modality: &'static str,
}

fn explain_image<M: Explainable<f32>>(
    job: &ImageJob<'_, M>,
    patient: &PreparedPatient,
    methods: &[Method],
    cfg: &AttributionConfig,
    out: &Path,
    curves: &mut BTreeMap<Method, String>,
) -> Result<Vec<ExplanationRow>> {
    let mut rows = Vec::new();
    let has_mask = job.mask.iter().any(|&m| m);
    for &method in methods {
        let h = explain(job.explainer, method, &job.input, patient.label, &job.baseline, cfg)?;
        let stem = format!("{}_{}_{}", patient.id, job.modality, method.id());
        write_heatmap_pgm(&out.join("heatmaps").join(format!("{stem}.pgm")), &h)?;
        write_overlay_png(&out.join("heatmaps").join(format!("{stem}.png")), &job.input, &h)?;
        let curve = insertion_auc(
            job.explainer,
            &job.input,
            &h,
            patient.label,
            cfg.insertion_steps,
            BaselineMode::Blur(cfg.blur_sigma),
        )?;
        let text = curves.entry(method).or_default();
        for (f, p) in curve.fractions.iter().zip(&curve.probabilities) {
            text.push_str(&format!("{},{},{f},{p}\n", patient.id, job.modality));
        }
        rows.push(ExplanationRow {
            patient_id: patient.id.clone(),
            modality: job.modality.into(),
            class: CLASS_NAMES[patient.label].into(),
            method: method.id().into(),
            insertion_auc: curve.auc,
            iou: if has_mask {
                Some(localization_iou(&h.values, job.mask)?)
            } else {
                None
            },
        });
    }
    Ok(rows)
}

/// Heatmaps for every selected patient and modality the checkpoint covers,
/// per-method insertion curves, an IoU table and a per-method summary.
pub fn cmd_explain(
    cfg: &RunConfig,
    checkpoint: &Path,
    data: &Path,
    selection: &Selection,
    methods: &[Method],
    out: &Path,
) -> Result<Vec<MethodSummary>> {
    require(checkpoint)?;
    let ds = load_data(data)?;
    let (model, meta, prepared) = prepare_for(checkpoint, &ds)?;
    let patients: Vec<&PreparedPatient> = match selection {
        Selection::Patient(id) => {
            let all = prepared.train.iter().chain(&prepared.val).chain(&prepared.test);
            vec![all
                .into_iter()
                .find(|p| &p.id == id)
                .ok_or_else(|| Error::invalid(format!("patient `{id}` is not in the dataset")))?]
        }
        Selection::Split(s) => prepared.split(*s).iter().take(cfg.explain_limit).collect(),
    };
    if patients.is_empty() {
        return Err(Error::EmptySplit("no patients selected for explanation".into()));
    }
    mkdir(&out.join("heatmaps"))?;
    mkdir(&out.join("insertion"))?;
    let acfg = &cfg.attribution;
    let mut rows = Vec::new();
    let mut curves: BTreeMap<Method, String> = BTreeMap::new();
    for p in patients {
        let pred = predict_all(&model, std::slice::from_ref(p))?;
        let (zc, zh, w) = (&pred.ct_logits[0], &pred.he_logits[0], pred.gate[0]);
        let fused = |w_self: f64, w_other: f64, other: &[f64]| Target::Fused {
            w_self,
            w_other,
            other_logits: other.to_vec(),
        };
        if matches!(meta.stage, Stage::Ct | Stage::Fusion) {
            let target = if meta.stage == Stage::Fusion {
                fused(w[0], w[1], zh)
            } else {
                Target::Branch
            };
            let ex = CtExplainer::new(&model, target);
            let input: Tensor<f64> = p.ct.cast();
            let job = ImageJob {
                explainer: &ex,
                baseline: Tensor::zeros(input.shape()),
                input,
                mask: &p.ct_mask,
                modality: "ct",
            };
            rows.extend(explain_image(&job, p, methods, acfg, out, &mut curves)?);
        }
        if matches!(meta.stage, Stage::He | Stage::Fusion) {
            let target = if meta.stage == Stage::Fusion {
                fused(w[1], w[0], zc)
            } else {
                Target::Branch
            };
            let attn = &pred.attention[0];
            let top = (0..attn.len()).fold(0, |b, i| if attn[i] > attn[b] { i } else { b });
            let ex = TileExplainer::new(&model, &p.tiles, top, target)?;
            let s = p.tiles.shape();
            let plane = s[1] * s[2] * s[3];
            let input = Tensor::from_f64(&s[1..], &p.tiles.to_f64_vec()[top * plane..(top + 1) * plane])?;
            let job = ImageJob {
                explainer: &ex,
                baseline: gaussian_blur(&input, acfg.blur_sigma)?,
                input,
                mask: &p.tile_masks[top],
                modality: "he",
            };
            rows.extend(explain_image(&job, p, methods, acfg, out, &mut curves)?);
        }
    }
    for (method, text) in &curves {
        write(
            &out.join("insertion").join(format!("{}.csv", method.id())),
            format!("patient_id,modality,fraction,probability\n{text}"),
        )?;
    }
    let mut iou = String::from("patient_id,modality,class,method,insertion_auc,iou\n");
    for r in &rows {
        iou.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.patient_id,
            r.modality,
            r.class,
            r.method,
            r.insertion_auc,
            fmt_opt(r.iou)
        ));
    }
    write(&out.join("iou.csv"), iou)?;
    let summary = summarize(&rows, methods);
    write(&out.join("summary.csv"), summary_csv(&summary))?;
    Ok(summary)
}

pub fn summarize(rows: &[ExplanationRow], methods: &[Method]) -> Vec<MethodSummary> {
    methods
        .iter()
        .map(|m| {
            let mine: Vec<&ExplanationRow> = rows.iter().filter(|r| r.method == m.id()).collect();
            let ious: Vec<f64> = mine.iter().filter_map(|r| r.iou).collect();
            MethodSummary {
                method: m.id().into(),
                mean_insertion_auc: mine.iter().map(|r| r.insertion_auc).sum::<f64>() / mine.len().max(1) as f64,
                mean_iou: (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64),
                images: mine.len(),
                iou_images: ious.len(),
            }
        })
        .collect()
}

pub fn summary_csv(summary: &[MethodSummary]) -> String {
    let mut s = String::from("method,mean_insertion_auc,mean_iou,images,iou_images\n");
    for m in summary {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            m.method,
            m.mean_insertion_auc,
            fmt_opt(m.mean_iou),
            m.images,
            m.iou_images
        ));
    }
    s
}

pub fn read_summary(path: &Path) -> Result<Vec<MethodSummary>> {
    require(path)?;
    let err = |message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| err(e.to_string()))?;
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| err(e.to_string()))?;
        if rec.len() != 5 {
            return Err(err(format!("expected 5 columns, found {}", rec.len())));
        }
        let num = |i: usize| rec[i].parse::<f64>().map_err(|e| err(e.to_string()));
        let count = |i: usize| rec[i].parse::<usize>().map_err(|e| err(e.to_string()));
        out.push(MethodSummary {
            method: rec[0].to_string(),
            mean_insertion_auc: num(1)?,
            mean_iou: if &rec[2] == "n/a" { None } else { Some(num(2)?) },
            images: count(3)?,
            iou_images: count(4)?,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub model: String,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub auroc_macro_ovr: Option<f64>,
    pub brier: f64,
    /// `(baseline, macro AUROC of the model, macro AUROC of the baseline, min p)`.
    pub delong: Vec<(String, f64, f64, f64)>,
    /// Methods by descending mean insertion AUC.
    pub ranking: Vec<MethodSummary>,
}

fn ranked(mut methods: Vec<MethodSummary>) -> Vec<MethodSummary> {
    methods.sort_by(|a, b| {
        b.mean_insertion_auc
            .total_cmp(&a.mean_insertion_auc)
            .then_with(|| a.method.cmp(&b.method))
    });
    methods
}

fn markdown(m: &MetricsReport, s: &RunSummary) -> String {
    let mut md = String::new();
    md.push_str(&format!("# Run report ({} model)\n\n", m.model));
    md.push_str("## Classification\n\n| metric | value |\n|---|---|\n");
    md.push_str(&format!(
        "| accuracy | {:.4} |\n| macro-F1 | {:.4} |\n",
        m.accuracy, m.macro_f1
    ));
    md.push_str(&format!(
        "| macro one-vs-rest AUROC | {} |\n| Brier score | {:.4} |\n\n",
        m.auroc_macro_ovr.map_or("n/a".into(), |a| format!("{a:.4}")),
        m.brier
    ));
    md.push_str("| class | precision | recall | F1 |\n|---|---|---|---|\n");
    for c in &m.per_class {
        md.push_str(&format!(
            "| {} | {:.4} | {:.4} | {:.4} |\n",
            c.class, c.precision, c.recall, c.f1
        ));
    }
    md.push_str("\n## Confusion matrix (rows true, columns predicted)\n\n|  |");
    for n in CLASS_NAMES {
        md.push_str(&format!(" {n} |"));
    }
    md.push_str("\n|---|");
    md.push_str(&"---|".repeat(CLASS_NAMES.len()));
    md.push('\n');
    for (name, row) in CLASS_NAMES.iter().zip(&m.confusion) {
        md.push_str(&format!("| {name} |"));
        for v in row {
            md.push_str(&format!(" {v} |"));
        }
        md.push('\n');
    }
    if !m.delong.is_empty() {
        md.push_str("\n## DeLong comparisons (one-vs-rest, uncorrected)\n\n");
        md.push_str("| model | baseline | macro AUROC model | macro AUROC baseline | min p |\n|---|---|---|---|---|\n");
        for d in &m.delong {
            md.push_str(&format!(
                "| {} | {} | {:.4} | {:.4} | {:.4} |\n",
                d.model_a, d.model_b, d.macro_auc_a, d.macro_auc_b, d.min_p_value
            ));
        }
    }
    md.push_str("\n## Attribution methods ranked by insertion AUC\n\n");
    md.push_str("| rank | method | mean insertion AUC | mean IoU | images |\n|---|---|---|---|---|\n");
    for (i, r) in s.ranking.iter().enumerate() {
        md.push_str(&format!(
            "| {} | {} | {:.4} | {} | {} |\n",
            i + 1,
            r.method,
            r.mean_insertion_auc,
            r.mean_iou.map_or("n/a".into(), |v| format!("{v:.4}")),
            r.images
        ));
    }
    let p = &m.published_reference;
    md.push_str(&format!(
        "\n## Published reference (clinical data, not measured here)\n\nfusion accuracy {} / AUROC {} / macro-F1 {}; CT-only {} / {} / {}; H&E-only {} / {} / {}\n",
        p.fusion.accuracy,
        p.fusion.auroc,
        p.fusion.macro_f1,
        p.ct_only.accuracy,
        p.ct_only.auroc,
        p.ct_only.macro_f1,
        p.he_only.accuracy,
        p.he_only.auroc,
        p.he_only.macro_f1
    ));
    md.push_str(&format!(
        "\nCheckpoint sha256 `{}`, seed {}, test split `{}` ({} patients).\n",
        m.provenance.checkpoint_sha256, m.provenance.seed, m.provenance.split_id, m.provenance.test_size
    ));
    md
}

/// Consolidate `eval/metrics.json` and `explain/summary.csv` of a run
/// directory into `report.md` and `report.json`.
pub fn cmd_report(run: &Path) -> Result<(PathBuf, PathBuf)> {
    let metrics_path = run.join("eval").join("metrics.json");
    require(&metrics_path)?;
    let summary_path = run.join("explain").join("summary.csv");
    require(&summary_path)?;
    let text = fs::read_to_string(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let m: MetricsReport = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: metrics_path.clone(),
        message: e.to_string(),
    })?;
    let s = RunSummary {
        model: m.model.clone(),
        accuracy: m.accuracy,
        macro_f1: m.macro_f1,
        auroc_macro_ovr: m.auroc_macro_ovr,
        brier: m.brier,
        delong: m
            .delong
            .iter()
            .map(|d| (d.model_b.clone(), d.macro_auc_a, d.macro_auc_b, d.min_p_value))
            .collect(),
        ranking: ranked(read_summary(&summary_path)?),
    };
    let (md_path, json_path) = (run.join("report.md"), run.join("report.json"));
    write(&md_path, markdown(&m, &s))?;
    write(&json_path, serde_json::to_string_pretty(&s)? + "\n")?;
    Ok((md_path, json_path))
}
