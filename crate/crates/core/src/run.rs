// SPDX-License-Identifier: MIT OR Apache-2.0

//! Pipeline dispatch: one [`RunConfig`] in, one artifact directory out.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::basis::{augclip, choose_semantic_set, fuse_optimize, select_basis};
use crate::config::{
    CorpusSource, DatasetSource, EvalParams, FuseParams, LayoutGenParams, LayoutSource, Params, Pipeline,
    PosAnalysisParams, PromptEvalParams, PromptTrainParams, RunConfig,
};
use crate::edit::{auto_lambda, EditRequest};
use crate::error::{Error, Result};
use crate::eval::{detection_eval, heatmap_pr, pos_distribution, GroundTruth, HeatmapEval};
use crate::layout::{generate, read_coco_layouts, LayoutEntry, LayoutObject};
use crate::model::{DiffEncoder, Encoder, Generator, Image};
use crate::prompt::train::{evaluate, mean_class_score, train, Dataset};
use crate::prompt::{PromptSet, TunerConfig};
use crate::relevance::compute_relevance;
use crate::relevance::export::read_sidecar;
use crate::store::{emit_plots, read_metrics, ArtifactDir, PlotReport, CONFIG_FILE, METRICS_FILE, METRICS_SCHEMA_ID};

pub const PROMPTS_FILE: &str = "prompts.json";

/// Learned prompts as written by prompt-train.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptsFile {
    pub classes: Vec<String>,
    pub lambda: f64,
    pub logit_scale: f64,
    pub prompts: PromptSet,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub output: PathBuf,
    pub metrics: Value,
    pub plots: PlotReport,
}

/// Validates adapters, runs the pipeline and writes the artifact directory.
pub fn run(cfg: &RunConfig) -> Result<RunSummary> {
    cfg.check_adapters()?;
    let mut dir = ArtifactDir::create(&cfg.output)?;
    dir.write_text(CONFIG_FILE, &cfg.to_json())?;
    dir.log(format!("pipeline {} seed {}", cfg.pipeline(), cfg.seed));
    let body = match dispatch(cfg, &mut dir) {
        Ok(b) => b,
        Err(e) => {
            dir.log(format!("failed: {e}"));
            dir.finish()?;
            return Err(e);
        }
    };
    let mut metrics = json!({
        "schema": METRICS_SCHEMA_ID,
        "pipeline": cfg.pipeline().as_str(),
        "seed": cfg.seed,
    });
    if let (Value::Object(m), Value::Object(b)) = (&mut metrics, body) {
        m.extend(b);
    }
    dir.write_json(METRICS_FILE, &metrics)?;
    let plots = emit_plots(dir.root())?;
    for note in &plots.notes {
        dir.log(format!("plot: {note}"));
    }
    let output = dir.finish()?;
    Ok(RunSummary { output, metrics, plots })
}

/// Reruns a snapshot into a fresh directory.
pub fn rerun(snapshot_dir: &Path, output: &Path) -> Result<RunSummary> {
    let mut cfg = RunConfig::load(&snapshot_dir.join(CONFIG_FILE))?;
    cfg.output = output.to_path_buf();
    run(&cfg)
}

fn dispatch(cfg: &RunConfig, dir: &mut ArtifactDir) -> Result<Value> {
    let reg = cfg.registry();
    let a = &cfg.adapters;
    let params = cfg.seeded_params();
    match &params {
        Params::PromptTrain(p) => prompt_train(&*reg.diff_encoder(&a.encoder)?, p, dir),
        Params::PromptEval(p) => prompt_eval(&*reg.diff_encoder(&a.encoder)?, p, dir),
        Params::Edit(p) => edit(&*reg.diff_encoder(&a.encoder)?, &*reg.generator(&a.generator)?, p, dir),
        Params::LayoutGen(p) => layout_gen(&*reg.diff_encoder(&a.encoder)?, &*reg.generator(&a.generator)?, p, dir),
        Params::Fuse(p) => {
            let tagger = match p.semantic_set {
                None => Some(reg.tagger(&a.tagger)?),
                Some(_) => None,
            };
            fuse(
                &*reg.diff_encoder(&a.encoder)?,
                &*reg.generator(&a.generator)?,
                tagger.as_deref(),
                cfg.seed,
                p,
                dir,
            )
        }
        Params::Eval(p) => {
            let encoder = reg.encoder(&a.encoder)?;
            eval(cfg, encoder, p, dir)
        }
        Params::PosAnalysis(p) => {
            let generator = match p.corpus {
                CorpusSource::Generated(_) => Some(reg.generator(&a.generator)?),
                CorpusSource::File(_) => None,
            };
            pos_analysis(&*reg.encoder(&a.encoder)?, generator.as_deref(), &*reg.tagger(&a.tagger)?, cfg.seed, p, dir)
        }
    }
}

fn load_dataset(src: &DatasetSource, encoder: &dyn Encoder) -> Result<Dataset> {
    let shape = encoder.info().image_shape;
    match src {
        DatasetSource::Folders(root) => Dataset::from_folders(root, shape),
        DatasetSource::Synthetic(spec) => Dataset::synthetic(spec, shape),
    }
}

fn prompt_train(encoder: &dyn DiffEncoder, p: &PromptTrainParams, dir: &mut ArtifactDir) -> Result<Value> {
    let trainset = load_dataset(&p.dataset, encoder)?;
    let testset = match &p.test {
        Some(t) => load_dataset(t, encoder)?,
        None => trainset.clone(),
    };
    let lambda = p.tuner.resolved_lambda();
    dir.log(format!(
        "training {} classes, {} shots, lambda {lambda}",
        trainset.classes.len(),
        p.tuner.shots
    ));
    let fit = |tuner: &TunerConfig| -> Result<(crate::prompt::train::TrainResult, f64, f64)> {
        let r = train(encoder, &trainset, tuner)?;
        let acc = evaluate(encoder, &r.prompts, &r.classes, &testset)?;
        let score = mean_class_score(encoder, &r.prompts, &r.classes, &testset)?;
        Ok((r, acc, score))
    };
    let (result, accuracy, class_score) = fit(&p.tuner)?;
    dir.log(format!("accuracy {accuracy:.4}, mean class score {class_score:.4}"));
    let mut curve = vec![json!({"lambda": lambda, "accuracy": accuracy, "class_score": class_score})];
    for &l in &p.lambda_sweep {
        let tuner = TunerConfig {
            lambda: Some(l),
            ..p.tuner.clone()
        };
        let (_, acc, score) = fit(&tuner)?;
        dir.log(format!("sweep lambda {l}: accuracy {acc:.4}"));
        curve.push(json!({"lambda": l, "accuracy": acc, "class_score": score}));
    }
    curve.sort_by(|a, b| a["lambda"].as_f64().unwrap_or(0.0).total_cmp(&b["lambda"].as_f64().unwrap_or(0.0)));
    dir.write_json(
        PROMPTS_FILE,
        &PromptsFile {
            classes: result.classes.clone(),
            lambda,
            logit_scale: p.tuner.logit_scale,
            prompts: result.prompts.clone(),
        },
    )?;
    dir.write_json("train_log.json", &result.log)?;
    Ok(json!({
        "lambda": lambda,
        "accuracy": accuracy,
        "class_score": class_score,
        "final_loss": result.log.last().map(|l| l.loss),
        "steps": result.log.len(),
        "lambda_curve": curve,
    }))
}

fn prompt_eval(encoder: &dyn DiffEncoder, p: &PromptEvalParams, dir: &mut ArtifactDir) -> Result<Value> {
    let text = std::fs::read_to_string(&p.prompts).map_err(|e| Error::io(&p.prompts, e))?;
    let file: PromptsFile = serde_json::from_str(&text)?;
    let dataset = load_dataset(&p.dataset, encoder)?;
    if dataset.classes != file.classes {
        return Err(Error::invalid("dataset classes differ from the classes the prompts were trained on"));
    }
    let accuracy = evaluate(encoder, &file.prompts, &file.classes, &dataset)?;
    let class_score = mean_class_score(encoder, &file.prompts, &file.classes, &dataset)?;
    dir.log(format!("accuracy {accuracy:.4} on {} images", dataset.len()));
    Ok(json!({
        "lambda": file.lambda,
        "accuracy": accuracy,
        "class_score": class_score,
        "images": dataset.len(),
    }))
}

fn heatmap_of(encoder: &dyn Encoder, prompt: &str, image: &Image) -> Result<ndarray::Array2<f64>> {
    let tokens = encoder.tokenize(prompt)?;
    let (_, trace) = encoder.encode_and_trace(&tokens, image)?;
    Ok(compute_relevance(&trace)?.patch_heatmap)
}

fn edit(encoder: &dyn DiffEncoder, generator: &dyn Generator, p: &EditRequest, dir: &mut ArtifactDir) -> Result<Value> {
    let result = auto_lambda(encoder, generator, p)?;
    let source = generator.generate(&p.source_latent.clone().unwrap_or_else(|| generator.sample_latent(p.seed)))?;
    dir.save_image("source", &source)?;
    dir.save_heatmap("source", &heatmap_of(encoder, &p.prompt, &source)?, &p.prompt)?;
    for r in &result.runs {
        let name = format!("lambda_{}", r.lambda);
        dir.save_image(&name, &r.image)?;
        dir.save_heatmap(&name, &heatmap_of(encoder, &p.prompt, &r.image)?, &p.prompt)?;
    }
    dir.save_image("edited", &result.run.image)?;
    dir.log(format!(
        "chosen lambda {} similarity {:.4}, semantic set {:?}",
        result.chosen_lambda, result.run.similarity, result.words
    ));
    Ok(json!({
        "chosen_lambda": result.chosen_lambda,
        "similarity": result.run.similarity,
        "initial_similarity": result.run.initial_similarity,
        "semantic_set": result.words,
        "relevance_before": result.relevance_before,
        "relevance_after": result.relevance_after,
        "latent": result.run.latent,
        "sweep": result.sweep,
    }))
}

fn layout_objects(src: &LayoutSource) -> Result<Vec<LayoutObject>> {
    let entries: Vec<LayoutEntry> = match src {
        LayoutSource::Objects(v) => v.clone(),
        LayoutSource::File(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&text)?
        }
        LayoutSource::Coco(c) => {
            let layouts = read_coco_layouts(&c.annotations, &c.template)?;
            let layout = match c.image_id {
                Some(id) => layouts.into_iter().find(|l| l.image_id == id),
                None => layouts.into_iter().next(),
            }
            .ok_or_else(|| Error::NotFound(format!("no layout in {}", c.annotations.display())))?;
            return Ok(layout.objects.iter().map(|(t, b)| LayoutObject::new(*b, t)).collect());
        }
    };
    entries.iter().map(LayoutObject::from_entry).collect()
}

fn layout_gen(encoder: &dyn DiffEncoder, generator: &dyn Generator, p: &LayoutGenParams, dir: &mut ArtifactDir) -> Result<Value> {
    let objects = layout_objects(&p.layout)?;
    dir.log(format!("{} objects, {} steps", objects.len(), p.generate.steps));
    let r = generate(&objects, generator, encoder, &p.generate)?;
    dir.save_image("final", &r.image)?;
    for (i, (o, hm)) in objects.iter().zip(&r.heatmaps).enumerate() {
        dir.save_heatmap(&format!("object_{i}"), hm, &o.text)?;
    }
    let mean_dice = r.dice.iter().sum::<f64>() / r.dice.len() as f64;
    dir.log(format!("mean dice {mean_dice:.4}"));
    let objs: Vec<Value> = objects
        .iter()
        .map(|o| json!({"text": o.text, "box": o.bbox, "lambda": o.lambda}))
        .collect();
    Ok(json!({
        "objects": objs,
        "dice": r.dice,
        "mean_dice": mean_dice,
        "similarity": r.similarity,
        "losses": r.losses,
        "latent": r.latent,
    }))
}

fn fuse(
    encoder: &dyn DiffEncoder,
    generator: &dyn Generator,
    tagger: Option<&dyn crate::eval::PosTagger>,
    seed: u64,
    p: &FuseParams,
    dir: &mut ArtifactDir,
) -> Result<Value> {
    let candidates: Vec<Vec<f64>> = (0..p.candidates as u64).map(|i| generator.sample_latent(seed.wrapping_add(i))).collect();
    let words = match (&p.semantic_set, tagger) {
        (Some(w), _) => w.clone(),
        (None, Some(tagger)) => {
            let first = select_basis(&candidates, &p.prompt, &[], 1, 0.0, &p.augmentation, encoder, generator)?;
            let image = generator.generate(&first.latents[0])?;
            dir.save_image("first_pass", &image)?;
            choose_semantic_set(&p.prompt, &image, encoder, tagger)
        }
        (None, None) => unreachable!("tagger resolved when no semantic set is given"),
    };
    dir.log(format!("semantic set {words:?}"));
    let basis = select_basis(&candidates, &p.prompt, &words, p.k, p.lambda, &p.augmentation, encoder, generator)?;
    for (j, z) in basis.latents.iter().enumerate() {
        dir.save_image(&format!("basis_{j}"), &generator.generate(z)?)?;
    }
    let fused = fuse_optimize(&basis.latents, &p.prompt, &p.augmentation, encoder, generator, &p.fuse)?;
    dir.save_image("fused", &fused.image)?;
    dir.save_heatmap("fused", &heatmap_of(encoder, &p.prompt, &fused.image)?, &p.prompt)?;
    let tokens = encoder.tokenize(&p.prompt)?;
    let fused_score = augclip(encoder, &tokens, &fused.image, &p.augmentation)?;
    dir.log(format!("fused augclip {fused_score:.4}"));
    Ok(json!({
        "semantic_set": words,
        "scoreboard": basis.scoreboard,
        "selected": basis.selected,
        "weights": fused.weights,
        "history": fused.history,
        "fused_augclip": fused_score,
        "latent": fused.latent,
    }))
}

#[derive(Deserialize)]
struct LayoutObjectRecord {
    text: String,
    #[serde(rename = "box")]
    bbox: crate::layout::BoundingBox,
}

fn eval(cfg: &RunConfig, encoder: Arc<dyn Encoder>, p: &EvalParams, dir: &mut ArtifactDir) -> Result<Value> {
    if p.runs.is_empty() {
        return Err(Error::config("params.runs", "at least one layout-gen run is required"));
    }
    let shape = encoder.info().image_shape;
    let mut per_run = Vec::new();
    let mut samples = Vec::new();
    let mut detection_inputs = Vec::new();
    for run_dir in &p.runs {
        let m = read_metrics(run_dir)?;
        if m.get("pipeline").and_then(Value::as_str) != Some(Pipeline::LayoutGen.as_str()) {
            return Err(Error::invalid(format!("{} is not a layout-gen run", run_dir.display())));
        }
        let objects: Vec<LayoutObjectRecord> = serde_json::from_value(m["objects"].clone())?;
        let mut scores = Vec::new();
        for (i, o) in objects.iter().enumerate() {
            let hm = read_sidecar(&run_dir.join("heatmaps").join(format!("object_{i}.json")))?.to_array()?;
            let s = heatmap_pr(&hm, &[o.bbox])?;
            scores.push(s);
            samples.push(s);
        }
        let gt: Vec<GroundTruth> = objects
            .iter()
            .map(|o| GroundTruth {
                label: o.text.clone(),
                bbox: o.bbox,
            })
            .collect();
        detection_inputs.push((run_dir.join("images").join("final.png"), gt));
        per_run.push(json!({"run": run_dir, "heatmap_pr": scores}));
    }
    let summary = HeatmapEval::new(samples);
    dir.log(format!(
        "heatmap precision {:.4} recall {:.4} f1 {:.4}",
        summary.mean.precision, summary.mean.recall, summary.mean.f1
    ));
    let mut out = json!({"runs": per_run, "heatmap_pr": summary.mean});
    if let Some(id) = &cfg.adapters.detector {
        let mut labels: Vec<String> = detection_inputs.iter().flat_map(|(_, g)| g.iter().map(|x| x.label.clone())).collect();
        labels.sort();
        labels.dedup();
        let detector = cfg.registry().detector(id, encoder.clone(), &labels)?;
        let mut pairs = Vec::new();
        for (path, gt) in detection_inputs {
            let image = Image::load(&path, shape)?;
            pairs.push((gt, detector.detect(&image)?));
        }
        let report = detection_eval(&pairs);
        dir.log(format!("detection AP {:.4} AP50 {:.4} AR {:.4}", report.ap, report.ap50, report.ar));
        out["detection"] = serde_json::to_value(report)?;
    }
    Ok(out)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusRecord {
    caption: String,
    image: PathBuf,
}

fn pos_analysis(
    encoder: &dyn Encoder,
    generator: Option<&dyn Generator>,
    tagger: &dyn crate::eval::PosTagger,
    seed: u64,
    p: &PosAnalysisParams,
    dir: &mut ArtifactDir,
) -> Result<Value> {
    let corpus: Vec<(String, Image)> = match (&p.corpus, generator) {
        (CorpusSource::File(path), _) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let records: Vec<CorpusRecord> = serde_json::from_str(&text)?;
            let base = path.parent().unwrap_or(Path::new("."));
            records
                .into_iter()
                .map(|r| Ok((r.caption, Image::load(&base.join(&r.image), encoder.info().image_shape)?)))
                .collect::<Result<_>>()?
        }
        (CorpusSource::Generated(captions), Some(g)) => captions
            .iter()
            .enumerate()
            .map(|(i, c)| Ok((c.clone(), g.generate(&g.sample_latent(seed.wrapping_add(i as u64)))?)))
            .collect::<Result<_>>()?,
        (CorpusSource::Generated(_), None) => unreachable!("generator resolved for generated corpora"),
    };
    let dist = pos_distribution(&corpus, encoder, tagger, p.min_count);
    dir.log(format!("{} captions, {} skipped, {} tags kept", corpus.len(), dist.skipped, dist.means.len()));
    Ok(json!({"captions": corpus.len(), "min_count": p.min_count, "pos": dist}))
}
