// SPDX-License-Identifier: MIT OR Apache-2.0

//! `explguide` command-line runner.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use explguide::config::{Pipeline, RunConfig, SCHEMA_ID};
use explguide::model::{wire, PluginRegistry};
use explguide::run::{rerun, run};
use explguide::store::emit_plots;
use explguide::{Error, Result};
use serde_json::{json, Map, Value};

#[derive(Parser)]
#[command(name = "explguide", version, about = "Relevance-guided prompt tuning, editing and layout generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a pipeline from a JSON config file.
    Run {
        config: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Re-run the config snapshot of an earlier run into a new directory.
    Rerun {
        run_dir: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Re-render the plots of a run directory.
    Plots { run_dir: PathBuf },
    /// Print the config equivalent to the given flags and exit.
    #[command(name = "print-config")]
    PrintConfig {
        #[command(subcommand)]
        pipeline: PipelineCommand,
    },
    #[command(flatten)]
    Pipeline(PipelineCommand),
    /// Serve an encoder over the plugin wire protocol on stdin/stdout.
    #[command(name = "plugin-serve", hide = true)]
    PluginServe {
        #[arg(long, default_value = "toy")]
        encoder: String,
        #[arg(long)]
        plugins: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum PipelineCommand {
    /// Learn context prompts on a few-shot dataset.
    #[command(name = "prompt-train")]
    PromptTrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Held-out dataset directory.
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        shots: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        backbone: Option<String>,
        /// `unified` or `csc`.
        #[arg(long)]
        mode: Option<String>,
        /// `end` or `middle`.
        #[arg(long)]
        label_position: Option<String>,
        #[arg(long)]
        context_tokens: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        lambda_sweep: Vec<f64>,
    },
    /// Evaluate learned prompts.
    #[command(name = "prompt-eval")]
    PromptEval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        prompts: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Edit a generated image toward a prompt.
    Edit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        prompt: String,
        #[arg(long, value_delimiter = ',')]
        sweep: Vec<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        semantic_set: Vec<String>,
        #[arg(long)]
        augmented_selection: bool,
    },
    /// Generate an image that follows a box layout.
    #[command(name = "layout-gen")]
    LayoutGen {
        #[command(flatten)]
        common: Common,
        /// `x0,y0,x1,y1:text`, repeatable.
        #[arg(long = "object")]
        objects: Vec<String>,
        #[arg(long, conflicts_with_all = ["objects", "coco"])]
        layout_file: Option<PathBuf>,
        #[arg(long, conflicts_with = "objects")]
        coco: Option<PathBuf>,
        #[arg(long, requires = "coco")]
        image_id: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        /// `explainability`, `masked` or `masked-plus-full`.
        #[arg(long)]
        objective: Option<String>,
    },
    /// Select a latent basis and fuse it.
    Fuse {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        candidates: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long, value_delimiter = ',')]
        semantic_set: Vec<String>,
    },
    /// Score heatmaps and detections of layout-gen runs.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
    },
    /// Mean word relevance per part-of-speech tag.
    #[command(name = "pos-analysis")]
    PosAnalysis {
        #[command(flatten)]
        common: Common,
        /// JSON list of `{caption, image}`.
        #[arg(long, conflicts_with = "captions")]
        corpus: Option<PathBuf>,
        /// Captions rendered by the generator.
        #[arg(long = "caption")]
        captions: Vec<String>,
        #[arg(long)]
        min_count: Option<usize>,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    encoder: Option<String>,
    #[arg(long)]
    generator: Option<String>,
    #[arg(long)]
    tagger: Option<String>,
    #[arg(long)]
    detector: Option<String>,
    /// JSON object mapping adapter ids to `{module, options}`.
    #[arg(long)]
    plugins: Option<PathBuf>,
    /// `path.to.field=value` override of the parameter block; the value is
    /// read as JSON and falls back to a string.
    #[arg(long = "param")]
    params: Vec<String>,
}

#[derive(Args)]
struct DataArgs {
    /// Directory with `classnames.txt` and one folder per class.
    #[arg(long, conflicts_with = "synthetic")]
    dataset: Option<PathBuf>,
    /// Comma-separated class names of a generated dataset.
    #[arg(long, value_delimiter = ',')]
    synthetic: Vec<String>,
    #[arg(long, default_value_t = 4)]
    per_class: usize,
}

fn set(m: &mut Map<String, Value>, key: &str, v: Option<Value>) {
    if let Some(v) = v {
        m.insert(key.to_string(), v);
    }
}

fn nonempty(v: Value) -> Option<Value> {
    v.as_array().is_some_and(|a| !a.is_empty()).then_some(v)
}

fn dataset_value(d: &DataArgs, seed_hint: u64) -> Result<Value> {
    match (&d.dataset, d.synthetic.is_empty()) {
        (Some(p), _) => Ok(json!({"folders": p})),
        (None, false) => Ok(json!({"synthetic": {"classes": d.synthetic, "per_class": d.per_class, "seed": seed_hint}})),
        (None, true) => Err(Error::Config {
            path: "params.dataset".into(),
            message: "pass --dataset <dir> or --synthetic <names>".into(),
        }),
    }
}

fn parse_object(s: &str) -> Result<Value> {
    let bad = || Error::Config {
        path: "params.layout.objects".into(),
        message: format!("`{s}` is not `x0,y0,x1,y1:text`"),
    };
    let (coords, text) = s.split_once(':').ok_or_else(bad)?;
    let b: Vec<f64> = coords.split(',').map(|c| c.trim().parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|_| bad())?;
    if b.len() != 4 {
        return Err(bad());
    }
    Ok(json!({"box": b, "text": text.trim()}))
}

fn apply_override(params: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| Error::Config {
        path: "params".into(),
        message: format!("override `{spec}` is not `path=value`"),
    })?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = params;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, k) in keys.iter().enumerate() {
        if !cur.is_object() {
            *cur = Value::Object(Map::new());
        }
        let obj = cur.as_object_mut().expect("object");
        if i + 1 == keys.len() {
            obj.insert(k.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(k.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    Ok(())
}

fn build_config(cmd: PipelineCommand) -> Result<RunConfig> {
    let mut p = Map::new();
    let (pipeline, common) = match cmd {
        PipelineCommand::PromptTrain {
            common,
            data,
            test,
            shots,
            epochs,
            lambda,
            backbone,
            mode,
            label_position,
            context_tokens,
            lambda_sweep,
        } => {
            p.insert("dataset".into(), dataset_value(&data, common.seed)?);
            set(&mut p, "test", test.map(|t| json!({"folders": t})));
            let mut tuner = Map::new();
            set(&mut tuner, "shots", shots.map(|v| json!(v)));
            set(&mut tuner, "epochs", epochs.map(|v| json!(v)));
            set(&mut tuner, "lambda", lambda.map(|v| json!(v)));
            set(&mut tuner, "backbone", backbone.map(|v| json!(v)));
            set(&mut tuner, "mode", mode.map(|v| json!(v)));
            set(&mut tuner, "label_position", label_position.map(|v| json!(v)));
            set(&mut tuner, "context_tokens", context_tokens.map(|v| json!(v)));
            p.insert("tuner".into(), Value::Object(tuner));
            set(&mut p, "lambda_sweep", nonempty(json!(lambda_sweep)));
            (Pipeline::PromptTrain, common)
        }
        PipelineCommand::PromptEval { common, prompts, data } => {
            p.insert("prompts".into(), json!(prompts));
            p.insert("dataset".into(), dataset_value(&data, common.seed)?);
            (Pipeline::PromptEval, common)
        }
        PipelineCommand::Edit {
            common,
            prompt,
            sweep,
            steps,
            semantic_set,
            augmented_selection,
        } => {
            p.insert("prompt".into(), json!(prompt));
            set(&mut p, "sweep", nonempty(json!(sweep)));
            set(&mut p, "steps", steps.map(|v| json!(v)));
            set(&mut p, "semantic_set", nonempty(json!(semantic_set)));
            if augmented_selection {
                p.insert("augmented_selection".into(), json!(true));
            }
            (Pipeline::Edit, common)
        }
        PipelineCommand::LayoutGen {
            common,
            objects,
            layout_file,
            coco,
            image_id,
            steps,
            objective,
        } => {
            let layout = match (layout_file, coco) {
                (Some(f), _) => json!({"file": f}),
                (None, Some(c)) => {
                    let mut m = json!({"annotations": c});
                    if let Some(id) = image_id {
                        m["image_id"] = json!(id);
                    }
                    json!({"coco": m})
                }
                (None, None) => json!({"objects": objects.iter().map(|o| parse_object(o)).collect::<Result<Vec<_>>>()?}),
            };
            p.insert("layout".into(), layout);
            let mut g = Map::new();
            set(&mut g, "steps", steps.map(|v| json!(v)));
            set(&mut g, "objective", objective.map(|v| json!(v)));
            p.insert("generate".into(), Value::Object(g));
            (Pipeline::LayoutGen, common)
        }
        PipelineCommand::Fuse {
            common,
            prompt,
            candidates,
            k,
            lambda,
            semantic_set,
        } => {
            p.insert("prompt".into(), json!(prompt));
            set(&mut p, "candidates", candidates.map(|v| json!(v)));
            set(&mut p, "k", k.map(|v| json!(v)));
            set(&mut p, "lambda", lambda.map(|v| json!(v)));
            set(&mut p, "semantic_set", nonempty(json!(semantic_set)));
            (Pipeline::Fuse, common)
        }
        PipelineCommand::Eval { common, runs } => {
            p.insert("runs".into(), json!(runs));
            (Pipeline::Eval, common)
        }
        PipelineCommand::PosAnalysis {
            common,
            corpus,
            captions,
            min_count,
        } => {
            let c = match corpus {
                Some(f) => json!({"file": f}),
                None => json!({"generated": captions}),
            };
            p.insert("corpus".into(), c);
            set(&mut p, "min_count", min_count.map(|v| json!(v)));
            (Pipeline::PosAnalysis, common)
        }
    };
    let mut params = Value::Object(p);
    for o in &common.params {
        apply_override(&mut params, o)?;
    }
    let mut adapters = Map::new();
    set(&mut adapters, "encoder", common.encoder.map(|v| json!(v)));
    set(&mut adapters, "generator", common.generator.map(|v| json!(v)));
    set(&mut adapters, "tagger", common.tagger.map(|v| json!(v)));
    set(&mut adapters, "detector", common.detector.map(|v| json!(v)));
    let mut raw = json!({
        "schema": SCHEMA_ID,
        "pipeline": pipeline.as_str(),
        "seed": common.seed,
        "output": common.output,
        "adapters": adapters,
        "params": params,
    });
    if let Some(path) = &common.plugins {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        raw["plugins"] = serde_json::from_str(&text)?;
    }
    let cwd = std::env::current_dir().ok();
    RunConfig::from_json(&raw.to_string(), cwd.as_deref())
}

fn plugin_serve(encoder: &str, plugins: Option<PathBuf>) -> Result<()> {
    let mut reg = PluginRegistry::with_builtins();
    if let Some(path) = plugins {
        let text = std::fs::read_to_string(&path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
        let extra: PluginRegistry = serde_json::from_str(&text)?;
        reg = reg.merged(&extra);
    }
    let enc = reg.encoder(encoder)?;
    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    wire::serve(&*enc, &mut stdin.lock(), &mut stdout.lock())
}

fn report(summary: explguide::run::RunSummary) {
    println!("{}", summary.output.display());
    for note in summary.plots.notes {
        log::info!("{note}");
    }
}

fn main_inner(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, output, seed } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(o) = output {
                cfg.output = o;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            report(run(&cfg)?);
        }
        Command::Rerun { run_dir, output } => report(rerun(&run_dir, &output)?),
        Command::Plots { run_dir } => {
            let r = emit_plots(&run_dir)?;
            for p in r.written {
                println!("{}", p.display());
            }
            for n in r.notes {
                eprintln!("note: {n}");
            }
        }
        Command::PrintConfig { pipeline } => print!("{}", build_config(pipeline)?.to_json()),
        Command::Pipeline(cmd) => report(run(&build_config(cmd)?)?),
        Command::PluginServe { encoder, plugins } => plugin_serve(&encoder, plugins)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match main_inner(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
