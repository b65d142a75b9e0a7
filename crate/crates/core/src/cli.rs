//! Command-line surface.

use std::collections::HashSet;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::checkpoint;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate_protocols, export_embeddings, predict_topk, Protocol, Side};
use crate::gnn::{GnnKind, GraphIndex};
use crate::kg::{
    generate_synthetic_kg, holdout_relation, load_entity_texts, load_triples, split_dataset, Direction, Symbols, Triple,
};
use crate::model::{ModelState, Stage};
use crate::pipeline::Dataset;
use crate::scoring::{ScoreFnSpec, ScoreKind};
use crate::text::build_feature_table;
use crate::train::{stage2_gradient_check, train_stage1, train_stage2, EpochRecord, GraphData, PairedBatch, TrainOptions};

#[derive(Parser, Debug)]
#[command(name = "kgreason", version, about = "Knowledge-graph link prediction with text features and graph reasoning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Validate a triple file (and optional texts) into a dataset directory.
    Ingest(IngestArgs),
    /// Write a synthetic legal-schema dataset directory.
    GenerateSynthetic(SyntheticArgs),
    /// Partition a dataset into train/dev/test.
    Split(SplitArgs),
    /// Stage 1: fine-tune text features with TransE.
    TrainText(TrainArgs),
    /// Stage 2: train the graph stack on top of stage-1 features.
    TrainGraph(TrainGraphArgs),
    /// Rank held-out triples and report MR, MRR and Hit@N.
    Eval(EvalArgs),
    /// Top-k candidates for one query.
    Predict(PredictArgs),
    /// Dump entity vectors as TSV.
    ExportEmbeddings(ExportArgs),
    /// Compare analytic and finite-difference gradients of the stage-2 loss.
    GradCheck(GradCheckArgs),
}

#[derive(Args, Debug, Default, Clone)]
pub struct Overrides {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub score: Option<ScoreArg>,
    #[arg(long, value_enum)]
    pub gnn: Option<GnnArg>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long, value_enum)]
    pub protocol: Option<ProtocolArg>,
    #[arg(long, value_enum)]
    pub side: Option<SideArg>,
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum ScoreArg {
    Transe,
    Distmult,
    Simple,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum GnnArg {
    Gat,
    Rgcn,
    None,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum ProtocolArg {
    Raw,
    Filtered,
    Both,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum SideArg {
    Head,
    Tail,
    Both,
}

#[derive(ValueEnum, Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Format {
    #[default]
    Json,
    Tsv,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalSet {
    Test,
    Dev,
    Target,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Which {
    Text,
    Final,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum DirectionArg {
    /// The query entity is the head; tails are predicted.
    Out,
    /// The query entity is the tail; heads are predicted.
    In,
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    #[arg(long)]
    pub triples: PathBuf,
    #[arg(long)]
    pub texts: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SyntheticArgs {
    #[arg(long, default_value_t = 200)]
    pub affairs: usize,
    #[arg(long, default_value_t = 20)]
    pub laws: usize,
    #[arg(long, default_value_t = 10)]
    pub provisions: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SplitArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Train,dev,test fractions for a uniform split.
    #[arg(long, default_value = "0.8,0.1,0.1", conflicts_with = "holdout")]
    pub ratios: String,
    /// Hold out a fraction of this relation's triples instead.
    #[arg(long)]
    pub holdout: Option<String>,
    #[arg(long, default_value_t = 0.1)]
    pub fraction: f64,
    #[arg(long, default_value = "base_entry_is")]
    pub target: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint of the same stage.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop once this many epochs are complete.
    #[arg(long)]
    pub until_epoch: Option<u64>,
    /// Append JSON-lines epoch records here.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Args, Debug)]
pub struct TrainGraphArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    /// Stage-1 checkpoint (not needed with random features or --resume).
    #[arg(long)]
    pub stage1: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "target")]
    pub on: EvalSet,
    #[arg(long, value_enum, default_value = "json")]
    pub format: Format,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub entity: String,
    #[arg(long)]
    pub relation: String,
    #[arg(long, value_enum, default_value = "out")]
    pub direction: DirectionArg,
    /// Drop candidates that form a training triple.
    #[arg(long)]
    pub exclude_known: bool,
    #[arg(long, value_enum, default_value = "json")]
    pub format: Format,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "final")]
    pub which: Which,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GradCheckArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Stage-2 checkpoint to probe; a fresh stage-2 model is built when absent.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-4)]
    pub h: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long, default_value_t = 500)]
    pub max_coords: usize,
    /// Training triples in the probe batch.
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[command(flatten)]
    pub overrides: Overrides,
}

impl Overrides {
    fn load(&self) -> Result<ModelConfig> {
        let base = match &self.config {
            Some(p) => ModelConfig::from_json_file(p)?,
            None => ModelConfig::default(),
        };
        self.apply(base)
    }

    /// Applies every flag that was given, then validates.
    pub fn apply(&self, mut c: ModelConfig) -> Result<ModelConfig> {
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(s) = self.score {
            c.score = ScoreFnSpec {
                variant: match s {
                    ScoreArg::Transe => ScoreKind::Transe,
                    ScoreArg::Distmult => ScoreKind::Distmult,
                    ScoreArg::Simple => ScoreKind::Simple,
                },
                ..c.score
            };
        }
        if let Some(g) = self.gnn {
            c.gnn.variant = match g {
                GnnArg::Gat => GnnKind::Gat,
                GnnArg::Rgcn => GnnKind::Rgcn,
                GnnArg::None => GnnKind::None,
            };
        }
        if let Some(d) = self.depth {
            c.gnn.depth = d;
        }
        self.apply_eval(&mut c);
        c.validate()?;
        Ok(c)
    }

    fn apply_eval(&self, c: &mut ModelConfig) {
        if let Some(p) = self.protocol {
            c.eval.protocol = match p {
                ProtocolArg::Raw => Protocol::Raw,
                ProtocolArg::Filtered => Protocol::Filtered,
                ProtocolArg::Both => Protocol::Both,
            };
        }
        if let Some(s) = self.side {
            c.eval.side = match s {
                SideArg::Head => Side::Head,
                SideArg::Tail => Side::Tail,
                SideArg::Both => Side::Both,
            };
        }
        if let Some(k) = self.k {
            c.eval.k = k;
        }
    }

    fn has_model_flags(&self) -> bool {
        self.config.is_some() || self.seed.is_some() || self.score.is_some() || self.gnn.is_some() || self.depth.is_some()
    }
}

fn log_sink(path: &Option<PathBuf>) -> Result<Option<(PathBuf, std::fs::File)>> {
    path.as_ref()
        .map(|p| {
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map(|f| (p.clone(), f))
                .map_err(|e| Error::io(p, e))
        })
        .transpose()
}

fn write_record(sink: &mut Option<(PathBuf, std::fs::File)>, rec: &EpochRecord) -> Result<()> {
    log::info!("stage {} epoch {} loss {:.6}", rec.stage, rec.epoch, rec.loss);
    if let Some((path, f)) = sink {
        writeln!(f, "{}", serde_json::to_string(rec)?).map_err(|e| Error::io(path.as_path(), e))?;
    }
    Ok(())
}

fn resume_state(path: &Path, stage: Stage, overrides: &Overrides) -> Result<ModelState> {
    if overrides.has_model_flags() {
        return Err(Error::Config(
            "--resume continues with the checkpoint's own config; drop the model flags".into(),
        ));
    }
    let state = checkpoint::load(path)?;
    if state.stage != stage {
        return Err(Error::Config(format!(
            "{} holds a stage-{} checkpoint, expected stage {}",
            path.display(),
            state.stage as u8,
            stage as u8
        )));
    }
    Ok(state)
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("json"));
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::GenerateSynthetic(a) => synthetic(a),
        Command::Split(a) => split(a),
        Command::TrainText(a) => train_text(a),
        Command::TrainGraph(a) => train_graph(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::ExportEmbeddings(a) => export(a),
        Command::GradCheck(a) => grad_check(a),
    }
}

fn ingest(a: IngestArgs) -> Result<()> {
    let mut symbols = Symbols::new();
    let load = load_triples(&a.triples, &mut symbols)?;
    let (texts, rejected) = match &a.texts {
        Some(p) => {
            let t = load_entity_texts(p, &symbols)?;
            (t.texts, t.rejected.len())
        }
        None => Default::default(),
    };
    let ds = Dataset::new(symbols, load.triples, texts)?;
    ds.save(&a.out)?;
    print_json(&json!({
        "entities": ds.kg.num_entities(),
        "relations": ds.kg.num_relations(),
        "triples": ds.kg.triples().len(),
        "duplicates_dropped": load.duplicates,
        "texts": ds.texts.len(),
        "texts_rejected": rejected,
    }));
    Ok(())
}

fn synthetic(a: SyntheticArgs) -> Result<()> {
    let s = generate_synthetic_kg(a.affairs, a.laws, a.provisions, a.seed)?;
    let ds = Dataset::from_synthetic(s);
    ds.save(&a.out)?;
    print_json(&json!({
        "entities": ds.kg.num_entities(),
        "relations": ds.kg.num_relations(),
        "triples": ds.kg.triples().len(),
    }));
    Ok(())
}

fn parse_ratios(s: &str) -> Result<(f64, f64, f64)> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Config(format!("--ratios {s:?}: {e}")))?;
    match parts[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(Error::Config(format!("--ratios needs three values, got {s:?}"))),
    }
}

fn split(a: SplitArgs) -> Result<()> {
    let ds = Dataset::load(&a.data)?;
    let (split, strategy) = match &a.holdout {
        Some(rel) => {
            let r = ds.symbols.relation(rel)?;
            (holdout_relation(&ds.kg, r, a.fraction, a.seed)?, "holdout")
        }
        None => {
            let target = ds.symbols.relation(&a.target)?;
            (split_dataset(&ds.kg, parse_ratios(&a.ratios)?, target, a.seed)?, "ratio")
        }
    };
    Dataset::save_split(&a.data, &split.to_manifest(a.seed, strategy, &ds.symbols))?;
    print_json(&json!({
        "train": split.train.len(),
        "dev": split.dev.len(),
        "test": split.test.len(),
        "target_test": split.target_test.len(),
    }));
    Ok(())
}

fn train_text(a: TrainArgs) -> Result<()> {
    let ds = Dataset::load(&a.data)?;
    let split = ds.split()?;
    let mut state = match &a.resume {
        Some(p) => resume_state(p, Stage::Text, &a.overrides)?,
        None => {
            let config = a.overrides.load()?;
            ModelState::init_stage1(&config, &ds.raw_texts(&config)?, ds.kg.num_relations())?
        }
    };
    let raw = ds.raw_texts(&state.config)?;
    let mut sink = log_sink(&a.log)?;
    let mut on_epoch = |r: &EpochRecord| write_record(&mut sink, r);
    train_stage1(
        &mut state,
        &split.train,
        &raw,
        TrainOptions {
            until_epoch: a.until_epoch,
            on_epoch: Some(&mut on_epoch),
        },
    )?;
    checkpoint::save(&state, &a.out)?;
    print_json(&json!({"stage": 1, "epoch": state.epoch, "checkpoint": a.out}));
    Ok(())
}

fn train_graph(a: TrainGraphArgs) -> Result<()> {
    let t = a.train;
    let ds = Dataset::load(&t.data)?;
    let split = ds.split()?;
    let mut state = match &t.resume {
        Some(p) => resume_state(p, Stage::Graph, &t.overrides)?,
        None => {
            let s1 = a.stage1.as_deref().map(checkpoint::load).transpose()?;
            if let Some(s) = &s1 {
                if s.stage != Stage::Text {
                    return Err(Error::Config("--stage1 must point at a stage-1 checkpoint".into()));
                }
            }
            // without --config, stage 2 continues with the stage-1 settings
            let config = match (&t.overrides.config, &s1) {
                (None, Some(s)) => t.overrides.apply(s.config.clone())?,
                _ => t.overrides.load()?,
            };
            ModelState::init_stage2(&config, s1.as_ref(), ds.kg.num_entities(), ds.kg.num_relations())?
        }
    };
    let raw = ds.raw_texts(&state.config)?;
    let graph = GraphIndex::new(&ds.train_graph()?);
    let known = ds.known_all();
    let data = GraphData {
        graph: &graph,
        train: &split.train,
        raw: Some(&raw),
        dev: Some((&split.dev, &known)),
    };
    let mut sink = log_sink(&t.log)?;
    let mut on_epoch = |r: &EpochRecord| write_record(&mut sink, r);
    train_stage2(
        &mut state,
        &data,
        TrainOptions {
            until_epoch: t.until_epoch,
            on_epoch: Some(&mut on_epoch),
        },
    )?;
    checkpoint::save(&state, &t.out)?;
    print_json(&json!({"stage": 2, "epoch": state.epoch, "checkpoint": t.out}));
    Ok(())
}

fn eval_config(state: &ModelState, overrides: &Overrides) -> ModelConfig {
    let mut c = state.config.clone();
    overrides.apply_eval(&mut c);
    c
}

fn eval(a: EvalArgs) -> Result<()> {
    let ds = Dataset::load(&a.data)?;
    let split = ds.split()?;
    let state = checkpoint::load(&a.checkpoint)?;
    let config = eval_config(&state, &a.overrides);
    let graph = GraphIndex::new(&ds.train_graph()?);
    let model = state.scoring_model(&graph)?;
    let queries: &[Triple] = match a.on {
        EvalSet::Test => &split.test,
        EvalSet::Dev => &split.dev,
        EvalSet::Target => &split.target_test,
    };
    let mut reports = evaluate_protocols(&model, queries, &ds.known_all(), config.eval.protocol, config.eval.side)?;
    for r in &mut reports {
        r.name_relations(&ds.symbols);
    }
    match a.format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&reports)?),
        Format::Tsv => {
            println!("{}", crate::eval::RankingReport::tsv_header());
            for r in &reports {
                println!("{}", r.tsv_row());
            }
        }
    }
    Ok(())
}

fn predict(a: PredictArgs) -> Result<()> {
    let ds = Dataset::load(&a.data)?;
    let state = checkpoint::load(&a.checkpoint)?;
    let config = eval_config(&state, &a.overrides);
    let graph = GraphIndex::new(&ds.train_graph()?);
    let model = state.scoring_model(&graph)?;
    let entity = ds.symbols.entity(&a.entity)?;
    let relation = ds.symbols.relation(&a.relation)?;
    let direction = match a.direction {
        DirectionArg::Out => Direction::Out,
        DirectionArg::In => Direction::In,
    };
    let train: HashSet<Triple> = ds.split()?.train.iter().copied().collect();
    let list = predict_topk(&model, entity, relation, direction, config.eval.k, a.exclude_known.then_some(&train))?;
    match a.format {
        Format::Json => {
            let candidates: Vec<_> = list
                .candidates
                .iter()
                .map(|c| json!({"entity": ds.symbols.entity_name(c.entity), "score": c.score}))
                .collect();
            print_json(&json!({
                "entity": a.entity,
                "relation": a.relation,
                "direction": if direction == Direction::Out { "out" } else { "in" },
                "k": list.k,
                "candidates": candidates,
            }));
        }
        Format::Tsv => {
            for (i, c) in list.candidates.iter().enumerate() {
                println!("{}\t{}\t{}", i + 1, ds.symbols.entity_name(c.entity), c.score);
            }
        }
    }
    Ok(())
}

fn export(a: ExportArgs) -> Result<()> {
    let ds = Dataset::load(&a.data)?;
    let state = checkpoint::load(&a.checkpoint)?;
    let table = match a.which {
        Which::Text => match ds.texts.is_empty() {
            true => state.features.clone(),
            false => build_feature_table(&ds.raw_texts(&state.config)?, &state.text)?,
        },
        Which::Final => state.final_embeddings(&GraphIndex::new(&ds.train_graph()?))?,
    };
    export_embeddings(&table, &ds.symbols, &a.out)?;
    print_json(&json!({"rows": table.rows(), "dim": table.cols(), "path": a.out}));
    Ok(())
}

fn grad_check(a: GradCheckArgs) -> Result<()> {
    let ds = Dataset::load(&a.data)?;
    let split = ds.split()?;
    let state = match &a.checkpoint {
        Some(p) => checkpoint::load(p)?,
        None => {
            let config = a.overrides.load()?;
            let s1 = match config.stage2.features {
                crate::config::FeatureSource::Text => Some(ModelState::init_stage1(
                    &config,
                    &ds.raw_texts(&config)?,
                    ds.kg.num_relations(),
                )?),
                crate::config::FeatureSource::Random => None,
            };
            ModelState::init_stage2(&config, s1.as_ref(), ds.kg.num_entities(), ds.kg.num_relations())?
        }
    };
    if state.stage != Stage::Graph {
        return Err(Error::Config("grad-check probes the stage-2 loss; pass a stage-2 checkpoint".into()));
    }
    let raw = ds.raw_texts(&state.config)?;
    let graph = GraphIndex::new(&ds.train_graph()?);
    let positives: Vec<Triple> = split.train.iter().take(a.batch).copied().collect();
    let known: HashSet<Triple> = split.train.iter().copied().collect();
    let mut rng = crate::model::RngState::restore(&state.rng);
    let batch = PairedBatch::sample(
        &positives,
        &known,
        state.num_entities(),
        1,
        state.config.corruption,
        &mut rng,
    )?;
    let report = stage2_gradient_check(&state, &graph, Some(&raw), &batch, a.h, a.tol, a.max_coords)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    if !report.passed() {
        return Err(Error::Numeric(format!(
            "{} of {} coordinates exceed relative error {}",
            report.failing.len(),
            report.checked,
            a.tol
        )));
    }
    Ok(())
}
