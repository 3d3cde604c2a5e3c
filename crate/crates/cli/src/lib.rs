//! The `mks2` command line: corpus generation, both training stages,
//! evaluation, decoding, parameter accounting and the ablation grid.

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use mks2::data::{gen_mm_eval, gen_probe, gen_stage1_pairs, gen_stage2_mixed, gen_train_probe, records, Record, Split, World};
use mks2::eval::{evaluate, EvalReport};
use mks2::model::{generate, prompt_layout, DecodeRequest, Model, ModelConfig, ParamTable};
use mks2::training::{
    load_checkpoint, run_stage1, run_stage2, run_vmn_finetune, save_checkpoint, write_metrics, AblationConfig,
    ExampleBuilder, HashCheck, TrainState,
};
use mks2::{Error, Result};
use serde::{Deserialize, Serialize};

pub use config::CliConfig;

#[derive(Debug, Parser)]
#[command(name = "mks2", version, about = "Visual-memory language model on a synthetic world")]
pub struct Cli {
    /// TOML file with [data], [model], [stage1], [stage2], [vmn] and [ablation] sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the world, initialization and data-order seeds.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the world's corpora as JSONL files.
    GenData,
    /// Train the visual memory, mapping and retrieval head.
    TrainStage1(Stage1Args),
    /// Instruction-tune the adapters and router of a stage-1 checkpoint.
    TrainStage2(Stage2Args),
    /// Score a checkpoint and write report.json.
    Eval(EvalArgs),
    /// Decode a continuation of one prompt.
    Generate(GenerateArgs),
    /// Print the parameter budget of a configuration.
    Params(ParamsArgs),
    /// Run every ablation from one stage-1 checkpoint and compare.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct DataArg {
    /// Directory written by gen-data; corpora are regenerated when omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Stage1Args {
    #[command(flatten)]
    pub data: DataArg,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    pub stop_at: Option<u64>,
}

#[derive(Debug, Args)]
pub struct Stage2Args {
    #[command(flatten)]
    pub data: DataArg,
    /// Stage-1 checkpoint, or a stage-2 one to resume.
    #[arg(long)]
    pub init: PathBuf,
    /// Row of the ablation grid; defaults to the [ablation] section.
    #[arg(long)]
    pub ablation: Option<String>,
    /// Afterwards fine-tune the visual mapping for one pass over image instructions.
    #[arg(long)]
    pub vmn_finetune: bool,
    #[arg(long)]
    pub stop_at: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub ablation: Option<String>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub prompt: String,
    /// Show this entity's image before the prompt.
    #[arg(long)]
    pub entity: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub beam: usize,
    #[arg(long, default_value_t = 8)]
    pub max_new: usize,
    #[arg(long)]
    pub ablation: Option<String>,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    /// toy, llama2-7b or llama2-13b; defaults to the [model] section.
    #[arg(long)]
    pub preset: Option<String>,
    /// Override the adapter rank.
    #[arg(long)]
    pub lora_rank: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub data: DataArg,
    /// Stage-1 checkpoint shared by every row; trained first when omitted.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Comma-separated subset of row names.
    #[arg(long, value_delimiter = ',')]
    pub rows: Option<Vec<String>>,
}

/// Parses `argv` and runs it. Returns the process exit code.
pub fn main_with(argv: impl IntoIterator<Item = String>) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn effective_config(cli: &Cli) -> Result<CliConfig> {
    let cfg = match &cli.config {
        Some(p) => CliConfig::load(p)?,
        None => CliConfig::default(),
    };
    Ok(match cli.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = effective_config(cli)?;
    if !matches!(cli.command, Command::Params(_) | Command::Generate(_)) {
        fs::create_dir_all(&cli.out).map_err(|e| Error::io(&cli.out, e))?;
    }
    let out = cli.out.as_path();
    match &cli.command {
        Command::GenData => gen_data(&cfg, out),
        Command::TrainStage1(a) => train_stage1(&cfg, out, a),
        Command::TrainStage2(a) => train_stage2(&cfg, out, a),
        Command::Eval(a) => eval(&cfg, out, a),
        Command::Generate(a) => decode(&cfg, a),
        Command::Params(a) => params(&cfg, a),
        Command::Ablate(a) => ablate(&cfg, out, a),
    }
}

pub fn build_world(cfg: &CliConfig) -> Result<World> {
    World::build(cfg.data.world_seed, cfg.data.n_entities)
}

/// The corpus files written by `gen-data`, by file stem.
pub fn corpora(cfg: &CliConfig, world: &World) -> Vec<(&'static str, Vec<Record>)> {
    let d = &cfg.data;
    vec![
        ("stage1_pairs", gen_stage1_pairs(world, d.n_pairs)),
        ("stage2_mixed", gen_stage2_mixed(world, d.n_text, d.n_mm)),
        ("probe", gen_probe(world)),
        ("train_probe", gen_train_probe(world)),
        ("mm_eval", gen_mm_eval(world, Split::HeldOut)),
    ]
}

fn gen_data(cfg: &CliConfig, out: &Path) -> Result<()> {
    let world = build_world(cfg)?;
    for (stem, recs) in corpora(cfg, &world) {
        let path = out.join(format!("{stem}.jsonl"));
        records::serialize(&recs, &path)?;
        println!("{:<14} {:>6} records  {}", stem, recs.len(), path.display());
    }
    write_text(&out.join("config.toml"), &cfg.to_toml())
}

fn load_corpus(cfg: &CliConfig, world: &World, data: &DataArg, stem: &str) -> Result<Vec<Record>> {
    match &data.data {
        Some(dir) => records::deserialize(&dir.join(format!("{stem}.jsonl"))),
        None => Ok(corpora(cfg, world)
            .into_iter()
            .find(|(s, _)| *s == stem)
            .map(|(_, r)| r)
            .expect("known corpus")),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// The model config with the vocabulary sized to the world's tokenizer.
pub fn model_config(cfg: &CliConfig, world: &World) -> ModelConfig {
    ModelConfig {
        vocab_size: cfg.model.vocab_size.max(world.tokenizer.len()),
        ..cfg.model.clone()
    }
}

fn train_stage1(cfg: &CliConfig, out: &Path, a: &Stage1Args) -> Result<()> {
    let world = build_world(cfg)?;
    let pairs = load_corpus(cfg, &world, &a.data, "stage1_pairs")?;
    let mcfg = model_config(cfg, &world);
    let state = match &a.resume {
        Some(p) => load_checkpoint(p, HashCheck::Expect(&mcfg))?,
        None => TrainState::fresh(Model::new(mcfg)?, cfg.stage1.seed),
    };
    let mut res = run_stage1(&cfg.stage1, &world, &pairs, state, a.stop_at)?;
    res.state.run_config = cfg.to_toml();
    save_checkpoint(&res.state, &out.join("stage1.ckpt"))?;
    write_metrics(&out.join("stage1_metrics.jsonl"), &res.metrics)?;
    if let Some(m) = res.metrics.last() {
        println!("stage 1: {} steps, loss {:.4}", res.state.step, m.loss.total());
    }
    Ok(())
}

/// An ablation by grid row name, or the configured one.
pub fn pick_ablation(cfg: &CliConfig, name: Option<&str>) -> Result<AblationConfig> {
    match name {
        None => Ok(cfg.ablation),
        Some(n) => AblationConfig::grid()
            .into_iter()
            .find(|(row, _)| *row == n)
            .map(|(_, a)| a)
            .ok_or_else(|| {
                let names: Vec<&str> = AblationConfig::grid().iter().map(|(r, _)| *r).collect();
                Error::Config(format!("unknown ablation {n:?}; expected one of {names:?}"))
            }),
    }
}

fn train_stage2(cfg: &CliConfig, out: &Path, a: &Stage2Args) -> Result<()> {
    let world = build_world(cfg)?;
    let corpus = load_corpus(cfg, &world, &a.data, "stage2_mixed")?;
    let ablation = pick_ablation(cfg, a.ablation.as_deref())?;
    let start = load_checkpoint(&a.init, HashCheck::Expect(&model_config(cfg, &world)))?;
    let mut res = run_stage2(&cfg.stage2, &ablation, &world, &corpus, start, a.stop_at)?;
    res.state.run_config = cfg.to_toml();
    save_checkpoint(&res.state, &out.join("stage2.ckpt"))?;
    write_metrics(&out.join("stage2_metrics.jsonl"), &res.metrics)?;
    println!("stage 2: {} steps", res.state.step);
    if a.vmn_finetune {
        let mut ft = run_vmn_finetune(&cfg.vmn, &ablation, &world, &corpus, res.state)?;
        ft.state.run_config = cfg.to_toml();
        save_checkpoint(&ft.state, &out.join("vmn.ckpt"))?;
        write_metrics(&out.join("vmn_metrics.jsonl"), &ft.metrics)?;
        println!("mapping fine-tune: {} steps", ft.state.step);
    }
    Ok(())
}

/// A report plus what produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    #[serde(flatten)]
    pub report: EvalReport,
    pub seed: u64,
    pub ablation: AblationConfig,
    pub config: String,
}

fn eval(cfg: &CliConfig, out: &Path, a: &EvalArgs) -> Result<()> {
    let world = build_world(cfg)?;
    let state = load_checkpoint(&a.checkpoint, HashCheck::Expect(&model_config(cfg, &world)))?;
    let ablation = pick_ablation(cfg, a.ablation.as_deref())?;
    let mut report = evaluate(&state.model, &world, ablation.mode())?;
    report.checkpoint = Some(a.checkpoint.display().to_string());
    print!("{}", report_table(&report));
    let file = ReportFile {
        report,
        seed: state.seed,
        ablation,
        config: cfg.to_toml(),
    };
    write_text(&out.join("report.json"), &serde_json::to_string_pretty(&file).expect("report serializes"))
}

pub fn report_table(r: &EvalReport) -> String {
    let mut s = String::new();
    let row = |s: &mut String, name: &str, a: &mks2::eval::AttrScores| {
        s.push_str(&format!(
            "{name:<12} overall {:.3}  color {:.3}  shape {:.3}  count {:.3}  (n={})\n",
            a.overall, a.color, a.shape, a.count, a.n
        ));
    };
    row(&mut s, "probe", &r.probe);
    row(&mut s, "train probe", &r.train_probe);
    row(&mut s, "image qa", &r.mm_qa);
    s.push_str(&format!("retrieval    r@1 {:.3}  r@5 {:.3}\n", r.recall_at_1, r.recall_at_5));
    s.push_str(&format!(
        "captions     token acc {:.3}  perplexity {:.2}\n",
        r.caption.token_accuracy, r.caption.perplexity
    ));
    let p = &r.router.pooled;
    s.push_str(&format!(
        "router S1    image {:.3}  names {:.3}  other {:.3}\n",
        p.image_span.mean, p.entity_name.mean, p.other_text.mean
    ));
    s
}

fn decode(cfg: &CliConfig, a: &GenerateArgs) -> Result<()> {
    let world = build_world(cfg)?;
    let state = load_checkpoint(&a.checkpoint, HashCheck::Expect(&model_config(cfg, &world)))?;
    let model = &state.model;
    let builder = ExampleBuilder::new(&world, &model.config)?;
    let sp = builder.specials;
    let image = match a.entity {
        Some(id) => Some(builder.encoder.encode(&world.entity(id)?.image())?.soft_tokens),
        None => None,
    };
    let ids = world.tokenizer.encode_strict(&a.prompt)?;
    let layout = prompt_layout(&sp, &ids, image.as_ref().map(|t| t.rows()), model.config.max_seq_len)?;
    let req = DecodeRequest {
        prompt: &layout,
        image: image.as_ref(),
        beam_size: a.beam,
        max_new_tokens: a.max_new,
        eos: sp.eos,
        pad: sp.pad,
    };
    let mode = pick_ablation(cfg, a.ablation.as_deref())?.mode();
    let d = generate(model, &req, mode)?;
    let text: Vec<usize> = d.tokens.iter().copied().take_while(|&t| t != sp.eos).collect();
    println!("{}", world.tokenizer.decode(&text));
    Ok(())
}

/// `1234567` as `1,234,567`.
pub fn thousands(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}

pub fn params_table(cfg: &ModelConfig) -> String {
    let t = ParamTable::new(cfg);
    let lines = [
        ("total", t.total),
        ("base", t.base),
        ("MVM", t.mvm),
        ("LoRA", t.lora),
        ("router", t.router),
        ("stage1_trainable", t.stage1_trainable),
        ("stage2_trainable", t.stage2_trainable),
    ];
    let mut s: String = lines.iter().map(|(k, v)| format!("{k}={}\n", thousands(*v))).collect();
    s.push_str(&format!("stage2_fraction={:.4}%\n", 100.0 * t.stage2_fraction()));
    s
}

fn params(cfg: &CliConfig, a: &ParamsArgs) -> Result<()> {
    let mut m = match &a.preset {
        Some(name) => ModelConfig::preset(name).ok_or_else(|| Error::Config(format!("unknown preset {name:?}")))?,
        None => cfg.model.clone(),
    };
    if let Some(r) = a.lora_rank {
        m.lora_rank = r;
    }
    m.validate()?;
    print!("{}", params_table(&m));
    Ok(())
}

/// One row of the ablation comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub ablation: AblationConfig,
    pub probe: mks2::eval::AttrScores,
    pub mm_qa: mks2::eval::AttrScores,
    /// Held-out probe accuracy minus the full configuration's.
    pub delta_vs_full: f64,
}

pub fn ablation_grid(
    cfg: &CliConfig,
    world: &World,
    corpus: &[Record],
    start: &TrainState,
    rows: Option<&[String]>,
) -> Result<Vec<AblationRow>> {
    let mut grid: Vec<(&str, AblationConfig)> = AblationConfig::grid();
    if let Some(keep) = rows {
        if let Some(bad) = keep.iter().find(|k| !grid.iter().any(|(n, _)| n == k)) {
            return Err(Error::Config(format!("unknown ablation {bad:?}")));
        }
        grid.retain(|(n, _)| *n == "full" || keep.iter().any(|k| k == n));
    }
    let builder = ExampleBuilder::new(world, &start.model.config)?;
    let probe = gen_probe(world);
    let mm = gen_mm_eval(world, Split::HeldOut);
    let mut out: Vec<AblationRow> = Vec::new();
    for (name, ab) in grid {
        let res = run_stage2(&cfg.stage2, &ab, world, corpus, start.clone(), None)?;
        let (p, _) = mks2::eval::answer_accuracy(&res.state.model, &builder, &probe, ab.mode())?;
        let (q, _) = mks2::eval::answer_accuracy(&res.state.model, &builder, &mm, ab.mode())?;
        let base = out.first().map_or(p.overall, |f| f.probe.overall);
        log::info!("{name}: probe {:.3} image qa {:.3}", p.overall, q.overall);
        out.push(AblationRow {
            name: name.to_string(),
            ablation: ab,
            probe: p,
            mm_qa: q,
            delta_vs_full: p.overall - base,
        });
    }
    Ok(out)
}

pub fn grid_table(rows: &[AblationRow]) -> String {
    let mut s = format!(
        "{:<28} {:>7} {:>7} {:>7} {:>7} {:>8} {:>8}\n",
        "config", "probe", "color", "shape", "count", "img qa", "Δ full"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<28} {:>7.3} {:>7.3} {:>7.3} {:>7.3} {:>8.3} {:>+8.3}\n",
            r.name, r.probe.overall, r.probe.color, r.probe.shape, r.probe.count, r.mm_qa.overall, r.delta_vs_full
        ));
    }
    s
}

fn ablate(cfg: &CliConfig, out: &Path, a: &AblateArgs) -> Result<()> {
    let world = build_world(cfg)?;
    let mcfg = model_config(cfg, &world);
    let start = match &a.init {
        Some(p) => load_checkpoint(p, HashCheck::Expect(&mcfg))?,
        None => {
            let pairs = load_corpus(cfg, &world, &a.data, "stage1_pairs")?;
            let fresh = TrainState::fresh(Model::new(mcfg)?, cfg.stage1.seed);
            let mut s = run_stage1(&cfg.stage1, &world, &pairs, fresh, None)?.state;
            s.run_config = cfg.to_toml();
            save_checkpoint(&s, &out.join("stage1.ckpt"))?;
            s
        }
    };
    let corpus = load_corpus(cfg, &world, &a.data, "stage2_mixed")?;
    let rows = ablation_grid(cfg, &world, &corpus, &start, a.rows.as_deref())?;
    print!("{}", grid_table(&rows));
    let lines: String = rows
        .iter()
        .map(|r| serde_json::to_string(r).expect("row serializes") + "\n")
        .collect();
    write_text(&out.join("ablate.jsonl"), &lines)
}
