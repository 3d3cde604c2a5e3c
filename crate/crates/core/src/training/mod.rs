//! Stage-wise optimization with freeze masks, gradient accumulation,
//! checkpoints and the ablation switches.

mod batches;
pub mod checkpoint;

pub use batches::{distinct_batches, epoch_order, ExampleBuilder};
pub use checkpoint::{from_bytes, load_checkpoint, load_model, save_checkpoint, to_bytes, HashCheck, TrainState};

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{gen_eval_captions, Kind, Record, Split, World};
use crate::error::{Error, Result};
use crate::model::{classify, name_trainable_in, Mode, Model, ModelInput, ParamKind, Routing, SpliceLayout, Stage};
use crate::objectives::{masked_token_loss, stage1_loss, InstructionExample, LossReport};
use crate::tensor::{AdamConfig, AdamState, Graph, ParamStore, Tensor, Var};
use crate::visual;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StagePlan {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub lr: f32,
    pub warmup_steps: u64,
    pub seed: u64,
    /// Optimizer steps between evaluations; 0 disables them.
    pub eval_every: u64,
    /// Hard cap on optimizer steps, below what the epochs would give.
    pub max_steps: Option<u64>,
}

impl Default for StagePlan {
    fn default() -> Self {
        Self::stage1()
    }
}

impl StagePlan {
    pub fn stage1() -> Self {
        Self {
            stage: Stage::Stage1,
            epochs: 3,
            batch_size: 16,
            grad_accum_steps: 2,
            lr: 5e-3,
            warmup_steps: 0,
            seed: 0,
            eval_every: 0,
            max_steps: None,
        }
    }

    pub fn stage2() -> Self {
        Self {
            stage: Stage::Stage2,
            epochs: 8,
            grad_accum_steps: 1,
            lr: 1e-3,
            warmup_steps: 20,
            ..Self::stage1()
        }
    }

    pub fn vmn_finetune() -> Self {
        Self {
            stage: Stage::VmnFinetune,
            epochs: 1,
            ..Self::stage1()
        }
    }

    /// Linear warmup to `lr`, then constant.
    pub fn lr_at(&self, step: u64) -> f32 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.lr
        } else {
            self.lr * (step + 1) as f32 / self.warmup_steps as f32
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.grad_accum_steps == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size, grad_accum_steps and epochs must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} is not positive", self.lr)));
        }
        Ok(())
    }
}

/// Switches reproducing the ablated variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Mix the visual and textual experts; off means the LoRA-adapted textual expert alone.
    pub use_moe: bool,
    /// Keep the stage-1 visual memory; off resets it to its fresh initialization.
    pub use_mvm_stage1: bool,
    pub text_sft: bool,
    pub multimodal_sft: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl AblationConfig {
    pub fn full() -> Self {
        Self {
            use_moe: true,
            use_mvm_stage1: true,
            text_sft: true,
            multimodal_sft: true,
        }
    }

    /// The named rows of the comparison grid: the full model, the three
    /// instruction-data/mixture ablations, and the memory-reset control.
    pub fn grid() -> Vec<(&'static str, AblationConfig)> {
        let full = Self::full();
        vec![
            ("full", full),
            ("w/o multimodal-sft", Self { multimodal_sft: false, ..full }),
            ("w/o multimodal-sft & momes", Self { multimodal_sft: false, use_moe: false, ..full }),
            ("w/o text-sft", Self { text_sft: false, ..full }),
            ("w/o stage-1 memory", Self { use_mvm_stage1: false, ..full }),
        ]
    }

    pub fn mode(&self) -> Mode {
        if self.use_moe {
            Mode::Mixture(Routing::Learned)
        } else {
            Mode::TextExpert
        }
    }

    /// Whether `name` is optimized in stage 2 under these switches. Without
    /// the mixture the visual expert and router are never evaluated.
    pub fn stage2_trainable(&self, name: &str) -> bool {
        if !name_trainable_in(name, Stage::Stage2) {
            return false;
        }
        self.use_moe || !(name.contains(".mvm.") || classify(name) == Some(ParamKind::Router))
    }

    pub fn filter<'r>(&self, corpus: &'r [Record]) -> Vec<&'r Record> {
        corpus
            .iter()
            .filter(|r| match r.kind {
                Kind::TextInst => self.text_sft,
                Kind::MmInst => self.multimodal_sft,
                _ => false,
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RouterMeans {
    /// Mean visual-expert weight over image-span tokens, when the batch had any.
    pub image: Option<f64>,
    pub text: Option<f64>,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub stage: Stage,
    pub step: u64,
    pub lr: f32,
    #[serde(flatten)]
    pub loss: LossReport,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub recall_at_1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub router: Option<RouterMeans>,
}

pub fn write_metrics(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r).expect("metrics serialize");
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub state: TrainState,
    pub metrics: Vec<MetricsRecord>,
}

/// Names of frozen tensors whose bytes differ from `snapshot`.
pub fn check_frozen(store: &ParamStore, snapshot: &BTreeMap<String, Vec<u8>>) -> Result<()> {
    let changed = store.changed_since(snapshot);
    if changed.is_empty() {
        Ok(())
    } else {
        Err(Error::Contract(format!("frozen tensors modified: {}", changed.join(", "))))
    }
}

/// Output of one micro-batch.
struct MicroResult {
    report: LossReport,
    grads: BTreeMap<String, Tensor>,
    router: Option<RouterMeans>,
}

/// The shared optimization loop. `micro` computes the loss of one micro-batch;
/// `after_step` runs after each optimizer update.
fn optimize<M, A>(
    plan: &StagePlan,
    state: &mut TrainState,
    schedule: &[Vec<usize>],
    stop_at: Option<u64>,
    mut micro: M,
    mut after_step: A,
) -> Result<Vec<MetricsRecord>>
where
    M: FnMut(&Model, &[usize]) -> Result<MicroResult>,
    A: FnMut(&mut TrainState, &mut MetricsRecord) -> Result<()>,
{
    let accum = plan.grad_accum_steps;
    let mut total = schedule.len().div_ceil(accum) as u64;
    if let Some(m) = plan.max_steps {
        total = total.min(m);
    }
    let end = stop_at.map_or(total, |s| s.min(total));
    let snapshot = state.model.params.frozen_snapshot();
    let trainable = state.model.params.trainable_names();
    let opt = state.optimizer.get_or_insert_with(|| {
        AdamState::new(AdamConfig {
            lr: plan.lr,
            ..AdamConfig::default()
        })
    });
    let mut opt = opt.clone();
    let mut metrics = Vec::new();
    while state.step < end {
        let step = state.step;
        let first = step as usize * accum;
        let micros = &schedule[first..(first + accum).min(schedule.len())];
        let mut sum: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut reports = Vec::with_capacity(micros.len());
        let mut router = (0.0, 0usize, 0.0, 0usize);
        for batch in micros {
            let r = micro(&state.model, batch)?;
            for (name, g) in r.grads {
                match sum.get_mut(&name) {
                    Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                    None => {
                        sum.insert(name, g);
                    }
                }
            }
            if let Some(rm) = r.router {
                if let Some(v) = rm.image {
                    router.0 += v;
                    router.1 += 1;
                }
                if let Some(v) = rm.text {
                    router.2 += v;
                    router.3 += 1;
                }
            }
            reports.push(r.report);
        }
        let scale = 1.0 / micros.len() as f32;
        for g in sum.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
        for name in &trainable {
            if !sum.contains_key(name) {
                let shape = state.model.params.get(name)?.shape().to_vec();
                sum.insert(name.clone(), Tensor::zeros(&shape));
            }
        }
        let lr = plan.lr_at(step);
        opt.step_with_lr(&mut state.model.params, &sum, lr)?;
        state.step += 1;
        let mut rec = MetricsRecord {
            stage: state.stage,
            step: state.step,
            lr,
            loss: mean_report(&reports),
            recall_at_1: None,
            router: (router.1 + router.3 > 0).then(|| RouterMeans {
                image: (router.1 > 0).then(|| router.0 / router.1 as f64),
                text: (router.3 > 0).then(|| router.2 / router.3 as f64),
            }),
        };
        state.optimizer = Some(opt.clone());
        after_step(state, &mut rec)?;
        check_frozen(&state.model.params, &snapshot)?;
        log::debug!("{:?} step {} loss {:.4}", state.stage, state.step, rec.loss.total());
        metrics.push(rec);
    }
    state.optimizer = Some(opt);
    Ok(metrics)
}

fn mean_report(rs: &[LossReport]) -> LossReport {
    let mean = |f: fn(&LossReport) -> Option<f32>| {
        let v: Vec<f32> = rs.iter().filter_map(f).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f32>() / v.len() as f32)
    };
    LossReport {
        l_c: mean(|r| r.l_c),
        l_t2i: mean(|r| r.l_t2i),
        l_stage1: mean(|r| r.l_stage1),
        l_instruction: mean(|r| r.l_instruction),
        n_examples: rs.iter().map(|r| r.n_examples).sum(),
        n_tokens: rs.iter().map(|r| r.n_tokens).sum(),
    }
}

/// Contrastive micro-batches for every epoch, in order. Leftovers too small
/// to have a negative are skipped.
fn epoch_schedule(plan: &StagePlan, label: &str, n: usize, key: impl Fn(usize) -> Vec<f32>) -> Vec<Vec<usize>> {
    (0..plan.epochs)
        .flat_map(|e| distinct_batches(&epoch_order(plan.seed, label, e, n), &key, plan.batch_size))
        .filter(|b| b.len() >= 2)
        .collect()
}

fn expect_trainable(store: &ParamStore, pred: impl Fn(&str) -> bool) -> Result<()> {
    if let Some(bad) = store.iter().find(|(n, e)| e.trainable != pred(n)) {
        return Err(Error::Contract(format!(
            "{} is {} but the stage plan says otherwise",
            bad.0,
            if bad.1.trainable { "trainable" } else { "frozen" }
        )));
    }
    Ok(())
}

/// Stage 1: caption and contrastive losses over the visual memory, the
/// visual mapping, the retrieval head and the image tags.
pub fn run_stage1(
    plan: &StagePlan,
    world: &World,
    corpus: &[Record],
    mut state: TrainState,
    stop_at: Option<u64>,
) -> Result<TrainOutput> {
    plan.validate()?;
    if plan.stage != Stage::Stage1 || state.stage != Stage::Stage1 {
        return Err(Error::Config("stage-1 training needs a stage-1 plan and state".into()));
    }
    let pairs: Vec<&Record> = corpus.iter().filter(|r| r.kind == Kind::Pair).collect();
    if pairs.len() < 2 {
        return Err(Error::Config("stage-1 corpus has fewer than two pairs".into()));
    }
    if state.step == 0 {
        state.seed = plan.seed;
    }
    state.model.set_stage(Stage::Stage1);
    let builder = ExampleBuilder::new(world, &state.model.config)?;
    let examples = pairs.iter().map(|r| builder.caption(r)).collect::<Result<Vec<_>>>()?;
    let schedule = epoch_schedule(plan, "stage1", examples.len(), |i| examples[i].global.clone());
    let sp = builder.specials;
    let eval_records = gen_eval_captions(world, 256, Split::HeldOut);
    let metrics = optimize(
        plan,
        &mut state,
        &schedule,
        stop_at,
        |model, idx| {
            let batch: Vec<_> = idx.iter().map(|&i| examples[i].clone()).collect();
            let mut g = Graph::new();
            let (loss, report) = stage1_loss(&mut g, model, &sp, &batch)?;
            Ok(MicroResult {
                report,
                grads: g.backward(loss)?.named(),
                router: None,
            })
        },
        |state, rec| {
            visual::clamp_tau(&mut state.model.params)?;
            if plan.eval_every > 0 && state.step % plan.eval_every == 0 {
                let r = crate::eval::retrieval_recall(&state.model, &builder, &eval_records, 16, &[1], Mode::Stage1)?;
                rec.recall_at_1 = Some(r[0]);
                log::info!("stage 1 step {}: loss {:.4} recall@1 {:.3}", state.step, rec.loss.total(), r[0]);
            }
            Ok(())
        },
    )?;
    Ok(TrainOutput { state, metrics })
}

/// Resets every visual-memory tensor to its value at construction.
pub fn reset_visual_memory(model: &mut Model) -> Result<()> {
    let fresh = Model::new(model.config.clone())?;
    let names: Vec<String> = model
        .params
        .names()
        .filter(|n| classify(n) == Some(ParamKind::Mvm))
        .map(String::from)
        .collect();
    for n in names {
        model.params.assign(&n, fresh.params.get(&n)?.clone())?;
    }
    Ok(())
}

/// Moves a finished stage-1 state into stage 2 (applying the memory reset
/// when the ablation asks for it); a stage-2 state resumes as is.
pub fn enter_stage2(state: TrainState, plan: &StagePlan, ablation: &AblationConfig) -> Result<TrainState> {
    let mut state = state;
    match state.stage {
        Stage::Stage2 => {}
        Stage::Stage1 => {
            if !ablation.use_mvm_stage1 {
                reset_visual_memory(&mut state.model)?;
            }
            state.stage = Stage::Stage2;
            state.step = 0;
            state.seed = plan.seed;
            state.optimizer = None;
        }
        Stage::VmnFinetune => return Err(Error::Config("cannot return to stage 2 after the mapping fine-tune".into())),
    }
    state.model.params.set_trainable(|n| ablation.stage2_trainable(n));
    Ok(state)
}

/// Mean router weight on image-span and on text tokens of a forward pass.
fn router_means(g: &Graph, blocks: &[crate::model::BlockActivations], layouts: &[&SpliceLayout], seq_len: usize) -> Option<RouterMeans> {
    let (mut img, mut ni, mut txt, mut nt) = (0.0, 0usize, 0.0, 0usize);
    for acts in blocks {
        let w = g.value(acts.s?);
        for (s, l) in layouts.iter().enumerate() {
            for p in 0..l.len() {
                let s1 = w.row(s * seq_len + p)[0] as f64;
                if l.image_span.as_ref().is_some_and(|r| r.contains(&p)) {
                    img += s1;
                    ni += 1;
                } else {
                    txt += s1;
                    nt += 1;
                }
            }
        }
    }
    Some(RouterMeans {
        image: (ni > 0).then(|| img / ni as f64),
        text: (nt > 0).then(|| txt / nt as f64),
    })
}

fn instruction_run(
    plan: &StagePlan,
    state: &mut TrainState,
    examples: &[InstructionExample],
    mode: Mode,
    pad: usize,
    stop_at: Option<u64>,
    label: &str,
) -> Result<Vec<MetricsRecord>> {
    let schedule: Vec<Vec<usize>> = (0..plan.epochs)
        .flat_map(|e| {
            epoch_order(plan.seed, label, e, examples.len())
                .chunks(plan.batch_size)
                .map(<[usize]>::to_vec)
                .collect::<Vec<_>>()
        })
        .collect();
    optimize(
        plan,
        state,
        &schedule,
        stop_at,
        |model, idx| {
            let batch: Vec<&InstructionExample> = idx.iter().map(|&i| &examples[i]).collect();
            let inputs: Vec<ModelInput> = batch
                .iter()
                .map(|e| ModelInput {
                    layout: &e.layout,
                    image: e.image.as_ref(),
                })
                .collect();
            let mut g = Graph::new();
            let fwd = model.forward(&mut g, &inputs, mode, pad)?;
            let layouts: Vec<&SpliceLayout> = batch.iter().map(|e| &e.layout).collect();
            let loss: Var = masked_token_loss(&mut g, model, &fwd, &layouts)?;
            let router = router_means(&g, &fwd.blocks, &layouts, fwd.seq_len);
            let report = LossReport {
                l_instruction: Some(g.value(loss).data()[0]),
                n_examples: batch.len(),
                n_tokens: batch.iter().map(|e| e.layout.n_targets()).sum(),
                ..LossReport::default()
            };
            Ok(MicroResult {
                report,
                grads: g.backward(loss)?.named(),
                router,
            })
        },
        |_, _| Ok(()),
    )
}

/// Stage 2: instruction tuning of the LoRA adapters and router on the
/// instruction mix selected by `ablation`.
pub fn run_stage2(
    plan: &StagePlan,
    ablation: &AblationConfig,
    world: &World,
    corpus: &[Record],
    state: TrainState,
    stop_at: Option<u64>,
) -> Result<TrainOutput> {
    plan.validate()?;
    if plan.stage != Stage::Stage2 {
        return Err(Error::Config("stage-2 training needs a stage-2 plan".into()));
    }
    let mut state = enter_stage2(state, plan, ablation)?;
    expect_trainable(&state.model.params, |n| ablation.stage2_trainable(n))?;
    let builder = ExampleBuilder::new(world, &state.model.config)?;
    let records = ablation.filter(corpus);
    if records.is_empty() {
        return Err(Error::Config("the ablation leaves no stage-2 training records".into()));
    }
    let examples = records.iter().map(|r| builder.instruction(r)).collect::<Result<Vec<_>>>()?;
    let metrics = instruction_run(plan, &mut state, &examples, ablation.mode(), builder.specials.pad, stop_at, "stage2")?;
    Ok(TrainOutput { state, metrics })
}

/// One pass over image instructions updating only the visual mapping network.
pub fn run_vmn_finetune(
    plan: &StagePlan,
    ablation: &AblationConfig,
    world: &World,
    corpus: &[Record],
    state: TrainState,
) -> Result<TrainOutput> {
    plan.validate()?;
    let mut state = state;
    if state.stage != Stage::VmnFinetune {
        state.stage = Stage::VmnFinetune;
        state.step = 0;
        state.seed = plan.seed;
        state.optimizer = None;
    }
    state.model.set_stage(Stage::VmnFinetune);
    let builder = ExampleBuilder::new(world, &state.model.config)?;
    let examples = corpus
        .iter()
        .filter(|r| r.kind == Kind::MmInst)
        .map(|r| builder.instruction(r))
        .collect::<Result<Vec<_>>>()?;
    if examples.is_empty() {
        return Err(Error::Config("no image instructions for the mapping fine-tune".into()));
    }
    let metrics = instruction_run(plan, &mut state, &examples, ablation.mode(), builder.specials.pad, None, "vmn")?;
    Ok(TrainOutput { state, metrics })
}
