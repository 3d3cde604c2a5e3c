use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::world::{shape_word, Entity, Split, World, COLORS, COUNTS, SHAPES};
use crate::error::{Error, Result};
use crate::rng::SeedTree;
use crate::visual::{Attributes, N_COLORS, N_SHAPES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Pair,
    TextInst,
    MmInst,
    Probe,
}

/// One example. Pair records keep the caption in `response` and leave
/// `prompt` empty. Text-only instructions carry no entity id or image.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub kind: Kind,
    pub entity_id: Option<usize>,
    pub prompt: String,
    pub response: String,
    pub split: Split,
    pub noise_seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttrKind {
    Color,
    Shape,
    Count,
}

impl AttrKind {
    pub const ALL: [AttrKind; 3] = [AttrKind::Color, AttrKind::Shape, AttrKind::Count];

    pub fn word(self) -> &'static str {
        match self {
            AttrKind::Color => "color",
            AttrKind::Shape => "shape",
            AttrKind::Count => "count",
        }
    }

    pub fn n_values(self) -> usize {
        match self {
            AttrKind::Color => N_COLORS,
            AttrKind::Shape => N_SHAPES,
            AttrKind::Count => COUNTS.len(),
        }
    }

    pub fn chance(self) -> f64 {
        1.0 / self.n_values() as f64
    }

    pub fn value_word(self, a: &Attributes) -> &'static str {
        match self {
            AttrKind::Color => COLORS[a.color],
            AttrKind::Shape => SHAPES[a.shape],
            AttrKind::Count => COUNTS[a.count - 1],
        }
    }

    pub fn words(self) -> &'static [&'static str] {
        match self {
            AttrKind::Color => &COLORS,
            AttrKind::Shape => &SHAPES,
            AttrKind::Count => &COUNTS,
        }
    }

    pub fn from_word(w: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.word() == w)
    }
}

/// Every third appearance of an entity in the caption corpus uses the
/// name-only caption; the rest describe the picture.
pub const NAME_ONLY_PERIOD: usize = 3;

pub fn full_caption(e: &Entity) -> String {
    let a = e.attributes;
    format!(
        "a photo of {} {} {} named {}",
        COUNTS[a.count - 1],
        COLORS[a.color],
        shape_word(a.shape, a.count),
        e.name
    )
}

pub fn name_caption(e: &Entity) -> String {
    format!("a photo of {}", e.name)
}

pub fn question(kind: AttrKind, subject: &str) -> String {
    format!("what {} is {subject} ?", kind.word())
}

pub fn answer(kind: AttrKind, a: &Attributes) -> String {
    format!("it is {}", kind.value_word(a))
}

/// The word after the first `is`, where templated answers put the attribute.
pub fn answer_slot(response: &str) -> Option<&str> {
    let mut words = response.split_whitespace();
    words.find(|&w| w == "is")?;
    words.next()
}

/// Attribute kind asked about by a probe-style question.
pub fn question_kind(prompt: &str) -> Option<AttrKind> {
    let mut words = prompt.split_whitespace();
    if words.next()? != "what" {
        return None;
    }
    AttrKind::from_word(words.next()?)
}

fn pair_record(e: &Entity, caption: String) -> Record {
    Record {
        kind: Kind::Pair,
        entity_id: Some(e.id),
        prompt: String::new(),
        response: caption,
        split: e.split,
        noise_seed: Some(e.noise_seed),
    }
}

/// Image-caption pairs. Entities are visited in a fresh shuffled order for
/// every block of `E` records, so each one appears `n/E` times up to one.
pub fn gen_stage1_pairs(world: &World, n: usize) -> Vec<Record> {
    gen_pairs(world, n, "pairs", |_| true)
}

/// A caption sample restricted to one split, drawn from its own stream.
pub fn gen_eval_captions(world: &World, n: usize, split: Split) -> Vec<Record> {
    gen_pairs(world, n, "eval_captions", |e| e.split == split)
}

fn gen_pairs(world: &World, n: usize, label: &str, keep: impl Fn(&Entity) -> bool) -> Vec<Record> {
    let seeds = SeedTree::new(world.seed).child(label);
    let pool: Vec<&Entity> = world.entities.iter().filter(|e| keep(e)).collect();
    let e = pool.len();
    let mut out = Vec::with_capacity(n);
    let mut block = 0;
    while out.len() < n {
        let mut order: Vec<usize> = (0..e).collect();
        order.shuffle(&mut seeds.stream("block", block as u64));
        for &i in order.iter().take(n - out.len()) {
            let ent = pool[i];
            let caption = if (block + ent.id) % NAME_ONLY_PERIOD == 0 {
                name_caption(ent)
            } else {
                full_caption(ent)
            };
            out.push(pair_record(ent, caption));
        }
        block += 1;
    }
    out
}

fn yes_no(b: bool) -> String {
    if b { "yes" } else { "no" }.to_string()
}

fn text_record(prompt: String, response: String) -> Record {
    Record {
        kind: Kind::TextInst,
        entity_id: None,
        prompt,
        response,
        split: Split::Train,
        noise_seed: None,
    }
}

fn text_inst(train: &[&Entity], rng: &mut impl Rng) -> Record {
    let kind = AttrKind::ALL[rng.random_range(0..3)];
    let a = train[rng.random_range(0..train.len())];
    match rng.random_range(0..4) {
        // probe format, taught on training entities
        0 | 1 => text_record(question(kind, &a.name), answer(kind, &a.attributes)),
        2 => {
            let truth = rng.random_bool(0.5);
            let value = if truth {
                kind.value_word(&a.attributes).to_string()
            } else {
                let words = kind.words();
                let own = words.iter().position(|w| *w == kind.value_word(&a.attributes)).unwrap();
                words[(own + rng.random_range(1..words.len())) % words.len()].to_string()
            };
            text_record(
                format!("does {} have the {} {value} ?", a.name, kind.word()),
                yes_no(truth),
            )
        }
        _ => {
            let b = train[rng.random_range(0..train.len())];
            let same = kind.value_word(&a.attributes) == kind.value_word(&b.attributes);
            text_record(
                format!("do {} and {} have the same {} ?", a.name, b.name, kind.word()),
                yes_no(same),
            )
        }
    }
}

fn mm_inst(e: &Entity, rng: &mut impl Rng) -> Record {
    let kind = AttrKind::ALL[rng.random_range(0..3)];
    Record {
        kind: Kind::MmInst,
        entity_id: Some(e.id),
        prompt: question(kind, "this"),
        response: answer(kind, &e.attributes),
        split: e.split,
        noise_seed: Some(e.noise_seed),
    }
}

/// Text-only and image-grounded instructions, all about training entities.
pub fn gen_stage2_mixed(world: &World, n_text: usize, n_mm: usize) -> Vec<Record> {
    let seeds = SeedTree::new(world.seed).child("stage2");
    let train: Vec<&Entity> = world.by_split(Split::Train).collect();
    let mut out = Vec::with_capacity(n_text + n_mm);
    for i in 0..n_text {
        out.push(text_inst(&train, &mut seeds.stream("text", i as u64)));
    }
    for i in 0..n_mm {
        let mut rng = seeds.stream("mm", i as u64);
        let e = train[rng.random_range(0..train.len())];
        out.push(mm_inst(e, &mut rng));
    }
    out
}

/// Text-only questions about training entities in probe format, for
/// checking that the format itself was learned.
pub fn gen_train_probe(world: &World) -> Vec<Record> {
    probes(world, Split::Train)
}

/// One question per attribute for every held-out entity.
pub fn gen_probe(world: &World) -> Vec<Record> {
    probes(world, Split::HeldOut)
}

fn probes(world: &World, split: Split) -> Vec<Record> {
    world
        .by_split(split)
        .flat_map(|e| {
            AttrKind::ALL.map(|kind| Record {
                kind: Kind::Probe,
                entity_id: Some(e.id),
                prompt: question(kind, &e.name),
                response: answer(kind, &e.attributes),
                split,
                noise_seed: None,
            })
        })
        .collect()
}

/// One image question per attribute for every entity of `split`.
pub fn gen_mm_eval(world: &World, split: Split) -> Vec<Record> {
    world
        .by_split(split)
        .flat_map(|e| {
            AttrKind::ALL.map(|kind| Record {
                kind: Kind::MmInst,
                entity_id: Some(e.id),
                prompt: question(kind, "this"),
                response: answer(kind, &e.attributes),
                split,
                noise_seed: Some(e.noise_seed),
            })
        })
        .collect()
}

/// Gold attribute word for a probe record.
pub fn probe_gold(world: &World, r: &Record) -> Result<(AttrKind, &'static str)> {
    let id = r
        .entity_id
        .ok_or_else(|| Error::Contract("probe record without entity".into()))?;
    let kind = question_kind(&r.prompt)
        .ok_or_else(|| Error::Contract(format!("not a probe question: {}", r.prompt)))?;
    Ok((kind, kind.value_word(&world.entity(id)?.attributes)))
}
