//! The synthetic world: entities, tokenizer, corpora and record files.

mod corpus;
pub mod records;
mod tokenizer;
mod world;

pub use corpus::{
    answer, answer_slot, full_caption, gen_eval_captions, gen_mm_eval, gen_probe, gen_stage1_pairs, gen_stage2_mixed,
    gen_train_probe, name_caption, probe_gold, question, question_kind, AttrKind, Kind, Record, NAME_ONLY_PERIOD,
};
pub use tokenizer::Tokenizer;
pub use world::{shape_word, Entity, Split, World, COLORS, COUNTS, LEXICON_SIZE, SHAPES, TEMPLATE_WORDS};

use std::collections::{BTreeMap, BTreeSet};

use crate::visual::Attributes;

/// Names of held-out entities that occur as words anywhere in `records`.
pub fn leaked_names(world: &World, records: &[Record]) -> BTreeSet<String> {
    let held: BTreeSet<&str> = world
        .by_split(Split::HeldOut)
        .map(|e| e.name.as_str())
        .collect();
    let mut hits = BTreeSet::new();
    for r in records {
        for w in r.prompt.split_whitespace().chain(r.response.split_whitespace()) {
            if held.contains(w) {
                hits.insert(w.to_string());
            }
        }
    }
    hits
}

/// Attribute facts recoverable from descriptive captions, keyed by name.
pub fn tabulate_captions(records: &[Record]) -> BTreeMap<String, Attributes> {
    let mut table = BTreeMap::new();
    for r in records.iter().filter(|r| r.kind == Kind::Pair) {
        let w: Vec<&str> = r.response.split_whitespace().collect();
        if let ["a", "photo", "of", count, color, shape, "named", name] = w[..] {
            let count = COUNTS.iter().position(|c| *c == count);
            let color = COLORS.iter().position(|c| *c == color);
            let shape = SHAPES
                .iter()
                .position(|s| *s == shape || format!("{s}s") == shape);
            if let (Some(count), Some(color), Some(shape)) = (count, color, shape) {
                table.insert(
                    name.to_string(),
                    Attributes {
                        color,
                        shape,
                        count: count + 1,
                    },
                );
            }
        }
    }
    table
}

/// Closed-world answer to a templated question about `a`, or `None` when the
/// question is not one the generators produce about a single subject.
pub fn closed_world_answer(prompt: &str, a: &Attributes) -> Option<String> {
    if let Some(kind) = question_kind(prompt) {
        return Some(answer(kind, a));
    }
    let w: Vec<&str> = prompt.split_whitespace().collect();
    if let ["does", _, "have", "the", kind, value, "?"] = w[..] {
        let kind = AttrKind::from_word(kind)?;
        return Some(if kind.value_word(a) == value { "yes" } else { "no" }.to_string());
    }
    None
}
