use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tokenizer::Tokenizer;
use crate::error::{Error, Result};
use crate::rng::SeedTree;
use crate::visual::{Attributes, Encoder, SyntheticImage, N_COLORS, N_COUNTS, N_SHAPES};

pub const COLORS: [&str; N_COLORS] = ["red", "blue", "green", "yellow", "purple", "orange", "white", "black"];
pub const SHAPES: [&str; N_SHAPES] = ["cube", "sphere", "cone", "ring", "star", "pyramid", "cylinder", "disk"];
pub const COUNTS: [&str; N_COUNTS] = ["1", "2", "3", "4"];

/// Template words used by every corpus.
pub const TEMPLATE_WORDS: &[&str] = &[
    "a", "photo", "of", "named", "what", "is", "it", "color", "shape", "count", "?", "yes", "no", "do", "and",
    "have", "the", "same", "this", "does",
];

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

/// Size of the nonce lexicon; entity names are drawn from it.
pub const LEXICON_SIZE: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    HeldOut,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entity {
    pub id: usize,
    pub name: String,
    pub attributes: Attributes,
    pub split: Split,
    pub noise_seed: u64,
}

impl Entity {
    pub fn image(&self) -> SyntheticImage {
        SyntheticImage {
            entity_id: self.id,
            attributes: self.attributes,
            noise_seed: self.noise_seed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct World {
    pub seed: u64,
    pub entities: Vec<Entity>,
    pub lexicon: Vec<String>,
    pub tokenizer: Tokenizer,
}

pub fn shape_word(shape: usize, count: usize) -> String {
    if count == 1 {
        SHAPES[shape].to_string()
    } else {
        format!("{}s", SHAPES[shape])
    }
}

fn nonce_lexicon(seeds: &SeedTree, n: usize) -> Vec<String> {
    let reserved: BTreeSet<String> = COLORS
        .iter()
        .chain(&SHAPES)
        .map(|s| s.to_string())
        .chain(SHAPES.iter().map(|s| format!("{s}s")))
        .chain(TEMPLATE_WORDS.iter().map(|s| s.to_string()))
        .collect();
    let mut rng = seeds.stream("lexicon", 0);
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    let syllable = |rng: &mut rand_chacha::ChaCha8Rng| {
        let c1 = CONSONANTS[rng.random_range(0..CONSONANTS.len())] as char;
        let v = VOWELS[rng.random_range(0..VOWELS.len())] as char;
        let c2 = CONSONANTS[rng.random_range(0..CONSONANTS.len())] as char;
        format!("{c1}{v}{c2}")
    };
    while out.len() < n {
        let name = format!("{}{}", syllable(&mut rng), syllable(&mut rng));
        if !reserved.contains(&name) && seen.insert(name.clone()) {
            out.push(name);
        }
    }
    out
}

/// Each attribute value is used equally often (up to rounding), in an order
/// shuffled independently per attribute.
fn balanced(seeds: &SeedTree, label: &str, n: usize, values: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).map(|i| i % values).collect();
    v.shuffle(&mut seeds.stream(label, 0));
    v
}

impl World {
    pub fn build(seed: u64, n_entities: usize) -> Result<Self> {
        if n_entities < 16 {
            return Err(Error::Config(format!("need at least 16 entities, got {n_entities}")));
        }
        if n_entities > LEXICON_SIZE {
            return Err(Error::Config(format!("at most {LEXICON_SIZE} entities supported")));
        }
        let seeds = SeedTree::new(seed).child("world");
        let lexicon = nonce_lexicon(&seeds, LEXICON_SIZE);
        let mut name_order: Vec<usize> = (0..LEXICON_SIZE).collect();
        name_order.shuffle(&mut seeds.stream("names", 0));

        let colors = balanced(&seeds, "colors", n_entities, N_COLORS);
        let shapes = balanced(&seeds, "shapes", n_entities, N_SHAPES);
        let counts = balanced(&seeds, "counts", n_entities, N_COUNTS);
        let mut order: Vec<usize> = (0..n_entities).collect();
        order.shuffle(&mut seeds.stream("split", 0));
        let n_train = n_entities * 3 / 4;
        let mut split = vec![Split::HeldOut; n_entities];
        for &e in &order[..n_train] {
            split[e] = Split::Train;
        }
        let mut noise = seeds.stream("noise", 0);
        let entities = (0..n_entities)
            .map(|id| Entity {
                id,
                name: lexicon[name_order[id]].clone(),
                attributes: Attributes {
                    color: colors[id],
                    shape: shapes[id],
                    count: counts[id] + 1,
                },
                split: split[id],
                noise_seed: noise.random(),
            })
            .collect();

        let words = TEMPLATE_WORDS
            .iter()
            .map(|s| s.to_string())
            .chain(COLORS.iter().map(|s| s.to_string()))
            .chain(SHAPES.iter().map(|s| s.to_string()))
            .chain(SHAPES.iter().map(|s| format!("{s}s")))
            .chain(COUNTS.iter().map(|s| s.to_string()))
            .chain(lexicon.iter().cloned())
            .collect::<Vec<_>>();
        let tokenizer = Tokenizer::new(words)?;
        Ok(Self {
            seed,
            entities,
            lexicon,
            tokenizer,
        })
    }

    pub fn entity(&self, id: usize) -> Result<&Entity> {
        self.entities
            .get(id)
            .ok_or_else(|| Error::Contract(format!("no entity {id}")))
    }

    pub fn by_split(&self, split: Split) -> impl Iterator<Item = &Entity> {
        self.entities.iter().filter(move |e| e.split == split)
    }

    pub fn encoder(&self, n_tokens: usize, d_img: usize) -> Result<Encoder> {
        Encoder::new(self.seed, n_tokens, d_img)
    }
}
