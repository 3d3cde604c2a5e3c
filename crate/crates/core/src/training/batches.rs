use std::collections::VecDeque;

use rand::seq::SliceRandom;

use crate::data::{Kind, Record, World};
use crate::error::{Error, Result};
use crate::model::{splice_image, ModelConfig, SpecialIds};
use crate::objectives::{CaptionExample, InstructionExample};
use crate::rng::SeedTree;
use crate::visual::{Encoder, SyntheticImage};

/// Turns records into model-ready examples for one world and model shape.
pub struct ExampleBuilder<'w> {
    pub world: &'w World,
    pub encoder: Encoder,
    pub specials: SpecialIds,
    max_len: usize,
}

impl<'w> ExampleBuilder<'w> {
    pub fn new(world: &'w World, cfg: &ModelConfig) -> Result<Self> {
        if world.tokenizer.len() > cfg.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary of {} words does not fit vocab_size {}",
                world.tokenizer.len(),
                cfg.vocab_size
            )));
        }
        Ok(Self {
            world,
            encoder: world.encoder(cfg.img_token_count, cfg.d_img)?,
            specials: world.tokenizer.specials(),
            max_len: cfg.max_seq_len,
        })
    }

    pub fn image(&self, r: &Record) -> Result<Option<SyntheticImage>> {
        let (Some(id), Some(noise_seed)) = (r.entity_id, r.noise_seed) else {
            return Ok(None);
        };
        Ok(Some(SyntheticImage {
            entity_id: id,
            attributes: self.world.entity(id)?.attributes,
            noise_seed,
        }))
    }

    pub fn caption(&self, r: &Record) -> Result<CaptionExample> {
        let img = self
            .image(r)?
            .ok_or_else(|| Error::Contract("caption record without an image".into()))?;
        let enc = self.encoder.encode(&img)?;
        Ok(CaptionExample {
            caption: self.world.tokenizer.encode_strict(&r.response)?,
            soft_tokens: enc.soft_tokens,
            global: enc.global,
        })
    }

    pub fn instruction(&self, r: &Record) -> Result<InstructionExample> {
        let tok = &self.world.tokenizer;
        let prompt = tok.encode_strict(&r.prompt)?;
        let mut response = tok.encode_strict(&r.response)?;
        if response.is_empty() {
            return Err(Error::UndefinedLoss("empty response".into()));
        }
        response.push(self.specials.eos);
        let image = match r.kind {
            Kind::MmInst => self.image(r)?.map(|i| self.encoder.encode(&i)).transpose()?,
            _ => None,
        };
        let n_img = image.as_ref().map(|e| e.soft_tokens.rows());
        Ok(InstructionExample {
            layout: splice_image(&self.specials, &prompt, n_img, &response, self.max_len)?,
            image: image.map(|e| e.soft_tokens),
        })
    }
}

/// Shuffled order of `n` items for one epoch.
pub fn epoch_order(seed: u64, label: &str, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut SeedTree::new(seed).child(label).stream("epoch", epoch as u64));
    order
}

/// Cuts `order` into batches of `size` in which no key repeats, deferring
/// clashing items to later batches. A batch may fall short only when every
/// remaining item clashes with it.
pub fn distinct_batches<K: PartialEq>(order: &[usize], key: impl Fn(usize) -> K, size: usize) -> Vec<Vec<usize>> {
    let mut pending: VecDeque<usize> = order.iter().copied().collect();
    let mut out = Vec::new();
    while !pending.is_empty() {
        let mut batch: Vec<usize> = Vec::with_capacity(size);
        let mut keys: Vec<K> = Vec::with_capacity(size);
        let mut deferred = VecDeque::new();
        while let Some(i) = pending.pop_front() {
            if batch.len() == size {
                deferred.push_back(i);
                continue;
            }
            let k = key(i);
            if keys.contains(&k) {
                deferred.push_back(i);
            } else {
                keys.push(k);
                batch.push(i);
            }
        }
        out.push(batch);
        pending = deferred;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_stage1_pairs, gen_stage2_mixed};
    use proptest::prelude::*;

    #[test]
    fn records_become_examples() {
        let w = World::build(0, 64).unwrap();
        let cfg = ModelConfig::toy(w.tokenizer.len());
        let b = ExampleBuilder::new(&w, &cfg).unwrap();
        let pair = &gen_stage1_pairs(&w, 1)[0];
        let ex = b.caption(pair).unwrap();
        assert_eq!(ex.soft_tokens.shape(), [32, 64]);
        assert_eq!(w.tokenizer.decode(&ex.caption), pair.response);
        for r in gen_stage2_mixed(&w, 8, 8) {
            let ex = b.instruction(&r).unwrap();
            assert_eq!(ex.image.is_some(), r.kind == Kind::MmInst);
            assert_eq!(ex.layout.image_span.is_some(), r.kind == Kind::MmInst);
            let resp: Vec<usize> = ex.layout.target_positions().map(|p| ex.layout.ids[p]).collect();
            assert_eq!(*resp.last().unwrap(), b.specials.eos);
            assert_eq!(w.tokenizer.decode(&resp[..resp.len() - 1]), r.response);
        }
    }

    #[test]
    fn small_vocabulary_is_rejected() {
        let w = World::build(0, 64).unwrap();
        assert!(ExampleBuilder::new(&w, &ModelConfig::toy(100)).is_err());
    }

    proptest! {
        #[test]
        fn distinct_batches_partition_without_repeats(
            keys in proptest::collection::vec(0usize..6, 1..60),
            size in 1usize..8,
        ) {
            let order: Vec<usize> = (0..keys.len()).collect();
            let batches = distinct_batches(&order, |i| keys[i], size);
            let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
            seen.sort_unstable();
            prop_assert_eq!(seen, order);
            for b in &batches {
                prop_assert!(!b.is_empty() && b.len() <= size);
                for (x, &i) in b.iter().enumerate() {
                    prop_assert!(b[..x].iter().all(|&j| keys[j] != keys[i]));
                }
            }
        }
    }
}
