use rand::Rng;

use super::*;
use crate::data::{closed_world_answer, gen_eval_captions, gen_mm_eval, gen_probe, gen_stage2_mixed, Split, World};
use crate::model::{generate, DecodeRequest, ModelConfig, Routing};
use crate::objectives::caption_loss;
use crate::rng::SeedTree;

fn small_config(world: &World, seed: u64) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_blocks: 2,
        n_heads: 2,
        vocab_size: world.tokenizer.len(),
        max_seq_len: 32,
        ffn_dim: 16,
        lora_rank: 2,
        lora_alpha: 4.0,
        img_token_count: 4,
        d_img: 24,
        seed,
        ..ModelConfig::toy(world.tokenizer.len())
    }
}

fn jitter(model: &mut Model, seed: u64, scale: f32) {
    let names: Vec<String> = model.params.names().map(String::from).collect();
    for name in names {
        if name == "retrieval.log_tau" {
            continue;
        }
        let t = model.params.get(&name).unwrap();
        let mut data = t.data().to_vec();
        let noise = SeedTree::new(seed).normal_vec(&name, 0, data.len(), scale);
        data.iter_mut().zip(noise).for_each(|(x, e)| *x += e);
        let shape = t.shape().to_vec();
        model.params.assign(&name, Tensor::new(shape, data).unwrap()).unwrap();
    }
}

#[test]
fn gold_ranks_match_brute_force() {
    let seeds = SeedTree::new(3);
    for trial in 0..30u64 {
        let mut rng = seeds.stream("sims", trial);
        let n = 2 + trial as usize % 9;
        // a coarse grid forces ties
        let rows: Vec<Vec<f32>> = (0..n)
            .map(|_| (0..n).map(|_| rng.random_range(0..4) as f32 * 0.5).collect())
            .collect();
        let got = gold_ranks(&Tensor::from_rows(&rows).unwrap());
        for (i, row) in rows.iter().enumerate() {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
            assert_eq!(got[i], idx.iter().position(|&j| j == i).unwrap());
        }
    }
}

#[test]
fn recall_bounds_and_contract() {
    let w = World::build(0, 64).unwrap();
    let model = Model::new(small_config(&w, 1)).unwrap();
    let b = ExampleBuilder::new(&w, &model.config).unwrap();
    let recs = gen_eval_captions(&w, 32, Split::HeldOut);
    let r = retrieval_recall(&model, &b, &recs, 16, &[1, 5, 16], Mode::Stage1).unwrap();
    assert!(r[0] <= r[1] && r[1] <= r[2]);
    assert_eq!(r[2], 1.0);
    assert!(retrieval_recall(&model, &b, &recs, 16, &[17], Mode::Stage1).is_err());
    assert!(retrieval_recall(&model, &b, &recs, 16, &[0], Mode::Stage1).is_err());
    assert!(retrieval_recall(&model, &b, &recs[..8], 16, &[1], Mode::Stage1).is_err());
}

#[test]
fn untrained_recall_is_at_chance() {
    let w = World::build(4, 64).unwrap();
    let recs = gen_eval_captions(&w, 64, Split::HeldOut);
    let (mut hits, mut n) = (0.0f64, 0.0f64);
    for seed in 0..8 {
        let mut model = Model::new(small_config(&w, 100 + seed)).unwrap();
        jitter(&mut model, seed, 0.2);
        let b = ExampleBuilder::new(&w, &model.config).unwrap();
        let r = retrieval_recall(&model, &b, &recs, 16, &[1], Mode::Stage1).unwrap();
        hits += r[0] * 64.0;
        n += 64.0;
    }
    let p = 1.0 / 16.0;
    let sigma = (p * (1.0 - p) / n).sqrt();
    assert!((hits / n - p).abs() < 3.0 * sigma, "recall@1 {}", hits / n);
}

#[test]
fn perplexity_is_exp_caption_loss() {
    let w = World::build(0, 32).unwrap();
    let mut model = Model::new(small_config(&w, 2)).unwrap();
    jitter(&mut model, 9, 0.1);
    let b = ExampleBuilder::new(&w, &model.config).unwrap();
    let recs = gen_eval_captions(&w, 20, Split::Train);
    let m = caption_metrics(&model, &b, &recs, Mode::Stage1).unwrap();
    let examples: Vec<CaptionExample> = recs.iter().map(|r| b.caption(r).unwrap()).collect();
    let mut g = Graph::new();
    let l = caption_loss(&mut g, &model, &b.specials, &examples).unwrap();
    let loss = g.scalar(l);
    assert!((m.perplexity.ln() - loss).abs() < 1e-4, "{} vs {loss}", m.perplexity.ln());
    let tokens: usize = examples.iter().map(|e| e.caption.len() + 1).sum();
    assert_eq!(m.n_tokens, tokens);
    assert!((0.0..=1.0).contains(&m.token_accuracy));
}

#[test]
fn batched_greedy_matches_single_decoding() {
    let w = World::build(0, 32).unwrap();
    let mut model = Model::new(small_config(&w, 3)).unwrap();
    model.set_stage(crate::model::Stage::Stage2);
    jitter(&mut model, 5, 0.5);
    let b = ExampleBuilder::new(&w, &model.config).unwrap();
    let sp = b.specials;
    let recs: Vec<Record> = gen_probe(&w).into_iter().chain(gen_mm_eval(&w, Split::Train).into_iter().take(4)).collect();
    let prompts: Vec<(SpliceLayout, Option<Tensor>)> = recs
        .iter()
        .map(|r| {
            let ex = b.instruction(r).unwrap();
            let ids = w.tokenizer.encode_strict(&r.prompt).unwrap();
            let n_img = ex.image.as_ref().map(|t| t.rows());
            (prompt_layout(&sp, &ids, n_img, model.config.max_seq_len).unwrap(), ex.image)
        })
        .collect();
    let mode = Mode::Mixture(Routing::Learned);
    let batched = greedy_batch(&model, &prompts, 5, sp.eos, sp.pad, mode).unwrap();
    for ((layout, image), got) in prompts.iter().zip(&batched) {
        let req = DecodeRequest {
            prompt: layout,
            image: image.as_ref(),
            beam_size: 1,
            max_new_tokens: 5,
            eos: sp.eos,
            pad: sp.pad,
        };
        assert_eq!(&generate(&model, &req, mode).unwrap().tokens, got);
    }
}

#[test]
fn slot_scoring() {
    let w = World::build(0, 32).unwrap();
    let probe = gen_probe(&w);
    let gold: Vec<String> = probe.iter().map(|r| r.response.clone()).collect();
    let s = score_answers(&probe, &gold).unwrap();
    assert_eq!((s.overall, s.color, s.shape, s.count, s.n), (1.0, 1.0, 1.0, 1.0, probe.len()));
    let junk = vec!["it is".to_string(); probe.len()];
    assert_eq!(score_answers(&probe, &junk).unwrap().overall, 0.0);
    let extra: Vec<String> = gold.iter().map(|g| format!("{g} it is")).collect();
    assert_eq!(score_answers(&probe, &extra).unwrap().overall, 1.0);
}

#[test]
fn tabular_oracle_is_perfect() {
    let w = World::build(2, 64).unwrap();
    let probe = gen_probe(&w);
    let answers: Vec<String> = probe
        .iter()
        .map(|r| closed_world_answer(&r.prompt, &w.entity(r.entity_id.unwrap()).unwrap().attributes).unwrap())
        .collect();
    assert_eq!(score_answers(&probe, &answers).unwrap().overall, 1.0);
}

#[test]
fn shuffled_gold_scores_at_chance() {
    let w = World::build(7, 128).unwrap();
    let probe = gen_probe(&w);
    let mut rng = SeedTree::new(11).stream("draws", 0);
    let draws = 10_000;
    let mut recs = Vec::with_capacity(draws);
    let mut answers = Vec::with_capacity(draws);
    for _ in 0..draws {
        let r = &probe[rng.random_range(0..probe.len())];
        let other = &w.entities[rng.random_range(0..w.entities.len())];
        answers.push(closed_world_answer(&r.prompt, &other.attributes).unwrap());
        recs.push(r.clone());
    }
    let s = score_answers(&recs, &answers).unwrap();
    for kind in AttrKind::ALL {
        let seen = recs.iter().filter(|r| question_kind(&r.prompt) == Some(kind)).count() as f64;
        let p = kind.chance();
        let sigma = (p * (1.0 - p) / seen).sqrt();
        assert!((s.get(kind) - p).abs() < 3.0 * sigma, "{kind:?}: {} vs {p}", s.get(kind));
    }
}

#[test]
fn untrained_router_splits_evenly() {
    let w = World::build(0, 32).unwrap();
    let mut model = Model::new(small_config(&w, 4)).unwrap();
    model.set_stage(crate::model::Stage::Stage2);
    let b = ExampleBuilder::new(&w, &model.config).unwrap();
    let recs = gen_stage2_mixed(&w, 6, 6);
    let st = router_stats(&model, &b, &recs).unwrap();
    assert_eq!(st.per_block.len(), model.config.n_blocks);
    let pooled = &st.pooled;
    for c in [TokenCategory::ImageSpan, TokenCategory::EntityName, TokenCategory::OtherText] {
        assert!(pooled.get(c).count > 0, "{c:?} empty");
        assert!((pooled.get(c).mean - 0.5).abs() < 1e-6);
    }
    assert_eq!(pooled.all.count, st.n_tokens * model.config.n_blocks);
    assert!(st.max_row_sum_error < 1e-6);
}

#[test]
fn router_summaries_are_consistent() {
    let w = World::build(0, 32).unwrap();
    let mut model = Model::new(small_config(&w, 4)).unwrap();
    model.set_stage(crate::model::Stage::Stage2);
    jitter(&mut model, 8, 1.0);
    let b = ExampleBuilder::new(&w, &model.config).unwrap();
    let st = router_stats(&model, &b, &gen_stage2_mixed(&w, 6, 6)).unwrap();
    let cats = [TokenCategory::ImageSpan, TokenCategory::EntityName, TokenCategory::OtherText];
    for stats in st.per_block.iter().chain([&st.pooled]) {
        let weighted: f64 = cats.iter().map(|&c| stats.get(c).mean * stats.get(c).count as f64).sum();
        assert!((weighted / stats.all.count as f64 - stats.all.mean).abs() < 1e-9);
        for s in cats.iter().map(|&c| stats.get(c)).chain([&stats.all]) {
            assert!((0.0..=1.0).contains(&s.mean));
            assert_eq!(s.histogram.iter().sum::<usize>(), s.count);
        }
    }
    let blocks = st.per_block.len() as f64;
    let mean_of_blocks: f64 = st.per_block.iter().map(|b| b.all.mean).sum::<f64>() / blocks;
    assert!((mean_of_blocks - st.pooled.all.mean).abs() < 1e-9);
    assert!(st.max_row_sum_error < 1e-5);
}
