use super::*;
use crate::tensor::Tensor;
use proptest::prelude::*;

const PAD: usize = 0;

fn small_config(vocab: usize) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_blocks: 2,
        n_heads: 2,
        vocab_size: vocab,
        max_seq_len: 16,
        ffn_dim: 24,
        mvm_ratio: 0.25,
        lora_rank: 2,
        lora_alpha: 4.0,
        img_token_count: 3,
        d_img: 20,
        seed: 11,
        ..ModelConfig::default()
    }
}

fn layout(ids: &[usize]) -> SpliceLayout {
    SpliceLayout {
        ids: ids.to_vec(),
        image_span: None,
        loss_mask: vec![false; ids.len()],
    }
}

fn random_ids(seed: u64, len: usize, vocab: usize) -> Vec<usize> {
    use rand::Rng;
    let mut rng = SeedTree::new(seed).stream("ids", 0);
    (0..len).map(|_| rng.random_range(1..vocab)).collect()
}

/// Randomizes every trainable-in-some-stage tensor so that zero-init identities
/// no longer hide mistakes.
fn perturb(model: &mut Model, which: impl Fn(ParamKind) -> bool, seed: u64) {
    let names: Vec<String> = model.params.names().map(String::from).collect();
    for name in names {
        if which(classify(&name).unwrap()) {
            let t = model.params.get(&name).unwrap();
            let data = SeedTree::new(seed).normal_vec(&name, 0, t.numel(), 0.3);
            let shape = t.shape().to_vec();
            model.params.assign(&name, Tensor::new(shape, data).unwrap()).unwrap();
        }
    }
}

fn hidden(model: &Model, seqs: &[Vec<usize>], mode: Mode) -> (Tensor, usize) {
    let layouts: Vec<SpliceLayout> = seqs.iter().map(|s| layout(s)).collect();
    let inputs: Vec<ModelInput> = layouts.iter().map(ModelInput::text).collect();
    let mut g = Graph::new();
    let f = model.forward(&mut g, &inputs, mode, PAD).unwrap();
    (g.value(f.hidden).clone(), f.seq_len)
}

fn all_logits(model: &Model, ids: &[usize], mode: Mode) -> Tensor {
    let l = layout(ids);
    let mut g = Graph::new();
    let f = model.forward(&mut g, &[ModelInput::text(&l)], mode, PAD).unwrap();
    let lg = model.logits(&mut g, f.hidden).unwrap();
    g.value(lg).clone()
}

// ---- independent f64 reference implementation ---------------------------

struct Ref<'a> {
    m: &'a Model,
}

type Mat = Vec<Vec<f64>>;

impl Ref<'_> {
    fn p(&self, name: &str) -> Mat {
        let t = self.m.params.get(name).unwrap();
        let cols = t.cols();
        t.data()
            .chunks(cols)
            .map(|r| r.iter().map(|&v| v as f64).collect())
            .collect()
    }

    fn vecp(&self, name: &str) -> Vec<f64> {
        self.m.params.get(name).unwrap().data().iter().map(|&v| v as f64).collect()
    }

    fn ln(&self, x: &[f64], which: &str) -> Vec<f64> {
        let (g, b) = (self.vecp(&format!("{which}.gain")), self.vecp(&format!("{which}.bias")));
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + LN_EPS as f64).sqrt();
        x.iter().enumerate().map(|(i, v)| (v - mean) * inv * g[i] + b[i]).collect()
    }

    /// `W x` with optional LoRA on a `[out × in]` weight.
    fn lin(&self, name: &str, x: &[f64], lora: bool) -> Vec<f64> {
        let w = self.p(name);
        let mut y: Vec<f64> = w.iter().map(|r| r.iter().zip(x).map(|(a, b)| a * b).sum()).collect();
        if lora {
            let a = self.p(&format!("{name}.lora_a"));
            let b = self.p(&format!("{name}.lora_b"));
            let ax: Vec<f64> = a.iter().map(|r| r.iter().zip(x).map(|(p, q)| p * q).sum()).collect();
            let s = self.m.config.lora_scale() as f64;
            for (o, row) in b.iter().enumerate() {
                y[o] += s * row.iter().zip(&ax).map(|(p, q)| p * q).sum::<f64>();
            }
        }
        y
    }

    fn expert(&self, block: usize, expert: &str, x: &[f64], lora: bool) -> Vec<f64> {
        let p = format!("blocks.{block}.{expert}");
        let silu = |v: f64| v / (1.0 + (-v).exp());
        let up = self.lin(&format!("{p}.up"), x, lora);
        let hidden: Vec<f64> = if self.m.params.contains(&format!("{p}.gate")) {
            let gate = self.lin(&format!("{p}.gate"), x, lora);
            gate.iter().zip(&up).map(|(g, u)| silu(*g) * u).collect()
        } else {
            up.iter().map(|&u| silu(u)).collect()
        };
        self.lin(&format!("{p}.down"), &hidden, lora)
    }

    fn attention(&self, block: usize, xs: &Mat) -> Mat {
        let p = format!("blocks.{block}");
        let n: Mat = xs.iter().map(|x| self.ln(x, &format!("{p}.ln1"))).collect();
        let q: Mat = n.iter().map(|x| self.lin(&format!("{p}.attn.q"), x, false)).collect();
        let k: Mat = n.iter().map(|x| self.lin(&format!("{p}.attn.k"), x, false)).collect();
        let v: Mat = n.iter().map(|x| self.lin(&format!("{p}.attn.v"), x, false)).collect();
        let d = self.m.config.d_model;
        let dh = self.m.config.head_dim();
        let mut out = vec![vec![0.0; d]; xs.len()];
        for h in 0..self.m.config.n_heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..xs.len() {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in cols.clone() {
                    out[i][c] = (0..=i).map(|j| e[j] / z * v[j][c]).sum();
                }
            }
        }
        xs.iter()
            .zip(&out)
            .map(|(x, a)| {
                let o = self.lin(&format!("{p}.attn.o"), a, false);
                x.iter().zip(&o).map(|(p, q)| p + q).collect()
            })
            .collect()
    }

    fn forward(&self, ids: &[usize], mode: Mode) -> Mat {
        let tok = self.p("embed.tokens");
        let pos = self.p("embed.positions");
        let mut xs: Mat = ids
            .iter()
            .enumerate()
            .map(|(t, &id)| tok[id].iter().zip(&pos[t]).map(|(a, b)| a + b).collect())
            .collect();
        for b in 0..self.m.config.n_blocks {
            let ln2 = format!("blocks.{b}.ln2");
            let hs = self.attention(b, &xs);
            xs = hs
                .iter()
                .map(|h| {
                    let n = self.ln(h, &ln2);
                    let add = |a: &[f64], c: &[f64]| -> Vec<f64> { a.iter().zip(c).map(|(p, q)| p + q).collect() };
                    match mode {
                        Mode::Reference => add(h, &self.expert(b, "mlp", &n, false)),
                        Mode::Stage1 => match self.m.config.stage1_insertion {
                            Insertion::Sequential => {
                                let h1 = add(h, &self.expert(b, "mvm", &n, false));
                                let n1 = self.ln(&h1, &ln2);
                                add(&h1, &self.expert(b, "mlp", &n1, false))
                            }
                            Insertion::Parallel => {
                                let both = add(&self.expert(b, "mvm", &n, false), &self.expert(b, "mlp", &n, false));
                                add(h, &both)
                            }
                        },
                        Mode::Mixture(routing) => {
                            let s = match routing {
                                Routing::Fixed(w) => [w[0] as f64, w[1] as f64],
                                Routing::Learned => {
                                    let w = self.p(&format!("blocks.{b}.router.weight"));
                                    let bias = self.vecp(&format!("blocks.{b}.router.bias"));
                                    let z: Vec<f64> = (0..2)
                                        .map(|c| h.iter().zip(&w).map(|(x, r)| x * r[c]).sum::<f64>() + bias[c])
                                        .collect();
                                    let mx = z[0].max(z[1]);
                                    let e = [(z[0] - mx).exp(), (z[1] - mx).exp()];
                                    [e[0] / (e[0] + e[1]), e[1] / (e[0] + e[1])]
                                }
                            };
                            let ve = self.expert(b, "mvm", &n, true);
                            let te = self.expert(b, "mlp", &n, true);
                            (0..h.len()).map(|i| h[i] + s[0] * ve[i] + s[1] * te[i]).collect()
                        }
                        Mode::TextExpert => add(h, &self.expert(b, "mlp", &n, true)),
                    }
                })
                .collect();
        }
        xs
    }
}

fn assert_matches_reference(model: &Model, ids: &[usize], mode: Mode, tol: f64) {
    let (h, _) = hidden(model, &[ids.to_vec()], mode);
    let r = Ref { m: model }.forward(ids, mode);
    for (t, row) in r.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            let got = h.at(t, c) as f64;
            assert!(
                (got - v).abs() <= tol * (1.0 + v.abs()),
                "{mode:?} pos {t} col {c}: graph {got} reference {v}"
            );
        }
    }
}

// ---- tests ----------------------------------------------------------------

#[test]
fn init_stage1_equals_reference_exactly() {
    let model = Model::new(small_config(30)).unwrap();
    for seed in 0..20 {
        let ids = random_ids(seed, 1 + seed as usize % 12, 30);
        let a = all_logits(&model, &ids, Mode::Stage1);
        let b = all_logits(&model, &ids, Mode::Reference);
        assert!(a.max_abs_diff(&b) <= 1e-6);
    }
}

#[test]
fn graph_forward_matches_f64_reference_in_every_mode() {
    let mut model = Model::new(small_config(30)).unwrap();
    perturb(&mut model, |k| matches!(k, ParamKind::Mvm | ParamKind::Lora | ParamKind::Router), 5);
    let ids = random_ids(3, 9, 30);
    for mode in [
        Mode::Reference,
        Mode::Stage1,
        Mode::Mixture(Routing::Learned),
        Mode::Mixture(Routing::Fixed([0.3, 0.7])),
        Mode::TextExpert,
    ] {
        assert_matches_reference(&model, &ids, mode, 1e-4);
    }
    model.config.stage1_insertion = Insertion::Parallel;
    assert_matches_reference(&model, &ids, Mode::Stage1, 1e-4);
}

#[test]
fn plain_mvm_matches_reference() {
    let cfg = ModelConfig {
        mvm_gated: false,
        ..small_config(30)
    };
    let mut model = Model::new(cfg).unwrap();
    assert!(!model.params.contains("blocks.0.mvm.gate"));
    perturb(&mut model, |k| k == ParamKind::Mvm, 2);
    assert_matches_reference(&model, &random_ids(1, 7, 30), Mode::Stage1, 1e-4);
}

#[test]
fn hand_computed_two_dim_forward() {
    let cfg = ModelConfig {
        d_model: 2,
        n_blocks: 1,
        n_heads: 1,
        vocab_size: 2,
        max_seq_len: 1,
        ffn_dim: 2,
        mvm_ratio: 0.5,
        ..ModelConfig::default()
    };
    let mut m = Model::new(cfg).unwrap();
    let eye = Tensor::identity(2);
    for name in [
        "blocks.0.attn.q",
        "blocks.0.attn.k",
        "blocks.0.attn.v",
        "blocks.0.attn.o",
        "blocks.0.mlp.gate",
        "blocks.0.mlp.up",
        "blocks.0.mlp.down",
        "lm_head",
        "embed.tokens",
    ] {
        m.params.assign(name, eye.clone()).unwrap();
    }
    m.params.assign("embed.positions", Tensor::zeros(&[1, 2])).unwrap();
    let logits = all_logits(&m, &[0], Mode::Stage1);

    // x = [1, 0]; every norm maps [a, b] with a > b to ±c.
    let eps = LN_EPS as f64;
    let unit = |half_gap: f64| half_gap / (half_gap * half_gap + eps).sqrt();
    let c1 = unit(0.5);
    let h_s = [1.0 + c1, -c1];
    let c2 = unit((h_s[0] - h_s[1]) / 2.0);
    let silu = |v: f64| v / (1.0 + (-v).exp());
    let h_o = [h_s[0] + silu(c2) * c2, h_s[1] + silu(-c2) * -c2];
    let c3 = unit((h_o[0] - h_o[1]) / 2.0);
    assert!((logits.at(0, 0) as f64 - c3).abs() < 1e-5, "{logits:?}");
    assert!((logits.at(0, 1) as f64 + c3).abs() < 1e-5);
}

#[test]
fn batch_order_is_irrelevant() {
    let mut model = Model::new(small_config(30)).unwrap();
    perturb(&mut model, |k| k == ParamKind::Mvm, 1);
    let a = random_ids(1, 5, 30);
    let b = random_ids(2, 8, 30);
    let (h_ab, t) = hidden(&model, &[a.clone(), b.clone()], Mode::Stage1);
    let (h_ba, _) = hidden(&model, &[b, a.clone()], Mode::Stage1);
    assert_eq!(h_ab.row(0), h_ba.row(t));
    for p in 0..a.len() {
        assert_eq!(h_ab.row(p), h_ba.row(t + p));
    }
}

#[test]
fn perturbing_a_token_never_changes_earlier_logits() {
    let mut model = Model::new(small_config(30)).unwrap();
    perturb(&mut model, |k| matches!(k, ParamKind::Mvm | ParamKind::Lora | ParamKind::Router), 9);
    let ids = random_ids(4, 10, 30);
    for mode in [Mode::Stage1, Mode::Mixture(Routing::Learned)] {
        let base = all_logits(&model, &ids, mode);
        for t in 0..ids.len() {
            let mut other = ids.clone();
            other[t] = other[t] % 29 + 1;
            let alt = all_logits(&model, &other, mode);
            for p in 0..t {
                assert_eq!(base.row(p), alt.row(p), "position {p} changed when token {t} did");
            }
        }
    }
}

#[test]
fn overlong_input_is_rejected() {
    let model = Model::new(small_config(30)).unwrap();
    let l = layout(&[1; 17]);
    let mut g = Graph::new();
    assert!(model.forward(&mut g, &[ModelInput::text(&l)], Mode::Stage1, PAD).is_err());
}

#[test]
fn untrained_router_splits_evenly() {
    let model = Model::new(small_config(30)).unwrap();
    let l = layout(&random_ids(7, 12, 30));
    let mut g = Graph::new();
    let f = model
        .forward(&mut g, &[ModelInput::text(&l)], Mode::Mixture(Routing::Learned), PAD)
        .unwrap();
    for b in &f.blocks {
        let s = g.value(b.s.unwrap());
        assert!(s.data().iter().all(|&v| v == 0.5));
    }
}

#[test]
fn router_rows_are_distributions() {
    let mut model = Model::new(small_config(30)).unwrap();
    perturb(&mut model, |k| k == ParamKind::Router, 3);
    let l = layout(&random_ids(8, 12, 30));
    let mut g = Graph::new();
    let f = model
        .forward(&mut g, &[ModelInput::text(&l)], Mode::Mixture(Routing::Learned), PAD)
        .unwrap();
    for b in &f.blocks {
        let s = g.value(b.s.unwrap());
        for r in 0..s.rows() {
            assert!((s.at(r, 0) + s.at(r, 1) - 1.0).abs() <= 1e-6);
        }
        let (h_s, h_m, h_o) = (g.value(b.h_s), g.value(b.h_m.unwrap()), g.value(b.h_o));
        for i in 0..h_o.numel() {
            assert_eq!(h_o.data()[i], h_s.data()[i] + h_m.data()[i]);
        }
    }
}

/// One-block model so the direct computation below covers the whole forward.
fn one_block() -> Model {
    let cfg = ModelConfig {
        n_blocks: 1,
        ..small_config(30)
    };
    let mut m = Model::new(cfg).unwrap();
    perturb(&mut m, |k| matches!(k, ParamKind::Mvm | ParamKind::Lora | ParamKind::Router), 21);
    m
}

fn direct_single_expert(m: &Model, ids: &[usize], expert: &str) -> Tensor {
    let l = layout(ids);
    let mut g = Graph::new();
    let (x, t) = m.embed(&mut g, &[ModelInput::text(&l)], PAD).unwrap();
    let h_s = m.attention(&mut g, x, 0, 1, t).unwrap();
    let n = m.layernorm(&mut g, h_s, "blocks.0.ln2").unwrap();
    let e = m.expert(&mut g, n, 0, expert, true).unwrap();
    let out = g.add(h_s, e).unwrap();
    g.value(out).clone()
}

#[test]
fn one_hot_routing_reproduces_single_expert_blocks() {
    let m = one_block();
    let ids = random_ids(5, 9, 30);
    let (visual, _) = hidden(&m, &[ids.clone()], Mode::Mixture(Routing::Fixed([1.0, 0.0])));
    let (textual, _) = hidden(&m, &[ids.clone()], Mode::Mixture(Routing::Fixed([0.0, 1.0])));
    assert_eq!(visual, direct_single_expert(&m, &ids, "mvm"));
    assert_eq!(textual, direct_single_expert(&m, &ids, "mlp"));
    let (text_only, _) = hidden(&m, &[ids], Mode::TextExpert);
    assert_eq!(textual, text_only);
}

#[test]
fn stage2_at_init_is_an_even_parallel_mixture() {
    let mut m = Model::new(small_config(30)).unwrap();
    perturb(&mut m, |k| k == ParamKind::Mvm, 6);
    let ids = random_ids(6, 11, 30);
    let (learned, _) = hidden(&m, &[ids.clone()], Mode::Mixture(Routing::Learned));
    let (fixed, _) = hidden(&m, &[ids.clone()], Mode::Mixture(Routing::Fixed([0.5, 0.5])));
    assert_eq!(learned, fixed);
    // with B = 0 the LoRA experts are the frozen experts
    let r = Ref { m: &m }.forward(&ids, Mode::Mixture(Routing::Fixed([0.5, 0.5])));
    let no_lora = {
        let mut plain = m.clone();
        let names: Vec<String> = plain.params.names().filter(|n| n.ends_with(".lora_a")).map(String::from).collect();
        for n in names {
            let shape = plain.params.get(&n).unwrap().shape().to_vec();
            plain.params.assign(&n, Tensor::zeros(&shape)).unwrap();
        }
        hidden(&plain, &[ids.clone()], Mode::Mixture(Routing::Learned)).0
    };
    assert_eq!(learned, no_lora);
    for (t, row) in r.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            assert!((learned.at(t, c) as f64 - v).abs() < 1e-4 * (1.0 + v.abs()));
        }
    }
}

#[test]
fn missing_lora_factors_is_a_configuration_error() {
    let m = Model::new(small_config(30)).unwrap();
    let mut b = ParamStore::builder();
    for (name, e) in m.params.iter() {
        if classify(name) != Some(ParamKind::Lora) {
            b.add(name, e.tensor.clone()).unwrap();
        }
    }
    let stripped = Model {
        config: m.config.clone(),
        params: b.build(),
    };
    let l = layout(&[1, 2, 3]);
    let mut g = Graph::new();
    let err = stripped
        .forward(&mut g, &[ModelInput::text(&l)], Mode::Mixture(Routing::Learned), PAD)
        .unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
    let mut g = Graph::new();
    assert!(stripped.forward(&mut g, &[ModelInput::text(&l)], Mode::Stage1, PAD).is_ok());
}

#[test]
fn text_embedding_is_plain_lookup() {
    let m = Model::new(small_config(30)).unwrap();
    let ids = [4, 9, 2];
    let l = layout(&ids);
    let mut g = Graph::new();
    let (x, _) = m.embed(&mut g, &[ModelInput::text(&l)], PAD).unwrap();
    let x = g.value(x);
    let tok = m.params.get("embed.tokens").unwrap();
    let pos = m.params.get("embed.positions").unwrap();
    for (t, &id) in ids.iter().enumerate() {
        for c in 0..16 {
            assert_eq!(x.at(t, c), tok.at(id, c) + pos.at(t, c));
        }
    }
}

fn specials() -> SpecialIds {
    SpecialIds {
        pad: 0,
        unk: 1,
        bos: 2,
        eos: 3,
        inst: 4,
        inst_end: 5,
        img_start: 6,
        img_end: 7,
    }
}

#[test]
fn image_rows_and_tags_are_spliced() {
    let m = Model::new(small_config(30)).unwrap();
    let sp = specials();
    let l = splice_image(&sp, &[10, 11], Some(3), &[12, 3], 16).unwrap();
    let img = Tensor::new(vec![3, 20], SeedTree::new(1).normal_vec("img", 0, 60, 1.0)).unwrap();
    let mut g = Graph::new();
    let (x, _) = m
        .embed(&mut g, &[ModelInput { layout: &l, image: Some(&img) }], PAD)
        .unwrap();
    let x = g.value(x).clone();
    let vmn = m.params.get("visual.mapping").unwrap();
    let pos = m.params.get("embed.positions").unwrap();
    let start = m.params.get("embed.img_start").unwrap();
    let end = m.params.get("embed.img_end").unwrap();
    for c in 0..16 {
        assert_eq!(x.at(1, c), start.at(0, c) + pos.at(1, c));
        assert_eq!(x.at(5, c), end.at(0, c) + pos.at(5, c));
        for (j, p) in (2..5).enumerate() {
            let mapped: f32 = (0..20).map(|k| img.at(j, k) * vmn.at(k, c)).sum();
            assert!((x.at(p, c) - mapped - pos.at(p, c)).abs() < 1e-5);
        }
    }
    let mut g = Graph::new();
    assert!(m.embed(&mut g, &[ModelInput::text(&l)], PAD).is_err());
}

// ---- decoding ---------------------------------------------------------------

fn decode_model() -> Model {
    let mut m = Model::new(small_config(12)).unwrap();
    // sharpen the output head so greedy and beam search disagree sometimes
    let head = m.params.get("lm_head").unwrap().clone();
    let sharp: Vec<f32> = head.data().iter().map(|v| v * 40.0).collect();
    m.params.assign("lm_head", Tensor::new(head.shape().to_vec(), sharp).unwrap()).unwrap();
    m
}

fn request(prompt: &SpliceLayout, beam: usize, max_new: usize) -> DecodeRequest<'_> {
    DecodeRequest {
        prompt,
        image: None,
        beam_size: beam,
        max_new_tokens: max_new,
        eos: 3,
        pad: PAD,
    }
}

#[test]
fn greedy_is_iterated_argmax() {
    let m = decode_model();
    let prompt = layout(&[4, 8, 9, 5]);
    let out = generate(&m, &request(&prompt, 1, 4), Mode::Stage1).unwrap();
    let mut ids = prompt.ids.clone();
    for &tok in &out.tokens {
        let lg = all_logits(&m, &ids, Mode::Stage1);
        let last = lg.row(ids.len() - 1);
        let best = (0..last.len()).fold(0, |b, i| if last[i] > last[b] { i } else { b });
        assert_eq!(tok, best);
        ids.push(tok);
    }
    assert!(out.tokens.len() == 4 || out.tokens.last() == Some(&3));
}

/// Best total log-probability over every sequence that either ends at the
/// end token or reaches `max_len`.
fn exhaustive_best(m: &Model, prompt: &SpliceLayout, max_len: usize) -> f64 {
    fn rec(m: &Model, prompt: &SpliceLayout, prefix: &mut Vec<usize>, max_len: usize, best: &mut f64) {
        let req = request(prompt, 1, max_len);
        if prefix.last() == Some(&3) || prefix.len() == max_len {
            let lp = sequence_log_prob(m, &req, prefix, Mode::Stage1).unwrap();
            *best = best.max(lp);
            return;
        }
        for tok in 0..12 {
            prefix.push(tok);
            rec(m, prompt, prefix, max_len, best);
            prefix.pop();
        }
    }
    let mut best = f64::NEG_INFINITY;
    rec(m, prompt, &mut Vec::new(), max_len, &mut best);
    best
}

#[test]
fn beam_is_never_worse_than_greedy_and_never_beats_exhaustive() {
    let m = decode_model();
    for (i, prompt_ids) in [[4, 8, 9, 5], [4, 10, 11, 5], [4, 2, 6, 5]].iter().enumerate() {
        let prompt = layout(prompt_ids);
        let max_len = if i == 0 { 4 } else { 3 };
        let greedy = generate(&m, &request(&prompt, 1, max_len), Mode::Stage1).unwrap();
        let beam = generate(&m, &request(&prompt, 4, max_len), Mode::Stage1).unwrap();
        let best = exhaustive_best(&m, &prompt, max_len);
        let check = |d: &Decoded| sequence_log_prob(&m, &request(&prompt, 1, max_len), &d.tokens, Mode::Stage1).unwrap();
        assert!((check(&beam) - beam.log_prob).abs() < 1e-4);
        assert!((check(&greedy) - greedy.log_prob).abs() < 1e-4);
        assert!(beam.log_prob >= greedy.log_prob - 1e-9);
        assert!(beam.log_prob <= best + 1e-4);
    }
}

#[test]
fn decoding_is_deterministic() {
    let m = decode_model();
    let prompt = layout(&[4, 8, 9, 5]);
    let a = generate(&m, &request(&prompt, 4, 4), Mode::Stage1).unwrap();
    let b = generate(&m, &request(&prompt, 4, 4), Mode::Stage1).unwrap();
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn router_weights_always_sum_to_one(seed in 0u64..1000, len in 1usize..12) {
        let mut model = Model::new(small_config(30)).unwrap();
        perturb(&mut model, |k| k == ParamKind::Router, seed);
        let l = layout(&random_ids(seed, len, 30));
        let mut g = Graph::new();
        let f = model.forward(&mut g, &[ModelInput::text(&l)], Mode::Mixture(Routing::Learned), PAD).unwrap();
        for b in &f.blocks {
            let s = g.value(b.s.unwrap());
            for r in 0..s.rows() {
                prop_assert!((s.at(r, 0) + s.at(r, 1) - 1.0).abs() <= 1e-6);
            }
        }
    }
}
