//! Frozen synthetic image encoder, the mapping into model space and the
//! retrieval head that reads caption end-token states.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeedTree;
use crate::tensor::{Graph, ParamStore, Tensor, Var};

pub const N_COLORS: usize = 8;
pub const N_SHAPES: usize = 8;
pub const N_COUNTS: usize = 4;

pub const TAU_MIN: f32 = 0.01;
pub const TAU_MAX: f32 = 1.0;

/// Relative size of the entity-specific perturbation in each soft token.
const PERTURBATION: f32 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Attributes {
    /// Index into the color list, `0..8`.
    pub color: usize,
    /// Index into the shape list, `0..8`.
    pub shape: usize,
    /// Object count, `1..=4`.
    pub count: usize,
}

impl Attributes {
    pub fn validate(&self) -> Result<()> {
        if self.color >= N_COLORS || self.shape >= N_SHAPES || !(1..=N_COUNTS).contains(&self.count) {
            return Err(Error::Contract(format!("invalid attributes {self:?}")));
        }
        Ok(())
    }

    /// Dense index in `0..256`.
    pub fn index(&self) -> usize {
        (self.color * N_SHAPES + self.shape) * N_COUNTS + self.count - 1
    }

    pub fn from_index(i: usize) -> Self {
        Self {
            color: i / (N_SHAPES * N_COUNTS),
            shape: (i / N_COUNTS) % N_SHAPES,
            count: i % N_COUNTS + 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticImage {
    pub entity_id: usize,
    pub attributes: Attributes,
    pub noise_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisualEncoding {
    pub soft_tokens: Tensor,
    pub global: Vec<f32>,
}

/// The frozen encoder. Holds no trainable state; everything is derived from
/// the world seed.
#[derive(Clone, Debug)]
pub struct Encoder {
    seeds: SeedTree,
    n_tokens: usize,
    d_img: usize,
    /// Orthonormal global directions: 8 colors, then 8 shapes, then 4 counts.
    global_basis: Vec<Vec<f32>>,
}

impl Encoder {
    pub fn new(world_seed: u64, n_tokens: usize, d_img: usize) -> Result<Self> {
        let n_dirs = N_COLORS + N_SHAPES + N_COUNTS;
        if d_img < n_dirs {
            return Err(Error::Config(format!("d_img must be at least {n_dirs}, got {d_img}")));
        }
        let seeds = SeedTree::new(world_seed).child("encoder");
        let mut basis: Vec<Vec<f32>> = Vec::with_capacity(n_dirs);
        let mut attempt = 0u64;
        while basis.len() < n_dirs {
            let raw = seeds.normal_vec("global", basis.len() as u64 + 1000 * attempt, d_img, 1.0);
            let mut v: Vec<f64> = raw.iter().map(|&x| x as f64).collect();
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, &y)| x * y as f64).sum();
                v.iter_mut().zip(b).for_each(|(x, &y)| *x -= dot * y as f64);
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-3 {
                attempt += 1;
                continue;
            }
            basis.push(v.iter().map(|x| (x / norm) as f32).collect());
        }
        Ok(Self {
            seeds,
            n_tokens,
            d_img,
            global_basis: basis,
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn d_img(&self) -> usize {
        self.d_img
    }

    /// Unit-norm sum of the color, shape and count directions.
    pub fn global(&self, a: &Attributes) -> Vec<f32> {
        let dirs = [
            &self.global_basis[a.color],
            &self.global_basis[N_COLORS + a.shape],
            &self.global_basis[N_COLORS + N_SHAPES + a.count - 1],
        ];
        let sum: Vec<f64> = (0..self.d_img)
            .map(|i| dirs.iter().map(|d| d[i] as f64).sum())
            .collect();
        let norm = sum.iter().map(|x| x * x).sum::<f64>().sqrt();
        sum.iter().map(|x| (x / norm) as f32).collect()
    }

    /// Which attribute soft token `t` carries: 0 color, 1 shape, 2 count.
    pub fn token_attribute(&self, t: usize) -> usize {
        t * 3 / self.n_tokens.max(1)
    }

    pub fn encode(&self, img: &SyntheticImage) -> Result<VisualEncoding> {
        img.attributes.validate()?;
        let (n, d) = (self.n_tokens, self.d_img);
        let a = img.attributes;
        let values = [a.color, a.shape, a.count - 1];
        let labels = ["color", "shape", "count"];
        let code = self.seeds.normal_vec("noise", img.noise_seed, d, PERTURBATION / (d as f32).sqrt());
        let mut data = Vec::with_capacity(n * d);
        for t in 0..n {
            let which = self.token_attribute(t);
            let idx = (values[which] * n + t) as u64;
            let dir = self.seeds.normal_vec(labels[which], idx, d, 1.0 / (d as f32).sqrt());
            data.extend(dir.iter().zip(&code).map(|(x, e)| x + e));
        }
        Ok(VisualEncoding {
            soft_tokens: Tensor::new(vec![n, d], data)?,
            global: self.global(&a),
        })
    }
}

/// `encode_image` as a free function of the image and world seed.
pub fn encode_image(img: &SyntheticImage, world_seed: u64, n_tokens: usize, d_img: usize) -> Result<VisualEncoding> {
    Encoder::new(world_seed, n_tokens, d_img)?.encode(img)
}

/// Soft tokens `[n × d_img]` through the visual mapping network into `[n × d_model]`.
pub fn map_to_lm(g: &mut Graph, store: &ParamStore, soft: Var) -> Result<Var> {
    let vmn = g.param(store, "visual.mapping")?;
    g.matmul(soft, vmn)
}

/// `h_e [rows × d_model] · P [d_model × d_img]`.
pub fn project_end_token(g: &mut Graph, store: &ParamStore, h_e: Var) -> Result<Var> {
    let proj = g.param(store, "retrieval.proj")?;
    g.matmul(h_e, proj)
}

/// Current temperature, clamped to its allowed range.
pub fn tau(store: &ParamStore) -> Result<f32> {
    let log_tau = store.get("retrieval.log_tau")?.data()[0];
    Ok(log_tau.exp().clamp(TAU_MIN, TAU_MAX))
}

/// Pulls the stored log-temperature back into range after an optimizer step.
pub fn clamp_tau(store: &mut ParamStore) -> Result<()> {
    let lt = store.get("retrieval.log_tau")?.data()[0];
    let clamped = lt.clamp(TAU_MIN.ln(), TAU_MAX.ln());
    if clamped != lt {
        store.assign("retrieval.log_tau", Tensor::vector(vec![clamped]))?;
    }
    Ok(())
}

/// `1/τ` as a graph node, differentiable through the log-temperature while
/// it lies inside the clamp range.
pub fn inverse_tau(g: &mut Graph, store: &ParamStore) -> Result<Var> {
    let lt = g.param(store, "retrieval.log_tau")?;
    let v = g.value(lt).data()[0];
    if v < TAU_MIN.ln() || v > TAU_MAX.ln() {
        let c = v.clamp(TAU_MIN.ln(), TAU_MAX.ln());
        return Ok(g.constant(Tensor::vector(vec![(-c).exp()])));
    }
    let neg = g.scale(lt, -1.0)?;
    g.exp(neg)
}

/// Cosine similarities between projected caption ends and image globals, `N × M`.
pub fn similarity(g: &mut Graph, store: &ParamStore, h_e: Var, globals: &[Vec<f32>]) -> Result<Var> {
    let p = project_end_token(g, store, h_e)?;
    let p = g.normalize_rows(p)?;
    let gl = g.constant(Tensor::from_rows(globals)?);
    let gl = g.normalize_rows(gl)?;
    g.matmul_t(p, gl)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig};
    use crate::tensor::cosine_similarity;

    fn img(entity: usize, a: Attributes, noise: u64) -> SyntheticImage {
        SyntheticImage {
            entity_id: entity,
            attributes: a,
            noise_seed: noise,
        }
    }

    fn attrs(color: usize, shape: usize, count: usize) -> Attributes {
        Attributes { color, shape, count }
    }

    #[test]
    fn encoding_is_deterministic() {
        let i = img(3, attrs(1, 2, 3), 77);
        let a = encode_image(&i, 5, 32, 64).unwrap();
        let b = encode_image(&i, 5, 32, 64).unwrap();
        assert_eq!(a.soft_tokens.to_le_bytes(), b.soft_tokens.to_le_bytes());
        assert_eq!(a.global, b.global);
    }

    #[test]
    fn global_depends_only_on_attributes() {
        let enc = Encoder::new(5, 32, 64).unwrap();
        let a = enc.encode(&img(1, attrs(4, 4, 2), 10)).unwrap();
        let b = enc.encode(&img(2, attrs(4, 4, 2), 11)).unwrap();
        assert_ne!(a.soft_tokens, b.soft_tokens);
        let cos = cosine_similarity(&a.global, &b.global).unwrap();
        assert!((cos - 1.0).abs() < 1e-6);
    }

    #[test]
    fn distinct_triples_are_separated() {
        let enc = Encoder::new(9, 32, 64).unwrap();
        let triples: Vec<Attributes> = (0..256).step_by(4).map(Attributes::from_index).collect();
        assert_eq!(triples.len(), 64);
        let gl: Vec<Vec<f32>> = triples.iter().map(|a| enc.global(a)).collect();
        for i in 0..gl.len() {
            let norm = gl[i].iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
            for j in 0..i {
                assert!(cosine_similarity(&gl[i], &gl[j]).unwrap() < 0.8);
            }
        }
    }

    #[test]
    fn invalid_attributes_are_rejected() {
        let enc = Encoder::new(0, 4, 64).unwrap();
        assert!(enc.encode(&img(0, attrs(8, 0, 1), 0)).is_err());
        assert!(enc.encode(&img(0, attrs(0, 0, 0), 0)).is_err());
        assert!(Encoder::new(0, 4, 8).is_err());
    }

    #[test]
    fn attribute_index_round_trips() {
        for i in 0..256 {
            assert_eq!(Attributes::from_index(i).index(), i);
            Attributes::from_index(i).validate().unwrap();
        }
    }

    fn small_model() -> Model {
        Model::new(ModelConfig {
            d_model: 8,
            n_blocks: 1,
            n_heads: 2,
            vocab_size: 12,
            max_seq_len: 8,
            ffn_dim: 8,
            d_img: 8,
            img_token_count: 2,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn zero_and_identity_mapping() {
        let mut m = small_model();
        let soft = Tensor::new(vec![2, 8], (0..16).map(|i| i as f32 - 3.0).collect()).unwrap();
        m.params.assign("visual.mapping", Tensor::zeros(&[8, 8])).unwrap();
        let mut g = Graph::new();
        let s = g.constant(soft.clone());
        let out = map_to_lm(&mut g, &m.params, s).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));

        m.params.assign("visual.mapping", Tensor::identity(8)).unwrap();
        let mut g = Graph::new();
        let s = g.constant(soft.clone());
        let out = map_to_lm(&mut g, &m.params, s).unwrap();
        assert_eq!(g.value(out), &soft);
    }

    #[test]
    fn projection_identity_and_zero() {
        let mut m = small_model();
        let h = Tensor::new(vec![1, 8], (0..8).map(|i| i as f32 * 0.5 - 1.0).collect()).unwrap();
        m.params.assign("retrieval.proj", Tensor::identity(8)).unwrap();
        let mut g = Graph::new();
        let hv = g.constant(h.clone());
        let out = project_end_token(&mut g, &m.params, hv).unwrap();
        assert_eq!(g.value(out), &h);

        m.params.assign("retrieval.proj", Tensor::zeros(&[8, 8])).unwrap();
        let mut g = Graph::new();
        let hv = g.constant(h);
        let gl = vec![vec![1.0; 8]];
        assert!(matches!(
            similarity(&mut g, &m.params, hv, &gl),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn similarity_matches_pairwise_cosine_loop() {
        let m = small_model();
        let seeds = SeedTree::new(4);
        let h = Tensor::new(vec![4, 8], seeds.normal_vec("h", 0, 32, 1.0)).unwrap();
        let globals: Vec<Vec<f32>> = (0..4).map(|j| seeds.normal_vec("g", j, 8, 1.0)).collect();
        let mut g = Graph::new();
        let hv = g.constant(h.clone());
        let sims = similarity(&mut g, &m.params, hv, &globals).unwrap();
        let sims = g.value(sims).clone();
        let proj = m.params.get("retrieval.proj").unwrap();
        for i in 0..4 {
            let p: Vec<f32> = (0..8)
                .map(|c| (0..8).map(|k| h.at(i, k) * proj.at(k, c)).sum())
                .collect();
            for (j, gl) in globals.iter().enumerate() {
                let expected = cosine_similarity(&p, gl).unwrap();
                assert!((sims.at(i, j) - expected).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn tau_starts_at_default_and_is_clamped() {
        let mut m = small_model();
        assert!((tau(&m.params).unwrap() - 0.07).abs() < 1e-6);
        m.params.assign("retrieval.log_tau", Tensor::vector(vec![-10.0])).unwrap();
        assert_eq!(tau(&m.params).unwrap(), TAU_MIN);
        clamp_tau(&mut m.params).unwrap();
        let lt = m.params.get("retrieval.log_tau").unwrap().data()[0];
        assert!((lt.exp() - TAU_MIN).abs() < 1e-6);
        m.params.assign("retrieval.log_tau", Tensor::vector(vec![3.0])).unwrap();
        clamp_tau(&mut m.params).unwrap();
        assert!((tau(&m.params).unwrap() - TAU_MAX).abs() < 1e-6);
    }
}
