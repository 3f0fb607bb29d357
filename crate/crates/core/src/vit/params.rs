use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::ModelConfig;
use crate::attention::AttentionParams;
use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

/// Weights of one encoder block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<P> {
    pub ln1_gamma: P,
    pub ln1_beta: P,
    pub attn: AttentionParams<P>,
    pub ln2_gamma: P,
    pub ln2_beta: P,
    pub mlp_w1: P,
    pub mlp_b1: P,
    pub mlp_w2: P,
    pub mlp_b2: P,
}

/// All model weights. `P` is [`Tensor`] at rest and [`Var`] on a tape.
///
/// [`ModelParams::named`], [`ModelParams::tensors_mut`] and
/// [`ModelParams::try_map`] all walk the tree in the same order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<P> {
    /// `E`, `[3P² × D]`.
    pub patch_embed: P,
    /// `E_pos`, `[(N+1) × D]`, shared by every frame.
    pub pos_embed: P,
    /// `c₀`, `[D]`, broadcast to every frame.
    pub cls_token: P,
    pub blocks: Vec<BlockParams<P>>,
    pub final_ln_gamma: P,
    pub final_ln_beta: P,
    pub head_w: P,
    pub head_b: P,
}

impl<P> BlockParams<P> {
    fn named_into<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a P)>) {
        out.push((format!("{prefix}.ln1_gamma"), &self.ln1_gamma));
        out.push((format!("{prefix}.ln1_beta"), &self.ln1_beta));
        for (n, p) in self.attn.named() {
            out.push((format!("{prefix}.attn.{n}"), p));
        }
        out.push((format!("{prefix}.ln2_gamma"), &self.ln2_gamma));
        out.push((format!("{prefix}.ln2_beta"), &self.ln2_beta));
        out.push((format!("{prefix}.mlp_w1"), &self.mlp_w1));
        out.push((format!("{prefix}.mlp_b1"), &self.mlp_b1));
        out.push((format!("{prefix}.mlp_w2"), &self.mlp_w2));
        out.push((format!("{prefix}.mlp_b2"), &self.mlp_b2));
    }

    fn tensors_mut_into<'a>(&'a mut self, out: &mut Vec<&'a mut P>) {
        out.push(&mut self.ln1_gamma);
        out.push(&mut self.ln1_beta);
        out.extend(self.attn.tensors_mut());
        out.push(&mut self.ln2_gamma);
        out.push(&mut self.ln2_beta);
        out.push(&mut self.mlp_w1);
        out.push(&mut self.mlp_b1);
        out.push(&mut self.mlp_w2);
        out.push(&mut self.mlp_b2);
    }

    pub fn try_map<Q, E>(
        &self,
        f: &mut impl FnMut(&P) -> Result<Q, E>,
    ) -> Result<BlockParams<Q>, E> {
        Ok(BlockParams {
            ln1_gamma: f(&self.ln1_gamma)?,
            ln1_beta: f(&self.ln1_beta)?,
            attn: self.attn.try_map(f)?,
            ln2_gamma: f(&self.ln2_gamma)?,
            ln2_beta: f(&self.ln2_beta)?,
            mlp_w1: f(&self.mlp_w1)?,
            mlp_b1: f(&self.mlp_b1)?,
            mlp_w2: f(&self.mlp_w2)?,
            mlp_b2: f(&self.mlp_b2)?,
        })
    }
}

impl<P> ModelParams<P> {
    pub fn named(&self) -> Vec<(String, &P)> {
        let mut out = vec![
            ("patch_embed".to_string(), &self.patch_embed),
            ("pos_embed".to_string(), &self.pos_embed),
            ("cls_token".to_string(), &self.cls_token),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            b.named_into(&format!("blocks.{i}"), &mut out);
        }
        out.push(("final_ln_gamma".into(), &self.final_ln_gamma));
        out.push(("final_ln_beta".into(), &self.final_ln_beta));
        out.push(("head_w".into(), &self.head_w));
        out.push(("head_b".into(), &self.head_b));
        out
    }

    pub fn tensors(&self) -> Vec<&P> {
        self.named().into_iter().map(|(_, p)| p).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut P> {
        let mut out = vec![
            &mut self.patch_embed,
            &mut self.pos_embed,
            &mut self.cls_token,
        ];
        for b in &mut self.blocks {
            b.tensors_mut_into(&mut out);
        }
        out.push(&mut self.final_ln_gamma);
        out.push(&mut self.final_ln_beta);
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn try_map<Q, E>(
        &self,
        f: &mut impl FnMut(&P) -> Result<Q, E>,
    ) -> Result<ModelParams<Q>, E> {
        Ok(ModelParams {
            patch_embed: f(&self.patch_embed)?,
            pos_embed: f(&self.pos_embed)?,
            cls_token: f(&self.cls_token)?,
            blocks: self
                .blocks
                .iter()
                .map(|b| b.try_map(f))
                .collect::<Result<_, E>>()?,
            final_ln_gamma: f(&self.final_ln_gamma)?,
            final_ln_beta: f(&self.final_ln_beta)?,
            head_w: f(&self.head_w)?,
            head_b: f(&self.head_b)?,
        })
    }

    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> ModelParams<Q> {
        self.try_map(&mut |p| Ok::<_, std::convert::Infallible>(f(p)))
            .unwrap_or_else(|e| match e {})
    }
}

impl ModelParams<Tensor> {
    /// Records every weight on `tape` as a tracked leaf.
    pub fn register(&self, tape: &mut Tape) -> ModelParams<Var> {
        self.map(|t| tape.leaf(t.clone()))
    }

    /// Records every weight on `tape` as a constant.
    pub fn register_constant(&self, tape: &mut Tape) -> ModelParams<Var> {
        self.map(|t| tape.constant(t.clone()))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn zeros_like(&self) -> ModelParams<Tensor> {
        self.map(|t| Tensor::zeros(t.shape()))
    }
}

/// Kind of initial value a parameter receives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Init {
    Normal,
    Zeros,
    Ones,
}

/// Shapes and initializers for `cfg`, in tree order.
pub(crate) fn layout(cfg: &ModelConfig) -> ModelParams<(Vec<usize>, Init)> {
    let d = cfg.dim;
    let hidden = cfg.mlp_hidden();
    let w = |r: usize, c: usize| (vec![r, c], Init::Normal);
    let zeros = |n: usize| (vec![n], Init::Zeros);
    let ones = |n: usize| (vec![n], Init::Ones);
    let opt = |on: bool, v: (Vec<usize>, Init)| on.then_some(v);
    let block = || BlockParams {
        ln1_gamma: ones(d),
        ln1_beta: zeros(d),
        attn: AttentionParams {
            heads: cfg.heads,
            w_q: w(d, d),
            w_k: w(d, d),
            w_v: w(d, d),
            b_q: opt(cfg.attention.qkv_bias, zeros(d)),
            b_k: opt(cfg.attention.qkv_bias, zeros(d)),
            b_v: opt(cfg.attention.qkv_bias, zeros(d)),
            w_o: opt(cfg.attention.out_proj, w(d, d)),
            b_o: opt(cfg.attention.out_proj, zeros(d)),
        },
        ln2_gamma: ones(d),
        ln2_beta: zeros(d),
        mlp_w1: w(d, hidden),
        mlp_b1: zeros(hidden),
        mlp_w2: w(hidden, d),
        mlp_b2: zeros(d),
    };
    ModelParams {
        patch_embed: w(cfg.patch_dim(), d),
        pos_embed: w(cfg.tokens(), d),
        cls_token: (vec![d], Init::Normal),
        blocks: (0..cfg.depth).map(|_| block()).collect(),
        final_ln_gamma: ones(d),
        final_ln_beta: zeros(d),
        head_w: w(d, cfg.classes),
        head_b: zeros(cfg.classes),
    }
}

/// Standard deviation of the truncated-normal weight initializer.
pub const INIT_STD: f64 = 0.02;

/// Normal(0, σ²) truncated to `[−2σ, 2σ]` by rejection.
fn truncated_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// Fresh weights for `cfg`: truncated-normal (σ = 0.02) matrices,
/// embeddings and class token; zero biases; unit layer-norm gains.
/// Identical seeds give bitwise-identical weights.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams<Tensor>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(layout(cfg).map(|(shape, init)| match init {
        Init::Normal => Tensor::from_fn(shape, |_| truncated_normal(&mut rng, INIT_STD)),
        Init::Zeros => Tensor::zeros(shape),
        Init::Ones => Tensor::ones(shape),
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::Variant;

    #[test]
    fn same_seed_same_params() {
        let cfg = ModelConfig::tiny(Variant::Msa);
        assert_eq!(init_params(&cfg, 5).unwrap(), init_params(&cfg, 5).unwrap());
        assert_ne!(init_params(&cfg, 5).unwrap(), init_params(&cfg, 6).unwrap());
    }

    #[test]
    fn init_statistics() {
        let cfg = ModelConfig::toy(Variant::Msa);
        let p = init_params(&cfg, 1).unwrap();
        let w = p.blocks[0].attn.w_q.data();
        assert!(w.iter().all(|v| v.abs() <= 2.0 * INIT_STD));
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let sd = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        // truncation at 2σ shrinks the spread to about 0.88σ
        assert!((sd / INIT_STD - 0.88).abs() < 0.03, "sd {sd}");
        assert!(p.blocks[0]
            .attn
            .b_q
            .as_ref()
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(p.final_ln_gamma.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn tree_orders_agree() {
        let cfg = ModelConfig::tiny("msca-kv".parse().unwrap());
        let mut p = init_params(&cfg, 2).unwrap();
        let names: Vec<String> = p.named().into_iter().map(|(n, _)| n).collect();
        let by_name: Vec<Tensor> = p.named().into_iter().map(|(_, t)| t.clone()).collect();
        let by_mut: Vec<Tensor> = p.tensors_mut().into_iter().map(|t| t.clone()).collect();
        let mut mapped = Vec::new();
        p.map(|t| mapped.push(t.clone()));
        assert_eq!(by_name, by_mut);
        assert_eq!(by_name, mapped);
        assert_eq!(names[0], "patch_embed");
        assert!(names.contains(&"blocks.1.attn.w_o".to_string()));
        let mut uniq = names.clone();
        uniq.dedup();
        assert_eq!(uniq.len(), names.len());
    }

    #[test]
    fn optional_tensors_follow_options() {
        let mut cfg = ModelConfig::tiny(Variant::Msa);
        cfg.attention.qkv_bias = false;
        cfg.attention.out_proj = false;
        let p = init_params(&cfg, 0).unwrap();
        assert!(p.blocks[0].attn.b_q.is_none() && p.blocks[0].attn.w_o.is_none());
        assert_eq!(p.blocks[0].attn.named().len(), 3);
    }
}
