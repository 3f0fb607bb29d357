//! Invariant suite run by `msca selftest` and the acceptance target.
//!
//! Each property builds its own random inputs from a fixed seed and
//! returns a [`PropertyResult`]. References are written independently of
//! the code under test: the head shift below is a plain loop with zero
//! fill, so any other boundary rule in the library shows up as a failure.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    head_attention, msca_forward, project_out, qkv_project, token_shift, AttentionKind,
    AttentionParams, QkvSet, ScaleMode, ShiftConfig, Variant,
};
use crate::error::Result;
use crate::evalkit::model_flops;
use crate::tensor::{Boundary, Tape, Tensor};
use crate::vit::{
    encoder_block, gradient_check, init_params, model_forward, permute_frames, reverse_frames,
    Model, ModelConfig, ModelParams, ParamCheck, CHANNELS,
};

/// Outcome of one property.
#[derive(Clone, Debug, PartialEq)]
pub struct PropertyResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl PropertyResult {
    fn new(name: &'static str, passed: bool, detail: impl Into<String>) -> Self {
        PropertyResult {
            name,
            passed,
            detail: detail.into(),
        }
    }

    fn from_result(name: &'static str, r: Result<(bool, String)>) -> Self {
        match r {
            Ok((passed, detail)) => Self::new(name, passed, detail),
            Err(e) => Self::new(name, false, format!("error: {e}")),
        }
    }
}

/// Knobs for the suite. `boundary` is the rule handed to the code under
/// test; the references always zero-fill.
#[derive(Clone, Copy, Debug)]
pub struct SelftestOptions {
    pub boundary: Boundary,
    pub seed: u64,
}

impl Default for SelftestOptions {
    fn default() -> Self {
        SelftestOptions {
            boundary: Boundary::Zero,
            seed: 0,
        }
    }
}

/// Uniform `[-1, 1)` tensor.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Parameters with every entry uniform in `[-0.5, 0.5)`, so that no
/// block is close to the identity.
pub fn wide_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams<Tensor>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(
        init_params(cfg, seed)?
            .map(|t| Tensor::from_fn(t.shape(), |_| rng.random_range(-0.5..0.5))),
    )
}

fn wide_model(cfg: ModelConfig, seed: u64) -> Result<Model> {
    Ok(Model {
        params: wide_params(&cfg, seed)?,
        config: cfg,
    })
}

fn random_clip(cfg: &ModelConfig, seed: u64) -> Tensor {
    random_tensor(&[cfg.frames, CHANNELS, cfg.height, cfg.width], seed)
}

fn attention_params(dim: usize, heads: usize, seed: u64) -> AttentionParams<Tensor> {
    let w = |k| random_tensor(&[dim, dim], seed * 10 + k).map(|x| x * 0.5);
    let b = |k| Some(random_tensor(&[dim], seed * 10 + k).map(|x| x * 0.1));
    AttentionParams {
        heads,
        w_q: w(1),
        w_k: w(2),
        w_v: w(3),
        b_q: b(4),
        b_k: b(5),
        b_v: b(6),
        w_o: Some(w(7)),
        b_o: b(8),
    }
}

fn kv() -> Variant {
    Variant::Msca {
        targets: QkvSet::new(false, true, true),
        axis: crate::attention::ShiftAxis::Head,
    }
}

fn all_tokens(model: &Model, clip: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = model.params.register_constant(&mut tape);
    let out = model_forward(&mut tape, clip, &model.config, &p)?;
    Ok(tape.value(out.tokens).clone())
}

/// Every MSCA variant with zero shift reproduces the MSA model's final
/// tokens within 1e-12 on `inputs` random clips of the toy config.
pub fn zero_shift_degeneracy(inputs: usize, seed: u64) -> PropertyResult {
    PropertyResult::from_result(
        "zero_shift_degeneracy",
        (|| {
            let base_cfg = ModelConfig::toy(Variant::Msa).with_shift(0, 0);
            let params = wide_params(&base_cfg, seed)?;
            let base = Model {
                params: params.clone(),
                config: base_cfg.clone(),
            };
            let mut worst = 0.0f64;
            for i in 0..inputs {
                let clip = random_clip(&base_cfg, seed + 1 + i as u64);
                let want = all_tokens(&base, &clip)?;
                for v in Variant::msca_grid() {
                    let m = Model {
                        params: params.clone(),
                        config: base_cfg.clone().with_kinds(vec![v; base_cfg.depth]),
                    };
                    worst = worst.max(all_tokens(&m, &clip)?.max_abs_diff(&want));
                }
            }
            Ok((
                worst <= 1e-12,
                format!("max |diff| {worst:.3e} over {inputs} clips x 14 variants"),
            ))
        })(),
    )
}

/// `[T, R, D]` head outputs with heads `0..back` read from `t − 1` and
/// `back..back+fwd` from `t + 1`, zero outside the clip.
fn reference_head_shift(x: &Tensor, heads: usize, back: usize, fwd: usize) -> Tensor {
    let [t, r, d] = *x.shape() else {
        panic!("reference_head_shift needs [T, R, D]");
    };
    let hd = d / heads;
    Tensor::from_fn(x.shape(), |i| {
        let (f, row, c) = (i / (r * d), (i / d) % r, i % d);
        let head = c / hd;
        let src = if head < back {
            f.checked_sub(1)
        } else if head < back + fwd {
            Some(f + 1).filter(|&s| s < t)
        } else {
            Some(f)
        };
        src.map_or(0.0, |s| x.at(&[s, row, c]))
    })
}

/// MSCA-QKV equals per-frame MSA followed by a temporal shift of the head
/// outputs, within 1e-10, on the toy geometry.
pub fn msca_qkv_equivalence(inputs: usize, opts: SelftestOptions) -> PropertyResult {
    PropertyResult::from_result(
        "msca_qkv_equivalence",
        (|| {
            let cfg = ModelConfig::toy(Variant::Msa);
            let (t, r, d, h) = (cfg.frames, cfg.tokens(), cfg.dim, cfg.heads);
            let (back, fwd) = (1, 1);
            let s = ShiftConfig::heads(QkvSet::new(true, true, true), back, fwd)
                .with_boundary(opts.boundary);
            let mut worst = 0.0f64;
            for i in 0..inputs as u64 {
                let z = random_tensor(&[t, r, d], opts.seed * 100 + 2 * i);
                let p = attention_params(d, h, opts.seed * 100 + 2 * i + 1);
                let mut tape = Tape::new();
                let zv = tape.constant(z);
                let pv = p.register_constant(&mut tape);
                let got = msca_forward(&mut tape, zv, &pv, &s, ScaleMode::ModelDim)?;
                let (q, k, v) = qkv_project(&mut tape, zv, &pv)?;
                let heads = head_attention(&mut tape, q, k, v, h, ScaleMode::ModelDim)?;
                let shifted = reference_head_shift(tape.value(heads.output), h, back, fwd);
                let sv = tape.constant(shifted);
                let want = project_out(&mut tape, sv, &pv)?;
                worst = worst.max(tape.value(got).max_abs_diff(tape.value(want)));
            }
            Ok((
                worst <= 1e-10,
                format!("max |diff| {worst:.3e} over {inputs} inputs"),
            ))
        })(),
    )
}

/// The all-MSA model gives the same logits for any frame order, within
/// 1e-9 relative; an MSCA-KV model tells a clip from its reversal by more
/// than 1e-6.
pub fn frame_order(clips: usize, perms: usize, opts: SelftestOptions) -> PropertyResult {
    PropertyResult::from_result(
        "frame_permutation_invariance",
        (|| {
            let cfg = ModelConfig::toy(Variant::Msa);
            let base = wide_model(cfg.clone(), opts.seed)?;
            let mut kv_cfg = cfg.with_kinds(vec![kv(); 4]).with_shift(1, 1);
            kv_cfg.shift.boundary = opts.boundary;
            let msca = wide_model(kv_cfg, opts.seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let (mut worst_rel, mut least_kv) = (0.0f64, f64::INFINITY);
            for c in 0..clips as u64 {
                let clip = random_clip(&base.config, opts.seed + 1000 + c);
                let l = base.logits(&clip)?;
                for _ in 0..perms {
                    let mut perm: Vec<usize> = (0..base.config.frames).collect();
                    rand::seq::SliceRandom::shuffle(&mut perm[..], &mut rng);
                    let lp = base.logits(&permute_frames(&clip, &perm))?;
                    for (a, b) in l.data().iter().zip(lp.data()) {
                        worst_rel = worst_rel.max((a - b).abs() / (1.0 + a.abs()));
                    }
                }
                let k = msca.logits(&clip)?;
                let kr = msca.logits(&reverse_frames(&clip))?;
                least_kv = least_kv.min(k.max_abs_diff(&kr));
            }
            Ok((
                worst_rel <= 1e-9 && least_kv > 1e-6,
                format!("baseline max rel diff {worst_rel:.3e}; MSCA-KV min reversal diff {least_kv:.3e}"),
            ))
        })(),
    )
}

/// With `k` leading MSCA-KV blocks (shift 1/1, T = 8), bumping frame `t`
/// leaves pre-averaging features of frames with `|t′ − t| > k` exactly
/// unchanged and changes frame `t` itself.
pub fn receptive_field(opts: SelftestOptions) -> PropertyResult {
    PropertyResult::from_result(
        "temporal_receptive_field",
        (|| {
            let mut failures = Vec::new();
            for k in 1..=3 {
                let mut kinds = vec![kv(); k];
                kinds.extend(vec![Variant::Msa; 4 - k]);
                let mut cfg = ModelConfig::toy(Variant::Msa)
                    .with_kinds(kinds)
                    .with_shift(1, 1);
                cfg.shift.boundary = opts.boundary;
                let model = wide_model(cfg.clone(), opts.seed + 16)?;
                let clip = random_clip(&cfg, opts.seed + 17);
                let base = model.frame_features(&clip)?;
                let plane = CHANNELS * cfg.height * cfg.width;
                for t0 in [0, 3, cfg.frames - 1] {
                    let mut bumped = clip.clone();
                    for v in &mut bumped.data_mut()[t0 * plane..(t0 + 1) * plane] {
                        *v += 0.5;
                    }
                    let moved = model.frame_features(&bumped)?;
                    for t in 0..cfg.frames {
                        let diff = base.index_leading(t).max_abs_diff(&moved.index_leading(t));
                        let far = t.abs_diff(t0) > k;
                        if (far && diff != 0.0) || (t == t0 && diff == 0.0) {
                            failures.push(format!("k={k} bump={t0} frame={t} diff={diff:.3e}"));
                        }
                    }
                }
            }
            let detail = if failures.is_empty() {
                "k = 1, 2, 3; bumps at first, middle and last frame".to_string()
            } else {
                failures.join("; ")
            };
            Ok((failures.is_empty(), detail))
        })(),
    )
}

/// Variants covered by [`gradient_integrity`].
pub fn gradient_variants() -> Vec<Variant> {
    let mut v = vec![Variant::Msa, Variant::TokenShift];
    v.extend(Variant::msca_grid());
    v
}

/// Finite-difference reports on the tiny config for every block kind.
pub fn gradient_reports(opts: SelftestOptions) -> Result<Vec<(Variant, Vec<ParamCheck>)>> {
    gradient_variants()
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            let mut cfg = ModelConfig::tiny(v).with_shift(1, 1);
            cfg.shift.boundary = opts.boundary;
            let model = wide_model(cfg.clone(), opts.seed + 40 + i as u64)?;
            let clip = random_clip(&cfg, opts.seed + 80 + i as u64);
            Ok((v, gradient_check(&model, &clip, 1, 1e-5)?))
        })
        .collect()
}

/// Summarises gradient reports; `strict` applies the plain relative
/// bound to every element, otherwise mismatches below finite-difference
/// resolution are accepted.
pub fn gradient_summary(reports: &[(Variant, Vec<ParamCheck>)], strict: bool) -> PropertyResult {
    let total: usize = reports.iter().map(|(_, r)| r.len()).sum();
    let mut failed = Vec::new();
    let mut worst = 0.0f64;
    for (v, checks) in reports {
        for c in checks {
            if !c.null_direction {
                worst = worst.max(c.max_rel_err);
            }
            let ok = if strict {
                c.passed()
            } else {
                c.passed_to_resolution()
            };
            if !ok {
                failed.push(format!("{v}:{} ({:.2e})", c.name, c.max_rel_err));
            }
        }
    }
    let mut detail = format!(
        "{}/{total} tensors pass over {} models, worst rel err {worst:.2e}",
        total - failed.len(),
        reports.len()
    );
    if !failed.is_empty() {
        detail.push_str("; failing: ");
        detail.push_str(&failed.join(", "));
    }
    PropertyResult::new("gradient_integrity", failed.is_empty(), detail)
}

/// Exact equality of attention multiply-adds across MSA, TokenShift and
/// the fourteen MSCA variants on `configs` random geometries, linearity
/// in T, and agreement of the closed form with a traced forward pass.
pub fn flop_parity(configs: usize, seed: u64) -> PropertyResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kinds = vec![Variant::Msa, Variant::TokenShift];
    kinds.extend(Variant::msca_grid());
    let mut failures = Vec::new();
    for _ in 0..configs {
        let heads = [1, 2, 4, 8][rng.random_range(0..4)];
        let dim = heads * rng.random_range(1..9);
        let patch = rng.random_range(1..5);
        let mut cfg = ModelConfig::tiny(Variant::Msa);
        cfg.frames = rng.random_range(1..17);
        cfg.patch = patch;
        cfg.height = patch * rng.random_range(1..9);
        cfg.width = patch * rng.random_range(1..9);
        cfg.heads = heads;
        cfg.dim = dim;
        let attn = |cfg: &ModelConfig, v: Variant| {
            crate::attention::attention_flops(
                AttentionKind::from(v),
                cfg.frames,
                cfg.patches(),
                cfg.dim,
                cfg.heads,
            )
        };
        let base = attn(&cfg, Variant::Msa);
        for &v in &kinds {
            let a = attn(&cfg, v);
            if a != base {
                failures.push(format!("{v} differs at {cfg:?}"));
            }
            let whole = model_flops(&cfg.clone().with_kinds(vec![v; cfg.depth]));
            if whole != model_flops(&cfg) {
                failures.push(format!("model total for {v} differs"));
            }
        }
        let mut doubled = cfg.clone();
        doubled.frames *= 2;
        if attn(&doubled, Variant::Msa).attention() != 2 * base.attention() {
            failures.push(format!(
                "doubling T={} does not double attention",
                cfg.frames
            ));
        }
    }
    let traced = (|| -> Result<bool> {
        let cfg = ModelConfig::tiny(kv()).with_shift(1, 1);
        let model = Model::new(cfg.clone())?;
        let mut tape = Tape::new();
        let p = model.params.register_constant(&mut tape);
        model_forward(&mut tape, &random_clip(&cfg, seed), &cfg, &p)?;
        Ok(tape.macs() == model_flops(&cfg).total)
    })();
    if !matches!(traced, Ok(true)) {
        failures.push("closed form disagrees with traced multiply-adds".into());
    }
    let detail = if failures.is_empty() {
        format!(
            "{configs} configs x {} kinds equal; T-linear; traced count agrees",
            kinds.len()
        )
    } else {
        failures.join("; ")
    };
    PropertyResult::new("flop_parity", failures.is_empty(), detail)
}

/// `token_shift` leaves patch tokens bitwise alone, and a TokenShift
/// block with zero shift equals the MSA block within 1e-12.
pub fn tokenshift_semantics(opts: SelftestOptions) -> PropertyResult {
    PropertyResult::from_result(
        "tokenshift_semantics",
        (|| {
            let z = random_tensor(&[8, 17, 64], opts.seed + 7);
            let mut tape = Tape::new();
            let zv = tape.constant(z.clone());
            let sv = token_shift(&mut tape, zv, 8, 8, opts.boundary)?;
            let shifted = tape.value(sv).clone();
            let mut patches_same = true;
            let mut cls_moved = false;
            for t in 0..8 {
                for r in 0..17 {
                    for c in 0..64 {
                        let (a, b) = (shifted.at(&[t, r, c]), z.at(&[t, r, c]));
                        if r > 0 && a.to_bits() != b.to_bits() {
                            patches_same = false;
                        }
                        if r == 0 && a != b {
                            cls_moved = true;
                        }
                    }
                }
            }
            let cfg = ModelConfig::toy(Variant::TokenShift).with_shift(0, 0);
            let params = wide_params(&cfg, opts.seed + 8)?;
            let mut tape = Tape::new();
            let p = params.register_constant(&mut tape);
            let zv = tape.constant(z);
            let ts = encoder_block(&mut tape, zv, Variant::TokenShift, &p.blocks[0], &cfg)?;
            let msa = encoder_block(&mut tape, zv, Variant::Msa, &p.blocks[0], &cfg)?;
            let diff = tape.value(ts).max_abs_diff(tape.value(msa));
            Ok((
                patches_same && cls_moved && diff <= 1e-12,
                format!(
                    "patch tokens bitwise equal: {patches_same}; zero-shift block diff {diff:.3e}"
                ),
            ))
        })(),
    )
}

/// The whole suite at selftest sizes.
pub fn run_selftest(opts: SelftestOptions) -> Vec<PropertyResult> {
    let grads = match gradient_reports(opts) {
        Ok(r) => gradient_summary(&r, false),
        Err(e) => PropertyResult::new("gradient_integrity", false, format!("error: {e}")),
    };
    vec![
        zero_shift_degeneracy(3, opts.seed),
        msca_qkv_equivalence(5, opts),
        frame_order(3, 3, opts),
        receptive_field(opts),
        grads,
        flop_parity(5, opts.seed),
        tokenshift_semantics(opts),
    ]
}
