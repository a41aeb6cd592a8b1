//! Finite-difference verification of every differentiable building block
//! and of the tiny end-to-end model, at f64.
//!
//! Pass rule per element: |analytic - numeric| <= 1e-7, or relative error
//! < 1e-4. Central differences with step 1e-5. Each op runs under 5 seeds;
//! the report keeps the worst relative error over elements above the
//! absolute floor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId};
use crate::data::Image;
use crate::error::{Error, Result};
use crate::model::{build_variant, Model, ModelConfig, SegHead, Variant};
use crate::nn::{
    accumulate_param_grads, param_node, trunc_normal, Mlp, Msa, ParamStore, ResidualBlock, Scope,
    TransformerModule,
};
use crate::seeding::mix_seed;
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_FLOOR: f64 = 1e-7;
pub const N_SEEDS: u64 = 5;

#[derive(Clone, Debug)]
pub struct OpReport {
    pub name: String,
    pub max_rel_err: f64,
    pub n_checked: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, Default)]
pub struct SuiteConfig {
    pub seed: u64,
    /// Fault-injection hook: corrupt the analytic gradients of the named op
    /// so its check must fail. Test-only.
    pub perturb_op: Option<String>,
}

struct CaseResult {
    max_rel: f64,
    checked: usize,
    max_analytic: f64,
}

impl CaseResult {
    fn empty() -> Self {
        CaseResult {
            max_rel: 0.0,
            checked: 0,
            max_analytic: 0.0,
        }
    }

    fn merge(&mut self, other: CaseResult) {
        self.max_rel = self.max_rel.max(other.max_rel);
        self.checked += other.checked;
        self.max_analytic = self.max_analytic.max(other.max_analytic);
    }
}

fn compare(analytic: f64, numeric: f64, result: &mut CaseResult) {
    result.max_analytic = result.max_analytic.max(analytic.abs());
    let abs = (analytic - numeric).abs();
    if abs <= ABS_FLOOR {
        result.checked += 1;
        return;
    }
    let rel = abs / analytic.abs().max(numeric.abs());
    result.max_rel = result.max_rel.max(rel);
    result.checked += 1;
}

type BuildFn<'a> = dyn Fn(&mut Graph<f64>, &ParamStore<f64>, &[NodeId]) -> Result<NodeId> + 'a;

/// Check d(objective)/d(every parameter element and input element) for a
/// store-driven computation. `build` must return a scalar node.
fn check_store_case(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    build: &BuildFn,
    perturb: bool,
) -> Result<CaseResult> {
    let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let obj = build(&mut g, store, &ids)?;
        if g.value(obj).numel() != 1 {
            return Err(Error::dim(
                "gradient-check objective must be scalar".to_string(),
            ));
        }
        Ok(g.value(obj).data()[0])
    };

    // analytic pass
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let obj = build(&mut g, store, &ids)?;
    let grads = g.backward(obj)?;
    let mut astore = store.cast::<f64>();
    accumulate_param_grads(&g, &grads, &mut astore)?;
    let mut input_grads: Vec<Tensor<f64>> = Vec::new();
    for (&id, t) in ids.iter().zip(inputs.iter()) {
        input_grads.push(match grads.get(id) {
            Some(gr) => gr.clone(),
            None => Tensor::zeros(t.shape()),
        });
    }

    let mut result = CaseResult::empty();
    let mut first = perturb;
    // parameters
    let names: Vec<String> = store.names().map(|s| s.to_string()).collect();
    for name in &names {
        let base = store.get(name)?.clone();
        for j in 0..base.numel() {
            let mut analytic = astore.grad(name)?.data()[j];
            if first {
                analytic = 3.0 * analytic + 1e-2;
                first = false;
            }
            let mut plus = store.cast::<f64>();
            let mut minus = store.cast::<f64>();
            let mut tp = base.clone();
            tp.data_mut()[j] += FD_STEP;
            plus.set(name, tp)?;
            let mut tm = base.clone();
            tm.data_mut()[j] -= FD_STEP;
            minus.set(name, tm)?;
            let numeric = (eval(&plus, inputs)? - eval(&minus, inputs)?) / (2.0 * FD_STEP);
            compare(analytic, numeric, &mut result);
        }
    }
    // inputs
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let mut analytic = input_grads[i].data()[j];
            if first {
                analytic = 3.0 * analytic + 1e-2;
                first = false;
            }
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric = (eval(store, &plus)? - eval(store, &minus)?) / (2.0 * FD_STEP);
            compare(analytic, numeric, &mut result);
        }
    }
    Ok(result)
}

/// Check d(loss)/d(params) of a built model on one sample, over a sampled
/// fraction of parameter elements.
fn check_model_case(
    model: &mut Model<f64>,
    pet: &Image,
    ct: &Image,
    mask_bits: &[u8],
    fraction: f64,
    rng: &mut ChaCha8Rng,
    perturb: bool,
) -> Result<CaseResult> {
    let loss_of = |model: &Model<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let out = model.forward(&mut g, pet, ct)?;
        let loss = g.cross_entropy_probs(out, mask_bits)?;
        Ok(g.value(loss).data()[0])
    };

    let mut g = Graph::new();
    let out = model.forward(&mut g, pet, ct)?;
    let loss = g.cross_entropy_probs(out, mask_bits)?;
    let grads = g.backward(loss)?;
    let mut astore = model.store.cast::<f64>();
    accumulate_param_grads(&g, &grads, &mut astore)?;

    let names: Vec<String> = model.store.names().map(|s| s.to_string()).collect();
    let mut targets: Vec<(usize, usize)> = Vec::new();
    for (ni, name) in names.iter().enumerate() {
        for j in 0..model.store.get(name)?.numel() {
            targets.push((ni, j));
        }
    }
    use rand::seq::SliceRandom;
    targets.shuffle(rng);
    let keep = ((targets.len() as f64 * fraction).ceil() as usize).max(1);
    targets.truncate(keep);

    let mut result = CaseResult::empty();
    let mut first = perturb;
    for (ni, j) in targets {
        let name = &names[ni];
        let mut analytic = astore.grad(name)?.data()[j];
        if first {
            analytic = 3.0 * analytic + 1e-2;
            first = false;
        }
        let base = model.store.get(name)?.clone();
        let mut tp = base.clone();
        tp.data_mut()[j] += FD_STEP;
        model.store.set(name, tp)?;
        let f_plus = loss_of(model)?;
        let mut tm = base.clone();
        tm.data_mut()[j] -= FD_STEP;
        model.store.set(name, tm)?;
        let f_minus = loss_of(model)?;
        model.store.set(name, base)?;
        let numeric = (f_plus - f_minus) / (2.0 * FD_STEP);
        compare(analytic, numeric, &mut result);
    }
    Ok(result)
}

/// Replace every store tensor with well-scaled random values so gradients
/// are well above the comparison floor (norm scales stay near one).
fn randomize_store(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    let names: Vec<String> = store.names().map(|s| s.to_string()).collect();
    for name in names {
        let shape = store.get(&name).unwrap().shape().to_vec();
        let mut t: Tensor<f64> = trunc_normal(&shape, 0.3, rng);
        if name.ends_with(".gamma") {
            for v in t.data_mut() {
                *v += 1.0;
            }
        }
        store.set(&name, t).unwrap();
    }
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    trunc_normal(shape, 0.8, rng)
}

fn random_mask_bits(n: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    (0..n)
        .map(|_| u8::from(rng.random::<f64>() < 0.3))
        .collect()
}

// ── Individual cases ─────────────────────────────────────────────────────

fn case_conv2d(seed: u64, perturb: bool) -> Result<CaseResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut merged = CaseResult::empty();
    for (hw, stride) in [(6, 1), (7, 2)] {
        let mut store = ParamStore::new();
        store.insert("w", randn(&[3, 2, 3, 3], &mut rng))?;
        store.insert("b", randn(&[3], &mut rng))?;
        let x = randn(&[1, 2, hw, hw], &mut rng);
        let r = check_store_case(
            &store,
            &[x],
            &|g, store, ids| {
                let w = param_node(g, store, "w")?;
                let b = param_node(g, store, "b")?;
                let y = g.conv2d(ids[0], w, b, stride, 1)?;
                g.mean_all(y)
            },
            perturb,
        )?;
        merged.merge(r);
    }
    Ok(merged)
}

fn case_residual_block(seed: u64, perturb: bool) -> Result<CaseResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut merged = CaseResult::empty();
    for (cin, cout, stride) in [(3, 3, 1), (3, 5, 2)] {
        let mut store = ParamStore::new();
        let block =
            ResidualBlock::init(&mut store, &Scope::root("res"), cin, cout, stride, &mut rng)?;
        randomize_store(&mut store, &mut rng);
        let x = randn(&[1, cin, 8, 8], &mut rng);
        let r = check_store_case(
            &store,
            &[x],
            &|g, store, ids| {
                let y = block.forward(g, store, ids[0])?;
                g.mean_all(y)
            },
            perturb,
        )?;
        merged.merge(r);
    }
    Ok(merged)
}

/// Weighted-mean objective for token ops: plain means are invariant under
/// normalization constraints, which would zero the gradients being checked.
fn weighted_objective(g: &mut Graph<f64>, out: NodeId, weights: NodeId) -> Result<NodeId> {
    let y = g.matmul(out, weights)?;
    g.mean_all(y)
}

fn case_layer_norm(seed: u64, perturb: bool) -> Result<CaseResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let ln = crate::nn::LayerNorm::init(&mut store, &Scope::root("ln"), 8)?;
    randomize_store(&mut store, &mut rng);
    let x = randn(&[4, 8], &mut rng);
    let w = randn(&[8, 1], &mut rng);
    check_store_case(
        &store,
        &[x, w],
        &|g, store, ids| {
            let y = ln.forward(g, store, ids[0])?;
            weighted_objective(g, y, ids[1])
        },
        perturb,
    )
}

fn case_norm2d(seed: u64, perturb: bool) -> Result<CaseResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let norm = crate::nn::Norm2d::init(&mut store, &Scope::root("n"), 3)?;
    randomize_store(&mut store, &mut rng);
    let x = randn(&[2, 3, 4, 4], &mut rng);
    check_store_case(
        &store,
        &[x],
        &|g, store, ids| {
            let y = norm.forward(g, store, ids[0])?;
            g.mean_all(y)
        },
        perturb,
    )
}

fn case_softmax(seed: u64, perturb: bool) -> Result<CaseResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let store = ParamStore::new();
    let x = randn(&[3, 5], &mut rng);
    let w = randn(&[5, 1], &mut rng);
    check_store_case(
        &store,
        &[x, w],
        &|g, _store, ids| {
            let y = g.softmax_rows(ids[0])?;
            weighted_objective(g, y, ids[1])
        },
        perturb,
    )
}

fn case_msa(seed: u64, perturb: bool) -> Result<CaseResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let msa = Msa::init(&mut store, &Scope::root("msa"), 8, 2, &mut rng)?;
    randomize_store(&mut store, &mut rng);
    let x = randn(&[4, 8], &mut rng);
    let w = randn(&[8, 1], &mut rng);
    check_store_case(
        &store,
        &[x, w],
        &|g, store, ids| {
            let y = msa.forward(g, store, ids[0])?;
            weighted_objective(g, y, ids[1])
        },
        perturb,
    )
}

fn case_mlp(seed: u64, perturb: bool) -> Result<CaseResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mlp = Mlp::init(&mut store, &Scope::root("mlp"), 8, &mut rng)?;
    randomize_store(&mut store, &mut rng);
    let x = randn(&[4, 8], &mut rng);
    let w = randn(&[8, 1], &mut rng);
    check_store_case(
        &store,
        &[x, w],
        &|g, store, ids| {
            let y = mlp.forward(g, store, ids[0])?;
            weighted_objective(g, y, ids[1])
        },
        perturb,
    )
}

fn case_transformer_module(seed: u64, perturb: bool) -> Result<CaseResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let block = TransformerModule::init(&mut store, &Scope::root("blk"), 8, 2, &mut rng)?;
    randomize_store(&mut store, &mut rng);
    let x = randn(&[4, 8], &mut rng);
    let w = randn(&[8, 1], &mut rng);
    check_store_case(
        &store,
        &[x, w],
        &|g, store, ids| {
            let y = block.forward(g, store, ids[0])?;
            weighted_objective(g, y, ids[1])
        },
        perturb,
    )
}

fn case_bilinear_resize(seed: u64, perturb: bool) -> Result<CaseResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let store = ParamStore::new();
    let x = randn(&[1, 2, 5, 4], &mut rng);
    check_store_case(
        &store,
        &[x],
        &|g, _store, ids| {
            let y = g.bilinear_resize(ids[0], 9, 7)?;
            g.mean_all(y)
        },
        perturb,
    )
}

fn case_segmentation_head(seed: u64, perturb: bool) -> Result<CaseResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ModelConfig {
        h: 32,
        w: 32,
        d_embed: 8,
        depth: 1,
        n_heads: 2,
        backbone_widths: [2, 2, 4, 3],
        ..ModelConfig::default()
    };
    let mut store = ParamStore::new();
    let head = SegHead::init(&mut store, &Scope::root("head"), 3, &cfg, &mut rng)?;
    randomize_store(&mut store, &mut rng);
    let map = randn(&[1, 8, 2, 2], &mut rng);
    let skip = randn(&[1, 3, 8, 8], &mut rng);
    let mask = random_mask_bits(32 * 32, &mut rng);
    check_store_case(
        &store,
        &[map, skip],
        &|g, store, ids| {
            let probs = head.forward(g, store, ids[0], ids[1])?;
            g.cross_entropy_probs(probs, &mask)
        },
        perturb,
    )
}

fn case_end_to_end(seed: u64, perturb: bool) -> Result<CaseResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ModelConfig {
        h: 32,
        w: 32,
        d_embed: 16,
        depth: 1,
        n_heads: 2,
        backbone_widths: [2, 2, 4, 4],
        variant: Variant::Hct,
        ..ModelConfig::default()
    };
    let mut model = build_variant::<f64>(&cfg, mix_seed(seed, 0xE2E))?;
    let unit = |rng: &mut ChaCha8Rng| -> Image {
        Image::from_vec(
            32,
            32,
            (0..32 * 32).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
        .unwrap()
    };
    let pet = unit(&mut rng);
    let ct = unit(&mut rng);
    let mask = random_mask_bits(32 * 32, &mut rng);
    check_model_case(&mut model, &pet, &ct, &mask, 0.01, &mut rng, perturb)
}

// ── Suite ────────────────────────────────────────────────────────────────

type CaseFn = fn(u64, bool) -> Result<CaseResult>;

const CASES: [(&str, CaseFn); 11] = [
    ("conv2d", case_conv2d),
    ("residual_block", case_residual_block),
    ("layer_norm", case_layer_norm),
    ("norm2d", case_norm2d),
    ("softmax", case_softmax),
    ("msa", case_msa),
    ("mlp_block", case_mlp),
    ("transformer_module", case_transformer_module),
    ("bilinear_resize", case_bilinear_resize),
    ("segmentation_head", case_segmentation_head),
    ("hct_end_to_end", case_end_to_end),
];

/// Run the full finite-difference suite (>= 5 seeds per op).
pub fn run_suite(cfg: &SuiteConfig) -> Result<Vec<OpReport>> {
    let mut reports = Vec::with_capacity(CASES.len());
    for (op_idx, (name, case)) in CASES.iter().enumerate() {
        let perturb = cfg.perturb_op.as_deref() == Some(*name);
        let mut merged = CaseResult::empty();
        for s in 0..N_SEEDS {
            // corrupting one seed's gradients is enough for fault injection
            let r = case(
                mix_seed(cfg.seed, (op_idx as u64) << 8 | s),
                perturb && s == 0,
            )?;
            merged.merge(r);
        }
        if merged.max_analytic < 1e-12 {
            return Err(Error::Numerical(format!(
                "gradient check for {name} is vacuous: all analytic gradients are zero"
            )));
        }
        reports.push(OpReport {
            name: name.to_string(),
            max_rel_err: merged.max_rel,
            n_checked: merged.checked,
            passed: merged.max_rel < REL_TOL,
        });
    }
    Ok(reports)
}

pub fn format_reports(reports: &[OpReport]) -> String {
    let mut out = String::new();
    for r in reports {
        out.push_str(&format!(
            "{:<20} max_rel_err {:>12.3e}  ({} elements)  {}\n",
            r.name,
            r.max_rel_err,
            r.n_checked,
            if r.passed { "ok" } else { "FAIL" }
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn msa_gradients_match_finite_differences() {
        let r = case_msa(11, false).unwrap();
        assert!(r.max_rel < REL_TOL, "max rel {}", r.max_rel);
        assert!(r.max_analytic > 1e-6);
    }

    #[test]
    fn transformer_module_gradients_match() {
        let r = case_transformer_module(12, false).unwrap();
        assert!(r.max_rel < REL_TOL, "max rel {}", r.max_rel);
    }

    #[test]
    fn residual_block_gradients_match() {
        let r = case_residual_block(13, false).unwrap();
        assert!(r.max_rel < REL_TOL, "max rel {}", r.max_rel);
    }

    #[test]
    fn perturbed_backward_fails_the_named_op() {
        let cfg = SuiteConfig {
            seed: 3,
            perturb_op: Some("softmax".to_string()),
        };
        let reports = run_suite(&cfg).unwrap();
        let softmax = reports.iter().find(|r| r.name == "softmax").unwrap();
        assert!(!softmax.passed);
        for r in &reports {
            if r.name != "softmax" {
                assert!(
                    r.passed,
                    "{} unexpectedly failed: {}",
                    r.name, r.max_rel_err
                );
            }
        }
    }
}
