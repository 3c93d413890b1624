//! Analytic gradients against central finite differences (five-point stencil).
//!
//! Every entry of every bound tensor is perturbed (the whole-model check
//! samples entries). The error measure is per tensor:
//! `‖g_analytic − g_numeric‖₂ / max(‖g_analytic‖₂, ‖g_numeric‖₂, 1e-6)`.
//! The floor covers tensors whose true gradient is zero (biases feeding a
//! batch norm), where both sides are rounding noise.

use std::collections::BTreeMap;

use ckda::autograd::{Graph, Var};
use ckda::cka::{alignment_losses, PrototypeBank};
use ckda::losses::{ce_loss, triplet_loss_with, TripletMining};
use ckda::mcp;
use ckda::model::{self, ImageBatch, ModelConfig, ModelState, PromptToggles};
use ckda::msp::{self, prompt_alignment_loss};
use ckda::nn::ForwardCtx;
use ckda::params::{Binder, ParamStore};
use ckda::synth::{ImageGeometry, Modality};
use ckda::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// fourth-order central stencil; its truncation error is far below rounding here
const H: f64 = 1e-3;
pub const TOL: f64 = 1e-4;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        geometry: ImageGeometry {
            height: 8,
            width: 8,
            channels: 3,
        },
        patch_size: 4,
        embed_dim: 8,
        depth: 1,
        num_heads: 2,
        ..ModelConfig::default()
    }
}

/// Replace every tensor by a random one so zero-initialised layers do not
/// hide upstream gradients.
fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng, std: f64) {
    for (_, t) in store.iter_mut() {
        *t = Tensor::randn(t.shape(), std, rng);
    }
}

type LossFn<'a> = dyn Fn(&mut Graph, &mut Binder) -> Var + 'a;

fn eval(store: &ParamStore, f: &LossFn) -> f64 {
    let mut g = Graph::new();
    let mut b = Binder::new(store, false);
    let l = f(&mut g, &mut b);
    g.value(l).item()
}

/// Worst per-tensor relative error; `sample` limits the checked entries per tensor.
fn check(store: &ParamStore, f: &LossFn, sample: Option<usize>) -> BTreeMap<String, f64> {
    let mut g = Graph::new();
    let mut b = Binder::new(store, true);
    let l = f(&mut g, &mut b);
    let grads = b.collect_grads(g.backward(l));
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut out = BTreeMap::new();
    for (name, t) in store.iter() {
        let idx: Vec<usize> = match sample {
            Some(k) if k < t.len() => (0..k).map(|_| rng.gen_range(0..t.len())).collect(),
            _ => (0..t.len()).collect(),
        };
        let zero = Tensor::zeros(t.shape());
        let ga = grads.get(name).unwrap_or(&zero);
        let (mut num2, mut ana2, mut diff2) = (0.0, 0.0, 0.0);
        for &i in &idx {
            let at = |delta: f64| {
                let mut s = store.clone();
                s.get_mut(name).unwrap().data_mut()[i] += delta;
                eval(&s, f)
            };
            let n = (8.0 * (at(H) - at(-H)) - (at(2.0 * H) - at(-2.0 * H))) / (12.0 * H);
            let a = ga.data()[i];
            num2 += n * n;
            ana2 += a * a;
            diff2 += (a - n) * (a - n);
        }
        let rel = diff2.sqrt() / num2.sqrt().max(ana2.sqrt()).max(1e-6);
        out.insert(name.clone(), rel);
    }
    out
}

fn assert_ok(what: &str, errs: &BTreeMap<String, f64>) -> f64 {
    assert!(!errs.is_empty(), "{what}: nothing checked");
    let worst = errs.values().cloned().fold(0.0, f64::max);
    for (k, v) in errs {
        assert!(*v < TOL, "{what}: {k} relative error {v:e}");
    }
    worst
}

fn tokens_input(cfg: &ModelConfig, b: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::rand_uniform(&[b, cfg.num_tokens(), cfg.token_dim()], 0.0, 1.0, rng)
}

pub fn common_prompt() -> f64 {
    let cfg = tiny_config();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    mcp::init(&cfg, &mut store, &mut rng);
    randomize(&mut store, &mut rng, 0.5);
    store.insert("input", tokens_input(&cfg, 3, &mut rng));
    let w = Tensor::randn(&[3, 8, 8, 3], 1.0, &mut rng);
    let f = move |g: &mut Graph, b: &mut Binder| {
        let x = b.var(g, "input").unwrap();
        let k = mcp::mcp_forward(g, b, &cfg, x).unwrap();
        let y = g.mul_const(k, w.clone());
        g.sum_all(y)
    };
    assert_ok("common prompt", &check(&store, &f, None))
}

pub fn specific_prompt() -> f64 {
    let cfg = tiny_config();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let mut buffers = ParamStore::new();
    msp::init(&cfg, &mut store, &mut buffers, &mut rng);
    randomize(&mut store, &mut rng, 0.5);
    store.insert("input", tokens_input(&cfg, 4, &mut rng));
    let w = Tensor::randn(&[4, 8, 8, 3], 1.0, &mut rng);
    let mut worst: f64 = 0.0;
    for m in [Modality::Visible, Modality::Infrared] {
        let (buffers, w, cfg) = (buffers.clone(), w.clone(), cfg.clone());
        let f = move |g: &mut Graph, b: &mut Binder| {
            let x = b.var(g, "input").unwrap();
            // batch statistics, no dropout: the training-mode function minus its noise
            let mut ctx = ForwardCtx::train_deterministic();
            let k = msp::msp_forward(g, b, &buffers, &cfg, x, m, &mut ctx).unwrap();
            let y = g.mul_const(k, w.clone());
            g.sum_all(y)
        };
        let errs: BTreeMap<_, _> = check(&store, &f, None)
            .into_iter()
            .filter(|(k, _)| k == "input" || k.starts_with(&msp::branch_prefix(m)))
            .collect();
        worst = worst.max(assert_ok("specific prompt", &errs));
    }
    worst
}

pub fn prompt_alignment() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    store.insert("current", Tensor::randn(&[2, 4, 4, 3], 1.0, &mut rng));
    let prev = Tensor::randn(&[2, 4, 4, 3], 1.0, &mut rng);
    let f = move |g: &mut Graph, b: &mut Binder| {
        let c = b.var(g, "current").unwrap();
        let p = g.constant(prev.clone());
        prompt_alignment_loss(g, c, Some(p)).unwrap()
    };
    assert_ok("prompt alignment", &check(&store, &f, None))
}

pub fn triplet() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let labels: Vec<usize> = (0..12).map(|i| i / 4).collect();
    let mods: Vec<Modality> = (0..12)
        .map(|i| if i % 4 < 2 { Modality::Visible } else { Modality::Infrared })
        .collect();
    let mut store = ParamStore::new();
    store.insert("features", Tensor::randn(&[12, 6], 1.0, &mut rng));
    let mut worst: f64 = 0.0;
    for mining in [TripletMining::Global, TripletMining::CrossModality] {
        let (labels, mods) = (labels.clone(), mods.clone());
        // a margin far above every distance gap keeps all hinges active
        let f = move |g: &mut Graph, b: &mut Binder| {
            let x = b.var(g, "features").unwrap();
            triplet_loss_with(g, x, &labels, Some(&mods), 20.0, mining).unwrap()
        };
        worst = worst.max(assert_ok("triplet", &check(&store, &f, None)));
    }
    worst
}

pub fn cross_entropy() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    store.insert("features", Tensor::randn(&[6, 5], 1.0, &mut rng));
    store.insert("head.weight", Tensor::randn(&[5, 4], 0.5, &mut rng));
    let labels = vec![0, 1, 2, 3, 0, 2];
    let f = move |g: &mut Graph, b: &mut Binder| {
        let x = b.var(g, "features").unwrap();
        let w = b.var(g, "head.weight").unwrap();
        let logits = g.matmul(x, w);
        ce_loss(g, logits, &labels).unwrap()
    };
    assert_ok("cross entropy", &check(&store, &f, None))
}

/// `(inter, intra)` worst errors.
pub fn alignment() -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (n, d, nv, b) = (5, 6, 4, 7);
    let bank = PrototypeBank {
        stage: 1,
        visible: Tensor::randn(&[n, d], 1.0, &mut rng),
        infrared: Tensor::randn(&[n, d], 1.0, &mut rng),
        identity_ids: (0..n as u64).collect(),
    };
    let old = Tensor::randn(&[b, d], 1.0, &mut rng);
    let mut store = ParamStore::new();
    store.insert("features", Tensor::randn(&[b, d], 1.0, &mut rng));
    let mut worst = [0.0f64; 2];
    for (k, w) in worst.iter_mut().enumerate() {
        let (bank, old) = (bank.clone(), old.clone());
        let f = move |g: &mut Graph, bd: &mut Binder| {
            let x = bd.var(g, "features").unwrap();
            let (inter, intra) = alignment_losses(g, x, &old, nv, &bank, 0.1).unwrap();
            if k == 0 {
                inter
            } else {
                intra
            }
        };
        *w = assert_ok(if k == 0 { "inter" } else { "intra" }, &check(&store, &f, None));
    }
    (worst[0], worst[1])
}

/// Prompted encoder features through the whole model, sampled entries.
pub fn whole_model() -> f64 {
    let cfg = tiny_config();
    let mut state = ModelState::new(cfg, 0.5, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (name, t) in state.params.iter_mut() {
        if name.starts_with("mcp.restore") || name.contains(".fc2.") {
            *t = Tensor::randn(t.shape(), 0.3, &mut rng);
        }
    }
    let imgs: Vec<Tensor> = (0..4).map(|_| Tensor::rand_uniform(&[8, 8, 3], 0.0, 1.0, &mut rng)).collect();
    let refs: Vec<&Tensor> = imgs.iter().collect();
    let mods = [Modality::Visible, Modality::Visible, Modality::Infrared, Modality::Infrared];
    let batch = ImageBatch::from_images(&refs, &mods).unwrap();
    let w = Tensor::randn(&[4, 8], 1.0, &mut rng);
    let state_ref = &state;
    let f = move |g: &mut Graph, b: &mut Binder| {
        let mut ctx = ForwardCtx::train_deterministic();
        let o = model::forward(g, b, state_ref, &batch, PromptToggles::ALL, &mut ctx).unwrap();
        let y = g.mul_const(o.z, w.clone());
        g.sum_all(y)
    };
    assert_ok("whole model", &check(&state.params, &f, Some(4)))
}
