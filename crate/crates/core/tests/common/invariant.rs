//! Structural invariants checked over random instances. Each function
//! panics on a violation and returns the worst deviation observed.

use ckda::autograd::Graph;
use ckda::backbone::{ema_merge, patchify};
use ckda::cka::{affinity, kl_rows, relational};
use ckda::mcp::{self, MaskActivation};
use ckda::model::{ModelConfig, ModelState};
use ckda::params::{Binder, ParamStore};
use ckda::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn instance_norm_moments(instances: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (b, m, d) = (rng.gen_range(1..4), rng.gen_range(2..20), rng.gen_range(1..10));
        let scale = 10f64.powf(rng.gen_range(-3.0..2.0));
        let x = Tensor::randn(&[b, m, d], scale, &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = mcp::instance_norm(&mut g, xv, eps);
        let (xd, yd) = (x.data(), g.value(y).data());
        for bi in 0..b {
            for c in 0..d {
                let at = |t: usize| bi * m * d + t * d + c;
                let mean: f64 = (0..m).map(|t| yd[at(t)]).sum::<f64>() / m as f64;
                let var: f64 = (0..m).map(|t| (yd[at(t)] - mean).powi(2)).sum::<f64>() / m as f64;
                let xm: f64 = (0..m).map(|t| xd[at(t)]).sum::<f64>() / m as f64;
                let raw: f64 = (0..m).map(|t| (xd[at(t)] - xm).powi(2)).sum::<f64>() / m as f64;
                assert!(mean.abs() < 1e-12, "instance norm mean {mean}");
                assert!(var <= 1.0 + 1e-12, "instance norm variance {var}");
                let dev = (var - raw / (raw + eps)).abs();
                assert!(dev < 1e-9, "instance norm variance off by {dev}");
                worst = worst.max(mean.abs()).max(dev);
            }
        }
    }
    worst
}

/// Returns the smallest distance of any mask entry to the interval ends.
pub fn mask_range(instances: usize) -> f64 {
    let cfg = ModelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let mut closest: f64 = 1.0;
    for _ in 0..instances {
        let mut store = ParamStore::new();
        mcp::init(&cfg, &mut store, &mut rng);
        let d = cfg.mcp.dim;
        let xo = Tensor::randn(&[2, cfg.num_tokens(), d], 2.0, &mut rng);
        let xi = Tensor::randn(&[2, cfg.num_tokens(), d], 2.0, &mut rng);
        let mut g = Graph::new();
        let mut b = Binder::new(&store, false);
        let (vo, vi) = (g.constant(xo), g.constant(xi));
        let (eo, ei) = mcp::channel_masks(&mut g, &mut b, vo, vi, MaskActivation::Gate).unwrap();
        for v in g.value(eo).data().iter().chain(g.value(ei).data()) {
            assert!(*v > 0.0 && *v < 1.0, "mask entry {v} outside (0,1)");
            closest = closest.min(v.min(1.0 - v));
        }
    }
    closest
}

/// Row sums of affinity and relational matrices; worst deviation from 1.
pub fn row_stochastic(instances: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (b, n, d) = (rng.gen_range(1..=32), rng.gen_range(1..=50), rng.gen_range(2..=16));
        let f = Tensor::randn(&[b, d], 1.0, &mut rng);
        let p = Tensor::randn(&[n, d], 1.0, &mut rng);
        let mut g = Graph::new();
        let fv = g.constant(f);
        let a = affinity(&mut g, fv, &p, 0.1).unwrap();
        let y = relational(&mut g, a, 0.1);
        for (t, c) in [(g.value(a), n), (g.value(y), b)] {
            for row in t.data().chunks(c) {
                assert!(row.iter().all(|&v| v >= 0.0));
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    assert!(worst < 1e-12, "row sums off by {worst}");
    worst
}

/// KL of random pairs is nonnegative and KL(P‖P) is exactly zero.
/// Returns the most negative KL seen (0 if none).
pub fn kl_properties(instances: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let mut lowest: f64 = 0.0;
    for _ in 0..instances {
        let (b, n) = (rng.gen_range(1..=32), rng.gen_range(1..=50));
        let draw = |rng: &mut ChaCha8Rng| {
            let mut g = Graph::new();
            let f = g.constant(Tensor::randn(&[b, 4], 1.0, rng));
            let a = affinity(&mut g, f, &Tensor::randn(&[n, 4], 1.0, rng), 0.3).unwrap();
            g.value(a).clone()
        };
        let (p, q) = (draw(&mut rng), draw(&mut rng));
        let mut g = Graph::new();
        let lq = g.constant(q.map(f64::ln));
        let lp = g.constant(p.map(f64::ln));
        let kpq = kl_rows(&mut g, &p, lq).unwrap();
        let kpp = kl_rows(&mut g, &p, lp).unwrap();
        assert!(g.value(kpq).item() >= 0.0, "negative KL {}", g.value(kpq).item());
        assert_eq!(g.value(kpp).item(), 0.0);
        lowest = lowest.min(g.value(kpq).item());
    }
    lowest
}

pub fn ema_endpoints() -> f64 {
    let old = ModelState::new(ModelConfig::default(), 0.5, 41).unwrap();
    let new = ModelState::new(ModelConfig::default(), 0.5, 42).unwrap();
    assert_eq!(ema_merge(&old, &new, 0.0, true).unwrap(), new);
    let m = ema_merge(&old, &new, 1.0, true).unwrap();
    assert_eq!(m.params, old.params);
    assert_eq!(m.buffers, old.buffers);
    0.0
}

pub fn tokenization_lossless(instances: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    for _ in 0..instances {
        let ps = rng.gen_range(1..=8);
        let (gh, gw, c) = (rng.gen_range(1..=4), rng.gen_range(1..=4), rng.gen_range(1..=3));
        let img = Tensor::rand_uniform(&[gh * ps, gw * ps, c], 0.0, 1.0, &mut rng);
        let grid = patchify(&img, ps).unwrap();
        assert_eq!(grid.tokens.shape(), &[gh * gw, ps * ps * c]);
        assert_eq!(grid.depatchify(), img);
    }
    0.0
}

/// Affinity rows are unchanged when a feature row is rescaled by c > 0.
pub fn affinity_scale_invariance(instances: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(36);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (b, n, d) = (rng.gen_range(1..=16), rng.gen_range(1..=20), rng.gen_range(2..=8));
        let f = Tensor::randn(&[b, d], 1.0, &mut rng);
        let p = Tensor::randn(&[n, d], 1.0, &mut rng);
        let c = 10f64.powf(rng.gen_range(-3.0..3.0));
        let mut g = Graph::new();
        let f1 = g.constant(f.clone());
        let f2 = g.constant(f.scale(c));
        let a1 = affinity(&mut g, f1, &p, 0.1).unwrap();
        let a2 = affinity(&mut g, f2, &p, 0.1).unwrap();
        for (x, y) in g.value(a1).data().iter().zip(g.value(a2).data()) {
            worst = worst.max((x - y).abs());
        }
    }
    assert!(worst < 1e-12, "affinity changed by {worst} under rescaling");
    worst
}
