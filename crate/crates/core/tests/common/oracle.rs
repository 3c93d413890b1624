//! Brute-force loop oracles compared against the library on random
//! instances. Each check returns the worst absolute deviation it saw.

use ckda::autograd::Graph;
use ckda::cka::{affinity, alignment_losses, kl_rows, relational, PrototypeBank};
use ckda::eval::retrieval_metrics;
use ckda::losses::{hardest_pairs, triplet_loss_with, TripletMining};
use ckda::synth::Modality;
use ckda::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOL: f64 = 1e-10;
pub const METRIC_TOL: f64 = 1e-12;
const TAU: f64 = 0.1;

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let c = t.shape()[1];
    t.data().chunks(c).map(|r| r.to_vec()).collect()
}

fn max_dev(a: &[Vec<f64>], b: &Tensor) -> f64 {
    a.iter()
        .flatten()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

fn softmax_loop(logits: &[f64]) -> Vec<f64> {
    let mut m = f64::NEG_INFINITY;
    for &v in logits {
        if v > m {
            m = v;
        }
    }
    let mut z = 0.0;
    for &v in logits {
        z += (v - m).exp();
    }
    logits.iter().map(|&v| (v - m).exp() / z).collect()
}

pub fn affinity_loops(f: &[Vec<f64>], p: &[Vec<f64>], tau: f64) -> Vec<Vec<f64>> {
    f.iter()
        .map(|fi| softmax_loop(&p.iter().map(|pj| cosine(fi, pj) / tau).collect::<Vec<_>>()))
        .collect()
}

pub fn relational_loops(a: &[Vec<f64>], tau: f64) -> Vec<Vec<f64>> {
    a.iter()
        .map(|ai| softmax_loop(&a.iter().map(|aj| dot(ai, aj) / tau).collect::<Vec<_>>()))
        .collect()
}

pub fn kl_loops(p: &[Vec<f64>], q: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for (pr, qr) in p.iter().zip(q) {
        for (&pi, &qi) in pr.iter().zip(qr) {
            if pi > 0.0 {
                total += pi * (pi / qi).ln();
            }
        }
    }
    total / p.len() as f64
}

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::randn(&[r, c], 1.0, rng)
}

/// Affinity and relational matrices, `instances` random draws.
pub fn affinity_and_relational(instances: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let b = rng.gen_range(1..=32);
        let n = rng.gen_range(1..=50);
        let d = rng.gen_range(2..=16);
        let f = random(&mut rng, b, d);
        let p = random(&mut rng, n, d);
        let mut g = Graph::new();
        let fv = g.constant(f.clone());
        let a = affinity(&mut g, fv, &p, TAU).unwrap();
        let y = relational(&mut g, a, TAU);
        let oa = affinity_loops(&rows(&f), &rows(&p), TAU);
        let oy = relational_loops(&oa, TAU);
        worst = worst.max(max_dev(&oa, g.value(a))).max(max_dev(&oy, g.value(y)));
    }
    worst
}

/// Row-averaged KL and the composed inter/intra losses.
pub fn kl_and_alignment(instances: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let b = rng.gen_range(2..=32);
        let n = rng.gen_range(1..=50);
        let d = rng.gen_range(2..=16);
        // plain KL on random distributions
        let p = affinity_loops(&rows(&random(&mut rng, b, d)), &rows(&random(&mut rng, n, d)), 0.5);
        let q = affinity_loops(&rows(&random(&mut rng, b, d)), &rows(&random(&mut rng, n, d)), 0.5);
        let pt = Tensor::new(&[b, n], p.concat()).unwrap();
        let mut g = Graph::new();
        let lq = g.constant(Tensor::new(&[b, n], q.concat().iter().map(|v| v.ln()).collect()).unwrap());
        let kl = kl_rows(&mut g, &pt, lq).unwrap();
        worst = worst.max((g.value(kl).item() - kl_loops(&p, &q)).abs());

        // inter/intra on a visible-first batch
        let nv = rng.gen_range(1..b);
        let bank = PrototypeBank {
            stage: 1,
            visible: random(&mut rng, n, d),
            infrared: random(&mut rng, n, d),
            identity_ids: (0..n as u64).collect(),
        };
        let cur = random(&mut rng, b, d);
        let old = random(&mut rng, b, d);
        let mut g = Graph::new();
        let cv = g.constant(cur.clone());
        let (inter, intra) = alignment_losses(&mut g, cv, &old, nv, &bank, TAU).unwrap();
        let (cr, or) = (rows(&cur), rows(&old));
        let (pv, pi) = (rows(&bank.visible), rows(&bank.infrared));
        let dir = |feat: &[Vec<f64>], protos: &[Vec<f64>]| relational_loops(&affinity_loops(feat, protos, TAU), TAU);
        let one = |range: std::ops::Range<usize>, protos: &[Vec<f64>]| {
            kl_loops(&dir(&or[range.clone()], protos), &dir(&cr[range], protos))
        };
        let o_inter = one(0..nv, &pi) + one(nv..b, &pv);
        let o_intra = one(0..nv, &pv) + one(nv..b, &pi);
        worst = worst
            .max((g.value(inter).item() - o_inter).abs())
            .max((g.value(intra).item() - o_intra).abs());
    }
    worst
}

/// Batch-hard mining (indices must agree exactly) and the loss value.
pub fn triplet_mining(instances: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let ids = rng.gen_range(2..=8);
        let per = rng.gen_range(2..=4);
        let b = ids * per;
        if b > 32 {
            continue;
        }
        let mut labels: Vec<usize> = (0..b).map(|i| i / per).collect();
        labels.shuffle(&mut rng);
        let mods: Vec<Modality> = (0..b)
            .map(|_| if rng.gen_bool(0.5) { Modality::Visible } else { Modality::Infrared })
            .collect();
        let d = rng.gen_range(2..=12);
        let f = random(&mut rng, b, d);
        let fr = rows(&f);
        let dist: Vec<Vec<f64>> = fr
            .iter()
            .map(|x| fr.iter().map(|y| x.iter().zip(y).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt()).collect())
            .collect();
        for mining in [TripletMining::Global, TripletMining::CrossModality] {
            let mut want = Vec::new();
            for a in 0..b {
                let eligible = |j: usize| j != a && (mining == TripletMining::Global || mods[j] != mods[a]);
                let mut best_p: Option<usize> = None;
                let mut best_n: Option<usize> = None;
                for j in 0..b {
                    if !eligible(j) {
                        continue;
                    }
                    if labels[j] == labels[a] {
                        if best_p.is_none() || dist[a][j] > dist[a][best_p.unwrap()] {
                            best_p = Some(j);
                        }
                    } else if best_n.is_none() || dist[a][j] < dist[a][best_n.unwrap()] {
                        best_n = Some(j);
                    }
                }
                if let (Some(p), Some(n)) = (best_p, best_n) {
                    want.push((a, p, n));
                }
            }
            let dt = Tensor::new(&[b, b], dist.concat()).unwrap();
            let got = hardest_pairs(&dt, &labels, Some(&mods), mining);
            assert_eq!(got, want, "mined triplets differ");
            if want.is_empty() {
                continue;
            }
            let margin = 0.3;
            let oracle = want
                .iter()
                .map(|&(a, p, n)| (dist[a][p] - dist[a][n] + margin).max(0.0))
                .sum::<f64>()
                / want.len() as f64;
            let mut g = Graph::new();
            let fv = g.constant(f.clone());
            let l = triplet_loss_with(&mut g, fv, &labels, Some(&mods), margin, mining).unwrap();
            worst = worst.max((g.value(l).item() - oracle).abs());
        }
    }
    worst
}

/// mAP and R1 against a direct sort-and-count.
pub fn retrieval(instances: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let ng = rng.gen_range(2..=100);
        let nq = rng.gen_range(1..=100);
        let num_ids = rng.gen_range(1..=ng.min(20)) as u64;
        let d = rng.gen_range(2..=8);
        // every identity appears in the gallery
        let gallery_ids: Vec<u64> = (0..ng as u64).map(|i| if i < num_ids { i } else { rng.gen_range(0..num_ids) }).collect();
        let query_ids: Vec<u64> = (0..nq).map(|_| rng.gen_range(0..num_ids)).collect();
        let q = random(&mut rng, nq, d);
        let gal = random(&mut rng, ng, d);
        let m = retrieval_metrics(&q, &query_ids, &gal, &gallery_ids).unwrap();
        let (qr, gr) = (rows(&q), rows(&gal));
        let (mut ap_sum, mut r1) = (0.0, 0.0);
        for (qi, qv) in qr.iter().enumerate() {
            let mut order: Vec<(f64, usize)> = gr.iter().enumerate().map(|(j, gv)| (cosine(qv, gv), j)).collect();
            // bubble sort: descending similarity, ascending index on ties
            for i in 0..order.len() {
                for j in 0..order.len() - 1 - i {
                    let (a, b) = (order[j], order[j + 1]);
                    if b.0 > a.0 || (b.0 == a.0 && b.1 < a.1) {
                        order.swap(j, j + 1);
                    }
                }
            }
            let (mut hits, mut prec) = (0.0, 0.0);
            for (k, &(_, j)) in order.iter().enumerate() {
                if gallery_ids[j] == query_ids[qi] {
                    hits += 1.0;
                    prec += hits / (k + 1) as f64;
                }
            }
            ap_sum += prec / hits;
            if gallery_ids[order[0].1] == query_ids[qi] {
                r1 += 1.0;
            }
        }
        worst = worst
            .max((m.map - ap_sum / nq as f64).abs())
            .max((m.r1 - r1 / nq as f64).abs());
    }
    worst
}
