//! Cross-modal knowledge alignment against the previous stage.
//!
//! Features are compared with the previous stage's per-identity prototypes
//! through temperature-scaled cosine affinities (row softmax). Each set of
//! affinity rows yields a relational matrix `softmax(A·Aᵀ/τ)`, and the
//! current model is pulled towards the frozen old model's relational
//! matrices with a row-averaged KL divergence.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{CkdaError, Result};
use crate::model::{extract_features, ModelState, PromptToggles};
use crate::synth::{Modality, StageData};
use crate::tensor::Tensor;

pub const DEFAULT_TEMPERATURE: f64 = 0.1;

/// Per-identity mean features of one finished stage, one row per identity
/// in roster order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank {
    pub stage: usize,
    /// `[N, d_f]`
    pub visible: Tensor,
    /// `[N, d_f]`
    pub infrared: Tensor,
    pub identity_ids: Vec<u64>,
}

impl PrototypeBank {
    pub fn len(&self) -> usize {
        self.identity_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identity_ids.is_empty()
    }

    pub fn modality(&self, m: Modality) -> &Tensor {
        match m {
            Modality::Visible => &self.visible,
            Modality::Infrared => &self.infrared,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for t in [&self.visible, &self.infrared] {
            if t.shape().len() != 2 || t.shape()[0] != self.len() {
                return Err(CkdaError::shape("prototype bank", &[self.len(), 0], t.shape()));
            }
            check_rows(t, "prototype")?;
        }
        Ok(())
    }
}

fn check_rows(t: &Tensor, what: &str) -> Result<()> {
    let d = t.shape()[1];
    for (row, r) in t.data().chunks(d).enumerate() {
        if r.iter().any(|v| !v.is_finite()) {
            return Err(CkdaError::Numeric {
                row,
                reason: format!("{what} row has non-finite entries"),
            });
        }
        if r.iter().all(|&v| v == 0.0) {
            return Err(CkdaError::Numeric {
                row,
                reason: format!("{what} row has zero norm"),
            });
        }
    }
    Ok(())
}

/// Mean feature per identity and modality over a stage's training split,
/// using the eval-mode prompted forward pass.
pub fn extract_prototypes<D: StageData + ?Sized>(
    state: &ModelState,
    data: &D,
    toggles: PromptToggles,
    post_neck: bool,
) -> Result<PrototypeBank> {
    let train = data.train();
    let images: Vec<&Tensor> = train.iter().map(|s| &s.image).collect();
    let mods: Vec<Modality> = train.iter().map(|s| s.modality).collect();
    let feats = extract_features(state, &images, &mods, toggles, post_neck)?;
    let d = state.config.feature_dim();
    let n = data.roster().len();
    let mut sums = [vec![0.0; n * d], vec![0.0; n * d]];
    let mut counts = [vec![0usize; n], vec![0usize; n]];
    for (s, f) in train.iter().zip(feats.data().chunks(d)) {
        if s.label >= n {
            return Err(CkdaError::State(format!(
                "sample label {} outside roster of {n}",
                s.label
            )));
        }
        let m = s.modality as usize;
        counts[m][s.label] += 1;
        for (acc, v) in sums[m][s.label * d..(s.label + 1) * d].iter_mut().zip(f) {
            *acc += v;
        }
    }
    for m in 0..2 {
        for (i, &c) in counts[m].iter().enumerate() {
            if c == 0 {
                return Err(CkdaError::State(format!(
                    "identity {} has no {} training samples",
                    data.roster()[i].identity_id,
                    if m == 0 { "visible" } else { "infrared" }
                )));
            }
            for v in &mut sums[m][i * d..(i + 1) * d] {
                *v /= c as f64;
            }
        }
    }
    let [vis, ir] = sums;
    Ok(PrototypeBank {
        stage: data.stage_index(),
        visible: Tensor::new(&[n, d], vis)?,
        infrared: Tensor::new(&[n, d], ir)?,
        identity_ids: data.roster().iter().map(|r| r.identity_id).collect(),
    })
}

fn unit_rows(t: &Tensor) -> Tensor {
    let d = t.shape()[1];
    let mut out = t.clone();
    for r in out.data_mut().chunks_mut(d) {
        let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in r {
            *v /= n;
        }
    }
    out
}

/// Affinity logits `cos(f_i, p_j)/τ` of features `[B, d_f]` against
/// prototypes `[N, d_f]`.
pub fn affinity_logits(g: &mut Graph, features: Var, prototypes: &Tensor, tau: f64) -> Result<Var> {
    let fs = g.shape(features).to_vec();
    if fs.len() != 2 || prototypes.shape().len() != 2 || fs[1] != prototypes.shape()[1] {
        return Err(CkdaError::shape("affinity", prototypes.shape(), &fs));
    }
    if prototypes.shape()[0] == 0 {
        return Err(CkdaError::State("affinity needs at least one prototype".into()));
    }
    if tau <= 0.0 {
        return Err(CkdaError::config("temperature", "must be > 0"));
    }
    check_rows(g.value(features), "feature")?;
    check_rows(prototypes, "prototype")?;
    let f = g.l2_normalize_rows(features);
    let p = g.constant(unit_rows(prototypes));
    let cos = g.matmul_t(f, p, false, true);
    Ok(g.scale(cos, 1.0 / tau))
}

/// Row-stochastic affinity matrix `[B, N]`.
pub fn affinity(g: &mut Graph, features: Var, prototypes: &Tensor, tau: f64) -> Result<Var> {
    let l = affinity_logits(g, features, prototypes, tau)?;
    Ok(g.softmax(l))
}

/// `log softmax(A·Aᵀ/τ)`, row-wise.
pub fn relational_log(g: &mut Graph, a: Var, tau: f64) -> Var {
    let gram = g.matmul_t(a, a, false, true);
    let gram = g.scale(gram, 1.0 / tau);
    g.log_softmax(gram)
}

/// Relational matrix `softmax(A·Aᵀ/τ)`, `[B, B]`.
pub fn relational(g: &mut Graph, a: Var, tau: f64) -> Var {
    let gram = g.matmul_t(a, a, false, true);
    let gram = g.scale(gram, 1.0 / tau);
    g.softmax(gram)
}

/// Row-averaged `KL(target ‖ current)`; `target` is a fixed distribution and
/// `log_current` the log of the current one.
pub fn kl_rows(g: &mut Graph, target: &Tensor, log_current: Var) -> Result<Var> {
    if target.shape() != g.shape(log_current) {
        return Err(CkdaError::shape("kl", target.shape(), g.shape(log_current)));
    }
    let rows = target.shape()[0].max(1);
    let log_t = target.map(|p| if p > 0.0 { p.ln() } else { 0.0 });
    let lt = g.constant(log_t);
    let diff = g.sub(lt, log_current);
    let w = g.mul_const(diff, target.clone());
    let s = g.sum_all(w);
    Ok(g.scale(s, 1.0 / rows as f64))
}

/// Which features are compared with which prototypes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// Visible features against infrared prototypes.
    Vt,
    /// Infrared features against visible prototypes.
    Tv,
    Vv,
    Tt,
}

impl Direction {
    pub fn feature_modality(self) -> Modality {
        match self {
            Direction::Vt | Direction::Vv => Modality::Visible,
            Direction::Tv | Direction::Tt => Modality::Infrared,
        }
    }

    pub fn prototype_modality(self) -> Modality {
        match self {
            Direction::Vt | Direction::Tt => Modality::Infrared,
            Direction::Tv | Direction::Vv => Modality::Visible,
        }
    }
}

/// Old-model relational target for one direction (plain tensor, no graph).
pub fn relational_target(old_features: &Tensor, bank: &PrototypeBank, dir: Direction, tau: f64) -> Result<Tensor> {
    let mut g = Graph::new();
    let f = g.constant(old_features.clone());
    let a = affinity(&mut g, f, bank.modality(dir.prototype_modality()), tau)?;
    let y = relational(&mut g, a, tau);
    Ok(g.value(y).clone())
}

/// KL alignment for one direction: current features on the graph, old
/// relational target fixed.
pub fn direction_loss(
    g: &mut Graph,
    current: Var,
    target: &Tensor,
    bank: &PrototypeBank,
    dir: Direction,
    tau: f64,
) -> Result<Var> {
    let a = affinity(g, current, bank.modality(dir.prototype_modality()), tau)?;
    let log_y = relational_log(g, a, tau);
    kl_rows(g, target, log_y)
}

/// Inter- and intra-modality alignment losses for a visible-first batch.
///
/// `old` holds the frozen model's features for the same batch. Directions
/// whose modality is absent from the batch contribute zero.
pub fn alignment_losses(
    g: &mut Graph,
    current: Var,
    old: &Tensor,
    num_visible: usize,
    bank: &PrototypeBank,
    tau: f64,
) -> Result<(Var, Var)> {
    let b = g.shape(current)[0];
    if old.shape() != g.shape(current) {
        return Err(CkdaError::shape("old features", g.shape(current), old.shape()));
    }
    let ranges = [(0, num_visible), (num_visible, b - num_visible)];
    let per = |dir: Direction, g: &mut Graph| -> Result<Option<Var>> {
        let (start, len) = ranges[dir.feature_modality() as usize];
        if len == 0 {
            return Ok(None);
        }
        let cur = g.slice(current, 0, start, len);
        let o = old.slice_rows(start, len);
        let target = relational_target(&o, bank, dir, tau)?;
        Ok(Some(direction_loss(g, cur, &target, bank, dir, tau)?))
    };
    let pair = |d1: Direction, d2: Direction, g: &mut Graph| -> Result<Var> {
        let parts: Vec<Var> = [per(d1, g)?, per(d2, g)?].into_iter().flatten().collect();
        Ok(match parts.as_slice() {
            [] => g.constant(Tensor::scalar(0.0)),
            [x] => *x,
            [x, y] => g.add(*x, *y),
            _ => unreachable!(),
        })
    };
    let inter = pair(Direction::Vt, Direction::Tv, g)?;
    let intra = pair(Direction::Vv, Direction::Tt, g)?;
    Ok((inter, intra))
}

/// `KL(Y^o_a ‖ Y^z_a) + KL(Y^o_b ‖ Y^z_b)` for precomputed relational
/// matrices.
pub fn paired_kl(old_a: &Tensor, cur_a: &Tensor, old_b: &Tensor, cur_b: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let mut one = |o: &Tensor, c: &Tensor| -> Result<f64> {
        let lc = g.constant(c.map(f64::ln));
        let v = kl_rows(&mut g, o, lc)?;
        Ok(g.value(v).item())
    };
    Ok(one(old_a, cur_a)? + one(old_b, cur_b)?)
}

/// Inter-modality loss from relational matrices of the `vt` and `tv` directions.
pub fn inter_loss(yo_vt: &Tensor, yz_vt: &Tensor, yo_tv: &Tensor, yz_tv: &Tensor) -> Result<f64> {
    paired_kl(yo_vt, yz_vt, yo_tv, yz_tv)
}

/// Intra-modality loss from relational matrices of the `vv` and `tt` directions.
pub fn intra_loss(yo_vv: &Tensor, yz_vv: &Tensor, yo_tt: &Tensor, yz_tt: &Tensor) -> Result<f64> {
    paired_kl(yo_vv, yz_vv, yo_tt, yz_tt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn eval_affinity(f: &Tensor, p: &Tensor, tau: f64) -> Result<Tensor> {
        let mut g = Graph::new();
        let fv = g.constant(f.clone());
        let a = affinity(&mut g, fv, p, tau)?;
        Ok(g.value(a).clone())
    }

    fn eval_relational(a: &Tensor, tau: f64) -> Tensor {
        let mut g = Graph::new();
        let av = g.constant(a.clone());
        let y = relational(&mut g, av, tau);
        g.value(y).clone()
    }

    fn oracle_affinity(f: &Tensor, p: &Tensor, tau: f64) -> Vec<Vec<f64>> {
        let d = f.shape()[1];
        let rows: Vec<&[f64]> = f.data().chunks(d).collect();
        let protos: Vec<&[f64]> = p.data().chunks(d).collect();
        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (na * nb)
        };
        rows.iter()
            .map(|r| {
                let e: Vec<f64> = protos.iter().map(|q| (cos(r, q) / tau).exp()).collect();
                let z: f64 = e.iter().sum();
                e.iter().map(|v| v / z).collect()
            })
            .collect()
    }

    fn oracle_relational(a: &[Vec<f64>], tau: f64) -> Vec<Vec<f64>> {
        let b = a.len();
        (0..b)
            .map(|i| {
                let e: Vec<f64> = (0..b)
                    .map(|j| {
                        let dot: f64 = a[i].iter().zip(&a[j]).map(|(x, y)| x * y).sum();
                        (dot / tau).exp()
                    })
                    .collect();
                let z: f64 = e.iter().sum();
                e.iter().map(|v| v / z).collect()
            })
            .collect()
    }

    fn oracle_kl(p: &[Vec<f64>], q: &[Vec<f64>]) -> f64 {
        let mut total = 0.0;
        for (pr, qr) in p.iter().zip(q) {
            for (a, b) in pr.iter().zip(qr) {
                total += a * (a / b).ln();
            }
        }
        total / p.len() as f64
    }

    fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
        t.data().chunks(t.shape()[1]).map(|r| r.to_vec()).collect()
    }

    #[test]
    fn single_prototype_gives_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let p = Tensor::randn(&[1, 4], 1.0, &mut rng);
        let a = eval_affinity(&f, &p, 0.1).unwrap();
        assert!(a.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn matching_and_orthogonal_prototype() {
        let f = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
        let p = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let a = eval_affinity(&f, &p, 0.1).unwrap();
        let e = 10f64.exp();
        assert!((a.data()[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((a.data()[0] - 0.9999546).abs() < 1e-7);
        assert!((a.data()[1] - 4.54e-5).abs() < 1e-7);
    }

    #[test]
    fn zero_norm_rows_report_index() {
        let f = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let p = Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap();
        match eval_affinity(&f, &p, 0.1) {
            Err(CkdaError::Numeric { row, .. }) => assert_eq!(row, 1),
            other => panic!("expected numeric error, got {other:?}"),
        }
        let f = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
        let p = Tensor::new(&[2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        assert!(matches!(eval_affinity(&f, &p, 0.1), Err(CkdaError::Numeric { row: 0, .. })));
    }

    #[test]
    fn affinity_and_relational_match_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (b, n) in [(1, 1), (7, 3), (32, 50), (16, 20)] {
            let f = Tensor::randn(&[b, 8], 1.0, &mut rng);
            let p = Tensor::randn(&[n, 8], 1.0, &mut rng);
            let a = eval_affinity(&f, &p, 0.1).unwrap();
            let oa = oracle_affinity(&f, &p, 0.1);
            for (x, y) in a.data().iter().zip(oa.iter().flatten()) {
                assert!((x - y).abs() < 1e-10);
            }
            let y = eval_relational(&a, 0.1);
            let oy = oracle_relational(&oa, 0.1);
            for (x, z) in y.data().iter().zip(oy.iter().flatten()) {
                assert!((x - z).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn relational_edge_cases() {
        let y = eval_relational(&Tensor::new(&[1, 3], vec![0.2, 0.3, 0.5]).unwrap(), 0.1);
        assert_eq!(y.data(), &[1.0]);
        let a = Tensor::new(&[2, 2], vec![0.7, 0.3, 0.7, 0.3]).unwrap();
        let y = eval_relational(&a, 0.1);
        assert_eq!(y.data()[..2], y.data()[2..]);
    }

    #[test]
    fn kl_worked_example() {
        let o = Tensor::new(&[1, 2], vec![0.8, 0.2]).unwrap();
        let z = Tensor::new(&[1, 2], vec![0.5, 0.5]).unwrap();
        let k = paired_kl(&o, &z, &o, &o).unwrap();
        let want = 0.8 * 1.6f64.ln() + 0.2 * 0.4f64.ln();
        assert!((k - want).abs() < 1e-12);
        assert!((k - 0.19274).abs() < 1e-5);
    }

    #[test]
    fn inter_intra_match_row_kl_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut y = || {
            let f = Tensor::randn(&[6, 4], 1.0, &mut rng);
            let p = Tensor::randn(&[5, 4], 1.0, &mut rng);
            eval_relational(&eval_affinity(&f, &p, 0.1).unwrap(), 0.1)
        };
        let (a, b, c, d) = (y(), y(), y(), y());
        let want = oracle_kl(&to_rows(&a), &to_rows(&b)) + oracle_kl(&to_rows(&c), &to_rows(&d));
        assert!((inter_loss(&a, &b, &c, &d).unwrap() - want).abs() < 1e-10);
        assert!((intra_loss(&a, &b, &c, &d).unwrap() - want).abs() < 1e-10);
        assert!(inter_loss(&a, &a, &c, &c).unwrap().abs() < 1e-15);
    }

    #[test]
    fn old_branch_gets_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bank = PrototypeBank {
            stage: 1,
            visible: Tensor::randn(&[4, 6], 1.0, &mut rng),
            infrared: Tensor::randn(&[4, 6], 1.0, &mut rng),
            identity_ids: vec![0, 1, 2, 3],
        };
        let old = Tensor::randn(&[6, 6], 1.0, &mut rng);
        let mut g = Graph::new();
        let cur = g.param(Tensor::randn(&[6, 6], 1.0, &mut rng));
        let o = g.constant(old.clone());
        let (inter, intra) = alignment_losses(&mut g, cur, &old, 3, &bank, 0.1).unwrap();
        let l = g.add(inter, intra);
        let grads = g.backward(l);
        assert!(grads.get(cur).is_some());
        assert!(grads.get(o).is_none());
    }

    #[test]
    fn identical_models_give_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bank = PrototypeBank {
            stage: 1,
            visible: Tensor::randn(&[3, 5], 1.0, &mut rng),
            infrared: Tensor::randn(&[3, 5], 1.0, &mut rng),
            identity_ids: vec![0, 1, 2],
        };
        let f = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let mut g = Graph::new();
        let cur = g.param(f.clone());
        let (inter, intra) = alignment_losses(&mut g, cur, &f, 2, &bank, 0.1).unwrap();
        assert!(g.value(inter).item().abs() < 1e-12);
        assert!(g.value(intra).item().abs() < 1e-12);
    }

    proptest::proptest! {
        #[test]
        fn rows_are_distributions_and_scale_free(seed in 0u64..1000, s in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = Tensor::randn(&[5, 6], 1.0, &mut rng);
            let p = Tensor::randn(&[4, 6], 1.0, &mut rng);
            let a = eval_affinity(&f, &p, 0.1).unwrap();
            let y = eval_relational(&a, 0.1);
            for t in [&a, &y] {
                let w = t.shape()[1];
                for r in t.data().chunks(w) {
                    proptest::prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                    proptest::prop_assert!(r.iter().all(|&v| v > 0.0 && v <= 1.0));
                }
            }
            let a2 = eval_affinity(&f.scale(s), &p, 0.1).unwrap();
            for (x, z) in a.data().iter().zip(a2.data()) {
                proptest::prop_assert!((x - z).abs() < 1e-12);
            }
        }

        #[test]
        fn kl_nonnegative(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut y = || {
                let f = Tensor::randn(&[4, 3], 1.0, &mut rng);
                let p = Tensor::randn(&[3, 3], 1.0, &mut rng);
                eval_relational(&eval_affinity(&f, &p, 0.1).unwrap(), 0.1)
            };
            let (a, b, c, d) = (y(), y(), y(), y());
            proptest::prop_assert!(inter_loss(&a, &b, &c, &d).unwrap() >= 0.0);
            proptest::prop_assert!(intra_loss(&a, &a, &c, &c).unwrap().abs() < 1e-15);
        }
    }
}
