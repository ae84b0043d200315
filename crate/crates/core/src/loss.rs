//! Label-smoothed cross entropy, batch-hard triplet loss and their weighted
//! combination over branch units. Every loss returns its value together with
//! the gradient w.r.t. its input.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LossRole;
use crate::tensor::Tensor;

/// Squared distances below this are clamped before the square root.
const DIST_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnitWeights {
    pub w_cls: f64,
    pub w_tri: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub w_cls: f64,
    pub w_tri: f64,
    pub epsilon: f64,
    pub margin: f64,
    /// Per-unit overrides keyed by unit index.
    pub overrides: BTreeMap<usize, UnitWeights>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { w_cls: 0.6, w_tri: 1.0, epsilon: 0.1, margin: 0.1, overrides: BTreeMap::new() }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ws = self.overrides.values().flat_map(|u| [u.w_cls, u.w_tri]).chain([self.w_cls, self.w_tri, self.margin]);
        for w in ws {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("loss weights and margin must be finite and >= 0, got {w}")));
            }
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(Error::Config(format!("label smoothing {} outside [0, 1)", self.epsilon)));
        }
        Ok(())
    }

    pub fn for_unit(&self, unit: usize) -> UnitWeights {
        self.overrides.get(&unit).copied().unwrap_or(UnitWeights { w_cls: self.w_cls, w_tri: self.w_tri })
    }
}

/// Smoothed one-hot target: `1 - (C-1)/C * eps` on the true class, `eps / C` elsewhere.
pub fn smoothed_target(classes: usize, target: usize, epsilon: f64) -> Vec<f64> {
    let off = epsilon / classes as f64;
    let mut y = vec![off; classes];
    y[target] = 1.0 - (classes - 1) as f64 / classes as f64 * epsilon;
    y
}

/// Mean label-smoothed cross entropy over the batch and its gradient w.r.t. the logits.
pub fn ce_label_smoothing(logits: &Tensor, targets: &[usize], epsilon: f64) -> Result<(f64, Tensor)> {
    let (b, c) = logits.dims2()?;
    if c < 2 {
        return Err(Error::Loss(format!("cross entropy needs at least 2 classes, got {c}")));
    }
    if targets.len() != b {
        return Err(Error::Loss(format!("{} targets for {b} logit rows", targets.len())));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= c) {
        return Err(Error::Loss(format!("target {t} outside {c} classes")));
    }
    if logits.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Loss("non-finite logits".into()));
    }
    let mut grad = vec![0f32; b * c];
    let mut total = 0f64;
    for (i, (row, &t)) in logits.data().chunks(c).zip(targets).enumerate() {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
        let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
        let y = smoothed_target(c, t, epsilon);
        for (j, &v) in row.iter().enumerate() {
            let logp = v as f64 - lse;
            total -= y[j] * logp;
            grad[i * c + j] = ((logp.exp() - y[j]) / b as f64) as f32;
        }
    }
    Ok((total / b as f64, Tensor::from_vec(&[b, c], grad)?))
}

fn distances(x: &[f32], b: usize, d: usize) -> Vec<f64> {
    let mut dist = vec![0f64; b * b];
    for i in 0..b {
        for j in i + 1..b {
            let s: f64 = x[i * d..(i + 1) * d]
                .iter()
                .zip(&x[j * d..(j + 1) * d])
                .map(|(p, q)| (*p as f64 - *q as f64).powi(2))
                .sum();
            let v = s.max(DIST_EPS).sqrt();
            dist[i * b + j] = v;
            dist[j * b + i] = v;
        }
    }
    dist
}

/// Mean over anchors of `max(0, m + max_p d(a,p) - min_n d(a,n))` with
/// Euclidean distances on raw embeddings; ties go to the lowest index.
pub fn batch_hard_triplet(emb: &Tensor, ids: &[usize], margin: f64) -> Result<(f64, Tensor)> {
    let (b, d) = emb.dims2()?;
    if ids.len() != b {
        return Err(Error::Loss(format!("{} ids for {b} embeddings", ids.len())));
    }
    if emb.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Loss("non-finite embeddings".into()));
    }
    let x = emb.data();
    let dist = distances(x, b, d);
    let mut grad = vec![0f64; b * d];
    let mut total = 0f64;
    for a in 0..b {
        let mut pos: Option<usize> = None;
        let mut neg: Option<usize> = None;
        for j in 0..b {
            if j == a {
                continue;
            }
            let dj = dist[a * b + j];
            if ids[j] == ids[a] {
                if pos.map_or(true, |p| dj > dist[a * b + p]) {
                    pos = Some(j);
                }
            } else if neg.map_or(true, |n| dj < dist[a * b + n]) {
                neg = Some(j);
            }
        }
        let (p, n) = match (pos, neg) {
            (Some(p), Some(n)) => (p, n),
            _ => {
                return Err(Error::Sampler(format!(
                    "anchor {a} (id {}) needs at least one positive and one negative in the batch",
                    ids[a]
                )))
            }
        };
        let (dap, dan) = (dist[a * b + p], dist[a * b + n]);
        let term = margin + dap - dan;
        if term <= 0.0 {
            continue;
        }
        total += term;
        for (other, dist_v, sign) in [(p, dap, 1.0), (n, dan, -1.0)] {
            if dist_v * dist_v <= DIST_EPS {
                continue;
            }
            for k in 0..d {
                let diff = (x[a * d + k] - x[other * d + k]) as f64 / dist_v * sign;
                grad[a * d + k] += diff;
                grad[other * d + k] -= diff;
            }
        }
    }
    let inv = 1.0 / b as f64;
    let grad = grad.iter().map(|g| (g * inv) as f32).collect();
    Ok((total * inv, Tensor::from_vec(&[b, d], grad)?))
}

/// One unit's inputs to the combined loss.
#[derive(Clone, Copy, Debug)]
pub struct UnitInput<'a> {
    pub role: LossRole,
    pub embedding: &'a Tensor,
    pub logits: Option<&'a Tensor>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct UnitLoss {
    pub cls: Option<f64>,
    pub tri: Option<f64>,
    /// Weighted contribution to the total.
    pub weighted: f64,
}

#[derive(Debug)]
pub struct LossReport {
    pub total: f64,
    pub per_unit: Vec<UnitLoss>,
    pub d_embeddings: Vec<Option<Tensor>>,
    pub d_logits: Vec<Option<Tensor>>,
}

/// Weighted sum of already-evaluated unit losses: classification terms count
/// only for units with a classification role, triplet terms only for metric ones.
pub fn combine(roles: &[LossRole], cls: &[Option<f64>], tri: &[Option<f64>], weights: &LossWeights) -> Result<(f64, Vec<UnitLoss>)> {
    let mut total = 0.0;
    let mut per = Vec::with_capacity(roles.len());
    for (i, &role) in roles.iter().enumerate() {
        let w = weights.for_unit(i);
        let (c, t) = (cls.get(i).copied().flatten(), tri.get(i).copied().flatten());
        if role.has_cls() != c.is_some() || role.has_metric() != t.is_some() {
            return Err(Error::Loss(format!("unit {i} with role {role:?} got cls={c:?}, tri={t:?}")));
        }
        let weighted = c.map_or(0.0, |v| w.w_cls * v) + t.map_or(0.0, |v| w.w_tri * v);
        total += weighted;
        per.push(UnitLoss { cls: c, tri: t, weighted });
    }
    Ok((total, per))
}

fn scaled(t: Tensor, s: f64) -> Tensor {
    let shape = t.shape().to_vec();
    let data = t.into_data().into_iter().map(|v| (v as f64 * s) as f32).collect();
    Tensor::from_vec(&shape, data).expect("same shape")
}

/// Evaluates every unit's losses, their weighted total and the gradients.
pub fn lbs_total(units: &[UnitInput<'_>], targets: &[usize], weights: &LossWeights) -> Result<LossReport> {
    weights.validate()?;
    let mut cls = Vec::with_capacity(units.len());
    let mut tri = Vec::with_capacity(units.len());
    let mut d_embeddings = Vec::with_capacity(units.len());
    let mut d_logits = Vec::with_capacity(units.len());
    for (i, u) in units.iter().enumerate() {
        let w = weights.for_unit(i);
        if u.role.has_cls() {
            let logits = u
                .logits
                .ok_or_else(|| Error::Loss(format!("unit {i} has a classification role but no logits")))?;
            let (l, g) = ce_label_smoothing(logits, targets, weights.epsilon)?;
            cls.push(Some(l));
            d_logits.push(Some(scaled(g, w.w_cls)));
        } else {
            cls.push(None);
            d_logits.push(None);
        }
        if u.role.has_metric() {
            let (l, g) = batch_hard_triplet(u.embedding, targets, weights.margin)?;
            tri.push(Some(l));
            d_embeddings.push(Some(scaled(g, w.w_tri)));
        } else {
            tri.push(None);
            d_embeddings.push(None);
        }
    }
    let roles: Vec<LossRole> = units.iter().map(|u| u.role).collect();
    let (total, per_unit) = combine(&roles, &cls, &tri, weights)?;
    Ok(LossReport { total, per_unit, d_embeddings, d_logits })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f32]) -> Tensor {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn smoothed_target_vector() {
        let y = smoothed_target(4, 0, 0.1);
        for (a, b) in y.iter().zip([0.925, 0.025, 0.025, 0.025]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(y.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        for (c, eps) in [(2, 0.0), (5, 0.1), (751, 0.3)] {
            let logits = Tensor::full(&[3, c], 0.7);
            let (l, _) = ce_label_smoothing(&logits, &[0, 1, c - 1], eps).unwrap();
            assert_abs_diff_eq!(l, (c as f64).ln(), epsilon = 1e-9);
        }
    }

    fn ce_oracle(logits: &[f32], c: usize, targets: &[usize], eps: f64) -> f64 {
        let mut total = 0.0;
        for (row, &t) in logits.chunks(c).zip(targets) {
            let z: f64 = row.iter().map(|v| (*v as f64).exp()).sum();
            for (j, v) in row.iter().enumerate() {
                let q = if j == t { 1.0 - eps + eps / c as f64 } else { eps / c as f64 };
                total -= q * ((*v as f64).exp() / z).ln();
            }
        }
        total / targets.len() as f64
    }

    #[test]
    fn zero_smoothing_is_plain_cross_entropy() {
        let logits = t(&[2, 3], &[1.0, -2.0, 0.5, 0.0, 3.0, -1.0]);
        let (l, _) = ce_label_smoothing(&logits, &[2, 1], 0.0).unwrap();
        let plain = ce_oracle(logits.data(), 3, &[2, 1], 0.0);
        assert_abs_diff_eq!(l, plain, epsilon = 1e-7);
    }

    #[test]
    fn cross_entropy_rejects_bad_input() {
        let logits = t(&[1, 2], &[f32::NAN, 0.0]);
        assert!(matches!(ce_label_smoothing(&logits, &[0], 0.1), Err(Error::Loss(_))));
        assert!(ce_label_smoothing(&t(&[1, 2], &[0.0, 0.0]), &[2], 0.1).is_err());
        assert!(ce_label_smoothing(&t(&[1, 1], &[0.0]), &[0], 0.1).is_err());
    }

    #[test]
    fn hand_computed_triplet_example() {
        let emb = t(&[4, 1], &[0.0, 1.0, 0.4, 3.0]);
        let (l, _) = batch_hard_triplet(&emb, &[0, 0, 1, 1], 0.1).unwrap();
        assert_abs_diff_eq!(l, 1.05, epsilon = 1e-6);
    }

    #[test]
    fn identical_embeddings_cost_the_margin() {
        let emb = Tensor::full(&[6, 5], 0.3);
        let (l, g) = batch_hard_triplet(&emb, &[0, 0, 1, 1, 2, 2], 0.1).unwrap();
        assert_abs_diff_eq!(l, 0.1, epsilon = 1e-9);
        assert!(g.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn missing_positive_or_negative_violates_sampler_contract() {
        let emb = Tensor::zeros(&[3, 2]);
        assert!(matches!(batch_hard_triplet(&emb, &[0, 0, 1], 0.1), Err(Error::Sampler(_))));
        assert!(matches!(batch_hard_triplet(&emb, &[0, 0, 0], 0.1), Err(Error::Sampler(_))));
    }

    /// Exhaustive enumeration over every valid (a, p, n).
    fn triplet_oracle(x: &[f32], d: usize, ids: &[usize], m: f64) -> f64 {
        let b = ids.len();
        let dist = |i: usize, j: usize| -> f64 {
            (0..d).map(|k| (x[i * d + k] as f64 - x[j * d + k] as f64).powi(2)).sum::<f64>().max(DIST_EPS).sqrt()
        };
        let mut total = 0.0;
        for a in 0..b {
            let mut worst = f64::NEG_INFINITY;
            for p in (0..b).filter(|&p| p != a && ids[p] == ids[a]) {
                for n in (0..b).filter(|&n| ids[n] != ids[a]) {
                    worst = worst.max((m + dist(a, p) - dist(a, n)).max(0.0));
                }
            }
            total += worst;
        }
        total / b as f64
    }

    fn pk_ids(p: usize, k: usize) -> Vec<usize> {
        (0..p * k).map(|i| i / k).collect()
    }

    #[test]
    fn triplet_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ids = pk_ids(4, 4);
        let emb = Tensor::randn(&[16, 8], 1.0, &mut rng);
        let (_, g) = batch_hard_triplet(&emb, &ids, 0.3).unwrap();
        let x64: Vec<f64> = emb.data().iter().map(|v| *v as f64).collect();
        let eval = |x: &[f64]| {
            let f: Vec<f32> = x.iter().map(|v| *v as f32).collect();
            triplet_oracle(&f, 8, &ids, 0.3)
        };
        let h = 1e-3;
        for i in (0..x64.len()).step_by(5) {
            let mut xp = x64.clone();
            xp[i] += h;
            let mut xm = x64.clone();
            xm[i] -= h;
            let numeric = (eval(&xp) - eval(&xm)) / (2.0 * h);
            let analytic = g.data()[i] as f64;
            assert!((numeric - analytic).abs() <= 1e-4 * numeric.abs().max(1.0) + 1e-4, "{i}: {numeric} vs {analytic}");
        }
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let logits = Tensor::randn(&[4, 6], 2.0, &mut rng);
        let targets = [0, 5, 2, 2];
        let (_, g) = ce_label_smoothing(&logits, &targets, 0.1).unwrap();
        for i in 0..logits.len() {
            let mut p = logits.data().to_vec();
            p[i] += 1e-2;
            let mut m = logits.data().to_vec();
            m[i] -= 1e-2;
            let numeric = (ce_oracle(&p, 6, &targets, 0.1) - ce_oracle(&m, 6, &targets, 0.1)) / 2e-2;
            assert_abs_diff_eq!(numeric, g.data()[i] as f64, epsilon = 1e-4);
        }
    }

    #[test]
    fn combine_follows_roles_and_weights() {
        let w = LossWeights::default();
        let (total, per) = combine(&[LossRole::Both], &[Some(2.0)], &[Some(0.5)], &w).unwrap();
        assert_abs_diff_eq!(total, 0.6 * 2.0 + 0.5, epsilon = 1e-12);
        assert_eq!(per[0].cls, Some(2.0));

        let roles = [LossRole::Cls, LossRole::Metric];
        let (total, _) = combine(&roles, &[Some(2.0), None], &[None, Some(0.5)], &w).unwrap();
        assert_abs_diff_eq!(total, 1.7, epsilon = 1e-12);

        let zero = LossWeights { w_cls: 0.0, w_tri: 0.0, ..LossWeights::default() };
        let (total, per) = combine(&roles, &[Some(2.0), None], &[None, Some(0.5)], &zero).unwrap();
        assert_eq!(total, 0.0);
        assert_eq!((per[0].cls, per[1].tri), (Some(2.0), Some(0.5)));

        assert!(matches!(combine(&roles, &[None, None], &[None, Some(0.5)], &w), Err(Error::Loss(_))));
    }

    #[test]
    fn per_unit_override_applies() {
        let mut w = LossWeights::default();
        w.overrides.insert(1, UnitWeights { w_cls: 0.0, w_tri: 2.0 });
        let roles = [LossRole::Both, LossRole::Both];
        let (total, _) = combine(&roles, &[Some(1.0), Some(1.0)], &[Some(1.0), Some(1.0)], &w).unwrap();
        assert_abs_diff_eq!(total, 1.6 + 2.0, epsilon = 1e-12);
    }

    #[test]
    fn lbs_roles_do_not_couple() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ids = pk_ids(2, 2);
        let e0 = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let e1 = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let z0 = Tensor::randn(&[4, 2], 1.0, &mut rng);
        let z1 = Tensor::randn(&[4, 2], 1.0, &mut rng);
        let units = [
            UnitInput { role: LossRole::Cls, embedding: &e0, logits: Some(&z0) },
            UnitInput { role: LossRole::Metric, embedding: &e1, logits: Some(&z1) },
        ];
        let r = lbs_total(&units, &ids, &LossWeights::default()).unwrap();
        assert!(r.d_embeddings[0].is_none() && r.d_logits[0].is_some());
        assert!(r.d_logits[1].is_none() && r.d_embeddings[1].is_some());
        let missing = [UnitInput { role: LossRole::Cls, embedding: &e0, logits: None }];
        assert!(matches!(lbs_total(&missing, &ids, &LossWeights::default()), Err(Error::Loss(_))));
    }

    #[test]
    fn weights_are_validated() {
        assert!(LossWeights { epsilon: 1.0, ..Default::default() }.validate().is_err());
        assert!(LossWeights { w_cls: -0.1, ..Default::default() }.validate().is_err());
        assert!(LossWeights::default().validate().is_ok());
    }

    proptest! {
        #[test]
        fn cross_entropy_matches_oracle(seed in 0u64..1000, eps in 0.0f64..0.9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let logits = Tensor::randn(&[8, 5], 3.0, &mut rng);
            let targets: Vec<usize> = (0..8).map(|i| (i * 7 + seed as usize) % 5).collect();
            let (l, _) = ce_label_smoothing(&logits, &targets, eps).unwrap();
            prop_assert!((l - ce_oracle(logits.data(), 5, &targets, eps)).abs() < 1e-6);
        }

        #[test]
        fn triplet_matches_oracle_and_is_permutation_invariant(seed in 0u64..1000, m in 0.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ids = pk_ids(4, 4);
            let emb = Tensor::randn(&[16, 16], 1.0, &mut rng);
            let (l, _) = batch_hard_triplet(&emb, &ids, m).unwrap();
            prop_assert!((l - triplet_oracle(emb.data(), 16, &ids, m)).abs() < 1e-6);

            let perm: Vec<usize> = (0..16).map(|i| (i * 5 + seed as usize) % 16).collect();
            let data: Vec<f32> = perm.iter().flat_map(|&i| emb.data()[i * 16..(i + 1) * 16].to_vec()).collect();
            let pids: Vec<usize> = perm.iter().map(|&i| ids[i]).collect();
            let (lp, _) = batch_hard_triplet(&Tensor::from_vec(&[16, 16], data).unwrap(), &pids, m).unwrap();
            prop_assert!((l - lp).abs() < 1e-9);
        }
    }
}
