use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::DatasetManifest;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PkSpec {
    pub p: usize,
    pub k: usize,
    pub seed: u64,
}

impl PkSpec {
    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }
}

/// Identity-balanced batches of `P` identities times `K` records.
///
/// Each epoch splits every identity's shuffled records into chunks of `K`
/// (drawing with replacement when it has fewer than `K`) and repeatedly takes
/// one chunk from each of `P` random identities with chunks left. Identities
/// still unseen when fewer than `P` remain get a final batch padded with
/// random other identities, so every identity appears at least once.
#[derive(Clone, Debug)]
pub struct PkSampler {
    spec: PkSpec,
    by_id: Vec<Vec<usize>>,
}

impl PkSampler {
    pub fn new(manifest: &DatasetManifest, spec: PkSpec) -> Result<Self> {
        if spec.p < 2 || spec.k < 2 {
            return Err(Error::Sampler(format!("P={} and K={} must both be at least 2", spec.p, spec.k)));
        }
        let mut groups: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        for (i, r) in manifest.records.iter().enumerate() {
            groups.entry(r.vehicle_id).or_default().push(i);
        }
        if groups.len() < spec.p {
            return Err(Error::Sampler(format!("{} identities available, P={} required", groups.len(), spec.p)));
        }
        Ok(Self { spec, by_id: groups.into_values().collect() })
    }

    pub fn spec(&self) -> PkSpec {
        self.spec
    }

    fn draw_k(&self, id: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let pool = &self.by_id[id];
        if pool.len() >= self.spec.k {
            pool.choose_multiple(rng, self.spec.k).copied().collect()
        } else {
            (0..self.spec.k).map(|_| pool[rng.random_range(0..pool.len())]).collect()
        }
    }

    /// Record indices of every batch in `epoch`; deterministic in (seed, epoch).
    pub fn epoch(&self, epoch: u64) -> Vec<Vec<usize>> {
        let (p, k) = (self.spec.p, self.spec.k);
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut chunks: Vec<Vec<Vec<usize>>> = (0..self.by_id.len())
            .map(|id| {
                let mut idx = if self.by_id[id].len() < k { self.draw_k(id, &mut rng) } else { self.by_id[id].clone() };
                idx.shuffle(&mut rng);
                idx.chunks_exact(k).map(<[usize]>::to_vec).collect()
            })
            .collect();
        let mut seen = vec![false; self.by_id.len()];
        let mut batches = Vec::new();
        let mut avail: Vec<usize> = (0..self.by_id.len()).collect();
        while avail.len() >= p {
            let picked: Vec<usize> = avail.choose_multiple(&mut rng, p).copied().collect();
            let mut batch = Vec::with_capacity(p * k);
            for &id in &picked {
                batch.extend(chunks[id].pop().expect("available identities have chunks"));
                seen[id] = true;
            }
            avail.retain(|&id| !chunks[id].is_empty());
            batches.push(batch);
        }
        let unseen: Vec<usize> = avail.iter().copied().filter(|&id| !seen[id]).collect();
        if !unseen.is_empty() {
            let others: Vec<usize> = (0..self.by_id.len()).filter(|id| !unseen.contains(id)).collect();
            let mut ids = unseen.clone();
            ids.extend(others.choose_multiple(&mut rng, p - unseen.len()));
            let mut batch = Vec::with_capacity(p * k);
            for &id in &ids {
                match chunks[id].pop() {
                    Some(c) => batch.extend(c),
                    None => batch.extend(self.draw_k(id, &mut rng)),
                }
            }
            batches.push(batch);
        }
        batches
    }
}
