//! Bipartite soft matching: partition, key-cosine similarity, top-r link
//! selection, size-weighted merging, and provenance tracking.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A set of tokens with per-token sizes (number of original patches each
/// token represents) and provenance groups (which patches those are).
#[derive(Clone)]
pub struct TokenBatch {
    /// `[L, D]` token matrix.
    pub tokens: Tensor,
    pub sizes: Vec<usize>,
    pub groups: Vec<Vec<usize>>,
}

impl TokenBatch {
    /// Fresh batch where token i is exactly original patch i.
    pub fn from_patches(tokens: Tensor) -> Result<TokenBatch> {
        if tokens.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "token batch must be [L, D], got {:?}",
                tokens.shape()
            )));
        }
        let l = tokens.shape()[0];
        Ok(TokenBatch {
            tokens,
            sizes: vec![1; l],
            groups: (0..l).map(|i| vec![i]).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }

    /// Checks the provenance invariants against the original patch count.
    pub fn check_partition(&self, original_count: usize) -> Result<()> {
        let mut seen = vec![false; original_count];
        for (i, g) in self.groups.iter().enumerate() {
            if g.is_empty() {
                return Err(Error::Contract(format!("group {} is empty", i)));
            }
            if g.len() != self.sizes[i] {
                return Err(Error::Contract(format!(
                    "sizes[{}]={} != group length {}",
                    i,
                    self.sizes[i],
                    g.len()
                )));
            }
            for &p in g {
                if p >= original_count || seen[p] {
                    return Err(Error::Contract(format!(
                        "patch {} missing or duplicated in provenance",
                        p
                    )));
                }
                seen[p] = true;
            }
        }
        if seen.iter().any(|&s| !s) {
            return Err(Error::Contract("provenance does not cover all patches".into()));
        }
        Ok(())
    }
}

/// Per-layer merge quota and its clamping rule.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct MergeSchedule {
    pub r: usize,
    pub num_layers: usize,
}

impl Default for MergeSchedule {
    fn default() -> Self {
        MergeSchedule {
            r: 19,
            num_layers: 12,
        }
    }
}

impl MergeSchedule {
    pub fn new(r: usize, num_layers: usize) -> Self {
        MergeSchedule { r, num_layers }
    }

    /// Effective quota for a layer whose incoming token count is `l_in`.
    pub fn quota(&self, l_in: usize) -> usize {
        self.r.min(l_in / 2)
    }
}

/// Per-layer token counts: `[L0, L1, ..., L_num_layers]`.
pub fn schedule_counts(l0: usize, schedule: &MergeSchedule) -> Vec<usize> {
    let mut counts = Vec::with_capacity(schedule.num_layers + 1);
    let mut l = l0;
    counts.push(l);
    for _ in 0..schedule.num_layers {
        l -= schedule.quota(l);
        counts.push(l);
    }
    counts
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PartitionPolicy {
    /// Even indices to A, odd to B. The deterministic default.
    Alternating,
    /// Reproducible random split from the seed.
    SeededRandom(u64),
}

/// Split `0..l` into the two matching sets.
pub fn partition(l: usize, policy: PartitionPolicy) -> Result<(Vec<usize>, Vec<usize>)> {
    if l < 2 {
        return Err(Error::Degenerate(format!(
            "cannot partition {} token(s) into two sets",
            l
        )));
    }
    match policy {
        PartitionPolicy::Alternating => Ok((
            (0..l).step_by(2).collect(),
            (1..l).step_by(2).collect(),
        )),
        PartitionPolicy::SeededRandom(seed) => {
            let mut idx: Vec<usize> = (0..l).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            idx.shuffle(&mut rng);
            let mut a: Vec<usize> = idx[..l.div_ceil(2)].to_vec();
            let mut b: Vec<usize> = idx[l.div_ceil(2)..].to_vec();
            a.sort_unstable();
            b.sort_unstable();
            Ok((a, b))
        }
    }
}

/// Head-mean keys, then cosine similarity of every A token against every B
/// token. A zero-norm head-mean key is treated as similarity 0 to everything.
pub fn key_similarity(keys: &Tensor, a: &[usize], b: &[usize]) -> Result<Vec<Vec<f64>>> {
    let mean = head_mean_keys(keys)?;
    let d = keys.shape()[2];
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut sims = vec![vec![0.0; b.len()]; a.len()];
    for (ia, &ta) in a.iter().enumerate() {
        let na = norm(&mean[ta]);
        for (ib, &tb) in b.iter().enumerate() {
            let nb = norm(&mean[tb]);
            sims[ia][ib] = if na == 0.0 || nb == 0.0 {
                0.0
            } else {
                let dot: f64 = (0..d).map(|j| mean[ta][j] * mean[tb][j]).sum();
                dot / (na * nb)
            };
        }
    }
    Ok(sims)
}

fn head_mean_keys(keys: &Tensor) -> Result<Vec<Vec<f64>>> {
    let sh = keys.shape();
    if sh.len() != 3 {
        return Err(Error::Shape(format!(
            "keys must be [H, L, d_h], got {:?}",
            sh
        )));
    }
    let (h, l, dh) = (sh[0], sh[1], sh[2]);
    let kv = keys.data();
    let mut mean = vec![vec![0.0; dh]; l];
    for head in 0..h {
        for t in 0..l {
            let row = &kv[(head * l + t) * dh..(head * l + t + 1) * dh];
            for (m, &v) in mean[t].iter_mut().zip(row) {
                *m += v;
            }
        }
    }
    for row in &mut mean {
        for v in row.iter_mut() {
            *v /= h as f64;
        }
    }
    Ok(mean)
}

/// One candidate merge: fold token `source` (in A) into `dest` (in B).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Link {
    pub source: usize,
    pub dest: usize,
    pub similarity: f64,
}

/// Output of bipartite soft matching over one layer's keys.
#[derive(Clone, Debug)]
pub struct MergePlan {
    pub a_indices: Vec<usize>,
    pub b_indices: Vec<usize>,
    /// Best link per A token, in A order.
    pub links: Vec<Link>,
    /// The top-r sublist actually merged, sorted by descending similarity
    /// with ties broken by lower source index, then lower destination index.
    pub kept: Vec<Link>,
    pub protected: Vec<usize>,
}

impl MergePlan {
    /// A plan that merges nothing (used when fewer than 2 tokens remain).
    fn noop(l: usize, protected: &[usize]) -> MergePlan {
        MergePlan {
            a_indices: (0..l).filter(|i| !protected.contains(i)).collect(),
            b_indices: Vec::new(),
            links: Vec::new(),
            kept: Vec::new(),
            protected: protected.to_vec(),
        }
    }
}

/// Bipartite soft matching: partition the non-protected tokens, link each A
/// token to its most similar B token by key cosine similarity, keep the top
/// `min(r, L/2)` links.
pub fn bipartite_soft_match(
    keys: &Tensor,
    r: usize,
    protected: &[usize],
    policy: PartitionPolicy,
) -> Result<MergePlan> {
    let l = keys.shape().get(1).copied().ok_or_else(|| {
        Error::Shape(format!("keys must be [H, L, d_h], got {:?}", keys.shape()))
    })?;
    let eligible: Vec<usize> = (0..l).filter(|i| !protected.contains(i)).collect();
    if eligible.len() < 2 {
        return Ok(MergePlan::noop(l, protected));
    }
    let (a_pos, b_pos) = partition(eligible.len(), policy)?;
    let a_indices: Vec<usize> = a_pos.iter().map(|&p| eligible[p]).collect();
    let b_indices: Vec<usize> = b_pos.iter().map(|&p| eligible[p]).collect();
    let sims = key_similarity(keys, &a_indices, &b_indices)?;

    // Best destination per A token; ties go to the lower destination index.
    let mut links = Vec::with_capacity(a_indices.len());
    for (ia, &source) in a_indices.iter().enumerate() {
        let mut best = 0usize;
        for ib in 1..b_indices.len() {
            if sims[ia][ib] > sims[ia][best] {
                best = ib;
            }
        }
        links.push(Link {
            source,
            dest: b_indices[best],
            similarity: sims[ia][best],
        });
    }

    let mut ranked = links.clone();
    ranked.sort_by(|x, y| {
        y.similarity
            .partial_cmp(&x.similarity)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(x.source.cmp(&y.source))
            .then(x.dest.cmp(&y.dest))
    });
    let quota = r.min(l / 2).min(ranked.len());
    ranked.truncate(quota);
    Ok(MergePlan {
        a_indices,
        b_indices,
        links,
        kept: ranked,
        protected: protected.to_vec(),
    })
}

/// Fold each kept source into its destination by size-weighted mean and
/// reassemble: protected tokens first, then B in original order, then
/// surviving A in original order. Provenance groups are unioned.
pub fn apply_merge(batch: &TokenBatch, plan: &MergePlan) -> Result<TokenBatch> {
    let l = batch.len();
    for link in &plan.kept {
        if link.source >= l || link.dest >= l {
            return Err(Error::Contract(format!(
                "merge plan references token {} outside batch of {}",
                link.source.max(link.dest),
                l
            )));
        }
    }
    let mut merged_into: Vec<Vec<usize>> = vec![Vec::new(); l];
    let mut is_source = vec![false; l];
    for link in &plan.kept {
        merged_into[link.dest].push(link.source);
        is_source[link.source] = true;
    }

    let mut order: Vec<usize> = Vec::with_capacity(l - plan.kept.len());
    order.extend(plan.protected.iter().copied());
    order.extend(plan.b_indices.iter().copied());
    order.extend(plan.a_indices.iter().copied().filter(|&a| !is_source[a]));

    let l_out = order.len();
    let mut weights = vec![0.0; l_out * l];
    let mut sizes = Vec::with_capacity(l_out);
    let mut groups = Vec::with_capacity(l_out);
    for (row, &dest) in order.iter().enumerate() {
        let members: Vec<usize> = std::iter::once(dest)
            .chain(merged_into[dest].iter().copied())
            .collect();
        let total: usize = members.iter().map(|&m| batch.sizes[m]).sum();
        let mut group = Vec::new();
        for &m in &members {
            weights[row * l + m] = batch.sizes[m] as f64 / total as f64;
            group.extend_from_slice(&batch.groups[m]);
        }
        group.sort_unstable();
        sizes.push(total);
        groups.push(group);
    }
    let combine = Tensor::new(weights, &[l_out, l])?;
    let tokens = combine.matmul(&batch.tokens)?;
    Ok(TokenBatch {
        tokens,
        sizes,
        groups,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Independent re-derivation of the kept set: recompute similarities by
    /// normalize-then-dot, enumerate every A token's best link, and sort by
    /// the documented tie-break.
    pub(crate) fn brute_force_kept(
        keys: &Tensor,
        r: usize,
        protected: &[usize],
    ) -> Vec<(usize, usize)> {
        let (h, l, dh) = (keys.shape()[0], keys.shape()[1], keys.shape()[2]);
        let kv = keys.data();
        let mean = |t: usize| -> Vec<f64> {
            (0..dh)
                .map(|j| (0..h).map(|hd| kv[(hd * l + t) * dh + j]).sum::<f64>() / h as f64)
                .collect()
        };
        let cos = |u: &[f64], v: &[f64]| -> f64 {
            let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if nu == 0.0 || nv == 0.0 {
                0.0
            } else {
                u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / (nu * nv)
            }
        };
        let eligible: Vec<usize> = (0..l).filter(|i| !protected.contains(i)).collect();
        if eligible.len() < 2 {
            return Vec::new();
        }
        let a: Vec<usize> = eligible.iter().step_by(2).copied().collect();
        let b: Vec<usize> = eligible.iter().skip(1).step_by(2).copied().collect();
        let mut best: Vec<(usize, usize, f64)> = Vec::new();
        for &s in &a {
            let ms = mean(s);
            let mut choice: Option<(usize, f64)> = None;
            for &d in &b {
                let sim = cos(&ms, &mean(d));
                match choice {
                    Some((_, cs)) if sim <= cs => {}
                    _ => choice = Some((d, sim)),
                }
            }
            let (d, sim) = choice.unwrap();
            best.push((s, d, sim));
        }
        best.sort_by(|x, y| {
            y.2.partial_cmp(&x.2)
                .unwrap()
                .then(x.0.cmp(&y.0))
                .then(x.1.cmp(&y.1))
        });
        best.truncate(r.min(l / 2));
        best.into_iter().map(|(s, d, _)| (s, d)).collect()
    }

    #[test]
    fn partition_alternating_even() {
        let (a, b) = partition(6, PartitionPolicy::Alternating).unwrap();
        assert_eq!(a, vec![0, 2, 4]);
        assert_eq!(b, vec![1, 3, 5]);
    }

    #[test]
    fn partition_alternating_odd() {
        let (a, b) = partition(5, PartitionPolicy::Alternating).unwrap();
        assert_eq!(a, vec![0, 2, 4]);
        assert_eq!(b, vec![1, 3]);
    }

    #[test]
    fn partition_seeded_random_reproducible() {
        let p1 = partition(6, PartitionPolicy::SeededRandom(7)).unwrap();
        let p2 = partition(6, PartitionPolicy::SeededRandom(7)).unwrap();
        assert_eq!(p1, p2);
    }

    #[test]
    fn partition_rejects_degenerate() {
        assert!(matches!(
            partition(1, PartitionPolicy::Alternating),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn key_similarity_identical_and_orthogonal() {
        // Two heads whose means are (1,0), (1,0), (0,1).
        let keys = Tensor::new(
            vec![
                1.0, 0.0, 1.0, 0.0, 0.0, 1.0, // head 0
                1.0, 0.0, 1.0, 0.0, 0.0, 1.0, // head 1
            ],
            &[2, 3, 2],
        )
        .unwrap();
        let sims = key_similarity(&keys, &[0], &[1, 2]).unwrap();
        assert!((sims[0][0] - 1.0).abs() < 1e-15);
        assert!(sims[0][1].abs() < 1e-15);
    }

    #[test]
    fn key_similarity_matches_direct_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let keys = Tensor::randn(&[2, 6, 4], 1.0, &mut rng);
        let (a, b) = partition(6, PartitionPolicy::Alternating).unwrap();
        let sims = key_similarity(&keys, &a, &b).unwrap();
        // Direct normalize-then-dot on head-mean keys.
        let kv = keys.to_vec();
        for (ia, &ta) in a.iter().enumerate() {
            for (ib, &tb) in b.iter().enumerate() {
                let m = |t: usize, j: usize| (kv[(t) * 4 + j] + kv[(6 + t) * 4 + j]) / 2.0;
                let dot: f64 = (0..4).map(|j| m(ta, j) * m(tb, j)).sum();
                let na: f64 = (0..4).map(|j| m(ta, j).powi(2)).sum::<f64>().sqrt();
                let nb: f64 = (0..4).map(|j| m(tb, j).powi(2)).sum::<f64>().sqrt();
                assert!((sims[ia][ib] - dot / (na * nb)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_norm_key_has_zero_similarity() {
        let keys = Tensor::new(vec![0.0, 0.0, 1.0, 1.0], &[1, 2, 2]).unwrap();
        let sims = key_similarity(&keys, &[0], &[1]).unwrap();
        assert_eq!(sims[0][0], 0.0);
    }

    #[test]
    fn match_tie_break_prefers_lower_indices() {
        // t0, t1, t2 identical; t3 orthogonal. A = {0, 2}, B = {1, 3}.
        let keys = Tensor::new(
            vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0],
            &[1, 4, 2],
        )
        .unwrap();
        let plan = bipartite_soft_match(&keys, 1, &[], PartitionPolicy::Alternating).unwrap();
        assert_eq!(plan.kept.len(), 1);
        assert_eq!((plan.kept[0].source, plan.kept[0].dest), (0, 1));
        assert!((plan.kept[0].similarity - 1.0).abs() < 1e-12);
    }

    #[test]
    fn r_zero_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let keys = Tensor::randn(&[1, 6, 4], 1.0, &mut rng);
        let plan = bipartite_soft_match(&keys, 0, &[], PartitionPolicy::Alternating).unwrap();
        assert!(plan.kept.is_empty());
        let tokens = Tensor::randn(&[6, 4], 1.0, &mut rng);
        let batch = TokenBatch::from_patches(tokens).unwrap();
        let out = apply_merge(&batch, &plan).unwrap();
        assert_eq!(out.len(), 6);
        out.check_partition(6).unwrap();
    }

    #[test]
    fn kept_matches_brute_force_for_small_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for case in 0..50 {
            let l = 4 + (case % 5);
            let keys = Tensor::randn(&[2, l, 3], 1.0, &mut rng);
            for r in 0..=l / 2 {
                let plan =
                    bipartite_soft_match(&keys, r, &[], PartitionPolicy::Alternating).unwrap();
                let got: Vec<(usize, usize)> =
                    plan.kept.iter().map(|k| (k.source, k.dest)).collect();
                assert_eq!(got, brute_force_kept(&keys, r, &[]), "L={l} r={r}");
            }
        }
    }

    #[test]
    fn weighted_mean_merge_arithmetic() {
        // a=(0,0) size 1 merged into b=(3,0) size 2 -> (2,0) size 3.
        let tokens = Tensor::new(vec![0.0, 0.0, 3.0, 0.0], &[2, 2]).unwrap();
        let batch = TokenBatch {
            tokens,
            sizes: vec![1, 2],
            groups: vec![vec![0], vec![1, 2]],
        };
        let plan = MergePlan {
            a_indices: vec![0],
            b_indices: vec![1],
            links: vec![Link {
                source: 0,
                dest: 1,
                similarity: 1.0,
            }],
            kept: vec![Link {
                source: 0,
                dest: 1,
                similarity: 1.0,
            }],
            protected: vec![],
        };
        let out = apply_merge(&batch, &plan).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out.sizes, vec![3]);
        assert_eq!(out.groups, vec![vec![0, 1, 2]]);
        let v = out.tokens.to_vec();
        assert!((v[0] - 2.0).abs() < 1e-12 && v[1].abs() < 1e-12);
    }

    #[test]
    fn merge_conserves_sizes_and_centroid() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..100 {
            let l = 8;
            let d = 4;
            let keys = Tensor::randn(&[2, l, 3], 1.0, &mut rng);
            let tokens = Tensor::randn(&[l, d], 1.0, &mut rng);
            let batch = TokenBatch::from_patches(tokens).unwrap();
            let plan = bipartite_soft_match(&keys, 3, &[], PartitionPolicy::Alternating).unwrap();
            let out = apply_merge(&batch, &plan).unwrap();
            assert_eq!(out.sizes.iter().sum::<usize>(), l);
            out.check_partition(l).unwrap();
            assert_eq!(out.len(), l - plan.kept.len());
            // Centroid conservation.
            let before = batch.tokens.to_vec();
            let after = out.tokens.to_vec();
            for j in 0..d {
                let cb: f64 = (0..l).map(|i| before[i * d + j]).sum();
                let ca: f64 = (0..out.len())
                    .map(|i| out.sizes[i] as f64 * after[i * d + j])
                    .sum();
                assert!((cb - ca).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn protected_tokens_survive_verbatim_and_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let keys = Tensor::randn(&[1, 7, 3], 1.0, &mut rng);
        let tokens = Tensor::randn(&[7, 4], 1.0, &mut rng);
        let batch = TokenBatch::from_patches(tokens).unwrap();
        let plan = bipartite_soft_match(&keys, 2, &[0], PartitionPolicy::Alternating).unwrap();
        for link in &plan.kept {
            assert_ne!(link.source, 0);
            assert_ne!(link.dest, 0);
        }
        let out = apply_merge(&batch, &plan).unwrap();
        assert_eq!(out.groups[0], vec![0]);
        assert_eq!(out.sizes[0], 1);
        let before = batch.tokens.to_vec();
        let after = out.tokens.to_vec();
        assert!(before[..4]
            .iter()
            .zip(&after[..4])
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn schedule_default_reaches_28() {
        let counts = schedule_counts(256, &MergeSchedule::default());
        assert_eq!(counts.len(), 13);
        assert_eq!(*counts.last().unwrap(), 28);
    }

    #[test]
    fn schedule_r10_reaches_136() {
        let counts = schedule_counts(256, &MergeSchedule::new(10, 12));
        assert_eq!(*counts.last().unwrap(), 136);
    }

    #[test]
    fn schedule_clamps_small_inputs() {
        let counts = schedule_counts(20, &MergeSchedule::new(19, 12));
        assert_eq!(
            counts,
            vec![20, 10, 5, 3, 2, 1, 1, 1, 1, 1, 1, 1, 1]
        );
    }
}
