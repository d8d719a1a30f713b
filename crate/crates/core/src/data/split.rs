//! Document-level, codex-stratified train/val/test split.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::synth::Page;
use crate::error::{Error, Result};
use crate::rng::{child, rng_from, substream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Train,
    Val,
    Test,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Train, Partition::Val, Partition::Test];

    pub fn name(&self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Val => "val",
            Partition::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Partition> {
        Partition::ALL.into_iter().find(|p| p.name() == s)
    }
}

/// Page ids per partition.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<u32>,
    pub val: Vec<u32>,
    pub test: Vec<u32>,
}

impl Split {
    pub fn get(&self, p: Partition) -> &[u32] {
        match p {
            Partition::Train => &self.train,
            Partition::Val => &self.val,
            Partition::Test => &self.test,
        }
    }

    pub fn partition_of(&self, page_id: u32) -> Option<Partition> {
        Partition::ALL.into_iter().find(|&p| self.get(p).contains(&page_id))
    }
}

/// Largest-remainder apportionment of `n` items to `fractions`.
/// Remainder ties go to the earlier partition.
pub fn apportion(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let quotas: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts = [0usize; 3];
    for (c, q) in counts.iter_mut().zip(&quotas) {
        *c = q.floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let assigned: usize = counts.iter().sum();
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Shuffles each codex's pages and cuts them 70/15/15 (or as given).
pub fn split_documents(pages: &[Page], fractions: [f64; 3], seed: u64) -> Result<Split> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must sum to 1")));
    }
    let mut by_codex: BTreeMap<&str, Vec<u32>> = BTreeMap::new();
    for p in pages {
        by_codex.entry(&p.codex).or_default().push(p.id);
    }
    let stream = substream(seed, "split");
    let mut split = Split::default();
    for (k, (codex, mut ids)) in by_codex.into_iter().enumerate() {
        if ids.len() < 3 {
            return Err(Error::Config(format!(
                "codex {codex} has {} pages; at least 3 are needed for a three-way split",
                ids.len()
            )));
        }
        ids.sort_unstable();
        ids.shuffle(&mut rng_from(child(stream, k as u64)));
        let mut counts = apportion(ids.len(), fractions);
        // Every partition keeps at least one page of every codex.
        for i in 0..3 {
            if counts[i] == 0 && fractions[i] > 0.0 {
                let donor = (0..3).max_by_key(|&j| (counts[j], std::cmp::Reverse(j))).expect("three slots");
                counts[donor] -= 1;
                counts[i] += 1;
            }
        }
        let [a, b, _] = counts;
        split.train.extend_from_slice(&ids[..a]);
        split.val.extend_from_slice(&ids[a..a + b]);
        split.test.extend_from_slice(&ids[a + b..]);
    }
    for part in [&mut split.train, &mut split.val, &mut split.test] {
        part.sort_unstable();
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pages(per_codex: usize, codices: &[&str]) -> Vec<Page> {
        let mut out = Vec::new();
        for (ci, c) in codices.iter().enumerate() {
            for k in 0..per_codex {
                out.push(Page {
                    id: (ci * per_codex + k) as u32,
                    codex: (*c).into(),
                    side: 1,
                    pixels: vec![0],
                    true_year: 0.0,
                    label_year: 0.0,
                    fading: 0.0,
                    mean_stroke_width: 0.0,
                });
            }
        }
        out
    }

    #[test]
    fn twenty_pages_give_14_3_3() {
        let ps = pages(20, &["A", "B", "C"]);
        let s = split_documents(&ps, [0.7, 0.15, 0.15], 9).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (42, 9, 9));
        for codex in ["A", "B", "C"] {
            let count = |ids: &[u32]| ids.iter().filter(|&&i| ps[i as usize].codex == codex).count();
            assert_eq!((count(&s.train), count(&s.val), count(&s.test)), (14, 3, 3));
        }
        assert_eq!(s, split_documents(&ps, [0.7, 0.15, 0.15], 9).unwrap());
    }

    #[test]
    fn too_few_pages_is_an_error() {
        assert!(split_documents(&pages(2, &["A"]), [0.7, 0.15, 0.15], 0).is_err());
        assert!(split_documents(&pages(5, &["A"]), [0.7, 0.2, 0.2], 0).is_err());
    }

    proptest! {
        #[test]
        fn partitions_are_disjoint_and_complete(n in 3usize..40, seed in any::<u64>()) {
            let ps = pages(n, &["A", "B"]);
            let s = split_documents(&ps, [0.7, 0.15, 0.15], seed).unwrap();
            let mut all: Vec<u32> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
            all.sort_unstable();
            let expect: Vec<u32> = (0..2 * n as u32).collect();
            prop_assert_eq!(all, expect);
        }

        #[test]
        fn apportion_sums_to_n(n in 0usize..1000) {
            prop_assert_eq!(apportion(n, [0.7, 0.15, 0.15]).iter().sum::<usize>(), n);
        }
    }
}
