use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::graph::KnowledgeGraph;
use super::vocab::{RelationId, Symbols, Triple};

/// Train/dev/test partition plus the target-relation slice of test.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Triple>,
    pub dev: Vec<Triple>,
    pub test: Vec<Triple>,
    pub target_test: Vec<Triple>,
    pub target_relation: RelationId,
    /// Positions in the source triple list, per split.
    pub indices: [Vec<usize>; 3],
}

/// On-disk record of a split: indices into the deduplicated triple list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub version: u32,
    pub seed: u64,
    pub strategy: String,
    pub target_relation: String,
    pub train: Vec<usize>,
    pub dev: Vec<usize>,
    pub test: Vec<usize>,
}

const EPS: f64 = 1e-9;

/// Uniform shuffle then ratio partition: train and dev sizes are rounded
/// down, test takes the remainder.
pub fn split_dataset(
    kg: &KnowledgeGraph,
    ratios: (f64, f64, f64),
    target_relation: RelationId,
    seed: u64,
) -> Result<DatasetSplit> {
    let (a, b, c) = ratios;
    if !(a > 0.0 && b > 0.0 && c > 0.0) || ((a + b + c) - 1.0).abs() > EPS {
        return Err(Error::Config(format!("split ratios {ratios:?} must be positive and sum to 1")));
    }
    check_relation(kg, target_relation)?;
    let n = kg.triples().len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64) * a + EPS).floor() as usize;
    let n_dev = (((n as f64) * b + EPS).floor() as usize).min(n - n_train);
    let train = order[..n_train].to_vec();
    let dev = order[n_train..n_train + n_dev].to_vec();
    let test = order[n_train + n_dev..].to_vec();
    Ok(assemble(kg, [train, dev, test], target_relation))
}

/// Holds out a `fraction` of one relation's triples as the test (and
/// target) set; every other triple goes to train. Dev is left empty.
pub fn holdout_relation(kg: &KnowledgeGraph, relation: RelationId, fraction: f64, seed: u64) -> Result<DatasetSplit> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("holdout fraction {fraction} must lie in (0, 1)")));
    }
    check_relation(kg, relation)?;
    let mut candidates: Vec<usize> = (0..kg.triples().len())
        .filter(|&i| kg.triples()[i].relation == relation)
        .collect();
    candidates.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_hold = if candidates.is_empty() {
        0
    } else {
        (((candidates.len() as f64) * fraction + EPS).floor() as usize).max(1)
    };
    let mut test = candidates[..n_hold].to_vec();
    test.sort_unstable();
    let mut held = vec![false; kg.triples().len()];
    for &i in &test {
        held[i] = true;
    }
    let train = (0..kg.triples().len()).filter(|&i| !held[i]).collect();
    Ok(assemble(kg, [train, Vec::new(), test], relation))
}

fn check_relation(kg: &KnowledgeGraph, r: RelationId) -> Result<()> {
    if r.index() >= kg.num_relations() {
        return Err(Error::Data(format!("target relation {r} is not in the vocabulary")));
    }
    Ok(())
}

fn assemble(kg: &KnowledgeGraph, indices: [Vec<usize>; 3], target_relation: RelationId) -> DatasetSplit {
    let pick = |idx: &[usize]| idx.iter().map(|&i| kg.triples()[i]).collect::<Vec<_>>();
    let train = pick(&indices[0]);
    let dev = pick(&indices[1]);
    let test = pick(&indices[2]);
    let target_test = test.iter().copied().filter(|t| t.relation == target_relation).collect();
    DatasetSplit {
        train,
        dev,
        test,
        target_test,
        target_relation,
        indices,
    }
}

impl DatasetSplit {
    pub fn to_manifest(&self, seed: u64, strategy: &str, symbols: &Symbols) -> SplitManifest {
        SplitManifest {
            version: 1,
            seed,
            strategy: strategy.to_owned(),
            target_relation: symbols.relation_name(self.target_relation).to_owned(),
            train: self.indices[0].clone(),
            dev: self.indices[1].clone(),
            test: self.indices[2].clone(),
        }
    }

    /// Rebuilds a split from a manifest; indices must partition the triples.
    pub fn from_manifest(kg: &KnowledgeGraph, manifest: &SplitManifest, symbols: &Symbols) -> Result<Self> {
        let target = symbols.relation(&manifest.target_relation)?;
        let n = kg.triples().len();
        let mut seen = vec![false; n];
        for &i in manifest.train.iter().chain(&manifest.dev).chain(&manifest.test) {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Data(format!("split manifest index {i} is out of range or repeated")));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Data("split manifest does not cover every triple".into()));
        }
        Ok(assemble(
            kg,
            [manifest.train.clone(), manifest.dev.clone(), manifest.test.clone()],
            target,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain(n: u32) -> KnowledgeGraph {
        let triples = (0..n).map(|i| Triple::new(i, 0, i + 1)).collect();
        KnowledgeGraph::new(n as usize + 1, 2, triples).unwrap()
    }

    #[test]
    fn ten_triples_split_eight_one_one() {
        let s = split_dataset(&chain(10), (0.8, 0.1, 0.1), RelationId(0), 1).unwrap();
        assert_eq!((s.train.len(), s.dev.len(), s.test.len()), (8, 1, 1));
        assert_eq!(s.target_test, s.test);
    }

    #[test]
    fn partition_is_disjoint_and_covering() {
        let kg = chain(37);
        let s = split_dataset(&kg, (0.8, 0.1, 0.1), RelationId(0), 9).unwrap();
        let mut all: Vec<usize> = s.indices.concat();
        all.sort_unstable();
        assert_eq!(all, (0..37).collect::<Vec<_>>());
    }

    #[test]
    fn bad_ratios_and_relation_are_rejected() {
        let kg = chain(5);
        assert!(split_dataset(&kg, (0.8, 0.1, 0.2), RelationId(0), 0).is_err());
        assert!(split_dataset(&kg, (0.9, 0.1, 0.0), RelationId(0), 0).is_err());
        assert!(split_dataset(&kg, (0.8, 0.1, 0.1), RelationId(7), 0).is_err());
    }

    #[test]
    fn holdout_only_takes_the_relation() {
        let mut triples: Vec<Triple> = (0..20).map(|i| Triple::new(i, 0, i + 1)).collect();
        triples.extend((0..10).map(|i| Triple::new(i, 1, i + 2)));
        let kg = KnowledgeGraph::new(22, 2, triples).unwrap();
        let s = holdout_relation(&kg, RelationId(1), 0.1, 3).unwrap();
        assert_eq!(s.test.len(), 1);
        assert_eq!(s.train.len(), 29);
        assert!(s.test.iter().all(|t| t.relation == RelationId(1)));
        assert_eq!(s.target_test, s.test);
    }
}
