//! Triple score functions, corruption-based negative sampling and the margin
//! ranking loss.

use std::collections::HashSet;
use std::rc::Rc;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::autodiff::{p_norm, Tape, Var};
use crate::error::{Error, Result};
use crate::kg::{EntityId, Triple};
use crate::linalg::{relu, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    Transe,
    Distmult,
    Simple,
}

impl std::str::FromStr for ScoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transe" => Ok(ScoreKind::Transe),
            "distmult" => Ok(ScoreKind::Distmult),
            "simple" => Ok(ScoreKind::Simple),
            other => Err(Error::Config(format!("unknown score function `{other}`"))),
        }
    }
}

/// Whether small or large scores mark plausible triples.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Polarity {
    LowerBetter,
    HigherBetter,
}

impl Polarity {
    /// True when `a` is strictly more plausible than `b`.
    #[inline]
    pub fn better(self, a: f64, b: f64) -> bool {
        match self {
            Polarity::LowerBetter => a < b,
            Polarity::HigherBetter => a > b,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreFnSpec {
    pub variant: ScoreKind,
    pub p_norm: u8,
}

impl Default for ScoreFnSpec {
    fn default() -> Self {
        ScoreFnSpec {
            variant: ScoreKind::Transe,
            p_norm: 2,
        }
    }
}

impl ScoreFnSpec {
    pub fn transe(p_norm: u8) -> Self {
        ScoreFnSpec {
            variant: ScoreKind::Transe,
            p_norm,
        }
    }

    pub fn of(variant: ScoreKind) -> Self {
        ScoreFnSpec { variant, p_norm: 2 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p_norm != 1 && self.p_norm != 2 {
            return Err(Error::Config(format!("p_norm must be 1 or 2, got {}", self.p_norm)));
        }
        Ok(())
    }

    pub fn polarity(&self) -> Polarity {
        match self.variant {
            ScoreKind::Transe => Polarity::LowerBetter,
            ScoreKind::Distmult | ScoreKind::Simple => Polarity::HigherBetter,
        }
    }

    pub fn score(&self, h: &[f64], r: &[f64], r_inv: &[f64], t: &[f64]) -> f64 {
        match self.variant {
            ScoreKind::Transe => score_transe(h, r, t, self.p_norm),
            ScoreKind::Distmult => score_distmult(h, r, t),
            ScoreKind::Simple => score_simple(h, r, r_inv, t),
        }
    }
}

/// `‖h + r − t‖_p`; lower is more plausible.
pub fn score_transe(h: &[f64], r: &[f64], t: &[f64], p: u8) -> f64 {
    let diff: Vec<f64> = h.iter().zip(r).zip(t).map(|((a, b), c)| a + b - c).collect();
    p_norm(&diff, p)
}

/// `Σ h·r·t`; higher is more plausible. Evaluated as `r·(h·t)` so swapping
/// head and tail gives bit-identical scores.
pub fn score_distmult(h: &[f64], r: &[f64], t: &[f64]) -> f64 {
    h.iter().zip(r).zip(t).fold(0.0, |acc, ((a, b), c)| acc + b * (a * c))
}

/// `(Σ h·r·t + Σ h·r_inv·t) / 2`, both terms over the same head and tail vectors.
pub fn score_simple(h: &[f64], r: &[f64], r_inv: &[f64], t: &[f64]) -> f64 {
    (score_distmult(h, r, t) + score_distmult(h, r_inv, t)) * 0.5
}

/// Hinge on the score gap.
pub fn margin_loss(pos: f64, neg: f64, margin: f64, polarity: Polarity) -> f64 {
    match polarity {
        Polarity::LowerBetter => relu(pos - neg + margin),
        Polarity::HigherBetter => relu(neg - pos + margin),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorruptionMode {
    Head,
    Tail,
    Both,
}

/// Draws `n` corrupted copies of `triple`, none of which is in `known`.
///
/// Each sample replaces the head or the tail (a fair coin in `Both` mode)
/// with a uniform entity and retries until the result is unknown, giving up
/// after `100·|E|` attempts.
pub fn sample_negatives(
    triple: Triple,
    known: &HashSet<Triple>,
    num_entities: usize,
    n: usize,
    mode: CorruptionMode,
    rng: &mut impl RngCore,
) -> Result<Vec<Triple>> {
    if n == 0 {
        return Err(Error::Config("negative count must be at least 1".into()));
    }
    if num_entities == 0 {
        return Err(Error::Data("cannot corrupt triples over an empty vocabulary".into()));
    }
    let max_attempts = 100 * num_entities;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let corrupt_head = match mode {
            CorruptionMode::Head => true,
            CorruptionMode::Tail => false,
            CorruptionMode::Both => rng.gen_bool(0.5),
        };
        let mut found = None;
        for _ in 0..max_attempts {
            let e = EntityId(rng.gen_range(0..num_entities) as u32);
            let cand = if corrupt_head {
                Triple { head: e, ..triple }
            } else {
                Triple { tail: e, ..triple }
            };
            if !known.contains(&cand) {
                found = Some(cand);
                break;
            }
        }
        match found {
            Some(c) => out.push(c),
            None => {
                return Err(Error::Data(format!(
                    "no negative found for {triple:?} after {max_attempts} attempts; vocabulary too small"
                )))
            }
        }
    }
    Ok(out)
}

/// Relation vectors: `forward` for every score, `inverse` for SimplE only.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationEmbeddings {
    pub forward: Matrix,
    pub inverse: Matrix,
}

impl RelationEmbeddings {
    /// Uniform on `±6/√d`.
    pub fn uniform(num_relations: usize, d: usize, rng: &mut impl Rng) -> Self {
        let bound = 6.0 / (d as f64).sqrt();
        let mut draw = || {
            let data = (0..num_relations * d).map(|_| rng.gen_range(-bound..=bound)).collect();
            Matrix::from_vec(num_relations, d, data).expect("shape")
        };
        let forward = draw();
        let inverse = draw();
        RelationEmbeddings { forward, inverse }
    }

    pub fn dim(&self) -> usize {
        self.forward.cols()
    }
}

/// Index columns of a triple batch, shared between tape ops.
#[derive(Clone, Debug)]
pub struct TripleBatch {
    pub heads: Rc<[usize]>,
    pub relations: Rc<[usize]>,
    pub tails: Rc<[usize]>,
}

impl TripleBatch {
    pub fn new(triples: &[Triple]) -> Self {
        TripleBatch {
            heads: triples.iter().map(|t| t.head.index()).collect(),
            relations: triples.iter().map(|t| t.relation.index()).collect(),
            tails: triples.iter().map(|t| t.tail.index()).collect(),
        }
    }

    /// Remaps entity columns through `local`, for tables holding a subset of entities.
    pub fn remap(triples: &[Triple], local: impl Fn(EntityId) -> usize) -> Self {
        TripleBatch {
            heads: triples.iter().map(|t| local(t.head)).collect(),
            relations: triples.iter().map(|t| t.relation.index()).collect(),
            tails: triples.iter().map(|t| local(t.tail)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }
}

/// Scores a batch on the tape; returns an n x 1 column.
pub fn score_batch_tape(
    tape: &mut Tape,
    spec: &ScoreFnSpec,
    head_table: Var,
    tail_table: Var,
    rel_forward: Var,
    rel_inverse: Var,
    batch: &TripleBatch,
) -> Var {
    let h = tape.gather_rows(head_table, batch.heads.clone());
    let t = tape.gather_rows(tail_table, batch.tails.clone());
    let r = tape.gather_rows(rel_forward, batch.relations.clone());
    match spec.variant {
        ScoreKind::Transe => {
            let hr = tape.add(h, r);
            let diff = tape.sub(hr, t);
            tape.row_norm(diff, spec.p_norm)
        }
        ScoreKind::Distmult => {
            let ht = tape.mul(h, t);
            let hrt = tape.mul(ht, r);
            tape.row_sum(hrt)
        }
        ScoreKind::Simple => {
            let ri = tape.gather_rows(rel_inverse, batch.relations.clone());
            let ht = tape.mul(h, t);
            let a = tape.mul(ht, r);
            let a = tape.row_sum(a);
            let b = tape.mul(ht, ri);
            let b = tape.row_sum(b);
            let s = tape.add(a, b);
            tape.scale(s, 0.5)
        }
    }
}

/// Mean hinge over paired positive/negative score columns.
pub fn margin_loss_tape(tape: &mut Tape, pos: Var, neg: Var, margin: f64, polarity: Polarity) -> Var {
    let gap = match polarity {
        Polarity::LowerBetter => tape.sub(pos, neg),
        Polarity::HigherBetter => tape.sub(neg, pos),
    };
    let shifted = tape.add_scalar(gap, margin);
    let hinge = tape.relu(shifted);
    tape.mean(hinge)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn transe_examples() {
        assert_eq!(score_transe(&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0], 2), 0.0);
        assert_eq!(score_transe(&[0.0, 0.0], &[3.0, 4.0], &[0.0, 0.0], 2), 5.0);
        assert_eq!(score_transe(&[0.0, 0.0], &[3.0, 4.0], &[0.0, 0.0], 1), 7.0);
    }

    #[test]
    fn distmult_examples() {
        assert_eq!(score_distmult(&[1.5, -2.0], &[0.0, 0.0], &[3.0, 7.0]), 0.0);
        assert_eq!(score_distmult(&[1.0, 2.0], &[1.0, 1.0], &[2.0, 1.0]), 4.0);
    }

    #[test]
    fn simple_examples() {
        let (h, t) = ([0.3, -1.2], [2.0, 0.5]);
        let r = [0.7, 1.1];
        assert_eq!(score_simple(&h, &r, &r, &t), score_distmult(&h, &r, &t));
        assert_eq!(score_simple(&h, &r, &[-0.7, -1.1], &t), 0.0);
        assert_eq!(score_simple(&[1.0, 0.0], &[1.0, 1.0], &[2.0, 2.0], &[0.0, 1.0]), 0.0);
    }

    #[test]
    fn hinge_examples() {
        assert_eq!(margin_loss(0.0, 10.0, 1.0, Polarity::LowerBetter), 0.0);
        assert_eq!(margin_loss(3.0, 3.0, 0.7, Polarity::LowerBetter), 0.7);
        assert_eq!(margin_loss(3.0, 3.0, 0.7, Polarity::HigherBetter), 0.7);
        assert_eq!(margin_loss(2.0, 1.0, 1.0, Polarity::LowerBetter), 2.0);
    }

    #[test]
    fn two_entity_tail_corruption_is_forced() {
        let t = Triple::new(0, 0, 1);
        let known: HashSet<Triple> = [t].into();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let neg = sample_negatives(t, &known, 2, 4, CorruptionMode::Tail, &mut rng).unwrap();
        assert!(neg.iter().all(|n| *n == Triple::new(0, 0, 0)));
    }

    #[test]
    fn negatives_avoid_known_and_are_deterministic() {
        let triples: Vec<Triple> = (0..8).map(|i| Triple::new(i, 0, (i + 1) % 9)).collect();
        let known: HashSet<Triple> = triples.iter().copied().collect();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample_negatives(triples[2], &known, 9, 5, CorruptionMode::Both, &mut rng).unwrap()
        };
        let a = draw(17);
        assert_eq!(a.len(), 5);
        assert!(a.iter().all(|n| !known.contains(n)));
        assert_eq!(a, draw(17));
    }

    #[test]
    fn saturated_vocabulary_errors() {
        // every tail replacement of (0, r, ·) is known
        let known: HashSet<Triple> = [Triple::new(0, 0, 0), Triple::new(0, 0, 1)].into();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_negatives(Triple::new(0, 0, 1), &known, 2, 1, CorruptionMode::Tail, &mut rng).is_err());
    }
}
