//! Link-prediction ranking (MR, MRR, Hit@N), top-k prediction and
//! embedding export.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{Direction, EntityId, RelationId, Symbols, Triple};
use crate::linalg::Matrix;
use crate::model::ScoringModel;
use crate::scoring::Polarity;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Raw,
    Filtered,
    /// Report both; only meaningful as a request, never on a single report.
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Head,
    Tail,
    /// Mean of head-side and tail-side metrics.
    Both,
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(Protocol::Raw),
            "filtered" => Ok(Protocol::Filtered),
            "both" => Ok(Protocol::Both),
            _ => Err(Error::Config(format!("unknown protocol {s:?}"))),
        }
    }
}

impl FromStr for Side {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "head" => Ok(Side::Head),
            "tail" => Ok(Side::Tail),
            "both" => Ok(Side::Both),
            _ => Err(Error::Config(format!("unknown side {s:?}"))),
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Raw => "raw",
            Protocol::Filtered => "filtered",
            Protocol::Both => "both",
        })
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Head => "head",
            Side::Tail => "tail",
            Side::Both => "both",
        })
    }
}

/// Rank of `scores[truth]` among the candidates not excluded.
///
/// Ties take the mean of the tied positions, rounded half-up:
/// `better + 1 + ceil(others_tied / 2)`.
pub fn rank_of(scores: &[f64], truth: usize, polarity: Polarity, excluded: impl Fn(usize) -> bool) -> usize {
    let s = scores[truth];
    let mut better = 0usize;
    let mut tied = 0usize;
    for (i, &c) in scores.iter().enumerate() {
        if i == truth || excluded(i) {
            continue;
        }
        if polarity.better(c, s) {
            better += 1;
        } else if c == s {
            tied += 1;
        }
    }
    better + 1 + tied.div_ceil(2)
}

fn check_ids(model: &ScoringModel, triple: &Triple) -> Result<()> {
    for e in [triple.head, triple.tail] {
        if e.index() >= model.num_entities() {
            return Err(Error::Unknown {
                kind: "entity",
                name: e.to_string(),
            });
        }
    }
    if triple.relation.index() >= model.num_relations() {
        return Err(Error::Unknown {
            kind: "relation",
            name: triple.relation.to_string(),
        });
    }
    Ok(())
}

/// Scores of every candidate replacing one side of `triple`.
fn candidate_scores(model: &ScoringModel, triple: &Triple, replace_head: bool) -> Vec<f64> {
    let (h, r, t) = (triple.head.index(), triple.relation.index(), triple.tail.index());
    (0..model.num_entities())
        .map(|e| if replace_head { model.score(e, r, t) } else { model.score(h, r, e) })
        .collect()
}

/// Rank of `triple` on one side (`Side::Both` is not a single rank).
pub fn rank_triple(
    model: &ScoringModel,
    triple: &Triple,
    side: Side,
    protocol: Protocol,
    known: &HashSet<Triple>,
) -> Result<usize> {
    check_ids(model, triple)?;
    let replace_head = match side {
        Side::Head => true,
        Side::Tail => false,
        Side::Both => return Err(Error::Config("rank_triple needs a single side".into())),
    };
    let filtered = match protocol {
        Protocol::Raw => false,
        Protocol::Filtered => true,
        Protocol::Both => return Err(Error::Config("rank_triple needs a single protocol".into())),
    };
    let scores = candidate_scores(model, triple, replace_head);
    let truth = if replace_head { triple.head.index() } else { triple.tail.index() };
    let swap = |e: usize| {
        let e = EntityId(e as u32);
        if replace_head {
            Triple { head: e, ..*triple }
        } else {
            Triple { tail: e, ..*triple }
        }
    };
    Ok(rank_of(&scores, truth, model.spec.polarity(), |e| filtered && known.contains(&swap(e))))
}

/// MR, MRR and hits over a set of ranks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mr: f64,
    pub mrr: f64,
    pub hit1: f64,
    pub hit3: f64,
    pub hit10: f64,
    pub n_queries: usize,
}

impl Metrics {
    pub fn from_ranks(ranks: &[usize]) -> Self {
        let n = ranks.len() as f64;
        let frac = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
        Metrics {
            mr: ranks.iter().map(|&r| r as f64).sum::<f64>() / n,
            mrr: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n,
            hit1: frac(1),
            hit3: frac(3),
            hit10: frac(10),
            n_queries: ranks.len(),
        }
    }

    fn average(a: &Metrics, b: &Metrics) -> Self {
        Metrics {
            mr: (a.mr + b.mr) / 2.0,
            mrr: (a.mrr + b.mrr) / 2.0,
            hit1: (a.hit1 + b.hit1) / 2.0,
            hit3: (a.hit3 + b.hit3) / 2.0,
            hit10: (a.hit10 + b.hit10) / 2.0,
            n_queries: a.n_queries,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub protocol: Protocol,
    pub side: Side,
    #[serde(flatten)]
    pub metrics: Metrics,
    /// Keyed by relation name (or decimal id before [`RankingReport::name_relations`]).
    pub per_relation: BTreeMap<String, Metrics>,
}

impl RankingReport {
    pub fn name_relations(&mut self, symbols: &Symbols) {
        let renamed = std::mem::take(&mut self.per_relation)
            .into_iter()
            .map(|(k, v)| {
                let name = k
                    .parse::<u32>()
                    .ok()
                    .filter(|&i| (i as usize) < symbols.relations.len())
                    .map(|i| symbols.relation_name(RelationId(i)).to_owned())
                    .unwrap_or(k);
                (name, v)
            })
            .collect();
        self.per_relation = renamed;
    }

    pub fn tsv_header() -> &'static str {
        "protocol\tside\tMR\tMRR\tHit@1\tHit@3\tHit@10\tn"
    }

    pub fn tsv_row(&self) -> String {
        let m = &self.metrics;
        format!(
            "{}\t{}\t{:.1}\t{:.3}\t{:.3}\t{:.3}\t{:.3}\t{}",
            self.protocol, self.side, m.mr, m.mrr, m.hit1, m.hit3, m.hit10, m.n_queries
        )
    }
}

fn side_ranks(
    model: &ScoringModel,
    queries: &[Triple],
    side: Side,
    protocol: Protocol,
    known: &HashSet<Triple>,
) -> Result<Vec<usize>> {
    queries
        .par_iter()
        .map(|t| rank_triple(model, t, side, protocol, known))
        .collect()
}

fn metrics_by_relation(queries: &[Triple], ranks: &[usize]) -> BTreeMap<u32, Metrics> {
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (t, &r) in queries.iter().zip(ranks) {
        groups.entry(t.relation.0).or_default().push(r);
    }
    groups.into_iter().map(|(k, v)| (k, Metrics::from_ranks(&v))).collect()
}

/// Ranks every query and aggregates under one protocol.
pub fn evaluate(
    model: &ScoringModel,
    queries: &[Triple],
    known: &HashSet<Triple>,
    protocol: Protocol,
    side: Side,
) -> Result<RankingReport> {
    if queries.is_empty() {
        return Err(Error::Data("no query triples to evaluate".into()));
    }
    if protocol == Protocol::Both {
        return Err(Error::Config("evaluate takes raw or filtered; use evaluate_protocols".into()));
    }
    let one_side = |s: Side| -> Result<(Metrics, BTreeMap<u32, Metrics>)> {
        let ranks = side_ranks(model, queries, s, protocol, known)?;
        Ok((Metrics::from_ranks(&ranks), metrics_by_relation(queries, &ranks)))
    };
    let (metrics, per_rel) = match side {
        Side::Head | Side::Tail => one_side(side)?,
        Side::Both => {
            let (hm, hr) = one_side(Side::Head)?;
            let (tm, tr) = one_side(Side::Tail)?;
            let per = hr
                .iter()
                .map(|(k, h)| (*k, Metrics::average(h, &tr[k])))
                .collect();
            (Metrics::average(&hm, &tm), per)
        }
    };
    Ok(RankingReport {
        protocol,
        side,
        metrics,
        per_relation: per_rel.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
    })
}

/// Raw then filtered for `Protocol::Both`, otherwise the single report.
pub fn evaluate_protocols(
    model: &ScoringModel,
    queries: &[Triple],
    known: &HashSet<Triple>,
    protocol: Protocol,
    side: Side,
) -> Result<Vec<RankingReport>> {
    match protocol {
        Protocol::Both => Ok(vec![
            evaluate(model, queries, known, Protocol::Raw, side)?,
            evaluate(model, queries, known, Protocol::Filtered, side)?,
        ]),
        p => Ok(vec![evaluate(model, queries, known, p, side)?]),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub entity: EntityId,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionList {
    pub entity: EntityId,
    pub relation: RelationId,
    /// `Out`: the query entity is the head and tails are predicted.
    pub direction: Direction,
    pub k: usize,
    pub candidates: Vec<Candidate>,
}

/// Best `k` entities for the open side, most plausible first, ties by id.
pub fn predict_topk(
    model: &ScoringModel,
    entity: EntityId,
    relation: RelationId,
    direction: Direction,
    k: usize,
    exclude_known: Option<&HashSet<Triple>>,
) -> Result<PredictionList> {
    let probe = Triple {
        head: entity,
        relation,
        tail: entity,
    };
    check_ids(model, &probe)?;
    let replace_head = direction == Direction::In;
    let scores = candidate_scores(model, &probe, replace_head);
    let polarity = model.spec.polarity();
    let mut candidates: Vec<Candidate> = scores
        .into_iter()
        .enumerate()
        .map(|(e, score)| Candidate {
            entity: EntityId(e as u32),
            score,
        })
        .filter(|c| match exclude_known {
            None => true,
            Some(known) => {
                let t = if replace_head {
                    Triple { head: c.entity, ..probe }
                } else {
                    Triple { tail: c.entity, ..probe }
                };
                !known.contains(&t)
            }
        })
        .collect();
    candidates.sort_by(|a, b| {
        let ord = a.score.total_cmp(&b.score);
        let ord = match polarity {
            Polarity::LowerBetter => ord,
            Polarity::HigherBetter => ord.reverse(),
        };
        ord.then(a.entity.cmp(&b.entity))
    });
    candidates.truncate(k);
    Ok(PredictionList {
        entity,
        relation,
        direction,
        k,
        candidates,
    })
}

/// Writes `name\tv1\t...\tvd`, one line per entity, shortest round-trip decimals.
pub fn export_embeddings(table: &Matrix, symbols: &Symbols, path: &Path) -> Result<()> {
    if table.rows() != symbols.entities.len() {
        return Err(Error::dim(format!(
            "{} rows for {} entities",
            table.rows(),
            symbols.entities.len()
        )));
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (i, row) in table.iter_rows().enumerate() {
        let mut line = symbols.entity_name(EntityId(i as u32)).to_owned();
        for v in row {
            line.push('\t');
            line.push_str(&v.to_string());
        }
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a file written by [`export_embeddings`].
pub fn load_embeddings(path: &Path) -> Result<(Vec<String>, Matrix)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut names = Vec::new();
    let mut data = Vec::new();
    let mut width = None;
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message,
        };
        let mut fields = line.split('\t');
        let name = fields.next().unwrap_or_default().to_owned();
        let row = fields
            .map(|f| f.parse::<f64>().map_err(|e| parse_err(format!("{f:?}: {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => return Err(parse_err(format!("expected {w} values, got {}", row.len()))),
            _ => {}
        }
        names.push(name);
        data.extend(row);
    }
    let m = Matrix::from_vec(names.len(), width.unwrap_or(0), data)?;
    Ok((names, m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::{RelationEmbeddings, ScoreFnSpec, ScoreKind};

    fn model(entities: &[&[f64]], relation: &[f64], kind: ScoreKind) -> ScoringModel {
        ScoringModel {
            entities: Matrix::from_rows(entities),
            relations: RelationEmbeddings {
                forward: Matrix::from_rows(&[relation]),
                inverse: Matrix::from_rows(&[relation]),
            },
            spec: ScoreFnSpec::of(kind),
        }
    }

    #[test]
    fn strictly_best_is_rank_one() {
        let m = model(&[&[0.0], &[1.0], &[5.0]], &[1.0], ScoreKind::Transe);
        let r = rank_triple(&m, &Triple::new(0, 0, 1), Side::Tail, Protocol::Raw, &HashSet::new()).unwrap();
        assert_eq!(r, 1);
    }

    #[test]
    fn two_way_tie_rounds_half_up() {
        let m = model(&[&[0.0], &[0.0]], &[0.0], ScoreKind::Transe);
        let r = rank_triple(&m, &Triple::new(0, 0, 1), Side::Tail, Protocol::Raw, &HashSet::new()).unwrap();
        assert_eq!(r, 2);
    }

    #[test]
    fn filtered_skips_other_true_tails() {
        let m = model(&[&[0.0], &[1.0], &[2.0]], &[1.2], ScoreKind::Transe);
        let q = Triple::new(0, 0, 2);
        let known: HashSet<_> = [Triple::new(0, 0, 1), q].into_iter().collect();
        assert_eq!(rank_triple(&m, &q, Side::Tail, Protocol::Raw, &known).unwrap(), 2);
        assert_eq!(rank_triple(&m, &q, Side::Tail, Protocol::Filtered, &known).unwrap(), 1);
    }

    #[test]
    fn aggregates_hand_values() {
        let m = Metrics::from_ranks(&[1]);
        assert_eq!((m.mr, m.mrr, m.hit1, m.hit3, m.hit10), (1.0, 1.0, 1.0, 1.0, 1.0));
        let m = Metrics::from_ranks(&[1, 11]);
        assert_eq!(m.mr, 6.0);
        assert!((m.mrr - 0.5454545454545454).abs() < 1e-12);
        assert_eq!(m.hit10, 0.5);
    }

    #[test]
    fn empty_queries_rejected() {
        let m = model(&[&[0.0]], &[0.0], ScoreKind::Transe);
        assert!(evaluate(&m, &[], &HashSet::new(), Protocol::Raw, Side::Tail).is_err());
    }

    #[test]
    fn unknown_ids_rejected() {
        let m = model(&[&[0.0], &[1.0]], &[0.0], ScoreKind::Transe);
        let err = rank_triple(&m, &Triple::new(0, 3, 1), Side::Tail, Protocol::Raw, &HashSet::new());
        assert!(matches!(err, Err(Error::Unknown { kind: "relation", .. })));
    }

    #[test]
    fn topk_one_returns_best_and_exclusion_applies() {
        let m = model(&[&[0.0], &[1.0], &[3.0], &[1.1]], &[1.0], ScoreKind::Transe);
        let p = predict_topk(&m, EntityId(0), RelationId(0), Direction::Out, 1, None).unwrap();
        assert_eq!(p.candidates[0].entity, EntityId(1));
        let known: HashSet<_> = [Triple::new(0, 0, 1)].into_iter().collect();
        let p = predict_topk(&m, EntityId(0), RelationId(0), Direction::Out, 4, Some(&known)).unwrap();
        assert!(p.candidates.iter().all(|c| c.entity != EntityId(1)));
        assert_eq!(p.candidates[0].entity, EntityId(3));
    }

    #[test]
    fn distmult_topk_prefers_high_scores() {
        let m = model(&[&[1.0], &[-1.0], &[2.0]], &[1.0], ScoreKind::Distmult);
        let p = predict_topk(&m, EntityId(0), RelationId(0), Direction::In, 3, None).unwrap();
        let order: Vec<u32> = p.candidates.iter().map(|c| c.entity.0).collect();
        assert_eq!(order, vec![2, 0, 1]);
    }
}
