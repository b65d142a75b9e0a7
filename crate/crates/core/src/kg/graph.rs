use std::collections::HashSet;

use crate::error::{Error, Result};

use super::vocab::{EntityId, RelationId, Triple};

/// Whether the stored entity is the head (`Out`) or tail (`In`) of the edge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    Out,
    In,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Neighbor {
    pub entity: EntityId,
    pub direction: Direction,
}

/// Triples plus per-relation, direction-tagged adjacency.
///
/// `adjacency[r][e]` lists the neighbors of `e` under relation `r` in triple
/// order; each triple contributes one `Out` entry at its head and one `In`
/// entry at its tail.
#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeGraph {
    num_entities: usize,
    num_relations: usize,
    triples: Vec<Triple>,
    adjacency: Vec<Vec<Vec<Neighbor>>>,
}

impl KnowledgeGraph {
    pub fn new(num_entities: usize, num_relations: usize, triples: Vec<Triple>) -> Result<Self> {
        for t in &triples {
            if t.head.index() >= num_entities || t.tail.index() >= num_entities {
                return Err(Error::Data(format!("triple {t:?} references an entity outside 0..{num_entities}")));
            }
            if t.relation.index() >= num_relations {
                return Err(Error::Data(format!("triple {t:?} references a relation outside 0..{num_relations}")));
            }
        }
        let adjacency = build_adjacency(num_entities, num_relations, &triples);
        Ok(KnowledgeGraph {
            num_entities,
            num_relations,
            triples,
            adjacency,
        })
    }

    /// Same vocabulary, different triple set (e.g. the training portion).
    pub fn with_triples(&self, triples: Vec<Triple>) -> Result<Self> {
        KnowledgeGraph::new(self.num_entities, self.num_relations, triples)
    }

    pub fn num_entities(&self) -> usize {
        self.num_entities
    }

    pub fn num_relations(&self) -> usize {
        self.num_relations
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn neighbors(&self, relation: RelationId, entity: EntityId) -> &[Neighbor] {
        &self.adjacency[relation.index()][entity.index()]
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().flatten().map(Vec::len).sum()
    }

    pub fn triple_set(&self) -> HashSet<Triple> {
        self.triples.iter().copied().collect()
    }

    /// True when the stored adjacency is exactly what the triples imply.
    pub fn adjacency_consistent(&self) -> bool {
        self.adjacency == build_adjacency(self.num_entities, self.num_relations, &self.triples)
    }
}

fn build_adjacency(num_entities: usize, num_relations: usize, triples: &[Triple]) -> Vec<Vec<Vec<Neighbor>>> {
    let mut adj = vec![vec![Vec::new(); num_entities]; num_relations];
    for t in triples {
        let per_rel = &mut adj[t.relation.index()];
        per_rel[t.head.index()].push(Neighbor {
            entity: t.tail,
            direction: Direction::Out,
        });
        per_rel[t.tail.index()].push(Neighbor {
            entity: t.head,
            direction: Direction::In,
        });
    }
    adj
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adjacency_has_two_entries_per_triple() {
        let kg = KnowledgeGraph::new(3, 2, vec![Triple::new(0, 0, 1), Triple::new(1, 1, 2)]).unwrap();
        assert_eq!(kg.edge_count(), 4);
        assert!(kg.adjacency_consistent());
        assert_eq!(
            kg.neighbors(RelationId(0), EntityId(1)),
            &[Neighbor {
                entity: EntityId(0),
                direction: Direction::In
            }]
        );
    }

    #[test]
    fn rejects_out_of_vocabulary_ids() {
        assert!(KnowledgeGraph::new(2, 1, vec![Triple::new(0, 0, 2)]).is_err());
        assert!(KnowledgeGraph::new(2, 1, vec![Triple::new(0, 1, 1)]).is_err());
    }
}
