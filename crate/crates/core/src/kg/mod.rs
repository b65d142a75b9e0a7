//! Knowledge-graph data model, file ingestion, splitting and synthetic data.

mod graph;
mod io;
mod split;
mod synthetic;
mod vocab;

pub use graph::{Direction, KnowledgeGraph, Neighbor};
pub use io::{load_entity_texts, load_triples, read_triples, write_entity_texts, write_triples, TextLoad, TripleLoad};
pub use split::{holdout_relation, split_dataset, DatasetSplit, SplitManifest};
pub use synthetic::{generate_synthetic_kg, SyntheticKg, LEGAL_RELATIONS};
pub use vocab::{EntityId, RelationId, SymbolTable, Symbols, Triple};

use std::collections::BTreeMap;

/// Entity description keyed by entity id; at most one per entity.
pub type EntityTexts = BTreeMap<EntityId, String>;
