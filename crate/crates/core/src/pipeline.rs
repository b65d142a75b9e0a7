//! Dataset directories and the end-to-end two-stage run.
//!
//! A dataset directory holds `triples.tsv`, an optional `texts.jsonl` and,
//! once split, `split.json`.

use std::collections::HashSet;
use std::path::Path;

use log::warn;

use crate::config::{FeatureSource, ModelConfig};
use crate::error::{Error, Result};
use crate::gnn::GraphIndex;
use crate::kg::{
    load_entity_texts, load_triples, write_entity_texts, write_triples, DatasetSplit, EntityTexts, KnowledgeGraph,
    SplitManifest, Symbols, SyntheticKg, Triple,
};
use crate::model::ModelState;
use crate::text::RawTexts;
use crate::train::{train_stage1, train_stage2, GraphData, TrainOptions};

pub const TRIPLES_FILE: &str = "triples.tsv";
pub const TEXTS_FILE: &str = "texts.jsonl";
pub const SPLIT_FILE: &str = "split.json";

#[derive(Clone, Debug)]
pub struct Dataset {
    pub symbols: Symbols,
    /// Every known triple (train, dev and test).
    pub kg: KnowledgeGraph,
    pub texts: EntityTexts,
    pub split: Option<DatasetSplit>,
}

impl Dataset {
    pub fn new(symbols: Symbols, triples: Vec<Triple>, texts: EntityTexts) -> Result<Self> {
        let kg = KnowledgeGraph::new(symbols.entities.len(), symbols.relations.len(), triples)?;
        Ok(Dataset {
            symbols,
            kg,
            texts,
            split: None,
        })
    }

    pub fn from_synthetic(s: SyntheticKg) -> Self {
        Dataset {
            symbols: s.symbols,
            kg: s.kg,
            texts: s.texts,
            split: None,
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mut symbols = Symbols::new();
        let triples = load_triples(&dir.join(TRIPLES_FILE), &mut symbols)?.triples;
        let text_path = dir.join(TEXTS_FILE);
        let texts = if text_path.exists() {
            let load = load_entity_texts(&text_path, &symbols)?;
            if !load.rejected.is_empty() {
                warn!("{}: ignored {} texts for unknown entities", text_path.display(), load.rejected.len());
            }
            load.texts
        } else {
            EntityTexts::new()
        };
        let mut ds = Dataset::new(symbols, triples, texts)?;
        let split_path = dir.join(SPLIT_FILE);
        if split_path.exists() {
            let text = std::fs::read_to_string(&split_path).map_err(|e| Error::io(&split_path, e))?;
            let manifest: SplitManifest = serde_json::from_str(&text)
                .map_err(|e| Error::Data(format!("{}: {e}", split_path.display())))?;
            ds.split = Some(DatasetSplit::from_manifest(&ds.kg, &manifest, &ds.symbols)?);
        }
        Ok(ds)
    }

    /// Writes triples and texts (not the split).
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_triples(&dir.join(TRIPLES_FILE), self.kg.triples(), &self.symbols)?;
        write_entity_texts(&dir.join(TEXTS_FILE), &self.texts, &self.symbols)
    }

    pub fn save_split(dir: &Path, manifest: &SplitManifest) -> Result<()> {
        let path = dir.join(SPLIT_FILE);
        let json = serde_json::to_string_pretty(manifest)?;
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn split(&self) -> Result<&DatasetSplit> {
        self.split
            .as_ref()
            .ok_or_else(|| Error::Data(format!("dataset has no {SPLIT_FILE}; run the split step first")))
    }

    pub fn train_graph(&self) -> Result<KnowledgeGraph> {
        self.kg.with_triples(self.split()?.train.clone())
    }

    /// Filter set for ranking: every known triple.
    pub fn known_all(&self) -> HashSet<Triple> {
        self.kg.triple_set()
    }

    pub fn raw_texts(&self, config: &ModelConfig) -> Result<RawTexts> {
        let encoder = config.text.build()?;
        RawTexts::encode(&encoder, &self.symbols, &self.texts, self.kg.num_entities())
    }
}

/// Stage 1 from scratch (skipped with random features), then stage 2.
pub fn run_pipeline(ds: &Dataset, config: &ModelConfig) -> Result<(Option<ModelState>, ModelState)> {
    config.validate()?;
    let split = ds.split()?;
    let train_kg = ds.train_graph()?;
    let raw = ds.raw_texts(config)?;
    let stage1 = match config.stage2.features {
        FeatureSource::Text => {
            let mut s1 = ModelState::init_stage1(config, &raw, ds.kg.num_relations())?;
            train_stage1(&mut s1, &split.train, &raw, TrainOptions::default())?;
            Some(s1)
        }
        FeatureSource::Random => None,
    };
    let mut s2 = ModelState::init_stage2(config, stage1.as_ref(), ds.kg.num_entities(), ds.kg.num_relations())?;
    let graph = GraphIndex::new(&train_kg);
    let known = ds.known_all();
    let data = GraphData {
        graph: &graph,
        train: &split.train,
        raw: Some(&raw),
        dev: Some((&split.dev, &known)),
    };
    train_stage2(&mut s2, &data, TrainOptions::default())?;
    Ok((stage1, s2))
}
