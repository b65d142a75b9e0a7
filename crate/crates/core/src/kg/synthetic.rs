use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::graph::KnowledgeGraph;
use super::vocab::{EntityId, RelationId, Symbols, Triple};
use super::EntityTexts;

/// Relation names of the legal schema, in vocabulary order.
pub const LEGAL_RELATIONS: [&str; 4] = ["base_entry_is", "right_is", "base_law_is", "belongs_to"];

const BASE_ENTRY_IS: u32 = 0;
const RIGHT_IS: u32 = 1;
const BASE_LAW_IS: u32 = 2;
const BELONGS_TO: u32 = 3;

/// Tokens appended to both endpoints of every true link.
pub const TOKENS_PER_LINK: usize = 3;
const MAX_LAWS_PER_AFFAIR: usize = 3;
const MAX_PROVISIONS_PER_AFFAIR: usize = 3;
const LEXICON_SIZE: usize = 600;
const FILLER_TOKENS: usize = 4;

const ONSETS: [&str; 12] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

#[derive(Clone, Debug)]
pub struct SyntheticKg {
    pub symbols: Symbols,
    pub kg: KnowledgeGraph,
    pub texts: EntityTexts,
    pub affairs: Vec<EntityId>,
    pub laws: Vec<EntityId>,
    /// `provisions[law]` lists that law's provisions.
    pub provisions: Vec<Vec<EntityId>>,
    pub rights: Vec<EntityId>,
}

/// Generates a graph over the four-relation legal schema.
///
/// Every `base_entry_is` edge points at a provision of a law the affair is
/// linked to through `base_law_is`, so each one is implied by a two-hop path.
/// Entity texts draw three tokens per incident true link from a shared
/// lexicon, plus a few filler tokens.
pub fn generate_synthetic_kg(n_affairs: usize, n_laws: usize, provisions_per_law: usize, seed: u64) -> Result<SyntheticKg> {
    if n_affairs == 0 || n_laws == 0 || provisions_per_law == 0 {
        return Err(Error::Config("synthetic counts must all be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut symbols = Symbols::new();
    for r in LEGAL_RELATIONS {
        symbols.relations.intern(r);
    }
    let mut ent = |name: String| EntityId(symbols.entities.intern(&name));
    let affairs: Vec<EntityId> = (0..n_affairs).map(|i| ent(format!("affair_{i:04}"))).collect();
    let laws: Vec<EntityId> = (0..n_laws).map(|j| ent(format!("law_{j:03}"))).collect();
    let provisions: Vec<Vec<EntityId>> = (0..n_laws)
        .map(|j| (0..provisions_per_law).map(|k| ent(format!("law_{j:03}_prov_{k:03}"))).collect())
        .collect();
    let rights: Vec<EntityId> = (0..n_affairs).map(|i| ent(format!("right_{i:04}"))).collect();
    let n_entities = symbols.entities.len();

    let mut triples = Vec::new();
    for (i, &affair) in affairs.iter().enumerate() {
        let n_linked = rng.gen_range(1..=MAX_LAWS_PER_AFFAIR.min(n_laws));
        let mut linked: Vec<usize> = index::sample(&mut rng, n_laws, n_linked).into_vec();
        linked.sort_unstable();
        for &j in &linked {
            triples.push(Triple { head: affair, relation: RelationId(BASE_LAW_IS), tail: laws[j] });
        }
        let pool: Vec<EntityId> = linked.iter().flat_map(|&j| provisions[j].iter().copied()).collect();
        let n_prov = rng.gen_range(1..=MAX_PROVISIONS_PER_AFFAIR.min(pool.len()));
        let mut chosen: Vec<usize> = index::sample(&mut rng, pool.len(), n_prov).into_vec();
        chosen.sort_unstable();
        for k in chosen {
            triples.push(Triple { head: affair, relation: RelationId(BASE_ENTRY_IS), tail: pool[k] });
        }
        triples.push(Triple { head: affair, relation: RelationId(RIGHT_IS), tail: rights[i] });
    }
    for (j, provs) in provisions.iter().enumerate() {
        for &p in provs {
            triples.push(Triple { head: p, relation: RelationId(BELONGS_TO), tail: laws[j] });
        }
    }

    let lexicon = build_lexicon(&mut rng);
    let mut words: Vec<Vec<String>> = vec![Vec::new(); n_entities];
    let kind = |e: EntityId| -> &'static str {
        let i = e.index();
        if i < n_affairs {
            "affair"
        } else if i < n_affairs + n_laws {
            "law"
        } else if i < n_affairs + n_laws + n_laws * provisions_per_law {
            "provision"
        } else {
            "right"
        }
    };
    for t in &triples {
        for _ in 0..TOKENS_PER_LINK {
            let w = lexicon.choose(&mut rng).expect("nonempty lexicon").clone();
            words[t.head.index()].push(w.clone());
            words[t.tail.index()].push(w);
        }
    }
    let mut texts = EntityTexts::new();
    for (i, ws) in words.iter_mut().enumerate() {
        for _ in 0..FILLER_TOKENS {
            ws.push(lexicon.choose(&mut rng).expect("nonempty lexicon").clone());
        }
        ws.shuffle(&mut rng);
        let id = EntityId(i as u32);
        texts.insert(id, format!("{} {}", kind(id), ws.join(" ")));
    }

    let kg = KnowledgeGraph::new(n_entities, LEGAL_RELATIONS.len(), triples)?;
    Ok(SyntheticKg {
        symbols,
        kg,
        texts,
        affairs,
        laws,
        provisions,
        rights,
    })
}

fn build_lexicon(rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(LEXICON_SIZE);
    while out.len() < LEXICON_SIZE {
        let syllables = rng.gen_range(2..=3);
        let w: String = (0..syllables)
            .map(|_| format!("{}{}", ONSETS.choose(rng).unwrap(), VOWELS.choose(rng).unwrap()))
            .collect();
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}
