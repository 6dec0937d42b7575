//! Synthetic overshadowing dataset.
//!
//! A knowledge group shares one 4-token background across `P` dominant
//! prompts (distinct entity, shared answer) and one subordinate prompt
//! (its own entity and answer). Every record is `bg ++ [entity]` followed by
//! a single answer token.

mod io;
mod sample;
pub mod templates;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nanoformer::{PAD, PLACEHOLDER};

pub use io::{read_jsonl, write_jsonl, DatasetHeader};
pub use sample::{sample_eval, EvalSplit};

pub const BG_LEN: usize = 4;
pub const PROMPT_LEN: usize = BG_LEN + 1;
/// Prompt plus answer.
pub const RECORD_TOKENS: usize = PROMPT_LEN + 1;
/// Index of the entity token inside a prompt.
pub const ENTITY_POS: usize = BG_LEN;
const RESERVED: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Dominant,
    Subordinate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeGroup {
    pub id: usize,
    pub x_bg: [usize; BG_LEN],
    pub x_dom: Vec<usize>,
    pub y_dom: usize,
    pub x_sub: usize,
    pub y_sub: usize,
}

impl KnowledgeGroup {
    pub fn entities(&self) -> impl Iterator<Item = usize> + '_ {
        self.x_bg
            .iter()
            .chain(&self.x_dom)
            .copied()
            .chain([self.y_dom, self.x_sub, self.y_sub])
    }

    pub fn records(&self) -> Vec<PromptRecord> {
        let prompt = |x: usize| {
            let mut t = self.x_bg.to_vec();
            t.push(x);
            t
        };
        let mut out: Vec<PromptRecord> = self
            .x_dom
            .iter()
            .map(|&x| PromptRecord {
                tokens: prompt(x),
                answer: self.y_dom,
                kind: Kind::Dominant,
                group: self.id,
            })
            .collect();
        out.push(PromptRecord {
            tokens: prompt(self.x_sub),
            answer: self.y_sub,
            kind: Kind::Subordinate,
            group: self.id,
        });
        out
    }

    pub fn check(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = self.entities().find(|&t| !seen.insert(t)) {
            return Err(Error::Input(format!("group {}: entity {dup} repeated", self.id)));
        }
        if self.entities().any(|t| t == PAD || t == PLACEHOLDER) {
            return Err(Error::Input(format!("group {} uses a reserved id", self.id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub tokens: Vec<usize>,
    pub answer: usize,
    pub kind: Kind,
    pub group: usize,
}

impl PromptRecord {
    /// Prompt followed by the answer; the training sequence.
    pub fn sequence(&self) -> Vec<usize> {
        let mut s = self.tokens.clone();
        s.push(self.answer);
        s
    }

    pub fn is_subordinate(&self) -> bool {
        self.kind == Kind::Subordinate
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub popularity: usize,
    pub target_tokens: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn new(popularity: usize, target_tokens: usize, vocab_size: usize, seed: u64) -> Self {
        DatasetSpec {
            popularity,
            target_tokens,
            vocab_size,
            seed,
        }
    }

    pub fn group_count(&self) -> usize {
        self.target_tokens / (RECORD_TOKENS * (self.popularity + 1))
    }

    pub fn required_entities(&self) -> usize {
        self.group_count() * (self.popularity + 3 + BG_LEN)
    }

    /// Smallest vocabulary that fits the disjoint entity pool.
    pub fn min_vocab(&self) -> usize {
        self.required_entities() + RESERVED
    }

    /// Same spec with the vocabulary grown to at least `min_vocab`.
    pub fn fit_vocab(mut self) -> Self {
        self.vocab_size = self.vocab_size.max(self.min_vocab());
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.popularity < 2 {
            return Err(Error::Config(format!("popularity {} < 2", self.popularity)));
        }
        if self.group_count() == 0 {
            return Err(Error::Config(format!(
                "target_tokens {} is below one group ({} tokens)",
                self.target_tokens,
                RECORD_TOKENS * (self.popularity + 1)
            )));
        }
        let available = self.vocab_size.saturating_sub(RESERVED);
        if self.required_entities() > available {
            return Err(Error::VocabExhausted {
                required: self.required_entities(),
                available,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub groups: Vec<KnowledgeGroup>,
    pub records: Vec<PromptRecord>,
}

impl Dataset {
    pub fn token_count(&self) -> usize {
        self.records.len() * RECORD_TOKENS
    }

    pub fn group(&self, id: usize) -> Option<&KnowledgeGroup> {
        self.groups.get(id).filter(|g| g.id == id)
    }

    pub fn subordinate(&self) -> impl Iterator<Item = &PromptRecord> {
        self.records.iter().filter(|r| r.is_subordinate())
    }

    pub fn dominant(&self) -> impl Iterator<Item = &PromptRecord> {
        self.records.iter().filter(|r| !r.is_subordinate())
    }
}

pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut pool: Vec<usize> = (RESERVED..spec.vocab_size).collect();
    pool.shuffle(&mut rng);
    let mut next = pool.into_iter();
    let mut take = || next.next().expect("pool sized by validate");

    let p = spec.popularity;
    let mut groups = Vec::with_capacity(spec.group_count());
    for id in 0..spec.group_count() {
        let x_bg = [take(), take(), take(), take()];
        let x_dom = (0..p).map(|_| take()).collect();
        groups.push(KnowledgeGroup {
            id,
            x_bg,
            x_dom,
            y_dom: take(),
            x_sub: take(),
            y_sub: take(),
        });
    }
    let records = groups.iter().flat_map(KnowledgeGroup::records).collect();
    Ok(Dataset {
        spec: spec.clone(),
        groups,
        records,
    })
}

/// Replaces the entity token of a subordinate prompt with the placeholder.
pub fn make_corrupt(record: &PromptRecord) -> Result<PromptRecord> {
    if record.kind != Kind::Subordinate {
        return Err(Error::Input(format!(
            "make_corrupt needs a subordinate record (group {})",
            record.group
        )));
    }
    if record.tokens.len() != PROMPT_LEN {
        return Err(Error::Input(format!("prompt length {} != {PROMPT_LEN}", record.tokens.len())));
    }
    let mut out = record.clone();
    out.tokens[ENTITY_POS] = PLACEHOLDER;
    Ok(out)
}
