//! Synthetic in-context task families, prompt layout and episode sampling.
//!
//! All families share one query bank, so a bare query says nothing about which
//! task is active; the demonstrations carry that information. Vocabulary:
//!
//! | ids        | role                              |
//! |------------|-----------------------------------|
//! | 0          | separator `→`                     |
//! | 1..=128    | query bank                        |
//! | 129..=256  | random-bijection labels           |
//! | 257..=384  | fixed-offset labels               |
//! | 385..=512  | bank-translation labels           |
//! | 513..=516  | class-map labels                  |

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SEPARATOR: u32 = 0;
pub const QUERY_BANK_SIZE: usize = 128;
pub const N_CLASSES: usize = 4;
pub const VOCAB_SIZE: usize = 520;

const QUERY_START: u32 = 1;
const RB_START: u32 = QUERY_START + QUERY_BANK_SIZE as u32;
const OFFSET_START: u32 = RB_START + QUERY_BANK_SIZE as u32;
const TRANSLATION_START: u32 = OFFSET_START + QUERY_BANK_SIZE as u32;
const CLASS_START: u32 = TRANSLATION_START + QUERY_BANK_SIZE as u32;

/// Seed for the fixed structure (pairings, class assignment) of the catalog.
const CATALOG_SEED: u64 = 0x5eed_ca7a_1065;

pub const RANDOM_BIJECTION: &str = "random-bijection";
pub const FIXED_OFFSET: &str = "fixed-offset";
pub const BANK_TRANSLATION: &str = "bank-translation";
pub const CLASS_MAP: &str = "class-map";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FamilyKind {
    /// Per-episode mapping `q_i ↦ L[i ⊕ m]` with the mask `m` drawn uniformly.
    /// Every query takes each label under exactly one mask, so without
    /// demonstrations the label is uniform over the bank.
    RandomBijection,
    /// `q_i ↦ L[(i + k) mod |L|]`.
    FixedOffset { k: usize },
    /// Fixed random pairing of the query bank with its own label bank.
    BankTranslation { pairing: Vec<usize> },
    /// Many-to-one map onto a small label bank.
    ClassMap { classes: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskFamily {
    pub name: String,
    pub kind: FamilyKind,
    pub query_bank: Vec<u32>,
    pub label_bank: Vec<u32>,
}

/// A function from query-bank index to label token.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mapping {
    labels: Vec<u32>,
}

impl Mapping {
    pub fn label_of(&self, query: u32) -> Option<u32> {
        let idx = query.checked_sub(QUERY_START)? as usize;
        self.labels.get(idx).copied()
    }

    pub fn example(&self, query: u32) -> Example {
        Example {
            query,
            label: self.label_of(query).expect("query from the shared bank"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub query: u32,
    pub label: u32,
}

fn bank(start: u32, len: usize) -> Vec<u32> {
    (start..start + len as u32).collect()
}

impl TaskFamily {
    pub fn random_bijection() -> Self {
        Self {
            name: RANDOM_BIJECTION.into(),
            kind: FamilyKind::RandomBijection,
            query_bank: bank(QUERY_START, QUERY_BANK_SIZE),
            label_bank: bank(RB_START, QUERY_BANK_SIZE),
        }
    }

    pub fn fixed_offset(k: usize) -> Self {
        Self {
            name: FIXED_OFFSET.into(),
            kind: FamilyKind::FixedOffset { k },
            query_bank: bank(QUERY_START, QUERY_BANK_SIZE),
            label_bank: bank(OFFSET_START, QUERY_BANK_SIZE),
        }
    }

    pub fn bank_translation() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(CATALOG_SEED);
        let mut pairing: Vec<usize> = (0..QUERY_BANK_SIZE).collect();
        pairing.shuffle(&mut rng);
        Self {
            name: BANK_TRANSLATION.into(),
            kind: FamilyKind::BankTranslation { pairing },
            query_bank: bank(QUERY_START, QUERY_BANK_SIZE),
            label_bank: bank(TRANSLATION_START, QUERY_BANK_SIZE),
        }
    }

    pub fn class_map() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(CATALOG_SEED ^ 1);
        let mut classes: Vec<usize> = (0..QUERY_BANK_SIZE).map(|i| i % N_CLASSES).collect();
        classes.shuffle(&mut rng);
        Self {
            name: CLASS_MAP.into(),
            kind: FamilyKind::ClassMap { classes },
            query_bank: bank(QUERY_START, QUERY_BANK_SIZE),
            label_bank: bank(CLASS_START, N_CLASSES),
        }
    }

    /// Draws this episode's mapping. Only the random-bijection family
    /// consumes randomness.
    pub fn sample_mapping(&self, rng: &mut impl Rng) -> Mapping {
        let n = self.query_bank.len();
        let labels = match &self.kind {
            FamilyKind::RandomBijection => {
                let mask = rng.random_range(0..self.label_bank.len());
                (0..n).map(|i| self.label_bank[i ^ mask]).collect()
            }
            FamilyKind::FixedOffset { k } => (0..n)
                .map(|i| self.label_bank[(i + k) % self.label_bank.len()])
                .collect(),
            FamilyKind::BankTranslation { pairing } => {
                pairing.iter().map(|&j| self.label_bank[j]).collect()
            }
            FamilyKind::ClassMap { classes } => {
                classes.iter().map(|&c| self.label_bank[c]).collect()
            }
        };
        Mapping { labels }
    }

    /// Random-bijection mapping for a given XOR mask over query indices.
    pub fn xor_mapping(&self, mask: usize) -> Result<Mapping> {
        if !matches!(self.kind, FamilyKind::RandomBijection) || mask >= self.label_bank.len() {
            return Err(Error::Contract(format!(
                "no XOR mapping {mask} for family {}",
                self.name
            )));
        }
        Ok(Mapping {
            labels: (0..self.query_bank.len())
                .map(|i| self.label_bank[i ^ mask])
                .collect(),
        })
    }

    /// Accuracy of uniform guessing over the label bank.
    pub fn chance(&self) -> f64 {
        1.0 / self.label_bank.len() as f64
    }
}

pub fn task_catalog() -> Vec<TaskFamily> {
    vec![
        TaskFamily::random_bijection(),
        TaskFamily::fixed_offset(7),
        TaskFamily::bank_translation(),
        TaskFamily::class_map(),
    ]
}

pub fn family_by_name(name: &str) -> Result<TaskFamily> {
    task_catalog()
        .into_iter()
        .find(|f| f.name == name)
        .ok_or_else(|| Error::Config(format!("unknown task family '{name}'")))
}

/// `X₁ S Y₁ … X_N S Y_N X_q S`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodePrompt {
    pub tokens: Vec<u32>,
    /// One per demonstration plus the final one; strictly increasing.
    pub separator_positions: Vec<usize>,
    pub n_examples: usize,
    /// The query whose label is held out as gold.
    pub final_query: Example,
}

impl EpisodePrompt {
    pub fn final_separator(&self) -> usize {
        *self.separator_positions.last().expect("at least one separator")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

pub fn build_prompt(demonstrations: &[Example], query: Example) -> EpisodePrompt {
    let mut tokens = Vec::with_capacity(3 * demonstrations.len() + 2);
    let mut separator_positions = Vec::with_capacity(demonstrations.len() + 1);
    for ex in demonstrations {
        tokens.push(ex.query);
        separator_positions.push(tokens.len());
        tokens.push(SEPARATOR);
        tokens.push(ex.label);
    }
    tokens.push(query.query);
    separator_positions.push(tokens.len());
    tokens.push(SEPARATOR);
    EpisodePrompt {
        tokens,
        separator_positions,
        n_examples: demonstrations.len(),
        final_query: query,
    }
}

/// Like [`build_prompt`] but rejects prompts longer than `max_seq`.
pub fn build_prompt_checked(
    demonstrations: &[Example],
    query: Example,
    max_seq: usize,
) -> Result<EpisodePrompt> {
    let len = 3 * demonstrations.len() + 2;
    if len > max_seq {
        return Err(Error::SequenceTooLong { len, max_seq });
    }
    Ok(build_prompt(demonstrations, query))
}

/// Recovers the demonstration pairs and the final query from prompt tokens.
pub fn parse_prompt(tokens: &[u32]) -> Result<(Vec<Example>, u32)> {
    if tokens.len() < 2 || tokens.len() % 3 != 2 || *tokens.last().unwrap() != SEPARATOR {
        return Err(Error::Format(format!(
            "token sequence of length {} is not a prompt",
            tokens.len()
        )));
    }
    let mut demos = Vec::new();
    for chunk in tokens[..tokens.len() - 2].chunks_exact(3) {
        if chunk[1] != SEPARATOR || chunk[0] == SEPARATOR || chunk[2] == SEPARATOR {
            return Err(Error::Format("malformed demonstration triple".into()));
        }
        demos.push(Example {
            query: chunk[0],
            label: chunk[2],
        });
    }
    Ok((demos, tokens[tokens.len() - 2]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub n_demonstrations: usize,
    pub n_dummy: usize,
    pub dev_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            n_demonstrations: 10,
            n_dummy: 1,
            dev_fraction: 0.3,
            test_fraction: 0.7,
            seed: 0,
        }
    }
}

/// One episode's disjoint pools under a single sampled mapping.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub family: String,
    pub seed: u64,
    pub mapping: Mapping,
    pub demonstrations: Vec<Example>,
    pub dummies: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
}

impl Episode {
    pub fn dummy(&self) -> Example {
        self.dummies[0]
    }
}

/// Samples disjoint demonstration, dummy, test and dev pools. After removing
/// demonstrations and dummies, `floor(test_fraction · rest)` queries go to
/// test and the remainder to dev.
pub fn sample_split(family: &TaskFamily, spec: &SplitSpec) -> Result<Episode> {
    if (spec.dev_fraction + spec.test_fraction - 1.0).abs() > 1e-12
        || spec.dev_fraction < 0.0
        || spec.test_fraction < 0.0
    {
        return Err(Error::Config("dev and test fractions must sum to 1".into()));
    }
    let labeled = spec.n_demonstrations + spec.n_dummy;
    let available = family.query_bank.len();
    if labeled + 1 > available {
        return Err(Error::InsufficientQueries {
            needed: labeled + 1,
            available,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mapping = family.sample_mapping(&mut rng);
    let mut queries = family.query_bank.clone();
    queries.shuffle(&mut rng);
    let examples: Vec<Example> = queries.iter().map(|&q| mapping.example(q)).collect();
    let (demos, rest) = examples.split_at(spec.n_demonstrations);
    let (dummies, rest) = rest.split_at(spec.n_dummy);
    let n_test = (spec.test_fraction * rest.len() as f64).floor() as usize;
    let (test, dev) = rest.split_at(n_test);
    Ok(Episode {
        family: family.name.clone(),
        seed: spec.seed,
        mapping,
        demonstrations: demos.to_vec(),
        dummies: dummies.to_vec(),
        dev: dev.to_vec(),
        test: test.to_vec(),
    })
}

pub fn sample_episode(family: &TaskFamily, n: usize, seed: u64) -> Result<Episode> {
    sample_split(
        family,
        &SplitSpec {
            n_demonstrations: n,
            seed,
            ..SplitSpec::default()
        },
    )
}

/// One exported episode prompt, serialized as a JSON line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub family: String,
    pub seed: u64,
    pub tokens: Vec<u32>,
}

pub fn write_records(mut w: impl Write, records: &[EpisodeRecord]) -> Result<()> {
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn read_records(r: impl BufRead) -> Result<Vec<EpisodeRecord>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format(e.to_string()))?);
    }
    Ok(out)
}
