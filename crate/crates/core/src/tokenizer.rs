//! Domain-aware byte-level BPE: independent per-domain training, merge into
//! a deduplicated unified vocabulary, and provenance reporting.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::exec::Exec;

pub type Token = Vec<u8>;

/// Splits text into words; whitespace attaches to the word that follows it.
pub fn pre_split(text: &[u8]) -> Vec<&[u8]> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..text.len() {
        if text[i].is_ascii_whitespace() && !text[i - 1].is_ascii_whitespace() {
            out.push(&text[start..i]);
            start = i;
        }
    }
    if start < text.len() {
        out.push(&text[start..]);
    }
    out
}

fn byte_alphabet() -> Vec<Token> {
    (0..=255u8).map(|b| vec![b]).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainCorpus {
    pub name: String,
    pub documents: Vec<Vec<u8>>,
}

impl DomainCorpus {
    pub fn new(
        name: impl Into<String>,
        documents: impl IntoIterator<Item = impl Into<Vec<u8>>>,
    ) -> Self {
        Self {
            name: name.into(),
            documents: documents.into_iter().map(Into::into).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainVocab {
    pub name: String,
    /// Merge rules in the order they were learned.
    pub merges: Vec<(Token, Token)>,
    /// The byte alphabet followed by one token per merge.
    pub tokens: Vec<Token>,
    /// Set when the corpus ran out of pairs before `target_size`.
    pub truncated: bool,
}

/// Greedy BPE: repeatedly merges the most frequent adjacent pair, counting
/// overlapping occurrences; ties go to the lexicographically smallest pair
/// of byte strings.
pub fn train_domain_bpe(corpus: &DomainCorpus, target_size: usize) -> Result<DomainVocab> {
    if corpus.documents.iter().all(Vec::is_empty) {
        bail!(Argument, "domain `{}` has an empty corpus", corpus.name);
    }
    if target_size < 256 {
        bail!(
            Argument,
            "target_size {target_size} is below the 256-byte alphabet"
        );
    }
    let mut word_counts: BTreeMap<&[u8], u64> = BTreeMap::new();
    for doc in &corpus.documents {
        for w in pre_split(doc) {
            *word_counts.entry(w).or_default() += 1;
        }
    }
    let mut words: Vec<(Vec<u32>, u64)> = word_counts
        .into_iter()
        .map(|(w, c)| (w.iter().map(|&b| b as u32).collect(), c))
        .collect();
    let mut tokens = byte_alphabet();
    let mut merges = Vec::new();
    let mut truncated = false;
    while tokens.len() < target_size {
        let mut counts: HashMap<(u32, u32), u64> = HashMap::new();
        for (w, c) in &words {
            for pair in w.windows(2) {
                *counts.entry((pair[0], pair[1])).or_default() += c;
            }
        }
        let best = counts.into_iter().max_by(|(pa, ca), (pb, cb)| {
            ca.cmp(cb).then_with(|| {
                let ka = (&tokens[pa.0 as usize], &tokens[pa.1 as usize]);
                let kb = (&tokens[pb.0 as usize], &tokens[pb.1 as usize]);
                kb.cmp(&ka)
            })
        });
        let Some(((a, b), _)) = best else {
            truncated = true;
            break;
        };
        let id = tokens.len() as u32;
        let mut merged = tokens[a as usize].clone();
        merged.extend_from_slice(&tokens[b as usize]);
        merges.push((tokens[a as usize].clone(), tokens[b as usize].clone()));
        tokens.push(merged);
        for (w, _) in &mut words {
            *w = apply_pair(w, a, b, id);
        }
    }
    Ok(DomainVocab {
        name: corpus.name.clone(),
        merges,
        tokens,
        truncated,
    })
}

fn apply_pair(w: &[u32], a: u32, b: u32, id: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(w.len());
    let mut i = 0;
    while i < w.len() {
        if i + 1 < w.len() && w[i] == a && w[i + 1] == b {
            out.push(id);
            i += 2;
        } else {
            out.push(w[i]);
            i += 1;
        }
    }
    out
}

/// Trains every domain independently.
pub fn train_domains(corpora: &[(DomainCorpus, usize)], exec: Exec) -> Result<Vec<DomainVocab>> {
    exec.map(corpora, |(c, size)| train_domain_bpe(c, *size))
        .into_iter()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Special,
    Domain(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnifiedVocab {
    pub specials: Vec<String>,
    pub domains: Vec<DomainVocab>,
    /// Token bytes by id. Specials occupy the first ids.
    pub tokens: Vec<Token>,
    pub origin: Vec<Origin>,
    /// Merge rules in priority order, deduplicated by pair.
    pub merges: Vec<(u32, u32, u32)>,
    index: HashMap<Token, u32>,
    ranks: HashMap<(u32, u32), (usize, u32)>,
}

/// Union of the domain vocabularies in priority order. Specials take the
/// first ids; every learned token is attributed to the first domain that
/// contains it.
pub fn merge_vocabs(vocabs: &[DomainVocab], specials: &[String]) -> Result<UnifiedVocab> {
    if vocabs.is_empty() {
        bail!(
            Argument,
            "merge_vocabs needs at least one domain vocabulary"
        );
    }
    let mut seen = HashSet::new();
    for s in specials {
        if !seen.insert(s) {
            bail!(Argument, "duplicate special token `{s}`");
        }
    }
    let mut names = HashSet::new();
    for v in vocabs {
        if !names.insert(&v.name) {
            bail!(Argument, "duplicate domain `{}`", v.name);
        }
    }
    let mut tokens: Vec<Token> = specials.iter().map(|s| s.as_bytes().to_vec()).collect();
    let mut origin = vec![Origin::Special; specials.len()];
    let mut index = HashMap::new();
    for (d, v) in vocabs.iter().enumerate() {
        for t in &v.tokens {
            if !index.contains_key(t) {
                index.insert(t.clone(), tokens.len() as u32);
                tokens.push(t.clone());
                origin.push(Origin::Domain(d));
            }
        }
    }
    let mut merges = Vec::new();
    let mut ranks = HashMap::new();
    for v in vocabs {
        for (a, b) in &v.merges {
            let (ia, ib) = (index[a], index[b]);
            if ranks.contains_key(&(ia, ib)) {
                continue;
            }
            let mut m = a.clone();
            m.extend_from_slice(b);
            let im = index[&m];
            ranks.insert((ia, ib), (merges.len(), im));
            merges.push((ia, ib, im));
        }
    }
    Ok(UnifiedVocab {
        specials: specials.to_vec(),
        domains: vocabs.to_vec(),
        tokens,
        origin,
        merges,
        index,
        ranks,
    })
}

impl UnifiedVocab {
    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id_of(&self, token: &[u8]) -> Option<u32> {
        self.index.get(token).copied()
    }

    /// Encodes each pre-split word from bytes by repeatedly applying the
    /// lowest-ranked applicable merge.
    pub fn encode(&self, text: &[u8]) -> Vec<u32> {
        let mut out = Vec::with_capacity(text.len());
        for word in pre_split(text) {
            let mut ids: Vec<u32> = word.iter().map(|b| self.index[&vec![*b]]).collect();
            loop {
                let best = ids
                    .windows(2)
                    .enumerate()
                    .filter_map(|(i, p)| self.ranks.get(&(p[0], p[1])).map(|&(r, m)| (r, i, m)))
                    .min();
                let Some((rank, _, merged)) = best else { break };
                let (a, b, _) = self.merges[rank];
                ids = apply_pair(&ids, a, b, merged);
            }
            out.extend(ids);
        }
        out
    }

    pub fn decode(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            let Some(t) = self.tokens.get(id as usize) else {
                bail!(
                    Argument,
                    "token id {id} outside vocabulary of {}",
                    self.tokens.len()
                );
            };
            out.extend_from_slice(t);
        }
        Ok(out)
    }

    /// Learned-token counts per domain in priority order.
    pub fn provenance(&self) -> ProvenanceReport {
        let mut counts = vec![0u64; self.domains.len()];
        for o in &self.origin {
            if let Origin::Domain(d) = o {
                counts[*d] += 1;
            }
        }
        ProvenanceReport::from_counts(
            self.domains
                .iter()
                .zip(counts)
                .map(|(d, c)| (d.name.clone(), c))
                .collect(),
        )
    }

    pub fn to_file(&self) -> VocabFile {
        VocabFile {
            version: VOCAB_FORMAT_VERSION,
            specials: self.specials.clone(),
            domains: self
                .domains
                .iter()
                .map(|d| DomainEntry {
                    name: d.name.clone(),
                    truncated: d.truncated,
                    merges: d
                        .merges
                        .iter()
                        .map(|(a, b)| [hex::encode(a), hex::encode(b)])
                        .collect(),
                })
                .collect(),
            tokens: self
                .tokens
                .iter()
                .zip(&self.origin)
                .map(|(t, o)| TokenEntry {
                    hex: hex::encode(t),
                    domain: match o {
                        Origin::Special => None,
                        Origin::Domain(d) => Some(self.domains[*d].name.clone()),
                    },
                })
                .collect(),
            provenance: self.provenance(),
        }
    }

    /// Rebuilds the vocabulary from its merges and checks the stored table.
    pub fn from_file(file: &VocabFile) -> Result<Self> {
        if file.version != VOCAB_FORMAT_VERSION {
            bail!(Parse, "unsupported vocab version {}", file.version);
        }
        let unhex =
            |s: &str| hex::decode(s).map_err(|e| Error::Parse(format!("bad hex `{s}`: {e}")));
        let mut domains = Vec::new();
        for d in &file.domains {
            let mut tokens = byte_alphabet();
            let mut merges = Vec::new();
            for [a, b] in &d.merges {
                let (a, b) = (unhex(a)?, unhex(b)?);
                let mut m = a.clone();
                m.extend_from_slice(&b);
                merges.push((a, b));
                tokens.push(m);
            }
            domains.push(DomainVocab {
                name: d.name.clone(),
                merges,
                tokens,
                truncated: d.truncated,
            });
        }
        let vocab = merge_vocabs(&domains, &file.specials)?;
        let stored = file
            .tokens
            .iter()
            .map(|t| unhex(&t.hex))
            .collect::<Result<Vec<_>>>()?;
        if stored != vocab.tokens {
            bail!(Parse, "token table does not match the stored merges");
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.to_file())
            .map_err(|e| Error::Internal(e.to_string()))?;
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: VocabFile = serde_json::from_str(&text)
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        Self::from_file(&file)
    }
}

pub const VOCAB_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainEntry {
    pub name: String,
    pub truncated: bool,
    /// Hex-encoded `[left, right]` byte strings in learned order.
    pub merges: Vec<[String; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenEntry {
    pub hex: String,
    /// `None` for special tokens.
    pub domain: Option<String>,
}

/// On-disk vocabulary. Token ids are positions in `tokens`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabFile {
    pub version: u32,
    pub specials: Vec<String>,
    pub domains: Vec<DomainEntry>,
    pub tokens: Vec<TokenEntry>,
    pub provenance: ProvenanceReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceRow {
    pub domain: String,
    pub tokens: u64,
    /// Share of the total in percent, rounded to two decimals.
    pub percentage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceReport {
    pub rows: Vec<ProvenanceRow>,
    pub total: u64,
}

impl ProvenanceReport {
    pub fn from_counts(counts: Vec<(String, u64)>) -> Self {
        let total: u64 = counts.iter().map(|(_, c)| c).sum();
        let rows = counts
            .into_iter()
            .map(|(domain, tokens)| ProvenanceRow {
                percentage: if total == 0 {
                    0.0
                } else {
                    (tokens as f64 * 10000.0 / total as f64).round() / 100.0
                },
                domain,
                tokens,
            })
            .collect();
        Self { rows, total }
    }

    /// Reads `[{"domain": .., "tokens": ..}, ..]` counts.
    pub fn from_counts_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Count {
            domain: String,
            tokens: u64,
        }
        let counts: Vec<Count> =
            serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        Ok(Self::from_counts(
            counts.into_iter().map(|c| (c.domain, c.tokens)).collect(),
        ))
    }

    pub fn get(&self, domain: &str) -> Option<&ProvenanceRow> {
        self.rows.iter().find(|r| r.domain == domain)
    }
}

impl fmt::Display for ProvenanceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self
            .rows
            .iter()
            .map(|r| r.domain.len())
            .max()
            .unwrap_or(0)
            .max(6);
        writeln!(f, "{:<width$}  {:>10}  {:>8}", "Domain", "Tokens", "%")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<width$}  {:>10}  {:>8.2}",
                r.domain, r.tokens, r.percentage
            )?;
        }
        let pct = if self.total == 0 { 0.0 } else { 100.0 };
        write!(f, "{:<width$}  {:>10}  {:>8.2}", "Total", self.total, pct)
    }
}
