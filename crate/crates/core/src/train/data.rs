//! Synthetic corpora for desk-scale runs.
//!
//! Token ids below [`FIRST_DATA_TOKEN`] are reserved: 0 pad, 1 end of
//! document, 2 needle marker, 3 query marker.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::mask::{extract_seq_lens, CompressedMask, DocumentPackedBatch};

pub const PAD: usize = 0;
pub const EOD: usize = 1;
pub const NEEDLE: usize = 2;
pub const QUERY: usize = 3;
pub const FIRST_DATA_TOKEN: usize = 4;

/// One packed training sequence with next-token targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub tokens: Vec<usize>,
    /// `None` marks positions excluded from the loss.
    pub targets: Vec<Option<usize>>,
    pub mask: CompressedMask,
}

impl Sequence {
    pub fn labelled(&self) -> usize {
        self.targets.iter().filter(|t| t.is_some()).count()
    }
}

/// A stream of training sequences. `Ok(None)` means the data is exhausted.
pub trait DataSource {
    fn next_sequence(&mut self, seq_len: usize) -> Result<Option<Sequence>>;
}

/// Documents are noisy arithmetic progressions over the data tokens:
/// `x_j = FIRST_DATA_TOKEN + (a + s*j) mod M`, each followed by EOD. With
/// probability `noise` a token is replaced by a uniform data token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub vocab_size: usize,
    pub min_doc_len: usize,
    pub max_doc_len: usize,
    pub max_stride: usize,
    #[serde(default)]
    pub noise: f64,
    pub seed: u64,
    /// Total tokens the corpus may emit; `None` is unbounded.
    #[serde(default)]
    pub token_limit: Option<u64>,
}

impl CorpusSpec {
    pub fn toy(vocab_size: usize, seed: u64) -> Self {
        Self {
            vocab_size,
            min_doc_len: 4,
            max_doc_len: 24,
            max_stride: 7,
            noise: 0.05,
            seed,
            token_limit: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= FIRST_DATA_TOKEN + 1 {
            bail!(
                Config,
                "corpus vocab_size {} leaves no data tokens",
                self.vocab_size
            );
        }
        if self.min_doc_len == 0 || self.min_doc_len > self.max_doc_len {
            bail!(
                Config,
                "document lengths need 0 < min <= max, got {}..={}",
                self.min_doc_len,
                self.max_doc_len
            );
        }
        if self.max_stride == 0 {
            bail!(Config, "max_stride must be positive");
        }
        if !(0.0..=1.0).contains(&self.noise) {
            bail!(Config, "noise must lie in [0, 1], got {}", self.noise);
        }
        Ok(())
    }
}

pub struct SyntheticCorpus {
    spec: CorpusSpec,
    rng: ChaCha8Rng,
    pending: Vec<usize>,
    emitted: u64,
}

impl SyntheticCorpus {
    pub fn new(spec: CorpusSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(spec.seed),
            spec,
            pending: Vec::new(),
            emitted: 0,
        })
    }

    pub fn tokens_emitted(&self) -> u64 {
        self.emitted
    }

    fn push_document(&mut self) {
        let m = self.spec.vocab_size - FIRST_DATA_TOKEN;
        let len = self
            .rng
            .random_range(self.spec.min_doc_len..=self.spec.max_doc_len);
        let start = self.rng.random_range(0..m);
        let stride = self.rng.random_range(1..=self.spec.max_stride);
        for j in 0..len {
            let tok = if self.rng.random::<f64>() < self.spec.noise {
                self.rng.random_range(0..m)
            } else {
                (start + stride * j) % m
            };
            self.pending.push(FIRST_DATA_TOKEN + tok);
        }
        self.pending.push(EOD);
    }
}

impl DataSource for SyntheticCorpus {
    /// Takes `seq_len` tokens from the document stream plus one lookahead
    /// token for the final target. Positions holding EOD carry no target.
    fn next_sequence(&mut self, seq_len: usize) -> Result<Option<Sequence>> {
        if seq_len == 0 {
            bail!(Argument, "seq_len must be positive");
        }
        if let Some(limit) = self.spec.token_limit {
            if self.emitted + seq_len as u64 > limit {
                return Ok(None);
            }
        }
        while self.pending.len() < seq_len + 1 {
            self.push_document();
        }
        let tokens: Vec<usize> = self.pending[..seq_len].to_vec();
        let targets = (0..seq_len)
            .map(|i| (tokens[i] != EOD).then(|| self.pending[i + 1]))
            .collect();
        self.pending.drain(..seq_len);
        self.emitted += seq_len as u64;
        let mask = extract_seq_lens(&DocumentPackedBatch::new(tokens.clone(), EOD))?;
        Ok(Some(Sequence {
            tokens,
            targets,
            mask,
        }))
    }
}

/// Needle-in-a-haystack layout: filler tokens, one `[NEEDLE, value]` pair at
/// a chosen depth, and a final `QUERY` whose answer is `value`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NiahTask {
    /// Filler ids are `FIRST_DATA_TOKEN..value_start`.
    pub value_start: usize,
    /// Value ids are `value_start..vocab_size`.
    pub vocab_size: usize,
}

impl Default for NiahTask {
    fn default() -> Self {
        Self {
            value_start: 256,
            vocab_size: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NiahCase {
    pub tokens: Vec<usize>,
    pub answer: usize,
    pub depth: f64,
    pub needle_pos: usize,
}

impl NiahTask {
    pub fn validate(&self) -> Result<()> {
        if self.value_start <= FIRST_DATA_TOKEN || self.value_start >= self.vocab_size {
            bail!(
                Config,
                "need {FIRST_DATA_TOKEN} < value_start < vocab_size, got {} / {}",
                self.value_start,
                self.vocab_size
            );
        }
        Ok(())
    }

    /// Needle marker position for a depth fraction in `[0, 1]`.
    pub fn needle_position(context_len: usize, depth: f64) -> usize {
        (depth * (context_len - 3) as f64).round() as usize
    }

    pub fn make_case<R: Rng + ?Sized>(
        &self,
        context_len: usize,
        depth: f64,
        rng: &mut R,
    ) -> Result<NiahCase> {
        if context_len < 3 {
            bail!(
                Argument,
                "NIAH context needs at least 3 tokens, got {context_len}"
            );
        }
        if !(0.0..=1.0).contains(&depth) {
            bail!(Argument, "depth {depth} outside [0, 1]");
        }
        let needle_pos = Self::needle_position(context_len, depth);
        let answer = rng.random_range(self.value_start..self.vocab_size);
        let mut tokens: Vec<usize> = (0..context_len)
            .map(|_| rng.random_range(FIRST_DATA_TOKEN..self.value_start))
            .collect();
        tokens[needle_pos] = NEEDLE;
        tokens[needle_pos + 1] = answer;
        tokens[context_len - 1] = QUERY;
        Ok(NiahCase {
            tokens,
            answer,
            depth,
            needle_pos,
        })
    }

    /// `n_cases` haystacks per depth, depth-major, from one seeded stream.
    pub fn generate(
        &self,
        context_len: usize,
        n_cases: usize,
        depths: &[f64],
        seed: u64,
    ) -> Result<Vec<NiahCase>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(n_cases * depths.len());
        for &depth in depths {
            for _ in 0..n_cases {
                out.push(self.make_case(context_len, depth, &mut rng)?);
            }
        }
        Ok(out)
    }
}

/// Training stream for the retrieval task: one haystack per sequence with a
/// uniform length in `min_len..=seq_len` and a uniform depth. Only the final
/// position carries a target.
pub struct NiahCorpus {
    task: NiahTask,
    min_len: usize,
    rng: ChaCha8Rng,
}

impl NiahCorpus {
    pub fn new(task: NiahTask, min_len: usize, seed: u64) -> Result<Self> {
        task.validate()?;
        if min_len < 3 {
            bail!(Config, "NIAH min_len must be at least 3");
        }
        Ok(Self {
            task,
            min_len,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }
}

impl DataSource for NiahCorpus {
    fn next_sequence(&mut self, seq_len: usize) -> Result<Option<Sequence>> {
        if seq_len < self.min_len {
            bail!(
                Argument,
                "seq_len {seq_len} below NIAH min_len {}",
                self.min_len
            );
        }
        let len = self.rng.random_range(self.min_len..=seq_len);
        let depth = self.rng.random::<f64>();
        let case = self.task.make_case(len, depth, &mut self.rng)?;
        let mut targets = vec![None; len];
        targets[len - 1] = Some(case.answer);
        Ok(Some(Sequence {
            mask: CompressedMask::single(len)?,
            tokens: case.tokens,
            targets,
        }))
    }
}
