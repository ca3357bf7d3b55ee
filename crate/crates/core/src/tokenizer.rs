//! Genotype-call tokenization onto a fixed 33-token vocabulary.
//!
//! Calls collapse to one token per variant: homozygotes to a single allele
//! fragment, heterozygotes to a major-first `X,Y` pair, missing calls to
//! `nan`. Multi-nucleotide alleles compress to their first base plus `I`;
//! generic insertion/deletion markers become `ins`/`del`. Every sequence is
//! prepended with the structural `cls` token whose encoder output feeds the
//! classifier.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::cohort::{AlleleSide, Cohort, GenotypeCall, Variant};

pub const VOCAB_SIZE: usize = 33;

pub const NAN_ID: u8 = 0;
pub const INS_ID: u8 = 1;
pub const DEL_ID: u8 = 2;
pub const CLS_ID: u8 = 3;
pub const MASK_ID: u8 = 4;

/// Token strings in id order; `VOCAB[id]` inverts `token_to_id`.
pub const VOCAB: [&str; VOCAB_SIZE] = [
    "nan", "ins", "del", "cls", "mask", "A", "G", "C", "T", "GI", "CI", "TI", "AI", "A,G", "A,C",
    "G,A", "G,C", "C,G", "C,T", "T,C", "GI,del", "T,G", "G,T", "C,A", "C,ins", "CI,del", "T,ins",
    "TI,del", "A,T", "G,ins", "A,ins", "T,A", "AI,del",
];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TokenError {
    #[error("invalid allele '{0}'")]
    InvalidAllele(String),
    #[error("unknown token '{0}'")]
    UnknownToken(String),
}

/// A validated vocabulary index in `0..=32`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TokenId(u8);

impl TokenId {
    pub fn new(value: u8) -> Option<TokenId> {
        (usize::from(value) < VOCAB_SIZE).then_some(TokenId(value))
    }

    pub fn value(self) -> u8 {
        self.0
    }

    pub fn as_str(self) -> &'static str {
        VOCAB[usize::from(self.0)]
    }
}

/// Reduces an allele string to its token fragment: `DEL -> del`,
/// `INS -> ins`, a single base to itself, and a longer run to its first
/// base plus `I`.
pub fn normalize_allele(allele: &str) -> Result<String, TokenError> {
    match allele {
        "DEL" => return Ok("del".to_string()),
        "INS" => return Ok("ins".to_string()),
        _ => {}
    }
    if allele.is_empty() || !allele.bytes().all(|b| matches!(b, b'A' | b'C' | b'G' | b'T')) {
        return Err(TokenError::InvalidAllele(allele.to_string()));
    }
    let first = &allele[..1];
    if allele.len() == 1 {
        Ok(first.to_string())
    } else {
        Ok(format!("{first}I"))
    }
}

/// Combines a call and its variant's allele pair into a token string.
/// Heterozygotes are emitted major allele first.
pub fn genotype_to_token(call: GenotypeCall, variant: &Variant) -> Result<String, TokenError> {
    let allele = |side: AlleleSide| match side {
        AlleleSide::Major => variant.major_allele.as_str(),
        AlleleSide::Minor => variant.minor_allele.as_str(),
    };
    match call {
        GenotypeCall::Missing => Ok("nan".to_string()),
        GenotypeCall::Called(a, b) if a == b => normalize_allele(allele(a)),
        GenotypeCall::Called(_, _) => Ok(format!(
            "{},{}",
            normalize_allele(&variant.major_allele)?,
            normalize_allele(&variant.minor_allele)?
        )),
    }
}

pub fn token_to_id(token: &str) -> Result<TokenId, TokenError> {
    VOCAB
        .iter()
        .position(|&t| t == token)
        .map(|i| TokenId(i as u8))
        .ok_or_else(|| TokenError::UnknownToken(token.to_string()))
}

pub fn id_to_token(id: TokenId) -> &'static str {
    id.as_str()
}

/// Classifier-ready integer sequences with aligned variant coordinates.
///
/// Every sequence has length `variant_meta.len() + 1` and starts with
/// [`CLS_ID`]; `variant_meta[p - 1]` gives the (chromosome, position) behind
/// sequence position `p`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedDataset {
    pub sequences: Vec<Vec<u8>>,
    pub labels: Vec<u8>,
    pub variant_meta: Vec<(u8, u64)>,
    /// Calls whose token string fell outside the vocabulary and degraded to
    /// `nan`.
    pub fallback_count: usize,
}

impl TokenizedDataset {
    pub fn n_samples(&self) -> usize {
        self.sequences.len()
    }

    pub fn seq_len(&self) -> usize {
        self.variant_meta.len() + 1
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.sequences.len() != self.labels.len() {
            return Err(format!(
                "{} sequences for {} labels",
                self.sequences.len(),
                self.labels.len()
            ));
        }
        for (i, seq) in self.sequences.iter().enumerate() {
            if seq.len() != self.seq_len() {
                return Err(format!("sequence {i} has wrong length {}", seq.len()));
            }
            if seq[0] != CLS_ID {
                return Err(format!("sequence {i} does not start with cls"));
            }
            if let Some(&bad) = seq.iter().find(|&&t| usize::from(t) >= VOCAB_SIZE) {
                return Err(format!("sequence {i} contains out-of-range id {bad}"));
            }
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l > 1) {
            return Err(format!("non-binary label {bad}"));
        }
        Ok(())
    }
}

/// Tokenizes every sample of a cohort, prepending the `cls` token.
///
/// Token strings the vocabulary does not cover (possible for unusual allele
/// pairings such as an INS/DEL variant) degrade to `nan` and are tallied in
/// `fallback_count` instead of failing the run.
pub fn tokenize_cohort(cohort: &Cohort) -> Result<TokenizedDataset, TokenError> {
    let mut fallback = 0usize;
    let mut sequences = Vec::with_capacity(cohort.n_samples());
    for s in 0..cohort.n_samples() {
        let mut seq = Vec::with_capacity(cohort.n_variants() + 1);
        seq.push(CLS_ID);
        for (call, variant) in cohort.sample_calls(s).iter().zip(cohort.variants()) {
            let token = genotype_to_token(*call, variant)?;
            match token_to_id(&token) {
                Ok(id) => seq.push(id.value()),
                Err(TokenError::UnknownToken(_)) => {
                    fallback += 1;
                    seq.push(NAN_ID);
                }
                Err(e) => return Err(e),
            }
        }
        sequences.push(seq);
    }
    Ok(TokenizedDataset {
        sequences,
        labels: cohort.labels(),
        variant_meta: cohort.variants().iter().map(|v| v.locus()).collect(),
        fallback_count: fallback,
    })
}

// ---------------------------------------------------------------------------
// Cache file
// ---------------------------------------------------------------------------

const CACHE_MAGIC: &[u8; 8] = b"GTOKCAC1";
const CACHE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("bad cache file: {0}")]
    Format(String),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

/// Writes the token cache: magic, version, L (variants per sample), N
/// (samples), then N rows of L+1 one-byte token ids, then N label bytes.
pub fn write_token_cache(ds: &TokenizedDataset, path: &Path) -> Result<(), CacheError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CACHE_MAGIC)?;
    w.write_all(&CACHE_VERSION.to_le_bytes())?;
    w.write_all(&(self_len(ds) as u32).to_le_bytes())?;
    w.write_all(&(ds.n_samples() as u32).to_le_bytes())?;
    for seq in &ds.sequences {
        w.write_all(seq)?;
    }
    w.write_all(&ds.labels)?;
    w.flush()?;
    Ok(())
}

fn self_len(ds: &TokenizedDataset) -> usize {
    ds.variant_meta.len()
}

/// Reads sequences and labels back from a cache file. Variant coordinates
/// are not stored in the cache; callers re-attach them from the variants
/// file written alongside.
pub fn read_token_cache(path: &Path) -> Result<(Vec<Vec<u8>>, Vec<u8>), CacheError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CACHE_MAGIC {
        return Err(CacheError::Format("wrong magic bytes".to_string()));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != CACHE_VERSION {
        return Err(CacheError::Format(format!("unsupported version {version}")));
    }
    r.read_exact(&mut word)?;
    let l = u32::from_le_bytes(word) as usize;
    r.read_exact(&mut word)?;
    let n = u32::from_le_bytes(word) as usize;

    let mut sequences = Vec::with_capacity(n);
    for i in 0..n {
        let mut seq = vec![0u8; l + 1];
        r.read_exact(&mut seq)
            .map_err(|_| CacheError::Format(format!("truncated at sequence {i}")))?;
        if seq[0] != CLS_ID {
            return Err(CacheError::Format(format!(
                "sequence {i} does not start with cls"
            )));
        }
        if seq.iter().any(|&t| usize::from(t) >= VOCAB_SIZE) {
            return Err(CacheError::Format(format!(
                "sequence {i} contains out-of-range token id"
            )));
        }
        sequences.push(seq);
    }
    let mut labels = vec![0u8; n];
    r.read_exact(&mut labels)
        .map_err(|_| CacheError::Format("truncated labels".to_string()))?;
    if labels.iter().any(|&l| l > 1) {
        return Err(CacheError::Format("non-binary label".to_string()));
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(CacheError::Format(format!(
            "{} trailing bytes",
            rest.len()
        )));
    }
    Ok((sequences, labels))
}
