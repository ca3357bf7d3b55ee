//! Cohort genotype data: variant metadata, per-sample calls, and the
//! tab-separated file formats they travel in.
//!
//! Three formats, all UTF-8 and tab-separated, with `#`-prefixed comment
//! lines ignored:
//!
//! * variants: header `chrom pos id major minor`, one variant per row
//! * genotypes: no header, rows `sample_id label call_1 ... call_L` where a
//!   call is `X/Y`, `./.` for missing, and `-` stands for a deletion allele
//! * known loci: no header, rows `chrom pos source`

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Chromosomes are coded 1-26: autosomes 1-22, then 23=X, 24=Y, 25=XY, 26=MT.
pub const MAX_CHROMOSOME: u8 = 26;

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("line {line}: {msg}")]
    MalformedLine { line: usize, msg: String },
    #[error("line {line}: duplicate variant at chr{chromosome}:{position}")]
    DuplicatePosition {
        line: usize,
        chromosome: u8,
        position: u64,
    },
    #[error("line {line}: variants not sorted by (chromosome, position)")]
    UnsortedInput { line: usize },
    #[error("line {line}: call '{call}' does not match alleles {major}/{minor} of variant '{id}'")]
    AlleleMismatch {
        line: usize,
        call: String,
        major: String,
        minor: String,
        id: String,
    },
    #[error("line {line}: expected {expected} columns, found {found}")]
    ColumnCountMismatch {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: label '{label}' is not 0 or 1")]
    LabelNotBinary { line: usize, label: String },
    #[error("variant {index} has no non-missing calls")]
    AllMissing { index: usize },
    #[error("{0}")]
    Invalid(String),
    #[error("i/o failure: {0}")]
    IoFailure(#[from] std::io::Error),
}

/// A biallelic variant at a fixed genomic coordinate.
///
/// Allele strings are nucleotide runs over `{A,C,G,T}` or the literal
/// markers `INS`/`DEL` for generic insertions and deletions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub chromosome: u8,
    pub position: u64,
    pub id: String,
    pub major_allele: String,
    pub minor_allele: String,
}

impl Variant {
    pub fn new(
        chromosome: u8,
        position: u64,
        id: impl Into<String>,
        major_allele: impl Into<String>,
        minor_allele: impl Into<String>,
    ) -> Result<Self, CohortError> {
        let v = Variant {
            chromosome,
            position,
            id: id.into(),
            major_allele: major_allele.into(),
            minor_allele: minor_allele.into(),
        };
        v.validate().map_err(CohortError::Invalid)?;
        Ok(v)
    }

    fn validate(&self) -> Result<(), String> {
        if self.chromosome < 1 || self.chromosome > MAX_CHROMOSOME {
            return Err(format!(
                "chromosome {} outside 1..={MAX_CHROMOSOME}",
                self.chromosome
            ));
        }
        if self.position < 1 {
            return Err("position must be >= 1".to_string());
        }
        if !is_valid_allele(&self.major_allele) {
            return Err(format!("invalid major allele '{}'", self.major_allele));
        }
        if !is_valid_allele(&self.minor_allele) {
            return Err(format!("invalid minor allele '{}'", self.minor_allele));
        }
        if self.major_allele == self.minor_allele {
            return Err(format!(
                "major and minor alleles are both '{}'",
                self.major_allele
            ));
        }
        Ok(())
    }

    /// Sort key used everywhere a genomic ordering is required.
    pub fn locus(&self) -> (u8, u64) {
        (self.chromosome, self.position)
    }
}

/// Whether an allele string is a nucleotide run or an INS/DEL marker.
pub fn is_valid_allele(s: &str) -> bool {
    s == "INS" || s == "DEL" || (!s.is_empty() && s.bytes().all(|b| matches!(b, b'A' | b'C' | b'G' | b'T')))
}

/// Which of the variant's two alleles a called haplotype carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AlleleSide {
    Major,
    Minor,
}

/// One sample's genotype at one variant. Either both alleles are missing or
/// both are present, and present alleles always match the variant's pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GenotypeCall {
    Missing,
    Called(AlleleSide, AlleleSide),
}

impl GenotypeCall {
    pub fn is_missing(&self) -> bool {
        matches!(self, GenotypeCall::Missing)
    }

    /// Minor-allele count in 0..=2, or `None` when missing.
    pub fn minor_dosage(&self) -> Option<u8> {
        match self {
            GenotypeCall::Missing => None,
            GenotypeCall::Called(a, b) => {
                Some((*a == AlleleSide::Minor) as u8 + (*b == AlleleSide::Minor) as u8)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub label: u8,
}

/// A dense sample-by-variant genotype matrix with binary phenotype labels.
///
/// Variants are strictly increasing by (chromosome, position); rows of
/// `calls` follow `samples`, columns follow `variants`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    variants: Vec<Variant>,
    samples: Vec<Sample>,
    calls: Vec<Vec<GenotypeCall>>,
}

impl Cohort {
    /// Builds a cohort, re-sorting variant columns into (chromosome,
    /// position) order, and checks every structural invariant.
    pub fn new(
        variants: Vec<Variant>,
        samples: Vec<Sample>,
        calls: Vec<Vec<GenotypeCall>>,
    ) -> Result<Self, CohortError> {
        let mut order: Vec<usize> = (0..variants.len()).collect();
        order.sort_by_key(|&i| variants[i].locus());

        let sorted_variants: Vec<Variant> = order.iter().map(|&i| variants[i].clone()).collect();
        for w in sorted_variants.windows(2) {
            if w[0].locus() >= w[1].locus() {
                return Err(CohortError::Invalid(format!(
                    "duplicate variant locus chr{}:{}",
                    w[1].chromosome, w[1].position
                )));
            }
        }

        if calls.len() != samples.len() {
            return Err(CohortError::Invalid(format!(
                "{} call rows for {} samples",
                calls.len(),
                samples.len()
            )));
        }
        let mut sorted_calls = Vec::with_capacity(calls.len());
        for (s, row) in samples.iter().zip(&calls) {
            if row.len() != sorted_variants.len() {
                return Err(CohortError::Invalid(format!(
                    "sample '{}' has {} calls for {} variants",
                    s.id,
                    row.len(),
                    sorted_variants.len()
                )));
            }
            if s.label > 1 {
                return Err(CohortError::Invalid(format!(
                    "sample '{}' label {} is not binary",
                    s.id, s.label
                )));
            }
            sorted_calls.push(order.iter().map(|&i| row[i]).collect());
        }

        for (i, v) in sorted_variants.iter().enumerate() {
            v.validate()
                .map_err(|e| CohortError::Invalid(format!("variant {i}: {e}")))?;
        }

        Ok(Cohort {
            variants: sorted_variants,
            samples,
            calls: sorted_calls,
        })
    }

    pub fn variants(&self) -> &[Variant] {
        &self.variants
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn n_variants(&self) -> usize {
        self.variants.len()
    }

    pub fn n_samples(&self) -> usize {
        self.samples.len()
    }

    pub fn call(&self, sample: usize, variant: usize) -> GenotypeCall {
        self.calls[sample][variant]
    }

    pub fn sample_calls(&self, sample: usize) -> &[GenotypeCall] {
        &self.calls[sample]
    }

    pub fn labels(&self) -> Vec<u8> {
        self.samples.iter().map(|s| s.label).collect()
    }
}

/// Reference loci used for proximity validation of attribution output.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KnownLociList {
    pub entries: Vec<KnownLocus>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnownLocus {
    pub chromosome: u8,
    pub position: u64,
    pub source: String,
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

const VARIANT_HEADER: [&str; 5] = ["chrom", "pos", "id", "major", "minor"];

/// Lines of a tab-separated file with `#` comments stripped, keeping the
/// original 1-based line numbers for diagnostics.
fn data_lines(path: &Path) -> Result<Vec<(usize, String)>, CohortError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.starts_with('#') || line.is_empty() {
            continue;
        }
        out.push((idx + 1, line));
    }
    Ok(out)
}

/// Parses a variants file, preserving file order.
///
/// With `strict_sort`, rows that step backwards in (chromosome, position)
/// are rejected; duplicate loci are rejected either way.
pub fn parse_variants(path: &Path, strict_sort: bool) -> Result<Vec<Variant>, CohortError> {
    let lines = data_lines(path)?;
    let mut rows = lines.into_iter();

    let (hline, header) = rows.next().ok_or_else(|| CohortError::MalformedLine {
        line: 1,
        msg: "missing header".to_string(),
    })?;
    let cols: Vec<&str> = header.split('\t').collect();
    if cols != VARIANT_HEADER {
        return Err(CohortError::MalformedLine {
            line: hline,
            msg: format!("expected header '{}'", VARIANT_HEADER.join("\\t")),
        });
    }

    let mut variants = Vec::new();
    let mut seen: HashSet<(u8, u64)> = HashSet::new();
    for (line, row) in rows {
        let cols: Vec<&str> = row.split('\t').collect();
        if cols.len() != 5 {
            return Err(CohortError::ColumnCountMismatch {
                line,
                expected: 5,
                found: cols.len(),
            });
        }
        let chromosome: u8 = cols[0].parse().map_err(|_| CohortError::MalformedLine {
            line,
            msg: format!("bad chromosome '{}'", cols[0]),
        })?;
        let position: u64 = cols[1].parse().map_err(|_| CohortError::MalformedLine {
            line,
            msg: format!("bad position '{}'", cols[1]),
        })?;
        let v = Variant::new(chromosome, position, cols[2], cols[3], cols[4]).map_err(|e| {
            CohortError::MalformedLine {
                line,
                msg: e.to_string(),
            }
        })?;
        if !seen.insert(v.locus()) {
            return Err(CohortError::DuplicatePosition {
                line,
                chromosome: v.chromosome,
                position: v.position,
            });
        }
        if strict_sort {
            if let Some(prev) = variants.last() {
                let prev: &Variant = prev;
                if v.locus() < prev.locus() {
                    return Err(CohortError::UnsortedInput { line });
                }
            }
        }
        variants.push(v);
    }
    Ok(variants)
}

/// One allele of a call as written in the genotype file: `-` stands for the
/// DEL marker, everything else (including the literal `INS`) is matched
/// verbatim against the variant's allele pair.
fn match_allele_side(
    token: &str,
    variant: &Variant,
    call: &str,
    line: usize,
) -> Result<AlleleSide, CohortError> {
    let written = if token == "-" { "DEL" } else { token };
    if written == variant.major_allele {
        Ok(AlleleSide::Major)
    } else if written == variant.minor_allele {
        Ok(AlleleSide::Minor)
    } else {
        Err(CohortError::AlleleMismatch {
            line,
            call: call.to_string(),
            major: variant.major_allele.clone(),
            minor: variant.minor_allele.clone(),
            id: variant.id.clone(),
        })
    }
}

fn parse_call(text: &str, variant: &Variant, line: usize) -> Result<GenotypeCall, CohortError> {
    if text == "./." {
        return Ok(GenotypeCall::Missing);
    }
    let (a, b) = text.split_once('/').ok_or_else(|| CohortError::MalformedLine {
        line,
        msg: format!("bad call syntax '{text}'"),
    })?;
    if a == "." || b == "." {
        return Err(CohortError::MalformedLine {
            line,
            msg: format!("half-missing call '{text}'"),
        });
    }
    Ok(GenotypeCall::Called(
        match_allele_side(a, variant, text, line)?,
        match_allele_side(b, variant, text, line)?,
    ))
}

/// Parses a genotype matrix against already-parsed variant metadata.
///
/// Columns are validated in file order against `variants`, then the whole
/// cohort is re-sorted to (chromosome, position) order.
pub fn parse_genotypes(path: &Path, variants: &[Variant]) -> Result<Cohort, CohortError> {
    let mut samples = Vec::new();
    let mut calls = Vec::new();
    for (line, row) in data_lines(path)? {
        let cols: Vec<&str> = row.split('\t').collect();
        if cols.len() != variants.len() + 2 {
            return Err(CohortError::ColumnCountMismatch {
                line,
                expected: variants.len() + 2,
                found: cols.len(),
            });
        }
        let label: u8 = match cols[1] {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(CohortError::LabelNotBinary {
                    line,
                    label: other.to_string(),
                })
            }
        };
        let mut row_calls = Vec::with_capacity(variants.len());
        for (v, text) in variants.iter().zip(&cols[2..]) {
            row_calls.push(parse_call(text, v, line)?);
        }
        samples.push(Sample {
            id: cols[0].to_string(),
            label,
        });
        calls.push(row_calls);
    }
    Cohort::new(variants.to_vec(), samples, calls)
}

/// Parses a known-loci reference list (`chrom pos source`, no header),
/// preserving file order.
pub fn parse_known_loci(path: &Path) -> Result<KnownLociList, CohortError> {
    let mut entries = Vec::new();
    for (line, row) in data_lines(path)? {
        let cols: Vec<&str> = row.split('\t').collect();
        if cols.len() != 3 {
            return Err(CohortError::ColumnCountMismatch {
                line,
                expected: 3,
                found: cols.len(),
            });
        }
        let chromosome: u8 = cols[0].parse().map_err(|_| CohortError::MalformedLine {
            line,
            msg: format!("bad chromosome '{}'", cols[0]),
        })?;
        if chromosome < 1 || chromosome > MAX_CHROMOSOME {
            return Err(CohortError::MalformedLine {
                line,
                msg: format!("chromosome {chromosome} outside 1..={MAX_CHROMOSOME}"),
            });
        }
        let position: u64 = cols[1].parse().map_err(|_| CohortError::MalformedLine {
            line,
            msg: format!("bad position '{}'", cols[1]),
        })?;
        if position < 1 {
            return Err(CohortError::MalformedLine {
                line,
                msg: "position must be >= 1".to_string(),
            });
        }
        entries.push(KnownLocus {
            chromosome,
            position,
            source: cols[2].to_string(),
        });
    }
    Ok(KnownLociList { entries })
}

// ---------------------------------------------------------------------------
// Minor allele frequency
// ---------------------------------------------------------------------------

/// Minor allele frequency of one variant: `min(major, minor) / (2 * called)`
/// with missing calls excluded from numerator and denominator alike.
pub fn compute_maf(cohort: &Cohort, variant_index: usize) -> Result<f64, CohortError> {
    assert!(
        variant_index < cohort.n_variants(),
        "variant index {variant_index} out of range"
    );
    let mut minor = 0u64;
    let mut called = 0u64;
    for s in 0..cohort.n_samples() {
        if let Some(d) = cohort.call(s, variant_index).minor_dosage() {
            minor += u64::from(d);
            called += 1;
        }
    }
    if called == 0 {
        return Err(CohortError::AllMissing {
            index: variant_index,
        });
    }
    let total = 2 * called;
    let major = total - minor;
    Ok(minor.min(major) as f64 / total as f64)
}

/// Keeps exactly the variants whose MAF is at or above `threshold`.
///
/// Variants with no non-missing calls are dropped at any threshold; sample
/// rows and relative variant order are unchanged.
pub fn filter_by_maf(cohort: &Cohort, threshold: f64) -> Cohort {
    assert!(
        (0.0..=0.5).contains(&threshold),
        "MAF threshold {threshold} outside [0, 0.5]"
    );
    let keep: Vec<usize> = (0..cohort.n_variants())
        .filter(|&i| matches!(compute_maf(cohort, i), Ok(maf) if maf >= threshold))
        .collect();
    let variants = keep.iter().map(|&i| cohort.variants[i].clone()).collect();
    let calls = cohort
        .calls
        .iter()
        .map(|row| keep.iter().map(|&i| row[i]).collect())
        .collect();
    Cohort::new(variants, cohort.samples.clone(), calls)
        .expect("filtering preserves cohort invariants")
}

// ---------------------------------------------------------------------------
// Writing
// ---------------------------------------------------------------------------

fn call_text(call: GenotypeCall, variant: &Variant) -> String {
    let side = |s: AlleleSide| {
        let allele = match s {
            AlleleSide::Major => &variant.major_allele,
            AlleleSide::Minor => &variant.minor_allele,
        };
        if allele == "DEL" {
            "-"
        } else {
            allele.as_str()
        }
    };
    match call {
        GenotypeCall::Missing => "./.".to_string(),
        GenotypeCall::Called(a, b) => format!("{}/{}", side(a), side(b)),
    }
}

pub fn write_variants(variants: &[Variant], path: &Path) -> Result<(), CohortError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", VARIANT_HEADER.join("\t"))?;
    for v in variants {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}",
            v.chromosome, v.position, v.id, v.major_allele, v.minor_allele
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a cohort as a variants file plus a genotypes file such that
/// `parse_variants` + `parse_genotypes` reproduce it exactly.
pub fn write_cohort(
    cohort: &Cohort,
    variants_path: &Path,
    genotypes_path: &Path,
) -> Result<(), CohortError> {
    write_variants(&cohort.variants, variants_path)?;
    let mut w = BufWriter::new(File::create(genotypes_path)?);
    let mut line = String::new();
    for (i, s) in cohort.samples.iter().enumerate() {
        line.clear();
        write!(line, "{}\t{}", s.id, s.label).expect("write to string");
        for (j, v) in cohort.variants.iter().enumerate() {
            line.push('\t');
            line.push_str(&call_text(cohort.call(i, j), v));
        }
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_known_loci(loci: &KnownLociList, path: &Path) -> Result<(), CohortError> {
    let mut w = BufWriter::new(File::create(path)?);
    for e in &loci.entries {
        writeln!(w, "{}\t{}\t{}", e.chromosome, e.position, e.source)?;
    }
    w.flush()?;
    Ok(())
}
