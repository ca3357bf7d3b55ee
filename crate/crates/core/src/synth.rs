//! Synthetic case/control cohorts with planted causal variants.
//!
//! Genotypes are drawn under Hardy-Weinberg equilibrium from per-variant
//! allele frequencies; a latent liability (weighted dosage sum plus noise)
//! is median-split into balanced cases and controls. The noiseless liability
//! term is retained as a Bayes-optimal score that upper-bounds what any
//! model can recover from the genotypes.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{AlleleSide, Cohort, GenotypeCall, Sample, Variant};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error("ground truth does not match cohort: {0}")]
    Mismatch(String),
}

fn default_noise_sd() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub n_variants: usize,
    /// Per-variant minor allele frequencies are drawn uniformly from this
    /// closed range, itself inside [0.01, 0.5].
    pub maf_range: (f64, f64),
    /// Additive effects: (variant index, effect size beta).
    #[serde(default)]
    pub causal: Vec<(usize, f64)>,
    /// Pairwise dosage-product effects: (i, j, beta_ij).
    #[serde(default)]
    pub epistatic: Vec<(usize, usize, f64)>,
    #[serde(default)]
    pub missing_rate: f64,
    /// Standard deviation of the liability noise term.
    #[serde(default = "default_noise_sd")]
    pub noise_sd: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_samples == 0 || self.n_variants == 0 {
            return Err(SynthError::ConfigInvalid(
                "n_samples and n_variants must be positive".to_string(),
            ));
        }
        let (lo, hi) = self.maf_range;
        if !(0.01..=0.5).contains(&lo) || !(0.01..=0.5).contains(&hi) || lo > hi {
            return Err(SynthError::ConfigInvalid(format!(
                "maf_range [{lo}, {hi}] must sit inside [0.01, 0.5]"
            )));
        }
        if !(0.0..=0.1).contains(&self.missing_rate) {
            return Err(SynthError::ConfigInvalid(format!(
                "missing_rate {} outside [0, 0.1]",
                self.missing_rate
            )));
        }
        if self.noise_sd < 0.0 || !self.noise_sd.is_finite() {
            return Err(SynthError::ConfigInvalid(format!(
                "noise_sd {} must be finite and non-negative",
                self.noise_sd
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for &(idx, beta) in &self.causal {
            if idx >= self.n_variants {
                return Err(SynthError::ConfigInvalid(format!(
                    "causal index {idx} out of range"
                )));
            }
            if !seen.insert(idx) {
                return Err(SynthError::ConfigInvalid(format!(
                    "duplicate causal index {idx}"
                )));
            }
            if !beta.is_finite() {
                return Err(SynthError::ConfigInvalid("non-finite beta".to_string()));
            }
        }
        for &(i, j, beta) in &self.epistatic {
            if i >= self.n_variants || j >= self.n_variants {
                return Err(SynthError::ConfigInvalid(format!(
                    "epistatic pair ({i}, {j}) out of range"
                )));
            }
            if !beta.is_finite() {
                return Err(SynthError::ConfigInvalid("non-finite beta".to_string()));
            }
        }
        Ok(())
    }
}

/// What was planted: the causal effects and the noiseless per-sample
/// liability term they generated.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    pub causal: Vec<(usize, f64)>,
    pub epistatic: Vec<(usize, usize, f64)>,
    /// Noiseless genetic liability per sample (no noise term).
    pub liability: Vec<f64>,
    /// Drawn minor allele frequency per variant.
    pub drawn_maf: Vec<f64>,
}

const CHROMOSOME_SPAN: u8 = 22;
const NUCLEOTIDES: [&str; 4] = ["A", "C", "G", "T"];

/// Generates a cohort plus its ground truth, deterministically per seed.
///
/// Variants are spread over chromosomes 1..=22 in sorted coordinate order;
/// labels are 1 for the top half of noisy liabilities, giving an exact
/// 50/50 split for even sample counts.
pub fn generate_cohort(config: &SynthConfig) -> Result<(Cohort, GroundTruth), SynthError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    // Variant metadata: contiguous chromosome blocks, strictly increasing
    // positions within each block.
    let per_chrom = config.n_variants.div_ceil(usize::from(CHROMOSOME_SPAN));
    let mut variants = Vec::with_capacity(config.n_variants);
    let mut chrom = 0u8;
    let mut pos = 0u64;
    for i in 0..config.n_variants {
        if i % per_chrom == 0 {
            chrom += 1;
            pos = 10_000;
        }
        pos += 1 + rng.gen_range(0..100_000) as u64;
        let major = NUCLEOTIDES[rng.gen_range(0..4)];
        let minor = loop {
            let m = NUCLEOTIDES[rng.gen_range(0..4)];
            if m != major {
                break m;
            }
        };
        variants.push(
            Variant::new(chrom, pos, format!("v{i}"), major, minor)
                .expect("generated variants are valid"),
        );
    }

    // Per-variant MAF, then Hardy-Weinberg dosages in variant-major order.
    let drawn_maf: Vec<f64> = (0..config.n_variants)
        .map(|_| rng.gen_range(config.maf_range.0..=config.maf_range.1))
        .collect();
    let mut dosages = vec![vec![0u8; config.n_variants]; config.n_samples];
    for (j, &q) in drawn_maf.iter().enumerate() {
        let p_hom_major = (1.0 - q) * (1.0 - q);
        let p_het = 2.0 * q * (1.0 - q);
        for row in dosages.iter_mut() {
            let u: f64 = rng.gen();
            row[j] = if u < p_hom_major {
                0
            } else if u < p_hom_major + p_het {
                1
            } else {
                2
            };
        }
    }

    // Missingness mask, drawn after all dosages so the liability below is
    // computed from the true genotypes.
    let mut missing = vec![vec![false; config.n_variants]; config.n_samples];
    if config.missing_rate > 0.0 {
        for row in missing.iter_mut() {
            for cell in row.iter_mut() {
                *cell = rng.gen::<f64>() < config.missing_rate;
            }
        }
    }

    let liability: Vec<f64> = dosages
        .iter()
        .map(|row| {
            let mut l = 0.0;
            for &(idx, beta) in &config.causal {
                l += beta * f64::from(row[idx]);
            }
            for &(i, j, beta) in &config.epistatic {
                l += beta * f64::from(row[i]) * f64::from(row[j]);
            }
            l
        })
        .collect();

    let noisy: Vec<f64> = liability
        .iter()
        .map(|&l| {
            let eps: f64 = StandardNormal.sample(&mut rng);
            l + config.noise_sd * eps
        })
        .collect();

    // Median split: the top floor(n/2) liabilities become cases.
    let mut order: Vec<usize> = (0..config.n_samples).collect();
    order.sort_by(|&a, &b| noisy[a].total_cmp(&noisy[b]).then(a.cmp(&b)));
    let n_cases = config.n_samples / 2;
    let mut labels = vec![0u8; config.n_samples];
    for &i in order.iter().rev().take(n_cases) {
        labels[i] = 1;
    }

    let samples: Vec<Sample> = labels
        .iter()
        .enumerate()
        .map(|(i, &label)| Sample {
            id: format!("s{i:06}"),
            label,
        })
        .collect();
    let calls: Vec<Vec<GenotypeCall>> = dosages
        .iter()
        .zip(&missing)
        .map(|(drow, mrow)| {
            drow.iter()
                .zip(mrow)
                .map(|(&d, &m)| {
                    if m {
                        GenotypeCall::Missing
                    } else {
                        match d {
                            0 => GenotypeCall::Called(AlleleSide::Major, AlleleSide::Major),
                            1 => GenotypeCall::Called(AlleleSide::Major, AlleleSide::Minor),
                            _ => GenotypeCall::Called(AlleleSide::Minor, AlleleSide::Minor),
                        }
                    }
                })
                .collect()
        })
        .collect();

    let cohort = Cohort::new(variants, samples, calls)
        .map_err(|e| SynthError::ConfigInvalid(format!("generated cohort invalid: {e}")))?;
    let truth = GroundTruth {
        causal: config.causal.clone(),
        epistatic: config.epistatic.clone(),
        liability,
        drawn_maf,
    };
    Ok((cohort, truth))
}

/// The noiseless liability per sample: the best score any predictor could
/// extract from the genotypes, used as an acceptance oracle.
pub fn oracle_bayes_scores(cohort: &Cohort, truth: &GroundTruth) -> Result<Vec<f64>, SynthError> {
    if truth.liability.len() != cohort.n_samples() {
        return Err(SynthError::Mismatch(format!(
            "{} liabilities for {} samples",
            truth.liability.len(),
            cohort.n_samples()
        )));
    }
    if truth.drawn_maf.len() != cohort.n_variants() {
        return Err(SynthError::Mismatch(format!(
            "{} drawn MAFs for {} variants",
            truth.drawn_maf.len(),
            cohort.n_variants()
        )));
    }
    Ok(truth.liability.clone())
}

/// Writes the planted effects as `variant_index beta` rows with a config
/// echo in leading comments.
pub fn write_ground_truth(
    truth: &GroundTruth,
    config: &SynthConfig,
    path: &Path,
) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let echo = toml_like_echo(config);
    for line in echo.lines() {
        writeln!(w, "# {line}")?;
    }
    for &(idx, beta) in &truth.causal {
        writeln!(w, "{idx}\t{beta}")?;
    }
    w.flush()
}

fn toml_like_echo(config: &SynthConfig) -> String {
    format!(
        "n_samples = {}\nn_variants = {}\nmaf_range = [{}, {}]\nmissing_rate = {}\nnoise_sd = {}\nseed = {}\ncausal = {:?}\nepistatic = {:?}",
        config.n_samples,
        config.n_variants,
        config.maf_range.0,
        config.maf_range.1,
        config.missing_rate,
        config.noise_sd,
        config.seed,
        config.causal,
        config.epistatic,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::compute_maf;
    use crate::metrics::{auc, ScoredLabels};

    fn base_config() -> SynthConfig {
        SynthConfig {
            n_samples: 2000,
            n_variants: 50,
            maf_range: (0.1, 0.4),
            causal: vec![],
            epistatic: vec![],
            missing_rate: 0.0,
            noise_sd: 1.0,
            seed: 7,
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = base_config();
        c.maf_range = (0.001, 0.4);
        assert!(matches!(
            generate_cohort(&c),
            Err(SynthError::ConfigInvalid(_))
        ));
        let mut c = base_config();
        c.causal = vec![(50, 1.0)];
        assert!(generate_cohort(&c).is_err());
        let mut c = base_config();
        c.causal = vec![(3, 1.0), (3, 2.0)];
        assert!(generate_cohort(&c).is_err());
        let mut c = base_config();
        c.missing_rate = 0.5;
        assert!(generate_cohort(&c).is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        let c = base_config();
        let (a, ta) = generate_cohort(&c).unwrap();
        let (b, tb) = generate_cohort(&c).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta.liability, tb.liability);
        let mut c2 = base_config();
        c2.seed = 8;
        let (other, _) = generate_cohort(&c2).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn labels_are_balanced() {
        let (cohort, _) = generate_cohort(&base_config()).unwrap();
        let cases: usize = cohort.labels().iter().map(|&l| usize::from(l)).sum();
        assert_eq!(cases, 1000);
        // Odd n: within one of half.
        let mut c = base_config();
        c.n_samples = 101;
        let (cohort, _) = generate_cohort(&c).unwrap();
        let cases: usize = cohort.labels().iter().map(|&l| usize::from(l)).sum();
        assert_eq!(cases, 50);
    }

    #[test]
    fn no_signal_auc_is_near_half() {
        let (cohort, truth) = generate_cohort(&base_config()).unwrap();
        // With all betas zero the oracle is constant; ties give exactly 0.5.
        let scores = oracle_bayes_scores(&cohort, &truth).unwrap();
        let d = ScoredLabels::new(scores, cohort.labels()).unwrap();
        assert_eq!(auc(&d).unwrap(), 0.5);

        // And a genotype-derived score is uninformative: dosage at variant 0.
        let dosage_scores: Vec<f64> = (0..cohort.n_samples())
            .map(|s| f64::from(cohort.call(s, 0).minor_dosage().unwrap()))
            .collect();
        let d = ScoredLabels::new(dosage_scores, cohort.labels()).unwrap();
        let a = auc(&d).unwrap();
        assert!((a - 0.5).abs() < 0.03, "no-signal AUC {a}");
    }

    #[test]
    fn single_causal_variant_shifts_case_dosage() {
        let mut c = base_config();
        c.causal = vec![(10, 3.0)];
        c.maf_range = (0.3, 0.3);
        let (cohort, _) = generate_cohort(&c).unwrap();
        let labels = cohort.labels();
        let (mut case_sum, mut case_n, mut ctrl_sum, mut ctrl_n) = (0.0, 0.0, 0.0, 0.0);
        let mut dosages = Vec::new();
        for s in 0..cohort.n_samples() {
            let d = f64::from(cohort.call(s, 10).minor_dosage().unwrap());
            dosages.push(d);
            if labels[s] == 1 {
                case_sum += d;
                case_n += 1.0;
            } else {
                ctrl_sum += d;
                ctrl_n += 1.0;
            }
        }
        let case_mean = case_sum / case_n;
        let ctrl_mean = ctrl_sum / ctrl_n;
        // One-sided Welch z-test at p < 0.001 (z > 3.09).
        let mean = dosages.iter().sum::<f64>() / dosages.len() as f64;
        let var = dosages.iter().map(|d| (d - mean).powi(2)).sum::<f64>()
            / (dosages.len() - 1) as f64;
        let se = (var / case_n + var / ctrl_n).sqrt();
        let z = (case_mean - ctrl_mean) / se;
        assert!(z > 3.09, "z = {z}, case mean {case_mean}, control mean {ctrl_mean}");
    }

    #[test]
    fn zero_noise_makes_oracle_perfect() {
        let mut c = base_config();
        // Square roots of distinct primes are linearly independent over the
        // integer dosage lattice, so every sample's liability is distinct
        // and the median split is perfectly separable.
        c.causal = [2.0f64, 3.0, 5.0, 7.0, 11.0, 13.0, 17.0, 19.0, 23.0, 29.0, 31.0, 37.0]
            .iter()
            .enumerate()
            .map(|(i, &p)| (i * 4, p.sqrt()))
            .collect();
        c.noise_sd = 0.0;
        let (cohort, truth) = generate_cohort(&c).unwrap();
        let scores = oracle_bayes_scores(&cohort, &truth).unwrap();
        let d = ScoredLabels::new(scores, cohort.labels()).unwrap();
        assert_eq!(auc(&d).unwrap(), 1.0);
    }

    #[test]
    fn empirical_maf_tracks_drawn_maf() {
        let mut c = base_config();
        c.missing_rate = 0.02;
        let (cohort, truth) = generate_cohort(&c).unwrap();
        for j in 0..cohort.n_variants() {
            let emp = compute_maf(&cohort, j).unwrap();
            assert!(
                (emp - truth.drawn_maf[j]).abs() < 0.05,
                "variant {j}: empirical {emp} vs drawn {}",
                truth.drawn_maf[j]
            );
        }
    }

    #[test]
    fn mismatched_truth_is_rejected() {
        let (cohort, _) = generate_cohort(&base_config()).unwrap();
        let truth = GroundTruth {
            causal: vec![],
            epistatic: vec![],
            liability: vec![0.0; 3],
            drawn_maf: vec![0.2; 50],
        };
        assert!(matches!(
            oracle_bayes_scores(&cohort, &truth),
            Err(SynthError::Mismatch(_))
        ));
    }

    #[test]
    fn ground_truth_file_lists_causal_rows() {
        let mut c = base_config();
        c.causal = vec![(3, 3.0), (7, -3.0)];
        let (_, truth) = generate_cohort(&c).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("truth.tsv");
        write_ground_truth(&truth, &c, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("3\t3"));
        assert!(text.contains("7\t-3"));
        assert!(text.contains("# seed = 7"));
    }
}
