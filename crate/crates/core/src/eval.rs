//! Consistency and diversity metrics.
//!
//! Both are mean element-wise Hamming distances: consistency compares the
//! remixed output to the input mixture over `T * P` cells, diversity compares
//! the output to the original roll over `T * P * C` cells.

use candle_core::{DType, Device};

use crate::diffusion::{sample_batch, NoiseSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::model::{Denoiser, FinalDecoder, Vae};
use crate::phrase::Phrase;
use crate::roll::{mixture_from_roll, Mixture, Pianoroll};

pub fn hamming_mean(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::contract(format!(
            "hamming distance of arrays with {} and {} cells",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::contract("hamming distance of empty arrays"));
    }
    let differing = a.iter().zip(b).filter(|(x, y)| x != y).count();
    Ok(differing as f64 / a.len() as f64)
}

pub fn mixture_distance(a: &Mixture, b: &Mixture) -> Result<f64> {
    if (a.time(), a.pitch()) != (b.time(), b.pitch()) {
        return Err(Error::contract("mixtures differ in shape"));
    }
    hamming_mean(a.cells(), b.cells())
}

pub fn roll_distance(a: &Pianoroll, b: &Pianoroll) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::contract("pianorolls differ in shape"));
    }
    hamming_mean(a.cells(), b.cells())
}

fn check_aligned(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::contract(format!("{a} samples but {b} references")));
    }
    if a == 0 {
        return Err(Error::contract("no samples to score"));
    }
    Ok(())
}

/// Mean distance between each sample's mixture and its input mixture.
pub fn consistency(samples: &[Pianoroll], mixtures: &[Mixture]) -> Result<f64> {
    check_aligned(samples.len(), mixtures.len())?;
    let mut sum = 0.0;
    for (y, x) in samples.iter().zip(mixtures) {
        sum += mixture_distance(&mixture_from_roll(y), x)?;
    }
    Ok(sum / samples.len() as f64)
}

/// Mean distance between each sample and its original roll.
pub fn diversity(samples: &[Pianoroll], originals: &[Pianoroll]) -> Result<f64> {
    check_aligned(samples.len(), originals.len())?;
    let mut sum = 0.0;
    for (a, b) in samples.iter().zip(originals) {
        sum += roll_distance(a, b)?;
    }
    Ok(sum / samples.len() as f64)
}

/// Anything that turns mixtures into instrument rolls.
pub trait Separator {
    fn name(&self) -> String;
    /// Row `i` uses `seeds[i]`.
    fn separate(&self, mixtures: &[&Mixture], seeds: &[u64]) -> Result<Vec<Pianoroll>>;
}

pub struct DiffusionSeparator<'a> {
    pub denoiser: &'a Denoiser,
    pub decoder: &'a FinalDecoder,
    pub schedule: NoiseSchedule,
    pub sampler: SamplerConfig,
}

impl Separator for DiffusionSeparator<'_> {
    fn name(&self) -> String {
        self.sampler.kind.to_string()
    }

    fn separate(&self, mixtures: &[&Mixture], seeds: &[u64]) -> Result<Vec<Pianoroll>> {
        sample_batch(
            self.denoiser,
            self.decoder,
            mixtures,
            self.denoiser.net.config().channels,
            &self.schedule,
            &self.sampler,
            seeds,
            DType::F32,
            &Device::Cpu,
        )
    }
}

impl Separator for Vae {
    fn name(&self) -> String {
        "vae".into()
    }

    fn separate(&self, mixtures: &[&Mixture], seeds: &[u64]) -> Result<Vec<Pianoroll>> {
        Vae::separate(self, mixtures, seeds, DType::F32, &Device::Cpu)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleMetrics {
    pub index: usize,
    pub source_id: String,
    pub bar_offset: u32,
    pub consistency: f64,
    pub diversity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub model: String,
    pub consistency: f64,
    pub diversity: f64,
    pub sample_count: usize,
    pub failed: usize,
    pub samples: Vec<SampleMetrics>,
}

impl MetricsReport {
    pub fn from_samples(model: String, samples: Vec<SampleMetrics>, failed: usize) -> Self {
        let n = samples.len();
        let mean = |f: fn(&SampleMetrics) -> f64| {
            if n == 0 {
                f64::NAN
            } else {
                samples.iter().map(f).sum::<f64>() / n as f64
            }
        };
        Self {
            model,
            consistency: mean(|s| s.consistency),
            diversity: mean(|s| s.diversity),
            sample_count: n,
            failed,
            samples,
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "model = {}\nconsistency = {:e}\ndiversity = {:e}\nn = {}\nfailed = {}\n\
             # index\tsource\tbar\tconsistency\tdiversity\n",
            self.model, self.consistency, self.diversity, self.sample_count, self.failed
        );
        for s in &self.samples {
            out.push_str(&format!(
                "{}\t{}\t{}\t{:e}\t{:e}\n",
                s.index, s.source_id, s.bar_offset, s.consistency, s.diversity
            ));
        }
        out
    }
}

/// Side-by-side summary of several reports.
pub fn comparison_table(reports: &[MetricsReport]) -> String {
    let mut out = format!("{:<10} {:>12} {:>12} {:>6} {:>6}\n", "model", "consistency", "diversity", "n", "failed");
    for r in reports {
        out.push_str(&format!(
            "{:<10} {:>12.3e} {:>12.3e} {:>6} {:>6}\n",
            r.model, r.consistency, r.diversity, r.sample_count, r.failed
        ));
    }
    out
}

/// Seed of the `index`-th test mixture.
pub fn sample_seed(base: u64, index: usize) -> u64 {
    base.wrapping_add(index as u64)
}

/// Generates one sample per phrase and scores it. A batch that faults is
/// retried one phrase at a time; phrases that still fault are counted as
/// failed and left out of the averages.
pub fn evaluate<S: Separator + ?Sized>(
    separator: &S,
    phrases: &[Phrase],
    seed: u64,
    batch_size: usize,
) -> Result<MetricsReport> {
    if phrases.is_empty() {
        return Err(Error::config("evaluation split is empty"));
    }
    let batch_size = batch_size.max(1);
    let mut samples = Vec::with_capacity(phrases.len());
    let mut failed = 0;
    for (chunk_index, chunk) in phrases.chunks(batch_size).enumerate() {
        let first = chunk_index * batch_size;
        let mixtures: Vec<Mixture> = chunk.iter().map(|p| mixture_from_roll(&p.roll)).collect();
        let refs: Vec<&Mixture> = mixtures.iter().collect();
        let seeds: Vec<u64> = (first..first + chunk.len()).map(|i| sample_seed(seed, i)).collect();
        let outputs: Vec<Option<Pianoroll>> = match separator.separate(&refs, &seeds) {
            Ok(rolls) => rolls.into_iter().map(Some).collect(),
            Err(Error::SamplingFault { .. } | Error::Numeric(_)) => refs
                .iter()
                .zip(&seeds)
                .map(|(m, &s)| match separator.separate(&[*m], &[s]) {
                    Ok(mut r) => Ok(Some(r.remove(0))),
                    Err(Error::SamplingFault { .. } | Error::Numeric(_)) => Ok(None),
                    Err(e) => Err(e),
                })
                .collect::<Result<_>>()?,
            Err(e) => return Err(e),
        };
        for (k, out) in outputs.into_iter().enumerate() {
            let phrase = &chunk[k];
            let Some(y) = out else {
                failed += 1;
                continue;
            };
            samples.push(SampleMetrics {
                index: first + k,
                source_id: phrase.source_id.clone(),
                bar_offset: phrase.bar_offset,
                consistency: mixture_distance(&mixture_from_roll(&y), &mixtures[k])?,
                diversity: roll_distance(&y, &phrase.roll)?,
            });
        }
    }
    Ok(MetricsReport::from_samples(separator.name(), samples, failed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::roll::RollDims;
    use proptest::prelude::*;

    #[test]
    fn hamming_examples() {
        let a = [true, false, true, true];
        let b = [false, true, false, false];
        assert_eq!(hamming_mean(&a, &a).unwrap(), 0.0);
        assert_eq!(hamming_mean(&a, &b).unwrap(), 1.0);
        assert!(hamming_mean(&a, &b[..3]).is_err());
    }

    proptest! {
        #[test]
        fn hamming_matches_double_loop(a in prop::collection::vec(any::<bool>(), 25), b in prop::collection::vec(any::<bool>(), 25)) {
            let mut count = 0;
            for i in 0..5 {
                for j in 0..5 {
                    if a[i * 5 + j] != b[i * 5 + j] {
                        count += 1;
                    }
                }
            }
            prop_assert_eq!(hamming_mean(&a, &b).unwrap(), count as f64 / 25.0);
        }
    }

    struct Fixed(Vec<Pianoroll>, &'static str);

    impl Separator for Fixed {
        fn name(&self) -> String {
            self.1.into()
        }
        fn separate(&self, mixtures: &[&Mixture], seeds: &[u64]) -> Result<Vec<Pianoroll>> {
            Ok(seeds.iter().zip(mixtures).map(|(&s, _)| self.0[s as usize].clone()).collect())
        }
    }

    fn phrase(seed: u64) -> Phrase {
        let dims = RollDims::new(4, 4, 2);
        let cells = (0..dims.len()).map(|i| (i as u64 * 7 + seed) % 5 == 0).collect();
        Phrase {
            roll: Pianoroll::from_cells(dims, cells).unwrap(),
            source_id: format!("s{seed}"),
            bar_offset: 0,
        }
    }

    #[test]
    fn perfect_and_silent_stubs() {
        let phrases: Vec<Phrase> = (0..3).map(phrase).collect();
        let rolls: Vec<Pianoroll> = phrases.iter().map(|p| p.roll.clone()).collect();
        let perfect = evaluate(&Fixed(rolls.clone(), "perfect"), &phrases, 0, 2).unwrap();
        assert_eq!((perfect.consistency, perfect.diversity), (0.0, 0.0));

        let zeros = vec![Pianoroll::zeros(RollDims::new(4, 4, 2)); 3];
        let silent = evaluate(&Fixed(zeros, "zero"), &phrases, 0, 2).unwrap();
        let mix_density: f64 = phrases.iter().map(|p| mixture_from_roll(&p.roll).density()).sum::<f64>() / 3.0;
        let roll_density: f64 = phrases.iter().map(|p| p.roll.density()).sum::<f64>() / 3.0;
        assert!((silent.consistency - mix_density).abs() < 1e-15);
        assert!((silent.diversity - roll_density).abs() < 1e-15);

        let again = evaluate(&Fixed(vec![Pianoroll::zeros(RollDims::new(4, 4, 2)); 3], "zero"), &phrases, 0, 3).unwrap();
        assert_eq!(again.to_text(), silent.to_text());
    }

    #[test]
    fn report_field_order_is_stable() {
        let r = MetricsReport::from_samples(
            "ddim".into(),
            vec![SampleMetrics {
                index: 0,
                source_id: "a".into(),
                bar_offset: 2,
                consistency: 0.0,
                diversity: 0.25,
            }],
            1,
        );
        assert_eq!(
            r.to_text(),
            "model = ddim\nconsistency = 0e0\ndiversity = 2.5e-1\nn = 1\nfailed = 1\n\
             # index\tsource\tbar\tconsistency\tdiversity\n0\ta\t2\t0e0\t2.5e-1\n"
        );
        assert!(comparison_table(&[r]).starts_with("model"));
    }

    #[test]
    fn mismatched_lists_rejected() {
        let p = phrase(1).roll;
        assert!(diversity(&[p.clone()], &[]).is_err());
        assert!(consistency(&[p], &[]).is_err());
    }
}
