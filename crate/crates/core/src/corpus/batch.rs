use rand::seq::index;
use rand::Rng;

use super::Utterance;
use crate::error::{MoleError, Result};
use crate::tensor::Tensor;

/// Padded feature sequences with their true lengths, languages and targets.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch {
    pub ids: Vec<String>,
    /// Each `[max_len × d]`, zero rows past the true length.
    pub features: Vec<Tensor>,
    pub lengths: Vec<usize>,
    pub languages: Vec<usize>,
    pub targets: Vec<Vec<usize>>,
    /// Set when the batch was larger than the pool and drawn with replacement.
    pub with_replacement: bool,
}

impl SequenceBatch {
    pub fn from_utterances(utts: &[&Utterance]) -> Result<Self> {
        let first = utts
            .first()
            .ok_or_else(|| MoleError::Contract("empty batch".into()))?;
        let d = first.features.cols();
        let max_len = utts.iter().map(|u| u.len()).max().unwrap_or(0);
        let mut features = Vec::with_capacity(utts.len());
        for u in utts {
            if u.features.cols() != d {
                return Err(MoleError::dim("batch", u.features.shape(), &[d]));
            }
            let mut data = u.features.data().to_vec();
            data.resize(max_len * d, 0.0);
            features.push(Tensor::new(vec![max_len, d], data)?);
        }
        Ok(SequenceBatch {
            ids: utts.iter().map(|u| u.id.clone()).collect(),
            features,
            lengths: utts.iter().map(|u| u.len()).collect(),
            languages: utts.iter().map(|u| u.language).collect(),
            targets: utts.iter().map(|u| u.tokens.clone()).collect(),
            with_replacement: false,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.features.first().map_or(0, Tensor::rows)
    }

    /// Features of element `i` without padding.
    pub fn unpadded(&self, i: usize) -> Tensor {
        self.features[i].head_rows(self.lengths[i])
    }
}

/// Draws `batch_size` utterances uniformly from the pooled set, without
/// replacement unless the pool is smaller than the batch.
pub fn sample_batch<R: Rng + ?Sized>(
    pool: &[Utterance],
    batch_size: usize,
    rng: &mut R,
) -> Result<SequenceBatch> {
    if pool.is_empty() {
        return Err(MoleError::Contract(
            "cannot sample from an empty corpus".into(),
        ));
    }
    if batch_size == 0 {
        return Err(MoleError::Contract("batch size must be positive".into()));
    }
    let with_replacement = batch_size > pool.len();
    let picks: Vec<&Utterance> = if with_replacement {
        (0..batch_size)
            .map(|_| &pool[rng.gen_range(0..pool.len())])
            .collect()
    } else {
        index::sample(rng, pool.len(), batch_size)
            .iter()
            .map(|i| &pool[i])
            .collect()
    };
    let mut b = SequenceBatch::from_utterances(&picks)?;
    b.with_replacement = with_replacement;
    Ok(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn utt(id: &str, language: usize, len: usize) -> Utterance {
        Utterance {
            id: id.into(),
            language,
            features: Tensor::filled(vec![len, 2], 1.0),
            tokens: vec![1],
            text: "a".into(),
        }
    }

    #[test]
    fn singleton_batch_has_no_padding() {
        let pool = vec![utt("a", 0, 3)];
        let b = sample_batch(&pool, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(b.ids, vec!["a"]);
        assert_eq!(b.features[0], pool[0].features);
        assert!(!b.with_replacement);
    }

    #[test]
    fn padding_fills_the_tail_with_zeros() {
        let pool = vec![utt("a", 0, 2), utt("b", 1, 5), utt("c", 0, 4)];
        let b = sample_batch(&pool, 3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for i in 0..3 {
            let f = &b.features[i];
            assert_eq!(f.rows(), 5);
            let pad_rows = (0..5)
                .filter(|&t| f.row(t).iter().all(|&v| v == 0.0))
                .count();
            assert_eq!(pad_rows, 5 - b.lengths[i]);
            assert_eq!(b.unpadded(i).rows(), b.lengths[i]);
        }
        let mut ids = b.ids.clone();
        ids.sort();
        assert_eq!(ids, vec!["a", "b", "c"]);
    }

    #[test]
    fn oversized_batches_are_flagged() {
        let pool = vec![utt("a", 0, 2), utt("b", 1, 5)];
        let b = sample_batch(&pool, 5, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(b.with_replacement);
        assert_eq!(b.len(), 5);
        assert!(sample_batch(&[], 1, &mut ChaCha8Rng::seed_from_u64(2)).is_err());
    }

    fn chi_squared(observed: &[f64], expected: &[f64]) -> f64 {
        observed
            .iter()
            .zip(expected)
            .map(|(o, e)| (o - e).powi(2) / e)
            .sum()
    }

    #[test]
    fn draws_follow_pool_proportions() {
        let pool: Vec<Utterance> = (0..50)
            .map(|i| utt(&i.to_string(), usize::from(i >= 40), 1))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut counts = [0.0f64; 2];
        for _ in 0..2500 {
            for l in sample_batch(&pool, 4, &mut rng).unwrap().languages {
                counts[l] += 1.0;
            }
        }
        let frac = counts[0] / 10_000.0;
        assert!((frac - 0.8).abs() < 0.02, "{frac}");
        // Critical value of chi-squared with 1 degree of freedom at 0.01.
        assert!(chi_squared(&counts, &[8000.0, 2000.0]) < 6.635);
    }

    #[test]
    fn five_language_draws_pass_chi_squared() {
        let sizes = [60, 32, 40, 12, 4];
        let pool: Vec<Utterance> = sizes
            .iter()
            .enumerate()
            .flat_map(|(l, &n)| (0..n).map(move |i| utt(&format!("{l}-{i}"), l, 1)))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut counts = [0.0f64; 5];
        for _ in 0..1250 {
            for l in sample_batch(&pool, 8, &mut rng).unwrap().languages {
                counts[l] += 1.0;
            }
        }
        let expected: Vec<f64> = sizes.iter().map(|&n| 10_000.0 * n as f64 / 148.0).collect();
        // Critical value with 4 degrees of freedom at 0.01.
        assert!(chi_squared(&counts, &expected) < 13.277);
    }
}
