//! Language representation loss: a prototypical cosine-softmax over
//! batch-local language centroids of the gate embeddings.

use std::collections::BTreeMap;

use crate::error::{MoleError, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug)]
pub struct LrlBatch {
    pub embeddings: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub num_languages: usize,
}

impl LrlBatch {
    pub fn new(embeddings: Vec<Tensor>, labels: Vec<usize>, num_languages: usize) -> Result<Self> {
        if embeddings.len() != labels.len() {
            return Err(MoleError::Contract(format!(
                "{} embeddings but {} labels",
                embeddings.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_languages) {
            return Err(MoleError::Contract(format!(
                "language label {bad} outside 0..{num_languages}"
            )));
        }
        Ok(LrlBatch {
            embeddings,
            labels,
            num_languages,
        })
    }
}

/// Records the loss on `g`. Centroids include each sample itself; languages
/// absent from the batch take no part in the softmax.
pub fn lrl_graph(g: &mut Graph<'_>, embeddings: &[Var], labels: &[usize]) -> Result<Var> {
    if embeddings.is_empty() || embeddings.len() != labels.len() {
        return Err(MoleError::Contract(
            "lrl needs one label per embedding".into(),
        ));
    }
    let mut members: BTreeMap<usize, Vec<Var>> = BTreeMap::new();
    for (&z, &l) in embeddings.iter().zip(labels) {
        members.entry(l).or_default().push(z);
    }
    let mut centroid_of = BTreeMap::new();
    let mut centroids = Vec::with_capacity(members.len());
    for (slot, (&lang, zs)) in members.iter().enumerate() {
        let mut acc = zs[0];
        for &z in &zs[1..] {
            acc = g.add(acc, z)?;
        }
        let c = g.scale(acc, 1.0 / zs.len() as f64)?;
        centroids.push(c);
        centroid_of.insert(lang, slot);
    }

    let mut terms = Vec::with_capacity(embeddings.len());
    for (&z, l) in embeddings.iter().zip(labels) {
        let mut cos = Vec::with_capacity(centroids.len());
        for &c in &centroids {
            cos.push(g.cosine(z, c)?);
        }
        let logits = g.stack(&cos)?;
        let logp = g.log_softmax(logits)?;
        let own = g.index(logp, centroid_of[l])?;
        terms.push(g.scale(own, -1.0)?);
    }
    let all = g.stack(&terms)?;
    g.mean(all)
}

/// Loss value for a standalone batch.
pub fn lrl(batch: &LrlBatch) -> Result<f64> {
    let mut g = Graph::new();
    let zs: Vec<Var> = batch.embeddings.iter().map(|t| g.constant(t)).collect();
    let y = lrl_graph(&mut g, &zs, &batch.labels)?;
    Ok(g.scalar(y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{gradcheck, GradcheckOptions};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        d / (na * nb)
    }

    /// Direct recomputation: centroids, cosines, softmax, mean NLL.
    fn direct(embs: &[Vec<f64>], labels: &[usize]) -> f64 {
        let mut langs: Vec<usize> = labels.to_vec();
        langs.sort_unstable();
        langs.dedup();
        let dim = embs[0].len();
        let cents: Vec<Vec<f64>> = langs
            .iter()
            .map(|&l| {
                let mut c = vec![0.0; dim];
                let mut n = 0.0;
                for (e, &lab) in embs.iter().zip(labels) {
                    if lab == l {
                        c.iter_mut().zip(e).for_each(|(a, b)| *a += b);
                        n += 1.0;
                    }
                }
                c.into_iter().map(|x| x / n).collect()
            })
            .collect();
        let mut total = 0.0;
        for (e, &lab) in embs.iter().zip(labels) {
            let own = langs.iter().position(|&l| l == lab).unwrap();
            let denom: f64 = cents.iter().map(|c| cos(e, c).exp()).sum();
            total += -(cos(e, &cents[own]).exp() / denom).ln();
        }
        total / embs.len() as f64
    }

    #[test]
    fn orthogonal_pair_closed_form() {
        let b = LrlBatch::new(
            vec![
                Tensor::vector(vec![1.0, 0.0]),
                Tensor::vector(vec![0.0, 1.0]),
            ],
            vec![0, 1],
            2,
        )
        .unwrap();
        let v = lrl(&b).unwrap();
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn total_confusion_gives_ln_n() {
        let z = Tensor::vector(vec![0.3, -0.7, 1.1]);
        let b = LrlBatch::new(
            vec![z.clone(), z.clone(), z.clone(), z],
            vec![0, 1, 2, 3],
            4,
        )
        .unwrap();
        assert!((lrl(&b).unwrap() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_embedding_is_degenerate() {
        let b = LrlBatch::new(
            vec![
                Tensor::vector(vec![0.0, 0.0]),
                Tensor::vector(vec![0.0, 1.0]),
            ],
            vec![0, 1],
            2,
        )
        .unwrap();
        assert!(matches!(lrl(&b), Err(MoleError::Degenerate(_))));
    }

    #[test]
    fn labels_out_of_range_rejected() {
        assert!(LrlBatch::new(vec![Tensor::vector(vec![1.0])], vec![3], 2).is_err());
    }

    #[test]
    fn random_batches_match_direct_computation() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let n = rng.gen_range(2..10);
            let embs: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
            let batch = LrlBatch::new(
                embs.iter().cloned().map(Tensor::vector).collect(),
                labels.clone(),
                3,
            )
            .unwrap();
            assert!((lrl(&batch).unwrap() - direct(&embs, &labels)).abs() < 1e-12);
        }
    }

    #[test]
    fn scaling_and_permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let embs: Vec<Tensor> = (0..6)
            .map(|_| Tensor::randn(vec![5], 1.0, &mut rng))
            .collect();
        let labels = vec![0, 1, 2, 0, 1, 1];
        let base = lrl(&LrlBatch::new(embs.clone(), labels.clone(), 3).unwrap()).unwrap();

        let scaled: Vec<Tensor> = embs
            .iter()
            .map(|t| Tensor::vector(t.data().iter().map(|x| x * 7.5).collect()))
            .collect();
        let s = lrl(&LrlBatch::new(scaled, labels.clone(), 3).unwrap()).unwrap();
        assert!((s - base).abs() < 1e-12);

        let perm = [3, 0, 5, 1, 4, 2];
        let pe: Vec<Tensor> = perm.iter().map(|&i| embs[i].clone()).collect();
        let pl: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let p = lrl(&LrlBatch::new(pe, pl, 3).unwrap()).unwrap();
        assert!((p - base).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        // All embeddings as rows of one input matrix.
        let x = Tensor::randn(vec![5, 3], 1.0, &mut rng);
        let labels = [0, 1, 0, 2, 1];
        let r = gradcheck(
            |g, x| {
                let rows: Vec<Var> = (0..5).map(|i| g.row(x, i)).collect::<Result<_>>()?;
                lrl_graph(g, &rows, &labels)
            },
            &x,
            GradcheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    #[test]
    fn gradient_step_reduces_loss_on_separable_batch() {
        let mut x = Tensor::from_rows(&[
            vec![1.0, 0.2, 0.1],
            vec![0.9, 0.4, 0.0],
            vec![0.3, 1.0, 0.2],
            vec![0.5, 0.8, 0.1],
        ])
        .unwrap();
        let labels = [0, 0, 1, 1];
        let eval = |x: &Tensor| -> (f64, Vec<f64>) {
            let mut g = Graph::new();
            let xv = g.input(x);
            let rows: Vec<Var> = (0..4).map(|i| g.row(xv, i).unwrap()).collect();
            let y = lrl_graph(&mut g, &rows, &labels).unwrap();
            g.backward(y).unwrap();
            (g.scalar(y), g.grad(xv).unwrap().to_vec())
        };
        let (before, grad) = eval(&x);
        x.data_mut()
            .iter_mut()
            .zip(&grad)
            .for_each(|(w, d)| *w -= 0.1 * d);
        let (after, _) = eval(&x);
        assert!(after < before, "{after} !< {before}");
    }
}
