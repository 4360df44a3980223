//! Connectionist temporal classification loss.
//!
//! The forward recursion runs in log space over the blank-extended label
//! sequence. Gradients come from the adjoint of that same recursion, so the
//! graph never needs a separate beta pass.

use crate::error::{MoleError, Result};
use crate::tensor::Tensor;

pub const BLANK: usize = 0;

fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn extended(target: &[usize]) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(BLANK);
    for &k in target {
        ext.push(k);
        ext.push(BLANK);
    }
    ext
}

fn skip_allowed(ext: &[usize], s: usize) -> bool {
    s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2]
}

/// Minimum number of frames a CTC path for `target` needs.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Log-alpha table, row-major `[len × (2L+1)]`, for `logp` of `len` rows of
/// width `v`.
pub(crate) fn log_alpha(logp: &[f64], v: usize, target: &[usize]) -> Vec<f64> {
    let ext = extended(target);
    let s_len = ext.len();
    let t_len = logp.len() / v;
    let mut alpha = vec![f64::NEG_INFINITY; t_len * s_len];
    alpha[0] = logp[ext[0]];
    if s_len > 1 {
        alpha[1] = logp[ext[1]];
    }
    for t in 1..t_len {
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        let row = &logp[t * v..(t + 1) * v];
        for s in 0..s_len {
            let mut acc = prev[s];
            if s >= 1 {
                acc = lse2(acc, prev[s - 1]);
            }
            if skip_allowed(&ext, s) {
                acc = lse2(acc, prev[s - 2]);
            }
            cur[s] = if acc == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                acc + row[ext[s]]
            };
        }
    }
    alpha
}

pub(crate) fn total_log_prob(alpha: &[f64], t_len: usize, target_len: usize) -> f64 {
    let s_len = 2 * target_len + 1;
    let last = &alpha[(t_len - 1) * s_len..t_len * s_len];
    if s_len >= 2 {
        lse2(last[s_len - 1], last[s_len - 2])
    } else {
        last[0]
    }
}

/// Gradient of `-log p(target)` with respect to every entry of `logp`,
/// obtained by reverse accumulation through the alpha recursion.
pub(crate) fn log_alpha_adjoint(
    logp: &[f64],
    v: usize,
    target: &[usize],
    alpha: &[f64],
) -> Vec<f64> {
    let ext = extended(target);
    let s_len = ext.len();
    let t_len = logp.len() / v;
    let log_p = total_log_prob(alpha, t_len, target.len());
    let mut dlogp = vec![0.0; logp.len()];
    if !log_p.is_finite() {
        return dlogp;
    }
    let mut adj = vec![0.0; s_len];
    for s in s_len.saturating_sub(2)..s_len {
        let a = alpha[(t_len - 1) * s_len + s];
        if a.is_finite() {
            adj[s] = -(a - log_p).exp();
        }
    }
    for t in (0..t_len).rev() {
        let cur = &alpha[t * s_len..(t + 1) * s_len];
        let mut prev_adj = vec![0.0; s_len];
        for s in 0..s_len {
            if adj[s] == 0.0 || !cur[s].is_finite() {
                continue;
            }
            let k = ext[s];
            dlogp[t * v + k] += adj[s];
            if t == 0 {
                continue;
            }
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let pre = cur[s] - logp[t * v + k];
            let mut push = |r: usize| {
                if prev[r].is_finite() {
                    prev_adj[r] += adj[s] * (prev[r] - pre).exp();
                }
            };
            push(s);
            if s >= 1 {
                push(s - 1);
            }
            if skip_allowed(&ext, s) {
                push(s - 2);
            }
        }
        adj = prev_adj;
    }
    dlogp
}

/// Per-utterance CTC input: `[T × (V+1)]` log-probabilities, blank at 0.
#[derive(Clone, Debug)]
pub struct CtcInput {
    log_probs: Tensor,
    target: Vec<usize>,
    length: usize,
}

impl CtcInput {
    pub fn new(log_probs: Tensor, target: Vec<usize>, length: usize) -> Result<Self> {
        if log_probs.shape().len() != 2 {
            return Err(MoleError::dim("ctc", log_probs.shape(), &[0, 0]));
        }
        let (t, v) = (log_probs.rows(), log_probs.cols());
        if length == 0 || length > t {
            return Err(MoleError::Contract(format!(
                "ctc length {length} outside 1..={t}"
            )));
        }
        if let Some(&bad) = target.iter().find(|&&k| k == BLANK || k >= v) {
            return Err(MoleError::Contract(format!(
                "target label {bad} outside 1..{v}"
            )));
        }
        for i in 0..length {
            let s: f64 = log_probs.row(i).iter().map(|x| x.exp()).sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(MoleError::Contract(format!(
                    "frame {i} probabilities sum to {s}, expected 1"
                )));
            }
        }
        Ok(CtcInput {
            log_probs,
            target,
            length,
        })
    }

    pub fn log_probs(&self) -> &Tensor {
        &self.log_probs
    }

    pub fn target(&self) -> &[usize] {
        &self.target
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn is_feasible(&self) -> bool {
        min_frames(&self.target) <= self.length
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CtcLoss {
    pub loss: f64,
    /// False when no alignment exists; `loss` is then `+inf`.
    pub feasible: bool,
}

pub fn ctc_loss(input: &CtcInput) -> CtcLoss {
    let v = input.log_probs.cols();
    let logp = &input.log_probs.data()[..input.length * v];
    if !input.is_feasible() {
        return CtcLoss {
            loss: f64::INFINITY,
            feasible: false,
        };
    }
    let alpha = log_alpha(logp, v, &input.target);
    let loss = -total_log_prob(&alpha, input.length, input.target.len());
    CtcLoss {
        loss,
        feasible: loss.is_finite(),
    }
}

#[cfg(test)]
pub(crate) mod oracle {
    /// Collapses a frame-level path: merge repeats, then drop blanks.
    pub fn collapse(path: &[usize]) -> Vec<usize> {
        let mut out = Vec::new();
        let mut prev = None;
        for &k in path {
            if Some(k) != prev && k != super::BLANK {
                out.push(k);
            }
            prev = Some(k);
        }
        out
    }

    /// Sums the probability of every one of the `v^t` paths that collapses
    /// to `target`.
    pub fn brute_force_prob(probs: &[Vec<f64>], target: &[usize]) -> f64 {
        let t = probs.len();
        let v = probs[0].len();
        let mut total = 0.0;
        let mut path = vec![0usize; t];
        loop {
            if collapse(&path) == target {
                total += path
                    .iter()
                    .enumerate()
                    .map(|(i, &k)| probs[i][k])
                    .product::<f64>();
            }
            let mut i = 0;
            loop {
                if i == t {
                    return total;
                }
                path[i] += 1;
                if path[i] < v {
                    break;
                }
                path[i] = 0;
                i += 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::oracle::*;
    use super::*;
    use crate::tensor::gradcheck::{gradcheck, GradcheckOptions};
    use crate::tensor::Graph;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn input_from_probs(probs: &[Vec<f64>], target: &[usize]) -> CtcInput {
        let rows: Vec<Vec<f64>> = probs
            .iter()
            .map(|r| r.iter().map(|p| p.ln()).collect())
            .collect();
        CtcInput::new(
            Tensor::from_rows(&rows).unwrap(),
            target.to_vec(),
            probs.len(),
        )
        .unwrap()
    }

    fn random_probs(rng: &mut ChaCha8Rng, t: usize, v: usize) -> Vec<Vec<f64>> {
        (0..t)
            .map(|_| {
                let raw: Vec<f64> = (0..v).map(|_| rng.gen_range(0.05..1.0)).collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(|x| x / s).collect()
            })
            .collect()
    }

    #[test]
    fn single_frame_single_path() {
        let probs = vec![vec![0.4, 0.6]];
        let l = ctc_loss(&input_from_probs(&probs, &[1]));
        assert!((l.loss - (-(0.6f64).ln())).abs() < 1e-12);
        assert!((l.loss - 0.5108).abs() < 1e-4);
    }

    #[test]
    fn two_frames_three_paths() {
        let probs = vec![vec![0.5, 0.5], vec![0.5, 0.5]];
        assert!((brute_force_prob(&probs, &[1]) - 0.75).abs() < 1e-15);
        let l = ctc_loss(&input_from_probs(&probs, &[1]));
        assert!((l.loss + 0.75f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_target_is_all_blank() {
        let probs = vec![vec![0.3, 0.7], vec![0.8, 0.2]];
        let l = ctc_loss(&input_from_probs(&probs, &[]));
        assert!((l.loss + (0.3f64 * 0.8).ln()).abs() < 1e-12);
    }

    #[test]
    fn infeasible_target_is_infinite_not_nan() {
        let probs = vec![vec![0.5, 0.5], vec![0.5, 0.5]];
        // "aa" needs a blank between the repeats: 3 frames.
        let l = ctc_loss(&input_from_probs(&probs, &[1, 1]));
        assert!(!l.feasible);
        assert_eq!(l.loss, f64::INFINITY);

        let mut g = Graph::new();
        let rows: Vec<Vec<f64>> = probs
            .iter()
            .map(|r| r.iter().map(|p| p.ln()).collect())
            .collect();
        let x = g.input(&Tensor::from_rows(&rows).unwrap());
        let y = g.ctc(x, &[1, 1], 2).unwrap();
        assert_eq!(g.scalar(y), f64::INFINITY);
        g.backward(y).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn matches_exhaustive_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..60 {
            let t = rng.gen_range(1..=6);
            let v = rng.gen_range(1..=4) + 1;
            let l = rng.gen_range(0..=t.min(3));
            let target: Vec<usize> = (0..l).map(|_| rng.gen_range(1..v)).collect();
            let probs = random_probs(&mut rng, t, v);
            let p = brute_force_prob(&probs, &target);
            let loss = ctc_loss(&input_from_probs(&probs, &target));
            if p == 0.0 {
                assert!(!loss.feasible);
            } else {
                assert!((loss.loss + p.ln()).abs() < 1e-9, "t={t} v={v} {target:?}");
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits = Tensor::randn(vec![4, 3], 1.0, &mut rng);
        let r = gradcheck(
            |g, x| {
                let lp = g.log_softmax(x)?;
                g.ctc(lp, &[1, 2], 4)
            },
            &logits,
            GradcheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");

        // Repeated labels exercise the skip restriction.
        let logits = Tensor::randn(vec![5, 3], 1.0, &mut rng);
        let r = gradcheck(
            |g, x| {
                let lp = g.log_softmax(x)?;
                g.ctc(lp, &[2, 2], 5)
            },
            &logits,
            GradcheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    #[test]
    fn rejects_unnormalised_frames() {
        let t = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert!(CtcInput::new(t, vec![1], 1).is_err());
    }

    #[test]
    fn frames_beyond_length_are_ignored() {
        let probs = [vec![0.2, 0.8], vec![0.6, 0.4], vec![0.9, 0.1]];
        let rows: Vec<Vec<f64>> = probs
            .iter()
            .map(|r| r.iter().map(|p: &f64| p.ln()).collect())
            .collect();
        let full = Tensor::from_rows(&rows).unwrap();
        let a = ctc_loss(&CtcInput::new(full.clone(), vec![1], 2).unwrap());
        let b = ctc_loss(&input_from_probs(&probs[..2], &[1]));
        assert_eq!(a.loss, b.loss);
    }
}
