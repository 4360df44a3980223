use super::ctc::BLANK;
use crate::tensor::Tensor;

/// Best-path decoding: per-frame argmax over the first `length` frames,
/// merge repeats, drop blanks. Ties go to the lower index.
pub fn greedy_ctc_decode(log_probs: &Tensor, length: usize) -> Vec<usize> {
    let path: Vec<usize> = (0..length.min(log_probs.rows()))
        .map(|t| argmax(log_probs.row(t)))
        .collect();
    collapse_path(&path)
}

pub fn collapse_path(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != BLANK {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frames(path: &[usize], v: usize) -> Tensor {
        let rows: Vec<Vec<f64>> = path
            .iter()
            .map(|&k| (0..v).map(|j| if j == k { 0.0 } else { -5.0 }).collect())
            .collect();
        Tensor::from_rows(&rows).unwrap()
    }

    #[test]
    fn collapse_rules() {
        // a=1, b=2
        assert_eq!(greedy_ctc_decode(&frames(&[1, 1, 0, 2], 3), 4), vec![1, 2]);
        assert_eq!(
            greedy_ctc_decode(&frames(&[0, 0, 0], 3), 3),
            Vec::<usize>::new()
        );
        assert_eq!(greedy_ctc_decode(&frames(&[1, 0, 1], 3), 3), vec![1, 1]);
    }

    #[test]
    fn respects_length() {
        assert_eq!(greedy_ctc_decode(&frames(&[1, 0, 2], 3), 2), vec![1]);
    }
}
