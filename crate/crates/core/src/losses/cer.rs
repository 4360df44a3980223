use crate::error::{MoleError, Result};

/// Unit-cost Levenshtein distance between two token sequences.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Character error rate as an exact ratio.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Cer {
    pub errors: usize,
    pub ref_len: usize,
}

impl Cer {
    pub fn value(self) -> f64 {
        if self.ref_len == 0 {
            0.0
        } else {
            self.errors as f64 / self.ref_len as f64
        }
    }
}

impl std::ops::Add for Cer {
    type Output = Cer;

    fn add(self, o: Cer) -> Cer {
        Cer {
            errors: self.errors + o.errors,
            ref_len: self.ref_len + o.ref_len,
        }
    }
}

impl std::ops::AddAssign for Cer {
    fn add_assign(&mut self, o: Cer) {
        *self = *self + o;
    }
}

pub fn cer<T: PartialEq>(hyp: &[T], reference: &[T]) -> Result<Cer> {
    if reference.is_empty() {
        return Err(MoleError::Contract(
            "CER needs a non-empty reference".into(),
        ));
    }
    Ok(Cer {
        errors: edit_distance(hyp, reference),
        ref_len: reference.len(),
    })
}

/// CER over the characters of two strings.
pub fn cer_str(hyp: &str, reference: &str) -> Result<Cer> {
    let h: Vec<char> = hyp.chars().collect();
    let r: Vec<char> = reference.chars().collect();
    cer(&h, &r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Full-table recursion straight from the definition.
    fn dp_oracle(a: &[char], b: &[char]) -> usize {
        let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
        for (i, row) in d.iter_mut().enumerate() {
            row[0] = i;
        }
        for j in 0..=b.len() {
            d[0][j] = j;
        }
        for i in 1..=a.len() {
            for j in 1..=b.len() {
                let c = if a[i - 1] == b[j - 1] { 0 } else { 1 };
                d[i][j] = (d[i - 1][j] + 1)
                    .min(d[i][j - 1] + 1)
                    .min(d[i - 1][j - 1] + c);
            }
        }
        d[a.len()][b.len()]
    }

    #[test]
    fn kitten_sitting() {
        let c = cer_str("kitten", "sitting").unwrap();
        assert_eq!(
            c,
            Cer {
                errors: 3,
                ref_len: 7
            }
        );
        assert_eq!(c.value(), 3.0 / 7.0);
        let k: Vec<char> = "kitten".chars().collect();
        let s: Vec<char> = "sitting".chars().collect();
        assert_eq!(dp_oracle(&k, &s), 3);
    }

    #[test]
    fn identity_and_empty_hypothesis() {
        assert_eq!(cer_str("abc", "abc").unwrap().value(), 0.0);
        assert_eq!(cer_str("", "abcd").unwrap().value(), 1.0);
        assert!(cer_str("abc", "").is_err());
    }

    proptest! {
        #[test]
        fn distance_is_symmetric_and_matches_oracle(a in "[abc]{0,8}", b in "[abc]{0,8}") {
            let a: Vec<char> = a.chars().collect();
            let b: Vec<char> = b.chars().collect();
            prop_assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
            prop_assert_eq!(edit_distance(&a, &b), dp_oracle(&a, &b));
            prop_assert_eq!(edit_distance(&a, &a), 0);
        }
    }
}
