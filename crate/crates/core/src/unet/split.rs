//! Patient-level train / validation / test partitioning.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Result, UnetError};

/// Splits distinct patient ids into `(train, val, test)`.
///
/// Ids are de-duplicated and sorted before a seeded shuffle, so the result
/// depends only on the id set and the seed. `test` takes `floor(0.1 N)`
/// (at least 1), `val` takes `floor(0.2 (N - test))` (at least 1) of the rest.
pub fn split_patients<S: AsRef<str>>(
    patient_ids: &[S],
    seed: u64,
) -> Result<(Vec<String>, Vec<String>, Vec<String>)> {
    let mut ids: Vec<String> = patient_ids.iter().map(|s| s.as_ref().to_owned()).collect();
    ids.sort();
    ids.dedup();
    let n = ids.len();
    if n < 3 {
        return Err(UnetError::TooFewPatients(n));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = (n / 10).max(1);
    let n_val = ((n - n_test) / 5).max(1);
    let test = ids.split_off(n - n_test);
    let val = ids.split_off(ids.len() - n_val);
    Ok((ids, val, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_for_hundred() {
        let ids: Vec<String> = (0..100).map(|i| format!("p{i:03}")).collect();
        let (tr, va, te) = split_patients(&ids, 7).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (72, 18, 10));
        let mut all: Vec<_> = tr.iter().chain(&va).chain(&te).cloned().collect();
        all.sort();
        assert_eq!(all, ids);
    }

    #[test]
    fn minimum_sizes_and_errors() {
        let (tr, va, te) = split_patients(&["a", "b", "c"], 0).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (1, 1, 1));
        assert!(matches!(
            split_patients(&["a", "a", "b"], 0),
            Err(UnetError::TooFewPatients(2))
        ));
    }

    #[test]
    fn order_of_input_does_not_matter() {
        let a: Vec<String> = (0..20).map(|i| i.to_string()).collect();
        let mut b = a.clone();
        b.reverse();
        assert_eq!(
            split_patients(&a, 3).unwrap(),
            split_patients(&b, 3).unwrap()
        );
        assert_ne!(
            split_patients(&a, 3).unwrap(),
            split_patients(&a, 4).unwrap()
        );
    }
}
