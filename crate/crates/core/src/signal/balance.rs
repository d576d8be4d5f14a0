use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};

/// Randomly undersamples every class down to the minority-class count.
///
/// Returns the kept indices in ascending order. Classes already at the
/// minority count are kept whole, so a balanced input is returned unchanged.
pub fn balance_undersample(labels: &[u8], seed: u64) -> Result<Vec<usize>> {
    let mut by_class: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    if by_class.len() < 2 {
        return Err(Error::contract(format!(
            "undersampling needs at least two classes, found {}",
            by_class.len()
        )));
    }
    let target = by_class.values().map(Vec::len).min().unwrap_or(0);
    let mut kept = Vec::with_capacity(target * by_class.len());
    for (class, mut idx) in by_class {
        if idx.len() > target {
            let mut rng = crate::rng::substream_indexed(seed, "undersample", class as u64);
            idx.shuffle(&mut rng);
            idx.truncate(target);
        }
        kept.extend(idx);
    }
    kept.sort_unstable();
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(neg: usize, pos: usize) -> Vec<u8> {
        let mut v = vec![0u8; neg];
        v.extend(std::iter::repeat_n(1u8, pos));
        v
    }

    #[test]
    fn reduces_majority_to_minority() {
        let y = labels(100, 20);
        let kept = balance_undersample(&y, 5).unwrap();
        let pos = kept.iter().filter(|&&i| y[i] == 1).count();
        let neg = kept.iter().filter(|&&i| y[i] == 0).count();
        assert_eq!((neg, pos), (20, 20));
    }

    #[test]
    fn balanced_input_is_a_fixed_point() {
        let y = labels(7, 7);
        assert_eq!(
            balance_undersample(&y, 1).unwrap(),
            (0..14).collect::<Vec<_>>()
        );
    }

    #[test]
    fn selection_depends_only_on_seed() {
        let y = labels(100, 20);
        let a = balance_undersample(&y, 9).unwrap();
        assert_eq!(a, balance_undersample(&y, 9).unwrap());
        assert_ne!(a, balance_undersample(&y, 10).unwrap());
    }

    #[test]
    fn single_class_is_rejected() {
        assert!(matches!(
            balance_undersample(&[1, 1, 1], 0),
            Err(Error::Contract(_))
        ));
    }
}
