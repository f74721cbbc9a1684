//! Small numeric helpers.

/// Sum after sorting into a canonical order, so any permutation of the same
/// addends rounds identically. Used wherever a reduction runs across users
/// and bit-exact permutation equivariance is promised.
pub fn ordered_sum(vals: &mut [f64]) -> f64 {
    vals.sort_unstable_by(f64::total_cmp);
    vals.iter().sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permuted_addends_round_identically() {
        let mut a = vec![0.1, 0.2, 0.3, 1e16, -1e16, 7e-9];
        let mut b = vec![1e16, 0.3, 7e-9, 0.1, -1e16, 0.2];
        assert_eq!(ordered_sum(&mut a).to_bits(), ordered_sum(&mut b).to_bits());
    }
}
