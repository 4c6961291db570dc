use rand::seq::index::sample;
use rand::Rng as _;

use super::GivenMask;
use crate::error::{config_err, Result};
use crate::rng::Rng;

fn check_n(n: usize) -> Result<()> {
    if !(2..=63).contains(&n) {
        return config_err(format!("mask length must lie in 2..=63, got {n}"));
    }
    Ok(())
}

fn from_bits(bits: u64, n: usize) -> GivenMask {
    GivenMask::new((0..n).map(|i| bits >> i & 1 == 1).collect()).expect("bits in 1..2^n-1")
}

/// Uniform over the `2^n - 2` masks with at least one given and one target.
pub fn sample_given_mask(rng: &mut Rng, n: usize) -> Result<GivenMask> {
    check_n(n)?;
    let bits = rng.gen_range(1..(1u64 << n) - 1);
    Ok(from_bits(bits, n))
}

/// Uniform over the masks with exactly `n_given` given items.
pub fn sample_mask_with_count(rng: &mut Rng, n: usize, n_given: usize) -> Result<GivenMask> {
    check_n(n)?;
    if n_given == 0 || n_given >= n {
        return config_err(format!("cannot give {n_given} of {n} items"));
    }
    let mut given = vec![false; n];
    for i in sample(rng, n, n_given) {
        given[i] = true;
    }
    GivenMask::new(given)
}

pub fn enumerate_valid_masks(n: usize) -> Result<Vec<GivenMask>> {
    check_n(n)?;
    if n > 20 {
        return config_err("refusing to enumerate more than 2^20 masks");
    }
    Ok((1..(1u64 << n) - 1).map(|b| from_bits(b, n)).collect())
}
