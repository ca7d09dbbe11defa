use rand::Rng;

use crate::error::{DsdpError, Result};

/// Starts `(x, y)` of two disjoint length-`l_c` windows in a trajectory of
/// length `len`, uniform over all ordered valid placements.
pub fn sample_subtrajectory_pair(
    len: usize,
    l_c: usize,
    rng: &mut impl Rng,
) -> Result<(usize, usize)> {
    if l_c == 0 || len < 2 * l_c {
        return Err(DsdpError::Precondition(format!(
            "need length >= 2*L_c = {} for a disjoint pair, got {len}",
            2 * l_c
        )));
    }
    let last = len - l_c;
    loop {
        let x = rng.random_range(0..=last);
        let y = rng.random_range(0..=last);
        if x.abs_diff(y) >= l_c {
            return Ok((x, y));
        }
    }
}

/// Starts of back-to-back windows of length `l` covering as much of `len` as fits.
pub fn window_starts(len: usize, l: usize) -> Vec<usize> {
    if l == 0 {
        return Vec::new();
    }
    (0..len / l).map(|i| i * l).collect()
}
