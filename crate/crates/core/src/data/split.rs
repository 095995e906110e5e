use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::schema::Stratify;
use crate::error::{Error, Result};

/// Seeded stratified split of row indices into `(train, test)`.
///
/// Every stratum is shuffled independently and contributes
/// `round(fraction · size)` rows to the train side, so per-class proportions
/// are preserved to within one row. Both outputs are sorted.
pub fn stratified_split(
    y: &[usize],
    s: &[usize],
    fraction: f64,
    seed: u64,
    stratify: Stratify,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("split fraction must lie in (0, 1), got {fraction}")));
    }
    if y.len() != s.len() {
        return Err(Error::shape("split labels", &[y.len()], &[s.len()]));
    }
    let mut strata: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for i in 0..y.len() {
        let key = match stratify {
            Stratify::Target => (y[i], 0),
            Stratify::Sensitive => (0, s[i]),
            Stratify::Both => (y[i], s[i]),
        };
        strata.entry(key).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (key, mut rows) in strata {
        if rows.len() < 2 {
            return Err(Error::Data(format!(
                "stratum (y={}, s={}) has {} sample; at least 2 are needed to split",
                key.0,
                key.1,
                rows.len()
            )));
        }
        rows.shuffle(&mut rng);
        let cut = ((rows.len() as f64) * fraction).round() as usize;
        let cut = cut.clamp(1, rows.len() - 1);
        train.extend_from_slice(&rows[..cut]);
        test.extend_from_slice(&rows[cut..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}
