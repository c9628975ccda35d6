use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kg::HyperFact;

/// Split sizes by largest remainder: floor shares first, then the leftover
/// units go to the largest fractional parts (earlier split on ties).
pub fn largest_remainder(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut sizes = [0usize; 3];
    for (s, e) in sizes.iter_mut().zip(&exact) {
        *s = e.floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let mut left = n - sizes.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if ratios[i] > 0.0 {
            sizes[i] += 1;
            left -= 1;
        }
    }
    sizes
}

/// Seeded shuffle followed by a contiguous train/valid/test split.
pub fn split_dataset(
    facts: Vec<HyperFact>,
    ratios: [f64; 3],
    seed: u64,
) -> Result<(Vec<HyperFact>, Vec<HyperFact>, Vec<HyperFact>)> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {ratios:?} must be in [0,1] and sum to 1")));
    }
    let nonzero = ratios.iter().filter(|&&r| r > 0.0).count();
    if facts.len() < nonzero {
        return Err(Error::Data(format!("{} facts cannot fill {nonzero} splits", facts.len())));
    }
    let sizes = largest_remainder(facts.len(), ratios);
    let mut facts = facts;
    facts.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = facts.split_off(sizes[0] + sizes[1]);
    let valid = facts.split_off(sizes[0]);
    Ok((facts, valid, test))
}
