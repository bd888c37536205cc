//! Word-drop and bounded local shuffle noise for denoising auto-encoding.

use rand::Rng;

use crate::config::NoiseConfig;
use crate::vocab::TokenSequence;

/// Random permutation of `0..n` with `|σ(i) − i| ≤ k` for every `i`.
///
/// Position `i` is keyed by `i + U[0, k+1)` and positions are sorted by key;
/// an item can only overtake neighbours fewer than `k + 1` places away.
/// `perm[j]` is the original index placed at output position `j`.
pub fn local_permutation<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = (0..n).map(|i| (i as f64 + rng.random::<f64>() * (k as f64 + 1.0), i)).collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
    keyed.into_iter().map(|(_, i)| i).collect()
}

/// Drop interior tokens with probability `p_wd`, then shuffle the survivors
/// locally. The bos and eos frame is never touched.
pub fn add_noise<R: Rng + ?Sized>(x: &TokenSequence, cfg: &NoiseConfig, rng: &mut R) -> TokenSequence {
    let kept: Vec<usize> =
        x.interior().iter().copied().filter(|_| cfg.p_wd <= 0.0 || rng.random::<f64>() >= cfg.p_wd).collect();
    let perm = local_permutation(kept.len(), cfg.k, rng);
    let shuffled: Vec<usize> = perm.iter().map(|&i| kept[i]).collect();
    TokenSequence::from_interior(&shuffled, x.lang()).expect("noise keeps a valid frame")
}
