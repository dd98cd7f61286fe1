use alloc::vec::Vec;
use core::cmp::Ordering;

/// Total order used by every magnitude ranking: by score, then by index.
#[inline]
pub(crate) fn rank_cmp(scores: &[f64], a: usize, b: usize) -> Ordering {
    scores[a].total_cmp(&scores[b]).then(a.cmp(&b))
}

/// Marks the `k` lowest-scoring positions. `scratch` is reused between
/// calls to avoid reallocating in the training loop.
pub(crate) fn mark_lowest(scores: &[f64], k: usize, scratch: &mut Vec<usize>, out: &mut [bool]) {
    let n = scores.len();
    debug_assert_eq!(out.len(), n);
    out.iter_mut().for_each(|b| *b = false);
    if k == 0 {
        return;
    }
    if k >= n {
        out.iter_mut().for_each(|b| *b = true);
        return;
    }
    scratch.clear();
    scratch.extend(0..n);
    scratch.select_nth_unstable_by(k - 1, |&a, &b| rank_cmp(scores, a, b));
    for &i in &scratch[..k] {
        out[i] = true;
    }
}
