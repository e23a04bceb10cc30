//! Segment-based frame sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DataError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    Train,
    Eval,
}

/// Splits `frame_count` frames into `t` contiguous segments (the remainder
/// goes one frame each to the leading segments) and draws one index per
/// segment: the middle (`start + ⌊len/2⌋`) in eval mode, a seeded uniform
/// pick in train mode.
pub fn segment_sample(
    frame_count: usize,
    t: usize,
    mode: SampleMode,
    seed: u64,
) -> Result<Vec<usize>, DataError> {
    if t == 0 || frame_count < t {
        return Err(DataError::Sampling { frame_count, t });
    }
    let base = frame_count / t;
    let rem = frame_count % t;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(t);
    let mut start = 0;
    for i in 0..t {
        let len = base + usize::from(i < rem);
        let idx = match mode {
            SampleMode::Eval => start + len / 2,
            SampleMode::Train => start + rng.random_range(0..len),
        };
        out.push(idx);
        start += len;
    }
    Ok(out)
}

/// Segment boundaries `[start, end)` used by [`segment_sample`].
pub fn segments(frame_count: usize, t: usize) -> Vec<(usize, usize)> {
    let base = frame_count / t;
    let rem = frame_count % t;
    let mut start = 0;
    (0..t)
        .map(|i| {
            let len = base + usize::from(i < rem);
            let s = start;
            start += len;
            (s, start)
        })
        .collect()
}
