use crate::error::{Error, Result};

use super::Waveform;

/// `a[..join_a]`, then a linear crossfade of `fade_len` samples from
/// `a[join_a..]` into `b[join_b..]`, then `b[join_b + fade_len..]`.
pub fn crossfade_splice(
    a: &Waveform,
    b: &Waveform,
    join_a: usize,
    join_b: usize,
    fade_len: usize,
) -> Result<Waveform> {
    if a.sample_rate != b.sample_rate {
        return Err(Error::RateMismatch {
            expected: a.sample_rate,
            actual: b.sample_rate,
        });
    }
    if join_a + fade_len > a.len() || join_b + fade_len > b.len() {
        return Err(Error::FadeOutOfRange(format!(
            "join_a {join_a} / join_b {join_b} with fade {fade_len} over lengths {} / {}",
            a.len(),
            b.len()
        )));
    }
    let mut out = Vec::with_capacity(join_a + b.len() - join_b);
    out.extend_from_slice(&a.samples[..join_a]);
    for i in 0..fade_len {
        let w = i as f32 / fade_len as f32;
        let (x, y) = (a.samples[join_a + i], b.samples[join_b + i]);
        // x + w (y - x) is exact when x == y; the clamp keeps it convex under rounding
        out.push((x + w * (y - x)).clamp(x.min(y), x.max(y)));
    }
    out.extend_from_slice(&b.samples[join_b + fade_len..]);
    Ok(Waveform::new(out, a.sample_rate))
}
