//! Deterministic sampling: low-discrepancy sequences and counter-based
//! random streams. Results never depend on how work is split across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const PRIMES: [u32; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

/// Radical inverse of `i` in base `b`.
fn radical_inverse(mut i: u64, b: u64) -> f64 {
    let inv = 1.0 / b as f64;
    let mut f = inv;
    let mut r = 0.0;
    while i > 0 {
        r += f * (i % b) as f64;
        i /= b;
        f *= inv;
    }
    r
}

/// The `i`-th Halton point in `[0,1)^dim` (index 0 is skipped to avoid the origin).
pub fn halton(i: u64, dim: usize) -> Vec<f64> {
    assert!(dim <= PRIMES.len(), "halton supports up to {} dimensions", PRIMES.len());
    (0..dim).map(|d| radical_inverse(i + 1, PRIMES[d] as u64)).collect()
}

/// Deterministic unit directions in `R^q`: the `2q` signed axes first, then
/// normalized Halton points of `[-1,1]^q`.
pub fn sphere_directions(count: usize, q: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(count);
    'axes: for j in 0..q {
        for sign in [1.0, -1.0] {
            if out.len() == count {
                break 'axes;
            }
            let mut e = vec![0.0; q];
            e[j] = sign;
            out.push(e);
        }
    }
    if q == 1 {
        return out;
    }
    if q == 2 {
        // equally spaced angles, offset so they do not repeat the axes
        let extra = count.saturating_sub(out.len());
        for k in 0..extra {
            let a = std::f64::consts::TAU * (k as f64 + 0.5) / extra as f64;
            out.push(vec![a.cos(), a.sin()]);
        }
        return out;
    }
    let mut i = 0u64;
    while out.len() < count {
        let p: Vec<f64> = halton(i, q).into_iter().map(|u| 2.0 * u - 1.0).collect();
        i += 1;
        let r = crate::linalg::norm(&p);
        if r > 0.1 && r <= 1.0 {
            out.push(p.into_iter().map(|v| v / r).collect());
        }
    }
    out
}

/// Deterministic low-discrepancy points in the closed ball `B^n(radius)`.
pub fn ball_points(count: usize, n: usize, radius: f64) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(count);
    let mut i = 0u64;
    while out.len() < count {
        let p: Vec<f64> = halton(i, n).into_iter().map(|u| 2.0 * u - 1.0).collect();
        i += 1;
        if crate::linalg::norm(&p) <= 1.0 {
            out.push(p.into_iter().map(|v| v * radius).collect());
        }
    }
    out
}

/// Independent random stream number `stream` derived from `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Block size used to split Monte-Carlo sample ranges into independent streams.
pub const MC_BLOCK: usize = 4096;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn halton_is_in_unit_cube() {
        for i in 0..100 {
            assert!(halton(i, 3).iter().all(|v| (0.0..1.0).contains(v)));
        }
        assert_eq!(halton(0, 1), vec![0.5]);
    }

    #[test]
    fn directions_are_unit_and_start_with_axes() {
        let d = sphere_directions(20, 3);
        assert_eq!(d.len(), 20);
        assert_eq!(d[0], vec![1.0, 0.0, 0.0]);
        assert_eq!(d[1], vec![-1.0, 0.0, 0.0]);
        for v in &d {
            assert!((crate::linalg::norm(v) - 1.0).abs() < 1e-12);
        }
        assert_eq!(sphere_directions(5, 1).len(), 2);
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: f64 = stream_rng(7, 3).gen();
        let b: f64 = stream_rng(7, 3).gen();
        let c: f64 = stream_rng(7, 4).gen();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
