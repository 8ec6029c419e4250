//! Toeplitz two-universal hashing over GF(2).
//!
//! Indexing convention for an `m × n` matrix built from a seed `s` of length
//! `n + m − 1`: `T[i][j] = s[i − j]` when `i ≥ j`, otherwise
//! `s[m − 1 + (j − i)]`. The first column is `s[0..m)` and the first row is
//! `s[0]` followed by `s[m..m + n − 1)`.
//!
//! `T·x` is a slice of the linear convolution of `x` with the diagonal
//! sequence of `T`. The fast path splits `x` into chunks, convolves each
//! against the window of diagonals it touches with an FFT, rounds and reduces
//! mod 2.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// Below this many matrix entries the direct product is used.
pub const DIRECT_LIMIT: usize = 1 << 22;

fn check(key_len: usize, m: usize, seed: &[u8]) -> Result<()> {
    if m > key_len {
        return Err(Error::InvalidArgument(format!("output length {m} exceeds input length {key_len}")));
    }
    let expected = (key_len + m).saturating_sub(1);
    if seed.len() != expected {
        return Err(Error::SeedLength {
            expected,
            got: seed.len(),
        });
    }
    Ok(())
}

/// Seed entry on diagonal `d = i − j`.
#[inline]
fn diag(seed: &[u8], m: usize, d: isize) -> u8 {
    if d >= 0 {
        seed[d as usize]
    } else {
        seed[m - 1 + (-d) as usize]
    }
}

/// Row-by-row product with 64-bit packing; reference implementation.
pub fn toeplitz_direct(key: &[u8], m: usize, seed: &[u8]) -> Result<Vec<u8>> {
    let n = key.len();
    check(n, m, seed)?;
    let words = n.div_ceil(64);
    let mut packed_key = vec![0u64; words];
    for (j, &b) in key.iter().enumerate() {
        packed_key[j / 64] |= u64::from(b & 1) << (j % 64);
    }
    let mut row = vec![0u64; words];
    let mut out = Vec::with_capacity(m);
    for i in 0..m {
        row.iter_mut().for_each(|w| *w = 0);
        for j in 0..n {
            row[j / 64] |= u64::from(diag(seed, m, i as isize - j as isize) & 1) << (j % 64);
        }
        let parity = row.iter().zip(&packed_key).fold(0u32, |acc, (r, k)| acc ^ (r & k).count_ones());
        out.push((parity & 1) as u8);
    }
    Ok(out)
}

/// `m` output bits of the Toeplitz hash of `key`.
pub fn privacy_amplify(key: &[u8], m: usize, seed: &[u8]) -> Result<Vec<u8>> {
    let n = key.len();
    check(n, m, seed)?;
    if m == 0 {
        return Ok(Vec::new());
    }
    if n.saturating_mul(m) <= DIRECT_LIMIT {
        return toeplitz_direct(key, m, seed);
    }
    Ok(toeplitz_fft(key, m, seed, m.max(1024)))
}

/// Block-convolution product with chunks of `chunk` input bits.
pub fn toeplitz_fft(key: &[u8], m: usize, seed: &[u8], chunk: usize) -> Vec<u8> {
    let n = key.len();
    let b = chunk.max(1).min(n);
    let size = (m + 2 * b).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    let mut acc = vec![0u8; m];
    let mut gbuf = vec![Complex::new(0.0, 0.0); size];
    let mut xbuf = vec![Complex::new(0.0, 0.0); size];

    let mut j0 = 0;
    while j0 < n {
        let len = b.min(n - j0);
        if key[j0..j0 + len].iter().all(|&x| x & 1 == 0) {
            j0 += len;
            continue;
        }
        // Diagonals i − j for i in [0, m), j in [j0, j0 + len) start at
        // −(j0 + len − 1).
        let d_lo = -((j0 + len - 1) as isize);
        let wlen = m + len - 1;
        gbuf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        xbuf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for (k, g) in gbuf.iter_mut().take(wlen).enumerate() {
            g.re = f64::from(diag(seed, m, d_lo + k as isize) & 1);
        }
        // With the window starting at the lowest diagonal, output row i
        // lands at convolution index i + len − 1.
        for t in 0..len {
            xbuf[t].re = f64::from(key[j0 + t] & 1);
        }
        fwd.process(&mut gbuf);
        fwd.process(&mut xbuf);
        for (g, x) in gbuf.iter_mut().zip(&xbuf) {
            *g *= *x;
        }
        inv.process(&mut gbuf);
        let scale = 1.0 / size as f64;
        for (i, a) in acc.iter_mut().enumerate() {
            let v = (gbuf[i + len - 1].re * scale).round() as i64;
            *a ^= (v & 1) as u8;
        }
        j0 += len;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn bits<R: Rng>(r: &mut R, n: usize) -> Vec<u8> {
        (0..n).map(|_| r.random::<bool>() as u8).collect()
    }

    #[test]
    fn hand_evaluated_2x3() {
        // m = 2, n = 3, seed [s0 s1 s2 s3]:
        // T = [[s0, s2, s3],
        //      [s1, s0, s2]]
        let seed = [1, 0, 1, 1];
        let key = [1, 1, 0];
        assert_eq!(toeplitz_direct(&key, 2, &seed).unwrap(), vec![0, 1]);
        assert_eq!(toeplitz_fft(&key, 2, &seed, 2), vec![0, 1]);
    }

    #[test]
    fn zero_key_hashes_to_zero() {
        let mut r = rng::stream(1, "t", 0);
        let seed = bits(&mut r, 100 + 40 - 1);
        assert!(privacy_amplify(&[0; 100], 40, &seed).unwrap().iter().all(|&b| b == 0));
    }

    #[test]
    fn seed_length_checked() {
        assert!(matches!(
            privacy_amplify(&[1; 10], 4, &[0; 12]),
            Err(Error::SeedLength { expected: 13, got: 12 })
        ));
        assert!(privacy_amplify(&[1; 4], 5, &[0; 8]).is_err());
    }

    #[test]
    fn fft_matches_direct() {
        let mut r = rng::stream(2, "t", 0);
        for (n, m, chunk) in [(1000, 300, 300), (777, 777, 100), (2048, 5, 64), (500, 123, 1)] {
            let key = bits(&mut r, n);
            let seed = bits(&mut r, n + m - 1);
            assert_eq!(toeplitz_fft(&key, m, &seed, chunk), toeplitz_direct(&key, m, &seed).unwrap());
        }
    }

    #[test]
    fn large_input_uses_fft_path() {
        let mut r = rng::stream(3, "t", 0);
        let (n, m) = (40_000, 12_000);
        let key = bits(&mut r, n);
        let seed = bits(&mut r, n + m - 1);
        let fast = privacy_amplify(&key, m, &seed).unwrap();
        assert_eq!(fast.len(), m);
        // The top 64 rows are a 64 × n Toeplitz matrix with the same first
        // row and a truncated first column.
        let mut sub = seed[..64].to_vec();
        sub.extend_from_slice(&seed[m..]);
        assert_eq!(&fast[..64], &toeplitz_direct(&key, 64, &sub).unwrap()[..]);
    }
}
