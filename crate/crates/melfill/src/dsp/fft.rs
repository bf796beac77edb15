//! Radix-2 FFT, just enough for power spectra of windowed frames.
//!
//! Frame analysis always zero-pads to a power of two, so a plain iterative
//! Cooley-Tukey transform covers every case and keeps the arithmetic
//! deterministic. Unit tests compare against the textbook O(n²) DFT.

use crate::error::{Error, Result};

/// In-place complex FFT. `re` and `im` must have the same power-of-two length.
pub fn fft_in_place(re: &mut [f64], im: &mut [f64]) -> Result<()> {
    let n = re.len();
    if n != im.len() {
        return Err(Error::Shape(format!(
            "fft buffers disagree: {} vs {}",
            n,
            im.len()
        )));
    }
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::Shape(format!(
            "fft length {n} is not a power of two"
        )));
    }

    // Bit-reversal permutation.
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            re.swap(i, j);
            im.swap(i, j);
        }
    }

    let mut len = 2;
    while len <= n {
        let ang = -std::f64::consts::TAU / len as f64;
        let (w_re, w_im) = (ang.cos(), ang.sin());
        for start in (0..n).step_by(len) {
            let mut cur_re = 1.0;
            let mut cur_im = 0.0;
            for k in 0..len / 2 {
                let a = start + k;
                let b = a + len / 2;
                let t_re = re[b] * cur_re - im[b] * cur_im;
                let t_im = re[b] * cur_im + im[b] * cur_re;
                re[b] = re[a] - t_re;
                im[b] = im[a] - t_im;
                re[a] += t_re;
                im[a] += t_im;
                let next_re = cur_re * w_re - cur_im * w_im;
                cur_im = cur_re * w_im + cur_im * w_re;
                cur_re = next_re;
            }
        }
        len <<= 1;
    }
    Ok(())
}

/// Power spectrum |X_k|² of a real frame, zero-padded to `n_fft`.
/// Returns `n_fft / 2 + 1` bins.
pub fn power_spectrum(frame: &[f64], n_fft: usize) -> Result<Vec<f64>> {
    if frame.len() > n_fft {
        return Err(Error::Shape(format!(
            "frame of {} samples exceeds n_fft {}",
            frame.len(),
            n_fft
        )));
    }
    let mut re = vec![0.0; n_fft];
    let mut im = vec![0.0; n_fft];
    re[..frame.len()].copy_from_slice(frame);
    fft_in_place(&mut re, &mut im)?;
    Ok((0..n_fft / 2 + 1)
        .map(|k| re[k] * re[k] + im[k] * im[k])
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Textbook DFT, quadratic but obviously correct.
    fn dft_naive(x: &[f64]) -> Vec<(f64, f64)> {
        let n = x.len();
        (0..n)
            .map(|k| {
                let mut re = 0.0;
                let mut im = 0.0;
                for (t, &v) in x.iter().enumerate() {
                    let ang = -std::f64::consts::TAU * (k * t) as f64 / n as f64;
                    re += v * ang.cos();
                    im += v * ang.sin();
                }
                (re, im)
            })
            .collect()
    }

    #[test]
    fn matches_naive_dft_on_random_input() {
        let mut rng = crate::rng::SplitMix64::new(9);
        for n in [8usize, 64, 256] {
            let x: Vec<f64> = (0..n).map(|_| rng.next_f64() * 2.0 - 1.0).collect();
            let expect = dft_naive(&x);
            let mut re = x.clone();
            let mut im = vec![0.0; n];
            fft_in_place(&mut re, &mut im).unwrap();
            for k in 0..n {
                assert!(
                    (re[k] - expect[k].0).abs() < 1e-9 && (im[k] - expect[k].1).abs() < 1e-9,
                    "bin {k}: ({}, {}) vs ({}, {})",
                    re[k],
                    im[k],
                    expect[k].0,
                    expect[k].1
                );
            }
        }
    }

    #[test]
    fn impulse_has_flat_spectrum() {
        let mut re = vec![0.0; 16];
        re[0] = 1.0;
        let mut im = vec![0.0; 16];
        fft_in_place(&mut re, &mut im).unwrap();
        for k in 0..16 {
            assert!((re[k] - 1.0).abs() < 1e-12);
            assert!(im[k].abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_non_power_of_two() {
        let mut re = vec![0.0; 12];
        let mut im = vec![0.0; 12];
        assert!(fft_in_place(&mut re, &mut im).is_err());
    }

    #[test]
    fn power_spectrum_of_zero_padding() {
        let p = power_spectrum(&[1.0, -1.0], 8).unwrap();
        assert_eq!(p.len(), 5);
        let expect = dft_naive(&[1.0, -1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        for k in 0..5 {
            let want = expect[k].0 * expect[k].0 + expect[k].1 * expect[k].1;
            assert!((p[k] - want).abs() < 1e-12);
        }
    }
}
