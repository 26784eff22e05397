//! Random-shift augmentation: replicate-pad and crop back to size.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Crops each sample at `offsets[i] = (dy, dx)` from the image padded by
/// `pad` replicated pixels on every side; `(pad, pad)` is the identity.
pub fn shift_with_offsets(batch: &Tensor, pad: usize, offsets: &[(usize, usize)]) -> Result<Tensor> {
    let s = batch.shape();
    if s.len() != 4 || s[0] != offsets.len() {
        return Err(Error::shape(
            "random_shift",
            format!("{s:?} with {} offsets", offsets.len()),
        ));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if h <= 2 * pad || w <= 2 * pad {
        return Err(Error::shape(
            "random_shift",
            format!("{h}x{w} image is too small for padding {pad}"),
        ));
    }
    if offsets.iter().any(|&(dy, dx)| dy > 2 * pad || dx > 2 * pad) {
        return Err(Error::Domain(format!("shift offsets must lie in 0..={}", 2 * pad)));
    }
    let src = batch.data();
    let mut out = vec![0.0; src.len()];
    let plane = h * w;
    for i in 0..n {
        let (dy, dx) = offsets[i];
        for ch in 0..c {
            let base = (i * c + ch) * plane;
            for y in 0..h {
                let sy = (y + dy).saturating_sub(pad).min(h - 1);
                for x in 0..w {
                    let sx = (x + dx).saturating_sub(pad).min(w - 1);
                    out[base + y * w + x] = src[base + sy * w + sx];
                }
            }
        }
    }
    Tensor::new(s.to_vec(), out)
}

/// One uniformly drawn offset per sample, shared by its channels.
pub fn random_shift<R: Rng>(batch: &Tensor, pad: usize, rng: &mut R) -> Result<Tensor> {
    let n = batch.shape().first().copied().unwrap_or(0);
    let offsets: Vec<(usize, usize)> = (0..n)
        .map(|_| (rng.gen_range(0..=2 * pad), rng.gen_range(0..=2 * pad)))
        .collect();
    shift_with_offsets(batch, pad, &offsets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::uniform_tensor;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn centre_offset_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = uniform_tensor(&mut rng, &[3, 2, 12, 12], 0.0, 1.0);
        assert_eq!(shift_with_offsets(&x, 4, &[(4, 4); 3]).unwrap(), x);
    }

    #[test]
    fn too_small_images_are_rejected() {
        let x = Tensor::zeros(&[1, 1, 8, 8]);
        assert!(shift_with_offsets(&x, 4, &[(0, 0)]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(random_shift(&x, 4, &mut rng).is_err());
    }

    #[test]
    fn channels_share_the_offset() {
        let mut x = Tensor::zeros(&[1, 3, 12, 12]);
        for ch in 0..3 {
            x.data_mut()[ch * 144 + 6 * 12 + 6] = 1.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let y = random_shift(&x, 4, &mut rng).unwrap();
        let at: Vec<usize> = (0..3)
            .map(|ch| y.data()[ch * 144..(ch + 1) * 144].iter().position(|&v| v == 1.0).unwrap())
            .collect();
        assert!(at.windows(2).all(|p| p[0] == p[1]));
    }

    proptest! {
        #[test]
        fn impulse_moves_by_the_offset(dy in 0usize..=8, dx in 0usize..=8, y0 in 4usize..12, x0 in 4usize..12) {
            // interior impulse: the replicated border is zero, so mass is conserved
            let mut x = Tensor::zeros(&[1, 1, 16, 16]);
            x.data_mut()[y0 * 16 + x0] = 1.0;
            let y = shift_with_offsets(&x, 4, &[(dy, dx)]).unwrap();
            prop_assert_eq!(y.shape(), x.shape());
            prop_assert_eq!(y.data().iter().sum::<f64>(), 1.0);
            let ny = y0 + 4 - dy;
            let nx = x0 + 4 - dx;
            prop_assert_eq!(y.data()[ny * 16 + nx], 1.0);
        }
    }
}
