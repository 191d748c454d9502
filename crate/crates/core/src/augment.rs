//! Image augmentations over observation stacks: random shift via replicate
//! pad + crop (continuous-control default) and multiplicative intensity
//! jitter (discrete default).
//!
//! All functions operate on normalized float stacks shaped [K, H, W] (or
//! batches [B, K, H, W]) and never change tensor shape. One stack receives
//! one draw: every frame in a stack is shifted by the same offset, so the
//! augmentation behaves like a camera translation rather than per-frame
//! jitter.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("pad {pad} must be smaller than half the frame size {size}")]
    PadTooLarge { pad: usize, size: usize },
    #[error("observation shape {0:?} is not [K, H, W] with square frames")]
    BadShape(Vec<usize>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugmentKind {
    Identity,
    RandomShift,
    Intensity,
}

/// Augmentation configuration; the rng lives in [`Augmenter`].
#[derive(Clone, Debug)]
pub struct AugmentSpec {
    pub kind: AugmentKind,
    pub pad: usize,
    pub intensity_scale: f32,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            kind: AugmentKind::RandomShift,
            pad: 4,
            intensity_scale: 0.05,
        }
    }
}

impl AugmentSpec {
    pub fn identity() -> Self {
        AugmentSpec {
            kind: AugmentKind::Identity,
            pad: 0,
            intensity_scale: 0.0,
        }
    }
}

/// An augmentation spec bound to a seeded rng stream. Identity draws nothing
/// from the rng.
pub struct Augmenter {
    pub spec: AugmentSpec,
    pub rng: ChaCha8Rng,
}

impl Augmenter {
    pub fn new(spec: AugmentSpec, rng: ChaCha8Rng) -> Self {
        Augmenter { spec, rng }
    }

    /// Augment a batch [B, K, H, W]; each element gets independent draws.
    pub fn apply_batch(&mut self, batch: &Tensor<f32>) -> Result<Tensor<f32>, AugmentError> {
        let (b, k, h, w) = match batch.shape() {
            [b, k, h, w] => (*b, *k, *h, *w),
            s => return Err(AugmentError::BadShape(s.to_vec())),
        };
        if self.spec.kind == AugmentKind::Identity {
            return Ok(batch.detach());
        }
        let stack = k * h * w;
        let mut out = vec![0f32; batch.numel()];
        for bi in 0..b {
            let src = &batch.data()[bi * stack..(bi + 1) * stack];
            let dst = &mut out[bi * stack..(bi + 1) * stack];
            self.apply_stack_into(src, dst, k, h, w)?;
        }
        Ok(Tensor::new(out, batch.shape()))
    }

    /// Augment a single stack [K, H, W].
    pub fn apply_stack(&mut self, obs: &Tensor<f32>) -> Result<Tensor<f32>, AugmentError> {
        let (k, h, w) = match obs.shape() {
            [k, h, w] => (*k, *h, *w),
            s => return Err(AugmentError::BadShape(s.to_vec())),
        };
        if self.spec.kind == AugmentKind::Identity {
            return Ok(obs.detach());
        }
        let mut out = vec![0f32; obs.numel()];
        self.apply_stack_into(obs.data(), &mut out, k, h, w)?;
        Ok(Tensor::new(out, obs.shape()))
    }

    fn apply_stack_into(
        &mut self,
        src: &[f32],
        dst: &mut [f32],
        k: usize,
        h: usize,
        w: usize,
    ) -> Result<(), AugmentError> {
        match self.spec.kind {
            AugmentKind::Identity => dst.copy_from_slice(src),
            AugmentKind::RandomShift => {
                let pad = self.spec.pad;
                if pad * 2 >= h || pad * 2 >= w {
                    return Err(AugmentError::PadTooLarge { pad, size: h.min(w) });
                }
                let dy = self.rng.gen_range(0..=2 * pad);
                let dx = self.rng.gen_range(0..=2 * pad);
                shift_stack(src, dst, k, h, w, pad, dy, dx);
            }
            AugmentKind::Intensity => {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                let factor = 1.0 + self.spec.intensity_scale * z as f32;
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = (s * factor).clamp(0.0, 1.0);
                }
            }
        }
        Ok(())
    }
}

/// Replicate-pad by `pad`, then crop an HxW window at offset (dy, dx) from
/// the padded image; (pad, pad) recovers the original.
pub fn shift_stack(
    src: &[f32],
    dst: &mut [f32],
    k: usize,
    h: usize,
    w: usize,
    pad: usize,
    dy: usize,
    dx: usize,
) {
    debug_assert!(dy <= 2 * pad && dx <= 2 * pad);
    let p = pad as isize;
    for c in 0..k {
        let frame = &src[c * h * w..(c + 1) * h * w];
        let out = &mut dst[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            let sy = (y as isize + dy as isize - p).clamp(0, h as isize - 1) as usize;
            let row = &frame[sy * w..(sy + 1) * w];
            let orow = &mut out[y * w..(y + 1) * w];
            for x in 0..w {
                let sx = (x as isize + dx as isize - p).clamp(0, w as isize - 1) as usize;
                orow[x] = row[sx];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive, Stream};

    fn ramp_stack(k: usize, h: usize, w: usize) -> Tensor<f32> {
        let data: Vec<f32> = (0..k * h * w).map(|i| i as f32 / (k * h * w) as f32).collect();
        Tensor::new(data, &[k, h, w])
    }

    #[test]
    fn zero_pad_shift_is_identity() {
        let obs = ramp_stack(2, 8, 8);
        let mut out = vec![0.0; obs.numel()];
        shift_stack(obs.data(), &mut out, 2, 8, 8, 0, 0, 0);
        assert_eq!(out, obs.data());
    }

    #[test]
    fn centered_crop_recovers_original() {
        let obs = ramp_stack(3, 8, 8);
        let mut out = vec![0.0; obs.numel()];
        shift_stack(obs.data(), &mut out, 3, 8, 8, 2, 2, 2);
        assert_eq!(out, obs.data());
    }

    #[test]
    fn corner_offset_matches_index_oracle() {
        // 6x6 single-channel ramp, pad 2, offset (0,0): every output pixel
        // must equal in[clamp(y-2), clamp(x-2)].
        let (h, w) = (6, 6);
        let data: Vec<f32> = (0..h * w).map(|i| i as f32).collect();
        let mut out = vec![0.0; h * w];
        shift_stack(&data, &mut out, 1, h, w, 2, 0, 0);
        for y in 0..h {
            for x in 0..w {
                let sy = (y as isize - 2).clamp(0, h as isize - 1) as usize;
                let sx = (x as isize - 2).clamp(0, w as isize - 1) as usize;
                assert_eq!(out[y * w + x], data[sy * w + sx], "pixel ({y},{x})");
            }
        }
    }

    #[test]
    fn intensity_closed_form() {
        // all-ones stack, scale 0.05, z = -2 -> every pixel 0.9
        let obs = Tensor::full(&[1, 4, 4], 1.0f32);
        let mut out = vec![0f32; 16];
        let factor = 1.0 + 0.05 * (-2.0);
        for (d, &s) in out.iter_mut().zip(obs.data()) {
            *d = (s * factor).clamp(0.0, 1.0);
        }
        for &v in &out {
            assert!((v - 0.9).abs() < 1e-7);
        }
    }

    #[test]
    fn identity_spec_is_bitwise_and_draws_nothing() {
        let obs = ramp_stack(2, 6, 6);
        let batch = Tensor::new(
            obs.data().iter().chain(obs.data()).copied().collect(),
            &[2, 2, 6, 6],
        );
        let rng = derive(5, Stream::Augment);
        let before = rng.clone();
        let mut aug = Augmenter::new(AugmentSpec::identity(), rng);
        let out = aug.apply_batch(&batch).unwrap();
        assert_eq!(out.data(), batch.data());
        assert_eq!(aug.rng.get_word_pos(), before.get_word_pos());
    }

    #[test]
    fn same_seed_twice_is_bit_identical() {
        let batch = Tensor::new(
            (0..2 * 2 * 12 * 12).map(|i| (i % 97) as f32 / 97.0).collect(),
            &[2, 2, 12, 12],
        );
        let spec = AugmentSpec::default();
        let mut a = Augmenter::new(spec.clone(), derive(11, Stream::Augment));
        let mut b = Augmenter::new(spec, derive(11, Stream::Augment));
        let oa = a.apply_batch(&batch).unwrap();
        let ob = b.apply_batch(&batch).unwrap();
        assert_eq!(oa.data(), ob.data());
    }

    #[test]
    fn pad_too_large_errors() {
        let obs = ramp_stack(1, 8, 8);
        let mut aug = Augmenter::new(
            AugmentSpec {
                kind: AugmentKind::RandomShift,
                pad: 4,
                intensity_scale: 0.0,
            },
            derive(1, Stream::Augment),
        );
        assert!(matches!(
            aug.apply_stack(&obs),
            Err(AugmentError::PadTooLarge { .. })
        ));
    }

    #[test]
    fn shift_offsets_are_uniform_within_3_sigma() {
        let pad = 2;
        let side = 2 * pad + 1;
        let n = 10_000;
        let mut rng = derive(99, Stream::Augment);
        let mut counts = vec![0usize; side * side];
        for _ in 0..n {
            let dy = rng.gen_range(0..=2 * pad);
            let dx = rng.gen_range(0..=2 * pad);
            counts[dy * side + dx] += 1;
        }
        let p = 1.0 / (side * side) as f64;
        let sigma = (p * (1.0 - p) * n as f64).sqrt();
        for (i, &c) in counts.iter().enumerate() {
            let dev = (c as f64 - p * n as f64).abs();
            assert!(dev <= 3.0 * sigma, "offset {i}: count {c} deviates {dev:.1}");
        }
    }

    #[test]
    fn stack_frames_share_one_offset() {
        // With a per-frame-distinct input, a shared shift keeps the
        // frame-to-frame differences constant.
        let (k, h, w) = (3, 10, 10);
        let mut data = vec![0f32; k * h * w];
        for c in 0..k {
            for i in 0..h * w {
                data[c * h * w + i] = i as f32 + 1000.0 * c as f32;
            }
        }
        let batch = Tensor::new(data, &[1, k, h, w]);
        let mut aug = Augmenter::new(AugmentSpec::default(), derive(3, Stream::Augment));
        let out = aug.apply_batch(&batch).unwrap();
        let o = out.data();
        for c in 1..k {
            for i in 0..h * w {
                let d = o[c * h * w + i] - o[i];
                assert!((d - 1000.0 * c as f32).abs() < 1e-3);
            }
        }
    }
}
