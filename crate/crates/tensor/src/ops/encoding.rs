use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Imaging modality, carried into the network as the sign of the positional encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Mri,
    Ultrasound,
}

impl Modality {
    pub fn sign(self) -> f64 {
        match self {
            Modality::Mri => 1.0,
            Modality::Ultrasound => -1.0,
        }
    }
}

/// Sinusoidal encoding of the flattened (row-major) voxel index, scaled by the
/// modality sign. Returned channel-major: `[channels, d0, d1, d2]`.
///
/// Channel `2k` holds `sin(i / 10000^(2k/C))`, channel `2k+1` the matching cosine.
pub fn positional_encoding<T: Element>(spatial: [usize; 3], channels: usize, modality: Modality) -> Result<Tensor<T>> {
    if channels % 2 != 0 || channels == 0 {
        return Err(TensorError::OddChannels(channels));
    }
    let len: usize = spatial.iter().product();
    let sign = modality.sign();
    let mut data = vec![T::zero(); channels * len];
    for pair in 0..channels / 2 {
        let freq = 1.0 / 10000f64.powf((2 * pair) as f64 / channels as f64);
        let (sin_row, rest) = data[2 * pair * len..(2 * pair + 2) * len].split_at_mut(len);
        for (i, (s, c)) in sin_row.iter_mut().zip(rest.iter_mut()).enumerate() {
            let angle = i as f64 * freq;
            *s = T::of(sign * angle.sin());
            *c = T::of(sign * angle.cos());
        }
    }
    Tensor::new(vec![channels, spatial[0], spatial[1], spatial[2]], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_position_alternates_zero_one() {
        let pe = positional_encoding::<f64>([2, 2, 2], 6, Modality::Mri).unwrap();
        let at0: Vec<f64> = (0..6).map(|c| pe.data()[c * 8]).collect();
        assert_eq!(at0, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn ultrasound_negates_mri() {
        let mri = positional_encoding::<f64>([3, 2, 2], 8, Modality::Mri).unwrap();
        let us = positional_encoding::<f64>([3, 2, 2], 8, Modality::Ultrasound).unwrap();
        assert!(mri.data().iter().zip(us.data()).all(|(a, b)| *a == -*b));
    }

    #[test]
    fn matches_direct_formula() {
        let channels = 64;
        let pe = positional_encoding::<f64>([2, 2, 2], channels, Modality::Mri).unwrap();
        for c in 0..channels {
            let k = (c / 2) as f64;
            let arg = 1.0 / 10000f64.powf(2.0 * k / channels as f64);
            let want = if c % 2 == 0 { arg.sin() } else { arg.cos() };
            assert!((pe.data()[c * 8 + 1] - want).abs() < 1e-9);
        }
    }

    #[test]
    fn odd_channels_rejected() {
        assert_eq!(
            positional_encoding::<f32>([1, 1, 1], 5, Modality::Mri).unwrap_err(),
            TensorError::OddChannels(5)
        );
    }
}
