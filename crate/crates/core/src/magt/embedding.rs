//! Sinusoidal position table and the learned speaker lookup.

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::params::ParamId;
use crate::scalar::Scalar;
use crate::tensor::Mat;

/// `PE[pos, 2i] = sin(pos / 10000^(2i/d))`, `PE[pos, 2i+1] = cos(same)`.
pub fn positional_embedding<T: Scalar>(len: usize, d_model: usize) -> Result<Mat<T>> {
    if d_model == 0 || !d_model.is_multiple_of(2) {
        return Err(Error::Input(format!(
            "positional embedding needs an even model width, got {d_model}"
        )));
    }
    let mut out = Mat::zeros(len, d_model);
    for pos in 0..len {
        for i in 0..d_model / 2 {
            let arg = pos as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            out.set(pos, 2 * i, T::from_f64_lossy(arg.sin()));
            out.set(pos, 2 * i + 1, T::from_f64_lossy(arg.cos()));
        }
    }
    Ok(out)
}

/// Rows of `table` selected by speaker id.
pub fn speaker_embedding<T: Scalar>(speaker_ids: &[u32], table: &Mat<T>) -> Result<Mat<T>> {
    let idx = speaker_rows(speaker_ids, table.rows())?;
    Ok(table.select_rows(&idx))
}

pub(crate) fn speaker_rows(speaker_ids: &[u32], max_speakers: usize) -> Result<Vec<usize>> {
    speaker_ids
        .iter()
        .map(|&s| {
            let s = s as usize;
            if s < max_speakers {
                Ok(s)
            } else {
                Err(Error::Input(format!(
                    "speaker id {s} exceeds embedding table of {max_speakers} speakers"
                )))
            }
        })
        .collect()
}

/// Graph version of [`speaker_embedding`] so the table receives gradients.
pub fn speaker_embedding_node<T: Scalar>(
    g: &mut Graph<'_, T>,
    speaker_ids: &[u32],
    table: ParamId,
) -> Result<NodeId> {
    let t = g.param(table);
    let idx = speaker_rows(speaker_ids, g.shape(t).0)?;
    g.select_rows(t, &idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sinusoid_values() {
        let pe = positional_embedding::<f64>(3, 4).unwrap();
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0]);
        let want = [1f64.sin(), 1f64.cos(), 0.01f64.sin(), 0.01f64.cos()];
        for (a, b) in pe.row(1).iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((pe.get(1, 0) - 0.8415).abs() < 1e-4);
        assert!((pe.get(1, 3) - 0.99995).abs() < 1e-5);
        let big = positional_embedding::<f32>(50, 16).unwrap();
        assert!(big.as_slice().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(positional_embedding::<f64>(3, 5).is_err());
    }

    #[test]
    fn speaker_lookup() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let table = Mat::<f64>::gaussian(2, 4, 1.0, &mut rng);
        let se = speaker_embedding(&[0, 0, 1], &table).unwrap();
        assert_eq!(se.row(0), se.row(1));
        assert_ne!(se.row(0), se.row(2));
        let zero = speaker_embedding(&[1, 0], &Mat::<f64>::zeros(2, 4)).unwrap();
        assert!(zero.as_slice().iter().all(|&v| v == 0.0));
        assert!(matches!(
            speaker_embedding(&[2], &table),
            Err(Error::Input(_))
        ));
    }
}
