//! `PLUG1` parameter checkpoints.
//!
//! Layout: magic `PLUG1`, `u32` LE `D` and `C`, then an `f32` LE payload in the
//! order `w_sub, b_sub, w_mul, b_mul, w_cat, b_cat, w, b`, bank vectors
//! (`C × D`) and bank counts (`C`, stored as `f32`). Matrices are row-major
//! `out × in`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sempred::{AggregatorParams, MetaFeatureBank, MetaUpdate, PlugModel, PredictorParams};

pub const MAGIC: &[u8; 5] = b"PLUG1";
const HEADER: usize = 5 + 8;

fn param_count(d: usize, c: usize) -> usize {
    2 * (d * d + d) + (3 * d * d + d) + (c * d + c)
}

pub fn to_bytes<T: Scalar>(model: &PlugModel<T>) -> Vec<u8> {
    let (d, c) = (model.dim(), model.categories());
    let mut out = Vec::with_capacity(HEADER + 4 * (param_count(d, c) + c * d + c));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.extend_from_slice(&(c as u32).to_le_bytes());
    let mut put = |v: f32| out.extend_from_slice(&v.to_le_bytes());
    for v in model.params_flat() {
        put(v.to_f32().unwrap_or(f32::NAN));
    }
    for row in model.bank.vectors() {
        for v in row {
            put(v.to_f32().unwrap_or(f32::NAN));
        }
    }
    for &n in model.bank.counts() {
        put(n as f32);
    }
    out
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<PlugModel<T>> {
    if bytes.len() < 5 || &bytes[..5] != MAGIC {
        return Err(Error::format(0, "missing PLUG1 magic"));
    }
    if bytes.len() < HEADER {
        return Err(Error::format(bytes.len(), "truncated header"));
    }
    let d = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let c = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    if d == 0 || c == 0 {
        return Err(Error::format(
            5,
            format!("invalid dimensions D = {d}, C = {c}"),
        ));
    }
    let n = param_count(d, c) + c * d + c;
    let payload = &bytes[HEADER..];
    if payload.len() != 4 * n {
        return Err(Error::format(
            HEADER,
            format!(
                "payload holds {} bytes, expected {} for D = {d}, C = {c}",
                payload.len(),
                4 * n
            ),
        ));
    }
    let vals: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    if let Some(k) = vals.iter().position(|v| !v.is_finite()) {
        return Err(Error::format(HEADER + 4 * k, "non-finite value"));
    }
    let p = param_count(d, c);
    let mut model = PlugModel {
        aggregator: AggregatorParams::zeros(d),
        predictor: PredictorParams::zeros(d, c),
        bank: MetaFeatureBank::new(c, d, MetaUpdate::RunningMean)?,
    };
    let params: Vec<T> = vals[..p].iter().map(|&v| T::lit(v as f64)).collect();
    model.set_params_flat(&params)?;
    let vectors: Vec<Vec<T>> = vals[p..p + c * d]
        .chunks(d)
        .map(|r| r.iter().map(|&v| T::lit(v as f64)).collect())
        .collect();
    let counts: Vec<u64> = vals[p + c * d..]
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            if v < 0.0 || v.fract() != 0.0 {
                Err(Error::format(
                    HEADER + 4 * (p + c * d + k),
                    format!("invalid bank count {v}"),
                ))
            } else {
                Ok(v as u64)
            }
        })
        .collect::<Result<_>>()?;
    model.bank = MetaFeatureBank::from_parts(vectors, counts, MetaUpdate::RunningMean)?;
    Ok(model)
}

pub fn save_checkpoint<T: Scalar>(model: &PlugModel<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<PlugModel<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn roundtrip_through_f32() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = PlugModel::<f32>::init(3, 2, MetaUpdate::RunningMean, &mut rng).unwrap();
        m.bank = MetaFeatureBank::from_parts(
            vec![vec![0.5, -1.0, 2.0], vec![0.0; 3]],
            vec![4, 0],
            MetaUpdate::RunningMean,
        )
        .unwrap();
        let bytes = to_bytes(&m);
        assert_eq!(&bytes[..5], b"PLUG1");
        assert_eq!(bytes.len(), 13 + 4 * (2 * 12 + 30 + 8 + 6 + 2));
        let back: PlugModel<f32> = from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn rejects_bad_files() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = PlugModel::<f64>::init(2, 1, MetaUpdate::RunningMean, &mut rng).unwrap();
        let bytes = to_bytes(&m);
        assert!(from_bytes::<f64>(&bytes[..bytes.len() - 4]).is_err());
        assert!(from_bytes::<f64>(b"PLUG2").is_err());
        let mut bad = bytes.clone();
        let last = bad.len() - 4;
        bad[last..].copy_from_slice(&0.5f32.to_le_bytes());
        assert!(from_bytes::<f64>(&bad).is_err());
    }
}
