//! Flat binary checkpoint: named parameter tensors with f32 payloads.
//!
//! Layout (all little-endian):
//! magic `OVCK`, version u32, count u32, then per parameter:
//! name (u32 length + UTF-8 bytes), rank u32, dims (u32 each), payload
//! (f32 each). Parameters are written in registration order; loading
//! matches by name, so order differences are tolerated but any missing,
//! unexpected, or reshaped parameter is an error.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::params::ParamSet;
use super::tensor::Tensor;
use super::NumericsError;

const MAGIC: &[u8; 4] = b"OVCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(params: &ParamSet, path: &Path) -> Result<(), NumericsError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (_, p) in params.iter() {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(p.value.rank() as u32).to_le_bytes())?;
        for &d in p.value.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in p.value.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32, NumericsError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

/// Loads a checkpoint into an already-built parameter set. The set defines
/// the expected names and shapes.
pub fn load_checkpoint(params: &mut ParamSet, path: &Path) -> Result<(), NumericsError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NumericsError::CheckpointFormat("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(NumericsError::CheckpointFormat(format!(
            "version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let count = read_u32(&mut r)? as usize;

    let mut seen: HashSet<String> = HashSet::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        if name_len > 4096 {
            return Err(NumericsError::CheckpointFormat(format!(
                "implausible name length {name_len}"
            )));
        }
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| NumericsError::CheckpointFormat("non-UTF8 parameter name".into()))?;
        let rank = read_u32(&mut r)? as usize;
        if rank > 8 {
            return Err(NumericsError::CheckpointFormat(format!("rank {rank} too large")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut payload = vec![0u8; n * 4];
        r.read_exact(&mut payload)?;

        let id = params
            .id(&name)
            .map_err(|_| NumericsError::CheckpointMismatch(format!("unexpected parameter {name}")))?;
        if params.value(id).shape() != shape.as_slice() {
            return Err(NumericsError::CheckpointMismatch(format!(
                "{name}: checkpoint shape {:?}, model shape {:?}",
                shape,
                params.value(id).shape()
            )));
        }
        let vals: Vec<f64> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let mut t = Tensor::from_values(&shape, &vals)?;
        t.requires_grad = true;
        params.value_mut(id).clone_from(&t);
        seen.insert(name);
    }

    if seen.len() != params.len() {
        let missing: Vec<String> = params
            .iter()
            .filter(|(_, p)| !seen.contains(&p.name))
            .map(|(_, p)| p.name.clone())
            .collect();
        return Err(NumericsError::CheckpointMismatch(format!(
            "missing parameters: {}",
            missing.join(", ")
        )));
    }
    Ok(())
}

/// Hex SHA-256 of a file's bytes; used to stamp detections with the
/// checkpoint that produced them.
pub fn sha256_file(path: &Path) -> Result<String, NumericsError> {
    let mut f = File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 8192];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::params::ParamGroup;
    use std::path::PathBuf;
    use std::sync::atomic::{AtomicU64, Ordering};

    static COUNTER: AtomicU64 = AtomicU64::new(0);

    fn scratch(name: &str) -> PathBuf {
        let n = COUNTER.fetch_add(1, Ordering::SeqCst);
        std::env::temp_dir().join(format!("ovck_{}_{}_{}", std::process::id(), n, name))
    }

    fn sample_set() -> ParamSet {
        let mut p = ParamSet::new();
        p.add(
            "enc.w",
            Tensor::from_values(&[2, 3], &[0.1, -0.2, 0.3, 1.5, -2.5, 0.0]).unwrap(),
            ParamGroup::Backbone,
        )
        .unwrap();
        p.add("head.b", Tensor::from_values(&[4], &[1.0, 2.0, 3.0, 4.0]).unwrap(), ParamGroup::Head)
            .unwrap();
        p
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let src = sample_set();
        let path = scratch("rt.ovck");
        save_checkpoint(&src, &path).unwrap();

        let mut dst = sample_set();
        for (_, p) in dst.clone().iter() {
            let id = dst.id(&p.name).unwrap();
            dst.value_mut(id).data_mut().fill(9.0);
        }
        load_checkpoint(&mut dst, &path).unwrap();
        for ((_, a), (_, b)) in src.iter().zip(dst.iter()) {
            assert_eq!(a.value.to_f32_vec(), b.value.to_f32_vec());
            assert_eq!(a.value.data(), b.value.data());
        }
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn saved_file_is_byte_stable() {
        let src = sample_set();
        let p1 = scratch("a.ovck");
        let p2 = scratch("b.ovck");
        save_checkpoint(&src, &p1).unwrap();
        save_checkpoint(&src, &p2).unwrap();
        assert_eq!(sha256_file(&p1).unwrap(), sha256_file(&p2).unwrap());
        std::fs::remove_file(&p1).ok();
        std::fs::remove_file(&p2).ok();
    }

    #[test]
    fn missing_parameter_is_error() {
        let src = sample_set();
        let path = scratch("missing.ovck");
        save_checkpoint(&src, &path).unwrap();
        let mut bigger = sample_set();
        bigger
            .add("extra.w", Tensor::zeros(&[2]), ParamGroup::Head)
            .unwrap();
        let err = load_checkpoint(&mut bigger, &path).unwrap_err();
        assert!(matches!(err, NumericsError::CheckpointMismatch(_)));
        assert!(err.to_string().contains("extra.w"));
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn unexpected_parameter_is_error() {
        let src = sample_set();
        let path = scratch("unexpected.ovck");
        save_checkpoint(&src, &path).unwrap();
        let mut smaller = ParamSet::new();
        smaller
            .add("enc.w", Tensor::zeros(&[2, 3]), ParamGroup::Backbone)
            .unwrap();
        let err = load_checkpoint(&mut smaller, &path).unwrap_err();
        assert!(err.to_string().contains("head.b"));
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn shape_mismatch_is_error() {
        let src = sample_set();
        let path = scratch("shape.ovck");
        save_checkpoint(&src, &path).unwrap();
        let mut reshaped = ParamSet::new();
        reshaped
            .add("enc.w", Tensor::zeros(&[3, 2]), ParamGroup::Backbone)
            .unwrap();
        reshaped
            .add("head.b", Tensor::zeros(&[4]), ParamGroup::Head)
            .unwrap();
        let err = load_checkpoint(&mut reshaped, &path).unwrap_err();
        assert!(matches!(err, NumericsError::CheckpointMismatch(_)));
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn bad_magic_is_error() {
        let path = scratch("magic.ovck");
        std::fs::write(&path, b"NOPE....").unwrap();
        let mut p = sample_set();
        let err = load_checkpoint(&mut p, &path).unwrap_err();
        assert!(matches!(err, NumericsError::CheckpointFormat(_)));
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn sha256_matches_known_vector() {
        let path = scratch("abc.bin");
        std::fs::write(&path, b"abc").unwrap();
        assert_eq!(
            sha256_file(&path).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        std::fs::remove_file(&path).ok();
    }
}
