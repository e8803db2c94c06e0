//! Reference sequential executor: the interpreter over concrete values only.

use std::io::{self, Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::interp::{Concrete, Domain, InterpError, Interpreter, MixedValue, Tensor};
use crate::ir::{default_registry, Function, IrModule, OpRegistry, Type};

#[derive(Debug, Error)]
pub enum ExecError {
    #[error(transparent)]
    Interp(#[from] InterpError),
    #[error("entry parameter %{0} has no declared type")]
    UntypedParam(String),
    #[error("result {0} is not a tensor")]
    NonTensorResult(usize),
    #[error("argument {index}: {message}")]
    BadArgument { index: usize, message: String },
}

pub fn execute(module: &IrModule, args: &[Tensor]) -> Result<Vec<Tensor>, ExecError> {
    execute_with(module, args, default_registry())
}

pub fn execute_with(module: &IrModule, args: &[Tensor], registry: &OpRegistry) -> Result<Vec<Tensor>, ExecError> {
    let args = args.iter().cloned().map(MixedValue::tensor).collect();
    let out = Interpreter::new(registry, Domain::Concrete).interpret(module, args)?;
    out.returns
        .into_iter()
        .enumerate()
        .map(|(i, v)| v.into_tensor().ok_or(ExecError::NonTensorResult(i)))
        .collect()
}

fn random_value(ty: &Type, rng: &mut ChaCha8Rng) -> Concrete {
    match ty {
        Type::Tuple(items) => Concrete::Tuple(items.iter().map(|t| random_value(t, rng)).collect()),
        _ => {
            let dtype = ty.dtype().expect("tensor type");
            let shape = ty.shape().expect("tensor type").to_vec();
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| {
                    if dtype.is_float() {
                        rng.gen_range(-1.0..1.0)
                    } else {
                        rng.gen_range(0..8) as f64
                    }
                })
                .collect();
            let device = ty.device().expect("tensor type");
            Concrete::Tensor(Tensor::new(dtype, shape, data, device).expect("length matches shape"))
        }
    }
}

/// Seeded arguments for the declared parameter types of `f`: floats uniform
/// in [-1, 1), integers in 0..8.
pub fn random_args(f: &Function, seed: u64) -> Result<Vec<MixedValue>, ExecError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    f.params
        .iter()
        .map(|&p| {
            let v = f.value(p);
            let ty = v.ty.as_ref().ok_or_else(|| ExecError::UntypedParam(v.name.clone()))?;
            Ok(MixedValue::Concrete(random_value(ty, &mut rng)))
        })
        .collect()
}

/// [`random_args`] for functions whose parameters are all tensors.
pub fn random_tensors(f: &Function, seed: u64) -> Result<Vec<Tensor>, ExecError> {
    random_args(f, seed)?
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            v.into_tensor().ok_or(ExecError::BadArgument {
                index: i,
                message: "tuple parameters are not supported here".to_string(),
            })
        })
        .collect()
}

/// Checks raw tensors against the declared parameter types and adopts the
/// declared dtype and device.
pub fn bind_args(f: &Function, raw: Vec<(Vec<usize>, Vec<f64>)>) -> Result<Vec<Tensor>, ExecError> {
    if raw.len() != f.params.len() {
        return Err(ExecError::BadArgument {
            index: raw.len(),
            message: format!("@{} takes {} arguments, {} supplied", f.name, f.params.len(), raw.len()),
        });
    }
    f.params
        .iter()
        .zip(raw)
        .enumerate()
        .map(|(i, (&p, (shape, data)))| {
            let v = f.value(p);
            let ty = v.ty.as_ref().ok_or_else(|| ExecError::UntypedParam(v.name.clone()))?;
            let bad = |message: String| ExecError::BadArgument { index: i, message };
            let (Some(dtype), Some(want), Some(device)) = (ty.dtype(), ty.shape(), ty.device()) else {
                return Err(bad(format!("%{} has non-tensor type {ty}", v.name)));
            };
            if want != shape.as_slice() {
                return Err(bad(format!("%{} expects shape {want:?}, got {shape:?}", v.name)));
            }
            Tensor::new(dtype, shape, data, device).map_err(|e| bad(e.to_string()))
        })
        .collect()
}

const MAGIC: &[u8; 4] = b"DIRT";
const VERSION: u32 = 1;

/// Writes tensors in the binary exchange format: `DIRT`, u32 version, u32
/// count, then per tensor a u32 rank, `rank` u64 dims and the row-major
/// elements as f32. All integers little-endian.
pub fn write_tensors(mut w: impl Write, tensors: &[Tensor]) -> io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in &t.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in &t.data {
            w.write_all(&(x as f32).to_le_bytes())?;
        }
    }
    w.flush()
}

fn invalid(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads the format written by [`write_tensors`] as (shape, data) pairs.
pub fn read_tensors(mut r: impl Read) -> io::Result<Vec<(Vec<usize>, Vec<f64>)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(invalid("not a DIRT tensor file"));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(invalid(format!("unsupported tensor file version {version}")));
    }
    let count = read_u32(&mut r)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let rank = read_u32(&mut r)? as usize;
        if rank > 16 {
            return Err(invalid(format!("rank {rank} too large")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(usize::try_from(u64::from_le_bytes(b)).map_err(|_| invalid("dimension too large"))?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| invalid("tensor too large"))?;
        let mut bytes = Vec::new();
        r.by_ref().take(n as u64 * 4).read_to_end(&mut bytes)?;
        if bytes.len() != n * 4 {
            return Err(invalid("truncated tensor data"));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        out.push((shape, data));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_round_trip() {
        let ts = vec![
            Tensor::f32(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-3, 7.0], 0).unwrap(),
            Tensor::f32(vec![], vec![4.0], 1).unwrap(),
        ];
        let mut buf = Vec::new();
        write_tensors(&mut buf, &ts).unwrap();
        assert_eq!(&buf[..4], b"DIRT");
        let back = read_tensors(buf.as_slice()).unwrap();
        assert_eq!(back[0], (vec![2, 3], ts[0].data.clone()));
        assert_eq!(back[1], (vec![], vec![4.0]));
        assert!(read_tensors(&buf[..buf.len() - 1]).is_err());
        assert!(read_tensors(&b"NOPE"[..]).is_err());
    }
}
