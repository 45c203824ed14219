//! Binary checkpoint layout (all integers little-endian):
//!
//! ```text
//! "SSGC" | u32 version | u32 count | count × (u16 name_len | name | u8 rank | rank × u32 dim | f64 data...)
//! ```

use std::io::{Read, Write};

use super::{ParamStore, Result, Tensor, TensorError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SSGC";
pub const CHECKPOINT_VERSION: u32 = 1;

fn io_err(e: std::io::Error) -> TensorError {
    TensorError::Checkpoint(e.to_string())
}

pub fn write_checkpoint(params: &ParamStore, out: &mut impl Write) -> Result<()> {
    let count = u32::try_from(params.len()).map_err(|_| TensorError::Checkpoint("too many tensors".into()))?;
    out.write_all(CHECKPOINT_MAGIC).map_err(io_err)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io_err)?;
    out.write_all(&count.to_le_bytes()).map_err(io_err)?;
    for (name, t) in params.iter() {
        let name_len = u16::try_from(name.len()).map_err(|_| TensorError::Checkpoint(format!("name too long: {name}")))?;
        let rank = u8::try_from(t.rank()).map_err(|_| TensorError::Checkpoint("rank exceeds 255".into()))?;
        out.write_all(&name_len.to_le_bytes()).map_err(io_err)?;
        out.write_all(name.as_bytes()).map_err(io_err)?;
        out.write_all(&[rank]).map_err(io_err)?;
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| TensorError::Checkpoint("dimension exceeds u32".into()))?;
            out.write_all(&d.to_le_bytes()).map_err(io_err)?;
        }
        for v in t.data() {
            out.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    Ok(())
}

fn read_array<const N: usize>(input: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    input.read_exact(&mut buf).map_err(io_err)?;
    Ok(buf)
}

pub fn read_checkpoint(input: &mut impl Read) -> Result<ParamStore> {
    let magic: [u8; 4] = read_array(input)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(TensorError::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(read_array(input)?);
    if version != CHECKPOINT_VERSION {
        return Err(TensorError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(read_array(input)?);
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(read_array(input)?) as usize;
        let mut name = vec![0u8; name_len];
        input.read_exact(&mut name).map_err(io_err)?;
        let name = String::from_utf8(name).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
        let [rank] = read_array::<1>(input)?;
        let shape = (0..rank)
            .map(|_| read_array(input).map(|b| u32::from_le_bytes(b) as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| read_array(input).map(f64::from_le_bytes))
            .collect::<Result<Vec<_>>>()?;
        store.insert(name, Tensor::new(shape, data)?)?;
    }
    Ok(store)
}
