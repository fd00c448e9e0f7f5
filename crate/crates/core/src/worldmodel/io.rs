use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::model::{LdmModel, ModelDims};

pub const MAGIC: &[u8; 4] = b"LDM1";

/// `LDM1`, a little-endian `u32` count, then that many little-endian `f64`.
pub fn write_params<W: Write>(w: &mut W, params: &[f64]) -> Result<()> {
    let n = u32::try_from(params.len())
        .map_err(|_| Error::InvalidArgument("parameter vector too long for the file format".into()))?;
    w.write_all(MAGIC)?;
    w.write_all(&n.to_le_bytes())?;
    for p in params {
        w.write_all(&p.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_params<R: Read>(r: &mut R) -> Result<Vec<f64>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a model parameter file (bad magic)".into()));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let n = u32::from_le_bytes(len) as usize;
    let mut buf = vec![0u8; 8 * n];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format(format!("parameter file truncated, expected {n} values")))?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Format("trailing bytes after parameter vector".into()));
    }
    Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

impl LdmModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_params(&mut f, &self.params())?;
        f.flush()?;
        Ok(())
    }

    /// Load parameters into a model of the given architecture.
    pub fn load(dims: ModelDims, path: &Path) -> Result<Self> {
        let p = read_params(&mut std::io::BufReader::new(std::fs::File::open(path)?))?;
        let mut m = LdmModel::new(dims, 0);
        m.set_params(&p)?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_layout() {
        let p = vec![1.5, -0.0, f64::MIN_POSITIVE, 3.0e300];
        let mut buf = Vec::new();
        write_params(&mut buf, &p).unwrap();
        assert_eq!(&buf[..4], b"LDM1");
        assert_eq!(&buf[4..8], &4u32.to_le_bytes());
        assert_eq!(&buf[8..16], &1.5f64.to_le_bytes());
        assert_eq!(buf.len(), 8 + 32);
        let q = read_params(&mut buf.as_slice()).unwrap();
        assert_eq!(p.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), q.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn rejects_bad_files() {
        assert!(read_params(&mut &b"LDM2\0\0\0\0"[..]).is_err());
        let mut buf = Vec::new();
        write_params(&mut buf, &[1.0, 2.0]).unwrap();
        assert!(read_params(&mut &buf[..buf.len() - 1]).is_err());
        buf.push(0);
        assert!(read_params(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn model_save_load() {
        let dims = ModelDims { obs: 3, action: 1, z: 2, h: 3, hidden: 4 };
        let m = LdmModel::new(dims, 9);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        m.save(&path).unwrap();
        assert_eq!(LdmModel::load(dims, &path).unwrap(), m);
        let other = ModelDims { hidden: 5, ..dims };
        assert!(LdmModel::load(other, &path).is_err());
    }
}
