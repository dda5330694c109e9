//! `LFCK` container: a fixed header followed by named f32 tensors.
//!
//! Layout (all integers u32 little-endian): magic `LFCK`, version, d, L,
//! |V|, maxlen, then per tensor: name length, name bytes, rank, dims, and
//! the payload as little-endian f32. Sections run to end of file.

use std::io::{self, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::lm::{ModelDims, ModelParams};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LFCK";
pub const VERSION: u32 = 1;
const WHAT: &str = "checkpoint";

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub dims: ModelDims,
    pub sections: Vec<(String, Tensor)>,
}

fn put(w: &mut impl Write, v: usize) -> io::Result<()> {
    let v = u32::try_from(v).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "value exceeds u32"))?;
    w.write_all(&v.to_le_bytes())
}

fn get(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| Error::format(WHAT, format!("truncated header or section: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

impl Container {
    pub fn new(dims: ModelDims) -> Self {
        Container {
            dims,
            sections: Vec::new(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.sections.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        for v in [self.dims.d, self.dims.layers, self.dims.vocab, self.dims.maxlen] {
            put(w, v)?;
        }
        for (name, t) in &self.sections {
            put(w, name.len())?;
            w.write_all(name.as_bytes())?;
            put(w, t.rank())?;
            for &s in t.shape() {
                put(w, s)?;
            }
            let mut buf = Vec::with_capacity(4 * t.len());
            for x in t.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Container> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut cur = bytes.as_slice();
        let mut magic = [0u8; 4];
        cur.read_exact(&mut magic).map_err(|_| Error::format(WHAT, "missing magic"))?;
        if &magic != MAGIC {
            return Err(Error::format(WHAT, format!("bad magic {magic:?}")));
        }
        let version = get(&mut cur)?;
        if version != VERSION {
            return Err(Error::format(WHAT, format!("unsupported version {version}")));
        }
        let d = get(&mut cur)? as usize;
        let layers = get(&mut cur)? as usize;
        let vocab = get(&mut cur)? as usize;
        let maxlen = get(&mut cur)? as usize;
        let mut c = Container::new(ModelDims { vocab, d, layers, maxlen });
        while !cur.is_empty() {
            let n = get(&mut cur)? as usize;
            if n > cur.len() {
                return Err(Error::format(WHAT, "section name runs past end of file"));
            }
            let name = String::from_utf8(cur[..n].to_vec()).map_err(|_| Error::format(WHAT, "section name is not UTF-8"))?;
            cur = &cur[n..];
            let rank = get(&mut cur)? as usize;
            let shape = (0..rank).map(|_| get(&mut cur).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            if len.checked_mul(4).is_none_or(|b| b > cur.len()) {
                return Err(Error::format(WHAT, format!("payload of {name} runs past end of file")));
            }
            let data = cur[..4 * len]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            cur = &cur[4 * len..];
            c.sections.push((name, Tensor::new(shape, data)?));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf).map_err(|e| io_at(path, e))
    }

    pub fn load(path: &Path) -> Result<Container> {
        let f = std::fs::File::open(path).map_err(|e| io_at(path, e))?;
        Container::read_from(&mut io::BufReader::new(f))
    }
}

pub(crate) fn io_at(path: &Path, e: io::Error) -> Error {
    Error::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

impl ModelParams {
    pub fn to_container(&self) -> Container {
        let mut c = Container::new(self.dims);
        for (name, t) in self.dims.names().into_iter().zip(&self.tensors) {
            c.sections.push((name, t.clone()));
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<ModelParams> {
        c.dims.validate()?;
        let mut tensors = Vec::new();
        for (name, shape) in c.dims.names().iter().zip(c.dims.shapes()) {
            let t = c
                .get(name)
                .ok_or_else(|| Error::format(WHAT, format!("missing tensor {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::format(WHAT, format!("tensor {name} has shape {:?}, expected {shape:?}", t.shape())));
            }
            tensors.push(t.clone());
        }
        Ok(ModelParams { dims: c.dims, tensors })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> ModelDims {
        ModelDims {
            vocab: 10,
            d: 8,
            layers: 2,
            maxlen: 6,
        }
    }

    #[test]
    fn model_round_trips_bit_exactly() {
        let p = ModelParams::init(dims(), 2).unwrap();
        let mut buf = Vec::new();
        p.to_container().write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], MAGIC);
        let back = ModelParams::from_container(&Container::read_from(&mut buf.as_slice()).unwrap()).unwrap();
        for (a, b) in p.tensors.iter().zip(&back.tensors) {
            let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn header_layout_is_fixed() {
        let c = Container::new(dims());
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 24);
        let words: Vec<u32> = buf[4..].chunks(4).map(|b| u32::from_le_bytes(b.try_into().unwrap())).collect();
        assert_eq!(words, vec![1, 8, 2, 10, 6]);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let p = ModelParams::init(dims(), 2).unwrap();
        let mut buf = Vec::new();
        p.to_container().write_to(&mut buf).unwrap();
        assert!(Container::read_from(&mut &buf[..buf.len() - 3]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(Container::read_from(&mut bad.as_slice()).is_err());
        let mut c = p.to_container();
        c.sections.pop();
        assert!(ModelParams::from_container(&c).is_err());
    }
}
