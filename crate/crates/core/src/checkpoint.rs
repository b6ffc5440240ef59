//! Named bundle of networks, numeric vectors and text blobs written as a
//! single little-endian binary file.
//!
//! ```text
//! b"VFCK" | u32 version = 1 | u32 entry count
//! entry: u32 name length | name (utf-8) | u8 kind | payload
//!   kind 0: network in the VFNN format
//!   kind 1: u64 length | f64 values
//!   kind 2: u64 length | utf-8 bytes
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, VolfitError};
use crate::nn::{read_f64, read_u32, read_u64, Mlp};

const MAGIC: &[u8; 4] = b"VFCK";
const VERSION: u32 = 1;
const MAX_ENTRIES: u32 = 1024;
const MAX_LEN: u64 = 1 << 32;

#[derive(Debug, Clone)]
pub enum Entry {
    Net(Mlp),
    Values(Vec<f64>),
    Text(String),
}

#[derive(Debug, Clone, Default)]
pub struct Bundle {
    entries: Vec<(String, Entry)>,
}

impl Bundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Inserts or replaces `name`.
    pub fn insert(&mut self, name: &str, entry: Entry) {
        match self.entries.iter_mut().find(|(n, _)| n == name) {
            Some(slot) => slot.1 = entry,
            None => self.entries.push((name.to_string(), entry)),
        }
    }

    pub fn put_net(&mut self, name: &str, net: &Mlp) {
        self.insert(name, Entry::Net(net.clone()));
    }

    pub fn put_values(&mut self, name: &str, values: Vec<f64>) {
        self.insert(name, Entry::Values(values));
    }

    pub fn put_text(&mut self, name: &str, text: impl Into<String>) {
        self.insert(name, Entry::Text(text.into()));
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, e)| e)
    }

    fn missing(name: &str, what: &str) -> VolfitError {
        VolfitError::Checkpoint(format!("entry {name:?} missing or not a {what}"))
    }

    pub fn net(&self, name: &str) -> Result<&Mlp> {
        match self.get(name) {
            Some(Entry::Net(n)) => Ok(n),
            _ => Err(Self::missing(name, "network")),
        }
    }

    pub fn values(&self, name: &str) -> Result<&[f64]> {
        match self.get(name) {
            Some(Entry::Values(v)) => Ok(v),
            _ => Err(Self::missing(name, "value vector")),
        }
    }

    pub fn text(&self, name: &str) -> Result<&str> {
        match self.get(name) {
            Some(Entry::Text(t)) => Ok(t),
            _ => Err(Self::missing(name, "text entry")),
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, entry) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            match entry {
                Entry::Net(net) => {
                    w.write_all(&[0])?;
                    net.write_to(&mut w)?;
                }
                Entry::Values(v) => {
                    w.write_all(&[1])?;
                    w.write_all(&(v.len() as u64).to_le_bytes())?;
                    for x in v {
                        w.write_all(&x.to_le_bytes())?;
                    }
                }
                Entry::Text(t) => {
                    w.write_all(&[2])?;
                    w.write_all(&(t.len() as u64).to_le_bytes())?;
                    w.write_all(t.as_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(VolfitError::Checkpoint("bad checkpoint magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(VolfitError::Checkpoint(format!(
                "unsupported version {version}"
            )));
        }
        let count = read_u32(&mut r)?;
        if count > MAX_ENTRIES {
            return Err(VolfitError::Checkpoint(format!(
                "too many entries ({count})"
            )));
        }
        let mut bundle = Bundle::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len.min(4096)];
            if name_len > 4096 {
                return Err(VolfitError::Checkpoint("entry name too long".into()));
            }
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| VolfitError::Checkpoint("entry name is not utf-8".into()))?;
            let mut kind = [0u8; 1];
            r.read_exact(&mut kind)?;
            let entry = match kind[0] {
                0 => Entry::Net(Mlp::read_from(&mut r)?),
                1 => {
                    let n = read_len(&mut r)?;
                    Entry::Values((0..n).map(|_| read_f64(&mut r)).collect::<Result<_>>()?)
                }
                2 => {
                    let n = read_len(&mut r)?;
                    let mut buf = vec![0u8; n];
                    r.read_exact(&mut buf)?;
                    Entry::Text(String::from_utf8(buf).map_err(|_| {
                        VolfitError::Checkpoint(format!("entry {name:?} is not utf-8"))
                    })?)
                }
                k => return Err(VolfitError::Checkpoint(format!("unknown entry kind {k}"))),
            };
            bundle.insert(&name, entry);
        }
        Ok(bundle)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

fn read_len<R: Read>(r: &mut R) -> Result<usize> {
    let n = read_u64(r)?;
    if n > MAX_LEN {
        return Err(VolfitError::Checkpoint(format!(
            "entry length {n} too large"
        )));
    }
    Ok(n as usize)
}

/// Checks that a network has the expected input width.
pub fn expect_input_dim(net: &Mlp, name: &str, dim: usize) -> Result<()> {
    if net.input_dim() != dim {
        return Err(VolfitError::Checkpoint(format!(
            "{name} expects input dimension {}, configuration gives {dim}",
            net.input_dim()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Mlp::xavier(&[3, 5, 2], Activation::Tanh, &mut rng).unwrap();
        let mut b = Bundle::new();
        b.put_net("actor", &net);
        b.put_values("norm", vec![1.5, -0.25, f64::MIN_POSITIVE]);
        b.put_text("config", "{\"a\":1}");
        let mut buf = Vec::new();
        b.write_to(&mut buf).unwrap();
        let back = Bundle::read_from(buf.as_slice()).unwrap();
        assert_eq!(back.net("actor").unwrap().to_bytes(), net.to_bytes());
        assert_eq!(
            back.values("norm").unwrap(),
            &[1.5, -0.25, f64::MIN_POSITIVE]
        );
        assert_eq!(back.text("config").unwrap(), "{\"a\":1}");
        assert_eq!(
            back.names().collect::<Vec<_>>(),
            vec!["actor", "norm", "config"]
        );
    }

    #[test]
    fn rejects_corruption() {
        let mut b = Bundle::new();
        b.put_values("x", vec![1.0]);
        let mut buf = Vec::new();
        b.write_to(&mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            Bundle::read_from(bad.as_slice()),
            Err(VolfitError::Checkpoint(_))
        ));
        assert!(Bundle::read_from(&buf[..buf.len() - 3]).is_err());
        let mut kind = buf.clone();
        kind[4 + 4 + 4 + 4 + 1] = 9;
        assert!(Bundle::read_from(kind.as_slice()).is_err());
    }

    #[test]
    fn typed_access_errors() {
        let mut b = Bundle::new();
        b.put_values("x", vec![]);
        assert!(b.net("x").is_err());
        assert!(b.values("y").is_err());
        b.put_values("x", vec![2.0]);
        assert_eq!(b.len(), 1);
        assert_eq!(b.values("x").unwrap(), &[2.0]);
    }
}
