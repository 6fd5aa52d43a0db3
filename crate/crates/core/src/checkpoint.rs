//! Named-network parameter containers.
//!
//! Layout: a header line `DECOM-CKPT v1`, then for each network a line
//! `net <name> <tensor-count>`, and for each tensor a line
//! `tensor <rank> <d1> ... <dr>` immediately followed by the row-major
//! payload as little-endian f64. The file closes with a line `end`.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const HEADER: &str = "DECOM-CKPT v1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    networks: Vec<(String, Vec<Tensor<f64>>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.networks.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.networks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.networks.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&[Tensor<f64>]> {
        self.networks
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.as_slice())
    }

    /// Adds or replaces a network entry.
    pub fn insert(&mut self, name: &str, tensors: Vec<Tensor<f64>>) -> Result<()> {
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(Error::Checkpoint(format!("invalid network name {name:?}")));
        }
        match self.networks.iter_mut().find(|(n, _)| n == name) {
            Some(slot) => slot.1 = tensors,
            None => self.networks.push((name.to_string(), tensors)),
        }
        Ok(())
    }

    pub fn insert_mlp<S: Scalar>(&mut self, name: &str, net: &Mlp<S>) -> Result<()> {
        self.insert(name, net.params().into_iter().map(|p| p.convert()).collect())
    }

    /// Copies the stored parameters of `name` into `net`, checking every shape.
    pub fn load_mlp<S: Scalar>(&self, name: &str, net: &mut Mlp<S>) -> Result<()> {
        let stored = self
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("network `{name}` not present")))?;
        let params = net.params_mut();
        if stored.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "network `{name}` has {} tensors, expected {}",
                stored.len(),
                params.len()
            )));
        }
        for (i, (p, s)) in params.into_iter().zip(stored).enumerate() {
            if p.shape() != s.shape() {
                return Err(Error::Checkpoint(format!(
                    "network `{name}` tensor {i}: stored shape {:?}, expected {:?}",
                    s.shape(),
                    p.shape()
                )));
            }
            *p = s.convert();
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{HEADER}")?;
        for (name, tensors) in &self.networks {
            writeln!(w, "net {name} {}", tensors.len())?;
            for t in tensors {
                let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
                writeln!(w, "tensor {} {}", dims.len(), dims.join(" "))?;
                for v in t.data() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        writeln!(w, "end")?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = BufReader::new(r);
        let header = read_line(&mut r)?;
        if header != HEADER {
            return Err(Error::Checkpoint(format!("bad header {header:?}")));
        }
        let mut ckpt = Checkpoint::new();
        loop {
            let line = read_line(&mut r)?;
            let fields: Vec<&str> = line.split(' ').collect();
            match fields.as_slice() {
                ["end"] => break,
                ["net", name, count] => {
                    let count: usize = parse_num(count)?;
                    let mut tensors = Vec::with_capacity(count);
                    for _ in 0..count {
                        tensors.push(read_tensor(&mut r)?);
                    }
                    ckpt.insert(name, tensors)?;
                }
                _ => return Err(Error::Checkpoint(format!("unexpected line {line:?}"))),
            }
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(file))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

fn read_line<R: BufRead>(r: &mut R) -> Result<String> {
    let mut buf = Vec::new();
    let n = r.read_until(b'\n', &mut buf)?;
    if n == 0 || buf.last() != Some(&b'\n') {
        return Err(Error::Checkpoint("truncated file".into()));
    }
    buf.pop();
    String::from_utf8(buf).map_err(|_| Error::Checkpoint("non-utf8 record line".into()))
}

fn parse_num(s: &str) -> Result<usize> {
    s.parse()
        .map_err(|_| Error::Checkpoint(format!("expected an integer, found {s:?}")))
}

fn read_tensor<R: BufRead>(r: &mut R) -> Result<Tensor<f64>> {
    let line = read_line(r)?;
    let mut fields = line.split(' ');
    if fields.next() != Some("tensor") {
        return Err(Error::Checkpoint(format!("expected tensor record, found {line:?}")));
    }
    let rank = parse_num(fields.next().unwrap_or(""))?;
    let shape = fields.map(parse_num).collect::<Result<Vec<_>>>()?;
    if shape.len() != rank {
        return Err(Error::Checkpoint(format!("rank {rank} but {} dims", shape.len())));
    }
    let n: usize = shape.iter().product();
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::Checkpoint("truncated tensor payload".into()))?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use rand::SeedableRng;

    #[test]
    fn round_trip_preserves_bits() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::<f64>::new(&[3, 5, 2], Activation::LeakyRelu, Activation::Tanh, &mut rng);
        let mut ckpt = Checkpoint::new();
        ckpt.insert_mlp("base_0", &net).unwrap();
        ckpt.insert("odd", vec![Tensor::new(vec![2, 1, 3], vec![0.5; 6]).unwrap()])
            .unwrap();
        let mut bytes = Vec::new();
        ckpt.write_to(&mut bytes).unwrap();
        assert!(bytes.starts_with(b"DECOM-CKPT v1\n"));
        let back = Checkpoint::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back, ckpt);
        let mut other = Mlp::<f64>::zeros(&[3, 5, 2], Activation::LeakyRelu, Activation::Tanh);
        back.load_mlp("base_0", &mut other).unwrap();
        assert_eq!(other, net);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let net = Mlp::<f64>::zeros(&[3, 2], Activation::Identity, Activation::Identity);
        let mut ckpt = Checkpoint::new();
        ckpt.insert_mlp("n", &net).unwrap();
        let mut wrong = Mlp::<f64>::zeros(&[4, 2], Activation::Identity, Activation::Identity);
        assert!(ckpt.load_mlp("n", &mut wrong).is_err());
        assert!(ckpt.load_mlp("missing", &mut wrong).is_err());
    }

    #[test]
    fn truncated_input_is_rejected() {
        let mut ckpt = Checkpoint::new();
        ckpt.insert("a", vec![Tensor::row(vec![1.0, 2.0])]).unwrap();
        let mut bytes = Vec::new();
        ckpt.write_to(&mut bytes).unwrap();
        for cut in [0, 5, 20, bytes.len() - 3] {
            assert!(Checkpoint::read_from(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        assert!(Checkpoint::read_from(&b"DECOM-CKPT v2\nend\n"[..]).is_err());
    }
}
