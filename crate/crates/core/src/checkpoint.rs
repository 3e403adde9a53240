//! Checkpoint container.
//!
//! ```text
//! GPGW1
//! config <byte count>
//! <config text>
//! iteration <n>
//! adam_step <n>
//! tensors <count>
//! <name> <d0>x<d1>x...     ("-" for a scalar)
//! ...
//! end
//! <little-endian f32 payload of every tensor, in directory order>
//! ```

use std::io::{BufRead, Read};
use std::path::Path;

use crate::error::{Error, Result};
use crate::pose_io::write_atomic;
use crate::tensor::Tensor;

pub const MAGIC: &str = "GPGW1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Echo of the configuration that produced the tensors.
    pub config: String,
    pub iteration: u64,
    pub adam_step: u64,
    pub tensors: Vec<(String, Tensor)>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("{MAGIC}\nconfig {}\n", self.config.len()).into_bytes();
        out.extend_from_slice(self.config.as_bytes());
        let mut header = format!(
            "\niteration {}\nadam_step {}\ntensors {}\n",
            self.iteration,
            self.adam_step,
            self.tensors.len()
        );
        for (name, t) in &self.tensors {
            let dims = if t.shape().is_empty() {
                "-".to_string()
            } else {
                t.shape().iter().map(usize::to_string).collect::<Vec<_>>().join("x")
            };
            header.push_str(&format!("{name} {dims}\n"));
        }
        header.push_str("end\n");
        out.extend_from_slice(header.as_bytes());
        for (_, t) in &self.tensors {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = std::io::Cursor::new(bytes);
        let mut line = String::new();
        let mut next_line = |r: &mut std::io::Cursor<&[u8]>| -> Result<String> {
            line.clear();
            r.read_line(&mut line).map_err(|e| bad(e.to_string()))?;
            if !line.ends_with('\n') {
                return Err(bad("truncated header"));
            }
            Ok(line.trim_end_matches('\n').to_string())
        };
        if next_line(&mut r)? != MAGIC {
            return Err(bad("not a GPGW1 checkpoint"));
        }
        let field = |l: &str, key: &str| -> Result<u64> {
            l.strip_prefix(key)
                .and_then(|v| v.strip_prefix(' '))
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad(format!("expected `{key} <n>`, found `{l}`")))
        };
        let n = field(&next_line(&mut r)?, "config")? as usize;
        let mut config = vec![0u8; n];
        r.read_exact(&mut config).map_err(|_| bad("truncated config"))?;
        let config = String::from_utf8(config).map_err(|_| bad("config is not UTF-8"))?;
        if !next_line(&mut r)?.is_empty() {
            return Err(bad("config length mismatch"));
        }
        let iteration = field(&next_line(&mut r)?, "iteration")?;
        let adam_step = field(&next_line(&mut r)?, "adam_step")?;
        let count = field(&next_line(&mut r)?, "tensors")? as usize;
        let mut dir = Vec::with_capacity(count);
        for _ in 0..count {
            let l = next_line(&mut r)?;
            let (name, dims) = l.rsplit_once(' ').ok_or_else(|| bad(format!("bad entry `{l}`")))?;
            let shape: Vec<usize> = if dims == "-" {
                vec![]
            } else {
                dims.split('x')
                    .map(|d| d.parse().map_err(|_| bad(format!("bad shape `{dims}`"))))
                    .collect::<Result<_>>()?
            };
            dir.push((name.to_string(), shape));
        }
        if next_line(&mut r)? != "end" {
            return Err(bad("missing end of tensor directory"));
        }
        let mut payload = Vec::new();
        r.read_to_end(&mut payload).map_err(|e| bad(e.to_string()))?;
        let mut at = 0;
        let mut tensors = Vec::with_capacity(count);
        for (name, shape) in dir {
            let len: usize = shape.iter().product();
            let end = at + 4 * len;
            if end > payload.len() {
                return Err(bad(format!("payload truncated in {name}")));
            }
            let data = payload[at..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            at = end;
            tensors.push((name, Tensor::from_vec(&shape, data)?));
        }
        if at != payload.len() {
            return Err(bad("trailing bytes after payload"));
        }
        Ok(Self {
            config,
            iteration,
            adam_step,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            config: "seed = 7\n[network]\nembed_dim = 4\n".into(),
            iteration: 12,
            adam_step: 12,
            tensors: vec![
                (
                    "a.weight".into(),
                    Tensor::from_vec(&[2, 3], vec![1.0, -2.5, 3.0, 0.1, 0.0, 9.0]).unwrap(),
                ),
                ("s".into(), Tensor::scalar(4.0)),
            ],
        }
    }

    #[test]
    fn round_trip() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back.config, c.config);
        assert_eq!(back.iteration, 12);
        assert_eq!(back.tensors[0].1.shape(), &[2, 3]);
        assert_eq!(back.tensors[0].1.data()[4], 0.0);
        assert_eq!(back.tensors[0].1.data()[3], 0.1f32 as f64);
        assert_eq!(back.to_bytes(), c.to_bytes());
    }

    #[test]
    fn header_is_text() {
        let b = sample().to_bytes();
        assert!(b.starts_with(b"GPGW1\nconfig "));
    }

    #[test]
    fn rejects_corruption() {
        let b = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&b[..b.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(b"GPGW2\n").is_err());
        let mut extra = b.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
