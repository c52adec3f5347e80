//! Binary checkpoint format.
//!
//! Layout: the 8-byte magic `MALLOCv1`; eight little-endian `u32` header
//! words (`d_model`, `n_heads`, `head_dim`, `n_blocks`, `max_seq_len`,
//! `n_items`, `label_vocab`, `bytes_per_element`); then every parameter
//! matrix in canonical order, each as `rows: u32`, `cols: u32`, and a
//! row-major little-endian `f32` payload. Saving rounds the internal f64
//! parameters to f32, so the file is a deterministic function of the
//! parameters.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use malloc_core::backbone::{ModelConfig, Parameters};

pub const MAGIC: &[u8; 8] = b"MALLOCv1";

pub fn save(path: &Path, model: &ModelConfig, params: &Parameters) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    for word in header_words(model) {
        w.write_all(&word.to_le_bytes())?;
    }
    for matrix in params.flat() {
        w.write_all(&(matrix.rows() as u32).to_le_bytes())?;
        w.write_all(&(matrix.cols() as u32).to_le_bytes())?;
        for &v in matrix.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush().with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ModelConfig, Parameters)> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).with_context(|| format!("reading {} magic", path.display()))?;
    if &magic != MAGIC {
        bail!("{}: not a checkpoint (bad magic {magic:02x?})", path.display());
    }
    let mut words = [0u32; 8];
    for w in &mut words {
        *w = read_u32(&mut r)?;
    }
    let model = ModelConfig {
        d_model: words[0] as usize,
        n_heads: words[1] as usize,
        n_blocks: words[3] as usize,
        max_seq_len: words[4] as usize,
        n_items: words[5] as usize,
        label_vocab: words[6] as usize,
        bytes_per_element: words[7],
    };
    model.validate().map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
    if words[2] as usize != model.head_dim() {
        bail!(
            "{}: header head_dim {} disagrees with d_model/n_heads = {}",
            path.display(),
            words[2],
            model.head_dim()
        );
    }

    let mut params = Parameters::init(&model, 0);
    let names = params.names();
    for (mi, matrix) in params.flat_mut().into_iter().enumerate() {
        let rows = read_u32(&mut r)? as usize;
        let cols = read_u32(&mut r)? as usize;
        if rows != matrix.rows() || cols != matrix.cols() {
            bail!(
                "{}: {} has shape {rows}x{cols}, expected {}x{}",
                path.display(),
                names[mi],
                matrix.rows(),
                matrix.cols()
            );
        }
        for v in matrix.data_mut() {
            let mut buf = [0u8; 4];
            r.read_exact(&mut buf)
                .with_context(|| format!("{}: truncated in {}", path.display(), names[mi]))?;
            *v = f32::from_le_bytes(buf) as f64;
        }
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        bail!("{}: trailing bytes after the last matrix", path.display());
    }
    Ok((model, params))
}

fn header_words(model: &ModelConfig) -> [u32; 8] {
    [
        model.d_model as u32,
        model.n_heads as u32,
        model.head_dim() as u32,
        model.n_blocks as u32,
        model.max_seq_len as u32,
        model.n_items as u32,
        model.label_vocab as u32,
        model.bytes_per_element,
    ]
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).context("truncated checkpoint header")?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_blocks: 2,
            max_seq_len: 16,
            n_items: 5,
            label_vocab: 2,
            bytes_per_element: 4,
        }
    }

    #[test]
    fn round_trips_model_and_parameters() {
        let m = model();
        let params = Parameters::init(&m, 42);
        let f = tempfile::NamedTempFile::new().unwrap();
        save(f.path(), &m, &params).unwrap();
        let (m2, p2) = load(f.path()).unwrap();
        assert_eq!(m, m2);
        for (a, b) in params.flat().iter().zip(p2.flat().iter()) {
            assert_eq!(a.rows(), b.rows());
            for (x, y) in a.data().iter().zip(b.data().iter()) {
                // Values pass through f32 rounding exactly once.
                assert_eq!(*x as f32, *y as f32);
                assert_eq!(*y, (*x as f32) as f64);
            }
        }
    }

    #[test]
    fn saving_twice_is_byte_identical() {
        let m = model();
        let params = Parameters::init(&m, 9);
        let f1 = tempfile::NamedTempFile::new().unwrap();
        let f2 = tempfile::NamedTempFile::new().unwrap();
        save(f1.path(), &m, &params).unwrap();
        save(f2.path(), &m, &params).unwrap();
        assert_eq!(std::fs::read(f1.path()).unwrap(), std::fs::read(f2.path()).unwrap());
    }

    #[test]
    fn header_starts_with_magic() {
        let m = model();
        let f = tempfile::NamedTempFile::new().unwrap();
        save(f.path(), &m, &Parameters::init(&m, 1)).unwrap();
        let bytes = std::fs::read(f.path()).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 8);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 4); // head_dim
    }

    #[test]
    fn rejects_foreign_files() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        std::io::Write::write_all(&mut f, b"definitely not a checkpoint").unwrap();
        let err = load(f.path()).unwrap_err().to_string();
        assert!(err.contains("bad magic"), "{err}");
    }

    #[test]
    fn rejects_truncated_payload() {
        let m = model();
        let f = tempfile::NamedTempFile::new().unwrap();
        save(f.path(), &m, &Parameters::init(&m, 1)).unwrap();
        let mut bytes = std::fs::read(f.path()).unwrap();
        bytes.truncate(bytes.len() - 3);
        let g = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(g.path(), &bytes).unwrap();
        assert!(load(g.path()).is_err());
    }
}
