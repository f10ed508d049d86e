//! Flat binary checkpoint container: a text index of named 64-bit arrays
//! (name, shape, byte offset) followed by raw little-endian data. Round-trips
//! are bit-exact.

use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

const MAGIC: &str = "CTASR-CKPT-1";

pub fn save(path: &Path, arrays: &ParamSet) -> Result<()> {
    let mut index = String::new();
    index.push_str(MAGIC);
    index.push('\n');
    index.push_str(&format!("{}\n", arrays.len()));
    let mut offset: u64 = 0;
    for (name, t) in arrays.iter() {
        if name.contains(char::is_whitespace) {
            return Err(Error::Checkpoint(format!(
                "array name '{name}' contains whitespace"
            )));
        }
        let dims: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
        index.push_str(&format!("{} {} {}\n", name, dims.join(","), offset));
        offset += (t.len() * 8) as u64;
    }
    index.push('\n');

    let mut f = File::create(path)?;
    f.write_all(index.as_bytes())?;
    for (_, t) in arrays.iter() {
        for v in &t.data {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamSet> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    if line.trim_end() != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic in {}: {:?}",
            path.display(),
            line.trim_end()
        )));
    }
    line.clear();
    reader.read_line(&mut line)?;
    let count: usize = line
        .trim()
        .parse()
        .map_err(|_| Error::Checkpoint(format!("bad array count {:?}", line.trim())))?;

    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        line.clear();
        reader.read_line(&mut line)?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(Error::Checkpoint(format!("bad index line {:?}", line)));
        }
        let shape: Vec<usize> = parts[1]
            .split(',')
            .map(|d| {
                d.parse()
                    .map_err(|_| Error::Checkpoint(format!("bad dim {:?}", d)))
            })
            .collect::<Result<_>>()?;
        let offset: u64 = parts[2]
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad offset {:?}", parts[2])))?;
        entries.push((parts[0].to_string(), shape, offset));
    }
    line.clear();
    reader.read_line(&mut line)?;
    if !line.trim().is_empty() {
        return Err(Error::Checkpoint("missing blank line after index".into()));
    }

    let mut blob = Vec::new();
    reader.read_to_end(&mut blob)?;
    let mut out = ParamSet::new();
    for (name, shape, offset) in entries {
        let n: usize = shape.iter().product();
        let start = offset as usize;
        let end = start + n * 8;
        if end > blob.len() {
            return Err(Error::Checkpoint(format!(
                "array {name} extends past end of file"
            )));
        }
        let data: Vec<f64> = blob[start..end]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        out.insert(name, Tensor::new(shape, data)?);
    }
    Ok(out)
}
