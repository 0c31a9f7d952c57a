//! GIPL tensor files.
//!
//! Layout, all integers little-endian:
//!
//! | bytes  | content                                   |
//! |--------|-------------------------------------------|
//! | 0..4   | magic `GIPL`                              |
//! | 4      | version, currently 1                      |
//! | 5..8   | reserved, zero                            |
//! | 8..20  | `u32` channels, height, width             |
//! | 20..   | `f64` values, channel-major then row-major |
//!
//! A tensor set (model checkpoints) is an ASCII header line `GIPLSET <n>`,
//! followed by `n` name lines, followed by `n` GIPL records in name order.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::FeatureMap;
use crate::error::{Error, Result};

pub const GIPL_MAGIC: [u8; 4] = *b"GIPL";
pub const GIPL_VERSION: u8 = 1;
pub const GIPL_HEADER_LEN: usize = 20;

const SET_TAG: &str = "GIPLSET";

pub fn write_tensor_to<W: Write>(map: &FeatureMap, mut out: W) -> Result<()> {
    let mut header = [0u8; GIPL_HEADER_LEN];
    header[..4].copy_from_slice(&GIPL_MAGIC);
    header[4] = GIPL_VERSION;
    let (c, h, w) = map.shape();
    for (i, dim) in [c, h, w].into_iter().enumerate() {
        let dim =
            u32::try_from(dim).map_err(|_| Error::InvalidArgument(format!("dimension {dim} does not fit in u32")))?;
        header[8 + 4 * i..12 + 4 * i].copy_from_slice(&dim.to_le_bytes());
    }
    out.write_all(&header)?;
    let mut payload = Vec::with_capacity(map.len() * 8);
    for v in map.data() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&payload)?;
    Ok(())
}

/// Reads one GIPL record, consuming exactly its bytes from `input`.
pub fn read_tensor_from<R: Read>(mut input: R) -> Result<FeatureMap> {
    let mut header = [0u8; GIPL_HEADER_LEN];
    let got = read_full(&mut input, &mut header)?;
    if got < 4 {
        return Err(Error::Truncated {
            expected: GIPL_HEADER_LEN,
            found: got,
        });
    }
    let magic = [header[0], header[1], header[2], header[3]];
    if magic != GIPL_MAGIC {
        return Err(Error::BadMagic(magic));
    }
    if got < GIPL_HEADER_LEN {
        return Err(Error::Truncated {
            expected: GIPL_HEADER_LEN,
            found: got,
        });
    }
    if header[4] != GIPL_VERSION {
        return Err(Error::UnsupportedVersion(header[4]));
    }
    let dims = [0, 1, 2].map(|i| u32::from_le_bytes(header[8 + 4 * i..12 + 4 * i].try_into().expect("4-byte slice")));
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
        .and_then(|n| n.checked_mul(8).map(|_| n))
        .filter(|&n| n <= isize::MAX as usize / 8)
        .ok_or(Error::DimOverflow(dims))?;
    let mut payload = Vec::new();
    let got = input.take((count * 8) as u64).read_to_end(&mut payload)?;
    if got < count * 8 {
        return Err(Error::Truncated {
            expected: GIPL_HEADER_LEN + count * 8,
            found: GIPL_HEADER_LEN + got,
        });
    }
    let data = payload
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
        .collect();
    FeatureMap::from_vec(dims[0] as usize, dims[1] as usize, dims[2] as usize, data)
}

fn read_full<R: Read>(input: &mut R, buf: &mut [u8]) -> Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match input.read(&mut buf[filled..])? {
            0 => break,
            n => filled += n,
        }
    }
    Ok(filled)
}

pub fn write_tensor(map: &FeatureMap, path: impl AsRef<Path>) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut out = BufWriter::new(file);
    write_tensor_to(map, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<FeatureMap> {
    let bytes = fs::read(path)?;
    let mut cursor = bytes.as_slice();
    let map = read_tensor_from(&mut cursor)?;
    if !cursor.is_empty() {
        return Err(Error::TrailingData(cursor.len()));
    }
    Ok(map)
}

pub fn write_tensor_set(entries: &[(String, FeatureMap)], path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    writeln!(out, "{SET_TAG} {}", entries.len())?;
    for (name, _) in entries {
        if name.is_empty() || name.contains(['\n', '\r']) {
            return Err(Error::InvalidArgument(format!("bad tensor name {name:?}")));
        }
        writeln!(out, "{name}")?;
    }
    for (_, map) in entries {
        write_tensor_to(map, &mut out)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_tensor_set(path: impl AsRef<Path>) -> Result<Vec<(String, FeatureMap)>> {
    let path = path.as_ref();
    let malformed = |reason: String| Error::Malformed {
        path: path.display().to_string(),
        reason,
    };
    let mut input = BufReader::new(fs::File::open(path)?);
    let mut line = String::new();
    input.read_line(&mut line)?;
    let count: usize = line
        .trim_end()
        .strip_prefix(SET_TAG)
        .and_then(|rest| rest.trim().parse().ok())
        .ok_or_else(|| malformed(format!("bad header line {:?}", line.trim_end())))?;
    let mut names = Vec::with_capacity(count);
    for _ in 0..count {
        line.clear();
        if input.read_line(&mut line)? == 0 {
            return Err(malformed("manifest ends early".into()));
        }
        names.push(line.trim_end_matches(['\n', '\r']).to_string());
    }
    let mut entries = Vec::with_capacity(count);
    for name in names {
        let map = read_tensor_from(&mut input)?;
        entries.push((name, map));
    }
    let mut rest = Vec::new();
    input.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::TrailingData(rest.len()));
    }
    Ok(entries)
}

/// Lossy text export for inspection: one line per grid row, channels separated
/// by a blank line, 17 significant digits.
pub fn write_csv(map: &FeatureMap, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for c in 0..map.channels() {
        if c > 0 {
            writeln!(out)?;
        }
        for row in map.channel(c).chunks(map.width()) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
            writeln!(out, "{}", line.join(","))?;
        }
    }
    out.flush()?;
    Ok(())
}
