//! On-disk formats.
//!
//! * mask files: `mask m n rate` followed by `m` lines of `n` characters `0`/`1`
//! * probability files: `prob m n` followed by `m` lines of `n` floats
//! * grid files: little-endian binary, a 4-byte magic, `m` and `n` as `u32`,
//!   then row-major `f64` values (two planes for complex grids)
//! * previews: binary PGM (`P5`), 8-bit grayscale

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::grid::{ComplexGrid, ProbabilityMatrix, RealImage, SamplingMask};

pub const REAL_MAGIC: &[u8; 4] = b"KGR1";
pub const COMPLEX_MAGIC: &[u8; 4] = b"KGC1";

pub fn write_mask_to(mask: &SamplingMask, w: &mut impl Write) -> Result<()> {
    let (m, n) = mask.dim();
    writeln!(w, "mask {m} {n} {:.6}", mask.rate())?;
    let mut line = String::with_capacity(n);
    for row in mask.bits().rows() {
        line.clear();
        line.extend(row.iter().map(|&b| if b == 1 { '1' } else { '0' }));
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn write_mask(mask: &SamplingMask, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_mask_to(mask, &mut w)?;
    w.flush()?;
    Ok(())
}

fn parse_dims(path: &Path, tokens: &[&str], tag: &str) -> Result<(usize, usize)> {
    if tokens.first() != Some(&tag) || tokens.len() < 3 {
        return Err(Error::format(path, format!("expected `{tag} m n` header")));
    }
    let m: usize = tokens[1]
        .parse()
        .map_err(|_| Error::format(path, "bad row count"))?;
    let n: usize = tokens[2]
        .parse()
        .map_err(|_| Error::format(path, "bad column count"))?;
    if m == 0 || n == 0 {
        return Err(Error::format(path, "dimensions must be positive"));
    }
    Ok((m, n))
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<SamplingMask> {
    let path = path.as_ref();
    let mut lines = BufReader::new(File::open(path)?).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::format(path, "empty file"))??;
    let tokens: Vec<&str> = header.split_whitespace().collect();
    let (m, n) = parse_dims(path, &tokens, "mask")?;
    if tokens.len() != 4 {
        return Err(Error::format(path, "expected `mask m n rate` header"));
    }
    let mut bits = Array2::<u8>::zeros((m, n));
    for i in 0..m {
        let line = lines
            .next()
            .ok_or_else(|| Error::format(path, format!("missing row {i}")))??;
        let line = line.trim_end();
        if line.len() != n {
            return Err(Error::format(path, format!("row {i} has {} entries, expected {n}", line.len())));
        }
        for (j, ch) in line.bytes().enumerate() {
            bits[[i, j]] = match ch {
                b'0' => 0,
                b'1' => 1,
                _ => return Err(Error::format(path, format!("row {i}: invalid character"))),
            };
        }
    }
    SamplingMask::new(bits)
}

pub fn write_probabilities(p: &ProbabilityMatrix, path: impl AsRef<Path>) -> Result<()> {
    let (m, n) = p.dim();
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "prob {m} {n}")?;
    for row in p.probs().rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_probabilities(path: impl AsRef<Path>) -> Result<ProbabilityMatrix> {
    let path = path.as_ref();
    let mut lines = BufReader::new(File::open(path)?).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::format(path, "empty file"))??;
    let tokens: Vec<&str> = header.split_whitespace().collect();
    let (m, n) = parse_dims(path, &tokens, "prob")?;
    let mut probs = Array2::<f64>::zeros((m, n));
    for i in 0..m {
        let line = lines
            .next()
            .ok_or_else(|| Error::format(path, format!("missing row {i}")))??;
        let values: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::format(path, format!("row {i}: bad float")))?;
        if values.len() != n {
            return Err(Error::format(path, format!("row {i} has {} entries, expected {n}", values.len())));
        }
        for (j, v) in values.into_iter().enumerate() {
            probs[[i, j]] = v;
        }
    }
    ProbabilityMatrix::new(probs)
}

fn write_planes(w: &mut impl Write, magic: &[u8; 4], planes: &[&Array2<f64>]) -> Result<()> {
    let (m, n) = planes[0].dim();
    let dim = |v: usize| -> Result<u32> {
        u32::try_from(v).map_err(|_| Error::param("grid dimension exceeds u32"))
    };
    w.write_all(magic)?;
    w.write_all(&dim(m)?.to_le_bytes())?;
    w.write_all(&dim(n)?.to_le_bytes())?;
    for plane in planes {
        for v in plane.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_planes(path: &Path, expect: &[u8; 4], count: usize) -> Result<Vec<Array2<f64>>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != expect {
        return Err(Error::format(path, "unexpected magic tag"));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let m = u32::from_le_bytes(word) as usize;
    r.read_exact(&mut word)?;
    let n = u32::from_le_bytes(word) as usize;
    if m == 0 || n == 0 {
        return Err(Error::format(path, "dimensions must be positive"));
    }
    let mut planes = Vec::with_capacity(count);
    let mut buf = [0u8; 8];
    for _ in 0..count {
        let mut plane = Array2::<f64>::zeros((m, n));
        for v in plane.iter_mut() {
            r.read_exact(&mut buf)
                .map_err(|_| Error::format(path, "truncated payload"))?;
            *v = f64::from_le_bytes(buf);
        }
        planes.push(plane);
    }
    if r.read(&mut buf)? != 0 {
        return Err(Error::format(path, "trailing bytes after payload"));
    }
    Ok(planes)
}

pub fn write_real_grid(img: &RealImage, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_planes(&mut w, REAL_MAGIC, &[img.pixels()])?;
    w.flush()?;
    Ok(())
}

pub fn read_real_grid(path: impl AsRef<Path>) -> Result<RealImage> {
    let mut planes = read_planes(path.as_ref(), REAL_MAGIC, 1)?;
    RealImage::new(planes.remove(0))
}

pub fn write_complex_grid(grid: &ComplexGrid, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_planes(&mut w, COMPLEX_MAGIC, &[grid.re(), grid.im()])?;
    w.flush()?;
    Ok(())
}

pub fn read_complex_grid(path: impl AsRef<Path>) -> Result<ComplexGrid> {
    let mut planes = read_planes(path.as_ref(), COMPLEX_MAGIC, 2)?;
    let im = planes.pop().unwrap();
    let re = planes.pop().unwrap();
    ComplexGrid::new(re, im)
}

/// Peeks at the magic tag to tell real and complex grid files apart.
pub fn grid_kind(path: impl AsRef<Path>) -> Result<Option<&'static [u8; 4]>> {
    let mut magic = [0u8; 4];
    let mut f = File::open(path)?;
    if f.read(&mut magic)? < 4 {
        return Ok(None);
    }
    Ok(if &magic == REAL_MAGIC {
        Some(REAL_MAGIC)
    } else if &magic == COMPLEX_MAGIC {
        Some(COMPLEX_MAGIC)
    } else {
        None
    })
}

/// Writes an 8-bit PGM. Values are clamped to `[0, 1]` before quantization.
pub fn write_pgm(pixels: &Array2<f64>, path: impl AsRef<Path>) -> Result<()> {
    let (m, n) = pixels.dim();
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{n} {m}\n255\n")?;
    let bytes: Vec<u8> = pixels
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

pub fn write_mask_pgm(mask: &SamplingMask, path: impl AsRef<Path>) -> Result<()> {
    write_pgm(&mask.as_f64(), path)
}
