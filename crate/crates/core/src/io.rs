//! File formats: binary/ASCII PGM images, the versioned model container
//! and the sparse code container.
//!
//! Model container, version 1, all integers and floats little-endian:
//!
//! ```text
//! magic   "DRTM"
//! u32     version (= 1)
//! u64     image height, u64 image width
//! u32     layer count L
//! per layer:
//!   u64 rows, u64 cols, u64 depth      patch geometry
//!   f64 eta
//!   u64 keep, u64 iters
//!   u64 m                              transform side (= rows * cols * depth)
//!   u64 r                              retained-map count (0 for the last layer)
//!   r x u64                            retained indices, ascending
//!   m*m x f64                          transform, row-major
//! ```
//!
//! Code container, version 1:
//!
//! ```text
//! magic "DRTC", u32 version, u64 height, u64 width, u32 L
//! per layer: u64 rows, u64 cols, u64 nnz, then nnz x (u64 flat row-major index, f64 value)
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;

use crate::error::{invalid, Error, Result};
use crate::model::{DeepRestModel, EncodedImage, LayerConfig, TransformLayer};
use crate::patch::{Image, PatchSpec};
use crate::scalar::Real;
use crate::transform::Unitary;

pub const MODEL_MAGIC: &[u8; 4] = b"DRTM";
pub const CODES_MAGIC: &[u8; 4] = b"DRTC";
pub const FORMAT_VERSION: u32 = 1;
/// Loaded transforms deviating more than this from unitary log a warning.
pub const UNITARY_WARN: f64 = 1e-8;
/// Loaded transforms deviating more than this are rejected.
pub const UNITARY_REJECT: f64 = 1e-4;

fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}

fn eof(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("unexpected end of file".into())
    } else {
        Error::Io(e)
    }
}

// ---------------------------------------------------------------------------
// PGM

fn next_token<R: BufRead>(r: &mut R) -> Result<String> {
    let mut tok = Vec::new();
    loop {
        let mut byte = [0u8; 1];
        if r.read(&mut byte)? == 0 {
            if tok.is_empty() {
                return format_err("truncated PGM header");
            }
            break;
        }
        let b = byte[0];
        if b == b'#' && tok.is_empty() {
            let mut line = Vec::new();
            r.read_until(b'\n', &mut line)?;
            continue;
        }
        if b.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            break;
        }
        tok.push(b);
    }
    String::from_utf8(tok).map_err(|_| Error::Format("non-ASCII PGM header".into()))
}

fn header_number<R: BufRead>(r: &mut R, what: &str) -> Result<usize> {
    let tok = next_token(r)?;
    tok.parse()
        .map_err(|_| Error::Format(format!("bad PGM {what}: {tok:?}")))
}

/// Decodes a PGM (`P2` ASCII or `P5` binary) into real intensities.
pub fn parse_pgm<F: Real>(bytes: &[u8]) -> Result<Image<F>> {
    let mut r = Cursor::new(bytes);
    let magic = next_token(&mut r)?;
    match magic.as_str() {
        "P2" | "P5" => {}
        "P3" | "P6" => return invalid("color PPM images are not supported; convert to grayscale"),
        "P1" | "P4" => return invalid("bitmap PBM images are not supported"),
        other => return format_err(format!("not a PGM file (magic {other:?})")),
    }
    let width = header_number(&mut r, "width")?;
    let height = header_number(&mut r, "height")?;
    let maxval = header_number(&mut r, "maxval")?;
    if width == 0 || height == 0 {
        return format_err("PGM has zero size");
    }
    if maxval == 0 || maxval > 65535 {
        return format_err(format!("PGM maxval {maxval} out of range"));
    }
    let n = width * height;
    let mut values = Vec::with_capacity(n);
    if magic == "P2" {
        for _ in 0..n {
            let v = header_number(&mut r, "sample")?;
            if v > maxval {
                return format_err(format!("sample {v} exceeds maxval {maxval}"));
            }
            values.push(F::of_usize(v));
        }
    } else {
        let wide = maxval > 255;
        let mut raw = vec![0u8; if wide { 2 * n } else { n }];
        r.read_exact(&mut raw)
            .map_err(|_| Error::Format("truncated PGM raster".into()))?;
        if wide {
            values.extend(
                raw.chunks_exact(2)
                    .map(|c| F::of_usize(u16::from_be_bytes([c[0], c[1]]) as usize)),
            );
        } else {
            values.extend(raw.iter().map(|&b| F::of_usize(b as usize)));
        }
    }
    Image::from_vec(height, width, values)
}

/// Loads a grayscale image. PGM is always supported; 8-bit grayscale PNG
/// with the `png` feature.
pub fn load_image<F: Real>(path: impl AsRef<Path>) -> Result<Image<F>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(b"\x89PNG") {
        return load_png(&bytes);
    }
    parse_pgm(&bytes)
}

#[cfg(feature = "png")]
fn load_png<F: Real>(bytes: &[u8]) -> Result<Image<F>> {
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| Error::Format(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Format(e.to_string()))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return invalid("only 8-bit grayscale PNG images are supported");
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let values = buf[..info.buffer_size()]
        .chunks(info.line_size)
        .flat_map(|row| row[..w].iter().map(|&b| F::of_usize(b as usize)))
        .collect();
    Image::from_vec(h, w, values)
}

#[cfg(not(feature = "png"))]
fn load_png<F: Real>(_bytes: &[u8]) -> Result<Image<F>> {
    invalid("PNG input requires the `png` feature; convert the image to PGM")
}

/// Encodes `img` as 8-bit binary PGM, rounding to the nearest integer.
/// Without `clamp`, values outside `0..=255` are an error.
pub fn encode_pgm<F: Real>(img: &Image<F>, clamp: bool) -> Result<Vec<u8>> {
    let (h, w) = img.dims();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.reserve(h * w);
    for &v in img.data().iter() {
        let v = v.as_f64();
        if !v.is_finite() {
            return invalid("image contains non-finite values");
        }
        let mut q = v.round();
        if clamp {
            q = q.clamp(0.0, 255.0);
        } else if !(0.0..=255.0).contains(&q) {
            return invalid(format!("value {v} does not fit 8 bits; save with clamping"));
        }
        out.push(q as u8);
    }
    Ok(out)
}

pub fn save_image<F: Real>(img: &Image<F>, path: impl AsRef<Path>, clamp: bool) -> Result<()> {
    let bytes = encode_pgm(img, clamp)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Model container

pub fn write_model<F: Real, W: Write>(model: &DeepRestModel<F>, mut w: W) -> Result<()> {
    let (h, wd) = model.image_dims();
    w.write_all(MODEL_MAGIC)?;
    w.write_u32::<LE>(FORMAT_VERSION)?;
    w.write_u64::<LE>(h as u64)?;
    w.write_u64::<LE>(wd as u64)?;
    w.write_u32::<LE>(model.depth() as u32)?;
    for (layer, cfg) in model.layers().iter().zip(model.configs()) {
        w.write_u64::<LE>(cfg.patch.rows as u64)?;
        w.write_u64::<LE>(cfg.patch.cols as u64)?;
        w.write_u64::<LE>(cfg.patch.depth as u64)?;
        w.write_f64::<LE>(cfg.eta)?;
        w.write_u64::<LE>(cfg.keep as u64)?;
        w.write_u64::<LE>(cfg.iters as u64)?;
        w.write_u64::<LE>(layer.omega.side() as u64)?;
        let retained = layer.retained.as_deref().unwrap_or(&[]);
        w.write_u64::<LE>(retained.len() as u64)?;
        for &i in retained {
            w.write_u64::<LE>(i as u64)?;
        }
        for &v in layer.omega.matrix().iter() {
            w.write_f64::<LE>(v.as_f64())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_len<R: Read>(r: &mut R, what: &str, limit: u64) -> Result<usize> {
    let v = r.read_u64::<LE>().map_err(eof)?;
    if v > limit {
        return format_err(format!("{what} = {v} exceeds limit {limit}"));
    }
    Ok(v as usize)
}

const DIM_LIMIT: u64 = 1 << 20;

pub fn read_model<F: Real, R: Read>(mut r: R) -> Result<DeepRestModel<F>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(eof)?;
    if &magic != MODEL_MAGIC {
        return format_err("not a model file");
    }
    let version = r.read_u32::<LE>().map_err(eof)?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let h = read_len(&mut r, "height", DIM_LIMIT)?;
    let w = read_len(&mut r, "width", DIM_LIMIT)?;
    let count = r.read_u32::<LE>().map_err(eof)? as usize;
    if count == 0 || count > 1024 {
        return format_err(format!("implausible layer count {count}"));
    }
    let mut layers = Vec::with_capacity(count);
    let mut configs = Vec::with_capacity(count);
    for l in 0..count {
        let rows = read_len(&mut r, "patch rows", DIM_LIMIT)?;
        let cols = read_len(&mut r, "patch cols", DIM_LIMIT)?;
        let depth = read_len(&mut r, "patch depth", DIM_LIMIT)?;
        let eta = r.read_f64::<LE>().map_err(eof)?;
        let keep = read_len(&mut r, "keep", DIM_LIMIT)?;
        let iters = read_len(&mut r, "iters", u32::MAX as u64)?;
        let m = read_len(&mut r, "transform side", 1 << 14)?;
        let patch = PatchSpec::new(rows, cols, depth).map_err(|e| Error::Format(e.to_string()))?;
        if m != patch.len() {
            return format_err(format!(
                "layer {}: side {m} does not match patch {rows}x{cols}x{depth}",
                l + 1
            ));
        }
        let nret = read_len(&mut r, "retained count", m as u64)?;
        let mut retained = Vec::with_capacity(nret);
        for _ in 0..nret {
            retained.push(read_len(&mut r, "retained index", m as u64)?);
        }
        let mut values = vec![0f64; m * m];
        r.read_f64_into::<LE>(&mut values).map_err(eof)?;
        let matrix = Array2::from_shape_vec((m, m), values.into_iter().map(F::lit).collect()).expect("sized above");
        let omega = Unitary::from_matrix_unchecked(matrix)?;
        let dev = omega.unitarity_error();
        if dev > UNITARY_REJECT {
            return Err(Error::NotUnitary {
                layer: l + 1,
                deviation: dev,
            });
        }
        if dev > UNITARY_WARN {
            log::warn!("layer {} transform deviates from unitary by {dev:e}", l + 1);
        }
        configs.push(LayerConfig::new(patch, eta, keep, iters));
        layers.push(TransformLayer {
            omega,
            retained: (l + 1 < count || nret > 0).then_some(retained),
        });
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return format_err("trailing bytes after model");
    }
    DeepRestModel::new(layers, configs, (h, w)).map_err(|e| match e {
        Error::InvalidArgument(msg) => Error::Format(msg),
        other => other,
    })
}

pub fn model_to_bytes<F: Real>(model: &DeepRestModel<F>) -> Vec<u8> {
    let mut buf = Vec::new();
    write_model(model, &mut buf).expect("writing to memory cannot fail");
    buf
}

pub fn model_from_bytes<F: Real>(bytes: &[u8]) -> Result<DeepRestModel<F>> {
    read_model(Cursor::new(bytes))
}

pub fn save_model<F: Real>(model: &DeepRestModel<F>, path: impl AsRef<Path>) -> Result<()> {
    write_model(model, BufWriter::new(File::create(path)?))
}

pub fn load_model<F: Real>(path: impl AsRef<Path>) -> Result<DeepRestModel<F>> {
    read_model(BufReader::new(File::open(path)?))
}

// ---------------------------------------------------------------------------
// Code container

pub fn write_codes<F: Real, W: Write>(enc: &EncodedImage<F>, mut w: W) -> Result<()> {
    w.write_all(CODES_MAGIC)?;
    w.write_u32::<LE>(FORMAT_VERSION)?;
    w.write_u64::<LE>(enc.height as u64)?;
    w.write_u64::<LE>(enc.width as u64)?;
    w.write_u32::<LE>(enc.coeffs.len() as u32)?;
    for z in &enc.coeffs {
        let (rows, cols) = z.dim();
        w.write_u64::<LE>(rows as u64)?;
        w.write_u64::<LE>(cols as u64)?;
        let nnz = z.iter().filter(|&&v| v != F::zero()).count();
        w.write_u64::<LE>(nnz as u64)?;
        for (k, &v) in z.iter().enumerate() {
            if v != F::zero() {
                w.write_u64::<LE>(k as u64)?;
                w.write_f64::<LE>(v.as_f64())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_codes<F: Real, R: Read>(mut r: R) -> Result<EncodedImage<F>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(eof)?;
    if &magic != CODES_MAGIC {
        return format_err("not a code file");
    }
    let version = r.read_u32::<LE>().map_err(eof)?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let height = read_len(&mut r, "height", DIM_LIMIT)?;
    let width = read_len(&mut r, "width", DIM_LIMIT)?;
    let count = r.read_u32::<LE>().map_err(eof)? as usize;
    if count == 0 || count > 1024 {
        return format_err(format!("implausible layer count {count}"));
    }
    let mut coeffs = Vec::with_capacity(count);
    for _ in 0..count {
        let rows = read_len(&mut r, "rows", 1 << 14)?;
        let cols = read_len(&mut r, "cols", 1 << 40)?;
        if cols != height * width {
            return format_err(format!("code layer has {cols} columns, image has {}", height * width));
        }
        let total = rows * cols;
        let nnz = read_len(&mut r, "nnz", total as u64)?;
        let mut z = Array2::<F>::zeros((rows, cols));
        let flat = z.as_slice_mut().expect("standard layout");
        let mut prev: Option<usize> = None;
        for _ in 0..nnz {
            let k = read_len(&mut r, "index", total.saturating_sub(1) as u64)?;
            if prev.is_some_and(|p| k <= p) {
                return format_err("code indices must be strictly increasing");
            }
            prev = Some(k);
            flat[k] = F::lit(r.read_f64::<LE>().map_err(eof)?);
        }
        coeffs.push(z);
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return format_err("trailing bytes after codes");
    }
    Ok(EncodedImage { coeffs, height, width })
}

pub fn save_codes<F: Real>(enc: &EncodedImage<F>, path: impl AsRef<Path>) -> Result<()> {
    write_codes(enc, BufWriter::new(File::create(path)?))
}

pub fn load_codes<F: Real>(path: impl AsRef<Path>) -> Result<EncodedImage<F>> {
    read_codes(BufReader::new(File::open(path)?))
}
