//! Portable Float Map (colour, `PF`) reading and writing.
//!
//! The scale line carries endianness: negative means little-endian. Scanlines
//! are stored bottom row first.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::color::LinearImage;
use crate::error::{Error, Result};

pub fn read_pfm(path: impl AsRef<Path>) -> Result<LinearImage> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    decode_pfm(BufReader::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn write_pfm(path: impl AsRef<Path>, img: &LinearImage) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(img.data().len() * 4 + 32);
    encode_pfm(&mut buf, img).map_err(|e| Error::io(path, e))?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Writes a little-endian PFM.
pub fn encode_pfm(mut w: impl Write, img: &LinearImage) -> std::io::Result<()> {
    write!(w, "PF\n{} {}\n-1.0\n", img.width(), img.height())?;
    let row_len = img.width() * 3;
    for row in img.data().chunks_exact(row_len).rev() {
        for v in row {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn decode_pfm(mut r: impl BufRead) -> Result<LinearImage> {
    let io = |e| Error::io("<pfm stream>", e);

    let magic = next_token(&mut r).map_err(io)?;
    match magic.as_str() {
        "PF" => {}
        "Pf" => return Err(Error::format("pfm", "single-channel PFM is not supported")),
        other => return Err(Error::format("pfm", format!("bad magic {other:?}"))),
    }
    let width = parse_dim(&next_token(&mut r).map_err(io)?, "width")?;
    let height = parse_dim(&next_token(&mut r).map_err(io)?, "height")?;
    let scale_tok = next_token(&mut r).map_err(io)?;
    let scale: f32 = scale_tok
        .parse()
        .map_err(|_| Error::format("pfm", format!("bad scale {scale_tok:?}")))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::format("pfm", "scale must be finite and non-zero"));
    }
    let little_endian = scale < 0.0;

    let row_len = width * 3;
    let mut raw = vec![0u8; row_len * height * 4];
    r.read_exact(&mut raw).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::format("pfm", "truncated pixel data")
        } else {
            io(e)
        }
    })?;

    let mut data = vec![0f32; row_len * height];
    for (src_row, bytes) in raw.chunks_exact(row_len * 4).enumerate() {
        let dst_row = height - 1 - src_row;
        let dst = &mut data[dst_row * row_len..(dst_row + 1) * row_len];
        for (d, b) in dst.iter_mut().zip(bytes.chunks_exact(4)) {
            let b = [b[0], b[1], b[2], b[3]];
            *d = if little_endian {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            };
        }
    }
    LinearImage::new(height, width, data)
}

fn parse_dim(tok: &str, what: &str) -> Result<usize> {
    match tok.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(Error::format("pfm", format!("bad {what} {tok:?}"))),
    }
}

// Reads one whitespace-delimited header token and consumes exactly one
// trailing whitespace byte, so binary data starting right after the scale
// line is left untouched.
fn next_token(r: &mut impl BufRead) -> std::io::Result<String> {
    let mut tok = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            break;
        }
        if byte[0].is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            break;
        }
        tok.push(byte[0]);
        if tok.len() > 64 {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                "header token too long",
            ));
        }
    }
    Ok(String::from_utf8_lossy(&tok).into_owned())
}
