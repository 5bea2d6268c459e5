//! Binary PPM (P6, maxval 255) reader and writer.

use anyhow::{bail, ensure, Context, Result};
use ern_core::pixembed::Image;

fn token<'a>(buf: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < buf.len() && buf[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < buf.len() && buf[*pos] == b'#' {
            while *pos < buf.len() && buf[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < buf.len() && !buf[*pos].is_ascii_whitespace() && buf[*pos] != b'#' {
        *pos += 1;
    }
    ensure!(start < *pos, "unexpected end of PPM header");
    Ok(&buf[start..*pos])
}

fn number(buf: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let t = token(buf, pos)?;
    std::str::from_utf8(t)
        .ok()
        .and_then(|s| s.parse().ok())
        .with_context(|| format!("bad PPM {what} `{}`", String::from_utf8_lossy(t)))
}

pub fn parse(buf: &[u8]) -> Result<Image> {
    let mut pos = 0;
    let magic = token(buf, &mut pos)?;
    if magic != b"P6" {
        bail!("not a binary PPM (expected P6, found `{}`)", String::from_utf8_lossy(magic));
    }
    let width = number(buf, &mut pos, "width")?;
    let height = number(buf, &mut pos, "height")?;
    let maxval = number(buf, &mut pos, "maxval")?;
    ensure!(width > 0 && height > 0, "PPM has zero size");
    ensure!(maxval == 255, "only maxval 255 is supported, found {maxval}");
    ensure!(pos < buf.len() && buf[pos].is_ascii_whitespace(), "PPM header is not followed by whitespace");
    pos += 1;
    let need = width * height * 3;
    let pixels = &buf[pos..];
    ensure!(pixels.len() >= need, "PPM pixel data truncated: {} of {need} bytes", pixels.len());
    Ok(Image::from_interleaved_rgb(height, width, &pixels[..need])?)
}
