use std::path::Path;

use super::{read_file, write_file};
use crate::error::{Error, Result};
use crate::geometry::DepthMap;
use crate::numerics::Tensor;

/// Cursor over a netpbm-style header: whitespace-separated ASCII tokens,
/// `#` comments, then a single whitespace byte before the raster.
struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> HeaderReader<'a> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn token(&mut self, what: &str) -> Result<&'a str> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::format_at_byte(self.path, start, format!("missing {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| Error::format_at_byte(self.path, start, format!("non-ASCII {what}")))
    }

    fn number<T: std::str::FromStr>(&mut self, what: &str) -> Result<T> {
        let start = self.pos;
        let tok = self.token(what)?;
        tok.parse()
            .map_err(|_| Error::format_at_byte(self.path, start, format!("bad {what} `{tok}`")))
    }

    /// Consumes the single whitespace byte that ends the header.
    fn end_header(&mut self) -> Result<usize> {
        match self.bytes.get(self.pos) {
            Some(c) if c.is_ascii_whitespace() => Ok(self.pos + 1),
            _ => Err(Error::format_at_byte(self.path, self.pos, "header not terminated by whitespace")),
        }
    }
}

/// Reads an 8-bit binary PGM (`P5`) as `[1, h, w]` with values in `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    let mut hr = HeaderReader { bytes: &bytes, pos: 0, path };
    if hr.token("magic")? != "P5" {
        return Err(Error::format_at_byte(path, 0, "bad magic, expected P5"));
    }
    let w: usize = hr.number("width")?;
    let h: usize = hr.number("height")?;
    let max_off = hr.pos;
    let maxval: u32 = hr.number("maxval")?;
    if maxval != 255 {
        return Err(Error::Unsupported(format!(
            "{}: PGM maxval {maxval} at byte {max_off}, only 8-bit (255) is supported",
            path.display()
        )));
    }
    let start = hr.end_header()?;
    let need = w * h;
    if bytes.len() < start + need {
        return Err(Error::format_at_byte(
            path,
            bytes.len(),
            format!("truncated raster: expected {need} bytes after offset {start}"),
        ));
    }
    let data = bytes[start..start + need].iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new([1, h, w], data)
}

/// Writes `[1, h, w]` (or `[h, w]`) values in `[0, 1]` as an 8-bit PGM.
pub fn save_image(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    let (h, w) = match image.shape() {
        [1, h, w] | [h, w] => (*h, *w),
        s => return Err(Error::dim(format!("save_image expects [1,h,w], got {s:?}"))),
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    write_file(path.as_ref(), &out)
}

/// Reads a grayscale PFM (`Pf`). Rows are stored bottom-up on disk and
/// returned top-down.
pub fn load_depth(path: impl AsRef<Path>) -> Result<DepthMap> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    let mut hr = HeaderReader { bytes: &bytes, pos: 0, path };
    match hr.token("magic")? {
        "Pf" => {}
        "PF" => return Err(Error::Unsupported(format!("{}: color PFM (PF) is not a depth map", path.display()))),
        _ => return Err(Error::format_at_byte(path, 0, "bad magic, expected Pf")),
    }
    let w: usize = hr.number("width")?;
    let h: usize = hr.number("height")?;
    let scale_off = hr.pos;
    let scale: f64 = hr.number("scale")?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::format_at_byte(path, scale_off, "scale must be nonzero"));
    }
    let little = scale < 0.0;
    let start = hr.end_header()?;
    let need = w * h * 4;
    if bytes.len() < start + need {
        return Err(Error::format_at_byte(
            path,
            bytes.len(),
            format!("truncated raster: expected {need} bytes after offset {start}"),
        ));
    }
    let mut values = vec![0.0; w * h];
    for (k, chunk) in bytes[start..start + need].chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        let (file_row, col) = (k / w, k % w);
        values[(h - 1 - file_row) * w + col] = v as f64;
    }
    DepthMap::new(w, h, values)
}

/// Writes a little-endian grayscale PFM (values stored as `f32`).
pub fn save_depth(path: impl AsRef<Path>, depth: &DepthMap) -> Result<()> {
    let (w, h) = (depth.width(), depth.height());
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(w * h * 4);
    for row in (0..h).rev() {
        for col in 0..w {
            out.extend_from_slice(&(depth.at(col, row) as f32).to_le_bytes());
        }
    }
    write_file(path.as_ref(), &out)
}
