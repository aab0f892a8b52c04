use std::fmt::Write as _;
use std::path::Path;

use super::{read_file, write_file};
use crate::error::{Error, Result};
use crate::geometry::{Camera, CameraExtrinsics, CameraIntrinsics};

fn parse_row<const N: usize>(path: &Path, line_no: usize, line: &str) -> Result<[f64; N]> {
    let vals: Vec<&str> = line.split_whitespace().collect();
    if vals.len() != N {
        return Err(Error::format_at_line(path, line_no, format!("expected {N} numbers, found {}", vals.len())));
    }
    let mut out = [0.0; N];
    for (o, tok) in out.iter_mut().zip(vals) {
        *o = tok
            .parse()
            .map_err(|_| Error::format_at_line(path, line_no, format!("bad number `{tok}`")))?;
    }
    Ok(out)
}

/// Reads a BlendedMVS-style camera file.
///
/// ```text
/// extrinsic
/// <4 rows of 4: world→camera>
///
/// intrinsic
/// <3 rows of 3>
/// ```
///
/// Anything after the intrinsic block (BlendedMVS appends a depth range)
/// is ignored.
pub fn load_camera(path: impl AsRef<Path>) -> Result<Camera> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|_| Error::format_at_line(path, 1, "not UTF-8 text"))?;
    let lines: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
        .collect();
    let eof = text.lines().count() + 1;
    let mut cursor = lines.iter().copied();
    let mut next_line = || cursor.next().ok_or_else(|| Error::format_at_line(path, eof, "unexpected end of file"));
    let expect_keyword = |kw: &str, got: (usize, &str)| {
        if got.1 == kw {
            Ok(())
        } else {
            Err(Error::format_at_line(path, got.0, format!("expected `{kw}`, found `{}`", got.1)))
        }
    };

    expect_keyword("extrinsic", next_line()?)?;
    let mut ext = [[0.0; 4]; 4];
    let mut last_line = 0;
    for row in &mut ext {
        let (n, l) = next_line()?;
        *row = parse_row::<4>(path, n, l)?;
        last_line = n;
    }
    if ext[3] != [0.0, 0.0, 0.0, 1.0] {
        return Err(Error::format_at_line(path, last_line, "last extrinsic row must be `0 0 0 1`"));
    }
    expect_keyword("intrinsic", next_line()?)?;
    let mut k = [[0.0; 3]; 3];
    for row in &mut k {
        let (n, l) = next_line()?;
        *row = parse_row::<3>(path, n, l)?;
    }
    if k[0][1] != 0.0 {
        return Err(Error::Unsupported(format!("{}: skewed intrinsics (K[0][1] = {})", path.display(), k[0][1])));
    }
    if k[1][0] != 0.0 || k[2] != [0.0, 0.0, 1.0] {
        return Err(Error::Unsupported(format!("{}: intrinsics are not an upper-triangular pinhole matrix", path.display())));
    }
    let r = [
        [ext[0][0], ext[0][1], ext[0][2]],
        [ext[1][0], ext[1][1], ext[1][2]],
        [ext[2][0], ext[2][1], ext[2][2]],
    ];
    let t = [ext[0][3], ext[1][3], ext[2][3]];
    let extrinsics = CameraExtrinsics::with_tolerance(r, t, 1e-3)
        .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    let intrinsics = CameraIntrinsics::new(k[0][0], k[1][1], k[0][2], k[1][2])
        .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    Ok(Camera { intrinsics, extrinsics })
}

/// Writes a camera in the format read by [`load_camera`]. Numbers use the
/// shortest representation that parses back to the same `f64`.
pub fn save_camera(path: impl AsRef<Path>, cam: &Camera) -> Result<()> {
    let (r, t) = (&cam.extrinsics.r, &cam.extrinsics.t);
    let k = &cam.intrinsics;
    let mut s = String::from("extrinsic\n");
    for i in 0..3 {
        writeln!(s, "{:?} {:?} {:?} {:?}", r[i][0], r[i][1], r[i][2], t[i]).unwrap();
    }
    s.push_str("0 0 0 1\n\nintrinsic\n");
    writeln!(s, "{:?} 0 {:?}", k.fx, k.cx).unwrap();
    writeln!(s, "0 {:?} {:?}", k.fy, k.cy).unwrap();
    s.push_str("0 0 1\n");
    write_file(path.as_ref(), s.as_bytes())
}
