//! PFM image format: "PF" (3-channel) / "Pf" (1-channel), little-endian
//! payload signalled by a negative scale, rows stored bottom-up.

use crate::error::{Error, Result};
use crate::image::{Image, Image1, Image3};
use byteorder::{ByteOrder, LittleEndian};
use std::io::{Read, Write};
use std::path::Path;

fn write_pfm<const C: usize>(path: &Path, img: &Image<f32, C>) -> Result<()> {
    let magic = match C {
        1 => "Pf",
        3 => "PF",
        _ => return Err(Error::InvalidInput("pfm: 1 or 3 channels only".into())),
    };
    let mut buf = Vec::with_capacity(img.data.len() * 4 + 64);
    buf.extend_from_slice(format!("{magic}\n{} {}\n-1.0\n", img.width, img.height).as_bytes());
    // Bottom-up row order per the format convention.
    for y in (0..img.height).rev() {
        let row = &img.data[y * img.width * C..(y + 1) * img.width * C];
        let mut bytes = vec![0u8; row.len() * 4];
        LittleEndian::write_f32_into(row, &mut bytes);
        buf.extend_from_slice(&bytes);
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn write_pfm1(path: &Path, img: &Image1<f32>) -> Result<()> {
    write_pfm(path, img)
}

pub fn write_pfm3(path: &Path, img: &Image3<f32>) -> Result<()> {
    write_pfm(path, img)
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn corrupt(&self, detail: impl Into<String>) -> Error {
        Error::Corrupt {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            detail: detail.into(),
        }
    }

    fn token(&mut self) -> Result<String> {
        while self.pos < self.data.len() && self.data[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        let start = self.pos;
        while self.pos < self.data.len() && !self.data[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.corrupt("unexpected end of header"));
        }
        String::from_utf8(self.data[start..self.pos].to_vec())
            .map_err(|_| self.corrupt("non-utf8 header token"))
    }
}

fn read_pfm<const C: usize>(path: &Path) -> Result<Image<f32, C>> {
    let mut data = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut data))
        .map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor {
        data: &data,
        pos: 0,
        path,
    };
    let magic = cur.token()?;
    let channels = match magic.as_str() {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(cur.corrupt(format!("bad magic {other:?}"))),
    };
    if channels != C {
        return Err(cur.corrupt(format!("expected {C} channels, file has {channels}")));
    }
    let width: usize = cur
        .token()?
        .parse()
        .map_err(|_| cur.corrupt("bad width"))?;
    let height: usize = cur
        .token()?
        .parse()
        .map_err(|_| cur.corrupt("bad height"))?;
    let scale: f32 = cur
        .token()?
        .parse()
        .map_err(|_| cur.corrupt("bad scale"))?;
    if scale >= 0.0 {
        return Err(cur.corrupt("big-endian PFM not supported (scale must be negative)"));
    }
    // Exactly one whitespace byte separates the header from the payload.
    cur.pos += 1;
    let expected = width * height * C * 4;
    if data.len() < cur.pos + expected {
        return Err(Error::Corrupt {
            path: path.to_path_buf(),
            offset: data.len() as u64,
            detail: format!(
                "truncated payload: need {} bytes from offset {}, file has {}",
                expected,
                cur.pos,
                data.len()
            ),
        });
    }
    let mut img = Image::<f32, C>::zeros(width, height);
    for y in 0..height {
        let src_row = height - 1 - y;
        let start = cur.pos + src_row * width * C * 4;
        LittleEndian::read_f32_into(
            &data[start..start + width * C * 4],
            &mut img.data[y * width * C..(y + 1) * width * C],
        );
    }
    Ok(img)
}

pub fn read_pfm1(path: &Path) -> Result<Image1<f32>> {
    read_pfm(path)
}

pub fn read_pfm3(path: &Path) -> Result<Image3<f32>> {
    read_pfm(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Image3::from_fn(7, 5, |_, _| [rng.gen(), rng.gen(), rng.gen()]);
        let path = dir.path().join("x.pfm");
        write_pfm3(&path, &img).unwrap();
        let back = read_pfm3(&path).unwrap();
        assert_eq!(img.data, back.data);

        let gray = Image1::from_fn(4, 6, |_, _| [rng.gen::<f32>()]);
        let path = dir.path().join("g.pfm");
        write_pfm1(&path, &gray).unwrap();
        assert_eq!(read_pfm1(&path).unwrap().data, gray.data);
    }

    #[test]
    fn truncated_file_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image1::from_fn(4, 4, |x, y| [(x + y) as f32]);
        let path = dir.path().join("t.pfm");
        write_pfm1(&path, &img).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        match read_pfm1(&path) {
            Err(Error::Corrupt { offset, .. }) => {
                assert_eq!(offset, (bytes.len() - 7) as u64);
            }
            other => panic!("expected Corrupt, got {other:?}"),
        }
    }

    #[test]
    fn channel_mismatch_is_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image1::from_fn(2, 2, |_, _| [1.0]);
        let path = dir.path().join("c.pfm");
        write_pfm1(&path, &img).unwrap();
        assert!(read_pfm3(&path).is_err());
    }
}
