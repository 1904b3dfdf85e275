//! PGM input, PFM disparity files and learned-logit weight files.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::grid::{DisparityMap, Image};
use crate::lga::{LgaField, LgaLogits};
use crate::sga::{SgaField, SgaLogits, SLOTS};
use crate::trainer::GaModel;

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes `bytes` to `path`, removing whatever was written if the write
/// fails part-way.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| {
        let _ = fs::remove_file(path);
        Error::io(path, e)
    })
}

/// Cursor over a netpbm-style header: whitespace separated tokens with `#`
/// comments running to the end of the line.
struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Header<'a> {
    fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Header {
            bytes,
            pos: 0,
            path,
        }
    }

    fn err(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Parse {
            path: PathBuf::from(self.path),
            offset,
            message: message.into(),
        }
    }

    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn token(&mut self, what: &str) -> Result<(usize, &'a str)> {
        self.skip_space();
        let start = self.pos;
        while self
            .bytes
            .get(self.pos)
            .is_some_and(|b| !b.is_ascii_whitespace() && *b != b'#')
        {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(start, format!("missing {what}")));
        }
        let s = std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| self.err(start, format!("{what} is not ASCII")))?;
        Ok((start, s))
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        let (at, tok) = self.token(what)?;
        tok.parse()
            .map_err(|_| self.err(at, format!("{what} '{tok}' is not a non-negative integer")))
    }

    /// Consumes the single whitespace byte separating the header from a
    /// binary raster.
    fn end_of_header(&mut self) -> Result<usize> {
        match self.bytes.get(self.pos) {
            Some(b) if b.is_ascii_whitespace() => Ok(self.pos + 1),
            Some(_) => Err(self.err(self.pos, "expected whitespace after header")),
            None => Err(self.err(self.pos, "file ends inside the header")),
        }
    }
}

/// Grayscale PGM, binary `P5` or ASCII `P2`, scaled to `[0, 1]`.
pub fn read_pgm(path: &Path) -> Result<Image> {
    parse_pgm(&read_bytes(path)?, path)
}

pub fn parse_pgm(bytes: &[u8], path: &Path) -> Result<Image> {
    let mut hd = Header::new(bytes, path);
    let (_, magic) = hd.token("magic number")?;
    let binary = match magic {
        "P5" => true,
        "P2" => false,
        other => return Err(hd.err(0, format!("unsupported magic '{other}', expected P5 or P2"))),
    };
    let width = hd.number("width")?;
    let height = hd.number("height")?;
    let maxval_at = hd.pos;
    let maxval = hd.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(hd.err(0, format!("empty image {width}x{height}")));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(hd.err(maxval_at, format!("maxval {maxval} outside 1..=65535")));
    }
    let n = width
        .checked_mul(height)
        .ok_or_else(|| hd.err(0, "image size overflows"))?;
    let max = maxval as f64;
    let mut data = Vec::with_capacity(n);
    if binary {
        let start = hd.end_of_header()?;
        let bpp = if maxval < 256 { 1 } else { 2 };
        let need = n * bpp;
        let raster = &bytes[start..];
        if raster.len() < need {
            return Err(hd.err(
                bytes.len(),
                format!("truncated raster: {} of {need} bytes", raster.len()),
            ));
        }
        for i in 0..n {
            let off = start + i * bpp;
            let v = if bpp == 1 {
                bytes[off] as usize
            } else {
                u16::from_be_bytes([bytes[off], bytes[off + 1]]) as usize
            };
            if v > maxval {
                return Err(hd.err(off, format!("sample {v} exceeds maxval {maxval}")));
            }
            data.push(v as f64 / max);
        }
    } else {
        for i in 0..n {
            hd.skip_space();
            if hd.pos >= bytes.len() {
                return Err(hd.err(bytes.len(), format!("truncated raster: {i} of {n} samples")));
            }
            let at = hd.pos;
            let v = hd.number("sample")?;
            if v > maxval {
                return Err(hd.err(at, format!("sample {v} exceeds maxval {maxval}")));
            }
            data.push(v as f64 / max);
        }
    }
    Image::gray(height, width, data)
}

/// Binary 8-bit PGM. Intensities are clamped to `[0, 1]` and rounded.
pub fn encode_pgm(img: &Image) -> Result<Vec<u8>> {
    if !img.is_gray() {
        return Err(Error::Write("PGM holds grayscale images only".into()));
    }
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(
        img.data()
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    Ok(out)
}

pub fn write_pgm(img: &Image, path: &Path) -> Result<()> {
    write_file(path, &encode_pgm(img)?)
}

/// Grayscale little-endian PFM, rows bottom to top. Masked pixels are stored
/// as `+inf`.
pub fn encode_pfm(map: &DisparityMap) -> Result<Vec<u8>> {
    let (h, w) = (map.height(), map.width());
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(h * w * 4);
    for y in (0..h).rev() {
        for x in 0..w {
            let i = y * w + x;
            let v = if map.mask()[i] {
                let v = map.values()[i];
                let f = v as f32;
                if !v.is_finite() || !f.is_finite() {
                    return Err(Error::Write(format!(
                        "disparity {v} at ({y}, {x}) is not representable"
                    )));
                }
                f
            } else {
                f32::INFINITY
            };
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_pfm(map: &DisparityMap, path: &Path) -> Result<()> {
    write_file(path, &encode_pfm(map)?)
}

pub fn read_pfm(path: &Path) -> Result<DisparityMap> {
    parse_pfm(&read_bytes(path)?, path)
}

pub fn parse_pfm(bytes: &[u8], path: &Path) -> Result<DisparityMap> {
    let mut hd = Header::new(bytes, path);
    let (_, magic) = hd.token("magic number")?;
    match magic {
        "Pf" => {}
        "PF" => return Err(hd.err(0, "colour PFM is not a disparity map")),
        other => return Err(hd.err(0, format!("unsupported magic '{other}', expected Pf"))),
    }
    let width = hd.number("width")?;
    let height = hd.number("height")?;
    let (scale_at, scale_tok) = hd.token("scale")?;
    let scale: f64 = scale_tok
        .parse()
        .map_err(|_| hd.err(scale_at, format!("scale '{scale_tok}' is not a number")))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(hd.err(scale_at, format!("invalid scale {scale_tok}")));
    }
    let little = scale < 0.0;
    let start = hd.end_of_header()?;
    let n = width
        .checked_mul(height)
        .ok_or_else(|| hd.err(0, "image size overflows"))?;
    let raster = &bytes[start..];
    if raster.len() < n * 4 {
        return Err(hd.err(
            bytes.len(),
            format!("truncated raster: {} of {} bytes", raster.len(), n * 4),
        ));
    }
    let mut values = vec![0.0; n];
    let mut mask = vec![true; n];
    for (k, chunk) in raster[..n * 4].chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        let (row, x) = (k / width, k % width);
        let i = (height - 1 - row) * width + x;
        if v == f32::INFINITY {
            mask[i] = false;
        } else if !v.is_finite() {
            return Err(hd.err(start + 4 * k, format!("non-finite sample {v}")));
        } else {
            values[i] = v as f64;
        }
    }
    DisparityMap::new(height, width, values, mask).map_err(|e| hd.err(0, e.to_string()))
}

const WEIGHT_MAGIC: &[u8; 4] = b"GAWT";
const WEIGHT_VERSION: u8 = 1;
const HEADER_LEN: usize = 16;

/// Flat binary logit file: a 16-byte header (magic, version, SGA layer
/// count, LGA kernel size or 0, feature channels, height and width as
/// little-endian `u32`) followed by little-endian `f64` logits, SGA layers
/// first, each in direction order.
pub fn encode_weights(model: &GaModel) -> Result<Vec<u8>> {
    let layers = u8::try_from(model.sga.len())
        .map_err(|_| Error::Write("too many SGA layers for the weight format".into()))?;
    let k = match &model.lga {
        Some(l) => u8::try_from(l.field().kernel_size())
            .map_err(|_| Error::Write("LGA kernel too large for the weight format".into()))?,
        None => 0,
    };
    let h = u32::try_from(model.height).map_err(|_| Error::Write("height exceeds u32".into()))?;
    let w = u32::try_from(model.width).map_err(|_| Error::Write("width exceeds u32".into()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * model.parameter_count());
    out.extend_from_slice(WEIGHT_MAGIC);
    out.extend_from_slice(&[WEIGHT_VERSION, layers, k, 1]);
    out.extend_from_slice(&h.to_le_bytes());
    out.extend_from_slice(&w.to_le_bytes());
    for layer in &model.sga {
        for v in layer.field().iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(l) = &model.lga {
        for v in l.field().data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_weights(model: &GaModel, path: &Path) -> Result<()> {
    write_file(path, &encode_weights(model)?)
}

pub fn read_weights(path: &Path) -> Result<GaModel> {
    parse_weights(&read_bytes(path)?, path)
}

pub fn parse_weights(bytes: &[u8], path: &Path) -> Result<GaModel> {
    let err = |offset: usize, message: String| Error::Parse {
        path: PathBuf::from(path),
        offset,
        message,
    };
    if bytes.len() < HEADER_LEN {
        return Err(err(
            bytes.len(),
            "file shorter than the 16-byte header".into(),
        ));
    }
    if &bytes[..4] != WEIGHT_MAGIC {
        return Err(err(0, "bad magic, not a weight file".into()));
    }
    if bytes[4] != WEIGHT_VERSION {
        return Err(err(4, format!("unsupported version {}", bytes[4])));
    }
    let (layers, k, f) = (bytes[5] as usize, bytes[6] as usize, bytes[7] as usize);
    if f != 1 {
        return Err(err(7, format!("expected 1 feature channel, found {f}")));
    }
    if layers > crate::trainer::MAX_SGA_LAYERS {
        return Err(err(5, format!("{layers} SGA layers exceeds the maximum")));
    }
    if k != 0 && k.is_multiple_of(2) {
        return Err(err(6, format!("LGA kernel size {k} is even")));
    }
    let h = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let w = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    if h == 0 || w == 0 {
        return Err(err(8, format!("empty size {h}x{w}")));
    }
    let per_dir = h * w * f * SLOTS;
    let lga_len = if k > 0 { h * w * f * 3 * k * k } else { 0 };
    let expected = layers * 4 * per_dir + lga_len;
    let body = &bytes[HEADER_LEN..];
    if body.len() != expected * 8 {
        return Err(err(
            HEADER_LEN,
            format!(
                "expected {} bytes of logits, found {}",
                expected * 8,
                body.len()
            ),
        ));
    }
    let mut vals = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut take = |n: usize| -> Vec<f64> { vals.by_ref().take(n).collect() };
    let mut sga = Vec::with_capacity(layers);
    for _ in 0..layers {
        let dirs = std::array::from_fn(|_| take(per_dir));
        let field = SgaField::from_dirs(h, w, f, dirs)?;
        sga.push(SgaLogits::new(field).map_err(|e| err(HEADER_LEN, e.to_string()))?);
    }
    let lga = if k > 0 {
        let field = LgaField::from_vec(h, w, f, k, take(lga_len))?;
        Some(LgaLogits::new(field).map_err(|e| err(HEADER_LEN, e.to_string()))?)
    } else {
        None
    };
    let mut model = GaModel::init(h, w, 0, false)?;
    model.sga = sga;
    model.lga = lga;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p() -> &'static Path {
        Path::new("mem")
    }

    #[test]
    fn p5_scaling() {
        let img = parse_pgm(b"P5\n1 1\n255\n\xff", p()).unwrap();
        assert_eq!(img.data(), &[1.0]);
    }

    #[test]
    fn p2_with_comments() {
        let img = parse_pgm(b"P2 # ascii\n2 1\n# max\n255\n51 255\n", p()).unwrap();
        assert_eq!((img.height(), img.width()), (1, 2));
        assert_eq!(img.data(), &[51.0 / 255.0, 1.0]);
    }

    #[test]
    fn sixteen_bit_is_big_endian() {
        let img = parse_pgm(b"P5 2 1 65535\n\x80\x00\xff\xff", p()).unwrap();
        assert_eq!(img.data(), &[32768.0 / 65535.0, 1.0]);
    }

    #[test]
    fn pgm_errors_carry_offsets() {
        match parse_pgm(b"P9\n1 1\n255\n\x00", p()) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }
        match parse_pgm(b"P5\n2 2\n255\n\x00\x00", p()) {
            Err(Error::Parse { message, .. }) => assert!(message.contains("truncated")),
            other => panic!("{other:?}"),
        }
        match parse_pgm(b"P5\nx 2\n255\n", p()) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 3),
            other => panic!("{other:?}"),
        }
        assert!(parse_pgm(b"P2 2 1 10 3 11", p()).is_err());
        assert!(parse_pgm(b"P2 2 1 10 3", p()).is_err());
        assert!(parse_pgm(b"P5 1 1 70000\n\x00\x00", p()).is_err());
    }

    #[test]
    fn pgm_round_trip() {
        let img = Image::from_fn(3, 4, |y, x| ((y * 4 + x) * 20) as f64 / 255.0).unwrap();
        let back = parse_pgm(&encode_pgm(&img).unwrap(), p()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn pfm_layout() {
        let map = DisparityMap::dense(2, 1, vec![1.0, 2.0]).unwrap();
        let bytes = encode_pfm(&map).unwrap();
        let header = b"Pf\n1 2\n-1.0\n";
        assert_eq!(&bytes[..header.len()], header);
        // bottom row first
        assert_eq!(
            &bytes[header.len()..header.len() + 4],
            &2.0f32.to_le_bytes()
        );
    }

    #[test]
    fn masked_pixels_round_trip_as_infinity() {
        let map = DisparityMap::new(1, 2, vec![0.0, 3.5], vec![false, true]).unwrap();
        let bytes = encode_pfm(&map).unwrap();
        assert_eq!(
            &bytes[bytes.len() - 8..bytes.len() - 4],
            &f32::INFINITY.to_le_bytes()
        );
        assert_eq!(parse_pfm(&bytes, p()).unwrap(), map);
    }

    #[test]
    fn big_endian_fixture() {
        let mut bytes = b"Pf\n1 1\n1.0\n".to_vec();
        bytes.extend_from_slice(&2.5f32.to_be_bytes());
        let map = parse_pfm(&bytes, p()).unwrap();
        assert_eq!(map.values(), &[2.5]);
    }

    #[test]
    fn pfm_rejects_bad_values() {
        let map = DisparityMap::dense(1, 1, vec![f64::NAN]).unwrap();
        assert!(matches!(encode_pfm(&map), Err(Error::Write(_))));
        let map = DisparityMap::new(1, 1, vec![1e300], vec![true]).unwrap();
        assert!(matches!(encode_pfm(&map), Err(Error::Write(_))));
        let mut bytes = b"Pf\n1 1\n-1.0\n".to_vec();
        bytes.extend_from_slice(&f32::NAN.to_le_bytes());
        assert!(parse_pfm(&bytes, p()).is_err());
        assert!(parse_pfm(b"Pf\n2 2\n-1.0\n\x00\x00", p()).is_err());
        assert!(parse_pfm(b"PF\n1 1\n-1.0\n", p()).is_err());
    }

    #[test]
    fn weights_round_trip() {
        let mut m = GaModel::init(3, 4, 2, true).unwrap();
        for (i, v) in m.sga[1].field_mut().iter_mut().enumerate() {
            *v = i as f64 * 0.37 - 3.0;
        }
        let bytes = encode_weights(&m).unwrap();
        assert_eq!(&bytes[..8], b"GAWT\x01\x02\x05\x01");
        assert_eq!(bytes.len(), 16 + 8 * m.parameter_count());
        assert_eq!(parse_weights(&bytes, p()).unwrap(), m);
    }

    #[test]
    fn weights_reject_corruption() {
        let bytes = encode_weights(&GaModel::init(2, 2, 1, false).unwrap()).unwrap();
        assert!(parse_weights(&bytes[..bytes.len() - 1], p()).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(parse_weights(&bad, p()).is_err());
        assert!(parse_weights(&bytes[..10], p()).is_err());
    }

    proptest! {
        #[test]
        fn pfm_round_trip_is_bitwise(
            h in 1usize..6, w in 1usize..6,
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let values: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-1e3f32..1e3) as f64).collect();
            let mask: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(0.8)).collect();
            let map = DisparityMap::new(h, w, values, mask).unwrap();
            let back = parse_pfm(&encode_pfm(&map).unwrap(), Path::new("mem")).unwrap();
            prop_assert_eq!(back, map);
        }
    }
}
