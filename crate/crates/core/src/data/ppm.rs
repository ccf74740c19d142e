//! Binary PPM (P6, maxval 255).

use super::{DataError, Image, Result};

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0;
    let magic = token(bytes, &mut pos)?;
    if magic != b"P6" {
        return Err(DataError::Decode("not a binary PPM (P6)".into()));
    }
    let width = number(bytes, &mut pos)?;
    let height = number(bytes, &mut pos)?;
    let maxval = number(bytes, &mut pos)?;
    if maxval != 255 {
        return Err(DataError::Decode(format!("unsupported maxval {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(DataError::Decode("zero-sized image".into()));
    }
    // Exactly one whitespace byte separates the header from the raster.
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(DataError::Decode("missing raster separator".into())),
    }
    let n = width * height;
    let raster = bytes
        .get(pos..pos + 3 * n)
        .ok_or_else(|| DataError::Decode(format!("raster truncated: need {} bytes", 3 * n)))?;
    let mut data = vec![0.0; 3 * n];
    for (i, px) in raster.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * n + i] = px[c] as f64;
        }
    }
    Ok(Image { width, height, data })
}

/// Values are rounded and clamped to `0..=255`.
pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let n = img.width * img.height;
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.reserve(3 * n);
    for i in 0..n {
        for c in 0..3 {
            out.push(img.data[c * n + i].round().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

fn skip_space_and_comments(bytes: &[u8], pos: &mut usize) {
    while let Some(&b) = bytes.get(*pos) {
        if b == b'#' {
            while let Some(&c) = bytes.get(*pos) {
                *pos += 1;
                if c == b'\n' || c == b'\r' {
                    break;
                }
            }
        } else if b.is_ascii_whitespace() {
            *pos += 1;
        } else {
            break;
        }
    }
}

fn token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    skip_space_and_comments(bytes, pos);
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| !b.is_ascii_whitespace() && *b != b'#') {
        *pos += 1;
    }
    if start == *pos {
        return Err(DataError::Decode("header truncated".into()));
    }
    Ok(&bytes[start..*pos])
}

fn number(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    let t = token(bytes, pos)?;
    std::str::from_utf8(t)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| DataError::Decode(format!("bad header field {:?}", String::from_utf8_lossy(t))))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let img = Image { width: 2, height: 1, data: vec![0.0, 255.0, 10.0, 20.0, 30.0, 40.0] };
        let bytes = encode_ppm(&img);
        assert_eq!(&bytes[..11], b"P6\n2 1\n255\n");
        assert_eq!(&bytes[11..], [0, 10, 30, 255, 20, 40]);
        assert_eq!(decode_ppm(&bytes).unwrap(), img);
    }

    #[test]
    fn comments_in_header() {
        let mut bytes = b"P6 # made by hand\n1 # w\n1\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3]);
        let img = decode_ppm(&bytes).unwrap();
        assert_eq!(img.data, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn malformed_inputs() {
        assert!(decode_ppm(b"P3\n1 1\n255\n1 2 3").is_err());
        assert!(decode_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0").is_err());
        assert!(decode_ppm(b"P6\n2 2\n255\n\0\0\0").is_err());
        assert!(decode_ppm(b"P6\n").is_err());
        assert!(decode_ppm(b"").is_err());
    }
}
