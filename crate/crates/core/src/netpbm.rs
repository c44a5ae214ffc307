//! Binary PGM (`P5`) and PPM (`P6`) images with maxval 255.
//!
//! Pixel values are mapped to `v / 255` on load and written back as
//! `round(clamp(v, 0, 1) * 255)`, so 8-bit images survive a round trip
//! unchanged. Tensors are `[1, c, h, w]` with `c = 1` for PGM and `c = 3`
//! for PPM.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

struct Header {
    channels: usize,
    width: usize,
    height: usize,
    data_offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(Error::MalformedHeader("missing `P` magic number".into()));
    }
    let channels = match bytes[1] {
        b'5' => 1,
        b'6' => 3,
        b'1'..=b'4' | b'7' => {
            return Err(Error::UnsupportedFormat(format!(
                "P{} (only binary P5/P6 are supported)",
                bytes[1] as char
            )))
        }
        other => {
            return Err(Error::MalformedHeader(format!(
                "unknown magic number P{}",
                other as char
            )))
        }
    };

    let mut pos = 2;
    let mut fields = [0u64; 3];
    for (i, name) in ["width", "height", "maxval"].iter().enumerate() {
        // Whitespace and comments before every field.
        let mut saw_space = false;
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => {
                    saw_space = true;
                    pos += 1;
                }
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n' && b != b'\r') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::MalformedHeader(format!("header ends before {name}"))),
            }
        }
        if !saw_space {
            return Err(Error::MalformedHeader(format!("expected whitespace before {name}")));
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::MalformedHeader(format!("{name} is not a number")));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        fields[i] = text
            .parse()
            .map_err(|_| Error::MalformedHeader(format!("{name} `{text}` out of range")))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::MalformedHeader("expected whitespace after maxval".into())),
    }

    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(Error::MalformedHeader(format!("empty image {width}x{height}")));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::MalformedHeader(format!("maxval {maxval} out of range")));
    }
    if maxval != 255 {
        return Err(Error::UnsupportedMaxval(maxval as u32));
    }
    Ok(Header {
        channels,
        width: width as usize,
        height: height as usize,
        data_offset: pos,
    })
}

/// Decodes a P5/P6 file into a `[1, c, h, w]` tensor with values in `[0, 1]`.
pub fn decode<T: Real>(bytes: &[u8]) -> Result<Tensor<T>> {
    let h = parse_header(bytes)?;
    let plane = h.width * h.height;
    let expected = plane * h.channels;
    let payload = &bytes[h.data_offset..];
    if payload.len() < expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: payload.len(),
        });
    }
    let scale = T::of(255.0);
    let mut data = vec![T::zero(); expected];
    for (i, &b) in payload[..expected].iter().enumerate() {
        let (px, c) = (i / h.channels, i % h.channels);
        data[c * plane + px] = T::of(b as f64) / scale;
    }
    Tensor::from_vec(Shape::new(1, h.channels, h.height, h.width)?, data)
}

fn quantize<T: Real>(v: T) -> u8 {
    (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes a `[1, c, h, w]` tensor (c = 1 or 3) as P5/P6.
pub fn encode<T: Real>(image: &Tensor<T>) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.batch != 1 {
        return Err(Error::shape("save_image", "batch", 1, s.batch));
    }
    let magic = match s.channels {
        1 => "P5",
        3 => "P6",
        c => {
            return Err(Error::UnsupportedFormat(format!(
                "{c}-channel image (PGM needs 1, PPM needs 3)"
            )))
        }
    };
    let mut out = format!("{magic}\n{} {}\n255\n", s.width, s.height).into_bytes();
    let plane = s.plane();
    let data = image.data();
    out.reserve(plane * s.channels);
    for px in 0..plane {
        for c in 0..s.channels {
            out.push(quantize(data[c * plane + px]));
        }
    }
    Ok(out)
}

pub fn load_image<T: Real>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::at_path(path, e))?;
    decode(&bytes)
}

pub fn save_image<T: Real>(image: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(image)?;
    fs::write(path, bytes).map_err(|e| Error::at_path(path, e))
}

/// True for file names this module can read.
pub fn is_supported(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("pgm" | "ppm" | "pnm")
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_minimal_pgm() {
        let mut bytes = b"P5 2 2 255\n".to_vec();
        bytes.extend([0u8, 51, 102, 255]);
        let t: Tensor<f32> = decode(&bytes).unwrap();
        assert_eq!(t.shape(), Shape::new(1, 1, 2, 2).unwrap());
        assert_eq!(t.data(), &[0.0, 0.2, 0.4, 1.0]);
    }

    #[test]
    fn comments_in_header_are_skipped() {
        let mut bytes = b"P6\n# made by hand\n1 1\n# max\n255\n".to_vec();
        bytes.extend([255u8, 0, 51]);
        let t: Tensor<f32> = decode(&bytes).unwrap();
        assert_eq!(t.shape(), Shape::new(1, 3, 1, 1).unwrap());
        assert_eq!(t.data(), &[1.0, 0.0, 0.2]);
    }

    #[test]
    fn ppm_channels_are_planar() {
        let mut bytes = b"P6 2 1 255\n".to_vec();
        bytes.extend([10u8, 20, 30, 40, 50, 60]);
        let t: Tensor<f64> = decode(&bytes).unwrap();
        let got: Vec<u8> = t.data().iter().map(|v| (v * 255.0).round() as u8).collect();
        assert_eq!(got, vec![10, 40, 20, 50, 30, 60]);
        assert_eq!(encode(&t).unwrap()[b"P6\n2 1\n255\n".len()..], [10, 20, 30, 40, 50, 60]);
    }

    #[test]
    fn sixteen_bit_is_unsupported() {
        let bytes = b"P5 1 1 65535\n\0\0".to_vec();
        assert!(matches!(decode::<f32>(&bytes), Err(Error::UnsupportedMaxval(65535))));
    }

    #[test]
    fn truncated_payload() {
        let mut bytes = b"P5 3 3 255\n".to_vec();
        bytes.extend([0u8; 5]);
        assert!(matches!(
            decode::<f32>(&bytes),
            Err(Error::TruncatedPayload { expected: 9, found: 5 })
        ));
    }

    #[test]
    fn malformed_headers() {
        for bad in [&b"PX 1 1 255\n\0"[..], b"P5 a 1 255\n\0", b"P5 1 1", b"P5 0 1 255\n", b"", b"P51 1 255\n\0"] {
            assert!(
                matches!(decode::<f32>(bad), Err(Error::MalformedHeader(_))),
                "{:?}",
                String::from_utf8_lossy(bad)
            );
        }
        assert!(matches!(decode::<f32>(b"P2 1 1 255\n0"), Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn encode_rejects_two_channels() {
        let t = Tensor::<f32>::zeros(Shape::new(1, 2, 2, 2).unwrap());
        assert!(matches!(encode(&t), Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn save_clips_and_rounds() {
        let t = Tensor::<f32>::from_vec(Shape::new(1, 1, 1, 4).unwrap(), vec![-0.2, 1.3, 0.5, 0.1]).unwrap();
        let bytes = encode(&t).unwrap();
        assert_eq!(&bytes[bytes.len() - 4..], &[0, 255, 128, 26]);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        let t = Tensor::<f32>::from_vec(
            Shape::new(1, 3, 3, 5).unwrap(),
            (0..45).map(|i| ((i * 17) % 256) as f32 / 255.0).collect(),
        )
        .unwrap();
        save_image(&t, &path).unwrap();
        let back: Tensor<f32> = load_image(&path).unwrap();
        assert!(back.bitwise_eq(&t));
        assert!(matches!(load_image::<f32>(dir.path().join("missing.pgm")), Err(Error::Path { .. })));
    }

    proptest! {
        #[test]
        fn quantized_tensors_round_trip(channels in prop::sample::select(vec![1usize, 3]),
                                        h in 1usize..6, w in 1usize..6,
                                        seed in any::<u64>()) {
            let n = channels * h * w;
            let levels: Vec<f32> = (0..n).map(|i| ((seed >> (i % 56)) as u8 ^ i as u8) as f32 / 255.0).collect();
            let t = Tensor::from_vec(Shape::new(1, channels, h, w).unwrap(), levels).unwrap();
            let back: Tensor<f32> = decode(&encode(&t).unwrap()).unwrap();
            prop_assert!(back.bitwise_eq(&t));
        }
    }
}
