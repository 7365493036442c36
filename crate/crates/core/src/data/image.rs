//! Planar RGB images and the binary P6 codec.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

/// Channel-major `3×height×width` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::shape(format!("image must be non-empty, got {height}×{width}")));
        }
        if data.len() != 3 * height * width {
            return Err(Error::shape(format!(
                "image {height}×{width} needs {} values, got {}",
                3 * height * width,
                data.len()
            )));
        }
        Ok(Image { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let plane = height * width;
        let mut data = Vec::with_capacity(3 * plane);
        for c in rgb {
            data.extend(std::iter::repeat_n(c, plane));
        }
        Image { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)]
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(vec![3, self.height, self.width], self.data.iter().map(|&v| T::of(v as f64)).collect())
            .expect("image dimensions are validated on construction")
    }
}

/// Encodes as binary P6 with `round(255·v)` quantization.
pub fn encode_ppm(image: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.reserve(3 * image.width * image.height);
    for y in 0..image.height {
        for x in 0..image.width {
            for c in 0..3 {
                out.push((image.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0;
    let token = |pos: &mut usize| -> Result<String> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(Error::Codec("truncated header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    if token(&mut pos)? != "P6" {
        return Err(Error::Codec("bad magic, expected P6".into()));
    }
    let num = |pos: &mut usize, what: &str| -> Result<usize> {
        let t = token(pos)?;
        t.parse().map_err(|_| Error::Codec(format!("bad {what} {t:?}")))
    };
    let width = num(&mut pos, "width")?;
    let height = num(&mut pos, "height")?;
    let maxval = num(&mut pos, "maxval")?;
    if maxval != 255 {
        return Err(Error::Codec(format!("unsupported maxval {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(Error::Codec("zero-sized image".into()));
    }
    pos += 1; // single whitespace byte after maxval
    let need = 3 * width * height;
    let payload = bytes
        .get(pos..pos + need)
        .ok_or_else(|| Error::Codec(format!("truncated payload: need {need} bytes, have {}", bytes.len().saturating_sub(pos))))?;
    let mut image = Image::filled(height, width, [0.0; 3]);
    for (i, px) in payload.chunks_exact(3).enumerate() {
        let (y, x) = (i / width, i % width);
        for c in 0..3 {
            image.set(c, y, x, px[c] as f32 / 255.0);
        }
    }
    Ok(image)
}

pub fn write_ppm(path: &Path, image: &Image) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    f.write_all(&encode_ppm(image)).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode_ppm(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn known_two_by_two_layout() {
        let mut img = Image::filled(2, 2, [0.0; 3]);
        img.set(0, 0, 0, 1.0);
        img.set(1, 0, 1, 1.0);
        img.set(2, 1, 0, 1.0);
        for c in 0..3 {
            img.set(c, 1, 1, 0.5);
        }
        let bytes = encode_ppm(&img);
        let mut expected = b"P6\n2 2\n255\n".to_vec();
        expected.extend([255, 0, 0, 0, 255, 0, 0, 0, 255, 128, 128, 128]);
        assert_eq!(bytes, expected);
        assert_eq!(bytes.len() - b"P6\n2 2\n255\n".len(), 12);
    }

    #[test]
    fn codec_errors() {
        assert!(matches!(decode_ppm(b"P3\n1 1\n255\n\0\0\0"), Err(Error::Codec(_))));
        assert!(matches!(decode_ppm(b"P6\n2 2\n255\n\0\0\0"), Err(Error::Codec(_))));
        assert!(matches!(decode_ppm(b"P6\n2"), Err(Error::Codec(_))));
        assert!(decode_ppm(b"P6 # comment\n1 1\n255\n\x01\x02\x03").is_ok());
    }

    proptest! {
        #[test]
        fn round_trip_within_quantization(
            h in 1usize..6, w in 1usize..6, seed in proptest::collection::vec(0.0f32..=1.0, 108)
        ) {
            let data: Vec<f32> = seed.iter().cycle().take(3 * h * w).copied().collect();
            let img = Image::new(h, w, data).unwrap();
            let back = decode_ppm(&encode_ppm(&img)).unwrap();
            prop_assert_eq!((back.height(), back.width()), (h, w));
            for (a, b) in img.data().iter().zip(back.data()) {
                prop_assert!((a - b).abs() <= 1.0 / 255.0 + 1e-6);
            }
        }
    }
}
