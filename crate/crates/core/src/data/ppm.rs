use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

/// 8-bit RGB raster, row-major, interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        RgbImage {
            width,
            height,
            data: rgb.iter().copied().cycle().take(width * height * 3).collect(),
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// `1×3×H×W` tensor with values `v / 255`.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let (w, h) = (self.width, self.height);
        let inv = 1.0 / 255.0;
        Tensor::from_fn(Shape([1, 3, h, w]), |[_, c, y, x]| {
            T::cast(self.data[3 * (y * w + x) + c] as f64 * inv)
        })
    }
}

/// Writes a binary `P6` PPM with maxval 255.
pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

/// Reads the next header token, skipping whitespace and `#` comments.
fn token(bytes: &[u8], pos: &mut usize) -> Result<String> {
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
        return Err(fmt_err("truncated PPM header"));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let mut pos = 0;
    let magic = token(bytes, &mut pos)?;
    if magic != "P6" {
        return Err(fmt_err(format!("expected PPM magic P6, found {magic:?}")));
    }
    let mut num = |what: &str| -> Result<usize> {
        let t = token(bytes, &mut pos)?;
        t.parse()
            .map_err(|_| fmt_err(format!("PPM {what} {t:?} is not an integer")))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if maxval != 255 {
        return Err(fmt_err(format!("PPM maxval must be 255, found {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(fmt_err("PPM extents must be positive"));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(fmt_err("truncated PPM header"));
    }
    pos += 1;
    let need = width * height * 3;
    let payload = &bytes[pos..];
    if payload.len() < need {
        return Err(fmt_err(format!(
            "truncated PPM payload: need {need} bytes, found {}",
            payload.len()
        )));
    }
    Ok(RgbImage {
        width,
        height,
        data: payload[..need].to_vec(),
    })
}

/// Decodes a PPM straight to a `1×3×H×W` tensor scaled to `[0, 1]`.
pub fn load_ppm<T: Real>(bytes: &[u8]) -> Result<Tensor<T>> {
    Ok(decode_ppm(bytes)?.to_tensor())
}
