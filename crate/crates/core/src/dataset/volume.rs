//! `.rvol` volumes: raw little-endian f32 payload (D slowest, then H, W)
//! with a `.rvol.json` sidecar `{"dims": [D, H, W]}`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Sidecar {
    dims: [usize; 3],
    #[serde(default = "default_dtype")]
    dtype: String,
}

fn default_dtype() -> String {
    "f32le".into()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    /// `[D, H, W]`.
    pub dims: [usize; 3],
    pub data: Vec<f32>,
}

/// A single 2D slice, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!("{} values for a {height}x{width} image", data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.width + c]
    }
}

/// Integer label map, row-major; 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!("{} labels for a {height}x{width} mask", data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn max_label(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(0)
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

impl Volume {
    pub fn new(dims: [usize; 3], data: Vec<f32>) -> Result<Self> {
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::Format(format!("{} values for dims {dims:?}", data.len())));
        }
        Ok(Self { dims, data })
    }

    pub fn from_image(image: &Image) -> Self {
        Self { dims: [1, image.height, image.width], data: image.data.clone() }
    }

    pub fn from_bytes(dims: [usize; 3], payload: &[u8], origin: &Path) -> Result<Self> {
        let expected = dims.iter().product::<usize>() * 4;
        if payload.len() != expected {
            return Err(Error::Format(format!(
                "{}: payload is {} bytes, dims {dims:?} need {expected}",
                origin.display(),
                payload.len()
            )));
        }
        let data = payload.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        Ok(Self { dims, data })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let side = sidecar_path(path);
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let meta: Sidecar = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", side.display())))?;
        if meta.dtype != "f32le" {
            return Err(Error::Format(format!("{}: unsupported dtype {}", side.display(), meta.dtype)));
        }
        let payload = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(meta.dims, &payload, path)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut payload = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(path, payload).map_err(|e| Error::io(path, e))?;
        let side = sidecar_path(path);
        let meta = Sidecar { dims: self.dims, dtype: default_dtype() };
        let text = serde_json::to_string(&meta).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(&side, text).map_err(|e| Error::io(&side, e))
    }
}

/// Splits along axis 0 and min-max normalizes each slice to `[0, 1]`;
/// constant slices become all zeros.
pub fn slice_volume(vol: &Volume) -> Result<Vec<Image>> {
    let [d, h, w] = vol.dims;
    if vol.data.len() != d * h * w {
        return Err(Error::Format(format!("{} values for dims {:?}", vol.data.len(), vol.dims)));
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(d);
    for z in 0..d {
        let s = &vol.data[z * plane..(z + 1) * plane];
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format(format!("slice {z} has non-finite values")));
        }
        let lo = s.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = s.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let data = if plane == 0 || hi <= lo {
            vec![0.0; plane]
        } else {
            let range = (hi - lo) as f64;
            s.iter().map(|&v| (((v - lo) as f64) / range).clamp(0.0, 1.0) as f32).collect()
        };
        out.push(Image { height: h, width: w, data });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slices_and_normalizes() {
        let mut data = [0.0f32; 48];
        data[16] = -100.0;
        data[17] = 300.0;
        for v in &mut data[32..] {
            *v = 7.0;
        }
        let v = Volume::from_bytes(
            [3, 4, 4],
            &data.iter().flat_map(|x| x.to_le_bytes()).collect::<Vec<_>>(),
            Path::new("mem"),
        )
        .unwrap();
        let s = slice_volume(&v).unwrap();
        assert_eq!(s.len(), 3);
        assert!(s.iter().all(|i| i.height == 4 && i.width == 4));
        assert_eq!(s[1].data[0], 0.0);
        assert_eq!(s[1].data[1], 1.0);
        assert_eq!(s[1].data[2], 0.25);
        assert!(s[2].data.iter().all(|&x| x == 0.0));
        assert!(s[0].data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn payload_size_is_checked() {
        assert!(matches!(Volume::from_bytes([3, 4, 4], &[0u8; 191], Path::new("x")), Err(Error::Format(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b.rvol");
        let v = Volume::new([2, 1, 3], vec![1.0, -2.5, 3.0, 0.0, 1e-7, 9.0]).unwrap();
        v.write(&p).unwrap();
        assert!(sidecar_path(&p).exists());
        assert_eq!(Volume::read(&p).unwrap(), v);
    }
}
