use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// `height × width × channels` intensities in `[0, 1]`, row-major HWC.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl ImageTensor {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_data(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {height}x{width}x{channels} image",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn from_u8(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        Self::from_data(height, width, channels, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    /// Round-trips through 8-bit storage, as every camera frame does.
    pub fn quantized(&self) -> Self {
        let bytes = self.to_u8();
        Self::from_u8(self.height, self.width, self.channels, &bytes).expect("same shape")
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn at(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    /// Writes a binary PGM (1 channel) or PPM (3 channels).
    pub fn write_pnm(&self, path: &Path) -> Result<()> {
        let magic = match self.channels {
            1 => "P5",
            3 => "P6",
            c => return Err(Error::ShapeMismatch(format!("cannot write {c}-channel image as PNM"))),
        };
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        write!(file, "{magic}\n{} {}\n255\n", self.width, self.height)
            .and_then(|_| file.write_all(&self.to_u8()))
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

/// 8-bit image as stored in datasets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageU8 {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl ImageU8 {
    pub fn from_tensor(img: &ImageTensor) -> Self {
        Self {
            height: img.height,
            width: img.width,
            channels: img.channels,
            data: img.to_u8(),
        }
    }

    pub fn to_tensor(&self) -> ImageTensor {
        ImageTensor::from_u8(self.height, self.width, self.channels, &self.data).expect("consistent shape")
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }
}
