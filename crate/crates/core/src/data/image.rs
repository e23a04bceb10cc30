//! Frames as `[H, W, C]` arrays of reals in `[0, 1]`, stored on disk as
//! binary PPM (colour) or PGM (gray) files.

use std::path::Path;

use image::{GrayImage, ImageReader, RgbImage};

use super::DataError;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    fn quantized(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    /// Writes a binary PPM (3 channels) or PGM (1 channel).
    pub fn save_pnm(&self, path: &Path) -> Result<(), DataError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| DataError::io(path, e))?;
        }
        let (w, h) = (self.width as u32, self.height as u32);
        let res = match self.channels {
            3 => RgbImage::from_raw(w, h, self.quantized())
                .expect("buffer size")
                .save_with_format(path, image::ImageFormat::Pnm),
            1 => GrayImage::from_raw(w, h, self.quantized())
                .expect("buffer size")
                .save_with_format(path, image::ImageFormat::Pnm),
            c => {
                return Err(DataError::Image {
                    path: path.to_path_buf(),
                    message: format!("cannot store {c}-channel image"),
                })
            }
        };
        res.map_err(|e| DataError::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn load_pnm(path: &Path) -> Result<Self, DataError> {
        if !path.exists() {
            return Err(DataError::MissingFile(path.to_path_buf()));
        }
        let img = ImageReader::open(path)
            .map_err(|e| DataError::io(path, e))?
            .with_guessed_format()
            .map_err(|e| DataError::io(path, e))?
            .decode()
            .map_err(|e| DataError::Image {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
        let (width, height) = (img.width() as usize, img.height() as usize);
        let (channels, raw) = match img.color().channel_count() {
            1 => (1, img.into_luma8().into_raw()),
            _ => (3, img.into_rgb8().into_raw()),
        };
        Ok(Self {
            height,
            width,
            channels,
            data: raw.iter().map(|&b| b as f64 / 255.0).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pnm_round_trip_is_quantized_identity() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = Image::new(4, 6, 3);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i % 256) as f64 / 255.0;
        }
        let p = dir.path().join("a.ppm");
        img.save_pnm(&p).unwrap();
        let back = Image::load_pnm(&p).unwrap();
        assert_eq!((back.height, back.width, back.channels), (4, 6, 3));
        assert_eq!(back, img);

        let mut gray = Image::new(3, 2, 1);
        gray.data[4] = 1.0;
        let p = dir.path().join("g.pgm");
        gray.save_pnm(&p).unwrap();
        assert_eq!(Image::load_pnm(&p).unwrap(), gray);
    }
}
