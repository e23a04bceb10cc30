//! Writes GCT attention weights as text matrices and per-group-token heat maps.
//!
//! `layer1_head{h}_frame{t}.txt` holds the grouping layer's `K×M` weights,
//! `layer2_head{h}_frame{t}.txt` the contextual layer's `(M+K)×N` weights
//! (query rows, key columns, whitespace separated). Heat maps
//! `heat_token{k}_frame{t}.pgm` show group token `k`'s head-averaged
//! contextual attention over the patch grid, upscaled to pixels.

use std::path::{Path, PathBuf};

use image::{ImageBuffer, ImageFormat, Luma};

use crate::data::{DataError, Image};
use crate::gct::AttentionRecords;
use crate::tensor::Tensor;
use crate::Error;

pub fn matrix_file_name(layer: usize, head: usize, frame: usize) -> String {
    format!("layer{layer}_head{head}_frame{frame}.txt")
}

pub fn heatmap_file_name(token: usize, frame: usize) -> String {
    format!("heat_token{token}_frame{frame}.pgm")
}

#[derive(Clone, Debug, PartialEq)]
pub struct DumpSummary {
    pub matrix_files: Vec<PathBuf>,
    pub heatmaps: Vec<PathBuf>,
}

fn write_matrix(path: &Path, t: &Tensor) -> Result<(), Error> {
    let mut s = String::new();
    for r in 0..t.rows() {
        let row: Vec<String> = t.row(r).iter().map(|v| v.to_string()).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_matrix(path: &Path) -> Result<Vec<Vec<f64>>, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .map(|l| {
            l.split_whitespace()
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
                })
                .collect()
        })
        .collect()
}

/// Mean over heads of row `row` of each head's matrix.
pub fn head_mean_row(heads: &[Tensor], row: usize) -> Vec<f64> {
    let n = heads[0].cols();
    let mut out = vec![0.0; n];
    for h in heads {
        for (o, v) in out.iter_mut().zip(h.row(row)) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= heads.len() as f64);
    out
}

/// Renders attention over a `height×width` patch grid as a 16-bit graymap,
/// each patch a `patch×patch` block, scaled so the maximum is white.
pub fn render_heatmap(weights: &[f64], height: usize, width: usize, patch: usize) -> Image {
    let max = weights.iter().copied().fold(0.0, f64::max);
    let patch = patch.max(1);
    let mut img = Image::new(height * patch, width * patch, 1);
    for (i, &w) in weights.iter().enumerate() {
        let v = if max > 0.0 { w / max } else { 0.0 };
        let (r, c) = (i / width, i % width);
        for y in 0..patch {
            for x in 0..patch {
                img.pixel_mut(r * patch + y, c * patch + x)[0] = v;
            }
        }
    }
    img
}

fn image_error(path: &Path, e: image::ImageError) -> Error {
    Error::Data(DataError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn save_pgm16(path: &Path, img: &Image) -> Result<(), Error> {
    let data: Vec<u16> = img
        .data
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let buf = ImageBuffer::<Luma<u16>, _>::from_raw(img.width as u32, img.height as u32, data)
        .expect("buffer matches extents");
    buf.save_with_format(path, ImageFormat::Pnm)
        .map_err(|e| image_error(path, e))
}

/// Reads back a heat map as values in [0, 1].
pub fn load_heatmap(path: &Path) -> Result<Image, Error> {
    let dynamic = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| image_error(path, e))?;
    let g = dynamic.to_luma16();
    let mut img = Image::new(g.height() as usize, g.width() as usize, 1);
    for (d, p) in img.data.iter_mut().zip(g.pixels()) {
        *d = p.0[0] as f64 / 65535.0;
    }
    Ok(img)
}

/// Writes every attention matrix and heat map for one clip into `out`.
pub fn dump_attention(
    records: &AttentionRecords,
    height: usize,
    width: usize,
    patch: usize,
    out: &Path,
) -> Result<DumpSummary, Error> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut matrix_files = Vec::new();
    let mut heatmaps = Vec::new();
    for (layer, frames) in [(1, &records.grouping), (2, &records.contextual)] {
        for (t, heads) in frames.iter().enumerate() {
            for (h, w) in heads.iter().enumerate() {
                let path = out.join(matrix_file_name(layer, h, t));
                write_matrix(&path, w)?;
                matrix_files.push(path);
            }
        }
    }
    for (t, heads) in records.contextual.iter().enumerate() {
        let rows = heads[0].rows();
        let k = records.grouping[t][0].rows();
        let m = rows - k;
        for token in 0..k {
            let weights = head_mean_row(heads, m + token);
            let path = out.join(heatmap_file_name(token, t));
            save_pgm16(&path, &render_heatmap(&weights, height, width, patch))?;
            heatmaps.push(path);
        }
    }
    Ok(DumpSummary { matrix_files, heatmaps })
}
