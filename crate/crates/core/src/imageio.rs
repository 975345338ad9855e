//! 8-bit PNG encoding of `C×H×W` tensors in `[0, 1]`, plus side-by-side grids.

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scenegen::Mask;
use std::path::Path;

fn png_err(e: impl std::fmt::Display) -> Error {
    Error::Png(e.to_string())
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes a 1- or 3-channel image. Values are clamped to `[0, 1]`.
pub fn encode_png(image: &Tensor<f64>) -> Result<Vec<u8>> {
    let [c, h, w] = match image.shape() {
        &[c, h, w] if c == 1 || c == 3 => [c, h, w],
        s => return Err(Error::shape("encode_png", format!("expected 1 or 3 channels, got {s:?}"))),
    };
    let d = image.data();
    let mut pixels = Vec::with_capacity(c * h * w);
    for i in 0..h * w {
        for ch in 0..c {
            pixels.push(quantize(d[ch * h * w + i]));
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(if c == 3 { png::ColorType::Rgb } else { png::ColorType::Grayscale });
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(png_err)?;
        writer.write_image_data(&pixels).map_err(png_err)?;
    }
    Ok(out)
}

pub fn decode_png(bytes: &[u8]) -> Result<Tensor<f64>> {
    let mut reader = png::Decoder::new(std::io::Cursor::new(bytes)).read_info().map_err(png_err)?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| png_err("image too large"))?];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(png_err("only 8-bit images are supported"));
    }
    let c = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Grayscale => 1,
        other => return Err(png_err(format!("unsupported color type {other:?}"))),
    };
    let (h, w) = (info.height as usize, info.width as usize);
    let buf = &buf[..info.buffer_size()];
    let mut data = vec![0.0; c * h * w];
    for i in 0..h * w {
        for ch in 0..c {
            data[ch * h * w + i] = f64::from(buf[i * c + ch]) / 255.0;
        }
    }
    Tensor::new(vec![c, h, w], data)
}

pub fn write_png(path: &Path, image: &Tensor<f64>) -> Result<()> {
    let bytes = encode_png(image)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_png(path: &Path) -> Result<Tensor<f64>> {
    decode_png(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// A mask as a 3-channel white-on-black image.
pub fn mask_image(mask: &Mask, channels: usize) -> Tensor<f64> {
    let plane = mask.to_tensor();
    let mut data = Vec::with_capacity(channels * plane.numel());
    for _ in 0..channels {
        data.extend_from_slice(plane.data());
    }
    Tensor::new(vec![channels, mask.height(), mask.width()], data).expect("mask plane")
}

/// Tiles equally sized images into rows with a one-pixel gray gutter.
pub fn image_grid(rows: &[Vec<Tensor<f64>>]) -> Result<Tensor<f64>> {
    let first = rows
        .iter()
        .flatten()
        .next()
        .ok_or_else(|| Error::invalid("empty image grid"))?;
    let &[c, h, w] = first.shape() else {
        return Err(Error::shape("image_grid", format!("{:?}", first.shape())));
    };
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let (gh, gw) = (rows.len() * (h + 1) + 1, cols * (w + 1) + 1);
    let mut out = Tensor::full(&[c, gh, gw], 0.5);
    for (r, row) in rows.iter().enumerate() {
        for (k, img) in row.iter().enumerate() {
            if img.shape() != first.shape() {
                return Err(Error::shape("image_grid", format!("{:?} vs {:?}", img.shape(), first.shape())));
            }
            let (oy, ox) = (1 + r * (h + 1), 1 + k * (w + 1));
            let src = img.data();
            let dst = out.data_mut();
            for ch in 0..c {
                for y in 0..h {
                    let s = ch * h * w + y * w;
                    let d = ch * gh * gw + (oy + y) * gw + ox;
                    dst[d..d + w].copy_from_slice(&src[s..s + w]);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_on_the_byte_grid() {
        let img = Tensor::from_fn(&[3, 5, 7], |i| (i % 256) as f64 / 255.0);
        let back = decode_png(&encode_png(&img).unwrap()).unwrap();
        assert!(back.max_abs_diff(&img).unwrap() < 1e-12);
        let gray = Tensor::from_fn(&[1, 4, 4], |i| i as f64 / 15.0);
        assert!(decode_png(&encode_png(&gray).unwrap()).unwrap().max_abs_diff(&gray).unwrap() < 0.5 / 255.0 + 1e-12);
        assert!(encode_png(&Tensor::zeros(&[2, 4, 4])).is_err());
        assert_eq!(encode_png(&img).unwrap(), encode_png(&img).unwrap());
    }

    #[test]
    fn grid_places_tiles() {
        let a = Tensor::full(&[3, 2, 2], 1.0);
        let b = Tensor::zeros(&[3, 2, 2]);
        let g = image_grid(&[vec![a.clone(), b], vec![a]]).unwrap();
        assert_eq!(g.shape(), &[3, 7, 7]);
        assert_eq!(g.data()[7 + 1], 1.0);
        assert_eq!(g.data()[7 + 4], 0.0);
        assert_eq!(g.data()[0], 0.5);
        assert!(image_grid(&[]).is_err());
    }
}
