//! Planar float images and PNG conversion.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// `channels x height x width` samples stored plane by plane. Clean data lives
/// in `[0, 1]`; corrupted data may fall outside and is kept unclamped.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Input(format!(
                "images have 1 or 3 channels, got {channels}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::Input(format!(
                "{channels}x{height}x{width} image needs {} samples, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(channels, height, width, vec![value; channels * height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        (self.channels, self.height, self.width) == (other.channels, other.height, other.width)
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::Input(format!(
                "crop {height}x{width} at ({top},{left}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(self.channels * height * width);
        for c in 0..self.channels {
            for y in top..top + height {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row + left..row + left + width]);
            }
        }
        Image::new(self.channels, height, width, data)
    }

    /// Rotate counter-clockwise by `quarter_turns * 90` degrees.
    pub fn rot90(&self, quarter_turns: usize) -> Image {
        let k = quarter_turns % 4;
        let (h, w) = (self.height, self.width);
        let (oh, ow) = if k % 2 == 0 { (h, w) } else { (w, h) };
        let mut data = vec![0.0; self.data.len()];
        for c in 0..self.channels {
            for i in 0..oh {
                for j in 0..ow {
                    let (sy, sx) = match k {
                        0 => (i, j),
                        1 => (j, w - 1 - i),
                        2 => (h - 1 - i, w - 1 - j),
                        _ => (h - 1 - j, i),
                    };
                    data[(c * oh + i) * ow + j] = self.get(c, sy, sx);
                }
            }
        }
        Image {
            height: oh,
            width: ow,
            channels: self.channels,
            data,
        }
    }

    /// Extend to `height x width` at the bottom and right by mirror reflection
    /// that does not repeat the edge sample (`... c b | a b c ...`).
    pub fn mirror_pad(&self, height: usize, width: usize) -> Result<Image> {
        if height < self.height || width < self.width {
            return Err(Error::Input("mirror_pad target is smaller than image".into()));
        }
        let mut data = Vec::with_capacity(self.channels * height * width);
        for c in 0..self.channels {
            for y in 0..height {
                let sy = reflect(y, self.height);
                for x in 0..width {
                    data.push(self.get(c, sy, reflect(x, self.width)));
                }
            }
        }
        Image::new(self.channels, height, width, data)
    }

    pub fn clamped(&self) -> Image {
        let mut out = self.clone();
        for v in &mut out.data {
            *v = v.clamp(0.0, 1.0);
        }
        out
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Self::batch_to_tensor(std::slice::from_ref(self)).expect("single image batch")
    }

    /// Stack same-shaped images into an NCHW tensor.
    pub fn batch_to_tensor<T: Real>(images: &[Image]) -> Result<Tensor<T>> {
        let first = images
            .first()
            .ok_or_else(|| Error::Input("empty image batch".into()))?;
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for img in images {
            if !img.same_shape(first) {
                return Err(Error::Input("images in a batch must share a shape".into()));
            }
            data.extend(img.data.iter().map(|&v| T::from_f64(v as f64)));
        }
        Tensor::from_vec(
            &[images.len(), first.channels, first.height, first.width],
            data,
        )
    }

    /// Extract image `n` (all channels) from an NCHW tensor.
    pub fn from_tensor<T: Real>(t: &Tensor<T>, n: usize) -> Result<Image> {
        let (_, c, h, w) = t.dims4();
        let data = t.data()[n * c * h * w..][..c * h * w]
            .iter()
            .map(|v| v.as_f64() as f32)
            .collect();
        Image::new(c, h, w, data)
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let decoded = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let (channels, raw, w, h) = if decoded.color().has_color() {
            let rgb = decoded.to_rgb8();
            let (w, h) = rgb.dimensions();
            (3, rgb.into_raw(), w as usize, h as usize)
        } else {
            let l = decoded.to_luma8();
            let (w, h) = l.dimensions();
            (1, l.into_raw(), w as usize, h as usize)
        };
        let mut data = vec![0.0f32; channels * w * h];
        for (i, px) in raw.chunks(channels).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                data[c * w * h + i] = v as f32 / 255.0;
            }
        }
        Image::new(channels, h, w, data)
    }

    /// 8-bit quantized interleaved samples: clamp to `[0, 1]`, scale by 255 and
    /// round half away from zero.
    pub fn to_u8_interleaved(&self) -> Vec<u8> {
        let plane = self.pixel_count();
        let mut out = vec![0u8; plane * self.channels];
        for c in 0..self.channels {
            for i in 0..plane {
                let v = self.data[c * plane + i].clamp(0.0, 1.0) as f64 * 255.0;
                out[i * self.channels + c] = v.round() as u8;
            }
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let color = if self.channels == 3 {
            image::ExtendedColorType::Rgb8
        } else {
            image::ExtendedColorType::L8
        };
        image::save_buffer(
            path,
            &self.to_u8_interleaved(),
            self.width as u32,
            self.height as u32,
            color,
        )
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Index reflection about the edges without repeating the edge sample.
pub(crate) fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(c: usize, h: usize, w: usize) -> Image {
        let data = (0..c * h * w).map(|v| v as f32 / (c * h * w) as f32).collect();
        Image::new(c, h, w, data).unwrap()
    }

    #[test]
    fn reflect_skips_edge() {
        let idx: Vec<usize> = (0..8).map(|i| reflect(i, 3)).collect();
        assert_eq!(idx, vec![0, 1, 2, 1, 0, 1, 2, 1]);
    }

    #[test]
    fn mirror_pad_keeps_original_and_reflects() {
        let img = ramp(1, 2, 3);
        let p = img.mirror_pad(4, 4).unwrap();
        assert_eq!(p.crop(0, 0, 2, 3).unwrap(), img);
        assert_eq!(p.get(0, 2, 0), img.get(0, 0, 0));
        assert_eq!(p.get(0, 0, 3), img.get(0, 0, 1));
    }

    #[test]
    fn rot90_four_times_is_identity() {
        let img = ramp(3, 2, 5);
        let r = img.rot90(1);
        assert_eq!((r.height(), r.width()), (5, 2));
        assert_eq!(r.rot90(3), img);
        assert_eq!(img.rot90(2).rot90(2), img);
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let img = ramp(3, 4, 5);
        img.save_png(&path).unwrap();
        let back = Image::load_png(&path).unwrap();
        assert!(back.same_shape(&img));
        for (a, b) in back.data().iter().zip(img.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn quantization_rounds_half_away_and_clamps() {
        let img = Image::new(1, 1, 4, vec![0.6 / 255.0, -0.2, 1.7, 0.5]).unwrap();
        // 0.5 * 255 = 127.5 exactly, rounds up
        assert_eq!(img.to_u8_interleaved(), vec![1, 0, 255, 128]);
    }
}
