//! PNG figures of a generated roll stacked above its original.
//!
//! Each row holds one panel per instrument, left to right in channel order.
//! Within a panel time runs left to right and pitch bottom to top.

use image::{ImageBuffer, ImageEncoder, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::roll::Pianoroll;

pub const BACKGROUND: [u8; 3] = [255, 255, 255];
pub const SEPARATOR: [u8; 3] = [200, 200, 200];

#[derive(Debug, Clone, PartialEq)]
pub struct RenderSpec {
    /// One color per channel.
    pub colors: Vec<[u8; 3]>,
    /// Pixels per cell side.
    pub scale: u32,
    /// Separator width between panels and between the two rows.
    pub gap: u32,
}

impl Default for RenderSpec {
    fn default() -> Self {
        Self {
            colors: vec![
                [31, 119, 180],  // piano
                [255, 127, 14],  // guitar
                [44, 160, 44],   // bass
                [214, 39, 40],   // string
                [148, 103, 189], // drum
            ],
            scale: 2,
            gap: 2,
        }
    }
}

impl RenderSpec {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.scale == 0 {
            return Err(Error::config("render scale must be positive"));
        }
        if self.colors.len() < channels {
            return Err(Error::config(format!("{} colors for {channels} channels", self.colors.len())));
        }
        for (i, a) in self.colors.iter().enumerate() {
            if *a == BACKGROUND || *a == SEPARATOR || self.colors[..i].contains(a) {
                return Err(Error::config("instrument colors must be distinct from each other and the background"));
            }
        }
        Ok(())
    }

    /// `(width, height)` of the image for rolls of `time x pitch x channels`.
    pub fn image_size(&self, time: usize, pitch: usize, channels: usize) -> (u32, u32) {
        let panel_w = time as u32 * self.scale;
        let panel_h = pitch as u32 * self.scale;
        (
            channels as u32 * panel_w + (channels as u32).saturating_sub(1) * self.gap,
            2 * panel_h + self.gap,
        )
    }

    /// Top-left pixel of cell `(t, p)` of channel `c`; `row` 0 is the
    /// generated roll and 1 the original.
    pub fn cell_origin(&self, row: usize, t: usize, p: usize, c: usize, time: usize, pitch: usize) -> (u32, u32) {
        let panel_w = time as u32 * self.scale;
        let panel_h = pitch as u32 * self.scale;
        let x = c as u32 * (panel_w + self.gap) + t as u32 * self.scale;
        let y = row as u32 * (panel_h + self.gap) + (pitch - 1 - p) as u32 * self.scale;
        (x, y)
    }
}

pub fn render(generated: &Pianoroll, original: &Pianoroll, spec: &RenderSpec) -> Result<RgbImage> {
    let d = generated.dims();
    if d != original.dims() {
        return Err(Error::contract(format!(
            "cannot stack rolls of shapes {:?} and {:?}",
            [d.time, d.pitch, d.channels],
            [original.dims().time, original.dims().pitch, original.dims().channels]
        )));
    }
    spec.validate(d.channels)?;
    let (w, h) = spec.image_size(d.time, d.pitch, d.channels);
    let mut img: RgbImage = ImageBuffer::from_pixel(w, h, Rgb(SEPARATOR));
    for (row, roll) in [generated, original].into_iter().enumerate() {
        for c in 0..d.channels {
            for t in 0..d.time {
                for p in 0..d.pitch {
                    let color = if roll.get(t, p, c) { spec.colors[c] } else { BACKGROUND };
                    let (x0, y0) = spec.cell_origin(row, t, p, c, d.time, d.pitch);
                    for dy in 0..spec.scale {
                        for dx in 0..spec.scale {
                            img.put_pixel(x0 + dx, y0 + dy, Rgb(color));
                        }
                    }
                }
            }
        }
    }
    Ok(img)
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out).write_image(
        img.as_raw(),
        img.width(),
        img.height(),
        image::ExtendedColorType::Rgb8,
    )?;
    Ok(out)
}

pub fn render_png(generated: &Pianoroll, original: &Pianoroll, spec: &RenderSpec) -> Result<Vec<u8>> {
    encode_png(&render(generated, original, spec)?)
}
