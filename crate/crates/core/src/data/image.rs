//! Minimal image helpers: header decoding, grayscale PNG encoding with text
//! chunks, and pixel comparison.

use std::collections::BTreeMap;
use std::io::Cursor;

use ::image::{ImageFormat, ImageReader};

use super::types::MediaType;

fn format(media_type: MediaType) -> ImageFormat {
    match media_type {
        MediaType::Jpeg => ImageFormat::Jpeg,
        MediaType::Png => ImageFormat::Png,
    }
}

/// Width and height from the image header, if it decodes.
pub fn dimensions(bytes: &[u8], media_type: MediaType) -> Option<(u32, u32)> {
    if bytes.is_empty() {
        return None;
    }
    let reader = ImageReader::with_format(Cursor::new(bytes), format(media_type));
    match reader.into_dimensions() {
        Ok((w, h)) if w > 0 && h > 0 => Some((w, h)),
        _ => None,
    }
}

/// Encodes an 8-bit grayscale PNG with optional UTF-8 text chunks.
pub fn encode_gray_png(width: u32, height: u32, pixels: &[u8], text: &[(&str, &str)]) -> Vec<u8> {
    assert_eq!(pixels.len(), (width * height) as usize, "pixel buffer size");
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width, height);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        for (k, v) in text {
            enc.add_itxt_chunk((*k).to_string(), (*v).to_string())
                .expect("itxt chunk");
        }
        let mut w = enc.write_header().expect("png header");
        w.write_image_data(pixels).expect("png data");
        w.finish().expect("png finish");
    }
    out
}

/// UTF-8 and Latin-1 text chunks of a PNG. Empty for anything else.
pub fn png_text(bytes: &[u8]) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let Ok(reader) = png::Decoder::new(Cursor::new(bytes)).read_info() else {
        return out;
    };
    let info = reader.info();
    for chunk in &info.uncompressed_latin1_text {
        out.insert(chunk.keyword.clone(), chunk.text.clone());
    }
    for chunk in &info.utf8_text {
        if let Ok(text) = chunk.get_text() {
            out.insert(chunk.keyword.clone(), text);
        }
    }
    out
}

/// Decodes any supported image to 8-bit luma.
pub fn decode_luma(bytes: &[u8]) -> Option<(u32, u32, Vec<u8>)> {
    let img = ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()
        .ok()?
        .decode()
        .ok()?
        .into_luma8();
    Some((img.width(), img.height(), img.into_raw()))
}

/// Fraction of pixel positions with identical luma. `None` when either
/// image fails to decode or the dimensions differ.
pub fn pixel_agreement(a: &[u8], b: &[u8]) -> Option<f64> {
    let (wa, ha, pa) = decode_luma(a)?;
    let (wb, hb, pb) = decode_luma(b)?;
    if (wa, ha) != (wb, hb) || pa.is_empty() {
        return None;
    }
    let same = pa.iter().zip(&pb).filter(|(x, y)| x == y).count();
    Some(same as f64 / pa.len() as f64)
}
