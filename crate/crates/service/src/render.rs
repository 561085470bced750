//! PNG rendering of multi-channel patches. Quantization here is for display
//! only; sessions always train on the full-precision pixels.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;

use crate::error::ApiError;

/// Map `[0, 1]` to `0..=255`, clamping out-of-range values.
pub fn quantize(v: f64) -> u8 {
    if v.is_nan() {
        return 0;
    }
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode(width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<Vec<u8>, ApiError> {
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| ApiError::Internal(e.to_string()))?;
    writer.write_image_data(data).map_err(|e| ApiError::Internal(e.to_string()))?;
    writer.finish().map_err(|e| ApiError::Internal(e.to_string()))?;
    Ok(out)
}

/// One grayscale PNG per channel of an `[h, w, c]` row-major patch.
pub fn channel_pngs(patch: &[f64], shape: (usize, usize, usize)) -> Result<Vec<Vec<u8>>, ApiError> {
    let (h, w, c) = shape;
    (0..c)
        .map(|ch| {
            let gray: Vec<u8> = (0..h * w).map(|p| quantize(patch[p * c + ch])).collect();
            encode(w, h, png::ColorType::Grayscale, &gray)
        })
        .collect()
}

/// RGB PNG built from three channels of the patch.
pub fn composite_png(patch: &[f64], shape: (usize, usize, usize), rgb: [usize; 3]) -> Result<Vec<u8>, ApiError> {
    let (h, w, c) = shape;
    if let Some(&bad) = rgb.iter().find(|&&ch| ch >= c) {
        return Err(ApiError::BadRequest(format!("composite channel {bad} >= {c} channels")));
    }
    let mut data = Vec::with_capacity(h * w * 3);
    for p in 0..h * w {
        data.extend(rgb.iter().map(|&ch| quantize(patch[p * c + ch])));
    }
    encode(w, h, png::ColorType::Rgb, &data)
}

pub fn base64_png(bytes: &[u8]) -> String {
    STANDARD.encode(bytes)
}

/// The first three channels, or fewer repeated when the patch has less.
pub fn default_composite(channels: usize) -> [usize; 3] {
    let last = channels.saturating_sub(1);
    [0, 1.min(last), 2.min(last)]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decode(bytes: &[u8]) -> (png::OutputInfo, Vec<u8>) {
        let mut reader = png::Decoder::new(std::io::Cursor::new(bytes)).read_info().unwrap();
        let mut buf = vec![0; reader.output_buffer_size().unwrap()];
        let info = reader.next_frame(&mut buf).unwrap();
        buf.truncate(info.buffer_size());
        (info, buf)
    }

    #[test]
    fn quantize_clamps_and_rounds() {
        assert_eq!(quantize(-0.5), 0);
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(7.0), 255);
        assert_eq!(quantize(f64::NAN), 0);
    }

    #[test]
    fn channels_decode_to_their_pixels() {
        // 2x3 patch, 2 channels: channel 0 ramps, channel 1 is constant.
        let patch: Vec<f64> = (0..6).flat_map(|p| [p as f64 / 5.0, 1.0]).collect();
        let pngs = channel_pngs(&patch, (2, 3, 2)).unwrap();
        assert_eq!(pngs.len(), 2);
        let (info, px) = decode(&pngs[0]);
        assert_eq!((info.width, info.height), (3, 2));
        assert_eq!(px, vec![0, 51, 102, 153, 204, 255]);
        assert_eq!(decode(&pngs[1]).1, vec![255; 6]);
    }

    #[test]
    fn composite_maps_channels_to_rgb() {
        let patch = vec![0.0, 0.2, 0.4, 1.0];
        let (info, px) = decode(&composite_png(&patch, (1, 1, 4), [3, 0, 2]).unwrap());
        assert_eq!(info.color_type, png::ColorType::Rgb);
        assert_eq!(px, vec![255, 0, 102]);
        assert!(composite_png(&patch, (1, 1, 4), [4, 0, 0]).is_err());
        assert_eq!(default_composite(7), [0, 1, 2]);
        assert_eq!(default_composite(1), [0, 0, 0]);
    }
}
