//! Channel blob layout (all little-endian):
//!
//! ```text
//! u32 height, u32 width
//! f32 depth[H*W]
//! f32 normal[H*W*3]
//! i32 instance[H*W]
//! f32 color[H*W*3]
//! ```
//! Arrays are row-major; vector channels are interleaved per pixel.

use std::io::{Read, Write};
use std::path::Path;

use super::raster::ChannelMaps;
use super::scene::Scene;
use crate::error::{Error, Result};

pub fn encode_channels(maps: &ChannelMaps) -> Vec<u8> {
    let n = maps.width * maps.height;
    let mut out = Vec::with_capacity(8 + n * 32);
    out.extend_from_slice(&(maps.height as u32).to_le_bytes());
    out.extend_from_slice(&(maps.width as u32).to_le_bytes());
    for d in &maps.depth {
        out.extend_from_slice(&d.to_le_bytes());
    }
    for n in &maps.normal {
        for c in n {
            out.extend_from_slice(&c.to_le_bytes());
        }
    }
    for i in &maps.instance {
        out.extend_from_slice(&i.to_le_bytes());
    }
    for c in &maps.color {
        for v in c {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_channels(bytes: &[u8]) -> Result<ChannelMaps> {
    let bad = |m: &str| Error::Dataset(format!("channel blob: {m}"));
    if bytes.len() < 8 {
        return Err(bad("truncated header"));
    }
    let word = |k: usize| -> [u8; 4] { [bytes[k], bytes[k + 1], bytes[k + 2], bytes[k + 3]] };
    let height = u32::from_le_bytes(word(0)) as usize;
    let width = u32::from_le_bytes(word(4)) as usize;
    let n = width * height;
    if bytes.len() != 8 + n * 32 {
        return Err(bad(&format!("expected {} bytes for {width}x{height}, got {}", 8 + n * 32, bytes.len())));
    }
    let f = |k: usize| f32::from_le_bytes(word(k));
    let mut maps = ChannelMaps::empty(width, height);
    let mut at = 8;
    for d in maps.depth.iter_mut() {
        *d = f(at);
        at += 4;
    }
    for v in maps.normal.iter_mut() {
        for c in v.iter_mut() {
            *c = f(at);
            at += 4;
        }
    }
    for i in maps.instance.iter_mut() {
        *i = i32::from_le_bytes(word(at));
        at += 4;
    }
    for v in maps.color.iter_mut() {
        for c in v.iter_mut() {
            *c = f(at);
            at += 4;
        }
    }
    Ok(maps)
}

pub fn write_channels(path: &Path, maps: &ChannelMaps) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_channels(maps))?;
    Ok(())
}

pub fn read_channels(path: &Path) -> Result<ChannelMaps> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    decode_channels(&buf)
}

pub fn write_scene(path: &Path, scene: &Scene) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(scene)?)?;
    Ok(())
}

pub fn read_scene(path: &Path) -> Result<Scene> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn channel_blob_round_trip(w in 1usize..6, h in 1usize..6, seed in any::<u32>()) {
            let mut m = ChannelMaps::empty(w, h);
            for k in 0..w * h {
                let v = (seed as f32 + k as f32) * 0.37;
                m.depth[k] = v;
                m.normal[k] = [v, -v, 0.5];
                m.instance[k] = (k as i32) - 2;
                m.color[k] = [0.1, v.fract(), 0.9];
            }
            let bytes = encode_channels(&m);
            prop_assert_eq!(bytes.len(), 8 + w * h * 32);
            prop_assert_eq!(decode_channels(&bytes).unwrap(), m);
        }
    }

    #[test]
    fn header_is_height_then_width() {
        let bytes = encode_channels(&ChannelMaps::empty(3, 2));
        assert_eq!(&bytes[0..4], &2u32.to_le_bytes());
        assert_eq!(&bytes[4..8], &3u32.to_le_bytes());
        assert!(decode_channels(&bytes[..10]).is_err());
    }
}
