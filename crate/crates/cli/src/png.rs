//! Grayscale 8-bit PNG encoding with uncompressed deflate blocks.

use std::path::Path;

/// Row-major 8-bit grayscale image.
#[derive(Debug, Clone, PartialEq)]
pub struct Gray {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Gray {
    pub fn new(width: usize, height: usize, fill: u8) -> Self {
        Self {
            width,
            height,
            pixels: vec![fill; width * height],
        }
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        if x < self.width && y < self.height {
            self.pixels[y * self.width + x] = v;
        }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    /// Copies `tile` with its top-left corner at `(x0, y0)`.
    pub fn blit(&mut self, tile: &Gray, x0: usize, y0: usize) {
        for y in 0..tile.height {
            for x in 0..tile.width {
                self.set(x0 + x, y0 + y, tile.get(x, y));
            }
        }
    }

    pub fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), v: u8) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            if x >= 0 && y >= 0 {
                self.set(x as usize, y as usize, v);
            }
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut raw = Vec::with_capacity((self.width + 1) * self.height);
        for row in self.pixels.chunks(self.width.max(1)) {
            raw.push(0);
            raw.extend_from_slice(row);
        }
        let mut out = b"\x89PNG\r\n\x1a\n".to_vec();
        let mut ihdr = Vec::with_capacity(13);
        ihdr.extend_from_slice(&(self.width as u32).to_be_bytes());
        ihdr.extend_from_slice(&(self.height as u32).to_be_bytes());
        ihdr.extend_from_slice(&[8, 0, 0, 0, 0]);
        chunk(&mut out, b"IHDR", &ihdr);
        chunk(&mut out, b"IDAT", &zlib_stored(&raw));
        chunk(&mut out, b"IEND", &[]);
        out
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.encode())
    }
}

fn chunk(out: &mut Vec<u8>, kind: &[u8; 4], data: &[u8]) {
    out.extend_from_slice(&(data.len() as u32).to_be_bytes());
    let start = out.len();
    out.extend_from_slice(kind);
    out.extend_from_slice(data);
    let crc = crc32fast::hash(&out[start..]);
    out.extend_from_slice(&crc.to_be_bytes());
}

fn adler32(data: &[u8]) -> u32 {
    let (mut a, mut b) = (1u32, 0u32);
    for &v in data {
        a = (a + v as u32) % 65521;
        b = (b + a) % 65521;
    }
    (b << 16) | a
}

fn zlib_stored(data: &[u8]) -> Vec<u8> {
    let mut out = vec![0x78, 0x01];
    let mut blocks = data.chunks(65535).peekable();
    if blocks.peek().is_none() {
        out.extend_from_slice(&[1, 0, 0, 0xff, 0xff]);
    }
    while let Some(block) = blocks.next() {
        out.push(u8::from(blocks.peek().is_none()));
        let len = block.len() as u16;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&(!len).to_le_bytes());
        out.extend_from_slice(block);
    }
    out.extend_from_slice(&adler32(data).to_be_bytes());
    out
}

/// Width and height from an encoded PNG header.
#[cfg(test)]
pub fn dimensions(bytes: &[u8]) -> Option<(u32, u32)> {
    if bytes.len() < 24 || &bytes[..8] != b"\x89PNG\r\n\x1a\n" || &bytes[12..16] != b"IHDR" {
        return None;
    }
    let w = u32::from_be_bytes(bytes[16..20].try_into().ok()?);
    let h = u32::from_be_bytes(bytes[20..24].try_into().ok()?);
    Some((w, h))
}

/// Decodes images written by [`Gray::encode`].
#[cfg(test)]
pub fn decode(bytes: &[u8]) -> Option<Gray> {
    let (w, h) = dimensions(bytes)?;
    let (w, h) = (w as usize, h as usize);
    let mut pos = 8;
    let mut zdata = Vec::new();
    while pos + 8 <= bytes.len() {
        let len = u32::from_be_bytes(bytes[pos..pos + 4].try_into().ok()?) as usize;
        let kind = &bytes[pos + 4..pos + 8];
        let body = bytes.get(pos + 8..pos + 8 + len)?;
        let crc = u32::from_be_bytes(bytes.get(pos + 8 + len..pos + 12 + len)?.try_into().ok()?);
        if crc32fast::hash(&bytes[pos + 4..pos + 8 + len]) != crc {
            return None;
        }
        if kind == b"IDAT" {
            zdata.extend_from_slice(body);
        }
        pos += 12 + len;
    }
    let mut raw = Vec::new();
    let mut p = 2;
    loop {
        let last = *zdata.get(p)? & 1;
        let len = u16::from_le_bytes(zdata.get(p + 1..p + 3)?.try_into().ok()?) as usize;
        raw.extend_from_slice(zdata.get(p + 5..p + 5 + len)?);
        p += 5 + len;
        if last == 1 {
            break;
        }
    }
    let sum = u32::from_be_bytes(zdata.get(p..p + 4)?.try_into().ok()?);
    if sum != adler32(&raw) || raw.len() != (w + 1) * h {
        return None;
    }
    let pixels = raw.chunks(w + 1).flat_map(|r| r[1..].to_vec()).collect();
    Some(Gray {
        width: w,
        height: h,
        pixels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adler_reference_value() {
        assert_eq!(adler32(b"Wikipedia"), 0x11E6_0398);
    }

    #[test]
    fn round_trip_small_and_multi_block_images() {
        for (w, h) in [(1, 1), (5, 3), (400, 300)] {
            let mut img = Gray::new(w, h, 0);
            for (i, p) in img.pixels.iter_mut().enumerate() {
                *p = (i * 7 % 251) as u8;
            }
            let bytes = img.encode();
            assert_eq!(dimensions(&bytes), Some((w as u32, h as u32)));
            assert_eq!(decode(&bytes).unwrap(), img);
        }
    }

    #[test]
    fn corrupted_bytes_are_detected() {
        let mut bytes = Gray::new(4, 4, 9).encode();
        let n = bytes.len();
        bytes[n - 20] ^= 1;
        assert!(decode(&bytes).is_none());
    }

    #[test]
    fn lines_hit_both_endpoints() {
        let mut img = Gray::new(10, 10, 0);
        img.line((1, 8), (7, 2), 255);
        assert_eq!(img.get(1, 8), 255);
        assert_eq!(img.get(7, 2), 255);
        assert_eq!(img.pixels.iter().filter(|&&v| v == 255).count(), 7);
    }
}
