//! Machine-readable capture timestamp burned into the panorama.
//!
//! 96 bits: 64-bit capture time (ns), 16-bit sequence, then CRC-16/CCITT-FALSE
//! over those 80 bits. Bits are laid out MSB-first, row-major, in a 12×8 grid
//! of 8×8 px cells (black = 0, white = 1) surrounded by a one-cell white
//! border, anchored at the panorama's top-left corner. The grid is aligned to
//! the BLOCK codec's 8×8 tiles, so block coding leaves it intact.

use thiserror::Error;

use crate::image::RgbImage;

pub const CELL_PX: u32 = 8;
pub const GRID_COLS: u32 = 12;
pub const GRID_ROWS: u32 = 8;
/// Footprint including the quiet border.
pub const MARK_WIDTH: u32 = (GRID_COLS + 2) * CELL_PX;
pub const MARK_HEIGHT: u32 = (GRID_ROWS + 2) * CELL_PX;

const WHITE: [u8; 3] = [255, 255, 255];
const BLACK: [u8; 3] = [0, 0, 0];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WatermarkError {
    #[error("image {0}x{1} is too small for the watermark")]
    TooSmall(u32, u32),
    #[error("quiet border not found")]
    Geometry,
    #[error("crc mismatch (stored {stored:#06x}, computed {computed:#06x})")]
    Crc { stored: u16, computed: u16 },
}

const fn crc_table() -> [u16; 256] {
    let mut table = [0u16; 256];
    let mut i = 0;
    while i < 256 {
        let mut c = (i as u16) << 8;
        let mut k = 0;
        while k < 8 {
            c = if c & 0x8000 != 0 { (c << 1) ^ 0x1021 } else { c << 1 };
            k += 1;
        }
        table[i] = c;
        i += 1;
    }
    table
}

static CRC_TABLE: [u16; 256] = crc_table();

/// CRC-16/CCITT-FALSE: poly 0x1021, init 0xFFFF, no reflection, no final xor.
pub fn crc16_ccitt_false(data: &[u8]) -> u16 {
    data.iter().fold(0xFFFF, |crc, &b| {
        (crc << 8) ^ CRC_TABLE[((crc >> 8) as u8 ^ b) as usize]
    })
}

fn payload_bytes(t_ns: u64, seq: u16) -> [u8; 10] {
    let mut b = [0u8; 10];
    b[..8].copy_from_slice(&t_ns.to_be_bytes());
    b[8..].copy_from_slice(&seq.to_be_bytes());
    b
}

/// The 96 cell bits, MSB-first.
pub fn watermark_bits(t_ns: u64, seq: u16) -> [bool; 96] {
    let body = payload_bytes(t_ns, seq);
    let crc = crc16_ccitt_false(&body);
    let mut bytes = [0u8; 12];
    bytes[..10].copy_from_slice(&body);
    bytes[10..].copy_from_slice(&crc.to_be_bytes());
    let mut bits = [false; 96];
    for (i, bit) in bits.iter_mut().enumerate() {
        *bit = bytes[i / 8] & (0x80 >> (i % 8)) != 0;
    }
    bits
}

fn fill_cell(img: &mut RgbImage, col: u32, row: u32, rgb: [u8; 3]) {
    for y in row * CELL_PX..(row + 1) * CELL_PX {
        for x in col * CELL_PX..(col + 1) * CELL_PX {
            img.put_pixel(x, y, rgb);
        }
    }
}

/// Writes the mark for `(t_ns, seq)` into the top-left corner.
pub fn embed_watermark(img: &mut RgbImage, t_ns: u64, seq: u16) -> Result<(), WatermarkError> {
    if img.width() < MARK_WIDTH || img.height() < MARK_HEIGHT {
        return Err(WatermarkError::TooSmall(img.width(), img.height()));
    }
    for row in 0..GRID_ROWS + 2 {
        for col in 0..GRID_COLS + 2 {
            fill_cell(img, col, row, WHITE);
        }
    }
    for (i, bit) in watermark_bits(t_ns, seq).iter().enumerate() {
        let (col, row) = (i as u32 % GRID_COLS, i as u32 / GRID_COLS);
        fill_cell(img, col + 1, row + 1, if *bit { WHITE } else { BLACK });
    }
    Ok(())
}

/// Mean luma of a cell's interior 4×4 pixels, so slight blur at cell edges
/// does not matter.
fn cell_level(img: &RgbImage, col: u32, row: u32) -> f32 {
    let mut sum = 0f32;
    let inset = CELL_PX / 4;
    for y in row * CELL_PX + inset..(row + 1) * CELL_PX - inset {
        for x in col * CELL_PX + inset..(col + 1) * CELL_PX - inset {
            let p = img.pixel(x, y);
            sum += (p[0] as f32 + p[1] as f32 + p[2] as f32) / 3.0;
        }
    }
    let n = (CELL_PX - 2 * inset).pow(2) as f32;
    sum / n
}

/// Reads `(t_ns, seq)` back. Cells are thresholded at mid-gray.
pub fn extract_watermark(img: &RgbImage) -> Result<(u64, u16), WatermarkError> {
    if img.width() < MARK_WIDTH || img.height() < MARK_HEIGHT {
        return Err(WatermarkError::TooSmall(img.width(), img.height()));
    }
    const THRESHOLD: f32 = 128.0;
    for row in 0..GRID_ROWS + 2 {
        for col in 0..GRID_COLS + 2 {
            let border = row == 0 || col == 0 || row == GRID_ROWS + 1 || col == GRID_COLS + 1;
            if border && cell_level(img, col, row) < THRESHOLD {
                return Err(WatermarkError::Geometry);
            }
        }
    }
    let mut bytes = [0u8; 12];
    for i in 0..96u32 {
        let (col, row) = (i % GRID_COLS, i / GRID_COLS);
        if cell_level(img, col + 1, row + 1) >= THRESHOLD {
            bytes[(i / 8) as usize] |= 0x80 >> (i % 8);
        }
    }
    let stored = u16::from_be_bytes([bytes[10], bytes[11]]);
    let computed = crc16_ccitt_false(&bytes[..10]);
    if stored != computed {
        return Err(WatermarkError::Crc { stored, computed });
    }
    let t = u64::from_be_bytes(bytes[..8].try_into().unwrap());
    let seq = u16::from_be_bytes([bytes[8], bytes[9]]);
    Ok((t, seq))
}
