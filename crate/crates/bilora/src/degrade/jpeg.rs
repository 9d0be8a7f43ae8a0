//! Baseline sequential JPEG, both directions, self-contained.
//!
//! The encoder produces ordinary JFIF files: 4:2:0 chroma subsampling, the
//! standard quantization and Huffman tables, quality mapped to table
//! scaling the conventional way (`scale = 5000/q` below 50, else
//! `200 - 2q`, entry `clamp(floor((T*scale + 50) / 100), 1, 255)`). The
//! decoder reads what the encoder writes plus any other baseline file with
//! up to 2x2 sampling factors. Owning both halves keeps the degradation
//! deterministic down to the byte and the quality semantics testable.
//!
//! The transform operates on the 8-bit quantized image, like a file saved
//! and reloaded by a normal tool chain.

use std::f64::consts::FRAC_1_SQRT_2;
use std::sync::OnceLock;

use crate::data::ImageBuf;
use crate::scalar::Scalar;
use crate::{Error, Result};

// ── Tables ──────────────────────────────────────────────────────────────

/// Base luminance quantization table, natural (row-major) order.
const BASE_LUMA_Q: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Base chrominance quantization table, natural order.
const BASE_CHROMA_Q: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99, //
    18, 21, 26, 66, 99, 99, 99, 99, //
    24, 26, 56, 99, 99, 99, 99, 99, //
    47, 66, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99,
];

/// Zigzag position i holds the natural index it visits.
const ZIGZAG: [usize; 64] = [
    0, 1, 8, 16, 9, 2, 3, 10, //
    17, 24, 32, 25, 18, 11, 4, 5, //
    12, 19, 26, 33, 40, 48, 41, 34, //
    27, 20, 13, 6, 7, 14, 21, 28, //
    35, 42, 49, 56, 57, 50, 43, 36, //
    29, 22, 15, 23, 30, 37, 44, 51, //
    58, 59, 52, 45, 38, 31, 39, 46, //
    53, 60, 61, 54, 47, 55, 62, 63,
];

/// Huffman table blueprint: code-length histogram plus values in code
/// order, exactly as serialized in a DHT segment.
struct HuffSpec {
    bits: [u8; 16],
    vals: &'static [u8],
}

const DC_LUMA: HuffSpec = HuffSpec {
    bits: [0, 1, 5, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0],
    vals: &[0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11],
};

const DC_CHROMA: HuffSpec = HuffSpec {
    bits: [0, 3, 1, 1, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0],
    vals: &[0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11],
};

const AC_LUMA: HuffSpec = HuffSpec {
    bits: [0, 2, 1, 3, 3, 2, 4, 3, 5, 5, 4, 4, 0, 0, 1, 0x7d],
    vals: &[
        0x01, 0x02, 0x03, 0x00, 0x04, 0x11, 0x05, 0x12, 0x21, 0x31, 0x41, 0x06, 0x13, 0x51, 0x61,
        0x07, 0x22, 0x71, 0x14, 0x32, 0x81, 0x91, 0xa1, 0x08, 0x23, 0x42, 0xb1, 0xc1, 0x15, 0x52,
        0xd1, 0xf0, 0x24, 0x33, 0x62, 0x72, 0x82, 0x09, 0x0a, 0x16, 0x17, 0x18, 0x19, 0x1a, 0x25,
        0x26, 0x27, 0x28, 0x29, 0x2a, 0x34, 0x35, 0x36, 0x37, 0x38, 0x39, 0x3a, 0x43, 0x44, 0x45,
        0x46, 0x47, 0x48, 0x49, 0x4a, 0x53, 0x54, 0x55, 0x56, 0x57, 0x58, 0x59, 0x5a, 0x63, 0x64,
        0x65, 0x66, 0x67, 0x68, 0x69, 0x6a, 0x73, 0x74, 0x75, 0x76, 0x77, 0x78, 0x79, 0x7a, 0x83,
        0x84, 0x85, 0x86, 0x87, 0x88, 0x89, 0x8a, 0x92, 0x93, 0x94, 0x95, 0x96, 0x97, 0x98, 0x99,
        0x9a, 0xa2, 0xa3, 0xa4, 0xa5, 0xa6, 0xa7, 0xa8, 0xa9, 0xaa, 0xb2, 0xb3, 0xb4, 0xb5, 0xb6,
        0xb7, 0xb8, 0xb9, 0xba, 0xc2, 0xc3, 0xc4, 0xc5, 0xc6, 0xc7, 0xc8, 0xc9, 0xca, 0xd2, 0xd3,
        0xd4, 0xd5, 0xd6, 0xd7, 0xd8, 0xd9, 0xda, 0xe1, 0xe2, 0xe3, 0xe4, 0xe5, 0xe6, 0xe7, 0xe8,
        0xe9, 0xea, 0xf1, 0xf2, 0xf3, 0xf4, 0xf5, 0xf6, 0xf7, 0xf8, 0xf9, 0xfa,
    ],
};

const AC_CHROMA: HuffSpec = HuffSpec {
    bits: [0, 2, 1, 2, 4, 4, 3, 4, 7, 5, 4, 4, 0, 1, 2, 0x77],
    vals: &[
        0x00, 0x01, 0x02, 0x03, 0x11, 0x04, 0x05, 0x21, 0x31, 0x06, 0x12, 0x41, 0x51, 0x07, 0x61,
        0x71, 0x13, 0x22, 0x32, 0x81, 0x08, 0x14, 0x42, 0x91, 0xa1, 0xb1, 0xc1, 0x09, 0x23, 0x33,
        0x52, 0xf0, 0x15, 0x62, 0x72, 0xd1, 0x0a, 0x16, 0x24, 0x34, 0xe1, 0x25, 0xf1, 0x17, 0x18,
        0x19, 0x1a, 0x26, 0x27, 0x28, 0x29, 0x2a, 0x35, 0x36, 0x37, 0x38, 0x39, 0x3a, 0x43, 0x44,
        0x45, 0x46, 0x47, 0x48, 0x49, 0x4a, 0x53, 0x54, 0x55, 0x56, 0x57, 0x58, 0x59, 0x5a, 0x63,
        0x64, 0x65, 0x66, 0x67, 0x68, 0x69, 0x6a, 0x73, 0x74, 0x75, 0x76, 0x77, 0x78, 0x79, 0x7a,
        0x82, 0x83, 0x84, 0x85, 0x86, 0x87, 0x88, 0x89, 0x8a, 0x92, 0x93, 0x94, 0x95, 0x96, 0x97,
        0x98, 0x99, 0x9a, 0xa2, 0xa3, 0xa4, 0xa5, 0xa6, 0xa7, 0xa8, 0xa9, 0xaa, 0xb2, 0xb3, 0xb4,
        0xb5, 0xb6, 0xb7, 0xb8, 0xb9, 0xba, 0xc2, 0xc3, 0xc4, 0xc5, 0xc6, 0xc7, 0xc8, 0xc9, 0xca,
        0xd2, 0xd3, 0xd4, 0xd5, 0xd6, 0xd7, 0xd8, 0xd9, 0xda, 0xe2, 0xe3, 0xe4, 0xe5, 0xe6, 0xe7,
        0xe8, 0xe9, 0xea, 0xf2, 0xf3, 0xf4, 0xf5, 0xf6, 0xf7, 0xf8, 0xf9, 0xfa,
    ],
};

/// Quality-scaled (luminance, chrominance) tables in natural order.
pub fn scaled_quant_tables(quality: u8) -> Result<([u16; 64], [u16; 64])> {
    if !(1..=100).contains(&quality) {
        return Err(Error::contract(
            "jpeg",
            format!("quality must lie in 1..=100, got {quality}"),
        ));
    }
    let scale: u32 = if quality < 50 {
        5000 / quality as u32
    } else {
        200 - 2 * quality as u32
    };
    let apply = |base: &[u16; 64]| {
        let mut t = [0u16; 64];
        for (dst, &src) in t.iter_mut().zip(base) {
            *dst = ((src as u32 * scale + 50) / 100).clamp(1, 255) as u16;
        }
        t
    };
    Ok((apply(&BASE_LUMA_Q), apply(&BASE_CHROMA_Q)))
}

// ── DCT ─────────────────────────────────────────────────────────────────

/// `COS[x][u] = cos((2x + 1) u pi / 16)`, shared by both directions.
fn cos_table() -> &'static [[f64; 8]; 8] {
    static TABLE: OnceLock<[[f64; 8]; 8]> = OnceLock::new();
    TABLE.get_or_init(|| {
        std::array::from_fn(|x| {
            std::array::from_fn(|u| (((2 * x + 1) * u) as f64 * std::f64::consts::PI / 16.0).cos())
        })
    })
}

fn cu(u: usize) -> f64 {
    if u == 0 {
        FRAC_1_SQRT_2
    } else {
        1.0
    }
}

/// Forward 8x8 DCT, natural-order samples in, natural-order coefficients
/// out. Separable: half-scaled 1-D passes over rows then columns.
fn fdct(block: &[f64; 64]) -> [f64; 64] {
    let cos = cos_table();
    let mut rows = [0.0f64; 64];
    for y in 0..8 {
        for u in 0..8 {
            let mut acc = 0.0;
            for x in 0..8 {
                acc += block[y * 8 + x] * cos[x][u];
            }
            rows[y * 8 + u] = 0.5 * cu(u) * acc;
        }
    }
    let mut out = [0.0f64; 64];
    for v in 0..8 {
        for u in 0..8 {
            let mut acc = 0.0;
            for y in 0..8 {
                acc += rows[y * 8 + u] * cos[y][v];
            }
            out[v * 8 + u] = 0.5 * cu(v) * acc;
        }
    }
    out
}

/// Inverse 8x8 DCT, natural-order coefficients in, samples out.
fn idct(coef: &[f64; 64]) -> [f64; 64] {
    let cos = cos_table();
    let mut rows = [0.0f64; 64];
    for v in 0..8 {
        for x in 0..8 {
            let mut acc = 0.0;
            for u in 0..8 {
                acc += 0.5 * cu(u) * coef[v * 8 + u] * cos[x][u];
            }
            rows[v * 8 + x] = acc;
        }
    }
    let mut out = [0.0f64; 64];
    for y in 0..8 {
        for x in 0..8 {
            let mut acc = 0.0;
            for v in 0..8 {
                acc += 0.5 * cu(v) * rows[v * 8 + x] * cos[y][v];
            }
            out[y * 8 + x] = acc;
        }
    }
    out
}

// ── Bit I/O with byte stuffing ──────────────────────────────────────────

struct BitWriter {
    out: Vec<u8>,
    acc: u32,
    nbits: u32,
}

impl BitWriter {
    fn new() -> Self {
        BitWriter {
            out: Vec::new(),
            acc: 0,
            nbits: 0,
        }
    }

    /// Append the low `n` bits of `bits`, most significant first.
    fn put(&mut self, bits: u32, n: u32) {
        debug_assert!(n <= 16, "at most 16 bits per emission");
        self.acc = (self.acc << n) | (bits & ((1u32 << n) - 1).max(0));
        self.nbits += n;
        while self.nbits >= 8 {
            let byte = (self.acc >> (self.nbits - 8)) as u8;
            self.out.push(byte);
            if byte == 0xFF {
                self.out.push(0x00);
            }
            self.nbits -= 8;
        }
    }

    /// Pad the final partial byte with 1-bits and return the stream.
    fn finish(mut self) -> Vec<u8> {
        if self.nbits > 0 {
            let pad = 8 - self.nbits;
            self.put((1 << pad) - 1, pad);
        }
        self.out
    }
}

struct BitReader<'a> {
    data: &'a [u8],
    pos: usize,
    acc: u32,
    nbits: u32,
}

impl<'a> BitReader<'a> {
    fn new(data: &'a [u8]) -> Self {
        BitReader {
            data,
            pos: 0,
            acc: 0,
            nbits: 0,
        }
    }

    fn bit(&mut self) -> Result<u32> {
        if self.nbits == 0 {
            let byte = *self
                .data
                .get(self.pos)
                .ok_or_else(|| Error::Jpeg("entropy stream ended early".into()))?;
            self.pos += 1;
            if byte == 0xFF {
                match self.data.get(self.pos) {
                    Some(0x00) => self.pos += 1,
                    _ => return Err(Error::Jpeg("marker inside entropy stream".into())),
                }
            }
            self.acc = byte as u32;
            self.nbits = 8;
        }
        self.nbits -= 1;
        Ok((self.acc >> self.nbits) & 1)
    }

    fn bits(&mut self, n: u32) -> Result<u32> {
        let mut v = 0;
        for _ in 0..n {
            v = (v << 1) | self.bit()?;
        }
        Ok(v)
    }
}

// ── Huffman coding ──────────────────────────────────────────────────────

/// Symbol -> (code, length) lookup for the encoder.
fn encoder_codes(spec: &HuffSpec) -> [Option<(u16, u32)>; 256] {
    let mut table = [None; 256];
    let mut code = 0u16;
    let mut k = 0;
    for (len_minus_1, &count) in spec.bits.iter().enumerate() {
        for _ in 0..count {
            table[spec.vals[k] as usize] = Some((code, len_minus_1 as u32 + 1));
            code += 1;
            k += 1;
        }
        code <<= 1;
    }
    table
}

/// Canonical-code decoder state: per-length code ranges into `vals`.
struct HuffDecoder {
    mincode: [i32; 17],
    maxcode: [i32; 17],
    valptr: [usize; 17],
    vals: Vec<u8>,
}

impl HuffDecoder {
    fn new(bits: &[u8; 16], vals: Vec<u8>) -> Self {
        let mut d = HuffDecoder {
            mincode: [0; 17],
            maxcode: [-1; 17],
            valptr: [0; 17],
            vals,
        };
        let mut code = 0i32;
        let mut k = 0usize;
        for l in 1..=16 {
            let count = bits[l - 1] as usize;
            if count > 0 {
                d.valptr[l] = k;
                d.mincode[l] = code;
                code += count as i32;
                k += count;
                d.maxcode[l] = code - 1;
            }
            code <<= 1;
        }
        d
    }

    fn decode(&self, br: &mut BitReader) -> Result<u8> {
        let mut code = br.bit()? as i32;
        let mut l = 1usize;
        while self.maxcode[l] < 0 || code > self.maxcode[l] {
            if l == 16 {
                return Err(Error::Jpeg("invalid Huffman code".into()));
            }
            code = (code << 1) | br.bit()? as i32;
            l += 1;
        }
        let idx = self.valptr[l] + (code - self.mincode[l]) as usize;
        self.vals
            .get(idx)
            .copied()
            .ok_or_else(|| Error::Jpeg("Huffman code outside value table".into()))
    }
}

/// Bits needed for the magnitude of `v` (0 for 0).
fn category(v: i32) -> u32 {
    32 - v.unsigned_abs().leading_zeros()
}

/// Low `size` bits appended after a (run, size) symbol.
fn magnitude_bits(v: i32, size: u32) -> u32 {
    let raw = if v < 0 { v - 1 } else { v };
    (raw as u32) & (((1u64 << size) - 1) as u32)
}

/// Inverse of [`magnitude_bits`]: sign-extend a `size`-bit field.
fn extend(raw: u32, size: u32) -> i32 {
    if size == 0 {
        return 0;
    }
    if raw < (1 << (size - 1)) {
        raw as i32 - (1 << size) + 1
    } else {
        raw as i32
    }
}

// ── Encoder ─────────────────────────────────────────────────────────────

const COMPONENT_IDS: [u8; 3] = [1, 2, 3];
/// (horizontal, vertical) sampling per component: 4:2:0.
const SAMPLING: [(usize, usize); 3] = [(2, 2), (1, 1), (1, 1)];

fn rgb_to_ycbcr(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    (
        0.299 * r + 0.587 * g + 0.114 * b,
        -0.168736 * r - 0.331264 * g + 0.5 * b + 128.0,
        0.5 * r - 0.418688 * g - 0.081312 * b + 128.0,
    )
}

fn ycbcr_to_rgb(y: f64, cb: f64, cr: f64) -> (f64, f64, f64) {
    (
        y + 1.402 * (cr - 128.0),
        y - 0.344136 * (cb - 128.0) - 0.714136 * (cr - 128.0),
        y + 1.772 * (cb - 128.0),
    )
}

fn push_segment(out: &mut Vec<u8>, marker: u8, payload: &[u8]) {
    out.push(0xFF);
    out.push(marker);
    let len = (payload.len() + 2) as u16;
    out.extend_from_slice(&len.to_be_bytes());
    out.extend_from_slice(payload);
}

/// Encode an RGB image as a baseline JFIF byte stream.
pub fn encode<F: Scalar>(img: &ImageBuf<F>, quality: u8) -> Result<Vec<u8>> {
    let (w, h) = (img.width(), img.height());
    if w == 0 || h == 0 {
        return Err(Error::contract("jpeg", "image must be non-empty"));
    }
    let rgb = img.to_rgb8()?;
    let (luma_q, chroma_q) = scaled_quant_tables(quality)?;

    // Full-resolution YCbCr planes from the quantized bytes.
    let mut full = vec![[0.0f64; 3]; w * h];
    for (i, px) in full.iter_mut().enumerate() {
        let (r, g, b) = (
            rgb[3 * i] as f64,
            rgb[3 * i + 1] as f64,
            rgb[3 * i + 2] as f64,
        );
        let (y, cb, cr) = rgb_to_ycbcr(r, g, b);
        *px = [y, cb, cr];
    }

    let mcus_x = w.div_ceil(16);
    let mcus_y = h.div_ceil(16);

    // Component planes padded to whole MCUs by edge replication. Chroma is
    // the mean of each 2x2 block, clamped at the image border.
    let mut planes: Vec<(Vec<f64>, usize, usize)> = Vec::new();
    for (ci, &(sh, sv)) in SAMPLING.iter().enumerate() {
        let pw = mcus_x * sh * 8;
        let ph = mcus_y * sv * 8;
        let cw = w.div_ceil(2 / sh);
        let chh = h.div_ceil(2 / sv);
        let sample = |cx: usize, cy: usize| -> f64 {
            if sh == 2 {
                full[cy.min(h - 1) * w + cx.min(w - 1)][ci]
            } else {
                let (x0, y0) = (2 * cx, 2 * cy);
                let mut acc = 0.0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        acc += full[(y0 + dy).min(h - 1) * w + (x0 + dx).min(w - 1)][ci];
                    }
                }
                acc / 4.0
            }
        };
        let mut plane = vec![0.0f64; pw * ph];
        for y in 0..ph {
            for x in 0..pw {
                plane[y * pw + x] = sample(x.min(cw - 1), y.min(chh - 1));
            }
        }
        planes.push((plane, pw, ph));
    }

    // Entropy-coded scan.
    let enc_tables = [
        (encoder_codes(&DC_LUMA), encoder_codes(&AC_LUMA)),
        (encoder_codes(&DC_CHROMA), encoder_codes(&AC_CHROMA)),
    ];
    let mut bw = BitWriter::new();
    let mut preds = [0i32; 3];
    for my in 0..mcus_y {
        for mx in 0..mcus_x {
            for (ci, &(sh, sv)) in SAMPLING.iter().enumerate() {
                let (plane, pw, _) = &planes[ci];
                let qtbl = if ci == 0 { &luma_q } else { &chroma_q };
                let (dc, ac) = &enc_tables[usize::from(ci != 0)];
                for by in 0..sv {
                    for bx in 0..sh {
                        let ox = (mx * sh + bx) * 8;
                        let oy = (my * sv + by) * 8;
                        let mut block = [0.0f64; 64];
                        for y in 0..8 {
                            for x in 0..8 {
                                block[y * 8 + x] = plane[(oy + y) * pw + ox + x] - 128.0;
                            }
                        }
                        encode_block(&mut bw, &block, qtbl, dc, ac, &mut preds[ci]);
                    }
                }
            }
        }
    }
    let scan = bw.finish();

    // Container.
    let mut out = vec![0xFF, 0xD8];
    push_segment(
        &mut out,
        0xE0,
        &[
            b'J', b'F', b'I', b'F', 0, 1, 1, 0, 0, 1, 0, 1, 0, 0,
        ],
    );
    let mut dqt = Vec::with_capacity(130);
    for (tq, table) in [(0u8, &luma_q), (1u8, &chroma_q)] {
        dqt.push(tq);
        for i in 0..64 {
            dqt.push(table[ZIGZAG[i]] as u8);
        }
    }
    push_segment(&mut out, 0xDB, &dqt);
    let mut sof = vec![8u8];
    sof.extend_from_slice(&(h as u16).to_be_bytes());
    sof.extend_from_slice(&(w as u16).to_be_bytes());
    sof.push(3);
    for (ci, &(sh, sv)) in SAMPLING.iter().enumerate() {
        sof.push(COMPONENT_IDS[ci]);
        sof.push(((sh as u8) << 4) | sv as u8);
        sof.push(u8::from(ci != 0));
    }
    push_segment(&mut out, 0xC0, &sof);
    for (class_id, spec) in [
        (0x00u8, &DC_LUMA),
        (0x10, &AC_LUMA),
        (0x01, &DC_CHROMA),
        (0x11, &AC_CHROMA),
    ] {
        let mut dht = vec![class_id];
        dht.extend_from_slice(&spec.bits);
        dht.extend_from_slice(spec.vals);
        push_segment(&mut out, 0xC4, &dht);
    }
    let mut sos = vec![3u8];
    for ci in 0..3 {
        sos.push(COMPONENT_IDS[ci]);
        let th = u8::from(ci != 0);
        sos.push((th << 4) | th);
    }
    sos.extend_from_slice(&[0, 63, 0]);
    push_segment(&mut out, 0xDA, &sos);
    out.extend_from_slice(&scan);
    out.extend_from_slice(&[0xFF, 0xD9]);
    Ok(out)
}

fn encode_block(
    bw: &mut BitWriter,
    block: &[f64; 64],
    qtbl: &[u16; 64],
    dc: &[Option<(u16, u32)>; 256],
    ac: &[Option<(u16, u32)>; 256],
    pred: &mut i32,
) {
    let coefs = fdct(block);
    let mut qz = [0i32; 64];
    for (zi, q) in qz.iter_mut().enumerate() {
        let n = ZIGZAG[zi];
        *q = (coefs[n] / qtbl[n] as f64).round() as i32;
    }

    let emit = |bw: &mut BitWriter, entry: Option<(u16, u32)>| {
        let (code, len) = entry.expect("standard tables cover every symbol in range");
        bw.put(code as u32, len);
    };

    let diff = qz[0] - *pred;
    *pred = qz[0];
    let size = category(diff);
    emit(bw, dc[size as usize]);
    bw.put(magnitude_bits(diff, size), size);

    let mut run = 0u32;
    for &v in &qz[1..] {
        if v == 0 {
            run += 1;
            continue;
        }
        while run > 15 {
            emit(bw, ac[0xF0]);
            run -= 16;
        }
        let size = category(v);
        emit(bw, ac[(run << 4) as usize | size as usize]);
        bw.put(magnitude_bits(v, size), size);
        run = 0;
    }
    if run > 0 {
        emit(bw, ac[0x00]);
    }
}

// ── Decoder ─────────────────────────────────────────────────────────────

struct FrameComponent {
    sh: usize,
    sv: usize,
    tq: usize,
    dc_sel: usize,
    ac_sel: usize,
}

/// Decode a baseline JFIF byte stream into an RGB image.
pub fn decode<F: Scalar>(data: &[u8]) -> Result<ImageBuf<F>> {
    if data.len() < 2 || data[0] != 0xFF || data[1] != 0xD8 {
        return Err(Error::Jpeg("missing start-of-image marker".into()));
    }
    let mut pos = 2usize;
    let mut qtables: [Option<[u16; 64]>; 4] = [None; 4];
    let mut dc_tables: [Option<HuffDecoder>; 4] = [None, None, None, None];
    let mut ac_tables: [Option<HuffDecoder>; 4] = [None, None, None, None];
    let mut frame: Option<(usize, usize, Vec<(u8, FrameComponent)>)> = None;

    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        let end = pos.checked_add(n).filter(|&e| e <= data.len());
        let end = end.ok_or_else(|| Error::Jpeg("file ended inside a segment".into()))?;
        let slice = &data[*pos..end];
        *pos = end;
        Ok(slice)
    };
    let read_u16 = |pos: &mut usize| -> Result<usize> {
        let b = take(pos, 2)?;
        Ok(((b[0] as usize) << 8) | b[1] as usize)
    };

    loop {
        let marker = {
            let b = take(&mut pos, 2)?;
            if b[0] != 0xFF {
                return Err(Error::Jpeg(format!("expected marker, found byte {:#04x}", b[0])));
            }
            b[1]
        };
        match marker {
            0xD9 => return Err(Error::Jpeg("end of image before scan data".into())),
            0xE0..=0xEF | 0xFE => {
                let len = read_u16(&mut pos)?;
                take(&mut pos, len.saturating_sub(2))?;
            }
            0xDB => {
                let len = read_u16(&mut pos)?;
                let mut body = take(&mut pos, len - 2)?;
                while !body.is_empty() {
                    let pq_tq = body[0];
                    if pq_tq >> 4 != 0 {
                        return Err(Error::Jpeg("only 8-bit quantization tables supported".into()));
                    }
                    let tq = (pq_tq & 0x0F) as usize;
                    if tq > 3 || body.len() < 65 {
                        return Err(Error::Jpeg("malformed quantization table".into()));
                    }
                    let mut table = [0u16; 64];
                    for (zi, &byte) in body[1..65].iter().enumerate() {
                        table[ZIGZAG[zi]] = byte as u16;
                    }
                    qtables[tq] = Some(table);
                    body = &body[65..];
                }
            }
            0xC4 => {
                let len = read_u16(&mut pos)?;
                let mut body = take(&mut pos, len - 2)?;
                while !body.is_empty() {
                    if body.len() < 17 {
                        return Err(Error::Jpeg("malformed Huffman table".into()));
                    }
                    let tc_th = body[0];
                    let th = (tc_th & 0x0F) as usize;
                    if th > 3 {
                        return Err(Error::Jpeg("Huffman table id out of range".into()));
                    }
                    let mut bits = [0u8; 16];
                    bits.copy_from_slice(&body[1..17]);
                    let count: usize = bits.iter().map(|&b| b as usize).sum();
                    if body.len() < 17 + count {
                        return Err(Error::Jpeg("Huffman table values truncated".into()));
                    }
                    let vals = body[17..17 + count].to_vec();
                    let table = HuffDecoder::new(&bits, vals);
                    match tc_th >> 4 {
                        0 => dc_tables[th] = Some(table),
                        1 => ac_tables[th] = Some(table),
                        _ => return Err(Error::Jpeg("Huffman table class out of range".into())),
                    }
                    body = &body[17 + count..];
                }
            }
            0xC0 => {
                let len = read_u16(&mut pos)?;
                let body = take(&mut pos, len - 2)?;
                if body.len() < 6 || body[0] != 8 {
                    return Err(Error::Jpeg("only 8-bit baseline frames supported".into()));
                }
                let h = ((body[1] as usize) << 8) | body[2] as usize;
                let w = ((body[3] as usize) << 8) | body[4] as usize;
                let ncomp = body[5] as usize;
                if ncomp != 3 {
                    return Err(Error::Jpeg(format!("expected 3 components, found {ncomp}")));
                }
                if body.len() < 6 + 3 * ncomp || w == 0 || h == 0 {
                    return Err(Error::Jpeg("malformed frame header".into()));
                }
                let mut comps = Vec::with_capacity(ncomp);
                for c in 0..ncomp {
                    let b = &body[6 + 3 * c..9 + 3 * c];
                    let (sh, sv) = ((b[1] >> 4) as usize, (b[1] & 0x0F) as usize);
                    if !(1..=2).contains(&sh) || !(1..=2).contains(&sv) {
                        return Err(Error::Jpeg(format!(
                            "sampling factors {sh}x{sv} unsupported"
                        )));
                    }
                    comps.push((
                        b[0],
                        FrameComponent {
                            sh,
                            sv,
                            tq: (b[2] & 0x0F) as usize,
                            dc_sel: 0,
                            ac_sel: 0,
                        },
                    ));
                }
                frame = Some((w, h, comps));
            }
            0xC1..=0xCF => {
                return Err(Error::Jpeg(format!(
                    "unsupported frame type marker {marker:#04x} (baseline only)"
                )));
            }
            0xDD => {
                let len = read_u16(&mut pos)?;
                let body = take(&mut pos, len - 2)?;
                if body.len() != 2 || body != [0, 0] {
                    return Err(Error::Jpeg("restart intervals unsupported".into()));
                }
            }
            0xDA => {
                let len = read_u16(&mut pos)?;
                let body = take(&mut pos, len - 2)?;
                let (w, h, mut comps) = frame.take().ok_or_else(|| {
                    Error::Jpeg("scan before frame header".into())
                })?;
                let ns = *body.first().ok_or_else(|| Error::Jpeg("empty scan header".into()))?
                    as usize;
                if ns != comps.len() || body.len() < 1 + 2 * ns + 3 {
                    return Err(Error::Jpeg("malformed scan header".into()));
                }
                for s in 0..ns {
                    let id = body[1 + 2 * s];
                    let sel = body[2 + 2 * s];
                    let comp = comps
                        .iter_mut()
                        .find(|(cid, _)| *cid == id)
                        .ok_or_else(|| Error::Jpeg(format!("scan references unknown component {id}")))?;
                    comp.1.dc_sel = (sel >> 4) as usize;
                    comp.1.ac_sel = (sel & 0x0F) as usize;
                }
                return decode_scan(
                    &data[pos..],
                    w,
                    h,
                    &comps,
                    &qtables,
                    &dc_tables,
                    &ac_tables,
                );
            }
            other => {
                return Err(Error::Jpeg(format!("unexpected marker {other:#04x}")));
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn decode_scan<F: Scalar>(
    data: &[u8],
    w: usize,
    h: usize,
    comps: &[(u8, FrameComponent)],
    qtables: &[Option<[u16; 64]>; 4],
    dc_tables: &[Option<HuffDecoder>; 4],
    ac_tables: &[Option<HuffDecoder>; 4],
) -> Result<ImageBuf<F>> {
    let hmax = comps.iter().map(|(_, c)| c.sh).max().unwrap_or(1);
    let vmax = comps.iter().map(|(_, c)| c.sv).max().unwrap_or(1);
    let mcus_x = w.div_ceil(8 * hmax);
    let mcus_y = h.div_ceil(8 * vmax);

    let mut planes: Vec<(Vec<f64>, usize)> = comps
        .iter()
        .map(|(_, c)| {
            let pw = mcus_x * c.sh * 8;
            (vec![0.0f64; pw * mcus_y * c.sv * 8], pw)
        })
        .collect();

    let mut br = BitReader::new(data);
    let mut preds = vec![0i32; comps.len()];
    for my in 0..mcus_y {
        for mx in 0..mcus_x {
            for (ci, (_, comp)) in comps.iter().enumerate() {
                let qtbl = qtables[comp.tq]
                    .as_ref()
                    .ok_or_else(|| Error::Jpeg(format!("missing quantization table {}", comp.tq)))?;
                let dc = dc_tables[comp.dc_sel]
                    .as_ref()
                    .ok_or_else(|| Error::Jpeg(format!("missing DC table {}", comp.dc_sel)))?;
                let ac = ac_tables[comp.ac_sel]
                    .as_ref()
                    .ok_or_else(|| Error::Jpeg(format!("missing AC table {}", comp.ac_sel)))?;
                for by in 0..comp.sv {
                    for bx in 0..comp.sh {
                        let coefs = decode_block(&mut br, dc, ac, qtbl, &mut preds[ci])?;
                        let samples = idct(&coefs);
                        let (plane, pw) = &mut planes[ci];
                        let ox = (mx * comp.sh + bx) * 8;
                        let oy = (my * comp.sv + by) * 8;
                        for y in 0..8 {
                            for x in 0..8 {
                                plane[(oy + y) * *pw + ox + x] =
                                    (samples[y * 8 + x] + 128.0).clamp(0.0, 255.0);
                            }
                        }
                    }
                }
            }
        }
    }

    // Upsample, color convert, crop to the true extent.
    let mut rgb = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            let grab = |ci: usize| {
                let comp = &comps[ci].1;
                let (plane, pw) = &planes[ci];
                plane[(y * comp.sv / vmax) * pw + x * comp.sh / hmax]
            };
            let (r, g, b) = ycbcr_to_rgb(grab(0), grab(1), grab(2));
            for v in [r, g, b] {
                rgb.push((v + 0.5).clamp(0.0, 255.0) as u8);
            }
        }
    }
    ImageBuf::from_rgb8(w, h, &rgb)
}

fn decode_block(
    br: &mut BitReader,
    dc: &HuffDecoder,
    ac: &HuffDecoder,
    qtbl: &[u16; 64],
    pred: &mut i32,
) -> Result<[f64; 64]> {
    let mut coefs = [0.0f64; 64];
    let size = dc.decode(br)? as u32;
    if size > 11 {
        return Err(Error::Jpeg(format!("DC category {size} out of range")));
    }
    let diff = extend(br.bits(size)?, size);
    *pred += diff;
    coefs[0] = *pred as f64 * qtbl[0] as f64;

    let mut k = 1usize;
    while k < 64 {
        let rs = dc_ac_symbol(ac.decode(br)?);
        match rs {
            (0, 0) => break,
            (15, 0) => k += 16,
            (run, size) => {
                k += run as usize;
                if k > 63 {
                    return Err(Error::Jpeg("AC run overflows the block".into()));
                }
                let v = extend(br.bits(size as u32)?, size as u32);
                let n = ZIGZAG[k];
                coefs[n] = v as f64 * qtbl[n] as f64;
                k += 1;
            }
        }
    }
    Ok(coefs)
}

fn dc_ac_symbol(rs: u8) -> (u8, u8) {
    (rs >> 4, rs & 0x0F)
}

/// Encode at `quality`, decode the bytes, return the surviving image.
pub fn roundtrip<F: Scalar>(img: &ImageBuf<F>, quality: u8) -> Result<ImageBuf<F>> {
    let bytes = encode(img, quality)?;
    decode(&bytes)
}
