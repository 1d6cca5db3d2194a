//! Block-wise 4-bit quantization of frozen base weights.
//!
//! A matrix is cut into row-major blocks of `block_size` entries. Each block
//! stores one absolute-max scale and a 4-bit code per entry indexing a fixed
//! 16-level codebook. Dequantization is `codebook[code] * scale`.
//!
//! The codebook levels follow the normal-float construction: quantiles of the
//! standard normal, taken at 8 evenly spaced probabilities on the positive
//! side (from 0.9677083 down toward 0.5, endpoint dropped) and 7 on the
//! negative side, plus an exact 0.0, all divided by the largest magnitude so
//! that -1.0 and +1.0 are exact members. The constants below are that
//! construction evaluated in f64; `tests/codebook.rs` re-derives them from an
//! independent inverse-normal-CDF implementation.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::{read_f64, read_u16, read_u32, Matrix};

const QUANT_MAGIC: &[u8; 4] = b"LSPQ";
const QUANT_VERSION: u16 = 1;

/// 16 levels, sorted ascending, containing exactly -1.0, 0.0 and +1.0.
pub const CODEBOOK: [f64; 16] = [
    -1.0,
    -0.696_192_890_603_720_1,
    -0.525_073_038_695_229_3,
    -0.394_917_490_699_309_87,
    -0.284_441_357_618_107_6,
    -0.184_773_435_192_888_86,
    -0.091_049_992_144_279_31,
    0.0,
    0.079_580_329_094_169_37,
    0.160_930_172_704_936_12,
    0.246_112_293_929_935_9,
    0.337_915_193_521_655_06,
    0.440_709_802_413_190_2,
    0.562_616_970_075_237_1,
    0.722_956_727_892_882_3,
    1.0,
];

/// Index of the 0.0 level; zero-scale blocks map every entry here.
pub const ZERO_CODE: u8 = 7;

/// Half the widest gap between adjacent codebook levels. Nearest-level
/// rounding can never miss by more than this (in scale-normalized units).
pub fn codebook_half_max_gap() -> f64 {
    let mut widest: f64 = 0.0;
    for w in CODEBOOK.windows(2) {
        widest = widest.max(w[1] - w[0]);
    }
    widest / 2.0
}

/// Nearest codebook level for a scale-normalized value, ties to the lower
/// index. Input is clamped behavior-free: values in [-1, 1] by construction.
fn nearest_code(t: f64) -> u8 {
    // First level not less than t.
    let hi = CODEBOOK.partition_point(|&level| level < t);
    if hi == 0 {
        return 0;
    }
    if hi >= CODEBOOK.len() {
        return (CODEBOOK.len() - 1) as u8;
    }
    let lo = hi - 1;
    let d_lo = t - CODEBOOK[lo];
    let d_hi = CODEBOOK[hi] - t;
    if d_lo <= d_hi {
        lo as u8
    } else {
        hi as u8
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    rows: usize,
    cols: usize,
    block_size: usize,
    codes: Vec<u8>,
    scales: Vec<f64>,
    codebook: [f64; 16],
}

/// Per-entry reconstruction error statistics.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ErrorStats {
    pub max_abs: f64,
    pub rmse: f64,
}

/// Quantize a matrix block-wise. Each block's scale is its absolute maximum;
/// entries are divided by the scale and mapped to the nearest codebook level.
/// A zero-scale block (all zeros) maps every entry to the 0.0 level.
///
/// ```
/// use lorasp_core::quant::quantize;
/// use lorasp_core::Matrix;
///
/// let w = Matrix::from_rows(&[vec![0.5, -2.0], vec![1.0, 0.0]]).unwrap();
/// let q = quantize(&w, 4).unwrap();
/// // the block scale is the absolute maximum, recovered exactly
/// assert_eq!(q.scales(), &[2.0]);
/// assert_eq!(q.dequantize().get(0, 1), -2.0);
/// ```
pub fn quantize(w: &Matrix, block_size: usize) -> Result<QuantizedTensor> {
    if block_size == 0 {
        return Err(Error::Param("block_size must be at least 1".into()));
    }
    let n = w.len();
    let num_blocks = n.div_ceil(block_size);
    let mut codes = Vec::with_capacity(n);
    let mut scales = Vec::with_capacity(num_blocks);
    for block in w.data().chunks(block_size) {
        let scale = block.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        scales.push(scale);
        if scale == 0.0 {
            codes.extend(std::iter::repeat_n(ZERO_CODE, block.len()));
        } else {
            codes.extend(block.iter().map(|&v| nearest_code(v / scale)));
        }
    }
    Ok(QuantizedTensor {
        rows: w.rows(),
        cols: w.cols(),
        block_size,
        codes,
        scales,
        codebook: CODEBOOK,
    })
}

/// Reconstruction error of a quantize/dequantize round trip.
pub fn quant_error(w: &Matrix, block_size: usize) -> Result<ErrorStats> {
    let back = quantize(w, block_size)?.dequantize();
    let mut max_abs = 0.0f64;
    let mut sum_sq = 0.0f64;
    for (a, b) in w.data().iter().zip(back.data()) {
        let d = (a - b).abs();
        max_abs = max_abs.max(d);
        sum_sq += d * d;
    }
    Ok(ErrorStats {
        max_abs,
        rmse: (sum_sq / w.len() as f64).sqrt(),
    })
}

impl QuantizedTensor {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn num_blocks(&self) -> usize {
        self.scales.len()
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn codebook(&self) -> &[f64; 16] {
        &self.codebook
    }

    /// Restore the dense matrix: entry = codebook[code] * block scale.
    pub fn dequantize(&self) -> Matrix {
        let data: Vec<f64> = self
            .codes
            .iter()
            .enumerate()
            .map(|(i, &c)| self.codebook[c as usize] * self.scales[i / self.block_size])
            .collect();
        Matrix::from_vec(self.rows, self.cols, data).expect("codes and scales are finite")
    }

    /// Header {magic "LSPQ", version, rows u32, cols u32, block_size u32,
    /// codebook 16 x f64} + scales (f64 per block) + packed 4-bit codes, two
    /// per byte, row-major, low nibble first.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(QUANT_MAGIC)?;
        w.write_all(&QUANT_VERSION.to_le_bytes())?;
        w.write_all(&(self.rows as u32).to_le_bytes())?;
        w.write_all(&(self.cols as u32).to_le_bytes())?;
        w.write_all(&(self.block_size as u32).to_le_bytes())?;
        for level in &self.codebook {
            w.write_all(&level.to_le_bytes())?;
        }
        for s in &self.scales {
            w.write_all(&s.to_le_bytes())?;
        }
        for pair in self.codes.chunks(2) {
            let lo = pair[0] & 0x0F;
            let hi = if pair.len() == 2 { pair[1] & 0x0F } else { 0 };
            w.write_all(&[lo | (hi << 4)])?;
        }
        Ok(())
    }

    /// Serialized size in bytes, exact.
    pub fn wire_size(&self) -> usize {
        4 + 2 + 4 + 4 + 4 + 16 * 8 + self.scales.len() * 8 + self.codes.len().div_ceil(2)
    }

    pub fn read_from(r: &mut impl Read) -> Result<QuantizedTensor> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != QUANT_MAGIC {
            return Err(Error::Format(format!("bad quant magic {magic:?}")));
        }
        let version = read_u16(r)?;
        if version != QUANT_VERSION {
            return Err(Error::Format(format!(
                "unsupported quant version {version}"
            )));
        }
        let rows = read_u32(r)? as usize;
        let cols = read_u32(r)? as usize;
        let block_size = read_u32(r)? as usize;
        if block_size == 0 {
            return Err(Error::Format("block_size must be positive".into()));
        }
        let mut codebook = [0.0f64; 16];
        for level in &mut codebook {
            *level = read_f64(r)?;
        }
        if codebook.windows(2).any(|w| w[0] >= w[1]) || !codebook.contains(&0.0) {
            return Err(Error::Format(
                "codebook must be strictly ascending and contain 0.0".into(),
            ));
        }
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Format("quant dimensions overflow".into()))?;
        let num_blocks = n.div_ceil(block_size);
        let mut scales = vec![0.0f64; num_blocks];
        for s in &mut scales {
            *s = read_f64(r)?;
            if !s.is_finite() || *s < 0.0 {
                return Err(Error::Format(format!("invalid block scale {s}")));
            }
        }
        let mut packed = vec![0u8; n.div_ceil(2)];
        r.read_exact(&mut packed)?;
        let mut codes = Vec::with_capacity(n);
        for i in 0..n {
            let byte = packed[i / 2];
            codes.push(if i % 2 == 0 { byte & 0x0F } else { byte >> 4 });
        }
        Ok(QuantizedTensor {
            rows,
            cols,
            block_size,
            codes,
            scales,
            codebook,
        })
    }

    pub fn write_file(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)
    }

    pub fn read_file(path: impl AsRef<std::path::Path>) -> Result<QuantizedTensor> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        QuantizedTensor::read_from(&mut f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    #[test]
    fn codebook_is_sorted_with_exact_anchors() {
        assert!(CODEBOOK.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(CODEBOOK[0], -1.0);
        assert_eq!(CODEBOOK[ZERO_CODE as usize], 0.0);
        assert_eq!(CODEBOOK[15], 1.0);
    }

    #[test]
    fn zeros_round_trip_exactly() {
        let w = Matrix::zeros(8, 8);
        let q = quantize(&w, 16).unwrap();
        assert!(q.scales().iter().all(|&s| s == 0.0));
        assert_eq!(q.dequantize(), w);
        let stats = quant_error(&w, 16).unwrap();
        assert_eq!(stats.max_abs, 0.0);
        assert_eq!(stats.rmse, 0.0);
    }

    #[test]
    fn constant_block_recovers_exactly() {
        // every entry is the block max, so each maps to the 1.0 level
        let w = Matrix::from_vec(4, 4, vec![2.5; 16]).unwrap();
        let q = quantize(&w, 16).unwrap();
        assert_eq!(q.dequantize(), w);
        let stats = quant_error(&w, 16).unwrap();
        assert_eq!(stats.max_abs, 0.0);
        assert_eq!(stats.rmse, 0.0);
    }

    #[test]
    fn block_max_is_recovered_exactly() {
        let mut rng = RngState::new(4);
        let w = Matrix::gauss(&mut rng, 16, 16, 0.0, 1.0).unwrap();
        let block_size = 32;
        let q = quantize(&w, block_size).unwrap();
        let back = q.dequantize();
        for (b, chunk) in w.data().chunks(block_size).enumerate() {
            let (arg, _) = chunk
                .iter()
                .enumerate()
                .max_by(|x, y| x.1.abs().partial_cmp(&y.1.abs()).unwrap())
                .unwrap();
            let flat = b * block_size + arg;
            assert_eq!(back.data()[flat], w.data()[flat], "block {b}");
        }
    }

    #[test]
    fn dequantize_quantize_is_idempotent_bitwise() {
        let mut rng = RngState::new(5);
        let w = Matrix::gauss(&mut rng, 32, 32, 0.0, 1.0).unwrap();
        let q1 = quantize(&w, 64).unwrap();
        let once = q1.dequantize();
        let q2 = quantize(&once, 64).unwrap();
        assert_eq!(q1, q2);
        assert_eq!(q2.dequantize(), once);
    }

    #[test]
    fn per_block_error_bound_holds() {
        let half_gap = codebook_half_max_gap();
        let mut rng = RngState::new(6);
        let w = Matrix::gauss(&mut rng, 20, 30, 0.0, 2.0).unwrap();
        let block_size = 25;
        let q = quantize(&w, block_size).unwrap();
        let back = q.dequantize();
        for (i, (a, b)) in w.data().iter().zip(back.data()).enumerate() {
            let scale = q.scales()[i / block_size];
            // the 1e-12 slack absorbs the division/multiplication round trip
            assert!(
                (a - b).abs() <= scale * half_gap * (1.0 + 1e-12),
                "entry {i}: err {} vs bound {}",
                (a - b).abs(),
                scale * half_gap
            );
        }
    }

    #[test]
    fn sorted_block_yields_nondecreasing_codes() {
        let mut rng = RngState::new(8);
        let mut vals: Vec<f64> = (0..64).map(|_| rng.next_unit() * 4.0 - 2.0).collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let w = Matrix::from_vec(1, 64, vals).unwrap();
        let q = quantize(&w, 64).unwrap();
        assert!(q.codes().windows(2).all(|c| c[0] <= c[1]));
    }

    #[test]
    fn tie_breaks_to_lower_index() {
        // midpoint between levels 7 (0.0) and 8 (0.0795...) in a block whose
        // scale is exactly 1.0
        let mid = (CODEBOOK[7] + CODEBOOK[8]) / 2.0;
        let w = Matrix::from_vec(1, 2, vec![1.0, mid]).unwrap();
        let q = quantize(&w, 2).unwrap();
        assert_eq!(q.codes()[1], 7);
    }

    #[test]
    fn read_rejects_corrupt_codebook() {
        let mut rng = RngState::new(12);
        let w = Matrix::gauss(&mut rng, 4, 4, 0.0, 1.0).unwrap();
        let q = quantize(&w, 8).unwrap();
        let mut buf = Vec::new();
        q.write_to(&mut buf).unwrap();
        // header is magic(4) + version(2) + rows(4) + cols(4) + block(4);
        // swap the first two codebook levels so the table is unsorted
        let cb = 18;
        for i in 0..8 {
            buf.swap(cb + i, cb + 8 + i);
        }
        assert!(matches!(
            QuantizedTensor::read_from(&mut &buf[..]),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn wire_round_trip_and_size() {
        let mut rng = RngState::new(9);
        let w = Matrix::gauss(&mut rng, 64, 64, 0.0, 1.0).unwrap();
        let q = quantize(&w, 64).unwrap();
        let mut buf = Vec::new();
        q.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), q.wire_size());
        // 0.5 bytes/entry for codes + 8/64 for scales + amortized header:
        // pinned allowance of 0.75 bytes/entry at block_size 64
        assert!(buf.len() as f64 <= 0.75 * (64.0 * 64.0));
        let back = QuantizedTensor::read_from(&mut &buf[..]).unwrap();
        assert_eq!(q, back);
        assert_eq!(back.dequantize(), q.dequantize());
    }

    #[test]
    fn odd_entry_count_round_trips() {
        let mut rng = RngState::new(10);
        let w = Matrix::gauss(&mut rng, 3, 5, 0.0, 1.0).unwrap();
        let q = quantize(&w, 4).unwrap();
        assert_eq!(q.num_blocks(), 4); // ceil(15/4)
        let mut buf = Vec::new();
        q.write_to(&mut buf).unwrap();
        let back = QuantizedTensor::read_from(&mut &buf[..]).unwrap();
        assert_eq!(q, back);
    }
}
