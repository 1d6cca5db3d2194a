//! Binary selection masks: which adapter entries train and which stay frozen.
//!
//! A mask marks exactly half of a matrix's entries (floor on odd totals) as
//! trainable. Two generation schemes ship: `GlobalRandom` draws a uniformly
//! random floor(n/2)-subset of all entry positions; `RowBalanced` marks
//! exactly half of each row, which needs an even column count. Masks are
//! generated once at initialization and never resampled.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::{read_u16, read_u32, read_u64, Matrix};

const MASK_MAGIC: &[u8; 4] = b"LSPS";
const MASK_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskScheme {
    GlobalRandom,
    RowBalanced,
    AllOnes,
    AllZeros,
}

impl MaskScheme {
    pub fn as_str(&self) -> &'static str {
        match self {
            MaskScheme::GlobalRandom => "global-random",
            MaskScheme::RowBalanced => "row-balanced",
            MaskScheme::AllOnes => "all-ones",
            MaskScheme::AllZeros => "all-zeros",
        }
    }

    fn to_u8(self) -> u8 {
        match self {
            MaskScheme::GlobalRandom => 0,
            MaskScheme::RowBalanced => 1,
            MaskScheme::AllOnes => 2,
            MaskScheme::AllZeros => 3,
        }
    }

    fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(MaskScheme::GlobalRandom),
            1 => Ok(MaskScheme::RowBalanced),
            2 => Ok(MaskScheme::AllOnes),
            3 => Ok(MaskScheme::AllZeros),
            _ => Err(Error::Format(format!("unknown mask scheme byte {v}"))),
        }
    }
}

impl std::str::FromStr for MaskScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global-random" | "global_random" | "random" => Ok(MaskScheme::GlobalRandom),
            "row-balanced" | "row_balanced" | "balanced" => Ok(MaskScheme::RowBalanced),
            "all-ones" | "all_ones" | "ones" => Ok(MaskScheme::AllOnes),
            "all-zeros" | "all_zeros" | "zeros" => Ok(MaskScheme::AllZeros),
            other => Err(Error::Param(format!("unknown mask scheme '{other}'"))),
        }
    }
}

/// Binary matrix with one byte per entry in memory (the serialized format
/// packs to a bitset). Immutable after construction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SelectionMask {
    rows: usize,
    cols: usize,
    bits: Vec<u8>,
    ones_count: usize,
    scheme: MaskScheme,
    seed: u64,
}

/// Build a mask. `GlobalRandom` and `RowBalanced` draw from `rng` and mark
/// floor(n/2) entries (the frozen half gets the extra entry when n is odd).
///
/// ```
/// use lorasp_core::selection::{make_mask, MaskScheme};
/// use lorasp_core::RngState;
///
/// let mask = make_mask(3, 3, MaskScheme::GlobalRandom, &mut RngState::new(7)).unwrap();
/// assert_eq!(mask.ones_count(), 4); // floor(9 / 2)
/// ```
pub fn make_mask(
    rows: usize,
    cols: usize,
    scheme: MaskScheme,
    rng: &mut RngState,
) -> Result<SelectionMask> {
    if rows == 0 || cols == 0 {
        return Err(Error::Param(format!(
            "mask dimensions must be positive, got {rows}x{cols}"
        )));
    }
    let n = rows * cols;
    let seed = rng.seed();
    let bits = match scheme {
        MaskScheme::AllOnes => vec![1u8; n],
        MaskScheme::AllZeros => vec![0u8; n],
        MaskScheme::GlobalRandom => {
            let mut bits = vec![0u8; n];
            for &idx in choose_subset(n, n / 2, rng).iter() {
                bits[idx] = 1;
            }
            bits
        }
        MaskScheme::RowBalanced => {
            if !cols.is_multiple_of(2) {
                return Err(Error::Param(format!(
                    "row-balanced mask requires an even column count, got {cols}"
                )));
            }
            let mut bits = vec![0u8; n];
            for row in 0..rows {
                for &idx in choose_subset(cols, cols / 2, rng).iter() {
                    bits[row * cols + idx] = 1;
                }
            }
            bits
        }
    };
    let ones_count = bits.iter().map(|&b| b as usize).sum();
    Ok(SelectionMask {
        rows,
        cols,
        bits,
        ones_count,
        scheme,
        seed,
    })
}

/// Wrap an explicit bit pattern (values 0 or 1) as a mask. No cardinality is
/// enforced; the scheme tag records where the pattern came from.
pub fn from_bits(
    rows: usize,
    cols: usize,
    bits: Vec<u8>,
    scheme: MaskScheme,
    seed: u64,
) -> Result<SelectionMask> {
    if rows == 0 || cols == 0 || bits.len() != rows * cols {
        return Err(Error::Param(format!(
            "bit buffer of length {} does not fill {rows}x{cols}",
            bits.len()
        )));
    }
    if bits.iter().any(|&b| b > 1) {
        return Err(Error::Param("mask bits must be 0 or 1".into()));
    }
    let ones_count = bits.iter().map(|&b| b as usize).sum();
    Ok(SelectionMask {
        rows,
        cols,
        bits,
        ones_count,
        scheme,
        seed,
    })
}

/// Uniformly random k-subset of 0..n via a partial Fisher-Yates shuffle.
fn choose_subset(n: usize, k: usize, rng: &mut RngState) -> Vec<usize> {
    let mut indices: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = i + rng.next_below((n - i) as u64) as usize;
        indices.swap(i, j);
    }
    indices.truncate(k);
    indices
}

impl SelectionMask {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn scheme(&self) -> MaskScheme {
        self.scheme
    }

    /// Seed of the generator stream the mask was drawn from.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn ones_count(&self) -> usize {
        self.ones_count
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    #[inline]
    pub fn is_selected(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.cols + col] == 1
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    /// Recount the set bits; equals `ones_count()` by construction.
    pub fn popcount(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    /// Bitwise NOT. AllOnes and AllZeros swap labels; the random schemes keep
    /// theirs, with the complement holding the ceil(n/2) frozen half.
    pub fn complement(&self) -> SelectionMask {
        let bits: Vec<u8> = self.bits.iter().map(|&b| 1 - b).collect();
        let scheme = match self.scheme {
            MaskScheme::AllOnes => MaskScheme::AllZeros,
            MaskScheme::AllZeros => MaskScheme::AllOnes,
            other => other,
        };
        SelectionMask {
            rows: self.rows,
            cols: self.cols,
            ones_count: self.bits.len() - self.ones_count,
            bits,
            scheme,
            seed: self.seed,
        }
    }

    /// Element-wise gate: entries at mask-one positions are bit-identical to
    /// the input; mask-zero positions become exactly 0.0.
    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        if self.shape() != x.shape() {
            return Err(Error::shape("mask apply", self.shape(), x.shape()));
        }
        let data = x
            .data()
            .iter()
            .zip(&self.bits)
            .map(|(&v, &b)| if b == 1 { v } else { 0.0 })
            .collect();
        Matrix::from_vec(self.rows, self.cols, data)
    }

    /// The mask as a 0/1 matrix, for arithmetic against gradients.
    pub fn to_matrix(&self) -> Matrix {
        let data = self.bits.iter().map(|&b| b as f64).collect();
        Matrix::from_vec(self.rows, self.cols, data).expect("mask bits are finite")
    }

    /// Header {magic "LSPS", version, rows u32, cols u32, scheme u8,
    /// seed u64} then the bits packed row-major, little-endian within each
    /// byte (entry index `8*i + j` lives at bit `j` of byte `i`).
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MASK_MAGIC)?;
        w.write_all(&MASK_VERSION.to_le_bytes())?;
        w.write_all(&(self.rows as u32).to_le_bytes())?;
        w.write_all(&(self.cols as u32).to_le_bytes())?;
        w.write_all(&[self.scheme.to_u8()])?;
        w.write_all(&self.seed.to_le_bytes())?;
        let mut packed = vec![0u8; self.bits.len().div_ceil(8)];
        for (i, &b) in self.bits.iter().enumerate() {
            if b == 1 {
                packed[i / 8] |= 1 << (i % 8);
            }
        }
        w.write_all(&packed)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<SelectionMask> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MASK_MAGIC {
            return Err(Error::Format(format!("bad mask magic {magic:?}")));
        }
        let version = read_u16(r)?;
        if version != MASK_VERSION {
            return Err(Error::Format(format!("unsupported mask version {version}")));
        }
        let rows = read_u32(r)? as usize;
        let cols = read_u32(r)? as usize;
        let mut scheme_byte = [0u8; 1];
        r.read_exact(&mut scheme_byte)?;
        let scheme = MaskScheme::from_u8(scheme_byte[0])?;
        let seed = read_u64(r)?;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Format("mask dimensions overflow".into()))?;
        let mut packed = vec![0u8; n.div_ceil(8)];
        r.read_exact(&mut packed)?;
        let bits: Vec<u8> = (0..n).map(|i| (packed[i / 8] >> (i % 8)) & 1).collect();
        let ones_count = bits.iter().map(|&b| b as usize).sum();
        Ok(SelectionMask {
            rows,
            cols,
            bits,
            ones_count,
            scheme,
            seed,
        })
    }

    pub fn write_file(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)
    }

    pub fn read_file(path: impl AsRef<std::path::Path>) -> Result<SelectionMask> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        SelectionMask::read_from(&mut f)
    }
}
