//! Bit-packed vectors and small dense linear algebra over GF(2).

use serde::{Deserialize, Serialize};
use std::fmt;

const WORD: usize = 64;

#[inline]
pub(crate) fn words_for(len: usize) -> usize {
    len.div_ceil(WORD)
}

/// A fixed-length vector over GF(2), packed 64 bits per word.
#[derive(Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct BitVec {
    len: usize,
    words: Vec<u64>,
}

impl BitVec {
    pub fn zeros(len: usize) -> Self {
        Self { len, words: vec![0; words_for(len)] }
    }

    pub fn from_indices(len: usize, indices: impl IntoIterator<Item = usize>) -> Self {
        let mut v = Self::zeros(len);
        for i in indices {
            v.set(i, true);
        }
        v
    }

    pub fn from_bools(bits: &[bool]) -> Self {
        Self::from_indices(bits.len(), bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i))
    }

    /// Unit vector `e_i`.
    pub fn unit(len: usize, i: usize) -> Self {
        Self::from_indices(len, [i])
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.len
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn words(&self) -> &[u64] {
        &self.words
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        debug_assert!(i < self.len, "bit {i} out of range {}", self.len);
        (self.words[i / WORD] >> (i % WORD)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize, value: bool) {
        debug_assert!(i < self.len, "bit {i} out of range {}", self.len);
        let mask = 1u64 << (i % WORD);
        if value {
            self.words[i / WORD] |= mask;
        } else {
            self.words[i / WORD] &= !mask;
        }
    }

    #[inline]
    pub fn flip(&mut self, i: usize) {
        debug_assert!(i < self.len);
        self.words[i / WORD] ^= 1u64 << (i % WORD);
    }

    pub fn xor_assign(&mut self, other: &BitVec) {
        assert_eq!(self.len, other.len, "length mismatch in xor");
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a ^= b;
        }
    }

    pub fn xor(&self, other: &BitVec) -> BitVec {
        let mut out = self.clone();
        out.xor_assign(other);
        out
    }

    pub fn weight(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Number of positions set in `self` or `other`.
    pub fn union_weight(&self, other: &BitVec) -> usize {
        assert_eq!(self.len, other.len);
        self.words.iter().zip(&other.words).map(|(a, b)| (a | b).count_ones() as usize).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    /// Inner product mod 2.
    pub fn dot(&self, other: &BitVec) -> bool {
        assert_eq!(self.len, other.len, "length mismatch in dot");
        self.words.iter().zip(&other.words).map(|(a, b)| (a & b).count_ones()).sum::<u32>() & 1 == 1
    }

    pub fn ones(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(wi, &w)| {
            let mut w = w;
            std::iter::from_fn(move || {
                if w == 0 {
                    return None;
                }
                let tz = w.trailing_zeros() as usize;
                w &= w - 1;
                Some(wi * WORD + tz)
            })
        })
    }

    pub fn to_bools(&self) -> Vec<bool> {
        (0..self.len).map(|i| self.get(i)).collect()
    }

    /// Concatenation `self ‖ other`.
    pub fn concat(&self, other: &BitVec) -> BitVec {
        let mut out = BitVec::zeros(self.len + other.len);
        for i in self.ones() {
            out.set(i, true);
        }
        for i in other.ones() {
            out.set(self.len + i, true);
        }
        out
    }

    pub fn slice(&self, start: usize, len: usize) -> BitVec {
        assert!(start + len <= self.len);
        BitVec::from_indices(len, (0..len).filter(|&i| self.get(start + i)))
    }

    /// Little-endian byte packing: bit `i` lives in byte `i / 8`, position `i % 8`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.len.div_ceil(8)];
        for i in self.ones() {
            out[i / 8] |= 1 << (i % 8);
        }
        out
    }

    pub fn from_bytes(len: usize, bytes: &[u8]) -> BitVec {
        assert!(bytes.len() * 8 >= len);
        BitVec::from_indices(len, (0..len).filter(|&i| (bytes[i / 8] >> (i % 8)) & 1 == 1))
    }
}

impl fmt::Debug for BitVec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.len {
            f.write_str(if self.get(i) { "1" } else { "0" })?;
        }
        Ok(())
    }
}

/// Dense row-major matrix over GF(2).
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct BitMatrix {
    cols: usize,
    rows: Vec<BitVec>,
}

impl BitMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { cols, rows: vec![BitVec::zeros(cols); rows] }
    }

    pub fn from_rows(cols: usize, rows: Vec<BitVec>) -> Self {
        assert!(rows.iter().all(|r| r.len() == cols));
        Self { cols, rows }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_rows(n, (0..n).map(|i| BitVec::unit(n, i)).collect())
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &BitVec {
        &self.rows[r]
    }

    pub fn rows(&self) -> &[BitVec] {
        &self.rows
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.rows[r].get(c)
    }

    pub fn set(&mut self, r: usize, c: usize, value: bool) {
        self.rows[r].set(c, value)
    }

    pub fn column(&self, c: usize) -> BitVec {
        BitVec::from_indices(self.rows.len(), (0..self.rows.len()).filter(|&r| self.rows[r].get(c)))
    }

    pub fn set_column(&mut self, c: usize, col: &BitVec) {
        assert_eq!(col.len(), self.rows.len());
        for (r, row) in self.rows.iter_mut().enumerate() {
            row.set(c, col.get(r));
        }
    }

    pub fn mul_vec(&self, v: &BitVec) -> BitVec {
        assert_eq!(v.len(), self.cols, "matrix-vector dimension mismatch");
        BitVec::from_indices(self.rows.len(), (0..self.rows.len()).filter(|&r| self.rows[r].dot(v)))
    }

    pub fn transpose(&self) -> BitMatrix {
        BitMatrix::from_rows(self.rows.len(), (0..self.cols).map(|c| self.column(c)).collect())
    }

    /// Largest number of ones in any row.
    pub fn max_row_weight(&self) -> usize {
        self.rows.iter().map(BitVec::weight).max().unwrap_or(0)
    }

    pub fn rank(&self) -> usize {
        RowEchelon::new(self).pivots.len()
    }

    /// One solution of `self · x = rhs`, or `None` when inconsistent.
    pub fn solve(&self, rhs: &BitVec) -> Option<BitVec> {
        RowEchelon::new(self).solve(rhs)
    }

    /// Basis of the right null space.
    pub fn nullspace(&self) -> Vec<BitVec> {
        RowEchelon::new(self).nullspace()
    }
}

/// Reduced row echelon form with the row operations recorded, so that
/// right-hand sides can be reduced after the fact.
struct RowEchelon {
    cols: usize,
    reduced: Vec<BitVec>,
    // transform · original = reduced
    transform: Vec<BitVec>,
    pivots: Vec<usize>,
}

impl RowEchelon {
    fn new(m: &BitMatrix) -> Self {
        let n_rows = m.n_rows();
        let mut reduced = m.rows.clone();
        let mut transform: Vec<BitVec> = (0..n_rows).map(|i| BitVec::unit(n_rows, i)).collect();
        let mut pivots = Vec::new();
        let mut r = 0;
        for c in 0..m.cols {
            if r == n_rows {
                break;
            }
            let Some(p) = (r..n_rows).find(|&i| reduced[i].get(c)) else {
                continue;
            };
            reduced.swap(r, p);
            transform.swap(r, p);
            for i in 0..n_rows {
                if i != r && reduced[i].get(c) {
                    let (pr, pt) = (reduced[r].clone(), transform[r].clone());
                    reduced[i].xor_assign(&pr);
                    transform[i].xor_assign(&pt);
                }
            }
            pivots.push(c);
            r += 1;
        }
        Self { cols: m.cols, reduced, transform, pivots }
    }

    fn solve(&self, rhs: &BitVec) -> Option<BitVec> {
        assert_eq!(rhs.len(), self.reduced.len(), "rhs length mismatch");
        let mut x = BitVec::zeros(self.cols);
        for (r, t) in self.transform.iter().enumerate() {
            let b = t.dot(rhs);
            match self.pivots.get(r) {
                Some(&c) => x.set(c, b),
                None if b => return None,
                None => {}
            }
        }
        Some(x)
    }

    fn nullspace(&self) -> Vec<BitVec> {
        let mut is_pivot = vec![false; self.cols];
        for &c in &self.pivots {
            is_pivot[c] = true;
        }
        (0..self.cols)
            .filter(|&c| !is_pivot[c])
            .map(|free| {
                let mut v = BitVec::unit(self.cols, free);
                for (r, &pc) in self.pivots.iter().enumerate() {
                    if self.reduced[r].get(free) {
                        v.set(pc, true);
                    }
                }
                v
            })
            .collect()
    }
}
