//! Triangular 6,6,6 color code layout.
//!
//! The code lives on a triangular patch of the triangular lattice with side
//! `L = 3(d-1)/2`. Site `(row, col)` with `0 <= col <= row <= L` is a tile
//! center when `(row + col) % 3 == 1` and a data qubit otherwise; the data
//! sites form the hexagonal lattice. Every tile touches the data sites among
//! its six lattice neighbours, so bulk tiles have weight 6 and boundary
//! tiles weight 4. The three triangle corners are always data sites.
//!
//! Indexing is row-major from the top vertex. Data qubits take indices
//! `0..n_data`; tile `t` owns ancilla `n_data + 2t` and flag `n_data + 2t + 1`.

use crate::error::{Error, Result};
use crate::gf2::{BitMatrix, BitVec};
use serde::{Deserialize, Serialize};

/// Lattice directions `(d_row, d_col)` in cyclic angular order, so that
/// direction `k + 3` is opposite to `k`.
pub const DIRECTIONS: [(i64, i64); 6] = [(0, 1), (1, 1), (1, 0), (0, -1), (-1, -1), (-1, 0)];

/// Stabilizer type of a parity check.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CheckType {
    X,
    Z,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tile {
    pub index: usize,
    /// Lattice coordinates `(row, col)` of the tile center.
    pub site: (usize, usize),
    /// Data qubit touched in each lattice direction, `None` outside the triangle.
    pub slots: [Option<usize>; 6],
    pub ancilla: usize,
    pub flag: usize,
    /// Three-coloring label (0, 1, 2). Kept for export only.
    pub color: u8,
}

impl Tile {
    pub fn support(&self) -> impl Iterator<Item = usize> + '_ {
        self.slots.iter().flatten().copied()
    }

    pub fn weight(&self) -> usize {
        self.slots.iter().flatten().count()
    }
}

/// Pauli operator in binary symplectic form; `x` and `z` both set means `Y`.
/// Global phase is not tracked.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PauliOperator {
    pub x: BitVec,
    pub z: BitVec,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Pauli {
    I,
    X,
    Y,
    Z,
}

impl Pauli {
    pub const NONTRIVIAL: [Pauli; 3] = [Pauli::X, Pauli::Y, Pauli::Z];

    pub fn bits(self) -> (bool, bool) {
        match self {
            Pauli::I => (false, false),
            Pauli::X => (true, false),
            Pauli::Y => (true, true),
            Pauli::Z => (false, true),
        }
    }

    pub fn from_bits(x: bool, z: bool) -> Pauli {
        match (x, z) {
            (false, false) => Pauli::I,
            (true, false) => Pauli::X,
            (true, true) => Pauli::Y,
            (false, true) => Pauli::Z,
        }
    }
}

impl PauliOperator {
    pub fn identity(n: usize) -> Self {
        Self { x: BitVec::zeros(n), z: BitVec::zeros(n) }
    }

    pub fn x_type(x: BitVec) -> Self {
        let n = x.len();
        Self { x, z: BitVec::zeros(n) }
    }

    pub fn z_type(z: BitVec) -> Self {
        let n = z.len();
        Self { x: BitVec::zeros(n), z }
    }

    pub fn single(n: usize, qubit: usize, p: Pauli) -> Self {
        let mut op = Self::identity(n);
        op.set(qubit, p);
        op
    }

    pub fn n_qubits(&self) -> usize {
        self.x.len()
    }

    pub fn get(&self, q: usize) -> Pauli {
        Pauli::from_bits(self.x.get(q), self.z.get(q))
    }

    pub fn set(&mut self, q: usize, p: Pauli) {
        let (x, z) = p.bits();
        self.x.set(q, x);
        self.z.set(q, z);
    }

    /// 1 when the two operators anticommute.
    pub fn symplectic(&self, other: &PauliOperator) -> bool {
        self.x.dot(&other.z) ^ self.z.dot(&other.x)
    }

    pub fn commutes_with(&self, other: &PauliOperator) -> bool {
        !self.symplectic(other)
    }

    /// Product up to phase.
    pub fn mul(&self, other: &PauliOperator) -> PauliOperator {
        PauliOperator { x: self.x.xor(&other.x), z: self.z.xor(&other.z) }
    }

    pub fn weight(&self) -> usize {
        self.x.union_weight(&self.z)
    }

    pub fn is_identity(&self) -> bool {
        self.x.is_zero() && self.z.is_zero()
    }
}

impl std::fmt::Debug for PauliOperator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for q in 0..self.n_qubits() {
            let c = match self.get(q) {
                Pauli::I => '.',
                Pauli::X => 'X',
                Pauli::Y => 'Y',
                Pauli::Z => 'Z',
            };
            write!(f, "{c}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeLayout {
    pub distance: usize,
    /// Lattice coordinates of every data qubit, by index.
    pub data_sites: Vec<(usize, usize)>,
    pub tiles: Vec<Tile>,
    /// One row per tile; the X and Z stabilizers share supports.
    pub x_stabilizers: Vec<BitVec>,
    pub z_stabilizers: Vec<BitVec>,
    pub logical_x: BitVec,
    pub logical_z: BitVec,
    pub total_qubits: usize,
}

impl CodeLayout {
    /// Builds the distance-`d` layout. Deterministic in `d`.
    pub fn new(distance: i64) -> Result<Self> {
        if distance < 3 || distance % 2 == 0 {
            return Err(Error::InvalidDistance(distance));
        }
        let d = distance as usize;
        let side = 3 * (d - 1) / 2;
        let is_tile = |r: usize, c: usize| (r + c) % 3 == 1;

        let mut data_index = vec![vec![None; side + 1]; side + 1];
        let mut data_sites = Vec::new();
        let mut tile_sites = Vec::new();
        for r in 0..=side {
            for c in 0..=r {
                if is_tile(r, c) {
                    tile_sites.push((r, c));
                } else {
                    data_index[r][c] = Some(data_sites.len());
                    data_sites.push((r, c));
                }
            }
        }
        let n_data = data_sites.len();

        let tiles: Vec<Tile> = tile_sites
            .iter()
            .enumerate()
            .map(|(t, &(r, c))| {
                let mut slots = [None; 6];
                for (k, (dr, dc)) in DIRECTIONS.iter().enumerate() {
                    let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                    if nr < 0 || nc < 0 || nc > nr || nr > side as i64 {
                        continue;
                    }
                    slots[k] = data_index[nr as usize][nc as usize];
                }
                Tile {
                    index: t,
                    site: (r, c),
                    slots,
                    ancilla: n_data + 2 * t,
                    flag: n_data + 2 * t + 1,
                    color: (r % 3) as u8,
                }
            })
            .collect();

        let supports: Vec<BitVec> =
            tiles.iter().map(|t| BitVec::from_indices(n_data, t.support())).collect();
        let bottom = BitVec::from_indices(
            n_data,
            data_sites.iter().enumerate().filter(|(_, &(r, _))| r == side).map(|(i, _)| i),
        );

        Ok(Self {
            distance: d,
            total_qubits: n_data + 2 * tiles.len(),
            data_sites,
            x_stabilizers: supports.clone(),
            z_stabilizers: supports,
            logical_x: bottom.clone(),
            logical_z: bottom,
            tiles,
        })
    }

    pub fn n_data(&self) -> usize {
        self.data_sites.len()
    }

    pub fn n_tiles(&self) -> usize {
        self.tiles.len()
    }

    /// Number of stabilizer generators; also the length of a syndrome vector.
    /// Generator `i < n_tiles` is the X check of tile `i`, the rest are Z checks.
    pub fn n_checks(&self) -> usize {
        2 * self.tiles.len()
    }

    pub fn check_type(&self, check: usize) -> CheckType {
        if check < self.n_tiles() {
            CheckType::X
        } else {
            CheckType::Z
        }
    }

    pub fn check_index(&self, ty: CheckType, tile: usize) -> usize {
        match ty {
            CheckType::X => tile,
            CheckType::Z => self.n_tiles() + tile,
        }
    }

    /// Tile incidence matrix (tiles × data qubits).
    pub fn incidence(&self) -> BitMatrix {
        BitMatrix::from_rows(self.n_data(), self.z_stabilizers.clone())
    }

    /// All stabilizer generators as Pauli operators on the data qubits, in check order.
    pub fn generators(&self) -> Vec<PauliOperator> {
        self.x_stabilizers
            .iter()
            .map(|s| PauliOperator::x_type(s.clone()))
            .chain(self.z_stabilizers.iter().map(|s| PauliOperator::z_type(s.clone())))
            .collect()
    }

    pub fn logical_x_operator(&self) -> PauliOperator {
        PauliOperator::x_type(self.logical_x.clone())
    }

    pub fn logical_z_operator(&self) -> PauliOperator {
        PauliOperator::z_type(self.logical_z.clone())
    }

    /// Syndrome of a data-qubit Pauli: bit `i` is set when it anticommutes with generator `i`.
    pub fn syndrome(&self, op: &PauliOperator) -> BitVec {
        let nt = self.n_tiles();
        let mut s = BitVec::zeros(2 * nt);
        for t in 0..nt {
            s.set(t, self.x_stabilizers[t].dot(&op.z));
            s.set(nt + t, self.z_stabilizers[t].dot(&op.x));
        }
        s
    }

    /// Z-check parities of a bit string over the data qubits.
    pub fn z_parities(&self, bits: &BitVec) -> BitVec {
        self.incidence().mul_vec(bits)
    }

    /// Deterministic text export of the layout (JSON).
    pub fn to_json(&self) -> String {
        let doc = LayoutDocument {
            distance: self.distance,
            n_data: self.n_data(),
            n_tiles: self.n_tiles(),
            total_qubits: self.total_qubits,
            data_qubits: self
                .data_sites
                .iter()
                .enumerate()
                .map(|(i, &(r, c))| QubitDoc { index: i, row: r, col: c, xy: cartesian(r, c) })
                .collect(),
            tiles: self
                .tiles
                .iter()
                .map(|t| TileDoc {
                    index: t.index,
                    row: t.site.0,
                    col: t.site.1,
                    color: t.color,
                    ancilla: t.ancilla,
                    flag: t.flag,
                    support: t.support().collect(),
                })
                .collect(),
            logical_x: self.logical_x.ones().collect(),
            logical_z: self.logical_z.ones().collect(),
        };
        serde_json::to_string_pretty(&doc).expect("layout document is always serializable")
    }

    /// Short one-line descriptor used in dataset headers.
    pub fn descriptor(&self) -> String {
        format!(
            "color666 d={} n_data={} tiles={} qubits={}",
            self.distance,
            self.n_data(),
            self.n_tiles(),
            self.total_qubits
        )
    }
}

fn cartesian(r: usize, c: usize) -> (f64, f64) {
    let x = c as f64 - r as f64 / 2.0;
    let y = -(r as f64) * 3f64.sqrt() / 2.0;
    ((x * 1e6).round() / 1e6, (y * 1e6).round() / 1e6)
}

#[derive(Serialize)]
struct LayoutDocument {
    distance: usize,
    n_data: usize,
    n_tiles: usize,
    total_qubits: usize,
    data_qubits: Vec<QubitDoc>,
    tiles: Vec<TileDoc>,
    logical_x: Vec<usize>,
    logical_z: Vec<usize>,
}

#[derive(Serialize)]
struct QubitDoc {
    index: usize,
    row: usize,
    col: usize,
    xy: (f64, f64),
}

#[derive(Serialize)]
struct TileDoc {
    index: usize,
    row: usize,
    col: usize,
    color: u8,
    ancilla: usize,
    flag: usize,
    support: Vec<usize>,
}

/// For every generator, a data Pauli anticommuting with that generator only.
///
/// X-check pure errors are Z-type and vice versa. Among all solutions the
/// one of least weight is returned when the search space is small enough
/// (always the case for d <= 7).
pub fn pure_error_basis(layout: &CodeLayout) -> Result<Vec<PauliOperator>> {
    let h = layout.incidence();
    let nt = layout.n_tiles();
    let null = h.nullspace();
    let mut per_tile = Vec::with_capacity(nt);
    for t in 0..nt {
        let rhs = BitVec::unit(nt, t);
        let x0 = h
            .solve(&rhs)
            .ok_or_else(|| Error::Singular(format!("no pure error for tile {t}")))?;
        per_tile.push(min_weight_coset(&x0, &null));
    }
    Ok(per_tile
        .iter()
        .map(|v| PauliOperator::z_type(v.clone()))
        .chain(per_tile.iter().map(|v| PauliOperator::x_type(v.clone())))
        .collect())
}

fn min_weight_coset(x0: &BitVec, null: &[BitVec]) -> BitVec {
    if null.len() > 22 {
        return x0.clone();
    }
    // Gray-code walk over the null space.
    let mut cur = x0.clone();
    let mut best = x0.clone();
    let mut best_w = best.weight();
    for i in 1u64..(1u64 << null.len()) {
        let bit = i.trailing_zeros() as usize;
        cur.xor_assign(&null[bit]);
        let w = cur.weight();
        if w < best_w {
            best_w = w;
            best = cur.clone();
        }
    }
    best
}

/// Pure-error correction for a syndrome: the product of the basis elements it selects.
pub fn pure_error_for(basis: &[PauliOperator], syndrome: &BitVec) -> PauliOperator {
    let n = basis.first().map_or(0, |p| p.n_qubits());
    let mut out = PauliOperator::identity(n);
    for i in syndrome.ones() {
        out = out.mul(&basis[i]);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistanceSearch {
    /// All Pauli operators.
    Full,
    /// Only X-type and Z-type operators (exact for CSS codes).
    CssRestricted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistanceResult {
    Exactly(usize),
    GreaterThan(usize),
}

const ENUMERATION_LIMIT: u128 = 2_000_000_000;

/// Minimum weight of an undetectable, logically nontrivial Pauli, by enumeration.
pub fn code_distance_bruteforce(
    layout: &CodeLayout,
    max_weight: usize,
    search: DistanceSearch,
) -> Result<DistanceResult> {
    let n = layout.n_data();
    if n > 64 {
        return Err(Error::InvalidArgument("distance search supports at most 64 data qubits".into()));
    }
    let per_support: u128 = match search {
        DistanceSearch::Full => 3,
        DistanceSearch::CssRestricted => 2,
    };
    let mut total: u128 = 0;
    for w in 1..=max_weight.min(n) {
        total += binomial(n, w) * per_support.pow(w as u32);
    }
    if total > ENUMERATION_LIMIT {
        return Err(Error::EnumerationTooLarge { candidates: total, limit: ENUMERATION_LIMIT });
    }

    let mask = |v: &BitVec| v.words().first().copied().unwrap_or(0);
    let stabs: Vec<u64> = layout.z_stabilizers.iter().map(mask).collect();
    let (lx, lz) = (mask(&layout.logical_x), mask(&layout.logical_z));
    let odd = |a: u64| a.count_ones() & 1 == 1;
    // (x, z) is a nontrivial logical when it commutes with every check and
    // anticommutes with one of the logicals.
    let is_logical = |x: u64, z: u64| {
        stabs.iter().all(|&s| !odd(s & x) && !odd(s & z)) && (odd(x & lz) || odd(z & lx))
    };

    for w in 1..=max_weight.min(n) {
        let mut found = false;
        for_each_combination(n, w, |support| {
            if found {
                return;
            }
            let bits: u64 = support.iter().fold(0, |acc, &q| acc | (1u64 << q));
            match search {
                DistanceSearch::CssRestricted => {
                    if is_logical(bits, 0) || is_logical(0, bits) {
                        found = true;
                    }
                }
                DistanceSearch::Full => {
                    // Each support qubit carries X, Y or Z.
                    let mut assignment = vec![0u8; w];
                    loop {
                        let (mut x, mut z) = (0u64, 0u64);
                        for (k, &q) in support.iter().enumerate() {
                            match assignment[k] {
                                0 => x |= 1 << q,
                                1 => {
                                    x |= 1 << q;
                                    z |= 1 << q
                                }
                                _ => z |= 1 << q,
                            }
                        }
                        if is_logical(x, z) {
                            found = true;
                            return;
                        }
                        let mut k = 0;
                        while k < w && assignment[k] == 2 {
                            assignment[k] = 0;
                            k += 1;
                        }
                        if k == w {
                            break;
                        }
                        assignment[k] += 1;
                    }
                }
            }
        });
        if found {
            return Ok(DistanceResult::Exactly(w));
        }
    }
    Ok(DistanceResult::GreaterThan(max_weight))
}

fn binomial(n: usize, k: usize) -> u128 {
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

pub(crate) fn for_each_combination(n: usize, k: usize, mut f: impl FnMut(&[usize])) {
    if k > n {
        return;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        f(&idx);
        let mut i = k;
        while i > 0 && idx[i - 1] == n - k + i - 1 {
            i -= 1;
        }
        if i == 0 {
            return;
        }
        idx[i - 1] += 1;
        for j in i..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_match_closed_forms() {
        for (d, n_data, tiles, total) in [(3, 7, 3, 13), (5, 19, 9, 37), (7, 37, 18, 73)] {
            let l = CodeLayout::new(d).unwrap();
            assert_eq!(l.n_data(), n_data);
            assert_eq!(l.n_tiles(), tiles);
            assert_eq!(l.total_qubits, total);
            let d = d as usize;
            assert_eq!(l.n_data(), (3 * d * d + 1) / 4);
            assert_eq!(l.total_qubits, (3 * d * d - 1) / 2);
            assert_eq!(l.n_tiles(), (l.n_data() - 1) / 2);
        }
    }

    #[test]
    fn rejects_even_and_small_distances() {
        for d in [-3, 0, 1, 2, 4, 6] {
            assert!(matches!(CodeLayout::new(d), Err(Error::InvalidDistance(_))));
        }
    }

    #[test]
    fn bulk_tiles_have_weight_six_and_boundary_tiles_four() {
        for d in [3, 5, 7] {
            let l = CodeLayout::new(d).unwrap();
            let side = 3 * (l.distance - 1) / 2;
            for t in &l.tiles {
                let (r, c) = t.site;
                let on_boundary = c == 0 || c == r || r == side;
                assert_eq!(t.weight(), if on_boundary { 4 } else { 6 }, "tile {:?}", t.site);
            }
        }
    }

    #[test]
    fn steane_pure_errors_are_corner_qubits() {
        let l = CodeLayout::new(3).unwrap();
        let basis = pure_error_basis(&l).unwrap();
        let gens = l.generators();
        for (i, p) in basis.iter().enumerate() {
            assert_eq!(p.weight(), 1);
            for (j, g) in gens.iter().enumerate() {
                assert_eq!(p.symplectic(g), i == j);
            }
            let q = p.x.ones().chain(p.z.ones()).next().unwrap();
            let (r, c) = l.data_sites[q];
            assert!((r, c) == (0, 0) || (r == 3 && (c == 0 || c == 3)));
        }
    }

    #[test]
    fn two_pure_errors_flip_exactly_their_bits() {
        let l = CodeLayout::new(3).unwrap();
        let basis = pure_error_basis(&l).unwrap();
        let s = BitVec::from_indices(6, [0, 2]);
        let p = pure_error_for(&basis, &s);
        assert_eq!(l.syndrome(&p), s);
        assert!(pure_error_for(&basis, &BitVec::zeros(6)).is_identity());
    }

    #[test]
    fn distance_three_by_full_enumeration() {
        let l = CodeLayout::new(3).unwrap();
        assert_eq!(
            code_distance_bruteforce(&l, 3, DistanceSearch::Full).unwrap(),
            DistanceResult::Exactly(3)
        );
        assert_eq!(
            code_distance_bruteforce(&l, 2, DistanceSearch::Full).unwrap(),
            DistanceResult::GreaterThan(2)
        );
    }

    #[test]
    fn enumeration_bound_is_enforced() {
        let l = CodeLayout::new(7).unwrap();
        assert!(matches!(
            code_distance_bruteforce(&l, 12, DistanceSearch::Full),
            Err(Error::EnumerationTooLarge { .. })
        ));
    }

    #[test]
    fn json_export_is_deterministic() {
        let a = CodeLayout::new(5).unwrap().to_json();
        let b = CodeLayout::new(5).unwrap().to_json();
        assert_eq!(a, b);
        let v: serde_json::Value = serde_json::from_str(&a).unwrap();
        assert_eq!(v["n_data"], 19);
        assert_eq!(v["tiles"].as_array().unwrap().len(), 9);
    }
}
