//! AFL-style edge coverage.

pub const MAP_SIZE: usize = 65536;

/// Mixes a block address into a map-sized hash.
#[inline]
pub fn block_hash(addr: u32) -> u32 {
    (addr >> 3).wrapping_mul(0x9E37_79B1) >> 16
}

/// Map cell for the transition `prev -> cur`.
#[inline]
pub fn edge_index(prev: u32, cur: u32) -> usize {
    ((block_hash(prev) ^ block_hash(cur)) as usize) % MAP_SIZE
}

#[derive(Clone)]
pub struct CoverageMap {
    cells: Box<[u8; MAP_SIZE]>,
}

impl Default for CoverageMap {
    fn default() -> Self {
        CoverageMap {
            cells: Box::new([0; MAP_SIZE]),
        }
    }
}

impl CoverageMap {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn record(&mut self, prev: u32, cur: u32) {
        let cell = &mut self.cells[edge_index(prev, cur)];
        *cell = cell.saturating_add(1);
    }

    pub fn clear(&mut self) {
        self.cells.fill(0);
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells[..]
    }

    /// Indices of non-zero cells, ascending.
    pub fn hit_cells(&self) -> impl Iterator<Item = usize> + '_ {
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, c)| **c != 0)
            .map(|(i, _)| i)
    }

    pub fn total_hits(&self) -> u64 {
        self.cells.iter().map(|c| *c as u64).sum()
    }
}

impl PartialEq for CoverageMap {
    fn eq(&self, other: &Self) -> bool {
        self.cells[..] == other.cells[..]
    }
}

impl Eq for CoverageMap {}

impl std::fmt::Debug for CoverageMap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "CoverageMap({} cells hit)", self.hit_cells().count())
    }
}
