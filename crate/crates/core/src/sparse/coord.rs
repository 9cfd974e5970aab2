//! Open-addressing hash map from pixel coordinates to tensor rows.
//!
//! Sized once at construction (load factor ≤ 0.5, power-of-two capacity,
//! linear probing). Lookups are the hot path of kernel-map construction, so
//! the table is a flat slot array with a multiply–xor hash rather than a
//! general-purpose map.

/// Coordinate at a stride level: (row, col). Negative values are legal in
/// sparse space (offsets have no image boundary).
pub type Coord = (i32, i32);

const EMPTY: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoordMap {
    keys: Vec<Coord>,
    vals: Vec<u32>,
    mask: usize,
    len: usize,
}

#[inline]
fn hash(c: Coord) -> u64 {
    let x = (c.0 as u32 as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let y = (c.1 as u32 as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    let mut h = x ^ y.rotate_left(31);
    h ^= h >> 29;
    h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h ^ (h >> 32)
}

impl CoordMap {
    /// Build from a coordinate list; `vals[i] = i`. Returns the index of a
    /// duplicate coordinate on failure.
    pub fn build(coords: &[Coord]) -> Result<Self, usize> {
        let cap = (coords.len().max(1) * 2).next_power_of_two();
        let mut map = CoordMap {
            keys: vec![(0, 0); cap],
            vals: vec![EMPTY; cap],
            mask: cap - 1,
            len: 0,
        };
        for (i, &c) in coords.iter().enumerate() {
            if !map.insert(c, i as u32) {
                return Err(i);
            }
        }
        Ok(map)
    }

    /// Insert a new key; false if the key is already present.
    fn insert(&mut self, key: Coord, val: u32) -> bool {
        let mut slot = hash(key) as usize & self.mask;
        loop {
            if self.vals[slot] == EMPTY {
                self.keys[slot] = key;
                self.vals[slot] = val;
                self.len += 1;
                return true;
            }
            if self.keys[slot] == key {
                return false;
            }
            slot = (slot + 1) & self.mask;
        }
    }

    #[inline]
    pub fn get(&self, key: Coord) -> Option<u32> {
        let mut slot = hash(key) as usize & self.mask;
        loop {
            let v = self.vals[slot];
            if v == EMPTY {
                return None;
            }
            if self.keys[slot] == key {
                return Some(v);
            }
            slot = (slot + 1) & self.mask;
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    #[test]
    fn build_and_lookup() {
        let coords = vec![(0, 0), (1, 5), (-3, 2), (1000, -1000)];
        let map = CoordMap::build(&coords).unwrap();
        assert_eq!(map.len(), 4);
        for (i, &c) in coords.iter().enumerate() {
            assert_eq!(map.get(c), Some(i as u32));
        }
        assert_eq!(map.get((2, 2)), None);
    }

    #[test]
    fn duplicate_reports_row() {
        assert_eq!(CoordMap::build(&[(0, 0), (1, 1), (0, 0)]), Err(2));
    }

    #[test]
    fn empty_map_is_fine() {
        let map = CoordMap::build(&[]).unwrap();
        assert!(map.is_empty());
        assert_eq!(map.get((0, 0)), None);
    }

    #[test]
    fn agrees_with_btree_oracle_on_random_coords() {
        let mut state = 7u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 33) as i32 % 57 - 28
        };
        for _ in 0..50 {
            let mut oracle = BTreeMap::new();
            let mut coords = Vec::new();
            while coords.len() < 120 {
                let c = (next(), next());
                if !oracle.contains_key(&c) {
                    oracle.insert(c, coords.len() as u32);
                    coords.push(c);
                }
            }
            let map = CoordMap::build(&coords).unwrap();
            for dy in -30..30 {
                for dx in -30..30 {
                    assert_eq!(map.get((dy, dx)), oracle.get(&(dy, dx)).copied());
                }
            }
        }
    }
}
