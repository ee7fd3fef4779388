//! Near-duplicate crop grouping by 64-bit difference hash.

use image::RgbImage;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const DEFAULT_THRESHOLD_BITS: u32 = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DedupGroup {
    pub group_id: String,
    pub representative: String,
    pub members: Vec<String>,
    #[serde(with = "hex64")]
    pub hash_bits: u64,
}

mod hex64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{v:016x}"))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        let s = String::deserialize(d)?;
        u64::from_str_radix(&s, 16).map_err(serde::de::Error::custom)
    }
}

/// Integer luma scaled by 1000.
fn luma(p: &image::Rgb<u8>) -> u64 {
    299 * p.0[0] as u64 + 587 * p.0[1] as u64 + 114 * p.0[2] as u64
}

/// Overlap of source pixel `i` (spanning `[i*n, (i+1)*n)` in scaled units)
/// with output cell `c` (spanning `[c*len, (c+1)*len)`).
fn overlap(i: u64, n: u64, c: u64, len: u64) -> u64 {
    let lo = (i * n).max(c * len);
    let hi = ((i + 1) * n).min((c + 1) * len);
    hi.saturating_sub(lo)
}

/// Exact area-averaged 9x8 grayscale thumbnail, returned as unnormalised
/// sums (every cell shares the same denominator, so comparisons are exact).
pub fn thumbnail_sums(img: &RgbImage) -> [[u64; 9]; 8] {
    let (w, h) = (img.width() as u64, img.height() as u64);
    let mut cells = [[0u64; 9]; 8];
    for (x, y, p) in img.enumerate_pixels() {
        let (x, y) = (x as u64, y as u64);
        let v = luma(p);
        // output columns touched by source column x (scaled by 9)
        let c0 = x * 9 / w;
        let c1 = ((x + 1) * 9).div_ceil(w).min(9);
        let r0 = y * 8 / h;
        let r1 = ((y + 1) * 8).div_ceil(h).min(8);
        for r in r0..r1 {
            let oy = overlap(y, 8, r, h);
            if oy == 0 {
                continue;
            }
            for c in c0..c1 {
                let ox = overlap(x, 9, c, w);
                cells[r as usize][c as usize] += v * ox * oy;
            }
        }
    }
    cells
}

/// Difference hash: bit `row*8 + col` is set iff the thumbnail cell at
/// (row, col) is darker than its right neighbour.
pub fn dhash(img: &RgbImage) -> u64 {
    let cells = thumbnail_sums(img);
    let mut bits = 0u64;
    for (row, line) in cells.iter().enumerate() {
        for col in 0..8 {
            if line[col] < line[col + 1] {
                bits |= 1 << (row * 8 + col);
            }
        }
    }
    bits
}

pub fn hamming(a: u64, b: u64) -> u32 {
    (a ^ b).count_ones()
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Single-linkage clustering: crops whose hashes are within
/// `threshold_bits` are joined, transitively. Each group's representative
/// is its smallest crop id. Groups are ordered by representative.
pub fn group_duplicates(crops: &[(String, u64)], threshold_bits: u32) -> Vec<DedupGroup> {
    let n = crops.len();
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in i + 1..n {
            if hamming(crops[i].1, crops[j].1) <= threshold_bits {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().push(i);
    }
    let mut out: Vec<DedupGroup> = groups
        .into_values()
        .map(|idx| {
            let mut members: Vec<String> = idx.iter().map(|&i| crops[i].0.clone()).collect();
            members.sort();
            members.dedup();
            let rep = members[0].clone();
            let hash_bits = idx
                .iter()
                .find(|&&i| crops[i].0 == rep)
                .map(|&i| crops[i].1)
                .unwrap_or_default();
            DedupGroup {
                group_id: format!("grp-{rep}"),
                representative: rep,
                members,
                hash_bits,
            }
        })
        .collect();
    out.sort_by(|a, b| a.representative.cmp(&b.representative));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Reference: upsample by pixel replication to 9W x 8H, then sum
    /// W x H blocks.
    fn oracle_hash(img: &RgbImage) -> u64 {
        let (w, h) = img.dimensions();
        let mut cells = [[0u64; 9]; 8];
        for by in 0..8 * h {
            for bx in 0..9 * w {
                let p = img.get_pixel(bx / 9, by / 8);
                cells[(by / h) as usize][(bx / w) as usize] += luma(p);
            }
        }
        let mut bits = 0u64;
        for r in 0..8 {
            for c in 0..8 {
                if cells[r][c] < cells[r][c + 1] {
                    bits |= 1 << (r * 8 + c);
                }
            }
        }
        bits
    }

    fn noise(w: u32, h: u32, seed: u64) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RgbImage::from_fn(w, h, |_, _| Rgb([rng.random(), rng.random(), rng.random()]))
    }

    fn mirror_fixture() -> RgbImage {
        RgbImage::from_fn(45, 32, |x, y| {
            let v = ((x * x + 3 * y) % 251) as u8;
            Rgb([v, v.wrapping_mul(3), 255 - v])
        })
    }

    #[test]
    fn uniform_image_hashes_to_zero() {
        assert_eq!(dhash(&RgbImage::from_pixel(33, 21, Rgb([128, 128, 128]))), 0);
    }

    #[test]
    fn self_distance_is_zero() {
        let img = noise(50, 40, 1);
        assert_eq!(hamming(dhash(&img), dhash(&img)), 0);
    }

    #[test]
    fn mirror_distance_matches_oracle() {
        let img = mirror_fixture();
        let mirrored = image::imageops::flip_horizontal(&img);
        let expected = hamming(oracle_hash(&img), oracle_hash(&mirrored));
        assert_eq!(hamming(dhash(&img), dhash(&mirrored)), expected);
        // golden value, frozen from the oracle
        assert_eq!(expected, 26);
    }

    #[test]
    fn five_identical_crops_form_one_group() {
        let h = dhash(&noise(30, 30, 4));
        let crops: Vec<(String, u64)> = (0..5).map(|i| (format!("c{i}"), h)).collect();
        let g = group_duplicates(&crops, DEFAULT_THRESHOLD_BITS);
        assert_eq!(g.len(), 1);
        assert_eq!(g[0].members.len(), 5);
        assert_eq!(g[0].representative, "c0");
        assert_eq!(g[0].group_id, "grp-c0");
    }

    #[test]
    fn distinct_noise_with_zero_threshold_is_singletons() {
        let crops: Vec<(String, u64)> = (0..8).map(|i| (format!("n{i}"), dhash(&noise(40, 40, 100 + i)))).collect();
        assert_eq!(group_duplicates(&crops, 0).len(), 8);
    }

    #[test]
    fn single_linkage_chains() {
        let a = 0u64;
        let b = 0b1111;
        let c = 0b1111_1111;
        assert_eq!((hamming(a, b), hamming(b, c), hamming(a, c)), (4, 4, 8));
        let crops = vec![("c".to_string(), c), ("a".to_string(), a), ("b".to_string(), b)];
        let g = group_duplicates(&crops, 5);
        assert_eq!(g.len(), 1);
        assert_eq!(g[0].members, vec!["a", "b", "c"]);
        assert_eq!(g[0].hash_bits, a);
    }

    #[test]
    fn hash_serialises_as_hex() {
        let g = &group_duplicates(&[("x".into(), 0xdead_beef)], 0)[0];
        let json = serde_json::to_string(g).unwrap();
        assert!(json.contains("\"00000000deadbeef\""));
        assert_eq!(&serde_json::from_str::<DedupGroup>(&json).unwrap(), g);
    }

    proptest! {
        #[test]
        fn matches_replication_oracle(w in 1u32..30, h in 1u32..30, seed in any::<u64>()) {
            let img = noise(w, h, seed);
            prop_assert_eq!(dhash(&img), oracle_hash(&img));
        }

        #[test]
        fn partition_and_monotonicity(hashes in proptest::collection::vec(any::<u64>(), 0..40), t in 0u32..64) {
            // bias toward near neighbours so groups actually form
            let crops: Vec<(String, u64)> = hashes
                .iter()
                .enumerate()
                .map(|(i, h)| (format!("c{i:02}"), if i % 2 == 1 { hashes[i - 1] ^ (h & 0x0101_0101) } else { *h }))
                .collect();
            let g = group_duplicates(&crops, t);
            let mut all: Vec<&String> = g.iter().flat_map(|g| &g.members).collect();
            prop_assert_eq!(all.len(), crops.len());
            all.sort();
            all.dedup();
            prop_assert_eq!(all.len(), crops.len());
            for grp in &g {
                prop_assert!(grp.members.contains(&grp.representative));
                prop_assert_eq!(&grp.representative, grp.members.iter().min().unwrap());
            }
            let looser = group_duplicates(&crops, t + 1);
            prop_assert!(looser.len() <= g.len());
        }
    }
}
