//! Run-length encoding of binary masks.
//!
//! Pixels are read in column-major order and the runs alternate between
//! background and foreground, starting with background, so a mask that
//! begins with a foreground pixel starts with a zero run. Runs are written
//! as space-separated decimal integers.

use super::BinaryMask;
use crate::error::{Error, Result};

pub fn encode(mask: &BinaryMask) -> String {
    let (h, w) = (mask.height(), mask.width());
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0usize;
    for x in 0..w {
        for y in 0..h {
            let v = mask.get(x, y);
            if v != current {
                runs.push(len);
                current = v;
                len = 0;
            }
            len += 1;
        }
    }
    runs.push(len);
    runs.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(" ")
}

pub fn decode(rle: &str, height: usize, width: usize) -> Result<BinaryMask> {
    let total = height * width;
    let mut bits = vec![false; total];
    let mut pos = 0usize;
    let mut value = false;
    for (i, tok) in rle.split_ascii_whitespace().enumerate() {
        let run: usize = tok.parse().map_err(|_| Error::MalformedRle(format!("run {i}: {tok:?} is not a count")))?;
        if run == 0 && i > 0 {
            return Err(Error::MalformedRle(format!("run {i} is empty")));
        }
        let end = pos
            .checked_add(run)
            .filter(|&e| e <= total)
            .ok_or_else(|| Error::MalformedRle(format!("runs exceed {height}x{width} pixels")))?;
        if value {
            for p in pos..end {
                // Column-major position p is pixel (p / height, p % height).
                bits[(p % height) * width + p / height] = true;
            }
        }
        pos = end;
        value = !value;
    }
    if pos != total {
        return Err(Error::MalformedRle(format!("runs cover {pos} of {total} pixels")));
    }
    BinaryMask::from_bits(height, width, bits)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn uniform_masks() {
        assert_eq!(encode(&BinaryMask::new(2, 2)), "4");
        assert_eq!(encode(&BinaryMask::from_fn(2, 2, |_, _| true)), "0 4");
    }

    #[test]
    fn runs_are_column_major() {
        // Left column on, right column off.
        let m = BinaryMask::from_fn(2, 2, |x, _| x == 0);
        assert_eq!(encode(&m), "0 2 2");
        // Top row on.
        let m = BinaryMask::from_fn(2, 2, |_, y| y == 0);
        assert_eq!(encode(&m), "0 1 1 1 1");
        assert_eq!(decode("0 1 1 1 1", 2, 2).unwrap(), m);
    }

    #[test]
    fn malformed_strings_are_rejected() {
        for s in ["", "3", "5", "1 x 2", "-1 5", "1 0 3", "2 2 1"] {
            assert!(matches!(decode(s, 2, 2), Err(Error::MalformedRle(_))), "{s:?}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn round_trip(h in 1usize..12, w in 1usize..12, seed in any::<u64>()) {
            let mut s = seed;
            let m = BinaryMask::from_fn(h, w, |_, _| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (s >> 33) & 1 == 1
            });
            prop_assert_eq!(decode(&encode(&m), h, w).unwrap(), m);
        }
    }
}
