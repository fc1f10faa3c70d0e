use isda::data::BinaryMask;

const PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
];

/// Interleaved RGB of a grayscale image with each mask tinted in its own
/// colour at half opacity. Later masks are drawn over earlier ones.
pub fn compose(gray: &[u8], masks: &[&BinaryMask]) -> Vec<u8> {
    let mut rgb: Vec<u8> = gray.iter().flat_map(|&g| [g, g, g]).collect();
    for (k, mask) in masks.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        for (i, _) in mask.bits().iter().enumerate().filter(|(_, &b)| b) {
            for c in 0..3 {
                let px = &mut rgb[3 * i + c];
                *px = ((*px as u16 + color[c] as u16) / 2) as u8;
            }
        }
    }
    rgb
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn only_masked_pixels_are_tinted() {
        let gray = vec![100u8; 4];
        let mask = BinaryMask::from_fn(2, 2, |x, y| x == 1 && y == 0);
        let rgb = compose(&gray, &[&mask]);
        assert_eq!(rgb.len(), 12);
        assert_eq!(&rgb[0..3], &[100, 100, 100]);
        assert_eq!(&rgb[3..6], &[165, 62, 87]);
        assert!(rgb[6..].iter().all(|&v| v == 100));
    }
}
