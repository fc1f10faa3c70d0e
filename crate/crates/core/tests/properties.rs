use isda::config::ModelConfig;
use isda::mask::{coord_channels, MaskHead};
use isda::{Bindings, Graph, ParamStore, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SIZE: usize = 12;
const PATCH: usize = 6;

fn head(positions: bool, seed: u64) -> (MaskHead, ParamStore) {
    let cfg = ModelConfig { kernel_positions: positions, mfr_positions: positions, ..ModelConfig::tiny() };
    let mut store = ParamStore::new();
    let head = MaskHead::new(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
    (head, store)
}

/// Feature map whose non-zero content is a random patch with its corner at `(x0, y0)`.
fn features(d: usize, x0: usize, y0: usize, positions: bool, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let patch = Tensor::uniform(&[d, PATCH, PATCH], -1.0, 1.0, &mut rng);
    let coords = coord_channels(SIZE, SIZE);
    Tensor::from_fn(&[d + 2, SIZE, SIZE], |i| {
        let (c, y, x) = (i / (SIZE * SIZE), i / SIZE % SIZE, i % SIZE);
        if c >= d {
            return if positions { coords.data()[(c - d) * SIZE * SIZE + y * SIZE + x] } else { 0.0 };
        }
        let inside = (x0..x0 + PATCH).contains(&x) && (y0..y0 + PATCH).contains(&y);
        if inside {
            patch.at(&[c, y - y0, x - x0])
        } else {
            0.0
        }
    })
}

/// Mask logits `[N, SIZE*SIZE]` for `objects` at `refs` over `mfr`.
fn logits(head: &MaskHead, store: &ParamStore, objects: &Tensor, refs: &Tensor, mfr: &Tensor) -> Tensor {
    let g = Graph::new();
    let p = Bindings::new(&g, store, false);
    let out = head.forward(&p, g.constant(objects.clone()), g.constant(refs.clone()), g.constant(mfr.clone())).unwrap();
    let v = (*out.mask_logits.value()).clone();
    v
}

/// Largest deviation of `moved` from `base` shifted by `(dx, dy)`, over pixels
/// whose source lies inside the map.
fn shift_error(base: &Tensor, moved: &Tensor, dx: usize, dy: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for q in 0..base.dim(0) {
        for y in dy..SIZE {
            for x in dx..SIZE {
                let a = base.at(&[q, (y - dy) * SIZE + (x - dx)]);
                let b = moved.at(&[q, y * SIZE + x]);
                worst = worst.max((a - b).abs());
            }
        }
    }
    worst
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn coordinate_free_logits_follow_translated_content(
        seed in any::<u64>(),
        (dx, dy) in (0..=SIZE - PATCH - 1, 0..=SIZE - PATCH - 1),
    ) {
        let (head, store) = head(false, seed);
        let d = ModelConfig::tiny().width;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let objects = Tensor::randn(&[3, d], 1.0, &mut rng);
        let refs = Tensor::uniform(&[3, 2], 0.0, 1.0, &mut rng);
        let base = logits(&head, &store, &objects, &refs, &features(d, 0, 0, false, seed));
        let moved = logits(&head, &store, &objects, &refs, &features(d, dx, dy, false, seed));
        prop_assert!(shift_error(&base, &moved, dx, dy) < 1e-12);
    }

    #[test]
    fn coordinates_break_translation_invariance(
        seed in any::<u64>(),
        (dx, dy) in (1..=SIZE - PATCH - 1, 1..=SIZE - PATCH - 1),
    ) {
        let (head, store) = head(true, seed);
        let d = ModelConfig::tiny().width;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let objects = Tensor::randn(&[3, d], 1.0, &mut rng);
        // Reference points away from the center keep the position term non-zero.
        let refs = Tensor::uniform(&[3, 2], 0.7, 1.0, &mut rng);
        let base = logits(&head, &store, &objects, &refs, &features(d, 0, 0, true, seed));
        let moved = logits(&head, &store, &objects, &refs, &features(d, dx, dy, true, seed));
        prop_assert!(shift_error(&base, &moved, dx, dy) > 1e-3);
    }

    #[test]
    fn identical_objects_are_told_apart_only_by_position(seed in any::<u64>()) {
        let d = ModelConfig::tiny().width;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        let object = Tensor::randn(&[1, d], 1.0, &mut rng);
        let objects = Tensor::from_fn(&[2, d], |i| object.data()[i % d]);
        let refs = Tensor::new(&[2, 2], vec![0.2, 0.3, 0.8, 0.7]).unwrap();
        let spread = |positions: bool| {
            let (head, store) = head(positions, seed);
            let l = logits(&head, &store, &objects, &refs, &features(d, 3, 3, positions, seed));
            (0..SIZE * SIZE).map(|i| (l.at(&[0, i]) - l.at(&[1, i])).abs()).fold(0.0, f64::max)
        };
        prop_assert_eq!(spread(false), 0.0);
        prop_assert!(spread(true) > 1e-3);
    }
}
