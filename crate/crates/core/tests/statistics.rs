//! Distribution checks on the keyed mixing function.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use pacsim::metatable::MetadataTable;
use pacsim::sealcodec::{bm32, modifier, pac24, PacKey, DEFAULT_KEY};

const KEY: PacKey = PacKey(DEFAULT_KEY);

fn chi_square(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum()
}

#[test]
fn seal_nibbles_are_uniform() {
    let critical = ChiSquared::new(15.0).unwrap().inverse_cdf(0.999);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut counts = [[0u64; 16]; 6];
    for _ in 0..1_000_000 {
        let base = rng.gen_range(0x1000u64..1 << 39) & !0xF;
        let seal = pac24(KEY, base, modifier(rng.gen(), rng.gen_range(1..=4096)));
        for (n, c) in counts.iter_mut().enumerate() {
            c[(seal >> (4 * n)) as usize & 0xF] += 1;
        }
    }
    for (n, c) in counts.iter().enumerate() {
        let x2 = chi_square(c);
        assert!(x2 < critical, "nibble {n}: chi-square {x2:.2} >= {critical:.2}");
    }
}

#[test]
fn birthmark_low_nibble_is_uniform() {
    let critical = ChiSquared::new(15.0).unwrap().inverse_cdf(0.999);
    let mut counts = [0u64; 16];
    for counter in 0..1_000_000u64 {
        counts[(bm32(KEY, counter, 0x51) & 0xF) as usize] += 1;
    }
    let x2 = chi_square(&counts);
    assert!(x2 < critical, "chi-square {x2:.2}");
}

#[test]
fn prefilled_slot_forces_birthmark_decrement() {
    // Occupy exactly the slot the next allocation would land in, then
    // allocate: creation must step the birthmark down and pick another slot.
    let mut t = MetadataTable::new();
    let (base, size, counter, site) = (0x4000_0010u64, 64u32, 3u64, 0x77u64);
    let bm0 = bm32(KEY, counter, site);
    let first = pac24(KEY, base, modifier(bm0, size));
    let filler = (0u64..)
        .map(|c| (0x5000_0000 + 16 * c, 1000 + c))
        .find(|&(b, c)| pac24(KEY, b, modifier(bm32(KEY, c, 1), 16)) == first)
        .unwrap();
    let (s, _) = t.create_metadata(KEY, filler.0, 16, filler.1, 1).unwrap();
    assert_eq!(s, first);
    let (seal, bm) = t.create_metadata(KEY, base, size, counter, site).unwrap();
    assert_ne!(seal, first);
    assert_eq!(bm, bm0.wrapping_sub(1));
    assert_eq!(seal, pac24(KEY, base, modifier(bm, size)));
}
