use std::collections::BTreeSet;

use proptest::prelude::*;

use pacsim::arena::{Arena, HEAP_WINDOW};
use pacsim::baseline::{Baseline, BaselineConfig};
use pacsim::harness::{gen_corpus, run_case};
use pacsim::ir::{
    instrument, parse, pass_loop_bounds, pass_loop_invariant, pass_redundant_elim, pass_write_only,
    static_verify_elim, OptFlags, Program, RedundantOptions,
};
use pacsim::machine::RunConfig;
use pacsim::metatable::MetadataTable;
use pacsim::sealcodec::{PacKey, SealedWord, ADDR_MASK, SEAL_MASK};
use pacsim::{AccessKind, ViolationKind};

fn corpus_program() -> impl Strategy<Value = Program> {
    (0u64..64, 0usize..20).prop_map(|(seed, idx)| {
        let cases = gen_corpus(seed, 1);
        instrument(&cases[idx].program).unwrap()
    })
}

type Pass = fn(&Program) -> Program;

fn passes() -> Vec<(&'static str, Pass)> {
    vec![
        ("loop-inv", pass_loop_invariant),
        ("loop-bounds", pass_loop_bounds),
        ("redundant", |p| pass_redundant_elim(p, RedundantOptions::default())),
        ("redundant-postdom", |p| pass_redundant_elim(p, RedundantOptions { post_dominance: true })),
        ("write-only", pass_write_only),
        ("static", static_verify_elim),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn codec_round_trip(addr in 0u64..=ADDR_MASK, seal in 0u32..=SEAL_MASK as u32) {
        let w = SealedWord::encode(addr, seal).unwrap();
        prop_assert_eq!(w.decode(), (addr, seal));
        prop_assert_eq!(w.raw() >> 63, 0);
        prop_assert_eq!(SealedWord::encode(w.strip(), 0).unwrap().strip(), addr);
        prop_assert!(SealedWord::encode(addr | (1 << 39), seal).is_err());
        prop_assert!(SealedWord::encode(addr, seal | (1 << 24)).is_err());
    }

    #[test]
    fn live_seals_stay_distinct(ops in prop::collection::vec((any::<bool>(), 1u32..4096), 1..400), key in any::<u64>()) {
        let key = PacKey(key);
        let mut t = MetadataTable::new();
        let mut live: Vec<u32> = Vec::new();
        for (i, (free, size)) in ops.into_iter().enumerate() {
            if free && !live.is_empty() {
                let s = live.swap_remove(i % live.len());
                t.clear(s).unwrap();
            } else {
                let (s, _) = t.create_metadata(key, 0x4000_0000 + 0x1000 * i as u64, size, i as u64, 9).unwrap();
                prop_assert!(s != 0);
                live.push(s);
            }
        }
        let distinct: BTreeSet<u32> = live.iter().copied().collect();
        prop_assert_eq!(distinct.len(), live.len());
        prop_assert_eq!(t.live_count(), live.len());
        prop_assert!(t.verify(key).is_ok());
    }

    #[test]
    fn passes_are_idempotent_and_never_add_checks(p in corpus_program()) {
        let dynamic = |q: &Program| {
            let cfg = RunConfig { halt_on_first: false, ..RunConfig::default() };
            pacsim::machine::run(q, cfg, PacKey(3)).unwrap().dynamic_check_count
        };
        for (name, pass) in passes() {
            let once = pass(&p);
            prop_assert_eq!(pass(&once), once.clone(), "{} not idempotent", name);
            if name == "loop-bounds" {
                // One in-loop check becomes a min and a max check, so only the
                // executed count is monotone.
                prop_assert!(dynamic(&once) <= dynamic(&p), "loop-bounds added executed checks");
            } else {
                prop_assert!(once.check_count() <= p.check_count(), "{} added checks", name);
            }
        }
    }

    #[test]
    fn print_parse_round_trip(p in corpus_program(), mask in 0u8..32) {
        let flags = OptFlags {
            loop_invariant: mask & 1 != 0,
            loop_bounds: mask & 2 != 0,
            redundant: mask & 4 != 0,
            static_verify: mask & 8 != 0,
            write_only: mask & 16 != 0,
            ..OptFlags::default()
        };
        let q = flags.apply(&p);
        prop_assert_eq!(parse(&q.to_string()).unwrap(), q);
    }

    #[test]
    fn write_only_sound_on_write_violations(seed in 0u64..64, idx in 0usize..20) {
        let case = &gen_corpus(seed, 1)[idx];
        let cfg = RunConfig { halt_on_first: false, ..RunConfig::default() };
        let key = PacKey(7);
        let full = run_case(&case.program, OptFlags::default(), cfg, key).unwrap();
        prop_assume!(full.violations.iter().all(|v| v.access != AccessKind::Read));
        let wo = OptFlags { write_only: true, ..OptFlags::default() };
        let got = run_case(&case.program, wo, cfg, key).unwrap();
        let kinds = |r: &pacsim::RunResult| r.violations.iter().map(|v| v.kind).collect::<BTreeSet<ViolationKind>>();
        prop_assert_eq!(kinds(&got), kinds(&full));
    }

    #[test]
    fn arena_blocks_never_overlap(ops in prop::collection::vec((any::<bool>(), 1u64..2048), 1..300)) {
        let mut a = Arena::new(HEAP_WINDOW, 16, true);
        let mut live: Vec<(u64, u64)> = Vec::new();
        for (i, (free, size)) in ops.into_iter().enumerate() {
            if free && !live.is_empty() {
                let (base, _) = live.swap_remove(i % live.len());
                prop_assert!(a.release(base));
            } else {
                let base = a.reserve(size).unwrap();
                prop_assert_eq!(base % 16, 0);
                for &(b, s) in &live {
                    prop_assert!(base + size + 16 <= b || b + s + 16 <= base);
                }
                live.push((base, size));
            }
        }
    }

    #[test]
    fn quarantine_within_capacity(sizes in prop::collection::vec(1u64..5000, 1..200), cap in 1u64..20_000) {
        let cfg = BaselineConfig { quarantine_capacity_bytes: cap, ..BaselineConfig::default() };
        let mut b = Baseline::new(cfg);
        let mut heap = Arena::new(HEAP_WINDOW, cfg.redzone_bytes, true);
        for (i, size) in sizes.into_iter().enumerate() {
            let base = b.b_alloc(&mut heap, size).unwrap();
            prop_assert!(b.b_check(base, size.min(u32::MAX as u64) as u32, AccessKind::Write, 1).is_ok());
            prop_assert!(b.b_free(&mut heap, base, i as u32).is_ok());
            prop_assert!(b.quarantined_bytes() <= cap);
        }
    }
}
