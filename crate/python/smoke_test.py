"""Smoke test for the pacsim_py extension module.

Build and install first:  pip install --no-build-isolation -e crates/pacsim-py
"""

import json
import pathlib
import tempfile

import pacsim_py as ps

ROOT = pathlib.Path(__file__).resolve().parent.parent
FIXTURES = ROOT / "crates" / "core" / "fixtures"
KEY = ps.default_key()


def check_codec():
    assert KEY == 0x5AC5000000000001
    assert ps.pac24(KEY, 0x1000, ps.modifier(7, 100)) == 0x2FED69
    assert ps.pac24(KEY, 0xDEADBEEF, 0x123456789ABCDEF0) == 0xA2A6FA
    assert ps.bm32(KEY, 42, 0x9E37) == 0x9829835C
    w = ps.encode(0x4000_0010, 0xABCDEF)
    assert ps.strip(w) == 0x4000_0010 and ps.extract_seal(w) == 0xABCDEF
    try:
        ps.encode(1 << 39, 0)
    except ValueError:
        pass
    else:
        raise AssertionError("oversized address accepted")


def check_table():
    t = ps.MetadataTable()
    seal, bm = t.create(KEY, 0x4000_0000, 64, 0, 1)
    assert seal != 0 and len(t) == 1
    assert t.lookup(seal) == (0x4000_0000, bm, 64)
    assert t.verify(KEY)
    t.clear(seal)
    assert t.lookup(seal) is None and len(t) == 0


def check_listings():
    expected = {
        "listing_a1.pir": ("spatial-oob", False),
        "listing_a2.pir": ("temporal-invalid", False),
        "listing_a3.pir": ("invalid-free", True),
    }
    for name, (kind, baseline_hits) in expected.items():
        prog = ps.Program((FIXTURES / name).read_text()).instrument()
        pac = json.loads(prog.run())
        assert [v["kind"] for v in pac["violations"]] == [kind], (name, pac)
        base = json.loads(prog.run(tool="baseline"))
        assert bool(base["violations"]) == baseline_hits, (name, base)


def check_passes():
    prog = ps.Program((FIXTURES / "loop_bounds.pir").read_text()).instrument()
    assert json.loads(prog.run())["dynamic_check_count"] == 100
    hoisted = prog.optimize("loop-bounds")
    assert json.loads(hoisted.run())["dynamic_check_count"] == 2
    assert ps.Program(str(hoisted)).check_count == hoisted.check_count


def check_corpus():
    cases = ps.gen_corpus(1, 2)
    assert len(cases) == 40
    report = json.loads(ps.score(1, 2))
    assert report["meta"]["seed"] == 1
    for row in report["cases"]:
        if row["variant"] == "good":
            assert not row["detected"], row
        elif row["cwe"] != "subobject":
            assert row["detected"], row
    assert ps.score(1, 2) == ps.score(1, 2)
    with tempfile.TemporaryDirectory() as d:
        assert ps.write_corpus(1, 1, d) == 20
        assert (pathlib.Path(d) / "manifest.json").exists()


def check_collisions():
    matches, rate = ps.collision_trial(1000, identical=True)
    assert matches == 1000 and rate == 1.0
    matches, _ = ps.collision_trial(1_000_000)
    assert matches <= 3


if __name__ == "__main__":
    for check in (check_codec, check_table, check_listings, check_passes, check_corpus, check_collisions):
        check()
        print(f"ok  {check.__name__}")
    print("smoke test passed")
