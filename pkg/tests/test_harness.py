import csv
import json

import pytest

from saat import harness
from saat.attack import AttackConfig
from saat.harness import ResultRow, TransferRecord


def records(n, white_ok, black_ok):
    return [TransferRecord(i, 0, 1, "w", "b", i in white_ok, i in black_ok, "gaa", 0, "h") for i in range(n)]


# metrics ---------------------------------------------------------------------------------------

@pytest.mark.parametrize("k,expected", [(0, 0.0), (50, 100.0), (19, 38.0)])
def test_tsuc_examples(k, expected):
    assert harness.eval_tsuc(records(50, set(), set(range(k)))) == expected


def test_tsuc_empty_raises():
    with pytest.raises(ValueError):
        harness.eval_tsuc([])


def test_ttr_examples():
    recs = records(20, set(range(10)), set(range(5)))
    assert harness.eval_ttr(recs) == 50.0
    same = records(20, set(range(20)), {1, 4, 9})
    assert harness.eval_ttr(same) == harness.eval_tsuc(same)
    assert harness.eval_ttr(records(5, set(), {1})) is None


def test_ttr_not_below_tsuc_when_black_inside_white():
    recs = records(40, set(range(30)), set(range(0, 30, 3)))
    harness.check_counts(recs)
    assert harness.eval_ttr(recs) >= harness.eval_tsuc(recs)


# export --------------------------------------------------------------------------------------------

def sample_rows():
    return [
        ResultRow("vgg", "res", "paa_p", 2, "random", 0.0, 0, 100, 21.0, 23.3333, None),
        ResultRow("vgg", "vgg", "mifgsm", None, "rank:2", None, 1, 100, 0.0, None, 1.25),
    ]


def test_export_empty_is_header_only(tmp_path):
    path = harness.export([], tmp_path / "r.csv")
    assert path.read_text() == ",".join(harness.CSV_COLUMNS) + "\n"


def test_export_csv_layout(tmp_path):
    path = harness.export(sample_rows(), tmp_path / "r.csv")
    rows = list(csv.reader(path.open()))
    assert len(rows) == 3 and rows[0] == harness.CSV_COLUMNS
    assert rows[2][harness.CSV_COLUMNS.index("ttr")] == "n/a"
    assert harness.load_rows(path) == [
        ResultRow("vgg", "res", "paa_p", 2, "random", 0.0, 0, 100, 21.0, 23.3333, None),
        ResultRow("vgg", "vgg", "mifgsm", None, "rank:2", None, 1, 100, 0.0, None, 1.25),
    ]


def test_export_json_round_trip(tmp_path):
    path = harness.export(sample_rows(), tmp_path / "r.json")
    assert list(json.loads(path.read_text())[0]) == harness.CSV_COLUMNS
    assert harness.load_rows(path) == sample_rows()


def test_export_unknown_format(tmp_path):
    with pytest.raises(ValueError):
        harness.export(sample_rows(), tmp_path / "r.xml")


def test_export_io_error_surfaces(tmp_path):
    with pytest.raises(OSError):
        harness.export(sample_rows(), tmp_path / "missing" / "r.csv")


# translation ----------------------------------------------------------------------------------------

def test_circular_shift_distances(rng):
    fm = rng.normal(size=(8, 16))
    zero = harness.feature_distances(fm, harness.circular_shift(fm, 0))
    assert all(v == 0 for v in zero.values())
    assert harness.feature_distances(fm, harness.circular_shift(fm, 16)) == zero
    one = harness.feature_distances(fm, harness.circular_shift(fm, 1))
    assert all(abs(one[k]) <= 1e-9 for k in ("paa_l", "paa_p", "paa_g", "gaa"))
    assert one["euclid"] > 1e-3


def test_translation_demo_report(tiny_models, rng):
    img = rng.uniform(size=(1, 32, 32))
    rep = harness.translation_demo(tiny_models["res"], img, 1)
    assert rep["statalign_shift_invariant"] and rep["euclid_shift_sensitive"]
    assert set(rep["flip"]) == {"euclid", "paa_l", "paa_p", "paa_g", "gaa"}
    assert rep["positions"] == 64


# sweeps on small trained models -------------------------------------------------------------------------

@pytest.fixture(scope="module")
def bench(mini_world):
    w = mini_world
    ok = harness.correct_by_all(w.models.values(), w.test.images, w.test.labels)[:6]
    pool = harness.GalleryPool(w.train.images, w.train.labels, k=3)
    return harness.Bench(w.models, w.test.images[ok], w.test.labels[ok], pool, ok)


FAST = AttackConfig(iters=2, loss="paa_p")


def test_single_tap_sweep_equals_direct_run(bench):
    direct = harness.run_point(bench, "vgg", FAST.with_(tap=1))
    sweep = harness.layer_sweep(bench, "vgg", FAST, taps=[1], seeds=[0])
    assert sweep.rows == direct
    assert len(sweep.values) == 1


def test_sweep_deterministic(bench):
    a = harness.layer_sweep(bench, "res", FAST.with_(loss="gaa"), taps=[0, 2], seeds=[0, 1])
    b = harness.layer_sweep(bench, "res", FAST.with_(loss="gaa"), taps=[0, 2], seeds=[0, 1])
    assert a.rows == b.rows
    assert len(a.rows) == 2 * 2 * 3
    assert a.best("vgg") in (0, 2)


def test_rank_sweep_rows_and_ranges(bench):
    res = harness.rank_sweep(bench, "inc", FAST.with_(loss="euclid"), ranks=[2, 5, 10], seeds=[0])
    assert res.values == [2, 5, 10]
    assert [r.rank_or_random for r in res.rows if r.black_box == "vgg"] == ["rank:2", "rank:5", "rank:10"]
    assert all(0 <= r.tsuc <= 100 and (r.ttr is None or 0 <= r.ttr <= 100) for r in res.rows)
    assert len(res.table()["vgg"]) == 3


def test_c_sweep_grid(bench):
    assert len(harness.C_GRID) == 21 and harness.C_GRID[0] == 0.0 and harness.C_GRID[-1] == 2.0
    small = harness.Bench(bench.models, bench.images[:2], bench.labels[:2], bench.pool, bench.image_ids[:2])
    res = harness.c_sweep(small, "vgg", FAST.with_(iters=1), cs=harness.C_GRID, seeds=[0])
    assert len([r for r in res.rows if r.black_box == "res"]) == 21
    with pytest.raises(ValueError):
        harness.c_sweep(small, "vgg", FAST, cs=[0.0, -0.1], seeds=[0])
    with pytest.raises(ValueError):
        harness.c_sweep(small, "vgg", FAST.with_(loss="gaa"), seeds=[0])


def test_zero_budget_has_no_white_box_success(bench):
    rows = harness.run_point(bench, "vgg", AttackConfig(epsilon=0.0, iters=2, loss="gaa"))
    white = [r for r in rows if r.black_box == "vgg"][0]
    assert white.tsuc == 0.0 and white.ttr is None
    assert bench.violations == 0


def test_runtime_column_only_when_requested(bench):
    rows = harness.run_point(bench, "res", FAST)
    assert all(r.runtime_s is None for r in rows)
    timed = harness.Bench(bench.models, bench.images, bench.labels, bench.pool, bench.image_ids, record_runtime=True)
    assert all(r.runtime_s is not None and r.runtime_s >= 0 for r in harness.run_point(timed, "res", FAST))
