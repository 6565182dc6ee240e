import math
from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from ntmask.evaluation import (MetricsReport, as_percent, build_report, format_table, render_figures, st_d,
                               st_d_from_relative)

# reference (relative source drop %, relative target drop %, ST-D) triples, ST-D rounded to print
PRINTED = [
    (1.1, 81.5, 0.013),     # source-available, NTL mean
    (-0.3, 81.1, -0.004),   # source-available, mask mean
    (0.3, 80.2, 0.004),     # source-available, CUTI mean
    (58.2, 65.1, 0.89),     # source-free, NTL, MNIST row
    (68.9, 68.0, 1.01),     # source-free, NTL mean
    (5.7, 20.9, 0.27),      # data-free, mask mean
]


@pytest.mark.parametrize("rel_s,rel_t,printed", PRINTED)
def test_st_d_reproduces_printed_values(rel_s, rel_t, printed):
    assert abs(st_d_from_relative(rel_s, rel_t) - printed) <= 0.005
    # Same value through the raw-accuracy form: acc = 100, drop = relative drop.
    assert abs(st_d(100, rel_s, 100, rel_t) - printed) <= 0.005


def test_st_d_printed_values_lie_inside_input_rounding_interval():
    # Printed inputs carry one decimal, so the exact ratio can sit anywhere in
    # [(s-0.05)/(t+0.05), (s+0.05)/(t-0.05)]; printed outputs must fall in that
    # interval widened by their own rounding (+-0.005).
    for rel_s, rel_t, printed in PRINTED + [(8.8, 35.9, 0.24), (16.2, 36.3, 0.45)]:
        lo = st_d_from_relative(Fraction(str(rel_s)) - Fraction(1, 20), Fraction(str(rel_t)) + Fraction(1, 20))
        hi = st_d_from_relative(Fraction(str(rel_s)) + Fraction(1, 20), Fraction(str(rel_t)) - Fraction(1, 20))
        assert lo - 0.005 <= printed <= hi + 0.005


def test_st_d_degenerate_cases():
    assert st_d(90, 0, 80, 0) == 0.0
    assert st_d(90, 0, 80, 10) == 0.0
    assert math.isinf(st_d(90, 5, 80, 0))
    assert st_d(90, -9, 80, 8) < 0
    with pytest.raises(ValueError):
        st_d(0, 1, 80, 1)


def test_st_d_is_ratio_of_relative_drops():
    assert st_d(Fraction(80), Fraction(8), Fraction(50), Fraction(25)) == pytest.approx(0.2)


def test_as_percent_exactness():
    assert as_percent((3, 7)) == Fraction(300, 7)
    assert as_percent(0.1) == Fraction(1, 10)


@given(st.integers(1, 1000), st.integers(0, 1000), st.integers(0, 1000), st.integers(1, 1000),
       st.integers(0, 1000), st.integers(0, 1000))
def test_report_arithmetic_is_exact(n, cb, ca, m, tb, ta):
    cb, ca, tb, ta = min(cb, n), min(ca, n), min(tb, m), min(ta, m)
    r = build_report({"s": (cb, n), "t": (tb, m)}, {"s": (ca, n), "t": (ta, m)}, "s", "t")
    assert r.drop_s == Fraction(100 * cb, n) - Fraction(100 * ca, n)
    if cb:
        assert r.relative_drop("s") == r.drop_s / Fraction(100 * cb, n) * 100


def test_identical_accuracies_give_zero_drops():
    acc = {"s": 97.5, "t": 60.0}
    r = build_report(acc, acc, "s", "t")
    assert r.drop_s == 0 and r.drop_t == 0 and r.st_d == 0
    assert not r.protected


def test_json_roundtrip_and_inf_sentinel(tmp_path):
    r = build_report({"s": (950, 1000), "t": (600, 1000)}, {"s": (940, 1000), "t": (600, 1000)}, "s", "t",
                     {"run": "x"})
    d = r.to_dict()
    assert d["summary"]["st_d"] == "inf" and d["summary"]["no_target_drop"]
    assert MetricsReport.load(r.save(tmp_path / "m.json")) == r
    with pytest.raises(ValueError, match="schema"):
        MetricsReport.from_dict({**d, "schema_version": 99})


def test_missing_domain():
    with pytest.raises(KeyError, match="'t'"):
        build_report({"s": 1}, {"s": 1, "t": 1}, "s", "t")


def test_table_has_the_three_metric_columns():
    r = build_report({"s": 97.6, "t": 63.4}, {"s": 98.2, "t": 10.0}, "s", "t")
    text = format_table({"demo": r})
    assert "Source Drop" in text and "Target Drop" in text and "ST-D" in text
    assert "-0.6 (-0.6%)" in text and "53.4 (84.2%)" in text


def test_render_figures(tmp_path):
    r = build_report({"s": 97.6, "t": 63.4}, {"s": 98.2, "t": 10.0}, "s", "t")
    files = render_figures(r, tmp_path, "run7", {"step": [0, 1], "mask": [0.5, 0.1]})
    assert [f.name for f in files] == ["run7_accuracy.png", "run7_losses.png"]
    assert all(f.stat().st_size > 0 for f in files)
    flat = build_report({"s": 90, "t": 50}, {"s": 89, "t": 50}, "s", "t")
    assert render_figures(flat, tmp_path / "inf", "x")[0].exists()


def test_render_figures_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    r = build_report({"s": 90, "t": 50}, {"s": 89, "t": 40}, "s", "t")
    with pytest.raises(OSError):
        render_figures(r, blocker / "sub", "x")
