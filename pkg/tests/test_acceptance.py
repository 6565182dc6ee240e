"""End-to-end acceptance criteria at desk scale.

Each test carries ``criterion(n, name)``; the conftest hook prints one
PASS/FAIL line per criterion at the end of the session. Training runs take
roughly 15-20 minutes on a laptop CPU in total.
"""

import subprocess
import sys
import time
from pathlib import Path

import pytest

from ntmask import data as D
from ntmask.evaluation import st_d_from_relative
from ntmask.model_core import Checkpoint, count_parameters, module_hash, network_from_checkpoint
from ntmask.pipelines import ExperimentConfig, pretrain_source, run_df_map, run_ownership, run_sa_map, run_sf_map

TESTS = Path(__file__).parent
MASK_LR = 1e-2
GEN_LR = 1e-2


def _cfg(mode, ckpt, out, steps, **kw):
    d = {"mode": mode, "source_ckpt": str(ckpt), "out_dir": str(out), "seed": 0,
         "optim": {"lr": MASK_LR, "generator_lr": GEN_LR},
         "budget": {"steps": steps, "min_steps": steps, "log_every": 100}}
    d.update(kw)
    return ExperimentConfig.from_dict(d)


def _pretrain(tmp_path_factory, channels):
    out = tmp_path_factory.mktemp(f"acc_src{channels}")
    ckpt = pretrain_source(ExperimentConfig.from_dict({
        "mode": "pretrain", "out_dir": str(out), "network": {"in_channels": channels}, "budget": {"epochs": 5}}))
    return out / "source.ckpt", ckpt


@pytest.fixture(scope="module")
def source_rgb(tmp_path_factory):
    """MNIST model with 3 input channels (so colorized digits are native inputs)."""
    return _pretrain(tmp_path_factory, 3)


@pytest.fixture(scope="module")
def source_gray(tmp_path_factory):
    return _pretrain(tmp_path_factory, 1)


def _base_hash(path):
    return module_hash(network_from_checkpoint(Checkpoint.load(path)))


def _pytest_subset(nodes, budget_s):
    t = time.time()
    res = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *nodes],
                         cwd=TESTS.parent, capture_output=True, text=True)
    elapsed = time.time() - t
    tail = res.stdout.strip().splitlines()[-1] if res.stdout.strip() else res.stderr[-500:]
    assert res.returncode == 0, res.stdout[-4000:]
    assert elapsed <= budget_s, f"took {elapsed:.0f}s"
    return tail, elapsed


@pytest.mark.criterion(1, "metric arithmetic")
def test_criterion_1_metric_arithmetic(record_property):
    cases = [(1.1, 81.5, 0.013), (-0.3, 81.1, -0.004), (58.2, 65.1, 0.89)]
    got = [st_d_from_relative(s, t) for s, t, _ in cases]
    record_property("detail", ", ".join(f"{g:.4f} vs {p}" for g, (_, _, p) in zip(got, cases)))
    for g, (_, _, printed) in zip(got, cases):
        assert abs(g - printed) <= 0.005


@pytest.mark.criterion(2, "source-available mask, MNIST -> colorized MNIST")
def test_criterion_2_sa(source_rgb, tmp_path, record_property):
    path, ckpt = source_rgb
    net = network_from_checkpoint(ckpt)
    assert 100_000 <= count_parameters(net) <= 200_000
    assert ckpt.meta["test_accuracy"] >= 0.95
    t = time.time()
    r = run_sa_map(_cfg("sa", path, tmp_path, 400, target="mnist-color"))
    elapsed = time.time() - t
    s = r.summary()
    record_property("detail", f"pretrain {ckpt.meta['test_accuracy']:.3f}, drop_s {s['drop_s']:.1f} pts, "
                              f"drop_t rel {s['drop_t_rel']:.1f}%, sparsity {r.meta['sparsity']:.4f}, "
                              f"{elapsed:.0f}s")
    assert r.meta["base_hash"] == _base_hash(path)
    assert s["drop_s"] <= 2
    assert s["drop_t_rel"] >= 50
    assert r.meta["sparsity"] > 0
    assert elapsed <= 20 * 60


@pytest.mark.criterion(3, "source-free mask, MNIST -> USPS")
def test_criterion_3_sf(source_gray, tmp_path, access_log, record_property):
    path, ckpt = source_gray
    target = "usps" if D.is_available("usps") else "optdigits"
    events = []
    t = time.time()
    # bound 0.3 instead of the default 1.0: see the source-free note in the README
    r = run_sf_map(_cfg("sf", path, tmp_path, 600, target=target, hparams={"beta": 0.3}),
                   on_event=lambda e, i: (events.append(e), access_log.on_event(e, i)))
    elapsed = time.time() - t
    s = r.summary()
    label_reads = access_log.during_training("labels", target)
    train_label_reads = [e for e in access_log.events if e[1:] == ("labels", target, "train")]
    record_property("detail", f"target={target}, ST-D {s['st_d']:.3f}, drop_s rel {s['drop_s_rel']:.1f}%, "
                              f"drop_t rel {s['drop_t_rel']:.1f}%, target label reads in training "
                              f"{len(label_reads)}, {elapsed:.0f}s")
    assert "train_start" in events and "train_end" in events
    assert label_reads == [] and train_label_reads == []
    assert r.meta["base_hash"] == _base_hash(path)
    assert s["st_d"] < 1.0
    assert s["drop_s_rel"] <= 20
    assert s["drop_t_rel"] >= 25
    assert elapsed <= 40 * 60


@pytest.mark.criterion(4, "data-free mask")
def test_criterion_4_df(source_rgb, tmp_path, strict_access_log, record_property):
    path, _ = source_rgb
    t = time.time()
    r = run_df_map(_cfg("df", path, tmp_path, 600, eval_target="mnist-color"), on_event=strict_access_log.on_event)
    elapsed = time.time() - t
    s = r.summary()
    reads = strict_access_log.during_training()
    record_property("detail", f"ST-D {s['st_d']:.3f}, drop_s rel {s['drop_s_rel']:.1f}%, "
                              f"drop_t rel {s['drop_t_rel']:.1f}%, dataset reads in training {len(reads)}, "
                              f"{elapsed:.0f}s")
    assert reads == []
    assert {d for _, _, d, _ in strict_access_log.events} >= {"mnist", "mnist-color"}
    assert r.meta["base_hash"] == _base_hash(path)
    assert s["st_d"] < 1.0
    assert elapsed <= 60 * 60


@pytest.mark.criterion(5, "ownership verification")
def test_criterion_5_ownership(source_rgb, tmp_path, record_property):
    path, ckpt = source_rgb
    t = time.time()
    r = run_ownership(_cfg("ownership", path, tmp_path, 800, watermark={}))
    elapsed = time.time() - t
    pretrained = ckpt.meta["test_accuracy"] * 100
    after = float(r.after[r.source])
    record_property("detail", f"Avg Drop {r.meta['avg_drop_before']:.1f} -> {r.meta['avg_drop_after']:.1f} pts, "
                              f"source {pretrained:.1f} -> {after:.1f}, {elapsed:.0f}s")
    assert r.meta["base_hash"] == _base_hash(path)
    assert r.meta["avg_drop_after"] >= 50
    assert abs(after - pretrained) <= 3
    assert elapsed <= 20 * 60


INVARIANT_NODES = [
    "tests/test_model_core.py::test_binarize_is_binary_and_thresholded",
    "tests/test_model_core.py::test_binarize_tie_keeps_weight",
    "tests/test_model_core.py::test_all_ones_mask_reproduces_base",
    "tests/test_model_core.py::test_masked_forward_equals_pruned_dense_network",
    "tests/test_pipelines.py::test_base_parameters_are_bit_frozen_in_every_pipeline",
    "tests/test_losses.py::test_subtracted_term_never_exceeds_bound",
    "tests/test_losses.py::test_kl_of_point_mass_against_fair_coin_is_ln2",
    "tests/test_losses.py::test_js_of_disjoint_distributions_is_ln2",
    "tests/test_losses.py::test_entropy_of_uniform_is_ln_k",
    "tests/test_losses.py::test_mi_toy_value",
    "tests/test_losses.py::test_mmd_toy_value",
    "tests/test_losses.py::test_gradients_match_finite_differences",
    "tests/test_generators.py::test_frozen_segments_stay_bit_identical_under_adam",
    "tests/test_pipelines.py::test_two_identical_runs_give_identical_metrics",
]

ORACLE_NODES = [
    "tests/test_losses.py::test_sa_and_owner_loss_match_oracle",
    "tests/test_losses.py::test_sf_loss_matches_oracle",
    "tests/test_losses.py::test_fresh_loss_matches_oracle",
    "tests/test_losses.py::test_memory_loss_matches_oracle",
]


@pytest.mark.criterion(6, "invariant suites")
def test_criterion_6_invariants(record_property):
    tail, elapsed = _pytest_subset(INVARIANT_NODES, 120)
    record_property("detail", f"{tail} ({elapsed:.0f}s)")


@pytest.mark.criterion(7, "loss-vs-oracle suite")
def test_criterion_7_loss_oracles(record_property):
    tail, elapsed = _pytest_subset(ORACLE_NODES, 60)
    record_property("detail", f"{tail} ({elapsed:.0f}s)")
