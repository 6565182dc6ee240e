import os

import pytest
import torch

from ntmask import data as D
from ntmask.pipelines import ExperimentConfig, pretrain_source

torch.set_num_threads(1)


class AccessLog:
    """Records dataset events, tagging each with the current training phase."""

    def __init__(self, strict_during_training=False):
        self.events = []
        self.training = False
        self.strict = strict_during_training
        self.updates = []

    def hook(self, event, domain, split):
        self.events.append((self.training, event, domain, split))
        if self.strict and self.training:
            raise RuntimeError(f"dataset access during training: {event} {domain}/{split}")

    def on_event(self, event, info):
        if event == "train_start":
            self.training = True
        elif event == "train_end":
            self.training = False
        elif event == "update":
            self.updates.append((info["step"], info["kind"]))

    def during_training(self, event=None, domain=None):
        return [e for e in self.events if e[0] and (event is None or e[1] == event)
                and (domain is None or e[2] == domain)]


@pytest.fixture
def access_log():
    log = AccessLog()
    D.add_access_hook(log.hook)
    yield log
    D.remove_access_hook(log.hook)


@pytest.fixture
def strict_access_log():
    log = AccessLog(strict_during_training=True)
    D.add_access_hook(log.hook)
    yield log
    D.remove_access_hook(log.hook)


def _quick_source(tmp_path_factory, channels):
    out = tmp_path_factory.mktemp(f"src{channels}")
    cfg = ExperimentConfig.from_dict({
        "mode": "pretrain", "out_dir": str(out), "network": {"in_channels": channels},
        "budget": {"epochs": 1, "train_limit": 600, "eval_limit": 200},
    })
    pretrain_source(cfg)
    return out / "source.ckpt"


@pytest.fixture(scope="session")
def quick_source_1ch(tmp_path_factory):
    """Briefly trained 1-channel source model (for pipeline plumbing tests)."""
    return _quick_source(tmp_path_factory, 1)


@pytest.fixture(scope="session")
def quick_source_3ch(tmp_path_factory):
    return _quick_source(tmp_path_factory, 3)


def small_run(mode, ckpt, out_dir, **kw):
    """Config for a seconds-long pipeline run on a few hundred samples."""
    d = {
        "mode": mode, "source_ckpt": str(ckpt), "out_dir": str(out_dir), "seed": 0,
        "optim": {"lr": 1e-2, "generator_lr": 1e-2, "batch_size": 8},
        "budget": {"steps": 4, "train_limit": 200, "eval_limit": 100, "log_every": 0},
        "network": {"noise_dim": 16},
    }
    if mode == "sa":
        d["target"] = "mnist-color"
    if mode == "sf":
        d["target"] = "optdigits"
    if mode == "df":
        d["eval_target"] = "mnist-color"
    if mode == "ownership":
        d["watermark"] = {}
    for k, v in kw.items():
        if isinstance(v, dict) and isinstance(d.get(k), dict):
            d[k].update(v)
        else:
            d[k] = v
    return ExperimentConfig.from_dict(d)


@pytest.fixture
def make_run():
    return small_run


if os.environ.get("NTMASK_TEST_VERBOSE"):
    import logging
    logging.basicConfig(level=logging.INFO)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, name): acceptance criterion this test decides")
    config._acceptance = {}


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None or call.when not in ("setup", "call"):
        return
    n, name = mark.args
    failed = call.excinfo is not None
    prev = item.config._acceptance.get(n)
    if call.when == "call" or failed or prev is None:
        item.config._acceptance[n] = (name, not failed, item)


def pytest_terminal_summary(terminalreporter, config):
    results = getattr(config, "_acceptance", {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        name, ok, item = results[n]
        detail = dict(item.user_properties).get("detail", "")
        terminalreporter.write_line(f"criterion {n} [{'PASS' if ok else 'FAIL'}] {name}: {detail}")
