"""End-to-end procedures: source pretraining, SA/SF/DF mask learning and ownership.

Every run writes into ``cfg.out_dir``::

    config.json    the validated config (enough to reproduce the run)
    metrics.json   MetricsReport
    mask.ckpt      learned mask scores (safetensors)
    losses.csv     per-step loss trace
    figures/       accuracy bars and loss curves
    state.pt       resumable TrainState (only with budget.checkpoint_every)
    FAILED         traceback, present only if the run crashed

All per-step randomness is drawn from a generator seeded by ``(seed, step)``,
so a resumed run replays exactly the batches the uninterrupted run would.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
import traceback
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable, Mapping

import torch
import torch.nn.functional as F

from . import data as D
from . import generators as G
from . import losses as L
from .evaluation import MetricsReport, build_report, render_figures
from .model_core import (Checkpoint, MaskedNetwork, build_network, checkpoint_from_network, freeze,
                         logits_in_batches, module_hash, network_from_checkpoint, small_cnn_spec, sparsity)

log = logging.getLogger(__name__)

MODES = ("pretrain", "sa", "sf", "df", "ownership")


class ConfigError(ValueError):
    pass


class RunHalted(Exception):
    pass


# --------------------------------------------------------------------------
# Config
# --------------------------------------------------------------------------

@dataclass
class OptimConfig:
    lr: float = 1e-4              # mask scores
    generator_lr: float = 1e-4
    pretrain_lr: float = 1e-3
    batch_size: int = 32


@dataclass
class BudgetConfig:
    steps: int = 1000
    epochs: int = 5               # pretraining only
    min_steps: int = 0
    early_stop_window: int = 200
    early_stop_tol: float = 1e-4
    log_every: int = 100
    checkpoint_every: int = 0
    train_limit: int | None = None
    eval_limit: int | None = None


@dataclass
class NetworkConfig:
    in_channels: int = 1
    image_size: int = 28
    init_score: float = 1.0
    threshold: float = 0.5
    noise_dim: int = 64
    memory_layers: list[int] = field(default_factory=lambda: [3, 10])
    diversity_hidden: int = 16
    acc_floor: float = 0.9


_SECTIONS = {"optim": OptimConfig, "budget": BudgetConfig, "network": NetworkConfig}


@dataclass
class ExperimentConfig:
    mode: str = "sa"
    source: str = "mnist"
    target: str | None = None
    eval_target: str | None = None
    source_ckpt: str | None = None
    out_dir: str = "runs/default"
    seed: int = 0
    serial: bool = True
    hparams: L.ProtectionHyperparams = field(default_factory=L.ProtectionHyperparams)
    optim: OptimConfig = field(default_factory=OptimConfig)
    budget: BudgetConfig = field(default_factory=BudgetConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    watermark: D.WatermarkSpec | None = None

    def validate(self) -> "ExperimentConfig":
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.mode in MODES, f"mode: must be one of {MODES}, got {self.mode!r}")
        try:
            self.hparams.validate()
        except ValueError as e:
            raise ConfigError(str(e)) from None
        o, b, n = self.optim, self.budget, self.network
        need(o.lr > 0, "optim.lr: must satisfy lr > 0")
        need(o.generator_lr > 0, "optim.generator_lr: must satisfy generator_lr > 0")
        need(o.pretrain_lr > 0, "optim.pretrain_lr: must satisfy pretrain_lr > 0")
        need(o.batch_size >= 1, "optim.batch_size: must satisfy batch_size >= 1")
        need(b.steps >= 0, "budget.steps: must satisfy steps >= 0")
        need(b.epochs >= 0, "budget.epochs: must satisfy epochs >= 0")
        need(b.early_stop_window >= 1, "budget.early_stop_window: must satisfy early_stop_window >= 1")
        need(b.checkpoint_every >= 0, "budget.checkpoint_every: must satisfy checkpoint_every >= 0")
        need(n.in_channels in (1, 3), "network.in_channels: must be 1 or 3")
        need(n.image_size % 4 == 0 and n.image_size >= 16, "network.image_size: must be a multiple of 4 and >= 16")
        need(0 < n.threshold, "network.threshold: must satisfy threshold > 0")
        need(self.source in D.known_domains(), f"source: unknown domain {self.source!r}")
        for key in ("target", "eval_target"):
            v = getattr(self, key)
            need(v is None or v in D.known_domains(), f"{key}: unknown domain {v!r}")
        if self.mode != "pretrain":
            need(self.source_ckpt, f"source_ckpt: required in {self.mode} mode")
        if self.mode in ("sa", "sf"):
            need(self.target is not None, f"target: required in {self.mode} mode")
            need(self.target != self.source, "target: must differ from source")
        if self.mode in ("sf", "df"):
            need(o.batch_size % 2 == 0, "optim.batch_size: must be even in sf/df mode (fresh and memory halves)")
        if self.mode == "df":
            need(self.target is None, "target: must be absent in df mode (use eval_target for evaluation)")
            need(self.eval_target is not None, "eval_target: required in df mode")
        if self.mode == "ownership":
            need(self.watermark is not None, "watermark: required in ownership mode")
            try:
                self.watermark.validate()
            except ValueError as e:
                raise ConfigError(str(e)) from None
        return self

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in ("mode", "source", "target", "eval_target", "source_ckpt",
                                            "out_dir", "seed", "serial")}
        out["hparams"] = self.hparams.to_dict()
        for name in _SECTIONS:
            out[name] = dataclasses.asdict(getattr(self, name))
        out["watermark"] = None if self.watermark is None else self.watermark.to_dict()
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ExperimentConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        for k in d:
            if k not in known:
                raise ConfigError(f"{k}: unknown config key")
        kw = {k: v for k, v in d.items() if k not in ("hparams", "watermark", *_SECTIONS)}
        if "hparams" in d:
            try:
                kw["hparams"] = L.ProtectionHyperparams.from_dict(d["hparams"] or {})
            except (KeyError, TypeError, ValueError) as e:
                raise ConfigError(f"hparams: {e}") from None
        for name, sub in _SECTIONS.items():
            if name in d:
                kw[name] = _section(sub, d[name] or {}, name)
        if d.get("watermark") is not None:
            kw["watermark"] = _section(D.WatermarkSpec, d["watermark"], "watermark")
        return cls(**kw)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        return cls.from_dict(raw)


def _section(cls, d: Mapping, prefix: str):
    names = {f.name for f in dataclasses.fields(cls)}
    for k in d:
        if k not in names:
            raise ConfigError(f"{prefix}.{k}: unknown config key")
    return cls(**d)


def apply_overrides(d: dict, overrides: list[str]) -> dict:
    """Apply ``dotted.key=value`` overrides; values are parsed as JSON when possible."""
    d = json.loads(json.dumps(d))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = d
        parts = key.split(".")
        for p in parts[:-1]:
            if node.get(p) is None:
                node[p] = {}
            if not isinstance(node[p], dict):
                raise ConfigError(f"override {key}: {p} is not a section")
            node = node[p]
        node[parts[-1]] = value
    return d


# --------------------------------------------------------------------------
# Train state
# --------------------------------------------------------------------------

@dataclass
class TrainState:
    step: int = 0
    losses: list[dict] = field(default_factory=list)
    best: dict = field(default_factory=dict)
    rng: dict = field(default_factory=dict)
    modules: dict = field(default_factory=dict)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        tmp = path.with_suffix(".tmp")
        torch.save(dataclasses.asdict(self), tmp)
        tmp.replace(path)
        return path

    @classmethod
    def load(cls, path: str | Path) -> "TrainState":
        return cls(**torch.load(path, weights_only=True))


def step_rng(seed: int, step: int) -> torch.Generator:
    return torch.Generator().manual_seed(int(seed) * 1_000_003 + int(step))


def should_stop(losses: list[dict], b: BudgetConfig, key: str = "mask", ma: int = 50) -> bool:
    """Moving-average loss change below tolerance over the early-stop window."""
    n = len(losses)
    if n < max(b.min_steps, b.early_stop_window + ma):
        return False
    vals = [r[key] for r in losses[-(b.early_stop_window + ma):]]
    now = sum(vals[-ma:]) / ma
    then = sum(vals[:ma]) / ma
    return abs(now - then) < b.early_stop_tol


# --------------------------------------------------------------------------
# Helpers
# --------------------------------------------------------------------------

Event = Callable[[str, dict], None]


def _noop(event: str, info: dict) -> None:
    pass


def _seed_all(cfg: ExperimentConfig) -> None:
    if cfg.serial:
        torch.set_num_threads(1)
    torch.manual_seed(cfg.seed)


def _load_source(cfg: ExperimentConfig):
    path = Path(cfg.source_ckpt)
    if not path.exists():
        raise FileNotFoundError(f"source checkpoint {path} not found; run `pretrain` first")
    ckpt = Checkpoint.load(path)
    f_s = freeze(network_from_checkpoint(ckpt))
    f_t = MaskedNetwork(f_s, cfg.network.init_score, cfg.network.threshold)
    return ckpt, f_s, f_t


def _domain(name: str, split: str, shape, limit=None) -> D.DomainDataset:
    return D.conform(D.load_domain(name, split, limit), shape)


def _batch_idx(n: int, bs: int, rng: torch.Generator) -> torch.Tensor:
    return torch.randint(n, (bs,), generator=rng)


def _finite(loss: torch.Tensor, what: str, state: TrainState, run_dir: Path) -> None:
    if not torch.isfinite(loss):
        state.save(run_dir / "state_failed.pt")
        raise G.NonFiniteLoss(f"{what} loss became {loss.item()} at step {state.step}; state dumped to "
                              f"{run_dir / 'state_failed.pt'}")


def evaluate_model(m, domains: list[D.DomainDataset], batch_size: int = 500) -> dict[str, Fraction]:
    """Top-1 accuracy in [0, 1] per domain, as exact fractions."""
    out = {}
    for d in domains:
        if not d.has_labels:
            raise ValueError(f"{d.domain}/{d.split}: cannot evaluate an unlabeled domain")
        if len(d) == 0:
            raise ValueError(f"{d.domain}/{d.split}: empty domain")
        was_training = getattr(m, "training", False)
        m.eval()
        pred = logits_in_batches(m, d.samples, batch_size).argmax(dim=1)
        if was_training:
            m.train()
        out[d.domain] = Fraction(int((pred == d.labels).sum()), len(d))
    return out


def _percent(acc: Mapping[str, Fraction]) -> dict[str, Fraction]:
    return {k: v * 100 for k, v in acc.items()}


class _Run:
    """Run-directory bookkeeping shared by the mask-learning pipelines."""

    def __init__(self, cfg: ExperimentConfig, on_event: Event | None):
        self.cfg = cfg.validate()
        self.dir = Path(cfg.out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        (self.dir / "FAILED").unlink(missing_ok=True)
        (self.dir / "config.json").write_text(cfg.to_json() + "\n")
        self.emit = on_event or _noop
        self.t0 = time.time()

    def fail(self, exc: BaseException) -> None:
        (self.dir / "FAILED").write_text("".join(traceback.format_exception(exc)))

    def train(self, state: TrainState, modules: Mapping[str, Any], step_fn, halt_after: int | None) -> None:
        cfg, b = self.cfg, self.cfg.budget
        self.emit("train_start", {"step": state.step})
        while state.step < b.steps and "stopped_early" not in state.best:
            row = step_fn(state, step_rng(cfg.seed, state.step))
            row["step"] = state.step
            state.losses.append(row)
            state.step += 1
            if b.log_every and state.step % b.log_every == 0:
                log.info("%s step %d/%d %s", cfg.mode, state.step, b.steps,
                         " ".join(f"{k}={v:.4f}" for k, v in row.items() if k != "step"))
            if should_stop(state.losses, b):
                state.best["stopped_early"] = state.step
            if (b.checkpoint_every and state.step % b.checkpoint_every == 0) or \
                    (halt_after is not None and state.step >= halt_after):
                self.snapshot(state, modules)
            if halt_after is not None and state.step >= halt_after and state.step < b.steps:
                self.emit("halted", {"step": state.step})
                raise RunHalted(state.step)
        self.emit("train_end", {"step": state.step})

    def snapshot(self, state: TrainState, modules: Mapping[str, Any]) -> None:
        state.modules = {k: v.state_dict() for k, v in modules.items()}
        state.rng = {"seed": self.cfg.seed, "step": state.step}
        state.save(self.dir / "state.pt")

    def resume(self, state: TrainState, modules: Mapping[str, Any]) -> TrainState:
        path = self.dir / "state.pt"
        if not path.exists():
            return state
        saved = TrainState.load(path)
        for k, v in modules.items():
            v.load_state_dict(saved.modules[k])
        log.info("resumed from step %d", saved.step)
        return saved

    def write_losses(self, state: TrainState) -> Path:
        cols = ["step"] + sorted({k for r in state.losses for k in r} - {"step"})
        path = self.dir / "losses.csv"
        with path.open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            for r in state.losses:
                w.writerow(r)
        return path

    def finish(self, report: MetricsReport, f_t: MaskedNetwork, state: TrainState,
               extra: Mapping[str, Checkpoint] | None = None) -> MetricsReport:
        report.save(self.dir / "metrics.json")
        f_t.mask_checkpoint(mode=self.cfg.mode, steps=state.step).save(self.dir / "mask.ckpt")
        for name, ck in (extra or {}).items():
            ck.save(self.dir / name)
        self.write_losses(state)
        trace = {}
        if state.losses:
            keys = sorted({k for r in state.losses for k in r} - {"step"})
            trace = {"step": [r["step"] for r in state.losses]}
            trace.update({k: [r.get(k, float("nan")) for r in state.losses] for k in keys})
        render_figures(report, self.dir / "figures", self.dir.name, trace or None)
        log.info("%s finished in %.1fs", self.cfg.mode, time.time() - self.t0)
        return report


def _report(cfg, f_s, f_t, eval_sets, source, target, state, base_hash, extra_meta=None) -> MetricsReport:
    if module_hash(f_s) != base_hash:
        raise RuntimeError("source network parameters changed during training")
    before = _percent(evaluate_model(f_s, eval_sets))
    after = _percent(evaluate_model(f_t, eval_sets))
    meta = {"mode": cfg.mode, "seed": cfg.seed, "steps": state.step, "sparsity": sparsity(f_t),
            "base_hash": base_hash, "stopped_early": state.best.get("stopped_early"),
            "eval_sizes": {d.domain: len(d) for d in eval_sets}}
    meta.update(extra_meta or {})
    return build_report(before, after, source, target, meta)


def _run(cfg: ExperimentConfig, on_event: Event | None, body) -> MetricsReport | None:
    _seed_all(cfg)
    run = _Run(cfg, on_event)
    try:
        return body(run)
    except RunHalted:
        return None
    except BaseException as e:
        run.fail(e)
        raise


# --------------------------------------------------------------------------
# Source pretraining
# --------------------------------------------------------------------------

def pretrain_source(cfg: ExperimentConfig, on_event: Event | None = None) -> Checkpoint:
    """Supervised training of the source classifier; writes ``source.ckpt``."""
    cfg.validate()
    _seed_all(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json() + "\n")
    n = cfg.network
    spec = small_cnn_spec(n.in_channels, n.image_size)
    train = _domain(cfg.source, "train", spec.input_shape, cfg.budget.train_limit)
    test = _domain(cfg.source, "test", spec.input_shape, cfg.budget.eval_limit)
    net = build_network(spec, cfg.seed)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.optim.pretrain_lr)
    x, y = train.samples, train.labels
    bs = cfg.optim.batch_size
    for epoch in range(cfg.budget.epochs):
        net.train()
        perm = torch.randperm(len(x), generator=step_rng(cfg.seed, epoch))
        total = 0.0
        for i in range(0, len(x), bs):
            idx = perm[i:i + bs]
            loss = F.cross_entropy(net(x[idx]), y[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
        log.info("pretrain epoch %d loss %.4f", epoch, total / len(x))
    net.eval()
    acc = evaluate_model(net, [test])[test.domain]
    meta = {"source": cfg.source, "epochs": cfg.budget.epochs, "seed": cfg.seed,
            "test_accuracy": float(acc), "test_accuracy_exact": f"{acc.numerator}/{acc.denominator}",
            "train_origin": train.origin}
    if acc < cfg.network.acc_floor:
        meta["warning"] = f"test accuracy {float(acc):.4f} below floor {cfg.network.acc_floor}"
        log.warning(meta["warning"])
    ckpt = checkpoint_from_network(net, **meta)
    ckpt.save(out / "source.ckpt")
    (out / "metrics.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    (on_event or _noop)("pretrain_done", meta)
    return ckpt


# --------------------------------------------------------------------------
# Mask learning
# --------------------------------------------------------------------------

def run_sa_map(cfg: ExperimentConfig, on_event: Event | None = None, resume: bool = False,
               halt_after: int | None = None) -> MetricsReport | None:
    """Source-available: labeled source and target batches drive the mask."""
    if cfg.mode != "sa":
        raise ConfigError(f"mode: run_sa_map needs mode 'sa', got {cfg.mode!r}")

    def body(run: _Run):
        h, bs = cfg.hparams, cfg.optim.batch_size
        _, f_s, f_t = _load_source(cfg)
        shape = f_s.spec.input_shape
        base_hash = module_hash(f_s)
        src = _domain(cfg.source, "train", shape, cfg.budget.train_limit)
        tgt = _domain(cfg.target, "train", shape, cfg.budget.train_limit)
        xs, ys, xt, yt = src.samples, src.labels, tgt.samples, tgt.labels
        opt = torch.optim.Adam(f_t.scores.parameters(), lr=cfg.optim.lr)
        modules = {"scores": f_t.scores, "opt_mask": opt}
        state = run.resume(TrainState(), modules) if resume else TrainState()
        f_t.train()

        def step(state, rng):
            a, b = _batch_idx(len(xs), bs, rng), _batch_idx(len(xt), bs, rng)
            p = L.to_probs(f_t(torch.cat([xs[a], xt[b]])), h.eps)
            loss = L.sa_loss(p[:bs], ys[a], p[bs:], yt[b], h)
            _finite(loss, "mask", state, run.dir)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            return {"mask": float(loss.detach())}

        run.train(state, modules, step, halt_after)
        f_t.eval()
        evals = [_domain(cfg.source, "test", shape, cfg.budget.eval_limit),
                 _domain(cfg.target, "test", shape, cfg.budget.eval_limit)]
        report = _report(cfg, f_s, f_t, evals, cfg.source, cfg.target, state, base_hash)
        return run.finish(report, f_t, state)

    return _run(cfg, on_event, body)


def run_ownership(cfg: ExperimentConfig, on_event: Event | None = None, resume: bool = False,
                  halt_after: int | None = None) -> MetricsReport | None:
    """Mask learning that keeps the clean source and fails on its watermarked twin."""
    if cfg.mode != "ownership":
        raise ConfigError(f"mode: run_ownership needs mode 'ownership', got {cfg.mode!r}")

    def body(run: _Run):
        h, bs = cfg.hparams, cfg.optim.batch_size
        _, f_s, f_t = _load_source(cfg)
        shape = f_s.spec.input_shape
        base_hash = module_hash(f_s)
        src = _domain(cfg.source, "train", shape, cfg.budget.train_limit)
        aux = D.apply_watermark(src, cfg.watermark)
        xs, ys, xa, ya = src.samples, src.labels, aux.samples, aux.labels
        opt = torch.optim.Adam(f_t.scores.parameters(), lr=cfg.optim.lr)
        modules = {"scores": f_t.scores, "opt_mask": opt}
        state = run.resume(TrainState(), modules) if resume else TrainState()
        f_t.train()

        def step(state, rng):
            a, b = _batch_idx(len(xs), bs, rng), _batch_idx(len(xa), bs, rng)
            p = L.to_probs(f_t(torch.cat([xs[a], xa[b]])), h.eps)
            loss = L.owner_loss(p[:bs], ys[a], p[bs:], ya[b], h)
            _finite(loss, "mask", state, run.dir)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            return {"mask": float(loss.detach())}

        run.train(state, modules, step, halt_after)
        f_t.eval()
        test = _domain(cfg.source, "test", shape, cfg.budget.eval_limit)
        test_wm = D.apply_watermark(test, cfg.watermark)
        report = _report(cfg, f_s, f_t, [test, test_wm], test.domain, test_wm.domain, state, base_hash,
                         {"watermark": cfg.watermark.to_dict()})
        report.meta["avg_drop_before"] = float(report.before[test.domain] - report.before[test_wm.domain])
        report.meta["avg_drop_after"] = float(report.after[test.domain] - report.after[test_wm.domain])
        return run.finish(report, f_t, state)

    return _run(cfg, on_event, body)


def _generator_modules(cfg: ExperimentConfig, shape):
    n, lr = cfg.network, cfg.optim.generator_lr
    torch.manual_seed(cfg.seed)
    g_f = G.FreshGenerator(n.noise_dim, shape)
    g_m = G.MemoryPair(n.noise_dim, shape)
    opt_f = torch.optim.Adam(g_f.parameters(), lr=lr)
    opt_m = torch.optim.Adam(g_m.parameters(), lr=lr)
    return g_f, g_m, opt_f, opt_m


def _pseudo_source_updates(state, rng, g_f, g_m, opt_f, opt_m, f_s, f_t, cfg, run):
    """Fresh update, then memory update; returns the pseudo-source batch and losses."""
    half = cfg.optim.batch_size // 2
    z_f, z_m = g_f.noise(half, rng), g_m.noise(half, rng)
    run.emit("update", {"kind": "fresh", "step": state.step})
    r_f = G.train_fresh_step(g_f, opt_f, f_s, f_t, cfg.hparams, z_f)
    with torch.no_grad():
        x_m = g_m(z_m)
    x_sp = torch.cat([r_f.batch, x_m])
    run.emit("update", {"kind": "memory", "step": state.step})
    r_m = G.train_memory_step(g_m, opt_m, f_s, x_sp, cfg.network.memory_layers)
    return x_sp, {"fresh": r_f.loss, "memory": r_m.loss}


def _mask_sf_step(f_s, f_t, opt, x_sp, x_t, y_psd, h, state, run) -> float:
    run.emit("update", {"kind": "mask", "step": state.step})
    n = len(x_sp)
    with torch.no_grad():
        p_s = L.to_probs(f_s(x_sp), h.eps)
    p = L.to_probs(f_t(torch.cat([x_sp, x_t])), h.eps)
    loss = L.sf_loss(p[:n], p_s, p[n:], y_psd, h)
    _finite(loss, "mask", state, run.dir)
    opt.zero_grad(set_to_none=True)
    loss.backward()
    opt.step()
    return float(loss.detach())


def _generator_checkpoint(**mods) -> Checkpoint:
    tensors = {f"{name}.{k}": v.detach().clone() for name, m in mods.items() for k, v in m.state_dict().items()}
    return Checkpoint(tensors, {"kind": "generators", "modules": sorted(mods)})


def run_sf_map(cfg: ExperimentConfig, on_event: Event | None = None, resume: bool = False,
               halt_after: int | None = None) -> MetricsReport | None:
    """Source-free: pseudo-source from the generators, unlabeled target with pseudo labels.

    Per iteration: fresh-generator update, memory update, mask update.
    Target labels are read only for the final evaluation.
    """
    if cfg.mode != "sf":
        raise ConfigError(f"mode: run_sf_map needs mode 'sf', got {cfg.mode!r}")

    def body(run: _Run):
        h, bs = cfg.hparams, cfg.optim.batch_size
        _, f_s, f_t = _load_source(cfg)
        shape = f_s.spec.input_shape
        base_hash = module_hash(f_s)
        g_f, g_m, opt_f, opt_m = _generator_modules(cfg, shape)
        opt = torch.optim.Adam(f_t.scores.parameters(), lr=cfg.optim.lr)
        modules = {"scores": f_t.scores, "opt_mask": opt, "g_f": g_f, "g_m": g_m,
                   "opt_f": opt_f, "opt_m": opt_m}
        state = run.resume(TrainState(), modules) if resume else TrainState()
        f_t.train()
        run.emit("data_start", {})
        tgt = _domain(cfg.target, "train", shape, cfg.budget.train_limit).unlabeled()
        x_t = tgt.samples
        # f_s is frozen, so pseudo labels are fixed for the whole run
        augs = D.AugmentationSet(h.n_aug)
        y_psd = torch.cat([L.pseudo_label(f_s, x_t[i:i + 500], augs, h, seed=cfg.seed)
                           for i in range(0, len(x_t), 500)])

        def step(state, rng):
            x_sp, row = _pseudo_source_updates(state, rng, g_f, g_m, opt_f, opt_m, f_s, f_t, cfg, run)
            idx = _batch_idx(len(x_t), bs, rng)
            row["mask"] = _mask_sf_step(f_s, f_t, opt, x_sp, x_t[idx], y_psd[idx], h, state, run)
            return row

        run.train(state, modules, step, halt_after)
        f_t.eval()
        evals = [_domain(cfg.source, "test", shape, cfg.budget.eval_limit),
                 _domain(cfg.target, "test", shape, cfg.budget.eval_limit)]
        report = _report(cfg, f_s, f_t, evals, cfg.source, cfg.target, state, base_hash,
                         {"target_train_size": len(x_t)})
        return run.finish(report, f_t, state, {"generators.ckpt": _generator_checkpoint(g_f=g_f, g_m=g_m)})

    return _run(cfg, on_event, body)


def run_df_map(cfg: ExperimentConfig, on_event: Event | None = None, resume: bool = False,
               halt_after: int | None = None) -> MetricsReport | None:
    """Data-free: the pseudo-source plays the source, style-shifted neighbours play the target.

    No dataset is touched until training ends; ``eval_target`` is used only
    for the post-hoc report.
    """
    if cfg.mode != "df":
        raise ConfigError(f"mode: run_df_map needs mode 'df', got {cfg.mode!r}")

    def body(run: _Run):
        h = cfg.hparams
        _, f_s, f_t = _load_source(cfg)
        shape = f_s.spec.input_shape
        base_hash = module_hash(f_s)
        g_f, g_m, opt_f, opt_m = _generator_modules(cfg, shape)
        g_d = G.DiversityGenerator(shape[0], cfg.network.diversity_hidden, h.n_dir)
        opt_d = torch.optim.Adam(g_d.parameters(), lr=cfg.optim.generator_lr)
        opt = torch.optim.Adam(f_t.scores.parameters(), lr=cfg.optim.lr)
        modules = {"scores": f_t.scores, "opt_mask": opt, "g_f": g_f, "g_m": g_m, "g_d": g_d,
                   "opt_f": opt_f, "opt_m": opt_m, "opt_d": opt_d}
        state = run.resume(TrainState(), modules) if resume else TrainState()
        f_t.train()
        augs = D.AugmentationSet(h.n_aug)

        def step(state, rng):
            x_sp, row = _pseudo_source_updates(state, rng, g_f, g_m, opt_f, opt_m, f_s, f_t, cfg, run)
            with torch.no_grad():
                y_sp = f_s(x_sp).argmax(dim=1)
            run.emit("update", {"kind": "diversity", "step": state.step})
            nb = G.generate_neighborhood(g_d, opt_d, f_s, x_sp, y_sp, h)
            y_psd = L.pseudo_label(f_s, nb.samples, augs, h, seed=cfg.seed * 1_000_003 + state.step)
            row["mask"] = _mask_sf_step(f_s, f_t, opt, x_sp, nb.samples, y_psd, h, state, run)
            row["mi"] = sum(nb.mi) / len(nb.mi)
            row["semantic"] = sum(nb.sem) / len(nb.sem)
            return row

        run.train(state, modules, step, halt_after)
        f_t.eval()
        evals = [_domain(cfg.source, "test", shape, cfg.budget.eval_limit),
                 _domain(cfg.eval_target, "test", shape, cfg.budget.eval_limit)]
        report = _report(cfg, f_s, f_t, evals, cfg.source, cfg.eval_target, state, base_hash)
        return run.finish(report, f_t, state,
                          {"generators.ckpt": _generator_checkpoint(g_f=g_f, g_m=g_m, g_d=g_d)})

    return _run(cfg, on_event, body)


PIPELINES = {"sa": run_sa_map, "sf": run_sf_map, "df": run_df_map, "ownership": run_ownership}


def run_experiment(cfg: ExperimentConfig, on_event: Event | None = None, **kw):
    if cfg.mode == "pretrain":
        return pretrain_source(cfg, on_event)
    return PIPELINES[cfg.mode](cfg, on_event, **kw)
