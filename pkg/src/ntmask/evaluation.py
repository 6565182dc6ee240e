"""Accuracy bookkeeping, Source/Target Drop, ST-D and report figures.

Accuracies are kept as exact fractions (in percent) so that drops are exact;
only the final ST-D ratio is a float.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Mapping

REPORT_SCHEMA_VERSION = 1


def as_percent(value) -> Fraction:
    """Exact percentage from a Fraction, int, float (via its decimal repr) or (correct, total) pair."""
    if isinstance(value, Fraction):
        return value
    if isinstance(value, tuple):
        correct, total = value
        return Fraction(100 * int(correct), int(total))
    if isinstance(value, int):
        return Fraction(value)
    return Fraction(str(float(value)))


def st_d(acc_s, drop_s, acc_t, drop_t) -> float:
    """(drop_s / acc_s) / (drop_t / acc_t).

    A zero source drop gives 0; otherwise a zero target drop gives ``inf``
    (no protection achieved).
    """
    acc_s, drop_s, acc_t, drop_t = map(as_percent, (acc_s, drop_s, acc_t, drop_t))
    if acc_s <= 0 or acc_t <= 0:
        raise ValueError("st_d: accuracies must be positive")
    if drop_s == 0:
        return 0.0
    if drop_t == 0:
        return math.inf
    return float((drop_s / acc_s) / (drop_t / acc_t))


def st_d_from_relative(rel_drop_s, rel_drop_t) -> float:
    """ST-D from already-relative drops (e.g. the percentages printed in result tables)."""
    rel_drop_s, rel_drop_t = as_percent(rel_drop_s), as_percent(rel_drop_t)
    if rel_drop_s == 0:
        return 0.0
    if rel_drop_t == 0:
        return math.inf
    return float(rel_drop_s / rel_drop_t)


@dataclass
class MetricsReport:
    source: str
    target: str
    before: dict[str, Fraction]
    after: dict[str, Fraction]
    meta: dict[str, Any] = field(default_factory=dict)

    def drop(self, domain: str) -> Fraction:
        return self.before[domain] - self.after[domain]

    def relative_drop(self, domain: str) -> Fraction:
        if self.before[domain] == 0:
            return Fraction(0)
        return self.drop(domain) / self.before[domain] * 100

    @property
    def drop_s(self) -> Fraction:
        return self.drop(self.source)

    @property
    def drop_t(self) -> Fraction:
        return self.drop(self.target)

    @property
    def st_d(self) -> float:
        return st_d(self.before[self.source], self.drop_s, self.before[self.target], self.drop_t)

    @property
    def protected(self) -> bool:
        """False when the target accuracy did not drop at all (ST-D sentinel)."""
        return self.drop_t != 0

    def summary(self) -> dict:
        return {
            "source": self.source, "target": self.target,
            "acc_s_before": float(self.before[self.source]), "acc_s_after": float(self.after[self.source]),
            "acc_t_before": float(self.before[self.target]), "acc_t_after": float(self.after[self.target]),
            "drop_s": float(self.drop_s), "drop_s_rel": float(self.relative_drop(self.source)),
            "drop_t": float(self.drop_t), "drop_t_rel": float(self.relative_drop(self.target)),
            "st_d": self.st_d, "no_target_drop": self.drop_t == 0,
        }

    def to_dict(self) -> dict:
        def enc(m):
            return {k: {"percent": float(v), "exact": f"{v.numerator}/{v.denominator}"} for k, v in sorted(m.items())}
        s = self.summary()
        if math.isinf(s["st_d"]):
            s["st_d"] = "inf"
        return {"schema_version": REPORT_SCHEMA_VERSION, "source": self.source, "target": self.target,
                "before": enc(self.before), "after": enc(self.after), "summary": s, "meta": self.meta}

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetricsReport":
        if d.get("schema_version") != REPORT_SCHEMA_VERSION:
            raise ValueError(f"unsupported metrics schema version {d.get('schema_version')!r}")

        def dec(m):
            return {k: Fraction(v["exact"]) for k, v in m.items()}
        return cls(d["source"], d["target"], dec(d["before"]), dec(d["after"]), dict(d.get("meta", {})))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls.from_dict(json.loads(text))

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(self.to_json() + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "MetricsReport":
        return cls.from_json(Path(path).read_text())

    def __eq__(self, other) -> bool:
        if not isinstance(other, MetricsReport):
            return NotImplemented
        return (self.source, self.target, self.before, self.after, self.meta) == \
            (other.source, other.target, other.before, other.after, other.meta)


def build_report(before: Mapping, after: Mapping, source: str, target: str, meta: Mapping | None = None) -> MetricsReport:
    for name, m in (("before", before), ("after", after)):
        for dom in (source, target):
            if dom not in m:
                raise KeyError(f"{name} accuracies lack domain {dom!r}")
    return MetricsReport(source, target,
                         {k: as_percent(v) for k, v in before.items()},
                         {k: as_percent(v) for k, v in after.items()},
                         dict(meta or {}))


def _fmt_drop(points: float, rel: float) -> str:
    return f"{points:.1f} ({rel:.1f}%)"


def format_table(reports: Mapping[str, MetricsReport]) -> str:
    """Plain-text table in the Source Drop / Target Drop / ST-D layout."""
    header = f"{'Run':<24} {'Source/Target':<22} {'Source Drop':>16} {'Target Drop':>16} {'ST-D':>8}"
    lines = [header, "-" * len(header)]
    for name, r in reports.items():
        s = r.summary()
        std = "inf" if math.isinf(s["st_d"]) else f"{s['st_d']:.3f}"
        pair = f"{r.source}->{r.target}"
        lines.append(f"{name:<24} {pair:<22} {_fmt_drop(s['drop_s'], s['drop_s_rel']):>16} "
                     f"{_fmt_drop(s['drop_t'], s['drop_t_rel']):>16} {std:>8}")
        extra = sorted(set(r.after) - {r.source, r.target})
        for dom in extra:
            lines.append(f"{'':<24} {dom:<22} acc {float(r.before[dom]):.1f} -> {float(r.after[dom]):.1f}")
    return "\n".join(lines)


def render_figures(r: MetricsReport, out_dir: str | Path, run_id: str = "run",
                   loss_trace: Mapping[str, list] | None = None) -> list[Path]:
    """Grouped source/target accuracy bars with the source-minus-target line."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = []

    labels = ["original", "protected"]
    src = [float(r.before[r.source]), float(r.after[r.source])]
    tgt = [float(r.before[r.target]), float(r.after[r.target])]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    xs = range(len(labels))
    ax.bar([x - 0.18 for x in xs], src, width=0.36, color="#8ECFC9", label=f"source ({r.source})")
    ax.bar([x + 0.18 for x in xs], tgt, width=0.36, color="#FFBE7A", label=f"target ({r.target})")
    ax.plot(list(xs), [a - b for a, b in zip(src, tgt)], color="#F27970", marker="o", label="source - target")
    ax.set_xticks(list(xs), labels)
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(min(0, *[a - b for a, b in zip(src, tgt)]) - 5, 105)
    std = r.st_d
    title = "ST-D = inf (no target drop)" if math.isinf(std) else f"ST-D = {std:.3f}"
    ax.set_title(title)
    ax.legend(fontsize=7, loc="lower left")
    fig.tight_layout()
    path = out_dir / f"{run_id}_accuracy.png"
    fig.savefig(path, dpi=100)
    plt.close(fig)
    files.append(path)

    if loss_trace:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        steps = loss_trace.get("step") or list(range(len(next(iter(loss_trace.values())))))
        for key, vals in loss_trace.items():
            if key == "step" or not vals:
                continue
            ax.plot(steps[: len(vals)], vals, label=key, linewidth=0.8)
        ax.set_xlabel("step")
        ax.legend(fontsize=7)
        fig.tight_layout()
        path = out_dir / f"{run_id}_losses.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        files.append(path)
    return files
