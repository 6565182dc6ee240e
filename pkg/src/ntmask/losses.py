"""Objectives for mask pruning and for the data generators.

All divergence helpers take *probability* batches of shape ``(N, k)``.  Use
:func:`to_probs` to turn logits into floor-smoothed probabilities before
calling them; KL rejects inputs where the second argument has zeros.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Callable, Mapping, Sequence

import torch
import torch.nn.functional as F


@dataclass
class ProtectionHyperparams:
    lam: float = 0.1            # scaling factor on the subtracted KL term
    alpha: float = 1.0          # upper bound, source-available objective
    beta: float = 1.0           # upper bound, source-free objective
    gamma: float = 1.0          # upper bound, ownership objective
    delta: float = 0.9          # pseudo-label confidence threshold
    lambda1: float = 1.0        # fresh generator: one-hot cross-entropy weight
    lambda2: float = 5.0        # fresh generator: batch entropy weight
    eps: float = 1e-3           # probability smoothing floor
    n_aug: int = 4
    sigma_mmd: float | None = None   # None -> median heuristic
    n_dir: int = 3

    def validate(self) -> "ProtectionHyperparams":
        for name in ("lam", "alpha", "beta", "gamma", "eps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"hparams.{_public_name(name)}: must satisfy {_public_name(name)} > 0")
        if self.sigma_mmd is not None and not self.sigma_mmd > 0:
            raise ValueError("hparams.sigma_mmd: must satisfy sigma_mmd > 0")
        if not 0 < self.delta < 1:
            raise ValueError("hparams.delta: must satisfy 0 < delta < 1")
        if not 0 < self.eps < 1:
            raise ValueError("hparams.eps: must satisfy 0 < eps < 1")
        if self.n_aug < 1:
            raise ValueError("hparams.n_aug: must satisfy n_aug >= 1")
        if self.n_dir < 1:
            raise ValueError("hparams.n_dir: must satisfy n_dir >= 1")
        return self

    def to_dict(self) -> dict:
        return {_public_name(k): v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ProtectionHyperparams":
        known = {_public_name(f.name): f.name for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"hparams: unknown keys {sorted(unknown)}")
        return cls(**{known[k]: v for k, v in d.items()}).validate()


def _public_name(name: str) -> str:
    return "lambda" if name == "lam" else name


# --------------------------------------------------------------------------
# Probability helpers and divergences
# --------------------------------------------------------------------------

def smooth(p: torch.Tensor, eps: float) -> torch.Tensor:
    """Mix with the uniform distribution so every entry is at least eps/k."""
    k = p.shape[-1]
    return (1.0 - eps) * p + eps / k


def to_probs(logits: torch.Tensor, eps: float = 1e-3) -> torch.Tensor:
    return smooth(F.softmax(logits, dim=-1), eps)


def smoothed_one_hot(labels: torch.Tensor, k: int, eps: float) -> torch.Tensor:
    if labels.numel() and (int(labels.max()) >= k or int(labels.min()) < 0):
        raise ValueError(f"labels out of range for {k} classes (max label {int(labels.max())})")
    return smooth(F.one_hot(labels.long(), k).to(torch.get_default_dtype()), eps)


def _target_dist(y: torch.Tensor, k: int, eps: float, dtype) -> torch.Tensor:
    if y.dim() == 1:
        return smoothed_one_hot(y, k, eps).to(dtype)
    if y.shape[-1] != k:
        raise ValueError(f"class-count mismatch: predictions have {k} classes, targets {y.shape[-1]}")
    return y


def _same_shape(p: torch.Tensor, q: torch.Tensor) -> None:
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch: {tuple(p.shape)} vs {tuple(q.shape)}")


def kl_divergence(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """Batch mean of sum_c p_c log(p_c / q_c)."""
    _same_shape(p, q)
    if bool(((q <= 0) & (p > 0)).any()):
        raise ValueError("KL undefined: q has zero mass where p > 0; smooth probabilities first")
    per_row = (torch.xlogy(p, p) - torch.xlogy(p, q)).sum(dim=-1)
    return per_row.mean() if per_row.numel() else per_row.sum()


def js_divergence(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    _same_shape(p, q)
    return _js_rows(p, q).mean()


def _js_rows(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    m = 0.5 * (p + q)
    kl_pm = (torch.xlogy(p, p) - torch.xlogy(p, m)).sum(dim=-1)
    kl_qm = (torch.xlogy(q, q) - torch.xlogy(q, m)).sum(dim=-1)
    return 0.5 * (kl_pm + kl_qm)


def entropy(p: torch.Tensor) -> torch.Tensor:
    """Batch mean of per-row Shannon entropy (nats)."""
    return -torch.xlogy(p, p).sum(dim=-1).mean()


def batch_entropy(p: torch.Tensor) -> torch.Tensor:
    """Entropy of the batch-averaged class distribution."""
    return entropy(p.mean(dim=0, keepdim=True))


def clamped_term(kl_value, scale: float, bound: float):
    if isinstance(kl_value, torch.Tensor):
        return torch.clamp(scale * kl_value, max=bound)
    return min(scale * kl_value, bound)


# --------------------------------------------------------------------------
# Mask objectives
# --------------------------------------------------------------------------

def _keep_minus_forget(pred_keep, y_keep, pred_forget, y_forget, h, bound):
    k = pred_keep.shape[-1]
    if pred_forget.shape[-1] != k:
        raise ValueError(f"class-count mismatch: {k} vs {pred_forget.shape[-1]}")
    keep = kl_divergence(pred_keep, _target_dist(y_keep, k, h.eps, pred_keep.dtype))
    forget = kl_divergence(pred_forget, _target_dist(y_forget, k, h.eps, pred_forget.dtype))
    return keep - clamped_term(forget, h.lam, bound)


def sa_loss(pred_src, y_src, pred_tgt, y_tgt, h: ProtectionHyperparams) -> torch.Tensor:
    """Source-available objective: fit the source labels, push target away (capped at alpha)."""
    return _keep_minus_forget(pred_src, y_src, pred_tgt, y_tgt, h, h.alpha)


def owner_loss(pred_src, y_src, pred_aux, y_aux, h: ProtectionHyperparams) -> torch.Tensor:
    """Ownership objective: same shape as :func:`sa_loss` with the watermarked domain, capped at gamma."""
    return _keep_minus_forget(pred_src, y_src, pred_aux, y_aux, h, h.gamma)


def sf_loss(pred_pseudo_src_t, pred_pseudo_src_s, pred_tgt, y_psd, h: ProtectionHyperparams) -> torch.Tensor:
    """Source-free objective.

    First term keeps the masked model consistent with the source model on
    pseudo-source samples; the second pushes target predictions away from
    their pseudo labels, capped at beta.
    """
    _same_shape(pred_pseudo_src_t, pred_pseudo_src_s)
    _same_shape(pred_tgt, y_psd)
    keep = kl_divergence(pred_pseudo_src_t, pred_pseudo_src_s)
    return keep - clamped_term(kl_divergence(pred_tgt, y_psd), h.lam, h.beta)


@torch.no_grad()
def pseudo_label(f_s: Callable, x_t: torch.Tensor, augs, h: ProtectionHyperparams,
                 seed: int = 0) -> torch.Tensor:
    """Soft pseudo labels from the source model.

    Confident samples (max probability > delta) keep the direct prediction;
    the rest get the mean prediction over the augmentation set.
    """
    p = F.softmax(f_s(x_t), dim=-1)
    low = p.max(dim=-1).values <= h.delta
    if bool(low.any()):
        if augs is None or len(augs) == 0:
            raise ValueError("pseudo_label: low-confidence samples present but the augmentation set is empty")
        x_low = x_t[low]
        acc = torch.zeros_like(p[low])
        for i in range(len(augs)):
            acc += F.softmax(f_s(augs.apply(x_low, i, seed)), dim=-1)
        p = p.clone()
        p[low] = acc / len(augs)
    return smooth(p, h.eps)


# --------------------------------------------------------------------------
# Generator objectives
# --------------------------------------------------------------------------

def fresh_loss(p_s_prime: torch.Tensor, p_t_prime: torch.Tensor, h: ProtectionHyperparams) -> torch.Tensor:
    """lambda1 * CE(argmax p_s, p_s) - lambda2 * H(mean p_s) + JS(p_s, p_t).

    The cross-entropy makes each sample confident for the source model, the
    (negated) entropy of the batch-mean prediction spreads samples across
    classes, and the JS term asks for samples the two models agree on.
    """
    _same_shape(p_s_prime, p_t_prime)
    t = p_s_prime.detach().argmax(dim=-1)
    ce = -torch.log(p_s_prime.gather(1, t[:, None])).mean()
    return h.lambda1 * ce - h.lambda2 * batch_entropy(p_s_prime) + js_divergence(p_s_prime, p_t_prime)


def memory_loss(x_syn: torch.Tensor, x_re: torch.Tensor, f_s, layers_L: Sequence[int]) -> torch.Tensor:
    """Pixel L1 plus feature L1 at the selected source-model layers, per-sample sums averaged."""
    layers_L = list(layers_L)
    if not layers_L:
        raise ValueError("memory_loss: the layer set must be non-empty")
    _same_shape(x_syn, x_re)
    n = x_syn.shape[0]
    loss = (x_syn - x_re).abs().reshape(n, -1).sum(dim=1)
    feats_a = f_s.taps(x_syn, layers_L)
    feats_b = f_s.taps(x_re, layers_L)
    for a, b in zip(feats_a, feats_b):
        loss = loss + (a - b).abs().reshape(n, -1).sum(dim=1)
    return loss.mean()


def mi_loss(z: torch.Tensor, z_prime: torch.Tensor) -> torch.Tensor:
    """Contrastive upper bound on I(z; z') with a unit-variance Gaussian q(z'|z)."""
    if z.shape[0] == 0:
        raise ValueError("mi_loss: empty batch")
    _same_shape(z, z_prime)
    if z.dim() != 2:
        raise ValueError("mi_loss: expects (N, d) latent batches")
    # log_q[i, j] = log q(z'_j | z_i) up to a shared constant
    log_q = -0.5 * (z[:, None, :] - z_prime[None, :, :]).pow(2).sum(-1)
    positive = log_q.diagonal()
    return (positive - log_q.mean(dim=1)).mean()


def rbf_kernel(a: torch.Tensor, b: torch.Tensor, sigma) -> torch.Tensor:
    d2 = (a[:, None, :] - b[None, :, :]).pow(2).sum(-1)
    return torch.exp(-d2 / (2 * sigma ** 2))


def median_bandwidth(*batches: torch.Tensor) -> float:
    z = torch.cat([b.detach().reshape(b.shape[0], -1) for b in batches])
    d = torch.pdist(z)
    d = d[d > 0]
    if d.numel() == 0:
        return 1.0
    return float(d.median())


def mmd_semantic_loss(z_by_class: Mapping, z_prime_by_class: Mapping, sigma_mmd: float | None = None) -> torch.Tensor:
    """Class-conditional squared MMD with an RBF kernel, averaged over classes."""
    only_a = set(z_by_class) - set(z_prime_by_class)
    only_b = set(z_prime_by_class) - set(z_by_class)
    if only_a or only_b:
        cls = sorted(only_a | only_b)[0]
        raise ValueError(f"mmd_semantic_loss: class {cls} present on one side only")
    if not z_by_class:
        raise ValueError("mmd_semantic_loss: no classes")
    for c in z_by_class:
        if len(z_by_class[c]) == 0 or len(z_prime_by_class[c]) == 0:
            raise ValueError(f"mmd_semantic_loss: class {c} has no samples on one side")
    if sigma_mmd is None:
        sigma_mmd = median_bandwidth(*z_by_class.values(), *z_prime_by_class.values())
    total = 0.0
    for c in sorted(z_by_class):
        a, b = z_by_class[c], z_prime_by_class[c]
        total = total + (rbf_kernel(a, a, sigma_mmd).mean() + rbf_kernel(b, b, sigma_mmd).mean()
                         - 2 * rbf_kernel(a, b, sigma_mmd).mean())
    return torch.clamp(total / len(z_by_class), min=0.0)


def group_by_label(z: torch.Tensor, y: torch.Tensor) -> dict[int, torch.Tensor]:
    return {int(c): z[y == c] for c in torch.unique(y)}


LN2 = math.log(2.0)
