"""Independent oracles: finite differences, naive loss loops, brute-force ASD.

None of the oracles here reuse the production code paths they check. The
loss oracle works on plain Python floats with explicit sorting, the ASD
oracle on an all-pairs distance loop.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np
import torch

from . import contrastive, objective
from ._registry import GRADIENT_OPS
from .model import DualOutput

FD_STEP = 1e-4
GRADCHECK_TOL = 1e-3
_EPS = 1e-8


# --------------------------------------------------------------------------
# finite differences


def relative_error(a, n) -> np.ndarray:
    a, n = np.asarray(a, dtype=float), np.asarray(n, dtype=float)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def fd_gradient(fn: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor], step: float = FD_STEP):
    """Central-difference gradient of scalar ``fn(*inputs)`` w.r.t. every input entry.

    Returns ``(grads, nonfinite)`` where ``nonfinite`` lists ``(input, flat_index)``
    probes at which ``fn`` was not finite.
    """
    inputs = [x.detach().clone() for x in inputs]
    grads, nonfinite = [], []
    with torch.no_grad():
        for k, x in enumerate(inputs):
            g = torch.zeros_like(x)
            flat, gflat = x.view(-1), g.view(-1)
            for idx in range(flat.numel()):
                orig = flat[idx].item()
                flat[idx] = orig + step
                hi = float(fn(*inputs))
                flat[idx] = orig - step
                lo = float(fn(*inputs))
                flat[idx] = orig
                if not (math.isfinite(hi) and math.isfinite(lo)):
                    nonfinite.append((k, idx))
                    gflat[idx] = float("nan")
                else:
                    gflat[idx] = (hi - lo) / (2 * step)
            grads.append(g)
    return grads, nonfinite


def analytic_gradient(fn, inputs: Sequence[torch.Tensor]) -> List[torch.Tensor]:
    leaves = [x.detach().clone().requires_grad_(True) for x in inputs]
    out = fn(*leaves)
    grads = torch.autograd.grad(out, leaves, allow_unused=True)
    return [torch.zeros_like(x) if g is None else g for x, g in zip(leaves, grads)]


@dataclass
class GradCheckReport:
    op: str
    max_rel_error: float
    failing: List[Tuple[int, int, int]] = field(default_factory=list)  # (seed, input, flat index)
    step: float = FD_STEP
    seeds: Tuple[int, ...] = ()

    @property
    def passed(self) -> bool:
        return self.max_rel_error < GRADCHECK_TOL and not any(i < 0 for _, i, _ in self.failing)


# --------------------------------------------------------------------------
# gradcheck cases: seed -> (scalar fn, float64 inputs)


def _unit(g: torch.Generator, n: int, d: int) -> torch.Tensor:
    return torch.nn.functional.normalize(torch.randn(n, d, generator=g, dtype=torch.float64), dim=1)


def _probs(g: torch.Generator, shape) -> torch.Tensor:
    return torch.softmax(2.0 * torch.randn(*shape, generator=g, dtype=torch.float64), dim=1)


def _case_masked_pool(g):
    feats = torch.randn(2, 3, 4, 4, generator=g, dtype=torch.float64)
    mask = torch.rand(2, 4, 4, generator=g, dtype=torch.float64)
    w = torch.randn(2, 3, generator=g, dtype=torch.float64)
    return lambda f, m: (contrastive.masked_pool(f, m) * w).sum(), [feats, mask]


def _case_project(g):
    with torch.random.fork_rng():
        torch.manual_seed(int(torch.randint(0, 2 ** 31, (1,), generator=g)))
        head = contrastive.ProjectionHead(5, 6).double()
    x = torch.randn(3, 5, generator=g, dtype=torch.float64)
    w = torch.randn(3, 6, generator=g, dtype=torch.float64)
    return lambda p: (contrastive.project(p, head)[0] * w).sum(), [x]


def _case_cosine(g):
    a = torch.randn(4, 5, generator=g, dtype=torch.float64)
    b = torch.randn(4, 5, generator=g, dtype=torch.float64)
    return lambda x, y: contrastive.cosine_sim(x, y).sum(), [a, b]


def _frozen(z_f, z_b):
    return contrastive.pair_weights(z_f, z_b)


def _case_pos(g):
    z = _unit(g, 4, 6)
    # keep w * sim above the clamp so the check sees the smooth branch
    z = torch.nn.functional.normalize(z + 1.5, dim=1)
    w = contrastive.rank_weights(contrastive.similarity_matrix(z), mode="positive")
    return lambda x: contrastive.pos_loss(x, w), [z]


def _case_neg(g):
    z_f, z_b = _unit(g, 3, 6), _unit(g, 3, 6)
    w = contrastive.rank_weights(contrastive.similarity_matrix(z_f, z_b), mode="negative")
    return lambda a, b: contrastive.neg_loss(a, b, w), [z_f, z_b]


def _case_contrastive(g):
    z_f = torch.nn.functional.normalize(_unit(g, 3, 6) + 1.5, dim=1)
    z_b = torch.nn.functional.normalize(_unit(g, 3, 6) - 1.5, dim=1)
    w = _frozen(z_f, z_b)
    return lambda a, b: contrastive.contrastive_loss(a, b, weights=w).contra, [z_f, z_b]


def _case_infonce(g):
    z_f, z_b = _unit(g, 3, 6), _unit(g, 3, 6)
    return lambda a, b: contrastive.infonce_loss(a, b, 0.1), [z_f, z_b]


def _case_dice(g):
    prob = _probs(g, (2, 2, 4, 4))
    label = objective.one_hot(torch.randint(0, 2, (2, 4, 4), generator=g), 2).double()
    return lambda p: objective.dice_loss(p, label), [prob]


def _case_consistency(g):
    p1, p2 = _probs(g, (2, 2, 4, 4)), _probs(g, (2, 2, 4, 4))
    return lambda a, b: objective.consistency_loss(a, b), [p1, p2]


def _case_total(g):
    p1, p2 = _probs(g, (3, 2, 4, 4)), _probs(g, (3, 2, 4, 4))
    label = objective.one_hot(torch.randint(0, 2, (3, 4, 4), generator=g), 2).double()
    labeled = torch.tensor([True, True, False])
    z_f = torch.nn.functional.normalize(_unit(g, 3, 5) + 1.5, dim=1)
    z_b = torch.nn.functional.normalize(_unit(g, 3, 5) - 1.5, dim=1)
    w = _frozen(z_f, z_b)
    feats = torch.zeros(3, 1, 1, 1, dtype=torch.float64)

    def fn(a, b, zf, zb):
        out = DualOutput(a, b, feats, feats)
        terms = contrastive.contrastive_loss(zf, zb, weights=w)
        return objective.total_loss(out, label, labeled, terms, 0.7, 0.3).total

    return fn, [p1, p2, z_f, z_b]


GRADCHECK_CASES: Dict[str, Callable] = {
    "contrastive.masked_pool": _case_masked_pool,
    "contrastive.project": _case_project,
    "contrastive.cosine_sim": _case_cosine,
    "contrastive.pos_loss": _case_pos,
    "contrastive.neg_loss": _case_neg,
    "contrastive.contrastive_loss": _case_contrastive,
    "contrastive.infonce_loss": _case_infonce,
    "objective.dice_loss": _case_dice,
    "objective.consistency_loss": _case_consistency,
    "objective.total_loss": _case_total,
}


def missing_gradchecks() -> List[str]:
    return sorted(set(GRADIENT_OPS) - set(GRADCHECK_CASES))


def gradcheck_op(name: str, seeds: Sequence[int] = range(10), step: float = FD_STEP) -> GradCheckReport:
    worst, failing = 0.0, []
    for seed in seeds:
        g = torch.Generator().manual_seed(seed)
        fn, inputs = GRADCHECK_CASES[name](g)
        numeric, nonfinite = fd_gradient(fn, inputs, step)
        analytic = analytic_gradient(fn, inputs)
        for k, idx in nonfinite:
            failing.append((seed, -1 - k, idx))
        for k, (a, n) in enumerate(zip(analytic, numeric)):
            err = relative_error(a.numpy().ravel(), n.numpy().ravel())
            err = np.where(np.isnan(err), np.inf, err)
            worst = max(worst, float(err.max()) if err.size else 0.0)
            failing.extend((seed, k, int(i)) for i in np.flatnonzero(err >= GRADCHECK_TOL))
    return GradCheckReport(name, worst, failing, step, tuple(seeds))


def run_gradcheck(seeds: Sequence[int] = range(10), step: float = FD_STEP) -> List[GradCheckReport]:
    missing = missing_gradchecks()
    if missing:
        raise RuntimeError(f"gradient ops without a gradcheck case: {missing}")
    return [gradcheck_op(name, seeds, step) for name in sorted(GRADCHECK_CASES)]


# --------------------------------------------------------------------------
# naive loss oracle


def _dot(a, b):
    return sum(x * y for x, y in zip(a, b))


def _cos(a, b):
    return _dot(a, b) / (math.sqrt(_dot(a, a)) * math.sqrt(_dot(b, b)) + _EPS)


def _sorted_ranks(entries, hardest_low: bool, tol: float):
    """Competition ranks by explicit sort; entries within ``tol`` of their group head tie."""
    order = sorted(entries, key=lambda e: e[1] if hardest_low else -e[1])
    ranks = {}
    group_rank, group_key = 0, None
    for pos, (key, value) in enumerate(order):
        v = value if hardest_low else -value
        if group_key is None or v > group_key + tol:
            group_rank, group_key = pos, v
        ranks[key] = group_rank
    return ranks


def brute_loss(z_f, z_b, alpha: float = 0.25, direction: str = "hard_first") -> Dict[str, float]:
    """Double-loop transcription of the positive/negative losses.

    ``z_f``/``z_b`` are sequences of n vectors (n <= 8).
    """
    z_f = [list(map(float, v)) for v in z_f]
    z_b = [list(map(float, v)) for v in z_b]
    n = len(z_f)
    if n > 8:
        raise ValueError("brute_loss is intentionally naive; use n <= 8")
    tol = contrastive.tie_tolerance(torch.float64)
    hard = direction == "hard_first"

    def positive(zs):
        if n < 2:
            return 0.0
        sims = {(i, j): _cos(zs[i], zs[j]) for i in range(n) for j in range(n) if i != j}
        ranks = _sorted_ranks(list(sims.items()), hardest_low=hard, tol=tol)
        acc = 0.0
        for (i, j), s in sims.items():
            w = math.exp(-alpha * ranks[(i, j)])
            acc += math.log(max(w * s, _EPS))
        return -acc / (n * (n - 1))

    sims = {(i, j): _cos(z_f[i], z_b[j]) for i in range(n) for j in range(n)}
    ranks = _sorted_ranks(list(sims.items()), hardest_low=not hard, tol=tol)
    acc = 0.0
    for (i, j), s in sims.items():
        w = math.exp(-alpha * ranks[(i, j)])
        acc += math.log(max(w * (1.0 - s), _EPS))
    neg = -acc / (n * n)
    pos_f, pos_b = positive(z_f), positive(z_b)
    return {"pos_f": pos_f, "pos_b": pos_b, "neg": neg, "contra": pos_f + pos_b + neg}


def brute_infonce(z_f, z_b, temperature: float = 0.1) -> float:
    n = len(z_f)
    total = 0.0
    for zs, other in ((z_f, z_b), (z_b, z_f)):
        for i in range(n):
            q = _cos(zs[i], other[i]) / temperature
            for j in range(n):
                if i == j:
                    continue
                p = _cos(zs[i], zs[j]) / temperature
                total += -math.log(math.exp(p) / (math.exp(p) + math.exp(q)))
    return total / (2 * n * (n - 1))


# --------------------------------------------------------------------------
# metric oracles


def brute_surface(mask) -> List[Tuple[int, ...]]:
    mask = np.asarray(mask, dtype=bool)
    out = []
    for idx in zip(*np.nonzero(mask)):
        on_surface = False
        for ax in range(mask.ndim):
            for step in (-1, 1):
                nb = list(idx)
                nb[ax] += step
                if not 0 <= nb[ax] < mask.shape[ax] or not mask[tuple(nb)]:
                    on_surface = True
        if on_surface:
            out.append(tuple(int(i) for i in idx))
    return out


def brute_asd(pred, gt, spacing=None) -> float:
    pred, gt = np.asarray(pred, bool), np.asarray(gt, bool)
    sp = [1.0] * pred.ndim if spacing is None else list(spacing)
    sa, sb = brute_surface(pred), brute_surface(gt)

    def mean_nearest(src, dst):
        total = 0.0
        for a in src:
            best = math.inf
            for b in dst:
                d = math.sqrt(sum(((x - y) * s) ** 2 for x, y, s in zip(a, b, sp)))
                best = min(best, d)
            total += best
        return total / len(src)

    return (mean_nearest(sa, sb) + mean_nearest(sb, sa)) / 2.0


def brute_dice(pred, gt) -> float:
    a = {tuple(i) for i in np.argwhere(np.asarray(pred, bool))}
    b = {tuple(i) for i in np.argwhere(np.asarray(gt, bool))}
    if not a and not b:
        return 1.0
    return 2 * len(a & b) / (len(a) + len(b))


# --------------------------------------------------------------------------
# determinism


def file_digest(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def tensor_digest(*tensors: torch.Tensor) -> str:
    h = hashlib.sha256()
    for t in tensors:
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
