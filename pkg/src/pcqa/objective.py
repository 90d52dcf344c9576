"""Quality heads and the three-term coarse-to-fine training objective.

The ranking term uses a differentiable Spearman surrogate: predictions are
soft-ranked by Euclidean projection of pred/epsilon onto the permutahedron
of (1..B), computed with pool-adjacent-violators isotonic regression, and
correlated with the hard average ranks of the targets.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
from scipy.stats import rankdata

log = logging.getLogger(__name__)

NORM_FLOOR = 1e-12


class QualityHeads(nn.Module):
    """Coarse score from the global feature, fine score from the concatenation."""

    def __init__(self, d_out: int):
        super().__init__()
        self.coarse = nn.Linear(d_out, 1)
        self.fine = nn.Linear(2 * d_out, 1)

    def forward(self, f_g, f_l):
        q_c = self.coarse(f_g).squeeze(-1)
        q_f = self.fine(torch.cat([f_g, f_l], dim=-1)).squeeze(-1)
        return q_c, q_f


def loss_dis(f_g: torch.Tensor, f_l: torch.Tensor) -> torch.Tensor:
    """Hinged cosine similarity between global and local features, batch mean.

    max{0, cos(f_g, f_l)}: zero at orthogonality, and anti-parallel features
    are not rewarded further. Near-zero-norm vectors contribute 0.
    """
    if f_g.ndim == 1:
        f_g, f_l = f_g.unsqueeze(0), f_l.unsqueeze(0)
    ng = f_g.norm(dim=-1)
    nl = f_l.norm(dim=-1)
    ok = (ng > NORM_FLOOR) & (nl > NORM_FLOOR)
    if not ok.all():
        log.warning("degenerate feature norm in disentangling loss; treating as 0")
    cos = (f_g * f_l).sum(dim=-1) / (ng * nl).clamp_min(NORM_FLOOR)
    return (torch.relu(cos) * ok).mean()


def loss_reg(q_c: torch.Tensor, q_f: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """Mean squared error of the coarse head plus that of the fine head."""
    return ((q_c - q) ** 2).mean() + ((q_f - q) ** 2).mean()


def _isotonic_nonincreasing(y: np.ndarray):
    """L2 isotonic regression onto non-increasing sequences (PAV).

    Returns (solution, block_id per element). The Jacobian of the solution
    with respect to y averages within each block.
    """
    n = len(y)
    sums = y.astype(np.float64).copy()
    counts = np.ones(n)
    ends = np.arange(n)  # last original index of each active block
    m = 0  # active block count
    for i in range(1, n):
        m += 1
        sums[m] = y[i]
        counts[m] = 1.0
        ends[m] = i
        while m > 0 and sums[m - 1] / counts[m - 1] < sums[m] / counts[m]:
            sums[m - 1] += sums[m]
            counts[m - 1] += counts[m]
            ends[m - 1] = ends[m]
            m -= 1
    sol = np.empty(n)
    block = np.empty(n, dtype=np.int64)
    start = 0
    for j in range(m + 1):
        stop = ends[j] + 1
        sol[start:stop] = sums[j] / counts[j]
        block[start:stop] = j
        start = stop
    return sol, block


class _SoftRankFn(torch.autograd.Function):
    """Ascending soft ranks via projection of values/epsilon onto the
    permutahedron of (1..n)."""

    @staticmethod
    def forward(ctx, values, epsilon):
        v = values.detach().cpu().numpy().astype(np.float64)
        n = len(v)
        z = v / epsilon
        perm = np.argsort(-z, kind="stable")  # descending
        s = z[perm]
        rho = np.arange(n, 0, -1, dtype=np.float64)
        dual, block = _isotonic_nonincreasing(s - rho)
        inv = np.empty(n, dtype=np.int64)
        inv[perm] = np.arange(n)
        out = (s - dual)[inv]
        ctx.epsilon = epsilon
        ctx.perm = perm
        ctx.block = block
        ctx.inv = inv
        return values.new_tensor(out)

    @staticmethod
    def backward(ctx, grad_out):
        g = grad_out.detach().cpu().numpy().astype(np.float64)
        gs = g[ctx.perm]
        # Jacobian: identity minus block-averaging of the isotonic fit.
        counts = np.bincount(ctx.block)
        means = np.bincount(ctx.block, weights=gs) / counts
        gz = gs - means[ctx.block]
        grad = gz[ctx.inv] / ctx.epsilon
        return grad_out.new_tensor(grad), None


def soft_rank(values: torch.Tensor, epsilon: float = 1e-1) -> torch.Tensor:
    """Differentiable ascending ranks; converges to hard ranks as epsilon -> 0.

    Tied or nearly tied values pool into averaged ranks, matching the
    average-rank convention in the hard limit.
    """
    if values.ndim != 1:
        raise ValueError("soft_rank expects a 1-D batch of scores")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    return _SoftRankFn.apply(values, float(epsilon))


def _pearson(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    xc = x - x.mean()
    yc = y - y.mean()
    return (xc * yc).sum() / (xc.norm() * yc.norm()).clamp_min(NORM_FLOOR)


def soft_spearman(pred: torch.Tensor, q: torch.Tensor, epsilon: float = 1e-1) -> torch.Tensor:
    """Pearson correlation between soft ranks of pred and hard ranks of q.

    Differentiable in pred; q is ranked with average ties and carries no
    gradient. Raises for constant q (undefined correlation) or batches < 2.
    """
    if pred.shape != q.shape or pred.ndim != 1:
        raise ValueError("pred and q must be 1-D tensors of equal length")
    if len(pred) < 2:
        raise ValueError("soft_spearman needs at least two samples")
    q_np = q.detach().cpu().numpy()
    if np.ptp(q_np) == 0:
        raise ValueError("constant target scores: Spearman correlation undefined")
    ranks_q = torch.as_tensor(
        rankdata(q_np, method="average"), dtype=pred.dtype, device=pred.device
    )
    return _pearson(soft_rank(pred, epsilon), ranks_q)


def loss_rank(
    q_c: torch.Tensor,
    q_f: torch.Tensor,
    q: torch.Tensor,
    epsilon: float = 1e-1,
    stop_grad_coarse: bool = False,
) -> torch.Tensor:
    """Hinge pushing the fine head to rank at least as well as the coarse head.

    max{0, SROCC(q_c, q) - SROCC(q_f, q)} with the soft surrogate; a batch of
    one, or a batch whose targets are all tied, contributes 0 (batch rank
    statistics are undefined there).
    """
    if len(q) < 2:
        log.warning("batch size < 2: ranking loss skipped (0)")
        return q_c.sum() * 0.0
    if np.ptp(q.detach().cpu().numpy()) == 0:
        log.warning("all targets tied in batch: ranking loss skipped (0)")
        return q_c.sum() * 0.0
    s_c = soft_spearman(q_c, q, epsilon)
    if stop_grad_coarse:
        s_c = s_c.detach()
    s_f = soft_spearman(q_f, q, epsilon)
    return torch.relu(s_c - s_f)


@dataclass
class LossReport:
    l_reg: float
    l_dis: float
    l_rank: float
    total: float
    lambda_dis: float
    lambda_rank: float


def total_loss(
    l_reg: torch.Tensor,
    l_dis: torch.Tensor,
    l_rank: torch.Tensor,
    lambda_dis: float = 1.0,
    lambda_rank: float = 1.0,
):
    """Weighted sum of the three terms; returns (tensor, LossReport)."""
    if lambda_dis < 0 or lambda_rank < 0:
        raise ValueError("loss weights must be non-negative")
    total = l_reg + lambda_dis * l_dis + lambda_rank * l_rank
    report = LossReport(
        l_reg=float(l_reg.detach()),
        l_dis=float(l_dis.detach()),
        l_rank=float(l_rank.detach()),
        total=float(total.detach()),
        lambda_dis=lambda_dis,
        lambda_rank=lambda_rank,
    )
    return total, report
