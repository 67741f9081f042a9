"""Open-world softmax head: 4-way softmax over {silence, mono, poly,
uncertain}, its training loss, and the SGLD negative sampler.

The loss has two parts: a log-likelihood term on labelled frames and a
term that pushes the uncertainty output up on negative embeddings drawn
from the model's own energy landscape. Negatives are sampled with
stochastic gradient Langevin dynamics in the embedding space feeding the
occurrence/overlap head, using a frozen copy of that head, and persisted
in a replay buffer between steps.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

UNCERTAIN = 3  # index of the open-world dimension among the 4 outputs
N_KNOWN = 3    # occurrence/overlap classes {0, 1, 2}


def eow_softmax(logits: torch.Tensor) -> torch.Tensor:
    """Max-stabilized softmax over the last axis (size 4)."""
    logits = torch.as_tensor(logits, dtype=torch.float64)
    if logits.shape[-1] != N_KNOWN + 1:
        raise ValueError(f"expected {N_KNOWN + 1} logits, got {logits.shape[-1]}")
    if not torch.isfinite(logits).all():
        raise ValueError("non-finite logits")
    shifted = logits - logits.max(dim=-1, keepdim=True).values
    e = shifted.exp()
    return e / e.sum(dim=-1, keepdim=True)


def uncertainty(probs: torch.Tensor) -> torch.Tensor:
    """The open-world uncertainty output, in [0, 1]."""
    return torch.as_tensor(probs)[..., UNCERTAIN]


def energy(sod_logits: torch.Tensor, embedding: torch.Tensor,
           gamma: float) -> torch.Tensor:
    """E = -logsumexp(known-class logits) + gamma/2 * ||embedding||^2.

    The uncertainty logit is excluded; the quadratic term keeps the energy
    bounded below (a bare linear-head log-sum-exp is not).
    """
    lse = torch.logsumexp(torch.as_tensor(sod_logits, dtype=torch.float64)[..., :N_KNOWN], dim=-1)
    contain = 0.5 * gamma * (torch.as_tensor(embedding, dtype=torch.float64) ** 2).sum(dim=-1)
    return -lse + contain


@dataclass(frozen=True)
class SgldConfig:
    n_steps: int = 20
    step_size: float = 1.0
    noise_scale: float = 0.01
    buffer_size: int = 256
    reinit_prob: float = 0.05
    gamma: float = 0.05

    def __post_init__(self):
        if min(self.n_steps, self.buffer_size) < 1:
            raise ValueError("n_steps and buffer_size must be >= 1")
        if self.step_size < 0 or self.noise_scale < 0 or self.gamma < 0:
            raise ValueError("step_size, noise_scale, gamma must be >= 0")
        if not (0.0 <= self.reinit_prob <= 1.0):
            raise ValueError("reinit_prob must lie in [0, 1]")


class SgldSampler:
    """Persistent-chain Langevin sampler over embedding space.

    The buffer holds `buffer_size` chains; each draw either restarts a
    chain from a standard normal (with probability reinit_prob) or
    continues a random persisted chain, runs `n_steps` of
    x <- x - (a/2) grad E(x) + noise * sqrt(a) * eps, and writes the result
    back. Non-finite chains are reinitialized and counted.
    """

    def __init__(self, dim: int, cfg: SgldConfig, seed: int = 0):
        self.dim = dim
        self.cfg = cfg
        self.gen = torch.Generator().manual_seed(seed)
        self.buffer = torch.randn(cfg.buffer_size, dim, dtype=torch.float64,
                                  generator=self.gen)
        self.reinit_events = 0

    def _grad_energy(self, head_weight: torch.Tensor, head_bias: torch.Tensor,
                     x: torch.Tensor) -> torch.Tensor:
        # analytic gradient through the frozen linear head:
        # grad = -W_known^T softmax(known logits) + gamma * x
        logits = x @ head_weight.T + head_bias
        p = torch.softmax(logits[:, :N_KNOWN], dim=-1)
        return -(p @ head_weight[:N_KNOWN]) + self.cfg.gamma * x

    def sample(self, frozen_head: torch.nn.Linear, n: int) -> torch.Tensor:
        """Draw n negatives using the frozen occurrence/overlap head."""
        cfg = self.cfg
        w = frozen_head.weight.detach().to(torch.float64)
        b = frozen_head.bias.detach().to(torch.float64)
        slots = torch.randint(cfg.buffer_size, (n,), generator=self.gen)
        x = self.buffer[slots].clone()
        fresh = torch.rand(n, generator=self.gen, dtype=torch.float64) < cfg.reinit_prob
        if fresh.any():
            x[fresh] = torch.randn(int(fresh.sum()), self.dim, dtype=torch.float64,
                                   generator=self.gen)
        for _ in range(cfg.n_steps):
            grad = self._grad_energy(w, b, x)
            noise = torch.randn(n, self.dim, dtype=torch.float64, generator=self.gen)
            x = (x - 0.5 * cfg.step_size * grad
                 + cfg.noise_scale * (cfg.step_size ** 0.5) * noise)
            bad = ~torch.isfinite(x).all(dim=-1)
            if bad.any():
                self.reinit_events += int(bad.sum())
                x[bad] = torch.randn(int(bad.sum()), self.dim, dtype=torch.float64,
                                     generator=self.gen)
        self.buffer[slots] = x.detach()
        return x.detach()


def gaussian_negatives(dim: int, n: int, gen: torch.Generator) -> torch.Tensor:
    """Literal standard-normal negatives, for the non-SGLD ablation."""
    return torch.randn(n, dim, dtype=torch.float64, generator=gen)


@dataclass
class EowLossTerms:
    mll_term: torch.Tensor
    open_term: torch.Tensor
    lam: float

    @property
    def total(self) -> torch.Tensor:
        return self.mll_term + self.lam * self.open_term


def eow_loss(sod_logits: torch.Tensor, sod_target: torch.Tensor,
             neg_logits: torch.Tensor | None, lam: float) -> EowLossTerms:
    """Frame-averaged negative log-likelihood on labelled frames plus the
    uncertainty log-likelihood on negatives.

    sod_target is either hard labels (T,) in {0,1,2} or soft rows (T, 3)
    from mixup; soft rows place no mass on the uncertainty output.
    """
    sod_logits = torch.as_tensor(sod_logits, dtype=torch.float64)
    logp = torch.log_softmax(sod_logits, dim=-1)
    target = torch.as_tensor(sod_target)
    if target.dim() == logp.dim() - 1:
        target = target.long()
        if target.min() < 0 or target.max() >= N_KNOWN:
            raise ValueError("hard occurrence/overlap labels must lie in {0, 1, 2}")
        mll = -logp.gather(-1, target.unsqueeze(-1)).squeeze(-1).mean()
    elif target.shape == (*logp.shape[:-1], N_KNOWN):
        mll = -(target.to(torch.float64) * logp[..., :N_KNOWN]).sum(dim=-1).mean()
    else:
        raise ValueError(f"bad target shape {tuple(target.shape)} for logits "
                         f"{tuple(sod_logits.shape)}")

    if neg_logits is None or len(neg_logits) == 0:
        if lam > 0:
            raise ValueError("lam > 0 requires negative samples")
        open_term = torch.zeros((), dtype=torch.float64)
    else:
        neg_logp = torch.log_softmax(
            torch.as_tensor(neg_logits, dtype=torch.float64), dim=-1)
        open_term = -neg_logp[..., UNCERTAIN].mean()
    return EowLossTerms(mll, open_term, lam)
