"""The five categorical models over the memory latent and the knowledge
latent, plus sampling, KL divergence, tempering, and top-m selection.

Distributions are returned as float64 torch probability vectors; gradients
flow to whichever parameter group produced the logits.
"""

from __future__ import annotations

import numpy as np
import torch

from .composer import ComposerConfig, Kind, compose
from .corpus import UNK
from .errors import ConfigError, NumericError
from .neural import score_logits

KL_FLOOR = 1e-12


def check_distribution(probs, atol=1e-9):
    p = probs.detach() if isinstance(probs, torch.Tensor) else torch.tensor(probs)
    if p.numel() < 1 or (p < -atol).any() or (p > 1 + atol).any():
        raise NumericError("invalid categorical distribution entries")
    if abs(float(p.sum()) - 1.0) > atol:
        raise NumericError(f"distribution sums to {float(p.sum())!r}")
    return probs


def sample(probs, rng) -> int:
    """Draw one index; consumes exactly one uniform from the generator."""
    p = probs.detach().numpy() if isinstance(probs, torch.Tensor) else np.asarray(probs)
    cdf = np.cumsum(p)
    cdf /= cdf[-1]
    return int(np.searchsorted(cdf, rng.random(), side="right"))


def kl(p, q) -> torch.Tensor:
    """KL(p || q) for same-support categoricals; >= 0, 0 iff p = q.

    A 1e-12 floor guards against log(0) from underflow; exact zeros in q
    under positive p mass are a domain error.
    """
    p = p if isinstance(p, torch.Tensor) else torch.tensor(p, dtype=torch.float64)
    q = q if isinstance(q, torch.Tensor) else torch.tensor(q, dtype=torch.float64)
    if p.shape != q.shape:
        raise ConfigError("kl: support size mismatch")
    if bool(((q == 0) & (p.detach() > 0)).any()):
        raise NumericError("kl: q has zero mass where p is positive")
    mask = p.detach() > 0
    ratio = torch.log(p.clamp(min=KL_FLOOR)) - torch.log(q.clamp(min=KL_FLOOR))
    return torch.where(mask, p * ratio, torch.zeros_like(p)).sum()


def temper(probs, T) -> torch.Tensor:
    """Renormalize probs**(1/T); T=1 is the identity, T -> inf flattens."""
    if T <= 0:
        raise ConfigError(f"temper: temperature must be positive, got {T}")
    p = probs if isinstance(probs, torch.Tensor) else torch.tensor(probs, dtype=torch.float64)
    powered = p.clamp(min=0) ** (1.0 / T)
    return powered / powered.sum()


def top_m(probs, m) -> list[int]:
    """Indices of the m largest probabilities, ties broken by lowest index."""
    p = probs.detach().numpy() if isinstance(probs, torch.Tensor) else np.asarray(probs)
    if not 1 <= m <= len(p):
        raise ConfigError(f"top_m: m={m} out of range for {len(p)} candidates")
    order = sorted(range(len(p)), key=lambda i: (-p[i], i))
    return order[:m]


class LatentModels:
    """Binds the vocabulary, composer settings, and model bundle into the
    five distribution evaluators.

    With independent=True the knowledge models condition on a fixed
    placeholder instead of the selected fragment, severing the latent
    dependency (ablation variant).
    """

    def __init__(self, vocab, models, composer_cfg=None, independent=False):
        self.vocab = vocab
        self.models = models
        self.ccfg = composer_cfg or ComposerConfig()
        self.independent = independent
        self._placeholder = [UNK]

    # -- composition ------------------------------------------------------

    def _mem_cond(self, fragments, zp):
        if self.independent:
            return self._placeholder
        if isinstance(zp, list):  # pre-concatenated tokens (m > 1 inference)
            return zp
        if not 0 <= zp < len(fragments):
            raise IndexError(f"memory index {zp} out of range [0, {len(fragments)})")
        return fragments[zp]

    def compositions(self, kind, context, fragments=None, knowledge=None,
                     response=None, cond_zp=None, cond_zk=None):
        """Build the candidate composition list for one distribution."""
        if kind in (Kind.PRIOR_ZP, Kind.POST_ZP, Kind.AUX_ZP):
            if not fragments:
                raise ConfigError(f"{kind.value}: empty memory set")
            if kind is Kind.AUX_ZP:
                if not 0 <= cond_zk < len(knowledge):
                    raise IndexError(
                        f"knowledge index {cond_zk} out of range [0, {len(knowledge)})")
                return [compose(kind, self.vocab, context, response=response,
                                memory=frag, knowledge=knowledge[cond_zk],
                                cfg=self.ccfg)
                        for frag in fragments]
            return [compose(kind, self.vocab, context, response=response,
                            memory=frag, cfg=self.ccfg)
                    for frag in fragments]
        if not knowledge:
            raise ConfigError(f"{kind.value}: empty knowledge set")
        mem = self._mem_cond(fragments, cond_zp)
        return [compose(kind, self.vocab, context, response=response,
                        memory=mem, knowledge=cand, cfg=self.ccfg)
                for cand in knowledge]

    # -- distributions ----------------------------------------------------

    def _dist(self, encoder, head, comps, log=False):
        logits = score_logits(encoder, head, comps)
        out = torch.log_softmax(logits, dim=0) if log else torch.softmax(logits, dim=0)
        return out

    def prior_zp(self, context, fragments, log=False):
        comps = self.compositions(Kind.PRIOR_ZP, context, fragments=fragments)
        return self._dist(self.models.encoder_prior, self.models.head_prior_zp,
                          comps, log)

    def prior_zk(self, context, zp, fragments, knowledge, log=False):
        comps = self.compositions(Kind.PRIOR_ZK, context, fragments=fragments,
                                  knowledge=knowledge, cond_zp=zp)
        return self._dist(self.models.encoder_prior_zk, self.models.head_prior_zk,
                          comps, log)

    def post_zp(self, context, response, fragments, log=False):
        comps = self.compositions(Kind.POST_ZP, context, fragments=fragments,
                                  response=response)
        return self._dist(self.models.encoder_post, self.models.head_post_zp,
                          comps, log)

    def post_zk(self, context, response, zp, fragments, knowledge, log=False):
        comps = self.compositions(Kind.POST_ZK, context, fragments=fragments,
                                  knowledge=knowledge, response=response, cond_zp=zp)
        return self._dist(self.models.encoder_post_zk, self.models.head_post_zk,
                          comps, log)

    def aux_zp(self, context, response, zk, fragments, knowledge, log=False):
        comps = self.compositions(Kind.AUX_ZP, context, fragments=fragments,
                                  knowledge=knowledge, response=response, cond_zk=zk)
        return self._dist(self.models.encoder_aux, self.models.head_aux,
                          comps, log)

    # -- enumeration helpers ---------------------------------------------

    def prior_tables(self, context, fragments, knowledge):
        """(p(Z^p), row-stacked p(Z^k | Z^p = i)) over the full grid."""
        p_zp = self.prior_zp(context, fragments)
        rows = [self.prior_zk(context, i, fragments, knowledge)
                for i in range(len(fragments))]
        return p_zp, torch.stack(rows)

    def posterior_tables(self, context, response, fragments, knowledge):
        q_zp = self.post_zp(context, response, fragments)
        rows = [self.post_zk(context, response, i, fragments, knowledge)
                for i in range(len(fragments))]
        return q_zp, torch.stack(rows)

    def generator_grid(self, context, response, fragments, knowledge):
        """log g(R | C, P_i, K_j) over the full (|P|, |K|) grid."""
        ctx = [t for u in context for t in u]
        ctx_ids = self.vocab.encode(ctx)
        r_ids = self.vocab.encode(response)
        rows = []
        for frag in fragments:
            row = [self.models.generator.log_likelihood(
                       r_ids, ctx_ids, self.vocab.encode(frag), self.vocab.encode(cand))
                   for cand in knowledge]
            rows.append(torch.stack(row))
        return torch.stack(rows)
