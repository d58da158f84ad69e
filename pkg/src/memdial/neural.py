"""Small differentiable reference models: a segment-tagged bag-of-embeddings
encoder, an MLP scoring head, and a recurrent conditional generator.

Everything runs in float64 on CPU so that finite-difference gradient checks
and enumeration oracles are tight. The contracts are pluggable: anything
with the same call signatures and exact gradients can stand in.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn

from .composer import NUM_SEGMENT_LABELS
from .errors import ConfigError, NumericError, VocabError

DTYPE = torch.float64


@dataclass
class ModelConfig:
    vocab_size: int
    d: int = 32
    encoder_hidden: int = 64
    head_hidden: int = 32
    gen_hidden: int = 32
    init_scale: float = 0.1
    # One encoder per parameter group (memory and knowledge heads share it)
    # versus a dedicated encoder per scoring head. Sharing is the default;
    # small encoders can suffer task competition, which splitting removes.
    share_encoders: bool = True

    def hash(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


def init_uniform_(modules, seed, scale=0.1):
    """Fill every parameter with U[-scale, scale] draws from one generator."""
    gen = torch.Generator().manual_seed(int(seed))
    for module in modules:
        for p in module.parameters():
            with torch.no_grad():
                p.uniform_(-scale, scale, generator=gen)


class BagEncoder(nn.Module):
    """Per-segment mean of (token + segment) embeddings, concatenated over
    the fixed label set, then a 2-layer perceptron down to width d. The
    classification position contributes its own labelled slot."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.d, dtype=DTYPE)
        self.seg_emb = nn.Embedding(NUM_SEGMENT_LABELS, cfg.d, dtype=DTYPE)
        self.mlp = nn.Sequential(
            nn.Linear(NUM_SEGMENT_LABELS * cfg.d, cfg.encoder_hidden, dtype=DTYPE),
            nn.Tanh(),
            nn.Linear(cfg.encoder_hidden, cfg.d, dtype=DTYPE),
        )

    def forward(self, composed_list):
        """Encode a list of ComposedSequence into a (B, d) matrix."""
        if not composed_list:
            raise ConfigError("encoder: empty batch")
        max_len = max(len(c.tokens) for c in composed_list)
        B = len(composed_list)
        tokens = torch.zeros(B, max_len, dtype=torch.long)
        labels = torch.zeros(B, max_len, dtype=torch.long)
        mask = torch.zeros(B, max_len, NUM_SEGMENT_LABELS, dtype=DTYPE)
        for b, c in enumerate(composed_list):
            L = len(c.tokens)
            cached = c.__dict__.get("_id_tensors")
            if cached is None:
                cached = (torch.tensor(c.tokens, dtype=torch.long),
                          torch.tensor(c.segment_labels, dtype=torch.long))
                c.__dict__["_id_tensors"] = cached
            if int(cached[0].max()) >= self.cfg.vocab_size:
                raise VocabError("token id outside encoder vocabulary")
            tokens[b, :L] = cached[0]
            labels[b, :L] = cached[1]
            mask[b, torch.arange(L), labels[b, :L]] = 1.0
        emb = self.tok_emb(tokens) + self.seg_emb(labels)  # (B, L, d)
        bags = torch.einsum("bls,bld->bsd", mask, emb)  # per-segment sums
        return self.mlp(bags.reshape(B, -1))


class ScoringHead(nn.Module):
    """MLP with one hidden layer mapping an encoding to a scalar logit."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(cfg.d, cfg.head_hidden, dtype=DTYPE),
            nn.Tanh(),
            nn.Linear(cfg.head_hidden, 1, dtype=DTYPE),
        )

    def forward(self, h):
        return self.net(h).squeeze(-1)


def score_candidates(encoder, head, composed_list):
    """Softmax over per-candidate logits; returns a probability vector."""
    return torch.softmax(score_logits(encoder, head, composed_list), dim=0)


def score_logits(encoder, head, composed_list):
    if not composed_list:
        raise ConfigError("score_candidates: empty candidate list")
    return head(encoder(composed_list))


class ConditionalGenerator(nn.Module):
    """Embedding + single GRU cell + output projection, conditioned on the
    bags of the context, selected memory fragment, and selected knowledge."""

    def __init__(self, cfg: ModelConfig, bos_id: int, eos_id: int):
        super().__init__()
        self.cfg = cfg
        self.bos_id = bos_id
        self.eos_id = eos_id
        self.emb = nn.Embedding(cfg.vocab_size, cfg.d, dtype=DTYPE)
        self.cond = nn.Linear(3 * cfg.d, cfg.gen_hidden, dtype=DTYPE)
        self.cell = nn.GRUCell(cfg.d, cfg.gen_hidden).to(DTYPE)
        self.out = nn.Linear(cfg.gen_hidden, cfg.vocab_size, dtype=DTYPE)

    def _check_ids(self, ids):
        for t in ids:
            if not 0 <= t < self.cfg.vocab_size:
                raise VocabError(f"token id {t} outside generator vocabulary")

    def _bag(self, ids):
        self._check_ids(ids)
        return self.emb(torch.tensor(ids, dtype=torch.long)).mean(dim=0)

    def initial_hidden(self, context_ids, memory_ids, knowledge_ids):
        cond = torch.cat([self._bag(context_ids), self._bag(memory_ids),
                          self._bag(knowledge_ids)])
        return torch.tanh(self.cond(cond)).unsqueeze(0)

    def step(self, token_id, hidden):
        """One recurrence step; returns (next-token logits, new hidden)."""
        self._check_ids([token_id])
        x = self.emb(torch.tensor([token_id], dtype=torch.long))
        hidden = self.cell(x, hidden)
        return self.out(hidden).squeeze(0), hidden

    def log_likelihood(self, response_ids, context_ids, memory_ids,
                       knowledge_ids, with_eos=False):
        """Teacher-forced sum of log g(r_i | conditioning, r_<i); <= 0."""
        if len(response_ids) == 0:
            raise ConfigError("generator: empty response")
        self._check_ids(response_ids)
        hidden = self.initial_hidden(context_ids, memory_ids, knowledge_ids)
        total = torch.zeros((), dtype=DTYPE)
        prev = self.bos_id
        targets = list(response_ids) + ([self.eos_id] if with_eos else [])
        for t in targets:
            logits, hidden = self.step(prev, hidden)
            total = total + torch.log_softmax(logits, dim=0)[t]
            prev = t
        return total


def generator_log_likelihood(gen, response_ids, context_ids, memory_ids,
                             knowledge_ids):
    return gen.log_likelihood(response_ids, context_ids, memory_ids, knowledge_ids)


# ---------------------------------------------------------------------------
# Parameter plumbing
# ---------------------------------------------------------------------------


def get_flat_params(modules) -> np.ndarray:
    return torch.cat([p.detach().reshape(-1)
                      for m in modules for p in m.parameters()]).numpy().copy()


def set_flat_params(modules, vec):
    vec = np.asarray(vec, dtype=np.float64)
    total = sum(p.numel() for m in modules for p in m.parameters())
    if total != vec.size:
        raise ConfigError(
            f"set_flat_params: expected {total} values, got {vec.size}")
    offset = 0
    with torch.no_grad():
        for m in modules:
            for p in m.parameters():
                n = p.numel()
                p.copy_(torch.from_numpy(vec[offset:offset + n]).reshape(p.shape))
                offset += n


def gradient(objective, modules) -> np.ndarray:
    """Exact gradient of a scalar objective w.r.t. all module parameters."""
    params = [p for m in modules for p in m.parameters()]
    value = objective()
    if not torch.isfinite(value):
        raise NumericError(f"objective is not finite: {value.item()}")
    if not value.requires_grad:  # constant objective
        grads = [None] * len(params)
    else:
        grads = torch.autograd.grad(value, params, allow_unused=True)
    flat = []
    for p, g in zip(params, grads):
        flat.append((torch.zeros_like(p) if g is None else g).reshape(-1))
    return torch.cat(flat).detach().numpy()


class ModelSet:
    """The full trainable bundle: one shared encoder per parameter group
    (prior / posterior / auxiliary), a scoring head per distribution, and
    the generator."""

    def __init__(self, cfg: ModelConfig, bos_id, eos_id, seed=0):
        self.cfg = cfg
        self.encoder_prior = BagEncoder(cfg)
        self.encoder_prior_zk = (self.encoder_prior if cfg.share_encoders
                                 else BagEncoder(cfg))
        self.head_prior_zp = ScoringHead(cfg)
        self.head_prior_zk = ScoringHead(cfg)
        self.encoder_post = BagEncoder(cfg)
        self.encoder_post_zk = (self.encoder_post if cfg.share_encoders
                                else BagEncoder(cfg))
        self.head_post_zp = ScoringHead(cfg)
        self.head_post_zk = ScoringHead(cfg)
        self.encoder_aux = BagEncoder(cfg)
        self.head_aux = ScoringHead(cfg)
        self.generator = ConditionalGenerator(cfg, bos_id, eos_id)
        init_uniform_(self.all_modules(), seed, cfg.init_scale)

    def theta_modules(self):
        mods = [self.encoder_prior, self.head_prior_zp, self.head_prior_zk]
        if self.encoder_prior_zk is not self.encoder_prior:
            mods.insert(1, self.encoder_prior_zk)
        return mods

    def phi_modules(self):
        mods = [self.encoder_post, self.head_post_zp, self.head_post_zk]
        if self.encoder_post_zk is not self.encoder_post:
            mods.insert(1, self.encoder_post_zk)
        return mods

    def psi_modules(self):
        return [self.encoder_aux, self.head_aux]

    def gen_modules(self):
        return [self.generator]

    def all_modules(self):
        return (self.theta_modules() + self.phi_modules()
                + self.psi_modules() + self.gen_modules())

    def named_modules_dict(self):
        out = {}
        if self.encoder_prior_zk is not self.encoder_prior:
            out["encoder_prior_zk"] = self.encoder_prior_zk
            out["encoder_post_zk"] = self.encoder_post_zk
        out.update({
            "encoder_prior": self.encoder_prior,
            "head_prior_zp": self.head_prior_zp,
            "head_prior_zk": self.head_prior_zk,
            "encoder_post": self.encoder_post,
            "head_post_zp": self.head_post_zp,
            "head_post_zk": self.head_post_zk,
            "encoder_aux": self.encoder_aux,
            "head_aux": self.head_aux,
            "generator": self.generator,
        })
        return out

    def state_dict(self):
        return {name: m.state_dict() for name, m in self.named_modules_dict().items()}

    def load_state_dict(self, state):
        for name, m in self.named_modules_dict().items():
            m.load_state_dict(state[name])


CHECKPOINT_VERSION = 1


def save_checkpoint(path, models: ModelSet, extra=None):
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(models.cfg),
        "config_hash": models.cfg.hash(),
        "bos_id": models.generator.bos_id,
        "eos_id": models.generator.eos_id,
        "model_state": models.state_dict(),
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path, expected_cfg: ModelConfig = None):
    payload = torch.load(path, weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {payload.get('version')}")
    cfg = ModelConfig(**payload["config"])
    if expected_cfg is not None and expected_cfg.hash() != payload["config_hash"]:
        raise ConfigError("checkpoint config hash does not match current config")
    models = ModelSet(cfg, payload["bos_id"], payload["eos_id"])
    models.load_state_dict(payload["model_state"])
    return models, payload["extra"]
