"""Inference: prior-driven selection of memory and knowledge, beam-search
decoding, and the evaluation harness. The reference response is never an
input to response generation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .corpus import retrieve_memory
from .errors import ConfigError
from .latent import sample, top_m
from .metrics import recall_at_k, report_generation


@dataclass
class DecodeConfig:
    beam_width: int = 5
    min_len: int = 10
    repetition_penalty: float = 1.0
    length_penalty: float = 0.0
    max_len: int = 64

    def validate(self):
        if self.beam_width < 1:
            raise ConfigError("decode config: beam_width must be >= 1")
        if not 0 < self.min_len <= self.max_len:
            raise ConfigError("decode config: need 0 < min_len <= max_len")
        if self.repetition_penalty <= 0:
            raise ConfigError("decode config: repetition_penalty must be positive")
        return self


def _adjusted(logprob, length, penalty):
    # GNMT-style normalization; penalty 0 leaves raw log-probability sums
    if penalty == 0.0:
        return logprob
    return logprob / (((5.0 + length) / 6.0) ** penalty)


def beam_search(gen, context_ids, memory_ids, knowledge_ids, cfg: DecodeConfig):
    """Length-penalty-adjusted best complete hypothesis; the end token is
    masked out until min_len tokens have been generated."""
    cfg.validate()
    hidden = gen.initial_hidden(context_ids, memory_ids, knowledge_ids)
    beams = [([], 0.0, hidden)]  # (tokens, sum logprob, hidden)
    finished = []
    for _ in range(cfg.max_len):
        candidates = []
        for tokens, score, hid in beams:
            prev = tokens[-1] if tokens else gen.bos_id
            logits, new_hid = gen.step(prev, hid)
            logits = logits.detach().clone()
            if cfg.repetition_penalty != 1.0:
                for t in set(tokens):
                    if logits[t] > 0:
                        logits[t] = logits[t] / cfg.repetition_penalty
                    else:
                        logits[t] = logits[t] * cfg.repetition_penalty
            logp = torch.log_softmax(logits, dim=0)
            if len(tokens) < cfg.min_len:
                logp[gen.eos_id] = -math.inf
            top = torch.topk(logp, min(cfg.beam_width, logp.shape[0]))
            for lp, tok in zip(top.values.tolist(), top.indices.tolist()):
                if not math.isfinite(lp):  # masked continuation
                    continue
                candidates.append((tokens + [tok], score + lp, new_hid))
        candidates.sort(key=lambda c: (-c[1], c[0]))
        beams = []
        for tokens, score, hid in candidates:
            if tokens[-1] == gen.eos_id:
                finished.append((tokens[:-1], score))
            else:
                beams.append((tokens, score, hid))
            if len(beams) >= cfg.beam_width:
                break
        if not beams:
            break
    if not finished:
        finished = [(tokens, score) for tokens, score, _ in beams]
    finished.sort(key=lambda f: (-_adjusted(f[1], max(len(f[0]), 1),
                                            cfg.length_penalty), f[0]))
    return finished[0][0]


def respond(context, user_key, knowledge, state, repo, decode_cfg=None,
            m=2, mode="sample", rng=None):
    """Select memory via the prior, then knowledge, then decode.

    With m == 1 the fragment is sampled (mode="sample") or taken by argmax
    (mode="argmax"); with m > 1 the top-m fragments by prior probability are
    concatenated in probability order for conditioning.
    """
    decode_cfg = (decode_cfg or DecodeConfig()).validate()
    if not knowledge:
        raise ConfigError("respond: empty knowledge candidate set")
    mem = retrieve_memory(repo, user_key)
    lat = state.latent
    with torch.no_grad():
        p_zp = lat.prior_zp(context, mem.fragments)
        if m > 1:
            zp_indices = top_m(p_zp, min(m, len(mem.fragments)))
        elif mode == "sample":
            if rng is None:
                raise ConfigError("respond: sampling mode needs an rng")
            zp_indices = [sample(p_zp, rng)]
        else:
            zp_indices = top_m(p_zp, 1)
        mem_tokens = [t for i in zp_indices for t in mem.fragments[i]]
        p_zk = lat.prior_zk(context, mem_tokens, mem.fragments, knowledge)
        if mode == "sample" and rng is not None:
            zk = sample(p_zk, rng)
        else:
            zk = top_m(p_zk, 1)[0]
        ctx_ids = state.vocab.encode([t for u in context for t in u])
        response_ids = beam_search(
            state.models.generator, ctx_ids, state.vocab.encode(mem_tokens),
            state.vocab.encode(knowledge[zk]), decode_cfg)
    trace = {
        "p_zp": p_zp.numpy().tolist(),
        "p_zk": p_zk.numpy().tolist(),
        "zp": list(zp_indices),
        "zk": int(zk),
    }
    return zp_indices, int(zk), state.vocab.decode(response_ids), trace


def evaluate(cases, repo, state, decode_cfg=None, m=2, truth=None,
             mode="argmax", rng=None, recall_ks=(1, 2, 5, 10)):
    """Run respond over every case; aggregate generation metrics and the
    Recall@k of the prior knowledge distribution against ground truth
    (synthetic) or pseudo labels (real)."""
    from .corpus import pseudo_labels

    hyps, refs, rankings = [], [], []
    for case in cases:
        mem = retrieve_memory(repo, case.user_key)
        _, _, resp_tokens, trace = respond(
            case.context, case.user_key, case.knowledge, state, repo,
            decode_cfg=decode_cfg, m=m, mode=mode, rng=rng)
        hyps.append(resp_tokens)
        refs.append(case.response)
        if truth is not None:
            zk_true = truth[case.id][1]
        else:
            zk_true = pseudo_labels(case, mem).k_bar
        rankings.append((trace["p_zk"], zk_true))

    report = report_generation(hyps, refs)
    max_k = min(len(r[0]) for r in rankings)
    report.recall_at = {k: recall_at_k(rankings, k)
                        for k in recall_ks if k <= max_k}
    out = report.to_dict()
    out["n_cases"] = len(cases)
    return out
