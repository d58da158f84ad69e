"""The full learning procedure: pseudo-label warm-up, ELBO ascent for the
prior/generator, dual-learning policy-gradient updates for the posterior
knowledge model and the auxiliary inverse model, and temperature
distillation into the posterior memory model.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, asdict, field

import numpy as np
import torch

from .composer import ComposerConfig, Kind
from .corpus import retrieve_memory, pseudo_labels
from .errors import ConfigError, DataError, MissingUserError, StateError
from .latent import LatentModels, kl, sample, temper
from .metrics import recall_at_k
from .neural import ModelConfig, ModelSet, score_logits


@dataclass
class TrainingConfig:
    # Full-scale defaults follow the published hyperparameters; the shipped
    # desk-scale config overrides the step counts and learning rates.
    warmup_steps: int = 5000
    dual_steps: int = 1000
    batch_size: int = 16
    warmup_lr: float = 1e-5
    dual_lr: float = 1e-6
    theta_lr: float | None = None    # None -> dual_lr
    distill_lr: float | None = None  # None -> dual_lr
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    grad_clip: float = 2.0
    schedule: str = "cosine"
    min_lr: float = 0.0
    alpha: float = 0.5
    temperature: float = 2.0
    seed: int = 0
    probe_every: int = 50
    probe_cases: int = 200
    early_stop_patience: int = 5
    reward_baseline: bool = False
    # Linear learning-rate ramp, over the first dual_ramp dual-phase steps,
    # applied only to the inverse model's policy-gradient update and to the
    # distillation step that consumes the inverse model as a teacher. Early
    # in the dual phase the inverse model's reward is computed from the
    # posterior knowledge model's fragment-conditioned column, which is not
    # yet discriminative; chasing it at full rate knocks the inverse model
    # off its warm-up solution on some seeds. The posterior update itself
    # (which builds that discriminativeness) runs unramped.
    dual_ramp: int = 0
    elbo_mode: str = "SAMPLE"  # reconstruction handling inside theta steps
    independent_latents: bool = False

    def validate(self):
        for name in ("warmup_steps", "dual_steps"):
            if getattr(self, name) < 0:
                raise ConfigError(f"training config: {name} must be >= 0")
        positives = ("batch_size", "warmup_lr",
                     "dual_lr", "grad_clip", "temperature", "probe_every",
                     "probe_cases", "early_stop_patience")
        for name in positives:
            v = getattr(self, name)
            if v is not None and v <= 0:
                raise ConfigError(f"training config: {name} must be positive")
        if self.alpha < 0:
            raise ConfigError("training config: alpha must be >= 0")
        if self.dual_ramp < 0:
            raise ConfigError("training config: dual_ramp must be >= 0")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"training config: unknown schedule {self.schedule!r}")
        if self.elbo_mode not in ("SAMPLE", "ENUMERATE"):
            raise ConfigError(f"training config: unknown elbo_mode {self.elbo_mode!r}")
        return self


class CaseBundle:
    """One case with its retrieved memory and pseudo labels, plus encoded
    views used by the generator."""

    def __init__(self, case, mem, labels):
        self.case = case
        self.mem = mem
        self.labels = labels
        self.context = case.context
        self.response = case.response
        self.fragments = mem.fragments
        self.knowledge = case.knowledge
        self._ids = None

    def gen_ids(self, vocab):
        if self._ids is None:
            ctx = [t for u in self.context for t in u]
            self._ids = {
                "ctx": vocab.encode(ctx),
                "resp": vocab.encode(self.response),
                "frags": [vocab.encode(f) for f in self.fragments],
                "cands": [vocab.encode(k) for k in self.knowledge],
            }
        return self._ids


def make_bundles(cases, repo, sim=None):
    bundles = []
    for case in cases:
        try:
            mem = retrieve_memory(repo, case.user_key)
        except MissingUserError as e:
            raise DataError(f"case {case.id}: {e}") from e
        bundles.append(CaseBundle(case, mem, pseudo_labels(case, mem, sim)))
    return bundles


class TrainState:
    """Parameters, optimizers, counters, and the run RNG."""

    def __init__(self, config: TrainingConfig, model_cfg: ModelConfig, vocab,
                 composer_cfg=None):
        config.validate()
        self.config = config
        self.model_cfg = model_cfg
        self.vocab = vocab
        bos = vocab.token_to_id["[cls]"]
        eos = vocab.token_to_id["[eos]"]
        self.models = ModelSet(model_cfg, bos, eos, seed=config.seed)
        self.latent = LatentModels(vocab, self.models,
                                   composer_cfg or ComposerConfig(),
                                   independent=config.independent_latents)
        betas = (config.adam_beta1, config.adam_beta2)
        self.optimizers = {
            "theta": torch.optim.Adam(self._params("theta"), lr=config.warmup_lr, betas=betas),
            "phi": torch.optim.Adam(self._params("phi"), lr=config.warmup_lr, betas=betas),
            "psi": torch.optim.Adam(self._params("psi"), lr=config.warmup_lr, betas=betas),
            "gen": torch.optim.Adam(self._params("gen"), lr=config.warmup_lr, betas=betas),
        }
        self.rng = np.random.default_rng(config.seed)
        self.warmup_step_count = 0
        self.dual_step_count = 0
        self.warmup_done = False
        self._baseline = {"re1": 0.0, "re2": 0.0}

    def _modules(self, group):
        return {"theta": self.models.theta_modules,
                "phi": self.models.phi_modules,
                "psi": self.models.psi_modules,
                "gen": self.models.gen_modules}[group]()

    def _params(self, group):
        return [p for m in self._modules(group) for p in m.parameters()]

    def set_lr(self, groups, base_lr, step, total, ramp=0):
        cfg = self.config
        if cfg.schedule == "cosine" and total > 0:
            frac = min(step, total) / total
            lr = cfg.min_lr + 0.5 * (base_lr - cfg.min_lr) * (1 + math.cos(math.pi * frac))
        else:
            lr = base_lr
        if ramp > 0 and step < ramp:
            lr *= (step + 1) / ramp
        for g in groups:
            for pg in self.optimizers[g].param_groups:
                pg["lr"] = lr

    def clip_and_step(self, groups):
        for g in groups:
            torch.nn.utils.clip_grad_norm_(self._params(g), self.config.grad_clip)
            self.optimizers[g].step()

    def zero_grad(self, groups):
        for g in groups:
            self.optimizers[g].zero_grad(set_to_none=True)


def _grouped(encoder, head, groups, log=False):
    """Score many candidate groups in one encoder pass; returns per-group
    probability (or log-probability) vectors."""
    flat = [c for g in groups for c in g]
    logits = score_logits(encoder, head, flat)
    out, ofs = [], 0
    for g in groups:
        seg = logits[ofs:ofs + len(g)]
        out.append(torch.log_softmax(seg, dim=0) if log else torch.softmax(seg, dim=0))
        ofs += len(g)
    return out


def _comps(state, bundle, kind, cond=None):
    # Compositions are pure functions of (bundle, kind, cond); memoise them
    # on the bundle so repeated steps/probes skip token re-encoding. Lists
    # (pre-concatenated m > 1 conditioning) are unhashable and rare: bypass.
    key = None
    if cond is None or isinstance(cond, int):
        key = (kind, cond, state.latent.independent)
        cache = bundle.__dict__.setdefault("_comp_cache", {})
        if key in cache:
            return cache[key]
    out = _comps_build(state, bundle, kind, cond)
    if key is not None:
        cache[key] = out
    return out


def _comps_build(state, bundle, kind, cond):
    lat = state.latent
    if kind is Kind.PRIOR_ZP:
        return lat.compositions(kind, bundle.context, fragments=bundle.fragments)
    if kind is Kind.PRIOR_ZK:
        return lat.compositions(kind, bundle.context, fragments=bundle.fragments,
                                knowledge=bundle.knowledge, cond_zp=cond)
    if kind is Kind.POST_ZP:
        return lat.compositions(kind, bundle.context, fragments=bundle.fragments,
                                response=bundle.response)
    if kind is Kind.POST_ZK:
        return lat.compositions(kind, bundle.context, fragments=bundle.fragments,
                                knowledge=bundle.knowledge, response=bundle.response,
                                cond_zp=cond)
    if kind is Kind.AUX_ZP:
        return lat.compositions(kind, bundle.context, fragments=bundle.fragments,
                                knowledge=bundle.knowledge, response=bundle.response,
                                cond_zk=cond)
    raise ConfigError(f"unknown kind {kind}")


_HEADS = {
    Kind.PRIOR_ZP: ("encoder_prior", "head_prior_zp"),
    Kind.PRIOR_ZK: ("encoder_prior", "head_prior_zk"),
    Kind.POST_ZP: ("encoder_post", "head_post_zp"),
    Kind.POST_ZK: ("encoder_post", "head_post_zk"),
    Kind.AUX_ZP: ("encoder_aux", "head_aux"),
}


def _batch_dists(state, bundles, kind, conds=None, log=False):
    groups = [_comps(state, b, kind, None if conds is None else conds[i])
              for i, b in enumerate(bundles)]
    enc_name, head_name = _HEADS[kind]
    enc = getattr(state.models, enc_name)
    head = getattr(state.models, head_name)
    return _grouped(enc, head, groups, log=log)


# ---------------------------------------------------------------------------
# Warm-up
# ---------------------------------------------------------------------------


def warmup_step(batch, state) -> dict:
    """One MLE step pushing all five distributions toward the pseudo labels."""
    cfg = state.config
    state.set_lr(("theta", "phi", "psi"), cfg.warmup_lr,
                 state.warmup_step_count, cfg.warmup_steps)
    p_bars = [b.labels.p_bar for b in batch]
    k_bars = [b.labels.k_bar for b in batch]

    lp_prior_zp = _batch_dists(state, batch, Kind.PRIOR_ZP, log=True)
    lp_prior_zk = _batch_dists(state, batch, Kind.PRIOR_ZK, conds=p_bars, log=True)
    lp_post_zp = _batch_dists(state, batch, Kind.POST_ZP, log=True)
    lp_post_zk = _batch_dists(state, batch, Kind.POST_ZK, conds=p_bars, log=True)
    lp_aux = _batch_dists(state, batch, Kind.AUX_ZP, conds=k_bars, log=True)

    total = torch.zeros((), dtype=torch.float64)
    for i in range(len(batch)):
        total = total + (lp_prior_zp[i][p_bars[i]] + lp_prior_zk[i][k_bars[i]]
                         + lp_post_zp[i][p_bars[i]] + lp_post_zk[i][k_bars[i]]
                         + lp_aux[i][p_bars[i]])
    loss = -total / len(batch)
    state.zero_grad(("theta", "phi", "psi"))
    loss.backward()
    state.clip_and_step(("theta", "phi", "psi"))
    state.warmup_step_count += 1
    return {"loss": float(loss.detach())}


# ---------------------------------------------------------------------------
# ELBO
# ---------------------------------------------------------------------------


def elbo_kl_terms(q_zp, q_zk_rows, p_zp, p_zk_rows):
    """(E_q(Z^p) KL over Z^k rows, KL over Z^p)."""
    kl_zp = kl(q_zp, p_zp)
    row_kls = torch.stack([kl(q_zk_rows[i], p_zk_rows[i])
                           for i in range(q_zk_rows.shape[0])])
    kl_zk = (q_zp * row_kls).sum()
    return kl_zk, kl_zp


def elbo_from_tables(log_g_grid, q_zp, q_zk_rows, p_zp, p_zk_rows):
    """Exact ELBO given full tables; safe for zero posterior mass."""
    joint = q_zp.unsqueeze(1) * q_zk_rows
    recon = torch.where(joint > 0, joint * log_g_grid,
                        torch.zeros_like(joint)).sum()
    kl_zk, kl_zp = elbo_kl_terms(q_zp, q_zk_rows, p_zp, p_zk_rows)
    return recon - kl_zk - kl_zp


def elbo(bundle, state, mode="ENUMERATE"):
    """Evidence lower bound for one case; ENUMERATE takes exact expectations
    over the latent grid, SAMPLE draws one latent pair for reconstruction."""
    lat = state.latent
    q_zp = _batch_dists(state, [bundle], Kind.POST_ZP)[0]
    q_zk_rows = torch.stack([
        _batch_dists(state, [bundle], Kind.POST_ZK, conds=[i])[0]
        for i in range(len(bundle.fragments))])
    p_zp = _batch_dists(state, [bundle], Kind.PRIOR_ZP)[0]
    p_zk_rows = torch.stack([
        _batch_dists(state, [bundle], Kind.PRIOR_ZK, conds=[i])[0]
        for i in range(len(bundle.fragments))])
    if mode == "ENUMERATE":
        log_g = lat.generator_grid(bundle.context, bundle.response,
                                   bundle.fragments, bundle.knowledge)
        return elbo_from_tables(log_g, q_zp, q_zk_rows, p_zp, p_zk_rows)
    if mode != "SAMPLE":
        raise ConfigError(f"unknown elbo mode {mode!r}")
    zp = sample(q_zp, state.rng)
    zk = sample(q_zk_rows[zp], state.rng)
    ids = bundle.gen_ids(state.vocab)
    recon = state.models.generator.log_likelihood(
        ids["resp"], ids["ctx"], ids["frags"][zp], ids["cands"][zk])
    kl_zk, kl_zp = elbo_kl_terms(q_zp, q_zk_rows, p_zp, p_zk_rows)
    return recon - kl_zk - kl_zp


# ---------------------------------------------------------------------------
# Dual learning, distillation, prior update
# ---------------------------------------------------------------------------


def _require_warmup(state):
    if not state.warmup_done:
        raise StateError("dual-phase step called before warm-up completed")


def dual_step(batch, state) -> dict:
    """One closed-loop policy-gradient step: the posterior knowledge model
    is rewarded by the inverse model recovering the sampled fragment, and
    the inverse model by the posterior assigning mass to the pseudo
    knowledge label."""
    _require_warmup(state)
    cfg = state.config
    state.set_lr(("phi",), cfg.dual_lr, state.dual_step_count, cfg.dual_steps)
    state.set_lr(("psi",), cfg.dual_lr, state.dual_step_count, cfg.dual_steps,
                 ramp=cfg.dual_ramp)

    with torch.no_grad():
        q_zp_list = _batch_dists(state, batch, Kind.POST_ZP)
    zp_tilde = [sample(q, state.rng) for q in q_zp_list]

    lq_zk_list = _batch_dists(state, batch, Kind.POST_ZK, conds=zp_tilde, log=True)
    zk_tilde = [sample(torch.exp(lq.detach()), state.rng) for lq in lq_zk_list]

    with torch.no_grad():
        aux_list = _batch_dists(state, batch, Kind.AUX_ZP, conds=zk_tilde)
    re1 = [float(aux_list[i][zp_tilde[i]]) for i in range(len(batch))]

    k_bars = [b.labels.k_bar for b in batch]
    laux_list = _batch_dists(state, batch, Kind.AUX_ZP, conds=k_bars, log=True)
    zp_tilde2 = [sample(torch.exp(la.detach()), state.rng) for la in laux_list]

    with torch.no_grad():
        q_zk2_list = _batch_dists(state, batch, Kind.POST_ZK, conds=zp_tilde2)
    re2 = [float(q_zk2_list[i][k_bars[i]]) for i in range(len(batch))]

    b1 = state._baseline["re1"] if cfg.reward_baseline else 0.0
    b2 = state._baseline["re2"] if cfg.reward_baseline else 0.0
    objective = torch.zeros((), dtype=torch.float64)
    for i in range(len(batch)):
        objective = objective + lq_zk_list[i][zk_tilde[i]] * (re1[i] - b1)
        objective = objective + laux_list[i][zp_tilde2[i]] * (re2[i] - b2)
    loss = -objective / len(batch)

    state.zero_grad(("phi", "psi"))
    loss.backward()
    state.clip_and_step(("phi", "psi"))
    if cfg.reward_baseline:
        m = 0.9
        state._baseline["re1"] = m * state._baseline["re1"] + (1 - m) * float(np.mean(re1))
        state._baseline["re2"] = m * state._baseline["re2"] + (1 - m) * float(np.mean(re2))
    return {"re1": float(np.mean(re1)), "re2": float(np.mean(re2)),
            "loss": float(loss.detach())}


def distill_step(batch, state) -> dict:
    """Transfer the (frozen) inverse model's tempered fragment distribution
    into the posterior memory model, plus a pseudo-label likelihood term."""
    _require_warmup(state)
    cfg = state.config
    lr = cfg.distill_lr if cfg.distill_lr is not None else cfg.dual_lr
    state.set_lr(("phi",), lr, state.dual_step_count, cfg.dual_steps,
                 ramp=cfg.dual_ramp)

    k_bars = [b.labels.k_bar for b in batch]
    with torch.no_grad():
        teachers = [temper(a, cfg.temperature)
                    for a in _batch_dists(state, batch, Kind.AUX_ZP, conds=k_bars)]
    students = _batch_dists(state, batch, Kind.POST_ZP)

    objective = torch.zeros((), dtype=torch.float64)
    for i, b in enumerate(batch):
        student_t = temper(students[i], cfg.temperature)
        objective = objective - kl(teachers[i], student_t)
        objective = objective + cfg.alpha * torch.log(students[i][b.labels.p_bar])
    loss = -objective / len(batch)
    state.zero_grad(("phi",))
    loss.backward()
    state.clip_and_step(("phi",))
    return {"loss": float(loss.detach())}


def theta_step(batch, state, mode=None) -> dict:
    """Ascent on the ELBO's prior-side KL terms (posteriors frozen as the
    sampler) and on the reconstruction term for the generator."""
    _require_warmup(state)
    cfg = state.config
    mode = mode or cfg.elbo_mode
    lr = cfg.theta_lr if cfg.theta_lr is not None else cfg.dual_lr
    state.set_lr(("theta", "gen"), lr, state.dual_step_count, cfg.dual_steps)

    n_frags = [len(b.fragments) for b in batch]
    rep = [b for b, n in zip(batch, n_frags) for _ in range(n)]
    rows = [i for n in n_frags for i in range(n)]
    with torch.no_grad():
        q_zp_list = _batch_dists(state, batch, Kind.POST_ZP)
        q_zk_flat = _batch_dists(state, rep, Kind.POST_ZK, conds=rows)
    p_zp_list = _batch_dists(state, batch, Kind.PRIOR_ZP)
    p_zk_flat = _batch_dists(state, rep, Kind.PRIOR_ZK, conds=rows)

    objective = torch.zeros((), dtype=torch.float64)
    ofs = 0
    for j, bundle in enumerate(batch):
        n_frag = n_frags[j]
        q_zp, p_zp = q_zp_list[j], p_zp_list[j]
        q_zk_rows = torch.stack(q_zk_flat[ofs:ofs + n_frag])
        p_zk_rows = torch.stack(p_zk_flat[ofs:ofs + n_frag])
        ofs += n_frag
        ids = bundle.gen_ids(state.vocab)
        if mode == "ENUMERATE":
            log_g = state.latent.generator_grid(
                bundle.context, bundle.response, bundle.fragments, bundle.knowledge)
            joint = q_zp.unsqueeze(1) * q_zk_rows
            recon = torch.where(joint > 0, joint * log_g,
                                torch.zeros_like(joint)).sum()
        else:
            zp = sample(q_zp, state.rng)
            zk = sample(q_zk_rows[zp], state.rng)
            recon = state.models.generator.log_likelihood(
                ids["resp"], ids["ctx"], ids["frags"][zp], ids["cands"][zk],
                with_eos=True)
        kl_zk, kl_zp = elbo_kl_terms(q_zp, q_zk_rows, p_zp, p_zk_rows)
        objective = objective + recon - kl_zk - kl_zp
    loss = -objective / len(batch)
    state.zero_grad(("theta", "gen"))
    loss.backward()
    state.clip_and_step(("theta", "gen"))
    return {"elbo": float(-loss.detach())}


# ---------------------------------------------------------------------------
# Probes and the outer loop
# ---------------------------------------------------------------------------


def probe_recall(state, bundles, truth=None, k=1) -> dict:
    """Recall@k of all five distributions against ground truth (or pseudo
    labels), conditioning indices fixed to the reference assignment."""
    def ref(b):
        if truth is not None:
            return truth[b.case.id]
        return (b.labels.p_bar, b.labels.k_bar)

    rank = {name: [] for name in ("prior_zp", "prior_zk", "post_zp",
                                  "post_zk", "aux_zp")}
    with torch.no_grad():
        zps = [ref(b)[0] for b in bundles]
        zks = [ref(b)[1] for b in bundles]
        dists = {
            "prior_zp": _batch_dists(state, bundles, Kind.PRIOR_ZP),
            "prior_zk": _batch_dists(state, bundles, Kind.PRIOR_ZK, conds=zps),
            "post_zp": _batch_dists(state, bundles, Kind.POST_ZP),
            "post_zk": _batch_dists(state, bundles, Kind.POST_ZK, conds=zps),
            "aux_zp": _batch_dists(state, bundles, Kind.AUX_ZP, conds=zks),
        }
    for i, b in enumerate(bundles):
        zp_true, zk_true = ref(b)
        for name in rank:
            probs = dists[name][i].numpy()
            true = zk_true if name.endswith("_zk") else zp_true
            rank[name].append((probs, true))
    return {name: recall_at_k(pairs, k) for name, pairs in rank.items()}


def _log_record(records, sink, **fields):
    rec = {k: fields[k] for k in sorted(fields)}
    records.append(rec)
    if sink is not None:
        sink.write(json.dumps(rec, sort_keys=True) + "\n")


def train(config, cases, repo, model_cfg=None, vocab=None, truth=None,
          log_path=None, composer_cfg=None, state=None,
          checkpoint_path=None, checkpoint_every=None):
    """Run warm-up followed by the dual-learning loop (dual, prior, distill
    updates per iteration) with periodic Recall@1 probes. Fully seeded."""
    config.validate()
    torch.set_num_threads(1)
    if vocab is None:
        from .corpus import Vocabulary
        vocab = Vocabulary.from_corpus(cases, repo)
    if model_cfg is None:
        model_cfg = ModelConfig(vocab_size=len(vocab))
    bundles = make_bundles(cases, repo)
    if state is None:
        state = TrainState(config, model_cfg, vocab, composer_cfg)

    n_probe = min(config.probe_cases, len(bundles))
    probe_bundles = bundles[:n_probe]
    records = []
    sink = open(log_path, "w", encoding="utf-8") if log_path else None

    def draw_batch():
        idx = state.rng.choice(len(bundles),
                               size=min(config.batch_size, len(bundles)),
                               replace=False)
        return [bundles[i] for i in idx]

    def maybe_checkpoint(step):
        if checkpoint_path and checkpoint_every and step % checkpoint_every == 0:
            save_train_state(checkpoint_path, state)

    try:
        while state.warmup_step_count < config.warmup_steps:
            out = warmup_step(draw_batch(), state)
            if state.warmup_step_count % config.probe_every == 0 \
                    or state.warmup_step_count == config.warmup_steps:
                rec = probe_recall(state, probe_bundles, truth)
                _log_record(records, sink, step=state.warmup_step_count,
                            phase="warmup", loss=out["loss"], elbo=None,
                            re1=None, re2=None, recall_probe=rec)
            else:
                _log_record(records, sink, step=state.warmup_step_count,
                            phase="warmup", loss=out["loss"], elbo=None,
                            re1=None, re2=None, recall_probe=None)
            maybe_checkpoint(state.warmup_step_count)
        state.warmup_done = True

        best, stale = -1.0, 0
        while state.dual_step_count < config.dual_steps:
            batch = draw_batch()
            d_out = dual_step(batch, state)
            t_out = theta_step(batch, state)
            s_out = distill_step(batch, state)
            state.dual_step_count += 1
            step = state.dual_step_count
            if step % config.probe_every == 0 or step == config.dual_steps:
                rec = probe_recall(state, probe_bundles, truth)
                _log_record(records, sink, step=step, phase="dual",
                            loss=s_out["loss"], elbo=t_out["elbo"],
                            re1=d_out["re1"], re2=d_out["re2"], recall_probe=rec)
                score = (rec["post_zk"] + rec["aux_zp"] + rec["post_zp"]) / 3
                if score > best + 1e-12:
                    best, stale = score, 0
                else:
                    stale += 1
                    if stale >= config.early_stop_patience:
                        break
            else:
                _log_record(records, sink, step=step, phase="dual",
                            loss=s_out["loss"], elbo=t_out["elbo"],
                            re1=d_out["re1"], re2=d_out["re2"], recall_probe=None)
            maybe_checkpoint(step)
    finally:
        if sink is not None:
            sink.close()
    return state, records


# ---------------------------------------------------------------------------
# Resumable checkpoints
# ---------------------------------------------------------------------------


def save_train_state(path, state: TrainState):
    payload = {
        "version": 1,
        "config": asdict(state.config),
        "model_config": asdict(state.model_cfg),
        "vocab_tokens": state.vocab.id_to_token,
        "model_state": state.models.state_dict(),
        "optim_state": {k: o.state_dict() for k, o in state.optimizers.items()},
        "rng_state": state.rng.bit_generator.state,
        "warmup_step_count": state.warmup_step_count,
        "dual_step_count": state.dual_step_count,
        "warmup_done": state.warmup_done,
        "baseline": state._baseline,
    }
    torch.save(payload, path)


def load_train_state(path) -> TrainState:
    if not os.path.exists(path):
        raise DataError(f"training checkpoint not found: {path}")
    payload = torch.load(path, weights_only=False)
    if payload.get("version") != 1:
        raise ConfigError("unsupported training checkpoint version")
    from .corpus import Vocabulary

    config = TrainingConfig(**payload["config"])
    model_cfg = ModelConfig(**payload["model_config"])
    vocab = Vocabulary([])
    vocab.id_to_token = list(payload["vocab_tokens"])
    vocab.token_to_id = {t: i for i, t in enumerate(vocab.id_to_token)}
    state = TrainState(config, model_cfg, vocab)
    state.models.load_state_dict(payload["model_state"])
    for k, o in state.optimizers.items():
        o.load_state_dict(payload["optim_state"][k])
    state.rng.bit_generator.state = payload["rng_state"]
    state.warmup_step_count = payload["warmup_step_count"]
    state.dual_step_count = payload["dual_step_count"]
    state.warmup_done = payload["warmup_done"]
    state._baseline = payload["baseline"]
    return state
