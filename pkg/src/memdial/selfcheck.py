"""Release-gate oracle suite: ELBO bound via exact enumeration, gradient
checks against central finite differences, policy-gradient unbiasedness on
tiny supports, and metric fixtures. Used by the `selfcheck` CLI subcommand
and by the acceptance tests."""

from __future__ import annotations

import math
import time

import numpy as np
import torch

from .composer import Kind
from .corpus import DialogueCase, MemorySet, PseudoLabels, Vocabulary
from .latent import kl, temper
from .metrics import bleu, distinct, rouge, unigram_f1
from .neural import ModelConfig, get_flat_params, gradient, set_flat_params
from .training import (CaseBundle, TrainState, TrainingConfig, dual_step,
                       distill_step, elbo, elbo_from_tables, warmup_step)


# ---------------------------------------------------------------------------
# Tiny random instances
# ---------------------------------------------------------------------------


def make_tiny_state(seed, vocab_size=20, d=8, hidden=12):
    tokens = [f"t{i}" for i in range(vocab_size)]
    vocab = Vocabulary(tokens)
    cfg = TrainingConfig(warmup_steps=10, dual_steps=10, batch_size=2,
                         probe_every=5, probe_cases=2, seed=seed)
    model_cfg = ModelConfig(vocab_size=len(vocab), d=d, encoder_hidden=hidden,
                            head_hidden=hidden, gen_hidden=hidden)
    return TrainState(cfg, model_cfg, vocab)


def random_tiny_bundle(rng, n_p=3, n_k=3, vocab_size=20, max_len=4):
    def seq(lo=1):
        n = int(rng.integers(lo, max_len + 1))
        return [f"t{int(i)}" for i in rng.integers(0, vocab_size, size=n)]

    case = DialogueCase(
        id="tiny", user_key="u", context=[seq(), seq()],
        knowledge=[seq() for _ in range(n_k)], response=seq(2))
    mem = MemorySet([seq() for _ in range(n_p)])
    labels = PseudoLabels(k_bar=int(rng.integers(n_k)), p_bar=int(rng.integers(n_p)))
    return CaseBundle(case, mem, labels)


def exact_log_marginal(bundle, state) -> float:
    """log sum over the latent grid of g * p(zk|zp) * p(zp), computed by a
    plain numpy log-sum-exp independent of the ELBO code path."""
    lat = state.latent
    with torch.no_grad():
        p_zp = lat.prior_zp(bundle.context, bundle.fragments).numpy()
        rows = np.stack([
            lat.prior_zk(bundle.context, i, bundle.fragments, bundle.knowledge).numpy()
            for i in range(len(bundle.fragments))])
        log_g = lat.generator_grid(bundle.context, bundle.response,
                                   bundle.fragments, bundle.knowledge).numpy()
    log_joint = log_g + np.log(rows) + np.log(p_zp)[:, None]
    m = log_joint.max()
    return float(m + np.log(np.exp(log_joint - m).sum()))


def true_posterior_tables(bundle, state):
    """Exact posterior of (Z^p, Z^k) given R, factorized as q(zp), q(zk|zp)."""
    lat = state.latent
    with torch.no_grad():
        p_zp = lat.prior_zp(bundle.context, bundle.fragments).numpy()
        rows = np.stack([
            lat.prior_zk(bundle.context, i, bundle.fragments, bundle.knowledge).numpy()
            for i in range(len(bundle.fragments))])
        log_g = lat.generator_grid(bundle.context, bundle.response,
                                   bundle.fragments, bundle.knowledge).numpy()
    log_joint = log_g + np.log(rows) + np.log(p_zp)[:, None]
    joint = np.exp(log_joint - log_joint.max())
    joint /= joint.sum()
    q_zp = joint.sum(axis=1)
    q_zk = joint / q_zp[:, None]
    return q_zp, q_zk


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------


def finite_difference_grad(objective, modules, coords, h=1e-5):
    """Central differences of a scalar objective at selected flat-parameter
    coordinates. Independent of autograd."""
    base = get_flat_params(modules)
    out = np.zeros(len(coords))
    for n, c in enumerate(coords):
        for sign in (+1.0, -1.0):
            vec = base.copy()
            vec[c] += sign * h
            set_flat_params(modules, vec)
            val = float(objective().detach())
            out[n] += sign * val / (2 * h)
    set_flat_params(modules, base)
    return out


def max_fd_error(objective, modules, rng, n_coords=40, h=1e-5):
    """Max relative error between autograd and central differences over a
    random coordinate subsample. The denominator is floored at 1e-4 so that
    coordinates with (numerically) vanishing gradient do not dominate."""
    auto = gradient(objective, modules)
    coords = rng.choice(len(auto), size=min(n_coords, len(auto)), replace=False)
    fd = finite_difference_grad(objective, modules, coords, h=h)
    rel = np.abs(auto[coords] - fd) / np.maximum(
        np.maximum(np.abs(fd), np.abs(auto[coords])), 1e-4)
    return float(rel.max())


# ---------------------------------------------------------------------------
# Individual checks
# ---------------------------------------------------------------------------


def check_elbo_bound(n_instances=200, seed=0, tol=1e-9):
    rng = np.random.default_rng(seed)
    worst_slack, worst_gap = math.inf, 0.0
    for i in range(n_instances):
        state = make_tiny_state(int(rng.integers(1 << 31)))
        bundle = random_tiny_bundle(rng, n_p=int(rng.integers(1, 5)),
                                    n_k=int(rng.integers(1, 5)))
        with torch.no_grad():
            bound = float(elbo(bundle, state, mode="ENUMERATE"))
        exact = exact_log_marginal(bundle, state)
        worst_slack = min(worst_slack, exact - bound)
        q_zp, q_zk = true_posterior_tables(bundle, state)
        lat = state.latent
        with torch.no_grad():
            p_zp = lat.prior_zp(bundle.context, bundle.fragments)
            p_rows = torch.stack([
                lat.prior_zk(bundle.context, j, bundle.fragments, bundle.knowledge)
                for j in range(len(bundle.fragments))])
            log_g = lat.generator_grid(bundle.context, bundle.response,
                                       bundle.fragments, bundle.knowledge)
            tight = float(elbo_from_tables(
                log_g, torch.tensor(q_zp), torch.tensor(q_zk), p_zp, p_rows))
        worst_gap = max(worst_gap, abs(exact - tight))
    ok = worst_slack >= -tol and worst_gap < tol
    return ok, f"min slack {worst_slack:.3e}, max posterior gap {worst_gap:.3e}"


def _warmup_objective(state, bundle):
    def obj():
        lat = state.latent
        lp = lat.prior_zp(bundle.context, bundle.fragments, log=True)[bundle.labels.p_bar]
        lp = lp + lat.prior_zk(bundle.context, bundle.labels.p_bar, bundle.fragments,
                               bundle.knowledge, log=True)[bundle.labels.k_bar]
        lp = lp + lat.post_zp(bundle.context, bundle.response, bundle.fragments,
                              log=True)[bundle.labels.p_bar]
        lp = lp + lat.post_zk(bundle.context, bundle.response, bundle.labels.p_bar,
                              bundle.fragments, bundle.knowledge,
                              log=True)[bundle.labels.k_bar]
        lp = lp + lat.aux_zp(bundle.context, bundle.response, bundle.labels.k_bar,
                             bundle.fragments, bundle.knowledge,
                             log=True)[bundle.labels.p_bar]
        return -lp
    return obj


def _distill_objective(state, bundle):
    cfg = state.config

    def obj():
        lat = state.latent
        with torch.no_grad():
            teacher = temper(lat.aux_zp(bundle.context, bundle.response,
                                        bundle.labels.k_bar, bundle.fragments,
                                        bundle.knowledge), cfg.temperature)
        student = lat.post_zp(bundle.context, bundle.response, bundle.fragments)
        val = -kl(teacher, temper(student, cfg.temperature))
        val = val + cfg.alpha * torch.log(student[bundle.labels.p_bar])
        return -val
    return obj


def check_gradients(n_seeds=10, tol=1e-4):
    worst = 0.0
    for s in range(n_seeds):
        rng = np.random.default_rng(1000 + s)
        state = make_tiny_state(s)
        bundle = random_tiny_bundle(rng)
        lat = state.latent
        phi = state.models.phi_modules()
        ids = bundle.gen_ids(state.vocab)

        all_mods = state.models.all_modules()
        worst = max(worst, max_fd_error(_warmup_objective(state, bundle), all_mods, rng))
        worst = max(worst, max_fd_error(
            lambda: -elbo(bundle, state, mode="ENUMERATE"), all_mods, rng))
        worst = max(worst, max_fd_error(_distill_objective(state, bundle), phi, rng))
        # policy-gradient log-prob factors
        worst = max(worst, max_fd_error(
            lambda: -lat.post_zk(bundle.context, bundle.response, 0,
                                 bundle.fragments, bundle.knowledge,
                                 log=True)[bundle.labels.k_bar],
            phi, rng))
        worst = max(worst, max_fd_error(
            lambda: -lat.aux_zp(bundle.context, bundle.response,
                                bundle.labels.k_bar, bundle.fragments,
                                bundle.knowledge, log=True)[0],
            state.models.psi_modules(), rng))
        worst = max(worst, max_fd_error(
            lambda: -state.models.generator.log_likelihood(
                ids["resp"], ids["ctx"], ids["frags"][0], ids["cands"][0]),
            state.models.gen_modules(), rng))
    return worst < tol, f"max relative error {worst:.3e}"


def check_reinforce_unbiasedness(n_seeds=5, tol=1e-9):
    worst = 0.0
    for s in range(n_seeds):
        rng = np.random.default_rng(2000 + s)
        state = make_tiny_state(s, vocab_size=15)
        bundle = random_tiny_bundle(rng, n_p=3, n_k=3, vocab_size=15)
        lat = state.latent
        with torch.no_grad():
            q_zp = lat.post_zp(bundle.context, bundle.response, bundle.fragments)
            rewards = torch.stack([
                lat.aux_zp(bundle.context, bundle.response, zk,
                           bundle.fragments, bundle.knowledge)
                for zk in range(len(bundle.knowledge))])  # (zk, zp)
        phi = state.models.phi_modules()

        def rows():
            return [lat.post_zk(bundle.context, bundle.response, zp,
                                bundle.fragments, bundle.knowledge, log=True)
                    for zp in range(len(bundle.fragments))]

        def exact():
            total = torch.zeros((), dtype=torch.float64)
            for zp, lrow in enumerate(rows()):
                for zk in range(len(bundle.knowledge)):
                    total = total + q_zp[zp] * torch.exp(lrow[zk]) * rewards[zk, zp]
            return total

        def estimator():
            total = torch.zeros((), dtype=torch.float64)
            for zp, lrow in enumerate(rows()):
                w = torch.exp(lrow.detach())
                for zk in range(len(bundle.knowledge)):
                    total = total + q_zp[zp] * w[zk] * lrow[zk] * rewards[zk, zp]
            return total

        diff = np.abs(gradient(exact, phi) - gradient(estimator, phi)).max()
        worst = max(worst, float(diff))
    return worst < tol, f"max gradient discrepancy {worst:.3e}"


def check_metric_fixtures(tol=1e-6):
    checks = [
        abs(unigram_f1("a b c".split(), "a b c".split()) - 1.0),
        abs(unigram_f1("a b".split(), "c d".split()) - 0.0),
        abs(unigram_f1("a b c".split(), "a b d".split()) - 2 / 3),
        abs(bleu("a b c d".split(), "a b c d".split())[4] - 1.0),
        abs(bleu("a b".split(), "c d".split())[1] - 0.0),
        abs(distinct(["a a a a".split()], 1) - 0.25),
        abs(rouge("a b c".split(), "a b c".split())["RL"] - 1.0),
        abs(float(kl(torch.tensor([1.0, 0.0]), torch.tensor([0.5, 0.5])))
            - math.log(2)),
        float(np.abs(temper(torch.tensor([0.8, 0.2]), 0.5).numpy()
                     - np.array([0.64, 0.04]) / 0.68).max()),
    ]
    worst = max(checks)
    return worst < tol, f"max fixture error {worst:.3e}"


def check_training_steps_run(seed=0):
    """Smoke: one warm-up, dual, and distill step leave all losses finite."""
    rng = np.random.default_rng(seed)
    state = make_tiny_state(seed)
    batch = [random_tiny_bundle(rng) for _ in range(2)]
    w = warmup_step(batch, state)
    state.warmup_done = True
    d = dual_step(batch, state)
    s = distill_step(batch, state)
    vals = [w["loss"], d["re1"], d["re2"], s["loss"]]
    ok = all(math.isfinite(v) for v in vals)
    return ok, f"losses {['%.4f' % v for v in vals]}"


ALL_CHECKS = [
    ("elbo_bound", lambda: check_elbo_bound(n_instances=50)),
    ("gradient_exactness", lambda: check_gradients(n_seeds=3)),
    ("reinforce_unbiasedness", check_reinforce_unbiasedness),
    ("metric_fixtures", check_metric_fixtures),
    ("training_steps", check_training_steps_run),
]


def run_selfcheck(stream=None) -> bool:
    all_ok = True
    for name, fn in ALL_CHECKS:
        t0 = time.time()
        try:
            ok, detail = fn()
        except Exception as e:  # a crash is a failure, not an abort
            ok, detail = False, f"raised {type(e).__name__}: {e}"
        all_ok &= ok
        if stream is not None:
            status = "PASS" if ok else "FAIL"
            stream.write(f"[{status}] {name}: {detail} ({time.time() - t0:.1f}s)\n")
    return all_ok
