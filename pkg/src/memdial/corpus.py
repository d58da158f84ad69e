"""Corpus handling: loading, validation, filtering, pseudo labels, and the
synthetic benchmark generator with planted ground truth.

File formats (all UTF-8, newline-delimited JSON):
  corpus:  {"id": str, "user": str, "context": [str, ...],
            "knowledge": [str, ...], "response": str}
  memory:  {"user": str, "memory": [str, ...]}
  truth:   {"id": str, "zp": int, "zk": int}
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigError,
    CorpusParseError,
    DataError,
    EmptyCorpusError,
    MissingUserError,
)

_TOKEN_RE = re.compile(r"[a-z0-9_']+")

# Special token roles, fixed ids at the bottom of every vocabulary.
PAD, CLS, SEP, EOS, UNK = "[pad]", "[cls]", "[sep]", "[eos]", "[unk]"
SPECIAL_TOKENS = (PAD, CLS, SEP, EOS, UNK)


def tokenize(text: str) -> list[str]:
    """Lowercase, strip punctuation, split on whitespace runs."""
    return _TOKEN_RE.findall(text.lower())


def detokenize(tokens: list[str]) -> str:
    return " ".join(tokens)


def hash_user_key(account_name: str, algorithm: str = "sha256") -> str:
    """One-way digest of an account name (>= 64-bit)."""
    h = hashlib.new(algorithm)
    h.update(account_name.encode("utf-8"))
    return h.hexdigest()[:16]


class Vocabulary:
    """Token <-> id map with fixed special tokens at the front."""

    def __init__(self, tokens):
        self.id_to_token = list(SPECIAL_TOKENS) + sorted(set(tokens) - set(SPECIAL_TOKENS))
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}

    def __len__(self):
        return len(self.id_to_token)

    def __contains__(self, token):
        return token in self.token_to_id

    def encode(self, tokens, strict=False):
        from .errors import VocabError

        ids = []
        unk = self.token_to_id[UNK]
        for t in tokens:
            i = self.token_to_id.get(t)
            if i is None:
                if strict:
                    raise VocabError(f"token {t!r} not in vocabulary")
                i = unk
            ids.append(i)
        return ids

    def decode(self, ids):
        return [self.id_to_token[i] for i in ids]

    @classmethod
    def from_corpus(cls, cases, repo=None):
        tokens = set()
        for case in cases:
            for utt in case.context:
                tokens.update(utt)
            for k in case.knowledge:
                tokens.update(k)
            tokens.update(case.response)
        if repo is not None:
            for frags in repo.entries.values():
                for f in frags:
                    tokens.update(f)
        return cls(tokens)


@dataclass
class DialogueCase:
    """One training/eval example: context, knowledge candidates, response."""

    id: str
    user_key: str
    context: list[list[str]]  # one token list per utterance
    knowledge: list[list[str]]
    response: list[str]

    def validate(self):
        if not self.knowledge:
            raise DataError(f"case {self.id}: empty knowledge candidate set")
        if not self.context or any(not u for u in self.context):
            raise DataError(f"case {self.id}: empty context or utterance")
        if not self.response:
            raise DataError(f"case {self.id}: empty response")
        if any(not k for k in self.knowledge):
            raise DataError(f"case {self.id}: empty knowledge candidate")
        return self


@dataclass
class MemoryRepository:
    """Map from hashed user key to that user's memory fragments."""

    entries: dict[str, list[list[str]]] = field(default_factory=dict)

    def users(self):
        return list(self.entries.keys())


@dataclass
class MemorySet:
    """Ordered fragments for one case's user."""

    fragments: list[list[str]]

    def __len__(self):
        return len(self.fragments)


@dataclass
class PseudoLabels:
    k_bar: int
    p_bar: int


# ---------------------------------------------------------------------------
# JSONL I/O
# ---------------------------------------------------------------------------

_CORPUS_FIELDS = ("id", "user", "context", "knowledge", "response")


def _parse_line(line, line_no, path):
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as e:
        raise CorpusParseError(f"invalid JSON ({e.msg})", line_no, path) from e
    if not isinstance(obj, dict):
        raise CorpusParseError("record is not an object", line_no, path)
    return obj


def load_corpus(path) -> list[DialogueCase]:
    """Read a corpus JSONL file, tokenizing every text field."""
    cases = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            obj = _parse_line(line, line_no, path)
            for f in _CORPUS_FIELDS:
                if f not in obj:
                    raise CorpusParseError(f"missing field {f!r}", line_no, path)
            case = DialogueCase(
                id=str(obj["id"]),
                user_key=str(obj["user"]),
                context=[tokenize(u) for u in obj["context"]],
                knowledge=[tokenize(k) for k in obj["knowledge"]],
                response=tokenize(obj["response"]),
            )
            try:
                case.validate()
            except DataError as e:
                raise CorpusParseError(str(e), line_no, path) from e
            cases.append(case)
    if not cases:
        raise EmptyCorpusError(f"{path}: no cases")
    return cases


def write_corpus(cases, path):
    """Write cases in canonical form (one JSON object per line, fixed key order)."""
    with open(path, "w", encoding="utf-8") as fh:
        for case in cases:
            obj = {
                "id": case.id,
                "user": case.user_key,
                "context": [detokenize(u) for u in case.context],
                "knowledge": [detokenize(k) for k in case.knowledge],
                "response": detokenize(case.response),
            }
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


def load_memory(path) -> MemoryRepository:
    entries = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            obj = _parse_line(line, line_no, path)
            for f in ("user", "memory"):
                if f not in obj:
                    raise CorpusParseError(f"missing field {f!r}", line_no, path)
            entries[str(obj["user"])] = [tokenize(m) for m in obj["memory"]]
    return MemoryRepository(entries)


def write_memory(repo, path):
    with open(path, "w", encoding="utf-8") as fh:
        for user, frags in repo.entries.items():
            obj = {"user": user, "memory": [detokenize(f) for f in frags]}
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


def load_truth(path) -> dict[str, tuple[int, int]]:
    truth = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            obj = _parse_line(line, line_no, path)
            for f in ("id", "zp", "zk"):
                if f not in obj:
                    raise CorpusParseError(f"missing field {f!r}", line_no, path)
            truth[str(obj["id"])] = (int(obj["zp"]), int(obj["zk"]))
    return truth


def write_truth(truth, path):
    with open(path, "w", encoding="utf-8") as fh:
        for case_id, (zp, zk) in truth.items():
            fh.write(json.dumps({"id": case_id, "zp": zp, "zk": zk}) + "\n")


# ---------------------------------------------------------------------------
# Filtering / retrieval / pseudo labels
# ---------------------------------------------------------------------------


def filter_repository(repo, min_fragments=5, min_len=4, max_len=128) -> MemoryRepository:
    """Drop out-of-range fragments, then drop users left with too few.

    Length filter runs before the count filter, so a user can be dropped
    because filtering took them below the threshold.
    """
    out = {}
    for user, frags in repo.entries.items():
        kept = [f for f in frags if min_len <= len(f) <= max_len]
        if len(kept) >= min_fragments:
            out[user] = kept
    return MemoryRepository(out)


def retrieve_memory(repo, user_key) -> MemorySet:
    if user_key not in repo.entries:
        raise MissingUserError(f"user {user_key!r} not in memory repository")
    return MemorySet(list(repo.entries[user_key]))


def pseudo_labels(case, mem, sim=None) -> PseudoLabels:
    """Tag the knowledge candidate and memory fragment most similar to the
    response (ties -> lowest index). Default similarity is unigram F1."""
    if sim is None:
        from .metrics import unigram_f1

        sim = unigram_f1
    k_scores = [sim(k, case.response) for k in case.knowledge]
    p_scores = [sim(p, case.response) for p in mem.fragments]
    return PseudoLabels(
        k_bar=int(np.argmax(k_scores)),
        p_bar=int(np.argmax(p_scores)),
    )


# ---------------------------------------------------------------------------
# Synthetic benchmark with planted ground truth
# ---------------------------------------------------------------------------

# Token prefixes used by the generator. Cue tokens appear once in a context
# and once in the targeted memory fragment; topic markers tie fragments and
# knowledge candidates to rows/columns of the planted conditional table.
CUE_PREFIX = "cue"
MEM_TOPIC_PREFIX = "pm"
KNOW_TOPIC_PREFIX = "km"
FILLER_PREFIX = "w"


@dataclass
class SyntheticSpec:
    num_users: int
    cases_per_user: int
    num_fragments: int  # |P|, memory fragments per user
    num_candidates: int  # |K|, knowledge candidates per case
    vocab_size: int
    dependency_strength: float  # planted mass on the mapped knowledge topic
    seed: int
    # Probability that each informative token (context cue, response topic
    # marker) is omitted. With some dropout no single view identifies the
    # selection on its own, so conditioning on the other latent carries
    # real information and pseudo labels are genuinely weak supervision.
    marker_dropout: float = 0.3
    # Separate dropout for the context cue; defaults to marker_dropout.
    # An asymmetric setting (reliable response marker, unreliable cue)
    # makes the knowledge-side pseudo label more accurate than the
    # memory-side one, which is the regime where cross-model consistency
    # has information to propagate back to the memory selectors.
    cue_dropout: float | None = None
    # Filler-token count range per memory fragment. Long fragments create
    # spurious lexical overlap with responses, which degrades the
    # memory-side pseudo label while leaving the marker routes (cue ->
    # fragment, fragment marker -> candidate) fully learnable. That gap
    # between labeler accuracy and achievable accuracy is the headroom
    # the dual phase recovers.
    fragment_fillers: tuple[int, int] = (1, 3)

    def validate(self):
        for name in ("num_users", "cases_per_user", "num_fragments",
                     "num_candidates", "vocab_size"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"synthetic spec: {name} must be positive")
        if self.num_fragments < 5:
            raise ConfigError(
                "synthetic spec: num_fragments must be >= 5 so every "
                "generated user survives repository filtering")
        if not 0.0 <= self.dependency_strength <= 1.0:
            raise ConfigError("synthetic spec: dependency_strength must be in [0, 1]")
        if not 0.0 <= self.marker_dropout < 1.0:
            raise ConfigError("synthetic spec: marker_dropout must be in [0, 1)")
        if self.cue_dropout is not None and not 0.0 <= self.cue_dropout < 1.0:
            raise ConfigError("synthetic spec: cue_dropout must be in [0, 1)")
        lo, hi = self.fragment_fillers
        if not (isinstance(lo, int) and isinstance(hi, int) and 1 <= lo <= hi):
            raise ConfigError(
                "synthetic spec: fragment_fillers must be ints with 1 <= lo <= hi")
        n_markers = 2 * self.num_fragments + self.num_candidates
        if self.vocab_size < self.num_fragments * self.num_candidates:
            raise ConfigError(
                f"synthetic spec: vocab_size {self.vocab_size} < "
                f"{self.num_fragments * self.num_candidates} marker budget")
        if self.vocab_size < n_markers + 8:
            raise ConfigError(
                "synthetic spec: vocab_size leaves no room for filler tokens")
        return self


@dataclass
class SyntheticResult:
    cases: list[DialogueCase]
    repo: MemoryRepository
    truth: dict[str, tuple[int, int]]  # id -> (zp*, zk*)
    table: np.ndarray  # planted p*(knowledge topic | memory topic)


def planted_table(num_topics_p, num_topics_k, dependency_strength, rng):
    """Conditional table: delta mass on a permuted target topic plus a
    uniform floor, so strength 1 is deterministic and strength 0 uniform.
    Returns (table, per-row target topic)."""
    perm = rng.permutation(num_topics_k)
    table = np.full((num_topics_p, num_topics_k), (1.0 - dependency_strength) / num_topics_k)
    targets = np.array([perm[i % num_topics_k] for i in range(num_topics_p)])
    for i in range(num_topics_p):
        table[i, targets[i]] += dependency_strength
    return table, targets


def _fillers(rng, pool, lo, hi):
    n = int(rng.integers(lo, hi + 1))
    return [f"{FILLER_PREFIX}{int(i)}" for i in rng.integers(0, pool, size=n)]


def generate_synthetic(spec: SyntheticSpec) -> SyntheticResult:
    """Build a corpus where knowledge selection is predictable only through
    the retrieved memory fragment.

    Each context carries one cue token; per user, cues and memory topics are
    independently permuted across fragment slots, so a cue identifies the
    fragment (by shared token) but carries no knowledge-topic information on
    its own. The targeted fragment's topic selects the knowledge topic via
    the planted conditional table; the fragment also mentions its preferred
    knowledge topic's marker, and the response embeds the selected knowledge
    marker (dropped with probability marker_dropout, as is the context cue).
    Because fragment slots map to knowledge topics bijectively, that one
    marker weakly identifies both selections, so pseudo labels usually —
    but not always — recover the ground truth. When both the cue and the
    response marker are dropped, only the cross-latent conditioning can
    identify the memory fragment, which is what gives the inverse model's
    reward its discriminative power.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n_p, n_k = spec.num_fragments, spec.num_candidates
    filler_pool = spec.vocab_size - (2 * n_p + n_k)
    table, targets = planted_table(n_p, n_k, spec.dependency_strength, rng)

    cases, entries, truth = [], {}, {}
    for u in range(spec.num_users):
        user_key = hash_user_key(f"user-{spec.seed}-{u}")
        cue_perm = rng.permutation(n_p)
        topic_perm = rng.permutation(n_p)
        fragments = []
        for slot in range(n_p):
            toks = [
                f"{MEM_TOPIC_PREFIX}{int(topic_perm[slot])}",
                f"{KNOW_TOPIC_PREFIX}{int(targets[topic_perm[slot]])}",
                f"{CUE_PREFIX}{int(cue_perm[slot])}",
            ] + _fillers(rng, filler_pool, *spec.fragment_fillers)
            rng.shuffle(toks)
            fragments.append(toks)
        entries[user_key] = fragments

        for c in range(spec.cases_per_user):
            zp = int(rng.integers(n_p))
            topic = int(topic_perm[zp])
            k_topic = int(rng.choice(n_k, p=table[topic]))
            cand_topics = rng.permutation(n_k)
            zk = int(np.argwhere(cand_topics == k_topic)[0, 0])
            knowledge = []
            for t in cand_topics:
                toks = [f"{KNOW_TOPIC_PREFIX}{int(t)}"] + _fillers(rng, filler_pool, 2, 5)
                rng.shuffle(toks)
                knowledge.append(toks)
            n_utts = int(rng.integers(1, 3))
            context = [_fillers(rng, filler_pool, 1, 3) for _ in range(n_utts)]
            cue_dropout = (spec.marker_dropout if spec.cue_dropout is None
                           else spec.cue_dropout)
            if rng.random() >= cue_dropout:
                cue = f"{CUE_PREFIX}{int(cue_perm[zp])}"
                pos = int(rng.integers(0, len(context[-1]) + 1))
                context[-1].insert(pos, cue)
            response = _fillers(rng, filler_pool, 2, 4)
            if rng.random() >= spec.marker_dropout:
                response.append(f"{KNOW_TOPIC_PREFIX}{k_topic}")
            rng.shuffle(response)
            case_id = f"case-{u:05d}-{c:04d}"
            cases.append(DialogueCase(case_id, user_key, context, knowledge, response))
            truth[case_id] = (zp, zk)

    return SyntheticResult(cases, MemoryRepository(entries), truth, table)


# --- marker-reading oracle (for tests and sanity probes) -------------------


def _first_with_prefix(tokens, prefix):
    for t in tokens:
        if t.startswith(prefix) and t[len(prefix):].isdigit():
            return int(t[len(prefix):])
    return None


def oracle_memory_scores(case, mem) -> np.ndarray:
    """Score fragments by cue-token match with the context."""
    ctx = [t for u in case.context for t in u]
    cue = _first_with_prefix(ctx, CUE_PREFIX)
    scores = np.zeros(len(mem.fragments))
    for i, frag in enumerate(mem.fragments):
        if cue is not None and _first_with_prefix(frag, CUE_PREFIX) == cue:
            scores[i] = 1.0
    return scores


def oracle_knowledge_scores(case, fragment, table) -> np.ndarray:
    """Score candidates by the planted table row of the fragment's topic."""
    topic = _first_with_prefix(fragment, MEM_TOPIC_PREFIX)
    scores = np.zeros(len(case.knowledge))
    for i, cand in enumerate(case.knowledge):
        k_topic = _first_with_prefix(cand, KNOW_TOPIC_PREFIX)
        if topic is not None and k_topic is not None:
            scores[i] = table[topic, k_topic]
    return scores
