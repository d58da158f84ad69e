"""Input-sequence composition for the five latent models.

Each distribution kind fixes a segment layout; every composed sequence
starts with the classification token and separates segments (and,
optionally, individual context utterances) with the separator token.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from .corpus import CLS, SEP
from .errors import CompositionError

# Segment labels; label 0 is reserved for the classification position.
CLS_POS, CONTEXT, RESPONSE, MEMORY, KNOWLEDGE = range(5)
NUM_SEGMENT_LABELS = 5

_LABEL_NAMES = {CONTEXT: "context", RESPONSE: "response",
                MEMORY: "memory", KNOWLEDGE: "knowledge"}


class Kind(Enum):
    PRIOR_ZP = "prior_zp"    # C, P_i
    PRIOR_ZK = "prior_zk"    # C, P_sel, K_i
    POST_ZP = "post_zp"      # C, R, P_i
    POST_ZK = "post_zk"      # C, R, P_sel, K_i
    AUX_ZP = "aux_zp"        # C, R, K_sel, P_i


LAYOUTS = {
    Kind.PRIOR_ZP: (CONTEXT, MEMORY),
    Kind.PRIOR_ZK: (CONTEXT, MEMORY, KNOWLEDGE),
    Kind.POST_ZP: (CONTEXT, RESPONSE, MEMORY),
    Kind.POST_ZK: (CONTEXT, RESPONSE, MEMORY, KNOWLEDGE),
    Kind.AUX_ZP: (CONTEXT, RESPONSE, KNOWLEDGE, MEMORY),
}


@dataclass
class ComposerConfig:
    max_seq_len: int = 256
    context_floor: int = 8  # context is never truncated below this
    sep_between_utterances: bool = True


@dataclass
class ComposedSequence:
    tokens: list[int]
    segment_labels: list[int]  # parallel to tokens
    segment_spans: list[tuple[int, int, int]]  # (label, start, end) incl. trailing sep
    truncation_applied: bool


def compose(kind, vocab, context, response=None, memory=None, knowledge=None,
            cfg=None) -> ComposedSequence:
    """Build the token layout for one candidate of the given kind.

    `context` is a list of utterance token lists; the remaining segments are
    flat token lists. `memory` holds the candidate fragment for *_ZP kinds
    and the selected fragment for *_ZK kinds; `knowledge` holds the
    candidate for *_ZK kinds and the selected candidate for AUX_ZP.
    """
    cfg = cfg or ComposerConfig()
    layout = LAYOUTS[kind]
    provided = {CONTEXT: context, RESPONSE: response,
                MEMORY: memory, KNOWLEDGE: knowledge}
    segments = []
    for label in layout:
        seg = provided[label]
        if seg is None or len(seg) == 0:
            raise CompositionError(
                f"{kind.value}: missing required segment {_LABEL_NAMES[label]!r}")
        if label == CONTEXT:
            flat = []
            for i, utt in enumerate(seg):
                if i > 0 and cfg.sep_between_utterances:
                    flat.append(SEP)
                flat.extend(utt)
            seg = flat
        segments.append((label, list(seg)))

    truncated = _truncate(segments, cfg)

    cls_id, sep_id = vocab.token_to_id[CLS], vocab.token_to_id[SEP]
    tokens, labels, spans = [cls_id], [CLS_POS], []
    for label, seg in segments:
        start = len(tokens)
        tokens.extend(vocab.encode(seg))
        tokens.append(sep_id)
        labels.extend([label] * (len(seg) + 1))
        spans.append((label, start, len(tokens)))
    return ComposedSequence(tokens, labels, spans, truncated)


def _truncate(segments, cfg):
    """Drop oldest context tokens first; touch other segments only once the
    context is at its floor, then trim their fronts in layout order."""
    def total():
        # +1 for [CLS], +1 separator per segment
        return 1 + sum(len(seg) + 1 for _, seg in segments)

    if total() <= cfg.max_seq_len:
        return False
    for idx, (label, seg) in enumerate(segments):
        if label != CONTEXT:
            continue
        floor = min(cfg.context_floor, len(seg))
        while len(seg) > floor and total() > cfg.max_seq_len:
            seg.pop(0)
    for idx, (label, seg) in enumerate(segments):
        if label == CONTEXT:
            continue
        while len(seg) > 1 and total() > cfg.max_seq_len:
            seg.pop(0)
    if total() > cfg.max_seq_len:
        raise CompositionError(
            f"cannot fit composition into max_seq_len={cfg.max_seq_len}")
    return True
