"""Verifiable rewards: tag-structure parsing, accuracy, format and their mix."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .policy import ANS_CLOSE, ANS_OPEN, EOS, OPTION_TOKENS, THINK_CLOSE, THINK_OPEN, TOKEN_TO_LABEL, Response

_TAGS = (THINK_OPEN, THINK_CLOSE, ANS_OPEN, ANS_CLOSE)


@dataclass(frozen=True)
class ParsedResponse:
    think: tuple[int, ...] | None
    answer: tuple[int, ...] | None
    well_formed: bool
    option: str | None = None


@dataclass(frozen=True)
class RewardBreakdown:
    r_accu: int
    r_form: int
    lam: float
    total: float


_MALFORMED = ParsedResponse(None, None, False, None)


def parse_response(response: Response | Sequence[int], options: Sequence[str]) -> ParsedResponse:
    """Check the think/answer tag structure and extract the chosen option.

    Well-formed means: each of the four tags occurs exactly once, in the
    order think-open, think-close, answer-open, answer-close, and the answer
    span holds exactly one option token, which belongs to ``options``.
    Tokens after the first EOS are ignored. Never raises on bad input.
    """
    tokens = response.tokens if isinstance(response, Response) else response
    seq = []
    for tok in tokens:
        tok = int(tok)
        if tok == EOS:
            break
        seq.append(tok)
    pos = {}
    for i, tok in enumerate(seq):
        if tok in _TAGS:
            if tok in pos:
                return _MALFORMED
            pos[tok] = i
    if len(pos) != 4:
        return _MALFORMED
    to, tc, ao, ac = (pos[t] for t in _TAGS)
    if not to < tc < ao < ac:
        return _MALFORMED
    think = tuple(seq[to + 1 : tc])
    answer = tuple(seq[ao + 1 : ac])
    chosen = [t for t in answer if t in OPTION_TOKENS]
    if len(chosen) != 1 or TOKEN_TO_LABEL[chosen[0]] not in options:
        return ParsedResponse(think, answer, False, None)
    return ParsedResponse(think, answer, True, TOKEN_TO_LABEL[chosen[0]])


def accuracy_reward(parsed: ParsedResponse, gold: str) -> int:
    return int(parsed.well_formed and parsed.option == gold)


def format_reward(parsed: ParsedResponse) -> int:
    return int(parsed.well_formed)


def combined_reward(parsed: ParsedResponse, gold: str, lam: float = 0.1) -> RewardBreakdown:
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    acc = accuracy_reward(parsed, gold)
    form = format_reward(parsed)
    return RewardBreakdown(acc, form, lam, acc + lam * form)


def score(response: Response, options: Sequence[str], gold: str, lam: float = 0.1) -> RewardBreakdown:
    return combined_reward(parse_response(response, options), gold, lam)
