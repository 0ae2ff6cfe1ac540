"""
Closed instruction grammar: subgoal templates, connectives and the fixed vocabulary.
"""

from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from langskill.errors import TokenizationError

COLORS = ("red", "green", "blue", "purple", "yellow", "grey")
KINDS = ("ball", "box", "key", "door")
PICKABLE_KINDS = ("ball", "box", "key")
VERBS = ("goto", "pickup", "open")
CONNECTIVES = ("then", "and")
MAX_SUBGOALS = 3

PAD_TOKEN = "<pad>"
TEMPLATE_WORDS = ("go", "to", "the", "pick", "up", "open")
VOCAB: Tuple[str, ...] = (PAD_TOKEN,) + TEMPLATE_WORDS + CONNECTIVES + COLORS + KINDS
PAD_ID = 0
# words that identify a subgoal; template filler is excluded from interpretability checks
CONTENT_TOKENS = ("go", "pick", "open") + COLORS + KINDS

_WORD_TO_ID: Dict[str, int] = {word: index for index, word in enumerate(VOCAB)}


class Subgoal(NamedTuple):
    verb: str
    color: str
    kind: str

    def validate(self) -> "Subgoal":
        if self.verb not in VERBS or self.color not in COLORS or self.kind not in KINDS:
            raise ValueError(f"unknown subgoal {tuple(self)}")
        if self.verb == "open" and self.kind != "door":
            raise ValueError(f"only doors can be opened, got {self.kind}")
        if self.verb == "pickup" and self.kind not in PICKABLE_KINDS:
            raise ValueError(f"{self.kind} cannot be picked up")
        return self

    def render(self) -> str:
        if self.verb == "goto":
            return f"go to the {self.color} {self.kind}"
        if self.verb == "pickup":
            return f"pick up the {self.color} {self.kind}"
        return f"open the {self.color} door"


def all_subgoals() -> List[Subgoal]:
    """Every valid (verb, color, kind) triple, in a fixed order."""
    subgoals = [Subgoal("goto", c, k) for k in KINDS for c in COLORS]
    subgoals += [Subgoal("pickup", c, k) for k in PICKABLE_KINDS for c in COLORS]
    subgoals += [Subgoal("open", c, "door") for c in COLORS]
    return subgoals


def tokenize(text: str) -> List[int]:
    """
    Whitespace-split lookup in the fixed vocabulary.

    :param text: Instruction text
    :type text: str
    :return: Token ids, empty for empty text
    :rtype: List[int]
    :raises TokenizationError: If a word is outside the vocabulary
    """
    ids = []
    for word in text.split():
        if word not in _WORD_TO_ID:
            raise TokenizationError(f"unknown word {word!r}")
        ids.append(_WORD_TO_ID[word])
    return ids


def detokenize(token_ids: Sequence[int]) -> str:
    words = []
    for token_id in token_ids:
        if not 0 <= int(token_id) < len(VOCAB):
            raise TokenizationError(f"unknown token id {token_id}")
        if int(token_id) != PAD_ID:
            words.append(VOCAB[int(token_id)])
    return " ".join(words)


def render_instruction(subgoals: Sequence[Subgoal], connectives: Sequence[str]) -> str:
    if len(connectives) != max(len(subgoals) - 1, 0):
        raise ValueError(f"{len(subgoals)} subgoals need {len(subgoals) - 1} connectives")
    parts = [subgoals[0].render()] if subgoals else []
    for connective, subgoal in zip(connectives, subgoals[1:]):
        parts += [connective, subgoal.render()]
    return " ".join(parts)


@dataclass(frozen=True)
class Instruction:
    """An ordered subgoal sequence with its surface text and token ids."""

    subgoals: Tuple[Subgoal, ...]
    text: str
    token_ids: Tuple[int, ...] = field(default=())

    @classmethod
    def from_subgoals(
        cls, subgoals: Sequence[Subgoal], rng: Optional[np.random.Generator] = None, connectives=None
    ) -> "Instruction":
        """
        Render an instruction, drawing connectives from ``rng`` unless given.

        :param subgoals: One to three subgoals
        :type subgoals: Sequence[Subgoal]
        :param rng: Generator for the connective choice
        :type rng: np.random.Generator, optional
        :param connectives: Explicit connectives, one per join
        :type connectives: Sequence[str], optional
        :return: Instruction
        :rtype: Instruction
        """
        subgoals = tuple(Subgoal(*s).validate() for s in subgoals)
        if not 1 <= len(subgoals) <= MAX_SUBGOALS:
            raise ValueError(f"instructions hold 1 to {MAX_SUBGOALS} subgoals but {len(subgoals)} given")
        if connectives is None:
            if rng is None:
                connectives = [CONNECTIVES[0]] * (len(subgoals) - 1)
            else:
                connectives = [CONNECTIVES[int(i)] for i in rng.integers(0, len(CONNECTIVES), len(subgoals) - 1)]
        text = render_instruction(subgoals, list(connectives))
        return cls(subgoals=subgoals, text=text, token_ids=tuple(tokenize(text)))

    @property
    def sequence_key(self) -> Tuple[Tuple[str, str, str], ...]:
        return tuple(tuple(s) for s in self.subgoals)
