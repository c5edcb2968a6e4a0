"""A seeded probabilistic grammar used both for toy pretraining and as a labelled task.

Sentences are one or two clauses ``NP [NEG] VERB NP [PREP NP]`` joined by a
conjunction. Each sentence has a latent mood; adjectives and verbs are drawn
from positive or negative pools that agree with the mood with probability
``MOOD_AGREEMENT`` (neutral words are mixed in). The mood makes polarity
predictable from context, so masked-LM pretraining learns it within a few
thousand steps.

The class label is a deterministic function of the tokens, which gives a
Bayes accuracy of 1.0:

  difficulty 0: 1 iff positive words outnumber negative words
  difficulty 1: the difficulty-0 label XOR "an odd number of negators"
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Example

DETS = ["the", "a", "this", "that", "every", "some"]
NOUNS = [f"n{i:02d}" for i in range(40)]
POS_ADJ = [f"pa{i:02d}" for i in range(12)]
NEG_ADJ = [f"na{i:02d}" for i in range(12)]
NEUTRAL_ADJ = [f"ja{i:02d}" for i in range(12)]
POS_VERB = [f"pv{i:02d}" for i in range(10)]
NEG_VERB = [f"nv{i:02d}" for i in range(10)]
NEUTRAL_VERB = [f"jv{i:02d}" for i in range(10)]
NEGATORS = ["not", "never"]
PREPS = ["near", "with", "under", "beside", "behind", "for"]
CONJS = ["and", "but", "while"]

WORDS = (DETS + NOUNS + POS_ADJ + NEG_ADJ + NEUTRAL_ADJ + POS_VERB + NEG_VERB + NEUTRAL_VERB
         + NEGATORS + PREPS + CONJS)
POSITIVE = frozenset(POS_ADJ + POS_VERB)
NEGATIVE = frozenset(NEG_ADJ + NEG_VERB)
_FLIP = {**dict(zip(POS_ADJ + POS_VERB, NEG_ADJ + NEG_VERB)), **dict(zip(NEG_ADJ + NEG_VERB, POS_ADJ + POS_VERB))}

MOOD_AGREEMENT = 0.9
RULES = {
    0: "1 iff positive words outnumber negative words",
    1: "positive-majority XOR an odd number of negators",
}


@dataclass(frozen=True)
class GrammarDescription:
    seed: int
    n: int
    difficulty: int
    label_rule: str
    mood_agreement: float = MOOD_AGREEMENT
    bayes_accuracy: float = 1.0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def polarity_margin(tokens) -> int:
    return sum(t in POSITIVE for t in tokens) - sum(t in NEGATIVE for t in tokens)


def label_of(tokens, difficulty: int) -> int:
    margin = polarity_margin(tokens)
    if margin == 0:
        raise ValueError("sentence has no polarity majority")
    label = int(margin > 0)
    if difficulty == 1:
        label ^= sum(t in NEGATORS for t in tokens) % 2
    return label


class _Sampler:
    def __init__(self, rng: np.random.Generator, agreement: float = MOOD_AGREEMENT):
        self.rng = rng
        self.agreement = agreement

    def pick(self, pool):
        return pool[int(self.rng.integers(len(pool)))]

    def polar(self, mood: bool, pos_pool, neg_pool):
        agree = self.rng.random() < self.agreement
        return self.pick(pos_pool if mood == agree else neg_pool)

    def noun_phrase(self, mood: bool) -> list[str]:
        out = [self.pick(DETS)]
        if self.rng.random() < 0.9:
            out.append(self.polar(mood, POS_ADJ, NEG_ADJ))
        else:
            out.append(self.pick(NEUTRAL_ADJ))
        out.append(self.pick(NOUNS))
        return out

    def clause(self, mood: bool) -> list[str]:
        out = self.noun_phrase(mood)
        if self.rng.random() < 0.25:
            out.append(self.pick(NEGATORS))
        out.append(self.polar(mood, POS_VERB, NEG_VERB) if self.rng.random() < 0.85 else self.pick(NEUTRAL_VERB))
        out += self.noun_phrase(mood)
        if self.rng.random() < 0.3:
            out += [self.pick(PREPS)] + self.noun_phrase(mood)
        return out

    def sentence(self) -> list[str]:
        while True:
            mood = bool(self.rng.random() < 0.5)
            tokens = self.clause(mood)
            if self.rng.random() < 0.4:
                tokens += [self.pick(CONJS)] + self.clause(mood)
            if polarity_margin(tokens) != 0:
                return tokens


def synthetic_cls(seed: int, n: int, difficulty: int = 0,
                  mood_agreement: float = MOOD_AGREEMENT) -> tuple[list[Example], GrammarDescription]:
    """``n`` labelled sentences, exactly balanced (labels alternate before shuffling).

    A sentence whose label disagrees with the requested one has every polar
    word swapped for its counterpart, which flips the label without
    changing the sentence's shape. A ``mood_agreement`` below the
    pretraining corpus's makes the label depend on counting polar words
    rather than on the overall mood.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    if difficulty not in RULES:
        raise ValueError(f"difficulty must be one of {sorted(RULES)}")
    if not 0.5 <= mood_agreement <= 1.0:
        raise ValueError("mood_agreement must lie in [0.5, 1]")
    rng = np.random.default_rng(seed)
    sampler = _Sampler(rng, mood_agreement)
    labels = np.arange(n) % 2
    rng.shuffle(labels)
    examples = []
    for label in labels:
        tokens = sampler.sentence()
        if label_of(tokens, difficulty) != label:
            tokens = [_FLIP.get(t, t) for t in tokens]
        examples.append(Example(" ".join(tokens), int(label)))
    return examples, GrammarDescription(seed, n, difficulty, RULES[difficulty], mood_agreement)


def synthetic_corpus(seed: int, n: int) -> list[str]:
    """Unlabelled sentences from the same grammar, for masked-LM pretraining."""
    sampler = _Sampler(np.random.default_rng(seed))
    return [" ".join(sampler.sentence()) for _ in range(n)]
