"""Search-space definition, enumeration, encoding and sampling."""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .exceptions import ConfigurationError, InputError, ParseError
from .model import ACTIVATION_NAMES, ArchState

DIMENSIONS = ("layers", "heads", "hidden", "intermediate", "activations")


@dataclass(frozen=True)
class SearchSpace:
    layers: tuple
    heads: tuple
    hidden: tuple
    intermediate: tuple
    activations: tuple = ACTIVATION_NAMES

    def __post_init__(self):
        for name in DIMENSIONS:
            values = tuple(getattr(self, name))
            if not values:
                raise ConfigurationError(f"search space dimension {name!r} is empty")
            if len(set(values)) != len(values):
                raise ConfigurationError(f"duplicate candidates in {name!r}: {values}")
            ordered = values if name == "activations" else tuple(sorted(int(v) for v in values))
            object.__setattr__(self, name, ordered)
        for act in self.activations:
            if act not in ACTIVATION_NAMES:
                raise ConfigurationError(f"unknown activation {act!r} in search space")
        bad = [(d, a) for d in self.hidden for a in self.heads if d % a]
        if bad:
            raise ConfigurationError(f"hidden sizes not divisible by head counts: {bad}")

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(DIMENSIONS)
        if unknown:
            raise ConfigurationError(f"unknown search-space keys {sorted(unknown)}")
        return cls(**{k: tuple(v) for k, v in d.items()})

    def to_dict(self):
        return {name: list(getattr(self, name)) for name in DIMENSIONS}

    @cached_property
    def _states(self):
        return tuple(ArchState(*combo) for combo in itertools.product(
            self.layers, self.heads, self.hidden, self.intermediate, self.activations))

    @cached_property
    def _index(self):
        return {s: i for i, s in enumerate(self._states)}

    def states(self):
        """All states, in canonical (lexicographic tuple) order."""
        return list(self._states)

    def __len__(self):
        return len(self._states)

    def __iter__(self):
        return iter(self._states)

    def __contains__(self, state):
        return state in self._index

    def index(self, state):
        return self._index[state]


def paper_space():
    # Hidden sizes are not printed in the candidate table; {288,384,576,768} is
    # the only 4-value set consistent with 2400 states and the reported models.
    return SearchSpace(
        layers=(3, 4, 6, 10, 12),
        heads=(2, 3, 4, 6, 12),
        hidden=(288, 384, 576, 768),
        intermediate=(384, 512, 576, 768, 1024, 1536, 2048, 3072),
    )


def desk_space():
    """24-state space small enough to distil every member on a laptop CPU."""
    return SearchSpace(layers=(2, 4), heads=(2, 4), hidden=(32, 64), intermediate=(128,))


def enumerate_space(space):
    return space.states()


def encode_state(state, space):
    """4 ordinals scaled by the largest candidate, then a one-hot activation."""
    if state not in space:
        raise InputError(f"state {state} is not a member of the search space")
    ordinals = [
        state.hidden_layers / max(space.layers),
        state.attention_heads / max(space.heads),
        state.hidden_size / max(space.hidden),
        state.intermediate_size / max(space.intermediate),
    ]
    onehot = [1.0 if a == state.activation else 0.0 for a in space.activations]
    return np.array(ordinals + onehot, dtype=np.float64)


def encoding_dim(space):
    return 4 + len(space.activations)


def sample_random(space, n, seed, exclude=()):
    """Uniform sample without replacement from ``space`` minus ``exclude``."""
    exclude = set(exclude)
    pool = [s for s in space.states() if s not in exclude]
    if n < 0 or n > len(pool):
        raise InputError(f"cannot sample {n} states from {len(pool)} available")
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(pool), size=n, replace=False)
    return [pool[i] for i in picks]


def parse_state(text, space=None):
    """Parse the comma notation ``"L,A,H,F,act"``."""
    if not isinstance(text, str):
        raise ParseError(f"expected a string, got {type(text).__name__}", 0)
    parts = text.split(",")
    if len(parts) != 5:
        raise ParseError(f"expected 5 comma-separated fields, got {len(parts)} in {text!r}", len(text))
    values, pos = [], 0
    for i, raw in enumerate(parts):
        field = raw.strip()
        if i < 4:
            if not field.isdigit() or int(field) <= 0:
                raise ParseError(f"field {i + 1} must be a positive integer, got {raw!r}", pos)
            values.append(int(field))
        else:
            if field not in ACTIVATION_NAMES or (space is not None and field not in space.activations):
                raise ParseError(f"activation {raw!r} is not a search-space candidate", pos)
            values.append(field)
        pos += len(raw) + 1
    try:
        state = ArchState(*values)
    except ConfigurationError as exc:
        raise ParseError(str(exc), 0) from exc
    if space is not None and state not in space:
        raise ParseError(f"state {text!r} is outside the search space", 0)
    return state


def format_state(state):
    return str(state)
