"""Target-bias declarations and attribute sampling.

A bias names an attribute dimension (the toy analogue is subject colour) with
an ordered attribute set and a prompt template. Product biases span the
Cartesian product of their components' attribute sets; their attribute ids are
word tuples. Attribute order is declaration order and is part of the public
contract: it indexes predictor output channels and breaks classifier ties.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ValidationError

AttributeId = "str | tuple[str, ...]"


def attribute_words(attribute) -> tuple[str, ...]:
    """Component words of an attribute id, in declared order."""
    return attribute if isinstance(attribute, tuple) else (attribute,)


def attribute_label(attribute) -> str:
    """Stable textual form, used in filenames/CSV (tuple components joined by '+')."""
    return "+".join(attribute_words(attribute))


def parse_attribute_label(label: str):
    parts = tuple(label.split("+"))
    return parts if len(parts) > 1 else parts[0]


def _split_template(template: str) -> tuple[list[str], list[str]]:
    words = template.split()
    slots = [w for w in words if w == "{}"]
    static = [w for w in words if w != "{}"]
    if words[: len(slots)] != slots:
        raise ValidationError(f"template slots must precede static words: {template!r}")
    return slots, static


@dataclass(frozen=True)
class BiasSpec:
    """A target bias with its ordered attribute set and prompt template."""

    name: str
    attributes: tuple
    prompt_template: str

    def __post_init__(self):
        if len(self.attributes) < 2:
            raise ValidationError(f"bias {self.name!r} needs at least 2 attributes")
        if len(set(self.attributes)) != len(self.attributes):
            raise ValidationError(f"bias {self.name!r} has duplicate attributes")
        arities = {len(attribute_words(a)) for a in self.attributes}
        if len(arities) != 1:
            raise ValidationError(f"bias {self.name!r} mixes attribute arities")
        slots, _ = _split_template(self.prompt_template)
        if len(slots) != next(iter(arities)):
            raise ValidationError(
                f"template {self.prompt_template!r} has {len(slots)} slot(s) "
                f"but attributes have {next(iter(arities))} word(s)"
            )

    @property
    def n_attributes(self) -> int:
        return len(self.attributes)

    def index(self, attribute) -> int:
        try:
            return self.attributes.index(attribute)
        except ValueError:
            raise DomainError(f"attribute {attribute!r} not in bias {self.name!r}") from None

    def words(self) -> set[str]:
        out = set(self.prompt_template.split()) - {"{}"}
        for a in self.attributes:
            out.update(attribute_words(a))
        return out


@dataclass(frozen=True)
class CounterfactualDraw:
    target: object
    counterfactual: object

    def __post_init__(self):
        if self.counterfactual == self.target:
            raise ValidationError("counterfactual must differ from target")


def product(b1: BiasSpec, b2: BiasSpec) -> BiasSpec:
    """Cartesian-product bias; attribute order is b1-major, template slots concatenate."""
    if b1.name == b2.name:
        raise DomainError(f"product biases need distinct names, got {b1.name!r} twice")
    s1, static1 = _split_template(b1.prompt_template)
    s2, static2 = _split_template(b2.prompt_template)
    if static1 != static2:
        raise ValidationError(
            f"product templates must share static words: {static1} vs {static2}"
        )
    attrs = tuple(
        attribute_words(a) + attribute_words(b) for a in b1.attributes for b in b2.attributes
    )
    template = " ".join(s1 + s2 + static1)
    return BiasSpec(name=f"{b1.name}x{b2.name}", attributes=attrs, prompt_template=template)


def sample_counterfactual(bias: BiasSpec, target, rng: np.random.Generator) -> CounterfactualDraw:
    """Uniform draw from the attribute set minus the target."""
    bias.index(target)
    pool = [a for a in bias.attributes if a != target]
    if not pool:
        raise DomainError(f"bias {bias.name!r} has no counterfactual alternatives")
    return CounterfactualDraw(target=target, counterfactual=pool[int(rng.integers(len(pool)))])


def sample_target(bias: BiasSpec, rng: np.random.Generator, frequencies=None):
    """Draw an attribute; uniform unless an explicit frequency vector is given."""
    n = bias.n_attributes
    if frequencies is None:
        return bias.attributes[int(rng.integers(n))]
    freq = np.asarray(frequencies, dtype=np.float64)
    if freq.shape != (n,) or (freq < 0).any():
        raise ValidationError(f"frequency vector must be {n} nonnegative reals")
    if abs(float(freq.sum()) - 1.0) > 1e-9:
        raise ValidationError(f"frequency vector sums to {freq.sum()}, expected 1")
    u = rng.random()
    return bias.attributes[min(int(np.searchsorted(np.cumsum(freq), u, side="right")), n - 1)]
