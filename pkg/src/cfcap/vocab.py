"""Token and cell-id vocabulary for the synthetic scene worlds.

Two separate id spaces:

* grid cell ids: BACKGROUND, MASK, then one id per object kind;
* caption token ids: BOS, EOS, the template words, then object name words.

Object names may span several word tokens ("black poodle"); the grid id is
still a single cell id per object kind.
"""

from __future__ import annotations

from dataclasses import dataclass, field

# reserved grid cell ids
BACKGROUND = 0
MASK = 1
FIRST_OBJECT_CELL_ID = 2

# reserved token ids
BOS = 0
EOS = 1

TEMPLATE_WORDS = ("a", "and", ".")


@dataclass(frozen=True)
class ObjectSpec:
    """One object kind: its grid cell id, name tokens and footprint size."""

    name: str
    cell_id: int
    name_tokens: tuple[int, ...]
    cells_per_instance: int = 1


@dataclass
class Vocabulary:
    """Bidirectional token table plus the object kind registry."""

    token_strings: list[str]
    objects: list[ObjectSpec]
    _string_to_token: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self._string_to_token = {s: i for i, s in enumerate(self.token_strings)}
        if len(self._string_to_token) != len(self.token_strings):
            raise ValueError("duplicate token strings in vocabulary")

    @property
    def size(self) -> int:
        return len(self.token_strings)

    @property
    def n_cell_ids(self) -> int:
        return FIRST_OBJECT_CELL_ID + len(self.objects)

    def token(self, word: str) -> int:
        return self._string_to_token[word]

    def object_by_name(self, name: str) -> ObjectSpec:
        for obj in self.objects:
            if obj.name == name:
                return obj
        raise KeyError(f"unknown object {name!r}")

    def object_by_cell_id(self, cell_id: int) -> ObjectSpec:
        idx = cell_id - FIRST_OBJECT_CELL_ID
        if not 0 <= idx < len(self.objects):
            raise KeyError(f"cell id {cell_id} is not an object id")
        return self.objects[idx]

    def render(self, tokens) -> str:
        """Human-readable caption; BOS/EOS are dropped."""
        words = [self.token_strings[t] for t in tokens if t not in (BOS, EOS)]
        return " ".join(words)

    def to_dict(self) -> dict:
        return {
            "token_strings": list(self.token_strings),
            "objects": [
                {
                    "name": o.name,
                    "cell_id": o.cell_id,
                    "name_tokens": list(o.name_tokens),
                    "cells_per_instance": o.cells_per_instance,
                }
                for o in self.objects
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        objects = [
            ObjectSpec(
                name=o["name"],
                cell_id=o["cell_id"],
                name_tokens=tuple(o["name_tokens"]),
                cells_per_instance=o["cells_per_instance"],
            )
            for o in d["objects"]
        ]
        return cls(token_strings=list(d["token_strings"]), objects=objects)


def build_vocabulary(object_names: list[str], object_sizes: list[int] | None = None) -> Vocabulary:
    """Build the token table for a world.

    Token layout: BOS, EOS, "a", "and", ".", then each new name word in
    first-appearance order. Multi-word names share word tokens if they repeat
    across objects.
    """
    if object_sizes is None:
        object_sizes = [1] * len(object_names)
    if len(object_sizes) != len(object_names):
        raise ValueError("object_sizes must match object_names")
    if len(set(object_names)) != len(object_names):
        raise ValueError("duplicate object names")

    token_strings = ["<bos>", "<eos>", *TEMPLATE_WORDS]
    index = {s: i for i, s in enumerate(token_strings)}
    objects = []
    for i, (name, size) in enumerate(zip(object_names, object_sizes)):
        words = name.split()
        if not words:
            raise ValueError("empty object name")
        if size < 1:
            raise ValueError(f"object {name!r} must occupy at least one cell")
        toks = []
        for w in words:
            if w in TEMPLATE_WORDS or w in ("<bos>", "<eos>"):
                raise ValueError(f"object word {w!r} collides with a reserved word")
            if w not in index:
                index[w] = len(token_strings)
                token_strings.append(w)
            toks.append(index[w])
        objects.append(
            ObjectSpec(
                name=name,
                cell_id=FIRST_OBJECT_CELL_ID + i,
                name_tokens=tuple(toks),
                cells_per_instance=size,
            )
        )
    return Vocabulary(token_strings=token_strings, objects=objects)
