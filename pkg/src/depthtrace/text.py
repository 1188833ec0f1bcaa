"""Closed-vocabulary instruction tokenizer.

Instructions come from two templates: "put the <obj> on the <target>" and
"stack the <obj> on the <obj>". The vocabulary is a fixed list so token
ids are stable across runs; anything else maps to UNK.
"""

from __future__ import annotations

import numpy as np

from .core import Instruction

UNK = 0

VOCAB: tuple[str, ...] = (
    "<unk>",
    "put", "stack", "the", "on", "in", "a",
    "spoon", "carrot", "eggplant", "towel", "plate", "basket",
    "block", "stick", "ball", "mat", "tray", "bowl",
    "red", "blue", "green", "yellow",
)

_TOKEN_TO_ID = {tok: i for i, tok in enumerate(VOCAB)}


def tokenize_instruction(instruction: Instruction | str) -> np.ndarray:
    """Whitespace tokens mapped through the closed vocabulary; unknown -> UNK."""
    text = instruction.text if isinstance(instruction, Instruction) else instruction
    words = text.lower().split()
    if not words:
        raise ValueError("instruction must contain at least one token")
    return np.array([_TOKEN_TO_ID.get(w, UNK) for w in words], dtype=np.int64)
