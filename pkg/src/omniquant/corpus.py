"""Deterministic synthetic English-like text, used as pretraining and calibration data."""

from __future__ import annotations

import numpy as np

_WORDS = {
    "name": "Ada Bram Cora Dov Elin Faro Gita Hal Iris Joss Kemi Lior Mara Nils Oona Pell".split(),
    "noun": ("river lantern engine garden market mountain signal harbor letter window orchard "
             "bridge compass village machine forest ledger beacon kettle meadow tower archive "
             "station candle voyage").split(),
    "adj": ("quiet bright narrow ancient gentle heavy hollow silver crooked patient early "
            "distant golden rapid humble bitter").split(),
    "verb": "finds carries watches repairs follows builds opens crosses measures paints".split(),
    "past": "found carried watched repaired followed built opened crossed measured painted".split(),
    "place": "the north road|the old mill|the south gate|the long shore|the east field".split("|"),
    "time": "at dawn|by noon|before dusk|at midnight|in autumn|in spring|every morning".split("|"),
    "conj": "and then|but later|so|because|while".split("|"),
}

_TEMPLATES = [
    "{name} {verb} the {adj} {noun}.",
    "The {adj} {noun} near {place} was {adj}.",
    "{name} {past} a {noun} {time}.",
    "{time}, {name} {past} the {noun} {conj} {name} {past} the {noun}.",
    "A {adj} {noun} {verb} a {adj} {noun}.",
    "Nobody {past} the {noun} at {place}.",
    "{name} said: \"the {noun} is {adj} {time}.\"",
    "There were {num} {noun}s on {place}.",
    "{name} {verb} {num} {adj} {noun}s {time}.",
]


def synthetic_corpus(n_bytes: int, seed: int = 0) -> bytes:
    """At least ``n_bytes`` of grammatical filler text, truncated to exactly ``n_bytes``."""
    rng = np.random.default_rng(seed)
    lens = {k: len(v) for k, v in _WORDS.items()}
    # Zipf-like word preferences so the text has learnable skew
    prefs = {k: 1.0 / np.arange(1, n + 1) ** 0.8 for k, n in lens.items()}
    prefs = {k: p / p.sum() for k, p in prefs.items()}
    out, size, sentence = [], 0, 0
    while size < n_bytes:
        tpl = _TEMPLATES[rng.integers(len(_TEMPLATES))]
        pieces = []
        for chunk in tpl.split("{")[1:]:
            key = chunk.split("}")[0]
            if key == "num":
                pieces.append(str(int(rng.integers(2, 40))))
            else:
                pieces.append(_WORDS[key][rng.choice(lens[key], p=prefs[key])])
        it = iter(pieces)
        text = "".join(
            (next(it) + part.split("}", 1)[1]) if i else part
            for i, part in enumerate(tpl.split("{"))
        )
        text = text[0].upper() + text[1:]
        sentence += 1
        sep = "\n" if sentence % 6 == 0 else " "
        chunk = (text + sep).encode("utf-8")
        out.append(chunk)
        size += len(chunk)
    return b"".join(out)[:n_bytes]
