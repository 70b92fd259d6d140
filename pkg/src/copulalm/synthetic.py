"""Templated synthetic corpus for desk-scale collapse experiments.

Each sentence is drawn from one of eight disjoint-vocabulary topics and one of
five shared templates, so a sentence's content words are strongly mutually
predictive given the topic. That makes the latent code genuinely useful (it
can carry the topic and slot choices) while leaving an autoregressive decoder
able to fit the corpus reasonably well without it — the regime in which
mean-field training collapses and the regularized objective should not.
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

_TOPICS = {
    "finance": {
        "subject": ("trader", "broker", "banker", "investor"),
        "verb": ("buys", "sells", "audits", "values"),
        "object": ("shares", "bonds", "futures", "options", "loans", "funds", "stakes", "debts"),
        "adjective": ("volatile", "liquid", "solvent", "bullish"),
        "place": ("exchange", "vault", "bourse", "ledger"),
    },
    "weather": {
        "subject": ("storm", "breeze", "cyclone", "drizzle"),
        "verb": ("soaks", "chills", "batters", "floods"),
        "object": ("valley", "coastline", "prairie", "ridge", "foothill", "lagoon", "tundra", "marsh"),
        "adjective": ("humid", "freezing", "overcast", "windy"),
        "place": ("horizon", "seafront", "highland", "lowland"),
    },
    "cooking": {
        "subject": ("chef", "baker", "cook", "apprentice"),
        "verb": ("simmers", "roasts", "seasons", "garnishes"),
        "object": ("broth", "pastry", "risotto", "stew", "casserole", "dumpling", "sauce", "loaf"),
        "adjective": ("savory", "spicy", "tender", "crispy"),
        "place": ("kitchen", "pantry", "oven", "skillet"),
    },
    "football": {
        "subject": ("striker", "keeper", "defender", "winger"),
        "verb": ("kicks", "blocks", "tackles", "volleys"),
        "object": ("ball", "penalty", "corner", "rebound", "cross", "clearance", "equalizer", "header"),
        "adjective": ("decisive", "reckless", "agile", "clinical"),
        "place": ("stadium", "midfield", "touchline", "goalmouth"),
    },
    "orchestra": {
        "subject": ("violinist", "conductor", "cellist", "pianist"),
        "verb": ("plays", "rehearses", "tunes", "performs"),
        "object": ("symphony", "concerto", "sonata", "overture", "prelude", "nocturne", "fugue", "waltz"),
        "adjective": ("melodic", "dissonant", "soaring", "hushed"),
        "place": ("auditorium", "balcony", "podium", "pit"),
    },
    "garden": {
        "subject": ("gardener", "botanist", "beekeeper", "florist"),
        "verb": ("prunes", "waters", "plants", "harvests"),
        "object": ("roses", "tulips", "orchids", "ferns", "daisies", "ivy", "shrubs", "lilies"),
        "adjective": ("blooming", "fragrant", "wilted", "thorny"),
        "place": ("greenhouse", "orchard", "trellis", "meadow"),
    },
    "sailing": {
        "subject": ("sailor", "captain", "navigator", "deckhand"),
        "verb": ("rigs", "steers", "anchors", "moors"),
        "object": ("schooner", "mast", "rudder", "compass", "buoy", "jib", "keel", "mainsail"),
        "adjective": ("seaworthy", "brackish", "nautical", "weathered"),
        "place": ("harbor", "marina", "quay", "lighthouse"),
    },
    "library": {
        "subject": ("librarian", "archivist", "scholar", "scribe"),
        "verb": ("catalogs", "shelves", "indexes", "binds"),
        "object": ("manuscript", "folio", "atlas", "codex", "lexicon", "almanac", "treatise", "scroll"),
        "adjective": ("ancient", "dusty", "illuminated", "rare"),
        "place": ("archive", "annex", "stacks", "carrel"),
    },
}

_TEMPLATES = (
    "the {subject} {verb} the {adjective} {object} .",
    "the {subject} {verb} the {object} in the {place} .",
    "a {adjective} {subject} {verb} the {object} .",
    "the {subject} in the {place} {verb} the {object} .",
    "the {adjective} {subject} {verb} a {object} near the {place} .",
)

_TOPIC_NAMES = tuple(_TOPICS)


def _all_content_words():
    words = []
    for topic in _TOPICS.values():
        for slot_words in topic.values():
            words.extend(slot_words)
    return words


# Disjoint topic vocabularies are what make the topic recoverable from z.
assert len(_all_content_words()) == len(set(_all_content_words()))


def vocabulary_size() -> int:
    function_words = {"the", "a", "in", "near", "."}
    return len(_all_content_words()) + len(function_words)


def generate_corpus(n_sentences: int, seed: int) -> list:
    """Deterministic list of templated sentences."""
    rng = np.random.default_rng(seed)
    sentences = []
    for _ in range(n_sentences):
        topic = _TOPICS[_TOPIC_NAMES[rng.integers(len(_TOPIC_NAMES))]]
        template = _TEMPLATES[rng.integers(len(_TEMPLATES))]
        slots = {slot: words[rng.integers(len(words))] for slot, words in topic.items()}
        sentences.append(template.format(**slots))
    return sentences


def write_splits(out_dir, n_train: int, n_valid: int, n_test: int, seed: int) -> dict:
    """Write train/valid/test files carved from one deterministic draw."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = generate_corpus(n_train + n_valid + n_test, seed)
    paths = {}
    offset = 0
    for split, count in (("train", n_train), ("valid", n_valid), ("test", n_test)):
        path = out_dir / f"{split}.txt"
        path.write_text("\n".join(lines[offset:offset + count]) + "\n", encoding="utf-8")
        paths[split] = path
        offset += count
    return paths


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="write a templated synthetic corpus")
    parser.add_argument("--out-dir", required=True)
    parser.add_argument("--train", type=int, default=5000)
    parser.add_argument("--valid", type=int, default=600)
    parser.add_argument("--test", type=int, default=600)
    parser.add_argument("--seed", type=int, default=7)
    args = parser.parse_args(argv)
    paths = write_splits(args.out_dir, args.train, args.valid, args.test, args.seed)
    for split, path in paths.items():
        print(f"{split}: {path}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
