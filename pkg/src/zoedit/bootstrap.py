"""Desk-scale subject models: synthetic fact language + corpus generation.

A fact is (subject, relation, object) rendered through several surface
forms and preamble contexts, e.g.

    "the records show the hometown of amara voss arlum"

Every word is one token (explicit word-level vocabulary). Prompts are
subject-final — the relation phrase precedes the subject and the object
directly follows it — so the token that predicts the object is the
subject's last token. That puts the fact lookup squarely inside the
subject position's forward column, which is the site the editor taps and
overwrites; at two layers there is no alternative routing for the model
to hide the association in.

Each fact carries a counterfactual object (another entity from the same
pool) used as the editing target, plus a second "essence" relation about
the same subject: its prompt serves as the preservation prompt, giving
the KL term a same-subject behavior to protect.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .checkpoint import load_checkpoint
from .errors import InputError

EOS = "</s>"

SUBJECT_FIRST = [
    "amara", "boris", "celia", "darek", "elena", "farid", "goran", "hilda",
    "ivo", "jasna", "kenji", "lena", "marek", "nadia", "oskar", "petra",
    "quinn", "rosa", "stefan", "tomas", "ulla", "viktor", "wanda", "xenia",
    "yusuf", "zofia", "alvar", "brina", "cedrik", "dalia",
]
SUBJECT_LAST = [
    "voss", "brandt", "kolar", "mercer", "novak", "soriat", "helder",
    "janov", "kreft", "lindt",
]

PLACES = [
    "arlum", "brivia", "cresk", "dovana", "elmora", "fennick", "gorvale",
    "hastra", "irvale", "jundor", "kelvox", "lumera", "mirven", "norlith",
    "ostrav", "prenna", "quellin", "rostok", "selvara", "tormund",
]
OCCUPATIONS = [
    "baker", "miner", "scribe", "weaver", "smith", "tailor", "fisher",
    "mason", "brewer", "carver", "herder", "trader", "singer", "farmer",
    "potter", "hunter", "sailor", "cooper", "glazier", "tanner",
]
LANGUAGES = [
    "velsh", "taric", "omese", "kirden", "saluvian", "brel", "costran",
    "dovari", "enskel", "fromic", "galvese", "hirtan", "ilmic", "jorese",
    "kelt", "lurian", "morvic", "norsk", "ovian", "pellic",
]
HOBBIES = [
    "chess", "fishing", "carving", "archery", "sailing", "painting",
    "gardening", "singing", "riddles", "dancing", "baking", "foraging",
    "astronomy", "weaving", "juggling", "falconry", "skating", "climbing",
    "brewing", "mapmaking",
]

# surface forms end with the subject; the object directly follows it
RELATIONS = {
    "hometown": {
        "surfaces": [
            "the hometown of {s}",
            "the home region of {s}",
            "the dwelling place of {s}",
        ],
        "pool": PLACES,
    },
    "trade": {
        "surfaces": [
            "the trade of {s}",
            "the craft of {s}",
            "the chosen work of {s}",
        ],
        "pool": OCCUPATIONS,
    },
    "tongue": {
        "surfaces": [
            "the language of {s}",
            "the mother tongue of {s}",
            "the native speech of {s}",
        ],
        "pool": LANGUAGES,
    },
    "pastime": {
        "surfaces": [
            "the hobby of {s}",
            "the pastime of {s}",
            "the favorite pursuit of {s}",
        ],
        "pool": HOBBIES,
    },
}

PREAMBLES = [
    "", "we know that", "it is said that", "everyone says",
    "people recall that", "the records show", "as noted before", "clearly",
    "indeed", "reportedly", "my friend said", "the story goes that",
    "note that", "remember that", "they told me", "as expected", "truly",
    "of course", "folks agree that", "the town knows", "again",
]


class Tokenizer:
    """Word-level tokenizer with an explicit vocabulary (id 0 is EOS)."""

    def __init__(self, words: Sequence[str]):
        if words[0] != EOS:
            words = [EOS] + [w for w in words if w != EOS]
        self.words = list(words)
        self.ids = {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    @property
    def eos_id(self) -> int:
        return 0

    def encode(self, text: str) -> list:
        out = []
        for w in text.split():
            if w not in self.ids:
                raise InputError(f"word {w!r} not in vocabulary")
            out.append(self.ids[w])
        return out

    def decode(self, ids: Sequence[int]) -> str:
        return " ".join(self.words[int(i)] for i in ids)

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.words, f)

    @classmethod
    def load(cls, path: str) -> "Tokenizer":
        with open(path, "r", encoding="utf-8") as f:
            return cls(json.load(f))


@dataclass(frozen=True)
class SyntheticFact:
    subject: str
    relation: str  # key into RELATIONS; the fact being edited
    obj: str
    counterfactual: str  # editing target; always != obj
    essence_relation: str  # a second fact about the subject, never edited
    essence_obj: str

    def prompt(self, surface_index: int = 0) -> str:
        return RELATIONS[self.relation]["surfaces"][surface_index].format(s=self.subject)

    def essence_prompt(self) -> str:
        return RELATIONS[self.essence_relation]["surfaces"][0].format(s=self.subject)

    def n_surfaces(self) -> int:
        return len(RELATIONS[self.relation]["surfaces"])

    def sentences(self) -> list:
        """All preamble x surface renderings of both of the subject's facts
        (>= 20 variants each)."""
        out = []
        for surface_index in range(self.n_surfaces()):
            p = self.prompt(surface_index)
            for pre in PREAMBLES:
                out.append(f"{pre} {p} {self.obj}".strip())
        for surface in RELATIONS[self.essence_relation]["surfaces"]:
            p = surface.format(s=self.subject)
            for pre in PREAMBLES:
                out.append(f"{pre} {p} {self.essence_obj}".strip())
        return out

    def to_dict(self) -> dict:
        return {
            "subject": self.subject,
            "relation": self.relation,
            "object": self.obj,
            "counterfactual": self.counterfactual,
            "essence_relation": self.essence_relation,
            "essence_object": self.essence_obj,
        }


def build_vocab() -> list:
    words = set()
    for pre in PREAMBLES:
        words.update(pre.split())
    for rel in RELATIONS.values():
        for surface in rel["surfaces"]:
            words.update(surface.replace("{s}", "").split())
        words.update(rel["pool"])
    words.update(SUBJECT_FIRST)
    words.update(SUBJECT_LAST)
    return [EOS] + sorted(words)


def generate_corpus(
    n_facts: int,
    seed: int,
    tokenizer: Optional[Tokenizer] = None,
    two_token_subject_fraction: float = 0.3,
) -> tuple:
    """Deterministic synthetic corpus.

    Returns (facts, token sequences, tokenizer). Each fact appears in >= 20
    templated sentence variants; counterfactual objects are drawn from the
    same relation's pool (another fact's object when available) so edit
    targets are in-distribution tokens.
    """
    if n_facts < 1:
        raise InputError("n_facts must be >= 1")
    if n_facts > len(SUBJECT_FIRST):
        raise InputError(f"at most {len(SUBJECT_FIRST)} facts supported")
    rng = np.random.default_rng(seed)
    tokenizer = tokenizer or Tokenizer(build_vocab())

    first = list(SUBJECT_FIRST)
    rng.shuffle(first)
    relations = list(RELATIONS)
    # keep >= 2 facts per primary relation so every counterfactual can be
    # another fact's true object: an in-distribution, well-trained token
    n_rel = max(1, min(len(relations), n_facts // 2))
    assignments = []
    objects = {rel: [] for rel in relations}
    for i in range(n_facts):
        subject = first[i]
        if rng.random() < two_token_subject_fraction:
            subject = f"{subject} {SUBJECT_LAST[int(rng.integers(len(SUBJECT_LAST)))]}"
        relation = relations[i % n_rel]
        pool = [o for o in RELATIONS[relation]["pool"] if o not in objects[relation]]
        obj = pool[int(rng.integers(len(pool)))]
        objects[relation].append(obj)
        assignments.append((subject, relation, obj))

    facts = []
    for i, (subject, relation, obj) in enumerate(assignments):
        siblings = [o for o in objects[relation] if o != obj]
        if siblings:
            counterfactual = siblings[int(rng.integers(len(siblings)))]
        else:  # single fact for this relation: fall back to an unused pool word
            alternatives = [o for o in RELATIONS[relation]["pool"] if o != obj]
            counterfactual = alternatives[int(rng.integers(len(alternatives)))]
        essence_relation = relations[(relations.index(relation) + 1) % len(relations)]
        essence_pool = RELATIONS[essence_relation]["pool"]
        facts.append(
            SyntheticFact(
                subject=subject,
                relation=relation,
                obj=obj,
                counterfactual=counterfactual,
                essence_relation=essence_relation,
                essence_obj=essence_pool[int(rng.integers(len(essence_pool)))],
            )
        )

    sentences = []
    for fact in facts:
        sentences.extend(fact.sentences())
    rng.shuffle(sentences)
    sequences = [tokenizer.encode(s) for s in sentences]
    return facts, sequences, tokenizer


def eval_records(facts: Sequence[SyntheticFact], n_locality: int = 2,
                 layer: int = 0, seed: int = 0) -> list:
    """JSONL-ready eval cases: counterfactual target, the other surface
    forms as rephrases, and other facts' prompts (true continuation) as
    locality probes."""
    if len(facts) < 2:
        raise InputError("need at least two facts for locality probes")
    rng = np.random.default_rng(seed)
    records = []
    for i, fact in enumerate(facts):
        others = [j for j in range(len(facts)) if j != i
                  and f" {fact.subject} " not in f" {facts[j].prompt()} "]
        picks = rng.choice(len(others), size=min(n_locality, len(others)), replace=False)
        probes = []
        for p in picks:
            other = facts[others[int(p)]]
            probes.append({"prompt": other.prompt(), "expected": other.obj})
        records.append(
            {
                "subject": fact.subject,
                "prompt": fact.prompt(0),
                "target": fact.counterfactual,
                "preservation_prompt": fact.essence_prompt(),
                "rephrases": [fact.prompt(k) for k in range(1, fact.n_surfaces())],
                "locality_probes": probes,
                "layer": layer,
            }
        )
    return records


def token_stream(sequences: Sequence[Sequence[int]], eos_id: int = 0) -> np.ndarray:
    """Concatenate sentences into one training stream with EOS separators."""
    out = []
    for seq in sequences:
        out.extend(seq)
        out.append(eos_id)
    return np.asarray(out, dtype=np.int64)


def import_checkpoint(path: str):
    """Load a model bundle from the container format (see checkpoint.py)."""
    return load_checkpoint(path)
