"""Client-side oblivious transformation.

Detection finds sensitive-attribute mentions with a case-insensitive
longest-match scan over a lexicon of synonyms.  Expansion substitutes the
full value space of every detected attribute class (Cartesian product)
into the detected spans, producing a candidate set whose ORDER is a pure
function of the non-sensitive tokens and the detected classes.  The real
prompt's position inside that set is the client-private index and never
reaches any wire structure.

Canonical ordering is what makes the whole scheme sound: candidates are
sorted by value indices with the class order fixed by the lexicon, so any
member of an equivalence class expands to the identical ordered list.
"""

from __future__ import annotations

import itertools
import json
import logging
import random
from dataclasses import dataclass

from .errors import ConfigError, InputError, InternalError, ProtocolError, TemplateError
from .tensor import Tensor

log = logging.getLogger("oblix.oblivious")

_STRIP_CHARS = ".,;:!?()[]{}\"'`"


@dataclass(frozen=True)
class AttributeClass:
    name: str
    values: tuple[str, ...]                 # canonical surfaces, ordered
    synonyms: dict[str, str]                # lowercase surface -> canonical

    def value_index(self, canonical: str) -> int:
        return self.values.index(canonical)


class AttributeLexicon:
    """Ordered attribute classes with per-value synonym sets."""

    def __init__(self, classes: list[AttributeClass]):
        if not classes:
            raise ConfigError("lexicon needs at least one attribute class")
        seen: dict[str, str] = {}
        for cls in classes:
            if not cls.values:
                raise ConfigError(f"class {cls.name!r} has an empty value space")
            if len(set(cls.values)) != len(cls.values):
                raise ConfigError(f"class {cls.name!r} repeats a value")
            for surface in cls.synonyms:
                if surface in seen:
                    raise ConfigError(
                        f"surface {surface!r} appears in classes "
                        f"{seen[surface]!r} and {cls.name!r}"
                    )
                seen[surface] = cls.name
        self.classes = tuple(classes)
        self._by_name = {c.name: c for c in classes}
        # longest synonym first so multi-token surfaces win the scan
        self._max_ngram = max(
            len(surface.split()) for c in classes for surface in c.synonyms
        )

    def class_named(self, name: str) -> AttributeClass:
        if name not in self._by_name:
            raise ConfigError(f"unknown attribute class {name!r}")
        return self._by_name[name]

    def class_order(self, name: str) -> int:
        return [c.name for c in self.classes].index(name)

    @classmethod
    def from_text(cls, text: str) -> "AttributeLexicon":
        """Parse the plain-text lexicon format:

            [class]
            canonical: synonym, synonym, ...
        """
        classes: list[AttributeClass] = []
        current: str | None = None
        values: list[str] = []
        synonyms: dict[str, str] = {}

        def flush():
            nonlocal values, synonyms
            if current is not None:
                classes.append(AttributeClass(current, tuple(values), dict(synonyms)))
            values, synonyms = [], {}

        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("[") and line.endswith("]"):
                flush()
                current = line[1:-1].strip()
                continue
            if current is None:
                raise ConfigError(f"line {lineno}: value outside any [class]")
            canonical, _, rest = line.partition(":")
            canonical = canonical.strip()
            values.append(canonical)
            synonyms[canonical.lower()] = canonical
            for surface in rest.split(","):
                surface = surface.strip().lower()
                if surface:
                    synonyms[surface] = canonical
        flush()
        return cls(classes)

    @classmethod
    def load(cls, path: str) -> "AttributeLexicon":
        with open(path, encoding="utf-8") as f:
            return cls.from_text(f.read())


DEFAULT_LEXICON_TEXT = """\
# Sensitive-attribute taxonomy: one [class] per section, ordered values,
# each with its accepted surface forms.
[gender]
male: man, men, boy, gentleman, guy
female: woman, women, girl, lady

[age]
young: youthful, teenage
middle-aged: middle aged
old: elderly

[ethnicity]
caucasian:
african:
asian:
indian:
european:
"""


def default_lexicon() -> AttributeLexicon:
    return AttributeLexicon.from_text(DEFAULT_LEXICON_TEXT)


@dataclass(frozen=True)
class Detection:
    """One detected attribute mention: token span, class, canonical value."""

    start: int
    end: int
    attr_class: str
    value: str


def normalize_prompt(prompt: str) -> str:
    return " ".join(prompt.split())


def _split_token(token: str) -> tuple[str, str, str]:
    """Split punctuation off a token: (prefix, core, suffix)."""
    start, end = 0, len(token)
    while start < end and token[start] in _STRIP_CHARS:
        start += 1
    while end > start and token[end - 1] in _STRIP_CHARS:
        end -= 1
    return token[:start], token[start:end], token[end:]


def detect_attributes(prompt: str, lex: AttributeLexicon) -> list[Detection]:
    """Longest-match scan for attribute surfaces, first occurrence per class.

    Matching is case-insensitive and ignores punctuation glued to tokens;
    repeated mentions of an already-detected class are left intact with a
    warning, mirroring how substitution later touches only the first span.
    """
    norm = normalize_prompt(prompt)
    if not norm:
        raise InputError("prompt is empty")
    tokens = norm.split()
    cores = [_split_token(t)[1].lower() for t in tokens]

    surface_map: dict[tuple[str, ...], tuple[str, str]] = {}
    for cls in lex.classes:
        for surface, canonical in cls.synonyms.items():
            surface_map[tuple(surface.split())] = (cls.name, canonical)

    found: dict[str, Detection] = {}
    i = 0
    while i < len(tokens):
        matched = False
        for n in range(min(lex._max_ngram, len(tokens) - i), 0, -1):
            key = tuple(cores[i:i + n])
            if key in surface_map and all(key):
                cls_name, canonical = surface_map[key]
                if cls_name in found:
                    log.warning(
                        "attribute class %r occurs again at token %d; "
                        "only the first mention is transformed", cls_name, i
                    )
                else:
                    found[cls_name] = Detection(i, i + n, cls_name, canonical)
                i += n
                matched = True
                break
        if not matched:
            i += 1
    return sorted(found.values(), key=lambda d: d.start)


@dataclass(frozen=True)
class CandidateSet:
    """Ordered candidate prompts with the client-private real index."""

    prompts: tuple[str, ...]
    real_index: int

    @property
    def size(self) -> int:
        return len(self.prompts)

    @property
    def real_prompt(self) -> str:
        return self.prompts[self.real_index]


def expand_candidates(prompt: str, detections: list[Detection],
                      lex: AttributeLexicon) -> CandidateSet:
    """Substitute every value combination of the detected classes.

    Candidates are ordered lexicographically by value indices with class
    order taken from the lexicon, never from the real prompt, so every
    member of the equivalence class produces the identical list.
    """
    tokens = normalize_prompt(prompt).split()
    if not tokens:
        raise InputError("prompt is empty")
    if not detections:
        return CandidateSet((" ".join(tokens),), 0)

    ordered = sorted(detections, key=lambda d: lex.class_order(d.attr_class))
    spans = [(d.start, d.end) for d in ordered]
    for (a_start, a_end), (b_start, b_end) in itertools.combinations(spans, 2):
        if a_start < b_end and b_start < a_end:
            raise InternalError("detection spans overlap")

    classes = [lex.class_named(d.attr_class) for d in ordered]
    real_values = tuple(d.value for d in ordered)

    prompts: list[str] = []
    real_index = -1
    for combo in itertools.product(*(c.values for c in classes)):
        out = list(tokens)
        # replace each span with the canonical surface, keeping any
        # punctuation that was glued to the span's outermost tokens
        for det, value in sorted(zip(ordered, combo), key=lambda p: -p[0].start):
            prefix = _split_token(out[det.start])[0]
            suffix = _split_token(out[det.end - 1])[2]
            out[det.start:det.end] = [prefix + value + suffix]
        candidate = " ".join(out)
        if not candidate:
            raise InternalError("substitution produced an empty prompt")
        if combo == real_values:
            real_index = len(prompts)
        prompts.append(candidate)
    if real_index < 0:
        raise InternalError("real value combination missing from the product")
    return CandidateSet(tuple(prompts), real_index)


def extract_latent(batch: Tensor, cset: CandidateSet) -> Tensor:
    """Copy out the batch row belonging to the real prompt (client-local)."""
    if batch.shape[0] != cset.size:
        raise ProtocolError(
            f"batch holds {batch.shape[0]} rows, candidate set has {cset.size}"
        )
    return batch.row(cset.real_index)


# ---------------------------------------------------------------------------
# Prompt templates and corpus generation
# ---------------------------------------------------------------------------

DEFAULT_TEMPLATES = (
    "headshots portrait with a $age $ethnicity $gender covered in religious tattoos.",
    "$age $ethnicity $gender in hat Fashion portrait photo",
    "Smiling $age $ethnicity $gender sitting on flower field, Outdoor portrait photo",
    "$age red haired $gender $ethnicity urban portrait photo",
    "Faceshot Portrait of pretty $age $ethnicity $gender wearing a high neck sweater",
    "Closeup portrait photo of a $age $ethnicity $gender, wearing a rugged leather "
    "jacket, captured in soft, golden hour lighting.",
    "RAW photo, closeup, portrait of a $age $ethnicity $gender, wearing minimal "
    "makeup, with a serene expression in a lush botanical garden.",
    "High-quality, face portrait photo of a $age $ethnicity $gender, wearing "
    "glasses, revealing the fine lines on the forehead.",
    "B&W photo of a $age $ethnicity $gender, shot from the side, highlighting "
    "elegant profile and the delicate lines etched across cheeks.",
    "High-quality, closeup portrait photo of a $age $ethnicity $gender, wearing "
    "traditional clothing.",
)


def load_templates(path: str) -> tuple[str, ...]:
    """One template per line; blank lines and # comments ignored."""
    with open(path, encoding="utf-8") as f:
        lines = [ln.strip() for ln in f.read().splitlines()]
    templates = tuple(ln for ln in lines if ln and not ln.startswith("#"))
    if not templates:
        raise TemplateError(f"no templates found in {path}")
    return templates


def fill_template(template: str, assignment: dict[str, str],
                  lex: AttributeLexicon) -> str:
    """Replace $class placeholders with canonical value surfaces."""
    out_tokens: list[str] = []
    for token in template.split():
        prefix, core, suffix = _split_token(token)
        if core.startswith("$"):
            name = core[1:]
            if name not in {c.name for c in lex.classes}:
                raise TemplateError(f"unknown placeholder ${name}")
            if name not in assignment:
                raise TemplateError(f"no value assigned for ${name}")
            out_tokens.append(prefix + assignment[name] + suffix)
        else:
            out_tokens.append(token)
    return " ".join(out_tokens)


def template_classes(template: str, lex: AttributeLexicon) -> list[str]:
    names = []
    for token in template.split():
        core = _split_token(token)[1]
        if core.startswith("$"):
            name = core[1:]
            if name not in {c.name for c in lex.classes}:
                raise TemplateError(f"unknown placeholder ${name}")
            if name not in names:
                names.append(name)
    return names


def generate_corpus(templates: tuple[str, ...], lex: AttributeLexicon,
                    count: int | None = None, seed: int = 0) -> list[dict]:
    """Emit {prompt, attributes} records from the template set.

    The full enumeration (every template crossed with every value
    combination) is deterministic; when ``count`` asks for fewer records a
    seed-pinned sample without replacement is taken.
    """
    records: list[dict] = []
    for template in templates:
        names = template_classes(template, lex)
        spaces = [lex.class_named(n).values for n in names]
        for combo in itertools.product(*spaces):
            assignment = dict(zip(names, combo))
            records.append({
                "prompt": fill_template(template, assignment, lex),
                "attributes": assignment,
            })
    if count is not None and count < len(records):
        rng = random.Random(seed)
        records = rng.sample(records, count)
    return records


def write_corpus(records: list[dict], path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def read_corpus(path: str) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise InputError(f"{path}:{lineno}: not a JSON record ({exc})") \
                    from None
    return records
