"""Deterministic synthetic attribute world: latent slot assignments, a phrase
grammar with paraphrase templates, derived feature vectors, and the
ground-truth oracle used to judge reference games without human labels.

Features are a fixed random linear mix of the per-slot one-hot encoding plus
Gaussian noise, so listeners must invert the mixing but can reach high
accuracy at desk scale. An optional per-slot signal decay along the saliency
order makes later-listed attributes harder to ground, giving the position
analysis a known asymmetry to detect.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import (
    AnnotationRecord,
    AttributePhrase,
    FeatureStore,
    PhrasePair,
    save_annotations,
    save_features,
    tokenize_phrase,
)
from .errors import InfeasibleWorld, ParseError

RESAMPLE_LIMIT = 1000


@dataclass(frozen=True)
class WorldSpec:
    """Configuration of the attribute world.

    slots: ordered (name, values) pairs; saliency_order ranks slots from most
    to least salient; saliency_decay < 1 attenuates the feature signal of
    later-ranked slots (None or 1.0 disables the difficulty gradient).
    """

    slots: tuple[tuple[str, tuple[str, ...]], ...]
    saliency_order: tuple[str, ...]
    feature_dim: int = 64
    noise_sigma: float = 0.1
    seed: int = 0
    saliency_decay: float | None = None

    def __post_init__(self):
        names = [name for name, _ in self.slots]
        if len(self.slots) < 5:
            raise ParseError(f"need >= 5 slots, got {len(self.slots)}")
        if any(len(values) < 2 for _, values in self.slots):
            raise ParseError("every slot needs >= 2 values")
        if sorted(self.saliency_order) != sorted(names):
            raise ParseError("saliency_order must be a permutation of slot names")
        if self.feature_dim < self.one_hot_width:
            raise ParseError(
                f"feature_dim {self.feature_dim} < one-hot width {self.one_hot_width}"
            )

    @property
    def slot_names(self) -> list[str]:
        return [name for name, _ in self.slots]

    @property
    def one_hot_width(self) -> int:
        return sum(len(values) for _, values in self.slots)

    def values_of(self, slot: str) -> tuple[str, ...]:
        for name, values in self.slots:
            if name == slot:
                return values
        raise ParseError(f"unknown slot {slot!r}")

    def saliency_rank(self, slot: str) -> int:
        return self.saliency_order.index(slot)

    def to_json(self) -> dict:
        return {
            "slots": [[name, list(values)] for name, values in self.slots],
            "saliency_order": list(self.saliency_order),
            "feature_dim": self.feature_dim,
            "noise_sigma": self.noise_sigma,
            "seed": self.seed,
            "saliency_decay": self.saliency_decay,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "WorldSpec":
        return cls(
            slots=tuple((name, tuple(values)) for name, values in obj["slots"]),
            saliency_order=tuple(obj["saliency_order"]),
            feature_dim=int(obj["feature_dim"]),
            noise_sigma=float(obj["noise_sigma"]),
            seed=int(obj["seed"]),
            saliency_decay=obj.get("saliency_decay"),
        )


@dataclass(frozen=True)
class SynthObject:
    """One generated object: latent assignment plus derived feature vector."""

    object_id: str
    assignment: dict[str, str]
    feature: np.ndarray


class Grammar:
    """Surface templates per (slot, value); every surface parses back to
    exactly one (slot, value)."""

    def __init__(self, templates: dict[tuple[str, str], tuple[str, ...]]):
        self.templates = templates
        self._parse: dict[tuple[str, ...], tuple[str, str]] = {}
        for (slot, value), surfaces in templates.items():
            if not surfaces:
                raise ParseError(f"({slot},{value}) has no surface template")
            for surface in surfaces:
                tokens = tuple(surface.split())
                if tokens in self._parse:
                    raise ParseError(f"surface {surface!r} used by two slot values")
                self._parse[tokens] = (slot, value)

    def surfaces(self, slot: str, value: str) -> tuple[str, ...]:
        return self.templates[(slot, value)]

    def parse(self, tokens: tuple[str, ...] | list[str]) -> tuple[str, str] | None:
        return self._parse.get(tuple(tokens))

    def all_surfaces(self) -> list[str]:
        return [" ".join(toks) for toks in self._parse]

    def surface_tokens(self) -> set[str]:
        out: set[str] = set()
        for toks in self._parse:
            out.update(toks)
        return out

    def to_json(self) -> dict:
        return {
            "templates": [
                {"slot": slot, "value": value, "surfaces": list(surfaces)}
                for (slot, value), surfaces in self.templates.items()
            ]
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Grammar":
        templates = {
            (t["slot"], t["value"]): tuple(t["surfaces"]) for t in obj["templates"]
        }
        return cls(templates)


DEFAULT_SLOTS: tuple[tuple[str, tuple[str, ...]], ...] = (
    ("body_color", ("red", "blue", "green", "white", "black")),
    ("size", ("small", "medium", "large")),
    ("nose", ("pointy", "round")),
    ("engines", ("one", "two", "three")),
    ("tail", ("flat", "tall")),
    ("background", ("sky", "grass", "concrete")),
)

# paraphrase templates start with distinct tokens so decoded variants of one
# value compete in a beam from the first step instead of riding one prefix
_DEFAULT_TEMPLATES: dict[tuple[str, str], tuple[str, ...]] = {
    ("body_color", "red"): ("red body", "reddish paint", "cherry colored hull"),
    ("body_color", "blue"): ("blue body", "bluish paint", "navy colored hull"),
    ("body_color", "green"): ("green body", "greenish paint", "olive colored hull"),
    ("body_color", "white"): ("white body", "whitish paint", "ivory colored hull"),
    ("body_color", "black"): ("black body", "blackish paint", "charcoal colored hull"),
    ("size", "small"): ("small plane", "tiny aircraft", "compact frame"),
    ("size", "medium"): ("medium plane", "midsize aircraft", "average frame"),
    ("size", "large"): ("large plane", "big aircraft", "jumbo frame"),
    ("nose", "pointy"): ("pointy nose", "sharp front", "needle tip"),
    ("nose", "round"): ("round nose", "blunt front", "stubby tip"),
    ("engines", "one"): ("one engine", "single motor", "lone turbine"),
    ("engines", "two"): ("two engines", "twin motors", "dual turbines"),
    ("engines", "three"): ("three engines", "triple motors", "trio of turbines"),
    ("tail", "flat"): ("flat tail", "low fin", "short stabilizer"),
    ("tail", "tall"): ("tall tail", "high fin", "raised stabilizer"),
    ("background", "sky"): ("sky background", "flying in air", "clouds behind"),
    ("background", "grass"): ("grass background", "parked on lawn", "field behind"),
    ("background", "concrete"): ("concrete background", "standing on runway", "tarmac behind"),
}


def default_world_spec(seed: int = 0, saliency_decay: float | None = None) -> WorldSpec:
    return WorldSpec(
        slots=DEFAULT_SLOTS,
        saliency_order=tuple(name for name, _ in DEFAULT_SLOTS),
        feature_dim=64,
        noise_sigma=0.1,
        seed=seed,
        saliency_decay=saliency_decay,
    )


def default_grammar() -> Grammar:
    return Grammar(dict(_DEFAULT_TEMPLATES))


# -- features -----------------------------------------------------------------

def _one_hot_offsets(spec: WorldSpec) -> dict[str, int]:
    offsets = {}
    pos = 0
    for name, values in spec.slots:
        offsets[name] = pos
        pos += len(values)
    return offsets


def projection_matrix(spec: WorldSpec) -> np.ndarray:
    """Fixed mixing matrix derived from the world seed only."""
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    width = spec.one_hot_width
    return rng.normal(0.0, 1.0 / np.sqrt(width), size=(width, spec.feature_dim)).astype(
        np.float64
    )


def slot_strengths(spec: WorldSpec) -> dict[str, float]:
    if spec.saliency_decay is None or spec.saliency_decay == 1.0:
        return {name: 1.0 for name in spec.slot_names}
    return {
        name: float(spec.saliency_decay) ** spec.saliency_rank(name)
        for name in spec.slot_names
    }


def encode_one_hot(spec: WorldSpec, assignment: dict[str, str]) -> np.ndarray:
    offsets = _one_hot_offsets(spec)
    strengths = slot_strengths(spec)
    vec = np.zeros(spec.one_hot_width, dtype=np.float64)
    for name, values in spec.slots:
        value = assignment[name]
        vec[offsets[name] + values.index(value)] = strengths[name]
    return vec


def make_feature(
    spec: WorldSpec, projection: np.ndarray, assignment: dict[str, str], rng: np.random.Generator
) -> np.ndarray:
    clean = encode_one_hot(spec, assignment) @ projection
    noise = rng.normal(0.0, spec.noise_sigma, size=spec.feature_dim)
    return (clean + noise).astype(np.float32)


# -- generation ----------------------------------------------------------------

def sample_assignment(spec: WorldSpec, rng: np.random.Generator) -> dict[str, str]:
    return {
        name: values[int(rng.integers(len(values)))] for name, values in spec.slots
    }


def differing_slots(spec: WorldSpec, a: dict[str, str], b: dict[str, str]) -> list[str]:
    """Slot names where a and b differ, earliest saliency rank first."""
    diff = [name for name in spec.slot_names if a[name] != b[name]]
    diff.sort(key=spec.saliency_rank)
    return diff


@dataclass
class SynthDataset:
    spec: WorldSpec
    grammar: Grammar
    records: dict[str, list[AnnotationRecord]]
    objects: dict[str, SynthObject]
    features: FeatureStore

    def objects_of(self, record: AnnotationRecord) -> tuple[SynthObject, SynthObject]:
        return self.objects[record.image_a], self.objects[record.image_b]


def generate_dataset(
    spec: WorldSpec,
    n_pairs: dict[str, int],
    grammar: Grammar | None = None,
    min_differing: int = 5,
) -> SynthDataset:
    """Generate annotation splits whose records pair objects differing in at
    least min_differing slots; the five phrase pairs describe the five
    earliest differing slots in saliency order at positions 1..5.

    Fully deterministic in (spec, n_pairs): same inputs give identical
    records, features, and object assignments.
    """
    grammar = grammar or default_grammar()
    projection = projection_matrix(spec)
    objects: dict[str, SynthObject] = {}
    records: dict[str, list[AnnotationRecord]] = {}

    for split_index, (split, count) in enumerate(n_pairs.items()):
        rng = np.random.Generator(np.random.PCG64([spec.seed, 7_919, split_index]))
        split_records = []
        for pair_index in range(count):
            assign_a, assign_b, diff = _sample_pair(spec, rng, min_differing)
            id_a = f"{split}-{pair_index:05d}-a"
            id_b = f"{split}-{pair_index:05d}-b"
            obj_a = SynthObject(id_a, assign_a, make_feature(spec, projection, assign_a, rng))
            obj_b = SynthObject(id_b, assign_b, make_feature(spec, projection, assign_b, rng))
            objects[id_a] = obj_a
            objects[id_b] = obj_b
            pairs = []
            for position, slot in enumerate(diff[:5], start=1):
                left = _render_phrase(grammar, slot, assign_a[slot], rng)
                right = _render_phrase(grammar, slot, assign_b[slot], rng)
                pairs.append(PhrasePair(left=left, right=right, position=position))
            split_records.append(
                AnnotationRecord(
                    pair_id=f"{split}-{pair_index:05d}",
                    image_a=id_a,
                    image_b=id_b,
                    phrase_pairs=tuple(pairs),
                )
            )
        records[split] = split_records

    ids = list(objects.keys())
    matrix = np.stack([objects[i].feature for i in ids]) if ids else np.zeros((0, spec.feature_dim), np.float32)
    features = FeatureStore(ids=ids, matrix=matrix)
    return SynthDataset(spec=spec, grammar=grammar, records=records, objects=objects, features=features)


def _sample_pair(spec: WorldSpec, rng: np.random.Generator, min_differing: int):
    for _ in range(RESAMPLE_LIMIT):
        a = sample_assignment(spec, rng)
        b = sample_assignment(spec, rng)
        diff = differing_slots(spec, a, b)
        if len(diff) >= min_differing:
            return a, b, diff
    raise InfeasibleWorld(
        f"{RESAMPLE_LIMIT} consecutive samples never differed in {min_differing} slots"
    )


def _render_phrase(
    grammar: Grammar, slot: str, value: str, rng: np.random.Generator
) -> AttributePhrase:
    surfaces = grammar.surfaces(slot, value)
    surface = surfaces[int(rng.integers(len(surfaces)))]
    return tokenize_phrase(surface)


# -- ground-truth oracle ---------------------------------------------------------

LEFT = "left"
RIGHT = "right"
AMBIGUOUS = "ambiguous"


def oracle_ground(
    grammar: Grammar,
    phrase_tokens: tuple[str, ...] | list[str],
    obj_left: SynthObject,
    obj_right: SynthObject,
) -> str:
    """Ground a phrase against two objects using the latent assignments.

    Returns "left" when only the left object carries the described value,
    "right" for the mirror case, and "ambiguous" when the phrase does not
    parse or fails to separate the pair.
    """
    parsed = grammar.parse(phrase_tokens)
    if parsed is None:
        return AMBIGUOUS
    slot, value = parsed
    match_left = obj_left.assignment.get(slot) == value
    match_right = obj_right.assignment.get(slot) == value
    if match_left and not match_right:
        return LEFT
    if match_right and not match_left:
        return RIGHT
    return AMBIGUOUS


class OracleListener:
    """Listener-shaped wrapper over the grammar oracle: probability 1/0 for a
    clean left/right grounding, 0.5 when ambiguous. Like a simple listener it
    reads only the first half of a pair sequence."""

    def __init__(self, grammar: Grammar, objects: dict[str, SynthObject]):
        self.grammar = grammar
        self.objects = objects

    def p_left(
        self, phrase_tokens: tuple[str, ...] | list[str], image_left: str, image_right: str
    ) -> float:
        tokens = list(phrase_tokens)
        if "vs" in tokens:
            tokens = tokens[: tokens.index("vs")]
        if not tokens:
            return 0.5
        verdict = oracle_ground(
            self.grammar, tokens, self.objects[image_left], self.objects[image_right]
        )
        if verdict == LEFT:
            return 1.0
        if verdict == RIGHT:
            return 0.0
        return 0.5


# -- category sampling (for classification / explanation experiments) ------------

@dataclass
class CategoryDataset:
    spec: WorldSpec
    categories: list[dict[str, str]]
    labels: dict[str, int]
    objects: dict[str, SynthObject]
    features: FeatureStore
    train_ids: list[str]
    test_ids: list[str]


def generate_categories(
    spec: WorldSpec,
    n_categories: int,
    n_train: int,
    n_test: int,
    seed: int,
    grammar: Grammar | None = None,
) -> CategoryDataset:
    """Sample distinct latent prototypes and draw noisy instances of each.

    Every instance of a category shares its full slot assignment; only the
    feature noise varies, so categories are linearly separable over the
    latent indicators by construction.
    """
    projection = projection_matrix(spec)
    rng = np.random.Generator(np.random.PCG64([seed, 104_729]))
    categories: list[dict[str, str]] = []
    seen = set()
    for _ in range(RESAMPLE_LIMIT):
        if len(categories) == n_categories:
            break
        cand = sample_assignment(spec, rng)
        key = tuple(sorted(cand.items()))
        if key not in seen:
            seen.add(key)
            categories.append(cand)
    if len(categories) < n_categories:
        raise InfeasibleWorld(f"could not sample {n_categories} distinct categories")

    objects: dict[str, SynthObject] = {}
    labels: dict[str, int] = {}
    train_ids: list[str] = []
    test_ids: list[str] = []
    for label, assignment in enumerate(categories):
        for i in range(n_train + n_test):
            oid = f"cat{label:02d}-{i:04d}"
            objects[oid] = SynthObject(
                oid, assignment, make_feature(spec, projection, assignment, rng)
            )
            labels[oid] = label
            (train_ids if i < n_train else test_ids).append(oid)
    ids = list(objects.keys())
    matrix = np.stack([objects[i].feature for i in ids])
    return CategoryDataset(
        spec=spec,
        categories=categories,
        labels=labels,
        objects=objects,
        features=FeatureStore(ids=ids, matrix=matrix),
        train_ids=train_ids,
        test_ids=test_ids,
    )


def write_categories(cats: CategoryDataset, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_features(cats.features, out / "features.bin")
    with open(out / "objects.jsonl", "w", encoding="utf-8") as fh:
        for oid in cats.features.ids:
            fh.write(
                json.dumps(
                    {
                        "object_id": oid,
                        "assignment": cats.objects[oid].assignment,
                        "label": cats.labels[oid],
                        "split": "train" if oid in set(cats.train_ids) else "test",
                    },
                    separators=(",", ":"),
                )
                + "\n"
            )
    meta = {
        "spec": cats.spec.to_json(),
        "categories": cats.categories,
        "n_train": len(cats.train_ids),
        "n_test": len(cats.test_ids),
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")


def load_categories(path: str | Path) -> CategoryDataset:
    from .data import load_features

    root = Path(path)
    meta = json.loads((root / "meta.json").read_text(encoding="utf-8"))
    spec = WorldSpec.from_json(meta["spec"])
    features = load_features(root / "features.bin")
    objects: dict[str, SynthObject] = {}
    labels: dict[str, int] = {}
    train_ids: list[str] = []
    test_ids: list[str] = []
    with open(root / "objects.jsonl", "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            oid = obj["object_id"]
            objects[oid] = SynthObject(oid, dict(obj["assignment"]), features.get(oid))
            labels[oid] = int(obj["label"])
            (train_ids if obj["split"] == "train" else test_ids).append(oid)
    return CategoryDataset(
        spec=spec,
        categories=[dict(c) for c in meta["categories"]],
        labels=labels,
        objects=objects,
        features=features,
        train_ids=train_ids,
        test_ids=test_ids,
    )


# -- on-disk layout ----------------------------------------------------------------

def write_dataset(dataset: SynthDataset, out_dir: str | Path, render: bool = False,
                  image_size: int = 128) -> None:
    """Emit the annotation/feature formats plus a manifest sufficient to
    rebuild the oracle (spec, grammar, latent assignments)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for split, records in dataset.records.items():
        save_annotations(records, out / f"{split}.jsonl")
    save_features(dataset.features, out / "features.bin")
    with open(out / "objects.jsonl", "w", encoding="utf-8") as fh:
        for oid in dataset.features.ids:
            obj = dataset.objects[oid]
            fh.write(
                json.dumps(
                    {"object_id": oid, "assignment": obj.assignment}, separators=(",", ":")
                )
                + "\n"
            )
    manifest = {
        "spec": dataset.spec.to_json(),
        "grammar": dataset.grammar.to_json(),
        "splits": {split: len(records) for split, records in dataset.records.items()},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    if render:
        from .render import render_image

        image_dir = out / "images"
        image_dir.mkdir(exist_ok=True)
        for oid in dataset.features.ids:
            render_image(dataset.objects[oid], image_size).save(image_dir / f"{oid}.png")


def load_dataset(path: str | Path) -> SynthDataset:
    """Reload a generated dataset directory, reconstructing the oracle."""
    from .data import load_annotations, load_features

    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    spec = WorldSpec.from_json(manifest["spec"])
    grammar = Grammar.from_json(manifest["grammar"])
    features = load_features(root / "features.bin")
    objects: dict[str, SynthObject] = {}
    with open(root / "objects.jsonl", "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            oid = obj["object_id"]
            objects[oid] = SynthObject(oid, dict(obj["assignment"]), features.get(oid))
    records = {
        split: load_annotations(root / f"{split}.jsonl") for split in manifest["splits"]
    }
    return SynthDataset(spec=spec, grammar=grammar, records=records, objects=objects,
                        features=features)
