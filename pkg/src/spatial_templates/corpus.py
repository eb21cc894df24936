"""Corpus ingestion and preprocessing for spatial-template learning.

Handles scene-graph annotation parsing, the explicit/implicit relation split,
coordinate normalization, horizontal mirroring, vocabulary construction,
cross-validation and generalized splits, and synthetic corpus generation for
desk-scale experiments.
"""
from __future__ import annotations

import gzip
import hashlib
import io
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)


class CorpusError(ValueError):
    """Raised for malformed inputs or violated preprocessing contracts."""


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Box:
    """Axis-aligned box as center plus half-extents in normalized units.

    Corpus boxes satisfy 0 <= center <= 1 and half extents >= 0; model
    predictions reuse this shape but are not clipped to the unit square.
    """

    center_x: float
    center_y: float
    half_w: float
    half_h: float

    def corners(self) -> tuple[float, float, float, float]:
        """Return (x0, y0, x1, y1)."""
        return (
            self.center_x - self.half_w,
            self.center_y - self.half_h,
            self.center_x + self.half_w,
            self.center_y + self.half_h,
        )

    def area(self) -> float:
        return 4.0 * self.half_w * self.half_h


@dataclass(frozen=True)
class Instance:
    """One supervised example: a text triplet with subject and object boxes."""

    subject_word: str
    relation_word: str
    object_word: str
    subject_box: Box
    object_box: Box
    mirrored: bool
    source_id: str

    @property
    def triplet(self) -> tuple[str, str, str]:
        return (self.subject_word, self.relation_word, self.object_word)

    def to_json_dict(self) -> dict:
        return {
            "id": self.source_id,
            "s": self.subject_word,
            "r": self.relation_word,
            "o": self.object_word,
            "s_box": [self.subject_box.center_x, self.subject_box.center_y,
                      self.subject_box.half_w, self.subject_box.half_h],
            "o_box": [self.object_box.center_x, self.object_box.center_y,
                      self.object_box.half_w, self.object_box.half_h],
            "mirrored": self.mirrored,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "Instance":
        return cls(
            subject_word=d["s"],
            relation_word=d["r"],
            object_word=d["o"],
            subject_box=Box(*d["s_box"]),
            object_box=Box(*d["o_box"]),
            mirrored=bool(d["mirrored"]),
            source_id=str(d["id"]),
        )


@dataclass(frozen=True)
class RawRecord:
    """Parsed annotation before normalization: pixel boxes as (x, y, w, h)."""

    subject: str
    relation: str
    object_: str
    subject_box_px: tuple[float, float, float, float]
    object_box_px: tuple[float, float, float, float]
    img_w: float
    img_h: float
    source_id: str


@dataclass
class IngestStats:
    parsed: int = 0
    skipped_malformed: int = 0
    skipped_missing_box: int = 0
    clipped_boxes: int = 0
    rejected_bad_image: int = 0
    duplicate_after_first: int = 0

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class Vocabulary:
    """Ordered token set with stable indices for one input role."""

    role: str
    tokens: tuple[str, ...]
    index: dict = field(hash=False, compare=False)

    @classmethod
    def build(cls, role: str, tokens: Iterable[str]) -> "Vocabulary":
        ordered: list[str] = []
        seen: set[str] = set()
        for tok in tokens:
            if tok not in seen:
                seen.add(tok)
                ordered.append(tok)
        return cls(role=role, tokens=tuple(ordered),
                   index={t: i for i, t in enumerate(ordered)})

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def index_of(self, token: str) -> int:
        try:
            return self.index[token]
        except KeyError:
            raise CorpusError(f"token {token!r} not in {self.role} vocabulary") from None


@dataclass
class SplitPlan:
    """Named instance-id lists describing an evaluation regime.

    kind 'cv' fills `folds` (per-fold test ids); the generalized kinds fill
    `train_ids`/`test_ids` plus the held-out triplet or word list.
    """

    kind: str  # 'cv' | 'generalized_triplets' | 'generalized_words'
    seed: int | None = None
    k: int | None = None
    folds: list[list[str]] | None = None
    train_ids: list[str] | None = None
    test_ids: list[str] | None = None
    held_out_triplets: list[tuple[str, str, str]] | None = None
    held_out_words: list[str] | None = None

    def to_json_dict(self) -> dict:
        d = {"kind": self.kind, "seed": self.seed, "k": self.k,
             "folds": self.folds, "train_ids": self.train_ids,
             "test_ids": self.test_ids,
             "held_out_triplets": [list(t) for t in self.held_out_triplets]
             if self.held_out_triplets is not None else None,
             "held_out_words": self.held_out_words}
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "SplitPlan":
        trips = d.get("held_out_triplets")
        return cls(
            kind=d["kind"], seed=d.get("seed"), k=d.get("k"),
            folds=d.get("folds"), train_ids=d.get("train_ids"),
            test_ids=d.get("test_ids"),
            held_out_triplets=[tuple(t) for t in trips] if trips is not None else None,
            held_out_words=d.get("held_out_words"),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), sort_keys=True, indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "SplitPlan":
        return cls.from_json_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# Token handling and the explicit-preposition stoplist
# ---------------------------------------------------------------------------

def normalize_token(token: str) -> str:
    """Lowercase, trim, and collapse internal whitespace to single spaces."""
    return " ".join(token.lower().split())


def _read_wordlist(text: str) -> list[str]:
    words = []
    for line in text.splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            words.append(normalize_token(line))
    return words


def load_stoplist(path: str | Path | None = None) -> frozenset[str]:
    """Load the explicit-preposition stoplist (packaged default if no path)."""
    if path is None:
        text = resources.files("spatial_templates.data").joinpath(
            "explicit_prepositions.txt").read_text()
    else:
        text = Path(path).read_text()
    words = _read_wordlist(text)
    if not words:
        raise CorpusError("stoplist is empty")
    return frozenset(words)


def load_generalized_words(path: str | Path | None = None) -> list[str]:
    """Load the held-out word list for the generalized-words regime."""
    if path is None:
        text = resources.files("spatial_templates.data").joinpath(
            "generalized_words.txt").read_text()
    else:
        text = Path(path).read_text()
    words = _read_wordlist(text)
    if not words:
        raise CorpusError("held-out word list is empty")
    return words


def stoplist_sha256(stoplist: Iterable[str]) -> str:
    """Order-independent hash of a stoplist, used for provenance checks."""
    canon = "\n".join(sorted(set(stoplist))).encode("utf-8")
    return hashlib.sha256(canon).hexdigest()


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

def _open_text(source) -> io.TextIOBase:
    if hasattr(source, "read"):
        return source
    path = Path(source)
    if path.suffix == ".gz":
        return io.TextIOWrapper(gzip.open(path, "rb"), encoding="utf-8")
    return open(path, "r", encoding="utf-8")


def load_vg_image_meta(source) -> dict[int, tuple[float, float]]:
    """Read the companion image-metadata JSON: image_id -> (width, height)."""
    with _open_text(source) as fh:
        data = json.load(fh)
    meta = {}
    for entry in data:
        meta[int(entry["image_id"])] = (float(entry["width"]), float(entry["height"]))
    return meta


def _vg_entity_name(entity: dict) -> str:
    if "names" in entity and entity["names"]:
        return str(entity["names"][0])
    return str(entity.get("name", ""))


def _vg_entity_box(entity: dict) -> tuple[float, float, float, float] | None:
    try:
        return (float(entity["x"]), float(entity["y"]),
                float(entity["w"]), float(entity["h"]))
    except (KeyError, TypeError, ValueError):
        return None


def parse_scene_graph(source, fmt: str, strict: bool = False,
                      image_meta: dict[int, tuple[float, float]] | None = None,
                      ) -> tuple[list[RawRecord], IngestStats]:
    """Parse annotations into raw records with pixel boxes.

    Formats: 'canonical_jsonl' (one object per line, keys s/r/o, s_box/o_box
    as [x, y, w, h] pixels, img as [width, height]) and 'vg_relationships'
    (relationship dump plus the separate image-metadata file for dimensions).

    Under lenient mode malformed records are skipped and counted; strict mode
    raises on the first malformed record. Records missing either box are
    always skipped and counted.
    """
    if fmt == "canonical_jsonl":
        return _parse_canonical(source, strict)
    if fmt == "vg_relationships":
        if image_meta is None:
            raise CorpusError("vg_relationships format requires image_meta "
                              "(see load_vg_image_meta)")
        return _parse_vg(source, strict, image_meta)
    raise CorpusError(f"unknown input format {fmt!r}")


def _parse_canonical(source, strict: bool) -> tuple[list[RawRecord], IngestStats]:
    records: list[RawRecord] = []
    stats = IngestStats()
    with _open_text(source) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                s = normalize_token(str(obj["s"]))
                r = normalize_token(str(obj["r"]))
                o = normalize_token(str(obj["o"]))
                img = obj["img"]
                img_w, img_h = float(img[0]), float(img[1])
            except (json.JSONDecodeError, KeyError, IndexError, TypeError, ValueError) as exc:
                if strict:
                    raise CorpusError(f"malformed record at line {lineno}: {exc}") from exc
                stats.skipped_malformed += 1
                continue
            s_box = obj.get("s_box")
            o_box = obj.get("o_box")
            if not _valid_px_box(s_box) or not _valid_px_box(o_box):
                stats.skipped_missing_box += 1
                continue
            records.append(RawRecord(
                subject=s, relation=r, object_=o,
                subject_box_px=tuple(float(v) for v in s_box),
                object_box_px=tuple(float(v) for v in o_box),
                img_w=img_w, img_h=img_h,
                source_id=f"line-{lineno}",
            ))
            stats.parsed += 1
    return records, stats


def _valid_px_box(box) -> bool:
    if not isinstance(box, (list, tuple)) or len(box) != 4:
        return False
    try:
        [float(v) for v in box]
    except (TypeError, ValueError):
        return False
    return True


def _parse_vg(source, strict: bool,
              image_meta: dict[int, tuple[float, float]],
              ) -> tuple[list[RawRecord], IngestStats]:
    records: list[RawRecord] = []
    stats = IngestStats()
    with _open_text(source) as fh:
        data = json.load(fh)
    for image in data:
        try:
            image_id = int(image["image_id"])
            rels = image.get("relationships", [])
        except (KeyError, TypeError, ValueError) as exc:
            if strict:
                raise CorpusError(f"malformed image entry: {exc}") from exc
            stats.skipped_malformed += 1
            continue
        dims = image_meta.get(image_id)
        if dims is None:
            if strict:
                raise CorpusError(f"image {image_id} missing from image metadata")
            stats.skipped_malformed += len(rels)
            continue
        img_w, img_h = dims
        for ri, rel in enumerate(rels):
            try:
                predicate = normalize_token(str(rel["predicate"]))
                subj = rel["subject"]
                obj = rel["object"]
                s_name = normalize_token(_vg_entity_name(subj))
                o_name = normalize_token(_vg_entity_name(obj))
            except (KeyError, TypeError) as exc:
                if strict:
                    raise CorpusError(
                        f"malformed relationship in image {image_id}: {exc}") from exc
                stats.skipped_malformed += 1
                continue
            if not s_name or not o_name or not predicate:
                stats.skipped_malformed += 1
                if strict:
                    raise CorpusError(f"empty token in image {image_id}")
                continue
            s_box = _vg_entity_box(subj)
            o_box = _vg_entity_box(obj)
            if s_box is None or o_box is None:
                stats.skipped_missing_box += 1
                continue
            rel_id = rel.get("relationship_id", ri)
            records.append(RawRecord(
                subject=s_name, relation=predicate, object_=o_name,
                subject_box_px=s_box, object_box_px=o_box,
                img_w=img_w, img_h=img_h,
                source_id=f"vg-{image_id}-{rel_id}",
            ))
            stats.parsed += 1
    return records, stats


# ---------------------------------------------------------------------------
# Explicit / implicit partition
# ---------------------------------------------------------------------------

def partition_explicit(records: Sequence[RawRecord],
                       stoplist: frozenset[str],
                       ) -> tuple[list[RawRecord], list[RawRecord]]:
    """Split records into (implicit, explicit) by relation-phrase tokens.

    A record is explicit when any whitespace-separated token of its relation
    phrase appears in the stoplist ("standing next to" is explicit via
    "next").
    """
    if not stoplist:
        raise CorpusError("stoplist must be non-empty")
    implicit: list[RawRecord] = []
    explicit: list[RawRecord] = []
    for rec in records:
        if any(tok in stoplist for tok in rec.relation.split()):
            explicit.append(rec)
        else:
            implicit.append(rec)
    return implicit, explicit


def filter_embeddable(records: Sequence[RawRecord],
                      available: set[str],
                      ) -> tuple[list[RawRecord], int]:
    """Keep records whose whole triplet has word vectors available."""
    kept = [r for r in records
            if r.subject in available and r.relation in available
            and r.object_ in available]
    return kept, len(records) - len(kept)


# ---------------------------------------------------------------------------
# Normalization and mirroring
# ---------------------------------------------------------------------------

def _clip_px_box(box: tuple[float, float, float, float], img_w: float,
                 img_h: float) -> tuple[tuple[float, float, float, float], bool]:
    x, y, w, h = box
    x0, y0 = max(x, 0.0), max(y, 0.0)
    x1, y1 = min(x + w, img_w), min(y + h, img_h)
    x1, y1 = max(x1, x0), max(y1, y0)
    clipped = (x0, y0, x1 - x0, y1 - y0)
    changed = clipped != (x, y, w, h)
    return clipped, changed


def normalize(record: RawRecord) -> Instance:
    """Convert pixel corner+size boxes to normalized center+half-extent form.

    x-coordinates and widths divide by image width, y and heights by image
    height. Boxes reaching outside the image are clipped to its bounds first.
    """
    if record.img_w <= 0 or record.img_h <= 0:
        raise CorpusError(
            f"record {record.source_id}: non-positive image dimensions "
            f"({record.img_w}, {record.img_h})")

    def to_box(px_box: tuple[float, float, float, float]) -> Box:
        x, y, w, h = px_box
        return Box(
            center_x=(x + w / 2.0) / record.img_w,
            center_y=(y + h / 2.0) / record.img_h,
            half_w=(w / 2.0) / record.img_w,
            half_h=(h / 2.0) / record.img_h,
        )

    s_px, _ = _clip_px_box(record.subject_box_px, record.img_w, record.img_h)
    o_px, _ = _clip_px_box(record.object_box_px, record.img_w, record.img_h)
    return Instance(
        subject_word=record.subject,
        relation_word=record.relation,
        object_word=record.object_,
        subject_box=to_box(s_px),
        object_box=to_box(o_px),
        mirrored=False,
        source_id=record.source_id,
    )


def record_needs_clipping(record: RawRecord) -> bool:
    _, s_changed = _clip_px_box(record.subject_box_px, record.img_w, record.img_h)
    _, o_changed = _clip_px_box(record.object_box_px, record.img_w, record.img_h)
    return s_changed or o_changed


def denormalize_box(box: Box, img_w: float, img_h: float,
                    ) -> tuple[float, float, float, float]:
    """Invert normalize() for one box: back to pixel (x, y, w, h)."""
    return (
        (box.center_x - box.half_w) * img_w,
        (box.center_y - box.half_h) * img_h,
        2.0 * box.half_w * img_w,
        2.0 * box.half_h * img_h,
    )


def mirror_if_needed(instance: Instance) -> Instance:
    """Reflect horizontally when (and only when) the object is strictly left
    of the subject, so the object always ends up at center_x >= subject's."""
    if instance.object_box.center_x >= instance.subject_box.center_x:
        return instance

    def flip(box: Box) -> Box:
        return Box(center_x=1.0 - box.center_x, center_y=box.center_y,
                   half_w=box.half_w, half_h=box.half_h)

    return Instance(
        subject_word=instance.subject_word,
        relation_word=instance.relation_word,
        object_word=instance.object_word,
        subject_box=flip(instance.subject_box),
        object_box=flip(instance.object_box),
        mirrored=True,
        source_id=instance.source_id,
    )


def preprocess_records(records: Sequence[RawRecord], strict: bool = False,
                       ) -> tuple[list[Instance], IngestStats]:
    """Normalize and mirror all records, counting clips and rejects."""
    instances: list[Instance] = []
    stats = IngestStats()
    for rec in records:
        if record_needs_clipping(rec):
            stats.clipped_boxes += 1
        try:
            inst = normalize(rec)
        except CorpusError:
            if strict:
                raise
            stats.rejected_bad_image += 1
            continue
        instances.append(mirror_if_needed(inst))
        stats.parsed += 1
    return instances, stats


# ---------------------------------------------------------------------------
# Vocabularies and splits
# ---------------------------------------------------------------------------

def build_vocabs(instances: Sequence[Instance],
                 ) -> tuple[Vocabulary, Vocabulary, Vocabulary]:
    """Build subject/relation/object vocabularies over the full corpus.

    Built before any split so held-out words keep stable indices under the
    generalized regimes.
    """
    if not instances:
        raise CorpusError("cannot build vocabularies from an empty corpus")
    v_s = Vocabulary.build("subject", (i.subject_word for i in instances))
    v_r = Vocabulary.build("relation", (i.relation_word for i in instances))
    v_o = Vocabulary.build("object", (i.object_word for i in instances))
    return v_s, v_r, v_o


def _unique_ids(instances: Sequence[Instance]) -> list[str]:
    ids = [inst.source_id for inst in instances]
    if len(set(ids)) != len(ids):
        dupes = [t for t, c in Counter(ids).items() if c > 1][:5]
        raise CorpusError(f"instance ids are not unique (e.g. {dupes})")
    return ids


def make_cv_folds(instances: Sequence[Instance], k: int, seed: int) -> SplitPlan:
    """Randomly partition instance ids into k disjoint folds of near-equal size."""
    if k < 2:
        raise CorpusError(f"k must be >= 2, got {k}")
    if len(instances) < k:
        raise CorpusError(f"corpus size {len(instances)} smaller than k={k}")
    ids = _unique_ids(instances)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    folds = [[ids[i] for i in part] for part in np.array_split(order, k)]
    return SplitPlan(kind="cv", seed=seed, k=k, folds=folds)


def cv_fold_split(instances: Sequence[Instance], plan: SplitPlan, fold: int,
                  ) -> tuple[list[Instance], list[Instance]]:
    """Resolve one CV fold into (train, test) instance lists."""
    if plan.kind != "cv" or plan.folds is None:
        raise CorpusError("plan is not a cross-validation plan")
    if not 0 <= fold < len(plan.folds):
        raise CorpusError(f"fold {fold} out of range for k={len(plan.folds)}")
    test_ids = set(plan.folds[fold])
    train = [i for i in instances if i.source_id not in test_ids]
    test = [i for i in instances if i.source_id in test_ids]
    return train, test


def generalized_split(instances: Sequence[Instance], plan: SplitPlan,
                      ) -> tuple[list[Instance], list[Instance]]:
    """Resolve a generalized plan into (train, test) instance lists."""
    if plan.train_ids is None or plan.test_ids is None:
        raise CorpusError("plan does not carry train/test id lists")
    train_ids = set(plan.train_ids)
    test_ids = set(plan.test_ids)
    train = [i for i in instances if i.source_id in train_ids]
    test = [i for i in instances if i.source_id in test_ids]
    return train, test


def make_generalized_triplet_split(instances: Sequence[Instance],
                                   n_pick: int = 100, top_m: int = 1000,
                                   seed: int = 0) -> SplitPlan:
    """Hold out n_pick triplets drawn uniformly from the top_m most frequent.

    Every instance of a chosen triplet moves to the test set and is removed
    from training. Frequency ties at the top_m boundary are broken by
    lexicographic triplet order so the ranking is stable across rebuilds.
    """
    _unique_ids(instances)
    counts = Counter(inst.triplet for inst in instances)
    if len(counts) < top_m:
        raise CorpusError(
            f"corpus has {len(counts)} distinct triplets, fewer than top_m={top_m}")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    top = [t for t, _ in ranked[:top_m]]
    if len(top) < n_pick:
        raise CorpusError(
            f"only {len(top)} distinct triplets in the top {top_m}, "
            f"cannot pick {n_pick}")
    rng = np.random.default_rng(seed)
    chosen_idx = rng.choice(len(top), size=n_pick, replace=False)
    chosen = {top[i] for i in chosen_idx}
    test_ids = [i.source_id for i in instances if i.triplet in chosen]
    train_ids = [i.source_id for i in instances if i.triplet not in chosen]
    return SplitPlan(kind="generalized_triplets", seed=seed,
                     train_ids=train_ids, test_ids=test_ids,
                     held_out_triplets=sorted(chosen))


def make_generalized_word_split(instances: Sequence[Instance],
                                held_out_words: Sequence[str]) -> SplitPlan:
    """Hold out every instance whose subject or object token is listed.

    Relation tokens are deliberately not matched; the regime holds out
    object-like words.
    """
    if not held_out_words:
        raise CorpusError("held_out_words must be non-empty")
    _unique_ids(instances)
    words = {normalize_token(w) for w in held_out_words}
    test_ids = [i.source_id for i in instances
                if i.subject_word in words or i.object_word in words]
    train_ids = [i.source_id for i in instances
                 if i.subject_word not in words and i.object_word not in words]
    return SplitPlan(kind="generalized_words",
                     train_ids=train_ids, test_ids=test_ids,
                     held_out_words=sorted(words))


# ---------------------------------------------------------------------------
# Synthetic corpora
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticRule:
    """Ground-truth placement rule for one synthetic triplet.

    (dx, dy) is the object-center offset from the subject center before
    noise, in normalized units with y growing downward. Relation names in the
    built-in rule sets describe where the *object* is placed relative to the
    subject (the "above" rule puts the object above, i.e. dy < 0).
    """

    subject: str
    relation: str
    object_: str
    dx: float
    dy: float
    object_half_w: float
    object_half_h: float
    subject_half_w: float = 0.08
    subject_half_h: float = 0.25

    @property
    def triplet(self) -> tuple[str, str, str]:
        return (self.subject, self.relation, self.object_)


DEFAULT_RULES: tuple[SyntheticRule, ...] = (
    SyntheticRule("man", "feeding", "horse", 0.24, 0.10, 0.20, 0.16, 0.08, 0.28),
    SyntheticRule("girl", "feeding", "dog", 0.24, 0.10, 0.10, 0.09, 0.07, 0.28),
    SyntheticRule("man", "chasing", "dog", -0.30, 0.10, 0.10, 0.09, 0.08, 0.28),
    SyntheticRule("girl", "wearing", "shoe", 0.00, 0.10, 0.05, 0.03, 0.07, 0.28),
    SyntheticRule("box", "above", "ball", 0.00, -0.30, 0.08, 0.08, 0.10, 0.30),
    SyntheticRule("box", "below", "ball", 0.00, 0.30, 0.08, 0.08, 0.10, 0.30),
    SyntheticRule("man", "below", "ball", 0.00, 0.30, 0.08, 0.08, 0.08, 0.30),
    SyntheticRule("girl", "below", "ball", 0.00, 0.30, 0.08, 0.08, 0.07, 0.30),
)

# Compositional hold-outs: their relation also occurs in training anchored on
# the (box, ball) pair with an identical offset, and every held-out token
# occurs in the remaining six rules.
DEFAULT_HELD_OUT_TRIPLETS: tuple[tuple[str, str, str], ...] = (
    ("man", "below", "ball"),
    ("girl", "below", "ball"),
)

RULE_SETS: dict[str, tuple[SyntheticRule, ...]] = {"default8": DEFAULT_RULES}


def generate_synthetic(rules: Sequence[SyntheticRule], n_instances: int,
                       noise_sigma: float, seed: int) -> list[Instance]:
    """Generate a preprocessed synthetic corpus from placement rules.

    Rules are assigned round-robin so counts are balanced. Subject centers are
    uniform inside the margin that keeps the subject box in the unit square;
    object centers add the rule offset plus per-axis Gaussian noise, are
    clipped to [0, 1], and the instance is then mirrored under the standard
    preprocessing rule.
    """
    if not rules:
        raise CorpusError("rule set is empty")
    if noise_sigma < 0:
        raise CorpusError("noise_sigma must be >= 0")
    rng = np.random.default_rng(seed)
    instances: list[Instance] = []
    for i in range(n_instances):
        rule = rules[i % len(rules)]
        sx = rng.uniform(rule.subject_half_w, 1.0 - rule.subject_half_w)
        sy = rng.uniform(rule.subject_half_h, 1.0 - rule.subject_half_h)
        ox = sx + rule.dx + rng.normal(0.0, noise_sigma) if noise_sigma > 0 else sx + rule.dx
        oy = sy + rule.dy + rng.normal(0.0, noise_sigma) if noise_sigma > 0 else sy + rule.dy
        ox = min(max(ox, 0.0), 1.0)
        oy = min(max(oy, 0.0), 1.0)
        inst = Instance(
            subject_word=rule.subject,
            relation_word=rule.relation,
            object_word=rule.object_,
            subject_box=Box(sx, sy, rule.subject_half_w, rule.subject_half_h),
            object_box=Box(ox, oy, rule.object_half_w, rule.object_half_h),
            mirrored=False,
            source_id=f"synth-{i:06d}",
        )
        instances.append(mirror_if_needed(inst))
    return instances


# ---------------------------------------------------------------------------
# Corpus persistence
# ---------------------------------------------------------------------------

def save_corpus_jsonl(instances: Sequence[Instance], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(json.dumps(inst.to_json_dict(), sort_keys=True))
            fh.write("\n")


def load_corpus_jsonl(path: str | Path) -> list[Instance]:
    instances = []
    with _open_text(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                instances.append(Instance.from_json_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise CorpusError(f"bad corpus line {lineno}: {exc}") from exc
    return instances


def assert_preprocessed(instances: Sequence[Instance]) -> None:
    """Check the corpus-wide preprocessing invariants, raising on violation."""
    for inst in instances:
        if inst.object_box.center_x < inst.subject_box.center_x:
            raise CorpusError(
                f"instance {inst.source_id} violates the mirroring invariant")
        for box in (inst.subject_box, inst.object_box):
            if not (0.0 <= box.center_x <= 1.0 and 0.0 <= box.center_y <= 1.0):
                raise CorpusError(
                    f"instance {inst.source_id} has a center outside [0, 1]")
            if box.half_w < 0 or box.half_h < 0:
                raise CorpusError(
                    f"instance {inst.source_id} has a negative half-extent")
