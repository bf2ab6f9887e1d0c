"""Synthetic long-tail scene graphs: generation, JSON I/O, class statistics, resampling."""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

_DECIMALS = 6


class DatasetSchemaError(ValueError):
    """A split file or in-memory scene violates the dataset schema."""


@dataclass
class SceneGraph:
    """One synthetic image.

    ``union`` holds one vector per relation row; for object pairs without an
    annotated relation the union feature is ``visual[s] + visual[o]``.
    """

    image_id: int
    classes: np.ndarray      # (n,) int
    boxes: np.ndarray        # (n, 4) float, normalized x1, y1, x2, y2
    visual: np.ndarray       # (n, d_v) float
    relations: np.ndarray    # (m, 3) int: subj, obj, predicate
    union: np.ndarray        # (m, d_v) float

    @property
    def num_objects(self) -> int:
        return len(self.classes)

    @property
    def num_relations(self) -> int:
        return len(self.relations)

    def pair_union(self, s: int, o: int) -> np.ndarray:
        hit = np.nonzero((self.relations[:, 0] == s) & (self.relations[:, 1] == o))[0]
        if len(hit):
            return self.union[hit[0]]
        return self.visual[s] + self.visual[o]


@dataclass
class GenConfig:
    num_images: int = 2000
    num_test_images: int | None = None   # default: 30% of all images
    N_obj: int = 10
    C: int = 20
    d_v: int = 32
    zipf_exponent: float = 1.5
    seed: int = 0
    min_objects: int = 2
    max_objects: int = 5
    max_relations: int = 4
    noise: float = 0.5
    object_noise: float = 0.5
    confusion: float = 0.0
    num_parents: int = 10

    def validate(self) -> None:
        if self.C < 2:
            raise ValueError(f"C: must be >= 2, got {self.C}")
        if not self.zipf_exponent > 0:
            raise ValueError(f"zipf_exponent: must be > 0, got {self.zipf_exponent}")
        if self.num_images < 0:
            raise ValueError(f"num_images: must be >= 0, got {self.num_images}")
        if self.num_test_images is not None and self.num_test_images < 0:
            raise ValueError(f"num_test_images: must be >= 0, got {self.num_test_images}")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("min_objects/max_objects: need 1 <= min_objects <= max_objects")
        if self.max_relations < 0:
            raise ValueError(f"max_relations: must be >= 0, got {self.max_relations}")
        if not 0.0 <= self.confusion < 1.0:
            raise ValueError(f"confusion: must be in [0, 1), got {self.confusion}")
        if not 1 <= self.num_parents <= self.C:
            raise ValueError(f"num_parents: must be in [1, C], got {self.num_parents}")
        for name in ("N_obj", "d_v"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name}: must be >= 1")

    @property
    def test_images(self) -> int:
        if self.num_test_images is not None:
            return self.num_test_images
        return int(round(self.num_images * 3 / 7))


def zipf_probs(C: int, exponent: float) -> np.ndarray:
    """P(class k) proportional to (k + 1) ** -exponent; class 0 is the most frequent."""
    w = np.arange(1, C + 1, dtype=np.float64) ** -exponent
    return w / w.sum()


def _unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def predicate_prototypes(cfg: GenConfig, rng: np.random.Generator) -> np.ndarray:
    """Unit-norm predicate prototypes.

    With ``confusion`` rho > 0 every class outside the first ``num_parents``
    is tilted toward a randomly chosen parent among them, giving cosine
    similarity of about rho with that parent: fine-grained tail predicates that
    look like a coarse head predicate.
    """
    own = _unit_rows(rng, cfg.C, cfg.d_v)
    parents = rng.integers(0, cfg.num_parents, size=cfg.C)
    protos = own.copy()
    rho = cfg.confusion
    for k in range(cfg.num_parents, cfg.C):
        v = rho * own[parents[k]] + np.sqrt(1 - rho * rho) * own[k]
        protos[k] = v / np.linalg.norm(v)
    return protos


def _random_boxes(rng: np.random.Generator, n: int) -> np.ndarray:
    a = rng.uniform(0.0, 1.0, size=(n, 2, 2))
    lo = np.minimum(a[:, 0], a[:, 1])
    hi = np.maximum(a[:, 0], a[:, 1])
    hi = np.maximum(hi, lo + 0.01)
    hi = np.minimum(hi, 1.0)
    lo = np.minimum(lo, hi - 0.01)
    return np.round(np.stack([lo[:, 0], lo[:, 1], hi[:, 0], hi[:, 1]], axis=1), _DECIMALS)


def _make_scene(image_id, cfg, rng, obj_protos, pred_protos, probs) -> SceneGraph:
    scale = 1.0 / np.sqrt(cfg.d_v)
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    classes = rng.integers(0, cfg.N_obj, size=n)
    visual = obj_protos[classes] + cfg.object_noise * scale * rng.standard_normal((n, cfg.d_v))
    visual = np.round(visual, _DECIMALS)
    boxes = _random_boxes(rng, n)
    pairs = [(s, o) for s in range(n) for o in range(n) if s != o]
    m_max = min(cfg.max_relations, len(pairs))
    m = int(rng.integers(1, m_max + 1)) if m_max >= 1 else 0
    chosen = sorted(rng.choice(len(pairs), size=m, replace=False).tolist()) if m else []
    preds = rng.choice(cfg.C, size=m, p=probs)
    rels = np.array([[pairs[c][0], pairs[c][1], p] for c, p in zip(chosen, preds)],
                    dtype=np.int64).reshape(m, 3)
    evidence = pred_protos[preds] + cfg.noise * scale * rng.standard_normal((m, cfg.d_v))
    union = np.round(visual[rels[:, 0]] + visual[rels[:, 1]] + evidence, _DECIMALS)
    return SceneGraph(image_id, classes.astype(np.int64), boxes, visual, rels,
                      union.reshape(m, cfg.d_v))


def generate(cfg: GenConfig) -> dict[str, list[SceneGraph]]:
    """Draw a train and a test split, disjoint by image_id, from one seeded stream."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    obj_protos = _unit_rows(rng, cfg.N_obj, cfg.d_v)
    pred_protos = predicate_prototypes(cfg, rng)
    probs = zipf_probs(cfg.C, cfg.zipf_exponent)
    train = [_make_scene(i, cfg, rng, obj_protos, pred_protos, probs)
             for i in range(cfg.num_images)]
    test = [_make_scene(cfg.num_images + i, cfg, rng, obj_protos, pred_protos, probs)
            for i in range(cfg.test_images)]
    for name, split in (("train", train), ("test", test)):
        if split:
            counts = class_counts(split, cfg.C)
            empty = np.nonzero(counts == 0)[0].tolist()
            if empty:
                warnings.warn(f"{name} split: predicate classes never drawn: {empty}")
    return {"train": train, "test": test}


# ---------------------------------------------------------------------------
# I/O

def _split_meta(cfg_or_meta) -> dict:
    if isinstance(cfg_or_meta, GenConfig):
        return {"C": cfg_or_meta.C, "N_obj": cfg_or_meta.N_obj, "d_v": cfg_or_meta.d_v,
                "seed": cfg_or_meta.seed}
    return dict(cfg_or_meta)


def scene_to_json(sg: SceneGraph) -> dict:
    return {
        "image_id": int(sg.image_id),
        "objects": [{"class_id": int(c), "bbox": b.tolist(), "visual": v.tolist()}
                    for c, b, v in zip(sg.classes, sg.boxes, sg.visual)],
        "relations": [{"subj": int(r[0]), "obj": int(r[1]), "predicate": int(r[2]),
                       "union": u.tolist()} for r, u in zip(sg.relations, sg.union)],
    }


def save_split(path: str | Path, scenes: list[SceneGraph], meta) -> None:
    doc = {"meta": _split_meta(meta), "images": [scene_to_json(s) for s in scenes]}
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def _fail(path: str, msg: str):
    raise DatasetSchemaError(f"{path}: {msg}")


def _require(d: dict, key: str, path: str):
    if not isinstance(d, dict) or key not in d:
        _fail(path, f"missing field '{key}'")
    return d[key]


def scene_from_json(img: dict, meta: dict, where: str = "images[0]") -> SceneGraph:
    C, N_obj, d_v = meta["C"], meta["N_obj"], meta["d_v"]
    image_id = _require(img, "image_id", where)
    where = f"{where}(image_id={image_id})"
    objects = _require(img, "objects", where)
    relations = _require(img, "relations", where)
    if not isinstance(objects, list) or len(objects) < 1:
        _fail(f"{where}.objects", "at least one object required")
    classes, boxes, visual = [], [], []
    for i, o in enumerate(objects):
        p = f"{where}.objects[{i}]"
        c = _require(o, "class_id", p)
        if not isinstance(c, int) or not 0 <= c < N_obj:
            _fail(f"{p}.class_id", f"{c!r} not in [0, {N_obj})")
        b = _require(o, "bbox", p)
        if not isinstance(b, list) or len(b) != 4:
            _fail(f"{p}.bbox", "expected [x1, y1, x2, y2]")
        if not all(0.0 <= float(x) <= 1.0 for x in b):
            _fail(f"{p}.bbox", f"{b} not normalized to [0, 1]")
        if not (b[0] < b[2] and b[1] < b[3]):
            _fail(f"{p}.bbox", f"{b} violates x1<x2, y1<y2")
        v = _require(o, "visual", p)
        if not isinstance(v, list) or len(v) != d_v:
            _fail(f"{p}.visual", f"expected {d_v} values")
        classes.append(c), boxes.append(b), visual.append(v)
    n = len(objects)
    rels, unions, seen = [], [], set()
    for k, r in enumerate(relations):
        p = f"{where}.relations[{k}]"
        s, o, pr = (_require(r, key, p) for key in ("subj", "obj", "predicate"))
        for key, val, hi in (("subj", s, n), ("obj", o, n), ("predicate", pr, C)):
            if not isinstance(val, int) or not 0 <= val < hi:
                _fail(f"{p}.{key}", f"{val!r} not in [0, {hi})")
        if s == o:
            _fail(f"{p}.obj", f"subj == obj ({s})")
        if (s, o) in seen:
            _fail(p, f"duplicate relation for pair ({s}, {o})")
        seen.add((s, o))
        u = r.get("union")
        if u is None:
            u = (np.asarray(visual[s], float) + np.asarray(visual[o], float)).tolist()
        if len(u) != d_v:
            _fail(f"{p}.union", f"expected {d_v} values")
        rels.append([s, o, pr]), unions.append(u)
    return SceneGraph(
        int(image_id),
        np.asarray(classes, dtype=np.int64),
        np.asarray(boxes, dtype=np.float64).reshape(n, 4),
        np.asarray(visual, dtype=np.float64).reshape(n, d_v),
        np.asarray(rels, dtype=np.int64).reshape(len(rels), 3),
        np.asarray(unions, dtype=np.float64).reshape(len(rels), d_v),
    )


def load_split(path: str | Path) -> tuple[list[SceneGraph], dict]:
    """Read and validate a split file; returns (scenes, meta)."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DatasetSchemaError(f"{path}: invalid JSON ({e})") from None
    meta = _require(doc, "meta", "$")
    for key in ("C", "N_obj", "d_v", "seed"):
        _require(meta, key, "meta")
    images = _require(doc, "images", "$")
    scenes = [scene_from_json(img, meta, f"images[{i}]") for i, img in enumerate(images)]
    ids = [s.image_id for s in scenes]
    if len(set(ids)) != len(ids):
        raise DatasetSchemaError(f"{path}: duplicate image_id values")
    return scenes, meta


def validate_scene(sg: SceneGraph, C: int, N_obj: int, d_v: int) -> None:
    """Re-check the invariants of an in-memory scene via the JSON validator."""
    scene_from_json(scene_to_json(sg), {"C": C, "N_obj": N_obj, "d_v": d_v},
                    f"image_id={sg.image_id}")


# ---------------------------------------------------------------------------
# statistics and resampling

def class_counts(scenes: list[SceneGraph], C: int) -> np.ndarray:
    counts = np.zeros(C, dtype=np.int64)
    for s in scenes:
        if s.num_relations:
            counts += np.bincount(s.relations[:, 2], minlength=C)
    return counts


def effective_number_weights(counts, beta: float) -> np.ndarray:
    """(1 - beta) / (1 - beta ** n) per class; unobserved classes get the max observed weight."""
    if not 0.0 < beta < 1.0:
        raise ValueError(f"beta: must be in (0, 1), got {beta}")
    counts = np.asarray(counts, dtype=np.int64)
    w = np.empty(len(counts), dtype=np.float64)
    seen = counts > 0
    w[seen] = (1.0 - beta) / (1.0 - beta ** counts[seen].astype(np.float64))
    if (~seen).any():
        w[~seen] = w[seen].max() if seen.any() else 1.0
    return w


@dataclass
class ClassStats:
    counts: np.ndarray
    order: np.ndarray
    head_set: np.ndarray
    weights: np.ndarray
    beta: float
    h: int
    unobserved: list[int] = field(default_factory=list)

    @property
    def C(self) -> int:
        return len(self.counts)

    @property
    def tail_set(self) -> np.ndarray:
        return np.array([c for c in self.order if c not in set(self.head_set.tolist())
                         and self.counts[c] > 0], dtype=np.int64)

    def to_json(self) -> dict:
        return {"counts": self.counts.tolist(), "beta": self.beta, "h": self.h}

    @classmethod
    def from_json(cls, d: dict) -> "ClassStats":
        return class_stats_from_counts(d["counts"], d["beta"], d["h"])


def class_stats_from_counts(counts, beta: float = 0.9999, h: int = 10) -> ClassStats:
    counts = np.asarray(counts, dtype=np.int64)
    C = len(counts)
    if not 1 <= h <= C:
        raise ValueError(f"h: must be in [1, {C}], got {h}")
    # stable sort on -count keeps lower ids first among ties
    order = np.argsort(-counts, kind="stable")
    unobserved = np.nonzero(counts == 0)[0].tolist()
    if unobserved:
        logger.warning("classes without training samples: %s", unobserved)
    return ClassStats(counts, order, np.sort(order[:h]), effective_number_weights(counts, beta),
                      beta, h, unobserved)


def class_stats(scenes: list[SceneGraph], C: int, beta: float = 0.9999, h: int = 10) -> ClassStats:
    return class_stats_from_counts(class_counts(scenes, C), beta, h)


@dataclass
class BalancedIndex:
    """Class-balanced references ``(image_id, relation_index)``.

    ``per_class[k]`` lists class k's references; ``entries`` is the shuffled
    concatenation as ``(class, image_id, relation_index)`` rows.
    """

    T: int
    per_class: dict[int, list[tuple[int, int]]]
    entries: np.ndarray
    missing: list[int]


def balanced_resample(scenes: list[SceneGraph], T: int, seed: int, C: int | None = None) -> BalancedIndex:
    """Under-sample classes above T without replacement; pad smaller ones with replacement.

    A class with 1 <= n < T keeps all of its n samples and draws the other
    T - n uniformly with replacement.
    """
    if T < 1:
        raise ValueError(f"T: must be >= 1, got {T}")
    refs: dict[int, list[tuple[int, int]]] = {}
    for s in scenes:
        for k, r in enumerate(s.relations):
            refs.setdefault(int(r[2]), []).append((s.image_id, k))
    if not refs:
        raise ValueError("balanced_resample: split has no relations")
    if C is None:
        C = max(refs) + 1
    rng = np.random.default_rng(seed)
    per_class, missing, rows = {}, [], []
    for c in range(C):
        pool = refs.get(c, [])
        n = len(pool)
        if n == 0:
            missing.append(c)
            continue
        if n >= T:
            pick = rng.choice(n, size=T, replace=False)
        else:
            pick = np.concatenate([np.arange(n), rng.integers(0, n, size=T - n)])
        per_class[c] = [pool[i] for i in pick]
        rows.extend((c, im, k) for im, k in per_class[c])
    if missing:
        logger.info("balanced_resample: classes absent from split: %s", missing)
    entries = np.asarray(rows, dtype=np.int64).reshape(-1, 3)
    entries = entries[rng.permutation(len(entries))]
    return BalancedIndex(T, per_class, entries, missing)


def split_validation(scenes: list[SceneGraph], fraction: float, seed: int):
    """Hold out ``fraction`` of images (by seed) for validation; returns (train, val)."""
    n_val = int(round(len(scenes) * fraction))
    perm = np.random.default_rng(seed).permutation(len(scenes))
    val_idx = set(perm[:n_val].tolist())
    train = [s for i, s in enumerate(scenes) if i not in val_idx]
    val = [s for i, s in enumerate(scenes) if i in val_idx]
    return train, val


def gen_config_from_dict(d: dict) -> GenConfig:
    known = set(asdict(GenConfig()))
    unknown = sorted(set(d) - known)
    if unknown:
        raise ValueError(f"{unknown[0]}: unknown generator field")
    cfg = GenConfig(**d)
    cfg.validate()
    return cfg
