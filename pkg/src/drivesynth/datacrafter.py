"""Clip scoring, structured captions, multi-view fusion and a hashed text embedding."""

from __future__ import annotations

import hashlib
import json
import re
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

# Option sets of the structured caption template. "Other(should explain in
# Details)" is stored as "Other"; the template's "Asphalt " loses its trailing space.
SCENE_OPTIONS: dict[str, tuple[str, ...] | None] = {
    "time": ("Daytime", "Night", "Indoor", "No visible sign"),
    "weather": ("Sunny", "Cloudy", "Overcast", "Rain", "Snow", "Night with no visible sign"),
    "road_type": ("Highway", "Urban Road", "Rural Road", "Tunnel", "Bridge", "No visible sign"),
    "road_surface": ("Asphalt", "Concrete", "Gravel", "resin (Indoor)"),
    "lane": ("No visible sign", "Single Lane", "Dual Lane", "Multi-Lane", "Other"),
    "environment_type": ("Highway", "Roundabout", "Intersection", "Ramp", "Tunnel",
                         "Parking Lot", "Urban Road", "Rural Road", "Bridge", "Other"),
    "surroundings": None,  # free text
    "traffic": None,       # free text
}
SCENE_FIELDS = tuple(SCENE_OPTIONS)
DEFAULT_LAMBDAS = (1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0)


class CaptionError(ValueError):
    pass


# ------------------------------------------------------------------ scoring

@dataclass(frozen=True)
class ClipScore:
    q_clarity: float
    q_structure: float
    q_aesthetics: float
    lambdas: tuple = DEFAULT_LAMBDAS
    s: float = 0.0


def score_clip(q, lambdas=DEFAULT_LAMBDAS) -> ClipScore:
    """s = l1 * clarity + l2 * structure + l3 * aesthetics."""
    q = tuple(float(x) for x in q)
    lam = tuple(float(x) for x in lambdas)
    if len(q) != 3 or len(lam) != 3:
        raise ValueError("need exactly three subscores and three weights")
    for name, x in zip(("clarity", "structure", "aesthetics"), q):
        if not 0.0 <= x <= 1.0:
            raise ValueError(f"{name} subscore {x} outside [0, 1]")
    if any(l < 0 for l in lam):
        raise ValueError(f"weights must be non-negative, got {lam}")
    if abs(sum(lam) - 1.0) > 1e-9:
        raise ValueError(f"weights must sum to 1, got {sum(lam)}")
    s = lam[0] * q[0] + lam[1] * q[1] + lam[2] * q[2]
    return ClipScore(q[0], q[1], q[2], lam, s)


def filter_clips(scored, tau: float) -> list:
    """Ids of clips with s >= tau, in input order.

    ``scored`` is a sequence of ``(clip_id, score)`` pairs where score is a
    :class:`ClipScore` or a plain number.
    """
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    out = []
    for cid, sc in scored:
        s = sc.s if isinstance(sc, ClipScore) else float(sc)
        if s >= tau:
            out.append(cid)
    return out


def sharpness_subscores(image: np.ndarray, scale: float = 0.05) -> tuple[float, float, float]:
    """Reference heuristic scorer: gradient energy mapped to [0, 1] for every subscore.

    Clarity uses mean squared gradient, structure the fraction of strong
    edges, aesthetics the normalized intensity spread.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img.mean(axis=-1)
    gy, gx = np.gradient(img)
    energy = float(np.mean(gx * gx + gy * gy))
    clarity = energy / (energy + scale * scale)
    mag = np.hypot(gx, gy)
    structure = float(np.mean(mag > 0.1)) if mag.size else 0.0
    spread = float(img.std())
    aesthetics = min(1.0, 2.0 * spread)
    return clarity, structure, aesthetics


# ----------------------------------------------------------------- captions

@dataclass(frozen=True)
class CaptionObject:
    category: str
    bbox: tuple  # (x1, y1, x2, y2) pixels
    description: str


@dataclass(frozen=True)
class StructuredCaption:
    scene: dict
    objects: tuple = field(default_factory=tuple)

    def to_dict(self) -> dict:
        return {
            "scene": {k: self.scene[k] for k in SCENE_FIELDS},
            "objects": [{"category": o.category, "bbox": [float(x) for x in o.bbox],
                         "description": o.description} for o in self.objects],
        }


def _check_scene(scene: dict) -> dict:
    unknown = sorted(set(scene) - set(SCENE_FIELDS))
    if unknown:
        raise CaptionError(f"unknown scene field(s): {', '.join(unknown)}")
    out = {}
    for name, options in SCENE_OPTIONS.items():
        if name not in scene:
            raise CaptionError(f"scene field '{name}' is missing")
        value = scene[name]
        if not isinstance(value, str):
            raise CaptionError(f"scene field '{name}' must be a string")
        if options is not None and value not in options:
            raise CaptionError(f"scene field '{name}': {value!r} is not one of {list(options)}")
        out[name] = value
    return out


def _check_object(i: int, o) -> CaptionObject:
    if isinstance(o, dict):
        o = CaptionObject(o["category"], tuple(o["bbox"]), o["description"])
    elif not isinstance(o, CaptionObject):
        o = CaptionObject(*o)
    box = tuple(float(x) for x in o.bbox)
    if len(box) != 4 or not all(np.isfinite(box)):
        raise CaptionError(f"objects[{i}].bbox must be four finite numbers")
    x1, y1, x2, y2 = box
    if not x1 < x2:
        raise CaptionError(f"objects[{i}].bbox: x1 {x1:g} must be < x2 {x2:g}")
    if not y1 < y2:
        raise CaptionError(f"objects[{i}].bbox: y1 {y1:g} must be < y2 {y2:g}")
    if not isinstance(o.category, str) or not isinstance(o.description, str):
        raise CaptionError(f"objects[{i}] category and description must be strings")
    return CaptionObject(o.category, box, o.description)


def build_structured_caption(scene: dict, objects=()) -> StructuredCaption:
    """Validated caption: every enum field in its option set, every bbox non-degenerate."""
    return StructuredCaption(_check_scene(dict(scene)),
                             tuple(_check_object(i, o) for i, o in enumerate(objects)))


def caption_to_json(caption: StructuredCaption) -> str:
    return json.dumps(caption.to_dict(), sort_keys=True)


def caption_from_json(text: str) -> StructuredCaption:
    d = json.loads(text)
    if not isinstance(d, dict) or "scene" not in d:
        raise CaptionError("caption JSON needs a top-level 'scene' object")
    return build_structured_caption(d["scene"], d.get("objects", []))


# ------------------------------------------------------------------- fusion

@dataclass(frozen=True)
class ViewCaptionSet:
    captions: dict  # view_id -> StructuredCaption

    def __post_init__(self):
        if isinstance(self.captions, (list, tuple)):
            ids = [vid for vid, _ in self.captions]
            if len(set(ids)) != len(ids):
                raise CaptionError(f"duplicate view ids {ids}")
            object.__setattr__(self, "captions", dict(self.captions))


def fuse_captions(views: ViewCaptionSet) -> StructuredCaption:
    """Majority vote per scene field and exact-match object dedupe.

    Vote ties go to the value first seen at the lowest view id. Duplicate
    objects share category and description; the survivor keeps the bbox from
    the lowest view id. Output objects are ordered by (view id, position).
    """
    if not views.captions:
        raise CaptionError("fusion needs at least one view")
    order = sorted(views.captions)
    scene = {}
    for name in SCENE_FIELDS:
        values = [views.captions[v].scene[name] for v in order]
        counts = Counter(values)
        top = max(counts.values())
        scene[name] = next(x for x in values if counts[x] == top)
    seen = set()
    objects = []
    for v in order:
        for o in views.captions[v].objects:
            key = (o.category, o.description)
            if key not in seen:
                seen.add(key)
                objects.append(o)
    return StructuredCaption(scene, tuple(objects))


# ---------------------------------------------------------------- embedding

_TOKEN = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")


def caption_tokens(caption: StructuredCaption) -> list[str]:
    """Tokens of the canonical serialization, each prefixed by its field path."""
    toks = []
    d = caption.to_dict()
    for name in SCENE_FIELDS:
        toks += [f"scene.{name}={w}" for w in _TOKEN.findall(d["scene"][name].lower())]
    for o in d["objects"]:
        toks += [f"obj.category={w}" for w in _TOKEN.findall(o["category"].lower())]
        toks += [f"obj.description={w}" for w in _TOKEN.findall(o["description"].lower())]
        toks += [f"obj.bbox={int(np.floor(x / 32.0))}" for x in o["bbox"]]
    return toks


def caption_embed(caption: StructuredCaption, dim: int = 512) -> np.ndarray:
    """Feature-hashing embedding: blake2b index and sign per token, then unit L2 norm."""
    if dim < 8:
        raise ValueError("embedding dim must be >= 8")
    e = np.zeros(dim)
    for tok in caption_tokens(caption):
        h = hashlib.blake2b(tok.encode("utf-8"), digest_size=8).digest()
        k = int.from_bytes(h, "little")
        e[k % dim] += 1.0 if (k >> 63) & 1 else -1.0
    n = np.linalg.norm(e)
    return e / n if n > 0 else e
