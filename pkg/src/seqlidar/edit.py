"""Condition editing: add/remove boxes, change caption tokens, resample priors.

An edit script is a text file with one JSON object per line (blank lines
and ``#`` comments are ignored)::

    {"op": "add_box", "category": "car", "l": 4.0, "w": 2.0, "h": 1.5,
     "rho": 10.0, "theta": 0.0, "heading": 0.0}
    {"op": "remove_box", "id": 3}
    {"op": "set_caption_token", "slot": "background", "token": "GRASSY"}
    {"op": "regenerate_prior", "id": 3, "seed": 17}

``add_box`` places the box on the ground (``rho`` is the range to its centre)
unless an explicit elevation ``phi`` is given, and applies to every frame
unless ``frames`` lists a subset.  Only frames an op touches are re-rendered;
all other files are copied unchanged.

Every box record carries the ``prior_seed`` its object-prior points are drawn
with.  A new box takes ``prior_seed`` from the op when given, otherwise one
derived from the sample seed (the directory name).  ``regenerate_prior``
sets the given ``seed``, or advances the current one deterministically.
"""

from __future__ import annotations

import json
import math
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from seqlidar import l4dt
from seqlidar.codec import render_box_layer
from seqlidar.errors import IngestionError, ValidationError, VocabularyError
from seqlidar.scene import (
    BACKGROUNDS,
    CAPTION_SLOTS,
    TIMES,
    TOKEN_ID,
    WEATHERS,
    ObjectCondition,
    box_record,
    check_consistency,
    count_frames,
    decode_caption,
    prior_seed,
    read_boxes,
    read_caption,
    record_box,
    render_prior_frame,
)

OPS = ("add_box", "remove_box", "set_caption_token", "regenerate_prior")
SLOT_TOKENS = {
    "time_of_day": {t.upper() for t in TIMES},
    "weather": {w.upper() for w in WEATHERS},
    "background": {b.upper() for b in BACKGROUNDS},
}
SENSOR_HEIGHT = 1.8


@dataclass
class EditOp:
    op: str
    args: dict = field(default_factory=dict)
    line: int = 0

    def describe(self):
        return f"line {self.line}: {self.op} {json.dumps(self.args, sort_keys=True)}"


@dataclass
class EditScript:
    ops: list = field(default_factory=list)

    @classmethod
    def parse(cls, text):
        ops = []
        for n, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"line {n}: not valid JSON ({exc.msg})") from None
            if not isinstance(obj, dict) or obj.get("op") not in OPS:
                raise ValidationError(f"line {n}: unknown edit op {obj!r}")
            args = {k: v for k, v in obj.items() if k != "op"}
            ops.append(EditOp(obj["op"], args, n))
        return cls(ops)

    @classmethod
    def load(cls, path):
        return cls.parse(Path(path).read_text())


class _Bundle:
    """Mutable view of a sample directory's condition files."""

    def __init__(self, sample_dir):
        d = Path(sample_dir)
        self.dir = d
        self.frames = count_frames(d)
        if self.frames == 0:
            raise IngestionError(f"{d}: no frames")
        missing = [n for k in range(self.frames) for n in (f"sketch_{k}.l4dt", f"prior_{k}.l4dt")
                   if not (d / n).exists()]
        if not (d / "caption.txt").exists():
            missing.append("caption.txt")
        if missing:
            raise IngestionError(f"{d}: missing {', '.join(missing)}")
        self.sketches = [l4dt.load(d / f"sketch_{k}.l4dt") for k in range(self.frames)]
        self.priors = [l4dt.load(d / f"prior_{k}.l4dt") for k in range(self.frames)]
        self.caption = read_caption(d / "caption.txt")
        self.boxes = read_boxes(d / "boxes.jsonl")
        try:
            self.seed = int(d.name)
        except ValueError:
            self.seed = 0
        self.dirty_frames = set()
        self.caption_dirty = False
        self.boxes_dirty = False

    def records(self, frame):
        return [r for r in self.boxes if r["frame"] == frame]

    def rerender(self, frame, cfg):
        recs = self.records(frame)
        sketch = self.sketches[frame].copy()
        sketch[1] = render_box_layer([record_box(r) for r in recs], cfg)
        self.sketches[frame] = sketch.astype(np.float32)
        self.priors[frame] = render_prior_frame(recs, self.seed, cfg).astype(np.float32)

    def sample_view(self):
        from seqlidar.scene import SequenceSample

        return SequenceSample(self.seed, [None] * self.frames, np.stack(self.sketches),
                              np.stack(self.priors), self.caption, self.boxes)


def _frames_arg(op, bundle):
    frames = op.args.get("frames")
    if frames is None:
        return list(range(bundle.frames))
    frames = [int(f) for f in frames]
    bad = [f for f in frames if not 0 <= f < bundle.frames]
    if bad:
        raise ValidationError(f"{op.describe()}: frames {bad} out of range")
    return frames


def _add_box(op, bundle, cfg):
    a = op.args
    try:
        category, l, w, h = a["category"], float(a["l"]), float(a["w"]), float(a["h"])
        rho, theta, heading = float(a["rho"]), float(a["theta"]), float(a.get("heading", 0.0))
    except KeyError as exc:
        raise ValidationError(f"{op.describe()}: missing field {exc.args[0]!r}") from None
    if rho > cfg.d_max:
        raise ValidationError(f"{op.describe()}: range {rho} beyond d_max {cfg.d_max}")
    if "phi" in a:
        obj = ObjectCondition(category, l, w, h, rho, theta, float(a["phi"]), heading)
    else:
        z = h / 2 - float(a.get("sensor_height", SENSOR_HEIGHT))
        if rho <= abs(z):
            raise ValidationError(f"{op.describe()}: range {rho} too short for a grounded box")
        obj = ObjectCondition.on_ground(category, l, w, h, math.sqrt(rho * rho - z * z), theta, heading,
                                        float(a.get("sensor_height", SENSOR_HEIGHT)))
    box = obj.to_box()
    box_id = int(a.get("id", max([r["id"] for r in bundle.boxes], default=-1) + 1))
    if any(r["id"] == box_id for r in bundle.boxes):
        raise ValidationError(f"{op.describe()}: box id {box_id} already exists")
    seed = int(a.get("prior_seed", prior_seed(bundle.seed, box_id)))
    for k in _frames_arg(op, bundle):
        rec = json.loads(json.dumps(dict(box_record(box, box_id, k), prior_seed=seed)))
        bundle.boxes.append(rec)
        bundle.dirty_frames.add(k)
    bundle.boxes_dirty = True


def _remove_box(op, bundle, cfg):
    box_id = int(op.args.get("id", -1))
    frames = set(_frames_arg(op, bundle))
    hit = [r for r in bundle.boxes if r["id"] == box_id and r["frame"] in frames]
    if not hit:
        raise ValidationError(f"{op.describe()}: no box with id {box_id}")
    bundle.boxes = [r for r in bundle.boxes if r not in hit]
    bundle.dirty_frames.update(r["frame"] for r in hit)
    bundle.boxes_dirty = True


def _set_caption_token(op, bundle, cfg):
    slot = op.args.get("slot")
    token = str(op.args.get("token", "")).upper()
    if slot not in CAPTION_SLOTS:
        raise ValidationError(f"{op.describe()}: unknown caption slot {slot!r}")
    if token not in TOKEN_ID:
        raise VocabularyError(f"{op.describe()}: unknown token {token!r}")
    if token not in SLOT_TOKENS[slot]:
        raise ValidationError(f"{op.describe()}: token {token} does not fit slot {slot}")
    caption = list(bundle.caption)
    caption[CAPTION_SLOTS[slot]] = TOKEN_ID[token]
    bundle.caption = caption
    bundle.caption_dirty = True


def _regenerate_prior(op, bundle, cfg):
    box_id = int(op.args.get("id", -1))
    frames = set(_frames_arg(op, bundle))
    hit = [r for r in bundle.boxes if r["id"] == box_id and r["frame"] in frames]
    if not hit:
        raise ValidationError(f"{op.describe()}: no box with id {box_id}")
    for r in hit:
        current = r.get("prior_seed", prior_seed(bundle.seed, box_id))
        r["prior_seed"] = int(op.args["seed"]) if "seed" in op.args else prior_seed(current, box_id)
        bundle.dirty_frames.add(r["frame"])
    bundle.boxes_dirty = True


HANDLERS = {
    "add_box": _add_box,
    "remove_box": _remove_box,
    "set_caption_token": _set_caption_token,
    "regenerate_prior": _regenerate_prior,
}


def apply_edits(sample_dir, script, out_dir, cfg):
    """Apply ``script`` to the sample in ``sample_dir`` and write the result to ``out_dir``.

    Returns the sorted list of re-rendered frame indices.  Nothing is
    written when an op is rejected.
    """
    bundle = _Bundle(sample_dir)
    for op in script.ops:
        HANDLERS[op.op](op, bundle, cfg)
    for k in sorted(bundle.dirty_frames):
        bundle.rerender(k, cfg)
    bad = check_consistency(bundle.sample_view(), cfg)
    if bad:
        raise ValidationError(f"edited conditions are inconsistent in frames {bad}")

    out = Path(out_dir)
    if out.resolve() != Path(sample_dir).resolve():
        if out.exists():
            shutil.rmtree(out)
        shutil.copytree(sample_dir, out)
    for k in sorted(bundle.dirty_frames):
        l4dt.save(out / f"sketch_{k}.l4dt", bundle.sketches[k])
        l4dt.save(out / f"prior_{k}.l4dt", bundle.priors[k])
    if bundle.caption_dirty:
        (out / "caption.txt").write_text(" ".join(decode_caption(bundle.caption)) + "\n")
    if bundle.boxes_dirty:
        with open(out / "boxes.jsonl", "w") as fh:
            for rec in sorted(bundle.boxes, key=lambda r: (r["frame"], r["id"])):
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return sorted(bundle.dirty_frames)
