"""Training loop with resumable checkpoints.

A checkpoint directory holds one L4DT file per tensor (live weights, EMA
weights and the two Adam moments), a tab-separated ``index.txt`` listing
``name  shape  file`` for every weight, and ``manifest.json`` with the step
counter, the generator state, the smoothed loss and the model/schedule/
sampler configuration.  Restoring all of that makes a resumed run produce
exactly the losses the uninterrupted run would have produced.
"""

from __future__ import annotations

import json
import math
import shutil
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from seqlidar import l4dt
from seqlidar.bundle import ConditionBundle
from seqlidar.diffusion import DEFAULT_STEPS, T_FLOOR, train_loss
from seqlidar.errors import IngestionError, TrainingDivergenceError
from seqlidar.net import NetConfig, SequenceNoisePredictor
from seqlidar.nn import EMA, Adam
from seqlidar.tensor import backward

LATEST = "latest.txt"


@dataclass(frozen=True)
class TrainConfig:
    batch: int = 2
    steps: int = 20000
    lr: float = 2e-4
    ema_decay: float = 0.999
    seed: int = 0
    checkpoint_every: int = 500
    smoothing: float = 0.98


@dataclass
class TrainResult:
    step: int
    losses: list = field(default_factory=list)
    smoothed: list = field(default_factory=list)
    checkpoint: Path | None = None


class TrainingData:
    """In-memory arrays for a list of :class:`~seqlidar.scene.SequenceSample`."""

    def __init__(self, samples):
        if not samples:
            raise IngestionError("training set is empty")
        self.x = np.stack([s.x() for s in samples]).astype(np.float32)
        self.sketch = np.stack([s.sketches for s in samples]).astype(np.float32)
        self.prior = np.stack([s.priors for s in samples]).astype(np.float32)
        self.captions = [list(s.caption) for s in samples]

    def __len__(self):
        return len(self.x)

    def batch(self, idx):
        idx = np.asarray(idx)
        cond = ConditionBundle(self.sketch[idx], self.prior[idx], [self.captions[i] for i in idx])
        return self.x[idx], cond

    def draw(self, rng, size):
        n = len(self)
        return np.sort(rng.choice(n, size=size, replace=size > n))


class Smoother:
    """Bias-corrected exponential moving average of the loss."""

    def __init__(self, beta=0.98, value=0.0, count=0):
        self.beta, self.value, self.count = beta, value, count

    def update(self, loss):
        self.count += 1
        self.value = self.beta * self.value + (1.0 - self.beta) * loss
        return self.current

    @property
    def current(self):
        if self.count == 0:
            return math.nan
        return self.value / (1.0 - self.beta**self.count)


# -- checkpoints --------------------------------------------------------------------------


def _file_name(name):
    return name + ".l4dt"


def _write_tensors(directory, tensors):
    directory.mkdir(parents=True, exist_ok=True)
    for name, array in tensors.items():
        l4dt.save(directory / _file_name(name), array)


def _read_tensors(directory, names):
    return {name: l4dt.load(directory / _file_name(name)) for name in names}


def save_checkpoint(root, step, model, ema, opt, rng, smoother, train_cfg, extra=None):
    """Write ``root/step_<step>`` atomically and point ``latest.txt`` at it."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    name = f"step_{step:07d}"
    final = root / name
    tmp = root / (name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    params = model.state_dict()
    _write_tensors(tmp / "weights", params)
    _write_tensors(tmp / "ema", ema.state_dict())
    names = list(params)
    _write_tensors(tmp / "adam_m", dict(zip(names, opt.m)))
    _write_tensors(tmp / "adam_v", dict(zip(names, opt.v)))
    with open(tmp / "index.txt", "w") as fh:
        for n, a in params.items():
            fh.write(f"{n}\t{'x'.join(map(str, a.shape))}\tweights/{_file_name(n)}\n")
    manifest = {
        "step": step,
        "model": model.cfg.to_dict(),
        "dtype": np.dtype(model.dtype).name,
        "schedule": {"kind": "alpha-cosine", "t_floor": T_FLOOR},
        "sampler": {"steps": DEFAULT_STEPS},
        "train": asdict(train_cfg),
        "adam_step": opt.step_count,
        "rng_state": rng.bit_generator.state,
        "smoother": {"value": smoother.value, "count": smoother.count},
    }
    if extra:
        manifest.update(extra)
    (tmp / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    if final.exists():
        shutil.rmtree(final)
    tmp.rename(final)
    (root / LATEST).write_text(name + "\n")
    return final


def latest_checkpoint(root):
    path = Path(root) / LATEST
    if not path.exists():
        return None
    return Path(root) / path.read_text().strip()


def read_index(ckpt):
    rows = []
    for line in (Path(ckpt) / "index.txt").read_text().splitlines():
        name, shape, rel = line.split("\t")
        rows.append((name, tuple(int(s) for s in shape.split("x") if s), rel))
    return rows


def read_manifest(ckpt):
    return json.loads((Path(ckpt) / "manifest.json").read_text())


def load_model(ckpt, ema=True):
    """Rebuild the network stored in ``ckpt`` (EMA weights by default)."""
    ckpt = Path(ckpt)
    if ckpt.is_dir() and (ckpt / LATEST).exists():
        ckpt = latest_checkpoint(ckpt)
    if not (ckpt / "manifest.json").exists():
        raise IngestionError(f"{ckpt}: not a checkpoint directory")
    manifest = read_manifest(ckpt)
    model = SequenceNoisePredictor(NetConfig(**manifest["model"]), dtype=np.dtype(manifest["dtype"]))
    names = [n for n, _, _ in read_index(ckpt)]
    model.load_state_dict(_read_tensors(ckpt / ("ema" if ema else "weights"), names))
    return model


# -- loop ---------------------------------------------------------------------------------


def _format_log(step, loss, smooth, wall):
    return f"step={step} loss={loss!r} smooth={smooth!r} wall={wall:.3f}\n"


def parse_log(path):
    """Return a list of ``{"step", "loss", "smooth", "wall"}`` dicts from ``train.log``."""
    rows = []
    for line in Path(path).read_text().splitlines():
        fields = dict(item.split("=", 1) for item in line.split())
        rows.append({"step": int(fields["step"]), "loss": float(fields["loss"]),
                     "smooth": float(fields["smooth"]), "wall": float(fields["wall"])})
    return rows


def train(model, data, cfg=TrainConfig(), out_dir=None, resume=True, extra_manifest=None,
          max_wall=None, callback=None):
    """Optimise ``model`` on ``data`` with the epsilon-prediction loss.

    Args:
        model: A :class:`SequenceNoisePredictor`.
        data: :class:`TrainingData` or a list of sequence samples.
        cfg: Hyperparameters; ``cfg.steps`` is the total step count.
        out_dir: Run directory for ``train.log`` and ``checkpoints/``; when
            ``None`` nothing is written.
        resume: Continue from the latest checkpoint in ``out_dir`` if any.
        max_wall: Optional wall-clock budget in seconds; training stops
            early (after checkpointing) once it is exceeded.
        callback: Optional ``callback(step, loss, smooth)``.

    Raises:
        TrainingDivergenceError: If a loss is NaN or infinite.  Nothing is
            written for the failing step, so the last checkpoint stays the
            most recent good state.
    """
    if not isinstance(data, TrainingData):
        data = TrainingData(data)
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.parameters(), lr=cfg.lr)
    ema = EMA(model, cfg.ema_decay)
    smoother = Smoother(cfg.smoothing)
    start, wall0 = 0, 0.0
    ckpt_root = log_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt_root = out_dir / "checkpoints"
        log_path = out_dir / "train.log"
        ckpt = latest_checkpoint(ckpt_root) if resume else None
        if ckpt is not None:
            start, wall0 = _restore(ckpt, model, ema, opt, rng, smoother)
            _truncate_log(log_path, start)
        elif log_path.exists():
            log_path.unlink()

    result = TrainResult(step=start)
    t0 = time.perf_counter() - wall0
    log = open(log_path, "a") if log_path else None
    try:
        for step in range(start + 1, cfg.steps + 1):
            x, cond = data.batch(data.draw(rng, cfg.batch))
            model.zero_grad()
            loss_t = train_loss(model, x, cond, rng)
            loss = float(loss_t.data)
            if not math.isfinite(loss):
                raise TrainingDivergenceError(step)
            backward(loss_t)
            opt.step()
            ema.update(model)
            smooth = smoother.update(loss)
            wall = time.perf_counter() - t0
            result.step = step
            result.losses.append(loss)
            result.smoothed.append(smooth)
            if log:
                log.write(_format_log(step, loss, smooth, wall))
                log.flush()
            if callback:
                callback(step, loss, smooth)
            out_of_time = max_wall is not None and wall > max_wall
            if ckpt_root and (step % cfg.checkpoint_every == 0 or step == cfg.steps or out_of_time):
                result.checkpoint = save_checkpoint(ckpt_root, step, model, ema, opt, rng, smoother,
                                                    cfg, dict(extra_manifest or {}, wall=wall))
            if out_of_time:
                break
    finally:
        if log:
            log.close()
    model.ema_state = ema.state_dict()
    return result


def _restore(ckpt, model, ema, opt, rng, smoother):
    manifest = read_manifest(ckpt)
    names = [n for n, _, _ in read_index(ckpt)]
    model.load_state_dict(_read_tensors(ckpt / "weights", names))
    ema.shadow = _read_tensors(ckpt / "ema", names)
    m = _read_tensors(ckpt / "adam_m", names)
    v = _read_tensors(ckpt / "adam_v", names)
    opt.load_state({"step": manifest["adam_step"], "m": [m[n] for n in names], "v": [v[n] for n in names]})
    rng.bit_generator.state = manifest["rng_state"]
    smoother.value = manifest["smoother"]["value"]
    smoother.count = manifest["smoother"]["count"]
    return manifest["step"], manifest.get("wall", 0.0)


def _truncate_log(path, step):
    """Drop log lines written after the checkpoint being resumed from."""
    if not path.exists():
        return
    keep = [line for line in path.read_text().splitlines(keepends=True)
            if int(line.split()[0].split("=")[1]) <= step]
    path.write_text("".join(keep))
