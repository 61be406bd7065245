"""Generation-quality metrics: BEV-histogram MMD/JSD and Fréchet distances.

The Fréchet distances use a fixed-seed random convolutional encoder as the
feature extractor.  Its values are only meaningful relative to each other
(orderings, zero on identical inputs); they are not comparable with numbers
computed with pretrained networks.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from seqlidar.codec import SensorConfig, unproject
from seqlidar.errors import EstimatorError, IngestionError
from seqlidar.functional import conv2d_circular, temporal_conv
from seqlidar.scene import read_manifest, read_sample
from seqlidar.tensor import no_grad

GRID = 64
RADIUS = 40.0
FEATURE_DIM = 192
REG = 1e-6

REPORT_HEADER = (
    "NOTE: FRD/FVD use a fixed-seed random convolutional feature extractor.\n"
    "Absolute values are NOT comparable to published numbers computed with\n"
    "pretrained networks; only orderings and zero-on-identity are meaningful.\n"
)


def bev_histogram(pc, grid=GRID, radius=RADIUS):
    """Normalized top-down occupancy grid of a point cloud.

    Cells are half-open: a point counts when ``|x| < radius`` and
    ``|y| < radius``; the origin falls in cell ``(grid // 2, grid // 2)``.
    Indexing is ``hist[ix, iy]``.  An empty selection gives all zeros.
    """
    xyz = pc.xyz if hasattr(pc, "xyz") else np.asarray(pc, dtype=np.float64)[:, :3]
    x, y = xyz[:, 0], xyz[:, 1]
    keep = (np.abs(x) < radius) & (np.abs(y) < radius)
    hist = np.zeros((grid, grid))
    if not np.any(keep):
        return hist
    scale = grid / (2.0 * radius)
    ix = np.minimum(np.floor((x[keep] + radius) * scale).astype(np.int64), grid - 1)
    iy = np.minimum(np.floor((y[keep] + radius) * scale).astype(np.int64), grid - 1)
    np.add.at(hist, (ix, iy), 1.0)
    return hist / hist.sum()


def _as_matrix(items):
    mat = np.asarray([np.asarray(a, dtype=np.float64).ravel() for a in items])
    return mat


def _sq_dists(a, b):
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d, 0.0)


def median_bandwidth(pooled):
    """Median pairwise Euclidean distance over distinct pairs (1.0 if all coincide)."""
    d = np.sqrt(_sq_dists(pooled, pooled)[np.triu_indices(len(pooled), k=1)])
    gamma = float(np.median(d)) if d.size else 0.0
    if gamma <= 0.0:
        positive = d[d > 0]
        gamma = float(positive.mean()) if positive.size else 1.0
    return gamma


def mmd_squared(set_a, set_b, gamma=None):
    """Unbiased squared MMD with a Gaussian kernel (not clamped, not rescaled)."""
    a, b = _as_matrix(set_a), _as_matrix(set_b)
    m, n = len(a), len(b)
    if m < 2 or n < 2:
        raise EstimatorError(f"unbiased MMD needs at least 2 items per set, got {m} and {n}")
    if gamma is None:
        gamma = median_bandwidth(np.concatenate([a, b]))
    k = lambda u, v: np.exp(-_sq_dists(u, v) / (2.0 * gamma * gamma))  # noqa: E731
    kaa, kbb, kab = k(a, a), k(b, b), k(a, b)
    term_a = (kaa.sum() - np.trace(kaa)) / (m * (m - 1))
    term_b = (kbb.sum() - np.trace(kbb)) / (n * (n - 1))
    return float(term_a + term_b - 2.0 * kab.mean())


def mmd(set_a, set_b, gamma=None):
    """Squared MMD clamped at zero and multiplied by 1e4 (the reported unit)."""
    return 1e4 * max(mmd_squared(set_a, set_b, gamma), 0.0)


def _entropy_terms(p, m):
    mask = p > 0
    return float(np.sum(p[mask] * np.log2(p[mask] / m[mask])))


def jsd(set_a, set_b):
    """Base-2 Jensen–Shannon divergence between the mean histograms of two sets."""
    a, b = _as_matrix(set_a), _as_matrix(set_b)
    if len(a) == 0 or len(b) == 0:
        raise EstimatorError("JSD needs non-empty sets")
    p, q = a.mean(0), b.mean(0)
    if p.sum() <= 0 or q.sum() <= 0:
        raise EstimatorError("JSD is undefined for an all-zero mean histogram")
    p, q = p / p.sum(), q / q.sum()
    m = 0.5 * (p + q)
    value = 0.5 * _entropy_terms(p, m) + 0.5 * _entropy_terms(q, m)
    return float(min(max(value, 0.0), 1.0))


def _sqrtm_psd(mat):
    vals, vecs = np.linalg.eigh(mat)
    return (vecs * np.sqrt(np.maximum(vals, 0.0))) @ vecs.T


def frechet_from_moments(mu_a, cov_a, mu_b, cov_b):
    mu_a, mu_b = np.atleast_1d(mu_a), np.atleast_1d(mu_b)
    cov_a, cov_b = np.atleast_2d(cov_a), np.atleast_2d(cov_b)
    root_a = _sqrtm_psd(cov_a)
    middle = root_a @ cov_b @ root_a
    middle = 0.5 * (middle + middle.T)
    cross = np.sqrt(np.maximum(np.linalg.eigvalsh(middle), 0.0)).sum()
    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * cross)


def feature_moments(feats):
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim == 1:
        feats = feats[:, None]
    if len(feats) < 2:
        raise EstimatorError(f"Fréchet distance needs at least 2 samples per set, got {len(feats)}")
    cov = np.atleast_2d(np.cov(feats, rowvar=False)) + REG * np.eye(feats.shape[1])
    return feats.mean(0), cov


def frechet(feats_a, feats_b):
    """Fréchet distance between Gaussians fitted to two feature sets (rows = samples)."""
    mu_a, cov_a = feature_moments(feats_a)
    mu_b, cov_b = feature_moments(feats_b)
    return max(frechet_from_moments(mu_a, cov_a, mu_b, cov_b), 0.0)


class FeatureExtractor:
    """Fixed-seed random convolutional encoder producing ``FEATURE_DIM`` features.

    Three stride-2 circular convolutions (2 -> 32 -> 64 -> 96 channels) with
    ReLUs; a frame feature is the spatial mean and standard deviation of the
    last map.  A clip feature first mixes the per-frame maps with a random
    frame-axis convolution, so it depends on frame order.
    """

    widths = (2, 32, 64, 96)

    def __init__(self, seed=0):
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.weights = []
        for c_in, c_out in zip(self.widths[:-1], self.widths[1:]):
            w = rng.standard_normal((c_out, c_in, 3, 3)) * np.sqrt(2.0 / (9 * c_in))
            self.weights.append(w.astype(np.float32))
        c = self.widths[-1]
        self.temporal = (rng.standard_normal((c, c, 3)) * np.sqrt(2.0 / (3 * c))).astype(np.float32)

    def _maps(self, frames):
        h = np.asarray(frames, dtype=np.float32)
        with no_grad():
            for w in self.weights:
                h = np.maximum(conv2d_circular(h, w, stride=2).data, 0.0)
        return h

    @staticmethod
    def _pool(maps, axes):
        return np.concatenate([maps.mean(axis=axes), maps.std(axis=axes)], axis=-1)

    def frames(self, frames):
        """Features of each frame in a [N, 2, H, W] stack, shape [N, FEATURE_DIM]."""
        frames = np.asarray(frames)
        if frames.ndim == 3:
            frames = frames[None]
        return self._pool(self._maps(frames).astype(np.float64), (2, 3))

    def clips(self, clips):
        """Features of each clip in a [N, L, 2, H, W] stack, shape [N, FEATURE_DIM]."""
        clips = np.asarray(clips)
        N, L = clips.shape[:2]
        maps = self._maps(clips.reshape((N * L,) + clips.shape[2:]))
        maps = maps.reshape((N, L) + maps.shape[1:])
        with no_grad():
            mixed = np.maximum(temporal_conv(maps, self.temporal).data, 0.0)
        return self._pool(mixed.astype(np.float64), (1, 3, 4))


@dataclass(frozen=True)
class EvalConfig:
    grid: int = GRID
    radius: float = RADIUS
    extractor_seed: int = 0
    clip_len: int = 5
    sensor: SensorConfig = SensorConfig()


def _load_frames(root):
    root = Path(root)
    try:
        seeds = read_manifest(root)
    except IngestionError as exc:
        raise IngestionError(f"{root}: {exc}") from exc
    samples, missing = [], []
    for s in seeds:
        d = root / str(s)
        if not (d / "frame_0.l4dt").exists():
            missing.append(str(d / "frame_0.l4dt"))
            continue
        samples.append(read_sample(d, require_conditions=False))
    if missing:
        raise IngestionError("missing files: " + ", ".join(missing))
    if not samples:
        raise IngestionError(f"{root}: manifest lists no sequences")
    return samples


def compute_metrics(gen_samples, ref_samples, cfg=EvalConfig()):
    """All four metrics for two lists of sequence samples."""
    extractor = FeatureExtractor(cfg.extractor_seed)

    def hists(samples):
        return [bev_histogram(unproject(img, cfg.sensor), cfg.grid, cfg.radius)
                for s in samples for img in s.images]

    def frames(samples):
        return np.concatenate([s.x() for s in samples])

    length = min(cfg.clip_len, min(s.frames for s in gen_samples), min(s.frames for s in ref_samples))

    def clips(samples):
        return np.stack([s.x()[:length] for s in samples])

    hg, hr = hists(gen_samples), hists(ref_samples)
    return {
        "mmd_e4": mmd(hg, hr),
        "jsd": jsd(hg, hr),
        "frd": frechet(extractor.frames(frames(gen_samples)), extractor.frames(frames(ref_samples))),
        "fvd": frechet(extractor.clips(clips(gen_samples)), extractor.clips(clips(ref_samples))),
        "n_gen": len(gen_samples),
        "n_ref": len(ref_samples),
        "extractor_seed": cfg.extractor_seed,
        "clip_len": length,
    }


def format_report(metrics):
    rows = [("MMD (x1e4)", metrics["mmd_e4"]), ("JSD", metrics["jsd"]),
            ("FRD", metrics["frd"]), ("FVD", metrics["fvd"])]
    lines = [REPORT_HEADER, f"{'metric':<12}{'value':>16}", "-" * 28]
    lines += [f"{name:<12}{value:>16.6g}" for name, value in rows]
    lines.append("")
    lines.append(f"sequences: generated={metrics['n_gen']} reference={metrics['n_ref']}")
    lines.append(f"extractor_seed={metrics['extractor_seed']} clip_len={metrics['clip_len']}")
    return "\n".join(lines) + "\n"


def write_metrics(path, metrics):
    """Write ``key=value`` lines in a fixed key order."""
    keys = ["mmd_e4", "jsd", "frd", "fvd", "n_gen", "n_ref", "extractor_seed"]
    Path(path).write_text("".join(f"{k}={metrics[k]!r}\n" for k in keys))


def read_metrics(path):
    out = {}
    for line in Path(path).read_text().splitlines():
        key, value = line.split("=", 1)
        out[key] = json.loads(value) if key.startswith("n_") or key == "extractor_seed" else float(value)
    return out


def evaluate_run(gen_dir, ref_dir, cfg=EvalConfig(), out_file=None):
    """Evaluate a generated dataset directory against a reference one.

    Writes ``metrics.txt`` (or ``out_file``) plus ``report.txt`` and
    ``metrics.json`` next to it when an output path is given.
    """
    metrics = compute_metrics(_load_frames(gen_dir), _load_frames(ref_dir), cfg)
    if out_file is not None:
        out_file = Path(out_file)
        out_file.parent.mkdir(parents=True, exist_ok=True)
        write_metrics(out_file, metrics)
        (out_file.parent / "report.txt").write_text(format_report(metrics))
        structured = dict(metrics, config={k: v for k, v in asdict(cfg).items() if k != "sensor"})
        (out_file.parent / "metrics.json").write_text(json.dumps(structured, indent=1, sort_keys=True))
    return metrics


def write_pgm(path, image):
    """Save a non-negative 2D array as an 8-bit binary portable graymap."""
    image = np.asarray(image, dtype=np.float64)
    peak = image.max() if image.size and image.max() > 0 else 1.0
    pixels = np.round(255.0 * np.clip(image / peak, 0.0, 1.0)).astype(np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_pgm(path):
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)
