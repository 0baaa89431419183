"""Utterance-level visual context vectors.

Per-frame posterior vectors (object or place classifier outputs) are read
from text files, one frame is drawn per video, object and place posteriors
may be concatenated, and the result is projected with PCA.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Dict, Iterable, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import ContractError, DataError, ShapeError

SOURCES = ("object", "place")
KINDS = ("object", "place", "object+place", "pca-projected")


@dataclass
class VideoPosteriors:
    video_id: str
    frames: np.ndarray  # N x D
    source: str = "object"

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise ShapeError(f"video {self.video_id}: frames must be N x D, got {self.frames.shape}")
        if self.source not in SOURCES:
            raise ContractError(f"video {self.video_id}: unknown source {self.source!r}")
        if self.frames.size and (np.any(self.frames < 0)
                                 or not np.allclose(self.frames.sum(axis=1), 1.0, atol=1e-4, rtol=0)):
            raise DataError(f"video {self.video_id}: frames must be non-negative and sum to 1")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class ContextVector:
    utt_id: str
    values: np.ndarray
    kind: str = "pca-projected"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if self.kind not in KINDS:
            raise ContractError(f"unknown context kind {self.kind!r}")

    @property
    def dimension(self) -> int:
        return self.values.shape[0]


def _video_rng(seed: int, video_id: str) -> np.random.Generator:
    digest = hashlib.sha256(video_id.encode("utf-8")).digest()
    words = [int.from_bytes(digest[k:k + 4], "little") for k in range(0, 16, 4)]
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *words]))


def select_context_frame(video: VideoPosteriors, seed: int) -> Tuple[int, np.ndarray]:
    """Pick one frame uniformly at random to represent the whole utterance.

    The draw depends only on ``(seed, video_id, n_frames)``, so adding other
    videos to a corpus never changes the frame chosen for this one.
    """
    if video.n_frames == 0:
        raise DataError(f"video {video.video_id!r} has no frames")
    n = int(_video_rng(seed, video.video_id).integers(video.n_frames))
    return n, video.frames[n]


def concat_context(obj: ContextVector, place: ContextVector) -> ContextVector:
    if obj.utt_id != place.utt_id:
        raise ContractError(f"cannot concatenate contexts of {obj.utt_id!r} and {place.utt_id!r}")
    return ContextVector(obj.utt_id, np.concatenate([obj.values, place.values]), "object+place")


# --------------------------------------------------------------------------
# PCA
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray  # D
    proj: np.ndarray  # k x D, rows are principal directions
    evals: np.ndarray  # k, non-increasing

    @property
    def input_dim(self) -> int:
        return self.proj.shape[1]

    @property
    def output_dim(self) -> int:
        return self.proj.shape[0]

    def tensors(self) -> Dict[str, np.ndarray]:
        return {"mean": self.mean, "proj": self.proj, "evals": self.evals}

    @classmethod
    def from_tensors(cls, tensors: Mapping[str, np.ndarray]) -> "PcaModel":
        try:
            return cls(np.asarray(tensors["mean"]).reshape(-1),
                       np.atleast_2d(tensors["proj"]),
                       np.asarray(tensors["evals"]).reshape(-1))
        except KeyError as exc:
            raise DataError(f"PCA checkpoint is missing tensor {exc}") from exc


def pca_fit(vectors, k: int) -> PcaModel:
    """Fit PCA by eigendecomposition of the sample covariance.

    Each direction is sign-normalized so its largest-magnitude entry is
    positive; tiny negative eigenvalues from rounding are clamped to 0.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"training vectors must form an n x D matrix, got shape {x.shape}")
    n, d = x.shape
    if n < 2:
        raise ContractError(f"pca_fit needs at least 2 vectors, got {n}")
    if not 1 <= k <= d:
        raise ContractError(f"target dimension {k} must lie in [1, {d}]")
    if n < k + 1:
        raise ContractError(f"pca_fit to {k} dims needs at least {k + 1} vectors, got {n}")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (n - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:k]
    evals = np.clip(evals[order], 0.0, None)
    proj = evecs[:, order].T.copy()
    for row in proj:
        j = int(np.argmax(np.abs(row)))
        if row[j] < 0:
            row *= -1.0
    return PcaModel(mean, proj, evals)


def pca_transform(model: PcaModel, vector) -> np.ndarray:
    """Project a vector (or each row of a matrix) onto the principal directions."""
    v = np.asarray(vector, dtype=np.float64)
    if v.shape[-1] != model.input_dim:
        raise ShapeError(f"vector dimension {v.shape[-1]} != PCA input dimension {model.input_dim}")
    return (v - model.mean) @ model.proj.T


def pca_inverse(model: PcaModel, coords) -> np.ndarray:
    return np.asarray(coords, dtype=np.float64) @ model.proj + model.mean


# --------------------------------------------------------------------------
# Context tables
# --------------------------------------------------------------------------


def build_context_table(manifest: Mapping[str, str],
                        posteriors: Mapping[str, Mapping[str, VideoPosteriors]],
                        pca: Optional[PcaModel],
                        seed: int) -> Dict[str, ContextVector]:
    """Map every utterance in ``manifest`` (utt id -> video id) to a context vector.

    ``posteriors`` maps a source name ("object" and/or "place") to videos by
    id. With both sources present the vectors are concatenated object first.
    One frame index is drawn per video and shared by both sources, since both
    classifiers look at the same frame.
    """
    sources = [s for s in SOURCES if s in posteriors]
    if not sources:
        raise ContractError("build_context_table needs at least one posterior source")
    missing = sorted(
        utt for utt, vid in manifest.items()
        if any(vid not in posteriors[s] for s in sources)
    )
    if missing:
        raise DataError(f"no posterior video for utterances: {', '.join(missing)}")
    table: Dict[str, ContextVector] = {}
    for utt in sorted(manifest):
        vid = manifest[utt]
        videos = [posteriors[s][vid] for s in sources]
        counts = {v.n_frames for v in videos}
        if len(counts) != 1:
            raise DataError(f"video {vid!r}: sources disagree on frame count {sorted(counts)}")
        n, _ = select_context_frame(videos[0], seed)
        parts = [ContextVector(utt, v.frames[n], v.source) for v in videos]
        ctx = parts[0] if len(parts) == 1 else concat_context(parts[0], parts[1])
        if pca is not None:
            ctx = ContextVector(utt, pca_transform(pca, ctx.values), "pca-projected")
        table[utt] = ctx
    return table


def context_matrix(table: Mapping[str, ContextVector], ids: Sequence[str]) -> np.ndarray:
    missing = [u for u in ids if u not in table]
    if missing:
        raise DataError(f"missing context vectors for utterances: {', '.join(sorted(missing))}")
    return np.stack([np.asarray(getattr(table[u], "values", table[u]), dtype=np.float64)
                     for u in ids]) if ids else np.zeros((0, 0))


# --------------------------------------------------------------------------
# File formats
# --------------------------------------------------------------------------


def _fmt(values: Iterable[float], spec: Optional[str]) -> str:
    if spec is None:
        return " ".join(map(repr, (float(v) for v in values)))
    return " ".join(format(float(v), spec) for v in values)


def write_posteriors(path, videos: Iterable[VideoPosteriors], float_format: Optional[str] = ".8g"):
    with open(path, "w") as fh:
        for video in videos:
            for n, frame in enumerate(video.frames):
                fh.write(f"{video.video_id}\t{n}\t{_fmt(frame, float_format)}\n")


def read_posteriors(path, source: str = "object") -> Dict[str, VideoPosteriors]:
    """Read ``video_id<TAB>frame_index<TAB>f1 ... fD`` lines into videos."""
    frames: Dict[str, Dict[int, np.ndarray]] = {}
    try:
        fh = open(path)
    except OSError as exc:
        raise DataError(f"cannot read posterior file {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields")
            vid, idx = parts[0], int(parts[1])
            vals = np.array([float(v) for v in parts[2].split()])
            if idx in frames.setdefault(vid, {}):
                raise DataError(f"{path}:{lineno}: duplicate frame {idx} for video {vid!r}")
            frames[vid][idx] = vals
    out = {}
    for vid, by_idx in frames.items():
        if sorted(by_idx) != list(range(len(by_idx))):
            raise DataError(f"{path}: video {vid!r} has non-contiguous frame indices")
        dims = {v.shape[0] for v in by_idx.values()}
        if len(dims) != 1:
            raise DataError(f"{path}: video {vid!r} mixes frame dimensions {sorted(dims)}")
        out[vid] = VideoPosteriors(vid, np.stack([by_idx[i] for i in range(len(by_idx))]), source)
    return out


def write_context_table(path, table: Mapping[str, ContextVector]):
    with open(path, "w") as fh:
        for utt in sorted(table):
            fh.write(f"{utt}\t{_fmt(table[utt].values, None)}\n")


def read_context_table(path, kind: str = "pca-projected") -> Dict[str, ContextVector]:
    table = {}
    try:
        fh = open(path)
    except OSError as exc:
        raise DataError(f"cannot read context table {path}: {exc}") from exc
    dim = None
    with fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            utt, _, rest = line.rstrip("\n").partition("\t")
            vals = np.array([float(v) for v in rest.split()])
            if dim is None:
                dim = vals.shape[0]
            elif vals.shape[0] != dim:
                raise DataError(f"{path}:{lineno}: dimension {vals.shape[0]} != {dim}")
            table[utt] = ContextVector(utt, vals, kind)
    return table


def read_manifest(path) -> Dict[str, str]:
    """Read ``utt_id<TAB>video_id`` lines."""
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 2:
                raise DataError(f"{path}:{lineno}: expected 'utt_id<TAB>video_id'")
            out[parts[0]] = parts[1]
    return out


def write_manifest(path, manifest: Mapping[str, str]):
    with open(path, "w") as fh:
        for utt in sorted(manifest):
            fh.write(f"{utt}\t{manifest[utt]}\n")
