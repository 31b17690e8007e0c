"""Qualitative analyses emitted as files: aggregation-weight participation
heatmaps and effective-receptive-field maps, plus the PGM/CSV writers
they share.

Heatmaps are written twice: a binary PGM (P5, maxval 255) of min-max
normalized values for eyeballing, and a raw CSV of the unnormalized
values for arithmetic. Both carry '#' comment headers so every artifact
records what produced it.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError, FormatError
from .lsconv import LsConvConfig, weight_view
from .model import ParamStore, forward_features
from .tensor import Tensor


def write_pgm(path, values: np.ndarray, header_lines=()) -> None:
    """Min-max normalize a 2-D plane to 8-bit gray and write binary PGM."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2:
        raise ConfigurationError(f"PGM wants a 2-D plane, got shape {v.shape}")
    lo, hi = float(v.min()), float(v.max())
    span = hi - lo
    scaled = np.zeros_like(v) if span <= 0 else (v - lo) / span
    pix = np.round(255.0 * scaled).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P5\n")
        for line in header_lines:
            fh.write(f"# {line}\n".encode("utf-8"))
        fh.write(f"# value-range {lo:.8g} {hi:.8g}\n".encode("utf-8"))
        fh.write(f"{v.shape[1]} {v.shape[0]}\n255\n".encode("utf-8"))
        fh.write(pix.tobytes())


def read_pgm(path):
    """Read a binary PGM written by ``write_pgm``.

    Returns (uint8 array (H, W), list of comment lines).
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P5"):
        raise FormatError(f"{path}: not a binary PGM")
    comments = []
    pos = 2
    tokens = []
    while len(tokens) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise FormatError(f"{path}: truncated PGM header")
        if data[pos : pos + 1] == b"#":
            end = data.find(b"\n", pos)
            if end < 0:
                raise FormatError(f"{path}: truncated PGM comment")
            comments.append(data[pos + 1 : end].decode("utf-8").strip())
            pos = end + 1
            continue
        end = pos
        while end < len(data) and not data[end : end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError:
        raise FormatError(f"{path}: malformed PGM header") from None
    if maxval != 255:
        raise FormatError(f"{path}: unsupported maxval {maxval}")
    pos += 1
    raw = data[pos : pos + h * w]
    if len(raw) != h * w:
        raise FormatError(f"{path}: truncated PGM payload")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w), comments


def write_csv_plane(path, values: np.ndarray, header_lines=()) -> None:
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2:
        raise ConfigurationError(f"CSV plane must be 2-D, got shape {v.shape}")
    with open(path, "w") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        for row in v:
            fh.write(",".join(f"{x:.10g}" for x in row) + "\n")


def read_csv_plane(path):
    """Read back a plane written by ``write_csv_plane``.

    Returns (float64 array, list of comment lines).
    """
    rows = []
    comments = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                comments.append(line[1:].strip())
                continue
            rows.append([float(x) for x in line.split(",")])
    if not rows:
        raise FormatError(f"{path}: no data rows")
    return np.asarray(rows, dtype=np.float64), comments


def nearest_upsample(values: np.ndarray, factor: int) -> np.ndarray:
    """Repeat the last two axes ``factor`` times each."""
    if factor < 1:
        raise ConfigurationError(f"upsample factor must be >= 1, got {factor}")
    return np.repeat(np.repeat(values, factor, axis=-2), factor, axis=-1)


def fit_to_extent(plane: np.ndarray, h: int, w: int) -> np.ndarray:
    """Nearest-upsample a plane and center-crop so it covers (h, w) exactly.

    Needed because the resolution ladder rounds up on odd extents, so the
    feature-map size does not always divide the input size.
    """
    ph, pw = plane.shape[-2:]
    factor = max(-(-h // ph), -(-w // pw))
    up = nearest_upsample(plane, factor)
    uy, ux = up.shape[-2:]
    y0, x0 = (uy - h) // 2, (ux - w) // 2
    return up[..., y0 : y0 + h, x0 : x0 + w]


def agg_participation(w: np.ndarray, cfg: LsConvConfig) -> np.ndarray:
    """Per-token accumulated |aggregation weight|, averaged over groups.

    Token (y, x) collects |w[n, g, u, v, i, j]| from every window (i, j)
    that reads it, i.e. whenever (y, x) = (i + u - r, j + v - r).
    Contributions aimed at padding positions fall outside the map and are
    dropped, matching the zero-padding semantics of the aggregation
    itself. Returns (N, H, W) float64.
    """
    wv = np.abs(weight_view(np.asarray(w, dtype=np.float64), cfg))
    n, g, k, _, h, wd = wv.shape
    r = (k - 1) // 2
    out = np.zeros((n, h, wd), dtype=np.float64)
    for u in range(k):
        for v in range(k):
            dy, dx = u - r, v - r
            y0, y1 = max(0, dy), min(h, h + dy)
            x0, x1 = max(0, dx), min(wd, wd + dx)
            if y0 >= y1 or x0 >= x1:
                continue
            out[:, y0:y1, x0:x1] += wv[:, :, u, v, y0 - dy : y1 - dy, x0 - dx : x1 - dx].mean(axis=1)
    return out


def agg_participation_naive(w: np.ndarray, cfg: LsConvConfig) -> np.ndarray:
    """Literal loop-nest oracle for ``agg_participation``."""
    wv = np.abs(weight_view(np.asarray(w, dtype=np.float64), cfg))
    n, g, k, _, h, wd = wv.shape
    r = (k - 1) // 2
    out = np.zeros((n, h, wd), dtype=np.float64)
    for ni in range(n):
        for gi in range(g):
            for u in range(k):
                for v in range(k):
                    for i in range(h):
                        for j in range(wd):
                            y, x = i + u - r, j + v - r
                            if 0 <= y < h and 0 <= x < wd:
                                out[ni, y, x] += wv[ni, gi, u, v, i, j] / g
    return out


def erf_input_gradient(forward, x_data: np.ndarray, position=None) -> np.ndarray:
    """|d output[n, :, yi, xi] / d input|, averaged over input channels.

    ``forward`` maps an input Tensor to a rank-4 feature Tensor. The
    gradient seed is 1 at ``position`` (default: the feature-map center)
    for every channel and batch entry. Returns (N, H, W) float64.
    """
    x = Tensor(np.asarray(x_data), requires_grad=True)
    y = forward(x)
    if y.ndim != 4:
        raise ConfigurationError(f"forward must return rank-4 features, got {y.shape}")
    _, _, fh, fw = y.shape
    if position is None:
        position = (fh // 2, fw // 2)
    yi, xi = position
    if not (0 <= yi < fh and 0 <= xi < fw):
        raise ConfigurationError(f"position {position} outside {fh}x{fw} feature map")
    seed = np.zeros(y.shape, dtype=y.data.dtype)
    seed[:, :, yi, xi] = 1.0
    y.backward(seed)
    return np.abs(x.grad).mean(axis=1).astype(np.float64)


def model_erf(store: ParamStore, images: np.ndarray, stage=None, position=None,
              mode: str = "infer") -> np.ndarray:
    """Effective receptive field of a model stage, averaged over the batch.

    ``stage`` selects where the probed activation lives (1-4, default the
    final stage). Returns an (H, W) plane at input resolution.
    """

    def forward(t):
        return forward_features(store, t, mode=mode, upto_stage=stage)

    x = np.asarray(images).astype(store.dtype, copy=False)
    return erf_input_gradient(forward, x, position=position).mean(axis=0)


def support_mask(plane: np.ndarray, frac: float = 0.01) -> np.ndarray:
    """Pixels whose magnitude exceeds ``frac`` of the plane's maximum."""
    a = np.abs(np.asarray(plane))
    peak = float(a.max())
    if peak == 0.0:
        return np.zeros(a.shape, dtype=bool)
    return a > frac * peak


def support_count(plane: np.ndarray, frac: float = 0.01) -> int:
    return int(support_mask(plane, frac).sum())
