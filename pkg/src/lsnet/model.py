"""Whole-network assembly: declarative model descriptions, parameter
construction, forward passes, compute accounting, and weight-file I/O.

A ``ModelSpec`` captures everything that determines the architecture
(channel ladder, block counts, mixer kinds, kernel sizes, ablation
switches). It has a canonical text form whose SHA-256 digest ties weight
files and analysis artifacts to the exact architecture that produced
them. ``build_model`` turns a spec into a ``ParamStore``; ``count_macs``
walks the same structure symbolically, so its parameter total can be
cross-checked against the real allocation.

Resolution contract: the stem reduces input extents by 8, and stages 2-4
each halve again (rounding up), giving feature maps at 1/8, 1/16, 1/32,
and 1/64 of the input. Input extents must be divisible by 8.
"""

from __future__ import annotations

import dataclasses
import hashlib
import struct
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .blocks import (
    SE_REDUCTION,
    BlockFlags,
    DownsampleParams,
    FfnParams,
    LsBlockParams,
    MsaBlockParams,
    Registrar,
    StemParams,
    attn_dims,
    build_downsample,
    build_ls_block,
    build_msa_block,
    build_stem,
    downsample_forward,
    ls_block_forward,
    msa_block_forward,
    stem_forward,
)
from .errors import ConfigurationError, FormatError, IncompatibilityError
from .lsconv import LsConvConfig, MacReport, Norm, ls_conv_macs
from .tensor import (
    BnState,
    ConvParams,
    Tensor,
    batch_norm,
    conv2d,
    global_avg_pool,
    reshape,
)

_SPEC_HEADER = "lsnet-spec v1"

MIXER_KINDS = ("ls", "msa")


@dataclass(frozen=True)
class ModelSpec:
    """Declarative architecture description with a canonical text form."""

    name: str
    stem: tuple
    channels: tuple
    blocks: tuple
    classes: int
    in_channels: int = 3
    mixers: tuple = ("ls", "ls", "ls", "msa")
    k_large: int = 7
    k_small: int = 3
    group_width: int = 8
    disable_dw: bool = False
    disable_se: bool = False
    disable_lkp_dw: bool = False

    def __post_init__(self):
        object.__setattr__(self, "stem", tuple(int(v) for v in self.stem))
        object.__setattr__(self, "channels", tuple(int(v) for v in self.channels))
        object.__setattr__(self, "blocks", tuple(int(v) for v in self.blocks))
        object.__setattr__(self, "mixers", tuple(self.mixers))
        if not self.name or any(ch.isspace() for ch in self.name):
            raise ConfigurationError(f"model name must be a single token, got {self.name!r}")
        if len(self.stem) != 3:
            raise ConfigurationError(f"stem ladder needs 3 channel counts, got {self.stem}")
        if len(self.channels) != 4 or len(self.blocks) != 4 or len(self.mixers) != 4:
            raise ConfigurationError("channels, blocks, and mixers must each have 4 entries")
        if any(c < 1 for c in self.stem) or any(c < 1 for c in self.channels):
            raise ConfigurationError("channel counts must be positive")
        if any(b < 0 for b in self.blocks):
            raise ConfigurationError("block counts must be non-negative")
        if self.stem[-1] != self.channels[0]:
            raise ConfigurationError(
                f"stem output {self.stem[-1]} must equal stage-1 channels {self.channels[0]}"
            )
        if self.classes < 2:
            raise ConfigurationError(f"need at least 2 classes, got {self.classes}")
        if self.in_channels < 1:
            raise ConfigurationError("in_channels must be positive")
        for kind in self.mixers:
            if kind not in MIXER_KINDS:
                raise ConfigurationError(f"unknown mixer kind {kind!r}; choices: {MIXER_KINDS}")
        for i in range(4):
            if self.blocks[i] == 0:
                continue
            c = self.channels[i]
            if self.mixers[i] == "ls":
                if c % self.group_width:
                    raise ConfigurationError(
                        f"stage {i + 1}: group width {self.group_width} does not divide {c}"
                    )
                self.ls_config(i)
            else:
                attn_dims(c)

    def ls_config(self, stage: int) -> LsConvConfig:
        c = self.channels[stage]
        return LsConvConfig(
            channels=c,
            k_large=self.k_large,
            k_small=self.k_small,
            groups=c // self.group_width,
            lkp_dw=not self.disable_lkp_dw,
        )

    def to_text(self) -> str:
        lines = [
            _SPEC_HEADER,
            f"name {self.name}",
            f"classes {self.classes}",
            f"in-channels {self.in_channels}",
            "stem " + " ".join(str(v) for v in self.stem),
            "channels " + " ".join(str(v) for v in self.channels),
            "blocks " + " ".join(str(v) for v in self.blocks),
            "mixers " + " ".join(self.mixers),
            f"k-large {self.k_large}",
            f"k-small {self.k_small}",
            f"group-width {self.group_width}",
            f"disable-dw {int(self.disable_dw)}",
            f"disable-se {int(self.disable_se)}",
            f"disable-lkp-dw {int(self.disable_lkp_dw)}",
        ]
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    @staticmethod
    def from_text(text: str) -> "ModelSpec":
        lines = [ln.rstrip() for ln in text.strip("\n").split("\n")]
        if not lines or lines[0] != _SPEC_HEADER:
            raise FormatError(f"model text must start with {_SPEC_HEADER!r}")
        fields: dict = {}
        for ln in lines[1:]:
            if not ln.strip():
                continue
            key, _, rest = ln.partition(" ")
            if not rest.strip():
                raise FormatError(f"malformed model line {ln!r}")
            if key in fields:
                raise FormatError(f"duplicate model key {key!r}")
            fields[key] = rest.strip()
        try:
            spec = ModelSpec(
                name=fields.pop("name"),
                classes=int(fields.pop("classes")),
                in_channels=int(fields.pop("in-channels")),
                stem=tuple(int(v) for v in fields.pop("stem").split()),
                channels=tuple(int(v) for v in fields.pop("channels").split()),
                blocks=tuple(int(v) for v in fields.pop("blocks").split()),
                mixers=tuple(fields.pop("mixers").split()),
                k_large=int(fields.pop("k-large")),
                k_small=int(fields.pop("k-small")),
                group_width=int(fields.pop("group-width")),
                disable_dw=bool(int(fields.pop("disable-dw"))),
                disable_se=bool(int(fields.pop("disable-se"))),
                disable_lkp_dw=bool(int(fields.pop("disable-lkp-dw"))),
            )
        except KeyError as exc:
            raise FormatError(f"model text missing key {exc.args[0]!r}") from None
        except ValueError as exc:
            raise FormatError(f"malformed model text: {exc}") from None
        if fields:
            raise FormatError(f"unknown model keys: {sorted(fields)}")
        return spec


VARIANTS = {
    "t": dict(stem=(16, 32, 64), channels=(64, 128, 256, 384), blocks=(0, 2, 8, 10), classes=1000),
    "s": dict(stem=(24, 48, 96), channels=(96, 192, 320, 448), blocks=(1, 2, 8, 10), classes=1000),
    "b": dict(stem=(32, 64, 128), channels=(128, 256, 384, 512), blocks=(4, 6, 8, 10), classes=1000),
    "micro": dict(stem=(8, 16, 32), channels=(32, 64, 96, 128), blocks=(0, 1, 2, 2), classes=10),
    "gradcheck-tiny": dict(stem=(2, 4, 8), channels=(8, 16, 16, 16), blocks=(1, 1, 1, 1), classes=4),
}

# Target budgets for the three full-size variants at 224x224 input:
# (parameters, MACs). Both must land within 10 percent.
BUDGETS = {
    "t": (11_400_000, 300_000_000),
    "s": (16_100_000, 500_000_000),
    "b": (23_200_000, 1_300_000_000),
}


def variant(name: str) -> ModelSpec:
    try:
        kw = VARIANTS[name]
    except KeyError:
        raise ConfigurationError(
            f"unknown variant {name!r}; choices: {sorted(VARIANTS)}"
        ) from None
    return ModelSpec(name=name, **kw)


def ablate(spec: ModelSpec, **toggles) -> ModelSpec:
    """Return a copy with ablation switches flipped (disable_dw and friends)."""
    return dataclasses.replace(spec, **toggles)


@dataclass
class StageParams:
    downsample: Optional[DownsampleParams]
    blocks: list
    mixer: str


@dataclass
class HeadParams:
    norm: Norm
    fc: ConvParams


@dataclass
class ParamStore:
    """A built model: flat name->tensor dicts plus the structured tree.

    ``params`` and ``states`` preserve build order, which fixes both the
    serialization layout and the optimizer's update order.
    """

    spec: ModelSpec
    dtype: np.dtype
    params: dict
    states: dict
    stem: StemParams
    stages: list
    head: HeadParams


def build_model(spec: ModelSpec, seed: int = 0, dtype="f32") -> ParamStore:
    reg = Registrar(seed, dtype)
    flags = BlockFlags(spec.disable_dw, spec.disable_se)
    stem = build_stem(reg, "stem", spec.in_channels, spec.stem)
    stages = []
    prev = spec.stem[-1]
    for i in range(4):
        c, n_blocks, mixer = spec.channels[i], spec.blocks[i], spec.mixers[i]
        ds = None
        if i > 0:
            ds = build_downsample(reg, f"s{i + 1}.ds", prev, c, stride=2)
        blk_list = []
        for j in range(n_blocks):
            prefix = f"s{i + 1}.b{j}"
            if mixer == "ls":
                blk_list.append(build_ls_block(reg, prefix, c, spec.ls_config(i), flags))
            else:
                blk_list.append(build_msa_block(reg, prefix, c, flags))
        stages.append(StageParams(ds, blk_list, mixer))
        prev = c
    head = HeadParams(reg.norm("head.bn", prev), reg.conv("head.fc", prev, spec.classes, 1, bias=True))
    return ParamStore(spec, reg.dtype, reg.params, reg.states, stem, stages, head)


def count_params(store: ParamStore) -> int:
    return sum(t.size for t in store.params.values())


def _as_input(store: ParamStore, x) -> Tensor:
    if isinstance(x, Tensor):
        t = x
    else:
        arr = np.asarray(x)
        if arr.dtype != store.dtype:
            arr = arr.astype(store.dtype)
        t = Tensor(arr)
    if t.ndim != 4 or t.shape[1] != store.spec.in_channels:
        raise ConfigurationError(
            f"expected (N, {store.spec.in_channels}, H, W) input, got {t.shape}"
        )
    return t


def forward_features(
    store: ParamStore,
    x,
    mode: str = "infer",
    upto_stage: Optional[int] = None,
    probe: Optional[dict] = None,
) -> Tensor:
    """Run stem and stages; ``upto_stage`` (1-4) stops after that stage.

    When ``probe`` is a dict, every LS block deposits its aggregation
    weight map under the key ``"s<i>.b<j>.agg_weights"``.
    """
    if upto_stage is not None and not 1 <= upto_stage <= 4:
        raise ConfigurationError(f"upto_stage must be in 1..4, got {upto_stage}")
    t = _as_input(store, x)
    t = stem_forward(t, store.stem, mode)
    for i, stage in enumerate(store.stages, start=1):
        if stage.downsample is not None:
            t = downsample_forward(t, stage.downsample, mode)
        for j, blk in enumerate(stage.blocks):
            if stage.mixer == "ls":
                t = ls_block_forward(t, blk, mode, probe=probe, name=f"s{i}.b{j}")
            else:
                t = msa_block_forward(t, blk, mode)
        if upto_stage == i:
            return t
    return t


def forward_logits(
    store: ParamStore, x, mode: str = "infer", probe: Optional[dict] = None
) -> Tensor:
    """Features -> global average pool -> BatchNorm -> linear head."""
    f = forward_features(store, x, mode, probe=probe)
    g = global_avg_pool(f)
    hn = store.head.norm
    g = batch_norm(g, hn.scale, hn.shift, hn.state, mode)
    y = conv2d(g, store.head.fc, op="conv2d:pw")
    return reshape(y, (y.shape[0], store.spec.classes))


def forward_classify(store: ParamStore, images) -> Tensor:
    """Inference-mode logits for a normalized image batch (N, C, H, W)."""
    return forward_logits(store, images, mode="infer")


def stage_resolutions(spec: ModelSpec, h: int, w: int) -> list:
    """Feature-map extents after the stem and after each stage."""
    if h % 8 or w % 8:
        raise ConfigurationError(f"input extents must be divisible by 8, got {h}x{w}")
    hh, ww = h // 8, w // 8
    out = [(hh, ww)]
    for _ in range(3):
        hh = (hh - 1) // 2 + 1
        ww = (ww - 1) // 2 + 1
        out.append((hh, ww))
    return out


def _conv_entry(rep, name, out_hw, c_in, c_out, k, groups=1, bias=False, bn=True):
    taps = (c_in // groups) * k * k
    rep.add(name, out_hw * c_out * taps, c_out * taps + (c_out if bias else 0))
    if bn:
        rep.add(name + ".bn", 0, 2 * c_out)


def count_macs(spec: ModelSpec, h: int, w: int) -> MacReport:
    """Symbolic multiply-accumulate and parameter walk of the whole model.

    Mirrors ``build_model`` entry for entry; the parameter column must
    total exactly ``count_params(build_model(spec))``. Normalization,
    activations, pooling, softmax, and residual adds count zero MACs.
    """
    res = stage_resolutions(spec, h, w)
    c_in = spec.in_channels
    c1, c2, c3 = spec.stem
    rep = MacReport()
    _conv_entry(rep, "stem.conv1", (h // 2) * (w // 2), c_in, c1, 3)
    _conv_entry(rep, "stem.dw2", (h // 4) * (w // 4), c1, c1, 3, groups=c1)
    _conv_entry(rep, "stem.pw2", (h // 4) * (w // 4), c1, c2, 1)
    _conv_entry(rep, "stem.dw3", (h // 8) * (w // 8), c2, c2, 3, groups=c2)
    _conv_entry(rep, "stem.pw3", (h // 8) * (w // 8), c2, c3, 1)
    prev = c3
    for i in range(4):
        c = spec.channels[i]
        hh, ww = res[i]
        hw = hh * ww
        if i > 0:
            _conv_entry(rep, f"s{i + 1}.ds.dw", hw, prev, prev, 3, groups=prev)
            _conv_entry(rep, f"s{i + 1}.ds.pw", hw, prev, c, 1)
        for j in range(spec.blocks[i]):
            prefix = f"s{i + 1}.b{j}"
            if not spec.disable_dw:
                _conv_entry(rep, f"{prefix}.dw", hw, c, c, 3, groups=c)
            if not spec.disable_se:
                hidden = max(1, c // SE_REDUCTION)
                rep.add(
                    f"{prefix}.se",
                    c * hidden + hidden * c,
                    c * hidden + hidden + hidden * c + c,
                )
            if spec.mixers[i] == "ls":
                rep.extend(ls_conv_macs(spec.ls_config(i), hh, ww), prefix=f"{prefix}.")
                rep.add(f"{prefix}.mixer.bn", 0, 2 * c)
            else:
                heads, width = attn_dims(c)
                for side in ("q", "k", "v"):
                    _conv_entry(rep, f"{prefix}.attn.{side}", hw, c, width, 1, bias=True, bn=False)
                rep.add(f"{prefix}.attn.scores", hw * hw * width, 0)
                rep.add(f"{prefix}.attn.mix", hw * hw * width, 0)
                _conv_entry(rep, f"{prefix}.attn.proj", hw, width, c, 1)
            _conv_entry(rep, f"{prefix}.ffn.pw1", hw, c, 2 * c, 1)
            _conv_entry(rep, f"{prefix}.ffn.pw2", hw, 2 * c, c, 1)
        prev = c
    rep.add("head.bn", 0, 2 * prev)
    rep.add("head.fc", prev * spec.classes, prev * spec.classes + spec.classes)
    return rep


# ---------------------------------------------------------------------------
# Weight-file serialization.
#
# Layout (all integers little-endian):
#   magic "LSW1" | u32 version | 64-byte hex SHA-256 of the model text |
#   u64 text length | model text (utf-8) | u32 entry count |
#   entries: u16 name length, name, u8 dtype code (0=f32, 1=f64),
#            u8 ndim, u32 dims..., u64 blob offset, u64 byte count |
#   u64 blob length | raw tensor bytes.
#
# Entries are parameters in build order followed by BatchNorm running
# statistics, which makes save -> load -> save byte-identical.
# ---------------------------------------------------------------------------

_MAGIC = b"LSW1"
_VERSION = 1
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def _entry_arrays(store: ParamStore):
    for name, t in store.params.items():
        yield name, t.data
    for key, st in store.states.items():
        yield f"{key}.running_mean", st.mean
        yield f"{key}.running_var", st.var


def save_weights(store: ParamStore, path) -> None:
    text = store.spec.to_text().encode("utf-8")
    digest = store.spec.digest().encode("ascii")
    directory = []
    blobs = []
    offset = 0
    for name, arr in _entry_arrays(store):
        code = 0 if arr.dtype == np.float32 else 1
        raw = np.ascontiguousarray(arr, dtype=_CODE_DTYPES[code]).tobytes()
        name_b = name.encode("utf-8")
        part = struct.pack("<H", len(name_b)) + name_b
        part += struct.pack("<BB", code, arr.ndim)
        if arr.ndim:
            part += struct.pack(f"<{arr.ndim}I", *arr.shape)
        part += struct.pack("<QQ", offset, len(raw))
        directory.append(part)
        blobs.append(raw)
        offset += len(raw)
    blob = b"".join(blobs)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(digest)
        fh.write(struct.pack("<Q", len(text)))
        fh.write(text)
        fh.write(struct.pack("<I", len(directory)))
        fh.write(b"".join(directory))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)


class _Reader:
    def __init__(self, data: bytes, label: str):
        self.data = data
        self.pos = 0
        self.label = label

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.label}: truncated weight file")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str) -> int:
        (v,) = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return v


def load_weights(path, expect: Optional[ModelSpec] = None) -> ParamStore:
    """Read a weight file back into a freshly built ``ParamStore``.

    Raises ``FormatError`` for structural damage and
    ``IncompatibilityError`` when the file is valid but describes a
    different architecture than ``expect`` (or than itself claims).
    """
    with open(path, "rb") as fh:
        data = fh.read()
    label = str(path)
    r = _Reader(data, label)
    if r.take(4) != _MAGIC:
        raise FormatError(f"{label}: not a weight file (bad magic)")
    version = r.unpack("<I")
    if version != _VERSION:
        raise IncompatibilityError(f"{label}: unsupported weight-file version {version}")
    digest = r.take(64).decode("ascii", errors="replace")
    text = r.take(r.unpack("<Q")).decode("utf-8")
    if hashlib.sha256(text.encode("utf-8")).hexdigest() != digest:
        raise FormatError(f"{label}: embedded model text does not match its digest")
    spec = ModelSpec.from_text(text)
    if expect is not None and expect.digest() != digest:
        raise IncompatibilityError(
            f"{label}: weights are for model {spec.name!r} ({digest[:12]}...), "
            f"expected {expect.name!r} ({expect.digest()[:12]}...)"
        )
    count = r.unpack("<I")
    entries = []
    for _ in range(count):
        name = r.take(r.unpack("<H")).decode("utf-8")
        code = r.unpack("<B")
        ndim = r.unpack("<B")
        if code not in _CODE_DTYPES:
            raise FormatError(f"{label}: unknown dtype code {code} for {name!r}")
        dims = struct.unpack(f"<{ndim}I", r.take(4 * ndim)) if ndim else ()
        off = r.unpack("<Q")
        nbytes = r.unpack("<Q")
        entries.append((name, _CODE_DTYPES[code], dims, off, nbytes))
    blob = r.take(r.unpack("<Q"))
    if r.pos != len(data):
        raise FormatError(f"{label}: trailing bytes after payload")
    codes = {dt for _, dt, _, _, _ in entries}
    if len(codes) > 1:
        raise FormatError(f"{label}: mixed tensor dtypes in one file")
    file_dtype = entries[0][1] if entries else np.dtype("<f4")
    store = build_model(spec, seed=0, dtype="f32" if file_dtype.itemsize == 4 else "f64")
    targets = dict(_entry_arrays(store))
    seen = set()
    for name, dt, dims, off, nbytes in entries:
        if name in seen:
            raise FormatError(f"{label}: duplicate tensor {name!r}")
        seen.add(name)
        if name not in targets:
            raise IncompatibilityError(f"{label}: unexpected tensor {name!r}")
        target = targets[name]
        if tuple(dims) != target.shape:
            raise IncompatibilityError(
                f"{label}: {name!r} has shape {tuple(dims)}, expected {target.shape}"
            )
        want = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        if nbytes != want or off + nbytes > len(blob):
            raise FormatError(f"{label}: bad extent for tensor {name!r}")
        arr = np.frombuffer(blob, dtype=dt, count=want // dt.itemsize, offset=off)
        target[...] = arr.reshape(dims)
    missing = sorted(set(targets) - seen)
    if missing:
        raise IncompatibilityError(f"{label}: missing tensors, first: {missing[0]!r}")
    return store
