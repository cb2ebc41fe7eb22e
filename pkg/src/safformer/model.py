"""Three-stage spiking transformer: patch embeddings, blocks, classifier head."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .layers import Context, add_bn, add_conv, bn, conv, pool, sn
from .neuron import LifParams
from .saf import DEFAULT_FIXED_RATIO, MODES, init_saf, init_ssa, saf_conv_params, saf_layer, ssa_conv_params, ssa_layer
from .smag import SmagToggles, init_smag, init_smlp, smag_layer, smag_param_count, smlp_layer, smlp_param_count
from .tensor import BNStats, ConfigError, ShapeError, pool_output_size


@dataclass
class ModelConfig:
    input_channels: int = 3
    base_channels: int = 16
    stage_blocks: tuple = (1, 1, 1)
    timesteps: int = 2
    image_size: tuple = (32, 32)
    num_classes: int = 10
    lif: LifParams = field(default_factory=LifParams)
    attention: str = "saf"  # "saf" or the "ssa" baseline
    use_dwconv_qk: bool = True
    sgm_mode: str = "dynamic"
    topk_ratio: float = DEFAULT_FIXED_RATIO
    ffn: str = "smag"  # "smag" or the "smlp" baseline
    smag_kernels: tuple = (3, 7)
    no_pconv: bool = False
    no_multiscale: bool = False
    ssa_scale: float = 0.125

    def __post_init__(self):
        self.stage_blocks = tuple(int(b) for b in self.stage_blocks)
        self.image_size = tuple(int(s) for s in self.image_size)
        self.smag_kernels = tuple(int(k) for k in self.smag_kernels)
        if isinstance(self.lif, dict):
            self.lif = LifParams(**self.lif)

    def validate(self) -> "ModelConfig":
        h, w = self.image_size
        if h != w:
            raise ConfigError(f"images must be square, got {h}x{w}")
        if h < 4 or h % 4:
            raise ConfigError(f"image size must be a positive multiple of 4, got {h}")
        if self.base_channels <= 0 or self.base_channels % 4:
            raise ConfigError(f"base_channels must be a positive multiple of 4, got {self.base_channels}")
        if len(self.stage_blocks) != 3 or min(self.stage_blocks) < 0:
            raise ConfigError(f"stage_blocks needs three non-negative counts, got {self.stage_blocks}")
        if self.timesteps < 1 or self.input_channels < 1 or self.num_classes < 2:
            raise ConfigError("timesteps, input_channels must be >= 1 and num_classes >= 2")
        if self.attention not in ("saf", "ssa"):
            raise ConfigError(f"attention must be 'saf' or 'ssa', got {self.attention!r}")
        if self.ffn not in ("smag", "smlp"):
            raise ConfigError(f"ffn must be 'smag' or 'smlp', got {self.ffn!r}")
        if self.sgm_mode not in MODES:
            raise ConfigError(f"sgm_mode must be one of {MODES}, got {self.sgm_mode!r}")
        if not 0.0 < self.topk_ratio <= 1.0:
            raise ConfigError(f"topk_ratio must lie in (0, 1], got {self.topk_ratio}")
        self.toggles  # validates the kernel pair
        return self

    @property
    def toggles(self) -> SmagToggles:
        return SmagToggles(self.no_pconv, self.no_multiscale, self.smag_kernels)

    @property
    def stage_channels(self) -> tuple[int, int, int]:
        c = self.base_channels
        return (c, 2 * c, 4 * c)

    def token_grids(self) -> list[int]:
        """Side length of the token grid after each stage's embedding."""
        h = self.image_size[0]
        s1 = pool_output_size(-(-h // 2), 2, 2)
        s2 = pool_output_size(s1, 2, 2)
        s3 = pool_output_size(s2, 2, 2)
        return [s1, s2, s3]


# -- construction ----------------------------------------------------------------


def build_weights(config: ModelConfig, seed: int = 0):
    """Fresh parameters and BN statistics for ``config``."""
    config.validate()
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    stats: dict[str, BNStats] = {}
    c_prev = config.input_channels
    for s, (c, nblocks) in enumerate(zip(config.stage_channels, config.stage_blocks), start=1):
        add_conv(params, rng, f"s{s}.embed.conv", c_prev, c, 3)
        add_bn(params, stats, f"s{s}.embed.bn", c)
        for i in range(nblocks):
            p = f"s{s}.b{i}"
            if config.attention == "saf":
                init_saf(params, stats, rng, f"{p}.attn", c, config.use_dwconv_qk)
            else:
                init_ssa(params, stats, rng, f"{p}.attn", c)
            if config.ffn == "smag":
                init_smag(params, stats, rng, f"{p}.ffn", c, config.toggles)
            else:
                init_smlp(params, stats, rng, f"{p}.ffn", c)
        c_prev = c
    bound = 1.0 / np.sqrt(c_prev)
    params["head.w"] = rng.uniform(-bound, bound, size=(c_prev, config.num_classes))
    params["head.b"] = np.zeros(config.num_classes)
    return params, stats


class SAFformer:
    """Spiking transformer with SAF attention and SMAG feedforward blocks."""

    def __init__(self, config: ModelConfig, seed: int = 0, params=None, stats=None):
        self.config = config.validate()
        if params is None:
            params, stats = build_weights(config, seed)
        self.params = params
        self.stats = stats

    # -- forward ---------------------------------------------------------------

    def context(self, param_vars=None, **kw) -> Context:
        vars_ = param_vars if param_vars is not None else {k: ag.Var(v) for k, v in self.params.items()}
        return Context(vars_, self.stats, lif=self.config.lif, **kw)

    def _check_images(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        cfg = self.config
        expect = (cfg.input_channels, *cfg.image_size)
        if images.ndim != 4 or images.shape[1:] != expect:
            raise ShapeError(f"expected images [B, {expect[0]}, {expect[1]}, {expect[2]}], got {images.shape}")
        if not np.all(np.isfinite(images)):
            raise ValueError("images contain non-finite values")
        return images

    def embed(self, ctx: Context, x: ag.Var, stage: int) -> ag.Var:
        """Stage embedding: conv (stride 2 on stage 1) -> BN -> LIF -> 2x2 max-pool."""
        p = f"s{stage}.embed"
        stride, kind = (2, "ann-encoder") if stage == 1 else (1, "snn")
        y = conv(ctx, x, f"{p}.conv", stride=stride, padding=1, kind=kind)
        y = sn(ctx, bn(ctx, y, f"{p}.bn"), f"{p}.sn")
        return pool(ctx, y, f"{p}.pool")

    def block(self, ctx: Context, x: ag.Var, p: str) -> ag.Var:
        cfg = self.config
        if cfg.attention == "saf":
            a = saf_layer(ctx, x, f"{p}.attn", cfg.sgm_mode, cfg.topk_ratio)
        else:
            a = ssa_layer(ctx, x, f"{p}.attn", cfg.ssa_scale)
        x = sn(ctx, ag.add(x, a), f"{p}.res1")
        f = smag_layer(ctx, x, f"{p}.ffn") if cfg.ffn == "smag" else smlp_layer(ctx, x, f"{p}.ffn")
        return sn(ctx, ag.add(x, f), f"{p}.out")

    def units(self) -> list[str]:
        """Names of the sequential stages of the trunk, in execution order."""
        out = []
        for s, nblocks in enumerate(self.config.stage_blocks, start=1):
            out.append(f"s{s}.embed")
            out.extend(f"s{s}.b{i}" for i in range(nblocks))
        return out

    def run_units(self, ctx: Context, x: ag.Var, start: int = 0, cache: list | None = None) -> ag.Var:
        """Run units ``start:`` on ``x``; ``cache`` collects each unit's input."""
        for name in self.units()[start:]:
            if cache is not None:
                cache.append(x)
            if name.endswith(".embed"):
                x = self.embed(ctx, x, int(name[1]))
            else:
                x = self.block(ctx, x, name)
        return x

    def head(self, ctx: Context, x: ag.Var) -> ag.Var:
        feats = ag.mean(x, axis=(3, 4))  # [T, B, C]
        if ctx.recorder is not None:
            ctx.recorder.add_layer("head", "snn", feats.data, (1, 1), feats.shape[-1], self.config.num_classes, 1)
        logits_t = ag.add(ag.matmul(feats, ctx.w("head.w")), ctx.w("head.b"))
        return ctx.keep("logits", ag.mean(logits_t, axis=0))

    def encode(self, images) -> ag.Var:
        """Static images repeated over the time axis: [T, B, C, H, W]."""
        images = self._check_images(images)
        T = self.config.timesteps
        return ag.Var(np.broadcast_to(images, (T,) + images.shape).copy())

    def forward(self, images, *, training: bool = False, param_vars=None, **ctx_kw) -> ag.Var:
        """Logits ``[B, num_classes]``: mean over T of per-timestep head outputs."""
        x = self.encode(images)
        ctx = self.context(param_vars, training=training, **ctx_kw)
        logits = self.head(ctx, self.run_units(ctx, x))
        self.last_info = ctx.info
        return logits

    def predict(self, images, batch_size: int = 64) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        out = [self.forward(images[i:i + batch_size]).data for i in range(0, len(images), batch_size)]
        return np.concatenate(out, axis=0)

    def layer_geometry(self):
        """Per-layer geometry from a dry run on a zero image."""
        from .energy import FiringRecorder

        rec = FiringRecorder()
        cfg = self.config
        self.forward(np.zeros((1, cfg.input_channels, *cfg.image_size)), recorder=rec)
        return rec

    # -- persistence -------------------------------------------------------------

    def save(self, path) -> None:
        save_checkpoint(path, self.config, self.params, self.stats)

    @classmethod
    def load(cls, path) -> "SAFformer":
        config, params, stats = load_checkpoint(path)
        expect, _ = build_weights(config)
        got = {k: v.shape for k, v in params.items()}
        want = {k: v.shape for k, v in expect.items()}
        if got != want:
            bad = sorted(set(got) ^ set(want)) or sorted(k for k in want if got[k] != want[k])
            raise CheckpointError(f"{path}: tensors do not match the stored config (first mismatch {bad[0]!r})")
        return cls(config, params=params, stats=stats)

    def copy(self) -> "SAFformer":
        stats = {k: BNStats(v.mean.copy(), v.var.copy(), v.momentum, v.eps) for k, v in self.stats.items()}
        return SAFformer(self.config, params={k: v.copy() for k, v in self.params.items()}, stats=stats)


def model_forward(images, config: ModelConfig, params, stats=None) -> np.ndarray:
    """Inference logits for ``images`` under explicit weights."""
    if stats is None:
        _, stats = build_weights(config)
    return SAFformer(config, params=params, stats=stats).forward(images).data


# -- parameter accounting ----------------------------------------------------------


def count_params(config: ModelConfig, params: dict | None = None) -> dict:
    """Per-module parameter counts by enumeration, next to the closed forms.

    ``conv`` counts conv/linear kernel elements only; ``total`` counts every
    trainable element including BN affine terms and the head bias.
    """
    if params is None:
        params, _ = build_weights(config)
    modules: dict[str, dict] = {}
    for name, arr in params.items():
        parts = name.split(".")
        if parts[0] == "head":
            mod = "head"
        elif len(parts) > 3 and parts[1].startswith("b"):
            mod = ".".join(parts[:3])
        else:
            mod = ".".join(parts[:2])
        entry = modules.setdefault(mod, {"conv": 0, "bn": 0, "other": 0})
        if ".bn" in name or name.rsplit(".", 1)[-1] in ("gamma", "beta"):
            entry["bn"] += arr.size
        elif arr.ndim == 4 or name == "head.w":
            entry["conv"] += arr.size
        else:
            entry["other"] += arr.size
    closed = {}
    for s, (c, nblocks) in enumerate(zip(config.stage_channels, config.stage_blocks), start=1):
        for i in range(nblocks):
            p = f"s{s}.b{i}"
            if config.ffn == "smag":
                closed[f"{p}.ffn"] = smag_param_count(c, config.toggles)
            else:
                closed[f"{p}.ffn"] = smlp_param_count(c)
            closed[f"{p}.attn"] = (saf_conv_params(c, config.use_dwconv_qk) if config.attention == "saf"
                                   else ssa_conv_params(c))
    total = sum(arr.size for arr in params.values())
    return {"modules": modules, "closed_form": closed, "total": total}


# -- checkpoints -----------------------------------------------------------------------

MAGIC = b"SAFCKPT\x00"
VERSION = 1


def _config_json(config: ModelConfig) -> str:
    from .config import to_dict

    return json.dumps(to_dict(config), sort_keys=True)


def save_checkpoint(path, config: ModelConfig, params: dict, stats: dict) -> None:
    """Versioned header, JSON config, then named little-endian float32 tensors."""
    tensors = dict(params)
    for name, st in stats.items():
        tensors[f"{name}.running_mean"] = st.mean
        tensors[f"{name}.running_var"] = st.var
    cfg = _config_json(config).encode("utf-8")
    chunks = [MAGIC, struct.pack("<II", VERSION, len(cfg)), cfg, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype("<f4").tobytes())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(chunks))


class CheckpointError(ValueError):
    pass


def load_checkpoint(path):
    from .config import model_config_from_dict

    path = Path(path)
    buf = path.read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    try:
        version, clen = struct.unpack_from("<II", buf, 8)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        off = 16
        config = model_config_from_dict(json.loads(buf[off:off + clen].decode("utf-8")))
        off += clen
        (count,) = struct.unpack_from("<I", buf, off)
        off += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<B", buf, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            n = int(np.prod(shape)) if ndim else 1
            if off + 4 * n > len(buf):
                raise CheckpointError(f"{path}: truncated tensor {name!r}")
            tensors[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float64)
            off += 4 * n
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    except (UnicodeDecodeError, json.JSONDecodeError, TypeError, ConfigError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint header ({exc})") from exc
    if off != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - off} trailing bytes after the last tensor")
    stats, params = {}, {}
    for name, arr in tensors.items():
        if name.endswith(".running_mean"):
            base = name[: -len(".running_mean")]
            stats[base] = BNStats(arr, tensors[base + ".running_var"])
        elif not name.endswith(".running_var"):
            params[name] = arr
    return config, params, stats
