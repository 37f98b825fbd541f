"""Gated coarse-to-fine localization network.

Three self-attention streams (left, right, left-right) are pooled over time,
joined with the GCC-PHAT vector and refined by an MLP into a shared feature
``f``. Each of the ``M`` azimuth branches derives a coarse feature and a
coarse detection probability; each of its ``N`` elevation branches derives a
fine feature from ``f``, blends it with the coarse one through a sigmoid gate
and predicts (detection, azimuth, elevation), all in ``(0, 1)``.

Per-branch weights are held as stacked arrays (leading ``(M,)`` or
``(M, N)`` axes); slice ``[i]`` / ``[i, j]`` belongs to exactly one branch.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import nn
from .geometry import SectorGrid
from .nn import Tensor

VARIANTS = ("full", "no_coarse", "non_hierarchical", "regular_loss")


@dataclass
class AuralNetConfig:
    grid: SectorGrid = field(default_factory=SectorGrid)
    n_frames: int = 39
    n_bands: int = 64
    n_cc: int = 33
    d_model: int = 64
    heads: int = 4
    agg_hidden: tuple = (128,)
    agg_out: int = 128
    branch_dim: int = 64
    head_hidden: int = 32
    variant: str = "full"
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.d_model % 2:
            raise ValueError("d_model must be even for the positional encoding")
        self.agg_hidden = tuple(self.agg_hidden)

    @property
    def pooled_width(self) -> int:
        return 3 * self.d_model + self.n_cc

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = self.grid.to_dict()
        d["agg_hidden"] = list(self.agg_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AuralNetConfig":
        d = dict(d)
        if "grid" in d:
            d["grid"] = SectorGrid.from_dict(d["grid"])
        return cls(**d)

    def with_variant(self, variant: str) -> "AuralNetConfig":
        return replace(self, variant=variant)


class AuralNet(nn.Module):
    def __init__(self, config: AuralNetConfig | None = None):
        super().__init__()
        self.config = cfg = config or AuralNetConfig()
        dt = np.dtype(cfg.dtype)
        rng = np.random.default_rng(cfg.seed)
        m, n = cfg.grid.m_azimuth, cfg.grid.n_elevation
        A, D, H = cfg.agg_out, cfg.branch_dim, cfg.head_hidden

        # input standardisation, fitted on training features; not trained
        self.spec_mean = self.add_param("norm.spec_mean", np.zeros(cfg.n_bands, dt), trainable=False)
        self.spec_std = self.add_param("norm.spec_std", np.ones(cfg.n_bands, dt), trainable=False)
        self.cc_mean = self.add_param("norm.cc_mean", np.zeros(cfg.n_cc, dt), trainable=False)
        self.cc_std = self.add_param("norm.cc_std", np.ones(cfg.n_cc, dt), trainable=False)

        self.proj = {}
        if cfg.n_bands != cfg.d_model:
            for s in ("left", "right", "diff"):
                self.proj[s] = self.add_module(f"proj_{s}", nn.Linear(cfg.n_bands, cfg.d_model, rng, dtype=dt))
        self.att = {
            s: self.add_module(f"att_{s}", nn.MultiHeadSelfAttention(cfg.d_model, cfg.heads, rng, dtype=dt))
            for s in ("left", "right", "diff")
        }
        self.pe = nn.sinusoidal_positional_encoding(cfg.n_frames, cfg.d_model).astype(dt)
        self.agg = self.add_module(
            "agg", nn.MLP((cfg.pooled_width, *cfg.agg_hidden, A), rng, head_activation="relu", dtype=dt)
        )

        if cfg.variant == "non_hierarchical":
            self.subnets = self.add_module(
                "subnets", nn.MLP((A, D, D, H, 3), rng, head_activation="sigmoid", stack=(m, n), dtype=dt)
            )
            return
        if cfg.variant != "no_coarse":
            self.coarse_mlp = self.add_module("coarse", nn.MLP((A, D), rng, head_activation="relu", stack=(m,), dtype=dt))
            self.coarse_head = self.add_module("coarse_head", nn.Linear(D, 1, rng, stack=(m,), dtype=dt))
            self.gate = self.add_module("gate", nn.Linear(2 * D, D, rng, stack=(m, n), dtype=dt))
        self.fine_mlp = self.add_module("fine", nn.MLP((A, D), rng, head_activation="relu", stack=(m, n), dtype=dt))
        self.fine_head = self.add_module(
            "fine_head", nn.MLP((D, H, 3), rng, head_activation="sigmoid", stack=(m, n), dtype=dt)
        )

    @property
    def has_coarse(self) -> bool:
        return self.config.variant in ("full", "regular_loss")

    def fit_normalization(self, left: np.ndarray, right: np.ndarray, cc: np.ndarray):
        spec = np.concatenate([left.reshape(-1, left.shape[-1]), right.reshape(-1, right.shape[-1])])
        self.spec_mean.data[:] = spec.mean(axis=0)
        self.spec_std.data[:] = spec.std(axis=0) + 1e-3
        self.cc_mean.data[:] = cc.mean(axis=0)
        self.cc_std.data[:] = cc.std(axis=0) + 1e-3

    def init_detection_prior(self, targets: np.ndarray):
        """Set detection-head biases to the logit of the training base rates.

        Sectors are mostly silent, so starting at p = 0.5 spends the first
        epochs learning the base rate.
        """
        from .geometry import split_prediction

        coarse, det, _, _ = split_prediction(np.asarray(targets))

        def logit(p):
            p = float(np.clip(p, 1e-3, 1 - 1e-3))
            return np.log(p / (1 - p))

        last = self.subnets.layers[-1] if self.config.variant == "non_hierarchical" else self.fine_head.layers[-1]
        last.bias.data[..., 0] = logit(det.mean())
        if self.has_coarse:
            self.coarse_head.bias.data[...] = logit(coarse.mean())

    # -- stages ----------------------------------------------------------------------

    def aggregate_features(self, left, right, cc, return_streams=False):
        """``(B, T, bands) x2, (B, n_cc) -> (B, agg_out)``."""
        dt = self.spec_mean.dtype
        left, right, cc = (x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dt)) for x in (left, right, cc))
        if left.shape != right.shape or left.shape[-1] != self.config.n_bands:
            raise nn.ShapeMismatch(f"spectrogram shapes {left.shape} / {right.shape} do not fit n_bands={self.config.n_bands}")
        if cc.shape[-1] != self.config.n_cc:
            raise nn.ShapeMismatch(f"cc shape {cc.shape} does not fit n_cc={self.config.n_cc}")
        t = left.shape[-2]
        pe = self.pe if t == self.pe.shape[0] else nn.sinusoidal_positional_encoding(t, self.config.d_model).astype(dt)
        l = (left - self.spec_mean) / self.spec_std
        r = (right - self.spec_mean) / self.spec_std
        streams = {"left": l, "right": r, "diff": l - r}
        pooled = []
        for name, x in streams.items():
            if name in self.proj:
                x = self.proj[name](x)
            pooled.append(nn.global_average_pool(self.att[name](x + pe)))
        c = (cc - self.cc_mean) / self.cc_std
        cat = nn.concat(pooled + [c], axis=-1)
        f = self.agg(cat)
        if return_streams:
            return f, {"streams": streams, "pooled_input": cat}
        return f

    def coarse_branch(self, f: Tensor):
        """``f (B, A) -> f_coarse (M, B, D), coarse prob (M, B, 1)``."""
        fc = self.coarse_mlp(nn.reshape(f, (1,) + f.shape))
        return fc, nn.sigmoid(self.coarse_head(fc))

    def fine_features(self, f: Tensor) -> Tensor:
        """Pre-gate fine features ``(M, N, B, D)``."""
        return self.fine_mlp(nn.reshape(f, (1, 1) + f.shape))

    def gate_fuse(self, f_coarse: Tensor, f_fine: Tensor):
        """Sigmoid-gated blend; ``f_coarse (M, B, D)`` feeds all N gates of its branch."""
        fc = nn.broadcast_to(nn.reshape(f_coarse, (f_coarse.shape[0], 1) + f_coarse.shape[1:]), f_fine.shape)
        g = nn.sigmoid(self.gate(nn.concat([fc, f_fine], axis=-1)))
        return g * f_fine + (1.0 - g) * fc, g

    def fine_branch(self, f_fused: Tensor) -> Tensor:
        """``(M, N, B, D) -> (M, N, B, 3)`` of (det, azi, ele)."""
        return self.fine_head(f_fused)

    # -- full pass -------------------------------------------------------------------------

    def forward(self, left, right, cc, return_features=False):
        """Return the ``(B, M, 3N+1)`` prediction grid."""
        f = self.aggregate_features(left, right, cc)
        feats = {"f": f}
        m, n = self.config.grid.m_azimuth, self.config.grid.n_elevation
        if self.config.variant == "non_hierarchical":
            fine = self.subnets(nn.reshape(f, (1, 1) + f.shape))
        else:
            ff = self.fine_features(f)
            feats["f_fine"] = ff
            if self.has_coarse:
                fc, coarse = self.coarse_branch(f)
                fused, g = self.gate_fuse(fc, ff)
                feats.update(f_coarse=fc, f_fused=fused, gate=g)
            else:
                fused = ff
            fine = self.fine_branch(fused)
        if not self.has_coarse:
            # keeps the output shape uniform; the loss ignores this slot
            coarse = nn.reshape(nn.max_(fine[..., 0], axis=1), (m, fine.shape[2], 1))
        b = fine.shape[2]
        fine_bm = nn.reshape(nn.transpose(fine, (2, 0, 1, 3)), (b, m, 3 * n))
        out = nn.concat([nn.transpose(coarse, (1, 0, 2)), fine_bm], axis=-1)
        if return_features:
            return out, feats
        return out

    __call__ = forward

    def predict(self, left, right, cc) -> np.ndarray:
        with nn.no_grad():
            return self.forward(left, right, cc).data

    # -- persistence ----------------------------------------------------------------------------

    def save(self, path):
        """Write ``<path>`` (binary checkpoint) and ``<path>.json`` (config sidecar)."""
        path = Path(path)
        nn.save_checkpoint(path, self.state_dict())
        sidecar = {"format_version": nn.CKPT_VERSION, "config": self.config.to_dict()}
        Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2))

    @classmethod
    def load(cls, path) -> "AuralNet":
        path = Path(path)
        sidecar = json.loads(Path(str(path) + ".json").read_text())
        if sidecar.get("format_version") != nn.CKPT_VERSION:
            raise ValueError(f"{path}: checkpoint/config version mismatch")
        model = cls(AuralNetConfig.from_dict(sidecar["config"]))
        model.load_state_dict(nn.load_checkpoint(path))
        return model
