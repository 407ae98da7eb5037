"""Pose-conditioned neural fields over the texel atlas.

Two independent MLPs share the same input layout: a sinusoidal encoding of
the texel coordinate followed by the raw pose vector. The offset net ends in
``max_offset * tanh`` and the texture net in a logistic squashing, so both
outputs are bounded by construction.

The offset net is evaluated together with its two input tangents
(d/du, d/dv) in a single stacked pass. Because the tangent rows are part of
the recorded forward graph, the texel gradient used for the surface tilt can
itself be differentiated with respect to the weights.
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, fields as dc_fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Var

MAGIC = b"NESF"
FORMAT_VERSION = 1
GRAD_FLUSH = 1e-20

_FLAG_BITS = ("fixed_texture", "fixed_geometry", "unrefined", "uvl")


class CheckpointError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class FieldConfig:
    depth: int = 12
    width: int = 32
    octaves: int = 6
    d_pose: int = 8
    max_offset: float = 0.5
    beta_init: float = 0.1
    fixed_texture: bool = False
    fixed_geometry: bool = False
    unrefined: bool = False
    uvl: bool = False

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if self.width < 1 or self.octaves < 0 or self.d_pose < 0:
            raise ValueError("width, octaves and d_pose must be positive")
        if not self.max_offset > 0 or not self.beta_init > 0:
            raise ValueError("max_offset and beta_init must be positive")

    @property
    def coord_dim(self) -> int:
        return 3 if self.uvl else 2

    @property
    def encoded_dim(self) -> int:
        return self.coord_dim * (1 + 2 * self.octaves)


def encode(coords: np.ndarray, octaves: int, with_jacobian: bool = False):
    """Sinusoidal encoding ``[x, sin(2^k pi x), cos(2^k pi x)]_k``.

    With ``with_jacobian`` also returns d(enc)/d(x_j) for each input column j,
    shape (n_coords, N, enc_dim).
    """
    coords = np.atleast_2d(coords)
    n, d = coords.shape
    freqs = np.pi * 2.0 ** np.arange(octaves)
    ang = coords[:, None, :] * freqs[None, :, None]  # (N, L, d)
    s, c = np.sin(ang), np.cos(ang)
    enc = np.concatenate([coords, s.reshape(n, -1), c.reshape(n, -1)], axis=1)
    if not with_jacobian:
        return enc
    jac = np.zeros((d, n, enc.shape[1]))
    for j in range(d):
        ds = np.zeros_like(s)
        dc = np.zeros_like(c)
        ds[:, :, j] = c[:, :, j] * freqs
        dc[:, :, j] = -s[:, :, j] * freqs
        jac[j, :, j] = 1.0
        jac[j, :, d : d + octaves * d] = ds.reshape(n, -1)
        jac[j, :, d + octaves * d :] = dc.reshape(n, -1)
    return enc, jac


def _hidden_layer(x, w, b, n: int):
    """Softplus layer applied to a (1+k)N-row stack: value rows then k tangent blocks."""
    xv, wv, bv = ad.value(x), ad.value(w), ad.value(b)
    z = xv @ wv
    z0 = z[:n]
    z0 += bv
    # overflow-free forms; masked selects are far slower than two transcendental calls
    sig = 0.5 * (1.0 + np.tanh(0.5 * z0))
    e = np.exp(-np.abs(z0))
    k = z.shape[0] // n - 1
    out = np.empty_like(z)
    out[:n] = np.maximum(z0, 0.0) + np.log1p(e)
    if k:
        out[n:].reshape(k, n, -1)[:] = z[n:].reshape(k, n, -1) * sig

    def vjp(g):
        dz = np.empty_like(g)
        dz[:n] = g[:n] * sig
        if k:
            dz[n:].reshape(k, n, -1)[:] = g[n:].reshape(k, n, -1) * sig
            ds = (g[n:] * z[n:]).reshape(k, n, -1).sum(axis=0)
            dz[:n] += ds * sig * (1.0 - sig)
        gx = dz @ wv.T if isinstance(x, Var) and x.requires_grad else None
        return gx, xv.T @ dz, dz[:n].sum(axis=0)

    return ad.custom((x, w, b), out, vjp)


def _output_layer(x, w, b, n: int):
    xv, wv, bv = ad.value(x), ad.value(w), ad.value(b)
    z = xv @ wv
    z[:n] += bv

    def vjp(g):
        # occluded and empty-space samples carry vanishing gradients; left alone they
        # turn into float32 denormals a few layers down and slow every matmul several-fold
        g = np.where(np.abs(g) < GRAD_FLUSH, 0.0, g).astype(g.dtype, copy=False)
        gx = g @ wv.T if isinstance(x, Var) and x.requires_grad else None
        return gx, xv.T @ g, g[:n].sum(axis=0)

    return ad.custom((x, w, b), z, vjp)


class MLP:
    """Plain fully connected stack; ``depth`` counts linear layers."""

    def __init__(self, prefix: str, n_in: int, width: int, n_out: int, depth: int,
                 rng: np.random.Generator, zero_final: bool = False):
        sizes = [n_in] + [width] * (depth - 1) + [n_out]
        self.weights: list[Var] = []
        self.biases: list[Var] = []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == depth - 1
            if last and zero_final:
                w = np.zeros((a, b))
            else:
                gain = 1.0 if last else np.sqrt(2.0)
                w = rng.normal(0.0, gain / np.sqrt(a), size=(a, b))
            self.weights.append(Var(w, name=f"{prefix}.{i}.weight"))
            self.biases.append(Var(np.zeros(b), name=f"{prefix}.{i}.bias"))

    def parameters(self) -> list[Var]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def __call__(self, x, n: int):
        h = x
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = _hidden_layer(h, w, b, n)
        return _output_layer(h, self.weights[-1], self.biases[-1], n)


def _check_texel(texel: np.ndarray) -> np.ndarray:
    texel = np.atleast_2d(np.asarray(texel, dtype=np.float64))
    if texel.shape[-1] != 2:
        raise ValueError(f"texel must have 2 components, got shape {texel.shape}")
    if np.any(texel < -1e-9) or np.any(texel > 1 + 1e-9) or not np.all(np.isfinite(texel)):
        raise ValueError("texel coordinates must lie in [0, 1]^2")
    return texel


class FieldModel:
    """Offset net M_L, texture net M_T and the density sharpness beta."""

    def __init__(self, config: FieldConfig | None = None, seed: int = 0, zero_final: bool = True,
                 dtype=np.float64):
        self.config = config = config or FieldConfig()
        rng = np.random.default_rng(seed)
        enc = config.encoded_dim
        self.offset_net = MLP("offset", enc + (0 if config.fixed_geometry else config.d_pose),
                              config.width, 1, config.depth, rng, zero_final=zero_final)
        self.texture_net = MLP("texture", enc + (0 if config.fixed_texture else config.d_pose),
                               config.width, 3, config.depth, rng, zero_final=zero_final)
        self.log_beta = Var(np.log(config.beta_init), name="log_beta")
        self.texture_queries = 0
        self.dtype = np.dtype(np.float64)
        self.astype(dtype)

    def astype(self, dtype) -> "FieldModel":
        """Switch parameter storage (and so all evaluation) to ``dtype`` in place."""
        dtype = np.dtype(dtype)
        if dtype not in (np.float32, np.float64):
            raise ValueError(f"unsupported dtype {dtype}")
        for p in self.parameters().values():
            p.value = p.value.astype(dtype)
        self.dtype = dtype
        return self

    # -- registry -----------------------------------------------------------
    def parameters(self) -> dict[str, Var]:
        params = self.offset_net.parameters() + self.texture_net.parameters() + [self.log_beta]
        return {p.name: p for p in params}

    @property
    def beta(self):
        return ad.exp(self.log_beta)

    # -- inputs -------------------------------------------------------------
    def _coords(self, texel, height):
        texel = _check_texel(texel)
        if self.config.uvl:
            if height is None:
                raise ValueError("uvl model requires the signed height of each query")
            h = np.asarray(height, dtype=np.float64).reshape(-1, 1)
            return np.concatenate([texel, h / self.config.max_offset], axis=1)
        return texel

    def _pose_block(self, pose, n: int, fixed: bool):
        if fixed:
            return None
        pose = np.asarray(pose, dtype=np.float64)
        if pose.shape[-1] != self.config.d_pose:
            raise ValueError(f"pose must have dimension {self.config.d_pose}, got {pose.shape}")
        if not np.all(np.isfinite(pose)):
            raise ValueError("pose entries must be finite")
        return np.broadcast_to(pose, (n, self.config.d_pose))

    def _inputs(self, texel, pose, height, fixed, tangents: bool):
        coords = self._coords(texel, height)
        n = coords.shape[0]
        pose_block = self._pose_block(pose, n, fixed)
        if tangents:
            enc, jac = encode(coords, self.config.octaves, with_jacobian=True)
            jac = jac[:2]  # only d/du and d/dv
        else:
            enc, jac = encode(coords, self.config.octaves), None
        rows = [enc]
        if pose_block is not None:
            rows = [np.concatenate([enc, pose_block], axis=1)]
            if jac is not None:
                pad = np.zeros((n, self.config.d_pose))
                jac = [np.concatenate([j, pad], axis=1) for j in jac]
        if jac is not None:
            rows += list(jac)
        return np.concatenate(rows, axis=0).astype(self.dtype, copy=False), n

    # -- evaluation ---------------------------------------------------------
    def eval_offset(self, texel, pose, height=None):
        """Surface offset l, shape (N,); positive is outside the template."""
        x, n = self._inputs(texel, pose, height, self.config.fixed_geometry, tangents=False)
        z = self.offset_net(x, n)
        return ad.mul(ad.tanh(ad.reshape(z, (n,))), self.config.max_offset)

    def offset_and_gradient(self, texel, pose, height=None):
        """Return (l, dl/d(u,v)) with shapes (N,) and (N, 2), both traced."""
        x, n = self._inputs(texel, pose, height, self.config.fixed_geometry, tangents=True)
        z = self.offset_net(x, n)  # (3N, 1)
        z = ad.reshape(z, (3, n))
        t = ad.tanh(ad.take(z, 0))
        m = self.config.max_offset
        l = ad.mul(t, m)
        dt = ad.mul(ad.sub(1.0, ad.mul(t, t)), m)
        grad = ad.mul(ad.take(z, (slice(1, 3),)), dt)  # (2, N)
        return l, ad.reshape(ad.stack([ad.take(grad, 0), ad.take(grad, 1)], axis=1), (n, 2))

    def offset_gradient(self, texel, pose, height=None):
        return self.offset_and_gradient(texel, pose, height)[1]

    def eval_texture(self, texel, pose, height=None):
        """RGB in [0, 1], shape (N, 3)."""
        x, n = self._inputs(texel, pose, height, self.config.fixed_texture, tangents=False)
        self.texture_queries += n
        return ad.sigmoid(self.texture_net(x, n))

    # -- snapshot helpers ---------------------------------------------------
    def state(self) -> dict[str, np.ndarray]:
        return {k: v.value.copy() for k, v in self.parameters().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in self.parameters().items():
            if state[k].shape != v.value.shape:
                raise CheckpointError(f"shape mismatch for {k}: {state[k].shape} vs {v.value.shape}")
            v.value = np.array(state[k], dtype=self.dtype)


# -- optimisation -----------------------------------------------------------

class Adam:
    """Adam with bias correction over a parameter registry.

    ``lr_scale`` multiplies the step size of the named parameters.
    """

    def __init__(self, params: dict[str, Var], lr: float = 1e-3,
                 b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8, lr_scale: dict | None = None):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.lr_scale = dict(lr_scale or {})
        self.m = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray], lr: float | None = None) -> None:
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient for parameter {name!r}")
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.value = p.value - lr * self.lr_scale.get(name, 1.0) * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(model: FieldModel, grads: dict[str, np.ndarray], lr: float, step: int,
              state: Adam | None = None) -> Adam:
    """One Adam update; ``step`` is 1-based and must follow the optimiser's own count."""
    state = state or Adam(model.parameters(), lr=lr)
    if step != state.t + 1:
        raise TrainingError(f"expected step {state.t + 1}, got {step}")
    state.step(grads, lr=lr)
    return state


def named_grads(model: FieldModel, grads: dict[Var, np.ndarray]) -> dict[str, np.ndarray]:
    return {name: grads.get(p, np.zeros_like(p.value)) for name, p in model.parameters().items()}


# -- checkpoint -------------------------------------------------------------

_HEADER = struct.Struct("<4sI")
_CONFIG = struct.Struct("<IIIIddI")


def _pack_config(c: FieldConfig) -> bytes:
    flags = sum(1 << i for i, f in enumerate(_FLAG_BITS) if getattr(c, f))
    return _CONFIG.pack(c.depth, c.width, c.octaves, c.d_pose, c.max_offset, c.beta_init, flags)


def save_checkpoint(model: FieldModel, path: str | Path) -> None:
    params = model.parameters()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION))
        fh.write(_pack_config(model.config))
        for name, p in params.items():
            if name == "log_beta":
                continue
            fh.write(np.ascontiguousarray(p.value, dtype="<f8").tobytes())
        fh.write(struct.pack("<d", float(np.exp(model.log_beta.value))))


def read_config(path: str | Path) -> FieldConfig:
    with open(path, "rb") as fh:
        blob = fh.read(_HEADER.size + _CONFIG.size)
    if len(blob) < _HEADER.size + _CONFIG.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version} (expected {FORMAT_VERSION})")
    depth, width, octaves, d_pose, max_off, beta0, flags = _CONFIG.unpack_from(blob, _HEADER.size)
    kw = {f: bool(flags >> i & 1) for i, f in enumerate(_FLAG_BITS)}
    return FieldConfig(depth=depth, width=width, octaves=octaves, d_pose=d_pose,
                       max_offset=max_off, beta_init=beta0, **kw)


def load_checkpoint(path: str | Path, expect: FieldConfig | None = None) -> FieldModel:
    config = read_config(path)
    if expect is not None and expect != config:
        diff = [f.name for f in dc_fields(FieldConfig) if getattr(expect, f.name) != getattr(config, f.name)]
        raise CheckpointError(f"{path}: config mismatch in {', '.join(diff)}")
    model = FieldModel(config)
    raw = Path(path).read_bytes()[_HEADER.size + _CONFIG.size:]
    params = model.parameters()
    need = sum(p.value.size for n, p in params.items() if n != "log_beta") * 8 + 8
    if len(raw) != need:
        raise CheckpointError(f"{path}: expected {need} payload bytes, found {len(raw)}")
    pos = 0
    for name, p in params.items():
        if name == "log_beta":
            continue
        size = p.value.size * 8
        p.value = np.frombuffer(raw, dtype="<f8", count=p.value.size, offset=pos).reshape(p.value.shape).copy()
        pos += size
    (beta,) = struct.unpack_from("<d", raw, pos)
    model.log_beta.value = np.asarray(np.log(beta))
    return model


def config_dict(config: FieldConfig) -> dict:
    return asdict(config)
