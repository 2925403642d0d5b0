"""Small inverted-bottleneck demosaicing CNN.

The mosaic is packed into its four CFA phases at half resolution, passed
through a stem convolution and ``blocks`` inverted linear bottlenecks
(1x1 expand -> depthwise kxk -> 1x1 linear project, residual), then a linear
head sees the features concatenated with the packed input and emits 12
channels that are rearranged into a full-resolution RGB image.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..imaging import BayerMosaic, DimensionError, pattern_channels
from . import layers as L

IN_CHANNELS = 4
OUT_CHANNELS = 12


@dataclass(frozen=True)
class ModelSpec:
    blocks: int = 3
    width: int = 20
    expansion: int = 4
    kernel: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.blocks < 1 or self.width < 4 or self.expansion < 1:
            raise ValueError(f"invalid model spec {self}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError("kernel must be a positive odd integer")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# Size points roughly matching 9.5K / 16K / 84K / 176K parameters.
PRESETS = {
    "9.5k": dict(blocks=3, width=20, expansion=2),
    "16k": dict(blocks=3, width=20, expansion=4),
    "84k": dict(blocks=3, width=48, expansion=5),
    "176k": dict(blocks=3, width=80, expansion=4),
}


def preset(name: str, seed: int = 0) -> ModelSpec:
    try:
        return ModelSpec(seed=seed, **PRESETS[name.lower()])
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def param_shapes(spec: ModelSpec) -> list:
    """Ordered ``(name, shape)`` manifest of every trainable tensor."""
    w, e, k = spec.width, spec.width * spec.expansion, spec.kernel
    shapes = [("stem.w", (w, IN_CHANNELS, k, k)), ("stem.b", (w,))]
    for i in range(spec.blocks):
        shapes += [
            (f"block{i}.expand.w", (e, w, 1, 1)), (f"block{i}.expand.b", (e,)),
            (f"block{i}.dw.w", (e, 1, k, k)), (f"block{i}.dw.b", (e,)),
            (f"block{i}.project.w", (w, e, 1, 1)), (f"block{i}.project.b", (w,)),
        ]
    shapes += [("head.w", (OUT_CHANNELS, w + IN_CHANNELS, k, k)), ("head.b", (OUT_CHANNELS,))]
    return shapes


def param_count(spec: ModelSpec) -> int:
    return sum(int(np.prod(s)) for _, s in param_shapes(spec))


class ModelParams(dict):
    """Ordered name -> tensor mapping bound to a :class:`ModelSpec`."""

    def __init__(self, spec: ModelSpec, tensors):
        super().__init__(tensors)
        self.spec = spec
        expected = param_shapes(spec)
        if [(n, tuple(self[n].shape)) for n, _ in expected if n in self] != expected:
            raise ValueError("tensor shapes do not match the model spec manifest")

    def copy(self) -> "ModelParams":
        return ModelParams(self.spec, {k: v.copy() for k, v in self.items()})

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.spec, {k: v.astype(dtype) for k, v in self.items()})

    def map(self, fn) -> "ModelParams":
        return ModelParams(self.spec, {k: fn(v) for k, v in self.items()})

    @property
    def count(self) -> int:
        return sum(v.size for v in self.values())


Gradients = ModelParams


def init_params(spec: ModelSpec, dtype=np.float32) -> ModelParams:
    """He fan-in initialisation from ``spec.seed``; biases start at zero."""
    rng = np.random.default_rng(spec.seed)
    tensors = {}
    for name, shape in param_shapes(spec):
        if name.endswith(".b"):
            tensors[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:]))
            tensors[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
    return ModelParams(spec, tensors)


def pack_bayer(m: BayerMosaic) -> np.ndarray:
    """Split a mosaic into its four CFA phases: ``(..., H/2, W/2, 4)``.

    Channel ``k`` holds tile position ``(k // 2, k % 2)``, so the colour of
    each channel is ``m.pattern[k]``.
    """
    d = m.data
    return np.stack([d[..., dy::2, dx::2] for dy in range(2) for dx in range(2)], axis=-1)


def unpack_bayer(packed: np.ndarray, pattern: str) -> BayerMosaic:
    packed = np.asarray(packed)
    if packed.shape[-1] != 4:
        raise DimensionError("packed mosaic needs 4 channels")
    h, w = packed.shape[-3:-1]
    out = np.empty(packed.shape[:-3] + (2 * h, 2 * w), dtype=packed.dtype)
    for k in range(4):
        out[..., k // 2::2, k % 2::2] = packed[..., k]
    return BayerMosaic(out, pattern)


def _as_batch(x):
    x = np.asarray(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4 or x.shape[-1] != IN_CHANNELS:
        raise DimensionError(f"packed input must be (N, h, w, 4), got {x.shape}")
    return x, False


def _forward(params, x):
    dtype = np.result_type(x.dtype, params["stem.w"].dtype)
    x = x.astype(dtype, copy=False)
    p = {k: v.astype(dtype, copy=False) for k, v in params.items()}
    caches = {}
    s, caches["stem"] = L.conv2d(x, p["stem.w"], p["stem.b"])
    a = L.relu(s)
    caches["stem.out"] = a
    for i in range(params.spec.blocks):
        e, c_e = L.conv2d(a, p[f"block{i}.expand.w"], p[f"block{i}.expand.b"])
        e = L.relu(e)
        d, c_d = L.depthwise_conv2d(e, p[f"block{i}.dw.w"], p[f"block{i}.dw.b"])
        d = L.relu(d)
        q, c_q = L.conv2d(d, p[f"block{i}.project.w"], p[f"block{i}.project.b"])
        caches[f"block{i}"] = (c_e, e, c_d, d, c_q)
        a = a + q
    z = np.concatenate([a, x], axis=-1)
    o, caches["head"] = L.conv2d(z, p["head.w"], p["head.b"])
    return L.depth_to_space(o), caches


def forward(params: ModelParams, packed: np.ndarray) -> np.ndarray:
    """Packed ``(N, h, w, 4)`` (or unbatched) input -> ``(N, 2h, 2w, 3)`` RGB.

    The output is not clamped.
    """
    x, single = _as_batch(packed)
    out, _ = _forward(params, x)
    return out[0] if single else out


def _backward(params, caches, dout):
    spec = params.spec
    grads = {}
    do = L.space_to_depth(dout)
    dz, grads["head.w"], grads["head.b"] = L.conv2d_backward(do, caches["head"])
    da = dz[..., :spec.width]
    for i in reversed(range(spec.blocks)):
        c_e, e, c_d, d, c_q = caches[f"block{i}"]
        dd, grads[f"block{i}.project.w"], grads[f"block{i}.project.b"] = L.conv2d_backward(da, c_q)
        dd = L.relu_backward(dd, d)
        de, grads[f"block{i}.dw.w"], grads[f"block{i}.dw.b"] = L.depthwise_conv2d_backward(dd, c_d)
        de = L.relu_backward(de, e)
        dx, grads[f"block{i}.expand.w"], grads[f"block{i}.expand.b"] = L.conv2d_backward(de, c_e)
        da = da + dx
    da = L.relu_backward(da, caches["stem.out"])
    _, grads["stem.w"], grads["stem.b"] = L.conv2d_backward(da, caches["stem"])
    return ModelParams(spec, {n: grads[n] for n, _ in param_shapes(spec)})


def backward(params: ModelParams, packed: np.ndarray, upstream: np.ndarray) -> ModelParams:
    """Gradient of ``<forward(params, packed), upstream>`` w.r.t. every parameter."""
    x, single = _as_batch(packed)
    upstream = np.asarray(upstream)
    if single:
        upstream = upstream[None]
    out, caches = _forward(params, x)
    if upstream.shape != out.shape:
        raise DimensionError(f"upstream gradient shape {upstream.shape} != output {out.shape}")
    return _backward(params, caches, upstream.astype(out.dtype, copy=False))


def value_and_grad(params: ModelParams, packed: np.ndarray, loss_fn):
    """One fused pass: ``loss_fn(pred) -> (loss, dloss/dpred)``."""
    x, _ = _as_batch(packed)
    out, caches = _forward(params, x)
    loss, dout = loss_fn(out)
    return loss, _backward(params, caches, dout.astype(out.dtype, copy=False)), out


def l1_loss_and_grad(pred: np.ndarray, gt: np.ndarray):
    """Mean absolute error and its gradient ``sign(pred - gt) / N``."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    diff = pred - gt.astype(pred.dtype, copy=False)
    n = diff.size
    loss = float(np.abs(diff).sum(dtype=np.float64) / n)
    return loss, np.sign(diff) / np.asarray(n, dtype=diff.dtype)


class CnnDemosaicer:
    """Callable predictor wrapping trained parameters."""

    def __init__(self, params: ModelParams, batch: int = 64):
        self.params = params
        self.batch = batch

    def predict(self, mosaics: np.ndarray, pattern: str) -> np.ndarray:
        mosaics = np.asarray(mosaics)
        single = mosaics.ndim == 2
        if single:
            mosaics = mosaics[None]
        packed = pack_bayer(BayerMosaic(mosaics, pattern))
        dtype = self.params["stem.w"].dtype
        outs = [forward(self.params, packed[i:i + self.batch].astype(dtype))
                for i in range(0, len(packed), self.batch)]
        out = np.concatenate(outs).astype(np.float64)
        return out[0] if single else out


class BilinearDemosaicer:
    def predict(self, mosaics: np.ndarray, pattern: str) -> np.ndarray:
        from ..imaging import demosaic_bilinear

        return demosaic_bilinear(BayerMosaic(np.asarray(mosaics, dtype=np.float64), pattern))


def channel_colors(pattern: str) -> list:
    """RGB channel index carried by each packed channel."""
    return list(pattern_channels(pattern).ravel())
