"""Trainable convolutional networks for high-frequency recovery.

Two small residual-prediction networks share one engine:

* the internal high-frequency network (IHN) sees a pixel-replicated
  upsampled luma plane plus its edge map and predicts the detail missing
  from it;
* the external high-frequency network (EHN) sees the difference between an
  aligned reference and that reference's own intermediate reconstruction
  and extracts the transferable detail.

Everything runs in float64 numpy; convolutions are same-padded im2col
matmuls so analytic gradients check against finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .image import (
    ImagePlane,
    add_maps,
    degrade,
    edge_map,
    mod_crop,
    upsample_replicate,
)

PATCH = 32
PATCH_STRIDE = 16
WEIGHTS_MAGIC = b"DHN1"
WEIGHTS_VERSION = 1
KIND_TAGS = {"ihn": 0, "ehn": 1}
ACT_TAGS = {"linear": 0, "relu": 1}


class TrainingDiverged(RuntimeError):
    def __init__(self, trace):
        super().__init__(f"loss became non-finite after {len(trace)} iterations")
        self.trace = trace


@dataclass
class ConvLayer:
    weights: np.ndarray  # (out_ch, in_ch, kh, kw)
    bias: np.ndarray  # (out_ch,)
    activation: str = "relu"

    def __post_init__(self):
        w = np.ascontiguousarray(self.weights, dtype=np.float64)
        b = np.ascontiguousarray(self.bias, dtype=np.float64)
        if w.ndim != 4:
            raise ValueError("weights must be 4-D (out, in, kh, kw)")
        if w.shape[2] % 2 == 0 or w.shape[3] % 2 == 0:
            raise ValueError("kernel extents must be odd")
        if b.shape != (w.shape[0],):
            raise ValueError("bias length must equal output channels")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValueError("non-finite layer parameters")
        if self.activation not in ACT_TAGS:
            raise ValueError(f"unknown activation {self.activation!r}")
        self.weights = w
        self.bias = b

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]


@dataclass
class NetworkParams:
    layers: list[ConvLayer]
    input_channels: int
    kind: str  # "ihn" or "ehn"

    def __post_init__(self):
        if self.kind not in KIND_TAGS:
            raise ValueError(f"network kind must be one of {set(KIND_TAGS)}")
        if not self.layers:
            raise ValueError("network needs at least one layer")
        if self.layers[0].in_channels != self.input_channels:
            raise ValueError("first layer does not accept the declared input")
        for prev, cur in zip(self.layers, self.layers[1:]):
            if cur.in_channels != prev.out_channels:
                raise ValueError("channel chain broken between layers")
        last = self.layers[-1]
        if last.activation != "linear" or last.out_channels != 1:
            raise ValueError("final layer must be linear with one output channel")

    def copy(self) -> "NetworkParams":
        return NetworkParams(
            [ConvLayer(l.weights.copy(), l.bias.copy(), l.activation) for l in self.layers],
            self.input_channels,
            self.kind,
        )


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 8
    iterations: int = 2000
    seed: int = 0
    perturb_gain: tuple[float, float] = (0.7, 1.3)
    perturb_bias: tuple[float, float] = (-0.1, 0.1)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning rate must be >= 0")
        if self.batch_size < 1 or self.iterations < 0:
            raise ValueError("bad batch size or iteration count")
        for lo, hi in (self.perturb_gain, self.perturb_bias):
            if lo > hi:
                raise ValueError("perturbation range is inverted")


@dataclass
class SamplePair:
    inputs: np.ndarray  # (c, 32, 32)
    target: np.ndarray  # (1, 32, 32)
    scale: int

    def __post_init__(self):
        if self.inputs.shape[1:] != (PATCH, PATCH) or self.target.shape != (1, PATCH, PATCH):
            raise ValueError("samples must be 32x32")


def build_network(
    kind: str, seed: int = 0, hidden_channels: int = 32, num_layers: int = 5, kernel: int = 3
) -> NetworkParams:
    """He-initialized hidden layers with a zero residual head.

    The zero head makes a fresh network the identity: its residual is zero
    everywhere until training moves the final layer.
    """
    in_ch = 2 if kind == "ihn" else 1
    rng = np.random.default_rng(seed)
    return _build_with_rng(kind, rng, in_ch, hidden_channels, num_layers, kernel)


def _build_with_rng(kind, rng, in_ch, hidden, num_layers, kernel):
    layers = []
    prev = in_ch
    for i in range(num_layers - 1):
        fan_in = prev * kernel * kernel
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(hidden, prev, kernel, kernel))
        layers.append(ConvLayer(w, np.zeros(hidden), "relu"))
        prev = hidden
    layers.append(
        ConvLayer(np.zeros((1, prev, kernel, kernel)), np.zeros(1), "linear")
    )
    return NetworkParams(layers, in_ch, kind)


def build_ihn(seed: int = 0, hidden_channels: int = 32, num_layers: int = 5) -> NetworkParams:
    return build_network("ihn", seed, hidden_channels, num_layers)


def build_ehn(seed: int = 0, hidden_channels: int = 32, num_layers: int = 5) -> NetworkParams:
    return build_network("ehn", seed, hidden_channels, num_layers)


# ----------------------------------------------------------------------
# Convolution engine (channels-last internally)
# ----------------------------------------------------------------------


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """(B,H,W,C) -> (B*H*W, kh*kw*C) patches under same zero padding."""
    b, h, w, c = x.shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    padded = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    win = sliding_window_view(padded, (kh, kw), axis=(1, 2))  # (B,H,W,C,kh,kw)
    win = win.transpose(0, 1, 2, 4, 5, 3)  # (B,H,W,kh,kw,C)
    return np.ascontiguousarray(win).reshape(b * h * w, kh * kw * c)


def _matmul_weights(layer: ConvLayer) -> np.ndarray:
    o, c, kh, kw = layer.weights.shape
    return layer.weights.transpose(2, 3, 1, 0).reshape(kh * kw * c, o)


def _conv_same(x: np.ndarray, layer: ConvLayer):
    b, h, w, _ = x.shape
    kh, kw = layer.weights.shape[2:]
    cols = _im2col(x, kh, kw)
    pre = cols @ _matmul_weights(layer) + layer.bias
    return pre.reshape(b, h, w, layer.out_channels), cols


def _forward(net: NetworkParams, x: np.ndarray, want_cache: bool):
    """x is (B,H,W,C_in); returns output and per-layer (cols, pre) caches."""
    caches = []
    cur = x
    for layer in net.layers:
        pre, cols = _conv_same(cur, layer)
        out = np.maximum(pre, 0.0) if layer.activation == "relu" else pre
        if want_cache:
            caches.append((cols, pre))
        cur = out
    return cur, caches


def forward(net: NetworkParams, x: np.ndarray) -> np.ndarray:
    """Run the network on a (C,H,W) or (B,C,H,W) stack."""
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    if x.shape[1] != net.input_channels:
        raise ValueError(
            f"network expects {net.input_channels} input channels, got {x.shape[1]}"
        )
    out, _ = _forward(net, np.ascontiguousarray(x.transpose(0, 2, 3, 1), np.float64), False)
    out = out.transpose(0, 3, 1, 2)
    return out[0] if squeeze else out


def conv_forward(layer: ConvLayer, x: np.ndarray) -> np.ndarray:
    """Same-padded convolution + bias + activation on (C,H,W) or (B,C,H,W)."""
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    if x.shape[1] != layer.in_channels:
        raise ValueError(
            f"layer expects {layer.in_channels} input channels, got {x.shape[1]}"
        )
    xl = np.ascontiguousarray(x.transpose(0, 2, 3, 1), np.float64)
    pre, _ = _conv_same(xl, layer)
    out = np.maximum(pre, 0.0) if layer.activation == "relu" else pre
    out = out.transpose(0, 3, 1, 2)
    return out[0] if squeeze else out


def _backward_from_delta(net, caches, delta):
    """Backpropagate d(loss)/d(output) through cached layers.

    Returns per-layer (dW, db) plus d(loss)/d(input) in channels-last form.
    """
    grads = [None] * len(net.layers)
    for li in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[li]
        cols, pre = caches[li]
        if layer.activation == "relu":
            delta = delta * (pre > 0.0)
        b, h, w, o = delta.shape
        dflat = delta.reshape(b * h * w, o)
        dwm = cols.T @ dflat  # (kh*kw*cin, out)
        kh, kw = layer.weights.shape[2:]
        cin = layer.in_channels
        dw = dwm.reshape(kh, kw, cin, o).transpose(3, 2, 0, 1)
        db = dflat.sum(axis=0)
        grads[li] = (dw, db)
        if li > 0:
            flipped = layer.weights[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            back_layer = ConvLayer(
                flipped, np.zeros(cin, dtype=layer.weights.dtype), "linear"
            )
            delta, _ = _conv_same(delta, back_layer)
    return grads, delta


def backward(net: NetworkParams, x: np.ndarray, target: np.ndarray):
    """Mean-squared-error loss and its gradients for every parameter.

    x and target are (B,C,H,W); the loss averages over every output element.
    Returns (loss, grads) with grads as a per-layer list of (dW, db).
    """
    if x.ndim == 3:
        x = x[None]
    if target.ndim == 3:
        target = target[None]
    xl = np.ascontiguousarray(x.transpose(0, 2, 3, 1), np.float64)
    tl = np.ascontiguousarray(target.transpose(0, 2, 3, 1), np.float64)
    if xl.shape[:3] != tl.shape[:3]:
        raise ValueError("input/target spatial shapes differ")
    out, caches = _forward(net, xl, True)
    if out.shape != tl.shape:
        raise ValueError("target channel count does not match network output")
    diff = out - tl
    loss = float(np.mean(diff**2))
    delta = 2.0 * diff / diff.size
    grads, _ = _backward_from_delta(net, caches, delta)
    return loss, grads


# ----------------------------------------------------------------------
# Inference compositions
# ----------------------------------------------------------------------


def _require_kind(net: NetworkParams, kind: str):
    if net.kind != kind:
        raise ValueError(f"expected a {kind!r} network, got {net.kind!r}")


def ihn_input_stack(upsampled: ImagePlane) -> np.ndarray:
    return np.stack([upsampled.data, edge_map(upsampled).data])


def ihn_infer(net: NetworkParams, lr: ImagePlane, s: int) -> ImagePlane:
    """Residual detail map for a low-resolution plane, at s times its size."""
    _require_kind(net, "ihn")
    up = upsample_replicate(lr, s)
    residual = forward(net, ihn_input_stack(up))
    return ImagePlane(residual[0])


def intermediate_sr(net: NetworkParams, lr: ImagePlane, s: int) -> ImagePlane:
    """Replicated upsampling plus the inferred residual."""
    up = upsample_replicate(lr, s)
    residual = forward(net, ihn_input_stack(up))
    return add_maps(up, ImagePlane(residual[0]))


def reference_intermediate(net: NetworkParams, ref_hr: ImagePlane, s: int) -> ImagePlane:
    """Intermediate reconstruction of a reference: degrade it, then re-infer."""
    _require_kind(net, "ihn")
    cropped = mod_crop(ref_hr, s)
    return intermediate_sr(net, degrade(cropped, s), s)


def ehn_extract(
    net: NetworkParams, ref_aligned: ImagePlane, ref_intermediate: ImagePlane
) -> ImagePlane:
    """Detail map extracted from the reference minus its own reconstruction."""
    _require_kind(net, "ehn")
    if ref_aligned.shape != ref_intermediate.shape:
        raise ValueError(
            f"dimension mismatch {ref_aligned.shape} vs {ref_intermediate.shape}"
        )
    diff = ref_aligned.data - ref_intermediate.data
    out = forward(net, diff[None])
    return ImagePlane(out[0])


# ----------------------------------------------------------------------
# Dataset construction and training
# ----------------------------------------------------------------------


def _crop_grid(h: int, w: int):
    ys = range(0, h - PATCH + 1, PATCH_STRIDE)
    xs = range(0, w - PATCH + 1, PATCH_STRIDE)
    return [(y, x) for y in ys for x in xs]


def make_dataset(
    hr_images: list[ImagePlane], s: int, blur_sigma: float | None = None
) -> list[SamplePair]:
    """32x32 training crops on a stride-16 grid.

    Each image is cropped to a multiple of s, degraded and replicate
    upsampled; crops pair the [upsampled, edge-map] stack with the ground
    truth window.
    """
    samples = []
    for img in hr_images:
        if img.height < PATCH or img.width < PATCH:
            raise ValueError(f"image {img.shape} smaller than {PATCH}x{PATCH}")
        g = mod_crop(img, s)
        if g.height < PATCH or g.width < PATCH:
            continue
        up = upsample_replicate(degrade(g, s, blur_sigma), s)
        stack = np.stack([up.data, edge_map(up).data])
        for y, x in _crop_grid(g.height, g.width):
            samples.append(
                SamplePair(
                    inputs=stack[:, y : y + PATCH, x : x + PATCH].copy(),
                    target=g.data[None, y : y + PATCH, x : x + PATCH].copy(),
                    scale=s,
                )
            )
    return samples


def contrast_perturb(img: ImagePlane, seed: int, cfg: TrainConfig) -> ImagePlane:
    """Random mean-preserving gain plus a brightness shift, clamped to [0,1]."""
    rng = np.random.default_rng(seed)
    gain = rng.uniform(*cfg.perturb_gain)
    bias = rng.uniform(*cfg.perturb_bias)
    mean = img.data.mean()
    out = np.clip(gain * (img.data - mean) + mean + bias, 0.0, 1.0)
    return ImagePlane(out)


def _quantize_params(net: NetworkParams) -> NetworkParams:
    # round to storage precision so a save/load cycle is the identity
    return NetworkParams(
        [
            ConvLayer(
                l.weights.astype(np.float32).astype(np.float64),
                l.bias.astype(np.float32).astype(np.float64),
                l.activation,
            )
            for l in net.layers
        ],
        net.input_channels,
        net.kind,
    )


def _sgd_epoch_batches(rng, n, batch_size):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _train_residual(net, inputs_cl, base_cl, targets_cl, cfg, rng):
    """Minibatch SGD on MSE(base + net(inputs), target); channels-last data.

    Runs in float32, the storage precision of the weight files; parameters
    are restored to float64 containers afterwards.
    """
    inputs_cl = inputs_cl.astype(np.float32)
    base_cl = base_cl.astype(np.float32)
    targets_cl = targets_cl.astype(np.float32)
    for layer in net.layers:
        layer.weights = layer.weights.astype(np.float32)
        layer.bias = layer.bias.astype(np.float32)
    n = inputs_cl.shape[0]
    trace = []
    it = 0
    lr = np.float32(cfg.learning_rate)
    try:
        while it < cfg.iterations:
            for batch in _sgd_epoch_batches(rng, n, cfg.batch_size):
                if it >= cfg.iterations:
                    break
                xb = inputs_cl[batch]
                residual, caches = _forward(net, xb, True)
                pred = base_cl[batch] + residual
                diff = pred - targets_cl[batch]
                loss = float(np.mean(diff.astype(np.float64) ** 2))
                trace.append(loss)
                if not np.isfinite(loss):
                    raise TrainingDiverged(trace)
                delta = (2.0 / diff.size) * diff
                grads, _ = _backward_from_delta(net, caches, delta)
                for layer, (dw, db) in zip(net.layers, grads):
                    layer.weights -= lr * dw
                    layer.bias -= lr * db
                it += 1
    finally:
        for layer in net.layers:
            layer.weights = layer.weights.astype(np.float64)
            layer.bias = layer.bias.astype(np.float64)
    return trace


def train_ihn(
    hr_images: list[ImagePlane],
    s: int,
    cfg: TrainConfig,
    hidden_channels: int = 32,
    num_layers: int = 5,
    blur_sigma: float | None = None,
) -> tuple[NetworkParams, list[float]]:
    """Train the internal network from scratch; deterministic per cfg.seed."""
    samples = make_dataset(hr_images, s, blur_sigma)
    if not samples:
        raise ValueError("empty training dataset")
    rng = np.random.default_rng(cfg.seed)
    net = _build_with_rng("ihn", rng, 2, hidden_channels, num_layers, 3)
    inputs = np.ascontiguousarray(
        np.stack([p.inputs for p in samples]).transpose(0, 2, 3, 1)
    )
    targets = np.ascontiguousarray(
        np.stack([p.target for p in samples]).transpose(0, 2, 3, 1)
    )
    base = inputs[..., 0:1]
    trace = _train_residual(net, inputs, base, targets, cfg, rng)
    return _quantize_params(net), trace


def train_ehn(
    hr_images: list[ImagePlane],
    s: int,
    cfg: TrainConfig,
    ihn: NetworkParams,
    hidden_channels: int = 32,
    num_layers: int = 5,
    blur_sigma: float | None = None,
) -> tuple[NetworkParams, list[float]]:
    """Train the external network against a frozen internal network.

    Per image, a contrast-perturbed copy of the ground truth stands in for
    an aligned reference; the network sees the difference between that
    reference and its own intermediate reconstruction and must push the
    intermediate image toward the raw ground truth.
    """
    _require_kind(ihn, "ihn")
    rng = np.random.default_rng(cfg.seed)
    perturb_seeds = rng.integers(0, 2**62, size=len(hr_images))
    diffs, bases, targets = [], [], []
    for img, pseed in zip(hr_images, perturb_seeds):
        if img.height < PATCH or img.width < PATCH:
            raise ValueError(f"image {img.shape} smaller than {PATCH}x{PATCH}")
        g = mod_crop(img, s)
        if g.height < PATCH or g.width < PATCH:
            continue
        interm = intermediate_sr(ihn, degrade(g, s, blur_sigma), s)
        ref = contrast_perturb(g, int(pseed), cfg)
        ref_t = reference_intermediate(ihn, ref, s)
        diff = ref.data - ref_t.data
        for y, x in _crop_grid(g.height, g.width):
            sl = (slice(y, y + PATCH), slice(x, x + PATCH))
            diffs.append(diff[sl][None])
            bases.append(interm.data[sl][None])
            targets.append(g.data[sl][None])
    if not diffs:
        raise ValueError("empty training dataset")
    net = _build_with_rng("ehn", rng, 1, hidden_channels, num_layers, 3)
    inputs = np.ascontiguousarray(np.stack(diffs).transpose(0, 2, 3, 1))
    base = np.ascontiguousarray(np.stack(bases).transpose(0, 2, 3, 1))
    tgt = np.ascontiguousarray(np.stack(targets).transpose(0, 2, 3, 1))
    trace = _train_residual(net, inputs, base, tgt, cfg, rng)
    return _quantize_params(net), trace


# ----------------------------------------------------------------------
# Serialization
# ----------------------------------------------------------------------


def save_params(net: NetworkParams, path) -> None:
    import struct
    from pathlib import Path

    parts = [WEIGHTS_MAGIC]
    parts.append(struct.pack("<IB", WEIGHTS_VERSION, KIND_TAGS[net.kind]))
    parts.append(struct.pack("<I", len(net.layers)))
    for layer in net.layers:
        o, c, kh, kw = layer.weights.shape
        parts.append(struct.pack("<IIIIB", o, c, kh, kw, ACT_TAGS[layer.activation]))
        parts.append(layer.weights.astype("<f4").tobytes())
        parts.append(layer.bias.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_params(path) -> NetworkParams:
    import struct
    from pathlib import Path

    from .io import FormatError

    raw = Path(path).read_bytes()
    if len(raw) < 13 or raw[:4] != WEIGHTS_MAGIC:
        raise FormatError(f"{path}: bad weights magic")
    version, tag = struct.unpack("<IB", raw[4:9])
    if version != WEIGHTS_VERSION:
        raise FormatError(f"{path}: unsupported weights version {version}")
    kinds = {v: k for k, v in KIND_TAGS.items()}
    if tag not in kinds:
        raise FormatError(f"{path}: unknown network tag {tag}")
    (n_layers,) = struct.unpack("<I", raw[9:13])
    pos = 13
    layers = []
    acts = {v: k for k, v in ACT_TAGS.items()}
    for _ in range(n_layers):
        if len(raw) < pos + 17:
            raise FormatError(f"{path}: truncated layer header")
        o, c, kh, kw, act = struct.unpack("<IIIIB", raw[pos : pos + 17])
        pos += 17
        if act not in acts:
            raise FormatError(f"{path}: unknown activation tag {act}")
        wn, bn = o * c * kh * kw * 4, o * 4
        if len(raw) < pos + wn + bn:
            raise FormatError(f"{path}: truncated layer data")
        w = np.frombuffer(raw[pos : pos + wn], dtype="<f4").astype(np.float64)
        pos += wn
        b = np.frombuffer(raw[pos : pos + bn], dtype="<f4").astype(np.float64)
        pos += bn
        layers.append(ConvLayer(w.reshape(o, c, kh, kw), b, acts[act]))
    if pos != len(raw):
        raise FormatError(f"{path}: trailing bytes in weights file")
    if not layers:
        raise FormatError(f"{path}: no layers")
    return NetworkParams(layers, layers[0].in_channels, kinds[tag])
