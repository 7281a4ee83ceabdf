"""The speckle decoder CNN and its checkpoint format.

Topology (input 1 x S x S, S = 128 by default)::

    3 x [conv3x3 -> batchnorm -> relu -> maxpool2x2]   widths (16, 32, 64)
    flatten -> linear(256) -> batchnorm1d -> relu -> linear(K or 1)

Checkpoint layout: b"SPCK", u32 version, u32 header length, a UTF-8 JSON
header (topology, seed, epoch, byte-offset index), then the concatenated
TNSR blobs the index points into.
"""
from __future__ import annotations

import json
import struct
from collections import OrderedDict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import FormatError, InvalidArgument, ShapeError
from .formats import decode_tensor, encode_tensor

CKPT_MAGIC = b"SPCK"
CKPT_VERSION = 1


class Decoder:
    def __init__(self, task="classify", num_classes=9, widths=(16, 32, 64), hidden=256,
                 input_size=128, seed=0, dtype=np.float32):
        if task not in ("classify", "regress"):
            raise InvalidArgument(f"task must be 'classify' or 'regress', got {task!r}")
        if task == "classify" and num_classes < 2:
            raise InvalidArgument("a classifier needs at least two classes")
        if input_size % 8:
            raise InvalidArgument("input size must be divisible by 8 (three 2x2 pools)")
        self.task = task
        self.num_classes = num_classes if task == "classify" else 1
        self.widths = tuple(int(w) for w in widths)
        self.hidden = int(hidden)
        self.input_size = int(input_size)
        self.seed = int(seed)
        self.params = OrderedDict()
        self.bn = OrderedDict()
        self._init_params(np.dtype(dtype))

    @property
    def flat_features(self):
        return self.widths[-1] * (self.input_size // 8) ** 2

    def _init_params(self, dtype):
        rng = np.random.Generator(np.random.PCG64(self.seed))

        def uniform(shape, fan_in):
            bound = np.sqrt(6.0 / fan_in)
            return Tensor(rng.uniform(-bound, bound, shape).astype(dtype))

        def zeros(n):
            return Tensor(np.zeros(n, dtype=dtype))

        c_in = 1
        for i, width in enumerate(self.widths, start=1):
            self.params[f"block{i}.conv.weight"] = uniform((width, c_in, 3, 3), c_in * 9)
            self.params[f"block{i}.conv.bias"] = zeros(width)
            self.params[f"block{i}.bn.gamma"] = Tensor(np.ones(width, dtype=dtype))
            self.params[f"block{i}.bn.beta"] = zeros(width)
            self.bn[f"block{i}.bn"] = ad.BatchNormState.fresh(width, dtype)
            c_in = width
        self.params["fc.weight"] = uniform((self.hidden, self.flat_features), self.flat_features)
        self.params["fc.bias"] = zeros(self.hidden)
        self.params["fc.bn.gamma"] = Tensor(np.ones(self.hidden, dtype=dtype))
        self.params["fc.bn.beta"] = zeros(self.hidden)
        self.bn["fc.bn"] = ad.BatchNormState.fresh(self.hidden, dtype)
        self.params["head.weight"] = uniform((self.num_classes, self.hidden), self.hidden)
        self.params["head.bias"] = zeros(self.num_classes)
        for p in self.params.values():
            p.requires_grad = True

    def parameter_count(self):
        return sum(p.data.size for p in self.params.values())

    def topology(self):
        return {"task": self.task, "num_classes": self.num_classes, "widths": list(self.widths),
                "hidden": self.hidden, "input_size": self.input_size}

    def astype(self, dtype):
        for p in self.params.values():
            p.data = p.data.astype(dtype)
        for st in self.bn.values():
            st.running_mean = st.running_mean.astype(dtype)
            st.running_var = st.running_var.astype(dtype)
        return self

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def forward(self, x, train=False):
        """Logits (N, K) for a classifier, forces (N, 1) for a regressor."""
        data = x.data if isinstance(x, Tensor) else np.asarray(x)
        s = self.input_size
        if data.ndim != 4 or data.shape[1:] != (1, s, s):
            raise ShapeError(f"decoder expects N x 1 x {s} x {s} input, got {data.shape}")
        p = self.params
        dtype = p["head.weight"].dtype
        h = x if isinstance(x, Tensor) and x.dtype == dtype else Tensor(data.astype(dtype, copy=False))
        for i in range(1, len(self.widths) + 1):
            h = ad.conv2d(h, p[f"block{i}.conv.weight"], p[f"block{i}.conv.bias"])
            h = ad.batchnorm(h, p[f"block{i}.bn.gamma"], p[f"block{i}.bn.beta"], self.bn[f"block{i}.bn"], train)
            h = ad.maxpool2x2(ad.relu(h))
        h = ad.linear(ad.flatten(h), p["fc.weight"], p["fc.bias"])
        h = ad.relu(ad.batchnorm(h, p["fc.bn.gamma"], p["fc.bn.beta"], self.bn["fc.bn"], train))
        return ad.linear(h, p["head.weight"], p["head.bias"])

    def predict(self, x, batch_size=64):
        """Eval-mode outputs as a numpy array, evaluated in fixed-size chunks."""
        x = np.asarray(x)
        outs = [self.forward(x[i:i + batch_size], train=False).data for i in range(0, len(x), batch_size)]
        return np.concatenate(outs, axis=0)

def build_model(task="classify", num_classes=9, seed=0, **kwargs) -> Decoder:
    return Decoder(task=task, num_classes=num_classes, seed=seed, **kwargs)


def expected_parameter_count(widths=(16, 32, 64), num_classes=9, hidden=256, input_size=128):
    """Closed-form count: conv weights+biases, BN gamma/beta, FC, FC-BN and head."""
    total, c_in = 0, 1
    for w in widths:
        total += w * c_in * 9 + w + 2 * w
        c_in = w
    flat = widths[-1] * (input_size // 8) ** 2
    total += hidden * flat + hidden + 2 * hidden
    total += num_classes * hidden + num_classes
    return total


# full-network check: steps small enough to rarely straddle a ReLU/max-pool switch,
# large enough that float64 round-off stays below the tolerance
MODEL_CHECK_STEP = dict(rel_step=1e-6, min_step=1e-5, floor=1e-5)


def grad_check_model(seed, task="classify", num_classes=3, input_size=16, batch=4,
                     samples_per_param=6, tolerance=1e-4) -> ad.GradCheckReport:
    """Central-difference check of the whole decoder at float64 on a random batch."""
    model = build_model(task, num_classes, seed=seed, input_size=input_size).astype(np.float64)
    rng = np.random.Generator(np.random.PCG64(seed))
    x = rng.standard_normal((batch, 1, input_size, input_size))
    if task == "classify":
        y = rng.integers(0, num_classes, batch)
        loss_fn = lambda: ad.softmax_cross_entropy(model.forward(x, train=True), y)  # noqa: E731
    else:
        y = rng.uniform(0.0, 1.0, (batch, 1))
        loss_fn = lambda: ad.mse(model.forward(x, train=True), y)  # noqa: E731
    return ad.grad_check(loss_fn, model.params, tolerance=tolerance, samples_per_param=samples_per_param,
                         seed=seed, **MODEL_CHECK_STEP)


# --- checkpoints -------------------------------------------------------------

def _state_arrays(model: Decoder):
    arrays = OrderedDict((name, p.data) for name, p in model.params.items())
    for name, st in model.bn.items():
        arrays[f"{name}.running_mean"] = st.running_mean
        arrays[f"{name}.running_var"] = st.running_var
    return arrays


def checkpoint_bytes(model: Decoder, epoch=0, extra=None) -> bytes:
    blobs, index, offset = [], [], 0
    for name, arr in _state_arrays(model).items():
        blob = encode_tensor(arr)
        index.append({"name": name, "offset": offset, "length": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "topology": model.topology(),
        "seed": model.seed,
        "epoch": int(epoch),
        "bn_steps": {name: st.steps for name, st in model.bn.items()},
        "index": index,
    }
    if extra:
        header["extra"] = extra
    head = json.dumps(header, sort_keys=True).encode()
    return CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(head)) + head + b"".join(blobs)


def save_checkpoint(model: Decoder, path, epoch=0, extra=None):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model, epoch, extra))


def load_checkpoint(path) -> Decoder:
    with open(path, "rb") as fh:
        blob = fh.read()
    return checkpoint_from_bytes(blob, str(path))


def checkpoint_from_bytes(blob, name="<bytes>") -> Decoder:
    if len(blob) < 12:
        raise FormatError(f"{name}: truncated checkpoint")
    if blob[:4] != CKPT_MAGIC:
        raise FormatError(f"{name}: not a checkpoint (bad magic {blob[:4]!r})")
    version, head_len = struct.unpack("<II", blob[4:12])
    if version != CKPT_VERSION:
        raise FormatError(f"{name}: unsupported checkpoint version {version}")
    if len(blob) < 12 + head_len:
        raise FormatError(f"{name}: truncated checkpoint header")
    try:
        header = json.loads(blob[12:12 + head_len])
    except ValueError as exc:
        raise FormatError(f"{name}: corrupt checkpoint header") from exc
    body = blob[12 + head_len:]
    if not isinstance(header, dict) or "topology" not in header or "index" not in header:
        raise FormatError(f"{name}: checkpoint header lacks topology or index")
    topo = header["topology"]
    model = Decoder(task=topo["task"], num_classes=topo["num_classes"], widths=topo["widths"],
                    hidden=topo["hidden"], input_size=topo["input_size"], seed=header["seed"])
    arrays = {}
    for entry in header["index"]:
        start, end = entry["offset"], entry["offset"] + entry["length"]
        if end > len(body):
            raise FormatError(f"{name}: truncated checkpoint body ({entry['name']})")
        arrays[entry["name"]] = decode_tensor(body[start:end], f"{name}:{entry['name']}")
    for pname, p in model.params.items():
        if pname not in arrays:
            raise FormatError(f"{name}: missing tensor {pname}")
        if arrays[pname].shape != p.shape:
            raise FormatError(f"{name}: tensor {pname} has shape {arrays[pname].shape}, expected {p.shape}")
        p.data = arrays[pname]
    for bname, st in model.bn.items():
        for key in (f"{bname}.running_mean", f"{bname}.running_var"):
            if key not in arrays:
                raise FormatError(f"{name}: missing tensor {key}")
        st.running_mean = arrays[f"{bname}.running_mean"]
        st.running_var = arrays[f"{bname}.running_var"]
        st.steps = header.get("bn_steps", {}).get(bname, 0)
    model.epoch = header["epoch"]
    model.extra = header.get("extra", {})
    return model
