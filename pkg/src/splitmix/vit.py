"""Toy vision transformer split after the patch-embedding layer.

Each client owns a lower segment (patchify + linear embedding + positional
embeddings); the server owns the shared upper segment (pre-layernorm encoder
blocks, mean pooling over patches, linear head). Forward and backward passes
are hand-written on top of the kernel backend; the optimizer is plain SGD.

There is no class token: a class-token patch would belong to no client's
mask, so the pooled representation is the patch mean instead.
"""

import struct
from dataclasses import dataclass

import numpy as np

from . import kernels as K
from .errors import ParameterError, ShapeError, StateError
from .interpolation import SmashedData
from .numeric import SeededRng, as_tensor

INIT_STD = 0.02
LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    image_height: int = 16
    image_width: int = 16
    channels: int = 1
    patch_size: int = 4
    embed_dim: int = 32
    blocks: int = 2
    heads: int = 2
    mlp_ratio: int = 2
    classes: int = 4

    def __post_init__(self):
        if self.image_height % self.patch_size or self.image_width % self.patch_size:
            raise ShapeError(
                f"image {self.image_height}x{self.image_width} not divisible by patch "
                f"size {self.patch_size}")
        if self.embed_dim % self.heads:
            raise ParameterError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")

    @property
    def grid_h(self) -> int:
        return self.image_height // self.patch_size

    @property
    def grid_w(self) -> int:
        return self.image_width // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads


def _contig(a):
    return np.ascontiguousarray(a)


def _linear(x2d, w, b):
    return K.matmul(x2d, w) + b


def _linear_backward(x2d, w, dy):
    dw = K.matmul(_contig(x2d.T), dy)
    db = dy.sum(axis=0)
    dx = K.matmul(dy, _contig(w.T))
    return dx, dw, db


def patchify(images, patch_size):
    """[B,H,W,C] (or [H,W,C]) -> [B,N,P*P*C] (or [N,P*P*C]), patches row-major."""
    single = images.ndim == 3
    if single:
        images = images[None]
    b, h, w, c = images.shape
    gh, gw = h // patch_size, w // patch_size
    x = images.reshape(b, gh, patch_size, gw, patch_size, c)
    x = x.transpose(0, 1, 3, 2, 4, 5).reshape(b, gh * gw, patch_size * patch_size * c)
    x = _contig(x)
    return x[0] if single else x


def unpatchify(patches, grid_h, grid_w, patch_size, channels):
    """Inverse of patchify: [B,N,P*P*C] (or [N,P*P*C]) -> image array."""
    single = patches.ndim == 2
    if single:
        patches = patches[None]
    b = patches.shape[0]
    x = patches.reshape(b, grid_h, grid_w, patch_size, patch_size, channels)
    x = x.transpose(0, 1, 3, 2, 4, 5).reshape(
        b, grid_h * patch_size, grid_w * patch_size, channels)
    x = _contig(x)
    return x[0] if single else x


class LowerSegment:
    """Per-client model half: patch embedding plus positional embeddings."""

    PARAM_NAMES = ("embed_w", "embed_b", "pos")

    def __init__(self, config: ModelConfig, params: dict):
        self.config = config
        self.params = params
        self._cache = None

    @classmethod
    def init(cls, config: ModelConfig, rng: SeededRng, init_std: float = INIT_STD) -> "LowerSegment":
        gen = rng.generator()
        params = {
            "embed_w": gen.normal(0.0, init_std, (config.patch_dim, config.embed_dim)),
            "embed_b": np.zeros(config.embed_dim),
            "pos": gen.normal(0.0, init_std, (config.num_patches, config.embed_dim)),
        }
        return cls(config, params)

    def copy(self) -> "LowerSegment":
        return LowerSegment(self.config, {k: v.copy() for k, v in self.params.items()})

    def forward(self, image) -> SmashedData:
        image = as_tensor(image)
        c = self.config
        if image.shape != (c.image_height, c.image_width, c.channels):
            raise ShapeError(f"expected image shape "
                             f"{(c.image_height, c.image_width, c.channels)}, got {image.shape}")
        xp = patchify(image, c.patch_size)
        out = _linear(xp, self.params["embed_w"], self.params["embed_b"]) + self.params["pos"]
        self._cache = xp
        return SmashedData(out)

    def forward_batch(self, images) -> np.ndarray:
        images = as_tensor(images)
        c = self.config
        xp = patchify(images, c.patch_size)
        flat = xp.reshape(-1, c.patch_dim)
        out = _linear(flat, self.params["embed_w"], self.params["embed_b"])
        out = out.reshape(images.shape[0], c.num_patches, c.embed_dim) + self.params["pos"]
        return out

    def backward(self, cut_grad) -> dict:
        if self._cache is None:
            raise StateError("lower backward called without a cached forward")
        xp = self._cache
        g = as_tensor(cut_grad)
        if g.shape != (self.config.num_patches, self.config.embed_dim):
            raise ShapeError(f"cut gradient shape {g.shape} does not match smashed shape")
        return {
            "embed_w": K.matmul(_contig(xp.T), g),
            "embed_b": g.sum(axis=0),
            "pos": g.copy(),
        }


class UpperSegment:
    """Shared model half: encoder blocks, mean pooling, classifier head."""

    def __init__(self, config: ModelConfig, params: dict):
        self.config = config
        self.params = params
        self._cache = None

    @classmethod
    def param_names(cls, config: ModelConfig):
        names = []
        for i in range(config.blocks):
            p = f"blk{i}."
            # no key bias: softmax row-shift invariance makes it a dead parameter
            names += [p + "ln1.g", p + "ln1.b",
                      p + "attn.wq", p + "attn.bq", p + "attn.wk",
                      p + "attn.wv", p + "attn.bv", p + "attn.wo", p + "attn.bo",
                      p + "ln2.g", p + "ln2.b",
                      p + "mlp.w1", p + "mlp.b1", p + "mlp.w2", p + "mlp.b2"]
        names += ["final_ln.g", "final_ln.b", "head.w", "head.b"]
        return names

    @classmethod
    def init(cls, config: ModelConfig, rng: SeededRng, init_std: float = INIT_STD) -> "UpperSegment":
        gen = rng.generator()
        d = config.embed_dim
        hidden = config.mlp_ratio * d
        shapes = {
            "ln1.g": None, "ln1.b": None,
            "attn.wq": (d, d), "attn.bq": None, "attn.wk": (d, d),
            "attn.wv": (d, d), "attn.bv": None, "attn.wo": (d, d), "attn.bo": None,
            "ln2.g": None, "ln2.b": None,
            "mlp.w1": (d, hidden), "mlp.b1": None, "mlp.w2": (hidden, d), "mlp.b2": None,
            "final_ln.g": None, "final_ln.b": None,
            "head.w": (d, config.classes), "head.b": None,
        }
        params = {}
        for name in cls.param_names(config):
            leaf = name.split(".", 1)[-1] if name.startswith("blk") else name
            shape = shapes[leaf]
            if shape is not None:
                params[name] = gen.normal(0.0, init_std, shape)
            elif leaf.endswith(".g"):
                params[name] = np.ones(d)
            elif leaf == "mlp.b1":
                params[name] = np.zeros(hidden)
            elif leaf == "head.b":
                params[name] = np.zeros(config.classes)
            else:
                params[name] = np.zeros(d)
        return cls(config, params)

    def copy(self) -> "UpperSegment":
        return UpperSegment(self.config, {k: v.copy() for k, v in self.params.items()})

    def _split_heads(self, x_flat, batch):
        c = self.config
        x = x_flat.reshape(batch, c.num_patches, c.heads, c.head_dim)
        return _contig(x.transpose(0, 2, 1, 3).reshape(batch * c.heads, c.num_patches, c.head_dim))

    def _merge_heads(self, xh, batch):
        c = self.config
        x = xh.reshape(batch, c.heads, c.num_patches, c.head_dim)
        return _contig(x.transpose(0, 2, 1, 3).reshape(batch * c.num_patches, c.embed_dim))

    def forward_batch(self, x) -> np.ndarray:
        x = as_tensor(x)
        c = self.config
        if x.ndim != 3 or x.shape[1] != c.num_patches or x.shape[2] != c.embed_dim:
            raise ShapeError(f"expected [batch, {c.num_patches}, {c.embed_dim}], got {x.shape}")
        batch, n, d = x.shape
        p = self.params
        scale = 1.0 / np.sqrt(c.head_dim)
        cache = {"x0": x, "blocks": []}
        cur = _contig(x.reshape(batch * n, d))
        for i in range(c.blocks):
            bp = f"blk{i}."
            blk = {}
            h1, blk["xhat1"], blk["rstd1"] = K.layernorm_forward(
                cur, p[bp + "ln1.g"], p[bp + "ln1.b"], LN_EPS)
            blk["h1"] = h1
            q = self._split_heads(_linear(h1, p[bp + "attn.wq"], p[bp + "attn.bq"]), batch)
            k = self._split_heads(K.matmul(h1, p[bp + "attn.wk"]), batch)
            v = self._split_heads(_linear(h1, p[bp + "attn.wv"], p[bp + "attn.bv"]), batch)
            blk["q"], blk["k"], blk["v"] = q, k, v
            scores = K.bmm_nt(q, k) * scale
            att = K.softmax_rows(_contig(scores.reshape(-1, n))).reshape(scores.shape)
            blk["att"] = att
            o = self._merge_heads(K.bmm(_contig(att), v), batch)
            blk["o"] = o
            attn_out = _linear(o, p[bp + "attn.wo"], p[bp + "attn.bo"])
            x1 = cur + attn_out
            blk["x1"] = x1
            h2, blk["xhat2"], blk["rstd2"] = K.layernorm_forward(
                x1, p[bp + "ln2.g"], p[bp + "ln2.b"], LN_EPS)
            blk["h2"] = h2
            u = _linear(h2, p[bp + "mlp.w1"], p[bp + "mlp.b1"])
            blk["u"] = u
            g = K.gelu(u)
            blk["gelu"] = g
            m = _linear(g, p[bp + "mlp.w2"], p[bp + "mlp.b2"])
            cur = x1 + m
            cache["blocks"].append(blk)
        pooled = cur.reshape(batch, n, d).mean(axis=1)
        cache["pooled"] = pooled
        logits = _linear(pooled, p["head.w"], p["head.b"])
        cache["batch"] = batch
        self._cache = cache
        return logits

    def backward_batch(self, dlogits):
        if self._cache is None:
            raise StateError("upper backward called without a cached forward")
        cache = self._cache
        c = self.config
        p = self.params
        batch, n, d = cache["batch"], c.num_patches, c.embed_dim
        scale = 1.0 / np.sqrt(c.head_dim)
        dlogits = as_tensor(dlogits)
        grads = {}
        dpool, grads["head.w"], grads["head.b"] = _linear_backward(
            cache["pooled"], p["head.w"], dlogits)
        dcur = np.repeat(dpool[:, None, :] / n, n, axis=1).reshape(batch * n, d)
        for i in reversed(range(c.blocks)):
            bp = f"blk{i}."
            blk = cache["blocks"][i]
            # MLP branch
            dg, grads[bp + "mlp.w2"], grads[bp + "mlp.b2"] = _linear_backward(
                blk["gelu"], p[bp + "mlp.w2"], dcur)
            du = K.gelu_backward(blk["u"], dg)
            dh2, grads[bp + "mlp.w1"], grads[bp + "mlp.b1"] = _linear_backward(
                blk["h2"], p[bp + "mlp.w1"], du)
            dx1_ln, grads[bp + "ln2.g"], grads[bp + "ln2.b"] = K.layernorm_backward(
                blk["xhat2"], blk["rstd2"], p[bp + "ln2.g"], dh2)
            dx1 = dcur + dx1_ln
            # attention branch
            do, grads[bp + "attn.wo"], grads[bp + "attn.bo"] = _linear_backward(
                blk["o"], p[bp + "attn.wo"], dx1)
            doh = self._split_heads(do, batch)
            datt = K.bmm_nt(doh, blk["v"])
            dv = K.bmm_tn(_contig(blk["att"]), doh)
            dscores = K.softmax_rows_backward(
                _contig(blk["att"].reshape(-1, n)), _contig(datt.reshape(-1, n)))
            dscores = _contig(dscores.reshape(datt.shape)) * scale
            dq = K.bmm(_contig(dscores), blk["k"])
            dk = K.bmm_tn(_contig(dscores), blk["q"])
            dh1 = np.zeros_like(blk["h1"])
            for w_name, b_name, dval in ((bp + "attn.wq", bp + "attn.bq", dq),
                                         (bp + "attn.wk", None, dk),
                                         (bp + "attn.wv", bp + "attn.bv", dv)):
                dflat = self._merge_heads(dval, batch)
                dh, grads[w_name], db = _linear_backward(blk["h1"], p[w_name], dflat)
                if b_name is not None:
                    grads[b_name] = db
                dh1 += dh
            dx_ln, grads[bp + "ln1.g"], grads[bp + "ln1.b"] = K.layernorm_backward(
                blk["xhat1"], blk["rstd1"], p[bp + "ln1.g"], dh1)
            dcur = dx1 + dx_ln
        dx = dcur.reshape(batch, n, d)
        return grads, dx


def upper_forward(seg: UpperSegment, mixed: SmashedData) -> np.ndarray:
    """Logits for one mixed sample (batch of one internally)."""
    return seg.forward_batch(mixed.patches[None])[0]


def loss_soft_ce(logits, soft_target) -> float:
    """Soft-target cross-entropy, -sum(t * log softmax(logits)), in log space."""
    logits = as_tensor(logits)
    t = as_tensor(soft_target)
    if logits.shape != t.shape:
        raise ShapeError(f"logits shape {logits.shape} != target shape {t.shape}")
    shifted = logits - logits.max()
    lse = np.log(np.exp(shifted).sum()) + logits.max()
    return float((t * (lse - logits)).sum())


def loss_soft_ce_grad(logits, soft_target) -> np.ndarray:
    """d loss / d logits = sum(t) * softmax(logits) - t (exact for soft targets)."""
    logits = as_tensor(logits)
    t = as_tensor(soft_target)
    probs = K.softmax_rows(_contig(logits[None]))[0]
    return t.sum() * probs - t


@dataclass
class TrainState:
    """Learning rate, step counter, per-client lowers, shared upper."""

    learning_rate: float
    lowers: list
    upper: UpperSegment
    step: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ParameterError(f"learning rate must be positive, got {self.learning_rate}")


def init_train_state(config: ModelConfig, num_clients: int, learning_rate: float,
                     rng: SeededRng) -> TrainState:
    """All clients start from one identical seed-derived lower segment."""
    lower0 = LowerSegment.init(config, rng.stream(0x01))
    upper = UpperSegment.init(config, rng.stream(0x02))
    lowers = [lower0.copy() for _ in range(num_clients)]
    return TrainState(learning_rate=learning_rate, lowers=lowers, upper=upper)


def backward_and_cut_gradients(upper: UpperSegment, mixed_items):
    """Batched forward + backward over one round's mixed items.

    Returns (total loss, upper-segment gradients summed over items,
    per-client cut-layer gradients). Each client's cut gradient is the chain
    rule through its mixing operator: the masked slice of dL/ds for patch
    cutmix, lambda_i * dL/ds for mixup-style contributions.
    """
    if not mixed_items:
        raise ParameterError("no mixed items to train on")
    stack = np.stack([item.smashed.patches for item in mixed_items])
    logits = upper.forward_batch(stack)
    total_loss = 0.0
    dlogits = np.zeros_like(logits)
    for j, item in enumerate(mixed_items):
        total_loss += loss_soft_ce(logits[j], item.label)
        dlogits[j] = loss_soft_ce_grad(logits[j], item.label)
    grads, dsmash = upper.backward_batch(dlogits)
    cut_grads = {}
    for j, item in enumerate(mixed_items):
        for client_id, lam, mask in item.contributors:
            if mask is not None:
                g = np.zeros_like(dsmash[j])
                if mask.selected:
                    rows = sorted(mask.selected)
                    g[rows, :] = dsmash[j][rows, :]
            else:
                g = lam * dsmash[j]
            if client_id in cut_grads:
                cut_grads[client_id] = cut_grads[client_id] + g
            else:
                cut_grads[client_id] = g
    return total_loss, grads, cut_grads


def sgd_step(params: dict, grads: dict, learning_rate: float) -> None:
    """In-place p <- p - eta * g for every gradient entry."""
    if learning_rate <= 0:
        raise ParameterError(f"learning rate must be positive, got {learning_rate}")
    for name, g in grads.items():
        params[name] -= learning_rate * g


def evaluate_accuracy(lower: LowerSegment, upper: UpperSegment, images, labels) -> float:
    """Top-1 accuracy of lower+upper on a batch of images."""
    smashed = lower.forward_batch(images)
    logits = upper.forward_batch(smashed)
    upper._cache = None
    pred = logits.argmax(axis=1)
    return float((pred == np.asarray(labels)).mean())


def serialize_params(params: dict) -> bytes:
    """Checkpoint encoding: flat (name, shape, float64-little-endian) records."""
    out = [struct.pack("<I", len(params))]
    for name, arr in params.items():
        raw = name.encode("utf-8")
        arr = as_tensor(arr)
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            out.append(struct.pack("<I", dim))
        out.append(arr.astype("<f8").tobytes())
    return b"".join(out)


def deserialize_params(blob: bytes) -> dict:
    params = {}
    (count,) = struct.unpack_from("<I", blob, 0)
    offset = 4
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<B", blob, offset)
        offset += 1
        shape = []
        for _ in range(ndim):
            (dim,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            shape.append(dim)
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=size, offset=offset).reshape(shape)
        offset += size * 8
        params[name] = arr.astype(np.float64)
    return params
