"""Convolutional VAE-classifier with a mixup hook at every block boundary.

Architecture:

* Encoder: ``num_blocks`` stages of conv3x3 -> relu. Stride-2 positions and
  per-block channel widths are derived from the input resolution unless
  ``channels_per_block`` is given explicitly. The final feature map is
  globally average-pooled into the embedding.
* Latent head: two parallel dense maps from the pooled embedding produce mu
  and logvar of a diagonal Gaussian; z is drawn by reparameterization in
  train mode and set to mu in eval mode.
* Decoder: exactly 5 learned layers (dense projection + 4 upsample-conv
  stages), sigmoid output in (0, 1) at ``recon_resolution``.
* Classifier: dense -> relu -> dropout -> dense on the pooled embedding.

``encode_blocks(x, a, b)`` runs blocks [a, b); running it in two segments is
bit-identical to one segment, which is what lets mixup splice a convex
combination in at any boundary.

Parameter groups: the "encoder" group holds the conv stack; latent head,
classifier, and decoder form the "heads_and_decoder" group (the group that
stays trainable while the encoder is frozen).
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import mixup as mixup_mod
from .autodiff import (Rng, Tensor, dense, conv2d, dropout, relu, sigmoid,
                       softmax, texp, mul, add, upsample_nearest2d)
from .errors import ConfigError, ShapeError, UsageError

CHECKPOINT_MAGIC = b"MVAECKPT"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    input_resolution: int = 224
    num_blocks: int = 6
    channels_per_block: Optional[Tuple[int, ...]] = None
    latent_dim: int = 128
    num_classes: int = 4
    dropout_p: float = 0.3
    classifier_hidden: int = 512
    decoder_layers: int = 5
    decoder_channels: Tuple[int, int, int, int] = (32, 24, 16, 8)
    recon_resolution: int = 64
    use_decoder: bool = True
    base_channels: int = 8
    channel_cap: int = 512

    def __post_init__(self):
        if self.num_blocks < 1:
            raise ConfigError(f"num_blocks must be >= 1, got {self.num_blocks}")
        if self.latent_dim < 1:
            raise ConfigError(f"latent_dim must be >= 1, got {self.latent_dim}")
        if self.num_classes != 4:
            raise ConfigError(f"num_classes is fixed at 4, got {self.num_classes}")
        if self.decoder_layers != 5:
            raise ConfigError(f"decoder_layers is fixed at 5, got {self.decoder_layers}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.input_resolution < 1:
            raise ConfigError(f"input_resolution must be >= 1, got {self.input_resolution}")
        if self.classifier_hidden < 1:
            raise ConfigError(f"classifier_hidden must be >= 1, got {self.classifier_hidden}")
        if self.use_decoder:
            if self.recon_resolution % 16 != 0 or self.recon_resolution < 16:
                raise ConfigError(
                    f"recon_resolution must be a positive multiple of 16 "
                    f"(dense projection + 4 doubling stages), got {self.recon_resolution}")
            if len(self.decoder_channels) != 4 or any(c < 1 for c in self.decoder_channels):
                raise ConfigError(
                    f"decoder_channels must be 4 positive ints, got {self.decoder_channels}")
        strides, derived = derive_plan(self.input_resolution, self.num_blocks,
                                       self.base_channels, self.channel_cap)
        if self.channels_per_block is None:
            self.channels_per_block = tuple(derived)
        else:
            self.channels_per_block = tuple(int(c) for c in self.channels_per_block)
            if len(self.channels_per_block) != self.num_blocks:
                raise ConfigError(
                    f"channels_per_block has {len(self.channels_per_block)} entries "
                    f"for {self.num_blocks} blocks")
            if any(c < 1 for c in self.channels_per_block):
                raise ConfigError(f"channels_per_block must be positive, got {self.channels_per_block}")
        self.strides_per_block = strides

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("strides_per_block", None)
        d["channels_per_block"] = list(self.channels_per_block)
        d["decoder_channels"] = list(self.decoder_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if d.get("channels_per_block") is not None:
            d["channels_per_block"] = tuple(d["channels_per_block"])
        if d.get("decoder_channels") is not None:
            d["decoder_channels"] = tuple(d["decoder_channels"])
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def derive_plan(input_resolution: int, num_blocks: int,
                base_channels: int = 8, channel_cap: int = 512):
    """Place stride-2 blocks and channel widths for a given resolution.

    Downsampling happens as many times as the resolution supports (stay
    divisible, keep the final map at least 4 pixels, never more times than
    there are blocks), spread evenly across the stack. Channels start at
    base_channels and double at each stride-2 block up to the cap.
    """
    n_down = 0
    while (n_down < num_blocks
           and input_resolution % (2 ** (n_down + 1)) == 0
           and input_resolution // (2 ** (n_down + 1)) >= 4):
        n_down += 1
    ds_positions = {(j * num_blocks) // n_down for j in range(n_down)} if n_down else set()
    strides: List[int] = []
    channels: List[int] = []
    ch = base_channels
    for i in range(num_blocks):
        s = 2 if i in ds_positions else 1
        if s == 2:
            ch = min(ch * 2, channel_cap)
        strides.append(s)
        channels.append(ch)
    return tuple(strides), tuple(channels)


def b3_like() -> ModelConfig:
    return ModelConfig(input_resolution=224, num_blocks=33, dropout_p=0.3)


def b4_like() -> ModelConfig:
    return ModelConfig(input_resolution=224, num_blocks=27, dropout_p=0.4)


def desk_config(**overrides) -> ModelConfig:
    """Small configuration that trains in minutes on one CPU core."""
    base = dict(input_resolution=32, num_blocks=6, latent_dim=16,
                dropout_p=0.3, classifier_hidden=64, recon_resolution=32)
    base.update(overrides)
    return ModelConfig(**base)


@dataclass
class LatentDistribution:
    mu: Tensor
    logvar: Tensor


@dataclass
class ForwardOutput:
    logits: Tensor
    probs: Tensor
    latent: Optional[LatentDistribution]
    z: Optional[Tensor]
    reconstruction: Optional[Tensor]


class VaeClassifier:
    """Encoder + latent head + decoder + classifier over float64 tensors."""

    def __init__(self, config: ModelConfig, rng: Optional[Rng] = None):
        self.config = config
        self._params: Dict[str, Tensor] = {}
        res = config.input_resolution
        # per-block input channel/resolution bookkeeping, index 0..num_blocks
        self.block_in_channels = [3]
        self.block_in_res = [res]
        for i in range(config.num_blocks):
            self.block_in_channels.append(config.channels_per_block[i])
            self.block_in_res.append(self.block_in_res[-1] // config.strides_per_block[i])

        def init(name, shape, fan_in):
            # Kaiming-uniform: variance 2/fan_in, the gain that keeps
            # activations from shrinking through a deep relu stack.
            bound = np.sqrt(6.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape) if rng is not None \
                else np.zeros(shape)
            self._params[name] = Tensor(np.asarray(data, dtype=np.float64),
                                        requires_grad=True)

        def init_bias(name, n):
            self._params[name] = Tensor(np.zeros(n), requires_grad=True)

        for i in range(config.num_blocks):
            c_in = self.block_in_channels[i]
            c_out = config.channels_per_block[i]
            init(f"enc{i}.weight", (c_out, c_in, 3, 3), c_in * 9)
            init_bias(f"enc{i}.bias", c_out)

        emb = config.channels_per_block[-1]
        self.embedding_dim = emb
        if config.use_decoder:
            # The whole variational branch exists only alongside the decoder;
            # with use_decoder off the model is a plain supervised classifier.
            init("latent_mu.weight", (emb, config.latent_dim), emb)
            init_bias("latent_mu.bias", config.latent_dim)
            init("latent_logvar.weight", (emb, config.latent_dim), emb)
            init_bias("latent_logvar.bias", config.latent_dim)

        init("fc1.weight", (emb, config.classifier_hidden), emb)
        init_bias("fc1.bias", config.classifier_hidden)
        init("fc2.weight", (config.classifier_hidden, config.num_classes), config.classifier_hidden)
        init_bias("fc2.bias", config.num_classes)

        if config.use_decoder:
            dc = config.decoder_channels
            s = config.recon_resolution // 16
            self._decoder_base = s
            init("dec_fc.weight", (config.latent_dim, dc[0] * s * s), config.latent_dim)
            init_bias("dec_fc.bias", dc[0] * s * s)
            chain = [dc[0], dc[1], dc[2], dc[3], 3]
            for j in range(4):
                init(f"dec_conv{j + 1}.weight", (chain[j + 1], chain[j], 3, 3), chain[j] * 9)
                init_bias(f"dec_conv{j + 1}.bias", chain[j + 1])

    # -- parameter plumbing -------------------------------------------------

    def parameters(self) -> List[Tuple[str, Tensor]]:
        return list(self._params.items())

    def param(self, name: str) -> Tensor:
        return self._params[name]

    def parameter_groups(self) -> Dict[str, List[Tuple[str, Tensor]]]:
        """Disjoint split: conv stack vs everything trained during stage 1."""
        groups: Dict[str, List[Tuple[str, Tensor]]] = {"encoder": [], "heads_and_decoder": []}
        for name, t in self._params.items():
            key = "encoder" if name.startswith("enc") else "heads_and_decoder"
            groups[key].append((name, t))
        return groups

    def zero_grad(self):
        for t in self._params.values():
            t.zero_grad()

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_state(self, arrays: Dict[str, np.ndarray]):
        missing = set(self._params) - set(arrays)
        extra = set(arrays) - set(self._params)
        if missing or extra:
            raise ConfigError(
                f"parameter set mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, t in self._params.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ShapeError(
                    f"parameter {name}: stored shape {arr.shape} does not match "
                    f"model shape {t.data.shape}")
            t.data = arr.copy()

    # -- forward pieces ------------------------------------------------------

    def _as_tensor(self, x) -> Tensor:
        return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))

    def encode_blocks(self, x, start_block: int, end_block: Optional[int] = None) -> Tensor:
        """Run encoder blocks [start_block, end_block); identity when equal."""
        nb = self.config.num_blocks
        if end_block is None:
            end_block = nb
        if not (0 <= start_block <= end_block <= nb):
            raise ConfigError(
                f"block range [{start_block}, {end_block}) invalid for {nb} blocks")
        h = self._as_tensor(x)
        want_c = self.block_in_channels[start_block]
        want_r = self.block_in_res[start_block]
        if h.ndim != 4 or h.shape[1:] != (want_c, want_r, want_r):
            raise ShapeError(
                f"embedding shape {h.shape} does not match block {start_block} "
                f"input (B, {want_c}, {want_r}, {want_r})")
        for i in range(start_block, end_block):
            h = relu(conv2d(h, self._params[f"enc{i}.weight"], self._params[f"enc{i}.bias"],
                            stride=self.config.strides_per_block[i], padding=1))
        return h

    def pool(self, h: Tensor) -> Tensor:
        return h.mean(axis=(2, 3))

    def latent_head(self, embedding: Tensor) -> LatentDistribution:
        if not self.config.use_decoder:
            raise UsageError("latent_head called on a model configured without a decoder")
        mu = dense(embedding, self._params["latent_mu.weight"], self._params["latent_mu.bias"])
        logvar = dense(embedding, self._params["latent_logvar.weight"],
                       self._params["latent_logvar.bias"])
        return LatentDistribution(mu=mu, logvar=logvar)

    def reparameterize(self, dist: LatentDistribution, rng: Optional[Rng] = None,
                       eps: Optional[np.ndarray] = None) -> Tensor:
        """z = mu + exp(0.5 * logvar) * eps with eps a non-differentiable draw."""
        if eps is None:
            if rng is None:
                raise UsageError("reparameterize needs an rng when eps is not supplied")
            eps = rng.normal(size=dist.mu.shape)
        eps_t = Tensor(np.asarray(eps, dtype=np.float64))
        if eps_t.shape != dist.mu.shape:
            raise ShapeError(f"eps shape {eps_t.shape} does not match mu {dist.mu.shape}")
        std = texp(mul(dist.logvar, Tensor(np.float64(0.5))))
        return add(dist.mu, mul(std, eps_t))

    def decode(self, z: Tensor) -> Tensor:
        if not self.config.use_decoder:
            raise UsageError("decode called on a model configured without a decoder")
        if z.ndim != 2 or z.shape[1] != self.config.latent_dim:
            raise ShapeError(f"decode expects (B, {self.config.latent_dim}), got {z.shape}")
        s = self._decoder_base
        dc = self.config.decoder_channels
        h = dense(z, self._params["dec_fc.weight"], self._params["dec_fc.bias"])
        h = relu(h.reshape(z.shape[0], dc[0], s, s))
        for j in (1, 2, 3):
            h = relu(conv2d(upsample_nearest2d(h, 2),
                            self._params[f"dec_conv{j}.weight"],
                            self._params[f"dec_conv{j}.bias"], stride=1, padding=1))
        h = conv2d(upsample_nearest2d(h, 2),
                   self._params["dec_conv4.weight"], self._params["dec_conv4.bias"],
                   stride=1, padding=1)
        return sigmoid(h)

    def classify(self, embedding: Tensor, mode: str = "eval", rng: Optional[Rng] = None) -> Tensor:
        h = relu(dense(embedding, self._params["fc1.weight"], self._params["fc1.bias"]))
        h = dropout(h, self.config.dropout_p, mode, rng)
        return dense(h, self._params["fc2.weight"], self._params["fc2.bias"])

    def forward(self, x, mode: str, rng: Optional[Rng] = None,
                mixup: Optional[mixup_mod.MixupDraw] = None,
                eps: Optional[np.ndarray] = None) -> ForwardOutput:
        """Full pass; draw order in train mode is eps first, dropout mask second."""
        if mode not in ("train", "eval"):
            raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
        if mixup is not None and mode != "train":
            raise UsageError("mixup draws are a training-time construct; eval forward got one")
        x = self._as_tensor(x)
        nb = self.config.num_blocks
        if mixup is None:
            h = self.encode_blocks(x, 0, nb)
        else:
            k = mixup.block_index
            if not 0 <= k <= nb:
                raise ConfigError(f"mixup block_index {k} out of range for {nb} blocks")
            h = self.encode_blocks(x, 0, k)
            h = mixup_mod.apply_draw(h, mixup)
            h = self.encode_blocks(h, k, nb)
        embedding = self.pool(h)
        if self.config.use_decoder:
            dist = self.latent_head(embedding)
            if mode == "train":
                z = self.reparameterize(dist, rng=rng, eps=eps)
            else:
                z = dist.mu
            recon = self.decode(z)
        else:
            dist, z, recon = None, None, None
        logits = self.classify(embedding, mode=mode, rng=rng)
        return ForwardOutput(logits=logits, probs=softmax(logits, axis=-1),
                             latent=dist, z=z, reconstruction=recon)


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------
#
# Layout (all integers little-endian):
#   bytes 0..7    magic "MVAECKPT"
#   bytes 8..11   u32 format version (currently 1)
#   bytes 12..19  u64 JSON header length in bytes
#   header        UTF-8 JSON: model config, ordered parameter index
#                 (name, shape, offset into payload), epoch, best validation
#                 accuracy, rng state, and the resolved run-config text
#   payload       raw '<f8' row-major parameter values, in index order
#
# The encoding is byte-stable: same model state and metadata give the same
# file, regardless of host endianness.


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: Dict[str, np.ndarray]
    epoch: Optional[int] = None
    best_val_accuracy: Optional[float] = None
    rng_state: Optional[dict] = None
    run_config_text: Optional[str] = None

    def build_model(self) -> VaeClassifier:
        model = VaeClassifier(self.model_config, rng=None)
        model.load_state(self.params)
        return model


def _jsonify_rng_state(state):
    if state is None:
        return None
    state = dict(state)
    bg = dict(state["bit_generator"])
    bg["state"] = {k: str(v) for k, v in bg["state"].items()}
    state["bit_generator"] = bg
    return state


def _unjsonify_rng_state(state):
    if state is None:
        return None
    state = dict(state)
    bg = dict(state["bit_generator"])
    bg["state"] = {k: int(v) for k, v in bg["state"].items()}
    state["bit_generator"] = bg
    return state


def save_checkpoint(path, model: VaeClassifier, *, epoch: Optional[int] = None,
                    best_val_accuracy: Optional[float] = None,
                    rng_state: Optional[dict] = None,
                    run_config_text: Optional[str] = None):
    index = []
    payload = bytearray()
    for name, t in model.parameters():
        index.append({"name": name, "shape": list(t.data.shape), "offset": len(payload)})
        payload += np.ascontiguousarray(t.data, dtype="<f8").tobytes()
    header = {
        "best_val_accuracy": best_val_accuracy,
        "epoch": epoch,
        "model_config": model.config.to_dict(),
        "params": index,
        "rng_state": _jsonify_rng_state(rng_state),
        "run_config": run_config_text,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(bytes(payload))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise ConfigError(f"{path}: not a checkpoint file (bad magic {magic!r})")
        version, = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ConfigError(f"{path}: unsupported checkpoint version {version}")
        header_len, = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        payload = fh.read()
    config = ModelConfig.from_dict(header["model_config"])
    params: Dict[str, np.ndarray] = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=start)
        params[entry["name"]] = arr.reshape(shape).astype(np.float64)
    return Checkpoint(model_config=config, params=params,
                      epoch=header.get("epoch"),
                      best_val_accuracy=header.get("best_val_accuracy"),
                      rng_state=_unjsonify_rng_state(header.get("rng_state")),
                      run_config_text=header.get("run_config"))
