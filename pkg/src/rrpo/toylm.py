"""A tiny causal language model over a symbolic vocabulary.

Architecture: token + position embedding, ``depth`` pre-norm blocks of
single-head causal self-attention and a tanh feed-forward layer, a final
RMS norm and an output projection tied to the token embedding (plus a
per-token output bias).
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, FormatError, LengthError, VocabularyError
from .losses import TokenLogProbs

PAD, MASK, BOS, EOS = 0, 1, 2, 3
N_RESERVED = 4

_NEG = -1e9
_RMS_EPS = 1e-6


@dataclass(frozen=True)
class ToyModelConfig:
    vocab_size: int = 64
    embed_dim: int = 32
    context_len: int = 96
    depth: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < N_RESERVED:
            raise ConfigurationError("vocab_size must be >= 4 (pad, mask, bos, eos)")
        if self.embed_dim < 1 or self.context_len < 2 or self.depth < 1:
            raise ConfigurationError(f"invalid model config {self}")

    @property
    def ff_dim(self):
        return 4 * self.embed_dim


def _param_shapes(cfg):
    d, v, c, f = cfg.embed_dim, cfg.vocab_size, cfg.context_len, cfg.ff_dim
    shapes = {"tok_emb": (v, d), "pos_emb": (c, d)}
    for i in range(cfg.depth):
        shapes.update({
            f"b{i}.norm1": (d,),
            f"b{i}.wq": (d, d),
            f"b{i}.wk": (d, d),
            f"b{i}.wv": (d, d),
            f"b{i}.wo": (d, d),
            f"b{i}.norm2": (d,),
            f"b{i}.w1": (d, f),
            f"b{i}.b1": (f,),
            f"b{i}.w2": (f, d),
            f"b{i}.b2": (d,),
        })
    shapes["norm_f"] = (d,)
    shapes["out_bias"] = (v,)
    return shapes


def _init_params(cfg):
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in _param_shapes(cfg).items():
        leaf = name.split(".")[-1]
        if leaf.startswith("norm"):
            params[name] = np.ones(shape)
        elif leaf.startswith("b") or name == "out_bias":
            params[name] = np.zeros(shape)
        elif name in ("tok_emb", "pos_emb"):
            params[name] = rng.normal(0.0, 0.3, shape)
        else:
            params[name] = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), shape)
    # residual branches start small
    for i in range(cfg.depth):
        params[f"b{i}.wo"] *= 0.5
        params[f"b{i}.w2"] *= 0.5
    return params


def _rms_norm(x, gain):
    inv = ad.power(ad.mean(x * x, axis=-1, keepdims=True) + _RMS_EPS, -0.5)
    return x * inv * gain


class ToyLM:
    """Trainable causal LM. Parameters live in ``self.params`` as leaves."""

    trainable = True

    def __init__(self, config=None, params=None):
        self.config = config or ToyModelConfig()
        arrays = _init_params(self.config) if params is None else params
        shapes = _param_shapes(self.config)
        if set(arrays) != set(shapes):
            raise ConfigurationError("parameter names do not match the config")
        self.params = {}
        for name, shape in shapes.items():
            a = np.array(arrays[name], dtype=np.float64)
            if a.shape != shape:
                raise ConfigurationError(f"{name}: expected {shape}, got {a.shape}")
            self.params[name] = self._wrap(a)

    def _wrap(self, a):
        return Tensor(a, requires_grad=True)

    # ------------------------------------------------------------ params
    @property
    def n_params(self):
        return sum(p.size for p in self.params.values())

    def get_flat(self):
        return np.concatenate([p.data.ravel() for p in self.params.values()])

    def set_flat(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.n_params:
            raise ConfigurationError("flat parameter vector has the wrong size")
        i = 0
        for p in self.params.values():
            p.data[...] = flat[i:i + p.size].reshape(p.shape)
            i += p.size

    def grad_flat(self):
        return np.concatenate([
            (p.grad if p.grad is not None else np.zeros_like(p.data)).ravel()
            for p in self.params.values()
        ])

    def copy(self):
        return ToyLM(self.config, {k: v.data.copy() for k, v in self.params.items()})

    # ----------------------------------------------------------- forward
    def check_tokens(self, tokens):
        tokens = np.asarray(tokens)
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.config.vocab_size):
            raise VocabularyError(
                f"token outside vocabulary [0, {self.config.vocab_size})")

    def forward(self, ids):
        """Logits of shape (B, T, V) for an integer id array of shape (B, T)."""
        ids = np.atleast_2d(np.asarray(ids, dtype=np.intp))
        _, t = ids.shape
        if t > self.config.context_len:
            raise LengthError(f"sequence of {t} tokens exceeds context_len "
                              f"{self.config.context_len}")
        self.check_tokens(ids)
        p = self.params
        d = self.config.embed_dim
        x = p["tok_emb"][ids] + p["pos_emb"][:t]
        causal = np.triu(np.full((t, t), _NEG), k=1)
        scale = 1.0 / np.sqrt(d)
        for i in range(self.config.depth):
            h = _rms_norm(x, p[f"b{i}.norm1"])
            q = h @ p[f"b{i}.wq"]
            k = h @ p[f"b{i}.wk"]
            v = h @ p[f"b{i}.wv"]
            att = ad.softmax((q @ ad.swapaxes(k, -1, -2)) * scale + causal, axis=-1)
            x = x + (att @ v) @ p[f"b{i}.wo"]
            h = _rms_norm(x, p[f"b{i}.norm2"])
            x = x + ad.tanh(h @ p[f"b{i}.w1"] + p[f"b{i}.b1"]) @ p[f"b{i}.w2"] + p[f"b{i}.b2"]
        x = _rms_norm(x, p["norm_f"])
        return x @ ad.transpose(p["tok_emb"]) + p["out_bias"]

    def __eq__(self, other):
        if not isinstance(other, ToyLM) or other.config != self.config:
            return NotImplemented
        return all(np.array_equal(self.params[k].data, other.params[k].data)
                   for k in self.params)

    __hash__ = object.__hash__


class PolicySnapshot(ToyLM):
    """Immutable by-value copy of a model's parameters (the frozen reference)."""

    trainable = False

    def _wrap(self, a):
        a.flags.writeable = False
        return Tensor._node(a, (), None, "const")

    def set_flat(self, flat):
        raise TypeError("PolicySnapshot is immutable")


def snapshot(model):
    """Freeze the current parameter values of ``model``."""
    return PolicySnapshot(model.config, {k: v.data.copy() for k, v in model.params.items()})


# -------------------------------------------------------------- log-probs


def _encode(model, prompt, response):
    prompt = [int(t) for t in prompt]
    response = [int(t) for t in response]
    if not prompt:
        raise LengthError("prompt must contain at least one token")
    if len(prompt) + len(response) > model.config.context_len:
        raise LengthError(
            f"prompt+response of {len(prompt) + len(response)} tokens exceeds "
            f"context_len {model.config.context_len}")
    model.check_tokens(prompt + response)
    return prompt, response


def batch_logprobs(model, items, side=None):
    """Score many (prompt, response) pairs in one padded forward pass.

    Right padding is harmless under causal attention. Returns one
    :class:`TokenLogProbs` per item; fields are graph Tensors when the model
    is trainable and plain arrays for a snapshot.
    """
    enc = [_encode(model, p, r) for p, r in items]
    t = max(len(p) + len(r) for p, r in enc)
    ids = np.full((len(enc), t), PAD, dtype=np.intp)
    for b, (p, r) in enumerate(enc):
        ids[b, :len(p) + len(r)] = p + r
    logp = ad.log_softmax(model.forward(ids), axis=-1)
    # next-token targets; the last column is never read
    targets = np.concatenate([ids[:, 1:], np.zeros((len(enc), 1), dtype=np.intp)], axis=1)
    realized_all = ad.gather(logp, targets[:, :, None])
    source = "policy" if model.trainable else "reference"
    out = []
    for b, (p, r) in enumerate(enc):
        lo, hi = len(p) - 1, len(p) - 1 + len(r)
        realized = realized_all[b, lo:hi, 0]
        full = logp[b, lo:hi]
        if not model.trainable:
            realized, full = realized.data, full.data
        out.append(TokenLogProbs(realized, full, side=side, source=source,
                                 tokens=np.asarray(r, dtype=np.intp)))
    return out


def logprobs(model, prompt, response, side=None):
    """Per-position realized log-probs and full log-distributions of ``response``."""
    return batch_logprobs(model, [(prompt, response)], side=side)[0]


def greedy_decode(model, prompt, max_len):
    """Argmax decoding; ties go to the lowest token id. Stops after EOS."""
    prompt = [int(t) for t in prompt]
    _encode(model, prompt, [])
    out = []
    limit = min(max_len, model.config.context_len - len(prompt))
    for _ in range(limit):
        logits = model.forward(np.asarray([prompt + out])).data[0, -1]
        tok = int(np.argmax(logits))
        out.append(tok)
        if tok == EOS:
            break
    return out


# ------------------------------------------------------------ serialization

_MAGIC = b"RRPOTLM\x00"
_VERSION = 1
_HEADER = struct.Struct("<8sI5qQ")


def weights_to_bytes(model):
    c = model.config
    flat = model.get_flat()
    head = _HEADER.pack(_MAGIC, _VERSION, c.vocab_size, c.embed_dim, c.context_len,
                        c.depth, c.seed, flat.size)
    return head + flat.astype("<f8").tobytes()


def weights_from_bytes(buf, cls=ToyLM):
    if len(buf) < _HEADER.size:
        raise FormatError("weights file truncated")
    magic, version, v, d, c, depth, seed, n = _HEADER.unpack_from(buf)
    if magic != _MAGIC:
        raise FormatError("not a toy-model weights file (bad magic)")
    if version != _VERSION:
        raise FormatError(f"unsupported weights version {version}")
    cfg = ToyModelConfig(vocab_size=v, embed_dim=d, context_len=c, depth=depth, seed=seed)
    flat = np.frombuffer(buf, dtype="<f8", offset=_HEADER.size)
    if flat.size != n:
        raise FormatError(f"expected {n} parameters, found {flat.size}")
    model = ToyLM(cfg)
    model.set_flat(flat)
    if cls is PolicySnapshot:
        return snapshot(model)
    return model


def save_weights(model, path):
    with open(path, "wb") as fh:
        fh.write(weights_to_bytes(model))


def load_weights(path, cls=ToyLM):
    with open(path, "rb") as fh:
        return weights_from_bytes(fh.read(), cls=cls)


def config_dict(model):
    return asdict(model.config)
