"""Small classifier and causal decoder built on :mod:`dynsdpb.tensor`."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, StateError
from .tensor import Tensor

EOS = 0  # reserved end-of-sequence id in every vocabulary


class Model:
    """Holds an ordered ``name -> Tensor`` parameter registry.

    Names are ``<layer>.<param>``; everything before the last dot is the
    layer used for gradient-norm tracking.
    """

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def _add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name}")
        p = Tensor(value, requires_grad=True)
        self.params[name] = p
        return p

    def named_parameters(self):
        return list(self.params.items())

    def parameters(self):
        return list(self.params.values())

    def layer_names(self) -> list[str]:
        seen = []
        for name in self.params:
            layer = layer_of(name)
            if layer not in seen:
                seen.append(layer)
        return seen

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        missing = set(self.params) ^ set(state)
        if missing:
            raise KeyError(f"parameter names differ: {sorted(missing)}")
        for k, v in state.items():
            if self.params[k].shape != v.shape:
                raise DimensionError(f"{k}: expected {self.params[k].shape}, got {v.shape}")
            self.params[k].data = np.array(v, dtype=np.float64)

    def __call__(self, inputs):
        return self.forward(inputs)


def layer_of(param_name: str) -> str:
    return param_name.rsplit(".", 1)[0]


# ---------------------------------------------------------------------------
# classifier


class ClassifierModel(Model):
    """MLP with ReLU hidden layers and a linear head.

    With ``vocab_size`` set the input map is an embedding table averaged
    over the token axis instead of a dense layer.
    """

    def __init__(self, in_dim, num_classes, hidden=(128, 128), seed=0,
                 vocab_size=None, zero_head=False, bias=True):
        super().__init__()
        if not hidden:
            raise ValueError("at least one hidden layer is required")
        rng = np.random.default_rng(seed)
        self.in_dim = in_dim
        self.num_classes = num_classes
        self.vocab_size = vocab_size
        self.bias = bias
        self.depth = len(hidden)

        width = in_dim
        if vocab_size is not None:
            self._add("embed.weight", rng.normal(0.0, 1.0, size=(vocab_size, in_dim)))
        for i, h in enumerate(hidden):
            self._add(f"fc{i}.weight", rng.normal(0.0, math.sqrt(2.0 / width), size=(width, h)))
            if bias:
                self._add(f"fc{i}.bias", np.zeros(h))
            width = h
        head = np.zeros((width, num_classes)) if zero_head else rng.normal(
            0.0, math.sqrt(1.0 / width), size=(width, num_classes))
        self._add("head.weight", head)
        if bias:
            self._add("head.bias", np.zeros(num_classes))

    def _linear(self, x, name):
        out = x @ self.params[f"{name}.weight"]
        if self.bias:
            out = out + self.params[f"{name}.bias"]
        return out

    def forward(self, inputs) -> Tensor:
        """Logits ``[n x C]``; no softmax applied."""
        if self.vocab_size is not None:
            idx = np.asarray(inputs, dtype=np.int64)
            if idx.ndim != 2:
                raise DimensionError(f"expected token batch [n x L], got shape {idx.shape}")
            x = T.embedding(self.params["embed.weight"], idx).mean(axis=1)
        else:
            x = inputs if isinstance(inputs, Tensor) else Tensor(inputs)
            if x.ndim != 2 or x.shape[1] != self.in_dim:
                raise DimensionError(
                    f"input width mismatch: model expects [n x {self.in_dim}], got {x.shape}")
        for i in range(self.depth):
            x = T.relu(self._linear(x, f"fc{i}"))
        return self._linear(x, "head")


def classifier_forward(model: ClassifierModel, batch_inputs) -> Tensor:
    return model.forward(batch_inputs)


# ---------------------------------------------------------------------------
# decoder


class DecoderModel(Model):
    """Pre-norm transformer decoder with learned positions and an untied head."""

    def __init__(self, vocab_size, d_model=64, n_heads=4, n_blocks=2, max_len=32,
                 ff_mult=4, seed=0):
        super().__init__()
        if d_model % n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        rng = np.random.default_rng(seed)
        self.vocab_size = vocab_size
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_blocks = n_blocks
        self.max_len = max_len
        d, std = d_model, 0.02
        proj_std = std / math.sqrt(2 * n_blocks)

        self._add("tok_emb.weight", rng.normal(0.0, std, size=(vocab_size, d)))
        self._add("pos_emb.weight", rng.normal(0.0, std, size=(max_len, d)))
        for b in range(n_blocks):
            p = f"block{b}"
            self._add(f"{p}.ln1.gamma", np.ones(d))
            self._add(f"{p}.ln1.beta", np.zeros(d))
            self._add(f"{p}.attn.wqkv", rng.normal(0.0, std, size=(d, 3 * d)))
            self._add(f"{p}.attn.bqkv", np.zeros(3 * d))
            self._add(f"{p}.attn.wo", rng.normal(0.0, proj_std, size=(d, d)))
            self._add(f"{p}.attn.bo", np.zeros(d))
            self._add(f"{p}.ln2.gamma", np.ones(d))
            self._add(f"{p}.ln2.beta", np.zeros(d))
            self._add(f"{p}.mlp.w1", rng.normal(0.0, std, size=(d, ff_mult * d)))
            self._add(f"{p}.mlp.b1", np.zeros(ff_mult * d))
            self._add(f"{p}.mlp.w2", rng.normal(0.0, proj_std, size=(ff_mult * d, d)))
            self._add(f"{p}.mlp.b2", np.zeros(d))
        self._add("ln_f.gamma", np.ones(d))
        self._add("ln_f.beta", np.zeros(d))
        self._add("head.weight", rng.normal(0.0, std, size=(d, vocab_size)))
        self._add("head.bias", np.zeros(vocab_size))

    def _ln(self, x, name):
        return T.layer_norm(x) * self.params[f"{name}.gamma"] + self.params[f"{name}.beta"]

    def _attention(self, x, prefix):
        n, t, d = x.shape
        h, dh = self.n_heads, d // self.n_heads
        P = self.params
        qkv = x @ P[f"{prefix}.wqkv"] + P[f"{prefix}.bqkv"]
        qkv = qkv.reshape(n, t, 3, h, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
        future = np.triu(np.ones((t, t), dtype=bool), k=1)
        weights = T.softmax(T.masked_fill(scores, future, -1e30))
        out = (weights @ v).transpose(0, 2, 1, 3).reshape(n, t, d)
        return out @ P[f"{prefix}.wo"] + P[f"{prefix}.bo"]

    def forward(self, tokens) -> Tensor:
        """Per-position logits ``[n x T x |V|]`` under a causal mask."""
        tok = np.asarray(tokens, dtype=np.int64)
        if tok.ndim == 1:
            tok = tok[None, :]
        n, t = tok.shape
        if t == 0:
            raise ContractError("empty token sequence")
        if t > self.max_len:
            raise DimensionError(f"sequence length {t} exceeds max_len {self.max_len}")
        if tok.min() < 0 or tok.max() >= self.vocab_size:
            raise IndexError(f"token id out of range for vocabulary of {self.vocab_size}")
        P = self.params
        x = T.embedding(P["tok_emb.weight"], tok) + P["pos_emb.weight"][:t]
        for b in range(self.n_blocks):
            p = f"block{b}"
            x = x + self._attention(self._ln(x, f"{p}.ln1"), f"{p}.attn")
            hdn = T.gelu(self._ln(x, f"{p}.ln2") @ P[f"{p}.mlp.w1"] + P[f"{p}.mlp.b1"])
            x = x + hdn @ P[f"{p}.mlp.w2"] + P[f"{p}.mlp.b2"]
        x = self._ln(x, "ln_f")
        return x @ P["head.weight"] + P["head.bias"]


def decoder_forward(model: DecoderModel, token_batch) -> Tensor:
    return model.forward(token_batch)


@dataclass
class GenerationResult:
    tokens: list
    probs: Tensor  # [m x |V|], differentiable while grad is enabled
    termination: str  # "end_token" | "max_len"

    def __len__(self):
        return len(self.tokens)


def generate_batch(model: DecoderModel, prompts, max_new: int) -> list[GenerationResult]:
    """Greedy continuation of several prompts at once.

    Sequences are right-padded; the causal mask keeps each sample's last real
    position independent of padding. Finished samples drop out of the batch.
    """
    prompts = [list(map(int, p)) for p in prompts]
    for p in prompts:
        if not p:
            raise ContractError("empty prompt")
        if len(p) > model.max_len:
            raise DimensionError(f"prompt of length {len(p)} exceeds max_len {model.max_len}")
    n = len(prompts)
    seqs = [list(p) for p in prompts]
    limits = [max(0, min(max_new, model.max_len - len(p))) for p in prompts]
    rows: list[list] = [[] for _ in range(n)]
    reason = ["max_len" if lim == 0 else None for lim in limits]

    while True:
        active = [i for i in range(n) if reason[i] is None]
        if not active:
            break
        width = max(len(seqs[i]) for i in active)
        batch = np.full((len(active), width), EOS, dtype=np.int64)
        for j, i in enumerate(active):
            batch[j, : len(seqs[i])] = seqs[i]
        last = np.array([len(seqs[i]) - 1 for i in active])
        logits = model.forward(batch)[np.arange(len(active)), last]
        probs = T.softmax(logits)
        picks = probs.data.argmax(axis=-1)
        for j, i in enumerate(active):
            tok = int(picks[j])
            rows[i].append(probs[j])
            seqs[i].append(tok)
            if tok == EOS:
                reason[i] = "end_token"
            elif len(rows[i]) >= limits[i]:
                reason[i] = "max_len"

    results = []
    for i in range(n):
        gen = seqs[i][len(prompts[i]):]
        if rows[i]:
            probs = T.stack(rows[i], axis=0)
        else:
            probs = Tensor(np.zeros((0, model.vocab_size)))
        results.append(GenerationResult(gen, probs, reason[i]))
    return results


def generate(model: DecoderModel, prompt_tokens, mode: str = "greedy",
             max_new: int = 16) -> GenerationResult:
    if mode != "greedy":
        raise ValueError(f"unsupported decoding mode {mode!r}")
    return generate_batch(model, [prompt_tokens], max_new)[0]


# ---------------------------------------------------------------------------
# instrumentation and persistence


def parameter_norms(model: Model) -> dict[str, float]:
    """L2 norm of each layer's concatenated parameter gradients."""
    sq: dict[str, float] = {}
    for name, p in model.params.items():
        if p.grad is None:
            raise StateError(f"no gradient for {name}; run backward() first")
        layer = layer_of(name)
        sq[layer] = sq.get(layer, 0.0) + float((p.grad * p.grad).sum())
    return {k: math.sqrt(v) for k, v in sq.items()}


def save_checkpoint(model: Model, path) -> None:
    """Write ``(name, shape, values)`` triples as an uncompressed ``.npz`` archive.

    Each array is stored as float64 under its parameter name, so shapes and
    bit patterns survive a round trip.
    """
    with open(path, "wb") as fh:
        np.savez(fh, **model.state_dict())


def read_checkpoint(path) -> dict[str, np.ndarray]:
    with np.load(path, allow_pickle=False) as archive:
        return {k: archive[k].copy() for k in archive.files}


def load_checkpoint(model: Model, path) -> Model:
    model.load_state_dict(read_checkpoint(path))
    return model
