"""Synthetic tasks: labelled feature vectors and short character-sequence problems."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .models import EOS

SEP = 1  # prompt/answer separator in char_reverse


@dataclass
class ClassificationData:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    num_classes: int
    clean_y_train: np.ndarray = None
    family: str = field(default="classifier", init=False)

    @property
    def in_dim(self):
        return self.x_train.shape[1]

    @property
    def n_train(self):
        return len(self.y_train)


@dataclass
class SequenceData:
    """Prompt/target token pairs; every target ends with ``EOS``."""

    train: list
    test: list
    vocab_size: int
    alphabet: str
    offset: int
    family: str = field(default="decoder", init=False)

    @property
    def n_train(self):
        return len(self.train)

    @property
    def max_target_len(self):
        return max(len(t) for _, t in self.train + self.test)

    @property
    def max_total_len(self):
        return max(len(p) + len(t) for p, t in self.train + self.test)

    def decode(self, tokens) -> str:
        chars = []
        for tok in tokens:
            if tok == EOS:
                break
            idx = tok - self.offset
            chars.append(self.alphabet[idx] if 0 <= idx < len(self.alphabet) else "?")
        return "".join(chars)

    def encode(self, text: str) -> list:
        return [self.alphabet.index(c) + self.offset for c in text]


def gaussian_blobs(num_classes=3, dim=20, n_train=500, n_test=500, label_noise=0.2,
                   separation=0.5, seed=0) -> ClassificationData:
    """Isotropic unit-variance clusters around random class centres.

    Training labels are flipped with probability ``label_noise`` to a
    different class chosen uniformly; test labels stay clean.
    """
    if not 0.0 <= label_noise < 1.0:
        raise ConfigError("label_noise must lie in [0, 1)")
    rng = np.random.default_rng([seed, 101])
    centres = rng.normal(0.0, separation, size=(num_classes, dim))

    def draw(n):
        y = rng.integers(0, num_classes, size=n)
        return centres[y] + rng.normal(size=(n, dim)), y

    x_tr, y_tr = draw(n_train)
    x_te, y_te = draw(n_test)
    noisy = y_tr.copy()
    flip = rng.random(n_train) < label_noise
    shift = rng.integers(1, num_classes, size=n_train)
    noisy[flip] = (y_tr[flip] + shift[flip]) % num_classes
    return ClassificationData(x_tr, noisy, x_te, y_te, num_classes, clean_y_train=y_tr)


def xor_grid(n_train=200, n_test=200, seed=0, margin=0.1) -> ClassificationData:
    """Points in the square with label ``(x0 > 0) xor (x1 > 0)``, kept off the axes."""
    rng = np.random.default_rng([seed, 202])

    def draw(n):
        mag = rng.uniform(margin, 1.0, size=(n, 2))
        sign = rng.choice([-1.0, 1.0], size=(n, 2))
        x = mag * sign
        return x, ((x[:, 0] > 0) ^ (x[:, 1] > 0)).astype(np.int64)

    x_tr, y_tr = draw(n_train)
    x_te, y_te = draw(n_test)
    return ClassificationData(x_tr, y_tr, x_te, y_te, 2, clean_y_train=y_tr)


def _unique_draws(rng, n, draw):
    seen, out = set(), []
    attempts = 0
    while len(out) < n:
        item = draw()
        attempts += 1
        if attempts > 100 * n + 1000:
            raise ConfigError(f"cannot draw {n} distinct examples from this task space")
        if item not in seen:
            seen.add(item)
            out.append(item)
    return out


def char_reverse(min_len=4, max_len=8, vocab_size=14, n_train=256, n_test=64, seed=0):
    """Reverse a string. Prompt is ``chars + SEP``, target is ``reversed + EOS``."""
    n_chars = vocab_size - 2
    if n_chars < 2:
        raise ConfigError("char_reverse needs vocab_size >= 4")
    alphabet = "abcdefghijklmnopqrstuvwxyz0123456789"[:n_chars]
    rng = np.random.default_rng([seed, 303])

    def draw():
        length = int(rng.integers(min_len, max_len + 1))
        return "".join(alphabet[i] for i in rng.integers(0, n_chars, size=length))

    strings = _unique_draws(rng, n_train + n_test, draw)
    data = SequenceData([], [], vocab_size, alphabet, offset=2)

    def pair(s):
        return data.encode(s) + [SEP], data.encode(s[::-1]) + [EOS]

    data.train = [pair(s) for s in strings[:n_train]]
    data.test = [pair(s) for s in strings[n_train:]]
    return data


def char_addition(min_digits=1, max_digits=2, n_train=256, n_test=64, seed=0):
    """``a+b=`` prompts answered with the decimal sum; vocabulary ``EOS + = 0-9``."""
    alphabet = "+=0123456789"
    rng = np.random.default_rng([seed, 404])

    def number():
        k = int(rng.integers(min_digits, max_digits + 1))
        lo = 0 if k == 1 else 10 ** (k - 1)
        return int(rng.integers(lo, 10**k))

    pairs = _unique_draws(rng, n_train + n_test, lambda: (number(), number()))
    data = SequenceData([], [], len(alphabet) + 1, alphabet, offset=1)

    def pair(ab):
        a, b = ab
        return data.encode(f"{a}+{b}="), data.encode(str(a + b)) + [EOS]

    data.train = [pair(ab) for ab in pairs[:n_train]]
    data.test = [pair(ab) for ab in pairs[n_train:]]
    return data


TASKS = {
    "gaussian_blobs": "classifier",
    "xor_grid": "classifier",
    "char_reverse": "decoder",
    "char_addition": "decoder",
}


def make_dataset(cfg):
    """Build the dataset named by ``cfg.task`` with the config's task knobs."""
    seed = cfg.seed if cfg.data_seed is None else cfg.data_seed
    if cfg.task == "gaussian_blobs":
        return gaussian_blobs(cfg.num_classes, cfg.dim, cfg.n_train, cfg.n_test,
                              cfg.label_noise, cfg.separation, seed)
    if cfg.task == "xor_grid":
        return xor_grid(cfg.n_train, cfg.n_test, seed)
    if cfg.task == "char_reverse":
        return char_reverse(cfg.min_str_len, cfg.max_str_len, cfg.vocab_size,
                            cfg.n_train, cfg.n_test, seed)
    if cfg.task == "char_addition":
        return char_addition(cfg.min_digits, cfg.max_digits, cfg.n_train, cfg.n_test, seed)
    raise ConfigError(f"unknown task {cfg.task!r}; valid tasks: {', '.join(TASKS)}")
