"""CNN frame encoder, two-layer BiLSTM, sigmoid head and the ablation baselines.

All four model kinds share one interface: ``logits(inputs, index)`` where
``index`` is a B×T matrix of rows into a table of frames (or normalized
feature vectors for the raw baseline). Frames referenced several times in a
batch are encoded once and gathered.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

KINDS = ("cnn_lstm", "cnn_only", "cnn_mlp", "raw_lstm")
LABELS = {"cnn_lstm": "CNN+LSTM", "cnn_only": "CNN-only", "cnn_mlp": "CNN+MLP", "raw_lstm": "raw-LSTM"}


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "cnn_lstm"
    filters: tuple[int, ...] = (8, 16, 32, 64)
    pool: tuple[bool, ...] = (True, True, True, False)
    embedding_dim: int = 64
    hidden_size: int = 128
    layers: int = 2
    mlp_hidden: int = 128
    dropout: float = 0.0
    image_size: int = 32
    T: int = 50
    n_features: int = 14
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; choose from {KINDS}")
        if len(self.filters) != len(self.pool) or not self.filters:
            raise ValueError("filters and pool need one entry per conv block")
        if self.embedding_dim != self.filters[-1]:
            raise ValueError(f"embedding_dim {self.embedding_dim} must equal the last block's filters {self.filters[-1]}")
        if self.image_size % (2 ** sum(self.pool)):
            raise ValueError("image size must be divisible by the total pooling factor")
        if self.layers < 1 or self.hidden_size < 1 or not 0 <= self.dropout < 1:
            raise ValueError("invalid recurrent settings")

    @property
    def uses_frames(self) -> bool:
        return self.kind != "raw_lstm"

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


# ---------------------------------------------------------------- config file

def _parse(value: str, like):
    if isinstance(like, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(like, tuple):
        items = [v.strip() for v in value.split(",") if v.strip()]
        if like and isinstance(like[0], bool):
            return tuple(v.lower() in ("1", "true", "yes", "on") for v in items)
        return tuple(int(v) for v in items)
    return type(like)(value)


def _format(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(str(v).lower() if isinstance(v, bool) else str(v) for v in value)
    if isinstance(value, bool):
        return str(value).lower()
    return str(value)


def config_to_section(cfg, parser: configparser.ConfigParser, section: str) -> None:
    parser[section] = {f.name: _format(getattr(cfg, f.name)) for f in fields(cfg)}


def config_from_section(cls, parser: configparser.ConfigParser, section: str, **overrides):
    defaults = cls()
    kw = {}
    if parser.has_section(section):
        known = {f.name.lower(): f.name for f in fields(cls)}    # configparser lowercases keys
        for key, value in parser[section].items():
            if key.lower() not in known:
                raise ValueError(f"[{section}] unknown key {key!r}")
            name = known[key.lower()]
            kw[name] = _parse(value, getattr(defaults, name))
    kw.update(overrides)
    return cls(**kw)


def save_model_config(path, cfg: ModelConfig) -> None:
    parser = configparser.ConfigParser()
    config_to_section(cfg, parser, "model")
    with open(path, "w", encoding="utf-8") as fh:
        parser.write(fh)


def load_model_config(path) -> ModelConfig:
    parser = configparser.ConfigParser()
    if not parser.read(path, encoding="utf-8"):
        raise FileNotFoundError(path)
    return config_from_section(ModelConfig, parser, "model")


# ---------------------------------------------------------------- model

def _uniform(rng, shape, bound, dtype):
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class RadarSeqModel:
    """One of the four architectures, with parameters stored in ``self.params``."""

    def __init__(self, config: ModelConfig | None = None, **kw):
        self.config = cfg = config if config is not None else ModelConfig(**kw)
        dt = cfg.np_dtype
        rng = np.random.default_rng([cfg.seed, KINDS.index(cfg.kind)])
        p: dict[str, Tensor] = {}

        def param(name, arr):
            p[name] = Tensor(arr, requires_grad=True, dtype=dt, name=name)

        if cfg.uses_frames:
            c_in = 1
            for i, f in enumerate(cfg.filters):
                fan_in = c_in * 9
                param(f"cnn.{i}.w", _uniform(rng, (f, c_in, 3, 3), np.sqrt(6.0 / fan_in), dt))
                param(f"cnn.{i}.b", np.zeros(f, dt))
                c_in = f
        if cfg.kind in ("cnn_lstm", "raw_lstm"):
            h = cfg.hidden_size
            bound = 1.0 / np.sqrt(h)
            bias = np.zeros(4 * h, dt)
            bias[h:2 * h] = 1.0                       # forget gate
            inp = cfg.embedding_dim if cfg.kind == "cnn_lstm" else cfg.n_features
            for layer in range(cfg.layers):
                for d in ("fwd", "bwd"):
                    param(f"lstm.{layer}.{d}.w_ih", _uniform(rng, (inp, 4 * h), bound, dt))
                    param(f"lstm.{layer}.{d}.w_hh", _uniform(rng, (h, 4 * h), bound, dt))
                    param(f"lstm.{layer}.{d}.b", bias.copy())
                inp = 2 * h
            head_in = 2 * h
        elif cfg.kind == "cnn_mlp":
            m = cfg.mlp_hidden
            param("mlp.w", _uniform(rng, (cfg.embedding_dim, m), np.sqrt(6.0 / cfg.embedding_dim), dt))
            param("mlp.b", np.zeros(m, dt))
            head_in = m
        else:
            head_in = cfg.embedding_dim
        param("head.w", _uniform(rng, (head_in, 1), 1.0 / np.sqrt(head_in), dt))
        param("head.b", np.zeros(1, dt))
        self.params = p
        self.training = False
        self._dropout_rng = np.random.default_rng([cfg.seed, 99])

    # -- state ----------------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state) -> None:
        missing = set(self.params) ^ set(state)
        if missing:
            raise KeyError(f"parameter mismatch: {sorted(missing)}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ValueError(f"{k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data = np.asarray(v, dtype=self.config.np_dtype).copy()

    def n_parameters(self) -> int:
        return sum(v.size for v in self.params.values())

    # -- pieces ---------------------------------------------------------------
    def cnn(self, images) -> tuple[Tensor, Tensor]:
        """(N, H, W) images -> (last-block activation N×h×w×F, embedding N×p)."""
        cfg = self.config
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, cfg.np_dtype))
        if x.ndim != 3 or x.shape[1:] != (cfg.image_size, cfg.image_size):
            raise ValueError(f"expected (N, {cfg.image_size}, {cfg.image_size}) images, got {x.shape}")
        x = x.reshape(x.shape[0], cfg.image_size, cfg.image_size, 1)
        act = x
        for i, pool in enumerate(cfg.pool):
            act = ad.relu(ad.conv2d(act, self.params[f"cnn.{i}.w"], self.params[f"cnn.{i}.b"],
                                    padding=1, layout="NHWC"))
            last = act
            if pool:
                act = ad.max_pool2d(act, layout="NHWC")
        z = ad.mean(act, axis=(1, 2))
        return last, z

    def encode_frame(self, image) -> np.ndarray:
        with ad.no_grad():
            return self.cnn(np.asarray(image)[None])[1].data[0]

    def _dropout(self, x: Tensor) -> Tensor:
        rate = self.config.dropout
        if not self.training or rate == 0:
            return x
        keep = (self._dropout_rng.random(x.shape) >= rate) / (1 - rate)
        return ad.mul(x, Tensor(keep.astype(x.dtype)))

    def bilstm(self, seq: Tensor) -> Tensor:
        """B×T×I -> h_c = [top forward state at step T ‖ top backward state at step 1]."""
        cfg = self.config
        if seq.ndim != 3 or seq.shape[1] != cfg.T:
            raise ValueError(f"expected sequences of length {cfg.T}, got shape {seq.shape}")
        x = seq
        for layer in range(cfg.layers):
            if layer:
                x = self._dropout(x)
            f = ad.lstm_sequence(x, *(self.params[f"lstm.{layer}.fwd.{k}"] for k in ("w_ih", "w_hh", "b")))
            b = ad.lstm_sequence(x, *(self.params[f"lstm.{layer}.bwd.{k}"] for k in ("w_ih", "w_hh", "b")),
                                 reverse=True)
            x = ad.concat([f, b], axis=2)
        return ad.concat([f[:, cfg.T - 1, :], b[:, 0, :]], axis=1)

    def head(self, h: Tensor) -> Tensor:
        return ad.dense(h, self.params["head.w"], self.params["head.b"]).reshape(-1)

    # -- full forward -----------------------------------------------------------
    def representation(self, table, index) -> tuple[Tensor, dict]:
        """Sequence representation fed to the head, plus intermediates for explanation."""
        cfg = self.config
        index = np.asarray(index)
        if index.ndim != 2 or index.shape[1] != cfg.T:
            raise ValueError(f"index must be B×{cfg.T}, got {index.shape}")
        extra = {}
        if cfg.kind == "raw_lstm":
            feats = table if isinstance(table, Tensor) else Tensor(np.asarray(table, cfg.np_dtype))
            return self.bilstm(ad.take_rows(feats, index)), extra
        used = index[:, -1:] if cfg.kind == "cnn_only" else index
        uniq, inv = np.unique(used, return_inverse=True)
        frames = table[uniq] if isinstance(table, Tensor) else np.asarray(table)[uniq]
        act, z = self.cnn(frames)
        extra.update(frame_rows=uniq, activation=act, embeddings=z)
        seq = ad.take_rows(z, inv.reshape(used.shape))
        if cfg.kind == "cnn_only":
            return seq.reshape(len(index), cfg.embedding_dim), extra
        if cfg.kind == "cnn_mlp":
            pooled = ad.mean(seq, axis=1)
            return ad.relu(ad.dense(pooled, self.params["mlp.w"], self.params["mlp.b"])), extra
        return self.bilstm(seq), extra

    def logits(self, table, index) -> Tensor:
        return self.head(self.representation(table, index)[0])

    def probabilities(self, table, index) -> Tensor:
        return ad.sigmoid(self.logits(table, index))

    def input_table(self, dataset):
        return dataset.frames if self.config.uses_frames else dataset.features

    def predict_proba(self, dataset, batch_size: int = 256) -> np.ndarray:
        """Churn probabilities for every window of a SequenceDataset (inference mode)."""
        table = self.input_table(dataset)
        out = np.empty(len(dataset), dtype=np.float64)
        was = self.training
        self.training = False
        try:
            with ad.no_grad():
                for i in range(0, len(dataset), batch_size):
                    out[i:i + batch_size] = self.probabilities(table, dataset.index[i:i + batch_size]).data
        finally:
            self.training = was
        return out

    def embed(self, dataset, batch_size: int = 256) -> np.ndarray:
        """h_c (or the baseline's head input) for every window."""
        table = self.input_table(dataset)
        chunks = []
        with ad.no_grad():
            for i in range(0, len(dataset), batch_size):
                chunks.append(self.representation(table, dataset.index[i:i + batch_size])[0].data)
        return np.concatenate(chunks, axis=0).astype(np.float64)

    def predict(self, sequence) -> float:
        """Probability for a single WindowedSequence."""
        T = self.config.T
        if self.config.uses_frames:
            table = np.asarray(sequence.images)
        else:
            raise TypeError("raw_lstm needs feature vectors; use predict_proba on a dataset")
        with ad.no_grad():
            return float(self.probabilities(table, np.arange(T)[None])[0].data)


def build_model(kind: str = "cnn_lstm", **kw) -> RadarSeqModel:
    return RadarSeqModel(ModelConfig(kind=kind, **kw))
