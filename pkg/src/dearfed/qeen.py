"""Quality-evaluation embedding network for uploaded model parameters.

An auto-encoder that compresses a flat d-dimensional parameter vector to a
short embedding, reconstructs it through one parallel linear head per
original model layer, and predicts a defect-severity mark from the
embedding. Trained jointly on reconstruction and mark-regression MSE.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import seeding
from .params import MAGIC_QEEN, ModelParams, layout_from_shapes, read_params, write_params


class QeenModel:
    """Encoder (d -> hidden -> e_dim), parallel per-layer decoder heads, and
    a two-layer quality head squashed to [0, 1]."""

    def __init__(self, target_layout: tuple, e_dim: int = 64, enc_hidden: int = 256,
                 q_hidden: int = 32, seed: int = 0):
        self.target_layout = tuple(target_layout)
        self.e_dim = e_dim
        self.d = sum(int(np.prod(e.shape)) for e in self.target_layout)
        self.net = ad.Net()
        rng = seeding.stream(seed, seeding.QEEN_INIT)
        add = self.net.add_param
        add("enc.w1", ad.init_params(rng, (self.d, enc_hidden), 1.0 / np.sqrt(self.d)))
        add("enc.b1", np.zeros(enc_hidden))
        add("enc.w2", ad.init_params(rng, (enc_hidden, e_dim), 1.0 / np.sqrt(enc_hidden)))
        add("enc.b2", np.zeros(e_dim))
        for entry in self.target_layout:
            size = int(np.prod(entry.shape))
            add(f"dec.{entry.name}.w", ad.init_params(rng, (e_dim, size), 1.0 / np.sqrt(e_dim)))
            add(f"dec.{entry.name}.b", np.zeros(size))
        add("qe.w1", ad.init_params(rng, (e_dim, q_hidden), 1.0 / np.sqrt(e_dim)))
        add("qe.b1", np.zeros(q_hidden))
        add("qe.w2", ad.init_params(rng, (q_hidden, 1), 1.0 / np.sqrt(q_hidden)))
        add("qe.b2", np.zeros(1))

    # -- graph-building pieces (used for training and, via .data, inference) --

    def _encode_t(self, x: ad.Tensor) -> ad.Tensor:
        p = self.net.params
        h = ad.tanh(ad.matmul(x, p["enc.w1"]) + p["enc.b1"])
        return ad.matmul(h, p["enc.w2"]) + p["enc.b2"]

    def _decode_t(self, e: ad.Tensor) -> ad.Tensor:
        p = self.net.params
        heads = [
            ad.matmul(e, p[f"dec.{entry.name}.w"]) + p[f"dec.{entry.name}.b"]
            for entry in self.target_layout
        ]
        return ad.concatenate(heads, axis=1)

    def _quality_t(self, e: ad.Tensor) -> ad.Tensor:
        p = self.net.params
        h = ad.tanh(ad.matmul(e, p["qe.w1"]) + p["qe.b1"])
        return ad.sigmoid(ad.matmul(h, p["qe.w2"]) + p["qe.b2"])

    # -- inference -------------------------------------------------------------

    def _check_vector(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        if values.shape[-1] != self.d:
            raise ValueError(f"parameter vector of length {values.shape[-1]}, expected {self.d}")
        return values

    def encode(self, w) -> np.ndarray:
        """Embedding of one model (ModelParams or flat vector)."""
        vec = self._check_vector(w.values if isinstance(w, ModelParams) else w)
        return self._encode_t(ad.Tensor(vec[None])).data[0]

    def encode_batch(self, vectors: np.ndarray) -> np.ndarray:
        return self._encode_t(ad.Tensor(self._check_vector(vectors))).data

    def decode(self, e: np.ndarray) -> ModelParams:
        e = np.asarray(e, dtype=np.float64)
        if e.shape != (self.e_dim,):
            raise ValueError(f"embedding shaped {e.shape}, expected ({self.e_dim},)")
        values = self._decode_t(ad.Tensor(e[None])).data[0]
        return ModelParams(values, self.target_layout)

    def quality(self, e: np.ndarray) -> float:
        e = np.asarray(e, dtype=np.float64)
        if e.shape != (self.e_dim,):
            raise ValueError(f"embedding shaped {e.shape}, expected ({self.e_dim},)")
        return float(self._quality_t(ad.Tensor(e[None])).data[0, 0])

    def quality_batch(self, embeddings: np.ndarray) -> np.ndarray:
        return self._quality_t(ad.Tensor(embeddings)).data[:, 0]

    # -- checkpointing -----------------------------------------------------------

    def to_model_params(self) -> ModelParams:
        layout = layout_from_shapes((n, t.data.shape) for n, t in self.net.params.items())
        return ModelParams(self.net.get_vector(), layout)

    def save(self, path) -> None:
        write_params(path, self.to_model_params(), magic=MAGIC_QEEN)

    @classmethod
    def load(cls, path, target_layout: tuple) -> "QeenModel":
        container = read_params(path, magic=MAGIC_QEEN)
        dims = {e.name: e.shape for e in container.layout}
        model = cls(
            target_layout,
            e_dim=dims["enc.w2"][1],
            enc_hidden=dims["enc.w1"][1],
            q_hidden=dims["qe.w1"][1],
        )
        if model.net.num_params != container.d:
            raise ValueError("checkpoint does not match the target model structure")
        model.net.set_vector(container.values)
        return model


def train_qeen(qeen: QeenModel, corpus, lam1: float = 0.5, lam2: float = 0.5,
               epochs: int = 50, lr: float = 1e-3, batch_size: int = 32,
               seed: int = 0, clip_norm: float = 5.0) -> list:
    """Joint gradient descent on lam1 * reconstruction + lam2 * mark MSE.

    `corpus` is a list of (ModelParams-or-vector, DefectMark-or-float). Returns
    the per-epoch [(recon_mse, mark_mse, joint)] history.
    """
    if not corpus:
        raise ValueError("corpus is empty")
    if lam1 < 0 or lam2 < 0:
        raise ValueError("loss weights must be nonnegative")
    vectors = np.stack([
        np.asarray(w.values if isinstance(w, ModelParams) else w, dtype=np.float64)
        for w, _ in corpus
    ])
    marks = np.array([
        float(m.value if hasattr(m, "value") else m) for _, m in corpus
    ])[:, None]
    qeen._check_vector(vectors)

    rng = seeding.stream(seed, seeding.QEEN_TRAIN)
    adam = ad.AdamState.for_size(qeen.net.num_params, lr)
    history = []
    for _ in range(epochs):
        order = rng.permutation(len(corpus))
        sums, count = np.zeros(3), 0
        for lo in range(0, len(order), batch_size):
            idx = order[lo:lo + batch_size]
            x = ad.Tensor(vectors[idx])
            qeen.net.zero_grad()
            e = qeen._encode_t(x)
            l1 = ad.squared_error(qeen._decode_t(e), x)
            l2 = ad.squared_error(qeen._quality_t(e), ad.Tensor(marks[idx]))
            joint = lam1 * l1 + lam2 * l2
            joint.backward()
            grads = ad.clip_global_norm(qeen.net.grad_vector(), clip_norm)
            vec = qeen.net.get_vector()
            ad.adam_step(adam, vec, grads)
            qeen.net.set_vector(vec)
            sums += len(idx) * np.array([l1.item(), l2.item(), joint.item()])
            count += len(idx)
        history.append(tuple(sums / count))
    return history


def normalize_marks(quality_marks) -> np.ndarray:
    """Project predicted severities onto the simplex by inverted goodness.

    g_i = 1 - mark_i, normalized to sum to one; all-zero goodness falls back
    to uniform weights.
    """
    marks = np.clip(np.asarray(quality_marks, dtype=np.float64), 0.0, 1.0)
    if marks.ndim != 1 or marks.size < 1:
        raise ValueError("need a non-empty 1-d mark vector")
    goodness = 1.0 - marks
    total = goodness.sum()
    if total <= 0.0:
        return np.full(marks.size, 1.0 / marks.size)
    return goodness / total
