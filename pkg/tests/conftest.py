"""Shared fixtures and the finite-difference gradient oracle."""

import numpy as np
import pytest

from ctrank import tensor as T
from ctrank.cascade import CascadeConfig, CascadeModel
from ctrank.encoder import EncoderConfig


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def tiny_encoder_config(**overrides) -> EncoderConfig:
    defaults = dict(n_layers=12, d_model=16, n_heads=2, d_ff=32,
                    max_seq_len=32, vocab_size=96, dropout_rate=0.1)
    defaults.update(overrides)
    return EncoderConfig(**defaults)


def tiny_model(seed=0, dtype=np.float32, **enc_overrides) -> CascadeModel:
    return CascadeModel(tiny_encoder_config(**enc_overrides), CascadeConfig(),
                        seed=seed, dtype=dtype)


def rand_tensor(rng, shape, dtype=np.float64, requires_grad=True, scale=1.0):
    return T.Tensor(rng.normal(0.0, scale, shape).astype(dtype),
                    requires_grad=requires_grad)


def check_gradients(build_loss, params, h=1e-5, rtol=1e-4, atol=1e-6,
                    samples=None, rng=None):
    """Compare tape gradients with central finite differences.

    build_loss() must deterministically rebuild the scalar loss from the
    current parameter values.  With `samples` set, only that many entries
    per tensor are probed (seeded by `rng`).
    """
    with T.Tape() as tape:
        loss = build_loss()
    tape.backward(loss)
    analytic = [None if p.grad is None else p.grad.copy() for p in params]

    for p, grad in zip(params, analytic):
        assert grad is not None, "parameter never received a gradient"
        flat = p.data.reshape(-1)
        if samples is not None and flat.size > samples:
            idxs = rng.choice(flat.size, size=samples, replace=False)
        else:
            idxs = range(flat.size)
        for i in idxs:
            original = flat[i]
            flat[i] = original + h
            up = build_loss().item()
            flat[i] = original - h
            down = build_loss().item()
            flat[i] = original
            fd = (up - down) / (2.0 * h)
            a = grad.reshape(-1)[i]
            assert abs(a - fd) <= atol + rtol * max(abs(a), abs(fd)), (
                f"gradient mismatch at flat index {i}: analytic {a}, "
                f"finite difference {fd}"
            )
