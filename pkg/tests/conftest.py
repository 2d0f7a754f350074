import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402
from hypothesis import HealthCheck, settings  # noqa: E402

from univl.model import ModelConfig, ModelParameters  # noqa: E402

settings.register_profile("univl", max_examples=100, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("univl")

TINY = dict(
    vocab_size=16,
    hidden=8,
    video_feature_dim=4,
    max_text_len=8,
    max_video_len=8,
    text_layers=1,
    video_layers=1,
    cross_layers=1,
    decoder_layers=1,
    heads=2,
    ffn_size=16,
    dropout=0.0,
    max_gen_len=8,
    num_frame_labels=4,
)


def tiny_config(**overrides) -> ModelConfig:
    return ModelConfig(**{**TINY, **overrides})


def tiny_params(seed: int = 0, **overrides) -> ModelParameters:
    return ModelParameters.init(tiny_config(**overrides), seed)


def scramble(params: ModelParameters, seed: int = 1, std: float = 0.5) -> ModelParameters:
    """Replace the tiny N(0, 0.02) init with larger random values so gradients are well scaled."""
    rng = np.random.default_rng(seed)
    for name, t in params.items():
        if name.endswith("gamma"):
            t.data[...] = 1.0 + 0.2 * rng.standard_normal(t.shape)
        else:
            t.data[...] = std * rng.standard_normal(t.shape)
    return params


def tiny_batch(rng: np.random.Generator, B: int = 3, vocab: int = 16, d_f: int = 4):
    """Token rows framed as CLS ... SEP with ragged lengths, plus ragged frame matrices."""
    from univl.data import ClipTextPair, collate

    pairs = []
    for b in range(B):
        n = int(rng.integers(2, 5))
        m = int(rng.integers(2, 5))
        toks = [1] + [int(t) for t in rng.integers(6, vocab, size=n)] + [2]
        pairs.append(ClipTextPair(f"v{b // 2}", b % 2, toks, rng.standard_normal((m, d_f))))
    return collate(pairs)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def sampled_gradcheck(fn, named_inputs, per_tensor=6, seed=0, h=1e-5):
    """Finite-difference check on the largest-|grad| and random coordinates of every tensor.

    Returns ``(worst_error, worst_name)``; the error per tensor is normwise over the sampled
    coordinates, matching ``univl.tensor.max_relative_error``.
    """
    from univl.tensor import max_relative_error, numeric_gradient

    named_inputs = list(named_inputs)
    rng = np.random.default_rng(seed)
    for _, t in named_inputs:
        t.grad = None
    fn().backward()
    worst, worst_name = 0.0, None
    for name, t in named_inputs:
        analytic = np.zeros(t.data.size) if t.grad is None else t.grad.reshape(-1)
        k = min(per_tensor, t.data.size)
        top = np.argsort(-np.abs(analytic), kind="stable")[: k // 2]
        rand = rng.choice(t.data.size, size=k - len(top), replace=False)
        coords = sorted(set(top.tolist()) | set(rand.tolist()))
        err = max_relative_error(analytic[coords], numeric_gradient(fn, t, h, coords))
        if err > worst:
            worst, worst_name = err, name
    return worst, worst_name


def tiny_corpus(seed: int = 0, **overrides):
    """A corpus whose vocabulary (16 ids) and caps fit the TINY model."""
    from univl.data import CorpusSpec, generate_corpus

    spec = dict(
        num_videos=2, val_videos=1, clips_per_video=3, concepts_per_clip=(1, 2), tokens_per_clip=(2, 4),
        frames_per_clip=(3, 6), num_concepts=4, num_function_words=3, feature_dim=4,
        max_text_len=8, max_video_len=8, seed=seed,
    )
    spec.update(overrides)
    return generate_corpus(CorpusSpec(**spec))
