"""Text encoders mapping rendered concept interpretations to fixed-width vectors.

Two backends behind one interface:

* `hash`: deterministic bag of hashed tokens. Each token seeds a PCG64
  stream from a stable blake2b digest of its bytes and draws a Gaussian
  vector; the text vector is the L2-normalized sum. No corpus, no network,
  identical across processes and platforms. The space is deliberately left
  anisotropic (no centering or whitening) so the graph adapter has
  something to fix.
* `lm`: a frozen pretrained transformer encoder, pooled at the leading
  token position. Heavier and only available where the weights are.
"""

from __future__ import annotations

import hashlib
import logging
import re

import numpy as np

logger = logging.getLogger(__name__)

HASH_DIM = 384
_TOKEN_RE = re.compile(r"[a-z0-9]+")


class EncoderError(RuntimeError):
    """Backend unavailable or input not encodable."""


def tokenize(text) -> list[str]:
    """Lowercase alphanumeric runs; punctuation and whitespace separate."""
    return _TOKEN_RE.findall(text.lower())


def _token_vector(token, dim) -> np.ndarray:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    seed = int.from_bytes(digest, "little")
    return np.random.default_rng(seed).standard_normal(dim)


class HashTextEncoder:
    def __init__(self, dim=HASH_DIM):
        if dim < 1:
            raise ValueError(f"dim must be positive, got {dim}")
        self.dim = dim
        self._cache: dict[str, np.ndarray] = {}

    def encode(self, texts) -> np.ndarray:
        out = np.zeros((len(texts), self.dim), dtype=np.float64)
        for i, text in enumerate(texts):
            tokens = tokenize(text)
            if not tokens:
                raise EncoderError(f"text {i} has no tokens: {text!r}")
            vec = np.zeros(self.dim, dtype=np.float64)
            for tok in tokens:
                cached = self._cache.get(tok)
                if cached is None:
                    cached = self._cache[tok] = _token_vector(tok, self.dim)
                vec += cached
            norm = float(np.linalg.norm(vec))
            if norm == 0.0:
                raise EncoderError(f"text {i} encoded to the zero vector: {text!r}")
            out[i] = vec / norm
        return out.astype(np.float32)


class LmTextEncoder:
    """Frozen pretrained encoder; vector = hidden state at position 0.

    Requires the `transformers` package and locally available weights. The
    model never trains here; adaptation happens downstream in the graph
    adapter.
    """

    def __init__(self, model_name="bert-base-uncased", max_length=256):
        try:
            import torch
            from transformers import AutoModel, AutoTokenizer
        except ImportError as exc:
            raise EncoderError(
                "lm backend needs the transformers package; use the hash backend instead"
            ) from exc
        try:
            self._tokenizer = AutoTokenizer.from_pretrained(model_name)
            self._model = AutoModel.from_pretrained(model_name)
        except Exception as exc:
            raise EncoderError(f"could not load pretrained model {model_name!r}: {exc}") from exc
        self._model.eval()
        for p in self._model.parameters():
            p.requires_grad_(False)
        self._torch = torch
        self.max_length = max_length
        self.dim = int(self._model.config.hidden_size)

    def encode(self, texts) -> np.ndarray:
        torch = self._torch
        rows = []
        with torch.no_grad():
            for text in texts:
                if not text.strip():
                    raise EncoderError(f"empty text: {text!r}")
                enc = self._tokenizer(
                    text, truncation=True, max_length=self.max_length, return_tensors="pt"
                )
                hidden = self._model(**enc).last_hidden_state
                rows.append(hidden[0, 0].numpy())
        return np.stack(rows).astype(np.float32)


def make_encoder(backend, **kwargs):
    if backend == "hash":
        return HashTextEncoder(**kwargs)
    if backend == "lm":
        return LmTextEncoder(**kwargs)
    raise EncoderError(f"unknown encoder backend {backend!r}")


def encode_texts(texts, names, encoder):
    """Encode one text per concept with a name fallback for blank entries.

    `texts` and `names` map concept id to string. Returns (ids, matrix) in
    ascending id order. A text with no encodable tokens falls back to the
    concept's name (with a warning) so one broken explanation cannot sink a
    run; a nameless, textless concept is still an error.
    """
    if set(texts) != set(names):
        raise EncoderError("texts and names cover different concept id sets")
    ids = np.array(sorted(texts), dtype=np.int64)
    batch = []
    for k in ids.tolist():
        text = texts[k]
        if not tokenize(text):
            logger.warning(
                "concept %d text %r has no tokens; encoding the name alone", k, text
            )
            text = names[k]
            if not tokenize(text):
                raise EncoderError(f"concept {k} has neither encodable text nor name")
        batch.append(text)
    return ids, encoder.encode(batch)


def encode_interpretations(interps, encoder):
    """Render and encode a batch of interpretations.

    Returns (ids, matrix) with rows in ascending concept-id order.
    """
    texts = {it.id: it.render() for it in interps}
    names = {it.id: it.name for it in interps}
    return encode_texts(texts, names, encoder)


def project(matrix, params) -> np.ndarray:
    """Linear map bridging a backend's native width to the model width.

    `params` must be (native_dim, out_dim); rows map through it one by one.
    """
    matrix = np.asarray(matrix)
    params = np.asarray(params)
    if params.ndim != 2:
        raise EncoderError(f"projection must be a matrix, got shape {params.shape}")
    if matrix.ndim != 2 or matrix.shape[1] != params.shape[0]:
        raise EncoderError(
            f"cannot project table of shape {matrix.shape} through {params.shape}"
        )
    return (matrix @ params).astype(np.float32)
