"""Bi-branch weight-sharing store for candidate initialization.

Every layer of the supernet holds the weights of the two maximal layer
types at once: an attention branch with all four input projections (per
head) plus the output mix, and a conv branch with the GLU projection, the
largest (65-tap) kernel, and one learned k x k transformation matrix per
smaller kernel size, shared across channels. Candidates initialize by
extraction - attention layers take the projections for the inputs their
dag uses, conv layers take the center slice of the big kernel mapped
through the transformation matrix - train briefly, and the best child of
each search iteration writes its trained weights back.

Write-back keeps the stored 65-kernel the single source of truth: the
candidate trains the transform T and the slice S jointly (its effective
kernel is T @ S), and write_back stores T and solves T^-1 (T S) = S back
into the center rows. Parameters the search never varies (embeddings,
FFNs, layer norms) live in the same store and follow the same
best-child-writes-back rule.

Checkpoint format: one .npz container holding every weight array under its
store key, plus a ``__meta__`` JSON string with {version, config,
layer_versions, rng_state, keys in declared order}.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from opnas.evolution import EvalResult
from opnas.model import (
    ModelConfig,
    OptimConfig,
    build_model,
    mlm_pretrain,
    proxy_evaluate,
)
from opnas.search_space import KERNEL_MENU, BackboneSpec

__all__ = [
    "MAX_KERNEL",
    "CENTER_INDEX",
    "TRANSFORM_SIZES",
    "Supernet",
    "init_supernet",
    "center_slice",
    "extract_conv_kernel",
    "extract_attention_weights",
    "write_back",
    "write_back_shared",
    "init_candidate",
    "BiwsEvaluator",
]

log = logging.getLogger(__name__)

MAX_KERNEL = 65
CENTER_INDEX = (MAX_KERNEL - 1) // 2
TRANSFORM_SIZES = tuple(k for k in KERNEL_MENU if k != MAX_KERNEL)

INIT_STD = 0.02
COND_LIMIT = 1e8

CHECKPOINT_VERSION = 1


def center_slice(k: int) -> slice:
    """Row range of the k-tap sub-kernel inside the 65-tap kernel.

    Centered on index 32: rows 32-(k-1)/2 .. 32+(k-1)/2 inclusive.
    """
    if k not in KERNEL_MENU:
        raise ValueError(f"kernel {k} not in menu {KERNEL_MENU}")
    half = (k - 1) // 2
    return slice(CENTER_INDEX - half, CENTER_INDEX + half + 1)


class Supernet:
    """Weight store plus per-layer version counters.

    ``store`` maps documented keys to arrays; the declared key order (also
    the rng draw order at init) is: tok_emb, pos_emb, then per layer i:
    layer{i}.att.{q,k,v,p} (each H x d x d_h), layer{i}.att.wo (d x d),
    layer{i}.conv.proj (d x 2d), layer{i}.conv.kernel (65 x d),
    layer{i}.conv.transform.{k} for k in 3..31 (k x k),
    layer{i}.ffn.w1 (d x rd), layer{i}.ffn.w2 (rd x d), and the
    layer{i}.ln_{att,ffn,conv}.{gain,bias} vectors.
    """

    def __init__(self, config: ModelConfig, store: dict[str, np.ndarray],
                 versions: list[int], rng_state: dict | None = None):
        self.config = config
        self.store = store
        self.versions = versions
        self.rng_state = rng_state or {}

    def keys(self) -> list[str]:
        return _declared_keys(self.config)

    def save(self, path: str | Path) -> None:
        meta = {
            "version": CHECKPOINT_VERSION,
            "config": self.config.to_json_dict(),
            "layer_versions": list(self.versions),
            "rng_state": self.rng_state,
            "keys": self.keys(),
        }
        np.savez(path, __meta__=np.array(json.dumps(meta)), **self.store)

    @classmethod
    def load(cls, path: str | Path) -> "Supernet":
        with np.load(path) as data:
            meta = json.loads(str(data["__meta__"]))
            if meta.get("version") != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported supernet checkpoint version "
                                 f"{meta.get('version')!r}")
            config = ModelConfig.from_json_dict(meta["config"])
            store = {key: data[key].copy() for key in meta["keys"]}
        return cls(config, store, list(meta["layer_versions"]), meta["rng_state"])


def _declared_keys(config: ModelConfig) -> list[str]:
    keys = ["tok_emb", "pos_emb"]
    for i in range(config.num_layers):
        for name in ("q", "k", "v", "p"):
            keys.append(f"layer{i}.att.{name}")
        keys.append(f"layer{i}.att.wo")
        keys.append(f"layer{i}.conv.proj")
        keys.append(f"layer{i}.conv.kernel")
        for k in TRANSFORM_SIZES:
            keys.append(f"layer{i}.conv.transform.{k}")
        keys.append(f"layer{i}.ffn.w1")
        keys.append(f"layer{i}.ffn.w2")
        for part in ("ln_att", "ln_ffn", "ln_conv"):
            keys.append(f"layer{i}.{part}.gain")
            keys.append(f"layer{i}.{part}.bias")
    return keys


def _key_shape(key: str, config: ModelConfig) -> tuple[int, ...]:
    d = config.d_model
    d_h = config.d_h
    heads = config.n_heads
    if key == "tok_emb":
        return (config.vocab, d)
    if key == "pos_emb":
        return (config.seq_len, d)
    field = key.split(".", 1)[1]
    if field in ("att.q", "att.k", "att.v", "att.p"):
        return (heads, d, d_h)
    if field == "att.wo":
        return (d, d)
    if field == "conv.proj":
        return (d, 2 * d)
    if field == "conv.kernel":
        return (MAX_KERNEL, d)
    if field.startswith("conv.transform."):
        k = int(field.rsplit(".", 1)[1])
        return (k, k)
    if field == "ffn.w1":
        return (d, config.ffn_ratio * d)
    if field == "ffn.w2":
        return (config.ffn_ratio * d, d)
    if field.endswith(".gain") or field.endswith(".bias"):
        return (d,)
    raise KeyError(key)


def init_supernet(config: ModelConfig, rng: np.random.Generator | int = 0) -> Supernet:
    """Fresh supernet: scaled-normal weights (std 0.02), identity transforms."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    store: dict[str, np.ndarray] = {}
    for key in _declared_keys(config):
        shape = _key_shape(key, config)
        field = key.split(".")[-1]
        if field == "gain":
            store[key] = np.ones(shape)
        elif field == "bias":
            store[key] = np.zeros(shape)
        elif ".conv.transform." in key:
            store[key] = np.eye(shape[0])
        else:
            store[key] = rng.normal(0.0, INIT_STD, size=shape)
    versions = [0] * config.num_layers
    return Supernet(config, store, versions, rng.bit_generator.state)


# ---------------------------------------------------------------------------
# extraction


def extract_conv_kernel(sn: Supernet, layer: int, k: int) -> np.ndarray:
    """Center slice of the stored 65-kernel through the k x k transform."""
    if k not in KERNEL_MENU:
        raise ValueError(f"kernel {k} not in menu {KERNEL_MENU}")
    kernel = sn.store[f"layer{layer}.conv.kernel"]
    if k == MAX_KERNEL:
        return kernel.copy()
    transform = sn.store[f"layer{layer}.conv.transform.{k}"]
    return transform @ kernel[center_slice(k)]


def extract_attention_weights(sn: Supernet, layer: int,
                              used: Sequence[str]) -> dict[str, np.ndarray]:
    """Projections for the used inputs plus the output mix, as copies."""
    if not used:
        raise ValueError("need at least one used input")
    out = {name: sn.store[f"layer{layer}.att.{name}"].copy() for name in used}
    out["wo"] = sn.store[f"layer{layer}.att.wo"].copy()
    return out


# ---------------------------------------------------------------------------
# write-back


def write_back(sn: Supernet, layer: int, weights: Mapping[str, np.ndarray],
               kind: str) -> Supernet:
    """Store one layer's trained weights; bumps the layer version.

    attention: ``weights`` holds any of q/k/v/p (H x d x d_h) plus wo.
    conv: ``weights`` holds proj, the effective kernel (k x d), and for
    k < 65 the trained transform (k x k). The transform is stored first,
    then the center slice is recovered as transform^-1 @ kernel; a
    near-singular transform falls back to the pseudo-inverse with a
    logged warning.
    """
    if kind == "attention":
        for name, value in weights.items():
            key = f"layer{layer}.att.{name}"
            _checked_assign(sn, key, value)
    elif kind == "conv":
        if "proj" in weights:
            _checked_assign(sn, f"layer{layer}.conv.proj", weights["proj"])
        kernel = np.asarray(weights["kernel"], dtype=np.float64)
        k = kernel.shape[0]
        if k == MAX_KERNEL:
            _checked_assign(sn, f"layer{layer}.conv.kernel", kernel)
        else:
            if k not in TRANSFORM_SIZES:
                raise ValueError(f"kernel size {k} not in menu {KERNEL_MENU}")
            transform = np.asarray(weights["transform"], dtype=np.float64)
            _checked_assign(sn, f"layer{layer}.conv.transform.{k}", transform)
            if np.linalg.cond(transform) > COND_LIMIT:
                log.warning("layer %d kernel %d transform ill-conditioned; "
                            "using pseudo-inverse", layer, k)
                slice_rows = np.linalg.pinv(transform) @ kernel
            else:
                slice_rows = np.linalg.solve(transform, kernel)
            sn.store[f"layer{layer}.conv.kernel"][center_slice(k)] = slice_rows
    else:
        raise ValueError(f"unknown layer kind {kind!r}")
    sn.versions[layer] += 1
    return sn


def _checked_assign(sn: Supernet, key: str, value) -> None:
    value = np.asarray(value, dtype=np.float64)
    want = sn.store[key].shape
    if value.shape != want:
        raise ValueError(f"{key}: shape {value.shape} != stored {want}")
    sn.store[key] = value.copy()


def write_back_shared(sn: Supernet, weights: Mapping[str, np.ndarray]) -> Supernet:
    """Update non-searched parameters (embeddings, FFN, layer norms)."""
    for key, value in weights.items():
        if key not in sn.store:
            raise KeyError(f"unknown store key {key!r}")
        _checked_assign(sn, key, value)
    return sn


# ---------------------------------------------------------------------------
# candidate initialization


def init_candidate(sn: Supernet, spec: BackboneSpec) -> dict[str, np.ndarray]:
    """Model parameter set for ``spec``, named per build_model's convention.

    Conv layers with k < 65 get a (transform, slice) pair whose product is
    the effective kernel, so the transform keeps training with the
    candidate and write-back can invert it.
    """
    config = sn.config
    if len(spec.layers) != config.num_layers:
        raise ValueError(f"spec has {len(spec.layers)} layers, supernet expects "
                         f"{config.num_layers}")
    params: dict[str, np.ndarray] = {
        "tok_emb": sn.store["tok_emb"].copy(),
        "pos_emb": sn.store["pos_emb"].copy(),
    }
    for i, layer in enumerate(spec.layers):
        if layer.kind == "attention":
            weights = extract_attention_weights(sn, i, layer.dag.inputs)
            for name in layer.dag.inputs:
                for h in range(config.n_heads):
                    params[f"layer{i}.att.{name}.h{h}"] = weights[name][h].copy()
            params[f"layer{i}.att.wo"] = weights["wo"]
            params[f"layer{i}.ffn.w1"] = sn.store[f"layer{i}.ffn.w1"].copy()
            params[f"layer{i}.ffn.w2"] = sn.store[f"layer{i}.ffn.w2"].copy()
            for part in ("ln_att", "ln_ffn"):
                params[f"layer{i}.{part}.gain"] = sn.store[f"layer{i}.{part}.gain"].copy()
                params[f"layer{i}.{part}.bias"] = sn.store[f"layer{i}.{part}.bias"].copy()
        else:
            k = layer.kernel
            params[f"layer{i}.conv.proj"] = sn.store[f"layer{i}.conv.proj"].copy()
            if k == MAX_KERNEL:
                params[f"layer{i}.conv.kernel"] = sn.store[f"layer{i}.conv.kernel"].copy()
            else:
                params[f"layer{i}.conv.transform"] = \
                    sn.store[f"layer{i}.conv.transform.{k}"].copy()
                params[f"layer{i}.conv.slice"] = \
                    sn.store[f"layer{i}.conv.kernel"][center_slice(k)].copy()
            params[f"layer{i}.ln_conv.gain"] = sn.store[f"layer{i}.ln_conv.gain"].copy()
            params[f"layer{i}.ln_conv.bias"] = sn.store[f"layer{i}.ln_conv.bias"].copy()
    return params


def _write_back_candidate(sn: Supernet, spec: BackboneSpec,
                          trained: Mapping[str, np.ndarray]) -> None:
    """Fold one trained candidate into the supernet (branches then glue)."""
    config = sn.config
    shared: dict[str, np.ndarray] = {
        "tok_emb": trained["tok_emb"],
        "pos_emb": trained["pos_emb"],
    }
    for i, layer in enumerate(spec.layers):
        if layer.kind == "attention":
            weights: dict[str, np.ndarray] = {"wo": trained[f"layer{i}.att.wo"]}
            for name in layer.dag.inputs:
                weights[name] = np.stack([
                    trained[f"layer{i}.att.{name}.h{h}"]
                    for h in range(config.n_heads)
                ])
            write_back(sn, i, weights, "attention")
            for part in ("ffn.w1", "ffn.w2", "ln_att.gain", "ln_att.bias",
                         "ln_ffn.gain", "ln_ffn.bias"):
                shared[f"layer{i}.{part}"] = trained[f"layer{i}.{part}"]
        else:
            k = layer.kernel
            weights = {"proj": trained[f"layer{i}.conv.proj"]}
            if k == MAX_KERNEL:
                weights["kernel"] = trained[f"layer{i}.conv.kernel"]
            else:
                transform = trained[f"layer{i}.conv.transform"]
                weights["transform"] = transform
                weights["kernel"] = transform @ trained[f"layer{i}.conv.slice"]
            write_back(sn, i, weights, "conv")
            for part in ("ln_conv.gain", "ln_conv.bias"):
                shared[f"layer{i}.{part}"] = trained[f"layer{i}.{part}"]
    write_back_shared(sn, shared)


class BiwsEvaluator:
    """Search evaluator that trains supernet-initialized candidates.

    Each call extracts a parameter set for the spec, fine-tunes it for
    ``steps`` on the corpus, and scores heldout masked-token accuracy.
    After every iteration the best-scoring child writes its trained
    weights back (and the supernet is checkpointed when ``save_path`` is
    set). Training randomness is keyed by (seed, candidate id), so scores
    are reproducible and parallel evaluation matches serial.
    """

    def __init__(self, supernet: Supernet, corpus, steps: int = 100,
                 optim: OptimConfig | None = None, seed: int = 0,
                 save_path: str | Path | None = None):
        self.supernet = supernet
        self.corpus = corpus
        self.steps = steps
        self.optim = optim or OptimConfig()
        self.seed = seed
        self.save_path = Path(save_path) if save_path else None

    def __call__(self, spec: BackboneSpec, candidate_id: int) -> EvalResult:
        params = init_candidate(self.supernet, spec)
        model = build_model(spec, self.supernet.config, params=params)
        rng = np.random.default_rng([self.seed, candidate_id])
        mlm_pretrain(model, self.corpus, self.steps, self.optim, rng)
        score = proxy_evaluate(model, self.corpus.heldout)
        return EvalResult(score.value, payload=model.state_arrays())

    def on_iteration_end(self, iteration: int, evaluated) -> None:
        if not evaluated:
            return
        best_cand, best_payload = max(evaluated,
                                      key=lambda cp: (cp[0].score, -cp[0].id))
        _write_back_candidate(self.supernet, best_cand.spec, best_payload)
        if self.save_path is not None:
            self.supernet.save(self.save_path)
