"""Hierarchical weight-token encoder over canonical LoRA components.

Pipeline per checkpoint: canonize every position, map each rank
component (u_k, v_k, sigma_k) to a token via separate direction
projectors, fusion and singular-value modulation; run a rank-level
transformer over the r tokens of a position and pool them with
sum-normalized sigma weights; add layer and module embeddings; run a
position-level transformer; attention-pool into one embedding; apply a
small task head.

Ablation modes: `no_canon` replaces canonical inputs with one affine
projection of the flattened raw factors per position (the rank level
disappears); `no_rank_level` skips the rank transformer;
`no_pos_level` replaces the position transformer with identity.

Training follows a two-stage recipe: a warmup stage that updates only
the tokenizer projections, embeddings and head, then full-model updates
under cosine-annealed AdamW. Parameters are float64 during training and
float32 for inference and snapshots.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import nn
from .canon import canonize
from .errors import ConfigMismatch, EmptySplit, LabelSchemaMismatch, LayoutMismatch
from .interchange import LoraCheckpoint, load_collection

MODES = ("full", "no_canon", "no_rank_level", "no_pos_level")


@dataclass
class EncoderConfig:
    rank: int
    layer_count: int
    d_out: int
    d_in: int
    module_codes: tuple[int, ...]
    out_dim: int
    task: str  # multilabel | regression
    d_model: int = 128
    rank_layers: int = 1
    pos_layers: int = 2
    heads: int = 4
    head_width: int = 64
    sigma_mlp_width: int = 32
    mode: str = "full"

    def __post_init__(self):
        self.module_codes = tuple(int(c) for c in self.module_codes)
        if self.d_model % self.heads != 0:
            raise ConfigMismatch(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.mode not in MODES:
            raise ConfigMismatch(f"unknown mode {self.mode!r}")
        if self.task not in ("multilabel", "regression"):
            raise ConfigMismatch(f"unknown task {self.task!r}")

    @property
    def module_vocab(self) -> int:
        return len(self.module_codes)

    def module_index(self, code: int) -> int:
        try:
            return self.module_codes.index(code)
        except ValueError:
            raise ConfigMismatch(f"module code {code} not in vocabulary {self.module_codes}")

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["module_codes"] = list(self.module_codes)
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "EncoderConfig":
        doc = dict(doc)
        doc["module_codes"] = tuple(doc["module_codes"])
        return cls(**doc)


@dataclass
class TrainHyper:
    epochs: int = 45
    batch: int = 64
    weight_decay: float = 1e-3
    base_lr: float = 1e-3
    warmup: int = 4
    seed: int = 0


WARMUP_GROUPS = ("tokenizer", "embeddings", "head")


def _block_params(group, prefix, d, rng):
    group.add(f"{prefix}_ln1_g", nn.Tensor(np.ones(d)))
    group.add(f"{prefix}_ln1_b", nn.seeded_init((d,), "zeros", rng))
    for name in ("wq", "wk", "wv"):
        group.add(f"{prefix}_{name}", nn.seeded_init((d, d), "xavier_uniform", rng))
        group.add(f"{prefix}_{name[1]}b", nn.seeded_init((d,), "zeros", rng))
    # residual-branch output layers start at zero so untrained blocks are the identity
    group.add(f"{prefix}_wo", nn.seeded_init((d, d), "zeros", rng))
    group.add(f"{prefix}_ob", nn.seeded_init((d,), "zeros", rng))
    group.add(f"{prefix}_ln2_g", nn.Tensor(np.ones(d)))
    group.add(f"{prefix}_ln2_b", nn.seeded_init((d,), "zeros", rng))
    group.add(f"{prefix}_m1", nn.seeded_init((d, 4 * d), "xavier_uniform", rng))
    group.add(f"{prefix}_m1b", nn.seeded_init((4 * d,), "zeros", rng))
    group.add(f"{prefix}_m2", nn.seeded_init((4 * d, d), "zeros", rng))
    group.add(f"{prefix}_m2b", nn.seeded_init((d,), "zeros", rng))


def build_params(config: EncoderConfig, seed: int) -> dict[str, nn.ParamGroup]:
    """Initialize all parameter groups for the configured mode."""
    rng = np.random.default_rng([seed, 0xE2C0DE])
    d = config.d_model
    groups: dict[str, nn.ParamGroup] = {}

    tok = nn.ParamGroup("tokenizer")
    if config.mode == "no_canon":
        flat = config.d_out * config.rank + config.rank * config.d_in
        tok.add("flat_w", nn.seeded_init((flat, d), "xavier_uniform", rng))
        tok.add("flat_b", nn.seeded_init((d,), "zeros", rng))
    else:
        tok.add("phi_u_w", nn.seeded_init((config.d_out, d), "xavier_uniform", rng))
        tok.add("phi_u_b", nn.seeded_init((d,), "zeros", rng))
        tok.add("phi_v_w", nn.seeded_init((config.d_in, d), "xavier_uniform", rng))
        tok.add("phi_v_b", nn.seeded_init((d,), "zeros", rng))
        tok.add("fuse_w", nn.seeded_init((2 * d, d), "xavier_uniform", rng))
        tok.add("fuse_b", nn.seeded_init((d,), "zeros", rng))
        w = config.sigma_mlp_width
        tok.add("sig_w1", nn.seeded_init((1, w), "xavier_uniform", rng))
        tok.add("sig_b1", nn.seeded_init((w,), "zeros", rng))
        # small (not zero) final layer: modulation starts near the identity
        # but the singular-value pathway carries gradient from step one
        tok.add("sig_w2", nn.seeded_init((w, 2 * d), ("normal", 0.02), rng))
        tok.add("sig_b2", nn.seeded_init((2 * d,), "zeros", rng))
    groups["tokenizer"] = tok

    emb = nn.ParamGroup("embeddings")
    emb.add("e_layer", nn.seeded_init((config.layer_count, d), ("normal", 0.02), rng))
    emb.add("e_module", nn.seeded_init((config.module_vocab, d), ("normal", 0.02), rng))
    groups["embeddings"] = emb

    if config.mode not in ("no_canon", "no_rank_level"):
        rank_enc = nn.ParamGroup("rank_encoder")
        for i in range(config.rank_layers):
            _block_params(rank_enc, f"b{i}", d, rng)
        groups["rank_encoder"] = rank_enc

    pos_enc = nn.ParamGroup("pos_encoder")
    if config.mode != "no_pos_level":
        for i in range(config.pos_layers):
            _block_params(pos_enc, f"b{i}", d, rng)
    # output norm of the pre-LN trunk, applied before attention pooling
    pos_enc.add("ln_g", nn.Tensor(np.ones(d)))
    pos_enc.add("ln_b", nn.seeded_init((d,), "zeros", rng))
    pos_enc.add("pool_q", nn.seeded_init((d,), ("normal", 0.02), rng))
    groups["pos_encoder"] = pos_enc

    head = nn.ParamGroup("head")
    head.add("h1", nn.seeded_init((d, config.head_width), "xavier_uniform", rng))
    head.add("h1b", nn.seeded_init((config.head_width,), "zeros", rng))
    head.add("h2", nn.seeded_init((config.head_width, config.out_dim), "xavier_uniform", rng))
    head.add("h2b", nn.seeded_init((config.out_dim,), "zeros", rng))
    groups["head"] = head
    return groups


def flat_params(groups: dict[str, nn.ParamGroup]) -> dict[str, nn.Tensor]:
    return {f"{g}.{t}": tensor for g, group in groups.items() for t, tensor in group.tensors.items()}


def _affine(x, p, w, b):
    return nn.add(nn.matmul(x, p[w]), p[b])


def _heads_split(x, heads):
    # [..., T, d] -> [..., H, T, hd]
    shape = x.shape
    d = shape[-1]
    hd = d // heads
    y = nn.reshape(x, shape[:-1] + (heads, hd))
    nd = len(shape) + 1
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    return nn.transpose(y, axes)


def _heads_join(x):
    # [..., H, T, hd] -> [..., T, d]
    nd = len(x.shape)
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    y = nn.transpose(x, axes)
    shape = y.shape
    return nn.reshape(y, shape[:-2] + (shape[-2] * shape[-1],))


def transformer_block(x, p, prefix, heads):
    """Pre-norm multi-head self-attention and MLP with residuals."""
    h = nn.layer_norm(x, p[f"{prefix}_ln1_g"], p[f"{prefix}_ln1_b"])
    q = _heads_split(_affine(h, p, f"{prefix}_wq", f"{prefix}_qb"), heads)
    k = _heads_split(_affine(h, p, f"{prefix}_wk", f"{prefix}_kb"), heads)
    v = _heads_split(_affine(h, p, f"{prefix}_wv", f"{prefix}_vb"), heads)
    hd = q.shape[-1]
    nd = len(k.shape)
    kt = nn.transpose(k, tuple(range(nd - 2)) + (nd - 1, nd - 2))
    scores = nn.mul(nn.matmul(q, kt), 1.0 / math.sqrt(hd))
    att = nn.matmul(nn.softmax(scores, axis=-1), v)
    x = nn.add(x, _affine(_heads_join(att), p, f"{prefix}_wo", f"{prefix}_ob"))
    h2 = nn.layer_norm(x, p[f"{prefix}_ln2_g"], p[f"{prefix}_ln2_b"])
    m = nn.gelu(_affine(h2, p, f"{prefix}_m1", f"{prefix}_m1b"))
    return nn.add(x, _affine(m, p, f"{prefix}_m2", f"{prefix}_m2b"))


def tokenize(u, v, sigma, p):
    """Project direction pairs, fuse, and modulate by the singular value.

    u: [..., d_out], v: [..., d_in], sigma: [...]; returns [..., d_model].
    """
    u, v, sigma = nn.as_tensor(u), nn.as_tensor(v), nn.as_tensor(sigma)
    zu = _affine(u, p, "tokenizer.phi_u_w", "tokenizer.phi_u_b")
    zv = _affine(v, p, "tokenizer.phi_v_w", "tokenizer.phi_v_b")
    z = _affine(nn.concat([zu, zv], axis=-1), p, "tokenizer.fuse_w", "tokenizer.fuse_b")
    sh = nn.reshape(nn.log1p(sigma), sigma.shape + (1,))
    hidden = nn.gelu(_affine(sh, p, "tokenizer.sig_w1", "tokenizer.sig_b1"))
    mod = _affine(hidden, p, "tokenizer.sig_w2", "tokenizer.sig_b2")
    d = z.shape[-1]
    gamma = nn.narrow(mod, 0, d, axis=-1)
    beta = nn.narrow(mod, d, d, axis=-1)
    return nn.add(nn.mul(z, nn.add(1.0, nn.tanh(gamma))), beta)


def rank_pool(tokens, sigma):
    """Weighted sum of rank tokens with sum-normalized sigmas (uniform if all zero).

    tokens: [..., r, d_model], sigma: [..., r] -> [..., d_model].
    """
    tokens, sigma = nn.as_tensor(tokens), nn.as_tensor(sigma)
    w = nn.normalize_weights(sigma)
    w = nn.reshape(w, w.shape + (1,))
    return nn.tsum(nn.mul(tokens, w), axis=-2)


def encode_batch(batch: dict, p: dict, config: EncoderConfig) -> nn.Tensor:
    """Embed a prepared batch; returns [N, d_model].

    The batch dict carries float arrays (or Tensors, for gradient
    checks): canonical modes use U [N,P,r,d_out], V [N,P,r,d_in],
    S [N,P,r]; no_canon uses raw [N,P,flat]. layer_idx/module_idx
    are int arrays of length P.
    """
    if config.mode == "no_canon":
        t = _affine(nn.as_tensor(batch["raw"]), p, "tokenizer.flat_w", "tokenizer.flat_b")
    else:
        tau = tokenize(batch["U"], batch["V"], batch["S"], p)
        if config.mode != "no_rank_level":
            for i in range(config.rank_layers):
                tau = transformer_block(tau, p, f"rank_encoder.b{i}", config.heads)
        t = rank_pool(tau, batch["S"])
    e_layer = nn.embedding(p["embeddings.e_layer"], batch["layer_idx"])
    e_module = nn.embedding(p["embeddings.e_module"], batch["module_idx"])
    t = nn.add(t, nn.add(e_layer, e_module))
    if config.mode != "no_pos_level":
        for i in range(config.pos_layers):
            t = transformer_block(t, p, f"pos_encoder.b{i}", config.heads)
    t = nn.layer_norm(t, p["pos_encoder.ln_g"], p["pos_encoder.ln_b"])
    scores = nn.mul(nn.matmul(t, p["pos_encoder.pool_q"]), 1.0 / math.sqrt(config.d_model))
    alpha = nn.softmax(scores, axis=-1)
    alpha = nn.reshape(alpha, alpha.shape + (1,))
    return nn.tsum(nn.mul(t, alpha), axis=-2)


def head_forward(h, p) -> nn.Tensor:
    """Two-layer task head: d_model -> head_width -> out_dim."""
    hidden = nn.gelu(_affine(nn.as_tensor(h), p, "head.h1", "head.h1b"))
    return _affine(hidden, p, "head.h2", "head.h2b")


def checkpoint_arrays(ckpt: LoraCheckpoint, config: EncoderConfig, dtype=np.float32) -> dict:
    """Canonize one checkpoint into stacked per-position component arrays."""
    if ckpt.rank != config.rank:
        raise ConfigMismatch(f"{ckpt.id}: rank {ckpt.rank} != config rank {config.rank}")
    U, V, S, layer_idx, module_idx = [], [], [], [], []
    for key, fp in ckpt.positions:
        if fp.d_out != config.d_out or fp.d_in != config.d_in:
            raise ConfigMismatch(
                f"{ckpt.id}: position dims {fp.d_out}x{fp.d_in} do not match "
                f"config {config.d_out}x{config.d_in}"
            )
        if key.layer_index >= config.layer_count:
            raise ConfigMismatch(f"{ckpt.id}: layer {key.layer_index} out of range")
        cu = canonize(fp)
        U.append(cu.U.T.astype(dtype))  # [r, d_out] rows are u_k
        V.append(cu.V.T.astype(dtype))
        S.append(cu.sigma.astype(dtype))
        layer_idx.append(key.layer_index)
        module_idx.append(config.module_index(key.module_kind.code))
    return {
        "U": np.stack(U),
        "V": np.stack(V),
        "S": np.stack(S),
        "layer_idx": np.asarray(layer_idx, dtype=np.int64),
        "module_idx": np.asarray(module_idx, dtype=np.int64),
    }


def checkpoint_raw(ckpt: LoraCheckpoint, config: EncoderConfig, dtype=np.float32) -> dict:
    """Flatten raw factors per position for the no_canon mode."""
    rows, layer_idx, module_idx = [], [], []
    for key, fp in ckpt.positions:
        rows.append(np.concatenate([fp.B.ravel(), fp.A.ravel()]).astype(dtype))
        layer_idx.append(key.layer_index)
        module_idx.append(config.module_index(key.module_kind.code))
    return {
        "raw": np.stack(rows),
        "layer_idx": np.asarray(layer_idx, dtype=np.int64),
        "module_idx": np.asarray(module_idx, dtype=np.int64),
    }


def raw_cos_similarity(a: LoraCheckpoint, b: LoraCheckpoint) -> float:
    """Cosine of the flattened raw payloads in canonical position order."""
    keys_a = [k for k, _ in a.positions]
    keys_b = [k for k, _ in b.positions]
    if keys_a != keys_b:
        raise LayoutMismatch(f"{a.id} and {b.id} have different position layouts")
    for (_, fa), (_, fb) in zip(a.positions, b.positions):
        if fa.B.shape != fb.B.shape or fa.A.shape != fb.A.shape:
            raise LayoutMismatch(f"{a.id} and {b.id} have different factor shapes")
    va = np.concatenate([np.concatenate([fp.B.ravel(), fp.A.ravel()]) for _, fp in a.positions])
    vb = np.concatenate([np.concatenate([fp.B.ravel(), fp.A.ravel()]) for _, fp in b.positions])
    va = va.astype(np.float64)
    vb = vb.astype(np.float64)
    denom = np.linalg.norm(va) * np.linalg.norm(vb)
    if denom == 0:
        return 0.0
    return float(np.clip(va @ vb / denom, -1.0, 1.0))


class Encoder:
    """Config plus parameters, with float32 inference entry points."""

    def __init__(self, config: EncoderConfig, groups: dict[str, nn.ParamGroup]):
        self.config = config
        self.groups = groups
        self._infer_cache: dict[str, nn.Tensor] | None = None

    @classmethod
    def init(cls, config: EncoderConfig, seed: int = 0) -> "Encoder":
        return cls(config, build_params(config, seed))

    def invalidate(self):
        self._infer_cache = None

    def _infer_params(self) -> dict[str, nn.Tensor]:
        if self._infer_cache is None:
            self._infer_cache = {
                name: nn.Tensor(t.data.astype(np.float32))
                for name, t in flat_params(self.groups).items()
            }
        return self._infer_cache

    def _batch_for(self, ckpt: LoraCheckpoint) -> dict:
        if self.config.mode == "no_canon":
            arrays = checkpoint_raw(ckpt, self.config)
            return {
                "raw": arrays["raw"][None],
                "layer_idx": arrays["layer_idx"],
                "module_idx": arrays["module_idx"],
            }
        arrays = checkpoint_arrays(ckpt, self.config)
        return {
            "U": arrays["U"][None],
            "V": arrays["V"][None],
            "S": arrays["S"][None],
            "layer_idx": arrays["layer_idx"],
            "module_idx": arrays["module_idx"],
        }

    def encode(self, ckpt: LoraCheckpoint) -> np.ndarray:
        """Float32 embedding of one checkpoint."""
        h = encode_batch(self._batch_for(ckpt), self._infer_params(), self.config)
        return h.data[0].astype(np.float32)

    def predict(self, ckpt: LoraCheckpoint) -> np.ndarray:
        """Raw head outputs (logits for multilabel, value for regression)."""
        p = self._infer_params()
        h = encode_batch(self._batch_for(ckpt), p, self.config)
        return head_forward(h, p).data[0].astype(np.float32)

    def encode_many(self, checkpoints) -> np.ndarray:
        return np.stack([self.encode(c) for c in checkpoints])

    def save(self, directory, meta: dict | None = None) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        nn.save_param_groups(directory, self.groups, meta=meta or {})
        (directory / "encoder.json").write_text(
            json.dumps(self.config.to_json(), indent=1) + "\n"
        )

    @classmethod
    def load(cls, directory) -> "Encoder":
        directory = Path(directory)
        config = EncoderConfig.from_json(json.loads((directory / "encoder.json").read_text()))
        groups, _ = nn.load_param_groups(directory)
        return cls(config, groups)


def config_for_collection(manifest, accessor, mode="full", **overrides) -> EncoderConfig:
    """Derive an EncoderConfig from a manifest and a sample checkpoint's geometry."""
    sample = accessor[accessor.ids()[0]]
    _, fp = sample.positions[0]
    module_codes = tuple(sorted({key.module_kind.code for key, _ in sample.positions}))
    task = "regression" if manifest.label_schema == "regression" else "multilabel"
    out_dim = 1 if task == "regression" else manifest.label_dim
    return EncoderConfig(
        rank=manifest.rank,
        layer_count=manifest.layer_count,
        d_out=fp.d_out,
        d_in=fp.d_in,
        module_codes=module_codes,
        out_dim=out_dim,
        task=task,
        mode=mode,
        **overrides,
    )


def _stack_batches(cache: list[dict], idx: np.ndarray, mode: str) -> dict:
    first = cache[idx[0]]
    out = {
        "layer_idx": first["layer_idx"],
        "module_idx": first["module_idx"],
    }
    if mode == "no_canon":
        out["raw"] = np.stack([cache[i]["raw"] for i in idx]).astype(np.float64)
    else:
        for key in ("U", "V", "S"):
            out[key] = np.stack([cache[i][key] for i in idx]).astype(np.float64)
    return out


def _loss_for(logits: nn.Tensor, targets: np.ndarray, task: str) -> nn.Tensor:
    if task == "multilabel":
        return nn.bce_with_logits(logits, targets)
    return nn.mse(nn.reshape(logits, targets.shape), targets)


def _targets_for(entry_labels, task: str) -> np.ndarray:
    if task == "multilabel":
        return np.stack([lab.attributes for lab in entry_labels]).astype(np.float64)
    return np.asarray([lab.score for lab in entry_labels], dtype=np.float64)


def train(collection, config: EncoderConfig, hyper: TrainHyper):
    """Train an encoder on a labeled collection; returns (Encoder, log).

    `collection` is a manifest path or a (manifest, accessor) pair. The
    best-validation-loss parameter snapshot is restored at the end.
    """
    if isinstance(collection, (str, Path)):
        manifest, accessor = load_collection(collection)
    else:
        manifest, accessor = collection

    expected = "regression" if config.task == "regression" else "multilabel"
    if manifest.label_schema != expected:
        raise LabelSchemaMismatch(
            f"collection labels are {manifest.label_schema!r}, encoder expects {expected!r}"
        )

    train_ids = accessor.split_ids("train")
    val_ids = accessor.split_ids("val")
    if not train_ids:
        raise EmptySplit("collection has no train split")
    if not val_ids:
        raise EmptySplit("collection has no val split")

    prep = checkpoint_raw if config.mode == "no_canon" else checkpoint_arrays
    cache, labels = [], []
    for cid in train_ids + val_ids:
        ckpt = accessor[cid]
        cache.append(prep(ckpt, config))
        labels.append(ckpt.label)
    n_train = len(train_ids)
    train_targets = _targets_for(labels[:n_train], config.task)
    val_targets = _targets_for(labels[n_train:], config.task)
    val_idx = np.arange(n_train, len(cache))

    groups = build_params(config, hyper.seed)
    params = flat_params(groups)
    steps_per_epoch = max(1, math.ceil(n_train / hyper.batch))
    opt = nn.AdamW(
        nn.all_params(groups),
        lr=hyper.base_lr,
        weight_decay=hyper.weight_decay,
        update_ramp_steps=steps_per_epoch,
    )
    rng = np.random.default_rng([hyper.seed, 0x7EA1])

    def eval_val_loss() -> float:
        total, count = 0.0, 0
        for start in range(0, len(val_idx), hyper.batch):
            idx = val_idx[start : start + hyper.batch]
            batch = _stack_batches(cache, idx, config.mode)
            h = encode_batch(batch, params, config)
            loss = _loss_for(head_forward(h, params), val_targets[idx - n_train], config.task)
            total += loss.item() * len(idx)
            count += len(idx)
        return total / count

    log = []
    best = None
    stage_now = None
    t_start = time.perf_counter()
    for epoch in range(hyper.epochs):
        lr, stage = nn.lr_schedule(epoch, hyper.epochs, hyper.base_lr, hyper.warmup)
        if stage != stage_now:
            for name, group in groups.items():
                group.set_trainable(stage == "full" or name in WARMUP_GROUPS)
            stage_now = stage
        opt.lr = lr
        trainables = nn.trainable_params(groups)

        perm = rng.permutation(n_train)
        epoch_loss, seen = 0.0, 0
        for start in range(0, n_train, hyper.batch):
            idx = perm[start : start + hyper.batch]
            batch = _stack_batches(cache, idx, config.mode)
            h = encode_batch(batch, params, config)
            loss = _loss_for(head_forward(h, params), train_targets[idx], config.task)
            grads = nn.backward(loss, params=trainables)
            opt.step(grads)
            epoch_loss += loss.item() * len(idx)
            seen += len(idx)

        val_loss = eval_val_loss()
        log.append(
            {
                "epoch": epoch,
                "stage": stage,
                "lr": lr,
                "train_loss": epoch_loss / seen,
                "val_loss": val_loss,
                "elapsed_s": round(time.perf_counter() - t_start, 3),
            }
        )
        if best is None or val_loss < best[0]:
            best = (val_loss, {name: t.data.copy() for name, t in params.items()})

    if best is not None:
        for name, tensor in params.items():
            tensor.data = best[1][name]
    encoder = Encoder(config, groups)
    encoder.invalidate()
    return encoder, log
