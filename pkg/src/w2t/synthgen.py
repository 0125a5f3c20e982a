"""Seeded synthetic LoRA collections with planted, recoverable signal.

Construction. Every position owns fixed orthonormal direction families
drawn once from the collection seed. Each checkpoint builds its update
as an exact rank-wise decomposition delta_W = sum_k sigma_k u_k v_k^T
over per-checkpoint slots, then factors it through a random invertible
reparameterization H = Q (I + alpha E) with Haar-orthogonal Q:

    B = U diag(sqrt(sigma)) H,   A = H^-1 diag(sqrt(sigma)) V^T

so stored factors are fully scrambled while the canonical decomposition
recovers the planted slots exactly.

Where the label lives, by schema:

- multilabel: slot j carries the direction pair (u_hat_j, v_hat_j) at
  every checkpoint; the attribute bit flips the RELATIVE SIGN of the
  input partner (+v_hat_j when active, -v_hat_j when inactive).
  Direction spans and the sigma spectrum are therefore identical across
  label patterns, and a diagonal sign flip is absorbed by the Haar
  factor of H, so any function of B alone or A alone is distributed
  identically for every bit pattern: the bits live purely in the u-v
  coupling of the update, which the canonical decomposition exposes
  (under its sign convention) and factor-marginal statistics such as
  raw cosine or flattened-factor models cannot see.
- regression: matched pairings; the target is a sigmoid of a fixed
  seeded linear functional of the per-position sorted sigma spectrum,
  with label noise added inside the sigmoid. The noiseless target is
  recorded in truth.json.
- task_retrieval: all tasks share one direction family; each task owns
  a fixed +-1 codeword over the rank slots (Hadamard rows when rank is
  a power of two) applied as input-partner signs, exactly the
  multilabel mechanism. Sharing the family keeps raw-cosine
  distributions identical across task pairs, including their spread;
  disjoint per-task subspaces would leak through cosine magnitudes even
  with zero mean.

noise_std controls direction wobble (re-orthonormalized), the sigma
scale of filler slots when rank exceeds the attribute count, and
regression label noise.

truth.json sits beside the manifest and records the spec, per-checkpoint
ground truth and planted spectra; `oracle_probe` uses it to fit
closed-form linear probes that establish the attainability ceiling.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .canon import canonize, sample_gl
from .errors import InvalidSpec, UnlabeledCollection
from .interchange import (
    CollectionManifest,
    FactorPair,
    Label,
    LoraCheckpoint,
    ManifestEntry,
    ModuleKind,
    PositionKey,
    load_collection,
    write_checkpoint,
    write_manifest,
)

SIGNAL_LADDER_STEP = {"multilabel": 0.08, "regression": 0.35, "task_retrieval": 0.35}
# multilabel jitter is additive and small, keeping singular values
# well-separated for the perturbation studies run on that schema;
# regression/task jitter is multiplicative and large so the spectrum
# carries a strongly expressed target
SIGNAL_JITTER = {"multilabel": 0.015, "regression": 0.35, "task_retrieval": 0.35}
REGRESSION_Z_SCALE = 1.5
_CALIBRATION_DRAWS = 4096


@dataclass
class GenSpec:
    n_checkpoints: int = 2000
    layer_count: int = 4
    modules: tuple[str, ...] = ("Q", "V")
    d_out: int = 96
    d_in: int = 96
    rank: int = 8
    label_schema: str = "multilabel"
    label_dim: int = 8  # attribute count; task count for task_retrieval
    signal_strength: float = 1.0
    noise_std: float = 0.1
    gl_alpha: float = 1.0
    seed: int = 13
    attr_prob: float = 0.3
    n_query: int | None = None  # task_retrieval only; defaults to 20% of n

    def __post_init__(self):
        self.modules = tuple(self.modules)
        if self.n_checkpoints < 1:
            raise InvalidSpec("need at least one checkpoint")
        if self.rank > min(self.d_out, self.d_in):
            raise InvalidSpec(f"rank {self.rank} exceeds min dimension")
        if self.label_schema not in ("multilabel", "regression", "task_retrieval", "unlabeled"):
            raise InvalidSpec(f"unknown label schema {self.label_schema!r}")
        if self.label_dim < 1:
            raise InvalidSpec("label_dim must be >= 1")
        if self.label_schema == "multilabel" and self.label_dim > self.rank:
            raise InvalidSpec(
                f"multilabel needs one slot per attribute: label_dim {self.label_dim} > rank {self.rank}"
            )
        if self.label_schema == "task_retrieval" and self.label_dim > 2 ** (self.rank - 1):
            raise InvalidSpec("not enough distinct sign codewords for label_dim tasks")
        if not 0 < self.attr_prob < 1:
            raise InvalidSpec("attr_prob must be in (0, 1)")
        if self.signal_strength <= 0:
            raise InvalidSpec("signal_strength must be positive")
        if self.noise_std < 0 or self.gl_alpha < 0:
            raise InvalidSpec("noise_std and gl_alpha must be non-negative")

    @property
    def position_keys(self) -> list[PositionKey]:
        keys = [
            PositionKey(layer, ModuleKind.from_name(m))
            for layer in range(self.layer_count)
            for m in self.modules
        ]
        return sorted(keys, key=lambda k: k.sort_key())


def _orthonormal_columns(rng, d, n):
    M = rng.standard_normal((d, n))
    Q, R = np.linalg.qr(M)
    return Q * np.sign(np.diag(R))


def _sign_normalize_columns(M):
    # make each column's largest-magnitude entry positive, matching the
    # canonical sign convention, so recovered components align with +u_hat
    j = np.argmax(np.abs(M), axis=0)
    signs = np.sign(M[j, np.arange(M.shape[1])])
    signs[signs == 0] = 1.0
    return M * signs


def _task_codewords(T: int, r: int, rng) -> np.ndarray:
    """T distinct +-1 patterns of length r with decent pairwise distance."""
    if T <= r and (r & (r - 1)) == 0:  # Hadamard rows: pairwise distance r/2
        H = np.ones((r, r))
        k = 1
        while k < r:
            H[k : 2 * k, :k] = H[:k, :k]
            H[:k, k : 2 * k] = H[:k, :k]
            H[k : 2 * k, k : 2 * k] = -H[:k, :k]
            k *= 2
        return H[:T]
    best, best_dist = None, -1
    for _ in range(256):
        C = np.where(rng.random((T, r)) < 0.5, -1.0, 1.0)
        dists = [
            int(np.sum(C[i] != C[j])) for i in range(T) for j in range(i + 1, T)
        ]
        d = min(dists) if dists else r
        if d > best_dist:
            best, best_dist = C, d
        if best_dist >= max(1, r // 4):
            break
    return best


def planted_directions(spec: GenSpec) -> dict:
    """Regenerate the fixed per-position direction families from the seed."""
    rng = np.random.default_rng([spec.seed, 0xD1C7])
    P = len(spec.position_keys)
    out: dict = {"spec": spec}
    K = spec.label_dim if spec.label_schema == "multilabel" else spec.rank
    out["u_attr"] = np.stack(
        [_sign_normalize_columns(_orthonormal_columns(rng, spec.d_out, K)) for _ in range(P)]
    )
    out["v_attr"] = np.stack(
        [_sign_normalize_columns(_orthonormal_columns(rng, spec.d_in, K)) for _ in range(P)]
    )
    if spec.label_schema == "task_retrieval":
        out["codewords"] = _task_codewords(spec.label_dim, spec.rank, rng)
    if spec.label_schema == "regression":
        w = rng.standard_normal((P, spec.rank))
        out["reg_w"] = w
        # center/scale of the raw functional under the nominal sigma
        # distribution, fixed by seeded simulation
        sim = np.random.default_rng([spec.seed, 0xCA11B])
        draws = np.empty(_CALIBRATION_DRAWS)
        for i in range(_CALIBRATION_DRAWS):
            sig = np.stack(
                [_signal_sigmas(sim, spec.rank, "regression", spec.signal_strength) for _ in range(P)]
            )
            sorted_spec = np.sort(sig, axis=-1)[:, ::-1] / spec.signal_strength
            draws[i] = float((w * sorted_spec).sum())
        out["reg_mu"] = float(draws.mean())
        out["reg_sd"] = float(draws.std())
    return out


def _wobble_frame(base_cols, rng, noise_std, d):
    """Per-checkpoint orthonormal slot directions near the given base columns.

    base_cols: list of base vectors or None (None means a pure noise
    direction). Sequential Gram-Schmidt keeps the frame exactly
    orthonormal.
    """
    cols = []
    for base in base_cols:
        raw = rng.standard_normal(d) / np.sqrt(d)
        if base is not None:
            raw = base + noise_std * raw
        for prev in cols:
            raw = raw - (prev @ raw) * prev
        norm = np.linalg.norm(raw)
        if norm < 1e-12:  # pathological draw; retry with a fresh vector
            raw = rng.standard_normal(d)
            for prev in cols:
                raw = raw - (prev @ raw) * prev
            norm = np.linalg.norm(raw)
        cols.append(raw / norm)
    return np.stack(cols, axis=1)


def _signal_sigmas(rng, count, schema, s):
    step = SIGNAL_LADDER_STEP[schema]
    jit = SIGNAL_JITTER[schema]
    ladder = 1.0 + step * np.arange(count)
    if schema == "multilabel":
        return s * (ladder + rng.uniform(-jit, jit, size=count))
    return s * ladder * np.exp(rng.uniform(-jit, jit, size=count))


def _noise_sigmas(rng, count, s, noise_std):
    if count == 0:
        return np.zeros(0)
    ladder = 0.4 + 0.2 * np.arange(count)
    return noise_std * s * (ladder + rng.uniform(-0.02, 0.02, size=count))


def _factor_slots(U_slots, V_slots, sigma, rng, gl_alpha):
    """Factor sum_k sigma_k u_k v_k^T through a scrambled reparameterization."""
    r = sigma.shape[0]
    Q = _orthonormal_columns(rng, r, r)
    G = sample_gl(r, gl_alpha, rng).G
    H = Q @ G
    root = np.sqrt(sigma)
    B = (U_slots * root) @ H
    A = np.linalg.solve(H, (V_slots * root).T)
    return B, A


def _build_position(dirs, p, signs, spec, rng, schema):
    """Slot directions for one position: signed input partners plus filler slots."""
    K = signs.shape[0]
    r = spec.rank
    u_bases = [dirs["u_attr"][p][:, j] for j in range(K)] + [None] * (r - K)
    v_bases = [signs[j] * dirs["v_attr"][p][:, j] for j in range(K)] + [None] * (r - K)
    U_slots = _wobble_frame(u_bases, rng, spec.noise_std, spec.d_out)
    V_slots = _wobble_frame(v_bases, rng, spec.noise_std, spec.d_in)
    sig = _signal_sigmas(rng, K, schema, spec.signal_strength)
    sigma = np.concatenate([sig, _noise_sigmas(rng, r - K, spec.signal_strength, spec.noise_std)])
    return U_slots, V_slots, sigma


def _regression_target(dirs, spectra, spec):
    """Fixed seeded linear functional of the per-position sorted spectrum."""
    sorted_spec = np.sort(spectra, axis=-1)[:, ::-1] / spec.signal_strength
    raw = float((dirs["reg_w"] * sorted_spec).sum())
    return REGRESSION_Z_SCALE * (raw - dirs["reg_mu"]) / dirs["reg_sd"]


def generate(spec: GenSpec, out_dir) -> Path:
    """Write a full collection (manifest, truth sidecar, LWC1 files); returns manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dirs = planted_directions(spec)
    keys = spec.position_keys
    split_rng = np.random.default_rng([spec.seed, 0x5B117])
    order = split_rng.permutation(spec.n_checkpoints)

    if spec.label_schema == "task_retrieval":
        n_query = spec.n_query if spec.n_query is not None else round(0.2 * spec.n_checkpoints)
        if not 0 < n_query < spec.n_checkpoints:
            raise InvalidSpec(f"bad query count {n_query}")
        splits = {int(i): "query" for i in order[:n_query]}
        default_split = "gallery"
    else:
        n = spec.n_checkpoints
        n_train, n_val = round(0.8 * n), round(0.1 * n)
        splits = {}
        for pos, i in enumerate(order):
            splits[int(i)] = "train" if pos < n_train else ("val" if pos < n_train + n_val else "test")
        default_split = "train"

    entries = []
    truth_ckpts = {}
    for i in range(spec.n_checkpoints):
        cid = f"ck{i:05d}"
        rng = np.random.default_rng([spec.seed, 0xC4A0, i])
        record: dict = {}

        if spec.label_schema == "task_retrieval":
            task = int(rng.integers(0, spec.label_dim))
            record["task"] = task
            label = Label.task(f"task{task}")
        elif spec.label_schema == "multilabel":
            bits = (rng.random(spec.label_dim) < spec.attr_prob).astype(np.int64)
            record["bits"] = bits.tolist()
            label = Label.multilabel(bits)
        else:
            bits = None
            label = None  # filled after spectra are known

        if spec.label_schema == "task_retrieval":
            signs = dirs["codewords"][task]
        elif spec.label_schema == "multilabel":
            signs = 2.0 * bits.astype(np.float64) - 1.0
        else:
            signs = np.ones(spec.rank)

        positions = []
        spectra = []
        for p, key in enumerate(keys):
            schema = "multilabel" if spec.label_schema == "multilabel" else "regression"
            U_slots, V_slots, sigma = _build_position(dirs, p, signs, spec, rng, schema)
            spectra.append(sigma)
            B, A = _factor_slots(U_slots, V_slots, sigma, rng, spec.gl_alpha)
            positions.append((key, FactorPair(B.astype(np.float32), A.astype(np.float32))))

        spectra = np.stack(spectra)
        record["spectra"] = np.sort(spectra, axis=-1)[:, ::-1].tolist()
        if spec.label_schema == "regression":
            z = _regression_target(dirs, spectra, spec)
            clean = float(1.0 / (1.0 + np.exp(-z)))
            noisy_z = z + spec.noise_std * rng.standard_normal()
            record["clean_target"] = clean
            record["z"] = z
            label = Label.regression(float(1.0 / (1.0 + np.exp(-noisy_z))))
        elif spec.label_schema == "unlabeled":
            label = Label.none()

        write_checkpoint(LoraCheckpoint(id=cid, positions=positions, label=label), out_dir / f"{cid}.lwc")
        entries.append(ManifestEntry(id=cid, path=f"{cid}.lwc",
                                     split=splits.get(i, default_split), label=label))
        truth_ckpts[cid] = record

    manifest = CollectionManifest(
        format_version=1,
        label_schema=spec.label_schema,
        label_dim=spec.label_dim if spec.label_schema != "regression" else 1,
        rank=spec.rank,
        layer_count=spec.layer_count,
        entries=entries,
        generator_seed=spec.seed,
    )
    write_manifest(manifest, out_dir / "manifest.json")
    truth = {"spec": asdict(spec), "checkpoints": truth_ckpts}
    (out_dir / "truth.json").write_text(json.dumps(truth) + "\n")
    return out_dir / "manifest.json"


def load_truth(collection_dir) -> tuple[GenSpec, dict]:
    doc = json.loads((Path(collection_dir) / "truth.json").read_text())
    spec_doc = dict(doc["spec"])
    spec_doc["modules"] = tuple(spec_doc["modules"])
    return GenSpec(**spec_doc), doc["checkpoints"]


def pairing_features(ckpt: LoraCheckpoint, dirs: dict) -> np.ndarray:
    """Per (position, attribute): u_hat_a^T deltaW_p v_hat_a via r-dim products."""
    rows = []
    for p, (_, fp) in enumerate(ckpt.positions):
        cu = canonize(fp)
        pu = dirs["u_attr"][p].T @ cu.U.astype(np.float64)  # [K, r]
        pv = dirs["v_attr"][p].T @ cu.V.astype(np.float64)
        rows.append((pu * cu.sigma.astype(np.float64) * pv).sum(axis=1))
    return np.concatenate(rows)


def task_codeword_features(ckpt: LoraCheckpoint, dirs: dict) -> np.ndarray:
    """Per task: mean correlation of the signed pairing vector with its codeword."""
    pairing = pairing_features(ckpt, dirs).reshape(len(ckpt.positions), -1)
    codes = dirs["codewords"]
    scale = np.abs(pairing).sum(axis=1, keepdims=True) + 1e-30
    return (pairing / scale) @ codes.T  # [P, T] correlations, flattened by caller


def task_features(ckpt: LoraCheckpoint, dirs: dict) -> np.ndarray:
    return task_codeword_features(ckpt, dirs).ravel()


def sorted_sigma_features(ckpt: LoraCheckpoint) -> np.ndarray:
    rows = [np.sort(canonize(fp).sigma.astype(np.float64))[::-1] for _, fp in ckpt.positions]
    return np.concatenate(rows)


def _ridge_fit(X, Y, lam=1e-6):
    Xb = np.concatenate([X, np.ones((X.shape[0], 1))], axis=1)
    A = Xb.T @ Xb + lam * np.eye(Xb.shape[1])
    W = np.linalg.solve(A, Xb.T @ Y)
    return W


def _ridge_predict(W, X):
    Xb = np.concatenate([X, np.ones((X.shape[0], 1))], axis=1)
    return Xb @ W


def oracle_probe(collection) -> dict:
    """Closed-form linear probe on generator-known features; the attainability ceiling.

    Returns a dict with the task kind and its metric bundle, computed on
    the test split (multilabel/regression) or the query split (tasks).
    """
    from . import evaluation

    if isinstance(collection, (str, Path)):
        root = Path(collection)
        if root.is_file():
            root = root.parent
        manifest, accessor = load_collection(root)
    else:
        manifest, accessor = collection
        root = accessor.root
    if manifest.label_schema == "unlabeled":
        raise UnlabeledCollection("oracle probe needs labels")
    spec, truth = load_truth(root)
    dirs = planted_directions(spec)

    if manifest.label_schema == "multilabel":
        fit_ids, eval_ids = accessor.split_ids("train"), accessor.split_ids("test")
        X = {cid: pairing_features(accessor[cid], dirs) for cid in fit_ids + eval_ids}
        Y = {cid: np.asarray(truth[cid]["bits"], dtype=np.float64) for cid in fit_ids + eval_ids}
        Xf = np.stack([X[c] for c in fit_ids])
        W = _ridge_fit(Xf, 2.0 * np.stack([Y[c] for c in fit_ids]) - 1.0)
        scores = _ridge_predict(W, np.stack([X[c] for c in eval_ids]))
        labels = np.stack([Y[c] for c in eval_ids]).astype(np.int64)
        metrics = evaluation.classification_metrics(scores, labels)
        return {"task": "multilabel", "metrics": metrics, "n_eval": len(eval_ids)}

    if manifest.label_schema == "regression":
        fit_ids, eval_ids = accessor.split_ids("train"), accessor.split_ids("test")
        X = {cid: sorted_sigma_features(accessor[cid]) for cid in fit_ids + eval_ids}
        noisy = {e.id: e.label.score for e in manifest.entries}
        logit = lambda y: np.log(np.clip(y, 1e-9, 1 - 1e-9) / np.clip(1 - y, 1e-9, 1 - 1e-9))
        Xf = np.stack([X[c] for c in fit_ids])
        W = _ridge_fit(Xf, np.asarray([logit(noisy[c]) for c in fit_ids]))
        z = _ridge_predict(W, np.stack([X[c] for c in eval_ids]))
        preds = 1.0 / (1.0 + np.exp(-z))
        clean = np.asarray([truth[c]["clean_target"] for c in eval_ids])
        metrics = evaluation.regression_metrics(preds, clean)
        return {"task": "regression", "metrics": metrics, "n_eval": len(eval_ids)}

    # task_retrieval: fit one-vs-rest on the gallery, report query accuracy
    fit_ids, eval_ids = accessor.split_ids("gallery"), accessor.split_ids("query")
    X = {cid: task_features(accessor[cid], dirs) for cid in fit_ids + eval_ids}
    T = spec.label_dim
    onehot = np.eye(T)
    Yf = np.stack([onehot[truth[c]["task"]] for c in fit_ids])
    W = _ridge_fit(np.stack([X[c] for c in fit_ids]), 2.0 * Yf - 1.0)
    scores = _ridge_predict(W, np.stack([X[c] for c in eval_ids]))
    pred_task = scores.argmax(axis=1)
    true_task = np.asarray([truth[c]["task"] for c in eval_ids])
    acc = float((pred_task == true_task).mean())
    return {"task": "task_retrieval", "metrics": {"task_accuracy": acc}, "n_eval": len(eval_ids)}
