import numpy as np
import pytest

from w2t import canon, encoder, interchange as ic, nn
from w2t.errors import (
    ConfigMismatch,
    EmptySplit,
    LabelSchemaMismatch,
    LayoutMismatch,
)
from w2t.gradcheck import check_gradients


def small_config(mode="full", **kw):
    defaults = dict(
        rank=2, layer_count=2, d_out=6, d_in=5, module_codes=(0, 2),
        out_dim=3, task="multilabel", d_model=8, rank_layers=1,
        pos_layers=1, heads=2, head_width=4, mode=mode,
    )
    defaults.update(kw)
    return encoder.EncoderConfig(**defaults)


def make_checkpoint(rng, config, ckpt_id="c"):
    positions = []
    for layer in range(config.layer_count):
        for code in config.module_codes:
            positions.append(
                (
                    ic.PositionKey(layer, ic.ModuleKind(code)),
                    ic.FactorPair(
                        rng.standard_normal((config.d_out, config.rank)).astype(np.float32),
                        rng.standard_normal((config.rank, config.d_in)).astype(np.float32),
                    ),
                )
            )
    return ic.LoraCheckpoint(id=ckpt_id, positions=positions)


def test_tokenize_modulation_identity_with_zeroed_mlp():
    config = small_config()
    params = encoder.flat_params(encoder.build_params(config, seed=1))
    # force the modulation MLP to output (0, 0): tau must equal the fused z
    params["tokenizer.sig_w2"].data[:] = 0.0
    rng = np.random.default_rng(2)
    u = rng.standard_normal((4, config.d_out))
    v = rng.standard_normal((4, config.d_in))
    tau0 = encoder.tokenize(u, v, np.zeros(4), params).data
    tau1 = encoder.tokenize(u, v, np.full(4, 3.0), params).data
    np.testing.assert_array_equal(tau0, tau1)
    zu = u @ params["tokenizer.phi_u_w"].data + params["tokenizer.phi_u_b"].data
    zv = v @ params["tokenizer.phi_v_w"].data + params["tokenizer.phi_v_b"].data
    z = np.concatenate([zu, zv], -1) @ params["tokenizer.fuse_w"].data + params["tokenizer.fuse_b"].data
    np.testing.assert_allclose(tau0, z, atol=1e-12)


def test_tokenize_modulation_only_scales_and_shifts():
    config = small_config()
    groups = encoder.build_params(config, seed=3)
    rng = np.random.default_rng(4)
    # give the modulation MLP real weights
    groups["tokenizer"].tensors["sig_w2"].data = rng.standard_normal(
        groups["tokenizer"].tensors["sig_w2"].data.shape
    )
    params = encoder.flat_params(groups)
    u = rng.standard_normal((1, config.d_out))
    v = rng.standard_normal((1, config.d_in))
    taus = []
    mods = []
    for sigma in (0.3, 2.0):
        tau = encoder.tokenize(u, v, np.array([sigma]), params).data
        sh = np.log1p(np.array([[sigma]]))
        from scipy.stats import norm

        hidden = sh @ params["tokenizer.sig_w1"].data + params["tokenizer.sig_b1"].data
        hidden = hidden * norm.cdf(hidden)
        mod = hidden @ params["tokenizer.sig_w2"].data + params["tokenizer.sig_b2"].data
        mods.append(mod)
        taus.append(tau)
    d = config.d_model
    z0 = (taus[0] - mods[0][:, d:]) / (1 + np.tanh(mods[0][:, :d]))
    z1 = (taus[1] - mods[1][:, d:]) / (1 + np.tanh(mods[1][:, :d]))
    assert not np.allclose(taus[0], taus[1])
    np.testing.assert_allclose(z0, z1, atol=1e-9)


def test_tokenize_gradients():
    config = small_config()
    params = encoder.flat_params(encoder.build_params(config, seed=5))
    rng = np.random.default_rng(6)
    weights = rng.standard_normal(config.d_model)
    # give modulation real weights so the sigma path is non-trivial
    params["tokenizer.sig_w2"].data = 0.3 * rng.standard_normal(params["tokenizer.sig_w2"].data.shape)

    def f(ts):
        p = dict(params)
        tok = encoder.tokenize(ts[0], ts[1], nn.add(nn.mul(ts[2], ts[2]), 0.1), p)
        return nn.tsum(nn.mul(tok, weights))

    err = check_gradients(
        f,
        [rng.standard_normal((3, config.d_out)),
         rng.standard_normal((3, config.d_in)),
         rng.standard_normal(3)],
        n_probes=20,
        rng=rng,
    )
    assert err <= 1e-3


def test_rank_pool_cases():
    rng = np.random.default_rng(7)
    tokens = rng.standard_normal((2, 3, 4))
    equal = encoder.rank_pool(tokens, np.ones((2, 3))).data
    np.testing.assert_allclose(equal, tokens.mean(axis=1), atol=1e-12)
    onehot = encoder.rank_pool(tokens, np.tile([1.0, 0.0, 0.0], (2, 1))).data
    np.testing.assert_allclose(onehot, tokens[:, 0], atol=1e-12)
    zero = encoder.rank_pool(tokens, np.zeros((2, 3))).data
    np.testing.assert_allclose(zero, tokens.mean(axis=1), atol=1e-12)


def test_encode_single_position_reduces_to_embedded_token():
    # identity blocks at init: h is the trunk-normalized embedded token,
    # and attention pooling over one position contributes weight one
    config = small_config(rank=1, layer_count=1, module_codes=(0,), pos_layers=2)
    enc = encoder.Encoder.init(config, seed=8)
    rng = np.random.default_rng(9)
    ckpt = ic.LoraCheckpoint(
        id="one",
        positions=[(ic.PositionKey(0, ic.Q), ic.FactorPair(
            rng.standard_normal((config.d_out, 1)).astype(np.float32),
            rng.standard_normal((1, config.d_in)).astype(np.float32),
        ))],
    )
    h = enc.encode(ckpt)
    params = enc._infer_params()
    arrays = encoder.checkpoint_arrays(ckpt, config)
    tau = encoder.tokenize(arrays["U"][None], arrays["V"][None], arrays["S"][None], params).data
    token = tau[0, 0, 0] + params["embeddings.e_layer"].data[0] + params["embeddings.e_module"].data[0]
    centered = token - token.mean()
    expected = centered / np.sqrt((centered * centered).mean() + 1e-5)
    np.testing.assert_allclose(h, expected, rtol=1e-4, atol=1e-5)


def test_encode_invariant_to_position_input_order():
    config = small_config()
    enc = encoder.Encoder.init(config, seed=10)
    rng = np.random.default_rng(11)
    ckpt = make_checkpoint(rng, config)
    shuffled = ic.LoraCheckpoint(id=ckpt.id, positions=list(reversed(ckpt.positions)))
    np.testing.assert_array_equal(enc.encode(ckpt), enc.encode(shuffled))


def test_head_zero_init_gives_half_probabilities():
    config = small_config(out_dim=8)
    enc = encoder.Encoder.init(config, seed=12)
    # zero the output layer: every logit collapses to 0, sigmoid to 0.5
    enc.groups["head"].tensors["h2"].data[:] = 0.0
    enc.invalidate()
    rng = np.random.default_rng(13)
    logits = enc.predict(make_checkpoint(rng, config))
    assert logits.shape == (8,)
    np.testing.assert_array_equal(logits, np.zeros(8))
    np.testing.assert_allclose(1 / (1 + np.exp(-logits)), np.full(8, 0.5))


def test_full_composition_gradients():
    config = small_config()
    groups = encoder.build_params(config, seed=14)
    params = encoder.flat_params(groups)
    rng = np.random.default_rng(15)
    # nudge zero-initialized layers so every path carries signal
    for name in ("tokenizer.sig_w2", "rank_encoder.b0_wo", "rank_encoder.b0_m2",
                 "pos_encoder.b0_wo", "pos_encoder.b0_m2", "head.h2"):
        params[name].data = 0.2 * rng.standard_normal(params[name].data.shape)

    N, P, r = 2, 2, config.rank
    layer_idx = np.array([0, 1])
    module_idx = np.array([0, 1])
    targets = (rng.random((N, config.out_dim)) < 0.4).astype(np.float64)
    checked = ["tokenizer.phi_u_w", "tokenizer.fuse_w", "tokenizer.sig_w1",
               "rank_encoder.b0_wq", "rank_encoder.b0_m1", "embeddings.e_layer",
               "pos_encoder.b0_wv", "pos_encoder.pool_q", "head.h1", "head.h2"]

    def f(ts):
        p = dict(params)
        for name, t in zip(checked, ts[3:]):
            p[name] = t
        batch = {
            "U": ts[0], "V": ts[1],
            "S": nn.add(nn.mul(ts[2], ts[2]), 0.05),
            "layer_idx": layer_idx, "module_idx": module_idx,
        }
        h = encoder.encode_batch(batch, p, config)
        return nn.bce_with_logits(encoder.head_forward(h, p), targets)

    inputs = [
        rng.standard_normal((N, P, r, config.d_out)),
        rng.standard_normal((N, P, r, config.d_in)),
        rng.standard_normal((N, P, r)),
    ] + [params[name].data.copy() for name in checked]
    assert check_gradients(f, inputs, n_probes=8, rng=rng) <= 1e-3


def test_raw_cos_similarity():
    config = small_config()
    rng = np.random.default_rng(16)
    a = make_checkpoint(rng, config, "a")
    assert encoder.raw_cos_similarity(a, a) == pytest.approx(1.0)
    negated = ic.LoraCheckpoint(
        id="neg",
        positions=[(k, ic.FactorPair(-fp.B, -fp.A)) for k, fp in a.positions],
    )
    assert encoder.raw_cos_similarity(a, negated) == pytest.approx(-1.0)
    transformed = ic.LoraCheckpoint(
        id="gl",
        positions=[
            (k, canon.apply_gl(fp, canon.sample_gl(config.rank, 1.0, rng)))
            for k, fp in a.positions
        ],
    )
    assert abs(encoder.raw_cos_similarity(a, transformed)) < 0.99
    other_layout = ic.LoraCheckpoint(
        id="ol", positions=[a.positions[0]],
    )
    with pytest.raises(LayoutMismatch):
        encoder.raw_cos_similarity(a, other_layout)


def test_untrained_full_mode_is_gl_stable_and_no_canon_is_not():
    rng = np.random.default_rng(17)
    config = small_config(d_out=16, d_in=12, rank=4)
    ckpt = make_checkpoint(rng, config)
    transformed = ic.LoraCheckpoint(
        id=ckpt.id,
        positions=[
            (k, canon.apply_gl(fp, canon.sample_gl(config.rank, 1.0, rng)))
            for k, fp in ckpt.positions
        ],
    )
    full = encoder.Encoder.init(config, seed=18)
    h0, h1 = full.encode(ckpt), full.encode(transformed)
    drift_full = np.linalg.norm(h1 - h0) / np.linalg.norm(h0)
    assert drift_full <= 1e-3

    raw_cfg = small_config(d_out=16, d_in=12, rank=4, mode="no_canon")
    raw_enc = encoder.Encoder.init(raw_cfg, seed=18)
    g0, g1 = raw_enc.encode(ckpt), raw_enc.encode(transformed)
    drift_raw = np.linalg.norm(g1 - g0) / np.linalg.norm(g0)
    assert drift_raw > 100 * max(drift_full, 1e-9)


def build_collection(tmp_path, rng, config, n=24, schema="multilabel", const_target=None,
                     noise=0.05):
    entries = []
    for i in range(n):
        ckpt = make_checkpoint(rng, config, ckpt_id=f"c{i}")
        ic.write_checkpoint(ckpt, tmp_path / f"c{i}.lwc")
        if schema == "multilabel":
            label = ic.Label.multilabel(rng.integers(0, 2, size=config.out_dim))
        else:
            y = const_target + noise * rng.standard_normal()
            label = ic.Label.regression(float(np.clip(y, 0, 1)))
        split = "train" if i < int(n * 0.7) else ("val" if i < int(n * 0.85) else "test")
        entries.append(ic.ManifestEntry(id=f"c{i}", path=f"c{i}.lwc", split=split, label=label))
    manifest = ic.CollectionManifest(
        format_version=1, label_schema=schema,
        label_dim=config.out_dim if schema == "multilabel" else 1,
        rank=config.rank, layer_count=config.layer_count, entries=entries,
    )
    ic.write_manifest(manifest, tmp_path / "manifest.json")
    return tmp_path / "manifest.json"


def test_train_smoke_loss_decreases(tmp_path):
    rng = np.random.default_rng(19)
    config = small_config()
    path = build_collection(tmp_path, rng, config, n=24)
    hyper = encoder.TrainHyper(epochs=6, batch=8, base_lr=5e-3, warmup=2, seed=1)
    enc, log = encoder.train(path, config, hyper)
    assert len(log) == 6
    assert log[0]["stage"] == "warmup" and log[-1]["stage"] == "full"
    assert log[-1]["train_loss"] < log[0]["train_loss"]


def test_train_zero_epochs_returns_init(tmp_path):
    rng = np.random.default_rng(20)
    config = small_config()
    path = build_collection(tmp_path, rng, config, n=24)
    hyper = encoder.TrainHyper(epochs=0, batch=8, seed=3)
    enc, log = encoder.train(path, config, hyper)
    assert log == []
    fresh = encoder.flat_params(encoder.build_params(config, seed=3))
    for name, tensor in encoder.flat_params(enc.groups).items():
        np.testing.assert_array_equal(tensor.data, fresh[name].data)


def test_train_schema_mismatch(tmp_path):
    rng = np.random.default_rng(21)
    config = small_config()
    path = build_collection(tmp_path, rng, config, n=12)
    reg_config = small_config(task="regression", out_dim=1)
    with pytest.raises(LabelSchemaMismatch):
        encoder.train(path, reg_config, encoder.TrainHyper(epochs=1))


def test_train_empty_split(tmp_path):
    rng = np.random.default_rng(22)
    config = small_config()
    path = build_collection(tmp_path, rng, config, n=6)
    import json

    doc = json.loads(path.read_text())
    for c in doc["checkpoints"]:
        c["split"] = "train"
    path.write_text(json.dumps(doc))
    with pytest.raises(EmptySplit):
        encoder.train(path, config, encoder.TrainHyper(epochs=1))


def test_train_regression_constant_target(tmp_path):
    rng = np.random.default_rng(23)
    config = small_config(task="regression", out_dim=1)
    path = build_collection(tmp_path, rng, config, n=30, schema="regression",
                            const_target=0.6, noise=0.05)
    hyper = encoder.TrainHyper(epochs=30, batch=8, base_lr=0.02, warmup=2, seed=5)
    enc, log = encoder.train(path, config, hyper)
    manifest, acc = ic.load_collection(tmp_path)
    preds = [float(enc.predict(acc[i])[0]) for i in acc.split_ids("test")]
    mae_vs_clean = float(np.mean(np.abs(np.array(preds) - 0.6)))
    assert mae_vs_clean <= 0.05


def test_config_mismatch_on_rank():
    config = small_config()
    enc = encoder.Encoder.init(config, seed=24)
    rng = np.random.default_rng(25)
    bad = make_checkpoint(rng, small_config(rank=3))
    with pytest.raises(ConfigMismatch):
        enc.encode(bad)


def test_encoder_save_load_round_trip(tmp_path):
    config = small_config()
    enc = encoder.Encoder.init(config, seed=26)
    rng = np.random.default_rng(27)
    ckpt = make_checkpoint(rng, config)
    before = enc.encode(ckpt)
    enc.save(tmp_path / "model", meta={"epoch": 0})
    loaded = encoder.Encoder.load(tmp_path / "model")
    assert loaded.config == config
    np.testing.assert_allclose(loaded.encode(ckpt), before, atol=1e-6)
