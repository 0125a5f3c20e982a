import json

import numpy as np
import pytest

from w2t import interchange as ic
from w2t.errors import (
    BadMagic,
    InvalidCheckpoint,
    LabelDimMismatch,
    MissingEntryFile,
    MixedRank,
    NonFiniteEntry,
    TruncatedPayload,
)


def make_pair(rng, d_out=4, d_in=4, r=2):
    return ic.FactorPair(
        rng.standard_normal((d_out, r)).astype(np.float32),
        rng.standard_normal((r, d_in)).astype(np.float32),
    )


def make_checkpoint(rng, n_positions=2, d_out=4, d_in=4, r=2, ckpt_id="c0"):
    kinds = [ic.Q, ic.V]
    positions = [
        (ic.PositionKey(i, kinds[i % 2]), make_pair(rng, d_out, d_in, r))
        for i in range(n_positions)
    ]
    return ic.LoraCheckpoint(id=ckpt_id, positions=positions)


def layout_size(positions):
    # independent recomputation of the LWC1 byte layout:
    # magic(4) + count(4) + per position header(4+1+4+4+4) + float32 payload
    total = 4 + 4
    for _, fp in positions:
        total += 17 + 4 * (fp.d_out * fp.rank + fp.rank * fp.d_in)
    return total


def test_file_size_matches_layout(tmp_path, rng=np.random.default_rng(0)):
    ckpt = make_checkpoint(rng, n_positions=1, d_out=4, d_in=4, r=2)
    path = tmp_path / "c0.lwc"
    ic.write_checkpoint(ckpt, path)
    # 4+4 magic/count, 17-byte position header, 4*(4*2 + 2*4) payload = 89
    assert layout_size(ckpt.positions) == 89
    assert path.stat().st_size == 89


def test_round_trip_bitwise(tmp_path):
    rng = np.random.default_rng(1)
    ckpt = make_checkpoint(rng, n_positions=3, d_out=6, d_in=5, r=3, ckpt_id="rt")
    # give it a third position key distinct from the first two
    ckpt = ic.LoraCheckpoint(
        id="rt",
        positions=[
            (ic.PositionKey(0, ic.Q), make_pair(rng, 6, 5, 3)),
            (ic.PositionKey(0, ic.V), make_pair(rng, 6, 5, 3)),
            (ic.PositionKey(1, ic.Q), make_pair(rng, 6, 5, 3)),
        ],
    )
    path = tmp_path / "rt.lwc"
    ic.write_checkpoint(ckpt, path)
    back = ic.read_checkpoint(path)
    assert ic.checkpoints_equal(ckpt, back)


def test_position_order_is_canonical(tmp_path):
    rng = np.random.default_rng(2)
    pairs = [make_pair(rng) for _ in range(3)]
    keys = [ic.PositionKey(1, ic.Q), ic.PositionKey(0, ic.V), ic.PositionKey(0, ic.Q)]
    a = ic.LoraCheckpoint(id="x", positions=list(zip(keys, pairs)))
    shuffled = [(keys[2], pairs[2]), (keys[0], pairs[0]), (keys[1], pairs[1])]
    b = ic.LoraCheckpoint(id="x", positions=shuffled)
    pa, pb = tmp_path / "a.lwc", tmp_path / "b.lwc"
    ic.write_checkpoint(a, pa)
    ic.write_checkpoint(b, pb)
    assert pa.read_bytes() == pb.read_bytes()
    assert [k.sort_key() for k, _ in a.positions] == sorted(k.sort_key() for k in keys)


def test_empty_positions_rejected():
    with pytest.raises(InvalidCheckpoint):
        ic.LoraCheckpoint(id="e", positions=[])


def test_duplicate_keys_rejected():
    rng = np.random.default_rng(3)
    with pytest.raises(InvalidCheckpoint):
        ic.LoraCheckpoint(
            id="d",
            positions=[
                (ic.PositionKey(0, ic.Q), make_pair(rng)),
                (ic.PositionKey(0, ic.Q), make_pair(rng)),
            ],
        )


def test_mixed_rank_rejected():
    rng = np.random.default_rng(4)
    with pytest.raises(MixedRank):
        ic.LoraCheckpoint(
            id="m",
            positions=[
                (ic.PositionKey(0, ic.Q), make_pair(rng, r=2)),
                (ic.PositionKey(0, ic.V), make_pair(rng, r=3, d_out=5, d_in=5)),
            ],
        )


def test_factor_pair_validation():
    with pytest.raises(NonFiniteEntry):
        ic.FactorPair(np.array([[np.nan], [0.0]]), np.array([[1.0, 2.0]]))
    with pytest.raises(InvalidCheckpoint):
        ic.FactorPair(np.zeros((1, 2)), np.zeros((2, 4)))  # d_out < r


def test_bad_magic(tmp_path):
    p = tmp_path / "bad.lwc"
    p.write_bytes(b"XXXX" + b"\x00" * 16)
    with pytest.raises(BadMagic):
        ic.read_checkpoint(p)


def test_truncated_payload(tmp_path):
    rng = np.random.default_rng(5)
    ckpt = make_checkpoint(rng, n_positions=1)
    p = tmp_path / "t.lwc"
    ic.write_checkpoint(ckpt, p)
    data = p.read_bytes()
    p.write_bytes(data[: len(data) - 10])  # cut mid-matrix
    with pytest.raises(TruncatedPayload):
        ic.read_checkpoint(p)


def test_trailing_bytes_rejected(tmp_path):
    rng = np.random.default_rng(6)
    ckpt = make_checkpoint(rng, n_positions=1)
    p = tmp_path / "t.lwc"
    ic.write_checkpoint(ckpt, p)
    p.write_bytes(p.read_bytes() + b"\x00\x00")
    with pytest.raises(InvalidCheckpoint):
        ic.read_checkpoint(p)


def test_nonfinite_payload_rejected(tmp_path):
    rng = np.random.default_rng(7)
    ckpt = make_checkpoint(rng, n_positions=1)
    p = tmp_path / "n.lwc"
    ic.write_checkpoint(ckpt, p)
    data = bytearray(p.read_bytes())
    nan = np.array([np.nan], dtype="<f4").tobytes()
    data[25 : 25 + 4] = nan  # first float of B
    p.write_bytes(bytes(data))
    with pytest.raises(NonFiniteEntry):
        ic.read_checkpoint(p)


def test_mixed_rank_file_rejected(tmp_path):
    rng = np.random.default_rng(8)
    a = make_pair(rng, 4, 4, 2)
    b = make_pair(rng, 5, 5, 3)
    # write two positions with different ranks by hand
    import struct

    chunks = [ic.LWC1_MAGIC, struct.pack("<I", 2)]
    for key, fp in [(ic.PositionKey(0, ic.Q), a), (ic.PositionKey(0, ic.V), b)]:
        chunks.append(
            struct.pack("<IBIII", key.layer_index, key.module_kind.code, fp.d_out, fp.d_in, fp.rank)
        )
        chunks.append(fp.B.astype("<f4").tobytes())
        chunks.append(fp.A.astype("<f4").tobytes())
    p = tmp_path / "mr.lwc"
    p.write_bytes(b"".join(chunks))
    with pytest.raises(MixedRank):
        ic.read_checkpoint(p)


def test_corrupt_fuzz_never_returns_invalid(tmp_path):
    rng = np.random.default_rng(9)
    ckpt = make_checkpoint(rng, n_positions=2, d_out=5, d_in=4, r=2)
    p = tmp_path / "f.lwc"
    ic.write_checkpoint(ckpt, p)
    pristine = p.read_bytes()
    for trial in range(200):
        data = bytearray(pristine)
        op = trial % 3
        if op == 0:
            cut = int(rng.integers(0, len(data)))
            data = data[:cut]
        elif op == 1:
            pos = int(rng.integers(0, len(data)))
            data[pos] = int(rng.integers(0, 256))
        else:
            data += bytes(rng.integers(0, 256, size=int(rng.integers(1, 8))).tolist())
        p.write_bytes(bytes(data))
        try:
            out = ic.read_checkpoint(p)
        except (InvalidCheckpoint, Exception):
            continue
        # if parsing succeeded, every type invariant must hold
        assert len(out.positions) >= 1
        ranks = {fp.rank for _, fp in out.positions}
        assert len(ranks) == 1
        for _, fp in out.positions:
            assert np.isfinite(fp.B).all() and np.isfinite(fp.A).all()
            assert fp.d_out >= fp.rank and fp.d_in >= fp.rank


def build_collection(tmp_path, rng, n=10, label_dim=3):
    entries = []
    for i in range(n):
        ckpt = make_checkpoint(rng, n_positions=2, ckpt_id=f"c{i}")
        ic.write_checkpoint(ckpt, tmp_path / f"c{i}.lwc")
        bits = rng.integers(0, 2, size=label_dim)
        entries.append(
            ic.ManifestEntry(
                id=f"c{i}", path=f"c{i}.lwc",
                split="train" if i < 8 else ("val" if i == 8 else "test"),
                label=ic.Label.multilabel(bits),
            )
        )
    manifest = ic.CollectionManifest(
        format_version=1, label_schema="multilabel", label_dim=label_dim,
        rank=2, layer_count=2, entries=entries, generator_seed=123,
    )
    ic.write_manifest(manifest, tmp_path / "manifest.json")
    return manifest


def test_load_collection_ids(tmp_path):
    rng = np.random.default_rng(10)
    build_collection(tmp_path, rng, n=10)
    manifest, acc = ic.load_collection(tmp_path / "manifest.json")
    assert acc.ids() == [f"c{i}" for i in range(10)]
    ckpt = acc["c3"]
    assert ckpt.id == "c3"
    assert ckpt.label.kind == "multilabel"
    assert len(acc.split_ids("train")) == 8


def test_label_dim_mismatch(tmp_path):
    rng = np.random.default_rng(11)
    build_collection(tmp_path, rng, n=2, label_dim=3)
    doc = json.loads((tmp_path / "manifest.json").read_text())
    doc["label_dim"] = 8
    (tmp_path / "manifest.json").write_text(json.dumps(doc))
    with pytest.raises(LabelDimMismatch):
        ic.load_collection(tmp_path / "manifest.json")


def test_missing_entry_file(tmp_path):
    rng = np.random.default_rng(12)
    build_collection(tmp_path, rng, n=2)
    (tmp_path / "c1.lwc").unlink()
    with pytest.raises(MissingEntryFile):
        ic.load_collection(tmp_path / "manifest.json")


def test_canonical_file_round_trip(tmp_path):
    rng = np.random.default_rng(13)
    from w2t.canon import canonize

    fp = make_pair(rng, 6, 5, 2)
    cu = canonize(fp)
    key = ic.PositionKey(0, ic.Q)
    ic.write_canonical([key], [cu], tmp_path / "c.lwcc")
    [(key2, (U, sigma, V))] = ic.read_canonical(tmp_path / "c.lwcc")
    assert key2 == key
    np.testing.assert_array_equal(U, cu.U.astype(np.float32))
    np.testing.assert_array_equal(sigma, cu.sigma.astype(np.float32))
    np.testing.assert_array_equal(V, cu.V.astype(np.float32))
