import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moesteer.errors import ContractError, FormatError, SplitError
from moesteer.moe import CircuitSpec, behavior_labeler, behavior_prompts, build_planted_fixture, planted_config
from moesteer.traces import (
    RoutingTrace,
    SplitSpec,
    TraceDataset,
    collect_traces,
    decode_traces,
    encode_traces,
    load_traces,
    save_traces,
    split,
    split_indices,
)


def random_dataset(n=6, L=3, E=4, seed=0, f32=True):
    rng = np.random.default_rng(seed)
    traces = []
    for i in range(n):
        x = rng.normal(size=(int(rng.integers(1, 6)), L, E))
        if f32:
            x = x.astype(np.float32).astype(np.float64)
        traces.append(RoutingTrace(x, i % 2, f"r:{i}"))
    return TraceDataset(traces, L, E)


@pytest.fixture(scope="module")
def fixture_model():
    c = CircuitSpec()
    return build_planted_fixture(planted_config(c, seed=0), c), c


def test_collect_labels_follow_flags(fixture_model):
    m, c = fixture_model
    rng = np.random.default_rng(0)
    a = collect_traces(m, behavior_prompts(c, "a", 15, rng), behavior_labeler(c))
    b = collect_traces(m, behavior_prompts(c, "b", 15, rng), behavior_labeler(c))
    assert set(a.labels.tolist()) == {0} and len(a) == 15
    assert set(b.labels.tolist()) == {1} and len(b) == 15
    for t in a:
        assert t.logits.shape == (t.T, m.config.num_layers, m.config.experts_per_layer)


def test_collect_empty_and_abstain(fixture_model):
    m, c = fixture_model
    empty = collect_traces(m, [], behavior_labeler(c))
    assert len(empty) == 0 and empty.skipped == 0
    # content-only prompts end on a content answer, which the labeler abstains on
    ds = collect_traces(m, [[1, 2, 3], [c.flag_b, 4, c.query]], behavior_labeler(c))
    assert len(ds) == 1 and ds.skipped == 1
    assert ds[0].source == "prompt:1"


def test_collect_is_deterministic(fixture_model):
    m, c = fixture_model
    prompts = behavior_prompts(c, "b", 5, np.random.default_rng(2))
    d1 = collect_traces(m, prompts, behavior_labeler(c))
    d2 = collect_traces(m, prompts, behavior_labeler(c))
    assert all(np.array_equal(x.logits, y.logits) for x, y in zip(d1, d2))


def test_routing_trace_validation():
    with pytest.raises(ContractError):
        RoutingTrace(np.zeros((0, 2, 2)), 0)
    with pytest.raises(ContractError):
        RoutingTrace(np.zeros((1, 2, 2)), 2)
    with pytest.raises(ContractError):
        RoutingTrace(np.full((1, 2, 2), np.inf), 1)
    with pytest.raises(ContractError):
        TraceDataset([RoutingTrace(np.zeros((1, 2, 3)), 0)], 2, 4)


# -- split ---------------------------------------------------------------------------------


def test_split_100_balanced():
    labels = [0] * 50 + [1] * 50
    tr, va = split_indices(labels, SplitSpec(0.8, seed=1))
    lab = np.array(labels)
    assert len(tr) == 80 and len(va) == 20
    assert (lab[tr] == 0).sum() == 40 and (lab[va] == 1).sum() == 10
    assert not set(tr) & set(va)


def test_split_5_5():
    tr, va = split_indices([0] * 5 + [1] * 5, SplitSpec(0.8))
    lab = np.array([0] * 5 + [1] * 5)
    assert sorted(np.bincount(lab[tr]).tolist()) == [4, 4]
    assert sorted(np.bincount(lab[va]).tolist()) == [1, 1]


def test_split_seeded():
    labels = [0, 1] * 30
    assert all(np.array_equal(a, b) for a, b in zip(split_indices(labels, SplitSpec(seed=4)),
                                                     split_indices(labels, SplitSpec(seed=4))))


@pytest.mark.parametrize("labels", [[0] * 10, [0] * 5 + [1]])
def test_split_errors(labels):
    with pytest.raises(SplitError):
        split_indices(labels)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 60), st.integers(2, 60), st.floats(0.1, 0.9), st.integers(0, 1000))
def test_split_is_stratified_within_one(n0, n1, frac, seed):
    labels = np.array([0] * n0 + [1] * n1)
    tr, va = split_indices(labels, SplitSpec(frac, seed))
    assert sorted(np.concatenate([tr, va]).tolist()) == list(range(n0 + n1))
    for c, n in ((0, n0), (1, n1)):
        k = int((labels[tr] == c).sum())
        assert abs(k - frac * n) <= 1 + 1e-9
        assert (labels[va] == c).sum() >= 1


def test_split_dataset_objects():
    tr, va = split(random_dataset(10))
    assert len(tr) + len(va) == 10


# -- file format ---------------------------------------------------------------------------


def test_round_trip_float32_representable(tmp_path):
    ds = random_dataset()
    save_traces(ds, tmp_path / "t.bin")
    back = load_traces(tmp_path / "t.bin")
    assert (back.L, back.E, len(back)) == (ds.L, ds.E, len(ds))
    for a, b in zip(ds, back):
        assert np.array_equal(a.logits, b.logits)
        assert (a.label, a.source) == (b.label, b.source)
    assert back.meta["convention"] == "raw affine gate output"


def test_round_trip_float64_is_bit_exact():
    ds = random_dataset(f32=False, seed=3)
    back = decode_traces(encode_traces(ds, dtype="float64"))
    for a, b in zip(ds, back):
        assert np.array_equal(a.logits, b.logits)


def test_corrupted_magic():
    data = bytearray(encode_traces(random_dataset()))
    data[0] ^= 0xFF
    with pytest.raises(FormatError) as info:
        decode_traces(bytes(data))
    assert info.value.offset == 0


def test_truncated_file():
    data = encode_traces(random_dataset())
    with pytest.raises(FormatError, match="truncated"):
        decode_traces(data[:-3])


def test_version_mismatch():
    data = encode_traces(random_dataset())
    data = data.replace(b'"format_version": 1', b'"format_version": 9')
    with pytest.raises(FormatError, match="version"):
        decode_traces(data)


def test_inconsistent_trace_block_names_index():
    ds = random_dataset(n=3, E=8)
    bad = TraceDataset([RoutingTrace(np.zeros((2, 3, 4)), 0)], 3, 4)
    good = encode_traces(ds)
    # splice a record with E=4 in as the second trace
    head_len = struct.unpack_from("<I", good, 8)[0]
    pos = 12 + head_len
    T, _, _, _, slen = struct.unpack_from("<IBHHH", good, pos)
    first_end = pos + 11 + slen + T * 3 * 8 * 4
    bad_rec = encode_traces(bad)
    bad_pos = 12 + struct.unpack_from("<I", bad_rec, 8)[0]
    spliced = good[:first_end] + bad_rec[bad_pos:] + good[first_end:]
    with pytest.raises(FormatError) as info:
        decode_traces(spliced)
    assert info.value.trace_index == 1
    assert "trace 1" in str(info.value)
