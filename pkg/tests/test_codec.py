import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqdet.codec import (
    AnnotatedObject,
    BBox,
    OrderingStrategy,
    TokenSequence,
    Vocabulary,
    construct_sequence,
    dequantize_coord,
    encode_object,
    order_objects,
    parse_sequence,
    quantize_coord,
    read_token_file,
    write_token_file,
)

V1000 = Vocabulary(1000, 80)


def obj(y0, x0, y1, x1, c=0):
    return AnnotatedObject(BBox(y0, x0, y1, x1), c)


@st.composite
def boxes(draw):
    ys = sorted(draw(st.floats(0, 1)) for _ in range(2))
    xs = sorted(draw(st.floats(0, 1)) for _ in range(2))
    return BBox(ys[0], xs[0], ys[1], xs[1])


def objects(n_classes, max_size=20):
    return st.lists(
        st.builds(AnnotatedObject, boxes(), st.integers(0, n_classes - 1)), max_size=max_size
    )


@pytest.mark.parametrize("x, expected", [(0.0, 0), (1.0, 999), (0.5, 499)])
def test_quantize_examples(x, expected):
    assert quantize_coord(x, 1000) == expected


@pytest.mark.parametrize("k, expected", [(0, 0.0), (999, 1.0), (499, 499 / 999)])
def test_dequantize_examples(k, expected):
    assert dequantize_coord(k, 1000) == expected


def test_dequantize_499_value():
    assert dequantize_coord(499, 1000) == pytest.approx(0.4994994995, abs=1e-10)


@pytest.mark.parametrize("x, n", [(-0.01, 10), (1.01, 10), (math.nan, 10), (0.5, 1)])
def test_quantize_domain_errors(x, n):
    with pytest.raises(ValueError):
        quantize_coord(x, n)


@pytest.mark.parametrize("k", [-1, 1000])
def test_dequantize_domain_errors(k):
    with pytest.raises(ValueError):
        dequantize_coord(k, 1000)


def test_quantize_vectorized_matches_scalar():
    x = np.linspace(0, 1, 37)
    assert list(quantize_coord(x, 13)) == [quantize_coord(float(v), 13) for v in x]


@given(st.floats(0, 1), st.integers(2, 5000))
def test_round_trip_bound(x, n):
    assert abs(dequantize_coord(quantize_coord(x, n), n) - x) < 1 / (n - 1)


@given(st.floats(0, 1), st.floats(0, 1), st.integers(2, 5000))
def test_quantize_monotone(a, b, n):
    lo, hi = sorted((a, b))
    assert quantize_coord(lo, n) <= quantize_coord(hi, n)


def test_vocabulary_layout():
    v = Vocabulary(1000, 80)
    assert v.size == 1083
    assert v.eos == 0
    assert v.coord_token(0) == 1 and v.coord_token(999) == 1000
    assert v.class_token(0) == 1001 and v.class_token(79) == 1080
    assert v.noise == 1081 and v.na == 1082


@given(st.integers(2, 300), st.integers(1, 100))
def test_vocabulary_partition(n_bins, n_classes):
    v = Vocabulary(n_bins, n_classes)
    for t in range(v.size):
        flags = [v.is_eos(t), v.is_coord(t), v.is_class(t), v.is_noise(t), v.is_na(t)]
        assert sum(flags) == 1
    with pytest.raises(ValueError):
        v.kind(v.size)


@pytest.mark.parametrize(
    "box, cls, n_bins, expected",
    [
        ((0.2, 0.3, 0.6, 0.9), 2, 1000, [200, 300, 600, 900, 1003]),
        ((0, 0, 1, 1), 0, 1000, [1, 1, 1000, 1000, 1001]),
        ((0.5, 0.5, 0.5, 0.5), 0, 10, [5, 5, 5, 5, 11]),
    ],
)
def test_encode_object_examples(box, cls, n_bins, expected):
    assert encode_object(obj(*box, cls), Vocabulary(n_bins, 80)) == expected


def test_bbox_invariants():
    with pytest.raises(ValueError):
        BBox(0.5, 0, 0.4, 1)
    with pytest.raises(ValueError):
        BBox(0, 0, 1, 1.2)
    assert BBox.clipped(0.7, -0.2, 0.3, 1.5).as_tuple() == (0.3, 0.0, 0.7, 1.0)


def test_order_area():
    small = obj(0, 0, 0.2, 0.3)  # area 0.06
    big = obj(0, 0, 0.3, 0.4)  # area 0.12
    assert order_objects([small, big], "area", np.random.default_rng(0)) == [big, small]


def test_order_dist2ori():
    far = obj(0.5, 0.5, 0.9, 0.9)
    near = obj(0.1, 0.1, 0.9, 0.9)
    assert order_objects([far, near], "dist2ori", np.random.default_rng(0)) == [near, far]


@pytest.mark.parametrize("strategy", list(OrderingStrategy))
def test_order_empty(strategy):
    assert order_objects([], strategy, np.random.default_rng(0)) == []


def test_order_class_compound():
    a = obj(0.5, 0.5, 0.6, 0.6, 1)
    b = obj(0.0, 0.0, 0.9, 0.9, 1)
    c = obj(0.1, 0.1, 0.2, 0.2, 0)
    rng = np.random.default_rng(0)
    assert order_objects([a, b, c], "class", rng) == [c, a, b]  # stable within class
    assert order_objects([a, b, c], "class_area", rng) == [c, b, a]
    assert order_objects([a, b, c], "class_dist2ori", rng) == [c, b, a]


def test_order_class_by_name():
    a, b = obj(0, 0, 1, 1, 0), obj(0, 0, 1, 1, 1)
    names = ["zebra", "ant"]
    assert order_objects([a, b], "class", np.random.default_rng(0), class_names=names) == [b, a]


def test_order_ties_keep_input_order():
    a, b, c = obj(0, 0, 0.5, 0.5, 2), obj(0, 0, 0.5, 0.5, 1), obj(0, 0, 0.5, 0.5, 0)
    assert order_objects([a, b, c], "area", np.random.default_rng(0)) == [a, b, c]


def test_random_order_depends_on_rng():
    objs = [obj(0, 0, 0.1 * i, 0.1 * i, 0) for i in range(1, 9)]
    a = order_objects(objs, "random", np.random.default_rng(1))
    b = order_objects(objs, "random", np.random.default_rng(1))
    c = order_objects(objs, "random", np.random.default_rng(2))
    assert a == b and a != c


@given(objects(5), st.sampled_from(list(OrderingStrategy)), st.integers(0, 2**32 - 1))
def test_order_is_permutation(objs, strategy, seed):
    out = order_objects(objs, strategy, np.random.default_rng(seed))
    key = lambda o: (o.box.as_tuple(), o.class_id)
    assert sorted(out, key=key) == sorted(objs, key=key)


def test_construct_sequence_examples():
    rng = np.random.default_rng(0)
    seq = construct_sequence([obj(0.2, 0.3, 0.6, 0.9, 2)], V1000, "random", rng)
    assert seq.input == seq.target == [200, 300, 600, 900, 1003, 0]
    assert seq.weights == [1.0] * 6

    empty = construct_sequence([], V1000, "random", rng)
    assert empty.target == [0] and empty.weights == [1.0]

    two = construct_sequence([obj(0, 0, 1, 1), obj(0.1, 0.1, 0.2, 0.2, 3)], V1000, "area", rng)
    assert len(two) == 11 and two.target[-1] == 0


def test_token_sequence_length_check():
    with pytest.raises(ValueError):
        TokenSequence([1, 2], [1, 2], [1.0])


def test_parse_sequence_examples():
    (only,) = parse_sequence([200, 300, 600, 900, 1003, 0], V1000)
    assert only.class_token == 1003
    assert only.box.as_tuple() == pytest.approx((199 / 999, 299 / 999, 599 / 999, 899 / 999))
    assert only.box.as_tuple() == pytest.approx((0.1992, 0.2993, 0.5996, 0.8999), abs=1e-4)
    assert parse_sequence([0], V1000) == []
    assert parse_sequence([200, 300, 600, 0], V1000) == []


def test_parse_drops_malformed_and_repairs_inverted():
    toks = [
        1003, 300, 600, 900, 1003,  # class token in a coordinate slot: dropped
        600, 900, 200, 300, 1001,  # inverted pairs: swapped
        10, 10, 20, 20, 500,  # coordinate token in the class slot: dropped
        10, 10, 20, 20, V1000.noise,  # noise class kept
        10, 10,  # trailing partial group: dropped
    ]
    out = parse_sequence(toks, V1000)
    assert [o.slot for o in out] == [1, 3]
    assert out[0].box.as_tuple() == pytest.approx((199 / 999, 299 / 999, 599 / 999, 899 / 999))
    assert out[1].class_token == V1000.noise


def test_parse_stops_at_first_eos():
    toks = [10, 10, 20, 20, 1001, 0, 10, 10, 20, 20, 1001]
    assert len(parse_sequence(toks, V1000)) == 1


@given(st.lists(st.integers(0, V1000.size - 1), max_size=60))
def test_parse_total_and_valid(tokens):
    out = parse_sequence(tokens, V1000)
    eos = tokens.index(0) if 0 in tokens else len(tokens)
    assert all(o.slot * 5 + 5 <= eos for o in out)
    for o in out:
        b = o.box
        assert b.y_min <= b.y_max and b.x_min <= b.x_max


@settings(max_examples=200)
@given(objects(7, max_size=30), st.integers(2, 2000), st.sampled_from(list(OrderingStrategy)))
def test_codec_round_trip(objs, n_bins, strategy):
    vocab = Vocabulary(n_bins, 7)
    rng = np.random.default_rng(0)
    ordered = order_objects(objs, strategy, np.random.default_rng(0))
    seq = construct_sequence(objs, vocab, strategy, rng)
    parsed = parse_sequence(seq.target, vocab)
    assert len(parsed) == len(objs)
    for o, p in zip(ordered, parsed):
        assert vocab.token_class(p.class_token) == o.class_id
        for a, b in zip(o.box.as_tuple(), p.box.as_tuple()):
            assert abs(a - b) < 1 / (n_bins - 1)


def test_token_file_round_trip(tmp_path):
    seqs = [[200, 300, 600, 900, 1003, 0], [0], []]
    path = tmp_path / "tokens.txt"
    write_token_file(path, seqs)
    assert path.read_text() == "200 300 600 900 1003 0\n0\n\n"
    assert read_token_file(path) == [[200, 300, 600, 900, 1003, 0], [0]]


def test_golden_token_file():
    """Frozen sequences for a fixed object set, one per ordering strategy."""
    from pathlib import Path

    objs = [obj(0.2, 0.3, 0.6, 0.9, 2), obj(0.05, 0.1, 0.15, 0.4, 0), obj(0.5, 0.0, 0.9, 0.3, 1)]
    got = [
        construct_sequence(objs, V1000, s, np.random.default_rng(7)).target
        for s in OrderingStrategy
    ]
    golden = read_token_file(Path(__file__).parent / "golden" / "sequences.txt")
    assert got == golden
