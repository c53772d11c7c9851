import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import benchmark
from skelssl import data as D
from skelssl.data import DataError, Dataset, ParseError, SkeletonSequence, SplitSpec


def small_dataset(n=3, T=4, J=2, seed=0, labels=True):
    rng = np.random.default_rng(seed)
    seqs = [
        SkeletonSequence(rng.normal(size=(T, J, 3)) * 10.0 ** rng.integers(-8, 8), i % 2 if labels else None, f"s{i}")
        for i in range(n)
    ]
    return Dataset(tuple(seqs), 2, J)


def logistic_train_accuracy(F, y, C, iters=2000, lr=0.5):
    """Plain softmax regression by full-batch gradient descent (test oracle)."""
    F = (F - F.mean(0)) / (F.std(0) + 1e-9)
    W = np.zeros((F.shape[1], C))
    b = np.zeros(C)
    Y = np.eye(C)[y]
    for _ in range(iters):
        Z = F @ W + b
        Z -= Z.max(1, keepdims=True)
        P = np.exp(Z)
        P /= P.sum(1, keepdims=True)
        G = (P - Y) / len(F)
        W -= lr * F.T @ G
        b -= lr * G.sum(0)
    return float(np.mean((F @ W + b).argmax(1) == y))


# --- types --------------------------------------------------------------------


def test_sequence_validation():
    with pytest.raises(DataError):
        SkeletonSequence(np.zeros((4, 2)))
    with pytest.raises(DataError):
        SkeletonSequence(np.zeros((0, 2, 3)))
    with pytest.raises(DataError):
        SkeletonSequence(np.full((2, 2, 3), np.nan))


def test_sequence_frames_are_read_only():
    s = SkeletonSequence(np.zeros((2, 2, 3)))
    with pytest.raises(ValueError):
        s.frames[0, 0, 0] = 1.0


def test_dataset_validation():
    a = SkeletonSequence(np.zeros((2, 2, 3)), 0)
    b = SkeletonSequence(np.zeros((2, 3, 3)), 0)
    with pytest.raises(DataError):
        Dataset((a, b), 2, 2)
    with pytest.raises(DataError):
        Dataset((SkeletonSequence(np.zeros((2, 2, 3)), 5),), 2, 2)


def test_labels_reject_unlabeled():
    with pytest.raises(DataError):
        small_dataset(labels=False).labels()


# --- SKEL1 format ---------------------------------------------------------------


def test_round_trip_is_exact(tmp_path):
    ds = small_dataset()
    path = tmp_path / "d.skel"
    D.save_dataset(ds, path)
    back = D.load_dataset(path)
    assert len(back) == 3
    for a, b in zip(ds.sequences, back.sequences):
        assert a.frames.tobytes() == b.frames.tobytes()
        assert (a.label, a.id) == (b.label, b.id)
    assert D.dumps_dataset(back) == path.read_text()


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=6, max_size=6))
def test_round_trip_any_double(vals):
    seq = SkeletonSequence(np.array(vals).reshape(1, 2, 3), None, "x")
    back = D.parse_dataset(D.dumps_dataset(Dataset((seq,), 1, 2)))
    assert back.sequences[0].frames.tobytes() == seq.frames.tobytes()
    assert back.sequences[0].label is None


def test_wrong_arity_names_the_line():
    text = "SKEL1 1 2 2\nSEQ a 2 0\n1 2 3 4 5 6\n1 2 3 4 5\n"
    with pytest.raises(ParseError) as exc:
        D.parse_dataset(text, "f.skel")
    assert exc.value.line_no == 4
    assert "f.skel:4" in str(exc.value)


def test_empty_file_is_an_error(tmp_path):
    path = tmp_path / "empty.skel"
    path.write_text("")
    with pytest.raises(DataError, match="empty"):
        D.load_dataset(path)
    with pytest.raises(DataError, match="empty"):
        D.parse_dataset("SKEL1 0 2 2\n")


@pytest.mark.parametrize(
    "text,line",
    [
        ("SKEL2 1 2 2\n", 1),
        ("SKEL1 1 2 2\nSEQ a 1 7\n1 2 3 4 5 6\n", 2),
        ("SKEL1 1 2 2\nSEQ a 1 0\n1 2 3 4 5 x\n", 3),
        ("SKEL1 1 2 2\nSEQ a 2 0\n1 2 3 4 5 6\n", 4),
        ("SKEL1 1 2 2\nSEQ a 1 0\n1 2 3 4 5 6\nextra\n", 4),
        ("SKEL1 1 2 2\nSEQ a 1 0\n1 2 3 4 5 inf\n", 3),
    ],
)
def test_malformed_files(text, line):
    with pytest.raises(ParseError) as exc:
        D.parse_dataset(text)
    assert exc.value.line_no == line


# --- downsample -------------------------------------------------------------------


def _indexed(T):
    return SkeletonSequence(np.arange(T, dtype=float)[:, None, None] * np.ones((T, 1, 3)))


def test_downsample_halves():
    out = D.downsample(_indexed(400), 200)
    assert np.array_equal(out.frames[:, 0, 0], np.arange(0, 400, 2))


def test_downsample_identity():
    seq = _indexed(7)
    assert np.array_equal(D.downsample(seq, 7).frames, seq.frames)


def test_downsample_upsamples_by_repetition():
    out = D.downsample(_indexed(3), 6)
    assert list(out.frames[:, 0, 0]) == [0, 0, 1, 1, 2, 2]


@given(st.integers(1, 300), st.integers(1, 300))
def test_downsample_idempotent(T, L):
    once = D.downsample(_indexed(T), L)
    assert np.array_equal(D.downsample(once, L).frames, once.frames)
    assert once.T == L


def test_center_zero_mean():
    seq = small_dataset().sequences[0]
    assert np.allclose(D.center(seq).frames.mean(axis=(0, 1)), 0.0, atol=1e-6 * np.abs(seq.frames).max())


# --- synthetic ----------------------------------------------------------------------


def test_synthetic_deterministic():
    cfg = D.SyntheticConfig(seed=3)
    a, b = D.generate_synthetic(cfg), D.generate_synthetic(cfg)
    assert D.dumps_dataset(a) == D.dumps_dataset(b)
    c = D.generate_synthetic(D.SyntheticConfig(seed=4))
    assert D.dumps_dataset(a) != D.dumps_dataset(c)


def test_noise_free_sequences_equal_templates():
    cfg = D.SyntheticConfig(noise_std=0.0, sequences_per_class=5)
    ds = D.generate_synthetic(cfg)
    tpls = [t.render(cfg.T) for t in D.class_templates(cfg)]
    for s in ds.sequences:
        assert np.array_equal(s.frames, tpls[s.label])


def test_nearest_template_accuracy():
    cfg = D.SyntheticConfig(num_classes=4, sequences_per_class=50, T=40, J=8, noise_std=0.05)
    ds = D.generate_synthetic(cfg)
    tpls = [t.render(cfg.T) for t in D.class_templates(cfg)]
    assert np.mean(D.nearest_template_predict(ds, tpls) == ds.labels()) == 1.0


def test_default_synthetic_separable_from_mean_frames():
    ds = D.generate_synthetic(D.SyntheticConfig())
    X = ds.stacked()
    assert logistic_train_accuracy(X.mean(axis=1), ds.labels(), ds.num_classes) >= 0.95


def test_benchmark_data_linearly_separable():
    # time averages are deliberately uninformative here; whole sequences are not
    train, _ = benchmark.splits(0)
    X = train.stacked()
    assert logistic_train_accuracy(X.reshape(len(X), -1), train.labels(), train.num_classes) >= 0.95


def test_synthetic_config_validation():
    with pytest.raises(ValueError):
        D.generate_synthetic(D.SyntheticConfig(num_classes=0))
    assert D.SyntheticConfig(noise_std=-1).validate()


# --- splits ---------------------------------------------------------------------------


def _many(n):
    seqs = tuple(SkeletonSequence(np.full((1, 1, 3), float(i)), i % 3, f"s{i}") for i in range(n))
    return Dataset(seqs, 3, 1)


def test_split_fraction_one():
    lab, unl = D.split_labeled(_many(20), SplitSpec(1.0, 0))
    assert len(lab) == 20 and len(unl) == 0


def test_split_one_percent_of_thousand():
    lab, unl = D.split_labeled(_many(1000), SplitSpec(0.01, 0))
    assert len(lab) == 10 and len(unl) == 990
    assert all(s.label is None for s in unl.sequences)
    assert {s.id for s in lab.sequences}.isdisjoint(s.id for s in unl.sequences)


def test_split_deterministic():
    a = D.split_labeled(_many(100), SplitSpec(0.1, 5))[0]
    b = D.split_labeled(_many(100), SplitSpec(0.1, 5))[0]
    assert [s.id for s in a.sequences] == [s.id for s in b.sequences]


def test_split_rejects_bad_fraction():
    for f in (0.0, 1.5):
        with pytest.raises(ValueError):
            D.split_labeled(_many(10), SplitSpec(f, 0))


def test_train_test_split_stratified():
    train, test = D.split_train_test(_many(30), 2, 0)
    assert len(test) == 6 and len(train) == 24
    assert np.bincount(test.labels()).tolist() == [2, 2, 2]
    with pytest.raises(DataError):
        D.split_train_test(_many(30), 10, 0)
