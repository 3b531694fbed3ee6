import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sc_emd.emd_core import check_histogram
from sc_emd.errors import BadSpec, DimensionMismatch, InputError, TooFewInstances
from sc_emd.mil_pipeline import (Bag, PrototypeSet, SynthSpec, fit_prototypes,
                                 kmeans, quantize_bag, quantize_bags,
                                 stratified_split, synth_dataset)


def test_separated_clouds_give_cloud_means():
    rng = np.random.default_rng(0)
    a = rng.normal(0.0, 0.1, (40, 2))
    b = rng.normal(10.0, 0.1, (30, 2))
    protos = fit_prototypes([Bag(a), Bag(b)], 2, seed=1)
    got = sorted(map(tuple, protos.centroids))
    np.testing.assert_allclose(got[0], a.mean(axis=0), atol=1e-6)
    np.testing.assert_allclose(got[1], b.mean(axis=0), atol=1e-6)


def test_one_prototype_per_instance():
    pts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 5.0], [3.0, 3.0]])
    protos = fit_prototypes([Bag(pts[:2]), Bag(pts[2:])], 4, seed=0)
    assert sorted(map(tuple, protos.centroids)) == sorted(map(tuple, pts))


def test_prototypes_deterministic():
    rng = np.random.default_rng(4)
    bags = [Bag(rng.normal(size=(20, 3))) for _ in range(5)]
    a = fit_prototypes(bags, 6, seed=9)
    b = fit_prototypes(bags, 6, seed=9)
    assert a.centroids.tobytes() == b.centroids.tobytes()
    assert a.seed == 9


def test_too_few_instances():
    with pytest.raises(TooFewInstances):
        fit_prototypes([Bag(np.zeros((3, 2)))], 4)


def test_mixed_instance_lengths():
    with pytest.raises(DimensionMismatch):
        fit_prototypes([Bag(np.zeros((3, 2))), Bag(np.zeros((3, 3)))], 2)


def test_bag_validation():
    with pytest.raises(InputError):
        Bag(np.zeros((0, 2)))
    with pytest.raises(InputError):
        Bag([[np.nan, 1.0]])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 8))
def test_kmeans_inertia_nonincreasing(seed, k):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(40, 2)) + rng.integers(0, 3, (40, 1)) * 4
    _, labels, trace = kmeans(pts, k, seed)
    assert all(b <= a + 1e-9 for a, b in zip(trace, trace[1:]))
    assert labels.shape == (40,)


def test_kmeans_handles_duplicates():
    pts = np.zeros((6, 2))
    pts[:2] = 1.0
    centers, labels, _ = kmeans(pts, 3, seed=0)
    assert centers.shape == (3, 2)
    assert np.all(np.isfinite(centers))


# quantize --------------------------------------------------------------------------


PROTOS3 = PrototypeSet(np.array([[0.0, 0.0], [10.0, 0.0], [20.0, 0.0]]))


def test_all_instances_in_middle_bin():
    bag = Bag([[9.0, 1.0], [11.0, 0.0], [10.0, -2.0]])
    np.testing.assert_array_equal(quantize_bag(bag, PROTOS3), [0, 1, 0])


def test_three_to_one_split():
    protos = PrototypeSet(np.array([[0.0], [1.0]]))
    bag = Bag([[0.1], [-0.2], [0.3], [0.9]])
    np.testing.assert_array_equal(quantize_bag(bag, protos), [0.75, 0.25])


def test_equidistant_instance_goes_to_lower_bin():
    protos = PrototypeSet(np.array([[0.0, 0.0], [0.0, 100.0], [2.0, 0.0]]))
    np.testing.assert_array_equal(quantize_bag(Bag([[1.0, 0.0]]), protos),
                                  [1, 0, 0])


def test_quantize_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        quantize_bag(Bag([[1.0, 2.0, 3.0]]), PROTOS3)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 30))
def test_quantize_gives_histograms(seed, n):
    rng = np.random.default_rng(seed)
    h = quantize_bag(Bag(rng.normal(scale=15, size=(n, 2))), PROTOS3)
    check_histogram(h)


# synthetic data -----------------------------------------------------------------------


def test_large_bags_converge_to_single_atom():
    spec = SynthSpec(n_classes=1, bags_per_class=3, instances_per_bag=10_000,
                     D=12, M_true=4, noise=0.0, seed=11, atoms_per_class=1)
    ds = synth_dataset(spec)
    X = quantize_bags(ds.bags, PrototypeSet(ds.locations))
    target = ds.true_dictionary[:, 0]
    for x in X:
        assert np.abs(x - target).sum() < 0.05


def test_synth_is_seeded():
    spec = SynthSpec(bags_per_class=4, instances_per_bag=30, seed=5)
    a, b = synth_dataset(spec), synth_dataset(spec)
    for x, y in zip(a.bags, b.bags):
        assert x.instances.tobytes() == y.instances.tobytes()
        assert x.label == y.label
    assert a.true_dictionary.tobytes() == b.true_dictionary.tobytes()
    c = synth_dataset(SynthSpec(bags_per_class=4, instances_per_bag=30, seed=6))
    assert c.bags[0].instances.tobytes() != a.bags[0].instances.tobytes()


def test_three_classes_present():
    ds = synth_dataset(SynthSpec(n_classes=3, bags_per_class=20,
                                 instances_per_bag=50, D=16, M_true=6,
                                 noise=0.2, seed=7))
    assert len({b.label for b in ds.bags}) == 3
    for m in range(6):
        check_histogram(ds.true_dictionary[:, m])


@pytest.mark.parametrize("bad", [dict(D=3, M_true=4), dict(n_classes=0),
                                 dict(atoms_per_class=5), dict(noise=-1.0),
                                 dict(dim=1), dict(overlap=1.5)])
def test_bad_spec(bad):
    with pytest.raises(BadSpec):
        synth_dataset(SynthSpec(**bad))


def test_stratified_split():
    labels = np.array([0] * 6 + [1] * 4)
    tr, te = stratified_split(labels, 0.5, seed=2)
    assert sorted(np.r_[tr, te].tolist()) == list(range(10))
    assert (labels[tr] == 0).sum() == 3 and (labels[tr] == 1).sum() == 2
    tr2, te2 = stratified_split(labels, 0.5, seed=2)
    np.testing.assert_array_equal(tr, tr2)


def test_pipeline_end_to_end_deterministic():
    spec = SynthSpec(bags_per_class=3, instances_per_bag=40, seed=1)
    runs = []
    for _ in range(2):
        ds = synth_dataset(spec)
        protos = fit_prototypes(ds.bags, 8, seed=1)
        runs.append(quantize_bags(ds.bags, protos))
    assert runs[0].tobytes() == runs[1].tobytes()
