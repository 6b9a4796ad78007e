import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from groundhog.features import (
    DegenerateMaskError,
    FeatureError,
    FeatureMap,
    entity_tokens,
    mask_pool,
    pool_proposals,
    project,
)
from groundhog.masks import BinaryMask, ProposalSet, SoftMask
from groundhog.nn import gelu


def test_mask_pool_examples():
    const = FeatureMap(np.full((3, 2, 2), 7.0))
    assert np.allclose(mask_pool(const, SoftMask(np.array([[0.2, 0], [1, 0.5]]))), 7.0)
    f = FeatureMap(np.arange(8.0).reshape(2, 2, 2))
    cell = np.zeros((2, 2))
    cell[1, 0] = 1.0
    assert np.array_equal(mask_pool(f, SoftMask(cell)), f.data[:, 1, 0])
    assert mask_pool(FeatureMap(np.array([[[2.0, 4.0]]])), SoftMask(np.array([[0.5, 0.5]])))[0] == 3.0


def test_mask_pool_errors():
    f = FeatureMap(np.ones((1, 2, 2)))
    with pytest.raises(DegenerateMaskError):
        mask_pool(f, SoftMask(np.zeros((2, 2))))
    with pytest.raises(FeatureError):
        mask_pool(f, SoftMask(np.ones((2, 3))))
    with pytest.raises(FeatureError):
        FeatureMap(np.array([[[np.nan]]]))


@given(hnp.arrays(float, (2, 3, 3), elements=st.floats(-5, 5)),
       hnp.arrays(float, (2, 3, 3), elements=st.floats(-5, 5)),
       hnp.arrays(float, (3, 3), elements=st.floats(0.01, 1)),
       st.floats(0.1, 10))
def test_mask_pool_linear_and_scale_invariant(a, b, m, c):
    fa, fb, fab = FeatureMap(a), FeatureMap(b), FeatureMap(a + b)
    mask = SoftMask(m)
    assert np.allclose(mask_pool(fab, mask), mask_pool(fa, mask) + mask_pool(fb, mask))
    scaled = SoftMask(m * min(c, 1.0 / m.max()))
    assert np.allclose(mask_pool(fa, scaled), mask_pool(fa, mask))


def _identity_params(n):
    return {"w1": np.eye(n), "b1": np.zeros(n), "w2": np.eye(n), "b2": np.zeros(n)}


def test_project_examples():
    zero = {"w1": np.zeros((3, 4)), "b1": np.zeros(4), "w2": np.zeros((4, 5)), "b2": np.zeros(5)}
    out = project(np.array([1.0, -2.0, 3.0]), zero)
    assert out.shape == (5,) and not out.any()
    v = np.array([0.0, 0.5, 2.0])
    assert np.allclose(project(v, _identity_params(3)), gelu(v))
    with pytest.raises(FeatureError):
        project(np.ones(2), zero)


def _scene_inputs():
    rng = np.random.default_rng(0)
    masks = [BinaryMask(rng.random((8, 8)) < 0.5) for _ in range(3)]
    props = ProposalSet.from_masks(masks)
    fmap = FeatureMap(rng.normal(size=(4, 4, 4)))
    return props, fmap


def test_entity_tokens_examples():
    props, fmap = _scene_inputs()
    p = {"w1": np.eye(4), "b1": np.full(4, 10.0), "w2": np.eye(4), "b2": np.full(4, -10.0)}
    toks = entity_tokens([fmap], props, [p])
    assert len(toks) == len(props)
    # with a large bias GELU is the identity to machine precision
    assert np.allclose([t.vector for t in toks], pool_proposals(fmap, props), atol=1e-9)
    assert [t.proposal_index for t in toks] == [0, 1, 2]
    rng = np.random.default_rng(1)
    q = {"w1": rng.normal(size=(4, 6)), "b1": rng.normal(size=6),
         "w2": rng.normal(size=(6, 5)), "b2": rng.normal(size=5)}
    one = entity_tokens([fmap], props, [q])
    two = entity_tokens([fmap, fmap], props, [q, q])
    assert np.allclose([t.vector for t in two], [2 * t.vector for t in one])


def test_entity_tokens_permutation_equivariant():
    props, fmap = _scene_inputs()
    rng = np.random.default_rng(2)
    q = {"w1": rng.normal(size=(4, 6)), "b1": rng.normal(size=6),
         "w2": rng.normal(size=(6, 5)), "b2": rng.normal(size=5)}
    perm = [2, 0, 1]
    base = entity_tokens([fmap], props, [q])
    moved = entity_tokens([fmap], ProposalSet(props.masks[perm], props.provenance), [q])
    assert np.allclose([t.vector for t in moved], [base[i].vector for i in perm])


def test_entity_tokens_errors():
    props, fmap = _scene_inputs()
    with pytest.raises(FeatureError):
        entity_tokens([fmap], props, [])
    with pytest.raises(FeatureError):
        entity_tokens([], props, [])
