import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from simsid.autodiff import ShapeError, Tensor, ops
from simsid.inpaint import (InpaintBlock, NeighborAttention, PatchGrid, canonical_order, inpaint_forward,
                            neighbor_index, neighbor_table)

GRID = (4, 4)
CH, HW = 8, (2, 2)


def make_block(grid=GRID, seed=0, items=6, top_k=2):
    block = InpaintBlock(CH, HW, grid, np.random.default_rng(seed), items=items, top_k=top_k)
    return block.eval()


def raw_features(batch=1, grid=GRID, seed=1):
    cells = grid[0] * grid[1]
    return np.random.default_rng(seed).standard_normal((batch * cells, HW[0], HW[1], CH))


def cell_outputs(block, feats, batch=1):
    out = block(Tensor(feats), batch).data
    return out.reshape(batch, block.cells, -1)


# -- neighbourhoods ---------------------------------------------------------------------


def test_interior_has_eight_neighbors():
    assert len(neighbor_index(1, 1, GRID)) == 8


def test_corner_and_edge():
    assert neighbor_index(0, 0, GRID) == [(0, 1), (1, 0), (1, 1)]
    assert len(neighbor_index(0, 2, GRID)) == 5
    assert len(neighbor_index(3, 3, GRID)) == 3


def test_single_cell_grid_has_no_neighbors():
    assert neighbor_index(0, 0, (1, 1)) == []


def test_out_of_grid_center_rejected():
    with pytest.raises(IndexError):
        neighbor_index(4, 0, GRID)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.data())
def test_neighbors_are_row_major_chebyshev_ring(rows, cols, data):
    i = data.draw(st.integers(0, rows - 1))
    j = data.draw(st.integers(0, cols - 1))
    nb = neighbor_index(i, j, (rows, cols))
    expect = [(a, b) for a in range(rows) for b in range(cols) if max(abs(a - i), abs(b - j)) == 1]
    assert nb == expect


def test_neighbor_table_matches_index():
    idx, valid = neighbor_table(GRID)
    for p in range(16):
        i, j = divmod(p, 4)
        got = [divmod(int(q), 4) for q in idx[p][valid[p]]]
        assert got == neighbor_index(i, j, GRID)


# -- attention ----------------------------------------------------------------------------


def test_single_neighbor_identity_projection_oracle():
    rng = np.random.default_rng(0)
    att = NeighborAttention(2, 1, rng)
    for layer in (att.wq, att.wk, att.wv, att.wo):
        layer.weight.data[:] = np.eye(2)
    q = np.array([0.5, -0.3])
    kv = np.array([[1.0, 0.0]])
    attended = att.attend(Tensor(q[None]), Tensor(kv[None]), np.ones((1, 1), bool)).data[0]
    np.testing.assert_array_equal(attended, [1.0, 0.0])
    h = q + kv[0]
    w1, b1 = att.ff1.weight.data, att.ff1.bias.data
    w2, b2 = att.ff2.weight.data, att.ff2.bias.data
    hidden = [max(0.0, sum(h[a] * w1[a, b] for a in range(2)) + b1[b]) for b in range(2)]
    expect = [h[c] + sum(hidden[b] * w2[b, c] for b in range(2)) + b2[c] for c in range(2)]
    out = att(Tensor(q[None]), Tensor(kv[None]), np.ones((1, 1), bool)).data[0]
    np.testing.assert_allclose(out, expect, rtol=0, atol=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_neighbor_permutation_is_bit_exact(slots, seed):
    rng = np.random.default_rng(seed)
    att = NeighborAttention(3, 2, rng)
    q = rng.standard_normal((2, 6))
    kv = rng.standard_normal((2, slots, 6))
    valid = rng.random((2, slots)) < 0.8
    valid[:, 0] = True
    base = att(Tensor(q), Tensor(kv), valid).data
    perm = rng.permutation(slots)
    shuffled = att(Tensor(q), Tensor(kv[:, perm]), valid[:, perm]).data
    assert np.array_equal(base, shuffled)


def test_canonical_order_puts_invalid_last():
    kv = np.array([[[3.0], [1.0], [2.0], [0.0]]])
    valid = np.array([[True, True, False, True]])
    assert canonical_order(kv, valid).tolist() == [[3, 1, 0, 2]]


def test_invalid_slots_are_ignored():
    rng = np.random.default_rng(4)
    att = NeighborAttention(2, 2, rng)
    q = rng.standard_normal((1, 4))
    kv = rng.standard_normal((1, 3, 4))
    valid = np.array([[True, False, True]])
    a = att(Tensor(q), Tensor(kv), valid).data
    kv2 = kv.copy()
    kv2[0, 1] = 1e3
    assert np.array_equal(a, att(Tensor(q), Tensor(kv2), valid).data)


def test_attention_shape_mismatch():
    att = NeighborAttention(2, 2, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        att(Tensor(np.ones((1, 4))), Tensor(np.ones((1, 3, 5))), np.ones((1, 3), bool))


# -- the in-painting block --------------------------------------------------------------


def test_shape_is_preserved():
    block = make_block()
    feats = raw_features(batch=2)
    assert block(Tensor(feats), 2).shape == feats.shape
    grid = PatchGrid(GRID, Tensor(feats.reshape(2, 16, *HW, CH)))
    out = inpaint_forward(grid, block)
    assert out.features.shape == grid.features.shape
    assert out.stage == "inpainted"


def test_extent_mismatch_rejected():
    block = make_block()
    grid = PatchGrid((2, 2), Tensor(np.zeros((1, 4, *HW, CH))))
    with pytest.raises(ShapeError):
        inpaint_forward(grid, block)


def test_locality_exhaustive_4x4():
    block = make_block()
    feats = raw_features()
    base = cell_outputs(block, feats)[0]
    for a, b in itertools.product(range(4), range(4)):
        p = a * 4 + b
        bumped = feats.copy()
        bumped[p] += np.random.default_rng(p).standard_normal(bumped[p].shape)
        out = cell_outputs(block, bumped)[0]
        allowed = {p} | {i * 4 + j for i, j in neighbor_index(a, b, GRID)}
        for r in range(16):
            changed = not np.array_equal(out[r], base[r])
            if r not in allowed:
                assert not changed, f"cell {p} leaked into {r}"
            elif r == p:
                assert changed


def test_batch_items_are_independent_in_eval():
    block = make_block()
    feats = raw_features(batch=2)
    base = cell_outputs(block, feats, batch=2)
    bumped = feats.copy()
    bumped[:16] += 1.0
    out = cell_outputs(block, bumped, batch=2)
    assert np.array_equal(out[1], base[1])


def test_own_memory_block_never_reaches_own_output():
    block = make_block()
    feats = raw_features()
    base = cell_outputs(block, feats)[0]
    original = block.memory.blocks.data.copy()
    for p in range(16):
        block.memory.blocks.data[:] = original
        block.memory.blocks.data[p] += 0.5
        out = cell_outputs(block, feats)[0]
        assert np.array_equal(out[p], base[p]), f"own block reached cell {p}"
        i, j = divmod(p, 4)
        assert any(not np.array_equal(out[a * 4 + b], base[a * 4 + b]) for a, b in neighbor_index(i, j, GRID))
    block.memory.blocks.data[:] = original


def test_gradient_reach():
    block = InpaintBlock(CH, HW, GRID, np.random.default_rng(0), items=6, top_k=2)
    x = Tensor(raw_features(), requires_grad=True)
    out = block(x, 1, np.random.default_rng(5))
    w = np.random.default_rng(6).standard_normal(out.shape)
    ops.sum(ops.mul(out, Tensor(w))).backward()
    for name, p in block.attention.named_parameters():
        assert p.grad is not None and np.abs(p.grad).sum() > 0, name
    per_block = np.abs(block.memory.blocks.grad).sum(axis=(1, 2))
    assert (per_block > 0).all()
    assert (np.abs(x.grad).reshape(16, -1).sum(axis=1) > 0).all()


def test_single_cell_grid_runs_and_uses_memory():
    block = InpaintBlock(CH, HW, (1, 1), np.random.default_rng(0), items=6, top_k=2).eval()
    feats = raw_features(grid=(1, 1))
    base = block(Tensor(feats), 1).data
    assert base.shape == feats.shape
    block.memory.blocks.data += 0.5
    assert not np.array_equal(block(Tensor(feats), 1).data, base)


def test_channels_must_divide_reduction():
    with pytest.raises(ValueError):
        InpaintBlock(6, HW, GRID, np.random.default_rng(0))
