"""Shared-attention guidance: warped queries, the two guidance forms, the
masked blend, and the full hook, all checked on small hand-built grids."""

import numpy as np
import pytest
import torch

from geodiff.diffnet import DTYPE, CaptureBank, DiffnetError, attention, eps_theta
from geodiff.geometry import EditTransform, build_field_2d, identity_field, removal_field
from geodiff.guidance import (
    SharedAttentionConfig,
    SharedAttentionController,
    blend,
    build_pyramid,
    edit_guidance,
    ref_guidance,
    warp_queries,
)


from oracles import manual_attention


class TestWarpQueries:
    def test_identity_leaves_queries(self, rng):
        q = torch.tensor(rng.normal(size=(16, 5)))
        out = warp_queries(q, identity_field(4, 4))
        np.testing.assert_array_equal(out.numpy(), q.numpy())

    def test_translate_moves_rows(self, rng):
        # token (x, y) -> (x+1, y); column 3 falls off; column 0 keeps its
        # original row because nothing lands there
        q = torch.tensor(rng.normal(size=(16, 3)))
        f = build_field_2d(EditTransform(kind="translate2d", offset=(1, 0)), 4, 4)
        out = warp_queries(q, f).numpy()
        qg = q.numpy().reshape(4, 4, 3)
        og = out.reshape(4, 4, 3)
        for y in range(4):
            np.testing.assert_array_equal(og[y, 0], qg[y, 0])  # uncovered: original
            for x in range(1, 4):
                np.testing.assert_array_equal(og[y, x], qg[y, x - 1])

    def test_removal_keeps_queries(self, rng):
        q = torch.tensor(rng.normal(size=(16, 4)))
        out = warp_queries(q, removal_field(4, 4))
        np.testing.assert_array_equal(out.numpy(), q.numpy())

    def test_resolution_mismatch_rejected(self):
        with pytest.raises(DiffnetError):
            warp_queries(torch.zeros(9, 2, dtype=DTYPE), identity_field(4, 4))

    def test_permutation_field_permutes_ref_guidance(self, rng):
        # a pure permutation (horizontal flip) of a 1-row grid permutes the
        # warped-query attention output the same way
        q = torch.tensor(rng.normal(size=(4, 3)))
        k = torch.tensor(rng.normal(size=(4, 3)))
        v = torch.tensor(rng.normal(size=(4, 2)))
        flip = identity_field(1, 4)
        flip.target[0, :, 0] = np.array([3.0, 2.0, 1.0, 0.0])
        y = ref_guidance(q, k, v, flip).numpy()
        y_plain = attention(q, k, v).numpy()
        np.testing.assert_allclose(y, y_plain[::-1], atol=1e-12)


class TestGuidanceForms:
    def test_ref_identity_equals_plain(self, rng):
        q = torch.tensor(rng.normal(size=(16, 4)))
        k = torch.tensor(rng.normal(size=(16, 4)))
        v = torch.tensor(rng.normal(size=(16, 3)))
        out = ref_guidance(q, k, v, identity_field(4, 4))
        np.testing.assert_allclose(out.numpy(), attention(q, k, v).numpy(), atol=1e-12)

    def test_one_token_grid_returns_v(self):
        q = torch.tensor([[2.0]], dtype=DTYPE)
        k = torch.tensor([[1.0]], dtype=DTYPE)
        v = torch.tensor([[7.0, -3.0]], dtype=DTYPE)
        out = ref_guidance(q, k, v, identity_field(1, 1))
        np.testing.assert_allclose(out.numpy(), v.numpy())

    def test_translate_hand_case_2x2(self):
        # 2x2 grid, translate (+1, 0): tokens (1,0),(1,1) receive queries of
        # (0,0),(0,1); columns 0 keep their own queries
        q = torch.tensor([[1.0, 0.0], [0.0, 1.0],
                          [1.0, 1.0], [-1.0, 0.5]], dtype=DTYPE)
        k = torch.tensor([[0.5, 0.0], [0.0, 0.5],
                          [0.25, 0.25], [0.5, 0.5]], dtype=DTYPE)
        v = torch.tensor([[1.0, 2.0], [3.0, 4.0],
                          [5.0, 6.0], [7.0, 8.0]], dtype=DTYPE)
        f = build_field_2d(EditTransform(kind="translate2d", offset=(1, 0)), 2, 2)
        out = ref_guidance(q, k, v, f).numpy()
        warped = np.array([[1.0, 0.0], [1.0, 0.0],
                           [1.0, 1.0], [1.0, 1.0]])
        np.testing.assert_allclose(out, manual_attention(warped, k, v), atol=1e-9)

    def test_edit_guidance_self_uses_reference_operands(self, rng):
        q_e = torch.tensor(rng.normal(size=(4, 3)))
        k_r = torch.tensor(rng.normal(size=(4, 3)))
        v_r = torch.tensor(rng.normal(size=(4, 2)))
        k_e = torch.tensor(rng.normal(size=(4, 3)))
        v_e = torch.tensor(rng.normal(size=(4, 2)))
        out = edit_guidance(q_e, k_e, v_e, k_r, v_r, "self")
        np.testing.assert_allclose(out.numpy(), attention(q_e, k_r, v_r).numpy())

    def test_edit_guidance_cross_mixes_edit_keys_reference_values(self, rng):
        q_e = torch.tensor(rng.normal(size=(4, 3)))
        k_e = torch.tensor(rng.normal(size=(2, 3)))
        v_e = torch.tensor(rng.normal(size=(2, 2)))
        v_r = torch.tensor(rng.normal(size=(2, 2)))
        out = edit_guidance(q_e, k_e, v_e, None, v_r, "cross")
        np.testing.assert_allclose(out.numpy(), attention(q_e, k_e, v_r).numpy())
        # with v_r = v_e this is exactly the plain edit cross-attention
        out2 = edit_guidance(q_e, k_e, v_e, None, v_e, "cross")
        np.testing.assert_allclose(out2.numpy(), attention(q_e, k_e, v_e).numpy())

    def test_self_two_token_hand_case(self):
        q_e = torch.tensor([[1.0, 0.0], [0.0, 2.0]], dtype=DTYPE)
        k_r = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=DTYPE)
        v_r = torch.tensor([[2.0], [4.0]], dtype=DTYPE)
        out = edit_guidance(q_e, None, None, k_r, v_r, "self").numpy()
        np.testing.assert_allclose(out, manual_attention(q_e, k_r, v_r), atol=1e-12)


class TestBlend:
    def test_all_ones_selects_reference(self, rng):
        a = torch.tensor(rng.normal(size=(6, 3)))
        b = torch.tensor(rng.normal(size=(6, 3)))
        out = blend(a, b, torch.ones(6, dtype=DTYPE))
        np.testing.assert_array_equal(out.numpy(), a.numpy())

    def test_all_zeros_selects_edit(self, rng):
        a = torch.tensor(rng.normal(size=(6, 3)))
        b = torch.tensor(rng.normal(size=(6, 3)))
        out = blend(a, b, torch.zeros(6, dtype=DTYPE))
        np.testing.assert_array_equal(out.numpy(), b.numpy())

    def test_half_is_rowwise_average(self, rng):
        a = torch.tensor(rng.normal(size=(4, 2)))
        b = torch.tensor(rng.normal(size=(4, 2)))
        out = blend(a, b, torch.full((4,), 0.5, dtype=DTYPE))
        np.testing.assert_allclose(out.numpy(), (a.numpy() + b.numpy()) / 2)

    def test_idempotent_on_equal_inputs(self, rng):
        a = torch.tensor(rng.normal(size=(5, 3)))
        m = torch.tensor(rng.random(5))
        out = blend(a, a.clone(), m)
        np.testing.assert_allclose(out.numpy(), a.numpy())

    def test_length_mismatch_rejected(self):
        with pytest.raises(DiffnetError):
            blend(torch.zeros(4, 2, dtype=DTYPE), torch.zeros(4, 2, dtype=DTYPE),
                  torch.zeros(3, dtype=DTYPE))


def _controller_for(model, field, m_obj, share_until=45, kind="translate2d"):
    pyramid = build_pyramid(field, m_obj, model.attention_resolutions().values())
    bank = CaptureBank()
    ctl = SharedAttentionController(
        bank, pyramid, SharedAttentionConfig(share_until_step=share_until,
                                             edit_kind=kind))
    return bank, ctl


class TestSharedAttentionHook:
    def test_beyond_horizon_is_plain(self, tiny_model):
        h = w = 32
        m_obj = np.zeros((h, w)); m_obj[8:16, 8:16] = 1.0
        f = build_field_2d(EditTransform(kind="translate2d", offset=(8, 0)), h, w)
        bank, ctl = _controller_for(tiny_model, f, m_obj, share_until=3)
        z = torch.linspace(-1, 1, 2 * 8 * 8, dtype=DTYPE).reshape(2, 8, 8)
        with torch.no_grad():
            eps_theta(tiny_model, z, 500, tiny_model.null_text, bank.capture_hook())
            ctl.begin_step(5, 500)   # step 5 >= horizon 3: sharing off
            hooked = eps_theta(tiny_model, z, 500, tiny_model.null_text, ctl.hook)
            plain = eps_theta(tiny_model, z, 500, tiny_model.null_text)
        assert torch.equal(hooked, plain)
        assert ctl.records == []

    def test_full_identity_case_equals_reference(self, tiny_model):
        # identity field, edit state identical to reference state: every
        # blended block output equals the reference block output
        h = w = 32
        m_obj = np.zeros((h, w)); m_obj[8:16, 8:16] = 1.0
        f = identity_field(h, w)
        bank, ctl = _controller_for(tiny_model, f, m_obj, kind="identity")
        z = torch.linspace(-1, 1, 2 * 8 * 8, dtype=DTYPE).reshape(2, 8, 8)
        with torch.no_grad():
            ref = eps_theta(tiny_model, z, 440, tiny_model.null_text, bank.capture_hook())
            ctl.begin_step(0, 440)
            edit = eps_theta(tiny_model, z, 440, tiny_model.null_text, ctl.hook)
        np.testing.assert_allclose(edit.numpy(), ref.numpy(), atol=1e-10)

    def test_removal_blend_is_pure_edit_guidance(self, tiny_model):
        # empty transformed mask -> output is the edit-guidance branch alone
        h = w = 32
        m_obj = np.zeros((h, w)); m_obj[8:16, 8:16] = 1.0
        f = removal_field(h, w)
        bank, ctl = _controller_for(tiny_model, f, m_obj, kind="remove")
        z = torch.linspace(-0.5, 0.5, 2 * 8 * 8, dtype=DTYPE).reshape(2, 8, 8)
        with torch.no_grad():
            eps_theta(tiny_model, z, 200, tiny_model.null_text, bank.capture_hook())
            ctl.begin_step(0, 200)
            eps_theta(tiny_model, z, 200, tiny_model.null_text, ctl.hook)
        for rec in ctl.records:
            assert rec.level.masks.m_obj_t.sum() == 0
            cap = bank.get(200, rec.block)
            expected = edit_guidance(rec.q_e, rec.k_e, None, cap.k, cap.v, rec.kind)
            np.testing.assert_allclose(rec.y_edit_g.numpy(), expected.numpy(), atol=1e-12)

    def test_self_blocks_insensitive_to_edit_keys_values(self, tiny_model):
        # during sharing, a self block's output depends on K_e, V_e only
        # through the cross blocks further downstream; verify the recorded
        # self-block guidance ignores edit keys entirely
        h = w = 32
        m_obj = np.zeros((h, w)); m_obj[4:12, 4:12] = 1.0
        f = build_field_2d(EditTransform(kind="translate2d", offset=(4, 4)), h, w)
        bank, ctl = _controller_for(tiny_model, f, m_obj)
        z = torch.linspace(-1, 1, 2 * 8 * 8, dtype=DTYPE).reshape(2, 8, 8)
        with torch.no_grad():
            eps_theta(tiny_model, z, 360, tiny_model.null_text, bank.capture_hook())
            ctl.begin_step(0, 360)
            eps_theta(tiny_model, z, 360, tiny_model.null_text, ctl.hook)
        for rec in ctl.records:
            if rec.kind != "self":
                continue
            cap = bank.get(360, rec.block)
            perturbed = edit_guidance(rec.q_e, rec.k_e + 100.0, None,
                                      cap.k, cap.v, "self")
            np.testing.assert_allclose(rec.y_edit_g.numpy(), perturbed.numpy(),
                                       atol=1e-12)

    def test_missing_capture_raises(self, tiny_model):
        h = w = 32
        m_obj = np.zeros((h, w)); m_obj[4:8, 4:8] = 1.0
        _, ctl = _controller_for(tiny_model, identity_field(h, w), m_obj)
        ctl.begin_step(0, 123)
        z = torch.zeros(2, 8, 8, dtype=DTYPE)
        with pytest.raises(DiffnetError):
            eps_theta(tiny_model, z, 123, tiny_model.null_text, ctl.hook)


class TestPyramid:
    def test_levels_cover_model_resolutions(self, tiny_model):
        f = identity_field(32, 32)
        m = np.ones((32, 32))
        pyr = build_pyramid(f, m, tiny_model.attention_resolutions().values())
        assert set(pyr) == {(8, 8), (4, 4)}
        for level in pyr.values():
            assert level.field.is_identity()
            assert level.masks.m_obj.min() == 1.0
