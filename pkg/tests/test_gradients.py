"""Central finite-difference checks for every loss term.

Leaf-level checks differentiate each term with respect to the edit-side
attention operands on a single 16-token block; the integration check goes
through the full denoiser so the exact path used by the optimizer is
covered.  Relative error tolerance is 1e-3 at step 1e-3.
"""

import numpy as np
import pytest
import torch

from geodiff.diffnet import DTYPE, CaptureBank, eps_theta, gradient
from geodiff.geometry import EditTransform, build_field_2d
from geodiff.guidance import SharedAttentionConfig, SharedAttentionController, build_pyramid
from geodiff.losses import loss_bg, loss_obj, loss_remove, loss_smooth

H = 1e-3
TOL = 1e-3


def rel_err(a, b, floor=1e-5):
    return abs(a - b) / max(abs(a), abs(b), floor)


def fd_check(f, x: torch.Tensor, indices=None):
    """Compare autograd to central differences at each (or sampled) index."""
    x = x.detach().clone().requires_grad_(True)
    out = f(x)
    (g,) = torch.autograd.grad(out, [x])
    g = g.reshape(-1)
    flat = x.detach().reshape(-1)
    idxs = range(flat.numel()) if indices is None else indices
    worst = 0.0
    for i in idxs:
        xp = flat.clone(); xp[i] += H
        xm = flat.clone(); xm[i] -= H
        fp = float(f(xp.reshape(x.shape)).detach())
        fm = float(f(xm.reshape(x.shape)).detach())
        fd = (fp - fm) / (2 * H)
        worst = max(worst, rel_err(float(g[i]), fd))
    return worst


@pytest.fixture()
def block16(rng):
    """One 16-token attention block worth of operands (4x4 grid, d=3)."""
    mk = lambda *s: torch.tensor(rng.normal(size=s), dtype=DTYPE)
    m_obj = torch.tensor([1.0] * 6 + [0.0] * 10, dtype=DTYPE)
    return {
        "q_e": mk(16, 3), "k_e": mk(16, 3),
        "q_r": mk(16, 3), "k_r": mk(16, 3),
        "y_ref": mk(16, 3), "y_ref_g": mk(16, 3), "v_r": mk(16, 3),
        "m_obj": m_obj, "m_bg": 1.0 - m_obj,
        "m_ne": torch.tensor([0.0] * 8 + [1.0] * 8, dtype=DTYPE),
    }


class TestLeafGradients:
    def test_bg_term(self, block16):
        from geodiff.diffnet import attention
        b = block16

        def f(q_e):
            y_edit_g = attention(q_e, b["k_r"], b["v_r"])
            return loss_bg(y_edit_g, b["y_ref"], b["m_ne"])

        assert fd_check(f, b["q_e"]) < TOL

    def test_obj_term(self, block16):
        from geodiff.diffnet import attention
        b = block16

        def f(q_e):
            y_edit_g = attention(q_e, b["k_r"], b["v_r"])
            return loss_obj(y_edit_g, b["y_ref_g"], b["m_obj"])

        assert fd_check(f, b["q_e"]) < TOL

    def test_smooth_term(self, block16):
        from geodiff.diffnet import attention
        b = block16

        def f(q_e):
            y_edit_g = attention(q_e, b["k_r"], b["v_r"])
            return loss_smooth(y_edit_g, (4, 4))

        assert fd_check(f, b["q_e"]) < TOL

    def test_remove_term_wrt_qe_self(self, block16):
        b = block16

        def f(q_e):
            return loss_remove(b["q_r"], b["k_r"], q_e, None, "self",
                               b["m_obj"], b["m_bg"], (4, 4))

        assert fd_check(f, b["q_e"]) < TOL

    def test_remove_term_wrt_ke_cross(self, block16):
        b = block16

        def f(k_e):
            return loss_remove(b["q_r"], b["k_r"], b["q_e"], k_e, "cross",
                               b["m_obj"], b["m_bg"], (4, 4))

        assert fd_check(f, b["k_e"]) < TOL

    def test_remove_term_wrt_ke_is_zero_for_self(self, block16):
        # self blocks never touch K_e: autograd flags it unused, finite
        # differences agree it is flat
        b = block16
        k_e = b["k_e"].detach().clone().requires_grad_(True)
        out = loss_remove(b["q_r"], b["k_r"], b["q_e"], k_e, "self",
                          b["m_obj"], b["m_bg"], (4, 4))
        grads, unused = gradient(out, {"k_e": k_e})
        assert unused == {"k_e"}
        assert float(grads["k_e"].abs().max()) == 0.0


def make_single_block(rng):
    """A 16-token single attention block driven by a 4x4 latent and a text
    embedding, mirroring what the optimizer differentiates through."""
    mk = lambda *s: torch.tensor(rng.normal(size=s), dtype=DTYPE)
    w_q, w_k = mk(2, 3), mk(2, 3)
    w_ck = mk(2, 3)
    k_r, v_r = mk(16, 3), mk(16, 3)
    k_r_text = mk(2, 3)   # cross blocks key into the reference text tokens
    q_r = mk(16, 3)
    y_ref, y_ref_g = mk(16, 3), mk(16, 3)
    m_obj = torch.tensor([1.0] * 6 + [0.0] * 10, dtype=DTYPE)
    m_ne = torch.tensor([0.0] * 8 + [1.0] * 8, dtype=DTYPE)

    def operands(z, ne):
        tokens = z.permute(1, 2, 0).reshape(16, -1)
        q_e = tokens @ w_q
        k_e = ne @ w_ck
        return q_e, k_e

    consts = dict(w_q=w_q, w_k=w_k, k_r=k_r, k_r_text=k_r_text, v_r=v_r, q_r=q_r,
                  y_ref=y_ref, y_ref_g=y_ref_g, m_obj=m_obj, m_bg=1.0 - m_obj,
                  m_ne=m_ne)
    return operands, consts


class TestSingleBlockLatentGradients:
    """Each term differentiated w.r.t. the latent and the text embedding on
    one 16-token block, at the pinned step and tolerance."""

    @pytest.fixture()
    def block(self, rng):
        operands, consts = make_single_block(rng)
        z0 = torch.tensor(rng.normal(size=(2, 4, 4)) * 0.5, dtype=DTYPE)
        ne0 = torch.tensor(rng.normal(size=(2, 2)) * 0.5, dtype=DTYPE)
        return operands, consts, z0, ne0

    def term_fns(self, operands, c, ne_fixed):
        from geodiff.diffnet import attention

        def bg(z, ne):
            q_e, _ = operands(z, ne)
            return loss_bg(attention(q_e, c["k_r"], c["v_r"]), c["y_ref"], c["m_ne"])

        def obj(z, ne):
            q_e, _ = operands(z, ne)
            return loss_obj(attention(q_e, c["k_r"], c["v_r"]), c["y_ref_g"], c["m_obj"])

        def smooth(z, ne):
            q_e, _ = operands(z, ne)
            return loss_smooth(attention(q_e, c["k_r"], c["v_r"]), (4, 4))

        def remove(z, ne):
            q_e, k_e = operands(z, ne)
            return loss_remove(c["q_r"], c["k_r_text"], q_e, k_e, "cross",
                               c["m_obj"], c["m_bg"], (4, 4))

        return {"bg": bg, "obj": obj, "smooth": smooth, "remove": remove}

    @pytest.mark.parametrize("term", ["bg", "obj", "smooth", "remove"])
    def test_wrt_latent(self, block, term):
        operands, consts, z0, ne0 = block
        fn = self.term_fns(operands, consts, ne0)[term]
        assert fd_check(lambda z: fn(z, ne0), z0) < TOL

    @pytest.mark.parametrize("term", ["remove"])
    def test_wrt_embedding(self, block, term):
        operands, consts, z0, ne0 = block
        fn = self.term_fns(operands, consts, ne0)[term]
        assert fd_check(lambda ne: fn(z0, ne), ne0) < TOL


class TestModelPathGradients:
    """Wiring check: a smooth probe of the shared-attention records must
    differentiate exactly through the full UNet + hook + blend path.  (The
    L1 terms themselves are FD-checked on single blocks above; through
    eight many-token blocks their kink density dominates the FD truncation
    error, which says nothing about the gradients.)"""

    @pytest.fixture()
    def setup(self, tiny_model, rng):
        h = w = 32
        m_obj = np.zeros((h, w)); m_obj[8:16, 8:16] = 1.0
        f = build_field_2d(EditTransform(kind="translate2d", offset=(8, 4)), h, w)
        pyramid = build_pyramid(f, m_obj, tiny_model.attention_resolutions().values())
        bank = CaptureBank()
        z_ref = torch.tensor(rng.normal(size=(2, 8, 8)) * 0.3, dtype=DTYPE)
        with torch.no_grad():
            eps_theta(tiny_model, z_ref, 400, tiny_model.null_text, bank.capture_hook())
        ctl = SharedAttentionController(
            bank, pyramid, SharedAttentionConfig(share_until_step=45,
                                                 edit_kind="translate2d"))
        return tiny_model, ctl, z_ref

    def _probe(self, model, ctl, z, ne):
        ctl.begin_step(0, 400)
        eps_theta(model, z, 400, ne, ctl.hook)
        return sum((r.y_edit_g ** 2).sum() for r in ctl.records) / 1000.0

    def test_latent_gradient_matches_fd(self, setup, rng):
        model, ctl, z_ref = setup
        z0 = (z_ref + 0.01).detach()
        ne = model.null_text.detach()
        idxs = rng.choice(z0.numel(), size=6, replace=False).tolist()
        assert fd_check(lambda z: self._probe(model, ctl, z, ne), z0, indices=idxs) < TOL

    def test_null_embedding_gradient_matches_fd(self, setup, rng):
        model, ctl, z_ref = setup
        ne0 = model.null_text.detach().clone()
        idxs = rng.choice(ne0.numel(), size=4, replace=False).tolist()
        assert fd_check(lambda ne: self._probe(model, ctl, z_ref, ne), ne0,
                        indices=idxs) < TOL

    def test_constant_loss_has_zero_gradients(self, tiny_model):
        z = torch.zeros(2, 8, 8, dtype=DTYPE, requires_grad=True)
        loss = (z * 0.0).sum() + 5.0   # z on the graph, gradient exactly zero
        grads, _ = gradient(loss, {"z": z})
        assert float(grads["z"].abs().max()) == 0.0
        detached = torch.tensor(5.0, dtype=DTYPE)  # z not on the graph at all
        grads, unused = gradient(detached, {"z": z})
        assert unused == {"z"} and float(grads["z"].abs().max()) == 0.0
