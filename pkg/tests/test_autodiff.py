import numpy as np
import pytest

from prisma import autodiff as ad


def fd_check(build_loss, arrays, step=1e-5, rtol=1e-6, atol=1e-8, max_entries=40):
    """Compare tape gradients with central finite differences per entry."""
    rng = np.random.default_rng(0)
    tape = ad.Tape()
    leaves = [tape.leaf(a) for a in arrays]
    loss = build_loss(*leaves)
    grads = tape.backward(loss)
    for arr, leaf in zip(arrays, leaves):
        g_ad = grads[leaf.nid]
        assert g_ad is not None, "parameter unreachable from loss"
        assert g_ad.shape == arr.shape
        n = arr.size
        idx = rng.choice(n, size=min(max_entries, n), replace=False)

        def loss_value():
            t = ad.Tape()
            ls = [t.leaf(a) for a in arrays]
            return float(build_loss(*ls).value)

        g_fd = ad.numerical_gradient(loss_value, arr, step=step, indices=idx)
        for i in idx:
            a, b = g_ad.reshape(-1)[i], g_fd.reshape(-1)[i]
            assert a == pytest.approx(b, rel=rtol, abs=atol), (
                f"grad mismatch at {i}: ad={a} fd={b}"
            )


def weighted_sum(v, w):
    return ad.sum_all(ad.mul(v, ad.Var(w)))


class TestBackwardBasics:
    def test_sum_gradient_is_ones(self):
        tape = ad.Tape()
        x = tape.leaf(np.arange(6.0).reshape(2, 3))
        grads = tape.backward(ad.sum_all(x))
        assert np.array_equal(grads[x.nid], np.ones((2, 3)))

    def test_non_scalar_loss_rejected(self):
        tape = ad.Tape()
        x = tape.leaf(np.ones(3))
        with pytest.raises(ValueError, match="scalar"):
            tape.backward(ad.add(x, x))

    def test_unreachable_parameter_gets_none(self):
        tape = ad.Tape()
        x = tape.leaf(np.ones(3))
        y = tape.leaf(np.ones(3))
        grads = tape.backward(ad.sum_all(x))
        assert grads[y.nid] is None

    def test_fft_roundtrip_loss_zero_gradient(self):
        rng = np.random.default_rng(1)
        xval = rng.standard_normal((1, 1, 8, 8))
        tape = ad.Tape()
        x = tape.leaf(xval)
        d = ad.sub(ad.ifft2(ad.fft2(x)), x)
        grads = tape.backward(ad.sum_all(ad.mul(d, d)))
        assert np.abs(grads[x.nid]).max() < 1e-12

    def test_sigmoid_affine_norm_matches_fd(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((4, 5))
        w = rng.standard_normal((3, 5))

        def loss(xv, wv):
            s = ad.sigmoid(ad.affine(xv, wv))
            return ad.sum_all(ad.mul(s, s))

        fd_check(loss, [x, w])

    def test_replay_determinism(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 4))
        w = rng.standard_normal((4, 4))

        def run():
            tape = ad.Tape()
            xv, wv = tape.leaf(x), tape.leaf(w)
            loss = ad.sum_all(ad.gelu(ad.affine(xv, wv)))
            g = tape.backward(loss)
            return float(loss.value), g[wv.nid].copy()

        l1, g1 = run()
        l2, g2 = run()
        assert l1 == l2
        assert np.array_equal(g1, g2)


class TestPrimitiveGradients:
    def setup_method(self):
        self.rng = np.random.default_rng(42)

    def test_add_sub_mul(self):
        a = self.rng.standard_normal((3, 4))
        b = self.rng.standard_normal((3, 4))
        r = self.rng.standard_normal((3, 4))
        fd_check(lambda x, y: weighted_sum(ad.mul(ad.add(x, y), ad.sub(x, y)), r), [a, b])

    def test_smul_bscale(self):
        x = self.rng.standard_normal((2, 3, 4, 4))
        s = self.rng.standard_normal(2)
        r = self.rng.standard_normal((2, 3, 4, 4))
        fd_check(lambda xv, sv: weighted_sum(ad.bscale(ad.smul(xv, 1.7), sv), r), [x, s])

    def test_channel_bias(self):
        x = self.rng.standard_normal((2, 3, 4, 4))
        b = self.rng.standard_normal((2, 3))
        r = self.rng.standard_normal((2, 3, 4, 4))
        fd_check(lambda xv, bv: weighted_sum(ad.add_channel_bias(xv, bv), r), [x, b])

    def test_nonlinearities(self):
        x = self.rng.standard_normal((5, 7)) * 2.0
        r = self.rng.standard_normal((5, 7))
        fd_check(lambda v: weighted_sum(ad.gelu(v), r), [x])
        fd_check(lambda v: weighted_sum(ad.sigmoid(v), r), [x])
        # keep ReLU inputs away from the kink
        xr = np.where(np.abs(x) < 0.05, 0.3, x)
        fd_check(lambda v: weighted_sum(ad.relu(v), r), [xr])

    def test_affine(self):
        x = self.rng.standard_normal((4, 6))
        w = self.rng.standard_normal((3, 6))
        b = self.rng.standard_normal(3)
        r = self.rng.standard_normal((4, 3))
        fd_check(lambda xv, wv, bv: weighted_sum(ad.affine(xv, wv, bv), r), [x, w, b])

    def test_conv1x1(self):
        x = self.rng.standard_normal((2, 3, 4, 4))
        w = self.rng.standard_normal((5, 3))
        b = self.rng.standard_normal(5)
        r = self.rng.standard_normal((2, 5, 4, 4))
        fd_check(lambda xv, wv, bv: weighted_sum(ad.conv1x1(xv, wv, bv), r), [x, w, b])

    def test_conv3x3(self):
        x = self.rng.standard_normal((2, 3, 6, 6))
        w = self.rng.standard_normal((4, 3, 3, 3))
        b = self.rng.standard_normal(4)
        r = self.rng.standard_normal((2, 4, 6, 6))
        fd_check(lambda xv, wv, bv: weighted_sum(ad.conv2d(xv, wv, bv), r), [x, w, b])

    def test_fft_ifft(self):
        x = self.rng.standard_normal((1, 2, 8, 8))
        rr = self.rng.standard_normal((1, 2, 8, 5))
        ri = self.rng.standard_normal((1, 2, 8, 5))
        rc = rr + 1j * ri

        def loss(v):
            s = ad.fft2(v)
            prod = ad.cmul(s, ad.Var(rc), conj_b=True)
            back = ad.ifft2(prod)
            return ad.sum_all(ad.mul(back, back))

        fd_check(loss, [x])

    def test_complex_chain(self):
        w = self.rng.standard_normal((3, 2, 3, 2, 2))  # (O, I, 2m-1, m, re/im)
        x = self.rng.standard_normal((1, 2, 8, 8))
        rfield = self.rng.standard_normal((1, 3, 8, 8))

        def loss(wv, xv):
            s = ad.take_modes(ad.fft2(xv), 2)
            wc = ad.as_complex(wv)
            y = ad.cspec_matmul(wc, s)
            full = ad.put_modes(y, 8, 5)
            out = ad.ifft2(full)
            return weighted_sum(out, rfield)

        fd_check(loss, [w, x])

    def test_cabs_and_cscale(self):
        x = self.rng.standard_normal((1, 3, 8, 8))
        m = self.rng.standard_normal((1, 1, 8, 5)) * 0.5 + 1.2

        def loss(xv, mv):
            s = ad.fft2(xv)
            mag = ad.cabs(ad.csum_channels(s))
            scaled = ad.cscale(s, ad.sigmoid(mv))
            out = ad.ifft2(scaled)
            return ad.add(ad.sum_all(ad.mul(mag, mag)), ad.sum_all(ad.mul(out, out)))

        fd_check(loss, [x, m], rtol=1e-5)

    def test_mean_reductions(self):
        x = self.rng.standard_normal((2, 3, 4, 4))
        r = self.rng.standard_normal((2, 3))
        fd_check(lambda v: weighted_sum(ad.mean_spatial(v), r), [x])
        fd_check(lambda v: ad.mean_all(v), [x])

    def test_scale_modes(self):
        s = self.rng.standard_normal((2, 1, 4, 2))
        w = self.rng.standard_normal((4, 2))
        r = self.rng.standard_normal((2, 1, 4, 2))
        fd_check(lambda sv, wv: weighted_sum(ad.scale_modes(sv, wv), r), [s, w])

    def test_resampling_gradients(self):
        x = self.rng.standard_normal((1, 2, 4, 4))
        r_up = self.rng.standard_normal((1, 2, 8, 8))
        r_dn = self.rng.standard_normal((1, 2, 2, 2))
        fd_check(lambda v: weighted_sum(ad.upsample2(v), r_up), [x])
        fd_check(lambda v: weighted_sum(ad.meanpool2(v), r_dn), [x])

    def test_concat_broadcast(self):
        a = self.rng.standard_normal((2, 2, 4, 4))
        b = self.rng.standard_normal((2, 1, 4, 4))
        r = self.rng.standard_normal((2, 5, 4, 4))

        def loss(av, bv):
            cat = ad.concat_channels([av, ad.broadcast_channels(bv, 3)])
            return weighted_sum(cat, r)

        fd_check(loss, [a, b])

    def test_groupnorm(self):
        x = self.rng.standard_normal((2, 4, 5, 5))
        gamma = self.rng.standard_normal(4) * 0.5 + 1.0
        beta = self.rng.standard_normal(4)
        r = self.rng.standard_normal((2, 4, 5, 5))
        fd_check(
            lambda xv, gv, bv: weighted_sum(ad.groupnorm(xv, gv, bv, groups=2), r),
            [x, gamma, beta],
            rtol=1e-5,
        )

    def test_dropout_mask_recorded(self):
        x = self.rng.standard_normal((2, 3, 4, 4))
        rng = np.random.default_rng(7)
        tape = ad.Tape()
        xv = tape.leaf(x)
        out = ad.dropout(xv, 0.5, rng)
        mask = out.value / np.where(x == 0, 1, x)
        grads = tape.backward(ad.sum_all(out))
        assert np.allclose(grads[xv.nid], mask)


def _recorded_adjoint(op, x):
    """Run op on a taped leaf and return (output value, recorded backward fn)."""
    tape = ad.Tape()
    leaf = tape.leaf(np.zeros(1))  # keep nid 0 occupied so op deps are explicit
    xv = tape._record(x, [])
    out = op(xv)
    entries = [fn for nid, fn in out.tape.nodes[out.nid] if nid == xv.nid]
    assert len(entries) == 1
    return out.value, entries[0]


def _rdot(u, v):
    if np.iscomplexobj(u) or np.iscomplexobj(v):
        return float(np.sum(u.real * v.real) + np.sum(u.imag * v.imag))
    return float(np.sum(u * v))


class TestLinearAdjoints:
    """<L x, y> == <x, L^T y> with L^T taken from the recorded backward rule."""

    def _cases(self):
        rng = np.random.default_rng(11)
        cplx = lambda shape: rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
        w1 = rng.standard_normal((4, 3))
        w3 = rng.standard_normal((4, 3, 3, 3))
        return [
            ("fft2", lambda v: ad.fft2(v), rng.standard_normal((1, 2, 16, 16)), cplx((1, 2, 16, 9))),
            ("ifft2", lambda v: ad.ifft2(v), cplx((1, 2, 16, 9)), rng.standard_normal((1, 2, 16, 16))),
            ("conv1x1", lambda v: ad.conv1x1(v, ad.Var(w1)), rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((2, 4, 4, 4))),
            ("conv2d", lambda v: ad.conv2d(v, ad.Var(w3)), rng.standard_normal((2, 3, 6, 6)), rng.standard_normal((2, 4, 6, 6))),
            ("take_modes", lambda v: ad.take_modes(v, 4), cplx((1, 2, 16, 9)), cplx((1, 2, 7, 4))),
            ("put_modes", lambda v: ad.put_modes(v, 16, 9), cplx((1, 2, 7, 4)), cplx((1, 2, 16, 9))),
            ("mean_spatial", lambda v: ad.mean_spatial(v), rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((2, 3))),
            ("meanpool2", lambda v: ad.meanpool2(v), rng.standard_normal((2, 3, 8, 8)), rng.standard_normal((2, 3, 4, 4))),
            ("upsample2", lambda v: ad.upsample2(v), rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((2, 3, 8, 8))),
            ("reshape", lambda v: ad.reshape(v, (2, 12)), rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 12))),
        ]

    def test_dot_identities(self):
        for name, op, x, y in self._cases():
            out, adj = _recorded_adjoint(op, x)
            lhs = _rdot(out, y)
            rhs = _rdot(x, adj(y))
            assert lhs == pytest.approx(rhs, rel=1e-10), name


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        p = {"w": np.ones((3,))}
        g = {"w": np.zeros((3,))}
        st = ad.adam_step(p, g, None, lr=0.1)
        assert np.array_equal(p["w"], np.ones(3))
        st["m"]["w"][:] = 1.0
        ad.adam_step(p, {"w": np.zeros(3)}, st, lr=0.1)
        assert np.all(st["m"]["w"] < 1.0)  # moments decay

    def test_one_step_hand_trace(self):
        # single scalar, constant gradient g from zero state:
        # m1 = (1-b1) g, v1 = (1-b2) g^2, mhat = g, vhat = g^2
        # update = -lr * g / (|g| + eps)
        g = 0.73
        lr = 0.05
        p = {"w": np.array([2.0])}
        ad.adam_step(p, {"w": np.array([g])}, None, lr=lr)
        expect = 2.0 - lr * g / (abs(g) + 1e-8)
        assert p["w"][0] == pytest.approx(expect, rel=1e-12)

    def test_rejects_bad_lr(self):
        with pytest.raises(ValueError, match="learning rate"):
            ad.adam_step({"w": np.zeros(1)}, {"w": np.zeros(1)}, None, lr=0.0)

    def test_bit_determinism(self):
        rng = np.random.default_rng(5)
        g_seq = [rng.standard_normal(4) for _ in range(10)]

        def run():
            p = {"w": np.zeros(4)}
            st = None
            for g in g_seq:
                st = ad.adam_step(p, {"w": g}, st, lr=1e-3)
            return p["w"].copy()

        assert np.array_equal(run(), run())


class TestEma:
    def test_identity_when_equal(self):
        p = {"w": np.full(3, 2.5)}
        sh = {"w": np.full(3, 2.5)}
        ad.ema_update(sh, p, half_life_epochs=5, steps_per_epoch=10)
        assert np.allclose(sh["w"], 2.5)

    def test_decay_definition(self):
        d = ad.ema_decay(5, 100)
        assert d**500 == pytest.approx(0.5, abs=1e-12)

    def test_half_life_closed_form(self):
        # after exactly h epochs of constant params p from shadow 0,
        # shadow = (1 - d^n) p = 0.5 p
        h_epochs, spe = 3, 40
        p = {"w": np.array([1.0])}
        sh = {"w": np.array([0.0])}
        for _ in range(h_epochs * spe):
            ad.ema_update(sh, p, half_life_epochs=h_epochs, steps_per_epoch=spe)
        assert sh["w"][0] == pytest.approx(0.5, abs=1e-12)


class TestInstrumentation:
    def test_constant_ops_record_nothing(self):
        before = ad.node_allocations()
        x = ad.Var(np.ones((1, 1, 8, 8)))
        y = ad.ifft2(ad.fft2(ad.gelu(x)))
        assert ad.node_allocations() == before
        assert y.tape is None

    def test_taped_ops_count(self):
        before = ad.node_allocations()
        tape = ad.Tape()
        x = tape.leaf(np.ones(3))
        ad.add(x, x)
        assert ad.node_allocations() == before + 2
