import numpy as np
import pytest

from memento.ember import (
    AffineHead,
    EmberContext,
    QnnLayer,
    affine_backward,
    affine_forward,
    head_cost,
    load_checkpoint,
    pool_context,
    qnn_backward,
    qnn_forward,
    save_checkpoint,
)
from memento.errors import DimensionMismatch


def _flatten(params: dict) -> np.ndarray:
    return np.concatenate([params[k].ravel() for k in sorted(params)])


def _unflatten(vec: np.ndarray, template: dict) -> dict:
    out, off = {}, 0
    for k in sorted(template):
        size = template[k].size
        out[k] = vec[off : off + size].reshape(template[k].shape)
        off += size
    return out


def _fd_check(analytic: np.ndarray, f, x: np.ndarray, h: float = 1e-4):
    """Central finite differences against an analytic gradient."""
    fd = np.empty_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        fd.flat[i] = (f(xp) - f(xm)) / (2 * h)
    np.testing.assert_allclose(analytic.ravel(), fd.ravel(), rtol=1e-4, atol=1e-7)


def _randomized_head(rng, dc=6, d=4, hidden=12, blocks=2) -> AffineHead:
    head = AffineHead(context_dim=dc, feature_dim=d, hidden=hidden, blocks=blocks, seed=3)
    # move off the exact-identity init so gradients are nontrivial
    head.params["w_out"] = rng.normal(0.0, 0.2, head.params["w_out"].shape)
    head.params["b_out"] = rng.normal(0.0, 0.2, head.params["b_out"].shape)
    return head


class TestAffineForward:
    def test_identity_at_init_bitwise(self, rng):
        head = AffineHead(context_dim=8, feature_dim=5, seed=0)
        for _ in range(200):
            c = rng.normal(size=8)
            e = rng.normal(size=5).astype(np.float32)
            out = affine_forward(head, c, e)
            assert np.array_equal(out, e.astype(np.float64))

    def test_forced_constant_modulation(self):
        head = AffineHead(context_dim=3, feature_dim=2, seed=0)
        head.params["w_out"] = np.zeros_like(head.params["w_out"])
        head.params["b_out"] = np.array([2.0, 2.0, 1.0, 1.0])
        out = affine_forward(head, np.zeros(3), np.array([0.5, -1.0]))
        assert out == pytest.approx([2.0, -1.0])

    def test_matches_scalar_loop_oracle(self, rng):
        head = _randomized_head(rng, dc=8, d=8, hidden=10, blocks=2)
        c = rng.normal(size=8)
        e = rng.normal(size=8)
        got = affine_forward(head, c, e)
        want = _scalar_affine(head, c, e)
        np.testing.assert_allclose(got, want, atol=1e-6)

    def test_accepts_ember_context(self, rng):
        head = AffineHead(context_dim=4, feature_dim=3, seed=1)
        ctx = EmberContext(c=rng.normal(size=4))
        e = rng.normal(size=3)
        assert np.array_equal(affine_forward(head, ctx, e), e)

    def test_elementwise_locality(self, rng):
        head = _randomized_head(rng)
        c = rng.normal(size=6)
        e = rng.normal(size=4)
        base = affine_forward(head, c, e)
        e2 = e.copy()
        e2[2] += 0.25
        out = affine_forward(head, c, e2)
        changed = out != base
        assert list(changed) == [False, False, True, False]

    def test_dimension_mismatch(self):
        head = AffineHead(context_dim=3, feature_dim=2, seed=0)
        with pytest.raises(DimensionMismatch):
            affine_forward(head, np.zeros(4), np.zeros(2))
        with pytest.raises(DimensionMismatch):
            affine_forward(head, np.zeros(3), np.zeros(5))


def _scalar_affine(head: AffineHead, c, e):
    """Plain-Python re-computation of the affine head, loops only."""
    import math

    p = {k: v.tolist() for k, v in head.params.items()}
    z = [
        sum(p["w_in"][i][j] * c[j] for j in range(len(c))) + p["b_in"][i]
        for i in range(head.hidden)
    ]
    for b in range(head.blocks):
        m = sum(x * x for x in z) / len(z)
        s = 1.0 / math.sqrt(m + 1e-8)
        u = [z[i] * s * p[f"g{b}"][i] for i in range(len(z))]
        a = [
            sum(p[f"w1_{b}"][i][j] * u[j] for j in range(len(u))) + p[f"b1_{b}"][i]
            for i in range(len(z))
        ]
        r = [max(x, 0.0) for x in a]
        z = [
            z[i]
            + sum(p[f"w2_{b}"][i][j] * r[j] for j in range(len(r)))
            + p[f"b2_{b}"][i]
            for i in range(len(z))
        ]
    out = [
        sum(p["w_out"][i][j] * z[j] for j in range(len(z))) + p["b_out"][i]
        for i in range(2 * head.feature_dim)
    ]
    gamma, beta = out[: head.feature_dim], out[head.feature_dim :]
    return np.array([gamma[i] * e[i] + beta[i] for i in range(head.feature_dim)])


class TestAffineBackward:
    def test_identity_head_feature_grad(self, rng):
        head = AffineHead(context_dim=4, feature_dim=3, seed=0)
        up = np.ones(3)
        grads = affine_backward(head, rng.normal(size=4), rng.normal(size=3), up)
        assert np.array_equal(grads.d_feature, np.ones(3))

    def test_constant_gamma_feature_grad(self, rng):
        head = AffineHead(context_dim=3, feature_dim=2, seed=0)
        head.params["b_out"] = np.array([2.0, -3.0, 0.0, 0.0])
        up = rng.normal(size=2)
        grads = affine_backward(head, np.zeros(3), rng.normal(size=2), up)
        assert grads.d_feature == pytest.approx(up * np.array([2.0, -3.0]))

    def test_finite_differences_all_parameters(self, rng):
        head = _randomized_head(rng)
        c = rng.normal(size=6)
        e = rng.normal(size=4)
        up = rng.normal(size=4)
        grads = affine_backward(head, c, e, up)

        template = head.params

        def loss_from_params(vec):
            saved = dict(head.params)
            head.params = _unflatten(vec, template)
            val = float(np.dot(up, affine_forward(head, c, e)))
            head.params = saved
            return val

        _fd_check(_flatten(grads.params), loss_from_params, _flatten(head.params))
        _fd_check(
            grads.d_context, lambda v: float(np.dot(up, affine_forward(head, v, e))), c.copy()
        )
        _fd_check(
            grads.d_feature, lambda v: float(np.dot(up, affine_forward(head, c, v))), e.copy()
        )


class TestQnn:
    def test_zero_weights_identity(self, rng):
        layer = QnnLayer(width=12, heads=3)
        for _ in range(20):
            x = rng.normal(size=12)
            assert np.array_equal(qnn_forward(layer, x), x)

    def test_hand_example(self):
        layer = QnnLayer(width=2, heads=1)
        layer.w = np.array([[[1.0, 0.0], [1.0, -1.0]]])
        out = qnn_forward(layer, np.array([1.0, 2.0]))
        assert out == pytest.approx([2.0, 2.0])

    def test_zero_input(self, rng):
        layer = QnnLayer(width=8, heads=2, seed=1, scale=0.5)
        assert np.array_equal(qnn_forward(layer, np.zeros(8)), np.zeros(8))

    def test_skip_guarantee(self, rng):
        layer = QnnLayer(width=8, heads=2, seed=2, scale=0.7)
        x = rng.normal(size=8)
        out = qnn_forward(layer, x)
        gated = np.concatenate(
            [
                x[h * 4 : (h + 1) * 4] * np.maximum(layer.w[h] @ x, 0.0)
                for h in range(2)
            ]
        )
        assert np.linalg.norm(out - x) == pytest.approx(np.linalg.norm(gated))

    def test_zero_weight_backward_is_identity_map(self, rng):
        layer = QnnLayer(width=6, heads=2)
        up = rng.normal(size=6)
        dw, dx = qnn_backward(layer, rng.normal(size=6), up)
        assert np.array_equal(dx, up)
        assert np.count_nonzero(dw) == 0

    def test_fully_active_gate_weight_grad(self):
        layer = QnnLayer(width=2, heads=1)
        layer.w = np.array([[[0.5, 0.1], [0.2, 0.4]]])
        x = np.array([1.0, 2.0])  # both pre-activations positive
        up = np.array([0.7, -0.3])
        dw, _ = qnn_backward(layer, x, up)
        assert dw[0] == pytest.approx(np.outer(up * x, x))

    def test_finite_differences(self, rng):
        for trial in range(10):
            layer = QnnLayer(width=8, heads=2, seed=trial, scale=0.6)
            x = rng.normal(size=8)
            pre = np.concatenate([layer.w[h] @ x for h in range(2)])
            if np.abs(pre).min() < 1e-6:  # skip kink-adjacent draws
                continue
            up = rng.normal(size=8)
            dw, dx = qnn_backward(layer, x, up)

            def loss_w(vec):
                saved = layer.w
                layer.w = vec.reshape(layer.w.shape)
                val = float(np.dot(up, qnn_forward(layer, x)))
                layer.w = saved
                return val

            _fd_check(dw.ravel(), loss_w, layer.w.ravel().copy())
            _fd_check(dx, lambda v: float(np.dot(up, qnn_forward(layer, v))), x.copy())

    def test_width_divisibility(self):
        with pytest.raises(DimensionMismatch):
            QnnLayer(width=10, heads=3)


class TestHeadCost:
    def test_cost_is_width_squared(self):
        for heads in (1, 2, 4, 8):
            assert head_cost(QnnLayer(width=8, heads=heads)) == 64

    def test_reduction_vs_full_width_heads(self):
        for heads in (2, 8):
            layer = QnnLayer(width=8, heads=heads)
            full_width = heads * 8 * 8
            assert head_cost(layer) == full_width // heads

    def test_instrumented_multiply_count(self):
        # count gate multiplies by hand in a scalar loop
        layer = QnnLayer(width=8, heads=2, seed=0, scale=0.4)
        x = np.arange(8.0)
        count = 0
        for h in range(layer.heads):
            for row in range(layer.slice_width):
                for col in range(layer.width):
                    count += 1
                    _ = layer.w[h, row, col] * x[col]
        assert count == head_cost(layer)


class TestPoolContext:
    def test_mean_over_rows(self, rng):
        m = rng.normal(size=(5, 3))
        ctx = pool_context(m)
        assert ctx.c == pytest.approx(m.mean(axis=0))

    def test_empty_rejected(self):
        with pytest.raises(DimensionMismatch):
            pool_context(np.empty((0, 3)))


class TestCheckpoint:
    def test_round_trip(self, rng, tmp_path):
        head = _randomized_head(rng)
        path = tmp_path / "head.json"
        save_checkpoint(head.checkpoint_arrays(), path)
        loaded = load_checkpoint(path)
        assert set(loaded) == set(head.params)
        for name in head.params:
            np.testing.assert_allclose(loaded[name], head.params[name], atol=1e-6)
        head2 = AffineHead(context_dim=6, feature_dim=4, hidden=12, blocks=2, seed=99)
        head2.load_arrays(loaded)
        c, e = rng.normal(size=6), rng.normal(size=4)
        np.testing.assert_allclose(
            affine_forward(head2, c, e), affine_forward(head, c, e), atol=1e-5
        )

    def test_manifest_has_shapes_and_offsets(self, rng, tmp_path):
        import json

        layer = QnnLayer(width=4, heads=2, seed=0, scale=0.3)
        path = tmp_path / "qnn.json"
        save_checkpoint(layer.checkpoint_arrays(), path)
        manifest = json.loads(path.read_text())
        assert manifest["tensors"]["w"]["shape"] == [2, 2, 4]
        assert manifest["tensors"]["w"]["offset"] == 0
        assert (tmp_path / "qnn.bin").stat().st_size == 2 * 2 * 4 * 4
