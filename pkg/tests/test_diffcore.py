import math

import numpy as np
import pytest

from ddfire.diffcore import Adam, Graph, Parameter, ShapeError, finite_diff_check


def grad_of(build, x):
    """``build(g, node) -> scalar node``; returns ``(value, grad)`` at ``x``."""
    g = Graph()
    node = g.input(np.array(x, dtype=np.float64), requires_grad=True)
    root = build(g, node)
    g.backward(root)
    return float(root.value), node.grad


def fd_error(build, x, h=1e-5):
    return finite_diff_check(lambda v: grad_of(build, v), x, h=h)


class TestForwardExamples:
    def test_relu_negative(self):
        g = Graph()
        assert g.relu(g.constant(np.array(-2.0))).value == 0.0

    def test_sigmoid_zero(self):
        g = Graph()
        assert g.sigmoid(g.constant(np.array(0.0))).value == 0.5

    def test_bce_half(self):
        g = Graph()
        out = g.bce(g.constant(np.array([0.5])), np.array([1.0]))
        assert out.value[0] == pytest.approx(0.693147, abs=1e-6)

    def test_softclamp_clamps(self):
        g = Graph()
        v = g.softclamp(g.constant(np.array([-0.5, 0.05, 0.3])), -0.1, 0.1).value
        np.testing.assert_allclose(v, [-0.1, 0.05, 0.1])

    def test_shape_mismatch_rejected(self):
        g = Graph()
        with pytest.raises(ShapeError):
            g.matmul(g.constant(np.ones((2, 3))), g.constant(np.ones((2, 3))))
        with pytest.raises(ShapeError):
            g.add(g.constant(np.ones((2, 3))), g.constant(np.ones((4,))))

    def test_column_against_vector_rejected(self):
        g = Graph()
        with pytest.raises(ShapeError):
            g.sub(g.constant(np.ones((5, 1))), g.constant(np.ones(5)))
        # same-rank outer products and scalar-like operands remain valid
        assert g.mul(g.constant(np.ones((5, 1))), g.constant(np.ones((1, 3)))).value.shape == (5, 3)
        assert g.add(g.constant(np.ones((5, 1))), g.constant(np.ones(1))).value.shape == (5, 1)


class TestBackwardExamples:
    def test_product_rule(self):
        g = Graph()
        x = g.input(np.array(3.0), True)
        y = g.input(np.array(2.0), True)
        g.backward(g.mul(x, y))
        assert x.grad == 2.0 and y.grad == 3.0

    def test_l1_sign(self):
        _, grad = grad_of(lambda g, n: g.l1(n), [-1.0, 2.0])
        np.testing.assert_array_equal(grad, [-1.0, 1.0])

    def test_l1_subgradient_zero_at_kink(self):
        _, grad = grad_of(lambda g, n: g.l1(n), [0.0, 2.0])
        assert grad[0] == 0.0

    def test_non_scalar_root(self):
        g = Graph()
        x = g.input(np.ones(3), True)
        with pytest.raises(ValueError):
            g.backward(g.scale(x, 2.0))

    def test_accumulation_doubles(self):
        p = Parameter(np.array([1.0, -2.0]))

        def run():
            g = Graph()
            g.backward(g.sqnorm(g.param(p)))

        run()
        once = p.grad.copy()
        run()
        np.testing.assert_array_equal(p.grad, 2 * once)

    def test_frozen_param_gets_no_gradient(self):
        p = Parameter(np.array([1.0, 2.0]))
        g = Graph()
        g.backward(g.sqnorm(g.param(p, frozen=True)))
        assert not p.grad.any()

    def test_mlp_against_finite_differences(self):
        rng = np.random.default_rng(0)
        w1, w2 = rng.normal(size=(3, 5)), rng.normal(size=(5, 1))
        xin = rng.normal(size=(4, 3))

        def build(g, x):
            h = g.sigmoid(g.matmul(x, g.constant(w1)))
            h = g.relu(g.shift(h, -0.4))
            return g.sum(g.matmul(h, g.constant(w2)))

        assert fd_error(build, xin) < 1e-4


class TestOpGradients:
    """Random-input central-difference checks, away from kinks."""

    rng = np.random.default_rng(1)

    @pytest.mark.parametrize("name,build", [
        ("add", lambda g, n: g.sum(g.add(n, g.constant(np.arange(3.0))))),
        ("sub", lambda g, n: g.sum(g.mul(g.sub(n, g.constant(np.ones((2, 3)))), n))),
        ("mul_broadcast", lambda g, n: g.sum(g.mul(n, g.constant(np.array([[1.0], [2.0]]))))),
        ("scale_shift", lambda g, n: g.sqnorm(g.shift(g.scale(n, 3.0), 1.0))),
        ("sigmoid", lambda g, n: g.sum(g.sigmoid(n))),
        ("sin_cos", lambda g, n: g.sum(g.mul(g.sin(n), g.cos(n)))),
        ("abs", lambda g, n: g.sum(g.mul(g.abs(n), n))),
        ("concat", lambda g, n: g.sqnorm(g.concat([n, g.scale(n, 2.0)], axis=1))),
        ("slice", lambda g, n: g.sqnorm(g.slice(n, 1, 3, axis=1))),
        ("take", lambda g, n: g.sqnorm(g.take(n, np.array([0, 0, 1])))),
        ("reshape", lambda g, n: g.sum(g.mul(g.reshape(n, (3, 2)), g.constant(np.arange(6.0).reshape(3, 2))))),
        ("forward_diff", lambda g, n: g.sqnorm(g.forward_diff(n, 1))),
        ("mean", lambda g, n: g.mean(g.mul(n, n))),
        ("norm", lambda g, n: g.sum(g.norm(n, axis=1))),
        ("matmul", lambda g, n: g.sum(g.matmul(n, g.constant(np.ones((3, 2)))))),
        ("bce", lambda g, n: g.sum(g.bce(g.sigmoid(n), np.array([[1.0, 0.0, 1.0], [0.0, 1.0, 0.0]])))),
    ])
    def test_op(self, name, build):
        x = self.rng.uniform(0.2, 1.0, (2, 3)) * self.rng.choice([-1, 1], (2, 3))
        assert fd_error(build, x) < 1e-4, name

    def test_relu_away_from_kink(self):
        x = np.array([[-0.7, 0.4, 1.3], [0.9, -0.2, -1.5]])
        assert fd_error(lambda g, n: g.sum(g.mul(g.relu(n), n)), x) < 1e-4

    def test_softclamp_inside_and_outside(self):
        x = np.array([[-0.5, 0.05, 0.3], [0.02, -0.07, 2.0]])
        _, grad = grad_of(lambda g, n: g.sum(g.softclamp(n, -0.1, 0.1)), x)
        np.testing.assert_array_equal(grad, [[0, 1, 0], [1, 1, 0]])

    def test_linear(self):
        rng = np.random.default_rng(3)
        w, b = rng.normal(size=(3, 2)), rng.normal(size=(2,))
        x = rng.normal(size=(4, 3))
        build = lambda g, n: g.sqnorm(g.linear(n, g.constant(w), g.constant(b)))  # noqa: E731
        assert fd_error(build, x) < 1e-4


class TestBilinear:
    plane = np.arange(4.0).reshape(2, 2, 1)

    def sample(self, uv, plane=None):
        g = Graph()
        return g.bilinear_sample(g.constant(self.plane if plane is None else plane),
                                 g.constant(np.atleast_2d(uv))).value

    def test_center_is_mean(self):
        assert self.sample([0.0, 0.0])[0, 0] == pytest.approx(1.5)

    def test_grid_node_exact(self):
        # u indexes columns, v rows: (u, v) = (1, -1) is row 0, column 1
        assert self.sample([1.0, -1.0])[0, 0] == 1.0
        assert self.sample([-1.0, 1.0])[0, 0] == 2.0

    def test_grid_node_weight_one(self):
        g = Graph()
        pl = g.input(self.plane.copy(), True)
        g.backward(g.sum(g.bilinear_sample(pl, g.constant(np.array([[-1.0, 1.0]])))))
        expect = np.zeros((2, 2, 1))
        expect[1, 0, 0] = 1.0
        np.testing.assert_array_equal(pl.grad, expect)

    def test_uv_gradient_at_center(self):
        build = lambda g, n: g.sum(g.bilinear_sample(g.constant(self.plane), n))  # noqa: E731
        _, grad = grad_of(build, [[0.0, 0.0]])
        # value = 1.5 + 0.5 u + 1.0 v on this plane
        np.testing.assert_allclose(grad, [[0.5, 1.0]], atol=1e-12)
        assert fd_error(build, [[0.0, 0.0]], h=1e-6) < 1e-6

    def test_clamped_axis_has_zero_uv_gradient(self):
        build = lambda g, n: g.sum(g.bilinear_sample(g.constant(self.plane), n))  # noqa: E731
        _, grad = grad_of(build, [[1.5, 0.2]])
        assert grad[0, 0] == 0.0 and grad[0, 1] != 0.0
        assert self.sample([1.5, 0.2])[0, 0] == pytest.approx(self.sample([1.0, 0.2])[0, 0])

    def test_matches_scalar_reference(self):
        rng = np.random.default_rng(4)
        plane = rng.normal(size=(5, 5, 3))
        uv = rng.uniform(-1, 1, (20, 2))
        got = self.sample(uv, plane)
        for (u, v), row in zip(uv, got):
            fx, fy = (u + 1) * 2, (v + 1) * 2
            j, i = min(int(fx), 3), min(int(fy), 3)
            a, b = fx - j, fy - i
            ref = ((1 - a) * (1 - b) * plane[i, j] + a * (1 - b) * plane[i, j + 1]
                   + (1 - a) * b * plane[i + 1, j] + a * b * plane[i + 1, j + 1])
            np.testing.assert_allclose(row, ref, atol=1e-12)

    def test_stacked_planes_match_single(self):
        rng = np.random.default_rng(5)
        planes = rng.normal(size=(3, 4, 4, 2))
        uv = rng.uniform(-1, 1, (6, 3, 2))
        g = Graph()
        stacked = g.bilinear_sample(g.constant(planes), g.constant(uv)).value
        for k in range(3):
            np.testing.assert_allclose(stacked[:, k], self.sample(uv[:, k], planes[k]), atol=1e-12)

    def test_gradients_random(self):
        rng = np.random.default_rng(6)
        planes = rng.normal(size=(2, 4, 4, 3))
        uv = rng.uniform(-0.95, 0.95, (5, 2, 2))
        w = rng.normal(size=(5, 2, 3))
        by_plane = lambda g, n: g.sum(g.mul(g.bilinear_sample(n, g.constant(uv)), g.constant(w)))  # noqa: E731
        by_uv = lambda g, n: g.sum(g.mul(g.bilinear_sample(g.constant(planes), n), g.constant(w)))  # noqa: E731
        assert fd_error(by_plane, planes) < 1e-6
        assert fd_error(by_uv, uv, h=1e-6) < 1e-4


class TestAdam:
    def test_first_step_magnitude_is_lr(self):
        p = Parameter(np.array([1.0, -2.0, 0.5]))
        opt = Adam([([p], 0.01)])
        p.grad[...] = [3.0, -0.2, 1e-3]
        opt.step()
        np.testing.assert_allclose(np.abs(p.value - [1.0, -2.0, 0.5]), 0.01, rtol=1e-4)

    def test_zero_gradient_no_change(self):
        p = Parameter(np.array([1.0, 2.0]))
        opt = Adam([([p], 0.1)])
        opt.step()
        np.testing.assert_array_equal(p.value, [1.0, 2.0])

    def test_non_trainable_untouched(self):
        p = Parameter(np.array([1.0]), trainable=False)
        opt = Adam([([p], 0.1)])
        p.grad[...] = 5.0
        opt.step()
        assert p.value[0] == 1.0

    def test_scalar_convergence(self):
        w = Parameter(np.array([0.0]))
        opt = Adam([([w], 0.1)])
        for _ in range(200):
            opt.zero_grad()
            g = Graph()
            g.backward(g.sqnorm(g.shift(g.param(w), -3.0)))
            opt.step()
        assert abs(w.value[0] - 3.0) < 0.05

    def test_step_counter_increases(self):
        p = Parameter(np.array([1.0]))
        opt = Adam([([p], 0.1)])
        for k in range(3):
            p.grad[...] = 1.0
            opt.step()
            assert opt.state[id(p)].step == k + 1


class TestFiniteDiffCheck:
    def test_quadratic(self):
        assert finite_diff_check(lambda x: (float(np.sum(x ** 2)), 2 * x), [1.0, -2.0]) < 1e-8

    def test_l1_away_from_kink(self):
        assert finite_diff_check(lambda x: (float(np.abs(x).sum()), np.sign(x)), [0.5, -1.5]) < 1e-8

    def test_detects_wrong_gradient(self):
        assert finite_diff_check(lambda x: (float(np.sum(x ** 2)), x), [1.0, 2.0]) > 0.4

    def test_explicit_grad_argument(self):
        err = finite_diff_check(lambda x: float(np.sum(np.sin(x))), [0.3, 0.7],
                                grad=np.cos([0.3, 0.7]))
        assert err < 1e-6


def test_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(9)
        p = Parameter(rng.normal(size=(4, 3)))
        x = rng.normal(size=(8, 4))
        g = Graph()
        root = g.sum(g.sigmoid(g.matmul(g.constant(x), g.param(p))))
        g.backward(root)
        return root.value.copy(), p.grad.copy()

    (a, ga), (b, gb) = run(), run()
    assert a.tobytes() == b.tobytes() and ga.tobytes() == gb.tobytes()


def test_reduction_accumulates_in_float64():
    g = Graph()
    x = np.full(10_000_000 // 100, 0.1, dtype=np.float32)
    s = g.sum(g.constant(x)).value
    assert math.isclose(float(s), 0.1 * x.size, rel_tol=1e-6)
