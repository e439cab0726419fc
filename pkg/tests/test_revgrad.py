"""Reversible backprop against the stored-activation baseline and finite differences."""
import numpy as np
import pytest

from revnet import kernels as K
from revnet.coupling import ResidualFn, ReversibleBlock, ZeroFn, couple_forward
from revnet.kernels import KernelParams
from revnet.metrics import MemMeter
from revnet.revgrad import (StackCheckpoint, accumulate_grads, block_reverse_backprop,
                            block_activation_bytes, fd_floor, grad_check, rel_err, stack_backward,
                            stack_forward, stored_backprop)

from conftest import max_rel, norm_rel, numeric_grad

TINY = 1e-30  # effectively no floor: pure per-coordinate relative error


def make_stack(rng, depth, channels=8, kind="basic", zero_last=False, dtype=np.float64):
    return [ReversibleBlock.random(rng, channels, kind, dtype, zero_last) for _ in range(depth)]


def halves(rng, shape):
    return rng.standard_normal(shape), rng.standard_normal(shape)


def run_reversible(blocks, x1, x2, dy1, dy2, meter=None, replay=True):
    kw = {} if meter is None else {"meter": meter}
    ck = stack_forward(blocks, x1, x2, **kw)
    return stack_backward(blocks, ck, dy1, dy2, replay=replay, **kw)


def all_grads(res):
    out = [res.dx1, res.dx2]
    for gf, gg in zip(res.dwf, res.dwg):
        for d in gf + gg:
            out.extend(d.values())
    return out


def forward_loss(blocks, x1, x2, a, b):
    y1, y2 = x1, x2
    for blk in blocks:
        y1, y2 = couple_forward(blk, y1, y2)
    return float(np.sum(y1 * a) + np.sum(y2 * b))


class TestBlockReverseBackprop:
    def test_zero_functions_pass_gradients(self, rng):
        block = ReversibleBlock(ZeroFn(4), ZeroFn(4))
        x1, x2 = halves(rng, (2, 4, 5, 5))
        a, b = halves(rng, (2, 4, 5, 5))
        r1, r2, gb = block_reverse_backprop(block, x1, x2, a, b)
        assert np.array_equal(gb.dx1, a) and np.array_equal(gb.dx2, b)
        assert np.array_equal(r1, x1) and np.array_equal(r2, x2)
        assert gb.dwf == [] and gb.dwg == []

    def test_zero_initialised_block_passes_gradients(self, rng):
        block = ReversibleBlock.random(rng, 8, zero_last=True)
        x1, x2 = halves(rng, (2, 4, 5, 5))
        a, b = halves(rng, (2, 4, 5, 5))
        y1, y2 = couple_forward(block, x1, x2)
        r1, r2, gb = block_reverse_backprop(block, y1, y2, a, b)
        assert np.array_equal(gb.dx1, a) and np.array_equal(gb.dx2, b)
        assert np.array_equal(r1, x1) and np.array_equal(r2, x2)
        # everything upstream of the zero conv sees no signal; the zero conv itself does
        for fn, grads in ((block.f, gb.dwf), (block.g, gb.dwg)):
            for d in grads[:-1]:
                assert all(not v.any() for v in d.values())
            num = numeric_grad(lambda: forward_loss([block], x1, x2, a, b), fn.params[-1].weight)
            assert np.any(num) and norm_rel(grads[-1]["weight"], num) < 1e-8

    @pytest.mark.parametrize("kind", ["basic", "bottleneck"])
    def test_matches_stored_baseline(self, rng, kind):
        block = make_stack(rng, 1, 8, kind)[0]
        x1, x2 = halves(rng, (2, 4, 6, 6))
        a, b = halves(rng, (2, 4, 6, 6))
        ref = stored_backprop([block], x1, x2, a, b)
        y1, y2 = couple_forward(block, x1, x2)
        r1, r2, gb = block_reverse_backprop(block, y1, y2, a, b)
        assert max_rel(r1, x1, TINY) < 1e-10 and max_rel(r2, x2, TINY) < 1e-10
        got = [gb.dx1, gb.dx2] + [v for d in gb.dwf + gb.dwg for v in d.values()]
        for g, r in zip(got, all_grads(ref)):
            assert g.shape == r.shape
            assert max_rel(g, r, 1e-12) < 1e-10

    def test_finite_differences(self, rng):
        block = make_stack(rng, 1, 4)[0]
        x1, x2 = halves(rng, (2, 2, 4, 4))
        a, b = halves(rng, (2, 2, 4, 4))
        y1, y2 = couple_forward(block, x1, x2)
        _, _, gb = block_reverse_backprop(block, y1, y2, a, b)

        def loss():
            return forward_loss([block], x1, x2, a, b)

        for p, g in zip(block.f.params + block.g.params, gb.dwf + gb.dwg):
            for name, arr in p.arrays().items():
                assert norm_rel(g[name], numeric_grad(loss, arr)) < 1e-6, name
        assert norm_rel(gb.dx1, numeric_grad(loss, x1)) < 1e-6
        assert norm_rel(gb.dx2, numeric_grad(loss, x2)) < 1e-6

    def test_rejects_non_additive(self, rng):
        block = ReversibleBlock.random(rng, 4, coupling="affine")
        x = halves(rng, (1, 2, 3, 3))
        with pytest.raises(ValueError, match="additive"):
            block_reverse_backprop(block, *x, *x)


class TestStackBackward:
    def test_single_block_reduces_to_block_op(self, rng):
        block = make_stack(rng, 1)[0]
        x1, x2 = halves(rng, (2, 4, 5, 5))
        a, b = halves(rng, (2, 4, 5, 5))
        res = run_reversible([block], x1, x2, a, b)
        y1, y2 = couple_forward(block, x1, x2)
        r1, r2, gb = block_reverse_backprop(block, y1, y2, a, b)
        assert np.array_equal(res.dx1, gb.dx1) and np.array_equal(res.dx2, gb.dx2)
        assert np.array_equal(res.x1, r1) and np.array_equal(res.x2, r2)

    @pytest.mark.parametrize("k", [1, 3, 10])
    def test_identity_stack_passes_gradients(self, rng, k):
        blocks = make_stack(rng, k, zero_last=True)
        x1, x2 = halves(rng, (2, 4, 4, 4))
        a, b = halves(rng, (2, 4, 4, 4))
        for res in (run_reversible(blocks, x1, x2, a, b), stored_backprop(blocks, x1, x2, a, b)):
            assert np.array_equal(res.dx1, a) and np.array_equal(res.dx2, b)

    @pytest.mark.parametrize("depth", [1, 2, 4, 8, 16])
    def test_oracle_equivalence(self, rng, depth):
        blocks = make_stack(rng, depth)
        x1, x2 = halves(rng, (2, 4, 6, 6))
        a, b = halves(rng, (2, 4, 6, 6))
        ref = stored_backprop(blocks, x1, x2, a, b)
        res = run_reversible(blocks, x1, x2, a, b)
        assert max(np.max(np.abs(res.x1 - x1)), np.max(np.abs(res.x2 - x2))) < 1e-10
        for g, r in zip(all_grads(res), all_grads(ref)):
            assert max_rel(g, r, TINY) < 1e-9

    def test_bitwise_reproducible(self, rng):
        blocks = make_stack(rng, 6)
        x1, x2 = halves(rng, (2, 4, 5, 5))
        a, b = halves(rng, (2, 4, 5, 5))
        first = all_grads(run_reversible(blocks, x1, x2, a, b))
        second = all_grads(run_reversible(blocks, x1, x2, a, b))
        assert all(np.array_equal(p, q) for p, q in zip(first, second))

    def test_no_replay_variant_error(self, rng):
        blocks = make_stack(rng, 8)
        x1, x2 = halves(rng, (2, 4, 5, 5))
        a, b = halves(rng, (2, 4, 5, 5))
        ref = stored_backprop(blocks, x1, x2, a, b)
        res = run_reversible(blocks, x1, x2, a, b, replay=False)
        worst = max(max_rel(g, r, 1e-8) for g, r in zip(all_grads(res), all_grads(ref)))
        assert np.isfinite(worst) and worst < 1e-6

    def test_weight_sharing(self, rng):
        f = ResidualFn.basic(rng, 2, zero_last=False)
        blocks = [ReversibleBlock(f, ResidualFn.basic(rng, 2, zero_last=False)),
                  ReversibleBlock(f.share(), ResidualFn.basic(rng, 2, zero_last=False))]
        assert blocks[0].f.params[1] is blocks[1].f.params[1]
        x1, x2 = halves(rng, (2, 2, 4, 4))
        a, b = halves(rng, (2, 2, 4, 4))
        res = run_reversible(blocks, x1, x2, a, b)
        summed = accumulate_grads(res.weight_grads(blocks))
        assert len(summed) == len(f.params) + 2 * len(f.params)

        def loss():
            return forward_loss(blocks, x1, x2, a, b)

        for p in f.params:
            for name, arr in p.arrays().items():
                assert norm_rel(summed[id(p)][1][name], numeric_grad(loss, arr)) < 1e-6

    def test_reversible_peak_independent_of_depth(self, rng):
        peaks = []
        for depth in (2, 8, 24):
            blocks = make_stack(rng, depth)
            x1, x2 = halves(rng, (2, 4, 4, 4))
            m = MemMeter()
            run_reversible(blocks, x1, x2, *halves(rng, (2, 4, 4, 4)), meter=m)
            assert m.live_bytes == 2 * 2 * x1.nbytes  # inputs and their gradients
            peaks.append(m.peak_bytes)
        assert peaks[0] == peaks[1] == peaks[2]

    def test_stored_peak_grows_by_block_footprint(self, rng):
        x1, x2 = halves(rng, (2, 4, 4, 4))
        peaks = []
        for depth in (4, 8):
            blocks = make_stack(rng, depth)
            m = MemMeter()
            stored_backprop(blocks, x1, x2, *halves(rng, (2, 4, 4, 4)), meter=m)
            peaks.append(m.peak_bytes)
        per_block = (peaks[1] - peaks[0]) / 4
        assert per_block == block_activation_bytes(blocks[0], x1, x2)

    def test_checkpoint_bytes(self, rng):
        x1, x2 = halves(rng, (2, 4, 4, 4))
        ck = StackCheckpoint(x1, x2, [(0, np.zeros(10))])
        assert ck.nbytes == x1.nbytes + x2.nbytes + 80


class TestStoredBackprop:
    def test_finite_differences(self, rng):
        blocks = make_stack(rng, 2, 4)
        x1, x2 = halves(rng, (2, 2, 4, 4))
        a, b = halves(rng, (2, 2, 4, 4))
        res = stored_backprop(blocks, x1, x2, a, b)

        def loss():
            return forward_loss(blocks, x1, x2, a, b)

        assert norm_rel(res.dx1, numeric_grad(loss, x1)) < 1e-6
        assert norm_rel(res.dx2, numeric_grad(loss, x2)) < 1e-6
        for p, g in zip(blocks[0].g.params, res.dwg[0]):
            for name, arr in p.arrays().items():
                assert norm_rel(g[name], numeric_grad(loss, arr)) < 1e-6


class TestGradCheck:
    def test_zero_parameters(self):
        report = grad_check(lambda: 0.0, [], {})
        assert len(report) == 0
        assert report.max_rel_err == 0.0
        assert "no parameters" in str(report)

    def test_single_1x1_conv_is_exact(self, rng):
        x = rng.standard_normal((2, 3, 4, 4))
        a = rng.standard_normal((2, 2, 4, 4))
        p = KernelParams("conv", rng.standard_normal((2, 3, 1, 1)), rng.standard_normal(2))

        def loss():
            return float(np.sum(K.conv2d(x, p) * a))

        _, dw, db = K.conv2d_vjp(x, p, a)
        report = grad_check(loss, [("w", p.weight), ("b", p.bias)], {"w": dw, "b": db})
        assert len(report) == p.size()
        assert report.max_rel_err < 1e-8

    def test_detects_a_wrong_gradient(self):
        w = np.array([1.0, 2.0])
        report = grad_check(lambda: float(np.sum(w ** 2)), [("w", w)], {"w": np.array([2.0, 5.0])})
        assert report.worst.index == (1,)
        assert report.max_rel_err > 0.1

    def test_restores_parameters(self, rng):
        w = rng.standard_normal(5)
        snap = w.copy()
        grad_check(lambda: float(np.sum(w ** 3)), [("w", w)], {"w": 3 * w ** 2})
        assert np.array_equal(w, snap)

    @pytest.mark.parametrize("step", [1e-8, 1e-2])
    def test_step_range(self, step):
        with pytest.raises(ValueError, match="step"):
            grad_check(lambda: 0.0, [("w", np.zeros(1))], {"w": np.zeros(1)}, step=step)

    def test_requires_f64(self):
        w = np.zeros(2, dtype=np.float32)
        with pytest.raises(ValueError, match="float64"):
            grad_check(lambda: 0.0, [("w", w)], {"w": w})

    def test_subsample_at_least_200(self, rng):
        w = rng.standard_normal(1000)
        report = grad_check(lambda: float(np.sum(w ** 2)), [("w", w)], {"w": 2 * w},
                            max_coords=50, rng=rng)
        assert len(report) == 200
        assert len({e.index for e in report.entries}) == 200
        assert report.max_rel_err < 1e-5

    def test_rel_err_floor(self):
        assert rel_err(0.0, 1e-12) == pytest.approx(1e-4)
        assert rel_err(2.0, 1.0) == 0.5

    def test_fd_floor(self):
        eps = np.finfo(np.float64).eps
        assert fd_floor(1.0, 1e-5, 1e-5) == pytest.approx(eps * 1e10)
        assert fd_floor(-2.0, 1e-5, 1e-5) == pytest.approx(2 * fd_floor(1.0))
        assert fd_floor(0.0) == 0.0

    def test_fd_floor_covers_rounding_noise(self, rng):
        # a gradient far below the resolution of central differences
        w = rng.standard_normal(20)
        c = 1e-9

        def loss():
            return 0.7 + c * float(np.sum(w))

        report = grad_check(loss, [("w", w)], {"w": np.full(20, c)}, floor=fd_floor(loss()))
        assert report.max_rel_err < 1e-5

