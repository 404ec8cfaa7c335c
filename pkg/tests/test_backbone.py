"""Tests for the convolutional trunk: shapes, gradients, checkpoints."""

import numpy as np
import pytest

from macforge.backbone import (
    INIT_GAIN,
    NetParams,
    ShapeError,
    SpecError,
    TapeError,
    backward,
    conv,
    forward,
    init_params,
    load_checkpoint,
    maxpool,
    output_shapes,
    relu,
    save_checkpoint,
    tiny_spec,
    validate_spec,
)
from macforge.ioutil import FormatError
from macforge.numeric import SeededStream, central_difference


def direct_conv(x, weight, bias, stride, pad):
    """Convolution by its definition: per-output-cell patch dot products."""
    out_maps, _, k, _ = weight.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    oh = (xp.shape[1] - k) // stride + 1
    ow = (xp.shape[2] - k) // stride + 1
    y = np.zeros((out_maps, oh, ow))
    for o in range(out_maps):
        for i in range(oh):
            for j in range(ow):
                patch = xp[:, i * stride:i * stride + k, j * stride:j * stride + k]
                y[o, i, j] = np.sum(patch * weight[o]) + bias[o]
    return y


class TestSpecAndInit:
    def test_validate_rejects_bad_chaining(self):
        with pytest.raises(SpecError):
            validate_spec([conv(3, 8, 3), relu(), conv(4, 8, 3)])

    def test_validate_rejects_empty_and_bad_fields(self):
        with pytest.raises(SpecError):
            validate_spec([])
        with pytest.raises(SpecError):
            validate_spec([conv(3, 8, 0)])
        with pytest.raises(SpecError):
            validate_spec([maxpool(2, 0)])

    def test_minimal_net(self):
        params = init_params([conv(1, 1, 1)], SeededStream(1))
        assert params.weights[0].shape == (1, 1, 1, 1)
        np.testing.assert_array_equal(params.biases[0], [0.0])

    def test_init_deterministic(self):
        a = init_params(tiny_spec(), SeededStream(42, 1))
        b = init_params(tiny_spec(), SeededStream(42, 1))
        for wa, wb in zip(a.weights, b.weights):
            assert np.array_equal(wa, wb)

    def test_init_first_conv_color_blobs(self):
        params = init_params(tiny_spec(), SeededStream(7))
        w = params.weights[0]
        assert w.dtype == np.float32
        # color directions are zero-mean across channels
        np.testing.assert_allclose(w.sum(axis=1), 0.0, atol=1e-6)
        # every filter carries the damped Glorot-equivalent norm
        fan_in, fan_out = 3 * 25, 8 * 25
        target = INIT_GAIN * np.sqrt(6.0 / (fan_in + fan_out)) * np.sqrt(fan_in / 3.0)
        norms = np.linalg.norm(w.reshape(8, -1), axis=1)
        np.testing.assert_allclose(norms, target, rtol=1e-5)
        # the Gaussian bump peaks at the filter center
        mags = np.abs(w)
        assert np.all(mags[:, :, 2, 2] >= mags[:, :, 0, 0])

    def test_init_deeper_convs_glorot(self):
        params = init_params(tiny_spec(), SeededStream(7))
        for w, fan_in, fan_out in ((params.weights[1], 8 * 9, 16 * 9),
                                   (params.weights[2], 16 * 9, 32 * 9)):
            bound = INIT_GAIN * np.sqrt(6.0 / (fan_in + fan_out))
            assert w.dtype == np.float32
            assert np.all(np.abs(w) <= bound * (1 + 1e-6))
            assert np.max(np.abs(w)) > 0.5 * bound

    def test_init_non_rgb_first_conv_is_glorot(self):
        # structured color filters only make sense over 3-channel input
        params = init_params([conv(4, 6, 3)], SeededStream(7))
        bound = INIT_GAIN * np.sqrt(6.0 / (4 * 9 + 6 * 9))
        assert np.all(np.abs(params.weights[0]) <= bound * (1 + 1e-6))
        assert not np.allclose(params.weights[0].sum(axis=1), 0.0, atol=1e-4)

    def test_init_gain_invisible_after_l2n(self):
        # relu and maxpool are positively homogeneous, so a uniform weight
        # rescaling scales the output tensor and cancels under l2n
        spec = tiny_spec()
        params = init_params(spec, SeededStream(11))
        doubled = params.copy()
        for i in range(len(doubled.weights)):
            doubled.weights[i] = doubled.weights[i] * np.float32(2.0)
        x = SeededStream(12).random((3, 24, 24)).astype(np.float32)
        y, _ = forward(params, spec, x)
        y2, _ = forward(doubled, spec, x)
        n_convs = 3
        np.testing.assert_allclose(y2, y * 2.0 ** n_convs, rtol=1e-4)


class TestForward:
    def test_identity_conv(self):
        spec = [conv(1, 1, 1)]
        params = NetParams([np.ones((1, 1, 1, 1), np.float32)],
                           [np.zeros(1, np.float32)])
        x = np.arange(9, dtype=np.float32).reshape(1, 3, 3)
        y, _ = forward(params, spec, x)
        np.testing.assert_array_equal(y, x)

    def test_maxpool_single_window(self):
        spec = [maxpool(2, 2)]
        x = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        y, _ = forward(NetParams([], []), spec, x)
        np.testing.assert_array_equal(y, [[[4.0]]])

    def test_direct_convolution_reference(self):
        rng = np.random.default_rng(20)
        x = rng.normal(size=(2, 5, 5))
        weight = rng.normal(size=(3, 2, 3, 3))
        bias = rng.normal(size=3)
        spec = [conv(2, 3, 3, stride=1, pad=0)]
        y, _ = forward(NetParams([weight], [bias]), spec, x)
        np.testing.assert_allclose(y, direct_conv(x, weight, bias, 1, 0), rtol=1e-12)

    def test_direct_convolution_stride_and_pad(self):
        rng = np.random.default_rng(21)
        for stride, pad, k in [(2, 1, 3), (2, 2, 5), (3, 0, 2), (1, 1, 1)]:
            x = rng.normal(size=(3, 9, 8))
            weight = rng.normal(size=(2, 3, k, k))
            bias = rng.normal(size=2)
            spec = [conv(3, 2, k, stride=stride, pad=pad)]
            y, _ = forward(NetParams([weight], [bias]), spec, x)
            np.testing.assert_allclose(
                y, direct_conv(x, weight, bias, stride, pad), rtol=1e-12)

    def test_declared_shapes_match_realized(self):
        stream = SeededStream(3)
        for trial in range(10):
            s = stream.derive("spec", trial)
            c1 = int(s.integers(1, 4))
            c2 = int(s.integers(1, 5))
            spec = [
                conv(c1, c2, int(s.integers(1, 4)), stride=int(s.integers(1, 3)),
                     pad=int(s.integers(0, 3))),
                relu(),
                maxpool(int(s.integers(1, 3)), int(s.integers(1, 3))),
            ]
            x = s.normal(size=(c1, int(s.integers(8, 14)), int(s.integers(8, 14))))
            declared = output_shapes(spec, x.shape)
            params = init_params(spec, s.derive("params"))
            for i in range(len(spec)):
                y, _ = forward(params, spec[:i + 1], x.astype(np.float32))
                assert y.shape == declared[i]

    def test_undersized_input_names_layer(self):
        spec = [conv(1, 2, 3), relu(), maxpool(4, 4)]
        params = init_params(spec, SeededStream(5))
        with pytest.raises(ShapeError, match="layer 2"):
            forward(params, spec, np.zeros((1, 5, 5), np.float32))

    def test_relu_idempotent(self):
        x = np.linspace(-2, 2, 24).reshape(2, 3, 4).astype(np.float32)
        once, _ = forward(NetParams([], []), [relu()], x)
        twice, _ = forward(NetParams([], []), [relu()], once)
        np.testing.assert_array_equal(once, twice)

    def test_forward_deterministic(self):
        spec = tiny_spec()
        params = init_params(spec, SeededStream(9))
        x = SeededStream(10).normal(size=(3, 40, 40)).astype(np.float32)
        y1, _ = forward(params, spec, x)
        y2, _ = forward(params, spec, x.copy())
        assert np.array_equal(y1, y2)

    def test_tiny_spec_output_dim(self):
        shapes = output_shapes(tiny_spec(), (3, 96, 96))
        assert shapes[-1][0] == 32


class TestBackward:
    def test_zero_grad(self):
        spec = [conv(1, 2, 3, pad=1), relu()]
        params = init_params(spec, SeededStream(11))
        x = SeededStream(12).normal(size=(1, 5, 5)).astype(np.float32)
        out, tape = forward(params, spec, x)
        grads, gx = backward(params, spec, tape, np.zeros_like(out))
        np.testing.assert_array_equal(gx, 0.0)
        for g in grads.weights + grads.biases:
            np.testing.assert_array_equal(g, 0.0)

    def test_identity_conv_passes_grad(self):
        spec = [conv(1, 1, 1)]
        params = NetParams([np.ones((1, 1, 1, 1))], [np.zeros(1)])
        x = np.arange(4.0).reshape(1, 2, 2)
        _, tape = forward(params, spec, x)
        gout = np.array([[[1.0, -2.0], [0.5, 3.0]]])
        _, gx = backward(params, spec, tape, gout)
        np.testing.assert_array_equal(gx, gout)

    def test_maxpool_tie_routes_to_lowest_linear_index(self):
        spec = [maxpool(2, 2)]
        x = np.full((1, 4, 4), 7.0)
        _, tape = forward(NetParams([], []), spec, x)
        gout = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        _, gx = backward(NetParams([], []), spec, tape, gout)
        want = np.zeros((1, 4, 4))
        want[0, 0, 0], want[0, 0, 2], want[0, 2, 0], want[0, 2, 2] = 1, 2, 3, 4
        np.testing.assert_array_equal(gx, want)

    def test_tape_mismatch(self):
        spec = [conv(1, 1, 1), relu()]
        params = init_params(spec, SeededStream(13))
        x = np.ones((1, 3, 3), np.float32)
        out, tape = forward(params, spec, x)
        with pytest.raises(TapeError):
            backward(params, spec, tape[:1], np.ones_like(out))
        with pytest.raises(TapeError):
            backward(params, spec, tape, np.ones((1, 9, 9), np.float32))


def _margins_ok(spec, params, x, margin=1e-3):
    """Reject instances where a relu kink or pooling tie sits near the
    finite-difference step, which would invalidate the oracle."""
    for i, layer in enumerate(spec):
        if i == 0:
            pre = x
        else:
            n_conv = sum(1 for l in spec[:i] if l.kind == "conv")
            prefix = NetParams(params.weights[:n_conv], params.biases[:n_conv])
            pre, _ = forward(prefix, spec[:i], x)
        if layer.kind == "relu":
            if np.min(np.abs(pre)) < margin:
                return False
        elif layer.kind == "maxpool":
            w, s = layer.window, layer.stride
            win = np.lib.stride_tricks.sliding_window_view(
                pre, (w, w), axis=(1, 2))[:, ::s, ::s]
            flat = np.sort(win.reshape(win.shape[0], win.shape[1], win.shape[2], -1))
            if flat.shape[-1] > 1 and np.min(flat[..., -1] - flat[..., -2]) < margin:
                return False
    return True


def _random_instance(stream):
    """A small random net plus input with safe gradient-check margins."""
    for attempt in range(100):
        s = stream.derive("inst", attempt)
        c1, c2, c3 = (int(s.integers(1, 4)) for _ in range(3))
        spec = [
            conv(c1, c2, int(s.integers(1, 4)), stride=int(s.integers(1, 3)),
                 pad=int(s.integers(0, 2))),
            relu(),
            maxpool(int(s.integers(2, 4)), int(s.integers(1, 3))),
            conv(c2, c3, int(s.integers(1, 3))),
            relu(),
        ]
        h, w = int(s.integers(7, 11)), int(s.integers(7, 11))
        x = s.normal(size=(c1, h, w))
        try:
            output_shapes(spec, x.shape)
        except ShapeError:
            continue
        params = init_params(spec, s.derive("params")).astype(np.float64)
        if _margins_ok(spec, params, x):
            return spec, params, x
    raise AssertionError("could not build a margin-safe instance")


def rel_err(analytic, fd):
    denom = np.maximum(np.abs(analytic) + np.abs(fd), 1e-6)
    return float(np.max(np.abs(analytic - fd) / denom))


class TestGradientsAgainstFiniteDifferences:
    def test_random_nets(self):
        stream = SeededStream(20160825, 99)
        worst = 0.0
        for trial in range(20):
            spec, params, x = _random_instance(stream.derive("trial", trial))
            out, tape = forward(params, spec, x)
            gout = stream.derive("gout", trial).normal(size=out.shape)
            grads, gx = backward(params, spec, tape, gout)

            def loss_of_input(v):
                return np.sum(forward(params, spec, v)[0] * gout)

            worst = max(worst, rel_err(gx, central_difference(loss_of_input, x)))
            for li in range(len(params.weights)):
                def loss_of_weight(w, li=li):
                    ws = list(params.weights)
                    ws[li] = w
                    return np.sum(forward(NetParams(ws, params.biases), spec, x)[0] * gout)

                def loss_of_bias(b, li=li):
                    bs = list(params.biases)
                    bs[li] = b
                    return np.sum(forward(NetParams(params.weights, bs), spec, x)[0] * gout)

                worst = max(worst, rel_err(
                    grads.weights[li],
                    central_difference(loss_of_weight, params.weights[li])))
                worst = max(worst, rel_err(
                    grads.biases[li],
                    central_difference(loss_of_bias, params.biases[li])))
        assert worst < 1e-4, f"worst relative error {worst:.3e}"


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        spec = tiny_spec()
        params = init_params(spec, SeededStream(77))
        meta = {"epoch": 3, "val_map": 0.512, "config_hash": "ab12"}
        path = tmp_path / "net.mfck"
        save_checkpoint(path, spec, params, meta)
        spec2, params2, meta2 = load_checkpoint(path)
        assert spec2 == spec
        assert meta2 == meta
        for a, b in zip(params.weights + params.biases,
                        params2.weights + params2.biases):
            assert np.array_equal(a, b)
            assert b.dtype == np.float32

    def test_rewrite_byte_identical(self, tmp_path):
        spec = tiny_spec()
        params = init_params(spec, SeededStream(78))
        p1, p2 = tmp_path / "a.mfck", tmp_path / "b.mfck"
        save_checkpoint(p1, spec, params, {"epoch": 0})
        save_checkpoint(p2, spec, params, {"epoch": 0})
        assert p1.read_bytes() == p2.read_bytes()
        assert (tmp_path / "a.mfck.json").read_bytes() == \
            (tmp_path / "b.mfck.json").read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.mfck"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_truncated(self, tmp_path):
        spec = [conv(1, 2, 3)]
        params = init_params(spec, SeededStream(79))
        path = tmp_path / "net.mfck"
        save_checkpoint(path, spec, params)
        data = path.read_bytes()
        path.write_bytes(data[:-5])
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_trailing_bytes(self, tmp_path):
        spec = [conv(1, 2, 3)]
        params = init_params(spec, SeededStream(80))
        path = tmp_path / "net.mfck"
        save_checkpoint(path, spec, params)
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_unknown_layer_kind(self, tmp_path):
        path = tmp_path / "bad.mfck"
        import struct
        path.write_bytes(b"MFCK" + struct.pack("<II", 1, 1) + b"\x09")
        with pytest.raises(FormatError):
            load_checkpoint(path)
