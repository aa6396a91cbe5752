import os
import shutil
import struct
import tempfile
import unittest

import mock
import numpy as np

from tanomaly import datastore
from tanomaly import exceptions
from tanomaly import model


def random_params(cfg, seed, scale=0.5):
    rng = np.random.default_rng(seed)
    return model.ModelParams(cfg, dict(
        (name, rng.normal(scale=scale, size=shape))
        for name, shape in cfg.shapes().items()))


def random_seq(seq_t, dim, seed):
    rng = np.random.default_rng(seed)
    return datastore.FeatureSequence('seq', rng.normal(size=(seq_t, dim)))


class TestModelConfig(unittest.TestCase):
    def test_defaults(self):
        result = model.ModelConfig(D=8)

        self.assertEqual(result.conv_kernel, 3)
        self.assertEqual(result.conv_channels, 8)
        self.assertEqual(result.attn_hidden, 64)
        self.assertEqual(result.clf_hidden, 32)

    def test_explicit_channels(self):
        result = model.ModelConfig(D=8, conv_channels=4)

        self.assertEqual(result.conv_channels, 4)

    def test_invalid(self):
        self.assertRaises(exceptions.ConfigError, model.ModelConfig,
                          D=8, attn_hidden=0)

    def test_shapes(self):
        result = model.ModelConfig(D=4, attn_hidden=1, clf_hidden=3).shapes()

        self.assertEqual(tuple(result), model.PARAM_NAMES)
        self.assertEqual(result['conv_w'], (3, 4, 4))
        self.assertEqual(result['attn_w2'], (1, 1))
        self.assertEqual(result['clf_w1'], (4, 3))


class TestParamSet(unittest.TestCase):
    cfg = model.ModelConfig(D=2, attn_hidden=2, clf_hidden=2)

    def test_zeros(self):
        result = model.ParamGrads.zeros(self.cfg)

        self.assertEqual(result.max_abs(), 0.0)
        self.assertEqual(result.conv_w.shape, (3, 2, 2))

    def test_missing(self):
        arrays = dict(model.ModelParams.zeros(self.cfg).arrays)
        del arrays['clf_b2']

        self.assertRaises(exceptions.DimensionError, model.ModelParams,
                          self.cfg, arrays)

    def test_bad_shape(self):
        arrays = dict(model.ModelParams.zeros(self.cfg).arrays)
        arrays['clf_b2'] = np.zeros(2)

        self.assertRaises(exceptions.DimensionError, model.ModelParams,
                          self.cfg, arrays)

    def test_non_finite(self):
        arrays = dict(model.ModelParams.zeros(self.cfg).arrays)
        arrays['clf_b2'] = np.array([np.nan])

        self.assertRaises(exceptions.NonFiniteError, model.ModelParams,
                          self.cfg, arrays)
        # Gradients may carry them, for diagnosis
        model.ParamGrads(self.cfg, arrays)

    def test_read_only(self):
        params = model.ModelParams.zeros(self.cfg)

        self.assertFalse(params.conv_w.flags.writeable)

    def test_getattr_missing(self):
        params = model.ModelParams.zeros(self.cfg)

        self.assertRaises(AttributeError, lambda: params.other)

    def test_arithmetic(self):
        params = random_params(self.cfg, 1)

        doubled = params.added(params)

        self.assertEqual(doubled, params.scaled(2.0))
        self.assertIsInstance(doubled, model.ModelParams)
        self.assertEqual(doubled.max_abs(), 2.0 * params.max_abs())

    def test_iter(self):
        params = model.ModelParams.zeros(self.cfg)

        self.assertEqual([name for name, _arr in params],
                         list(model.PARAM_NAMES))


class TestInitParams(unittest.TestCase):
    def test_deterministic(self):
        cfg = model.ModelConfig(D=6, seed=4)

        self.assertEqual(model.init_params(cfg), model.init_params(cfg))

    def test_seed_matters(self):
        self.assertNotEqual(model.init_params(model.ModelConfig(D=6)),
                            model.init_params(model.ModelConfig(D=6, seed=1)))

    def test_biases_zero(self):
        params = model.init_params(model.ModelConfig(D=5, seed=9))

        for name in ('conv_b', 'attn_b1', 'attn_b2', 'clf_b1', 'clf_b2'):
            self.assertFalse(params[name].any())

    def test_bounds_and_precision(self):
        params = model.init_params(model.ModelConfig(D=5, attn_hidden=7))

        bound = 1.0 / np.sqrt(5 * 3)
        self.assertLessEqual(np.max(np.abs(params.conv_w)), bound)
        for _name, arr in params:
            self.assertTrue(np.array_equal(
                arr, arr.astype(np.float32).astype(np.float64)))

    def test_single_hidden(self):
        params = model.init_params(model.ModelConfig(D=3, attn_hidden=1))

        self.assertEqual(params.attn_w2.shape, (1, 1))


class TestForward(unittest.TestCase):
    cfg = model.ModelConfig(D=4, attn_hidden=6, clf_hidden=5)

    def test_range(self):
        params = random_params(self.cfg, 2)
        seq = random_seq(9, 4, 3)

        trace = model.forward(params, seq)

        self.assertEqual(trace.lam.shape, (9,))
        self.assertTrue(np.all((trace.lam > 0.0) & (trace.lam < 1.0)))
        self.assertTrue(0.0 < trace.prob < 1.0)
        self.assertEqual(trace.T, 9)

    def test_single_step(self):
        params = random_params(self.cfg, 2)

        result = model.attention_scores(params, random_seq(1, 4, 3))

        self.assertEqual(result.shape, (1,))
        self.assertTrue(0.0 < result[0] < 1.0)

    def test_saturated(self):
        params = random_params(self.cfg, 2, scale=100.0)

        trace = model.forward(params, random_seq(5, 4, 3))

        self.assertTrue(np.all((trace.lam > 0.0) & (trace.lam < 1.0)))
        self.assertTrue(0.0 < trace.prob < 1.0)

    def test_zero_weights(self):
        params = model.ModelParams.zeros(self.cfg)

        result = model.attention_scores(params, random_seq(6, 4, 1))

        self.assertEqual(result.tolist(), [0.5] * 6)

    def test_causal(self):
        rng = np.random.default_rng(6)
        for trial in range(100):
            params = random_params(self.cfg, 100 + trial)
            seq_t = int(rng.integers(1, 33))
            cut = int(rng.integers(seq_t))
            base = rng.normal(size=(seq_t, 4))
            other = base.copy()
            other[cut + 1:] = rng.normal(size=(seq_t - cut - 1, 4))

            lam1 = model.attention_scores(
                params, datastore.FeatureSequence('a', base))
            lam2 = model.attention_scores(
                params, datastore.FeatureSequence('b', other))

            self.assertEqual(lam1[:cut + 1].tobytes(),
                             lam2[:cut + 1].tobytes())

    def test_dimension_mismatch(self):
        params = random_params(self.cfg, 2)

        self.assertRaises(exceptions.DimensionError, model.forward,
                          params, random_seq(3, 5, 1))

    def test_deterministic(self):
        params = random_params(self.cfg, 2)
        seq = random_seq(7, 4, 3)

        trace1 = model.forward(params, seq)
        trace2 = model.forward(params, seq)

        self.assertEqual(trace1.lam.tobytes(), trace2.lam.tobytes())
        self.assertEqual(trace1.prob, trace2.prob)


class TestPooledWith(unittest.TestCase):
    def test_zero_features(self):
        result = model.pooled_with(np.array([0.2, 0.9]), np.zeros((2, 3)))

        self.assertEqual(result.tolist(), [0.0, 0.0, 0.0])

    def test_matches_resummation(self):
        rng = np.random.default_rng(8)
        lam = rng.random(12)
        x = rng.normal(size=(12, 8))

        result = model.pooled_with(lam, x)

        expected = [sum(lam[t] * x[t, d] for t in range(12))
                    for d in range(8)]
        for got, want in zip(result, expected):
            self.assertAlmostEqual(got, want, delta=1e-12 * max(1.0,
                                                                 abs(want)))

    def test_linear(self):
        rng = np.random.default_rng(9)
        lam = rng.random(5)
        x = rng.normal(size=(5, 3))

        np.testing.assert_allclose(model.pooled_with(lam, 2.5 * x),
                                   2.5 * model.pooled_with(lam, x),
                                   rtol=1e-14)

    def test_length_mismatch(self):
        self.assertRaises(exceptions.DimensionError, model.pooled_with,
                          np.ones(3), np.ones((2, 2)))


class TestClassifySingle(unittest.TestCase):
    cfg = model.ModelConfig(D=4, attn_hidden=3, clf_hidden=5)

    def test_pooled_vector(self):
        params = random_params(self.cfg, 3)
        trace = model.forward(params, random_seq(6, 4, 1))

        self.assertEqual(model.classify_single(params, trace.pooled),
                         trace.prob)

    def test_zero(self):
        params = random_params(self.cfg, 3)
        arrays = dict(params.arrays)
        arrays['clf_b1'] = np.zeros(5)
        arrays['clf_b2'] = np.zeros(1)
        params = model.ModelParams(self.cfg, arrays)

        self.assertEqual(model.classify_single(params, np.zeros(4)), 0.5)

    def test_unit_attention(self):
        params = random_params(self.cfg, 3)
        rng = np.random.default_rng(2)
        x = rng.normal(size=4).astype(np.float32)
        pooled_with = model.pooled_with

        with mock.patch.object(model, 'pooled_with',
                               side_effect=lambda lam, seq:
                               pooled_with(np.ones(len(lam)), seq)):
            trace = model.forward(
                params, datastore.FeatureSequence('one', [x]))

        self.assertAlmostEqual(model.classify_single(params, x), trace.prob,
                               places=14)

    def test_bad_vector(self):
        params = random_params(self.cfg, 3)

        self.assertRaises(exceptions.DimensionError, model.classify_single,
                          params, np.zeros(3))
        self.assertRaises(exceptions.NonFiniteError, model.classify_single,
                          params, np.array([0.0, np.inf, 0.0, 0.0]))


class TestBackward(unittest.TestCase):
    cfg = model.ModelConfig(D=8, attn_hidden=5, clf_hidden=4)

    def test_clamped_logits(self):
        arrays = dict(random_params(self.cfg, 14).arrays)
        arrays['attn_b2'] = np.array([200.0])
        arrays['clf_b2'] = np.array([-200.0])
        params = model.ModelParams(self.cfg, arrays)
        seq = random_seq(6, 8, 15)

        trace = model.forward(params, seq)
        grads = model.backward(params, [trace],
                               [model.TraceGrad(np.ones(6), 1.0)])

        # Both sigmoids sit on the flat part of the clamp
        self.assertEqual(grads.max_abs(), 0.0)
        arrays['attn_b2'] = np.array([201.0])
        arrays['clf_b2'] = np.array([-199.0])
        moved = model.forward(model.ModelParams(self.cfg, arrays), seq)
        self.assertEqual(moved.lam.tolist(), trace.lam.tolist())
        self.assertEqual(moved.prob, trace.prob)

    def _objective(self, params, seq, coef, dprob):
        trace = model.forward(params, seq)
        value = float(np.dot(coef, trace.lam)) + dprob * trace.prob
        pattern = np.concatenate([(trace.attn['h'] > 0).ravel(),
                                  (trace.attn['z1'] > 0).ravel(),
                                  trace.clf['zq'] > 0])
        return value, pattern

    def test_finite_differences(self):
        params = random_params(self.cfg, 11)
        seq = random_seq(12, 8, 12)
        rng = np.random.default_rng(13)
        coef = rng.normal(size=12)
        dprob = 1.7

        trace = model.forward(params, seq)
        grads = model.backward(params, [trace],
                               [model.TraceGrad(coef, dprob)])

        eps = 1e-5
        checked = 0
        for name, arr in params:
            for idx in np.ndindex(arr.shape):
                results = []
                for sign in (1, -1):
                    moved = arr.copy()
                    moved[idx] += sign * eps
                    results.append(self._objective(
                        model.ModelParams(self.cfg,
                                          dict(params.arrays,
                                               **{name: moved})),
                        seq, coef, dprob))
                if not np.array_equal(results[0][1], results[1][1]):
                    # Crossed a ReLU kink
                    continue

                numeric = (results[0][0] - results[1][0]) / (2 * eps)
                analytic = grads[name][idx]
                err = abs(analytic - numeric) / max(
                    1e-5, abs(analytic) + abs(numeric))
                self.assertLess(err, 1e-4, '%s%s: analytic %r numeric %r' %
                                (name, idx, analytic, numeric))
                checked += 1

        self.assertGreater(checked, 0.9 * sum(a.size for _n, a in params))

    def test_zero_upstream(self):
        params = random_params(self.cfg, 1)
        trace = model.forward(params, random_seq(5, 8, 2))

        result = model.backward(params, [trace],
                                [model.TraceGrad(np.zeros(5), 0.0)])

        self.assertEqual(result, model.ParamGrads.zeros(self.cfg))

    def test_duplicate_doubles(self):
        params = random_params(self.cfg, 1)
        trace = model.forward(params, random_seq(5, 8, 2))
        grad = model.TraceGrad(np.linspace(-1.0, 1.0, 5), 0.3)

        single = model.backward(params, [trace], [grad])
        double = model.backward(params, [trace, trace], [grad, grad])

        self.assertEqual(double, single.scaled(2.0))

    def test_shapes(self):
        params = random_params(self.cfg, 1)
        trace = model.forward(params, random_seq(5, 8, 2))

        result = model.backward(params, [trace],
                                [model.TraceGrad(np.ones(5), 1.0)])

        for name, arr in result:
            self.assertEqual(arr.shape, params[name].shape)

    def test_foreign_trace(self):
        params = random_params(self.cfg, 1)
        other = random_params(self.cfg, 2)
        trace = model.forward(other, random_seq(5, 8, 2))

        self.assertRaises(exceptions.TraceMismatchError, model.backward,
                          params, [trace], [model.TraceGrad(np.ones(5), 1.0)])

    def test_bad_upstream(self):
        params = random_params(self.cfg, 1)
        trace = model.forward(params, random_seq(5, 8, 2))

        self.assertRaises(exceptions.TraceMismatchError, model.backward,
                          params, [trace], [model.TraceGrad(np.ones(4), 1.0)])
        self.assertRaises(exceptions.TraceMismatchError, model.backward,
                          params, [trace], [])


class TestCheckpoint(unittest.TestCase):
    cfg = model.ModelConfig(D=3, attn_hidden=4, clf_hidden=2, seed=77)

    def setUp(self):
        self.tmpdir = tempfile.mkdtemp()
        self.path = os.path.join(self.tmpdir, 'model.ckpt')

    def tearDown(self):
        shutil.rmtree(self.tmpdir)

    def _raw(self):
        with open(self.path, 'rb') as f:
            return f.read()

    def _rewrite(self, raw):
        with open(self.path, 'wb') as f:
            f.write(raw)

    def test_roundtrip_initial(self):
        params = model.init_params(self.cfg)

        model.save_checkpoint(params, self.path)
        result = model.load_checkpoint(self.path)

        self.assertEqual(result, params)
        self.assertEqual(result.cfg, self.cfg)

    def test_layout(self):
        model.save_checkpoint(model.init_params(self.cfg), self.path)

        raw = self._raw()

        self.assertEqual(raw[:4], b'TANM')
        self.assertEqual(struct.unpack_from('<H', raw, 4), (1,))
        self.assertEqual(struct.unpack_from('<IIIIIQ', raw, 6),
                         (3, 3, 3, 4, 2, 77))
        # The first tensor is the rank-3 convolution kernel
        self.assertEqual(struct.unpack_from('<IIII', raw, 34), (3, 3, 3, 3))

    def test_rounds_to_float32(self):
        params = random_params(self.cfg, 4)

        model.save_checkpoint(params, self.path)
        result = model.load_checkpoint(self.path)

        for name, arr in result:
            self.assertEqual(arr.tolist(),
                             params[name].astype(np.float32).tolist())

    def test_bad_magic(self):
        model.save_checkpoint(model.init_params(self.cfg), self.path)
        self._rewrite(b'XXXX' + self._raw()[4:])

        self.assertRaises(exceptions.BadMagicError, model.load_checkpoint,
                          self.path)

    def test_bad_version(self):
        model.save_checkpoint(model.init_params(self.cfg), self.path)
        raw = self._raw()
        self._rewrite(raw[:4] + struct.pack('<H', 9) + raw[6:])

        self.assertRaises(exceptions.UnsupportedVersionError,
                          model.load_checkpoint, self.path)

    def test_truncated(self):
        model.save_checkpoint(model.init_params(self.cfg), self.path)
        raw = self._raw()

        for size in (8, 40, len(raw) - 1):
            self._rewrite(raw[:size])

            self.assertRaises(exceptions.TruncatedError,
                              model.load_checkpoint, self.path)

    def test_trailing(self):
        model.save_checkpoint(model.init_params(self.cfg), self.path)
        self._rewrite(self._raw() + b'\0\0\0\0')

        self.assertRaises(exceptions.SizeMismatchError,
                          model.load_checkpoint, self.path)

    def test_bad_config(self):
        model.save_checkpoint(model.init_params(self.cfg), self.path)
        raw = self._raw()
        self._rewrite(raw[:6] + struct.pack('<IIIIIQ', 0, 3, 3, 4, 2, 0) +
                      raw[34:])

        self.assertRaises(exceptions.FormatError, model.load_checkpoint,
                          self.path)
