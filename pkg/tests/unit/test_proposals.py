import json
import os
import shutil
import tempfile
import unittest

from hypothesis import given
from hypothesis import settings
from hypothesis import strategies as st
import mock
import numpy as np

from tanomaly import datastore
from tanomaly import intervals
from tanomaly import model
from tanomaly import proposals


def hand_trace(wtcam):
    # A unit T-CAM makes the weighted T-CAM equal the attention
    wtcam = np.asarray(wtcam, dtype=float)
    return proposals.ScoreTrace(wtcam, np.ones(len(wtcam)))


def brute_runs(mask):
    runs = []
    start = None
    for i, flag in enumerate(list(mask) + [False]):
        if flag and start is None:
            start = i
        elif not flag and start is not None:
            runs.append((start, i - 1))
            start = None
    return runs


def random_params(cfg, seed):
    rng = np.random.default_rng(seed)
    return model.ModelParams(cfg, dict(
        (name, rng.normal(scale=0.5, size=shape))
        for name, shape in cfg.shapes().items()))


class TestScoreTrace(unittest.TestCase):
    def test_product(self):
        result = proposals.ScoreTrace([0.5, 0.25], [0.5, 0.8])

        self.assertEqual(result.wtcam.tolist(), [0.25, 0.2])
        self.assertEqual(result.T, 2)

    def test_mismatch(self):
        self.assertRaises(ValueError, proposals.ScoreTrace, [0.5], [0.5, 0.1])


class TestComputeTCAM(unittest.TestCase):
    cfg = model.ModelConfig(D=4, attn_hidden=3, clf_hidden=3)

    def test_constant_classifier(self):
        params = random_params(self.cfg, 1)
        arrays = dict(params.arrays)
        arrays['clf_w1'] = np.zeros((4, 3))
        arrays['clf_b1'] = np.zeros(3)
        arrays['clf_b2'] = np.array([0.7])
        params = model.ModelParams(self.cfg, arrays)
        seq = datastore.FeatureSequence(
            's', np.random.default_rng(2).normal(size=(5, 4)))

        result = proposals.compute_tcam(params, seq)

        expected = 1.0 / (1.0 + np.exp(-0.7))
        np.testing.assert_allclose(result.tcam, expected, rtol=1e-15)

    def test_bounds(self):
        params = random_params(self.cfg, 3)
        seq = datastore.FeatureSequence(
            's', np.random.default_rng(4).normal(size=(12, 4)))

        result = proposals.compute_tcam(params, seq)

        self.assertTrue(np.all((result.tcam > 0) & (result.tcam < 1)))
        self.assertTrue(np.all(result.wtcam <= result.lam))
        self.assertTrue(np.all(result.wtcam <= result.tcam))
        self.assertTrue(np.all(result.wtcam >= 0))
        np.testing.assert_array_equal(
            result.lam, model.attention_scores(params, seq))

    def test_masked_forward(self):
        params = random_params(self.cfg, 5)
        seq = datastore.FeatureSequence(
            's', np.random.default_rng(6).normal(size=(6, 4)))
        pooled_with = model.pooled_with

        result = proposals.compute_tcam(params, seq)

        for t in range(seq.T):
            # Pool x_t alone, with unit weight
            mask = np.zeros(seq.T)
            mask[t] = 1.0
            with mock.patch.object(model, 'pooled_with',
                                   side_effect=lambda lam, x:
                                   pooled_with(mask, x)):
                prob = model.forward(params, seq).prob

            self.assertAlmostEqual(result.tcam[t], prob, places=14)


class TestThresholdFilter(unittest.TestCase):
    def test_example(self):
        result = proposals.threshold_filter(hand_trace([0.2, 0.4, 0.36,
                                                        0.1]), 0.35)

        self.assertEqual(result.tolist(), [False, True, True, False])

    def test_extremes(self):
        trace = hand_trace([0.0, 0.4, 0.99])

        self.assertTrue(proposals.threshold_filter(trace, 0.0).all())
        self.assertFalse(proposals.threshold_filter(trace, 1.0).any())

    def test_default(self):
        result = proposals.threshold_filter(hand_trace([0.35, 0.3499]))

        self.assertEqual(result.tolist(), [True, False])


class TestInterpolateFrames(unittest.TestCase):
    def test_constant(self):
        result = proposals.interpolate_frames([0.3, 0.3, 0.3], 4)

        self.assertEqual(result.tolist(), [0.3] * 12)

    def test_single(self):
        result = proposals.interpolate_frames([0.8], 16)

        self.assertEqual(result.tolist(), [0.8] * 16)

    def test_ramp(self):
        result = proposals.interpolate_frames([0.0, 1.0], 16)

        self.assertEqual(len(result), 32)
        self.assertEqual(result[16], 0.5)
        self.assertTrue(np.all(np.diff(result) >= 0))
        self.assertEqual(result[0], 0.0)
        self.assertEqual(result[-1], 1.0)

    def test_bounds(self):
        rng = np.random.default_rng(7)
        for _i in range(20):
            values = rng.random(int(rng.integers(1, 20)))

            result = proposals.interpolate_frames(values, 5)

            self.assertGreaterEqual(result.min(), values.min())
            self.assertLessEqual(result.max(), values.max())


class TestConnectedComponents(unittest.TestCase):
    def test_example(self):
        result = proposals.connected_components(
            [False, True, True, False, True])

        self.assertEqual(result, [(1, 2), (4, 4)])

    def test_all_false(self):
        self.assertEqual(proposals.connected_components([False] * 5), [])

    def test_all_true(self):
        self.assertEqual(proposals.connected_components([True] * 5),
                         [(0, 4)])

    @settings(max_examples=1000, deadline=None)
    @given(st.lists(st.booleans(), max_size=256))
    def test_brute_force(self, mask):
        self.assertEqual(proposals.connected_components(mask),
                         brute_runs(mask))


class TestScoreProposal(unittest.TestCase):
    def test_constant(self):
        trace = hand_trace([0.1] + [0.6] * 5 + [0.1])

        self.assertAlmostEqual(proposals.score_proposal(trace, (1, 5)), 0.6,
                               places=15)

    def test_single(self):
        trace = hand_trace([0.1, 0.7, 0.2])

        self.assertEqual(proposals.score_proposal(trace, (1, 1)), 0.7)

    def test_random(self):
        rng = np.random.default_rng(8)
        for _i in range(30):
            wtcam = rng.random(int(rng.integers(1, 40)))
            start = int(rng.integers(len(wtcam)))
            end = int(rng.integers(start, len(wtcam)))

            result = proposals.score_proposal(hand_trace(wtcam),
                                              (start, end))

            segment = wtcam[start:end + 1]
            self.assertAlmostEqual(result, sum(segment) / len(segment),
                                   delta=1e-12)
            self.assertTrue(segment.min() - 1e-15 <= result <=
                            segment.max() + 1e-15)

    def test_invalid(self):
        trace = hand_trace([0.1, 0.7, 0.2])

        self.assertRaises(ValueError, proposals.score_proposal, trace, (2, 1))
        self.assertRaises(ValueError, proposals.score_proposal, trace, (1, 3))
        self.assertRaises(ValueError, proposals.score_proposal, trace,
                          (-1, 0))


class TestProposal(unittest.TestCase):
    def test_frames(self):
        result = proposals.Proposal(2, 4, 0.5, 16)

        self.assertEqual(result.frame_start, 32)
        self.assertEqual(result.frame_end, 79)
        self.assertEqual(len(result), 3)

    def test_to_dict(self):
        result = proposals.Proposal(1, 1, 0.25, 8, True, 'vid')

        self.assertEqual(result.to_dict(), {
            'id': 'vid', 't_start': 1, 't_end': 1, 'frame_start': 8,
            'frame_end': 15, 'score': 0.25, 'largest': True,
        })


class TestProposalsFromTrace(unittest.TestCase):
    def test_below_threshold(self):
        self.assertEqual(
            proposals.proposals_from_trace(hand_trace([0.1, 0.2, 0.3])), [])

    def test_single_run(self):
        result = proposals.proposals_from_trace(
            hand_trace([0.1, 0.5, 0.6, 0.4, 0.1]), video_id='vid')

        self.assertEqual(len(result), 1)
        self.assertEqual((result[0].t_start, result[0].t_end), (1, 3))
        self.assertTrue(result[0].largest)
        self.assertEqual(result[0].video_id, 'vid')
        self.assertAlmostEqual(result[0].score, 0.5, places=15)

    def test_tie_to_earliest(self):
        result = proposals.proposals_from_trace(
            hand_trace([0.4, 0.4, 0.1, 0.9, 0.9, 0.1]))

        self.assertEqual([(p.t_start, p.t_end) for p in result],
                         [(3, 4), (0, 1)])
        self.assertEqual([p.largest for p in result], [False, True])

    def test_sorted(self):
        result = proposals.proposals_from_trace(
            hand_trace([0.5, 0.1, 0.8, 0.8, 0.8, 0.1, 0.5, 0.1, 0.6]))

        self.assertEqual([p.t_start for p in result], [2, 8, 0, 6])
        self.assertEqual([p.largest for p in result],
                         [True, False, False, False])

    def test_random_properties(self):
        rng = np.random.default_rng(9)
        for _i in range(50):
            seq_t = int(rng.integers(1, 64))
            trace = hand_trace(rng.random(seq_t))
            thr = float(rng.uniform(0.2, 0.8))

            result = proposals.proposals_from_trace(trace, thr)

            mask = trace.wtcam >= thr
            self.assertEqual(sorted((p.t_start, p.t_end) for p in result),
                             brute_runs(mask))
            self.assertEqual([p.score for p in result],
                             sorted((p.score for p in result), reverse=True))
            self.assertEqual(sum(p.largest for p in result),
                             1 if result else 0)

    def test_monotone_threshold(self):
        rng = np.random.default_rng(10)
        for _i in range(30):
            trace = hand_trace(rng.random(int(rng.integers(1, 50))))
            low, high = sorted(rng.random(2))

            covered = [
                intervals.IntervalSet((p.t_start, p.t_end) for p in
                                      proposals.proposals_from_trace(trace,
                                                                     thr))
                for thr in (low, high)
            ]

            self.assertTrue(covered[1].issubset(covered[0]))


class TestGenerateProposals(unittest.TestCase):
    @mock.patch.object(proposals, 'proposals_from_trace')
    @mock.patch.object(proposals, 'compute_tcam')
    def test_pipeline(self, mock_compute_tcam, mock_proposals_from_trace):
        seq = mock.Mock(id='vid')

        result = proposals.generate_proposals('params', seq, 0.4, 8)

        self.assertIs(result, mock_proposals_from_trace.return_value)
        mock_compute_tcam.assert_called_once_with('params', seq)
        mock_proposals_from_trace.assert_called_once_with(
            mock_compute_tcam.return_value, 0.4, 8, 'vid')

    def test_threshold_one(self):
        cfg = model.ModelConfig(D=3, attn_hidden=2, clf_hidden=2)
        seq = datastore.FeatureSequence(
            'vid', np.random.default_rng(1).normal(size=(8, 3)))

        result = proposals.generate_proposals(model.init_params(cfg), seq,
                                              1.0)

        self.assertEqual(result, [])


class TestRasterize(unittest.TestCase):
    def test_rasterize(self):
        props = [proposals.Proposal(1, 2, 0.7, 2),
                 proposals.Proposal(4, 4, 0.4, 2)]

        result = proposals.rasterize_proposals(props, 5, 2)

        self.assertEqual(result.tolist(),
                         [0, 0, 0.7, 0.7, 0.7, 0.7, 0, 0, 0.4, 0.4])

    def test_empty(self):
        result = proposals.rasterize_proposals([], 3, 4)

        self.assertEqual(result.tolist(), [0.0] * 12)


class TestFiles(unittest.TestCase):
    def setUp(self):
        self.tmpdir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.tmpdir)

    def test_write_proposals(self):
        path = os.path.join(self.tmpdir, 'props.jsonl')
        props = [proposals.Proposal(1, 2, 0.7, 16, True, 'a'),
                 proposals.Proposal(0, 0, 0.4, 16, False, 'b')]

        proposals.write_proposals(path, props)

        with open(path) as f:
            lines = [json.loads(line) for line in f]
        self.assertEqual(lines, [p.to_dict() for p in props])

    def test_write_empty(self):
        path = os.path.join(self.tmpdir, 'props.jsonl')

        proposals.write_proposals(path, [])

        self.assertEqual(os.path.getsize(path), 0)

    def test_score_dump(self):
        trace = hand_trace([0.1, 0.5, 0.6, 0.2])
        props = proposals.proposals_from_trace(trace)
        path = os.path.join(self.tmpdir, 'vid.scores.txt')

        rows = proposals.score_dump(trace, props, [0, 1, 1, 0])
        proposals.write_score_dump(path, rows)
        result = np.loadtxt(path)

        self.assertEqual(rows.shape, (4, 6))
        np.testing.assert_allclose(result[:, 0], [0, 1, 2, 3])
        np.testing.assert_allclose(result[:, 3], [0.1, 0.5, 0.6, 0.2])
        np.testing.assert_allclose(result[:, 4], [0, 0.55, 0.55, 0],
                                   rtol=1e-7)
        np.testing.assert_allclose(result[:, 5], [0, 1, 1, 0])
        with open(path) as f:
            self.assertEqual(f.readline().split(),
                             ['#'] + list(proposals.DUMP_COLUMNS))

    def test_score_dump_unlabelled(self):
        trace = hand_trace([0.1, 0.5])

        rows = proposals.score_dump(trace, [])

        self.assertEqual(rows[:, 5].tolist(), [-1.0, -1.0])
