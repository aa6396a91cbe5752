# Copyright (C) 2022 by the tanomaly authors
#
# This program is free software: you can redistribute it and/or modify
# it under the terms of the GNU General Public License as published by
# the Free Software Foundation, either version 3 of the License, or
# (at your option) any later version.
#
# This program is distributed in the hope that it will be useful, but
# WITHOUT ANY WARRANTY; without even the implied warranty of
# MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the GNU
# General Public License for more details.
#
# You should have received a copy of the GNU General Public License
# along with this program.  If not, see
# <http://www.gnu.org/licenses/>.

import io
import json
import logging
import os
import sys

import cli_tools
import pkg_resources
import six

from tanomaly import augment
from tanomaly import datastore
from tanomaly import exceptions
from tanomaly import gradcheck
from tanomaly import losses
from tanomaly import metrics
from tanomaly import model
from tanomaly import proposals
from tanomaly import trainer


LOG = logging.getLogger(__name__)

# Exit codes
EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

# Errors caused by bad user input; everything else that can go wrong
# while a command runs is a runtime failure
USAGE_ERRORS = (exceptions.ConfigError, exceptions.ManifestError,
                exceptions.MetricError)
RUNTIME_ERRORS = (exceptions.TanomalyError, EnvironmentError, ValueError)

RUN_SUFFIX = '.run.json'


def _version():
    try:
        return pkg_resources.get_distribution('tanomaly').version
    except pkg_resources.DistributionNotFound:
        return 'unknown'


class RunManifest(object):
    """
    Describe how an artifact was produced: the command and its
    arguments, the resolved configurations, the seeds, the artifact
    paths and the tool version.  Replaying a run manifest reruns the
    command with the same arguments.
    """

    def __init__(self, command, arguments, configs=None, seeds=None,
                 artifacts=None, version=None):
        self.command = command
        self.arguments = arguments
        self.configs = configs or {}
        self.seeds = seeds or {}
        self.artifacts = artifacts or {}
        self.version = version or _version()

    def __eq__(self, other):
        if not isinstance(other, RunManifest):
            return NotImplemented
        return self.as_dict() == other.as_dict()

    def __ne__(self, other):
        result = self.__eq__(other)
        return result if result is NotImplemented else not result

    def as_dict(self):
        return {
            'command': self.command,
            'arguments': self.arguments,
            'configs': self.configs,
            'seeds': self.seeds,
            'artifacts': self.artifacts,
            'version': self.version,
        }

    def write(self, artifact):
        """
        Write the run manifest beside an artifact.

        :param str artifact: The artifact path.

        :returns: The path of the run manifest.
        :rtype: ``str``
        """

        path = artifact + RUN_SUFFIX
        with io.open(path, 'w', encoding='utf-8') as f:
            f.write(six.text_type(json.dumps(self.as_dict(), indent=2,
                                             sort_keys=True)))
            f.write(u'\n')

        LOG.debug('wrote run manifest %s', path)

        return path

    @classmethod
    def load(cls, path):
        """
        Read a run manifest.

        :param str path: The run manifest file.

        :returns: The run manifest.
        :rtype: ``RunManifest``

        :raises tanomaly.exceptions.ConfigError:
            The file is not a valid run manifest.
        """

        with io.open(path, encoding='utf-8') as f:
            try:
                values = json.load(f)
            except ValueError as exc:
                raise exceptions.ConfigError(
                    'invalid run manifest %s: %s' % (path, exc))

        if (not isinstance(values, dict) or
                values.get('command') not in COMMANDS or
                not isinstance(values.get('arguments'), dict)):
            raise exceptions.ConfigError('invalid run manifest %s' % path)

        return cls(values['command'], values['arguments'],
                   values.get('configs'), values.get('seeds'),
                   values.get('artifacts'), values.get('version'))

    def replay(self):
        """
        Rerun the recorded command.

        :returns: The command's exit code.
        :rtype: ``int``
        """

        return COMMANDS[self.command](**self.arguments)


def _setup_logging(verbose):
    levels = [logging.WARNING, logging.INFO, logging.DEBUG]
    logging.basicConfig(
        level=levels[min(verbose or 0, len(levels) - 1)],
        format='%(asctime)s %(levelname)s %(name)s: %(message)s')


def _guarded(func, *args, **kwargs):
    """
    Call a command body, translating errors into exit codes.

    :param func: The command body.

    :returns: The exit code: the body's return value (0 if it returns
              ``None``), 2 for usage and validation errors, 1 for
              other failures.
    :rtype: ``int``
    """

    try:
        result = func(*args, **kwargs)
    except USAGE_ERRORS as exc:
        LOG.error('%s', exc)
        return EXIT_USAGE
    except exceptions.DivergenceError as exc:
        LOG.error('training diverged at epoch %s, batch %s: %s',
                  exc.epoch, exc.batch, exc)
        return EXIT_RUNTIME
    except RUNTIME_ERRORS as exc:
        LOG.error('%s', exc)
        return EXIT_RUNTIME

    return EXIT_OK if result is None else result


def _load_model_inputs(checkpoint, manifest):
    params = model.load_checkpoint(checkpoint)
    records = datastore.load_manifest(manifest)
    return params, records


def _synth(out, cfg, test_videos, arguments):
    sequences, records = datastore.generate_synthetic(cfg)
    manifest, written = datastore.write_dataset(sequences, records, out)
    anomalous = sum(r.label for r in written)
    print('wrote %d videos (%d anomalous, D=%d) to %s' %
          (len(written), anomalous, cfg.D, manifest))

    configs = {'synth': cfg.as_dict()}
    artifacts = {'manifest': manifest}
    if test_videos:
        test_cfg = cfg.replace(num_videos=test_videos, seed=cfg.seed + 1,
                               prefix='test')
        sequences, records = datastore.generate_synthetic(test_cfg)
        test_manifest, written = datastore.write_dataset(
            sequences, records, out, 'test')
        print('wrote %d test videos (%d anomalous) to %s' %
              (len(written), sum(r.label for r in written), test_manifest))
        configs['synth_test'] = test_cfg.as_dict()
        artifacts['test_manifest'] = test_manifest

    RunManifest('synth', arguments, configs,
                dict((k, v['seed']) for k, v in configs.items()),
                artifacts).write(manifest)


@cli_tools.argument('--verbose', '-v', action='count', default=0,
                    help='Increase logging verbosity.')
@cli_tools.argument('--frames-per-segment', type=int,
                    default=datastore.FRAMES_PER_SEGMENT,
                    help='Frames covered by each segment.  '
                    'Default: %(default)s')
@cli_tools.argument('--test-videos', type=int, default=0,
                    help='Also write a test split of this many videos, '
                    'generated with seed + 1 and the same feature '
                    'directions, to "test.jsonl".')
@cli_tools.argument('--seed', type=int, default=0,
                    help='Random seed.  Default: %(default)s')
@cli_tools.argument('--shift', type=float, default=1.0,
                    help='Magnitude of the anomaly shift.  '
                    'Default: %(default)s')
@cli_tools.argument('--noise', type=float, default=0.1,
                    help='Noise scale.  Default: %(default)s')
@cli_tools.argument('--dim', type=int, default=16,
                    help='Feature dimension.  Default: %(default)s')
@cli_tools.argument('--anomaly-window', default='4,8',
                    help='Range "lo,hi" of anomaly window lengths.  '
                    'Default: %(default)s')
@cli_tools.argument('--t-range', default='20,40',
                    help='Range "lo,hi" of sequence lengths.  '
                    'Default: %(default)s')
@cli_tools.argument('--anomaly-frac', type=float, default=0.5,
                    help='Fraction of anomalous videos.  '
                    'Default: %(default)s')
@cli_tools.argument('--videos', type=int, default=40,
                    help='Number of videos.  Default: %(default)s')
@cli_tools.argument('--out', required=True,
                    help='Output directory.')
def cmd_synth(out, videos=40, anomaly_frac=0.5, t_range='20,40',
              anomaly_window='4,8', dim=16, noise=0.1, shift=1.0, seed=0,
              test_videos=0,
              frames_per_segment=datastore.FRAMES_PER_SEGMENT, verbose=0):
    """
    Generate a synthetic dataset with planted anomalies.  Writes one
    feature file per video under "<out>/features" and the manifest
    "<out>/manifest.jsonl".
    """

    _setup_logging(verbose)
    arguments = dict(out=out, videos=videos, anomaly_frac=anomaly_frac,
                     t_range=t_range, anomaly_window=anomaly_window, dim=dim,
                     noise=noise, shift=shift, seed=seed,
                     test_videos=test_videos,
                     frames_per_segment=frames_per_segment)

    def body():
        cfg = datastore.SynthConfig(
            num_videos=videos, anomaly_fraction=anomaly_frac,
            T_range=t_range, anomaly_window_range=anomaly_window, D=dim,
            noise_scale=noise, anomaly_shift=shift, seed=seed,
            frames_per_segment=frames_per_segment)
        _synth(out, cfg, test_videos, arguments)

    return _guarded(body)


def _train(manifest, out, model_cfg_args, cfg, log, arguments):
    records = datastore.load_manifest(manifest)
    if not records:
        raise exceptions.ManifestError('manifest has no videos', manifest)

    cache = datastore.FeatureCache()
    model_cfg = model.ModelConfig(D=cache.load(records[0]).D,
                                  **model_cfg_args)

    params, train_log = trainer.train(model_cfg, records, cfg, cache, out)
    train_log.write(log)

    if len(train_log):
        last = train_log.entries[-1]
        print('trained %d epochs: final loss %.6f (cl %.6f)' %
              (len(train_log), last['total'], last['cl']))
    else:
        print('no training epochs; saved the initial parameters')

    artifacts = {'checkpoint': out, 'train_log': log}
    if cfg.epochs_phase1 and cfg.epochs_phase2:
        artifacts['phase1_checkpoint'] = out + '.phase1'
    RunManifest('train', arguments,
                {'model': model_cfg.as_dict(), 'train': cfg.as_dict()},
                {'model': model_cfg.seed, 'shuffle': cfg.seed,
                 'augment': cfg.augment.seed},
                artifacts).write(out)


@cli_tools.argument('--verbose', '-v', action='count', default=0,
                    help='Increase logging verbosity.')
@cli_tools.argument('--log',
                    help='Training log file.  Default: "<out>.log.jsonl"')
@cli_tools.argument('--clf-hidden', type=int, default=32,
                    help='Classifier hidden units.  Default: %(default)s')
@cli_tools.argument('--attn-hidden', type=int, default=64,
                    help='Attention hidden units.  Default: %(default)s')
@cli_tools.argument('--augment-seed', type=int, default=0,
                    help='Seed of the view sampler.  Default: %(default)s')
@cli_tools.argument('--shuffle-seed', type=int, default=0,
                    help='Seed of the epoch shuffles.  Default: %(default)s')
@cli_tools.argument('--seed', type=int, default=0,
                    help='Seed of the parameter initialization.  '
                    'Default: %(default)s')
@cli_tools.argument('--block-len', type=int, default=3,
                    help='Augmentation block length.  Default: %(default)s')
@cli_tools.argument('--batch-size', type=int, default=8,
                    help='Videos per batch.  Default: %(default)s')
@cli_tools.argument('--epochs2', type=int, default=40,
                    help='Epochs of the second phase.  Default: %(default)s')
@cli_tools.argument('--lr2', type=float, default=1e-5,
                    help='Learning rate of the second phase.  '
                    'Default: %(default)s')
@cli_tools.argument('--epochs1', type=int, default=10,
                    help='Epochs of the first phase.  Default: %(default)s')
@cli_tools.argument('--lr1', type=float, default=1e-4,
                    help='Learning rate of the first phase.  '
                    'Default: %(default)s')
@cli_tools.argument('--no-align', action='store_true', default=False,
                    help='Disable the alignment loss (gamma = 0).')
@cli_tools.argument('--gamma', type=float, default=0.5,
                    help='Alignment loss weight.  Default: %(default)s')
@cli_tools.argument('--beta', type=float, default=0.002,
                    help='Smoothness loss weight.  Default: %(default)s')
@cli_tools.argument('--alpha', type=float, default=2e-8,
                    help='Sparsity loss weight.  Default: %(default)s')
@cli_tools.argument('--out', required=True,
                    help='Checkpoint file to write.')
@cli_tools.argument('--manifest', required=True,
                    help='Training set manifest.')
def cmd_train(manifest, out, alpha=2e-8, beta=0.002, gamma=0.5,
              no_align=False, lr1=1e-4, epochs1=10, lr2=1e-5, epochs2=40,
              batch_size=8, block_len=3, seed=0, shuffle_seed=0,
              augment_seed=0, attn_hidden=64, clf_hidden=32, log=None,
              verbose=0):
    """
    Train the attention model on a manifest and save a checkpoint.
    The defaults reproduce the published hyperparameters.
    """

    _setup_logging(verbose)
    arguments = dict(manifest=manifest, out=out, alpha=alpha, beta=beta,
                     gamma=gamma, no_align=no_align, lr1=lr1,
                     epochs1=epochs1, lr2=lr2, epochs2=epochs2,
                     batch_size=batch_size, block_len=block_len, seed=seed,
                     shuffle_seed=shuffle_seed, augment_seed=augment_seed,
                     attn_hidden=attn_hidden, clf_hidden=clf_hidden,
                     log=log)

    def body():
        cfg = trainer.TrainConfig(
            lr_phase1=lr1, epochs_phase1=epochs1, lr_phase2=lr2,
            epochs_phase2=epochs2, batch_size=batch_size, seed=shuffle_seed,
            weights=losses.LossWeights(alpha=alpha, beta=beta,
                                       gamma=0.0 if no_align else gamma),
            augment=augment.AugmentConfig(block_len=block_len,
                                          seed=augment_seed))
        _train(manifest, out,
               dict(attn_hidden=attn_hidden, clf_hidden=clf_hidden,
                    seed=seed),
               cfg, log or out + '.log.jsonl', arguments)

    return _guarded(body)


def _propose(checkpoint, manifest, out, thr, arguments):
    params, records = _load_model_inputs(checkpoint, manifest)
    cache = datastore.FeatureCache()

    result = []
    for rec in records:
        props = proposals.generate_proposals(params, cache.load(rec), thr,
                                             rec.frames_per_segment)
        LOG.info('video %s: %d proposals', rec.id, len(props))
        result.extend(props)

    proposals.write_proposals(out, result)
    print('wrote %d proposals for %d videos to %s' %
          (len(result), len(records), out))

    RunManifest('propose', arguments, {'threshold': thr}, {},
                {'proposals': out}).write(out)


@cli_tools.argument('--verbose', '-v', action='count', default=0,
                    help='Increase logging verbosity.')
@cli_tools.argument('--thr', type=float,
                    default=proposals.DEFAULT_THRESHOLD,
                    help='Threshold on the weighted T-CAM.  '
                    'Default: %(default)s')
@cli_tools.argument('--out', required=True,
                    help='Proposal file to write.')
@cli_tools.argument('--manifest', required=True,
                    help='Manifest of the videos to process.')
@cli_tools.argument('--checkpoint', required=True,
                    help='Model checkpoint.')
def cmd_propose(checkpoint, manifest, out,
                thr=proposals.DEFAULT_THRESHOLD, verbose=0):
    """
    Generate temporal anomaly proposals for every video of a manifest.
    """

    _setup_logging(verbose)
    arguments = dict(checkpoint=checkpoint, manifest=manifest, out=out,
                     thr=thr)

    return _guarded(_propose, checkpoint, manifest, out, thr, arguments)


def _eval(checkpoints, manifest, thr, score, out, arguments):
    records = datastore.load_manifest(manifest)
    if not records:
        raise exceptions.ManifestError('manifest has no videos', manifest)
    missing = [r.id for r in records if r.segment_labels is None]
    if missing:
        raise exceptions.MetricError(
            '%d videos lack segment labels (first: %s)' %
            (len(missing), missing[0]))

    cache = datastore.FeatureCache()
    reports = []
    for path in checkpoints:
        params = model.load_checkpoint(path)
        reports.append(metrics.evaluate(
            params, records, thr, score, cache,
            os.path.splitext(os.path.basename(path))[0]))

    print(metrics.format_report(reports), end='')
    lines = [metrics.report_line(r) for r in reports]
    for line in lines:
        print(line)

    if out:
        with io.open(out, 'w', encoding='utf-8') as f:
            for line in lines:
                f.write(six.text_type(line))
                f.write(u'\n')
        RunManifest('eval', arguments, {'threshold': thr, 'score': score},
                    {}, {'report': out}).write(out)


@cli_tools.argument('--verbose', '-v', action='count', default=0,
                    help='Increase logging verbosity.')
@cli_tools.argument('--out',
                    help='Also write the reports as JSON lines here.')
@cli_tools.argument('--score', choices=metrics.SEGMENT_SCORES,
                    default='wtcam',
                    help='Segment score for the segment and frame '
                    'levels.  Default: %(default)s')
@cli_tools.argument('--thr', type=float,
                    default=proposals.DEFAULT_THRESHOLD,
                    help='Proposal threshold.  Default: %(default)s')
@cli_tools.argument('--manifest', required=True,
                    help='Manifest of the test videos, with segment '
                    'labels.')
@cli_tools.argument('checkpoints', nargs='+',
                    help='Model checkpoints to evaluate.')
def cmd_eval(checkpoints, manifest, thr=proposals.DEFAULT_THRESHOLD,
             score='wtcam', out=None, verbose=0):
    """
    Evaluate checkpoints at video, segment, frame-level proposal and
    frame level, one table row per checkpoint.
    """

    _setup_logging(verbose)
    arguments = dict(checkpoints=list(checkpoints), manifest=manifest,
                     thr=thr, score=score, out=out)

    return _guarded(_eval, checkpoints, manifest, thr, score, out,
                    arguments)


def _gradcheck(instances, seed, eps, perturb, out, arguments):
    result = gradcheck.check_gradients(instances, seed, eps, perturb)

    name, idx = result.worst
    print('max relative error %.6e over %d coordinates (%d skipped)' %
          (result.max_rel_error, result.checked, result.skipped))
    print('worst coordinate %s%s: analytic %.10e numeric %.10e' %
          (name, list(idx), result.analytic, result.numeric))

    if out:
        with io.open(out, 'w', encoding='utf-8') as f:
            f.write(six.text_type(json.dumps({
                'max_rel_error': result.max_rel_error,
                'worst': [name, list(idx)],
                'instances': result.instances,
                'checked': result.checked,
                'skipped': result.skipped,
            }, sort_keys=True)))
            f.write(u'\n')
        RunManifest('gradcheck', arguments, {'eps': eps}, {'check': seed},
                    {'result': out}).write(out)

    if result.max_rel_error < gradcheck.TOLERANCE:
        return EXIT_OK

    LOG.error('gradient check failed: %s%s off by %.3e', name, list(idx),
              result.max_rel_error)
    return EXIT_RUNTIME


@cli_tools.argument('--verbose', '-v', action='count', default=0,
                    help='Increase logging verbosity.')
@cli_tools.argument('--out',
                    help='Also write the result as JSON here.')
@cli_tools.argument('--perturb-grad', action='store_true', default=False,
                    help='Corrupt the analytic gradients; the check '
                    'must then fail.')
@cli_tools.argument('--eps', type=float, default=1e-5,
                    help='Finite-difference step.  Default: %(default)s')
@cli_tools.argument('--seed', type=int, default=0,
                    help='Instance generator seed.  Default: %(default)s')
@cli_tools.argument('--instances', type=int, default=20,
                    help='Number of random instances.  '
                    'Default: %(default)s')
def cmd_gradcheck(instances=20, seed=0, eps=1e-5, perturb_grad=False,
                  out=None, verbose=0):
    """
    Check the analytic gradients of the full objective against central
    finite differences.  Exits 0 if the maximum relative error is
    below 1e-4.
    """

    _setup_logging(verbose)
    arguments = dict(instances=instances, seed=seed, eps=eps,
                     perturb_grad=perturb_grad, out=out)

    return _guarded(_gradcheck, instances, seed, eps, perturb_grad, out,
                    arguments)


def _scores(checkpoint, manifest, out, thr, videos, arguments):
    params, records = _load_model_inputs(checkpoint, manifest)
    if videos:
        wanted = set(videos)
        records = [r for r in records if r.id in wanted]
        if len(records) != len(wanted):
            raise exceptions.ConfigError('unknown videos: %s' % ', '.join(
                sorted(wanted - set(r.id for r in records))))

    if not os.path.isdir(out):
        os.makedirs(out)

    cache = datastore.FeatureCache()
    written = {}
    for rec in records:
        trace = proposals.compute_tcam(params, cache.load(rec))
        props = proposals.proposals_from_trace(
            trace, thr, rec.frames_per_segment, rec.id)
        path = os.path.join(out, rec.id + '.scores.txt')
        proposals.write_score_dump(
            path, proposals.score_dump(trace, props, rec.segment_labels))
        written[rec.id] = path

    print('wrote score dumps for %d videos to %s' % (len(written), out))

    RunManifest('scores', arguments, {'threshold': thr}, {},
                written).write(os.path.join(out, 'scores'))


@cli_tools.argument('--verbose', '-v', action='count', default=0,
                    help='Increase logging verbosity.')
@cli_tools.argument('--video', dest='videos', action='append',
                    help='Only dump this video; may be repeated.')
@cli_tools.argument('--thr', type=float,
                    default=proposals.DEFAULT_THRESHOLD,
                    help='Proposal threshold.  Default: %(default)s')
@cli_tools.argument('--out', required=True,
                    help='Output directory.')
@cli_tools.argument('--manifest', required=True,
                    help='Manifest of the videos to process.')
@cli_tools.argument('--checkpoint', required=True,
                    help='Model checkpoint.')
def cmd_scores(checkpoint, manifest, out, thr=proposals.DEFAULT_THRESHOLD,
               videos=None, verbose=0):
    """
    Dump per-segment attention, T-CAM, weighted T-CAM, proposal score
    and ground truth of each video for plotting.
    """

    _setup_logging(verbose)
    arguments = dict(checkpoint=checkpoint, manifest=manifest, out=out,
                     thr=thr, videos=videos)

    return _guarded(_scores, checkpoint, manifest, out, thr, videos,
                    arguments)


@cli_tools.argument('--verbose', '-v', action='count', default=0,
                    help='Increase logging verbosity.')
@cli_tools.argument('run_manifest',
                    help='A "%s" file written by another command.' %
                    RUN_SUFFIX)
def cmd_replay(run_manifest, verbose=0):
    """
    Rerun the command recorded in a run manifest.
    """

    _setup_logging(verbose)

    def body():
        return RunManifest.load(run_manifest).replay()

    return _guarded(body)


COMMANDS = {
    'synth': cmd_synth,
    'train': cmd_train,
    'propose': cmd_propose,
    'eval': cmd_eval,
    'gradcheck': cmd_gradcheck,
    'scores': cmd_scores,
    'replay': cmd_replay,
}


def _usage():
    return ('usage: tanomaly {%s} [options]\n' %
            ','.join(sorted(COMMANDS)))


def main(argv=None):
    """
    The console entry point: dispatch to the subcommand named by the
    first argument.

    :param argv: The command line, including the program name.
                 Defaults to ``sys.argv``.

    :returns: The exit code.
    :rtype: ``int``
    """

    argv = list(sys.argv if argv is None else argv)
    if len(argv) < 2 or argv[1] in ('-h', '--help'):
        sys.stderr.write(_usage())
        return EXIT_OK if len(argv) >= 2 else EXIT_USAGE
    if argv[1] not in COMMANDS:
        sys.stderr.write('unknown command %r\n' % argv[1])
        sys.stderr.write(_usage())
        return EXIT_USAGE

    # The subcommand parses the remaining arguments itself
    sys.argv = ['%s %s' % (os.path.basename(argv[0]), argv[1])] + argv[2:]
    return COMMANDS[argv[1]].console()
