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

import numpy as np

from tanomaly import config


class AugmentConfig(config.Config):
    """
    Configuration of the block-sampling augmentation.
    """

    config_args = set(['block_len', 'seed'])
    defaults = {
        'block_len': 3,
        'seed': 0,
    }
    xforms = {
        'block_len': int,
        'seed': config.uint64,
    }

    def validate(self):
        config.require(self.block_len >= 1, 'block_len must be positive')


def num_blocks(seq_t, block_len):
    """
    Compute the number of blocks a sequence splits into; the final
    block is short when ``block_len`` does not divide ``seq_t``.

    :param int seq_t: The sequence length.
    :param int block_len: The block length.

    :returns: ``ceil(seq_t / block_len)``.
    :rtype: ``int``
    """

    return -(-seq_t // block_len)


def sample_indices(seq_t, block_len, rng):
    """
    Draw one source index uniformly from each block.

    :param int seq_t: The sequence length.
    :param int block_len: The block length.
    :param rng: A ``numpy.random.Generator``; advanced by one draw.

    :returns: The chosen indices, one per block, in block order.
    :rtype: ``numpy.ndarray``
    """

    starts = np.arange(num_blocks(seq_t, block_len)) * block_len
    sizes = np.minimum(starts + block_len, seq_t) - starts

    return rng.integers(starts, starts + sizes)


class ViewPair(object):
    """
    Two views of one sequence, each built by picking one feature
    vector per block.
    """

    __slots__ = ['view_a', 'view_b', 'indices_a', 'indices_b']

    def __init__(self, view_a, view_b, indices_a, indices_b):
        self.view_a = view_a
        self.view_b = view_b
        self.indices_a = indices_a
        self.indices_b = indices_b


def make_views(seq, cfg, rng):
    """
    Forge two different versions of a sequence.  The sequence is split
    into blocks ``[0, L), [L, 2L), ...`` and one row is drawn from
    each block, independently for the two views.

    :param seq: The source sequence.
    :type seq: ``tanomaly.datastore.FeatureSequence``
    :param cfg: The augmentation configuration.
    :type cfg: ``AugmentConfig``
    :param rng: The ``numpy.random.Generator`` owned by the caller.

    :returns: The view pair.
    :rtype: ``ViewPair``
    """

    indices_a = sample_indices(seq.T, cfg.block_len, rng)
    indices_b = sample_indices(seq.T, cfg.block_len, rng)

    return ViewPair(seq.take(indices_a), seq.take(indices_b),
                    indices_a, indices_b)


def identity_view(seq, cfg):
    """
    Build the deterministic counterpart of a view: the first row of
    each block.

    :param seq: The source sequence.
    :type seq: ``tanomaly.datastore.FeatureSequence``
    :param cfg: The augmentation configuration.
    :type cfg: ``AugmentConfig``

    :returns: The view.
    :rtype: ``tanomaly.datastore.FeatureSequence``
    """

    return seq.take(np.arange(num_blocks(seq.T, cfg.block_len)) *
                    cfg.block_len)
