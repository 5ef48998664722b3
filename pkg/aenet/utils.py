import os
import sys
import json
import zlib
import random
import multiprocessing

import numpy
import torch

from aenet.config import RUN_LOG_FILE


def set_all_seeds(seed):
    """Just set the seed value for common packages including the standard random."""
    print(f'Setting the seed to {seed}')
    torch.manual_seed(seed)
    random.seed(seed)
    numpy.random.seed(seed % (2 ** 32))


def derive_rng(seed, name=None):
    """Create a generator for one stochastic component.

    :param seed:  the run seed
    :param name:  component name: generators with different names are independent,
                  so adding or removing a component never shifts another one's stream.
    :return: numpy.random.Generator
    """
    if name is None:
        return numpy.random.default_rng(seed)
    return numpy.random.default_rng([seed, zlib.crc32(name.encode())])


def enable_spawn():
    """Enable light-weight children."""
    try:
        multiprocessing.set_start_method('spawn')
    except RuntimeError:
        pass


def read_json(file_name):
    """Read and parse JSON file

    :param file_name: JSON file name
    """
    with open(file_name) as f:
        data = f.read()

    return json.loads(data)


def save_json(file_name, data, indent=4):
    """Save JSON data

    :param file_name:   output file name
    :param data:        JSON data
    :param indent:      JSON indentation
    """
    dir_name = os.path.dirname(file_name)
    if dir_name:
        os.makedirs(dir_name, exist_ok=True)
    with open(file_name, 'w') as f:
        json.dump(data, f, indent=indent, sort_keys=True)
        f.write('\n')


def flatten_sections(conf):
    """Merge nested JSON objects (config sections) into one flat key space.

    :param conf: a parsed JSON config
    :return: a flat dictionary
    """
    res = {}
    for k, v in conf.items():
        if isinstance(v, dict):
            for sk, sv in flatten_sections(v).items():
                if sk in res:
                    raise ValueError(f'Duplicate config key: {sk}')
                res[sk] = sv
        else:
            if k in res:
                raise ValueError(f'Duplicate config key: {k}')
            res[k] = v
    return res


def sync_out_streams():
    """Just flush all stdin and stderr to make streams go in sync"""
    sys.stderr.flush()
    sys.stdout.flush()


class RunLog:
    """Prints messages and copies them to the run log of an output directory.
       The log is restarted by every run, timing data should only be printed.
    """

    def __init__(self, out_dir, file_name=RUN_LOG_FILE):
        os.makedirs(out_dir, exist_ok=True)
        self.file_name = os.path.join(out_dir, file_name)
        open(self.file_name, 'w').close()

    def __call__(self, *args):
        msg = ' '.join(str(a) for a in args)
        print(msg)
        with open(self.file_name, 'a') as f:
            f.write(msg + '\n')
