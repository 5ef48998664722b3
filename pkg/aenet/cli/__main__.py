"""Verb dispatcher: python -m aenet.cli <verb> [options]"""
import sys
import importlib

from aenet.cli.common import run_main
from aenet.errors import EXIT_USAGE

VERBS = {
    'synth': 'aenet.cli.synth',
    'prep': 'aenet.cli.prep',
    'train': 'aenet.cli.train',
    'infer': 'aenet.cli.infer',
    'eval': 'aenet.cli.evaluate',
    'ablate': 'aenet.cli.ablate',
}


def main(argv=None):
    if argv is None:
        argv = sys.argv[1:]
    if not argv or argv[0] not in VERBS:
        print(f'Usage: python -m aenet.cli <verb> [options], verbs: {", ".join(VERBS)}', file=sys.stderr)
        return EXIT_USAGE
    verb = importlib.import_module(VERBS[argv[0]])
    return run_main(verb.main, argv[1:])


if __name__ == '__main__':
    sys.exit(main())
